//! Picard recursion for the distribution-dependent equilibrium.
//!
//! Each iteration freezes the current flow, solves the HJ system for a
//! policy, and propagates the initial law under that policy to get the next
//! flow. The loop stops once consecutive flows agree within the tolerance in
//! `sup_k d(ν_k, ν̃_k)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{
    propagate_flow, validate_generator, FlowCurve, GeneratorModel, ProbabilityVector, StrategyTable,
    TimeGrid,
};
use crate::error::{MfeError, Result};
use crate::hj::{solve_hj_with, CostModel, HjOptions, ValueTable};

#[derive(Clone, Debug)]
pub struct SolverOptions {
    /// Stop once the sup-TV gap between consecutive flows is below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// `ν ← λ ν_new + (1 - λ) ν`.
    pub relaxation: f64,
    /// Overrides the default first flow (the one generated by `ψ[0]`).
    pub initial_flow: Option<FlowCurve>,
    pub hj: HjOptions,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 200,
            relaxation: 1.0,
            initial_flow: None,
            hj: HjOptions::default(),
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(MfeError::InvalidConfig("tolerance must be positive".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(MfeError::InvalidConfig("relaxation must lie in (0, 1]".into()));
        }
        if self.max_iterations == 0 {
            return Err(MfeError::InvalidConfig("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Iteration cap hit while gaps were still shrinking.
    IterationLimit,
    /// Iteration cap hit and the tail of the gap history did not decrease.
    NonConvergent,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `e_n = sup_k d(ν^{(n+1)}_k, ν^{(n)}_k)`.
    pub gaps: Vec<f64>,
    /// Median of `e_{n+1} / e_n` over positive gaps.
    pub ratio_estimate: Option<f64>,
    pub iterations: usize,
    pub status: SolveStatus,
    pub initial_flow_overridden: bool,
}

impl Diagnostics {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// `e_{n+1} / e_n` for every `n` with `e_n > 0`.
    pub fn ratios(&self) -> Vec<f64> {
        gap_ratios(&self.gaps)
    }
}

fn gap_ratios(gaps: &[f64]) -> Vec<f64> {
    gaps.windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .collect()
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

/// Result of [`picard_solve`]; check `diagnostics.status` before trusting it.
#[derive(Clone, Debug)]
pub struct Equilibrium {
    pub initial: ProbabilityVector,
    pub grid: TimeGrid,
    /// The flow frozen in the last HJ solve.
    pub flow: FlowCurve,
    pub policy: StrategyTable,
    pub values: ValueTable,
    pub diagnostics: Diagnostics,
}

/// `π⁰ = ψ[0]` on every cell.
pub fn myopic_policy(
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    grid: &TimeGrid,
) -> Result<StrategyTable> {
    let m = gen.states();
    let zeros = vec![0.0; m];
    let mut pi = StrategyTable::constant(grid.steps(), m, 0.0);
    for k in 0..grid.steps() {
        let t = grid.node(k);
        for i in 0..m {
            pi.set(k, i, cost.argmin(gen, t, i, &zeros)?);
        }
    }
    Ok(pi)
}

/// Alternates the backward HJ solve and forward propagation until the flow
/// is self-consistent.
pub fn picard_solve(
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    rho: &ProbabilityVector,
    grid: &TimeGrid,
    opts: &SolverOptions,
) -> Result<Equilibrium> {
    opts.validate()?;
    if rho.len() != gen.states() {
        return Err(MfeError::DimensionMismatch {
            expected: gen.states(),
            found: rho.len(),
        });
    }
    let mut flow = match &opts.initial_flow {
        Some(f) => {
            f.check_grid(gen.states(), grid)?;
            f.clone()
        }
        None => propagate_flow(gen, rho, &myopic_policy(gen, cost, grid)?, grid)?,
    };
    let mut gaps = Vec::new();
    for n in 1..=opts.max_iterations {
        let sol = solve_hj_with(gen, cost, &flow, grid, &opts.hj)?;
        let fresh = propagate_flow(gen, rho, &sol.policy, grid)?;
        let next = if opts.relaxation == 1.0 {
            fresh
        } else {
            fresh.mix(&flow, opts.relaxation)?
        };
        let gap = next.sup_distance(&flow)?;
        if !gap.is_finite() {
            return Err(MfeError::Numerical(format!("non-finite gap at iteration {n}")));
        }
        let ratio = gaps.last().filter(|&&g: &&f64| g > 0.0).map(|g| gap / g);
        tracing::debug!(iteration = n, gap, ratio = ratio.unwrap_or(f64::NAN), "picard iteration");
        gaps.push(gap);

        let done = gap < opts.tolerance;
        if done || n == opts.max_iterations {
            let status = if done {
                SolveStatus::Converged
            } else if tail_non_decreasing(&gaps) {
                SolveStatus::NonConvergent
            } else {
                SolveStatus::IterationLimit
            };
            if !done {
                tracing::warn!(iterations = n, last_gap = gap, ?status, "picard iteration did not converge");
            }
            let diagnostics = Diagnostics {
                ratio_estimate: median(gap_ratios(&gaps)),
                gaps,
                iterations: n,
                status,
                initial_flow_overridden: opts.initial_flow.is_some(),
            };
            return Ok(Equilibrium {
                initial: rho.clone(),
                grid: *grid,
                flow,
                policy: sol.policy,
                values: sol.values,
                diagnostics,
            });
        }
        flow = next;
    }
    unreachable!("loop returns on its last iteration")
}

fn tail_non_decreasing(gaps: &[f64]) -> bool {
    let tail = &gaps[gaps.len().saturating_sub(5)..];
    tail.len() >= 2 && tail.windows(2).all(|w| w[1] >= w[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractionVerdict {
    /// The sampled product is below one. The estimates are lower bounds, so
    /// this means no violation was observed, not a proof.
    Contractive,
    NotProvablyContractive,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContractionReport {
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub horizon: f64,
    pub product: f64,
    pub verdict: ContractionVerdict,
    pub note: String,
}

fn random_distribution(rng: &mut ChaCha8Rng, m: usize) -> ProbabilityVector {
    let w: Vec<f64> = (0..m).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    ProbabilityVector::new(w).expect("positive weights")
}

fn random_policy(
    rng: &mut ChaCha8Rng,
    gen: &dyn GeneratorModel,
    grid: &TimeGrid,
) -> StrategyTable {
    let m = gen.states();
    StrategyTable::from_fn(grid.steps(), m, |k, i| {
        let iv = gen.admissible(grid.node(k), i);
        iv.lo + iv.width() * rng.random::<f64>()
    })
}

/// Samples the three Lipschitz constants of the contraction argument.
///
/// κ₁ comes from [`validate_generator`], κ₂ from difference quotients of the
/// argmin map, κ₃ from pairs of HJ solves on sampled flows. All three are
/// maxima over samples and hence lower bounds on the true constants.
pub fn estimate_constants(
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    grid: &TimeGrid,
    samples: usize,
    seed: u64,
) -> Result<ContractionReport> {
    let m = gen.states();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kappa1 = validate_generator(gen, grid, samples.max(2))?.kappa1_hat;

    let scale = cost.value_bound(grid.horizon()).max(1.0);
    let mut kappa2: f64 = 0.0;
    for s in 0..samples.max(1) * 8 {
        let k = rng.random_range(0..grid.steps());
        let t = grid.node(k);
        let i = rng.random_range(0..m);
        let h: Vec<f64> = (0..m).map(|_| scale * rng.random::<f64>()).collect();
        let step = scale * 10f64.powf(-3.0 * rng.random::<f64>());
        let dir: Vec<f64> = match (s % 2, gen.affine_loadings(t, i)) {
            (0, Some(beta)) => beta.iter().map(|b| b.signum()).collect(),
            _ => (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
        };
        let h2: Vec<f64> = h.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
        let norm = h.iter().zip(&h2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if norm > 0.0 {
            let a = cost.argmin(gen, t, i, &h)?;
            let b = cost.argmin(gen, t, i, &h2)?;
            kappa2 = kappa2.max(gen.action_distance(a, b) / norm);
        }
    }

    let mut kappa3: f64 = 0.0;
    let hj = HjOptions::default();
    for s in 0..samples.max(1) {
        let base = propagate_flow(gen, &random_distribution(&mut rng, m), &random_policy(&mut rng, gen, grid), grid)?;
        let other = propagate_flow(gen, &random_distribution(&mut rng, m), &random_policy(&mut rng, gen, grid), grid)?;
        let probe = if s % 2 == 0 {
            other
        } else {
            other.mix(&base, 0.05)?
        };
        let dist = base.sup_distance(&probe)?;
        if dist <= 1e-12 {
            continue;
        }
        let a = solve_hj_with(gen, cost, &base, grid, &hj)?;
        let b = solve_hj_with(gen, cost, &probe, grid, &hj)?;
        kappa3 = kappa3.max(a.values.sup_distance(&b.values)? / dist);
    }

    let product = kappa1 * kappa2 * kappa3 * grid.horizon();
    let verdict = if product < 1.0 {
        ContractionVerdict::Contractive
    } else {
        ContractionVerdict::NotProvablyContractive
    };
    Ok(ContractionReport {
        kappa1,
        kappa2,
        kappa3,
        horizon: grid.horizon(),
        product,
        verdict,
        note: "sampled lower bounds on the Lipschitz constants; \"contractive\" means no violation \
               of the sufficient condition was observed"
            .into(),
    })
}
