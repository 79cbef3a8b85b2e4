//! Independent checks of a computed equilibrium.
//!
//! Spike gaps are computed from trajectory costs ([`CostEvaluator`]), never
//! from the solver's value table, so they test the HJ solution from outside.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{
    propagate_flow, sample_interval, strategy_distance_until, transition_for_profile, tv_distance,
    validate_generator, Action, FlowCurve, GeneratorModel, ProbabilityVector, StrategyTable,
    TimeGrid,
};
use crate::error::{MfeError, Result};
use crate::hj::{scan_argmin, CostEvaluator, CostModel, SCAN_TOLERANCE};
use crate::mfe::Equilibrium;

/// Action profile of a spike: `u` in the spiked state, `u` clamped to the
/// admissible interval elsewhere.
pub fn spike_profile(gen: &dyn GeneratorModel, t: f64, state: usize, u: Action) -> Vec<Action> {
    (0..gen.states())
        .map(|j| if j == state { u } else { gen.admissible(t, j).clamp(u) })
        .collect()
}

struct SpikeContext<'a> {
    gen: &'a dyn GeneratorModel,
    eval: CostEvaluator<'a>,
    grid: TimeGrid,
}

impl<'a> SpikeContext<'a> {
    fn new(
        gen: &'a dyn GeneratorModel,
        cost: &'a dyn CostModel,
        flow: &'a FlowCurve,
        policy: &'a StrategyTable,
        grid: &TimeGrid,
    ) -> Result<Self> {
        Ok(Self {
            gen,
            eval: CostEvaluator::new(gen, cost, flow, policy, grid)?,
            grid: *grid,
        })
    }

    fn gap(&self, k: usize, i: usize, u: Action, eps_nodes: usize, baseline: f64) -> Result<f64> {
        let n = self.grid.steps();
        if eps_nodes == 0 || k + eps_nodes > n {
            return Err(MfeError::InvalidConfig(format!(
                "spike of {eps_nodes} cells at node {k} does not fit in {n} cells"
            )));
        }
        self.gen.check_admissible(self.grid.node(k), i, u)?;
        let cells: Vec<(Vec<Action>, DMatrix<f64>)> = (k..k + eps_nodes)
            .map(|s| {
                let t = self.grid.node(s);
                let profile = spike_profile(self.gen, t, i, u);
                let p = transition_for_profile(self.gen, t, self.grid.dt(), &profile);
                (profile, p)
            })
            .collect();
        let mut mu = vec![0.0; self.gen.states()];
        mu[i] = 1.0;
        let spiked = self.eval.cost_from(k, k, mu, Some(&cells));
        Ok((spiked - baseline) / (eps_nodes as f64 * self.grid.dt()))
    }
}

/// `[V_t(i, spiked) - V_t(i, π)] / ε` with the flow held at the equilibrium
/// flow and `ε = eps_nodes · Δ`.
pub fn spike_gap(
    eq: &Equilibrium,
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    k: usize,
    i: usize,
    u: Action,
    eps_nodes: usize,
) -> Result<f64> {
    let ctx = SpikeContext::new(gen, cost, &eq.flow, &eq.policy, &eq.grid)?;
    let baseline = ctx.eval.cost_at(k, k, i);
    ctx.gap(k, i, u, eps_nodes, baseline)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpikeEntry {
    pub node: usize,
    pub t: f64,
    pub state: usize,
    pub action: Action,
    pub gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpikeReport {
    pub entries: Vec<SpikeEntry>,
    pub min_gap: f64,
    pub tolerance: f64,
    pub violations: Vec<SpikeEntry>,
}

impl SpikeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Default spike tolerance `5 Δ`.
pub fn default_spike_tolerance(grid: &TimeGrid) -> f64 {
    5.0 * grid.dt()
}

/// One-cell spikes at every node and state, with `action_samples` evenly
/// spaced actions plus the interval endpoints and the equilibrium action.
pub fn verify_local_optimality(
    eq: &Equilibrium,
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    action_samples: usize,
    tol_spike: Option<f64>,
) -> Result<SpikeReport> {
    let grid = eq.grid;
    let tolerance = tol_spike.unwrap_or_else(|| default_spike_tolerance(&grid));
    let ctx = SpikeContext::new(gen, cost, &eq.flow, &eq.policy, &grid)?;
    let m = gen.states();
    let cells: Vec<(usize, usize)> = (0..grid.steps())
        .flat_map(|k| (0..m).map(move |i| (k, i)))
        .collect();
    let per_cell: Vec<Vec<SpikeEntry>> = cells
        .par_iter()
        .map(|&(k, i)| {
            let t = grid.node(k);
            let iv = gen.admissible(t, i);
            let mut actions = sample_interval(&iv, action_samples.max(2));
            actions.push(eq.policy.get(k, i));
            let baseline = ctx.eval.cost_at(k, k, i);
            actions
                .into_iter()
                .map(|u| {
                    Ok(SpikeEntry {
                        node: k,
                        t,
                        state: i,
                        action: u,
                        gap: ctx.gap(k, i, u, 1, baseline)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let entries: Vec<SpikeEntry> = per_cell.into_iter().flatten().collect();
    let min_gap = entries.iter().map(|e| e.gap).fold(f64::INFINITY, f64::min);
    let violations = entries
        .iter()
        .filter(|e| e.gap < -tolerance)
        .cloned()
        .collect();
    Ok(SpikeReport {
        entries,
        min_gap,
        tolerance,
        violations,
    })
}

/// The entry with the smallest gap among spikes whose action is at least
/// `min_separation` away from the equilibrium action.
pub fn worst_spike<'r>(
    report: &'r SpikeReport,
    eq: &Equilibrium,
    min_separation: f64,
) -> Option<&'r SpikeEntry> {
    report
        .entries
        .iter()
        .filter(|e| (e.action - eq.policy.get(e.node, e.state)).abs() >= min_separation)
        .min_by(|a, b| a.gap.total_cmp(&b.gap))
}

/// Output of [`dp_oracle`].
#[derive(Clone, Debug)]
pub struct DpSolution {
    /// `W_k(i)` for `k = 0..=N`.
    pub values: Vec<Vec<f64>>,
    pub policy: StrategyTable,
}

impl DpSolution {
    /// `sup_{k,i} |W_k(i) - other[k][i]|`.
    pub fn sup_distance(&self, other: &[Vec<f64>]) -> f64 {
        self.values
            .iter()
            .zip(other)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Classical backward induction with the discount time fixed at node `tau_node`:
/// `W_k(i) = min_v [Δ f(i,v; ν_k) + Σ_j p_Δ^v(i,j) W_{k+1}(j)]`, where
/// `p_Δ^v` is a row of the exact one-cell transition. The minimization uses
/// the scan-and-refine search on this exponential-step objective, not the
/// generator-form argmin of the HJ solver.
pub fn dp_oracle(
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    tau_node: usize,
    flow: &FlowCurve,
    grid: &TimeGrid,
) -> Result<DpSolution> {
    let m = gen.states();
    flow.check_grid(m, grid)?;
    let n = grid.steps();
    let dt = grid.dt();
    let tau = grid.node(tau_node);
    let mut values = vec![vec![0.0; m]; n + 1];
    values[n] = (0..m).map(|i| cost.terminal(tau, i, flow.at(n))).collect();
    let mut policy = StrategyTable::constant(n, m, 0.0);
    for k in (0..n).rev() {
        let t = grid.node(k);
        let next = values[k + 1].clone();
        let nu = flow.at(k);
        let step: Vec<(Action, f64)> = (0..m)
            .into_par_iter()
            .map(|i| {
                let iv = gen.admissible(t, i);
                if iv.is_empty() {
                    return Err(MfeError::EmptyAdmissibleSet { t, state: i });
                }
                let objective = |v: Action| {
                    let p = transition_for_profile(gen, t, dt, &spike_profile(gen, t, i, v));
                    let cont: f64 = (0..m).map(|j| p[(i, j)] * next[j]).sum();
                    dt * cost.running_total(tau, t, i, v, nu) + cont
                };
                let v = scan_argmin(&iv, SCAN_TOLERANCE, objective);
                Ok((v, objective(v)))
            })
            .collect::<Result<_>>()?;
        for (i, (v, w)) in step.into_iter().enumerate() {
            policy.set(k, i, v);
            values[k][i] = w;
        }
    }
    Ok(DpSolution { values, policy })
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundsReport {
    pub value_bound: f64,
    pub value_min: f64,
    pub value_max: f64,
    /// Worst sampled `f̄` or `g` above K₂ (positive means violated).
    pub cost_cap_excess: f64,
    /// Worst sampled `Ψ` above its cap.
    pub control_cap_excess: f64,
    /// Worst sampled distribution-Lipschitz quotient minus K₃.
    pub lipschitz_excess: f64,
    /// Worst `d(ν, ν') - d(ρ, γ) - κ̂₁ ∫ d_U(π, π')` over sampled pairs.
    pub flow_stability_excess: f64,
    pub kappa1_hat: f64,
    pub passed: bool,
}

const CHECK_SLACK: f64 = 1e-9;

fn random_distribution(rng: &mut ChaCha8Rng, m: usize) -> ProbabilityVector {
    let w: Vec<f64> = (0..m).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    ProbabilityVector::new(w).expect("positive weights")
}

/// Checks the uniform value bound, the declared cost constants on sampled
/// inputs, and flow stability in the initial law and the strategy.
pub fn check_bounds_and_lipschitz(
    eq: &Equilibrium,
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    samples: usize,
    seed: u64,
) -> Result<BoundsReport> {
    let grid = eq.grid;
    let m = gen.states();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let value_bound = cost.value_bound(grid.horizon());
    let value_min = eq.values.min();
    let value_max = eq.values.max();

    let k2 = cost.cost_cap();
    let mut cost_cap_excess = f64::NEG_INFINITY;
    let mut control_cap_excess = f64::NEG_INFINITY;
    let mut lipschitz_excess = f64::NEG_INFINITY;
    for _ in 0..samples.max(1) {
        let a = rng.random_range(0..=grid.steps());
        let k = rng.random_range(a.min(grid.steps())..=grid.steps());
        let (tau, t) = (grid.node(a), grid.node(k));
        let rho = random_distribution(&mut rng, m);
        let rho2 = if rng.random::<bool>() {
            random_distribution(&mut rng, m)
        } else {
            ProbabilityVector::dirac(m, rng.random_range(0..m))
        };
        let d = tv_distance(&rho, &rho2)?;
        for i in 0..m {
            let f1 = cost.running(tau, t, i, &rho);
            let g1 = cost.terminal(tau, i, &rho);
            let f2 = cost.running(tau, t, i, &rho2);
            let g2 = cost.terminal(tau, i, &rho2);
            for x in [f1, g1, f2, g2] {
                cost_cap_excess = cost_cap_excess.max((x - k2).max(-x));
            }
            if d > 0.0 {
                let quotient = ((f1 - f2).abs() + (g1 - g2).abs()) / d;
                lipschitz_excess = lipschitz_excess.max(quotient - cost.distribution_lipschitz());
            }
            let iv = gen.admissible(t, i);
            for v in sample_interval(&iv, 5) {
                let psi = cost.control(t, i, v);
                control_cap_excess = control_cap_excess.max((psi - cost.control_cap()).max(-psi));
            }
        }
    }

    let kappa1_hat = validate_generator(gen, &grid, 9)?.kappa1_hat;
    let mut flow_stability_excess = f64::NEG_INFINITY;
    for _ in 0..samples.max(1).min(16) {
        let rho = random_distribution(&mut rng, m);
        let gamma = random_distribution(&mut rng, m);
        let shift = rng.random::<f64>();
        let other = StrategyTable::from_fn(grid.steps(), m, |k, i| {
            let iv = gen.admissible(grid.node(k), i);
            iv.clamp(eq.policy.get(k, i) + shift * (iv.hi - iv.lo) * 0.5)
        });
        let a = propagate_flow(gen, &rho, &eq.policy, &grid)?;
        let b = propagate_flow(gen, &gamma, &other, &grid)?;
        let d0 = tv_distance(&rho, &gamma)?;
        for k in 0..=grid.steps() {
            let spread = strategy_distance_until(&eq.policy, &other, &grid, k, |x, y| gen.action_distance(x, y))?;
            let excess = tv_distance(a.at(k), b.at(k))? - d0 - kappa1_hat * spread;
            flow_stability_excess = flow_stability_excess.max(excess);
        }
    }

    let passed = value_min >= -CHECK_SLACK
        && value_max <= value_bound + CHECK_SLACK
        && cost_cap_excess <= CHECK_SLACK
        && control_cap_excess <= CHECK_SLACK
        && lipschitz_excess <= CHECK_SLACK
        && flow_stability_excess <= CHECK_SLACK;
    Ok(BoundsReport {
        value_bound,
        value_min,
        value_max,
        cost_cap_excess,
        control_cap_excess,
        lipschitz_excess,
        flow_stability_excess,
        kappa1_hat,
        passed,
    })
}
