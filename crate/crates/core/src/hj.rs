//! Backward solver for the two-index time-inconsistent Hamilton–Jacobi
//! system with a frozen flow, plus trajectory cost evaluation.
//!
//! `Θ_{τ,t}(i)` is the cost of the equilibrium tail started in state `i` at
//! time `t`, discounted from the point of view of time `τ`. Only the diagonal
//! `θ_t = Θ_{t,t}` feeds the policy, through the argmin map `ψ`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::chain::{
    propagate_with, row_times, transition_for_profile, transitions, Action,
    ActionInterval, FlowCurve, GeneratorModel, ProbabilityVector, StrategyTable, TimeGrid,
};
use crate::error::{MfeError, Result};

/// Slack applied when checking the uniform value bound.
pub const BOUND_SLACK: f64 = 1e-9;

/// Separable cost `f = f̄ + Ψ` with terminal cost `g`.
pub trait CostModel: Send + Sync {
    /// Distribution part `f̄_{τ,t}(i; ρ)`.
    fn running(&self, tau: f64, t: f64, i: usize, rho: &ProbabilityVector) -> f64;

    /// Control part `Ψ_t(i, v)`.
    fn control(&self, t: f64, i: usize, v: Action) -> f64;

    /// Terminal cost `g_τ(i; ρ)`.
    fn terminal(&self, tau: f64, i: usize, rho: &ProbabilityVector) -> f64;

    /// K₂: cap on `f̄` and `g`.
    fn cost_cap(&self) -> f64;

    /// Cap on `Ψ` over admissible actions.
    fn control_cap(&self) -> f64;

    /// K₃: Lipschitz constant of `f̄ + g` in the distribution.
    fn distribution_lipschitz(&self) -> f64;

    /// True when neither `f̄` nor `g` reads the distribution.
    fn is_distribution_independent(&self) -> bool {
        false
    }

    /// True when neither `f̄` nor `g` depends on `τ`.
    fn is_tau_independent(&self) -> bool {
        false
    }

    /// `ψ_t[h](i)`: minimizer over `U_t(i)` of `Ψ_t(i,v) + Σ_j h(j) q_t^v(i,j)`.
    ///
    /// The default scans the admissible interval and refines by golden
    /// section; ties go to the smallest action.
    fn argmin(&self, gen: &dyn GeneratorModel, t: f64, i: usize, h: &[f64]) -> Result<Action> {
        let iv = gen.admissible(t, i);
        if iv.is_empty() {
            return Err(MfeError::EmptyAdmissibleSet { t, state: i });
        }
        let mut row = vec![0.0; gen.states()];
        Ok(scan_argmin(&iv, SCAN_TOLERANCE, |v| {
            gen.rates(t, i, v, &mut row);
            self.control(t, i, v) + row.iter().zip(h).map(|(q, x)| q * x).sum::<f64>()
        }))
    }

    /// Full running cost `f_{τ,t}(i, v; ρ)`.
    fn running_total(&self, tau: f64, t: f64, i: usize, v: Action, rho: &ProbabilityVector) -> f64 {
        self.running(tau, t, i, rho) + self.control(t, i, v)
    }

    /// `(K₁ + K₂) T + K₂`, the uniform bound on `Θ`.
    fn value_bound(&self, horizon: f64) -> f64 {
        (self.control_cap() + self.cost_cap()) * horizon + self.cost_cap()
    }
}

/// Tolerance of the generic scan-and-refine argmin.
pub const SCAN_TOLERANCE: f64 = 1e-10;
const SCAN_POINTS: usize = 65;

/// Minimizes `objective` over `iv`: a uniform scan picks the best cell and a
/// golden-section search refines inside its neighbours.
pub fn scan_argmin(iv: &ActionInterval, tol: f64, mut objective: impl FnMut(f64) -> f64) -> Action {
    if iv.width() == 0.0 {
        return iv.lo;
    }
    let step = iv.width() / (SCAN_POINTS - 1) as f64;
    let at = |s: usize| if s == SCAN_POINTS - 1 { iv.hi } else { iv.lo + step * s as f64 };
    let mut best = 0;
    let mut best_val = objective(at(0));
    for s in 1..SCAN_POINTS {
        let val = objective(at(s));
        if val < best_val {
            best = s;
            best_val = val;
        }
    }
    let mut a = at(best.saturating_sub(1));
    let mut b = at((best + 1).min(SCAN_POINTS - 1));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = objective(c);
    let mut fd = objective(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    let refined = iv.clamp(0.5 * (a + b));
    let refined_val = objective(refined);
    let scanned = at(best);
    if refined_val < best_val {
        refined
    } else {
        scanned
    }
}

/// `𝒬_t^u[h](i) = Σ_j q_t^{u(i)}(i,j) h(j)`.
pub fn apply_generator(
    gen: &dyn GeneratorModel,
    profile: &[Action],
    t: f64,
    h: &[f64],
) -> Result<Vec<f64>> {
    let m = gen.states();
    if profile.len() != m || h.len() != m {
        return Err(MfeError::DimensionMismatch {
            expected: m,
            found: if profile.len() != m { profile.len() } else { h.len() },
        });
    }
    let mut row = vec![0.0; m];
    profile
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            gen.check_admissible(t, i, v)?;
            gen.rates(t, i, v, &mut row);
            Ok(row.iter().zip(h).map(|(q, x)| q * x).sum())
        })
        .collect()
}

/// `Θ_{a,k}(i)` on the `(τ, t)` grid.
///
/// Rows are stored for a subset of discount nodes (every `stride`-th node
/// plus the last); other rows are linear interpolations in `τ`, which is exact
/// when `f̄` and `g` are piecewise linear in `τ` between stored nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    steps: usize,
    states: usize,
    tau_nodes: Vec<usize>,
    data: Vec<f64>,
}

impl ValueTable {
    fn new(steps: usize, states: usize, stride: usize) -> Self {
        let stride = stride.max(1);
        let mut tau_nodes: Vec<usize> = (0..=steps).step_by(stride).collect();
        if *tau_nodes.last().expect("nonempty") != steps {
            tau_nodes.push(steps);
        }
        let data = vec![0.0; tau_nodes.len() * (steps + 1) * states];
        Self {
            steps,
            states,
            tau_nodes,
            data,
        }
    }

    fn row_len(&self) -> usize {
        (self.steps + 1) * self.states
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn states(&self) -> usize {
        self.states
    }

    /// Discount nodes with stored rows.
    pub fn tau_nodes(&self) -> &[usize] {
        &self.tau_nodes
    }

    fn stored(&self, r: usize, k: usize, i: usize) -> f64 {
        self.data[r * self.row_len() + k * self.states + i]
    }

    /// `Θ_{t_a, t_k}(i)`.
    pub fn get(&self, a: usize, k: usize, i: usize) -> f64 {
        match self.tau_nodes.binary_search(&a) {
            Ok(r) => self.stored(r, k, i),
            Err(r) => {
                let (lo, hi) = (self.tau_nodes[r - 1], self.tau_nodes[r]);
                let w = (a - lo) as f64 / (hi - lo) as f64;
                (1.0 - w) * self.stored(r - 1, k, i) + w * self.stored(r, k, i)
            }
        }
    }

    /// `Θ_{t_a, t_k}(·)`.
    pub fn vector(&self, a: usize, k: usize) -> Vec<f64> {
        (0..self.states).map(|i| self.get(a, k, i)).collect()
    }

    /// `θ_k = Θ_{k,k}`.
    pub fn diagonal(&self, k: usize) -> Vec<f64> {
        self.vector(k, k)
    }

    /// All diagonal vectors `θ_0 .. θ_N`.
    pub fn diagonal_curve(&self) -> Vec<Vec<f64>> {
        (0..=self.steps).map(|k| self.diagonal(k)).collect()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `sup_{a,k,i} |Θ - Θ̃|` over stored rows.
    pub fn sup_distance(&self, other: &ValueTable) -> Result<f64> {
        if self.data.len() != other.data.len() || self.tau_nodes != other.tau_nodes {
            return Err(MfeError::GridMismatch("value tables have different layouts".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Solver knobs for [`solve_hj_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HjOptions {
    /// Store every `tau_stride`-th discount row.
    pub tau_stride: usize,
}

impl Default for HjOptions {
    fn default() -> Self {
        Self { tau_stride: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct HjSolution {
    pub values: ValueTable,
    pub policy: StrategyTable,
    /// Largest excursion of `Θ` outside `[0, (K₁+K₂)T + K₂]`; zero when the
    /// declared constants are consistent.
    pub bound_excess: f64,
}

fn check_inputs(gen: &dyn GeneratorModel, flow: &FlowCurve, grid: &TimeGrid) -> Result<()> {
    flow.check_grid(gen.states(), grid)
}

fn terminal_layer(
    table: &mut ValueTable,
    cost: &dyn CostModel,
    flow: &FlowCurve,
    grid: &TimeGrid,
) {
    let n = grid.steps();
    let m = table.states;
    let row_len = table.row_len();
    let tau_nodes = table.tau_nodes.clone();
    for (r, &a) in tau_nodes.iter().enumerate() {
        let tau = grid.node(a);
        for i in 0..m {
            table.data[r * row_len + n * m + i] = cost.terminal(tau, i, flow.at(n));
        }
    }
}

/// One backward step for every stored row: `Θ_{a,k} = P Θ_{a,k+1} + Δ f`.
#[allow(clippy::too_many_arguments)]
fn backward_step(
    table: &mut ValueTable,
    cost: &dyn CostModel,
    grid: &TimeGrid,
    k: usize,
    p: &DMatrix<f64>,
    profile: &[Action],
    rho: &ProbabilityVector,
) {
    let m = table.states;
    let dt = grid.dt();
    let t = grid.node(k);
    let control: Vec<f64> = profile
        .iter()
        .enumerate()
        .map(|(i, &v)| cost.control(t, i, v))
        .collect();
    let row_len = table.row_len();
    let tau_nodes = &table.tau_nodes;
    table
        .data
        .par_chunks_mut(row_len)
        .zip(tau_nodes.par_iter())
        .for_each(|(row, &a)| {
            let tau = grid.node(a);
            let (head, tail) = row.split_at_mut((k + 1) * m);
            let next = &tail[..m];
            let cur = &mut head[k * m..];
            for i in 0..m {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += p[(i, j)] * next[j];
                }
                cur[i] = acc + dt * (cost.running(tau, t, i, rho) + control[i]);
            }
        });
}

fn bound_excess(table: &ValueTable, cost: &dyn CostModel, grid: &TimeGrid) -> f64 {
    let bound = cost.value_bound(grid.horizon());
    let hi = table.max() - bound;
    let lo = -table.min();
    hi.max(lo).max(0.0)
}

/// Solves the time-inconsistent HJ system for a frozen flow `ν` by backward
/// induction. The policy on cell `k` is `ψ_{t_k}[θ_{k+1}]`.
pub fn solve_hj(
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    flow: &FlowCurve,
    grid: &TimeGrid,
) -> Result<HjSolution> {
    solve_hj_with(gen, cost, flow, grid, &HjOptions::default())
}

pub fn solve_hj_with(
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    flow: &FlowCurve,
    grid: &TimeGrid,
    opts: &HjOptions,
) -> Result<HjSolution> {
    check_inputs(gen, flow, grid)?;
    let n = grid.steps();
    let m = gen.states();
    let mut table = ValueTable::new(n, m, opts.tau_stride);
    let mut policy = StrategyTable::constant(n, m, 0.0);
    terminal_layer(&mut table, cost, flow, grid);

    let mut diag_next = table.diagonal(n);
    for k in (0..n).rev() {
        let t = grid.node(k);
        for i in 0..m {
            let v = cost.argmin(gen, t, i, &diag_next)?;
            if !v.is_finite() {
                return Err(MfeError::ArgminFailure {
                    t,
                    state: i,
                    reason: format!("non-finite action {v}"),
                });
            }
            gen.check_admissible(t, i, v).map_err(|e| MfeError::ArgminFailure {
                t,
                state: i,
                reason: e.to_string(),
            })?;
            policy.row_mut(k)[i] = v;
        }
        let p = transition_for_profile(gen, t, grid.dt(), policy.row(k));
        backward_step(&mut table, cost, grid, k, &p, policy.row(k), flow.at(k));
        diag_next = table.diagonal(k);
        if diag_next.iter().any(|x| !x.is_finite()) {
            return Err(MfeError::Numerical(format!("non-finite value at node {k}")));
        }
    }

    let excess = bound_excess(&table, cost, grid);
    if excess > BOUND_SLACK {
        tracing::warn!(
            excess,
            bound = cost.value_bound(grid.horizon()),
            "value table leaves the declared uniform bound"
        );
    }
    Ok(HjSolution {
        values: table,
        policy,
        bound_excess: excess,
    })
}

/// `Θ` for a fixed strategy: the same backward recursion without the argmin.
pub fn policy_values(
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    flow: &FlowCurve,
    pi: &StrategyTable,
    grid: &TimeGrid,
) -> Result<ValueTable> {
    check_inputs(gen, flow, grid)?;
    let mats = transitions(gen, pi, grid)?;
    let mut table = ValueTable::new(grid.steps(), gen.states(), 1);
    terminal_layer(&mut table, cost, flow, grid);
    for k in (0..grid.steps()).rev() {
        backward_step(&mut table, cost, grid, k, &mats[k], pi.row(k), flow.at(k));
    }
    Ok(table)
}

/// Trajectory cost evaluation with cached cell transitions.
pub struct CostEvaluator<'a> {
    gen: &'a dyn GeneratorModel,
    cost: &'a dyn CostModel,
    flow: &'a FlowCurve,
    pi: &'a StrategyTable,
    grid: TimeGrid,
    mats: Vec<DMatrix<f64>>,
}

impl<'a> CostEvaluator<'a> {
    pub fn new(
        gen: &'a dyn GeneratorModel,
        cost: &'a dyn CostModel,
        flow: &'a FlowCurve,
        pi: &'a StrategyTable,
        grid: &TimeGrid,
    ) -> Result<Self> {
        check_inputs(gen, flow, grid)?;
        let mats = transitions(gen, pi, grid)?;
        Ok(Self {
            gen,
            cost,
            flow,
            pi,
            grid: *grid,
            mats,
        })
    }

    pub fn transition(&self, k: usize) -> &DMatrix<f64> {
        &self.mats[k]
    }

    /// `J_{t_a, t_k}(i, φ_{t_k}[π]; ν)`.
    pub fn cost_at(&self, a: usize, k: usize, i: usize) -> f64 {
        let mut mu = vec![0.0; self.gen.states()];
        mu[i] = 1.0;
        self.cost_from(a, k, mu, None)
    }

    /// Cost of the law `mu` at node `k`; `override_cells` replaces the action
    /// profile on its leading cells (a spike).
    pub fn cost_from(
        &self,
        a: usize,
        k: usize,
        mut mu: Vec<f64>,
        override_cells: Option<&[(Vec<Action>, DMatrix<f64>)]>,
    ) -> f64 {
        let n = self.grid.steps();
        let tau = self.grid.node(a);
        let dt = self.grid.dt();
        let mut acc = 0.0;
        for s in k..n {
            let t = self.grid.node(s);
            let spiked = override_cells.and_then(|cells| cells.get(s - k));
            let (profile, p) = match spiked {
                Some((profile, p)) => (profile.as_slice(), p),
                None => (self.pi.row(s), &self.mats[s]),
            };
            let nu = self.flow.at(s);
            let mut running = 0.0;
            for (j, &w) in mu.iter().enumerate() {
                if w != 0.0 {
                    running += w * self.cost.running_total(tau, t, j, profile[j], nu);
                }
            }
            acc += dt * running;
            mu = row_times(&mu, p);
        }
        let nu_t = self.flow.at(n);
        acc + mu
            .iter()
            .enumerate()
            .map(|(j, &w)| w * self.cost.terminal(tau, j, nu_t))
            .sum::<f64>()
    }

    /// Transition of a cell under an arbitrary action profile.
    pub fn profile_transition(&self, k: usize, profile: &[Action]) -> DMatrix<f64> {
        transition_for_profile(self.gen, self.grid.node(k), self.grid.dt(), profile)
    }
}

/// `J_{t_a, t_k}(i, φ_{t_k}[π]; ν)` by forward propagation of `δ_i`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cost(
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    flow: &FlowCurve,
    pi: &StrategyTable,
    grid: &TimeGrid,
    a: usize,
    k: usize,
    i: usize,
) -> Result<f64> {
    if i >= gen.states() {
        return Err(MfeError::DimensionMismatch {
            expected: gen.states(),
            found: i + 1,
        });
    }
    Ok(CostEvaluator::new(gen, cost, flow, pi, grid)?.cost_at(a, k, i))
}

/// Population cost `𝐉_{t_a, t_k}(ρ, π)` with the self-generated flow from
/// `ρ` at node `k` inside `f̄` and `g`.
pub fn evaluate_population_cost(
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    rho: &ProbabilityVector,
    pi: &StrategyTable,
    grid: &TimeGrid,
    a: usize,
    k: usize,
) -> Result<f64> {
    if rho.len() != gen.states() {
        return Err(MfeError::DimensionMismatch {
            expected: gen.states(),
            found: rho.len(),
        });
    }
    let mats = transitions(gen, pi, grid)?;
    let flow = propagate_with(rho, &mats, k)?;
    let tau = grid.node(a);
    let dt = grid.dt();
    let mut acc = 0.0;
    for (offset, mu) in flow.iter().enumerate().take(grid.steps() - k) {
        let s = k + offset;
        let t = grid.node(s);
        let running: f64 = mu
            .as_slice()
            .iter()
            .enumerate()
            .map(|(j, &w)| w * cost.running_total(tau, t, j, pi.get(s, j), mu))
            .sum();
        acc += dt * running;
    }
    let mu_t = flow.last().expect("nonempty");
    Ok(acc
        + mu_t
            .as_slice()
            .iter()
            .enumerate()
            .map(|(j, &w)| w * cost.terminal(tau, j, mu_t))
            .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_argmin_interior_and_boundary() {
        let iv = ActionInterval::new(-1.0, 1.0);
        let v = scan_argmin(&iv, 1e-10, |v| (v - 0.3).powi(2));
        assert!((v - 0.3).abs() < 1e-8);
        let v = scan_argmin(&iv, 1e-10, |v| (v - 3.0).powi(2));
        assert_eq!(v, 1.0);
        let v = scan_argmin(&iv, 1e-10, |v| (v + 3.0).powi(2));
        assert_eq!(v, -1.0);
    }

    #[test]
    fn scan_argmin_ties_go_to_smallest_action() {
        let iv = ActionInterval::new(-1.0, 1.0);
        assert_eq!(scan_argmin(&iv, 1e-10, |_| 0.0), -1.0);
        assert_eq!(scan_argmin(&ActionInterval::point(0.2), 1e-10, |v| v), 0.2);
    }

    #[test]
    fn value_table_interpolates_between_stored_rows() {
        let mut t = ValueTable::new(4, 1, 2);
        assert_eq!(t.tau_nodes(), &[0, 2, 4]);
        let row_len = t.row_len();
        t.data[0] = 1.0;
        t.data[row_len] = 3.0;
        assert_eq!(t.get(1, 0, 0), 2.0);
        let t3 = ValueTable::new(5, 1, 2);
        assert_eq!(t3.tau_nodes(), &[0, 2, 4, 5]);
    }
}
