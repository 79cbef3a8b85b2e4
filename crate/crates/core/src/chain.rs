//! Finite-state controlled Markov chain primitives.
//!
//! Distributions are row vectors evolving by `dμ/dt = μ Q`. Strategies are
//! piecewise constant on the cells `[t_k, t_{k+1})` of a uniform [`TimeGrid`],
//! and each cell is advanced with the exact transition matrix `exp(Δ Q)` of
//! the frozen generator, so the simplex is preserved for any step size.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MfeError, Result};
use crate::expm::expm;

/// Scalar control value.
pub type Action = f64;

/// Entries in `[-CLIP_TOLERANCE, 0)` are treated as roundoff and clipped.
pub const CLIP_TOLERANCE: f64 = 1e-12;
/// Row-sum tolerance for generators.
pub const GENERATOR_TOLERANCE: f64 = 1e-10;
/// Slack allowed when checking that an action lies in its admissible interval.
pub const ADMISSIBLE_SLACK: f64 = 1e-12;

/// Uniform grid `t_k = k T / N` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(MfeError::InvalidGrid(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(MfeError::InvalidGrid("steps must be positive".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of node `k`; node `N` is exactly the horizon.
    pub fn node(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            self.horizon * (k as f64 / self.steps as f64)
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |k| self.node(k))
    }

    /// The grid with twice as many cells.
    pub fn refined(&self) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * 2,
        }
    }
}

/// A point of the probability simplex over `{0, .., m-1}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Clips roundoff negatives and renormalizes. Entries below
    /// `-CLIP_TOLERANCE`, non-finite entries and zero mass are errors.
    pub fn new(mut weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(MfeError::InvalidProbability("empty weight vector".into()));
        }
        for (i, w) in weights.iter_mut().enumerate() {
            if !w.is_finite() {
                return Err(MfeError::InvalidProbability(format!(
                    "non-finite weight {w} at state {i}"
                )));
            }
            if *w < 0.0 {
                if *w < -CLIP_TOLERANCE {
                    return Err(MfeError::InvalidProbability(format!(
                        "negative weight {w} at state {i}"
                    )));
                }
                *w = 0.0;
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(MfeError::InvalidProbability("zero total mass".into()));
        }
        if total != 1.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Ok(Self(weights))
    }

    pub fn dirac(states: usize, state: usize) -> Self {
        assert!(state < states, "state {state} out of range for {states} states");
        let mut w = vec![0.0; states];
        w[state] = 1.0;
        Self(w)
    }

    pub fn uniform(states: usize) -> Self {
        assert!(states > 0);
        Self(vec![1.0 / states as f64; states])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `λ self + (1 - λ) other`.
    pub fn mix(&self, other: &ProbabilityVector, lambda: f64) -> Result<Self> {
        check_dims(self.len(), other.len())?;
        Self::new(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                .collect(),
        )
    }
}

impl std::ops::Index<usize> for ProbabilityVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(MfeError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// `Σ_i |ρ(i) - γ(i)|`, a value in `[0, 2]`.
pub fn tv_distance(rho: &ProbabilityVector, gamma: &ProbabilityVector) -> Result<f64> {
    check_dims(rho.len(), gamma.len())?;
    Ok(rho
        .as_slice()
        .iter()
        .zip(gamma.as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// Closed interval of admissible actions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionInterval {
    pub lo: f64,
    pub hi: f64,
}

impl ActionInterval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn is_empty(&self) -> bool {
        !(self.lo <= self.hi)
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo).max(0.0)
    }

    pub fn contains(&self, v: Action) -> bool {
        v >= self.lo - ADMISSIBLE_SLACK && v <= self.hi + ADMISSIBLE_SLACK
    }

    pub fn clamp(&self, v: Action) -> Action {
        v.max(self.lo).min(self.hi)
    }
}

/// Controlled rate family `q_t^v(i, ·)` with admissible sets `U_t(i)`.
pub trait GeneratorModel: Send + Sync {
    fn states(&self) -> usize;

    /// Writes the row `q_t^v(i, ·)` into `row` (length `states()`).
    fn rates(&self, t: f64, i: usize, v: Action, row: &mut [f64]);

    fn admissible(&self, t: f64, i: usize) -> ActionInterval;

    /// Declared κ₁: bound on `Σ_j |q^v(i,j) - q^{v'}(i,j)| / |v - v'|`.
    fn action_lipschitz(&self) -> f64;

    /// Declared K₁: bound on `|q_t^v(i,j)|` over admissible inputs.
    fn rate_cap(&self) -> f64;

    /// Metric on actions; absolute difference unless overridden.
    fn action_distance(&self, a: Action, b: Action) -> f64 {
        (a - b).abs()
    }

    /// Loadings `β` when the rates are affine in the action,
    /// `q^v(i,j) = α(i,j) + β(j) v`.
    fn affine_loadings(&self, _t: f64, _i: usize) -> Option<Vec<f64>> {
        None
    }

    /// Generator matrix with action `profile[i]` applied in row `i`.
    fn generator_matrix(&self, t: f64, profile: &[Action]) -> DMatrix<f64> {
        let m = self.states();
        let mut q = DMatrix::zeros(m, m);
        let mut row = vec![0.0; m];
        for (i, &v) in profile.iter().enumerate().take(m) {
            self.rates(t, i, v, &mut row);
            for (j, r) in row.iter().enumerate() {
                q[(i, j)] = *r;
            }
        }
        q
    }

    fn check_admissible(&self, t: f64, i: usize, v: Action) -> Result<()> {
        let iv = self.admissible(t, i);
        if iv.is_empty() {
            return Err(MfeError::EmptyAdmissibleSet { t, state: i });
        }
        if !v.is_finite() || !iv.contains(v) {
            return Err(MfeError::InadmissibleAction {
                t,
                state: i,
                action: v,
                lo: iv.lo,
                hi: iv.hi,
            });
        }
        Ok(())
    }
}

/// Grid strategy: `actions[k * m + i]` is applied on cell `k` in state `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyTable {
    steps: usize,
    states: usize,
    actions: Vec<Action>,
}

impl StrategyTable {
    pub fn constant(steps: usize, states: usize, v: Action) -> Self {
        Self {
            steps,
            states,
            actions: vec![v; steps * states],
        }
    }

    pub fn from_fn(steps: usize, states: usize, mut f: impl FnMut(usize, usize) -> Action) -> Self {
        let mut actions = Vec::with_capacity(steps * states);
        for k in 0..steps {
            for i in 0..states {
                actions.push(f(k, i));
            }
        }
        Self {
            steps,
            states,
            actions,
        }
    }

    pub fn from_rows(rows: Vec<Vec<Action>>) -> Result<Self> {
        let steps = rows.len();
        let states = rows.first().map_or(0, Vec::len);
        let mut actions = Vec::with_capacity(steps * states);
        for row in rows {
            check_dims(states, row.len())?;
            actions.extend(row);
        }
        Ok(Self {
            steps,
            states,
            actions,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn get(&self, k: usize, i: usize) -> Action {
        self.actions[k * self.states + i]
    }

    pub fn set(&mut self, k: usize, i: usize, v: Action) {
        self.actions[k * self.states + i] = v;
    }

    pub fn row(&self, k: usize) -> &[Action] {
        &self.actions[k * self.states..(k + 1) * self.states]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Action]> {
        self.actions.chunks(self.states.max(1))
    }

    pub(crate) fn row_mut(&mut self, k: usize) -> &mut [Action] {
        &mut self.actions[k * self.states..(k + 1) * self.states]
    }

    /// Checks `π_k(i) ∈ U_{t_k}(i)` everywhere.
    pub fn check_admissible(&self, gen: &dyn GeneratorModel, grid: &TimeGrid) -> Result<()> {
        self.check_shape(gen.states(), grid)?;
        for k in 0..self.steps {
            let t = grid.node(k);
            for i in 0..self.states {
                gen.check_admissible(t, i, self.get(k, i))?;
            }
        }
        Ok(())
    }

    pub(crate) fn check_shape(&self, states: usize, grid: &TimeGrid) -> Result<()> {
        check_dims(states, self.states)?;
        if self.steps != grid.steps() {
            return Err(MfeError::GridMismatch(format!(
                "strategy has {} cells, grid has {}",
                self.steps,
                grid.steps()
            )));
        }
        Ok(())
    }
}

/// Distributions at every grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowCurve {
    nodes: Vec<ProbabilityVector>,
}

impl FlowCurve {
    pub fn new(nodes: Vec<ProbabilityVector>) -> Result<Self> {
        let m = nodes
            .first()
            .ok_or_else(|| MfeError::InvalidConfig("empty flow curve".into()))?
            .len();
        for n in &nodes {
            check_dims(m, n.len())?;
        }
        Ok(Self { nodes })
    }

    /// The flow that stays at `rho` on every node.
    pub fn constant(rho: &ProbabilityVector, grid: &TimeGrid) -> Self {
        Self {
            nodes: vec![rho.clone(); grid.steps() + 1],
        }
    }

    pub fn at(&self, k: usize) -> &ProbabilityVector {
        &self.nodes[k]
    }

    pub fn nodes(&self) -> &[ProbabilityVector] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn states(&self) -> usize {
        self.nodes[0].len()
    }

    /// `sup_k d(ν_k, ν̃_k)`.
    pub fn sup_distance(&self, other: &FlowCurve) -> Result<f64> {
        check_dims(self.len(), other.len())?;
        self.nodes
            .iter()
            .zip(&other.nodes)
            .map(|(a, b)| tv_distance(a, b))
            .try_fold(0.0, |acc: f64, d| d.map(|d| acc.max(d)))
    }

    /// Pointwise `λ self + (1 - λ) other`.
    pub fn mix(&self, other: &FlowCurve, lambda: f64) -> Result<FlowCurve> {
        check_dims(self.len(), other.len())?;
        let nodes = self
            .nodes
            .iter()
            .zip(&other.nodes)
            .map(|(a, b)| a.mix(b, lambda))
            .collect::<Result<Vec<_>>>()?;
        Ok(FlowCurve { nodes })
    }

    pub(crate) fn check_grid(&self, states: usize, grid: &TimeGrid) -> Result<()> {
        check_dims(states, self.states())?;
        if self.len() != grid.steps() + 1 {
            return Err(MfeError::GridMismatch(format!(
                "flow has {} nodes, grid has {}",
                self.len(),
                grid.steps() + 1
            )));
        }
        Ok(())
    }
}

/// `Δ Σ_k sup_i |π_k(i) - π'_k(i)|_U`, the rectangle rule for `∫ d_U(π_s, π'_s) ds`.
pub fn strategy_distance(
    a: &StrategyTable,
    b: &StrategyTable,
    grid: &TimeGrid,
    metric: impl Fn(Action, Action) -> f64,
) -> Result<f64> {
    strategy_distance_until(a, b, grid, grid.steps(), metric)
}

/// Same as [`strategy_distance`] restricted to the cells before node `until`.
pub fn strategy_distance_until(
    a: &StrategyTable,
    b: &StrategyTable,
    grid: &TimeGrid,
    until: usize,
    metric: impl Fn(Action, Action) -> f64,
) -> Result<f64> {
    a.check_shape(b.states(), grid)?;
    b.check_shape(a.states(), grid)?;
    let mut total = 0.0;
    for k in 0..until.min(grid.steps()) {
        let sup = a
            .row(k)
            .iter()
            .zip(b.row(k))
            .map(|(x, y)| metric(*x, *y))
            .fold(0.0, f64::max);
        total += sup;
    }
    Ok(grid.dt() * total)
}

/// A single generator defect found by [`validate_generator`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneratorViolation {
    pub t: f64,
    pub state: usize,
    pub action: Action,
    pub kind: ViolationKind,
    pub magnitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    RowSum,
    NegativeOffDiagonal,
    NonFinite,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<GeneratorViolation>,
    /// Sampled `max Σ_j |Δq(i,j)| / |Δv|`.
    pub kappa1_hat: f64,
    /// Sampled `max |q|`.
    pub rate_cap_hat: f64,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Evenly spaced actions covering `iv`, endpoints included.
pub fn sample_interval(iv: &ActionInterval, samples: usize) -> Vec<Action> {
    if iv.width() == 0.0 || samples < 2 {
        return vec![iv.lo];
    }
    (0..samples)
        .map(|s| iv.lo + iv.width() * s as f64 / (samples - 1) as f64)
        .collect()
}

/// Numerically checks the generator property and estimates κ₁ and K₁ on
/// `samples` actions per admissible interval at every grid node.
pub fn validate_generator(
    model: &dyn GeneratorModel,
    grid: &TimeGrid,
    samples: usize,
) -> Result<ValidationReport> {
    let m = model.states();
    let mut violations = Vec::new();
    let mut kappa1_hat: f64 = 0.0;
    let mut rate_cap_hat: f64 = 0.0;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for t in grid.nodes() {
        for i in 0..m {
            let iv = model.admissible(t, i);
            if iv.is_empty() {
                return Err(MfeError::EmptyAdmissibleSet { t, state: i });
            }
            let actions = sample_interval(&iv, samples.max(2));
            rows.clear();
            for &v in &actions {
                let mut row = vec![0.0; m];
                model.rates(t, i, v, &mut row);
                let mut sum = 0.0;
                for (j, &q) in row.iter().enumerate() {
                    if !q.is_finite() {
                        violations.push(GeneratorViolation {
                            t,
                            state: i,
                            action: v,
                            kind: ViolationKind::NonFinite,
                            magnitude: q,
                        });
                        continue;
                    }
                    if j != i && q < -GENERATOR_TOLERANCE {
                        violations.push(GeneratorViolation {
                            t,
                            state: i,
                            action: v,
                            kind: ViolationKind::NegativeOffDiagonal,
                            magnitude: q,
                        });
                    }
                    rate_cap_hat = rate_cap_hat.max(q.abs());
                    sum += q;
                }
                if sum.abs() > GENERATOR_TOLERANCE {
                    violations.push(GeneratorViolation {
                        t,
                        state: i,
                        action: v,
                        kind: ViolationKind::RowSum,
                        magnitude: sum,
                    });
                }
                rows.push(row);
            }
            for a in 0..actions.len() {
                for b in (a + 1)..actions.len() {
                    let dv = model.action_distance(actions[a], actions[b]);
                    if dv <= 0.0 {
                        continue;
                    }
                    let dq: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| (x - y).abs()).sum();
                    kappa1_hat = kappa1_hat.max(dq / dv);
                }
            }
        }
    }
    Ok(ValidationReport {
        violations,
        kappa1_hat,
        rate_cap_hat,
    })
}

/// Clips roundoff negatives of a transition matrix.
fn clean_stochastic(mut p: DMatrix<f64>) -> DMatrix<f64> {
    for x in p.iter_mut() {
        if *x < 0.0 && *x >= -CLIP_TOLERANCE {
            *x = 0.0;
        }
    }
    p
}

/// `exp(Δ Q_t^{profile})`, the exact transition over one cell of length `dt`.
pub fn transition_for_profile(
    model: &dyn GeneratorModel,
    t: f64,
    dt: f64,
    profile: &[Action],
) -> DMatrix<f64> {
    let q = model.generator_matrix(t, profile) * dt;
    clean_stochastic(expm(&q))
}

/// Transition matrix of cell `k` under `π`.
pub fn step_transition(
    model: &dyn GeneratorModel,
    pi: &StrategyTable,
    grid: &TimeGrid,
    k: usize,
) -> Result<DMatrix<f64>> {
    pi.check_shape(model.states(), grid)?;
    if k >= grid.steps() {
        return Err(MfeError::GridMismatch(format!(
            "cell {k} out of range for {} cells",
            grid.steps()
        )));
    }
    let t = grid.node(k);
    for (i, &v) in pi.row(k).iter().enumerate() {
        model.check_admissible(t, i, v)?;
    }
    Ok(transition_for_profile(model, t, grid.dt(), pi.row(k)))
}

/// All cell transitions under `π`, computed in parallel.
pub fn transitions(
    model: &dyn GeneratorModel,
    pi: &StrategyTable,
    grid: &TimeGrid,
) -> Result<Vec<DMatrix<f64>>> {
    pi.check_admissible(model, grid)?;
    let dt = grid.dt();
    Ok((0..grid.steps())
        .into_par_iter()
        .map(|k| transition_for_profile(model, grid.node(k), dt, pi.row(k)))
        .collect())
}

/// `μ P` for a row vector `μ`.
pub(crate) fn row_times(mu: &[f64], p: &DMatrix<f64>) -> Vec<f64> {
    let m = mu.len();
    let mut out = vec![0.0; m];
    for (i, &w) in mu.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o += w * p[(i, j)];
        }
    }
    out
}

pub(crate) fn checked_distribution(raw: Vec<f64>, k: usize) -> Result<ProbabilityVector> {
    if let Some((i, x)) = raw
        .iter()
        .enumerate()
        .find(|(_, x)| !x.is_finite() || **x < -CLIP_TOLERANCE)
    {
        return Err(MfeError::Numerical(format!(
            "propagated mass {x} at node {k}, state {i}"
        )));
    }
    ProbabilityVector::new(raw).map_err(|e| MfeError::Numerical(format!("node {k}: {e}")))
}

/// Propagates `ρ` from node `start` to the horizon using precomputed cell
/// transitions. Returns the distributions at nodes `start..=N`.
pub fn propagate_with(
    rho: &ProbabilityVector,
    mats: &[DMatrix<f64>],
    start: usize,
) -> Result<Vec<ProbabilityVector>> {
    let mut out = Vec::with_capacity(mats.len() + 1 - start);
    out.push(rho.clone());
    for (k, p) in mats.iter().enumerate().skip(start) {
        check_dims(p.nrows(), rho.len())?;
        let next = row_times(out.last().expect("nonempty").as_slice(), p);
        out.push(checked_distribution(next, k + 1)?);
    }
    Ok(out)
}

/// Forward flow `ν_0 = ρ0`, `ν_{k+1} = ν_k exp(Δ Q_{t_k}^{π_k})`.
pub fn propagate_flow(
    model: &dyn GeneratorModel,
    rho0: &ProbabilityVector,
    pi: &StrategyTable,
    grid: &TimeGrid,
) -> Result<FlowCurve> {
    check_dims(model.states(), rho0.len())?;
    let mats = transitions(model, pi, grid)?;
    FlowCurve::new(propagate_with(rho0, &mats, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Time-homogeneous uncontrolled generator for tests.
    struct Fixed(DMatrix<f64>);

    impl GeneratorModel for Fixed {
        fn states(&self) -> usize {
            self.0.nrows()
        }
        fn rates(&self, _t: f64, i: usize, _v: Action, row: &mut [f64]) {
            for (j, r) in row.iter_mut().enumerate() {
                *r = self.0[(i, j)];
            }
        }
        fn admissible(&self, _t: f64, _i: usize) -> ActionInterval {
            ActionInterval::point(0.0)
        }
        fn action_lipschitz(&self) -> f64 {
            0.0
        }
        fn rate_cap(&self) -> f64 {
            self.0.abs().max()
        }
    }

    fn pv(w: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(w.to_vec()).unwrap()
    }

    #[test]
    fn tv_distance_examples() {
        let a = pv(&[0.5, 0.5]);
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        let d = tv_distance(&ProbabilityVector::dirac(2, 0), &ProbabilityVector::dirac(2, 1)).unwrap();
        assert_eq!(d, 2.0);
        assert_eq!(tv_distance(&a, &pv(&[0.25, 0.75])).unwrap(), 0.5);
    }

    #[test]
    fn tv_distance_dimension_mismatch() {
        let err = tv_distance(&ProbabilityVector::uniform(2), &ProbabilityVector::uniform(3));
        assert!(matches!(err, Err(MfeError::DimensionMismatch { .. })));
    }

    #[test]
    fn probability_vector_clips_roundoff_only() {
        let p = pv(&[0.5, -1e-13, 0.5]);
        assert_eq!(p.as_slice(), &[0.5, 0.0, 0.5]);
        assert!(ProbabilityVector::new(vec![1.1, -0.1]).is_err());
        assert!(ProbabilityVector::new(vec![f64::NAN, 1.0]).is_err());
        assert!(ProbabilityVector::new(vec![0.0, 0.0]).is_err());
        let q = pv(&[2.0, 6.0]);
        assert_eq!(q.as_slice(), &[0.25, 0.75]);
    }

    #[test]
    fn strategy_distance_examples() {
        let g1 = TimeGrid::new(1.0, 1).unwrap();
        let a = StrategyTable::constant(1, 1, 0.1);
        assert_eq!(strategy_distance(&a, &a, &g1, |x, y| (x - y).abs()).unwrap(), 0.0);
        let b = StrategyTable::constant(1, 1, 0.4);
        let d = strategy_distance(&a, &b, &g1, |x, y| (x - y).abs()).unwrap();
        assert!((d - 0.3).abs() < 1e-15);

        let g2 = TimeGrid::new(1.0, 2).unwrap();
        let c = StrategyTable::from_rows(vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let e = StrategyTable::from_rows(vec![vec![0.2, -0.1], vec![0.0, 0.4]]).unwrap();
        let d = strategy_distance(&c, &e, &g2, |x, y| (x - y).abs()).unwrap();
        assert!((d - 0.3).abs() < 1e-15);
    }

    #[test]
    fn strategy_distance_grid_mismatch() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        let a = StrategyTable::constant(2, 1, 0.0);
        assert!(strategy_distance(&a, &a, &g, |x, y| (x - y).abs()).is_err());
    }

    #[test]
    fn zero_generator_is_identity_and_valid() {
        let z = Fixed(DMatrix::zeros(3, 3));
        let g = TimeGrid::new(1.0, 4).unwrap();
        let pi = StrategyTable::constant(4, 3, 0.0);
        assert_eq!(step_transition(&z, &pi, &g, 0).unwrap(), DMatrix::identity(3, 3));
        let rep = validate_generator(&z, &g, 5).unwrap();
        assert!(rep.is_valid());
        assert_eq!(rep.kappa1_hat, 0.0);
        let rho = pv(&[0.2, 0.3, 0.5]);
        let flow = propagate_flow(&z, &rho, &pi, &g).unwrap();
        assert!(flow.nodes().iter().all(|n| n == &rho));
    }

    #[test]
    fn defective_row_is_reported() {
        let q = DMatrix::from_row_slice(2, 2, &[-1.0, 1.1, 1.0, -1.0]);
        let rep = validate_generator(&Fixed(q), &TimeGrid::new(1.0, 1).unwrap(), 3).unwrap();
        assert!(!rep.is_valid());
        assert!(rep
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::RowSum && v.state == 0 && (v.magnitude - 0.1).abs() < 1e-12));
    }

    #[test]
    fn symmetric_two_state_closed_form() {
        let q = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        let g = TimeGrid::new(0.5, 1).unwrap();
        let pi = StrategyTable::constant(1, 2, 0.0);
        let p = step_transition(&Fixed(q.clone()), &pi, &g, 0).unwrap();
        let e = (-1.0f64).exp();
        let want = DMatrix::from_row_slice(2, 2, &[(1.0 + e) / 2.0, (1.0 - e) / 2.0, (1.0 - e) / 2.0, (1.0 + e) / 2.0]);
        assert!((p - want).abs().max() < 1e-14);

        let flow = propagate_flow(&Fixed(q), &ProbabilityVector::dirac(2, 0), &pi, &g).unwrap();
        assert!((flow.at(1)[0] - 0.683_939_720_585_721_2).abs() < 1e-12);
    }

    #[test]
    fn absorbing_two_state_closed_form() {
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -1.0]);
        let g = TimeGrid::new(1.0, 1).unwrap();
        let pi = StrategyTable::constant(1, 2, 0.0);
        let p = step_transition(&Fixed(q), &pi, &g, 0).unwrap();
        let e = (-1.0f64).exp();
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0 - e, e]);
        assert!((p - want).abs().max() < 1e-14);
    }

    #[test]
    fn inadmissible_strategy_rejected() {
        let z = Fixed(DMatrix::zeros(2, 2));
        let g = TimeGrid::new(1.0, 2).unwrap();
        let pi = StrategyTable::constant(2, 2, 0.5);
        assert!(matches!(
            step_transition(&z, &pi, &g, 0),
            Err(MfeError::InadmissibleAction { .. })
        ));
    }

    #[test]
    fn grid_nodes_are_exact_at_the_ends() {
        let g = TimeGrid::new(0.7, 3).unwrap();
        let nodes: Vec<f64> = g.nodes().collect();
        assert_eq!(nodes.first(), Some(&0.0));
        assert_eq!(nodes.last(), Some(&0.7));
        assert!(nodes.windows(2).all(|w| w[0] < w[1]));
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }
}
