//! Built-in model families.
//!
//! [`AffineQuadraticModel`] has rates `q_t^v(i,j) = α_t(i,j) + β_t(j) v` on
//! the action interval `[-1, 1]`; paired with the quadratic control cost of
//! [`ScenarioCost`] its argmin map is a clip with a closed form.
//! [`ControlFreeModel`] holds tabulated rates that ignore the action.

use serde::{Deserialize, Serialize};

use crate::chain::{Action, ActionInterval, GeneratorModel, ProbabilityVector};
use crate::error::{MfeError, Result};
use crate::hj::{scan_argmin, CostModel, SCAN_TOLERANCE};

const MODEL_TOLERANCE: f64 = 1e-10;
/// Segments starting within this distance of `t` are already active.
const SEGMENT_SLACK: f64 = 1e-12;

fn check_square(rates: &[Vec<f64>], m: usize, what: &str) -> Result<()> {
    if rates.len() != m || rates.iter().any(|r| r.len() != m) {
        return Err(MfeError::InvalidModel(format!("{what} must be {m}x{m}")));
    }
    Ok(())
}

fn segment_index(starts: impl Iterator<Item = f64>, t: f64) -> usize {
    let mut idx = 0;
    for (s, start) in starts.enumerate() {
        if start <= t + SEGMENT_SLACK {
            idx = s;
        }
    }
    idx
}

fn check_starts(starts: &[f64]) -> Result<()> {
    if starts.first() != Some(&0.0) {
        return Err(MfeError::InvalidModel("first segment must start at t = 0".into()));
    }
    if starts.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(MfeError::InvalidModel(
            "segment start times must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Rate tables active from `start` until the next segment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AffineSegment {
    pub start: f64,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
}

/// `U_t(i) = {v ∈ [-1,1] : α(i,j) + β(j) v ≥ 0 for all j ≠ i}`.
pub fn admissible_interval(alpha_row: &[f64], beta: &[f64], i: usize) -> ActionInterval {
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    for (j, (&a, &b)) in alpha_row.iter().zip(beta).enumerate() {
        if j == i || b == 0.0 {
            continue;
        }
        let root = -a / b;
        if b > 0.0 {
            lo = lo.max(root);
        } else {
            hi = hi.min(root);
        }
    }
    ActionInterval::new(lo, hi)
}

/// Closed-form argmin of `weight v²/2 + v Σ_j h(j) β(j)` over `iv`.
pub fn weighted_affine_argmin(h: &[f64], beta: &[f64], iv: &ActionInterval, weight: f64) -> Result<Action> {
    if iv.is_empty() {
        return Err(MfeError::InvalidModel(format!(
            "empty admissible interval [{}, {}]",
            iv.lo, iv.hi
        )));
    }
    let slope: f64 = h.iter().zip(beta).map(|(x, b)| x * b).sum();
    if weight > 0.0 {
        return Ok(iv.clamp(-slope / weight));
    }
    // Linear objective: minimized at an endpoint, ties to the smaller action.
    Ok(if slope < 0.0 { iv.hi } else { iv.lo })
}

/// `argmin_{v ∈ iv} [v²/2 + v Σ_j h(j) β(j)] = clip(-Σ_j h(j) β(j), iv)`.
pub fn affine_argmin(h: &[f64], beta: &[f64], iv: &ActionInterval) -> Result<Action> {
    weighted_affine_argmin(h, beta, iv, 1.0)
}

/// Affine controlled generator with piecewise-constant tables.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AffineQuadraticModel {
    states: usize,
    segments: Vec<AffineSegment>,
    kappa1: f64,
    rate_cap: f64,
}

impl AffineQuadraticModel {
    pub fn new(segments: Vec<AffineSegment>) -> Result<Self> {
        let m = segments
            .first()
            .ok_or_else(|| MfeError::InvalidModel("at least one segment required".into()))?
            .beta
            .len();
        if m == 0 {
            return Err(MfeError::InvalidModel("model needs at least one state".into()));
        }
        check_starts(&segments.iter().map(|s| s.start).collect::<Vec<_>>())?;
        let mut kappa1: f64 = 0.0;
        let mut rate_cap: f64 = 0.0;
        for (s, seg) in segments.iter().enumerate() {
            check_square(&seg.alpha, m, &format!("segment {s} alpha"))?;
            if seg.beta.len() != m {
                return Err(MfeError::InvalidModel(format!("segment {s} beta must have {m} entries")));
            }
            if seg.beta.iter().sum::<f64>().abs() > MODEL_TOLERANCE {
                return Err(MfeError::InvalidModel(format!("segment {s}: beta must sum to zero")));
            }
            for (i, row) in seg.alpha.iter().enumerate() {
                if row.iter().sum::<f64>().abs() > MODEL_TOLERANCE {
                    return Err(MfeError::InvalidModel(format!(
                        "segment {s}: alpha row {i} must sum to zero"
                    )));
                }
                if let Some(j) = (0..m).find(|&j| j != i && row[j] < 0.0) {
                    return Err(MfeError::InvalidModel(format!(
                        "segment {s}: alpha[{i}][{j}] must be nonnegative"
                    )));
                }
                let iv = admissible_interval(row, &seg.beta, i);
                for j in 0..m {
                    for v in [iv.lo, iv.hi] {
                        rate_cap = rate_cap.max((row[j] + seg.beta[j] * v).abs());
                    }
                }
            }
            kappa1 = kappa1.max(seg.beta.iter().map(|b| b.abs()).sum());
        }
        Ok(Self {
            states: m,
            segments,
            kappa1,
            rate_cap,
        })
    }

    /// Time-homogeneous model from a single table.
    pub fn homogeneous(alpha: Vec<Vec<f64>>, beta: Vec<f64>) -> Result<Self> {
        Self::new(vec![AffineSegment {
            start: 0.0,
            alpha,
            beta,
        }])
    }

    pub fn segments(&self) -> &[AffineSegment] {
        &self.segments
    }

    fn segment(&self, t: f64) -> &AffineSegment {
        &self.segments[segment_index(self.segments.iter().map(|s| s.start), t)]
    }
}

impl GeneratorModel for AffineQuadraticModel {
    fn states(&self) -> usize {
        self.states
    }

    fn rates(&self, t: f64, i: usize, v: Action, row: &mut [f64]) {
        let seg = self.segment(t);
        for (j, r) in row.iter_mut().enumerate() {
            *r = seg.alpha[i][j] + seg.beta[j] * v;
        }
    }

    fn admissible(&self, t: f64, i: usize) -> ActionInterval {
        let seg = self.segment(t);
        admissible_interval(&seg.alpha[i], &seg.beta, i)
    }

    fn action_lipschitz(&self) -> f64 {
        self.kappa1
    }

    fn rate_cap(&self) -> f64 {
        self.rate_cap
    }

    fn affine_loadings(&self, t: f64, _i: usize) -> Option<Vec<f64>> {
        Some(self.segment(t).beta.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateSegment {
    pub start: f64,
    pub rates: Vec<Vec<f64>>,
}

/// Uncontrolled generator; the only admissible action is 0.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControlFreeModel {
    states: usize,
    segments: Vec<RateSegment>,
    rate_cap: f64,
}

impl ControlFreeModel {
    pub fn new(segments: Vec<RateSegment>) -> Result<Self> {
        let m = segments
            .first()
            .ok_or_else(|| MfeError::InvalidModel("at least one segment required".into()))?
            .rates
            .len();
        check_starts(&segments.iter().map(|s| s.start).collect::<Vec<_>>())?;
        let mut rate_cap: f64 = 0.0;
        for (s, seg) in segments.iter().enumerate() {
            check_square(&seg.rates, m, &format!("segment {s} rates"))?;
            for (i, row) in seg.rates.iter().enumerate() {
                if row.iter().sum::<f64>().abs() > MODEL_TOLERANCE
                    || (0..m).any(|j| j != i && row[j] < 0.0)
                {
                    return Err(MfeError::InvalidModel(format!(
                        "segment {s}: row {i} is not a generator row"
                    )));
                }
                rate_cap = rate_cap.max(row.iter().fold(0.0, |a, x| a.max(x.abs())));
            }
        }
        Ok(Self {
            states: m,
            segments,
            rate_cap,
        })
    }

    pub fn homogeneous(rates: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(vec![RateSegment { start: 0.0, rates }])
    }

    pub fn segments(&self) -> &[RateSegment] {
        &self.segments
    }
}

impl GeneratorModel for ControlFreeModel {
    fn states(&self) -> usize {
        self.states
    }

    fn rates(&self, t: f64, i: usize, _v: Action, row: &mut [f64]) {
        let seg = &self.segments[segment_index(self.segments.iter().map(|s| s.start), t)];
        row.copy_from_slice(&seg.rates[i]);
    }

    fn admissible(&self, _t: f64, _i: usize) -> ActionInterval {
        ActionInterval::point(0.0)
    }

    fn action_lipschitz(&self) -> f64 {
        0.0
    }

    fn rate_cap(&self) -> f64 {
        self.rate_cap
    }
}

/// Which of the two terminal forms with the same population variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanVarianceVariant {
    /// `g(i; ρ) = (i - m̄)²`.
    Centered,
    /// `g̃(i; ρ) = i² - m̄²`.
    Raw,
}

/// Mean `m̄ = Σ_j j ρ(j)` with states labelled `1..=m`.
pub fn label_mean(rho: &ProbabilityVector) -> f64 {
    rho.as_slice()
        .iter()
        .enumerate()
        .map(|(j, w)| (j + 1) as f64 * w)
        .sum()
}

/// Unshifted mean-variance terminal cost of the state with index `i`
/// (label `i + 1`).
pub fn mean_variance_terminal(variant: MeanVarianceVariant, i: usize, rho: &ProbabilityVector) -> f64 {
    let label = (i + 1) as f64;
    let mean = label_mean(rho);
    match variant {
        MeanVarianceVariant::Centered => (label - mean).powi(2),
        MeanVarianceVariant::Raw => label * label - mean * mean,
    }
}

/// Scaled mean-variance terminal cost.
///
/// The raw variant is negative for some inputs, so it carries a constant
/// shift of `m²`. A constant shift moves every value by the same amount and
/// leaves the argmin map unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanVarianceCost {
    pub variant: MeanVarianceVariant,
    pub scale: f64,
    pub shift: f64,
}

impl MeanVarianceCost {
    pub fn new(variant: MeanVarianceVariant, scale: f64, states: usize) -> Self {
        let shift = match variant {
            MeanVarianceVariant::Centered => 0.0,
            MeanVarianceVariant::Raw => (states * states) as f64,
        };
        Self { variant, scale, shift }
    }

    pub fn value(&self, i: usize, rho: &ProbabilityVector) -> f64 {
        self.scale * (mean_variance_terminal(self.variant, i, rho) + self.shift)
    }

    fn cap(&self, states: usize) -> f64 {
        let m = states as f64;
        self.scale
            * match self.variant {
                MeanVarianceVariant::Centered => (m - 1.0).powi(2),
                MeanVarianceVariant::Raw => 2.0 * m * m - 1.0,
            }
    }

    /// `2 m · max_j j`, scaled.
    fn lipschitz(&self, states: usize) -> f64 {
        let m = states as f64;
        self.scale * 2.0 * m * m
    }
}

/// Non-exponential discounting `w(τ, t)` of the running cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiscountWeight {
    None,
    /// `1 / (1 + r (t - τ)⁺)`.
    Hyperbolic { rate: f64 },
    /// `exp(-r (t - τ)⁺)`.
    Exponential { rate: f64 },
}

impl DiscountWeight {
    pub fn weight(&self, tau: f64, t: f64) -> f64 {
        let lag = (t - tau).max(0.0);
        match *self {
            DiscountWeight::None => 1.0,
            DiscountWeight::Hyperbolic { rate } => 1.0 / (1.0 + rate * lag),
            DiscountWeight::Exponential { rate } => (-rate * lag).exp(),
        }
    }

    fn is_constant(&self) -> bool {
        match *self {
            DiscountWeight::None => true,
            DiscountWeight::Hyperbolic { rate } | DiscountWeight::Exponential { rate } => rate == 0.0,
        }
    }
}

/// `f̄_{τ,t}(i; ρ) = w(τ,t) (base(i) + congestion · ρ(i))`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunningCost {
    pub base: Vec<f64>,
    pub congestion: f64,
    pub weight: DiscountWeight,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalCost {
    Zero,
    MeanVariance(MeanVarianceCost),
    Tabulated { values: Vec<f64> },
}

/// Declared bounds; any field left `None` is computed from the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DeclaredConstants {
    pub k1: Option<f64>,
    pub k2: Option<f64>,
    pub k3: Option<f64>,
}

/// Running, control and terminal cost for the built-in scenarios.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioCost {
    states: usize,
    running: RunningCost,
    /// `Ψ(i, v) = control_weight · v² / 2`.
    control_weight: f64,
    terminal: TerminalCost,
    k1: f64,
    k2: f64,
    k3: f64,
}

impl ScenarioCost {
    pub fn new(
        states: usize,
        running: RunningCost,
        control_weight: f64,
        terminal: TerminalCost,
        declared: DeclaredConstants,
    ) -> Result<Self> {
        if running.base.len() != states {
            return Err(MfeError::InvalidModel(format!(
                "running base must have {states} entries"
            )));
        }
        if running.base.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(MfeError::InvalidModel("running base must be nonnegative".into()));
        }
        if !(running.congestion.is_finite() && running.congestion >= 0.0) {
            return Err(MfeError::InvalidModel("congestion must be nonnegative".into()));
        }
        match running.weight {
            DiscountWeight::Hyperbolic { rate } | DiscountWeight::Exponential { rate }
                if !(rate.is_finite() && rate >= 0.0) =>
            {
                return Err(MfeError::InvalidModel("discount rate must be nonnegative".into()));
            }
            _ => {}
        }
        if !(control_weight.is_finite() && control_weight >= 0.0) {
            return Err(MfeError::InvalidModel("control weight must be nonnegative".into()));
        }
        let terminal_cap = match &terminal {
            TerminalCost::Zero => 0.0,
            TerminalCost::MeanVariance(mv) => {
                if !(mv.scale.is_finite() && mv.scale >= 0.0) {
                    return Err(MfeError::InvalidModel("terminal scale must be nonnegative".into()));
                }
                mv.cap(states)
            }
            TerminalCost::Tabulated { values } => {
                if values.len() != states {
                    return Err(MfeError::InvalidModel(format!(
                        "terminal table must have {states} entries"
                    )));
                }
                if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(MfeError::InvalidModel("terminal table must be nonnegative".into()));
                }
                values.iter().copied().fold(0.0, f64::max)
            }
        };
        let running_cap = running.base.iter().copied().fold(0.0, f64::max) + running.congestion;
        let terminal_lip = match &terminal {
            TerminalCost::MeanVariance(mv) => mv.lipschitz(states),
            _ => 0.0,
        };
        Ok(Self {
            states,
            k1: declared.k1.unwrap_or(0.5 * control_weight),
            k2: declared.k2.unwrap_or(running_cap.max(terminal_cap)),
            k3: declared.k3.unwrap_or(running.congestion + terminal_lip),
            running,
            control_weight,
            terminal,
        })
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn running_spec(&self) -> &RunningCost {
        &self.running
    }

    pub fn terminal_spec(&self) -> &TerminalCost {
        &self.terminal
    }

    pub fn control_weight(&self) -> f64 {
        self.control_weight
    }

    /// All costs zero.
    pub fn zero(states: usize) -> Self {
        Self::new(
            states,
            RunningCost {
                base: vec![0.0; states],
                congestion: 0.0,
                weight: DiscountWeight::None,
            },
            0.0,
            TerminalCost::Zero,
            DeclaredConstants::default(),
        )
        .expect("zero cost is valid")
    }
}

impl CostModel for ScenarioCost {
    fn running(&self, tau: f64, t: f64, i: usize, rho: &ProbabilityVector) -> f64 {
        let raw = self.running.base[i] + self.running.congestion * rho[i];
        self.running.weight.weight(tau, t) * raw
    }

    fn control(&self, _t: f64, _i: usize, v: Action) -> f64 {
        0.5 * self.control_weight * v * v
    }

    fn terminal(&self, _tau: f64, i: usize, rho: &ProbabilityVector) -> f64 {
        match &self.terminal {
            TerminalCost::Zero => 0.0,
            TerminalCost::MeanVariance(mv) => mv.value(i, rho),
            TerminalCost::Tabulated { values } => values[i],
        }
    }

    fn cost_cap(&self) -> f64 {
        self.k2
    }

    fn control_cap(&self) -> f64 {
        self.k1
    }

    fn distribution_lipschitz(&self) -> f64 {
        self.k3
    }

    fn is_distribution_independent(&self) -> bool {
        self.running.congestion == 0.0 && !matches!(self.terminal, TerminalCost::MeanVariance(_))
    }

    fn is_tau_independent(&self) -> bool {
        self.running.weight.is_constant()
    }

    fn argmin(&self, gen: &dyn GeneratorModel, t: f64, i: usize, h: &[f64]) -> Result<Action> {
        let iv = gen.admissible(t, i);
        if iv.is_empty() {
            return Err(MfeError::EmptyAdmissibleSet { t, state: i });
        }
        if let Some(beta) = gen.affine_loadings(t, i) {
            return weighted_affine_argmin(h, &beta, &iv, self.control_weight);
        }
        let mut row = vec![0.0; gen.states()];
        Ok(scan_argmin(&iv, SCAN_TOLERANCE, |v| {
            gen.rates(t, i, v, &mut row);
            self.control(t, i, v) + row.iter().zip(h).map(|(q, x)| q * x).sum::<f64>()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(w: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(w.to_vec()).unwrap()
    }

    #[test]
    fn affine_argmin_examples() {
        let iv = ActionInterval::new(-1.0, 1.0);
        // Σ h β = 0, 0.5, 2 with β = (1, -1).
        let beta = [1.0, -1.0];
        assert_eq!(affine_argmin(&[0.3, 0.3], &beta, &iv).unwrap(), 0.0);
        assert_eq!(affine_argmin(&[0.5, 0.0], &beta, &iv).unwrap(), -0.5);
        assert_eq!(affine_argmin(&[2.0, 0.0], &beta, &iv).unwrap(), -1.0);
        assert!(affine_argmin(&[0.0, 0.0], &beta, &ActionInterval::new(1.0, -1.0)).is_err());
    }

    #[test]
    fn admissible_interval_examples() {
        let iv = admissible_interval(&[-1.0, 1.0], &[0.0, 0.0], 0);
        assert_eq!(iv, ActionInterval::new(-1.0, 1.0));
        let iv = admissible_interval(&[-1.0, 1.0], &[1.0, -1.0], 0);
        assert_eq!(iv, ActionInterval::new(-1.0, 1.0));
        let iv = admissible_interval(&[-0.5, 0.5], &[1.0, -1.0], 0);
        assert_eq!(iv, ActionInterval::new(-1.0, 0.5));
    }

    #[test]
    fn mean_variance_examples() {
        use MeanVarianceVariant::*;
        let d = ProbabilityVector::dirac(3, 1);
        assert_eq!(mean_variance_terminal(Centered, 1, &d), 0.0);
        assert_eq!(mean_variance_terminal(Raw, 1, &d), 0.0);
        let half = pv(&[0.5, 0.5]);
        assert!((mean_variance_terminal(Centered, 0, &half) - 0.25).abs() < 1e-15);
        assert!((mean_variance_terminal(Raw, 0, &half) + 1.25).abs() < 1e-15);
    }

    #[test]
    fn raw_variant_is_shifted_nonnegative() {
        let mv = MeanVarianceCost::new(MeanVarianceVariant::Raw, 1.0, 3);
        assert_eq!(mv.shift, 9.0);
        for w in [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.2, 0.3, 0.5]] {
            for i in 0..3 {
                let v = mv.value(i, &pv(&w));
                assert!(v >= 0.0 && v <= mv.cap(3));
            }
        }
    }

    #[test]
    fn affine_model_rejects_bad_tables() {
        let ok = AffineQuadraticModel::homogeneous(vec![vec![-1.0, 1.0], vec![1.0, -1.0]], vec![0.5, -0.5]);
        assert!(ok.is_ok());
        let bad_beta = AffineQuadraticModel::homogeneous(vec![vec![-1.0, 1.0], vec![1.0, -1.0]], vec![0.5, 0.5]);
        assert!(bad_beta.is_err());
        let bad_alpha = AffineQuadraticModel::homogeneous(vec![vec![1.0, -1.0], vec![1.0, -1.0]], vec![0.5, -0.5]);
        assert!(bad_alpha.is_err());
    }

    #[test]
    fn affine_model_constants() {
        let model = AffineQuadraticModel::homogeneous(
            vec![vec![-1.0, 1.0], vec![0.5, -0.5]],
            vec![0.25, -0.25],
        )
        .unwrap();
        assert_eq!(model.action_lipschitz(), 0.5);
        // Row 0: q(0,1) = 1 - 0.25 v on [-1,1]; row 1: q(1,0) = 0.5 + 0.25 v.
        assert_eq!(model.rate_cap(), 1.25);
    }

    #[test]
    fn segments_switch_at_start_times() {
        let model = AffineQuadraticModel::new(vec![
            AffineSegment {
                start: 0.0,
                alpha: vec![vec![-1.0, 1.0], vec![1.0, -1.0]],
                beta: vec![0.0, 0.0],
            },
            AffineSegment {
                start: 0.5,
                alpha: vec![vec![-2.0, 2.0], vec![1.0, -1.0]],
                beta: vec![0.0, 0.0],
            },
        ])
        .unwrap();
        let mut row = [0.0; 2];
        model.rates(0.49, 0, 0.0, &mut row);
        assert_eq!(row, [-1.0, 1.0]);
        model.rates(0.5, 0, 0.0, &mut row);
        assert_eq!(row, [-2.0, 2.0]);
    }
}
