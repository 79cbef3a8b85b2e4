//! Browser bindings for a small two-state mean-variance model.
//!
//! Each exported function takes a JSON object of slider values and returns a
//! JSON string that the page in `www/` plots. The plain-Rust versions are
//! public too so they can be tested natively.

use mfe_core::chain::{ProbabilityVector, TimeGrid};
use mfe_core::mfe::{estimate_constants, picard_solve, Equilibrium, SolverOptions};
use mfe_core::models::{
    AffineQuadraticModel, DeclaredConstants, DiscountWeight, MeanVarianceCost, MeanVarianceVariant,
    RunningCost, ScenarioCost, TerminalCost,
};
use mfe_core::sim::{empirical_flow_error, simulate, SimConfig};
use mfe_core::MfeError;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Clone, Debug, Deserialize)]
#[serde(default)]
pub struct DemoParams {
    /// Action loading `β = (b, -b)`.
    pub beta: f64,
    pub congestion: f64,
    pub discount_rate: f64,
    pub horizon: f64,
    pub steps: usize,
    /// Initial mass in state 1.
    pub rho1: f64,
    /// `"g"` or `"gtilde"`.
    pub variant: String,
    pub players: usize,
    pub seed: u64,
}

impl Default for DemoParams {
    fn default() -> Self {
        Self {
            beta: 0.5,
            congestion: 0.5,
            discount_rate: 1.0,
            horizon: 1.0,
            steps: 100,
            rho1: 0.8,
            variant: "g".into(),
            players: 1000,
            seed: 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("bad parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Solver(#[from] MfeError),
}

struct Built {
    gen: AffineQuadraticModel,
    cost: ScenarioCost,
    grid: TimeGrid,
    rho: ProbabilityVector,
}

fn variant(name: &str) -> Result<MeanVarianceVariant, DemoError> {
    match name {
        "g" => Ok(MeanVarianceVariant::Centered),
        "gtilde" => Ok(MeanVarianceVariant::Raw),
        other => Err(DemoError::Params(format!("unknown variant `{other}`"))),
    }
}

fn build(p: &DemoParams, v: MeanVarianceVariant) -> Result<Built, DemoError> {
    if !(0.0..=1.0).contains(&p.beta) {
        return Err(DemoError::Params("beta must lie in [0, 1]".into()));
    }
    if p.steps == 0 || p.steps > 2000 {
        return Err(DemoError::Params("steps must lie in 1..=2000".into()));
    }
    let gen = AffineQuadraticModel::homogeneous(
        vec![vec![-1.0, 1.0], vec![1.0, -1.0]],
        vec![p.beta, -p.beta],
    )?;
    let cost = ScenarioCost::new(
        2,
        RunningCost {
            base: vec![0.2, 0.0],
            congestion: p.congestion,
            weight: DiscountWeight::Hyperbolic {
                rate: p.discount_rate,
            },
        },
        1.0,
        TerminalCost::MeanVariance(MeanVarianceCost::new(v, 1.0, 2)),
        DeclaredConstants::default(),
    )?;
    let grid = TimeGrid::new(p.horizon, p.steps)?;
    let rho = ProbabilityVector::new(vec![p.rho1, 1.0 - p.rho1])?;
    Ok(Built { gen, cost, grid, rho })
}

#[derive(Serialize)]
pub struct SolveOutput {
    pub t: Vec<f64>,
    pub flow1: Vec<f64>,
    pub policy: [Vec<f64>; 2],
    pub theta: [Vec<f64>; 2],
    pub gaps: Vec<f64>,
    pub converged: bool,
    pub contraction_product: f64,
}

fn solve_built(b: &Built) -> Result<Equilibrium, DemoError> {
    Ok(picard_solve(&b.gen, &b.cost, &b.rho, &b.grid, &SolverOptions::default())?)
}

fn column(eq: &Equilibrium, i: usize) -> Vec<f64> {
    (0..eq.grid.steps()).map(|k| eq.policy.get(k, i)).collect()
}

/// Solves the model and reports flow, policy, diagonal value and the
/// contraction estimate.
pub fn solve_json(params: &DemoParams) -> Result<SolveOutput, DemoError> {
    let b = build(params, variant(&params.variant)?)?;
    let eq = solve_built(&b)?;
    let coarse = TimeGrid::new(params.horizon, params.steps.min(50))?;
    let report = estimate_constants(&b.gen, &b.cost, &coarse, 8, 0)?;
    let theta: Vec<Vec<f64>> = eq.values.diagonal_curve();
    Ok(SolveOutput {
        t: b.grid.nodes().collect(),
        flow1: eq.flow.nodes().iter().map(|r| r[0]).collect(),
        policy: [column(&eq, 0), column(&eq, 1)],
        theta: [
            theta.iter().map(|r| r[0]).collect(),
            theta.iter().map(|r| r[1]).collect(),
        ],
        gaps: eq.diagnostics.gaps.clone(),
        converged: eq.diagnostics.converged(),
        contraction_product: report.product,
    })
}

#[derive(Serialize)]
pub struct SimulateOutput {
    pub t: Vec<f64>,
    pub mean_field: Vec<f64>,
    pub empirical: Vec<f64>,
    pub sup_tv_error: f64,
}

/// Simulates `players` chains under the equilibrium policy.
pub fn simulate_json(params: &DemoParams) -> Result<SimulateOutput, DemoError> {
    if params.players < 2 || params.players > 200_000 {
        return Err(DemoError::Params("players must lie in 2..=200000".into()));
    }
    let b = build(params, variant(&params.variant)?)?;
    let eq = solve_built(&b)?;
    let cfg = SimConfig {
        players: params.players,
        seed: params.seed,
        replications: 1,
    };
    let bundle = simulate(&b.gen, &eq.policy, &b.rho, &b.grid, &cfg)?;
    Ok(SimulateOutput {
        t: b.grid.nodes().collect(),
        mean_field: eq.flow.nodes().iter().map(|r| r[0]).collect(),
        empirical: (0..=b.grid.steps()).map(|k| bundle.empirical(k)[0]).collect(),
        sup_tv_error: empirical_flow_error(&bundle, &eq.flow)?,
    })
}

#[derive(Serialize)]
pub struct CompareOutput {
    pub t: Vec<f64>,
    pub policy_g: [Vec<f64>; 2],
    pub policy_gtilde: [Vec<f64>; 2],
    pub max_policy_difference: f64,
}

/// Solves with both mean-variance terminal forms.
pub fn compare_json(params: &DemoParams) -> Result<CompareOutput, DemoError> {
    let g = solve_built(&build(params, MeanVarianceVariant::Centered)?)?;
    let gt = solve_built(&build(params, MeanVarianceVariant::Raw)?)?;
    let diff = (0..g.grid.steps())
        .flat_map(|k| (0..2).map(move |i| (k, i)))
        .map(|(k, i)| (g.policy.get(k, i) - gt.policy.get(k, i)).abs())
        .fold(0.0, f64::max);
    Ok(CompareOutput {
        t: (0..g.grid.steps()).map(|k| g.grid.node(k)).collect(),
        policy_g: [column(&g, 0), column(&g, 1)],
        policy_gtilde: [column(&gt, 0), column(&gt, 1)],
        max_policy_difference: diff,
    })
}

fn wrap<T: Serialize>(
    params: &str,
    f: impl FnOnce(&DemoParams) -> Result<T, DemoError>,
) -> Result<String, JsValue> {
    let p: DemoParams =
        serde_json::from_str(params).map_err(|e| JsValue::from_str(&format!("bad parameters: {e}")))?;
    let out = f(&p).map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&out).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn solve_demo(params: &str) -> Result<String, JsValue> {
    wrap(params, solve_json)
}

#[wasm_bindgen]
pub fn simulate_demo(params: &str) -> Result<String, JsValue> {
    wrap(params, simulate_json)
}

#[wasm_bindgen]
pub fn compare_variants(params: &str) -> Result<String, JsValue> {
    wrap(params, compare_json)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_solve_converges() {
        let out = solve_json(&DemoParams::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.t.len(), 101);
        assert_eq!(out.policy[0].len(), 100);
        assert!(out.contraction_product < 1.0);
    }

    #[test]
    fn simulation_tracks_mean_field() {
        let p = DemoParams {
            players: 20_000,
            ..DemoParams::default()
        };
        let out = simulate_json(&p).unwrap();
        assert!(out.sup_tv_error < 0.05, "{}", out.sup_tv_error);
    }

    #[test]
    fn variants_differ() {
        let out = compare_json(&DemoParams::default()).unwrap();
        assert!(out.max_policy_difference > 1e-3);
    }

    #[test]
    fn bad_input_is_reported() {
        let p = DemoParams {
            variant: "h".into(),
            ..DemoParams::default()
        };
        assert!(solve_json(&p).is_err());
        let p = DemoParams {
            players: 1,
            ..DemoParams::default()
        };
        assert!(simulate_json(&p).is_err());
        assert!(serde_json::from_str::<DemoParams>("{\"beta\": \"x\"}").is_err());
    }

    #[test]
    fn partial_params_use_defaults() {
        let p: DemoParams = serde_json::from_str("{\"beta\": 0.3}").unwrap();
        assert_eq!(p.beta, 0.3);
        assert_eq!(p.steps, 100);
    }
}
