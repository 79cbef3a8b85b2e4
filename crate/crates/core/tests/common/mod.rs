#![allow(dead_code)]

use std::path::PathBuf;

use mfe_core::chain::{FlowCurve, GeneratorModel, ProbabilityVector, StrategyTable, TimeGrid};
use mfe_core::hj::CostModel;
use mfe_core::models::{
    AffineQuadraticModel, DeclaredConstants, DiscountWeight, MeanVarianceCost, MeanVarianceVariant,
    RunningCost, ScenarioCost, TerminalCost,
};
use mfe_core::scenario::Scenario;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn example_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

pub fn example(name: &str) -> Scenario {
    Scenario::load(&example_path(name)).expect("shipped example parses")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_distribution(rng: &mut ChaCha8Rng, m: usize) -> ProbabilityVector {
    let mut w: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
    if rng.random::<f64>() < 0.2 {
        w[rng.random_range(0..m)] = 0.0;
    }
    if w.iter().sum::<f64>() == 0.0 {
        w[0] = 1.0;
    }
    ProbabilityVector::new(w).unwrap()
}

/// Random affine model: `α` off-diagonals in `[0.1, 2]`, `β` summing to zero.
pub fn random_affine(rng: &mut ChaCha8Rng, m: usize, beta_scale: f64) -> AffineQuadraticModel {
    let mut alpha = vec![vec![0.0; m]; m];
    for (i, row) in alpha.iter_mut().enumerate() {
        for (j, a) in row.iter_mut().enumerate() {
            if i != j {
                *a = 0.1 + 1.9 * rng.random::<f64>();
            }
        }
        row[i] = -row.iter().sum::<f64>();
    }
    let mut beta: Vec<f64> = (0..m).map(|_| beta_scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
    let mean = beta.iter().sum::<f64>() / m as f64;
    beta.iter_mut().for_each(|b| *b -= mean);
    AffineQuadraticModel::homogeneous(alpha, beta).unwrap()
}

pub fn random_policy(rng: &mut ChaCha8Rng, gen: &dyn GeneratorModel, grid: &TimeGrid) -> StrategyTable {
    StrategyTable::from_fn(grid.steps(), gen.states(), |k, i| {
        let iv = gen.admissible(grid.node(k), i);
        iv.lo + iv.width() * rng.random::<f64>()
    })
}

/// Random nonnegative cost with optional τ-dependence and distribution
/// dependence.
pub fn random_cost(rng: &mut ChaCha8Rng, m: usize, tau_dependent: bool, mean_field: bool) -> ScenarioCost {
    let weight = if tau_dependent {
        if rng.random::<bool>() {
            DiscountWeight::Hyperbolic { rate: 0.2 + 2.0 * rng.random::<f64>() }
        } else {
            DiscountWeight::Exponential { rate: 0.2 + 2.0 * rng.random::<f64>() }
        }
    } else {
        DiscountWeight::None
    };
    let terminal = if mean_field {
        let variant = if rng.random::<bool>() {
            MeanVarianceVariant::Centered
        } else {
            MeanVarianceVariant::Raw
        };
        TerminalCost::MeanVariance(MeanVarianceCost::new(variant, 0.1 + rng.random::<f64>(), m))
    } else {
        TerminalCost::Tabulated {
            values: (0..m).map(|_| 2.0 * rng.random::<f64>()).collect(),
        }
    };
    ScenarioCost::new(
        m,
        RunningCost {
            base: (0..m).map(|_| rng.random::<f64>()).collect(),
            congestion: if mean_field { rng.random::<f64>() } else { 0.0 },
            weight,
        },
        0.5 + 1.5 * rng.random::<f64>(),
        terminal,
        DeclaredConstants::default(),
    )
    .unwrap()
}

/// Cell transitions from nalgebra's own matrix exponential.
pub fn oracle_transitions(gen: &dyn GeneratorModel, pi: &StrategyTable, grid: &TimeGrid) -> Vec<DMatrix<f64>> {
    (0..grid.steps())
        .map(|k| (gen.generator_matrix(grid.node(k), pi.row(k)) * grid.dt()).exp())
        .collect()
}

pub fn oracle_flow(gen: &dyn GeneratorModel, rho: &ProbabilityVector, pi: &StrategyTable, grid: &TimeGrid) -> Vec<Vec<f64>> {
    let mut mu = DVector::from_column_slice(rho.as_slice()).transpose();
    let mut out = vec![mu.iter().copied().collect::<Vec<_>>()];
    for p in oracle_transitions(gen, pi, grid) {
        mu = &mu * p;
        out.push(mu.iter().copied().collect());
    }
    out
}

/// Rectangle-rule cost of the chain started in `i` at node `k`, discounted
/// from node `a`, computed by pushing `δ_i` forward with the oracle
/// transitions.
#[allow(clippy::too_many_arguments)]
pub fn oracle_cost(
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    flow: &FlowCurve,
    pi: &StrategyTable,
    grid: &TimeGrid,
    a: usize,
    k: usize,
    i: usize,
) -> f64 {
    let mats = oracle_transitions(gen, pi, grid);
    let m = gen.states();
    let tau = grid.node(a);
    let mut mu = vec![0.0; m];
    mu[i] = 1.0;
    let mut total = 0.0;
    for (s, p) in mats.iter().enumerate().skip(k) {
        let t = grid.node(s);
        for (j, w) in mu.iter().enumerate() {
            total += grid.dt() * w * cost.running_total(tau, t, j, pi.get(s, j), flow.at(s));
        }
        let next: Vec<f64> = (0..m).map(|c| (0..m).map(|r| mu[r] * p[(r, c)]).sum()).collect();
        mu = next;
    }
    total
        + mu.iter()
            .enumerate()
            .map(|(j, w)| w * cost.terminal(tau, j, flow.at(grid.steps())))
            .sum::<f64>()
}

pub fn symmetric_closed_form(t: f64) -> [f64; 2] {
    let e = (-2.0 * t).exp();
    [(1.0 + e) / 2.0, (1.0 - e) / 2.0]
}

pub fn variance(rho: &ProbabilityVector) -> f64 {
    let mean: f64 = rho.as_slice().iter().enumerate().map(|(j, w)| (j + 1) as f64 * w).sum();
    rho.as_slice()
        .iter()
        .enumerate()
        .map(|(j, w)| w * ((j + 1) as f64 - mean).powi(2))
        .sum()
}
