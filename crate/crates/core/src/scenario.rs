//! JSON model files.
//!
//! ```json
//! {
//!   "schema": 1,
//!   "states": 2,
//!   "horizon": 0.5,
//!   "generator": { "kind": "affine", "alpha": [[-1, 1], [1, -1]], "beta": [0.4, -0.4] },
//!   "cost": {
//!     "running": { "base": [0, 0], "congestion": 0.5,
//!                  "tau_weight": { "kind": "hyperbolic", "rate": 1 } },
//!     "control": "quadratic",
//!     "terminal": "mean_variance_g"
//!   }
//! }
//! ```
//!
//! Affine generators accept either `alpha`/`beta` or a list of `segments`
//! with `start`, `alpha`, `beta`. Tabulated generators take `rates` or
//! `segments` with `start`, `rates`. Optional keys are `initial`,
//! `constants` (`K1`, `K2`, `K3`) and the control `weight`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chain::{GeneratorModel, ProbabilityVector};
use crate::error::{MfeError, Result};
use crate::models::{
    AffineQuadraticModel, AffineSegment, ControlFreeModel, DeclaredConstants, DiscountWeight,
    MeanVarianceCost, MeanVarianceVariant, RateSegment, RunningCost, ScenarioCost, TerminalCost,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema: u32,
    pub states: usize,
    pub horizon: f64,
    pub generator: GeneratorSpec,
    pub cost: CostSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConstantsSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Affine {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        segments: Option<Vec<AffineSegmentSpec>>,
    },
    Tabulated {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rates: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        segments: Option<Vec<RateSegmentSpec>>,
    },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSegmentSpec {
    pub start: f64,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RateSegmentSpec {
    pub start: f64,
    pub rates: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running: Option<RunningSpec>,
    #[serde(default = "default_control")]
    pub control: ControlSpec,
    pub terminal: TerminalSpec,
}

fn default_control() -> ControlSpec {
    ControlSpec::Named(ControlName::Quadratic)
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunningSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Vec<f64>>,
    #[serde(default)]
    pub congestion: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_weight: Option<DiscountWeight>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlName {
    Quadratic,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(untagged)]
pub enum ControlSpec {
    Named(ControlName),
    Weighted { kind: ControlName, weight: f64 },
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalName {
    Zero,
    MeanVarianceG,
    MeanVarianceGtilde,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(untagged)]
pub enum TerminalSpec {
    Named(TerminalName),
    Scaled { kind: TerminalName, scale: f64 },
    Tabulated { kind: TabulatedTag, values: Vec<f64> },
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TabulatedTag {
    Tabulated,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSpec {
    #[serde(rename = "K1", default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<f64>,
    #[serde(rename = "K2", default, skip_serializing_if = "Option::is_none")]
    pub k2: Option<f64>,
    #[serde(rename = "K3", default, skip_serializing_if = "Option::is_none")]
    pub k3: Option<f64>,
}

#[derive(Clone, Debug)]
pub enum ScenarioGenerator {
    Affine(AffineQuadraticModel),
    Tabulated(ControlFreeModel),
}

impl ScenarioGenerator {
    pub fn as_dyn(&self) -> &dyn GeneratorModel {
        match self {
            ScenarioGenerator::Affine(g) => g,
            ScenarioGenerator::Tabulated(g) => g,
        }
    }
}

/// A parsed and validated model file.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub file: ModelFile,
    pub generator: ScenarioGenerator,
    pub cost: ScenarioCost,
    /// Lowercase hex SHA-256 of the canonical JSON form of `file`.
    pub hash: String,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> MfeError {
    MfeError::InvalidModel(format!("{field}: {msg}"))
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ModelFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            MfeError::InvalidModel(format!(
                "line {}, column {}, field `{}`: {}",
                inner.line(),
                inner.column(),
                path,
                inner
            ))
        })?;
        Self::from_file(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MfeError::InvalidModel(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.schema != SCHEMA_VERSION {
            return Err(invalid(
                "schema",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", file.schema),
            ));
        }
        let m = file.states;
        if m == 0 {
            return Err(invalid("states", "must be positive"));
        }
        if !(file.horizon.is_finite() && file.horizon > 0.0) {
            return Err(invalid("horizon", "must be positive and finite"));
        }
        let generator = build_generator(&file.generator)?;
        if generator.as_dyn().states() != m {
            return Err(invalid(
                "generator",
                format!("has {} states, expected {m}", generator.as_dyn().states()),
            ));
        }
        let cost = build_cost(&file.cost, m, file.constants.unwrap_or_default())?;
        if let Some(init) = &file.initial {
            if init.len() != m {
                return Err(invalid("initial", format!("must have {m} entries")));
            }
            ProbabilityVector::new(init.clone()).map_err(|e| invalid("initial", e))?;
        }
        let hash = model_hash(&file);
        Ok(Self {
            file,
            generator,
            cost,
            hash,
        })
    }

    pub fn gen(&self) -> &dyn GeneratorModel {
        self.generator.as_dyn()
    }

    pub fn states(&self) -> usize {
        self.file.states
    }

    pub fn horizon(&self) -> f64 {
        self.file.horizon
    }

    /// The file's `initial` law, or uniform.
    pub fn initial(&self) -> ProbabilityVector {
        match &self.file.initial {
            Some(w) => ProbabilityVector::new(w.clone()).expect("validated on load"),
            None => ProbabilityVector::uniform(self.file.states),
        }
    }
}

/// SHA-256 of the model serialized through `serde_json::Value`, whose maps
/// are key-sorted.
pub fn model_hash(file: &ModelFile) -> String {
    let value = serde_json::to_value(file).expect("model serializes");
    let bytes = serde_json::to_vec(&value).expect("value serializes");
    hex::encode(Sha256::digest(&bytes))
}

fn build_generator(spec: &GeneratorSpec) -> Result<ScenarioGenerator> {
    match spec {
        GeneratorSpec::Affine {
            alpha,
            beta,
            segments,
        } => {
            let segs = match (alpha, beta, segments) {
                (Some(a), Some(b), None) => vec![AffineSegment {
                    start: 0.0,
                    alpha: a.clone(),
                    beta: b.clone(),
                }],
                (None, None, Some(s)) if !s.is_empty() => s
                    .iter()
                    .map(|s| AffineSegment {
                        start: s.start,
                        alpha: s.alpha.clone(),
                        beta: s.beta.clone(),
                    })
                    .collect(),
                _ => {
                    return Err(invalid(
                        "generator",
                        "affine generators need either `alpha` and `beta` or a nonempty `segments` list",
                    ))
                }
            };
            AffineQuadraticModel::new(segs)
                .map(ScenarioGenerator::Affine)
                .map_err(|e| invalid("generator", e))
        }
        GeneratorSpec::Tabulated { rates, segments } => {
            let segs = match (rates, segments) {
                (Some(r), None) => vec![RateSegment {
                    start: 0.0,
                    rates: r.clone(),
                }],
                (None, Some(s)) if !s.is_empty() => s
                    .iter()
                    .map(|s| RateSegment {
                        start: s.start,
                        rates: s.rates.clone(),
                    })
                    .collect(),
                _ => {
                    return Err(invalid(
                        "generator",
                        "tabulated generators need either `rates` or a nonempty `segments` list",
                    ))
                }
            };
            ControlFreeModel::new(segs)
                .map(ScenarioGenerator::Tabulated)
                .map_err(|e| invalid("generator", e))
        }
    }
}

fn build_cost(spec: &CostSpec, m: usize, constants: ConstantsSpec) -> Result<ScenarioCost> {
    let running = match &spec.running {
        Some(r) => RunningCost {
            base: r.base.clone().unwrap_or_else(|| vec![0.0; m]),
            congestion: r.congestion,
            weight: r.tau_weight.unwrap_or(DiscountWeight::None),
        },
        None => RunningCost {
            base: vec![0.0; m],
            congestion: 0.0,
            weight: DiscountWeight::None,
        },
    };
    let weight = match spec.control {
        ControlSpec::Named(ControlName::Quadratic) => 1.0,
        ControlSpec::Weighted { weight, .. } => weight,
    };
    let terminal = match &spec.terminal {
        TerminalSpec::Named(name) => named_terminal(*name, 1.0, m),
        TerminalSpec::Scaled { kind, scale } => named_terminal(*kind, *scale, m),
        TerminalSpec::Tabulated { values, .. } => TerminalCost::Tabulated {
            values: values.clone(),
        },
    };
    let declared = DeclaredConstants {
        k1: constants.k1,
        k2: constants.k2,
        k3: constants.k3,
    };
    ScenarioCost::new(m, running, weight, terminal, declared).map_err(|e| invalid("cost", e))
}

fn named_terminal(name: TerminalName, scale: f64, m: usize) -> TerminalCost {
    match name {
        TerminalName::Zero => TerminalCost::Zero,
        TerminalName::MeanVarianceG => {
            TerminalCost::MeanVariance(MeanVarianceCost::new(MeanVarianceVariant::Centered, scale, m))
        }
        TerminalName::MeanVarianceGtilde => {
            TerminalCost::MeanVariance(MeanVarianceCost::new(MeanVarianceVariant::Raw, scale, m))
        }
    }
}
