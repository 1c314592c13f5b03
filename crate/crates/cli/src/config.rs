//! Layered experiment configuration: built-in defaults, then the JSON file,
//! then `--set` overrides, then `--seed`. The merged value is deserialized
//! with unknown keys rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use bgk_core::ansatz::Architecture;
use bgk_core::counterexamples::EPSILON_SWEEP;
use bgk_core::residuals_loss::ProblemSpec;
use bgk_core::trainer::TrainConfig;
use bgk_core::velocity_grid::VelocityGrid;
use bgk_core::weights::{WeightFunction, DEFAULT_RADII};

use crate::CliError;

/// Uniform velocity grid `[-V, V]³` with `points` nodes per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub half_width: f64,
    pub points: usize,
}

impl GridConfig {
    pub fn build(&self) -> Result<VelocityGrid, CliError> {
        Ok(VelocityGrid::new(self.half_width, self.points)?)
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            half_width: 10.0,
            points: 33,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleConfig {
    pub family: u8,
    pub epsilons: Vec<f64>,
    pub terminal_time: f64,
    pub t_eval: f64,
    pub lambda_ini: f64,
    pub weight: WeightFunction,
    /// Allowed distance of the loss slope from 2.
    pub slope_tolerance: f64,
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        Self {
            family: 1,
            epsilons: EPSILON_SWEEP.to_vec(),
            terminal_time: 0.1,
            t_eval: 0.1,
            lambda_ini: 1.0,
            weight: WeightFunction::Polynomial {
                alpha: 0.1,
                beta: 4.0,
            },
            slope_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckWeightConfig {
    pub weight: WeightFunction,
    /// Gaussian decay rate in the second condition.
    pub decay: f64,
    pub radii: Vec<f64>,
}

impl Default for CheckWeightConfig {
    fn default() -> Self {
        Self {
            weight: WeightFunction::Polynomial {
                alpha: 0.1,
                beta: 4.0,
            },
            decay: 0.5,
            radii: DEFAULT_RADII.to_vec(),
        }
    }
}

/// Discretization of a grid reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSettings {
    pub nx: usize,
    pub velocity: GridConfig,
    pub dt: f64,
}

impl Default for ReferenceSettings {
    fn default() -> Self {
        Self {
            nx: 64,
            velocity: GridConfig::default(),
            dt: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub problem: ProblemSpec,
    pub solver: ReferenceSettings,
    pub snapshots: Vec<f64>,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            problem: ProblemSpec::smooth_1d(0.01),
            solver: ReferenceSettings::default(),
            snapshots: vec![0.1],
        }
    }
}

/// Post-training comparison against a stored reference archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTarget {
    pub reference: String,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub problem: ProblemSpec,
    /// Derived from the problem when absent.
    pub architecture: Option<Architecture>,
    pub train: TrainConfig,
    pub evaluate: Option<EvalTarget>,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        let problem = ProblemSpec::smooth_1d(0.01);
        Self {
            train: TrainConfig::desk(problem.spatial_dim),
            problem,
            architecture: None,
            evaluate: None,
        }
    }
}

/// What is compared with the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Prediction {
    Checkpoint { path: String },
    Archive { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub prediction: Prediction,
    pub reference: String,
    /// Must equal the reference grid when given.
    pub velocity: Option<GridConfig>,
    pub t: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            prediction: Prediction::Checkpoint {
                path: "checkpoint.json".into(),
            },
            reference: "reference.bgksol".into(),
            velocity: None,
            t: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub problem: ProblemSpec,
    pub architecture: Option<Architecture>,
    /// Everything but the weight, which the sweep sets.
    pub train: TrainConfig,
    pub reference: ReferenceSettings,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Adds an unweighted run per seed.
    pub include_standard: bool,
    pub t_eval: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let problem = ProblemSpec::smooth_1d(0.01);
        Self {
            train: TrainConfig::desk(problem.spatial_dim),
            problem,
            architecture: None,
            reference: ReferenceSettings::default(),
            alphas: vec![0.1],
            betas: vec![2.0, 3.0, 4.0, 5.0],
            seeds: vec![0],
            include_standard: true,
            t_eval: 0.1,
        }
    }
}

/// Merges `layer` into `base`; tagged objects whose `kind` differs are
/// replaced rather than merged.
pub fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            let kind_changed =
                matches!((b.get("kind"), l.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changed {
                *b = l;
                return;
            }
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("--set expects key=value, got `{assignment}`")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::usage(format!("bad key path `{path}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut layer = value;
    for key in path.rsplit('.') {
        let mut m = Map::new();
        m.insert(key.to_string(), layer);
        layer = Value::Object(m);
    }
    merge(root, layer);
    Ok(())
}

/// Resolves a configuration from its layers.
pub fn resolve<T>(
    file: Option<&Path>,
    sets: &[String],
    seed: Option<(u64, &[&str])>,
) -> Result<T, CliError>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut root = serde_json::to_value(T::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        let layer: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if !layer.is_object() {
            return Err(CliError::config("configuration must be a JSON object"));
        }
        merge(&mut root, layer);
    }
    for s in sets {
        apply_set(&mut root, s)?;
    }
    if let Some((seed, path)) = seed {
        let mut layer = if path.last() == Some(&"seeds") {
            serde_json::json!([seed])
        } else {
            serde_json::json!(seed)
        };
        for key in path.iter().rev() {
            let mut m = Map::new();
            m.insert(key.to_string(), layer);
            layer = Value::Object(m);
        }
        merge(&mut root, layer);
    }
    serde_json::from_value(root).map_err(|e| CliError::config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn set_overrides_nested_keys() {
        let mut v = json!({"a": {"b": 1, "c": 2}});
        apply_set(&mut v, "a.b=5").unwrap();
        apply_set(&mut v, "a.d=text").unwrap();
        assert_eq!(v, json!({"a": {"b": 5, "c": 2, "d": "text"}}));
        assert!(apply_set(&mut v, "a.b").is_err());
        assert!(apply_set(&mut v, "a..b=1").is_err());
    }

    #[test]
    fn tagged_objects_are_replaced() {
        let mut v = json!({"w": {"kind": "polynomial", "alpha": 0.1, "beta": 4.0}});
        merge(&mut v, json!({"w": {"kind": "identity"}}));
        assert_eq!(v, json!({"w": {"kind": "identity"}}));
        merge(&mut v, json!({"w": {"kind": "identity"}}));
        assert_eq!(v, json!({"w": {"kind": "identity"}}));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let sets = vec!["bogus=1".to_string()];
        let r: Result<CheckWeightConfig, _> = resolve(None, &sets, None);
        assert!(r.is_err());
        let sets = vec!["weight.beta=3".to_string()];
        let c: CheckWeightConfig = resolve(None, &sets, None).unwrap();
        assert_eq!(
            c.weight,
            WeightFunction::Polynomial {
                alpha: 0.1,
                beta: 3.0
            }
        );
    }

    #[test]
    fn seed_lands_on_its_path() {
        let c: TrainCmdConfig = resolve(None, &[], Some((7, &["train", "seed"]))).unwrap();
        assert_eq!(c.train.seed, 7);
        let s: SweepConfig = resolve(None, &[], Some((9, &["seeds"]))).unwrap();
        assert_eq!(s.seeds, vec![9]);
    }
}
