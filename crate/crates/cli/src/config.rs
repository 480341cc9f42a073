use std::path::{Path, PathBuf};

use convexnet::arrangements::PlanMode;
use convexnet::dataio::TeacherSpec;
use convexnet::solver::SolveConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

/// Teacher sizes for synthetic data; the seed comes from the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub m1: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdSettings {
    pub lr: f64,
    /// `None` means full batch
    pub batch: Option<usize>,
    pub epochs: usize,
    /// number of initialisation trials
    pub seeds: usize,
    pub projection: bool,
}

impl Default for SgdSettings {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch: None,
            epochs: 5000,
            seeds: 5,
            projection: true,
        }
    }
}

/// Everything that determines a run. Written to `config.json` in the run
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub csv: Option<PathBuf>,
    /// label column index; last column when absent
    pub label_column: Option<usize>,
    pub synth: Option<SynthSpec>,
    pub standardize: bool,
    pub center_labels: bool,
    pub m1: usize,
    pub k: usize,
    pub beta: f64,
    pub plan_mode: PlanMode,
    pub p1_target: usize,
    pub p2_target: usize,
    /// reuse an existing plan instead of building one
    pub plan_file: Option<PathBuf>,
    pub solver: SolveConfig,
    pub sgd: SgdSettings,
    pub seed: Option<u64>,
    /// hold out `1 - train_fraction` of the rows for testing
    pub train_fraction: Option<f64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            csv: None,
            label_column: None,
            synth: None,
            standardize: false,
            center_labels: false,
            m1: 3,
            k: 5,
            beta: 0.002,
            plan_mode: PlanMode::Sampled,
            p1_target: 10,
            p2_target: 10,
            plan_file: None,
            solver: SolveConfig::default(),
            sgd: SgdSettings::default(),
            seed: None,
            train_fraction: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn require_seed(&self, command: &str) -> Result<u64, Failure> {
        self.seed
            .ok_or_else(|| Failure::usage(format!("{command} is stochastic: --seed is required")))
    }

    pub fn teacher_spec(&self, seed: u64) -> Option<TeacherSpec> {
        self.synth.map(|s| TeacherSpec {
            n: s.n,
            d: s.d,
            m1: s.m1,
            k: s.k,
            seed,
        })
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.csv.is_some() && self.synth.is_some() {
            return Err(Failure::usage("give either a CSV path or a synth spec, not both"));
        }
        if self.m1 == 0 || self.k == 0 {
            return Err(Failure::usage("m1 and K must be >= 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Failure::usage(format!("beta must be > 0, got {}", self.beta)));
        }
        if let Some(f) = self.train_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Failure::usage(format!("train fraction must lie in (0, 1), got {f}")));
            }
        }
        self.solver.validate().map_err(Failure::from)?;
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies a JSON config file on top of the flag-derived config.
pub fn apply_config_file(flags: &RunConfig, path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    let top: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())).with_path(path))?;
    let mut base = serde_json::to_value(flags).expect("config serializes");
    merge(&mut base, top);
    serde_json::from_value(base)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())).with_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_overlays_nested_objects() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, json!({"b": {"c": 5}, "e": [1]}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 5, "d": 3}, "e": [1]}));
    }

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig {
            seed: Some(4),
            synth: Some(SynthSpec { n: 5, d: 2, m1: 3, k: 5 }),
            ..RunConfig::default()
        };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"beta": 0.5, "solver": {"max_iter": 7}}"#).unwrap();
        let flags = RunConfig {
            beta: 0.1,
            m1: 4,
            ..RunConfig::default()
        };
        let cfg = apply_config_file(&flags, &path).unwrap();
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.m1, 4);
        assert_eq!(cfg.solver.max_iter, 7);
        assert_eq!(cfg.solver.polish_max_iter, SolveConfig::default().polish_max_iter);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"betta": 0.5}"#).unwrap();
        assert!(apply_config_file(&RunConfig::default(), &path).is_err());
    }
}
