//! The JSON experiment schema. Unknown keys are rejected everywhere;
//! every omitted field takes its documented default, so a minimal config
//! is `{}`. One global seed drives all derived streams; `--seed` on the
//! command line overrides it.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::attack::{AttackConfig, AttackMethod, OpsParams, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::eval::AsrFilter;
use crate::policy::PolicyParams;
use crate::report::to_exact_json;
use crate::robust::RobustParams;
use crate::vit::ViTConfig;
use crate::zoo::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n: usize,
    pub seed: u64,
    /// Optional fixed-record real-image file used instead of the synthetic
    /// set (see `data::load_record_file`).
    pub external_path: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { n: 5000, seed: 1, external_path: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub epsilon: f64,
    pub steps: usize,
    pub alpha: Option<f64>,
    pub mu: f64,
    pub method: AttackMethod,
    /// How many test images to attack.
    pub count: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            steps: 10,
            alpha: None,
            mu: 1.0,
            method: AttackMethod::Mi,
            count: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub ratios: Vec<f64>,
    pub draws: usize,
    /// Test images evaluated per probe point.
    pub count: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self { ratios: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9], draws: 3, count: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub filter: AsrFilter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    /// Surrogate architecture; zoo victims are fixed variants of it.
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub ops: OpsParams,
    pub policy: PolicyParams,
    pub robust: RobustParams,
    pub probe: ProbeSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            dataset: DatasetSection::default(),
            model: ViTConfig::toy(),
            train: TrainConfig::default(),
            attack: AttackSection::default(),
            ops: OpsParams::default(),
            policy: PolicyParams::default(),
            robust: RobustParams::default(),
            probe: ProbeSection::default(),
            eval: EvalSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::parse(&text)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Canonical serialization of the effective config.
    pub fn canonical_json(&self) -> String {
        to_exact_json(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Assembles the runtime attack bundle from the config sections.
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.attack.epsilon,
            steps: self.attack.steps,
            alpha: self.attack.alpha,
            mu: self.attack.mu,
            method: self.attack.method,
            ops: self.ops.clone(),
            policy: self.policy.clone(),
            robust: self.robust.clone(),
            seed: self.seed,
        }
    }

    /// Config echo embedded into reports.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_losslessly() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::parse(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse(r#"{"surprise": 1}"#).is_err());
        assert!(ExperimentConfig::parse(r#"{"attack": {"epsilonn": 0.1}}"#).is_err());
        assert!(ExperimentConfig::parse(r#"{"ops": {"sparsify": {"rr": 0.1}}}"#).is_err());
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::parse("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.attack.epsilon, 16.0 / 255.0);
    }

    #[test]
    fn ops_section_matches_documented_shape() {
        let cfg = ExperimentConfig::parse(
            r#"{"ops": {"sparsify": {"r": 0.4, "mode": "neginf"},
                        "permute": {"p": 0.5, "r": 1.0},
                        "clean": {"r": 0.2},
                        "moe": {"E": 4, "d": 0.25}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.ops.sparsify.r, 0.4);
        assert_eq!(cfg.ops.moe.experts, 4);
        assert_eq!(cfg.ops.moe.d, 0.25);
    }

    #[test]
    fn hash_is_stable_and_seed_sensitive() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        let c = ExperimentConfig::default().with_seed(7);
        assert_ne!(a.config_hash(), c.config_hash());
    }
}
