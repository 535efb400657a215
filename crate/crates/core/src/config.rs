//! Run configuration: every tunable of a collect → train → evaluate run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::connectivity::{CpcConfig, SptmConfig};
use crate::controller::{ExecutionConfig, InverseConfig};
use crate::dataset::DataSpec;
use crate::error::{HtmError, Result};
use crate::generator::CvaeConfig;
use crate::planner::PlanningConfig;
use crate::world::{Difficulty, ObsMode, WorldConfig};

/// Benchmark and ablation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Benchmark tasks, spread over the held-out contexts.
    pub tasks: usize,
    /// Tasks of the score × weight ablation grid.
    pub ablation_tasks: usize,
    pub difficulty: Difficulty,
    pub task_seed: u64,
    /// Base seed of execution (hallucination) streams.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: 20,
            ablation_tasks: 10,
            difficulty: Difficulty::CrossWall,
            task_seed: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "htm-run/data".into(),
            models: "htm-run/models".into(),
            reports: "htm-run/reports".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: ObsMode,
    pub world: WorldConfig,
    pub data: DataSpec,
    pub cvae: CvaeConfig,
    pub cpc: CpcConfig,
    pub sptm: SptmConfig,
    pub inverse: InverseConfig,
    pub planning: PlanningConfig,
    pub execution: ExecutionConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

fn config_err(key: &str, msg: impl Into<String>) -> HtmError {
    HtmError::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(config_err(key, "must be at least 1"));
    }
    Ok(())
}

fn learning_rate(key: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(config_err(key, format!("must be a positive finite number, got {v}")));
    }
    Ok(())
}

fn fraction(key: &str, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(config_err(key, format!("must lie in [0, 1), got {v}")));
    }
    Ok(())
}

impl RunConfig {
    /// Data spec with the run's observation mode applied.
    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            mode: self.mode,
            ..self.data.clone()
        }
    }

    /// Rejects out-of-range values, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.data_spec().validate()?;
        positive("data.horizon", self.data.horizon)?;
        positive("data.held_out", self.data.held_out)?;

        let c = &self.cvae;
        positive("cvae.latent", c.latent)?;
        positive("cvae.hidden", c.hidden)?;
        positive("cvae.batch", c.batch)?;
        learning_rate("cvae.lr", c.lr)?;
        fraction("cvae.validation_frac", c.validation_frac)?;
        if !(c.beta >= 0.0 && c.beta.is_finite()) {
            return Err(config_err("cvae.beta", "must be nonnegative"));
        }

        let p = &self.cpc;
        positive("cpc.latent", p.latent)?;
        positive("cpc.hidden", p.hidden)?;
        positive("cpc.horizon", p.horizon)?;
        positive("cpc.batch", p.batch)?;
        positive("cpc.validation_batches", p.validation_batches)?;
        if p.candidates < 2 {
            return Err(config_err("cpc.candidates", "need at least 2 candidates"));
        }
        if !(0.0..=1.0).contains(&p.hallucinated_frac) {
            return Err(config_err("cpc.hallucinated_frac", "must lie in [0, 1]"));
        }
        learning_rate("cpc.lr", p.lr)?;
        fraction("cpc.validation_frac", p.validation_frac)?;
        if p.horizon > self.data.horizon {
            return Err(config_err("cpc.horizon", "cannot exceed data.horizon"));
        }

        let s = &self.sptm;
        positive("sptm.latent", s.latent)?;
        positive("sptm.hidden", s.hidden)?;
        positive("sptm.horizon", s.horizon)?;
        positive("sptm.batch", s.batch)?;
        positive("sptm.validation_batches", s.validation_batches)?;
        if s.negative_gap <= s.horizon {
            return Err(config_err("sptm.negative_gap", "must exceed sptm.horizon"));
        }
        learning_rate("sptm.lr", s.lr)?;
        fraction("sptm.validation_frac", s.validation_frac)?;
        if s.horizon > self.data.horizon {
            return Err(config_err("sptm.horizon", "cannot exceed data.horizon"));
        }

        let i = &self.inverse;
        positive("inverse.hidden", i.hidden)?;
        positive("inverse.batch", i.batch)?;
        learning_rate("inverse.lr", i.lr)?;
        fraction("inverse.validation_frac", i.validation_frac)?;

        self.planning.validate()?;
        self.execution.validate()?;
        positive("eval.tasks", self.eval.tasks)?;
        positive("eval.ablation_tasks", self.eval.ablation_tasks)?;
        Ok(())
    }

    /// Replaces every seed with streams derived from `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        use crate::rng::derive;
        self.data.seed = derive(seed, 1);
        self.cvae.seed = derive(seed, 2);
        self.cpc.seed = derive(seed, 3);
        self.sptm.seed = derive(seed, 4);
        self.inverse.seed = derive(seed, 5);
        self.eval.task_seed = derive(seed, 6);
        self.eval.seed = derive(seed, 7);
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses a JSON object into a validated config; absent keys take their
/// defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { String::new() } else { path };
        config_err(&key, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HtmError::io(path, e))?;
    parse_config(&text)
}
