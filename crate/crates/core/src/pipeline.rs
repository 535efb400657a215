//! Whole-run orchestration: train every model from one config, persist
//! checkpoints, and draw evaluation tasks.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use htm_tensor::Checkpoint;

use crate::config::RunConfig;
use crate::connectivity::{hallucination_pool, train_cpc, train_sptm, ConnectivityModel, SptmClassifier, CPC_KIND, SPTM_KIND};
use crate::controller::{train_inverse, InverseModel, INVERSE_KIND};
use crate::dataset::{held_out_contexts, TransitionDataset};
use crate::error::{HtmError, Result};
use crate::generator::{train_cvae, CvaeModel, CVAE_KIND};
use crate::rng::derive;
use crate::train::TrainingLog;
use crate::world::{make_task, Context, Difficulty, Task, WorldConfig};

pub const CVAE_FILE: &str = "cvae.htmc";
pub const CPC_FILE: &str = "cpc.htmc";
pub const SPTM_FILE: &str = "sptm.htmc";
pub const INVERSE_FILE: &str = "inverse.htmc";

/// Every trained model of a run.
#[derive(Clone, Debug)]
pub struct Models {
    pub cvae: CvaeModel,
    pub cpc: ConnectivityModel,
    pub sptm: SptmClassifier,
    pub inverse: InverseModel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogs {
    pub cvae: TrainingLog,
    pub cpc: TrainingLog,
    pub sptm: TrainingLog,
    pub inverse: TrainingLog,
}

/// Contrastive training with generator samples as extra negatives.
pub fn train_cpc_with_generator(
    data: &TransitionDataset,
    cfg: &RunConfig,
    cvae: &CvaeModel,
) -> Result<(ConnectivityModel, TrainingLog)> {
    let pool = if cfg.cpc.hallucinated_frac > 0.0 && cfg.cpc.pool_per_context > 0 {
        Some(hallucination_pool(
            cvae,
            data,
            &cfg.world,
            cfg.cpc.pool_per_context,
            derive(cfg.cpc.seed, 0x9001),
        )?)
    } else {
        None
    };
    train_cpc(data, &cfg.world, pool.as_ref(), &cfg.cpc)
}

/// Trains the generator, both connectivity models and the inverse model.
pub fn train_models(data: &TransitionDataset, cfg: &RunConfig) -> Result<(Models, TrainingLogs)> {
    let (cvae, cvae_log) = train_cvae(data, &cfg.world, &cfg.cvae)?;
    let (cpc, cpc_log) = train_cpc_with_generator(data, cfg, &cvae)?;
    let (sptm, sptm_log) = train_sptm(data, &cfg.world, &cfg.sptm)?;
    let (inverse, inverse_log) = train_inverse(data, &cfg.world, &cfg.inverse)?;
    Ok((
        Models {
            cvae,
            cpc,
            sptm,
            inverse,
        },
        TrainingLogs {
            cvae: cvae_log,
            cpc: cpc_log,
            sptm: sptm_log,
            inverse: inverse_log,
        },
    ))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| HtmError::io(path, e))?;
    ckpt.write_to(BufWriter::new(file))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, kind: [u8; 4]) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| HtmError::io(path, e))?;
    Ok(Checkpoint::read_from(BufReader::new(file), kind)?)
}

impl Models {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HtmError::io(dir, e))?;
        save_checkpoint(&dir.join(CVAE_FILE), &self.cvae.to_checkpoint())?;
        save_checkpoint(&dir.join(CPC_FILE), &self.cpc.to_checkpoint())?;
        save_checkpoint(&dir.join(SPTM_FILE), &self.sptm.to_checkpoint())?;
        save_checkpoint(&dir.join(INVERSE_FILE), &self.inverse.to_checkpoint())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            cvae: CvaeModel::from_checkpoint(&load_checkpoint(&dir.join(CVAE_FILE), CVAE_KIND)?)?,
            cpc: ConnectivityModel::from_checkpoint(&load_checkpoint(&dir.join(CPC_FILE), CPC_KIND)?)?,
            sptm: SptmClassifier::from_checkpoint(&load_checkpoint(&dir.join(SPTM_FILE), SPTM_KIND)?)?,
            inverse: InverseModel::from_checkpoint(&load_checkpoint(&dir.join(INVERSE_FILE), INVERSE_KIND)?)?,
        })
    }
}

/// `count` tasks cycling over `contexts`; task `i` has id `i`.
pub fn make_tasks(
    contexts: &[Context],
    world: &WorldConfig,
    count: usize,
    difficulty: Difficulty,
    threshold: f64,
    seed: u64,
) -> Result<Vec<Task>> {
    if contexts.is_empty() {
        return Err(HtmError::Empty("no contexts to draw tasks from".into()));
    }
    (0..count)
        .map(|i| make_task(&contexts[i % contexts.len()], world, seed, i as u64, difficulty, threshold))
        .collect()
}

/// Benchmark tasks on the run's held-out contexts.
pub fn evaluation_tasks(cfg: &RunConfig, count: usize) -> Result<Vec<Task>> {
    let contexts = held_out_contexts(&cfg.data_spec(), &cfg.world)?;
    make_tasks(
        &contexts,
        &cfg.world,
        count,
        cfg.eval.difficulty,
        cfg.execution.success_threshold,
        cfg.eval.task_seed,
    )
}
