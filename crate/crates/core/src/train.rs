use serde::{Deserialize, Serialize};

use crate::error::{HtmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Absent for the untrained model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    /// Model-specific diagnostic (the CPC mutual-information bound).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<f64>,
}

/// Per-epoch curve; entry 0 is the untrained model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn initial_val(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.val_loss)
    }

    pub fn best_val(&self) -> Option<f64> {
        self.epochs
            .iter()
            .map(|e| e.val_loss)
            .filter(|v| v.is_finite())
            .reduce(f64::min)
    }
}

pub(crate) fn ensure_finite(what: &str, value: f64, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(HtmError::Divergence(format!("{what} became {value} at epoch {epoch}")))
    }
}
