//! Contrastive (SimCLR / SimSiam) and augmentation-prediction objectives and
//! the pre-training loop that combines them.

mod data;
mod heads;
mod losses;
mod trainer;

use crate::error::{Error, Result};

pub use data::{Batch, ViewBatcher};
pub use heads::{HeadsConfig, SslHeads};
pub use losses::{combine_losses, mlap_from_logits, nt_xent, simsiam_loss};
pub use trainer::{mlap_accuracy, pretrain, LossLog, Schedule, StepRecord, Trainer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ContrastiveKind {
    SimClr { temperature: f64 },
    SimSiam,
}

impl ContrastiveKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ContrastiveKind::SimClr { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::Config(format!("temperature must be > 0, got {temperature}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ContrastiveKind::SimClr { .. } => "simclr",
            ContrastiveKind::SimSiam => "simsiam",
        }
    }
}

/// Loss values of one step; `total == contrastive + lambda * mlap`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub mlap: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(contrastive: f64, mlap: f64, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::arg(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(LossBreakdown {
            contrastive,
            mlap,
            total: contrastive + lambda * mlap,
            lambda,
        })
    }
}
