//! Joint training of the point-cloud and pose networks, evaluation, and the
//! ablation ladder.

mod model;
mod run;
mod step;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, DEFAULT_THETA};

pub use model::{evaluate, evaluate_predictions, Model, ModelBound, Prediction};
pub use run::{finetune, run_ablation_ladder, train, LadderEntry, LogRow, TrainOutcome};
pub use step::{assemble_batch, build_step, Batch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SynthesisOnly,
    Mpe,
    MpeSpcDecoder,
    MpeSpcDecoderPcloss,
    MpeSpcDecoderSpcloss,
}

/// Self-supervised term of a mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelfLoss {
    Pc,
    Spc,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::SynthesisOnly,
        Mode::Mpe,
        Mode::MpeSpcDecoder,
        Mode::MpeSpcDecoderPcloss,
        Mode::MpeSpcDecoderSpcloss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SynthesisOnly => "synthesis_only",
            Mode::Mpe => "mpe",
            Mode::MpeSpcDecoder => "mpe_spc_decoder",
            Mode::MpeSpcDecoderPcloss => "mpe_spc_decoder_pcloss",
            Mode::MpeSpcDecoderSpcloss => "mpe_spc_decoder_spcloss",
        }
    }

    pub fn has_mpe(self) -> bool {
        self != Mode::SynthesisOnly
    }

    pub fn has_spc(self) -> bool {
        matches!(
            self,
            Mode::MpeSpcDecoder | Mode::MpeSpcDecoderPcloss | Mode::MpeSpcDecoderSpcloss
        )
    }

    pub fn self_loss(self) -> Option<SelfLoss> {
        match self {
            Mode::MpeSpcDecoderPcloss => Some(SelfLoss::Pc),
            Mode::MpeSpcDecoderSpcloss => Some(SelfLoss::Spc),
            _ => None,
        }
    }

    /// Whether training batches include held-out-domain clips.
    pub fn uses_real(self) -> bool {
        self.self_loss().is_some()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub iterations: usize,
    pub lr: f64,
    pub batch_mocap: usize,
    pub batch_real: usize,
    /// Consecutive frames per training clip.
    pub clip_frames: usize,
    /// Earlier frames sampled to estimate a clip's history pool.
    pub history_samples: usize,
    /// Treat the sampled history features as constants in the backward pass.
    pub detach_history: bool,
    pub weights: LossWeights,
    pub theta: f64,
    /// Stop gradients from the self-supervised loss into the registration.
    pub detach_evidence: bool,
    pub seed: u64,
    /// Seed of the synthesis samples used for evaluation.
    pub eval_seed: u64,
}

impl TrainConfig {
    /// Full-size settings.
    pub fn full() -> Self {
        Self {
            mode: Mode::MpeSpcDecoderSpcloss,
            iterations: 20_000,
            lr: 3e-4,
            batch_mocap: 128,
            batch_real: 32,
            clip_frames: 4,
            history_samples: 4,
            detach_history: true,
            weights: LossWeights::default(),
            theta: DEFAULT_THETA,
            detach_evidence: true,
            seed: 0,
            eval_seed: 1_000_003,
        }
    }

    /// Settings that finish on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            iterations: 4_000,
            lr: 1e-3,
            batch_mocap: 32,
            batch_real: 16,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (full, desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_mocap == 0 || self.clip_frames == 0 || self.history_samples == 0 {
            return Err(Error::Config("batch sizes and clip length must be positive".into()));
        }
        if self.mode.uses_real() && self.batch_real == 0 {
            return Err(Error::Config(format!("mode {} needs batch_real > 0", self.mode)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return Err(Error::Config(format!("theta must be positive, got {}", self.theta)));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("agrol".parse::<Mode>().is_err());
        assert!(!Mode::SynthesisOnly.has_mpe() && !Mode::Mpe.has_spc());
        assert!(Mode::MpeSpcDecoderPcloss.uses_real() && !Mode::MpeSpcDecoder.uses_real());
    }

    #[test]
    fn presets_validate() {
        let p = TrainConfig::full();
        assert_eq!((p.iterations, p.batch_mocap, p.batch_real), (20_000, 128, 32));
        assert_eq!(p.lr, 3e-4);
        TrainConfig::desk().validate().unwrap();
        assert!(TrainConfig::preset("huge").is_err());
        let bad = TrainConfig {
            batch_real: 0,
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
    }
}
