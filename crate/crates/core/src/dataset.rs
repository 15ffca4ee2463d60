//! Generated train/test splits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{BodyShape, Skeleton};
use crate::sensor::motion::Protocol;
use crate::sensor::sequence::{
    sequence_rng, simulate_sequence, to_pseudo_real, SequenceSample, SimConfig, DEFAULT_FRAMES,
    DEFAULT_POINTS,
};
use crate::synthesis::{synth_noisy_oracle, OracleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_mocap: usize,
    pub train_real: usize,
    pub test_mocap: usize,
    pub test_real: usize,
    pub frames: usize,
    pub points: usize,
    /// Cycled over the training splits.
    pub train_protocols: Vec<Protocol>,
    /// Cycled over the test splits.
    pub test_protocols: Vec<Protocol>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_mocap: 50,
            train_real: 50,
            test_mocap: 12,
            test_real: 12,
            frames: DEFAULT_FRAMES,
            points: DEFAULT_POINTS,
            train_protocols: vec![Protocol::Kick, Protocol::Walk],
            test_protocols: vec![Protocol::Kick, Protocol::Kick, Protocol::Walk],
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 4 || self.points == 0 {
            return Err(Error::Config(format!(
                "need at least 4 frames and 1 point, got {} and {}",
                self.frames, self.points
            )));
        }
        if self.train_protocols.is_empty() || self.test_protocols.is_empty() {
            return Err(Error::Config("protocol lists must not be empty".into()));
        }
        Ok(())
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            frames: self.frames,
            points: self.points,
            ..SimConfig::default()
        }
    }
}

/// The four splits: labelled simulation, and the shifted held-out domain
/// (no labels; ground truth kept only on its test split, for scoring).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Datasets {
    pub train_mocap: Vec<SequenceSample>,
    pub train_real: Vec<SequenceSample>,
    pub test_mocap: Vec<SequenceSample>,
    pub test_real: Vec<SequenceSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    TrainMocap,
    TrainReal,
    TestMocap,
    TestReal,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::TrainMocap, Split::TrainReal, Split::TestMocap, Split::TestReal];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainMocap => "train_mocap",
            Split::TrainReal => "train_real",
            Split::TestMocap => "test_mocap",
            Split::TestReal => "test_real",
        }
    }

    /// Offset of the split's sequence indices in the seed stream.
    fn stream(self) -> u64 {
        match self {
            Split::TrainMocap => 0,
            Split::TrainReal => 1_000_000,
            Split::TestMocap => 2_000_000,
            Split::TestReal => 3_000_000,
        }
    }
}

impl Datasets {
    pub fn split(&self, s: Split) -> &[SequenceSample] {
        match s {
            Split::TrainMocap => &self.train_mocap,
            Split::TrainReal => &self.train_real,
            Split::TestMocap => &self.test_mocap,
            Split::TestReal => &self.test_real,
        }
    }

    pub fn split_mut(&mut self, s: Split) -> &mut Vec<SequenceSample> {
        match s {
            Split::TrainMocap => &mut self.train_mocap,
            Split::TrainReal => &mut self.train_real,
            Split::TestMocap => &mut self.test_mocap,
            Split::TestReal => &mut self.test_real,
        }
    }
}

/// One sequence of a split; sequence `i` of split `s` depends only on
/// `(seed, s, i)`.
pub fn generate_one(
    cfg: &DataConfig,
    skel: &Skeleton,
    shape: &BodyShape,
    oracle: &OracleConfig,
    seed: u64,
    split: Split,
    index: usize,
) -> Result<SequenceSample> {
    let protocols = match split {
        Split::TrainMocap | Split::TrainReal => &cfg.train_protocols,
        Split::TestMocap | Split::TestReal => &cfg.test_protocols,
    };
    let protocol = protocols[index % protocols.len()];
    let mut rng = sequence_rng(seed, split.stream() + index as u64);
    let sim = cfg.sim();
    let s = simulate_sequence(&sim, skel, shape, protocol, &mut rng)?.sample;
    match split {
        Split::TrainMocap | Split::TestMocap => Ok(s),
        Split::TrainReal | Split::TestReal => {
            let gt = s.gt.clone().expect("simulated sequences carry ground truth");
            let y = synth_noisy_oracle(skel, &s.x, &gt, s.scale as f64, oracle, &mut rng)?;
            let mut real = to_pseudo_real(&s, &sim.shift, &mut rng);
            real.synth = Some(y);
            if split == Split::TestReal {
                real.gt = Some(gt);
            }
            Ok(real)
        }
    }
}

pub fn generate(
    cfg: &DataConfig,
    skel: &Skeleton,
    shape: &BodyShape,
    oracle: &OracleConfig,
    seed: u64,
) -> Result<Datasets> {
    cfg.validate()?;
    let mut out = Datasets::default();
    for split in Split::ALL {
        let n = match split {
            Split::TrainMocap => cfg.train_mocap,
            Split::TrainReal => cfg.train_real,
            Split::TestMocap => cfg.test_mocap,
            Split::TestReal => cfg.test_real,
        };
        let v = (0..n)
            .map(|i| generate_one(cfg, skel, shape, oracle, seed, split, i))
            .collect::<Result<Vec<_>>>()?;
        *out.split_mut(split) = v;
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::sequence::Domain;

    #[test]
    fn splits_have_the_right_contents() {
        let (skel, shape) = Skeleton::smpl22();
        let cfg = DataConfig {
            train_mocap: 2,
            train_real: 2,
            test_mocap: 1,
            test_real: 1,
            frames: 8,
            points: 16,
            ..DataConfig::default()
        };
        let d = generate(&cfg, &skel, &shape, &OracleConfig::default(), 7).unwrap();
        assert_eq!(d.train_mocap.len(), 2);
        assert_eq!(d.train_mocap[1].protocol, Protocol::Walk);
        assert!(d.train_mocap.iter().all(|s| s.gt.is_some() && s.clouds[0].labels.is_some()));
        for s in &d.train_real {
            assert_eq!(s.domain, Domain::PseudoReal);
            assert!(s.gt.is_none() && s.synth.is_some() && s.clouds[0].labels.is_none());
        }
        assert!(d.test_real[0].gt.is_some() && d.test_real[0].clouds[0].labels.is_none());
        let again = generate_one(&cfg, &skel, &shape, &OracleConfig::default(), 7, Split::TrainReal, 1).unwrap();
        assert_eq!(again, d.train_real[1]);
    }
}
