//! 3-point full-body synthesis stage.
//!
//! Two baselines: a noisy oracle built from ground truth (accurate upper
//! body, legs replaced) and a per-frame MLP trained on rotation and position
//! losses. Neither reads point clouds; [`SynthInput`] does not carry them.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{canonical_x, place_pose, root_frame};
use crate::graph::{Graph, NodeId};
use crate::kinematics::rot6d::{axis_angle, GramSchmidtOp};
use crate::kinematics::{FkOp, Pose, Rot6D, Skeleton};
use crate::losses::{pos_mse_node, pose_rot6d, rot_mse_node, total_node, LossNodes, LossWeights};
use crate::optim::{adam_step, glorot, AdamConfig, AdamState, Bound, ParamId, ParamStore};
use crate::sensor::motion::{ThreePointFrame, X_DIM};
use crate::sensor::sequence::SequenceSample;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerMode {
    /// Legs held in the rest (standing) pose.
    Idle,
    /// Ground-truth legs delayed by `lag_frames`.
    Lagged,
    Gt,
}

impl LowerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LowerMode::Idle => "idle",
            LowerMode::Lagged => "lagged",
            LowerMode::Gt => "gt",
        }
    }
}

impl fmt::Display for LowerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LowerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idle" => Ok(LowerMode::Idle),
            "lagged" => Ok(LowerMode::Lagged),
            "gt" => Ok(LowerMode::Gt),
            _ => Err(Error::Config(format!("unknown lower-body mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// RMS angle of the upper-body rotation noise, degrees.
    pub upper_sigma_deg: f64,
    pub lower_mode: LowerMode,
    pub lag_frames: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            upper_sigma_deg: 3.0,
            lower_mode: LowerMode::Idle,
            lag_frames: 15,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.upper_sigma_deg.is_finite() && self.upper_sigma_deg >= 0.0) {
            return Err(Error::Config(format!(
                "upper_sigma_deg must be non-negative, got {}",
                self.upper_sigma_deg
            )));
        }
        Ok(())
    }
}

/// What a synthesis stage may look at.
#[derive(Debug, Clone, Copy)]
pub struct SynthInput<'a> {
    pub x: &'a [ThreePointFrame],
    pub scale: f64,
    /// Simulation only.
    pub gt: Option<&'a [Pose]>,
    /// A previously computed output, used when nothing else is available.
    pub stored: Option<&'a [Pose]>,
}

impl<'a> SynthInput<'a> {
    pub fn of(seq: &'a SequenceSample) -> Self {
        Self {
            x: &seq.x,
            scale: seq.scale as f64,
            gt: seq.gt.as_deref(),
            stored: seq.synth.as_deref(),
        }
    }
}

pub fn synth_noisy_oracle(
    skel: &Skeleton,
    x: &[ThreePointFrame],
    gt: &[Pose],
    scale: f64,
    cfg: &OracleConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Pose>> {
    synth_noisy_oracle_range(skel, x, gt, scale, cfg, 0..x.len(), rng)
}

/// The oracle on frames `range` only; lagged legs may reach before it.
pub fn synth_noisy_oracle_range(
    skel: &Skeleton,
    x: &[ThreePointFrame],
    gt: &[Pose],
    scale: f64,
    cfg: &OracleConfig,
    range: Range<usize>,
    rng: &mut impl Rng,
) -> Result<Vec<Pose>> {
    cfg.validate()?;
    if x.len() != gt.len() || range.end > x.len() {
        return Err(Error::InvalidArgument(format!(
            "{} 3-point frames for {} poses, frames {range:?} requested",
            x.len(),
            gt.len()
        )));
    }
    let sigma = cfg.upper_sigma_deg.to_radians();
    // isotropic rotation vector, each axis sigma / sqrt(3)
    let noise = Normal::new(0.0, (sigma / 3f64.sqrt()).max(f64::MIN_POSITIVE)).expect("finite sigma");
    let j = skel.num_joints();
    let mut out = Vec::with_capacity(range.len());
    for t in range {
        if gt[t].local_rot.len() != j {
            return Err(Error::SkeletonMismatch("ground-truth joint count".into()));
        }
        let mut local = Vec::with_capacity(j);
        for k in 0..j {
            let r = if skel.is_lower(k) {
                match cfg.lower_mode {
                    LowerMode::Idle => Rot6D::IDENTITY,
                    LowerMode::Lagged => gt[t.saturating_sub(cfg.lag_frames)].local_rot[k],
                    LowerMode::Gt => gt[t].local_rot[k],
                }
            } else if sigma > 0.0 {
                let w = Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
                let n = w.norm();
                let m = gt[t].local_rot[k].to_matrix()?;
                if n > 0.0 {
                    Rot6D::from_matrix(&(m * axis_angle(w / n, n)))
                } else {
                    gt[t].local_rot[k]
                }
            } else {
                gt[t].local_rot[k]
            };
            local.push(r);
        }
        out.push(place_pose(skel, local, &x[t], scale)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthMlpConfig {
    pub joints: usize,
    pub hidden: usize,
}

impl SynthMlpConfig {
    pub fn new(joints: usize) -> Self {
        Self { joints, hidden: 256 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

const NAMES: [&str; 6] = [
    "synth.fc1.weight",
    "synth.fc1.bias",
    "synth.fc2.weight",
    "synth.fc2.bias",
    "synth.out.weight",
    "synth.out.bias",
];

/// Per-frame MLP from the canonical 3-point vector to raw 6D rotations.
#[derive(Debug, Clone)]
pub struct SynthMlp<T: Scalar = f32> {
    pub config: SynthMlpConfig,
    pub params: ParamStore<T>,
    ids: Ids,
}

impl<T: Scalar> SynthMlp<T> {
    /// The output bias starts at the identity rotation of every joint.
    pub fn init(config: SynthMlpConfig, rng: &mut impl Rng) -> Self {
        let (h, d) = (config.hidden, config.joints * 6);
        let mut p = ParamStore::new();
        let bias = Tensor::from_fn([1, d], |i| T::from_f64(Rot6D::IDENTITY.0[i % 6] as f64));
        let ids = Ids {
            w1: p.add(NAMES[0], glorot(X_DIM, h, rng)),
            b1: p.add(NAMES[1], Tensor::zeros([1, h])),
            w2: p.add(NAMES[2], glorot(h, h, rng)),
            b2: p.add(NAMES[3], Tensor::zeros([1, h])),
            w3: p.add(NAMES[4], glorot::<T>(h, d, rng).map(|v| v * T::from_f64(0.1))),
            b3: p.add(NAMES[5], bias),
        };
        Self {
            config,
            params: p,
            ids,
        }
    }

    pub fn from_params(config: SynthMlpConfig, params: ParamStore<T>) -> Result<Self> {
        let shell = SynthMlp::<T>::init(config, &mut rand::rngs::mock::StepRng::new(0, 0));
        let mut ordered = ParamStore::new();
        for (name, expect) in shell.params.iter() {
            let id = params
                .find(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            let t = params.get(id);
            if t.shape() != expect.shape() {
                return Err(Error::Shape {
                    op: "synthesis parameters",
                    lhs: expect.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            ordered.add(name, t.clone());
        }
        Ok(Self {
            config,
            params: ordered,
            ids: shell.ids,
        })
    }

    /// Raw 6D output `[F, J * 6]` from canonical inputs `[F, 54]`.
    pub fn build(&self, g: &mut Graph<T>, b: &Bound, x: NodeId) -> Result<NodeId> {
        let id = &self.ids;
        let h = g.matmul(x, b.node(id.w1))?;
        let h = g.add_row(h, b.node(id.b1))?;
        let h = g.relu(h)?;
        let h = g.matmul(h, b.node(id.w2))?;
        let h = g.add_row(h, b.node(id.b2))?;
        let h = g.relu(h)?;
        let o = g.matmul(h, b.node(id.w3))?;
        g.add_row(o, b.node(id.b3))
    }
}

impl SynthMlp<f32> {
    pub fn predict(&self, skel: &Skeleton, x: &[ThreePointFrame], scale: f64) -> Result<Vec<Pose>> {
        if skel.num_joints() != self.config.joints {
            return Err(Error::SkeletonMismatch(format!(
                "synthesis network has {} joints, skeleton {}",
                self.config.joints,
                skel.num_joints()
            )));
        }
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g)?;
        let xn = g.constant(canonical_batch(x)?)?;
        let o = self.build(&mut g, &b, xn)?;
        let out = g.value(o);
        x.iter()
            .enumerate()
            .map(|(t, frame)| {
                let local = out
                    .row(t)
                    .chunks(6)
                    .map(|c| {
                        let r = Rot6D(c.try_into().expect("chunk of six"));
                        r.to_matrix().map(|m| Rot6D::from_matrix(&m))
                    })
                    .collect::<Result<Vec<_>>>()?;
                place_pose(skel, local, frame, scale)
            })
            .collect()
    }
}

/// Canonicalized 3-point inputs stacked as `[F, 54]`.
pub fn canonical_batch<T: Scalar>(x: &[ThreePointFrame]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(x.len() * X_DIM);
    for f in x {
        data.extend(canonical_x(f)?.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new([x.len(), X_DIM], data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthTrainConfig {
    pub iterations: usize,
    pub batch_frames: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
}

impl Default for SynthTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_frames: 64,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            weights: LossWeights::default(),
        }
    }
}

/// Fits the MLP baseline on random frames of sequences with ground truth.
/// Returns the network and the loss of every step.
pub fn train_synth_mlp(
    skel: &Skeleton,
    data: &[SequenceSample],
    cfg: &SynthTrainConfig,
    rng: &mut impl Rng,
) -> Result<(SynthMlp, Vec<f64>)> {
    let head = skel.tracked()?[0];
    let frames: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .filter(|(_, s)| s.gt.is_some())
        .flat_map(|(i, s)| (0..s.len()).map(move |t| (i, t)))
        .collect();
    if frames.is_empty() {
        return Err(Error::EmptyDataset("no sequences with ground truth".into()));
    }
    let mut net = SynthMlp::<f32>::init(SynthMlpConfig::new(skel.num_joints()), rng);
    let mut adam = AdamState::new(&net.params);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let batch: Vec<(usize, usize)> = frames
            .choose_multiple(rng, cfg.batch_frames.min(frames.len()))
            .copied()
            .collect();
        let x: Vec<ThreePointFrame> = batch.iter().map(|&(i, t)| data[i].x[t]).collect();
        let gt: Vec<Pose> = batch
            .iter()
            .map(|&(i, t)| data[i].gt.as_ref().expect("filtered")[t].clone())
            .collect();
        let roots = batch
            .iter()
            .map(|&(i, t)| root_frame(&data[i].x[t], data[i].scale as f64))
            .collect::<Result<Vec<_>>>()?;
        let gt_pos = gt
            .iter()
            .zip(&batch)
            .map(|(p, &(i, _))| crate::kinematics::fk_scaled(skel, p, data[i].scale as f64))
            .collect::<Result<Vec<_>>>()?;
        let gt_pos = Tensor::new(
            [gt_pos.len() * skel.num_joints(), 3],
            gt_pos.iter().flatten().flat_map(|v| v.iter().map(|&c| c as f32)).collect(),
        )?;
        let mut g = Graph::new();
        let b = net.params.bind(&mut g)?;
        let xn = g.constant(canonical_batch(&x)?)?;
        let raw = net.build(&mut g, &b, xn)?;
        let rows = g.reshape(raw, [batch.len() * skel.num_joints(), 6])?;
        let m = g.custom(Box::new(GramSchmidtOp), &[rows])?;
        let pos = g.custom(Box::new(FkOp::anchored(skel, roots, head)), &[m])?;
        let nodes = LossNodes {
            rot: Some(rot_mse_node(&mut g, m, pose_rot6d(&gt)?)?),
            pos: Some(pos_mse_node(&mut g, pos, gt_pos)?),
            ..Default::default()
        };
        let total = total_node(&mut g, &nodes, &cfg.weights)?;
        losses.push(g.value(total).data()[0] as f64);
        g.backward(total)?;
        let grads = net.params.gradients(&g, &b);
        adam_step(&mut net.params, &grads, &mut adam, &cfg.adam)?;
        if !net.params.all_finite() {
            return Err(Error::NonFinite("synthesis parameters".into()));
        }
    }
    Ok((net, losses))
}

/// A frozen synthesis stage.
#[derive(Debug, Clone)]
pub enum Synthesizer {
    Oracle(OracleConfig),
    Mlp(SynthMlp),
    /// Uses the output stored with the sequence.
    Stored,
}

impl Synthesizer {
    /// One synthesis sample. The oracle falls back to the stored output when
    /// a sequence has no ground truth.
    pub fn synthesize(&self, skel: &Skeleton, input: SynthInput<'_>, rng: &mut impl Rng) -> Result<Vec<Pose>> {
        self.synthesize_range(skel, input, 0..input.x.len(), rng)
    }

    /// Output for frames `range` of the input.
    pub fn synthesize_range(
        &self,
        skel: &Skeleton,
        input: SynthInput<'_>,
        range: Range<usize>,
        rng: &mut impl Rng,
    ) -> Result<Vec<Pose>> {
        if range.end > input.x.len() {
            return Err(Error::InvalidArgument(format!(
                "frames {range:?} of a {}-frame sequence",
                input.x.len()
            )));
        }
        let stored = |r: Range<usize>| {
            input
                .stored
                .filter(|s| s.len() == input.x.len())
                .map(|s| s[r].to_vec())
                .ok_or_else(|| Error::InvalidArgument("sequence has no stored synthesis".into()))
        };
        match self {
            Synthesizer::Oracle(cfg) => match input.gt {
                Some(gt) => synth_noisy_oracle_range(skel, input.x, gt, input.scale, cfg, range, rng),
                None => stored(range).map_err(|_| {
                    Error::InvalidArgument("oracle synthesis needs ground truth or a stored output".into())
                }),
            },
            Synthesizer::Mlp(net) => net.predict(skel, &input.x[range], input.scale),
            Synthesizer::Stored => stored(range),
        }
    }

    /// Checksum of any learned parameters (0 for parameter-free stages).
    pub fn checksum(&self) -> u32 {
        match self {
            Synthesizer::Mlp(net) => net.params.checksum(),
            _ => 0,
        }
    }
}
