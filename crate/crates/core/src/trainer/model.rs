use nalgebra::Vector3;
use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::features::{canonical_x, place_pose, world_points};
use crate::graph::Graph;
use crate::kinematics::{fk_scaled, BodyShape, Pose, Rot6D, Skeleton};
use crate::losses::surface_distance;
use crate::metrics::{report, MetricReport, ScoredSequence};
use crate::mpe::{apply_offset, MpeConfig, MpeNet};
use crate::optim::{Bound, ParamStore};
use crate::sensor::motion::X_DIM;
use crate::sensor::sequence::{sequence_rng, SequenceSample};
use crate::spc::{Registration, SpcConfig, SpcNet};
use crate::synthesis::{SynthInput, Synthesizer};
use crate::tensor::{Scalar, Tensor};

/// The trainable part of the pipeline for one ablation mode.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub mode: Mode,
    pub joints: usize,
    pub points: usize,
    pub spc: Option<SpcNet<T>>,
    pub mpe: Option<MpeNet<T>>,
}

/// Graph bindings of a model's parameters.
#[derive(Debug, Clone)]
pub struct ModelBound {
    pub spc: Option<Bound>,
    pub mpe: Option<Bound>,
}

impl<T: Scalar> Model<T> {
    pub fn init(mode: Mode, joints: usize, points: usize, rng: &mut impl Rng) -> Self {
        let spc = mode
            .has_spc()
            .then(|| SpcNet::init(SpcConfig::new(joints, points), rng));
        let mpe = mode.has_mpe().then(|| MpeNet::init(MpeConfig::new(joints), rng));
        Self {
            mode,
            joints,
            points,
            spc,
            mpe,
        }
    }

    /// Rebuilds from named parameter stores, checking they fit the mode.
    pub fn from_params(
        mode: Mode,
        joints: usize,
        points: usize,
        spc: Option<ParamStore<T>>,
        mpe: Option<ParamStore<T>>,
    ) -> Result<Self> {
        if spc.is_some() != mode.has_spc() || mpe.is_some() != mode.has_mpe() {
            return Err(Error::InvalidArgument(format!(
                "parameters do not match mode {mode}"
            )));
        }
        Ok(Self {
            mode,
            joints,
            points,
            spc: spc
                .map(|p| SpcNet::from_params(SpcConfig::new(joints, points), p))
                .transpose()?,
            mpe: mpe
                .map(|p| MpeNet::from_params(MpeConfig::new(joints), p))
                .transpose()?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            mode: self.mode,
            joints: self.joints,
            points: self.points,
            spc: self.spc.as_ref().map(SpcNet::cast),
            mpe: self.mpe.as_ref().map(MpeNet::cast),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Result<ModelBound> {
        Ok(ModelBound {
            spc: self.spc.as_ref().map(|n| n.params.bind(g)).transpose()?,
            mpe: self.mpe.as_ref().map(|n| n.params.bind(g)).transpose()?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.spc.as_ref().map_or(0, |n| n.params.num_values())
            + self.mpe.as_ref().map_or(0, |n| n.params.num_values())
    }

    pub fn all_finite(&self) -> bool {
        self.spc.as_ref().map_or(true, |n| n.params.all_finite())
            && self.mpe.as_ref().map_or(true, |n| n.params.all_finite())
    }

    /// CRC of every parameter value, in a fixed order.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for n in [
            self.spc.as_ref().map(|n| n.params.checksum()),
            self.mpe.as_ref().map(|n| n.params.checksum()),
        ]
        .into_iter()
        .flatten()
        {
            h.update(&n.to_le_bytes());
        }
        h.finalize()
    }
}

/// Predicted poses of one sequence.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub poses: Vec<Pose>,
    pub positions: Vec<Vec<Vector3<f64>>>,
    pub registrations: Option<Vec<Registration>>,
}

fn raw6(p: &Pose) -> Vec<f32> {
    p.local_rot.iter().flat_map(|r| r.0).collect()
}

impl Model<f32> {
    /// Runs the networks over a whole sequence given its synthesized poses.
    /// Without a pose network the offset is zero and the output is the
    /// re-orthonormalized synthesis.
    pub fn predict(&self, skel: &Skeleton, seq: &SequenceSample, y: &[Pose]) -> Result<Prediction> {
        let n = seq.len();
        if skel.num_joints() != self.joints {
            return Err(Error::SkeletonMismatch(format!(
                "model has {} joints, skeleton {}",
                self.joints,
                skel.num_joints()
            )));
        }
        if y.len() != n || y.iter().any(|p| p.local_rot.len() != self.joints) {
            return Err(Error::InvalidArgument("synthesis does not match the sequence".into()));
        }
        if self.spc.is_some() && seq.num_points() != self.points {
            return Err(Error::InvalidArgument(format!(
                "model expects {} points per cloud, sequence has {}",
                self.points,
                seq.num_points()
            )));
        }
        let d = self.joints * 6;
        let xs = seq.x.iter().map(canonical_x).collect::<Result<Vec<_>>>()?;
        let regs = match &self.spc {
            Some(spc) => {
                let clouds: Vec<&[[f32; 3]]> = seq.clouds.iter().map(|c| c.points.as_slice()).collect();
                Some(spc.sequence(&xs, &clouds)?)
            }
            None => None,
        };
        let offsets = match &self.mpe {
            Some(mpe) if n > 0 => {
                let mut g = Graph::new();
                let b = mpe.params.bind_frozen(&mut g)?;
                let x = g.constant(Tensor::new([n, X_DIM], xs.iter().flatten().copied().collect())?)?;
                let yn = g.constant(Tensor::new([n, d], y.iter().flat_map(raw6).collect())?)?;
                let f = match &regs {
                    Some(r) => {
                        let gd = r[0].global.len();
                        let data = r.iter().flat_map(|r| r.global.iter().copied()).collect();
                        Some(g.constant(Tensor::new([n, gd], data)?)?)
                    }
                    None => None,
                };
                let o = mpe.build(&mut g, &b, x, yn, f)?;
                g.value(o).data().to_vec()
            }
            _ => vec![0.0; n * d],
        };
        let scale = seq.scale as f64;
        let mut poses = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        for t in 0..n {
            let z = apply_offset(&raw6(&y[t]), &offsets[t * d..(t + 1) * d])?;
            let local = z
                .chunks(6)
                .map(|c| Rot6D(c.try_into().expect("chunk of six")))
                .collect();
            let pose = place_pose(skel, local, &seq.x[t], scale)?;
            positions.push(fk_scaled(skel, &pose, scale)?);
            poses.push(pose);
        }
        Ok(Prediction {
            poses,
            positions,
            registrations: regs,
        })
    }
}

/// Scores predicted poses against the ground truth of each sequence. The
/// cloud term uses the radii of `shape` and each sequence's own scale.
pub fn evaluate_predictions(
    skel: &Skeleton,
    shape: &BodyShape,
    seqs: &[SequenceSample],
    preds: &[Vec<Pose>],
) -> Result<MetricReport> {
    if seqs.len() != preds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} sequences",
            preds.len(),
            seqs.len()
        )));
    }
    let mut pred_pos = Vec::with_capacity(seqs.len());
    let mut gt_pos = Vec::with_capacity(seqs.len());
    let mut pcs = Vec::with_capacity(seqs.len());
    for (s, p) in seqs.iter().zip(preds) {
        let gt = s
            .gt
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("evaluation needs ground truth".into()))?;
        if p.len() != gt.len() {
            return Err(Error::InvalidArgument("prediction length differs from ground truth".into()));
        }
        let scale = s.scale as f64;
        let pp = p.iter().map(|q| fk_scaled(skel, q, scale)).collect::<Result<Vec<_>>>()?;
        let gp = gt.iter().map(|q| fk_scaled(skel, q, scale)).collect::<Result<Vec<_>>>()?;
        pcs.push(cloud_distance(skel, shape, s, &pp)?);
        pred_pos.push(pp);
        gt_pos.push(gp);
    }
    let scored: Vec<ScoredSequence<'_>> = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| ScoredSequence {
            action: s.protocol.as_str(),
            fps: s.fps as f64,
            pred_poses: &preds[i],
            gt_poses: s.gt.as_deref().expect("checked above"),
            pred_pos: &pred_pos[i],
            gt_pos: &gt_pos[i],
            pc: pcs[i],
        })
        .collect();
    report(skel, &scored)
}

/// Sum of point-to-body distances over frames where something was visible.
fn cloud_distance(
    skel: &Skeleton,
    shape: &BodyShape,
    seq: &SequenceSample,
    positions: &[Vec<Vector3<f64>>],
) -> Result<Option<(f64, usize)>> {
    if shape.radii.len() != skel.num_joints() {
        return Err(Error::SkeletonMismatch("radii do not match the skeleton".into()));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for ((cloud, sensor), pos) in seq.clouds.iter().zip(&seq.sensor).zip(positions) {
        if cloud.sentinel {
            continue;
        }
        for q in world_points(cloud, sensor) {
            sum += surface_distance(&q, skel.parents(), pos, &shape.radii).0;
            count += 1;
        }
    }
    Ok((count > 0).then_some((sum, count)))
}

/// Runs synthesis (seeded per sequence from `seed`) and the model over every
/// sequence and scores the result.
pub fn evaluate(
    model: &Model,
    skel: &Skeleton,
    shape: &BodyShape,
    seqs: &[SequenceSample],
    synth: &Synthesizer,
    seed: u64,
) -> Result<MetricReport> {
    let preds = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let y = synth.synthesize(skel, SynthInput::of(s), &mut sequence_rng(seed, i as u64))?;
            model.predict(skel, s, &y).map(|p| p.poses)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(skel, shape, seqs, &preds)
}
