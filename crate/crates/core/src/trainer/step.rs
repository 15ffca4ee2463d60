use rand::Rng;

use super::{Model, ModelBound, SelfLoss, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{canonical_x, root_frame, world_points};
use crate::graph::Graph;
use crate::kinematics::{fk_scaled, BodyShape, FkOp, GramSchmidtOp, Pose, RootFrame, Skeleton};
use crate::losses::{
    evidence_batch, pc_loss_node, pos_mse_node, pose_rot6d, rot_mse_node, spc_loss_node,
    EvidenceOp, LossNodes,
};
use crate::sensor::motion::X_DIM;
use crate::sensor::sequence::SequenceSample;
use crate::spc::History;
use crate::synthesis::{SynthInput, Synthesizer};
use crate::tensor::{Scalar, Tensor};

/// One training batch: clips of consecutive frames, labelled clips first.
#[derive(Debug, Clone)]
pub struct Batch {
    pub clip_frames: usize,
    pub mocap_clips: usize,
    pub real_clips: usize,
    pub points: usize,
    pub joints: usize,
    /// Canonical 3-point inputs `[F, 54]`.
    pub x: Tensor<f64>,
    /// Synthesized 6D rotations `[F, J * 6]`.
    pub y: Tensor<f64>,
    /// Sensor-frame points `[F * P, 3]`, the registration input.
    pub points_local: Tensor<f64>,
    /// World points `[F * P, 3]`, used by the geometric losses.
    pub points_world: Tensor<f64>,
    /// Point classes of the labelled frames.
    pub labels: Vec<usize>,
    pub gt_rot: Tensor<f64>,
    pub gt_pos: Tensor<f64>,
    pub roots: Vec<RootFrame>,
    /// `history_samples` earlier frames per clip.
    pub hist_x: Tensor<f64>,
    pub hist_points: Tensor<f64>,
    /// Number of frames before each clip.
    pub hist_counts: Vec<usize>,
    /// Frames without a visible body.
    pub skip: Vec<bool>,
}

impl Batch {
    pub fn frames(&self) -> usize {
        (self.mocap_clips + self.real_clips) * self.clip_frames
    }

    pub fn mocap_frames(&self) -> usize {
        self.mocap_clips * self.clip_frames
    }
}

#[derive(Default)]
struct Acc {
    x: Vec<f64>,
    y: Vec<f64>,
    local: Vec<f64>,
    world: Vec<f64>,
    labels: Vec<usize>,
    gt_rot: Vec<f64>,
    gt_pos: Vec<f64>,
    roots: Vec<RootFrame>,
    hist_x: Vec<f64>,
    hist_points: Vec<f64>,
    hist_counts: Vec<usize>,
    skip: Vec<bool>,
}

fn push_cloud(out: &mut Vec<f64>, pts: &[[f32; 3]]) {
    out.extend(pts.iter().flat_map(|p| p.iter().map(|&v| v as f64)));
}

#[allow(clippy::too_many_arguments)]
fn push_clip(
    acc: &mut Acc,
    skel: &Skeleton,
    synth: &Synthesizer,
    seq: &SequenceSample,
    labelled: bool,
    clip: usize,
    hist: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let n = seq.len();
    if n < clip {
        return Err(Error::InvalidArgument(format!(
            "sequence of {n} frames is shorter than a {clip}-frame clip"
        )));
    }
    let start = rng.gen_range(0..=n - clip);
    let range = start..start + clip;
    let y = synth.synthesize_range(skel, SynthInput::of(seq), range.clone(), rng)?;
    let scale = seq.scale as f64;
    for (k, t) in range.clone().enumerate() {
        acc.x.extend(canonical_x(&seq.x[t])?.iter().map(|&v| v as f64));
        acc.y.extend(y[k].local_rot.iter().flat_map(|r| r.0).map(|v| v as f64));
        let cloud = &seq.clouds[t];
        push_cloud(&mut acc.local, &cloud.points);
        for q in world_points(cloud, &seq.sensor[t]) {
            acc.world.extend(q.iter());
        }
        acc.roots.push(root_frame(&seq.x[t], scale)?);
        acc.skip.push(cloud.sentinel);
        if labelled {
            let labels = cloud
                .labels
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("labelled split without point labels".into()))?;
            acc.labels.extend(labels.iter().map(|&l| l as usize));
        }
    }
    if labelled {
        let gt: &[Pose] = seq
            .gt
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("labelled split without ground truth".into()))?;
        let gt = &gt[range];
        acc.gt_rot.extend(pose_rot6d::<f64>(gt)?.into_data());
        for p in gt {
            for j in fk_scaled(skel, p, scale)? {
                acc.gt_pos.extend(j.iter());
            }
        }
    }
    acc.hist_counts.push(start);
    for _ in 0..hist {
        let t = if start == 0 { 0 } else { rng.gen_range(0..start) };
        acc.hist_x.extend(canonical_x(&seq.x[t])?.iter().map(|&v| v as f64));
        push_cloud(&mut acc.hist_points, &seq.clouds[t].points);
    }
    Ok(())
}

/// Samples `ceil(batch_mocap / clip)` labelled clips and, for modes with a
/// self-supervised term, `ceil(batch_real / clip)` clips of the unlabelled
/// domain. Synthesis is drawn fresh for every clip.
pub fn assemble_batch(
    cfg: &TrainConfig,
    skel: &Skeleton,
    synth: &Synthesizer,
    mocap: &[SequenceSample],
    real: &[SequenceSample],
    rng: &mut impl Rng,
) -> Result<Batch> {
    if mocap.is_empty() {
        return Err(Error::EmptyDataset("labelled training split".into()));
    }
    let clip = cfg.clip_frames;
    let mocap_clips = cfg.batch_mocap.div_ceil(clip);
    let real_clips = if cfg.mode.uses_real() {
        if real.is_empty() {
            return Err(Error::EmptyDataset("unlabelled training split".into()));
        }
        cfg.batch_real.div_ceil(clip)
    } else {
        0
    };
    let points = mocap[0].num_points();
    let mut acc = Acc::default();
    for _ in 0..mocap_clips {
        let s = &mocap[rng.gen_range(0..mocap.len())];
        push_clip(&mut acc, skel, synth, s, true, clip, cfg.history_samples, rng)?;
    }
    for _ in 0..real_clips {
        let s = &real[rng.gen_range(0..real.len())];
        push_clip(&mut acc, skel, synth, s, false, clip, cfg.history_samples, rng)?;
    }
    if acc.local.len() != (mocap_clips + real_clips) * clip * points * 3 {
        return Err(Error::InvalidArgument("clouds differ in point count".into()));
    }
    let j = skel.num_joints();
    let f = (mocap_clips + real_clips) * clip;
    let c = mocap_clips + real_clips;
    let k = cfg.history_samples;
    Ok(Batch {
        clip_frames: clip,
        mocap_clips,
        real_clips,
        points,
        joints: j,
        x: Tensor::new([f, X_DIM], acc.x)?,
        y: Tensor::new([f, j * 6], acc.y)?,
        points_local: Tensor::new([f * points, 3], acc.local)?,
        points_world: Tensor::new([f * points, 3], acc.world)?,
        labels: acc.labels,
        gt_rot: Tensor::new([mocap_clips * clip * j, 6], acc.gt_rot)?,
        gt_pos: Tensor::new([mocap_clips * clip * j, 3], acc.gt_pos)?,
        roots: acc.roots,
        hist_x: Tensor::new([c * k, X_DIM], acc.hist_x)?,
        hist_points: Tensor::new([c * k * points, 3], acc.hist_points)?,
        hist_counts: acc.hist_counts,
        skip: acc.skip,
    })
}

/// Builds the loss terms of one step into `g`. Returns `None` for modes
/// without parameters.
#[allow(clippy::too_many_arguments)]
pub fn build_step<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    bound: &ModelBound,
    batch: &Batch,
    skel: &Skeleton,
    shape: &BodyShape,
    cfg: &TrainConfig,
) -> Result<Option<LossNodes>> {
    let (Some(mpe), Some(mb)) = (&model.mpe, &bound.mpe) else {
        return Ok(None);
    };
    let f = batch.frames();
    let fm = batch.mocap_frames();
    let j = batch.joints;
    let p = batch.points;
    let x = g.constant(batch.x.cast())?;
    let mut nodes = LossNodes::default();

    let mut reg = None;
    if let (Some(spc), Some(sb)) = (&model.spc, &bound.spc) {
        let pts = g.constant(batch.points_local.cast())?;
        let clips = batch.mocap_clips + batch.real_clips;
        let k = (batch.hist_x.rows() / clips.max(1)).max(1);
        let hx = g.constant(batch.hist_x.cast())?;
        let hp = g.constant(batch.hist_points.cast())?;
        let hist = spc.encode(g, sb, hp, hx)?;
        let hist = if cfg.detach_history { g.detach(hist)? } else { hist };
        let hist = g.mean_pool(hist, k)?;
        let gd = spc.config.global_dim;
        let counts = Tensor::from_fn([clips, gd], |i| T::from_f64(batch.hist_counts[i / gd] as f64));
        let counts_node = g.constant(counts)?;
        let prefix = g.mul(hist, counts_node)?;
        let nodes_spc = spc.build(
            g,
            sb,
            pts,
            x,
            History::Causal {
                len: batch.clip_frames,
                prefix,
                counts: batch.hist_counts.clone(),
            },
        )?;
        if fm > 0 {
            let logits = g.slice_rows(nodes_spc.logits, 0, fm * p)?;
            nodes.ce = Some(g.softmax_cross_entropy(logits, &batch.labels)?);
        }
        reg = Some(nodes_spc);
    }

    let y = g.constant(batch.y.cast())?;
    let feature = reg.map(|r| r.global);
    let offset = mpe.build(g, mb, x, y, feature)?;
    let z = g.add(y, offset)?;
    let z = g.reshape(z, [f * j, 6])?;
    let z9 = g.custom(Box::new(GramSchmidtOp), &[z])?;
    let head = skel.tracked()?[0];
    let pos = g.custom(Box::new(FkOp::anchored(skel, batch.roots.clone(), head)), &[z9])?;
    if fm > 0 {
        let zm = g.slice_rows(z9, 0, fm * j)?;
        nodes.rot = Some(rot_mse_node(g, zm, batch.gt_rot.cast())?);
        let pm = g.slice_rows(pos, 0, fm * j)?;
        nodes.pos = Some(pos_mse_node(g, pm, batch.gt_pos.cast())?);
    }

    match cfg.mode.self_loss() {
        Some(SelfLoss::Spc) => {
            let r = reg.ok_or_else(|| Error::InvalidArgument("spc loss needs the registration".into()))?;
            let probs = if cfg.detach_evidence { g.detach(r.probs)? } else { r.probs };
            let world = g.constant(batch.points_world.cast())?;
            let mut evidence = evidence_batch(&batch.points_world, &g.value(probs).cast::<f64>(), f)?;
            for (e, &s) in evidence.iter_mut().zip(&batch.skip) {
                if s {
                    e.active.iter_mut().for_each(|a| *a = false);
                }
            }
            let cen = g.custom(Box::new(EvidenceOp { frames: f }), &[probs, world])?;
            nodes.spc = Some(spc_loss_node(g, pos, cen, &evidence, cfg.theta)?);
        }
        Some(SelfLoss::Pc) => {
            let world = g.constant(batch.points_world.cast())?;
            nodes.spc = Some(pc_loss_node(g, pos, world, skel, shape, &batch.skip)?);
        }
        None => {}
    }
    Ok(Some(nodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, DataConfig};
    use crate::losses::total_node;
    use crate::synthesis::OracleConfig;
    use crate::trainer::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Skeleton, BodyShape, crate::dataset::Datasets) {
        let (skel, shape) = Skeleton::smpl22();
        let cfg = DataConfig {
            train_mocap: 2,
            train_real: 2,
            test_mocap: 0,
            test_real: 0,
            frames: 12,
            points: 16,
            ..DataConfig::default()
        };
        let data = generate(&cfg, &skel, &shape, &OracleConfig::default(), 5).unwrap();
        (skel, shape, data)
    }

    #[test]
    fn batch_layout() {
        let (skel, _, data) = small();
        let cfg = TrainConfig {
            batch_mocap: 6,
            batch_real: 4,
            ..TrainConfig::desk()
        };
        let synth = Synthesizer::Oracle(OracleConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = assemble_batch(&cfg, &skel, &synth, &data.train_mocap, &data.train_real, &mut rng).unwrap();
        assert_eq!((b.mocap_clips, b.real_clips), (2, 1));
        assert_eq!(b.frames(), 12);
        assert_eq!(b.labels.len(), 8 * 16);
        assert_eq!(b.gt_rot.shape(), &[8 * 22, 6]);
        assert_eq!(b.hist_x.rows(), 3 * 4);
        assert_eq!(b.roots.len(), 12);
    }

    #[test]
    fn every_mode_builds_a_finite_loss() {
        let (skel, shape, data) = small();
        let synth = Synthesizer::Oracle(OracleConfig::default());
        for mode in Mode::ALL {
            let cfg = TrainConfig {
                mode,
                batch_mocap: 4,
                batch_real: 4,
                ..TrainConfig::desk()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let b = assemble_batch(&cfg, &skel, &synth, &data.train_mocap, &data.train_real, &mut rng).unwrap();
            let model = Model::<f32>::init(mode, 22, 16, &mut rng);
            let mut g = Graph::new();
            let bound = model.bind(&mut g).unwrap();
            let nodes = build_step(&mut g, &model, &bound, &b, &skel, &shape, &cfg).unwrap();
            let Some(nodes) = nodes else {
                assert_eq!(mode, Mode::SynthesisOnly);
                continue;
            };
            assert_eq!(nodes.ce.is_some(), mode.has_spc());
            assert_eq!(nodes.spc.is_some(), mode.uses_real());
            let total = total_node(&mut g, &nodes, &cfg.weights).unwrap();
            assert!(g.value(total).data()[0].is_finite());
            g.backward(total).unwrap();
        }
    }
}
