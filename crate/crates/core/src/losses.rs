//! Training losses: rotation and position MSE, the distance of a cloud to the
//! posed capsule surfaces, and the registration-driven joint loss.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, NodeId};
use crate::kinematics::capsule::{body_capsules, segment_distance};
use crate::kinematics::rot6d::gram_schmidt;
use crate::kinematics::{BodyShape, Pose, Skeleton};
use crate::spc::Registration;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_THETA: f64 = 0.10;
/// A joint is active when its support exceeds this fraction of the points.
pub const ACTIVE_FRACTION: f64 = 0.05;
const MIN_SUPPORT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_rot: f64,
    pub w_pos: f64,
    pub w_ce: f64,
    pub w_spc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_rot: 1.0,
            w_pos: 0.01,
            w_ce: 0.1,
            w_spc: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {w}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("w_rot", self.w_rot),
            ("w_pos", self.w_pos),
            ("w_ce", self.w_ce),
            ("w_spc", self.w_spc),
        ]
    }
}

/// Loss values of one step; absent terms are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub rot: Option<f64>,
    pub pos: Option<f64>,
    pub ce: Option<f64>,
    pub spc: Option<f64>,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("l_rot", self.rot),
            ("l_pos", self.pos),
            ("l_ce", self.ce),
            ("l_spc", self.spc),
        ]
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for ((name, v), (_, wk)) in c.named().into_iter().zip(w.named()) {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
            total += wk * v;
        }
    }
    Ok(total)
}

/// Loss terms inside a graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossNodes {
    pub rot: Option<NodeId>,
    pub pos: Option<NodeId>,
    pub ce: Option<NodeId>,
    pub spc: Option<NodeId>,
}

impl LossNodes {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossComponents {
        let v = |n: Option<NodeId>| n.map(|n| g.value(n).data()[0].as_f64());
        LossComponents {
            rot: v(self.rot),
            pos: v(self.pos),
            ce: v(self.ce),
            spc: v(self.spc),
        }
    }
}

/// Weighted sum of the present terms. Fails on a non-finite term, naming it.
pub fn total_node<T: Scalar>(g: &mut Graph<T>, n: &LossNodes, w: &LossWeights) -> Result<NodeId> {
    let parts = [
        ("l_rot", n.rot, w.w_rot),
        ("l_pos", n.pos, w.w_pos),
        ("l_ce", n.ce, w.w_ce),
        ("l_spc", n.spc, w.w_spc),
    ];
    let mut total: Option<NodeId> = None;
    for (name, node, wk) in parts {
        let Some(node) = node else { continue };
        if !g.value(node).all_finite() {
            return Err(Error::NonFinite(name.into()));
        }
        let term = g.scale(node, T::from_f64(wk))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no loss terms".into()))
}

/// Mean over rows of the squared distance between normalized 6D rotations.
/// `z9` holds `[M, 9]` orthonormal matrices, `gt` the `[M, 6]` targets.
pub fn rot_mse_node<T: Scalar>(g: &mut Graph<T>, z9: NodeId, gt: Tensor<T>) -> Result<NodeId> {
    let m = gt.rows();
    let z = g.slice_cols(z9, 0, 6)?;
    let c = g.constant(gt)?;
    row_mean_sq(g, z, c, m)
}

/// Mean over rows of the squared distance between `[M, 3]` positions.
pub fn pos_mse_node<T: Scalar>(g: &mut Graph<T>, pos: NodeId, gt: Tensor<T>) -> Result<NodeId> {
    let m = gt.rows();
    let c = g.constant(gt)?;
    row_mean_sq(g, pos, c, m)
}

fn row_mean_sq<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId, rows: usize) -> Result<NodeId> {
    if rows == 0 {
        return Err(Error::EmptyDataset("loss over zero rows".into()));
    }
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    g.scale(s, T::from_f64(1.0 / rows as f64))
}

/// Normalized 6D of every local rotation of every frame, row-major `[F * J, 6]`.
pub fn pose_rot6d<T: Scalar>(poses: &[Pose]) -> Result<Tensor<T>> {
    let j = poses.first().map_or(0, |p| p.local_rot.len());
    let mut data = Vec::with_capacity(poses.len() * j * 6);
    for p in poses {
        if p.local_rot.len() != j {
            return Err(Error::SkeletonMismatch("poses differ in joint count".into()));
        }
        for r in &p.local_rot {
            let (m, _) = gram_schmidt(&r.as_f64())?;
            for c in 0..2 {
                for k in 0..3 {
                    data.push(T::from_f64(m[(k, c)]));
                }
            }
        }
    }
    Tensor::new([poses.len() * j, 6], data)
}

pub fn rot_mse(z: &[Pose], gt: &[Pose]) -> Result<f64> {
    if z.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted frames vs {} ground truth",
            z.len(),
            gt.len()
        )));
    }
    let a = pose_rot6d::<f64>(z)?;
    let b = pose_rot6d::<f64>(gt)?;
    if a.shape() != b.shape() {
        return Err(Error::SkeletonMismatch("joint counts differ".into()));
    }
    mean_row_sq(a.data(), b.data(), 6)
}

pub fn pos_mse(z: &[Vec<Vector3<f64>>], gt: &[Vec<Vector3<f64>>]) -> Result<f64> {
    if z.len() != gt.len() || z.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::InvalidArgument("position sequences differ in shape".into()));
    }
    let a: Vec<f64> = z.iter().flatten().flat_map(|p| p.iter().copied()).collect();
    let b: Vec<f64> = gt.iter().flatten().flat_map(|p| p.iter().copied()).collect();
    mean_row_sq(&a, &b, 3)
}

fn mean_row_sq(a: &[f64], b: &[f64], width: usize) -> Result<f64> {
    let rows = a.len() / width;
    if rows == 0 {
        return Err(Error::EmptyDataset("loss over zero rows".into()));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / rows as f64)
}

/// Per-frame registration evidence: soft point counts and probability
/// weighted centers of each joint. The background class is excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEvidence {
    pub support: Vec<f64>,
    /// Zero where the support is zero.
    pub centroid: Vec<Vector3<f64>>,
    pub active: Vec<bool>,
}

impl JointEvidence {
    pub fn active_joints(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&j| self.active[j]).collect()
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Evidence from `[P, J + 1]` class probabilities, background last.
pub fn evidence_from_probs<T: Scalar>(
    points: &[Vector3<f64>],
    probs: &Tensor<T>,
) -> Result<JointEvidence> {
    if probs.rows() != points.len() || probs.cols() < 2 {
        return Err(Error::Shape {
            op: "joint_evidence",
            lhs: probs.shape().to_vec(),
            rhs: vec![points.len(), 0],
        });
    }
    let j = probs.cols() - 1;
    let mut support = vec![0.0; j];
    let mut weighted = vec![Vector3::zeros(); j];
    for (i, q) in points.iter().enumerate() {
        let row = probs.row(i);
        for k in 0..j {
            let l = row[k].as_f64();
            support[k] += l;
            weighted[k] += q * l;
        }
    }
    let limit = ACTIVE_FRACTION * points.len() as f64;
    let centroid = (0..j)
        .map(|k| {
            if support[k] > MIN_SUPPORT {
                weighted[k] / support[k]
            } else {
                Vector3::zeros()
            }
        })
        .collect();
    let active = support.iter().map(|&s| s > limit).collect();
    Ok(JointEvidence {
        support,
        centroid,
        active,
    })
}

pub fn joint_evidence(points: &[Vector3<f64>], reg: &Registration) -> Result<JointEvidence> {
    evidence_from_probs(points, &reg.probs)
}

/// Evidence of a batch of `frames` equal-sized clouds stacked in rows.
pub fn evidence_batch<T: Scalar>(
    points: &Tensor<T>,
    probs: &Tensor<T>,
    frames: usize,
) -> Result<Vec<JointEvidence>> {
    let p = rows_per_frame(points.rows(), frames, "evidence_batch")?;
    let pts = to_vectors(points);
    (0..frames)
        .map(|f| {
            let rows = slice_rows(probs, f * p, (f + 1) * p)?;
            evidence_from_probs(&pts[f * p..(f + 1) * p], &rows)
        })
        .collect()
}

fn rows_per_frame(rows: usize, frames: usize, op: &'static str) -> Result<usize> {
    if frames == 0 || rows % frames != 0 {
        return Err(Error::Shape {
            op,
            lhs: vec![rows],
            rhs: vec![frames],
        });
    }
    Ok(rows / frames)
}

fn slice_rows<T: Scalar>(t: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let c = t.cols();
    Tensor::new([end - start, c], t.data()[start * c..end * c].to_vec())
}

fn to_vectors<T: Scalar>(t: &Tensor<T>) -> Vec<Vector3<f64>> {
    (0..t.rows())
        .map(|r| {
            let v = t.row(r);
            Vector3::new(v[0].as_f64(), v[1].as_f64(), v[2].as_f64())
        })
        .collect()
}

fn vec3<T: Scalar>(t: &Tensor<T>, r: usize) -> Vector3<f64> {
    let v = t.row(r);
    Vector3::new(v[0].as_f64(), v[1].as_f64(), v[2].as_f64())
}

/// Centroids `[F * J, 3]` from probabilities `[F * P, J + 1]` and points
/// `[F * P, 3]`. Differentiable in the probabilities only.
pub struct EvidenceOp {
    pub frames: usize,
}

impl<T: Scalar> CustomOp<T> for EvidenceOp {
    fn name(&self) -> &'static str {
        "evidence"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (probs, points) = (inputs[0], inputs[1]);
        if probs.rows() != points.rows() || points.cols() != 3 {
            return Err(Error::Shape {
                op: "evidence",
                lhs: probs.shape().to_vec(),
                rhs: points.shape().to_vec(),
            });
        }
        let ev = evidence_batch(points, probs, self.frames)?;
        let mut out = Vec::new();
        for e in &ev {
            for c in &e.centroid {
                out.extend(c.iter().map(|&v| T::from_f64(v)));
            }
        }
        Tensor::new([out.len() / 3, 3], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (probs, points) = (inputs[0], inputs[1]);
        let p = rows_per_frame(points.rows(), self.frames, "evidence")?;
        let j = probs.cols() - 1;
        let mut gl = Tensor::zeros(probs.shape().to_vec());
        for f in 0..self.frames {
            let mut support = vec![0.0; j];
            for i in f * p..(f + 1) * p {
                for (k, s) in support.iter_mut().enumerate() {
                    *s += probs.at(i, k).as_f64();
                }
            }
            for i in f * p..(f + 1) * p {
                let q = vec3(points, i);
                let row = gl.row_mut(i);
                for k in 0..j {
                    if support[k] > MIN_SUPPORT {
                        let r = f * j + k;
                        let d = (q - vec3(output, r)).dot(&vec3(grad, r));
                        row[k] = T::from_f64(d / support[k]);
                    }
                }
            }
        }
        Ok(vec![Some(gl), None])
    }
}

/// Hinge on the distance between predicted joints and centroids, averaged
/// over each frame's active joints, then over frames with any active joint.
pub struct SpcHingeOp {
    pub theta: f64,
    /// `[F * J]` active flags.
    pub active: Vec<bool>,
    pub joints: usize,
}

impl SpcHingeOp {
    pub fn new(evidence: &[JointEvidence], theta: f64) -> Result<Self> {
        if !(theta > 0.0) {
            return Err(Error::InvalidArgument(format!("theta must be positive, got {theta}")));
        }
        let joints = evidence.first().map_or(0, |e| e.active.len());
        if evidence.iter().any(|e| e.active.len() != joints) {
            return Err(Error::SkeletonMismatch("evidence differs in joint count".into()));
        }
        Ok(Self {
            theta,
            active: evidence.iter().flat_map(|e| e.active.iter().copied()).collect(),
            joints,
        })
    }

    fn frames(&self) -> usize {
        if self.joints == 0 {
            0
        } else {
            self.active.len() / self.joints
        }
    }

    /// Per-frame active counts and the number of frames with any.
    fn counts(&self) -> (Vec<usize>, usize) {
        let n: Vec<usize> = (0..self.frames())
            .map(|f| {
                self.active[f * self.joints..(f + 1) * self.joints]
                    .iter()
                    .filter(|&&a| a)
                    .count()
            })
            .collect();
        let used = n.iter().filter(|&&c| c > 0).count();
        (n, used)
    }
}

impl<T: Scalar> CustomOp<T> for SpcHingeOp {
    fn name(&self) -> &'static str {
        "spc_hinge"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (pos, cen) = (inputs[0], inputs[1]);
        if pos.shape() != cen.shape() || pos.rows() != self.active.len() {
            return Err(Error::Shape {
                op: "spc_hinge",
                lhs: pos.shape().to_vec(),
                rhs: cen.shape().to_vec(),
            });
        }
        let (n, used) = self.counts();
        let mut total = 0.0;
        for f in 0..self.frames() {
            if n[f] == 0 {
                continue;
            }
            let mut s = 0.0;
            for k in 0..self.joints {
                let r = f * self.joints + k;
                if self.active[r] {
                    let d = (vec3(pos, r) - vec3(cen, r)).norm();
                    s += (d - self.theta).max(0.0);
                }
            }
            total += s / n[f] as f64;
        }
        let v = if used == 0 { 0.0 } else { total / used as f64 };
        Ok(Tensor::scalar(T::from_f64(v)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (pos, cen) = (inputs[0], inputs[1]);
        let (n, used) = self.counts();
        let mut gp = Tensor::zeros(pos.shape().to_vec());
        let mut gc = Tensor::zeros(cen.shape().to_vec());
        let g0 = grad.data()[0].as_f64();
        for f in 0..self.frames() {
            if n[f] == 0 {
                continue;
            }
            let w = g0 / (used as f64 * n[f] as f64);
            for k in 0..self.joints {
                let r = f * self.joints + k;
                if !self.active[r] {
                    continue;
                }
                let diff = vec3(pos, r) - vec3(cen, r);
                let d = diff.norm();
                if d > self.theta {
                    let u = diff * (w / d);
                    for c in 0..3 {
                        gp.row_mut(r)[c] = T::from_f64(u[c]);
                        gc.row_mut(r)[c] = T::from_f64(-u[c]);
                    }
                }
            }
        }
        Ok(vec![Some(gp), Some(gc)])
    }
}

/// SPC loss in a graph: `pos` and `centroids` are `[F * J, 3]`.
pub fn spc_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    pos: NodeId,
    centroids: NodeId,
    evidence: &[JointEvidence],
    theta: f64,
) -> Result<NodeId> {
    g.custom(Box::new(SpcHingeOp::new(evidence, theta)?), &[pos, centroids])
}

/// SPC loss over a sequence of predicted joint positions.
pub fn spc_loss(
    evidence: &[JointEvidence],
    positions: &[Vec<Vector3<f64>>],
    theta: f64,
) -> Result<f64> {
    let op = SpcHingeOp::new(evidence, theta)?;
    if positions.len() != evidence.len() {
        return Err(Error::InvalidArgument("evidence and poses differ in length".into()));
    }
    let flat = |v: Vec<Vector3<f64>>| {
        let n = v.len();
        Tensor::new([n, 3], v.into_iter().flat_map(|p| [p.x, p.y, p.z]).collect())
    };
    let pos = flat(positions.iter().flatten().copied().collect())?;
    let cen = flat(evidence.iter().flat_map(|e| e.centroid.iter().copied()).collect())?;
    let out: Tensor<f64> = CustomOp::<f64>::forward(&op, &[&pos, &cen])?;
    Ok(out.data()[0])
}

/// Distance from a point to the union of the capsules, zero inside.
pub fn surface_distance(p: &Vector3<f64>, parents: &[usize], pos: &[Vector3<f64>], radii: &[f64]) -> (f64, Option<(usize, f64)>) {
    let mut best = f64::INFINITY;
    let mut arg = None;
    for k in 1..pos.len() {
        let (d, t) = segment_distance(p, &pos[parents[k]], &pos[k]);
        let sd = d - radii[k];
        if sd < best {
            best = sd;
            arg = Some((k, t));
        }
    }
    if best <= 0.0 {
        (0.0, None)
    } else {
        (best, arg)
    }
}

/// Mean distance of `[F * P, 3]` cloud points to the capsules posed by
/// `[F * J, 3]` joint positions. Differentiable in the positions.
pub struct PcLossOp {
    pub parents: Vec<usize>,
    pub radii: Vec<f64>,
    pub frames: usize,
    /// Frames left out of the mean (e.g. nothing visible).
    pub skip: Vec<bool>,
}

impl PcLossOp {
    pub fn new(skel: &Skeleton, shape: &BodyShape, frames: usize) -> Result<Self> {
        if shape.radii.len() != skel.num_joints() {
            return Err(Error::SkeletonMismatch(format!(
                "{} radii for {} joints",
                shape.radii.len(),
                skel.num_joints()
            )));
        }
        Ok(Self {
            parents: skel.parents().to_vec(),
            radii: shape.radii.clone(),
            frames,
            skip: vec![false; frames],
        })
    }

    pub fn with_skip(mut self, skip: &[bool]) -> Result<Self> {
        if skip.len() != self.frames {
            return Err(Error::InvalidArgument(format!(
                "{} skip flags for {} frames",
                skip.len(),
                self.frames
            )));
        }
        self.skip = skip.to_vec();
        Ok(self)
    }

    fn counted(&self, p: usize) -> usize {
        self.skip.iter().filter(|&&s| !s).count() * p
    }

    fn dims<T: Scalar>(&self, pos: &Tensor<T>, cloud: &Tensor<T>) -> Result<(usize, usize)> {
        let j = self.parents.len();
        if pos.rows() != self.frames * j || pos.cols() != 3 || cloud.cols() != 3 {
            return Err(Error::Shape {
                op: "pc_loss",
                lhs: pos.shape().to_vec(),
                rhs: cloud.shape().to_vec(),
            });
        }
        Ok((j, rows_per_frame(cloud.rows(), self.frames, "pc_loss")?))
    }
}

impl<T: Scalar> CustomOp<T> for PcLossOp {
    fn name(&self) -> &'static str {
        "pc_loss"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (pos, cloud) = (inputs[0], inputs[1]);
        let (j, p) = self.dims(pos, cloud)?;
        let mut total = 0.0;
        for f in (0..self.frames).filter(|&f| !self.skip[f]) {
            let joints: Vec<_> = (0..j).map(|k| vec3(pos, f * j + k)).collect();
            for i in f * p..(f + 1) * p {
                total += surface_distance(&vec3(cloud, i), &self.parents, &joints, &self.radii).0;
            }
        }
        Ok(Tensor::scalar(T::from_f64(total / self.counted(p).max(1) as f64)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (pos, cloud) = (inputs[0], inputs[1]);
        let (j, p) = self.dims(pos, cloud)?;
        let w = grad.data()[0].as_f64() / self.counted(p).max(1) as f64;
        let mut gp = vec![Vector3::<f64>::zeros(); pos.rows()];
        for f in (0..self.frames).filter(|&f| !self.skip[f]) {
            let joints: Vec<_> = (0..j).map(|k| vec3(pos, f * j + k)).collect();
            for i in f * p..(f + 1) * p {
                let q = vec3(cloud, i);
                let (_, arg) = surface_distance(&q, &self.parents, &joints, &self.radii);
                let Some((k, t)) = arg else { continue };
                let a = joints[self.parents[k]];
                let b = joints[k];
                let diff = a + (b - a) * t - q;
                let d = diff.norm();
                if d == 0.0 {
                    continue;
                }
                // envelope: the closest-point parameter is held fixed
                let u = diff * (w / d);
                gp[f * j + self.parents[k]] += u * (1.0 - t);
                gp[f * j + k] += u * t;
            }
        }
        let data = gp.iter().flat_map(|v| v.iter().map(|&x| T::from_f64(x))).collect();
        Ok(vec![Some(Tensor::new(pos.shape().to_vec(), data)?), None])
    }
}

pub fn pc_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    pos: NodeId,
    cloud: NodeId,
    skel: &Skeleton,
    shape: &BodyShape,
    skip: &[bool],
) -> Result<NodeId> {
    let op = PcLossOp::new(skel, shape, skip.len())?.with_skip(skip)?;
    g.custom(Box::new(op), &[pos, cloud])
}

/// Mean distance of every cloud point to the capsules of its frame.
pub fn pc_loss(
    clouds: &[Vec<Vector3<f64>>],
    positions: &[Vec<Vector3<f64>>],
    skel: &Skeleton,
    shape: &BodyShape,
) -> Result<f64> {
    if clouds.len() != positions.len() {
        return Err(Error::InvalidArgument("clouds and poses differ in length".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (cloud, pos) in clouds.iter().zip(positions) {
        if pos.len() != skel.num_joints() {
            return Err(Error::SkeletonMismatch("pose joint count".into()));
        }
        let caps = body_capsules(skel, shape, pos);
        for q in cloud {
            let sd = caps
                .iter()
                .map(|c| c.signed_distance(q))
                .fold(f64::INFINITY, f64::min);
            total += sd.max(0.0);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset("no cloud points".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference, relative_error};
    use crate::kinematics::rot6d::GramSchmidtOp;
    use crate::kinematics::{fk, Pose, Rot6D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn default_weights_sum() {
        let c = LossComponents {
            rot: Some(1.0),
            pos: Some(1.0),
            ce: Some(1.0),
            spc: Some(1.0),
        };
        let t = total_loss(&c, &LossWeights::default()).unwrap();
        assert!((t - 1.12).abs() < 1e-12, "{t}");
        assert_eq!(total_loss(&LossComponents::default(), &LossWeights::default()).unwrap(), 0.0);
        let bad = LossComponents {
            ce: Some(f64::NAN),
            ..c
        };
        match total_loss(&bad, &LossWeights::default()) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "l_ce"),
            other => panic!("{other:?}"),
        }
        let neg = LossWeights {
            w_pos: -1.0,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn mse_closed_forms() {
        let (skel, _) = Skeleton::toy4();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = Pose {
            local_rot: (0..4)
                .map(|_| Rot6D(std::array::from_fn(|_| rng.gen_range(-1.0..1.0))))
                .collect(),
            root_pos: [0.1, 1.0, 0.2],
            root_rot: Rot6D::IDENTITY,
        };
        assert_eq!(rot_mse(&[pose.clone()], &[pose.clone()]).unwrap(), 0.0);
        let p = fk(&skel, &pose).unwrap();
        let shifted: Vec<_> = p.iter().map(|q| q + v(0.01, 0.0, 0.0)).collect();
        let m = pos_mse(&[shifted], &[p]).unwrap();
        assert!((m - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn uniform_registration_has_no_active_joints() {
        let pts: Vec<_> = (0..100).map(|i| v(i as f64 * 0.01, 0.0, 1.0)).collect();
        let probs = Tensor::<f32>::full([100, 23], 1.0 / 23.0);
        let e = evidence_from_probs(&pts, &probs).unwrap();
        for s in &e.support {
            assert!((s - 100.0 / 23.0).abs() < 1e-4);
        }
        assert_eq!(e.num_active(), 0);
    }

    #[test]
    fn concentrated_registration() {
        let pts: Vec<_> = (0..10).map(|i| v(i as f64, 1.0, -2.0)).collect();
        let mut probs = Tensor::<f64>::zeros([10, 5]);
        for i in 0..10 {
            probs.row_mut(i)[2] = 1.0;
        }
        let e = evidence_from_probs(&pts, &probs).unwrap();
        assert_eq!(e.support[2], 10.0);
        assert!((e.centroid[2] - v(4.5, 1.0, -2.0)).norm() < 1e-12);
        assert_eq!(e.active_joints(), vec![2]);
    }

    #[test]
    fn single_joint_hinge() {
        let mut e = JointEvidence {
            support: vec![0.0; 4],
            centroid: vec![Vector3::zeros(); 4],
            active: vec![false; 4],
        };
        e.active[1] = true;
        e.centroid[1] = v(1.0, 1.0, 1.0);
        let mut pos = vec![v(5.0, 5.0, 5.0); 4];
        pos[1] = v(1.25, 1.0, 1.0);
        let l = spc_loss(&[e.clone()], &[pos.clone()], DEFAULT_THETA).unwrap();
        assert_eq!(l, 0.25 - 0.10);
        pos[1] = v(1.05, 1.0, 1.0);
        assert_eq!(spc_loss(&[e.clone()], &[pos], DEFAULT_THETA).unwrap(), 0.0);
        assert!(spc_loss(&[e], &[vec![Vector3::zeros(); 4]], 0.0).is_err());
    }

    #[test]
    fn empty_active_frames_contribute_nothing() {
        let mut a = JointEvidence {
            support: vec![0.0; 2],
            centroid: vec![Vector3::zeros(); 2],
            active: vec![true, false],
        };
        let none = JointEvidence {
            active: vec![false; 2],
            ..a.clone()
        };
        a.centroid[0] = v(0.0, 0.0, 0.0);
        let pos = vec![v(0.3, 0.0, 0.0), Vector3::zeros()];
        let one = spc_loss(&[a.clone()], &[pos.clone()], 0.1).unwrap();
        let two = spc_loss(&[a, none], &[pos.clone(), pos], 0.1).unwrap();
        assert!((one - 0.2).abs() < 1e-12);
        assert_eq!(one, two);
    }

    #[test]
    fn point_off_one_capsule() {
        let skel = Skeleton::new(
            vec!["root".into(), "tip".into()],
            vec![0, 0],
            vec![Vector3::zeros(), v(0.0, 1.0, 0.0)],
            vec![false, false],
        )
        .unwrap();
        let shape = BodyShape {
            radii: vec![0.1, 0.1],
            scale: 1.0,
        };
        let pos = vec![Vector3::zeros(), v(0.0, 1.0, 0.0)];
        let l = pc_loss(&[vec![v(0.15, 0.5, 0.0)]], &[pos.clone()], &skel, &shape).unwrap();
        assert!((l - 0.05).abs() < 1e-12);
        let l = pc_loss(&[vec![v(0.1, 0.5, 0.0), v(0.0, 0.3, 0.02)]], &[pos], &skel, &shape)
            .unwrap();
        assert!(l.abs() < 1e-12);
    }

    fn random_evidence(rng: &mut ChaCha8Rng, frames: usize, p: usize, j: usize) -> (Tensor<f64>, Tensor<f64>) {
        let pts = Tensor::from_fn([frames * p, 3], |_| rng.gen_range(-1.0..1.0));
        let mut probs = Tensor::from_fn([frames * p, j + 1], |_| rng.gen_range(0.0..1.0f64).powi(3));
        for r in 0..frames * p {
            let s: f64 = probs.row(r).iter().sum();
            probs.row_mut(r).iter_mut().for_each(|v| *v /= s);
        }
        (pts, probs)
    }

    #[test]
    fn evidence_and_hinge_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (frames, p, j) = (3, 12, 4);
        let (pts, probs) = random_evidence(&mut rng, frames, p, j);
        let pos = Tensor::from_fn([frames * j, 3], |_| rng.gen_range(-1.0..1.0));
        let ev = evidence_batch(&pts, &probs, frames).unwrap();
        let loss = |params: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::<f64>::new();
            let l = g.variable(params[0].clone())?;
            let q = g.constant(pts.clone())?;
            let x = g.variable(params[1].clone())?;
            let c = g.custom(Box::new(EvidenceOp { frames }), &[l, q])?;
            let o = spc_loss_node(&mut g, x, c, &ev, 0.1)?;
            Ok(g.value(o).data()[0])
        };
        let mut g = Graph::<f64>::new();
        let l = g.variable(probs.clone()).unwrap();
        let q = g.constant(pts.clone()).unwrap();
        let x = g.variable(pos.clone()).unwrap();
        let c = g.custom(Box::new(EvidenceOp { frames }), &[l, q]).unwrap();
        let o = spc_loss_node(&mut g, x, c, &ev, 0.1).unwrap();
        assert!(g.value(o).data()[0] > 0.0);
        g.backward(o).unwrap();
        let fd = finite_difference(&loss, &[probs, pos], 1e-6).unwrap();
        assert!(relative_error(g.grad(l).unwrap(), &fd[0]) < 1e-5);
        assert!(relative_error(g.grad(x).unwrap(), &fd[1]) < 1e-5);
    }

    #[test]
    fn hinge_gradient_is_zero_inside_threshold() {
        let e = JointEvidence {
            support: vec![10.0],
            centroid: vec![v(0.0, 0.0, 0.0)],
            active: vec![true],
        };
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new([1, 3], vec![0.05, 0.0, 0.0]).unwrap()).unwrap();
        let c = g.variable(Tensor::zeros([1, 3])).unwrap();
        let o = spc_loss_node(&mut g, x, c, &[e], 0.1).unwrap();
        g.backward(o).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pc_loss_gradient_matches_finite_differences() {
        let (skel, shape) = Skeleton::toy4();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = 3;
        let pos = Tensor::from_fn([frames * 4, 3], |i| {
            let base = skel.offsets()[(i / 3) % 4][i % 3] * 2.0;
            base + rng.gen_range(-0.05..0.05)
        });
        let cloud = Tensor::from_fn([frames * 20, 3], |_| rng.gen_range(-0.6..0.6));
        let loss = |params: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::<f64>::new();
            let x = g.variable(params[0].clone())?;
            let c = g.constant(cloud.clone())?;
            let o = pc_loss_node(&mut g, x, c, &skel, &shape, &[false, false, true])?;
            Ok(g.value(o).data()[0])
        };
        let mut g = Graph::<f64>::new();
        let x = g.variable(pos.clone()).unwrap();
        let c = g.constant(cloud.clone()).unwrap();
        let o = pc_loss_node(&mut g, x, c, &skel, &shape, &[false, false, true]).unwrap();
        g.backward(o).unwrap();
        let fd = finite_difference(&loss, &[pos], 1e-7).unwrap();
        assert!(relative_error(g.grad(x).unwrap(), &fd[0]) < 1e-4);
    }

    #[test]
    fn rotation_loss_through_gram_schmidt() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Tensor::from_fn([5, 6], |_| rng.gen_range(-1.0..1.0));
        let gt_poses: Vec<Pose> = (0..1)
            .map(|_| Pose {
                local_rot: (0..5)
                    .map(|_| Rot6D(std::array::from_fn(|_| rng.gen_range(-1.0..1.0))))
                    .collect(),
                root_pos: [0.0; 3],
                root_rot: Rot6D::IDENTITY,
            })
            .collect();
        let gt: Tensor<f64> = pose_rot6d(&gt_poses).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.variable(z.clone()).unwrap();
        let m = g.custom(Box::new(GramSchmidtOp), &[x]).unwrap();
        let o = rot_mse_node(&mut g, m, gt.clone()).unwrap();
        let pred = Pose {
            local_rot: (0..5)
                .map(|r| Rot6D(std::array::from_fn(|c| z.at(r, c) as f32)))
                .collect(),
            ..gt_poses[0].clone()
        };
        let scalar = rot_mse(&[pred], &gt_poses).unwrap();
        assert!((g.value(o).data()[0] - scalar).abs() < 1e-6);
    }
}
