//! Pose-tracking metrics with upper/lower body splits and a per-action
//! breakdown.
//!
//! Velocities and jerks are forward differences at the sequence frame rate.
//! MPJVE is reported in cm/s; jitter as the ratio of mean predicted jerk to
//! mean ground-truth jerk.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kinematics::rot6d::geodesic_angle;
use crate::kinematics::{Pose, Skeleton};

/// Below this mean ground-truth jerk (m/s^3) the jitter ratio is undefined.
pub const MIN_GT_JERK: f64 = 1e-9;

type Positions = [Vec<Vector3<f64>>];

fn check_aligned<A, B>(a: &[Vec<A>], b: &[Vec<B>]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::InvalidArgument("prediction and ground truth are not aligned".into()));
    }
    Ok(())
}

fn subset_check(joints: usize, subset: &[usize]) -> Result<()> {
    if subset.is_empty() || subset.iter().any(|&k| k >= joints) {
        return Err(Error::InvalidArgument(format!("bad joint subset {subset:?} for {joints} joints")));
    }
    Ok(())
}

fn sums_position(pred: &Positions, gt: &Positions, subset: &[usize]) -> Result<(f64, usize)> {
    check_aligned(pred, gt)?;
    let mut s = 0.0;
    let mut n = 0;
    for (p, g) in pred.iter().zip(gt) {
        subset_check(p.len(), subset)?;
        for &k in subset {
            s += (p[k] - g[k]).norm();
            n += 1;
        }
    }
    Ok((s, n))
}

/// Mean joint position error in cm.
pub fn mpjpe(pred: &Positions, gt: &Positions, subset: &[usize]) -> Result<f64> {
    let (s, n) = sums_position(pred, gt, subset)?;
    mean(s, n).map(|m| m * 100.0)
}

fn local_matrices(p: &Pose) -> Result<Vec<nalgebra::Matrix3<f64>>> {
    p.local_matrices()
}

fn sums_rotation(pred: &[Pose], gt: &[Pose], subset: &[usize]) -> Result<(f64, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument("prediction and ground truth differ in length".into()));
    }
    let mut s = 0.0;
    let mut n = 0;
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (local_matrices(p)?, local_matrices(g)?);
        if a.len() != b.len() {
            return Err(Error::SkeletonMismatch("joint counts differ".into()));
        }
        subset_check(a.len(), subset)?;
        for &k in subset {
            s += geodesic_angle(&a[k], &b[k]);
            n += 1;
        }
    }
    Ok((s, n))
}

/// Mean geodesic angle between local joint rotations, radians.
pub fn mpjre(pred: &[Pose], gt: &[Pose], subset: &[usize]) -> Result<f64> {
    let (s, n) = sums_rotation(pred, gt, subset)?;
    mean(s, n)
}

fn velocity(p: &Positions, t: usize, k: usize, fps: f64) -> Vector3<f64> {
    (p[t + 1][k] - p[t][k]) * fps
}

fn jerk(p: &Positions, t: usize, k: usize, fps: f64) -> Vector3<f64> {
    (p[t + 3][k] - p[t + 2][k] * 3.0 + p[t + 1][k] * 3.0 - p[t][k]) * fps.powi(3)
}

fn sums_velocity(pred: &Positions, gt: &Positions, subset: &[usize], fps: f64) -> Result<(f64, usize)> {
    check_aligned(pred, gt)?;
    if pred.len() < 2 {
        return Err(Error::InvalidArgument("velocity error needs at least 2 frames".into()));
    }
    subset_check(pred[0].len(), subset)?;
    let mut s = 0.0;
    let mut n = 0;
    for t in 0..pred.len() - 1 {
        for &k in subset {
            s += (velocity(pred, t, k, fps) - velocity(gt, t, k, fps)).norm();
            n += 1;
        }
    }
    Ok((s, n))
}

/// Mean joint velocity error in cm/s.
pub fn mpjve(pred: &Positions, gt: &Positions, subset: &[usize], fps: f64) -> Result<f64> {
    let (s, n) = sums_velocity(pred, gt, subset, fps)?;
    mean(s, n).map(|m| m * 100.0)
}

/// Sum of jerk magnitudes and the number of terms.
fn sums_jerk(p: &Positions, subset: &[usize], fps: f64) -> Result<(f64, usize)> {
    if p.len() < 4 {
        return Err(Error::InvalidArgument("jitter needs at least 4 frames".into()));
    }
    subset_check(p[0].len(), subset)?;
    let mut s = 0.0;
    let mut n = 0;
    for t in 0..p.len() - 3 {
        for &k in subset {
            s += jerk(p, t, k, fps).norm();
            n += 1;
        }
    }
    Ok((s, n))
}

/// Mean jerk of the prediction over mean jerk of the ground truth.
pub fn jitter_ratio(pred: &Positions, gt: &Positions, subset: &[usize], fps: f64) -> Result<f64> {
    check_aligned(pred, gt)?;
    let (a, _) = sums_jerk(pred, subset, fps)?;
    let (b, n) = sums_jerk(gt, subset, fps)?;
    ratio(a, b, n)
}

fn ratio(pred_sum: f64, gt_sum: f64, n: usize) -> Result<f64> {
    if n == 0 || gt_sum / (n as f64) < MIN_GT_JERK {
        return Err(Error::Degenerate("ground-truth jerk is zero (static sequence)".into()));
    }
    Ok(pred_sum / gt_sum)
}

fn mean(s: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyDataset("no frames to average".into()));
    }
    Ok(s / n as f64)
}

/// One metric row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRow {
    pub mpjpe_up: f64,
    pub mpjpe_low: f64,
    pub mpjre_up: f64,
    pub mpjre_low: f64,
    pub mpjve_up: f64,
    pub mpjve_low: f64,
    pub jitter_up: f64,
    pub jitter_low: f64,
    /// cm; absent without clouds.
    pub pc_loss: Option<f64>,
    pub sequences: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub overall: MetricRow,
    pub per_action: BTreeMap<String, MetricRow>,
}

pub const CSV_HEADER: &str = "label,action,sequences,frames,mpjpe_up_cm,mpjpe_low_cm,mpjre_up_rad,mpjre_low_rad,mpjve_up_cm_s,mpjve_low_cm_s,jitter_up,jitter_low,pc_loss_cm";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "".into(), |v| format!("{v:.6}"))
}

impl MetricRow {
    fn csv(&self, label: &str, action: &str) -> String {
        format!(
            "{label},{action},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.sequences,
            self.frames,
            self.mpjpe_up,
            self.mpjpe_low,
            self.mpjre_up,
            self.mpjre_low,
            self.mpjve_up,
            self.mpjve_low,
            self.jitter_up,
            self.jitter_low,
            fmt_opt(self.pc_loss)
        )
    }

    fn table(&self, label: &str) -> String {
        let pc = self.pc_loss.map_or_else(|| "-".into(), |v| format!("{v:.2}"));
        format!(
            "{label:<28} {:>6.2} {:>6.2} | {:>5.3} {:>5.3} | {:>7.2} {:>7.2} | {:>5.2} {:>5.2} | {pc:>7}",
            self.mpjpe_up,
            self.mpjpe_low,
            self.mpjre_up,
            self.mpjre_low,
            self.mpjve_up,
            self.mpjve_low,
            self.jitter_up,
            self.jitter_low,
        )
    }
}

impl MetricReport {
    /// CSV lines (no header): the overall row then one per action.
    pub fn csv_rows(&self, label: &str) -> Vec<String> {
        let mut out = vec![self.overall.csv(label, "all")];
        for (action, row) in &self.per_action {
            out.push(row.csv(label, action));
        }
        out
    }

    pub fn to_csv(&self, label: &str) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for line in self.csv_rows(label) {
            s.push_str(&line);
            s.push('\n');
        }
        s
    }
}

/// Fixed-width table with one row per labelled report, then the per-action
/// rows of each.
pub fn format_table(reports: &[(&str, &MetricReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:>13} | {:>11} | {:>15} | {:>11} | {:>7}",
        "", "MPJPE (cm)", "MPJRE (rad)", "MPJVE (cm/s)", "jitter", "PC-loss"
    );
    let _ = writeln!(
        s,
        "{:<28} {:>6} {:>6} | {:>5} {:>5} | {:>7} {:>7} | {:>5} {:>5} | {:>7}",
        "method", "up", "low", "up", "low", "up", "low", "up", "low", "(cm)"
    );
    for (label, r) in reports {
        let _ = writeln!(s, "{}", r.overall.table(label));
    }
    let actions: std::collections::BTreeSet<&String> =
        reports.iter().flat_map(|(_, r)| r.per_action.keys()).collect();
    for action in actions {
        let _ = writeln!(s, "\n[{action}]");
        for (label, r) in reports {
            if let Some(row) = r.per_action.get(action) {
                let _ = writeln!(s, "{}", row.table(label));
            }
        }
    }
    s
}

/// Everything needed to score one sequence.
#[derive(Debug, Clone)]
pub struct ScoredSequence<'a> {
    pub action: &'a str,
    pub fps: f64,
    pub pred_poses: &'a [Pose],
    pub gt_poses: &'a [Pose],
    pub pred_pos: &'a Positions,
    pub gt_pos: &'a Positions,
    /// Sum of point-to-surface distances (m) and number of points.
    pub pc: Option<(f64, usize)>,
}

#[derive(Debug, Clone, Default)]
struct Acc {
    pos: [(f64, usize); 2],
    rot: [(f64, usize); 2],
    vel: [(f64, usize); 2],
    jerk_pred: [f64; 2],
    jerk_gt: [(f64, usize); 2],
    pc: Option<(f64, usize)>,
    sequences: usize,
    frames: usize,
}

impl Acc {
    fn add(&mut self, s: &ScoredSequence<'_>, sets: &[Vec<usize>; 2]) -> Result<()> {
        for (i, set) in sets.iter().enumerate() {
            let add = |a: &mut (f64, usize), b: (f64, usize)| {
                a.0 += b.0;
                a.1 += b.1;
            };
            add(&mut self.pos[i], sums_position(s.pred_pos, s.gt_pos, set)?);
            add(&mut self.rot[i], sums_rotation(s.pred_poses, s.gt_poses, set)?);
            add(&mut self.vel[i], sums_velocity(s.pred_pos, s.gt_pos, set, s.fps)?);
            self.jerk_pred[i] += sums_jerk(s.pred_pos, set, s.fps)?.0;
            add(&mut self.jerk_gt[i], sums_jerk(s.gt_pos, set, s.fps)?);
        }
        if let Some((d, n)) = s.pc {
            let c = self.pc.get_or_insert((0.0, 0));
            c.0 += d;
            c.1 += n;
        }
        self.sequences += 1;
        self.frames += s.pred_pos.len();
        Ok(())
    }

    fn finish(&self) -> Result<MetricRow> {
        let m = |a: (f64, usize)| mean(a.0, a.1);
        Ok(MetricRow {
            mpjpe_up: m(self.pos[0])? * 100.0,
            mpjpe_low: m(self.pos[1])? * 100.0,
            mpjre_up: m(self.rot[0])?,
            mpjre_low: m(self.rot[1])?,
            mpjve_up: m(self.vel[0])? * 100.0,
            mpjve_low: m(self.vel[1])? * 100.0,
            jitter_up: ratio(self.jerk_pred[0], self.jerk_gt[0].0, self.jerk_gt[0].1)?,
            jitter_low: ratio(self.jerk_pred[1], self.jerk_gt[1].0, self.jerk_gt[1].1)?,
            pc_loss: match self.pc {
                Some((d, n)) => Some(mean(d, n)? * 100.0),
                None => None,
            },
            sequences: self.sequences,
            frames: self.frames,
        })
    }
}

/// Frame-weighted report over sequences. Jitter is pooled over the whole set
/// before taking the ratio.
pub fn report(skel: &Skeleton, seqs: &[ScoredSequence<'_>]) -> Result<MetricReport> {
    if seqs.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let sets = [skel.upper_joints(), skel.lower_joints()];
    let mut all = Acc::default();
    let mut by: BTreeMap<String, Acc> = BTreeMap::new();
    for s in seqs {
        all.add(s, &sets)?;
        by.entry(s.action.to_string()).or_default().add(s, &sets)?;
    }
    let per_action = by
        .into_iter()
        .map(|(k, a)| a.finish().map(|r| (k, r)))
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        overall: all.finish()?,
        per_action,
    })
}
