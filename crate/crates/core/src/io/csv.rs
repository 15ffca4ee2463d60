//! CSV training logs and pose exports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kinematics::{fk_scaled, Pose, Skeleton};
use crate::trainer::LogRow;

pub const LOG_HEADER: &str = "step,l_rot,l_pos,l_ce,l_spc,total";
pub const POSE_HEADER: &str = "frame,joint,name,x,y,z,r0,r1,r2,r3,r4,r5";

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step,
            r.l_rot,
            r.l_pos,
            opt(r.l_ce),
            opt(r.l_spc),
            r.total
        );
    }
    s
}

/// One row per frame and joint: world position (m) and local 6D rotation.
pub fn pose_csv(skel: &Skeleton, poses: &[Pose], scale: f64) -> Result<String> {
    let mut s = String::from(POSE_HEADER);
    s.push('\n');
    for (f, p) in poses.iter().enumerate() {
        if p.local_rot.len() != skel.num_joints() {
            return Err(Error::SkeletonMismatch(format!(
                "pose has {} joints, skeleton {}",
                p.local_rot.len(),
                skel.num_joints()
            )));
        }
        let pos = fk_scaled(skel, p, scale)?;
        for (j, (q, r)) in pos.iter().zip(&p.local_rot).enumerate() {
            let _ = write!(s, "{f},{j},{},{},{},{}", skel.names()[j], q.x as f32, q.y as f32, q.z as f32);
            for v in r.0 {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_rows_and_blank_optionals() {
        let rows = [LogRow {
            step: 0,
            l_rot: 0.5,
            l_pos: 0.25,
            l_ce: None,
            l_spc: Some(0.125),
            total: 0.75,
        }];
        assert_eq!(log_csv(&rows), format!("{LOG_HEADER}\n0,0.5,0.25,,0.125,0.75\n"));
    }

    #[test]
    fn pose_rows_per_joint() {
        let (skel, _) = Skeleton::toy4();
        let s = pose_csv(&skel, &[Pose::identity(4), Pose::identity(4)], 1.0).unwrap();
        assert_eq!(s.lines().count(), 1 + 8);
        assert!(s.lines().nth(1).unwrap().starts_with("0,0,"));
        assert!(pose_csv(&skel, &[Pose::identity(3)], 1.0).is_err());
    }
}
