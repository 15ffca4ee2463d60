//! Network inputs in the heading frame of the tracked head.
//!
//! The 3-point vector is rotated by the inverse head heading and translated
//! so the head sits above the origin; height is kept. Accelerations are
//! scaled down to order one.

use nalgebra::{Matrix3, Vector3};

use crate::error::Result;
use crate::kinematics::fk::{anchored_root, heading, Pose, RootFrame};
use crate::kinematics::{Rot6D, Skeleton};
use crate::kinematics::rot6d::matrix_to_rot6d;
use crate::sensor::motion::{ThreePointFrame, DEVICE_DIM, X_DIM};
use crate::sensor::sequence::{SampledCloud, SensorFrame};

pub const ACC_SCALE: f64 = 0.1;
pub const ROT_ACC_SCALE: f64 = 0.05;

/// Head position and heading rotation of one frame.
pub fn head_heading(x: &ThreePointFrame) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let rot = x.rotation(0).to_matrix()?;
    Ok((x.position(0), heading(&rot)))
}

/// FK placement for a predicted pose: heading from the head, head joint
/// anchored at the tracked head position.
pub fn root_frame(x: &ThreePointFrame, scale: f64) -> Result<RootFrame> {
    let (pos, rot) = head_heading(x)?;
    Ok(RootFrame { pos, rot, scale })
}

/// Pose from local rotations, placed in the head-anchored convention: root
/// heading from the tracked head, head joint on the tracked head position.
pub fn place_pose(
    skel: &Skeleton,
    local_rot: Vec<Rot6D>,
    x: &ThreePointFrame,
    scale: f64,
) -> Result<Pose> {
    if local_rot.len() != skel.num_joints() {
        return Err(crate::Error::SkeletonMismatch(format!(
            "{} rotations for {} joints",
            local_rot.len(),
            skel.num_joints()
        )));
    }
    let head = skel.tracked()?[0];
    let (target, yaw) = head_heading(x)?;
    let local = local_rot
        .iter()
        .map(Rot6D::to_matrix)
        .collect::<Result<Vec<_>>>()?;
    let root = anchored_root(skel, &yaw, &local, scale, head, target);
    Ok(Pose {
        local_rot,
        root_pos: [root.x as f32, root.y as f32, root.z as f32],
        root_rot: Rot6D::from_matrix(&yaw),
    })
}

pub fn canonical_x(x: &ThreePointFrame) -> Result<[f32; X_DIM]> {
    let (head, yaw) = head_heading(x)?;
    let inv = yaw.transpose();
    let origin = Vector3::new(head.x, 0.0, head.z);
    let mut out = [0.0f32; X_DIM];
    for d in 0..3 {
        let o = d * DEVICE_DIM;
        let p = inv * (x.position(d) - origin);
        let a = inv * x.acceleration(d) * ACC_SCALE;
        let r = matrix_to_rot6d(&(inv * x.rotation(d).to_matrix()?));
        let ra = x.rot_acceleration(d).map(|v| v as f64);
        let ra1 = inv * Vector3::new(ra[0], ra[1], ra[2]) * ROT_ACC_SCALE;
        let ra2 = inv * Vector3::new(ra[3], ra[4], ra[5]) * ROT_ACC_SCALE;
        for k in 0..3 {
            out[o + k] = p[k] as f32;
            out[o + 3 + k] = a[k] as f32;
            out[o + 12 + k] = ra1[k] as f32;
            out[o + 15 + k] = ra2[k] as f32;
        }
        out[o + 6..o + 12].copy_from_slice(&r.0);
    }
    Ok(out)
}

/// Cloud points in world coordinates.
pub fn world_points(cloud: &SampledCloud, sensor: &SensorFrame) -> Vec<Vector3<f64>> {
    (0..cloud.len()).map(|i| sensor.to_world(&cloud.point(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::rot6d::{rot_x, rot_y};
    use crate::sensor::motion::three_point_frames;

    #[test]
    fn canonical_input_ignores_heading_and_floor_position() {
        let make = |yaw: f64, shift: Vector3<f64>| {
            let r = rot_y(yaw);
            let pos: Vec<[Vector3<f64>; 3]> = (0..3)
                .map(|t| {
                    let s = t as f64 * 0.1;
                    [
                        r * Vector3::new(0.0, 1.6, s) + shift,
                        r * Vector3::new(0.3, 1.0, 0.2 + s * s) + shift,
                        r * Vector3::new(-0.3, 1.1, 0.2) + shift,
                    ]
                })
                .collect();
            let rot = vec![[r * rot_x(0.5), r * rot_x(0.1), r * rot_y(0.2)]; 3];
            three_point_frames(&pos, &rot)
        };
        let a = make(0.0, Vector3::zeros());
        let b = make(2.0, Vector3::new(3.0, 0.0, -1.0));
        for t in 0..3 {
            let ca = canonical_x(&a[t]).unwrap();
            let cb = canonical_x(&b[t]).unwrap();
            for k in 0..X_DIM {
                assert!((ca[k] - cb[k]).abs() < 1e-3, "t {t} k {k}: {} vs {}", ca[k], cb[k]);
            }
        }
    }
}
