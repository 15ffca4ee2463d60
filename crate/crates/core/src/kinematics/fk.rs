use nalgebra::{Matrix3, Vector3};

use super::rot6d::{matrix_to_row9, row9_to_matrix, rot_y, yaw_of, Rot6D};
use super::skeleton::Skeleton;
use crate::error::{Error, Result};
use crate::graph::CustomOp;
use crate::tensor::{Scalar, Tensor};

/// Local joint rotations plus the root transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub local_rot: Vec<Rot6D>,
    pub root_pos: [f32; 3],
    pub root_rot: Rot6D,
}

impl Pose {
    pub fn identity(j: usize) -> Self {
        Self {
            local_rot: vec![Rot6D::IDENTITY; j],
            root_pos: [0.0; 3],
            root_rot: Rot6D::IDENTITY,
        }
    }

    pub fn root_pos(&self) -> Vector3<f64> {
        Vector3::new(
            self.root_pos[0] as f64,
            self.root_pos[1] as f64,
            self.root_pos[2] as f64,
        )
    }

    pub fn local_matrices(&self) -> Result<Vec<Matrix3<f64>>> {
        self.local_rot.iter().map(Rot6D::to_matrix).collect()
    }

    pub fn is_valid(&self) -> bool {
        self.local_rot.iter().all(|r| r.to_matrix().is_ok()) && self.root_rot.to_matrix().is_ok()
    }
}

/// World-frame joint positions and rotations.
#[derive(Debug, Clone)]
pub struct FkOutput {
    pub positions: Vec<Vector3<f64>>,
    pub globals: Vec<Matrix3<f64>>,
}

/// Forward kinematics with explicit matrices.
pub fn fk_matrices(
    skel: &Skeleton,
    root_pos: Vector3<f64>,
    root_rot: &Matrix3<f64>,
    local: &[Matrix3<f64>],
    scale: f64,
) -> FkOutput {
    let j = skel.num_joints();
    let mut positions = Vec::with_capacity(j);
    let mut globals = Vec::with_capacity(j);
    positions.push(root_pos);
    globals.push(root_rot * local[0]);
    for k in 1..j {
        let p = skel.parents()[k];
        let gp = globals[p];
        positions.push(positions[p] + gp * (skel.offsets()[k] * scale));
        globals.push(gp * local[k]);
    }
    FkOutput { positions, globals }
}

pub fn fk(skel: &Skeleton, pose: &Pose) -> Result<Vec<Vector3<f64>>> {
    fk_scaled(skel, pose, 1.0)
}

pub fn fk_scaled(skel: &Skeleton, pose: &Pose, scale: f64) -> Result<Vec<Vector3<f64>>> {
    fk_full(skel, pose, scale).map(|o| o.positions)
}

pub fn fk_full(skel: &Skeleton, pose: &Pose, scale: f64) -> Result<FkOutput> {
    if pose.local_rot.len() != skel.num_joints() {
        return Err(Error::SkeletonMismatch(format!(
            "pose has {} joints, skeleton {}",
            pose.local_rot.len(),
            skel.num_joints()
        )));
    }
    let local = pose.local_matrices()?;
    let root = pose.root_rot.to_matrix()?;
    Ok(fk_matrices(skel, pose.root_pos(), &root, &local, scale))
}

/// Heading-only rotation of a head orientation.
pub fn heading(head_rot: &Matrix3<f64>) -> Matrix3<f64> {
    rot_y(yaw_of(head_rot))
}

/// Root position that puts joint `anchor` at `target` for the given
/// rotations.
pub fn anchored_root(
    skel: &Skeleton,
    root_rot: &Matrix3<f64>,
    local: &[Matrix3<f64>],
    scale: f64,
    anchor: usize,
    target: Vector3<f64>,
) -> Vector3<f64> {
    let out = fk_matrices(skel, Vector3::zeros(), root_rot, local, scale);
    target - out.positions[anchor]
}

/// Re-expresses `pose` with its root rotation replaced by the heading of
/// `head_rot` and its root translated so joint `anchor` lands on `target`.
/// World joint rotations are unchanged, so for a pose whose anchor joint
/// already sits at `target` the world joint positions are too.
pub fn reanchor(
    skel: &Skeleton,
    pose: &Pose,
    scale: f64,
    head_rot: &Matrix3<f64>,
    anchor: usize,
    target: Vector3<f64>,
) -> Result<Pose> {
    let yaw = heading(head_rot);
    let mut local = pose.local_matrices()?;
    local[0] = yaw.transpose() * pose.root_rot.to_matrix()? * local[0];
    let root = anchored_root(skel, &yaw, &local, scale, anchor, target);
    Ok(Pose {
        local_rot: local.iter().map(Rot6D::from_matrix).collect(),
        root_pos: [root.x as f32, root.y as f32, root.z as f32],
        root_rot: Rot6D::from_matrix(&yaw),
    })
}

/// Root transform and body scale for one frame of a differentiable FK.
///
/// Without an anchor `pos` is the root position; with one it is where the
/// anchor joint must land.
#[derive(Debug, Clone, Copy)]
pub struct RootFrame {
    pub pos: Vector3<f64>,
    pub rot: Matrix3<f64>,
    pub scale: f64,
}

/// Graph op: `[F * J, 9]` local rotation matrices (column-major rows, see
/// [`matrix_to_row9`]) to `[F * J, 3]` world joint positions.
pub struct FkOp {
    parents: Vec<usize>,
    offsets: Vec<Vector3<f64>>,
    frames: Vec<RootFrame>,
    anchor: Option<usize>,
}

impl FkOp {
    pub fn new(skel: &Skeleton, frames: Vec<RootFrame>) -> Self {
        Self {
            parents: skel.parents().to_vec(),
            offsets: skel.offsets().to_vec(),
            frames,
            anchor: None,
        }
    }

    /// FK whose root is placed so joint `anchor` lands on each frame's `pos`.
    pub fn anchored(skel: &Skeleton, frames: Vec<RootFrame>, anchor: usize) -> Self {
        Self {
            anchor: Some(anchor),
            ..Self::new(skel, frames)
        }
    }

    fn joints(&self) -> usize {
        self.parents.len()
    }

    fn check<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        if x.cols() != 9 || x.rows() != self.frames.len() * self.joints() {
            return Err(Error::Shape {
                op: "fk",
                lhs: x.shape().to_vec(),
                rhs: vec![self.frames.len() * self.joints(), 9],
            });
        }
        Ok(())
    }

    fn frame_forward<T: Scalar>(&self, x: &Tensor<T>, f: usize) -> (Vec<Matrix3<f64>>, FkOutput) {
        let j = self.joints();
        let local: Vec<Matrix3<f64>> = (0..j)
            .map(|k| {
                let row: Vec<f64> = x.row(f * j + k).iter().map(|v| v.as_f64()).collect();
                row9_to_matrix(&row)
            })
            .collect();
        let fr = &self.frames[f];
        let mut positions = Vec::with_capacity(j);
        let mut globals = Vec::with_capacity(j);
        positions.push(if self.anchor.is_some() { Vector3::zeros() } else { fr.pos });
        globals.push(fr.rot * local[0]);
        for k in 1..j {
            let p = self.parents[k];
            let gp = globals[p];
            positions.push(positions[p] + gp * (self.offsets[k] * fr.scale));
            globals.push(gp * local[k]);
        }
        if let Some(a) = self.anchor {
            let shift = fr.pos - positions[a];
            for p in positions.iter_mut() {
                *p += shift;
            }
        }
        (local, FkOutput { positions, globals })
    }
}

impl<T: Scalar> CustomOp<T> for FkOp {
    fn name(&self) -> &'static str {
        "fk"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let x = inputs[0];
        self.check(x)?;
        let mut out = Vec::with_capacity(x.rows() * 3);
        for f in 0..self.frames.len() {
            let (_, o) = self.frame_forward(x, f);
            for p in &o.positions {
                out.extend(p.iter().map(|&v| T::from_f64(v)));
            }
        }
        Tensor::new([x.rows(), 3], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let j = self.joints();
        let mut gx = Tensor::zeros(x.shape().to_vec());
        for f in 0..self.frames.len() {
            let (local, o) = self.frame_forward(x, f);
            let mut gpos: Vec<Vector3<f64>> = (0..j)
                .map(|k| {
                    let g = grad.row(f * j + k);
                    Vector3::new(g[0].as_f64(), g[1].as_f64(), g[2].as_f64())
                })
                .collect();
            if let Some(a) = self.anchor {
                // every output moves with -p_anchor
                let total: Vector3<f64> = gpos.iter().sum();
                gpos[a] -= total;
            }
            let mut gglob = vec![Matrix3::<f64>::zeros(); j];
            let mut glocal = vec![Matrix3::<f64>::zeros(); j];
            // children have larger indices than parents: one reverse sweep
            for k in (1..j).rev() {
                let p = self.parents[k];
                let gp = o.globals[p];
                glocal[k] = gp.transpose() * gglob[k];
                let off = self.offsets[k] * self.frames[f].scale;
                let carried_rot = gglob[k] * local[k].transpose() + gpos[k] * off.transpose();
                gglob[p] += carried_rot;
                let carried = gpos[k];
                gpos[p] += carried;
            }
            glocal[0] = self.frames[f].rot.transpose() * gglob[0];
            for k in 0..j {
                let row = matrix_to_row9(&glocal[k]);
                for (o, &v) in gx.row_mut(f * j + k).iter_mut().zip(&row) {
                    *o = T::from_f64(v);
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}
