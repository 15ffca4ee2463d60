//! Continuous 6D rotation representation.
//!
//! Six reals hold the first two columns of a rotation matrix. Gram–Schmidt
//! turns any non-degenerate six-vector back into a proper rotation.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::graph::CustomOp;
use crate::tensor::{Scalar, Tensor};

/// Columns whose norm (or residual norm after projection) falls below this
/// are treated as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D(pub [f32; 6]);

impl Default for Rot6D {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Rot6D {
    pub const IDENTITY: Rot6D = Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Rot6D([
            m[(0, 0)] as f32,
            m[(1, 0)] as f32,
            m[(2, 0)] as f32,
            m[(0, 1)] as f32,
            m[(1, 1)] as f32,
            m[(2, 1)] as f32,
        ])
    }

    pub fn to_matrix(&self) -> Result<Matrix3<f64>> {
        let v = self.0.map(|x| x as f64);
        gram_schmidt(&v).map(|(m, _)| m)
    }

    pub fn as_f64(&self) -> [f64; 6] {
        self.0.map(|x| x as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

pub fn rot6d_to_matrix(r: &Rot6D) -> Result<Matrix3<f64>> {
    r.to_matrix()
}

pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Rot6D {
    Rot6D::from_matrix(m)
}

/// Intermediate quantities of the Gram–Schmidt map, kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct GsCache {
    pub a2: Vector3<f64>,
    pub n1: f64,
    pub n2: f64,
    pub dot: f64,
}

/// Orthonormal frame `[b1 b2 b1×b2]` from a raw six-vector.
pub fn gram_schmidt(v: &[f64; 6]) -> Result<(Matrix3<f64>, GsCache)> {
    let a1 = Vector3::new(v[0], v[1], v[2]);
    let a2 = Vector3::new(v[3], v[4], v[5]);
    let n1 = a1.norm();
    if !(n1 > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotation);
    }
    let b1 = a1 / n1;
    let dot = b1.dot(&a2);
    let u2 = a2 - b1 * dot;
    let n2 = u2.norm();
    if !(n2 > DEGENERATE_EPS * a2.norm().max(1.0)) {
        return Err(Error::DegenerateRotation);
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok((
        Matrix3::from_columns(&[b1, b2, b3]),
        GsCache { a2, n1, n2, dot },
    ))
}

/// Gradient of a loss w.r.t. the raw six-vector given its gradient w.r.t.
/// the three output columns.
pub fn gram_schmidt_backward(m: &Matrix3<f64>, cache: &GsCache, grad: &Matrix3<f64>) -> [f64; 6] {
    let (b1, b2): (Vector3<f64>, Vector3<f64>) = (m.column(0).into(), m.column(1).into());
    let (g1, g2, g3): (Vector3<f64>, Vector3<f64>, Vector3<f64>) =
        (grad.column(0).into(), grad.column(1).into(), grad.column(2).into());
    // b3 = b1 x b2
    let gb1 = g1 + b2.cross(&g3);
    let gb2 = g2 + g3.cross(&b1);
    // b2 = u2 / |u2|
    let gu = (gb2 - b2 * b2.dot(&gb2)) / cache.n2;
    // u2 = a2 - (b1.a2) b1
    let ga2 = gu - b1 * b1.dot(&gu);
    let gb1 = gb1 - cache.a2 * gu.dot(&b1) - gu * cache.dot;
    // b1 = a1 / |a1|
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / cache.n1;
    [ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z]
}

/// Column-major flattening used for `[M, 9]` rotation tensors: entries
/// `0..6` are the normalized 6D representation.
pub fn matrix_to_row9(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for c in 0..3 {
        for r in 0..3 {
            out[c * 3 + r] = m[(r, c)];
        }
    }
    out
}

pub fn row9_to_matrix(v: &[f64]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| v[c * 3 + r])
}

/// Graph op: `[M, 6]` raw six-vectors to `[M, 9]` rotation matrices.
pub struct GramSchmidtOp;

impl<T: Scalar> CustomOp<T> for GramSchmidtOp {
    fn name(&self) -> &'static str {
        "gram_schmidt"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let x = inputs[0];
        if x.cols() != 6 {
            return Err(Error::Shape {
                op: "gram_schmidt",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows(), 6],
            });
        }
        let mut out = Vec::with_capacity(x.rows() * 9);
        for r in 0..x.rows() {
            let v: [f64; 6] = std::array::from_fn(|k| x.row(r)[k].as_f64());
            let (m, _) = gram_schmidt(&v)?;
            out.extend(matrix_to_row9(&m).iter().map(|&e| T::from_f64(e)));
        }
        Tensor::new([x.rows(), 9], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let mut gx = Tensor::zeros(x.shape().to_vec());
        for r in 0..x.rows() {
            let v: [f64; 6] = std::array::from_fn(|k| x.row(r)[k].as_f64());
            let (m, cache) = gram_schmidt(&v)?;
            let g: Vec<f64> = grad.row(r).iter().map(|e| e.as_f64()).collect();
            let gm = row9_to_matrix(&g);
            let ga = gram_schmidt_backward(&m, &cache, &gm);
            for (o, &e) in gx.row_mut(r).iter_mut().zip(&ga) {
                *o = T::from_f64(e);
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Rotation about a unit axis by `angle` radians.
pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    axis_angle(Vector3::x(), a)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    axis_angle(Vector3::y(), a)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    axis_angle(Vector3::z(), a)
}

/// Geodesic angle between two rotations, in `[0, pi]`.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let r = a.transpose() * b;
    // atan2 keeps small angles accurate where acos of the trace does not
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() * 0.5;
    let c = (r.trace() - 1.0) * 0.5;
    s.atan2(c)
}

/// Heading-only rotation (about +y) that best matches `m`'s forward axis.
pub fn yaw_of(m: &Matrix3<f64>) -> f64 {
    let f = m * Vector3::z();
    if f.x.hypot(f.z) > 1e-6 {
        f.x.atan2(f.z)
    } else {
        // looking straight up or down: fall back to the up axis
        let u = m * Vector3::y();
        (-u.x * f.y.signum()).atan2(-u.z * f.y.signum())
    }
}
