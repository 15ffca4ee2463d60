//! Residual pose network: predicts a 6D offset per joint from the 3-point
//! input, the synthesized pose and the point-cloud global feature.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kinematics::rot6d::gram_schmidt;
use crate::optim::{glorot_with_fans, Bound, ParamId, ParamStore};
use crate::sensor::motion::X_DIM;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MpeConfig {
    pub joints: usize,
    pub feature_dim: usize,
    pub hidden: usize,
}

impl MpeConfig {
    pub fn new(joints: usize) -> Self {
        Self {
            joints,
            feature_dim: 128,
            hidden: 256,
        }
    }

    pub fn pose_dim(&self) -> usize {
        self.joints * 6
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    in_x: ParamId,
    in_y: ParamId,
    in_f: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

const NAMES: [&str; 8] = [
    "mpe.fc1.x",
    "mpe.fc1.pose",
    "mpe.fc1.feature",
    "mpe.fc1.bias",
    "mpe.fc2.weight",
    "mpe.fc2.bias",
    "mpe.out.weight",
    "mpe.out.bias",
];

#[derive(Debug, Clone)]
pub struct MpeNet<T: Scalar = f32> {
    pub config: MpeConfig,
    pub params: ParamStore<T>,
    ids: Ids,
}

impl<T: Scalar> MpeNet<T> {
    /// Glorot hidden layers; the output layer starts at zero so the initial
    /// offset is exactly zero.
    pub fn init(config: MpeConfig, rng: &mut impl Rng) -> Self {
        let (h, d, fd) = (config.hidden, config.pose_dim(), config.feature_dim);
        let fan_in = X_DIM + d + fd;
        let mut p = ParamStore::new();
        let ids = Ids {
            in_x: p.add(NAMES[0], glorot_with_fans(X_DIM, h, fan_in, h, rng)),
            in_y: p.add(NAMES[1], glorot_with_fans(d, h, fan_in, h, rng)),
            in_f: p.add(NAMES[2], glorot_with_fans(fd, h, fan_in, h, rng)),
            b1: p.add(NAMES[3], Tensor::zeros([1, h])),
            w2: p.add(NAMES[4], glorot_with_fans(h, h, h, h, rng)),
            b2: p.add(NAMES[5], Tensor::zeros([1, h])),
            w3: p.add(NAMES[6], Tensor::zeros([h, d])),
            b3: p.add(NAMES[7], Tensor::zeros([1, d])),
        };
        Self {
            config,
            params: p,
            ids,
        }
    }

    pub fn from_params(config: MpeConfig, params: ParamStore<T>) -> Result<Self> {
        let shell = MpeNet::<T>::init(config, &mut rand::rngs::mock::StepRng::new(0, 0));
        let mut ordered = ParamStore::new();
        for (name, expect) in shell.params.iter() {
            let id = params
                .find(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            let t = params.get(id);
            if t.shape() != expect.shape() {
                return Err(Error::Shape {
                    op: "mpe parameters",
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

    pub fn cast<U: Scalar>(&self) -> MpeNet<U> {
        MpeNet {
            config: self.config,
            params: self.params.cast(),
            ids: self.ids,
        }
    }

    /// Sets the output layer to zero.
    pub fn zero_output(&mut self) {
        for id in [self.ids.w3, self.ids.b3] {
            for v in self.params.get_mut(id).data_mut() {
                *v = T::zero();
            }
        }
    }

    /// Offsets `[F, J * 6]` from `x: [F, 54]`, `y: [F, J * 6]` and an optional
    /// feature `[F, feature_dim]` (absent when no point-cloud branch exists).
    pub fn build(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: NodeId,
        y: NodeId,
        f: Option<NodeId>,
    ) -> Result<NodeId> {
        let d = self.config.pose_dim();
        if g.value(y).cols() != d || g.value(x).cols() != X_DIM {
            return Err(Error::Shape {
                op: "mpe input",
                lhs: vec![g.value(x).cols(), g.value(y).cols()],
                rhs: vec![X_DIM, d],
            });
        }
        let id = &self.ids;
        let hx = g.matmul(x, b.node(id.in_x))?;
        let hy = g.matmul(y, b.node(id.in_y))?;
        let mut h = g.add(hx, hy)?;
        if let Some(f) = f {
            let hf = g.matmul(f, b.node(id.in_f))?;
            h = g.add(h, hf)?;
        }
        let h = g.add_row(h, b.node(id.b1))?;
        let h = g.relu(h)?;
        let h = g.matmul(h, b.node(id.w2))?;
        let h = g.add_row(h, b.node(id.b2))?;
        let h = g.relu(h)?;
        let o = g.matmul(h, b.node(id.w3))?;
        g.add_row(o, b.node(id.b3))
    }
}

impl MpeNet<f32> {
    /// Offset for one frame.
    pub fn forward(&self, x: &[f32; X_DIM], y: &[f32], f: Option<&[f32]>) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g)?;
        let xn = g.constant(Tensor::new([1, X_DIM], x.to_vec())?)?;
        let yn = g.constant(Tensor::new([1, y.len()], y.to_vec())?)?;
        let fnode = match f {
            Some(f) => Some(g.constant(Tensor::new([1, f.len()], f.to_vec())?)?),
            None => None,
        };
        let o = self.build(&mut g, &b, xn, yn, fnode)?;
        Ok(g.value(o).data().to_vec())
    }
}

/// `z = y + offset` per component, each joint then re-orthonormalized;
/// returns the normalized 6D values.
pub fn apply_offset(y: &[f32], offset: &[f32]) -> Result<Vec<f32>> {
    if y.len() != offset.len() || y.len() % 6 != 0 {
        return Err(Error::Shape {
            op: "apply_offset",
            lhs: vec![y.len()],
            rhs: vec![offset.len()],
        });
    }
    let mut out = Vec::with_capacity(y.len());
    for (a, b) in y.chunks(6).zip(offset.chunks(6)) {
        let v: [f64; 6] = std::array::from_fn(|k| a[k] as f64 + b[k] as f64);
        let (m, _) = gram_schmidt(&v)?;
        for c in 0..2 {
            for r in 0..3 {
                out.push(m[(r, c)] as f32);
            }
        }
    }
    Ok(out)
}
