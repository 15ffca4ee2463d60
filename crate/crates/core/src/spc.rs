//! Semantic point-cloud network: a PointNet-style encoder with a max-pooled
//! global feature and a per-point decoder over `J + 1` classes.
//!
//! Per-frame inputs (the 3-point vector, pooled history, global feature) enter
//! each layer through their own weight block, computed once per frame and
//! tiled over the frame's points.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::{glorot_with_fans, Bound, ParamId, ParamStore};
use crate::sensor::motion::X_DIM;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpcConfig {
    pub points: usize,
    pub classes: usize,
    pub enc_hidden: usize,
    pub global_dim: usize,
    pub dec_hidden: usize,
}

impl SpcConfig {
    pub fn new(joints: usize, points: usize) -> Self {
        Self {
            points,
            classes: joints + 1,
            enc_hidden: 64,
            global_dim: 128,
            dec_hidden: 128,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    enc1_p: ParamId,
    enc1_x: ParamId,
    enc1_b: ParamId,
    enc2_w: ParamId,
    enc2_b: ParamId,
    dec1_l: ParamId,
    dec1_g: ParamId,
    dec1_h: ParamId,
    dec1_x: ParamId,
    dec1_b: ParamId,
    dec2_w: ParamId,
    dec2_b: ParamId,
}

const NAMES: [&str; 12] = [
    "spc.enc1.points",
    "spc.enc1.x",
    "spc.enc1.bias",
    "spc.enc2.weight",
    "spc.enc2.bias",
    "spc.dec1.local",
    "spc.dec1.global",
    "spc.dec1.history",
    "spc.dec1.x",
    "spc.dec1.bias",
    "spc.dec2.weight",
    "spc.dec2.bias",
];

#[derive(Debug, Clone)]
pub struct SpcNet<T: Scalar = f32> {
    pub config: SpcConfig,
    pub params: ParamStore<T>,
    ids: Ids,
}

/// Where a frame's pooled history of global features comes from.
pub enum History {
    /// Given directly, `[F, global_dim]`.
    Pool(NodeId),
    /// Running mean over consecutive runs of `len` frames. `prefix[b]` sums the
    /// global features of `counts[b]` earlier frames outside the batch.
    Causal {
        len: usize,
        prefix: NodeId,
        counts: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct SpcNodes {
    pub logits: NodeId,
    pub probs: NodeId,
    pub global: NodeId,
}

/// Per-point class probabilities and the frame's global feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub probs: Tensor<f32>,
    pub global: Vec<f32>,
}

impl Registration {
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.probs.rows())
            .map(|r| {
                let row = self.probs.row(r);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

impl<T: Scalar> SpcNet<T> {
    pub fn init(config: SpcConfig, rng: &mut impl Rng) -> Self {
        let c = config;
        let (h, gd, dh) = (c.enc_hidden, c.global_dim, c.dec_hidden);
        let enc1_in = 3 + X_DIM;
        let dec1_in = 3 * gd + X_DIM;
        let mut p = ParamStore::new();
        let ids = Ids {
            enc1_p: p.add(NAMES[0], glorot_with_fans(3, h, enc1_in, h, rng)),
            enc1_x: p.add(NAMES[1], glorot_with_fans(X_DIM, h, enc1_in, h, rng)),
            enc1_b: p.add(NAMES[2], Tensor::zeros([1, h])),
            enc2_w: p.add(NAMES[3], glorot_with_fans(h, gd, h, gd, rng)),
            enc2_b: p.add(NAMES[4], Tensor::zeros([1, gd])),
            dec1_l: p.add(NAMES[5], glorot_with_fans(gd, dh, dec1_in, dh, rng)),
            dec1_g: p.add(NAMES[6], glorot_with_fans(gd, dh, dec1_in, dh, rng)),
            dec1_h: p.add(NAMES[7], glorot_with_fans(gd, dh, dec1_in, dh, rng)),
            dec1_x: p.add(NAMES[8], glorot_with_fans(X_DIM, dh, dec1_in, dh, rng)),
            dec1_b: p.add(NAMES[9], Tensor::zeros([1, dh])),
            dec2_w: p.add(NAMES[10], glorot_with_fans(dh, c.classes, dh, c.classes, rng)),
            dec2_b: p.add(NAMES[11], Tensor::zeros([1, c.classes])),
        };
        Self {
            config,
            params: p,
            ids,
        }
    }

    /// Rebuilds a network from named tensors, checking every shape.
    pub fn from_params(config: SpcConfig, params: ParamStore<T>) -> Result<Self> {
        let shell = SpcNet::<T>::init(config, &mut rand::rngs::mock::StepRng::new(0, 0));
        let mut ordered = ParamStore::new();
        for (name, expect) in shell.params.iter() {
            let id = params
                .find(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            let t = params.get(id);
            if t.shape() != expect.shape() {
                return Err(Error::Shape {
                    op: "spc parameters",
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

    pub fn cast<U: Scalar>(&self) -> SpcNet<U> {
        SpcNet {
            config: self.config,
            params: self.params.cast(),
            ids: self.ids,
        }
    }

    /// Global features `[F, global_dim]` for `points: [F * P, 3]`, `x: [F, 54]`.
    pub fn encode(&self, g: &mut Graph<T>, b: &Bound, points: NodeId, x: NodeId) -> Result<NodeId> {
        self.encode_inner(g, b, points, x).map(|(_, gl)| gl)
    }

    fn encode_inner(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        points: NodeId,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let p = self.config.points;
        let n_pts = g.value(points).rows();
        let frames = g.value(x).rows();
        if g.value(points).cols() != 3 || n_pts != frames * p {
            return Err(Error::Shape {
                op: "spc points",
                lhs: g.value(points).shape().to_vec(),
                rhs: vec![frames * p, 3],
            });
        }
        let id = &self.ids;
        let a = g.matmul(points, b.node(id.enc1_p))?;
        let fx = g.matmul(x, b.node(id.enc1_x))?;
        let fx = g.add_row(fx, b.node(id.enc1_b))?;
        let fx = g.tile(fx, p)?;
        let h1 = g.add(a, fx)?;
        let h1 = g.relu(h1)?;
        let h2 = g.matmul(h1, b.node(id.enc2_w))?;
        let h2 = g.add_row(h2, b.node(id.enc2_b))?;
        let local = g.relu(h2)?;
        let global = g.max_pool(local, p)?;
        Ok((local, global))
    }

    pub fn build(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        points: NodeId,
        x: NodeId,
        history: History,
    ) -> Result<SpcNodes> {
        let p = self.config.points;
        let id = &self.ids;
        let (local, global) = self.encode_inner(g, b, points, x)?;
        let hist = match history {
            History::Pool(h) => h,
            History::Causal {
                len,
                prefix,
                counts,
            } => g.causal_mean(global, prefix, &counts, len)?,
        };
        let dl = g.matmul(local, b.node(id.dec1_l))?;
        let dg = g.matmul(global, b.node(id.dec1_g))?;
        let dh = g.matmul(hist, b.node(id.dec1_h))?;
        let dx = g.matmul(x, b.node(id.dec1_x))?;
        let frame = g.add(dg, dh)?;
        let frame = g.add(frame, dx)?;
        let frame = g.add_row(frame, b.node(id.dec1_b))?;
        let frame = g.tile(frame, p)?;
        let d1 = g.add(dl, frame)?;
        let d1 = g.relu(d1)?;
        let logits = g.matmul(d1, b.node(id.dec2_w))?;
        let logits = g.add_row(logits, b.node(id.dec2_b))?;
        let probs = g.softmax(logits)?;
        Ok(SpcNodes {
            logits,
            probs,
            global,
        })
    }
}

fn points_tensor<T: Scalar>(clouds: &[&[[f32; 3]]], p: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(clouds.len() * p * 3);
    for c in clouds {
        if c.len() != p {
            return Err(Error::InvalidArgument(format!(
                "cloud has {} points, network expects {p}",
                c.len()
            )));
        }
        for q in c.iter() {
            data.extend(q.iter().map(|&v| T::from_f64(v as f64)));
        }
    }
    Tensor::new([clouds.len() * p, 3], data)
}

fn x_tensor<T: Scalar>(xs: &[[f32; X_DIM]]) -> Tensor<T> {
    Tensor::from_fn([xs.len(), X_DIM], |i| T::from_f64(xs[i / X_DIM][i % X_DIM] as f64))
}

impl SpcNet<f32> {
    /// One frame with an explicit history pool.
    pub fn forward(&self, x: &[f32; X_DIM], cloud: &[[f32; 3]], history: &[f32]) -> Result<Registration> {
        let gd = self.config.global_dim;
        if history.len() != gd {
            return Err(Error::Shape {
                op: "spc history",
                lhs: vec![history.len()],
                rhs: vec![gd],
            });
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g)?;
        let pts = g.constant(points_tensor(&[cloud], self.config.points)?)?;
        let xn = g.constant(x_tensor(std::slice::from_ref(x)))?;
        let h = g.constant(Tensor::new([1, gd], history.to_vec())?)?;
        let n = self.build(&mut g, &b, pts, xn, History::Pool(h))?;
        Ok(Registration {
            probs: g.value(n.probs).clone(),
            global: g.value(n.global).data().to_vec(),
        })
    }

    /// A whole sequence, frame `t` pooling the global features of frames
    /// `0..t`.
    pub fn sequence(&self, xs: &[[f32; X_DIM]], clouds: &[&[[f32; 3]]]) -> Result<Vec<Registration>> {
        if xs.len() != clouds.len() {
            return Err(Error::InvalidArgument(format!(
                "{} 3-point frames for {} clouds",
                xs.len(),
                clouds.len()
            )));
        }
        let n = xs.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let (p, gd) = (self.config.points, self.config.global_dim);
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g)?;
        let pts = g.constant(points_tensor(clouds, p)?)?;
        let xn = g.constant(x_tensor(xs))?;
        let prefix = g.constant(Tensor::zeros([1, gd]))?;
        let hist = History::Causal {
            len: n,
            prefix,
            counts: vec![0],
        };
        let nodes = self.build(&mut g, &b, pts, xn, hist)?;
        let probs = g.value(nodes.probs);
        let global = g.value(nodes.global);
        Ok((0..n)
            .map(|t| Registration {
                probs: Tensor::new([p, self.config.classes], probs.data()[t * p * self.config.classes..(t + 1) * p * self.config.classes].to_vec())
                    .expect("slice matches shape"),
                global: global.row(t).to_vec(),
            })
            .collect())
    }
}

/// Mean negative log-probability of the true class over all rows.
pub fn ce_loss(probs: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::Shape {
            op: "ce_loss",
            lhs: probs.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut s = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        if l >= probs.cols() {
            return Err(Error::InvalidArgument(format!("label {l} out of range")));
        }
        s -= (probs.at(r, l) as f64).ln();
    }
    Ok(s / labels.len().max(1) as f64)
}
