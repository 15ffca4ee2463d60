//! Named parameter storage, Glorot initialization and the Adam optimizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Copies every tensor into `graph` as a variable, indexed like the store.
    pub fn bind(&self, graph: &mut Graph<T>) -> Result<Bound> {
        let nodes = self
            .tensors
            .iter()
            .map(|t| graph.variable(t.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { nodes })
    }

    /// Same as [`bind`](Self::bind) but as constants: no gradients flow.
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> Result<Bound> {
        let nodes = self
            .tensors
            .iter()
            .map(|t| graph.constant(t.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { nodes })
    }

    /// Gradients for every parameter after `graph.backward`; zeros where the
    /// loss did not depend on a parameter.
    pub fn gradients(&self, graph: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(&bound.nodes)
            .map(|(t, &n)| {
                graph
                    .grad(n)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }

    /// CRC32 over names, shapes and value bits.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Graph nodes for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// Glorot-uniform `[fan_in, fan_out]` weight matrix.
pub fn glorot<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    glorot_with_fans(fan_in, fan_out, fan_in, fan_out, rng)
}

/// Glorot-uniform block of shape `[rows, cols]` whose bound comes from the
/// fans of the full layer it belongs to.
pub fn glorot_with_fans<T: Scalar>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn([rows, cols], |_| T::from_f64(rng.gen_range(-limit..limit)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |t: &Tensor<T>| Tensor::zeros(t.shape().to_vec());
        Self {
            step: 0,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = &grads[k];
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gf = gv.as_f64();
            let mf = b1 * mv.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vv.as_f64() + (1.0 - b2) * gf * gf;
            *mv = T::from_f64(mf);
            *vv = T::from_f64(vf);
            let update = cfg.lr * (mf / c1) / ((vf / c2).sqrt() + cfg.eps);
            *pv = T::from_f64(pv.as_f64() - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param(v: f32) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.add("w", Tensor::full([1, 1], v));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = one_param(2.0);
        let cfg = AdamConfig::default();
        let mut fresh = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros([1, 1])], &mut fresh, &cfg).unwrap();
        assert_eq!(p.get(ParamId(0)).data()[0], 2.0);

        // warm moments shrink geometrically under a zero gradient
        let mut st = AdamState::new(&p);
        st.m[0] = Tensor::full([1, 1], 0.5);
        st.v[0] = Tensor::full([1, 1], 0.25);
        let mut q = one_param(2.0);
        adam_step(&mut q, &[Tensor::zeros([1, 1])], &mut st, &cfg).unwrap();
        assert!((st.m[0].data()[0] - 0.45).abs() < 1e-7);
        assert!((st.v[0].data()[0] - 0.24975).abs() < 1e-7);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        for g in [-3.0f32, 0.01, 7.0] {
            let mut p = one_param(1.0);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &[Tensor::full([1, 1], g)], &mut st, &AdamConfig::default()).unwrap();
            let moved = p.get(ParamId(0)).data()[0] - 1.0;
            assert_eq!(moved.signum(), -g.signum());
            // a bias-corrected first step has magnitude ~lr
            assert!((moved.abs() as f64 - 3e-4).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", Tensor::zeros([1, 1]));
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..Default::default()
        };
        let mut last = 0.0;
        let mut prev = 0.0;
        for _ in 0..5000 {
            adam_step(&mut p, &[Tensor::full([1, 1], 0.37)], &mut st, &cfg).unwrap();
            let now = p.get(ParamId(0)).data()[0];
            last = prev - now;
            prev = now;
        }
        // fixed point: m/c1 -> g, v/c2 -> g^2, step -> lr * g / (|g| + eps)
        let expected = 1e-3 * 0.37 / (0.37 + 1e-8);
        assert!((last - expected).abs() < 1e-9, "{last} vs {expected}");
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: Tensor<f32> = glorot(57, 64, &mut rng);
        let limit = (6.0f32 / 121.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert_eq!(w.shape(), &[57, 64]);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = one_param(1.0);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::zeros([2, 1])], &mut st, &AdamConfig::default());
        assert!(matches!(err, Err(Error::Shape { .. })));
    }
}
