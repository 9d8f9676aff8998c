//! Parameter storage, dense layers and the AdamW optimizer shared by both
//! the item tokenizer and the recommender.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, owned parameter tensors of one model component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

/// Serialized form of one parameter tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value.as_standard_layout().into_owned());
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Places every tensor on the tape, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { g.param(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_stored(&self) -> Vec<StoredTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| StoredTensor {
                name: n.clone(),
                shape: v.shape().to_vec(),
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrites values from a stored list; names and shapes must match exactly.
    pub fn load_stored(&mut self, stored: &[StoredTensor]) -> Result<(), String> {
        if stored.len() != self.values.len() {
            return Err(format!("expected {} tensors, found {}", self.values.len(), stored.len()));
        }
        for (i, t) in stored.iter().enumerate() {
            if t.name != self.names[i] {
                return Err(format!("tensor {i}: expected `{}`, found `{}`", self.names[i], t.name));
            }
            if t.shape != self.values[i].shape() {
                return Err(format!("tensor `{}`: shape {:?} != {:?}", t.name, t.shape, self.values[i].shape()));
            }
            self.values[i] = ArrayD::from_shape_vec(IxDyn(&t.shape), t.data.clone())
                .map_err(|e| format!("tensor `{}`: {e}", t.name))?;
        }
        Ok(())
    }
}

/// Tape handles for every tensor of a [`ParamStore`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects gradients in store order; `None` where a tensor was unused.
    pub fn grads(&self, grads: &Gradients) -> Vec<Option<ArrayD<f64>>> {
        self.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

pub fn normal_init<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// Fully connected layer `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        // Glorot-uniform equivalent variance.
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_init(&[in_dim, out_dim], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_dim]))));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p[self.weight], false);
        match self.bias {
            Some(b) => g.add_bias(y, p[b]),
            None => y,
        }
    }
}

/// Feed-forward stack with ReLU between layers (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width from input to output, e.g. `[256, 512, 256, 128]`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }
}

/// Layer-norm gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), ArrayD::ones(IxDyn(&[dim])));
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[dim])));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p[self.gain], p[self.bias], 1e-6)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05, max_grad_norm: 1.0 }
    }
}

/// Decoupled-weight-decay Adam. Decay applies to tensors of rank ≥ 2 only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let first = store.values.iter().map(|v| vec![0.0; v.len()]).collect();
        let second = store.values.iter().map(|v| vec![0.0; v.len()]).collect();
        Self { config, step: 0, first, second }
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<ArrayD<f64>>]) -> f64 {
        assert_eq!(grads.len(), store.values.len(), "one gradient slot per tensor");
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if self.config.max_grad_norm > 0.0 && norm > self.config.max_grad_norm {
            self.config.max_grad_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let value = &mut store.values[i];
            let decay = if value.ndim() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, gi), mi), vi) in value.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= c.lr * (decay * *p + mhat / (vhat.sqrt() + c.eps));
            }
        }
        norm
    }
}
