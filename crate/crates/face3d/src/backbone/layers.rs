//! Parameter store, graph binding and the basic trainable layers.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};

/// Ordered name -> array map holding trainable parameters (or, in a second
/// instance, non-trainable state such as batch-norm running statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &self.values[idx]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &mut self.values[idx]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn value_at(&self, i: usize) -> &ArrayD<f64> {
        &self.values[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut ArrayD<f64> {
        &mut self.values[i]
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Parameters registered into a graph, as leaves (trainable) or constants
/// (frozen inference).
pub struct GraphBinding {
    ids: HashMap<String, TensorId>,
}

impl GraphBinding {
    pub fn trainable(g: &mut Graph, params: &ParamStore) -> Self {
        let ids = params
            .iter()
            .map(|(n, v)| (n.to_string(), g.leaf(v.clone())))
            .collect();
        GraphBinding { ids }
    }

    pub fn frozen(g: &mut Graph, params: &ParamStore) -> Self {
        let ids = params
            .iter()
            .map(|(n, v)| (n.to_string(), g.constant(v.clone())))
            .collect();
        GraphBinding { ids }
    }

    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn ids(&self) -> &HashMap<String, TensorId> {
        &self.ids
    }
}

/// Deterministic initializer shared by all layers.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha20Rng,
}

impl<'a> Init<'a> {
    /// He-style normal init with fan-in scaling.
    fn conv_weight(&mut self, shape: &[usize]) -> ArrayD<f64> {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            self.rng.sample::<f64, _>(rand_distr::StandardNormal) * std
        })
    }

    fn small_weight(&mut self, shape: &[usize], std: f64) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            self.rng.sample::<f64, _>(rand_distr::StandardNormal) * std
        })
    }
}

/// General 2D convolution (kernel > 1x1 or strided).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn register(&self, params: &mut ParamStore, init: &mut Init) {
        params.insert(
            &format!("{}.weight", self.name),
            init.conv_weight(&[self.out_c, self.in_c, self.kernel, self.kernel]),
        );
        if self.bias {
            params.insert(&format!("{}.bias", self.name), ArrayD::zeros(IxDyn(&[self.out_c])));
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &GraphBinding, x: TensorId) -> TensorId {
        let w = b.id(&format!("{}.weight", self.name));
        let bias = self.bias.then(|| b.id(&format!("{}.bias", self.name)));
        g.conv2d(x, w, bias, self.stride, self.pad)
    }
}

/// 1x1 convolution implemented as a channel matmul; optional stride-2
/// spatial subsampling in front (exactly a strided 1x1 convolution).
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    pub bias: bool,
}

impl Conv1x1 {
    pub fn register(&self, params: &mut ParamStore, init: &mut Init) {
        params.insert(
            &format!("{}.weight", self.name),
            init.conv_weight(&[self.out_c, self.in_c, 1, 1]),
        );
        if self.bias {
            params.insert(&format!("{}.bias", self.name), ArrayD::zeros(IxDyn(&[self.out_c])));
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &GraphBinding, x: TensorId) -> TensorId {
        let x = if self.stride > 1 { g.subsample2(x, self.stride) } else { x };
        let shape = g.shape(x).to_vec(); // [C, H, W]
        let (h, w) = (shape[1], shape[2]);
        let flat = g.reshape(x, &[self.in_c, h * w]);
        let wid = b.id(&format!("{}.weight", self.name));
        let wmat = g.reshape(wid, &[self.out_c, self.in_c]);
        let mut y = g.matmul(wmat, flat); // [out_c, H*W]
        if self.bias {
            let bias = b.id(&format!("{}.bias", self.name));
            let bcol = g.reshape(bias, &[self.out_c, 1]);
            y = g.add_bcast(y, bcol);
        }
        g.reshape(y, &[self.out_c, h, w])
    }
}

/// Batch normalization backed by tracked running statistics.
///
/// The normalization constants are the running mean/variance (treated as
/// constants inside a step) with learnable scale and shift; batch statistics
/// update the running values only when requested and only when the spatial
/// extent provides at least two samples per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn register(&self, params: &mut ParamStore, state: &mut ParamStore) {
        params.insert(&format!("{}.gamma", self.name), ArrayD::ones(IxDyn(&[self.channels])));
        params.insert(&format!("{}.beta", self.name), ArrayD::zeros(IxDyn(&[self.channels])));
        state.insert(&format!("{}.mean", self.name), ArrayD::zeros(IxDyn(&[self.channels])));
        state.insert(&format!("{}.var", self.name), ArrayD::ones(IxDyn(&[self.channels])));
    }

    /// Forward on a [C, H, W] tensor. Also records the input id so the
    /// trainer can refresh running statistics after the step.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &GraphBinding,
        state: &GraphBinding,
        x: TensorId,
        bn_inputs: &mut Vec<(String, TensorId)>,
    ) -> TensorId {
        bn_inputs.push((self.name.clone(), x));
        let c = self.channels;
        let mean = state.id(&format!("{}.mean", self.name));
        let var = state.id(&format!("{}.var", self.name));
        let gamma = params.id(&format!("{}.gamma", self.name));
        let beta = params.id(&format!("{}.beta", self.name));

        let mean_c = g.reshape(mean, &[c, 1, 1]);
        let var_c = g.reshape(var, &[c, 1, 1]);
        let eps = g.add_scalar(var_c, BN_EPS);
        let std = g.sqrt(eps);
        let centered = g.sub_bcast(x, mean_c);
        let normalized = g.div_bcast_by(centered, std);
        let gamma_c = g.reshape(gamma, &[c, 1, 1]);
        let beta_c = g.reshape(beta, &[c, 1, 1]);
        let scaled = g.mul_bcast(normalized, gamma_c);
        g.add_bcast(scaled, beta_c)
    }

    /// Update running statistics from an observed activation (no-op when
    /// the per-channel sample count is < 2).
    pub fn update_stats(&self, state: &mut ParamStore, activation: &ArrayD<f64>) {
        let shape = activation.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if h * w < 2 {
            return;
        }
        let count = (h * w) as f64;
        let mean_name = format!("{}.mean", self.name);
        let var_name = format!("{}.var", self.name);
        for ch in 0..c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let v = activation[[ch, y, x]];
                    sum += v;
                    sq += v * v;
                }
            }
            let m = sum / count;
            let var = (sq / count - m * m).max(0.0);
            let rm = &mut state.get_mut(&mean_name)[[ch]];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
            let rv = &mut state.get_mut(&var_name)[[ch]];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var;
        }
    }
}

/// Fully connected layer on a flat vector.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Weight init scale; the coefficient head uses a small one so the
    /// initial prediction starts near the mean face.
    pub weight_std: f64,
}

impl Linear {
    pub fn register(&self, params: &mut ParamStore, init: &mut Init) {
        params.insert(
            &format!("{}.weight", self.name),
            init.small_weight(&[self.out_dim, self.in_dim], self.weight_std),
        );
        params.insert(&format!("{}.bias", self.name), ArrayD::zeros(IxDyn(&[self.out_dim])));
    }

    pub fn forward(&self, g: &mut Graph, b: &GraphBinding, x: TensorId) -> TensorId {
        let w = b.id(&format!("{}.weight", self.name));
        let bias = b.id(&format!("{}.bias", self.name));
        let y = g.matvec(w, x);
        g.add(y, bias)
    }
}

impl Graph {
    /// Broadcast division by a positive tensor (same ndim, 1-dims allowed).
    pub fn div_bcast_by(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let inv = self.recip(b);
        self.mul_bcast(a, inv)
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| 1.0 / x);
        self.custom(
            &[a],
            v,
            Box::new(move |graph, grad| {
                let av = graph.value(a);
                let da = grad / &(av * av);
                vec![(a, -da)]
            }),
        )
    }
}

/// Check a stored parameter set matches a freshly initialized layout.
pub fn check_same_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.names() != got.names() {
        return Err(Error::Config(format!(
            "parameter layout mismatch: expected {} entries, got {}",
            expected.len(),
            got.len()
        )));
    }
    for (name, v) in expected.iter() {
        if got.get(name).shape() != v.shape() {
            return Err(Error::Config(format!(
                "parameter `{name}` shape mismatch: expected {:?}, got {:?}",
                v.shape(),
                got.get(name).shape()
            )));
        }
    }
    Ok(())
}
