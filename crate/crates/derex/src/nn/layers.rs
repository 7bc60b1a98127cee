//! Layer vocabulary (linear, conv2d, batchnorm, tanh recurrent cell, relu,
//! flatten), sequential models over the graph engine, SGD, and a
//! finite-difference gradient checker.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{GradStore, Graph, NnError, NodeId, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Linear { input: usize, output: usize },
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, in_h: usize, in_w: usize },
    BatchNorm { dim: usize, affine_trainable: bool },
    TanhRnnCell { input: usize, hidden: usize },
    Relu,
    Flatten,
}

/// Named parameter array. Non-trainable arrays (batchnorm running
/// statistics) are bound to graphs as constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    arrays: BTreeMap<String, ParamArray>,
    pub seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { arrays: BTreeMap::new(), seed }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, trainable: bool) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.to_string(), ParamArray { shape, data, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&ParamArray, NnError> {
        self.arrays.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamArray, NnError> {
        self.arrays.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamArray)> {
        self.arrays.iter()
    }

    pub fn assert_finite(&self) -> Result<(), NnError> {
        for (name, arr) in &self.arrays {
            if arr.data.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFinite(name.clone()));
            }
        }
        Ok(())
    }

    /// Bind an array into a graph: parameter node when trainable, constant
    /// otherwise.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<NodeId, NnError> {
        let arr = self.get(name)?;
        if arr.trainable {
            Ok(g.param(name, arr.shape.clone(), arr.data.clone()))
        } else {
            Ok(g.leaf_from(arr.shape.clone(), arr.data.clone()))
        }
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let lim = (1.0 / fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-lim..lim)).collect()
}

/// Sequential stack of layers with a parameter name prefix.
#[derive(Debug, Clone)]
pub struct Model {
    pub prefix: String,
    pub layers: Vec<LayerSpec>,
}

impl Model {
    pub fn new(prefix: &str, layers: Vec<LayerSpec>) -> Self {
        Self { prefix: prefix.to_string(), layers }
    }

    fn name(&self, idx: usize, part: &str) -> String {
        format!("{}.{}.{}", self.prefix, idx, part)
    }

    /// Initialize all parameters with the store's seed (uniform
    /// +-sqrt(1/fan_in), batchnorm at identity).
    pub fn init_params(&self, store: &mut ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(store.seed.wrapping_add(hash_prefix(&self.prefix)));
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Linear { input, output } => {
                    store.insert(
                        &self.name(i, "w"),
                        vec![*input, *output],
                        uniform_init(&mut rng, input * output, *input),
                        true,
                    );
                    store.insert(&self.name(i, "b"), vec![*output], vec![0.0; *output], true);
                }
                LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => {
                    let fan_in = in_ch * kernel * kernel;
                    store.insert(
                        &self.name(i, "w"),
                        vec![*out_ch, *in_ch, *kernel, *kernel],
                        uniform_init(&mut rng, out_ch * in_ch * kernel * kernel, fan_in),
                        true,
                    );
                    store.insert(&self.name(i, "b"), vec![*out_ch], vec![0.0; *out_ch], true);
                }
                LayerSpec::BatchNorm { dim, affine_trainable } => {
                    store.insert(&self.name(i, "gamma"), vec![*dim], vec![1.0; *dim], *affine_trainable);
                    store.insert(&self.name(i, "beta"), vec![*dim], vec![0.0; *dim], *affine_trainable);
                    store.insert(&self.name(i, "rmean"), vec![*dim], vec![0.0; *dim], false);
                    store.insert(&self.name(i, "rvar"), vec![*dim], vec![1.0; *dim], false);
                }
                LayerSpec::TanhRnnCell { input, hidden } => {
                    store.insert(
                        &self.name(i, "wx"),
                        vec![*input, *hidden],
                        uniform_init(&mut rng, input * hidden, *input),
                        true,
                    );
                    store.insert(
                        &self.name(i, "wh"),
                        vec![*hidden, *hidden],
                        uniform_init(&mut rng, hidden * hidden, *hidden),
                        true,
                    );
                    store.insert(&self.name(i, "b"), vec![*hidden], vec![0.0; *hidden], true);
                }
                LayerSpec::Relu | LayerSpec::Flatten => {}
            }
        }
    }

    /// Forward through the stack. Train mode uses batch statistics in
    /// batchnorm layers and updates the running statistics in `store`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        input: NodeId,
        mode: Mode,
    ) -> Result<NodeId, NnError> {
        let mut cur = input;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Linear { .. } => {
                    let w = store.bind(g, &self.name(i, "w"))?;
                    let b = store.bind(g, &self.name(i, "b"))?;
                    let y = g.matmul(cur, w)?;
                    g.add_bias(y, b)?
                }
                LayerSpec::Conv2d { stride, .. } => {
                    let w = store.bind(g, &self.name(i, "w"))?;
                    let b = store.bind(g, &self.name(i, "b"))?;
                    g.conv2d(cur, w, b, *stride)?
                }
                LayerSpec::BatchNorm { .. } => {
                    let gamma = store.bind(g, &self.name(i, "gamma"))?;
                    let beta = store.bind(g, &self.name(i, "beta"))?;
                    match mode {
                        Mode::Train => {
                            let (y, mu, var) = g.batchnorm_train(cur, gamma, beta, BN_EPS)?;
                            let rm = store.get_mut(&self.name(i, "rmean"))?;
                            for (r, m) in rm.data.iter_mut().zip(&mu) {
                                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                            }
                            let rv = store.get_mut(&self.name(i, "rvar"))?;
                            for (r, v) in rv.data.iter_mut().zip(&var) {
                                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                            }
                            y
                        }
                        Mode::Eval => {
                            let mean = store.get(&self.name(i, "rmean"))?.data.clone();
                            let var = store.get(&self.name(i, "rvar"))?.data.clone();
                            g.batchnorm_eval(cur, gamma, beta, BN_EPS, &mean, &var)?
                        }
                    }
                }
                LayerSpec::TanhRnnCell { hidden, .. } => {
                    // zero initial hidden state when used inside a plain stack
                    let b = g.shape(cur)[0];
                    let h0 = g.leaf_from(vec![b, *hidden], vec![0.0; b * hidden]);
                    tanh_rnn_step(g, store, &format!("{}.{}", self.prefix, i), cur, h0)?
                }
                LayerSpec::Relu => g.relu(cur),
                LayerSpec::Flatten => {
                    let shape = g.shape(cur).to_vec();
                    let b = shape[0];
                    let rest: usize = shape[1..].iter().product();
                    g.reshape(cur, vec![b, rest])?
                }
            };
            if g.value(cur).iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFinite(format!("{} layer {} ({:?})", self.prefix, i, layer)));
            }
        }
        Ok(cur)
    }

    /// Forward pass returning a plain tensor.
    pub fn forward(
        &self,
        store: &mut ParamStore,
        batch: &Tensor,
        mode: Mode,
    ) -> Result<Tensor, NnError> {
        let mut g = Graph::new();
        let input = g.leaf(batch);
        let out = self.forward_graph(&mut g, store, input, mode)?;
        Ok(g.tensor_of(out))
    }

    /// Forward then reverse sweep seeded with `upstream_grad` at the output.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        batch: &Tensor,
        upstream_grad: &Tensor,
        mode: Mode,
    ) -> Result<GradStore, NnError> {
        let mut g = Graph::new();
        let input = g.leaf(batch);
        let out = self.forward_graph(&mut g, store, input, mode)?;
        g.backward_seeded(out, &upstream_grad.data)
    }

    pub fn output_dim(&self) -> Option<usize> {
        for layer in self.layers.iter().rev() {
            match layer {
                LayerSpec::Linear { output, .. } => return Some(*output),
                LayerSpec::BatchNorm { dim, .. } => return Some(*dim),
                LayerSpec::TanhRnnCell { hidden, .. } => return Some(*hidden),
                _ => continue,
            }
        }
        None
    }
}

fn hash_prefix(prefix: &str) -> u64 {
    // stable tiny FNV-1a so different models under one seed get distinct streams
    let mut h: u64 = 0xcbf29ce484222325;
    for b in prefix.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One step of the tanh recurrent cell: `tanh(x Wx + h Wh + b)`.
/// `prefix` must name a `TanhRnnCell` layer's parameters.
pub fn tanh_rnn_step(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    h: NodeId,
) -> Result<NodeId, NnError> {
    let wx = store.bind(g, &format!("{prefix}.wx"))?;
    let wh = store.bind(g, &format!("{prefix}.wh"))?;
    let b = store.bind(g, &format!("{prefix}.b"))?;
    let xin = g.matmul(x, wx)?;
    let hin = g.matmul(h, wh)?;
    let pre = g.add(xin, hin)?;
    let pre = g.add_bias(pre, b)?;
    Ok(g.tanh(pre))
}

/// Plain SGD with optional momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore) -> Result<(), NnError> {
        for (name, grad) in grads {
            let arr = store.get_mut(name)?;
            if !arr.trainable {
                continue;
            }
            let vel = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for ((p, v), gi) in arr.data.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = self.momentum * *v + gi;
                *p -= self.lr * *v;
            }
        }
        Ok(())
    }
}

/// Max over trainable parameter entries of
/// `|analytic - central difference| / max(1, |analytic|)`.
///
/// `build_loss` must construct the scalar loss from scratch; it receives a
/// clone of the store each evaluation so side effects (batchnorm running
/// statistics) cannot leak between evaluations.
pub fn grad_check<F>(store: &ParamStore, build_loss: F, h: f64) -> Result<f64, NnError>
where
    F: Fn(&mut Graph, &mut ParamStore) -> Result<NodeId, NnError>,
{
    let analytic = {
        let mut g = Graph::new();
        let mut s = store.clone();
        let loss = build_loss(&mut g, &mut s)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64, NnError> {
        let mut g = Graph::new();
        let mut s = s.clone();
        let loss = build_loss(&mut g, &mut s)?;
        Ok(g.value(loss)[0])
    };
    let mut worst = 0.0f64;
    for (name, arr) in store.iter() {
        if !arr.trainable {
            continue;
        }
        for i in 0..arr.data.len() {
            let a = analytic.get(name).map(|g| g[i]).unwrap_or(0.0);
            let mut plus = store.clone();
            plus.get_mut(name)?.data[i] += h;
            let mut minus = store.clone();
            minus.get_mut(name)?.data[i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
