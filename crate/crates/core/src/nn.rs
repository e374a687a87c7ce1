//! Named parameter storage and the small layer vocabulary shared by the
//! encoders and the fusion stack.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "ParamStore::set shape");
        self.values[id.0] = value;
    }
}

/// A tape bound to a parameter store. Parameters become tape leaves the
/// first time a layer asks for them.
pub struct Graph<'a> {
    tape: Tape,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.tape.constant(value)
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    /// Parameters read during this forward pass.
    pub fn touched(&self) -> Vec<ParamId> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.map(|_| ParamId(i)))
            .collect()
    }

    /// Gradient of `loss` for every parameter in the store; parameters
    /// the loss does not depend on get zeros.
    pub fn param_grads(&self, loss: Var) -> Vec<Mat> {
        let mut grads = self.tape.backward(loss);
        self.params
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| {
                        let (r, c) = self.params.get(id).shape();
                        Mat::zeros(r, c)
                    })
            })
            .collect()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Registers freshly initialized parameters.
pub struct Init<'s> {
    pub store: &'s mut ParamStore,
    pub rng: &'s mut ChaCha8Rng,
}

impl Init<'_> {
    /// U(−1/√fan_in, 1/√fan_in)
    pub fn uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let m = Mat::from_fn(rows, cols, |_, _| self.rng.random_range(-bound..bound));
        self.store.add(name, m)
    }

    pub fn constant(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Mat::filled(rows, cols, value))
    }
}

/// Per-token map from width `in_dim` to `out_dim`.
pub trait TokenMap {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn apply(&self, g: &mut Graph, x: Var) -> Var;
}

/// `x · W + b`, with `W` stored in×out.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = init.uniform(format!("{name}.weight"), in_dim, out_dim, in_dim);
        let b = init.uniform(format!("{name}.bias"), 1, out_dim, in_dim);
        Self { w, b, in_dim, out_dim }
    }
}

impl TokenMap for Affine {
    fn in_dim(&self) -> usize {
        self.in_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.constant(format!("{name}.gamma"), 1, dim, 1.0),
            beta: init.constant(format!("{name}.beta"), 1, dim, 0.0),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Affine → LayerNorm → GELU → Affine.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Affine,
    pub norm: LayerNorm,
    pub fc2: Affine,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            fc1: Affine::new(init, &format!("{name}.fc1"), in_dim, hidden),
            norm: LayerNorm::new(init, &format!("{name}.norm"), hidden),
            fc2: Affine::new(init, &format!("{name}.fc2"), hidden, out_dim),
        }
    }
}

impl TokenMap for Mlp {
    fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }
    fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }
    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.apply(g, x);
        let h = self.norm.apply(g, h);
        let h = g.gelu(h);
        self.fc2.apply(g, h)
    }
}
