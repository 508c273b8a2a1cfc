use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Named model parameters, ordered by name so iteration and serialization are
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Uniform Kaiming-style init, `U(-b, b)` with `b = sqrt(6 / fan_in)` for
    /// ReLU layers, or `sqrt(3 / fan_in)` for linear outputs.
    pub fn init_weight(&mut self, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, relu: bool) {
        let gain = if relu { 6.0 } else { 3.0 };
        let bound = (gain / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::from_vec(fan_in, fan_out, data).expect("shape"));
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }
}

/// One forward/backward pass: a fresh [`Graph`] plus lazily bound parameters.
pub struct Session<'a> {
    pub graph: Graph,
    params: &'a ParamStore,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'a> Session<'a> {
    /// Parameters enter the graph as gradient-receiving leaves.
    pub fn train(params: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: HashMap::new(),
            trainable: true,
        }
    }

    /// Parameters enter the graph as constants.
    pub fn eval(params: &'a ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::train(params)
        }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = if self.trainable {
            self.graph.variable(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Backpropagates `loss` and returns gradients of every bound parameter.
    pub fn param_grads(&self, loss: Var) -> BTreeMap<String, Tensor> {
        let grads = self.graph.backward(loss);
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if let Some(g) = grads.get(v) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters with an all-zero gradient and no moment
    /// history are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            if !self.m.contains_key(name) && g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                p.data_mut()[i] -= update;
            }
        }
    }
}
