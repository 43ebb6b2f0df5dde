//! Named parameter store and per-forward binding onto a tape.
//!
//! Parameters are created on first use, seeded from (store seed, name hash),
//! so initialization does not depend on forward-pass order.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Centered uniform with fan-in variance scaling.
    FanIn { fan_in: usize },
    Zeros,
    Ones,
}

/// All model parameters, keyed by dotted names ("encoder.qpe.stem.w", ...).
/// BTreeMap keeps iteration (and therefore optimizer updates and
/// checkpoints) deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn from_tensors(seed: u64, params: BTreeMap<String, Tensor>) -> Self {
        ParamStore { seed, params }
    }

    pub fn get_or_create(&mut self, name: &str, shape: &[usize], init: Init) -> &Tensor {
        if !self.params.contains_key(name) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanIn { fan_in } => {
                    let bound = (3.0 / fan_in as f64).sqrt();
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
            };
            self.params
                .insert(name.to_string(), Tensor::new(shape.to_vec(), data));
        }
        let t = &self.params[name];
        assert_eq!(t.shape, shape, "parameter '{name}' bound with conflicting shape");
        t
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameter counts grouped by top-level name prefix.
    pub fn counts_by_prefix(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.params {
            let prefix = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(prefix).or_insert(0) += t.numel();
        }
        out
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }
}

/// One forward pass: owns the tape, binds parameters as leaves on demand,
/// and hands out per-call dropout seeds.
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a mut ParamStore,
    bound: HashMap<String, Var>,
    trainable: bool,
    pub dropout_p: f64,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a mut ParamStore, train: bool, dropout_p: f64, dropout_seed: u64) -> Self {
        Forward {
            tape: Tape::new().train_mode(train),
            store,
            bound: HashMap::new(),
            trainable: train,
            dropout_p,
            dropout_seed,
            dropout_calls: 0,
        }
    }

    /// Eval-mode forward with no dropout.
    pub fn eval(store: &'a mut ParamStore) -> Self {
        Self::new(store, false, 0.0, 0)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self.store.get_or_create(name, shape, init).clone();
        let v = self.tape.leaf(t, self.trainable);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let seed = self
            .dropout_seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(self.dropout_calls);
        self.dropout_calls += 1;
        self.tape.dropout(x, self.dropout_p, seed)
    }

    /// Gradients of all bound parameters after a backward pass.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if let Some(g) = self.tape.grad(v) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }

    pub fn bound_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.bound.keys().cloned().collect();
        names.sort();
        names
    }
}
