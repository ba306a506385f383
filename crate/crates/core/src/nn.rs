//! Named parameter storage shared by the vision encoder, LM, projection and
//! mask decoder, plus per-forward leaf construction and initializers.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use ndarray::{Array, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

/// All model parameters, keyed by a dotted path (e.g. `lm.block0.attn.wq`).
/// Deterministic iteration order (BTreeMap) keeps checkpoints and gradient
/// reductions reproducible.
#[derive(Clone, Debug)]
pub struct ParamStore<F: Scalar> {
    map: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn set(&mut self, name: &str, value: ArrayD<F>) {
        let slot = self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        *slot = value;
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<F>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Convert element type (used to run gradient checks at f64 on a model
    /// built or loaded at f32).
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (k, v) in &self.map {
            out.insert(k.clone(), v.mapv(|x| G::c(x.as_f64())));
        }
        out
    }

    /// Wrap every parameter as a graph leaf; names in `trainable` get
    /// gradients, the rest are frozen constants for this pass.
    pub fn leaves(&self, trainable: &BTreeSet<String>) -> Leaves<F> {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::leaf(v.clone(), trainable.contains(k))))
            .collect();
        Leaves { map }
    }

    /// All parameters frozen (pure inference pass).
    pub fn frozen_leaves(&self) -> Leaves<F> {
        self.leaves(&BTreeSet::new())
    }
}

/// Per-forward-pass view of the parameters as graph leaves.
pub struct Leaves<F: Scalar> {
    map: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Leaves<F> {
    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Gradients accumulated by a backward sweep, keyed by parameter name.
    /// Parameters that never received a gradient are omitted.
    pub fn grads(&self) -> BTreeMap<String, ArrayD<F>> {
        self.map
            .iter()
            .filter_map(|(k, t)| t.grad().map(|g| (k.clone(), g)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

pub fn normal<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<F> {
    // Box-Muller; avoids a distribution-crate dependency and keeps the byte
    // stream identical across f32/f64 instantiations.
    Array::from_shape_simple_fn(IxDyn(shape), || {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        F::c(z * std)
    })
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::ones(IxDyn(shape))
}

/// y = x W^T + b for parameter pair (`name.w` (out,in), `name.b` (out)).
pub fn linear<F: Scalar>(leaves: &Leaves<F>, name: &str, x: &Tensor<F>) -> Tensor<F> {
    let w = leaves.get(&format!("{name}.w"));
    let b = leaves.get(&format!("{name}.b"));
    x.matmul(&w.t2()).add_row(b)
}
