//! Low-rank adapters and the trainable-parameter policy.
//!
//! Adapters live in the parameter store under `lora.<base-path>` and are
//! applied as an additive delta on the wrapped weight: W_eff = W + (α/r)·B·A
//! with B zero-initialized, so before the first optimizer step the adapted
//! model is bit-identical to the base model.

use crate::error::{Result, SegError};
use crate::nn::{self, Leaves, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Ablation flag: also adapt the vision backbone's conv weights.
    pub adapt_vision: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            adapt_vision: false,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

fn adapter_names(base: &str) -> (String, String) {
    (format!("lora.{base}.a"), format!("lora.{base}.b"))
}

/// Register an adapter pair for a linear weight `base` of shape (d_out, d_in).
/// A is small-gaussian, B is zero.
pub fn wrap_linear<F: Scalar>(
    store: &mut ParamStore<F>,
    base: &str,
    cfg: &LoraConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let shape = store.get(base).shape().to_vec();
    let (d_out, d_in) = match shape.len() {
        2 => (shape[0], shape[1]),
        // Conv weights are adapted on their (c_out, c_in*kh*kw) matrix view.
        4 => (shape[0], shape[1] * shape[2] * shape[3]),
        n => {
            return Err(SegError::Config(format!(
                "cannot adapt {base}: {n}-d weight"
            )))
        }
    };
    if cfg.rank > d_out.min(d_in) {
        return Err(SegError::Config(format!(
            "lora rank {} exceeds min dim {} of {base}",
            cfg.rank,
            d_out.min(d_in)
        )));
    }
    let (a_name, b_name) = adapter_names(base);
    store.insert(a_name, nn::normal(rng, &[cfg.rank, d_in], 0.02));
    store.insert(b_name, nn::zeros(&[d_out, cfg.rank]));
    Ok(())
}

/// Effective weight for a possibly-adapted parameter; returns the base weight
/// untouched when no adapter is registered.
pub fn effective_weight<F: Scalar>(leaves: &Leaves<F>, base: &str, cfg: &LoraConfig) -> Tensor<F> {
    let w = leaves.get(base).clone();
    let (a_name, b_name) = adapter_names(base);
    if !leaves.contains(&a_name) {
        return w;
    }
    let a = leaves.get(&a_name);
    let b = leaves.get(&b_name);
    let delta = b.matmul(a).scale(F::c(cfg.scale()));
    let shape = w.shape();
    if shape.len() == 2 {
        w.add(&delta)
    } else {
        w.add(&delta.reshape(&shape))
    }
}

/// Trainable-parameter policy: LoRA adapters, mask decoder, token embeddings,
/// LM head and the projection MLP train; the LM base and vision backbone are
/// frozen.
#[derive(Clone, Copy, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct FreezePolicy {
    /// Set by the vision-LoRA ablation; the base backbone stays frozen either way.
    pub vision_lora: bool,
}

impl FreezePolicy {
    pub fn is_trainable(&self, name: &str) -> bool {
        if name.starts_with("lora.vision.") {
            return self.vision_lora;
        }
        name.starts_with("lora.")
            || name.starts_with("dec.")
            || name.starts_with("gamma.")
            || name == "lm.embed_tokens"
            || name == "lm.head"
    }
}

/// Names of all trainable parameters under the policy, plus the total counts.
pub fn trainable_names<F: Scalar>(store: &ParamStore<F>, policy: &FreezePolicy) -> BTreeSet<String> {
    store
        .names()
        .filter(|n| policy.is_trainable(n))
        .cloned()
        .collect()
}

pub fn trainable_fraction<F: Scalar>(store: &ParamStore<F>, policy: &FreezePolicy) -> f64 {
    let total: usize = store.total_elements();
    let trainable: usize = store
        .iter()
        .filter(|(n, _)| policy.is_trainable(n))
        .map(|(_, v)| v.len())
        .sum();
    trainable as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Ix2;
    use rand::SeedableRng;

    #[test]
    fn zero_init_delta_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("lm.block0.attn.wq.w", nn::normal(&mut rng, &[6, 6], 0.1));
        let cfg = LoraConfig::default();
        let cfg = LoraConfig { rank: 3, ..cfg };
        wrap_linear(&mut store, "lm.block0.attn.wq.w", &cfg, &mut rng).unwrap();
        let leaves = store.frozen_leaves();
        let eff = effective_weight(&leaves, "lm.block0.attn.wq.w", &cfg);
        assert_eq!(eff.value_clone(), store.get("lm.block0.attn.wq.w").clone());
    }

    #[test]
    fn rank_exceeding_dims_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", nn::normal(&mut rng, &[4, 6], 0.1));
        let cfg = LoraConfig {
            rank: 5,
            ..LoraConfig::default()
        };
        assert!(wrap_linear(&mut store, "w", &cfg, &mut rng).is_err());
    }

    #[test]
    fn full_rank_adapter_can_represent_any_delta() {
        // r = min(d_in, d_out): fit the adapter to a random target map by
        // plain gradient descent on ||(W_eff - T) x||^2 over random probes,
        // and compare against the least-squares optimum delta = T - W.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 4;
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", nn::normal(&mut rng, &[d, d], 0.3));
        let target = nn::normal::<f64>(&mut rng, &[d, d], 0.3);
        let cfg = LoraConfig {
            rank: d,
            alpha: d as f64, // scale 1
            adapt_vision: false,
        };
        wrap_linear(&mut store, "w", &cfg, &mut rng).unwrap();
        let trainable: BTreeSet<String> =
            ["lora.w.a".to_string(), "lora.w.b".to_string()].into_iter().collect();
        let mut loss_val = f64::INFINITY;
        for _ in 0..4000 {
            let leaves = store.leaves(&trainable);
            let eff = effective_weight(&leaves, "w", &cfg);
            let diff = eff.add_const(&target.mapv(|x| -x));
            let loss = diff.mul(&diff).sum_all();
            loss.backward();
            loss_val = loss.item();
            for (name, g) in leaves.grads() {
                let updated = store.get(&name) - &g.mapv(|x| 0.02 * x);
                store.set(&name, updated);
            }
        }
        assert!(loss_val < 1e-6, "residual {loss_val}");
        // Cross-check against the closed-form optimum: delta should equal T - W.
        let leaves = store.frozen_leaves();
        let eff = effective_weight(&leaves, "w", &cfg).value_clone();
        let eff = eff.into_dimensionality::<Ix2>().unwrap();
        let t = target.into_dimensionality::<Ix2>().unwrap();
        for (a, b) in eff.iter().zip(t.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn policy_partitions_groups() {
        let policy = FreezePolicy::default();
        assert!(policy.is_trainable("lora.lm.block0.attn.wq.w.a"));
        assert!(policy.is_trainable("dec.up1.w"));
        assert!(policy.is_trainable("gamma.fc1.w"));
        assert!(policy.is_trainable("lm.embed_tokens"));
        assert!(policy.is_trainable("lm.head"));
        assert!(!policy.is_trainable("lm.block0.attn.wq.w"));
        assert!(!policy.is_trainable("lm.pos"));
        assert!(!policy.is_trainable("vision.stem.w"));
        assert!(!policy.is_trainable("lora.vision.stem.w.a"));
        let ablation = FreezePolicy { vision_lora: true };
        assert!(ablation.is_trainable("lora.vision.stem.w.a"));
        assert!(!ablation.is_trainable("vision.stem.w"));
    }
}
