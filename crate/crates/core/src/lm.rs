//! Toy causal transformer consuming interleaved text tokens and image-patch
//! embeddings. Pre-norm blocks, learned positional embeddings, greedy
//! decoding, and `<SEG>` hidden-state extraction.

use crate::error::{Result, SegError};
use crate::lora::{self, LoraConfig};
use crate::nn::{self, Leaves, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{concat_cols, concat_rows, Tensor};
use crate::tokenizer::{self, TokenSequence, Vocabulary};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_vis: usize,
}

impl LmConfig {
    pub fn head_dim(&self) -> usize {
        assert_eq!(self.d_model % self.n_heads, 0, "d_model must divide by heads");
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }
}

pub fn default_config(vocab_size: usize) -> LmConfig {
    LmConfig {
        d_model: 128,
        n_layers: 4,
        n_heads: 4,
        vocab_size,
        max_seq_len: 256,
        d_vis: 64,
    }
}

pub fn init_params<F: Scalar>(store: &mut ParamStore<F>, cfg: &LmConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.d_model;
    store.insert("lm.embed_tokens", nn::normal(rng, &[cfg.vocab_size, d], 0.02));
    store.insert("lm.pos", nn::normal(rng, &[cfg.max_seq_len, d], 0.02));
    store.insert("lm.patch_proj.w", nn::normal(rng, &[d, cfg.d_vis], (1.0 / cfg.d_vis as f64).sqrt()));
    store.insert("lm.patch_proj.b", nn::zeros(&[d]));
    let attn_std = (1.0 / d as f64).sqrt();
    for i in 0..cfg.n_layers {
        let p = format!("lm.block{i}");
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{p}.attn.{name}.w"), nn::normal(rng, &[d, d], attn_std));
            store.insert(format!("{p}.attn.{name}.b"), nn::zeros(&[d]));
        }
        store.insert(format!("{p}.ln1.g"), nn::ones(&[d]));
        store.insert(format!("{p}.ln1.b"), nn::zeros(&[d]));
        store.insert(format!("{p}.ln2.g"), nn::ones(&[d]));
        store.insert(format!("{p}.ln2.b"), nn::zeros(&[d]));
        store.insert(format!("{p}.mlp.fc1.w"), nn::normal(rng, &[cfg.mlp_dim(), d], attn_std));
        store.insert(format!("{p}.mlp.fc1.b"), nn::zeros(&[cfg.mlp_dim()]));
        store.insert(
            format!("{p}.mlp.fc2.w"),
            nn::normal(rng, &[d, cfg.mlp_dim()], (1.0 / cfg.mlp_dim() as f64).sqrt()),
        );
        store.insert(format!("{p}.mlp.fc2.b"), nn::zeros(&[d]));
    }
    store.insert("lm.ln_f.g", nn::ones(&[d]));
    store.insert("lm.ln_f.b", nn::zeros(&[d]));
    store.insert("lm.head", nn::normal(rng, &[cfg.vocab_size, d], 0.02));
}

/// Register LoRA adapters on the attention query and value projections.
pub fn add_lora<F: Scalar>(
    store: &mut ParamStore<F>,
    cfg: &LmConfig,
    lora_cfg: &LoraConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for i in 0..cfg.n_layers {
        lora::wrap_linear(store, &format!("lm.block{i}.attn.wq.w"), lora_cfg, rng)?;
        lora::wrap_linear(store, &format!("lm.block{i}.attn.wv.w"), lora_cfg, rng)?;
    }
    Ok(())
}

/// Grow `embed_tokens` and `head` to a larger vocabulary. Existing rows are
/// preserved bitwise; each new row is the mean of the existing rows.
pub fn resize_embeddings<F: Scalar>(store: &mut ParamStore<F>, new_vocab_size: usize) -> Result<()> {
    for name in ["lm.embed_tokens", "lm.head"] {
        let old = store.get(name).clone();
        let (v, d) = (old.shape()[0], old.shape()[1]);
        if new_vocab_size < v {
            return Err(SegError::Config(format!(
                "cannot shrink {name} from {v} to {new_vocab_size}"
            )));
        }
        let mut mean = vec![F::zero(); d];
        for row in old.rows() {
            for (j, &x) in row.iter().enumerate() {
                mean[j] = mean[j] + x;
            }
        }
        let inv = F::one() / F::c(v as f64);
        for m in mean.iter_mut() {
            *m = *m * inv;
        }
        let mut grown = Array2::zeros((new_vocab_size, d));
        for (i, row) in old.rows().into_iter().enumerate() {
            grown.row_mut(i).assign(&row);
        }
        for i in v..new_vocab_size {
            for j in 0..d {
                grown[[i, j]] = mean[j];
            }
        }
        store.set(name, grown.into_dyn());
    }
    Ok(())
}

/// How the single `<IMAGE>` placeholder was expanded into patch positions.
#[derive(Clone, Copy, Debug)]
pub struct ExpandMap {
    pub image_pos: Option<usize>,
    pub n_patches: usize,
}

impl ExpandMap {
    /// Expanded index of an original token position.
    pub fn expand(&self, orig: usize) -> usize {
        match self.image_pos {
            Some(p) if orig > p => orig + self.n_patches - 1,
            _ => orig,
        }
    }

    pub fn expanded_len(&self, orig_len: usize) -> usize {
        match self.image_pos {
            Some(_) => orig_len + self.n_patches - 1,
            None => orig_len,
        }
    }
}

pub struct LmForward<F: Scalar> {
    /// (expanded_len, vocab) next-token logits.
    pub logits: Tensor<F>,
    /// (expanded_len, d_model) final pre-head hidden states.
    pub hidden: Tensor<F>,
    pub expand: ExpandMap,
}

/// Project raw (n_patches, d_vis) feature tokens into LM embedding space.
pub fn patch_embed_for_lm<F: Scalar>(patch_tokens: &Tensor<F>, leaves: &Leaves<F>) -> Tensor<F> {
    nn::linear(leaves, "lm.patch_proj", patch_tokens)
}

fn causal_mask<F: Scalar>(len: usize) -> ndarray::ArrayD<F> {
    let neg = F::c(-1e9);
    Array2::from_shape_fn((len, len), |(i, j)| if j <= i { F::zero() } else { neg }).into_dyn()
}

fn attention<F: Scalar>(
    x: &Tensor<F>,
    leaves: &Leaves<F>,
    prefix: &str,
    n_heads: usize,
    lora_cfg: &LoraConfig,
    mask: Option<&ndarray::ArrayD<F>>,
) -> Tensor<F> {
    let d = x.shape()[1];
    let dh = d / n_heads;
    let wq = lora::effective_weight(leaves, &format!("{prefix}.wq.w"), lora_cfg);
    let wk = lora::effective_weight(leaves, &format!("{prefix}.wk.w"), lora_cfg);
    let wv = lora::effective_weight(leaves, &format!("{prefix}.wv.w"), lora_cfg);
    let q = x.matmul(&wq.t2()).add_row(leaves.get(&format!("{prefix}.wq.b")));
    let k = x.matmul(&wk.t2()).add_row(leaves.get(&format!("{prefix}.wk.b")));
    let v = x.matmul(&wv.t2()).add_row(leaves.get(&format!("{prefix}.wv.b")));
    let scale = F::c(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(s, e);
        let kh = k.slice_cols(s, e);
        let vh = v.slice_cols(s, e);
        let mut scores = qh.matmul(&kh.t2()).scale(scale);
        if let Some(m) = mask {
            scores = scores.add_const(m);
        }
        heads.push(scores.softmax_rows().matmul(&vh));
    }
    let ctx = concat_cols(&heads);
    let wo = leaves.get(&format!("{prefix}.wo.w"));
    ctx.matmul(&wo.t2()).add_row(leaves.get(&format!("{prefix}.wo.b")))
}

/// Teacher-forced forward pass. `image_embeds`, when given, must already be
/// in LM space ((n_patches, d_model)); the sequence must then contain exactly
/// one `<IMAGE>` placeholder, which is expanded in place.
pub fn forward<F: Scalar>(
    tokens: &TokenSequence,
    image_embeds: Option<&Tensor<F>>,
    leaves: &Leaves<F>,
    cfg: &LmConfig,
    lora_cfg: &LoraConfig,
) -> Result<LmForward<F>> {
    let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
    if let Some(&max_id) = tokens.ids.iter().max() {
        if max_id as usize >= cfg.vocab_size {
            return Err(SegError::Token(format!(
                "token id {max_id} outside vocab of {}",
                cfg.vocab_size
            )));
        }
    }
    let embed = leaves.get("lm.embed_tokens");
    let expand = match (image_embeds, tokens.image_positions.len()) {
        (Some(img), 1) => ExpandMap {
            image_pos: Some(tokens.image_positions[0]),
            n_patches: img.shape()[0],
        },
        (None, 0) => ExpandMap {
            image_pos: None,
            n_patches: 0,
        },
        (Some(_), n) => {
            return Err(SegError::Token(format!(
                "expected exactly one {} placeholder, found {n}",
                crate::datamodel::IMAGE_TOKEN
            )))
        }
        (None, _) => {
            return Err(SegError::Token("image placeholder present but no image embeddings".into()))
        }
    };
    let x = match expand.image_pos {
        Some(p) => {
            let img = image_embeds.unwrap();
            let mut parts = Vec::new();
            if p > 0 {
                parts.push(embed.index_rows(&ids[..p].iter().map(|&i| i).collect::<Vec<_>>()));
            }
            parts.push(img.clone());
            if p + 1 < ids.len() {
                parts.push(embed.index_rows(&ids[p + 1..].iter().map(|&i| i).collect::<Vec<_>>()));
            }
            concat_rows(&parts)
        }
        None => embed.index_rows(&ids),
    };
    let len = x.shape()[0];
    if len > cfg.max_seq_len {
        return Err(SegError::Token(format!(
            "expanded sequence length {len} exceeds max {}",
            cfg.max_seq_len
        )));
    }
    let pos = leaves.get("lm.pos").index_rows(&(0..len).collect::<Vec<_>>());
    let mut x = x.add(&pos);
    let mask = causal_mask::<F>(len);
    for i in 0..cfg.n_layers {
        let p = format!("lm.block{i}");
        let h = x.layer_norm(
            leaves.get(&format!("{p}.ln1.g")),
            leaves.get(&format!("{p}.ln1.b")),
            F::c(1e-5),
        );
        let attn = attention(&h, leaves, &format!("{p}.attn"), cfg.n_heads, lora_cfg, Some(&mask));
        x = x.add(&attn);
        let h = x.layer_norm(
            leaves.get(&format!("{p}.ln2.g")),
            leaves.get(&format!("{p}.ln2.b")),
            F::c(1e-5),
        );
        let m = nn::linear(leaves, &format!("{p}.mlp.fc1"), &h).gelu();
        let m = nn::linear(leaves, &format!("{p}.mlp.fc2"), &m);
        x = x.add(&m);
    }
    let hidden = x.layer_norm(leaves.get("lm.ln_f.g"), leaves.get("lm.ln_f.b"), F::c(1e-5));
    let logits = hidden.matmul(&leaves.get("lm.head").t2());
    Ok(LmForward {
        logits,
        hidden,
        expand,
    })
}

/// `<SEG>` hidden rows (one per seg position, textual order), (k, d_model).
/// Returns None when the sequence contains no `<SEG>`.
pub fn extract_seg_embeddings<F: Scalar>(
    out: &LmForward<F>,
    tokens: &TokenSequence,
) -> Option<Tensor<F>> {
    if tokens.seg_positions.is_empty() {
        return None;
    }
    let rows: Vec<usize> = tokens.seg_positions.iter().map(|&p| out.expand.expand(p)).collect();
    Some(out.hidden.index_rows(&rows))
}

/// Greedy decoding from a prompt; stops at EOS or after `max_new` tokens.
/// The returned sequence carries recomputed seg/image positions.
pub fn generate<F: Scalar>(
    prompt: &TokenSequence,
    image_embeds: Option<&Tensor<F>>,
    leaves: &Leaves<F>,
    cfg: &LmConfig,
    lora_cfg: &LoraConfig,
    vocab: &Vocabulary,
    max_new: usize,
) -> Result<TokenSequence> {
    let mut ids = prompt.ids.clone();
    let eos = vocab.eos_id();
    for _ in 0..max_new {
        let seq = tokenizer::sequence_from_ids(ids.clone(), vocab);
        let out = forward(&seq, image_embeds, leaves, cfg, lora_cfg)?;
        let logits = out.logits.value_clone();
        let last = logits.shape()[0] - 1;
        let row = logits.index_axis(ndarray::Axis(0), last);
        let mut best = 0usize;
        let mut best_v = F::neg_infinity();
        for (i, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        ids.push(best as u32);
        if best as u32 == eos {
            break;
        }
    }
    Ok(tokenizer::sequence_from_ids(ids, vocab))
}
