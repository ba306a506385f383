//! Mask decoder: projects `<SEG>` hidden states into prompt space (the γ
//! MLP) and decodes each prompt against the dense visual features with a
//! small two-way transformer plus a transposed-conv upscaler, yielding
//! full-resolution mask logits.

use crate::datamodel::BinaryMask;
use crate::error::{Result, SegError};
use crate::nn::{self, Leaves, ParamStore};
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::{concat_cols, Tensor};
use crate::vision::DenseFeatures;
use ndarray::{Array2, ArrayD};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    /// LM hidden size feeding the γ projection.
    pub d_lm: usize,
    /// γ hidden width.
    pub d_gamma_hidden: usize,
    /// Prompt/image token width inside the decoder.
    pub d_prompt: usize,
    /// Raw visual feature width from the backbone.
    pub d_vis: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Channel widths of the two upscaling stages (×4 then ×2).
    pub d_up1: usize,
    pub d_up2: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_lm: 128,
            d_gamma_hidden: 256,
            d_prompt: 64,
            d_vis: 64,
            n_blocks: 2,
            n_heads: 4,
            d_up1: 32,
            d_up2: 16,
        }
    }
}

pub fn init_params<F: Scalar>(store: &mut ParamStore<F>, cfg: &DecoderConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.d_prompt;
    let std_of = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
    store.insert("gamma.fc1.w", nn::normal(rng, &[cfg.d_gamma_hidden, cfg.d_lm], std_of(cfg.d_lm)));
    store.insert("gamma.fc1.b", nn::zeros(&[cfg.d_gamma_hidden]));
    store.insert("gamma.fc2.w", nn::normal(rng, &[d, cfg.d_gamma_hidden], std_of(cfg.d_gamma_hidden)));
    store.insert("gamma.fc2.b", nn::zeros(&[d]));

    store.insert("dec.feat_proj.w", nn::normal(rng, &[d, cfg.d_vis], std_of(cfg.d_vis)));
    store.insert("dec.feat_proj.b", nn::zeros(&[d]));
    for i in 0..cfg.n_blocks {
        let p = format!("dec.block{i}");
        for attn in ["self", "t2i", "i2t"] {
            for name in ["wq", "wk", "wv", "wo"] {
                store.insert(format!("{p}.{attn}.{name}.w"), nn::normal(rng, &[d, d], std_of(d)));
                store.insert(format!("{p}.{attn}.{name}.b"), nn::zeros(&[d]));
            }
        }
        for ln in ["ln1", "ln2", "ln3", "ln4"] {
            store.insert(format!("{p}.{ln}.g"), nn::ones(&[d]));
            store.insert(format!("{p}.{ln}.b"), nn::zeros(&[d]));
        }
        store.insert(format!("{p}.mlp.fc1.w"), nn::normal(rng, &[4 * d, d], std_of(d)));
        store.insert(format!("{p}.mlp.fc1.b"), nn::zeros(&[4 * d]));
        store.insert(format!("{p}.mlp.fc2.w"), nn::normal(rng, &[d, 4 * d], std_of(4 * d)));
        store.insert(format!("{p}.mlp.fc2.b"), nn::zeros(&[d]));
    }
    store.insert("dec.ln_img.g", nn::ones(&[d]));
    store.insert("dec.ln_img.b", nn::zeros(&[d]));
    store.insert("dec.up1.w", nn::normal(rng, &[d, cfg.d_up1, 4, 4], std_of(d * 16)));
    store.insert("dec.up1.b", nn::zeros(&[cfg.d_up1]));
    store.insert("dec.up2.w", nn::normal(rng, &[cfg.d_up1, cfg.d_up2, 2, 2], std_of(cfg.d_up1 * 4)));
    store.insert("dec.up2.b", nn::zeros(&[cfg.d_up2]));
    store.insert("dec.out_mlp.fc1.w", nn::normal(rng, &[d, d], std_of(d)));
    store.insert("dec.out_mlp.fc1.b", nn::zeros(&[d]));
    store.insert("dec.out_mlp.fc2.w", nn::normal(rng, &[cfg.d_up2, d], std_of(d)));
    store.insert("dec.out_mlp.fc2.b", nn::zeros(&[cfg.d_up2]));
}

/// γ: map raw `<SEG>` hidden states (k, d_lm) into prompt embeddings
/// (k, d_prompt).
pub fn project_seg<F: Scalar>(h_seg: &Tensor<F>, leaves: &Leaves<F>) -> Tensor<F> {
    let h = nn::linear(leaves, "gamma.fc1", h_seg).gelu();
    nn::linear(leaves, "gamma.fc2", &h)
}

/// Fixed 2-D sinusoidal positional encoding over the feature grid, (h*w, d)
/// in the same row-major token order as `DenseFeatures::tokens`.
fn grid_pos_encoding<F: Scalar>(h: usize, w: usize, d: usize) -> ArrayD<F> {
    assert!(d % 4 == 0, "positional encoding width must divide by 4");
    let quarter = d / 4;
    let mut out = Array2::zeros((h * w, d));
    for gy in 0..h {
        for gx in 0..w {
            let row = gy * w + gx;
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                out[[row, 4 * i]] = F::c((gy as f64 * freq).sin());
                out[[row, 4 * i + 1]] = F::c((gy as f64 * freq).cos());
                out[[row, 4 * i + 2]] = F::c((gx as f64 * freq).sin());
                out[[row, 4 * i + 3]] = F::c((gx as f64 * freq).cos());
            }
        }
    }
    out.into_dyn()
}

fn mha<F: Scalar>(
    q_in: &Tensor<F>,
    kv_in: &Tensor<F>,
    leaves: &Leaves<F>,
    prefix: &str,
    n_heads: usize,
) -> Tensor<F> {
    let d = q_in.shape()[1];
    let dh = d / n_heads;
    let q = nn::linear(leaves, &format!("{prefix}.wq"), q_in);
    let k = nn::linear(leaves, &format!("{prefix}.wk"), kv_in);
    let v = nn::linear(leaves, &format!("{prefix}.wv"), kv_in);
    let scale = F::c(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let scores = q.slice_cols(s, e).matmul(&k.slice_cols(s, e).t2()).scale(scale);
        heads.push(scores.softmax_rows().matmul(&v.slice_cols(s, e)));
    }
    nn::linear(leaves, &format!("{prefix}.wo"), &concat_cols(&heads))
}

/// Decode one prompt embedding (1, d_prompt) against the feature grid into
/// full-resolution mask logits (H, W). H = 8·grid_h, i.e. the native image
/// resolution for the 8-pixel patch stem.
pub fn decode_mask<F: Scalar>(
    prompt: &Tensor<F>,
    feats: &DenseFeatures<F>,
    leaves: &Leaves<F>,
    cfg: &DecoderConfig,
) -> Result<Tensor<F>> {
    if prompt.shape() != vec![1, cfg.d_prompt] {
        return Err(SegError::Shape(format!(
            "prompt shape {:?}, expected [1, {}]",
            prompt.shape(),
            cfg.d_prompt
        )));
    }
    let (gh, gw) = (feats.grid_h(), feats.grid_w());
    let eps = F::c(1e-5);
    let img_raw = nn::linear(leaves, "dec.feat_proj", &feats.tokens());
    let pos = grid_pos_encoding::<F>(gh, gw, cfg.d_prompt);
    let mut img = img_raw.add_const(&pos);
    let mut tok = prompt.clone();
    for i in 0..cfg.n_blocks {
        let p = format!("dec.block{i}");
        let q = tok.layer_norm(leaves.get(&format!("{p}.ln1.g")), leaves.get(&format!("{p}.ln1.b")), eps);
        tok = tok.add(&mha(&q, &q, leaves, &format!("{p}.self"), cfg.n_heads));
        let q = tok.layer_norm(leaves.get(&format!("{p}.ln2.g")), leaves.get(&format!("{p}.ln2.b")), eps);
        tok = tok.add(&mha(&q, &img, leaves, &format!("{p}.t2i"), cfg.n_heads));
        let q = tok.layer_norm(leaves.get(&format!("{p}.ln3.g")), leaves.get(&format!("{p}.ln3.b")), eps);
        let m = nn::linear(leaves, &format!("{p}.mlp.fc1"), &q).gelu();
        tok = tok.add(&nn::linear(leaves, &format!("{p}.mlp.fc2"), &m));
        let q = img.layer_norm(leaves.get(&format!("{p}.ln4.g")), leaves.get(&format!("{p}.ln4.b")), eps);
        img = img.add(&mha(&q, &tok, leaves, &format!("{p}.i2t"), cfg.n_heads));
    }
    let img = img.layer_norm(leaves.get("dec.ln_img.g"), leaves.get("dec.ln_img.b"), eps);
    // (hw, d) -> (d, gh, gw), then two transposed-conv stages: ×4 and ×2.
    let grid = img.t2().reshape(&[cfg.d_prompt, gh, gw]);
    let up = grid
        .conv_transpose2d(leaves.get("dec.up1.w"), leaves.get("dec.up1.b"), 4)
        .gelu()
        .conv_transpose2d(leaves.get("dec.up2.w"), leaves.get("dec.up2.b"), 2)
        .gelu();
    let (hh, ww) = (up.shape()[1], up.shape()[2]);
    let out_tok = nn::linear(leaves, "dec.out_mlp.fc1", &tok).gelu();
    let out_tok = nn::linear(leaves, "dec.out_mlp.fc2", &out_tok);
    let logits = out_tok.matmul(&up.reshape(&[cfg.d_up2, hh * ww]));
    Ok(logits.reshape(&[hh, ww]))
}

/// γ-project and decode every `<SEG>` hidden row independently; the masks are
/// returned in prompt order. Each prompt sees only the image, never the other
/// prompts, so batched and one-at-a-time decoding agree exactly.
pub fn decode_all<F: Scalar>(
    h_seg: &Tensor<F>,
    feats: &DenseFeatures<F>,
    leaves: &Leaves<F>,
    cfg: &DecoderConfig,
) -> Result<Vec<Tensor<F>>> {
    let prompts = project_seg(h_seg, leaves);
    let k = prompts.shape()[0];
    (0..k)
        .map(|i| decode_mask(&prompts.slice_rows(i, i + 1), feats, leaves, cfg))
        .collect()
}

/// Threshold logits into a hard mask (σ(x) > ½ ⟺ x > 0 for threshold 0).
pub fn binarize<F: Scalar>(logits: &ArrayD<F>, threshold: f64) -> BinaryMask {
    let t = F::c(threshold);
    let shape = logits.shape();
    let bits = Array2::from_shape_fn((shape[0], shape[1]), |(y, x)| {
        if logits[[y, x]] > t {
            1u8
        } else {
            0u8
        }
    });
    BinaryMask { bits }
}

/// Binarize a batch of predicted logit maps, in parallel when enabled.
pub fn binarize_all<F: Scalar>(logit_maps: &[ArrayD<F>], threshold: f64) -> Vec<BinaryMask> {
    parallel::maybe_par_map(logit_maps, |l| binarize(l, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraConfig;
    use crate::vision::{self, VisionConfig};
    use ndarray::Array3;
    use rand::SeedableRng;

    fn tiny_cfg() -> DecoderConfig {
        DecoderConfig {
            d_lm: 12,
            d_gamma_hidden: 10,
            d_prompt: 8,
            d_vis: 8,
            n_blocks: 2,
            n_heads: 2,
            d_up1: 4,
            d_up2: 4,
        }
    }

    fn tiny_setup() -> (ParamStore<f64>, VisionConfig, DecoderConfig) {
        let vcfg = VisionConfig {
            patch_size: 8,
            d_vis: 8,
            n_blocks: 1,
        };
        let dcfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        vision::init_params(&mut store, &vcfg, &mut rng);
        init_params(&mut store, &dcfg, &mut rng);
        (store, vcfg, dcfg)
    }

    fn test_feats(
        store: &ParamStore<f64>,
        vcfg: &VisionConfig,
        hw: (usize, usize),
        leaves: &Leaves<f64>,
    ) -> DenseFeatures<f64> {
        let _ = store;
        let pixels = Array3::from_shape_fn((hw.0, hw.1, 3), |(y, x, c)| {
            ((y * 13 + x * 5 + c * 3) % 17) as f64 / 17.0
        });
        vision::encode_image(&pixels, leaves, vcfg, &LoraConfig::default()).unwrap()
    }

    #[test]
    fn logits_match_image_resolution() {
        let (store, vcfg, dcfg) = tiny_setup();
        let leaves = store.frozen_leaves();
        for (h, w) in [(16, 16), (64, 64), (32, 64)] {
            let feats = test_feats(&store, &vcfg, (h, w), &leaves);
            let h_seg = Tensor::constant(nn::normal::<f64>(
                &mut ChaCha8Rng::seed_from_u64(1),
                &[1, dcfg.d_lm],
                0.5,
            ));
            let masks = decode_all(&h_seg, &feats, &leaves, &dcfg).unwrap();
            assert_eq!(masks.len(), 1);
            assert_eq!(masks[0].shape(), vec![h, w]);
        }
    }

    #[test]
    fn gradient_wrt_seg_embedding_matches_finite_differences() {
        let (store, vcfg, dcfg) = tiny_setup();
        let leaves = store.frozen_leaves();
        let feats = test_feats(&store, &vcfg, (16, 16), &leaves);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h0 = nn::normal::<f64>(&mut rng, &[1, dcfg.d_lm], 0.5);
        // Random fixed projection of the logit map to a scalar loss.
        let probe = nn::normal::<f64>(&mut rng, &[16, 16], 1.0);
        let loss_of = |h: &ndarray::ArrayD<f64>, want_grad: bool| -> (f64, Option<ndarray::ArrayD<f64>>) {
            let leaf = Tensor::leaf(h.clone(), want_grad);
            let feats = test_feats(&store, &vcfg, (16, 16), &leaves);
            let logits = decode_all(&leaf, &feats, &leaves, &dcfg).unwrap().remove(0);
            let loss = logits.mul(&Tensor::constant(probe.clone())).sum_all();
            if want_grad {
                loss.backward();
                (loss.item(), leaf.grad())
            } else {
                (loss.item(), None)
            }
        };
        let _ = feats;
        let (_, grad) = loss_of(&h0, true);
        let grad = grad.expect("seg embedding should receive gradient");
        let eps = 1e-5;
        for j in [0usize, 3, 7, 11] {
            let mut hp = h0.clone();
            hp[[0, j]] += eps;
            let mut hm = h0.clone();
            hm[[0, j]] -= eps;
            let fd = (loss_of(&hp, false).0 - loss_of(&hm, false).0) / (2.0 * eps);
            let g = grad[[0, j]];
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            assert!(rel < 1e-5, "coord {j}: analytic {g} vs fd {fd} (rel {rel})");
        }
    }

    #[test]
    fn different_prompts_yield_different_masks() {
        let (store, vcfg, dcfg) = tiny_setup();
        let leaves = store.frozen_leaves();
        let feats = test_feats(&store, &vcfg, (16, 16), &leaves);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Tensor::constant(nn::normal::<f64>(&mut rng, &[2, dcfg.d_lm], 1.0));
        let masks = decode_all(&h, &feats, &leaves, &dcfg).unwrap();
        let a = masks[0].value_clone();
        let b = masks[1].value_clone();
        let max_diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-6, "prompts should modulate the mask");
        // And the map is not spatially constant.
        let spread = a.iter().cloned().fold(f64::MIN, f64::max)
            - a.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 1e-6, "logit map degenerate");
    }

    #[test]
    fn batched_decoding_equals_independent_decoding() {
        let (store, vcfg, dcfg) = tiny_setup();
        let leaves = store.frozen_leaves();
        let feats = test_feats(&store, &vcfg, (16, 16), &leaves);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = nn::normal::<f64>(&mut rng, &[3, dcfg.d_lm], 0.7);
        let batched = decode_all(&Tensor::constant(h.clone()), &feats, &leaves, &dcfg).unwrap();
        for i in 0..3 {
            let row = h
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .row(i)
                .to_owned()
                .insert_axis(ndarray::Axis(0))
                .into_dyn();
            let single = decode_all(&Tensor::constant(row), &feats, &leaves, &dcfg)
                .unwrap()
                .remove(0);
            let a = batched[i].value_clone();
            let b = single.value_clone();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12, "prompt {i} differs");
            }
        }
    }

    #[test]
    fn binarize_thresholds_exactly() {
        let logits = ndarray::arr2(&[[-0.5, 0.0], [0.3, 2.0]]).into_dyn();
        let m = binarize(&logits, 0.0);
        assert_eq!(m.bits[[0, 0]], 0);
        assert_eq!(m.bits[[0, 1]], 0, "threshold is strict");
        assert_eq!(m.bits[[1, 0]], 1);
        assert_eq!(m.bits[[1, 1]], 1);
        let m = binarize(&logits, 0.5);
        assert_eq!(m.pixel_count(), 1);
    }
}
