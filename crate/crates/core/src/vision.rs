//! Vision backbone: a p×p stride-p conv patch stem followed by residual 3×3
//! conv blocks, producing the dense feature grid the mask decoder conditions
//! on. Frozen by default; an optional LoRA mode adapts the conv weights for
//! the backbone ablation.

use crate::error::{Result, SegError};
use crate::lora::{self, LoraConfig};
use crate::nn::{self, Leaves, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct VisionConfig {
    pub patch_size: usize,
    pub d_vis: usize,
    pub n_blocks: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            patch_size: 8,
            d_vis: 64,
            n_blocks: 2,
        }
    }
}

/// Dense visual features: channel-first grid (d_vis, H/p, W/p).
pub struct DenseFeatures<F: Scalar> {
    pub grid: Tensor<F>,
    pub patch_size: usize,
}

impl<F: Scalar> DenseFeatures<F> {
    pub fn grid_h(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn grid_w(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn d_vis(&self) -> usize {
        self.grid.shape()[0]
    }

    /// Row-major (over the spatial grid) token sequence, (h*w, d_vis).
    pub fn tokens(&self) -> Tensor<F> {
        let (d, h, w) = (self.d_vis(), self.grid_h(), self.grid_w());
        self.grid.reshape(&[d, h * w]).t2()
    }
}

pub fn init_params<F: Scalar>(store: &mut ParamStore<F>, cfg: &VisionConfig, rng: &mut ChaCha8Rng) {
    let p = cfg.patch_size;
    let d = cfg.d_vis;
    let stem_std = 1.0 / ((3 * p * p) as f64).sqrt();
    store.insert("vision.stem.w", nn::normal(rng, &[d, 3, p, p], stem_std));
    store.insert("vision.stem.b", nn::zeros(&[d]));
    let conv_std = 1.0 / ((d * 9) as f64).sqrt();
    for i in 0..cfg.n_blocks {
        store.insert(format!("vision.block{i}.conv1.w"), nn::normal(rng, &[d, d, 3, 3], conv_std));
        store.insert(format!("vision.block{i}.conv1.b"), nn::zeros(&[d]));
        store.insert(format!("vision.block{i}.conv2.w"), nn::normal(rng, &[d, d, 3, 3], conv_std));
        store.insert(format!("vision.block{i}.conv2.b"), nn::zeros(&[d]));
    }
}

/// Register LoRA adapters on every backbone conv weight (ablation mode).
pub fn add_lora<F: Scalar>(
    store: &mut ParamStore<F>,
    cfg: &VisionConfig,
    lora_cfg: &LoraConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    lora::wrap_linear(store, "vision.stem.w", lora_cfg, rng)?;
    for i in 0..cfg.n_blocks {
        lora::wrap_linear(store, &format!("vision.block{i}.conv1.w"), lora_cfg, rng)?;
        lora::wrap_linear(store, &format!("vision.block{i}.conv2.w"), lora_cfg, rng)?;
    }
    Ok(())
}

/// f = F_enc(x_img): encode unit-interval H×W×3 pixels into the feature grid.
pub fn encode_image<F: Scalar>(
    pixels: &Array3<f64>,
    leaves: &Leaves<F>,
    cfg: &VisionConfig,
    lora_cfg: &LoraConfig,
) -> Result<DenseFeatures<F>> {
    let (h, w, c) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    if c != 3 {
        return Err(SegError::Shape(format!("expected 3 channels, got {c}")));
    }
    if h % cfg.patch_size != 0 || w % cfg.patch_size != 0 {
        return Err(SegError::Shape(format!(
            "image {h}x{w} not divisible by patch size {}",
            cfg.patch_size
        )));
    }
    // HWC -> CHW constant input.
    let chw = Array3::from_shape_fn((3, h, w), |(ch, y, x)| F::c(pixels[[y, x, ch]]));
    let x = Tensor::constant(chw.into_dyn());

    let stem_w = lora::effective_weight(leaves, "vision.stem.w", lora_cfg);
    let mut grid = x.conv2d(&stem_w, leaves.get("vision.stem.b"), cfg.patch_size, 0);
    for i in 0..cfg.n_blocks {
        let w1 = lora::effective_weight(leaves, &format!("vision.block{i}.conv1.w"), lora_cfg);
        let w2 = lora::effective_weight(leaves, &format!("vision.block{i}.conv2.w"), lora_cfg);
        let b1 = leaves.get(&format!("vision.block{i}.conv1.b"));
        let b2 = leaves.get(&format!("vision.block{i}.conv2.b"));
        let inner = grid.conv2d(&w1, b1, 1, 1).gelu().conv2d(&w2, b2, 1, 1);
        grid = grid.add(&inner);
    }
    Ok(DenseFeatures {
        grid,
        patch_size: cfg.patch_size,
    })
}
