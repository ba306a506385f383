//! Training loop: AdamW over the trainable subset, linear warmup/decay
//! schedule, gradient accumulation with global-norm clipping, a frozen-vision
//! feature cache, JSONL loss logging and directory checkpoints that resume
//! bit-exactly at float32.

use crate::datamodel::DatasetSplit;
use crate::error::{Result, SegError};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::parallel;
use crate::scalar::Scalar;
use crate::tokenizer::Vocabulary;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    /// Samples per device-batch; the effective batch is
    /// `batch_per_step * grad_accum_steps`.
    pub batch_per_step: usize,
    pub grad_accum_steps: usize,
    /// Optimizer steps for the whole run; also the decay horizon.
    pub total_iters: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.0,
            warmup_iters: 100,
            batch_per_step: 2,
            grad_accum_steps: 10,
            total_iters: 2000,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Linear warmup to `lr` over `warmup_iters`, then linear decay toward zero
/// at `total_iters` (0-based optimizer step).
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f64 {
    if cfg.warmup_iters > 0 && iter < cfg.warmup_iters {
        cfg.lr * (iter + 1) as f64 / cfg.warmup_iters as f64
    } else {
        let span = (cfg.total_iters - cfg.warmup_iters).max(1) as f64;
        cfg.lr * (cfg.total_iters - iter) as f64 / span
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub total: f64,
    pub l_txt: f64,
    pub l_bce: f64,
    pub l_dice: f64,
}

struct AdamState<F: Scalar> {
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

pub struct Trainer<F: Scalar> {
    pub model: Model<F>,
    pub cfg: TrainConfig,
    pub iter: usize,
    rng: ChaCha8Rng,
    opt: AdamState<F>,
    vision_cache: HashMap<String, ArrayD<F>>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: Model<F>, cfg: TrainConfig) -> Trainer<F> {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x517c_c1b7_2722_0a95));
        Trainer {
            model,
            cfg,
            iter: 0,
            rng,
            opt: AdamState::new(),
            vision_cache: HashMap::new(),
        }
    }

    /// Start a fresh fine-tuning phase on the current weights: new schedule,
    /// new optimizer state, new data-sampling stream.
    pub fn reset_for_finetune(&mut self, cfg: TrainConfig) {
        self.cfg = cfg;
        self.iter = 0;
        self.opt = AdamState::new();
        self.rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x517c_c1b7_2722_0a95));
        self.vision_cache.clear();
    }

    /// Run optimizer steps until `total_iters`, appending one JSONL record
    /// per step to `log_path` when given.
    pub fn run(&mut self, split: &DatasetSplit, log_path: Option<&Path>) -> Result<Vec<LogRecord>> {
        if split.samples.is_empty() {
            return Err(SegError::Data("empty training split".into()));
        }
        let mut log_file = match log_path {
            Some(p) => Some(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| SegError::io(p.display().to_string(), e))?,
            ),
            None => None,
        };
        let mut records = Vec::new();
        while self.iter < self.cfg.total_iters {
            let rec = self.step(split)?;
            if let Some(f) = log_file.as_mut() {
                let line = serde_json::to_string(&rec)
                    .map_err(|e| SegError::Data(format!("log serialization: {e}")))?;
                writeln!(f, "{line}").map_err(|e| SegError::io("loss log", e))?;
            }
            records.push(rec);
        }
        Ok(records)
    }

    /// One optimizer step over an effective batch of
    /// `batch_per_step * grad_accum_steps` samples.
    pub fn step(&mut self, split: &DatasetSplit) -> Result<LogRecord> {
        let n_eff = self.cfg.batch_per_step * self.cfg.grad_accum_steps;
        let idxs: Vec<usize> = (0..n_eff)
            .map(|_| self.rng.gen_range(0..split.samples.len()))
            .collect();
        if self.model.vision_is_static() {
            self.fill_vision_cache(split, &idxs)?;
        }
        let trainable = self.model.trainable();
        let model = &self.model;
        let cache = &self.vision_cache;
        let results = parallel::maybe_par_map(&idxs, |&i| {
            let s = &split.samples[i];
            model.sample_loss(s, cache.get(&s.id), &trainable, true)
        });
        // Deterministic reduction in draw order.
        let mut grad_sum: BTreeMap<String, ArrayD<F>> = BTreeMap::new();
        let (mut total, mut l_txt, mut l_bce, mut l_dice) = (0.0, 0.0, 0.0, 0.0);
        for (k, res) in results.into_iter().enumerate() {
            let (stats, grads) = res.map_err(|e| {
                SegError::Numerical(format!(
                    "iter {} sample {}: {e}",
                    self.iter, split.samples[idxs[k]].id
                ))
            })?;
            total += stats.total;
            l_txt += stats.l_txt;
            l_bce += stats.l_bce;
            l_dice += stats.l_dice;
            for (name, g) in grads {
                match grad_sum.get_mut(&name) {
                    Some(acc) => *acc = &*acc + &g,
                    None => {
                        grad_sum.insert(name, g);
                    }
                }
            }
        }
        let inv = F::c(1.0 / n_eff as f64);
        for g in grad_sum.values_mut() {
            *g = g.mapv(|x| x * inv);
        }
        // Global-norm clipping over the whole trainable gradient vector.
        let norm: f64 = grad_sum
            .values()
            .map(|g| g.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(SegError::Numerical(format!(
                "iter {}: non-finite gradient norm",
                self.iter
            )));
        }
        if norm > self.cfg.grad_clip {
            let s = F::c(self.cfg.grad_clip / norm);
            for g in grad_sum.values_mut() {
                *g = g.mapv(|x| x * s);
            }
        }
        let lr = lr_at(&self.cfg, self.iter);
        self.adam_step(&grad_sum, lr);
        let rec = LogRecord {
            iter: self.iter,
            lr,
            total: total / n_eff as f64,
            l_txt: l_txt / n_eff as f64,
            l_bce: l_bce / n_eff as f64,
            l_dice: l_dice / n_eff as f64,
        };
        self.iter += 1;
        Ok(rec)
    }

    fn fill_vision_cache(&mut self, split: &DatasetSplit, idxs: &[usize]) -> Result<()> {
        let mut missing: Vec<usize> = idxs
            .iter()
            .copied()
            .filter(|&i| !self.vision_cache.contains_key(&split.samples[i].id))
            .collect();
        missing.sort_unstable();
        missing.dedup();
        if missing.is_empty() {
            return Ok(());
        }
        let model = &self.model;
        let grids = parallel::maybe_par_map(&missing, |&i| {
            model.vision_grid_value(&split.samples[i].image)
        });
        for (i, grid) in missing.into_iter().zip(grids) {
            self.vision_cache.insert(split.samples[i].id.clone(), grid?);
        }
        Ok(())
    }

    fn adam_step(&mut self, grads: &BTreeMap<String, ArrayD<F>>, lr: f64) {
        self.opt.step += 1;
        let t = self.opt.step as i32;
        let b1 = F::c(0.9);
        let b2 = F::c(0.999);
        let eps = F::c(1e-8);
        let one = F::one();
        let bc1 = F::c(1.0 / (1.0 - 0.9f64.powi(t)));
        let bc2 = F::c(1.0 / (1.0 - 0.999f64.powi(t)));
        let lr_f = F::c(lr);
        let wd = F::c(self.cfg.weight_decay);
        for (name, g) in grads {
            let m = self
                .opt
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(IxDyn(g.shape())));
            *m = m.mapv(|x| x * b1) + &g.mapv(|x| x * (one - b1));
            let v = self
                .opt
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(IxDyn(g.shape())));
            *v = v.mapv(|x| x * b2) + &g.mapv(|x| x * x * (one - b2));
            let m_hat = m.mapv(|x| x * bc1);
            let v_hat = v.mapv(|x| x * bc2);
            let p = self.model.params.get(name).clone();
            // Decoupled weight decay, then the Adam update.
            let update = ndarray::Zip::from(&m_hat)
                .and(&v_hat)
                .and(&p)
                .map_collect(|&mh, &vh, &pv| {
                    pv - lr_f * (mh / (vh.sqrt() + eps) + wd * pv)
                });
            self.model.params.set(name, update);
        }
    }

    // -- checkpointing -----------------------------------------------------

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("params")).map_err(|e| SegError::io(dir.display().to_string(), e))?;
        fs::create_dir_all(dir.join("opt")).map_err(|e| SegError::io(dir.display().to_string(), e))?;
        let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (name, value) in self.model.params.iter() {
            shapes.insert(name.clone(), value.shape().to_vec());
            write_f32_bin(&dir.join("params").join(format!("{name}.bin")), value)?;
        }
        for (name, value) in &self.opt.m {
            write_f32_bin(&dir.join("opt").join(format!("{name}.m.bin")), value)?;
        }
        for (name, value) in &self.opt.v {
            write_f32_bin(&dir.join("opt").join(format!("{name}.v.bin")), value)?;
        }
        self.model.vocab.save(&dir.join("vocab.txt"))?;
        let manifest = CheckpointManifest {
            iter: self.iter,
            opt_step: self.opt.step,
            config: self.model.cfg,
            train: self.cfg,
            rng: self.rng.clone(),
            shapes,
            opt_names: self.opt.m.keys().cloned().collect(),
            trainable: self.model.trainable().into_iter().collect(),
        };
        let body = serde_json::to_string_pretty(&manifest)
            .map_err(|e| SegError::Checkpoint(format!("manifest serialization: {e}")))?;
        fs::write(dir.join("manifest.json"), body)
            .map_err(|e| SegError::io(dir.display().to_string(), e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Trainer<F>> {
        let body = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| SegError::io(dir.join("manifest.json").display().to_string(), e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&body)
            .map_err(|e| SegError::Checkpoint(format!("manifest parse: {e}")))?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let mut params = ParamStore::new();
        for (name, shape) in &manifest.shapes {
            let value = read_f32_bin(&dir.join("params").join(format!("{name}.bin")), shape)?;
            params.insert(name.clone(), value);
        }
        let mut opt = AdamState::new();
        opt.step = manifest.opt_step;
        for name in &manifest.opt_names {
            let shape = manifest.shapes.get(name).ok_or_else(|| {
                SegError::Checkpoint(format!("optimizer state for unknown parameter {name}"))
            })?;
            opt.m.insert(
                name.clone(),
                read_f32_bin(&dir.join("opt").join(format!("{name}.m.bin")), shape)?,
            );
            opt.v.insert(
                name.clone(),
                read_f32_bin(&dir.join("opt").join(format!("{name}.v.bin")), shape)?,
            );
        }
        let model = Model {
            cfg: manifest.config,
            vocab,
            params,
            policy: crate::lora::FreezePolicy {
                vision_lora: manifest.config.lora.adapt_vision,
            },
            weights: crate::losses::LossWeights::default(),
        };
        Ok(Trainer {
            model,
            cfg: manifest.train,
            iter: manifest.iter,
            rng: manifest.rng,
            opt,
            vision_cache: HashMap::new(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    iter: usize,
    opt_step: u64,
    config: crate::model::ModelConfig,
    train: TrainConfig,
    rng: ChaCha8Rng,
    shapes: BTreeMap<String, Vec<usize>>,
    opt_names: Vec<String>,
    trainable: Vec<String>,
}

/// Raw little-endian float32 tensor file.
fn write_f32_bin<F: Scalar>(path: &Path, value: &ArrayD<F>) -> Result<()> {
    let mut bytes = Vec::with_capacity(value.len() * 4);
    for &x in value.iter() {
        bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| SegError::io(path.display().to_string(), e))
}

fn read_f32_bin<F: Scalar>(path: &Path, shape: &[usize]) -> Result<ArrayD<F>> {
    let bytes = fs::read(path).map_err(|e| SegError::io(path.display().to_string(), e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(SegError::Checkpoint(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            n * 4,
            bytes.len()
        )));
    }
    let values: Vec<F> = bytes
        .chunks_exact(4)
        .map(|c| F::c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| SegError::Checkpoint(format!("{}: {e}", path.display())))
}
