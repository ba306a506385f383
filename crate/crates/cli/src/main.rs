//! `seglm` command-line pipeline: dataset generation, pretraining,
//! fine-tuning, evaluation and single-image prediction.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/configuration error,
//! 3 numerical failure.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use seglm::datamodel::{Image, SplitName};
use seglm::metrics;
use seglm::model::{Model, ModelConfig};
use seglm::synthdata::{self, CorpusSpec};
use seglm::trainer::{TrainConfig, Trainer};
use seglm::SegError;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "seglm", about = "Toy reasoning-segmentation pipeline", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape-scene corpus (train/val/test directories).
    Datagen {
        /// Output directory for the three splits.
        #[arg(long)]
        out: PathBuf,
        /// key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inline overrides, e.g. --set n_semantic=20.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Corpus seed (overrides config).
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain from scratch on a generated dataset.
    Train {
        /// Dataset directory produced by `datagen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from an existing checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune an existing checkpoint on another dataset.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory to start from.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory for records.jsonl and report.json.
        #[arg(long)]
        out: PathBuf,
        /// Generation budget per sample.
        #[arg(long, default_value_t = 24)]
        max_new: usize,
        /// Teacher-force the reference answers (isolates the mask head).
        #[arg(long)]
        oracle_text: bool,
    },
    /// Run one instruction against one image and write masks + overlay.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        max_new: usize,
    },
}

struct AppError {
    code: u8,
    msg: String,
}

impl AppError {
    fn usage(msg: impl Into<String>) -> AppError {
        AppError { code: 1, msg: msg.into() }
    }
}

impl From<SegError> for AppError {
    fn from(e: SegError) -> AppError {
        let code = match e {
            SegError::Numerical(_) => 3,
            _ => 2,
        };
        AppError { code, msg: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.cmd {
        Cmd::Datagen { out, config, sets, seed, force } => datagen(&out, config.as_deref(), &sets, seed, force),
        Cmd::Train { data, out, config, sets, seed, resume } => {
            train(&data, &out, config.as_deref(), &sets, seed, resume.as_deref())
        }
        Cmd::Finetune { data, init, out, config, sets, seed } => {
            finetune(&data, &init, &out, config.as_deref(), &sets, seed)
        }
        Cmd::Eval { data, split, ckpt, out, max_new, oracle_text } => {
            eval(&data, &split, &ckpt, &out, max_new, oracle_text)
        }
        Cmd::Predict { ckpt, image, instruction, out, max_new } => {
            predict(&ckpt, &image, &instruction, &out, max_new)
        }
    }
}

// ---------------------------------------------------------------------------
// Config handling: flat key=value files plus --set overrides
// ---------------------------------------------------------------------------

fn load_overrides(config: Option<&Path>, sets: &[String]) -> Result<BTreeMap<String, String>, AppError> {
    let mut map = BTreeMap::new();
    if let Some(path) = config {
        let body = fs::read_to_string(path)
            .map_err(|e| AppError::from(SegError::io(path.display().to_string(), e)))?;
        for (ln, line) in body.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                AppError::usage(format!("{}:{}: expected key=value", path.display(), ln + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| AppError::usage(format!("--set {s}: expected key=value")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, AppError> {
    v.parse()
        .map_err(|_| AppError::usage(format!("invalid value for {key}: {v}")))
}

fn apply_corpus(spec: &mut CorpusSpec, map: &BTreeMap<String, String>) -> Result<(), AppError> {
    for (k, v) in map {
        match k.as_str() {
            "seed" => spec.seed = parse(k, v)?,
            "image_h" => spec.image_size.0 = parse(k, v)?,
            "image_w" => spec.image_size.1 = parse(k, v)?,
            "n_semantic" => spec.n_semantic = parse(k, v)?,
            "n_referring" => spec.n_referring = parse(k, v)?,
            "n_vqa" => spec.n_vqa = parse(k, v)?,
            "n_reasoning_train" => spec.n_reasoning_train = parse(k, v)?,
            "n_reasoning_val" => spec.n_reasoning_val = parse(k, v)?,
            "n_reasoning_test" => spec.n_reasoning_test = parse(k, v)?,
            "frac_train" => spec.split_fractions.0 = parse(k, v)?,
            "frac_val" => spec.split_fractions.1 = parse(k, v)?,
            "frac_test" => spec.split_fractions.2 = parse(k, v)?,
            _ => return Err(AppError::usage(format!("unknown datagen key: {k}"))),
        }
    }
    Ok(())
}

fn corpus_echo(spec: &CorpusSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed = {}", spec.seed);
    let _ = writeln!(s, "image_h = {}", spec.image_size.0);
    let _ = writeln!(s, "image_w = {}", spec.image_size.1);
    let _ = writeln!(s, "n_semantic = {}", spec.n_semantic);
    let _ = writeln!(s, "n_referring = {}", spec.n_referring);
    let _ = writeln!(s, "n_vqa = {}", spec.n_vqa);
    let _ = writeln!(s, "n_reasoning_train = {}", spec.n_reasoning_train);
    let _ = writeln!(s, "n_reasoning_val = {}", spec.n_reasoning_val);
    let _ = writeln!(s, "n_reasoning_test = {}", spec.n_reasoning_test);
    let _ = writeln!(s, "frac_train = {}", spec.split_fractions.0);
    let _ = writeln!(s, "frac_val = {}", spec.split_fractions.1);
    let _ = writeln!(s, "frac_test = {}", spec.split_fractions.2);
    s
}

struct TrainSettings {
    train: TrainConfig,
    model: String,
}

fn apply_train(settings: &mut TrainSettings, map: &BTreeMap<String, String>) -> Result<(), AppError> {
    for (k, v) in map {
        match k.as_str() {
            "lr" => settings.train.lr = parse(k, v)?,
            "weight_decay" => settings.train.weight_decay = parse(k, v)?,
            "warmup_iters" => settings.train.warmup_iters = parse(k, v)?,
            "batch_per_step" => settings.train.batch_per_step = parse(k, v)?,
            "grad_accum_steps" => settings.train.grad_accum_steps = parse(k, v)?,
            "total_iters" => settings.train.total_iters = parse(k, v)?,
            "grad_clip" => settings.train.grad_clip = parse(k, v)?,
            "seed" => settings.train.seed = parse(k, v)?,
            "model" => {
                if v != "standard" && v != "tiny" {
                    return Err(AppError::usage(format!("model must be standard or tiny, got {v}")));
                }
                settings.model = v.clone();
            }
            _ => return Err(AppError::usage(format!("unknown train key: {k}"))),
        }
    }
    Ok(())
}

fn train_echo(settings: &TrainSettings) -> String {
    let t = &settings.train;
    let mut s = String::new();
    let _ = writeln!(s, "model = {}", settings.model);
    let _ = writeln!(s, "lr = {}", t.lr);
    let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
    let _ = writeln!(s, "warmup_iters = {}", t.warmup_iters);
    let _ = writeln!(s, "batch_per_step = {}", t.batch_per_step);
    let _ = writeln!(s, "grad_accum_steps = {}", t.grad_accum_steps);
    let _ = writeln!(s, "total_iters = {}", t.total_iters);
    let _ = writeln!(s, "grad_clip = {}", t.grad_clip);
    let _ = writeln!(s, "seed = {}", t.seed);
    s
}

fn write_out(dir: &Path, name: &str, body: &str) -> Result<(), AppError> {
    fs::create_dir_all(dir).map_err(|e| AppError::from(SegError::io(dir.display().to_string(), e)))?;
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| AppError::from(SegError::io(path.display().to_string(), e)))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn datagen(
    out: &Path,
    config: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    force: bool,
) -> Result<(), AppError> {
    let map = load_overrides(config, sets)?;
    let mut spec = CorpusSpec::default();
    apply_corpus(&mut spec, &map)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            return Err(AppError::from(SegError::Data(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            ))));
        }
        fs::remove_dir_all(out).map_err(|e| AppError::from(SegError::io(out.display().to_string(), e)))?;
    }
    let corpus = synthdata::build_corpus(&spec)?;
    for (split, sub) in [(&corpus.train, "train"), (&corpus.val, "val"), (&corpus.test, "test")] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| AppError::from(SegError::io(dir.display().to_string(), e)))?;
        seglm::datamodel::save_dataset(split, &dir)?;
    }
    write_out(out, "config.txt", &corpus_echo(&spec))?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        corpus.train.samples.len(),
        corpus.val.samples.len(),
        corpus.test.samples.len(),
        out.display()
    );
    Ok(())
}

fn load_split(data: &Path, name: &str) -> Result<seglm::datamodel::DatasetSplit, AppError> {
    let split_name = match name {
        "train" => SplitName::Train,
        "val" => SplitName::Val,
        "test" => SplitName::Test,
        other => return Err(AppError::usage(format!("unknown split: {other}"))),
    };
    Ok(seglm::datamodel::load_dataset(&data.join(name), split_name)?)
}

fn train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<(), AppError> {
    let map = load_overrides(config, sets)?;
    let mut settings = TrainSettings {
        train: TrainConfig::default(),
        model: "standard".into(),
    };
    apply_train(&mut settings, &map)?;
    if let Some(s) = seed {
        settings.train.seed = s;
    }
    let split = load_split(data, "train")?;
    let mut trainer: Trainer<f32> = match resume {
        Some(ckpt) => Trainer::load_checkpoint(ckpt)?,
        None => {
            let cfg = match settings.model.as_str() {
                "tiny" => ModelConfig::tiny(),
                _ => ModelConfig::standard(),
            };
            let model = Model::new(cfg, &synthdata::lexicon(), settings.train.seed)?;
            Trainer::new(model, settings.train)
        }
    };
    write_out(out, "config.txt", &train_echo(&settings))?;
    let log_path = out.join("log.jsonl");
    let records = trainer.run(&split, Some(&log_path))?;
    trainer.save_checkpoint(&out.join("ckpt"))?;
    if let Some(last) = records.last() {
        println!(
            "finished at iter {} (loss {:.4}, text {:.4}, bce {:.4}, dice {:.4})",
            last.iter + 1,
            last.total,
            last.l_txt,
            last.l_bce,
            last.l_dice
        );
    } else {
        println!("nothing to do: checkpoint already at total_iters");
    }
    println!("checkpoint: {}", out.join("ckpt").display());
    Ok(())
}

fn finetune(
    data: &Path,
    init: &Path,
    out: &Path,
    config: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<(), AppError> {
    let map = load_overrides(config, sets)?;
    let mut settings = TrainSettings {
        train: TrainConfig {
            total_iters: 300,
            warmup_iters: 30,
            ..TrainConfig::default()
        },
        model: "standard".into(),
    };
    apply_train(&mut settings, &map)?;
    if let Some(s) = seed {
        settings.train.seed = s;
    }
    let split = load_split(data, "train")?;
    let mut trainer: Trainer<f32> = Trainer::load_checkpoint(init)?;
    trainer.reset_for_finetune(settings.train);
    write_out(out, "config.txt", &train_echo(&settings))?;
    let log_path = out.join("log.jsonl");
    trainer.run(&split, Some(&log_path))?;
    trainer.save_checkpoint(&out.join("ckpt"))?;
    println!("checkpoint: {}", out.join("ckpt").display());
    Ok(())
}

fn eval(
    data: &Path,
    split_name: &str,
    ckpt: &Path,
    out: &Path,
    max_new: usize,
    oracle_text: bool,
) -> Result<(), AppError> {
    let split = load_split(data, split_name)?;
    let trainer: Trainer<f32> = Trainer::load_checkpoint(ckpt)?;
    let report = if oracle_text {
        metrics::evaluate_oracle(&trainer.model, &split)?
    } else {
        metrics::evaluate(&trainer.model, &split, max_new)?
    };
    let table = metrics::report_table(&report);
    print!("{table}");
    fs::create_dir_all(out).map_err(|e| AppError::from(SegError::io(out.display().to_string(), e)))?;
    metrics::write_records_jsonl(&out.join("records.jsonl"), &report.records)?;
    let summary = serde_json::json!({
        "split": split_name,
        "oracle_text": oracle_text,
        "rows": report.rows,
        "text_accuracy": report.text_accuracy,
    });
    write_out(out, "report.json", &serde_json::to_string_pretty(&summary).unwrap())?;
    write_out(out, "report.txt", &table)?;
    Ok(())
}

const OVERLAY_COLORS: [[f64; 3]; 4] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.1, 0.4, 0.9],
    [0.9, 0.8, 0.1],
];

fn predict(
    ckpt: &Path,
    image_path: &Path,
    instruction: &str,
    out: &Path,
    max_new: usize,
) -> Result<(), AppError> {
    let trainer: Trainer<f32> = Trainer::load_checkpoint(ckpt)?;
    let model = &trainer.model;
    let mut img = Image::load_png(image_path)?;
    let p = model.cfg.vision.patch_size;
    let (h, w) = (img.height(), img.width());
    if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
        let nh = (h.max(p) + p - 1) / p * p;
        let nw = (w.max(p) + p - 1) / p * p;
        eprintln!("warning: resizing {h}x{w} input to {nh}x{nw} (multiple of patch size {p})");
        img = resize_nearest(&img, nh, nw);
    }
    let pred = model.predict(&img, instruction, max_new)?;
    fs::create_dir_all(out).map_err(|e| AppError::from(SegError::io(out.display().to_string(), e)))?;
    write_out(out, "answer.txt", &format!("{}\n", pred.answer_text))?;
    // 50% alpha overlay, fixed color order per mask.
    let mut overlay = img.clone();
    for (k, mask) in pred.masks.iter().enumerate() {
        mask.save_png(&out.join(format!("mask_{k}.png")))?;
        let color = OVERLAY_COLORS[k % OVERLAY_COLORS.len()];
        for y in 0..img.height() {
            for x in 0..img.width() {
                if mask.bits[[y, x]] == 1 {
                    for c in 0..3 {
                        overlay.pixels[[y, x, c]] = 0.5 * overlay.pixels[[y, x, c]] + 0.5 * color[c];
                    }
                }
            }
        }
    }
    overlay.save_png(&out.join("overlay.png"))?;
    println!("answer: {}", pred.answer_text);
    println!("{} mask(s) written to {}", pred.masks.len(), out.display());
    Ok(())
}

fn resize_nearest(img: &Image, nh: usize, nw: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let pixels = ndarray::Array3::from_shape_fn((nh, nw, 3), |(y, x, c)| {
        let sy = (y * h / nh).min(h - 1);
        let sx = (x * w / nw).min(w - 1);
        img.pixels[[sy, sx, c]]
    });
    Image { pixels }
}
