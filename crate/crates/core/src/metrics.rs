//! Evaluation: exact integer-count IoU, gIoU / cIoU aggregation, a
//! Monte-Carlo random-mask baseline, per-record JSONL output and a plain-text
//! results table.

use crate::datamodel::{BinaryMask, DatasetSplit, Phrasing, Sample, SampleKind};
use crate::error::{Result, SegError};
use crate::model::Model;
use crate::parallel;
use crate::scalar::Scalar;
use crate::tokenizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Intersection-over-union from exact pixel counts. Two empty masks count as
/// a perfect match (IoU 1).
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut inter: u64 = 0;
    let mut union: u64 = 0;
    for (&x, &y) in a.bits.iter().zip(b.bits.iter()) {
        inter += (x & y) as u64;
        union += (x | y) as u64;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Intersection and union pixel counts for one (prediction, target) slot.
/// A missing side contributes its counterpart's area to the union only.
pub fn pair_counts(pred: Option<&BinaryMask>, target: Option<&BinaryMask>) -> (u64, u64) {
    match (pred, target) {
        (Some(p), Some(t)) => {
            let mut inter = 0;
            let mut union = 0;
            for (&x, &y) in p.bits.iter().zip(t.bits.iter()) {
                inter += (x & y) as u64;
                union += (x | y) as u64;
            }
            (inter, union)
        }
        (Some(p), None) => (0, p.pixel_count() as u64),
        (None, Some(t)) => (0, t.pixel_count() as u64),
        (None, None) => (0, 0),
    }
}

/// One evaluated sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub kind: SampleKind,
    pub phrasing: Phrasing,
    pub answer_text: String,
    pub expected_answer: String,
    pub answer_matches: bool,
    pub n_pred_masks: usize,
    pub n_target_masks: usize,
    /// Per-target-position IoU (order-paired; unmatched positions score 0).
    pub ious: Vec<f64>,
    /// Σ intersection and Σ union over the pairs, for cIoU accumulation.
    pub inter: u64,
    pub union: u64,
}

impl EvalRecord {
    /// Mean IoU of this image's masks (the per-image term of gIoU).
    pub fn image_iou(&self) -> Option<f64> {
        if self.ious.is_empty() {
            None
        } else {
            Some(self.ious.iter().sum::<f64>() / self.ious.len() as f64)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub n_images: usize,
    pub giou: f64,
    pub ciou: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub text_accuracy: f64,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn overall(&self) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.label == "overall")
    }

    pub fn row(&self, label: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Aggregate gIoU (mean of per-image mean IoU) and cIoU (pooled
/// Σinter / Σunion) over the records selected by `keep`.
pub fn aggregate(records: &[EvalRecord], label: &str, keep: impl Fn(&EvalRecord) -> bool) -> MetricRow {
    let mut per_image = Vec::new();
    let (mut inter, mut union) = (0u64, 0u64);
    for r in records.iter().filter(|r| keep(r)) {
        if let Some(iou) = r.image_iou() {
            per_image.push(iou);
            inter += r.inter;
            union += r.union;
        }
    }
    let giou = if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().sum::<f64>() / per_image.len() as f64
    };
    let ciou = if union == 0 {
        if per_image.is_empty() {
            0.0
        } else {
            1.0
        }
    } else {
        inter as f64 / union as f64
    };
    MetricRow {
        label: label.to_string(),
        n_images: per_image.len(),
        giou,
        ciou,
    }
}

/// Evaluate one sample against a model prediction.
pub fn score_sample<F: Scalar>(model: &Model<F>, sample: &Sample, max_new: usize) -> Result<EvalRecord> {
    let pred = model.predict(&sample.image, &sample.instruction, max_new)?;
    build_record(sample, &pred.answer_text, &pred.masks)
}

/// Oracle-text variant: teacher-force the reference answer and score only the
/// mask head.
pub fn score_sample_oracle<F: Scalar>(model: &Model<F>, sample: &Sample) -> Result<EvalRecord> {
    let masks = model.forced_masks(sample)?;
    build_record(sample, &sample.answer_text, &masks)
}

fn build_record(sample: &Sample, answer_text: &str, masks: &[BinaryMask]) -> Result<EvalRecord> {
    let n_pairs = masks.len().max(sample.target_masks.len());
    let mut ious = Vec::new();
    let (mut inter_sum, mut union_sum) = (0u64, 0u64);
    for k in 0..n_pairs {
        let p = masks.get(k);
        let t = sample.target_masks.get(k);
        let (inter, union) = pair_counts(p, t);
        inter_sum += inter;
        union_sum += union;
        ious.push(if union == 0 { 1.0 } else { inter as f64 / union as f64 });
    }
    // VQA-style samples have no targets; keep the record mask-free so they
    // never enter the mask metrics.
    if sample.target_masks.is_empty() {
        ious.clear();
        inter_sum = 0;
        union_sum = 0;
    }
    let expected = tokenizer::normalize(&sample.answer_text).join(" ");
    let got = tokenizer::normalize(answer_text).join(" ");
    Ok(EvalRecord {
        id: sample.id.clone(),
        kind: sample.kind,
        phrasing: sample.phrasing,
        answer_matches: expected == got,
        answer_text: got,
        expected_answer: expected,
        n_pred_masks: masks.len(),
        n_target_masks: sample.target_masks.len(),
        ious,
        inter: inter_sum,
        union: union_sum,
    })
}

/// Evaluate a whole split (in parallel when enabled) and aggregate the
/// standard rows: overall, per sample kind, and per phrasing.
pub fn evaluate<F: Scalar>(model: &Model<F>, split: &DatasetSplit, max_new: usize) -> Result<EvalReport> {
    evaluate_inner(model, split, max_new, false)
}

/// Evaluation with the reference answer teacher-forced into the LM.
pub fn evaluate_oracle<F: Scalar>(model: &Model<F>, split: &DatasetSplit) -> Result<EvalReport> {
    evaluate_inner(model, split, 0, true)
}

fn evaluate_inner<F: Scalar>(
    model: &Model<F>,
    split: &DatasetSplit,
    max_new: usize,
    oracle: bool,
) -> Result<EvalReport> {
    let results = parallel::maybe_par_map(&split.samples, |s| {
        if oracle {
            score_sample_oracle(model, s)
        } else {
            score_sample(model, s, max_new)
        }
    });
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r?);
    }
    let mut rows = vec![aggregate(&records, "overall", |_| true)];
    for kind in [
        SampleKind::Semantic,
        SampleKind::Referring,
        SampleKind::Reasoning,
    ] {
        if records.iter().any(|r| r.kind == kind && !r.ious.is_empty()) {
            rows.push(aggregate(&records, &kind.to_string(), |r| r.kind == kind));
        }
    }
    for phrasing in [Phrasing::ShortPhrase, Phrasing::LongSentence] {
        if records
            .iter()
            .any(|r| r.phrasing == phrasing && !r.ious.is_empty())
        {
            rows.push(aggregate(&records, &phrasing.to_string(), |r| {
                r.phrasing == phrasing
            }));
        }
    }
    let n = records.len().max(1);
    let text_accuracy = records.iter().filter(|r| r.answer_matches).count() as f64 / n as f64;
    Ok(EvalReport {
        rows,
        text_accuracy,
        records,
    })
}

/// Monte-Carlo baseline: gIoU a fair-coin random mask achieves against the
/// split's target masks.
pub fn random_baseline(split: &DatasetSplit, seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_image = Vec::new();
    for sample in &split.samples {
        if sample.target_masks.is_empty() {
            continue;
        }
        let mut image_sum = 0.0;
        for target in &sample.target_masks {
            let (h, w) = (target.height(), target.width());
            let mut acc = 0.0;
            for _ in 0..trials {
                let mut inter = 0u64;
                let mut union = 0u64;
                for &t in target.bits.iter() {
                    let p: u8 = rng.gen_range(0..2);
                    inter += (p & t) as u64;
                    union += (p | t) as u64;
                }
                let _ = (h, w);
                acc += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            }
            image_sum += acc / trials as f64;
        }
        per_image.push(image_sum / sample.target_masks.len() as f64);
    }
    if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().sum::<f64>() / per_image.len() as f64
    }
}

/// Fixed-width results table.
pub fn report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>8} {:>8} {:>8}\n",
        "subset", "images", "gIoU", "cIoU"
    ));
    for row in &report.rows {
        out.push_str(&format!(
            "{:<16} {:>8} {:>8.4} {:>8.4}\n",
            row.label, row.n_images, row.giou, row.ciou
        ));
    }
    out.push_str(&format!("text accuracy: {:.4}\n", report.text_accuracy));
    out
}

pub fn write_records_jsonl(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| SegError::io(path.display().to_string(), e))?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| SegError::Data(format!("record serialization: {e}")))?;
        writeln!(f, "{line}").map_err(|e| SegError::io(path.display().to_string(), e))?;
    }
    Ok(())
}
