//! Core domain types, dataset container and the on-disk dataset layout:
//! `manifest.jsonl`, `images/<id>.png`, `masks/<id>_<k>.png`.

use crate::error::{Result, SegError};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const SEG_TOKEN: &str = "<SEG>";
pub const IMAGE_TOKEN: &str = "<IMAGE>";

/// RGB image with unit-interval pixels, H x W x 3.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.shape()[2] != 3 {
            return Err(SegError::Shape(format!(
                "image must have 3 channels, got {}",
                pixels.shape()[2]
            )));
        }
        if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(SegError::Data("pixel outside [0,1]".into()));
        }
        Ok(Image { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = image::Rgb([
                    (self.pixels[[y, x, 0]] * 255.0).round() as u8,
                    (self.pixels[[y, x, 1]] * 255.0).round() as u8,
                    (self.pixels[[y, x, 2]] * 255.0).round() as u8,
                ]);
                img.put_pixel(x as u32, y as u32, px);
            }
        }
        img.save(path)
            .map_err(|e| SegError::Data(format!("png write {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| SegError::Data(format!("png read {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut pixels = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
            }
        }
        Ok(Image { pixels })
    }
}

/// Binary segmentation mask, H x W of {0,1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub bits: Array2<u8>,
}

impl BinaryMask {
    pub fn new(bits: Array2<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(SegError::Data("non-binary mask value".into()));
        }
        Ok(BinaryMask { bits })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            bits: Array2::zeros((h, w)),
        }
    }

    pub fn height(&self) -> usize {
        self.bits.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.bits.shape()[1]
    }

    pub fn pixel_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Pixelwise union (logical OR).
    pub fn union_with(&self, other: &BinaryMask) -> BinaryMask {
        let mut bits = self.bits.clone();
        bits.zip_mut_with(&other.bits, |a, &b| *a = (*a | b) & 1);
        BinaryMask { bits }
    }

    /// True if no pixel is shared with `other`.
    pub fn disjoint_from(&self, other: &BinaryMask) -> bool {
        self.bits
            .iter()
            .zip(other.bits.iter())
            .all(|(&a, &b)| a & b == 0)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x as u32, y as u32, image::Luma([self.bits[[y, x]] * 255]));
            }
        }
        img.save(path)
            .map_err(|e| SegError::Data(format!("png write {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| SegError::Data(format!("png read {}: {e}", path.display())))?
            .to_luma8();
        let (w, h) = img.dimensions();
        let mut bits = Array2::zeros((h as usize, w as usize));
        for (x, y, p) in img.enumerate_pixels() {
            bits[[y as usize, x as usize]] = match p.0[0] {
                0 => 0,
                255 => 1,
                v => {
                    return Err(SegError::Data(format!(
                        "non-binary mask value {v} in {}",
                        path.display()
                    )))
                }
            };
        }
        Ok(BinaryMask { bits })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Semantic,
    Referring,
    Reasoning,
    Vqa,
}

impl fmt::Display for SampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SampleKind::Semantic => "semantic",
            SampleKind::Referring => "referring",
            SampleKind::Reasoning => "reasoning",
            SampleKind::Vqa => "vqa",
        };
        f.write_str(s)
    }
}

/// How the query is phrased; tags reasoning eval records for Table-style
/// short/long reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phrasing {
    ShortPhrase,
    LongSentence,
}

impl fmt::Display for Phrasing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phrasing::ShortPhrase => f.write_str("short query"),
            Phrasing::LongSentence => f.write_str("long query"),
        }
    }
}

/// One image-instruction-mask(s) record.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub instruction: String,
    pub answer_text: String,
    pub target_masks: Vec<BinaryMask>,
    pub kind: SampleKind,
    pub phrasing: Phrasing,
}

impl Sample {
    /// Count of `<SEG>` literals in the answer text.
    pub fn seg_count(&self) -> usize {
        self.answer_text.matches(SEG_TOKEN).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == SampleKind::Vqa && !self.target_masks.is_empty() {
            return Err(SegError::Data(format!(
                "sample {}: vqa sample must have no masks",
                self.id
            )));
        }
        if self.kind != SampleKind::Vqa && self.target_masks.is_empty() {
            return Err(SegError::Data(format!(
                "sample {}: non-vqa sample must have at least one mask",
                self.id
            )));
        }
        if self.seg_count() != self.target_masks.len() {
            return Err(SegError::Data(format!(
                "sample {}: {} {SEG_TOKEN} tokens but {} masks",
                self.id,
                self.seg_count(),
                self.target_masks.len()
            )));
        }
        for (k, m) in self.target_masks.iter().enumerate() {
            if m.height() != self.image.height() || m.width() != self.image.width() {
                return Err(SegError::Shape(format!(
                    "sample {}: mask {k} is {}x{} but image is {}x{}",
                    self.id,
                    m.height(),
                    m.width(),
                    self.image.height(),
                    self.image.width()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitName::Train => f.write_str("train"),
            SplitName::Val => f.write_str("val"),
            SplitName::Test => f.write_str("test"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub samples: Vec<Sample>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if !seen.insert(&s.id) {
                return Err(SegError::Data(format!("duplicate sample id {}", s.id)));
            }
            s.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    instruction: String,
    answer_text: String,
    kind: SampleKind,
    phrasing: Phrasing,
    image: String,
    masks: Vec<String>,
}

/// Write a split to `path` as `manifest.jsonl` + PNG files.
pub fn save_dataset(split: &DatasetSplit, path: &Path) -> Result<()> {
    split.validate()?;
    fs::create_dir_all(path.join("images")).map_err(|e| SegError::io(path.display().to_string(), e))?;
    fs::create_dir_all(path.join("masks")).map_err(|e| SegError::io(path.display().to_string(), e))?;
    let manifest_path = path.join("manifest.jsonl");
    let mut out = fs::File::create(&manifest_path)
        .map_err(|e| SegError::io(manifest_path.display().to_string(), e))?;
    for s in &split.samples {
        let image_rel = format!("images/{}.png", s.id);
        s.image.save_png(&path.join(&image_rel))?;
        let mut mask_rels = Vec::new();
        for (k, m) in s.target_masks.iter().enumerate() {
            let rel = format!("masks/{}_{k}.png", s.id);
            m.save_png(&path.join(&rel))?;
            mask_rels.push(rel);
        }
        let rec = ManifestRecord {
            id: s.id.clone(),
            instruction: s.instruction.clone(),
            answer_text: s.answer_text.clone(),
            kind: s.kind,
            phrasing: s.phrasing,
            image: image_rel,
            masks: mask_rels,
        };
        let line = serde_json::to_string(&rec).map_err(|e| SegError::Data(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| SegError::io(manifest_path.display().to_string(), e))?;
    }
    Ok(())
}

/// Load a split from a dataset directory, validating all invariants.
pub fn load_dataset(path: &Path, name: SplitName) -> Result<DatasetSplit> {
    let manifest_path = path.join("manifest.jsonl");
    let file = fs::File::open(&manifest_path)
        .map_err(|e| SegError::io(manifest_path.display().to_string(), e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SegError::io(manifest_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| SegError::Data(format!("manifest line {}: {e}", lineno + 1)))?;
        let image = Image::load_png(&path.join(&rec.image))
            .map_err(|e| SegError::Data(format!("sample {}: {e}", rec.id)))?;
        let mut masks = Vec::new();
        for rel in &rec.masks {
            let m = BinaryMask::load_png(&path.join(rel))
                .map_err(|e| SegError::Data(format!("sample {}: {e}", rec.id)))?;
            masks.push(m);
        }
        samples.push(Sample {
            id: rec.id,
            image,
            instruction: rec.instruction,
            answer_text: rec.answer_text,
            target_masks: masks,
            kind: rec.kind,
            phrasing: rec.phrasing,
        });
    }
    let split = DatasetSplit { name, samples };
    split.validate()?;
    Ok(split)
}
