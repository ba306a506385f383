//! Full segmenting LM: vision backbone + multimodal LM + γ projection +
//! mask decoder, with per-sample loss-graph construction and the generation
//! path used for evaluation and prediction.

use crate::datamodel::{BinaryMask, Image, Sample, SEG_TOKEN};
use crate::decoder::{self, DecoderConfig};
use crate::error::{Result, SegError};
use crate::lm::{self, LmConfig};
use crate::lora::{self, FreezePolicy, LoraConfig};
use crate::losses::{self, LossWeights};
use crate::nn::{Leaves, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{self, Role, TokenSequence, Vocabulary};
use crate::vision::{self, DenseFeatures, VisionConfig};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub lm: LmConfig,
    pub dec: DecoderConfig,
    pub lora: LoraConfig,
}

impl ModelConfig {
    /// Desk-scale configuration used by the actual training runs. The vocab
    /// size is filled in from the lexicon at build time.
    pub fn standard() -> ModelConfig {
        ModelConfig {
            vision: VisionConfig {
                patch_size: 8,
                d_vis: 32,
                n_blocks: 2,
            },
            lm: LmConfig {
                d_model: 64,
                n_layers: 3,
                n_heads: 4,
                vocab_size: 0,
                max_seq_len: 192,
                d_vis: 32,
            },
            dec: DecoderConfig {
                d_lm: 64,
                d_gamma_hidden: 128,
                d_prompt: 32,
                d_vis: 32,
                n_blocks: 2,
                n_heads: 4,
                d_up1: 16,
                d_up2: 16,
            },
            lora: LoraConfig {
                rank: 8,
                alpha: 16.0,
                adapt_vision: false,
            },
        }
    }

    /// Miniature configuration for fast tests and float64 gradient checks.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            vision: VisionConfig {
                patch_size: 8,
                d_vis: 12,
                n_blocks: 1,
            },
            lm: LmConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                vocab_size: 0,
                max_seq_len: 96,
                d_vis: 12,
            },
            dec: DecoderConfig {
                d_lm: 32,
                d_gamma_hidden: 24,
                d_prompt: 16,
                d_vis: 12,
                n_blocks: 1,
                n_heads: 2,
                d_up1: 8,
                d_up2: 8,
            },
            lora: LoraConfig {
                rank: 4,
                alpha: 8.0,
                adapt_vision: false,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lm.d_vis != self.vision.d_vis || self.dec.d_vis != self.vision.d_vis {
            return Err(SegError::Config("d_vis mismatch across components".into()));
        }
        if self.dec.d_lm != self.lm.d_model {
            return Err(SegError::Config("decoder d_lm must equal lm d_model".into()));
        }
        if self.vision.patch_size != 8 {
            return Err(SegError::Config(
                "mask upscaler is built for an 8-pixel patch stem".into(),
            ));
        }
        Ok(())
    }
}

pub struct Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<F>,
    pub policy: FreezePolicy,
    pub weights: LossWeights,
}

impl<F: Scalar> Model<F> {
    /// Build the base model over the closed lexicon, without `<SEG>`.
    /// Call [`Model::add_seg_token`] before any segmentation training.
    pub fn build_base(mut cfg: ModelConfig, lexicon: &[String], seed: u64) -> Result<Model<F>> {
        let vocab = Vocabulary::build(lexicon)?;
        cfg.lm.vocab_size = vocab.len();
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        vision::init_params(&mut params, &cfg.vision, &mut rng);
        lm::init_params(&mut params, &cfg.lm, &mut rng);
        decoder::init_params(&mut params, &cfg.dec, &mut rng);
        lm::add_lora(&mut params, &cfg.lm, &cfg.lora, &mut rng)?;
        if cfg.lora.adapt_vision {
            vision::add_lora(&mut params, &cfg.vision, &cfg.lora, &mut rng)?;
        }
        Ok(Model {
            cfg,
            vocab,
            params,
            policy: FreezePolicy {
                vision_lora: cfg.lora.adapt_vision,
            },
            weights: LossWeights::default(),
        })
    }

    /// Append `<SEG>` to the vocabulary and grow the tied embedding/head
    /// matrices; ids and logits of existing tokens are unchanged.
    pub fn add_seg_token(&mut self) -> Result<()> {
        self.vocab = self.vocab.expand(SEG_TOKEN)?;
        self.cfg.lm.vocab_size = self.vocab.len();
        lm::resize_embeddings(&mut self.params, self.vocab.len())
    }

    /// Convenience constructor: base build plus `<SEG>` expansion.
    pub fn new(cfg: ModelConfig, lexicon: &[String], seed: u64) -> Result<Model<F>> {
        let mut m = Model::build_base(cfg, lexicon, seed)?;
        m.add_seg_token()?;
        Ok(m)
    }

    pub fn trainable(&self) -> BTreeSet<String> {
        lora::trainable_names(&self.params, &self.policy)
    }

    /// Frozen-backbone feature grid for an image, as a plain value array.
    /// Safe to cache per sample id whenever the vision tower has no
    /// trainable parameters.
    pub fn vision_grid_value(&self, image: &Image) -> Result<ArrayD<F>> {
        let leaves = self.params.frozen_leaves();
        let feats = vision::encode_image(&image.pixels, &leaves, &self.cfg.vision, &self.cfg.lora)?;
        Ok(feats.grid.value_clone())
    }

    pub fn vision_is_static(&self) -> bool {
        !self.cfg.lora.adapt_vision
    }

    fn features<'a>(
        &self,
        image: &Image,
        cached_grid: Option<&ArrayD<F>>,
        leaves: &Leaves<F>,
    ) -> Result<DenseFeatures<F>> {
        match cached_grid {
            Some(grid) => Ok(DenseFeatures {
                grid: Tensor::constant(grid.clone()),
                patch_size: self.cfg.vision.patch_size,
            }),
            None => vision::encode_image(&image.pixels, leaves, &self.cfg.vision, &self.cfg.lora),
        }
    }

    /// Teacher-forcing token sequence for a sample plus CE targets:
    /// (predicting row in original coordinates, target id) pairs covering the
    /// assistant answer and the closing EOS.
    pub fn training_sequence(&self, sample: &Sample) -> Result<(TokenSequence, Vec<(usize, u32)>)> {
        let text = tokenizer::conversation_text(&sample.instruction, &sample.answer_text);
        let body = tokenizer::encode(&text, &self.vocab);
        if body.ids.contains(&self.vocab.unk_id()) {
            return Err(SegError::Token(format!(
                "sample {}: conversation contains out-of-lexicon words",
                sample.id
            )));
        }
        let mut ids = Vec::with_capacity(body.ids.len() + 2);
        ids.push(self.vocab.bos_id());
        ids.extend_from_slice(&body.ids);
        ids.push(self.vocab.eos_id());
        let answer_span = body
            .role_spans
            .iter()
            .find(|&&(_, _, r)| r == Role::Assistant)
            .map(|&(s, e, _)| (s + 1, e + 1)) // shift for the prepended BOS
            .ok_or_else(|| SegError::Data(format!("sample {}: no assistant span", sample.id)))?;
        let mut targets = Vec::new();
        for q in answer_span.0..answer_span.1 {
            targets.push((q - 1, ids[q]));
        }
        // EOS is predicted from the last answer token.
        targets.push((ids.len() - 2, self.vocab.eos_id()));
        Ok((tokenizer::sequence_from_ids(ids, &self.vocab), targets))
    }

    /// Build the full loss graph for one sample and (optionally) backpropagate.
    /// Returns scalar loss statistics and, when `with_grad`, gradients for the
    /// trainable parameters.
    pub fn sample_loss(
        &self,
        sample: &Sample,
        cached_grid: Option<&ArrayD<F>>,
        trainable: &BTreeSet<String>,
        with_grad: bool,
    ) -> Result<(LossStats, BTreeMap<String, ArrayD<F>>)> {
        let leaves = if with_grad {
            self.params.leaves(trainable)
        } else {
            self.params.frozen_leaves()
        };
        let (seq, targets) = self.training_sequence(sample)?;
        let feats = self.features(&sample.image, cached_grid, &leaves)?;
        let patch_embeds = lm::patch_embed_for_lm(&feats.tokens(), &leaves);
        let out = lm::forward(&seq, Some(&patch_embeds), &leaves, &self.cfg.lm, &self.cfg.lora)?;
        let ce_targets: Vec<(usize, u32)> = targets
            .iter()
            .map(|&(row, id)| (out.expand.expand(row), id))
            .collect();
        let text = losses::text_ce(&out.logits, &ce_targets)?;
        let mut pairs = Vec::new();
        if !sample.target_masks.is_empty() {
            let h_seg = lm::extract_seg_embeddings(&out, &seq).ok_or_else(|| {
                SegError::Data(format!("sample {}: masks but no {SEG_TOKEN}", sample.id))
            })?;
            let logit_maps = decoder::decode_all(&h_seg, &feats, &leaves, &self.cfg.dec)?;
            if logit_maps.len() != sample.target_masks.len() {
                return Err(SegError::Data(format!(
                    "sample {}: {} predicted masks vs {} targets",
                    sample.id,
                    logit_maps.len(),
                    sample.target_masks.len()
                )));
            }
            for (map, target) in logit_maps.into_iter().zip(&sample.target_masks) {
                let t = target.bits.mapv(|b| F::c(b as f64)).into_dyn();
                pairs.push((map, t));
            }
        }
        let bundle = losses::total_loss(text, &pairs, &self.weights);
        let stats = LossStats {
            total: bundle.total.item().as_f64(),
            l_txt: bundle.l_txt,
            l_bce: bundle.l_bce,
            l_dice: bundle.l_dice,
        };
        if !stats.total.is_finite() {
            return Err(SegError::Numerical(format!(
                "non-finite loss on sample {}",
                sample.id
            )));
        }
        let grads = if with_grad {
            bundle.total.backward();
            leaves.grads()
        } else {
            BTreeMap::new()
        };
        Ok((stats, grads))
    }

    /// Teacher-forced masks: feed the ground-truth conversation and decode a
    /// mask per `<SEG>` token in the reference answer. Used by the
    /// oracle-text evaluation mode to isolate the mask head from generation.
    pub fn forced_masks(&self, sample: &Sample) -> Result<Vec<BinaryMask>> {
        let leaves = self.params.frozen_leaves();
        let (seq, _) = self.training_sequence(sample)?;
        let feats = self.features(&sample.image, None, &leaves)?;
        let patch_embeds = lm::patch_embed_for_lm(&feats.tokens(), &leaves);
        let out = lm::forward(&seq, Some(&patch_embeds), &leaves, &self.cfg.lm, &self.cfg.lora)?;
        let mut masks = Vec::new();
        if let Some(h_seg) = lm::extract_seg_embeddings(&out, &seq) {
            for map in decoder::decode_all(&h_seg, &feats, &leaves, &self.cfg.dec)? {
                masks.push(decoder::binarize(&map.value_clone(), 0.0));
            }
        }
        Ok(masks)
    }

    /// Generation path: greedy-decode an answer for the instruction, then
    /// decode one binary mask per emitted `<SEG>` token.
    pub fn predict(&self, image: &Image, instruction: &str, max_new: usize) -> Result<Prediction<F>> {
        let leaves = self.params.frozen_leaves();
        let feats = self.features(image, None, &leaves)?;
        let patch_embeds = lm::patch_embed_for_lm(&feats.tokens(), &leaves);
        let prompt_text = tokenizer::prompt_text(instruction);
        let body = tokenizer::encode(&prompt_text, &self.vocab);
        let mut ids = vec![self.vocab.bos_id()];
        ids.extend_from_slice(&body.ids);
        let prompt = tokenizer::sequence_from_ids(ids, &self.vocab);
        let full = lm::generate(
            &prompt,
            Some(&patch_embeds),
            &leaves,
            &self.cfg.lm,
            &self.cfg.lora,
            &self.vocab,
            max_new,
        )?;
        let mut masks = Vec::new();
        let mut mask_logits = Vec::new();
        if !full.seg_positions.is_empty() {
            let out = lm::forward(&full, Some(&patch_embeds), &leaves, &self.cfg.lm, &self.cfg.lora)?;
            let h_seg = lm::extract_seg_embeddings(&out, &full).unwrap();
            for map in decoder::decode_all(&h_seg, &feats, &leaves, &self.cfg.dec)? {
                let v = map.value_clone();
                masks.push(decoder::binarize(&v, 0.0));
                mask_logits.push(v);
            }
        }
        let answer_ids = &full.ids[prompt.ids.len()..];
        let shown: Vec<u32> = answer_ids
            .iter()
            .copied()
            .filter(|&id| id != self.vocab.eos_id())
            .collect();
        let answer_text = tokenizer::decode(&shown, &self.vocab)?;
        Ok(Prediction {
            answer_text,
            masks,
            mask_logits,
            sequence: full,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossStats {
    pub total: f64,
    pub l_txt: f64,
    pub l_bce: f64,
    pub l_dice: f64,
}

pub struct Prediction<F: Scalar> {
    pub answer_text: String,
    pub masks: Vec<BinaryMask>,
    pub mask_logits: Vec<ArrayD<F>>,
    pub sequence: TokenSequence,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{self, CorpusSpec};

    fn tiny_model(seed: u64) -> Model<f32> {
        Model::new(ModelConfig::tiny(), &synthdata::lexicon(), seed).unwrap()
    }

    fn small_corpus() -> crate::synthdata::Corpus {
        let spec = CorpusSpec {
            seed: 400,
            image_size: (32, 32),
            n_semantic: 6,
            n_referring: 6,
            n_vqa: 4,
            n_reasoning_train: 2,
            n_reasoning_val: 2,
            n_reasoning_test: 2,
            split_fractions: (0.8, 0.1, 0.1),
        };
        synthdata::build_corpus(&spec).unwrap()
    }

    #[test]
    fn build_is_deterministic_and_seg_aware() {
        let a = tiny_model(5);
        let b = tiny_model(5);
        assert_eq!(a.params.len(), b.params.len());
        for ((na, va), (nb, vb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb, "parameter {na} differs across identical seeds");
        }
        let c = tiny_model(6);
        let any_diff = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, va), (_, vc))| va != vc);
        assert!(any_diff, "different seeds should give different init");
        assert!(a.vocab.seg_id().is_some());
        assert_eq!(a.params.get("lm.embed_tokens").shape()[0], a.vocab.len());
    }

    #[test]
    fn training_sequence_targets_cover_answer_and_eos() {
        let m = tiny_model(1);
        let corpus = small_corpus();
        let sample = corpus
            .train
            .samples
            .iter()
            .find(|s| !s.target_masks.is_empty())
            .unwrap();
        let (seq, targets) = m.training_sequence(sample).unwrap();
        assert_eq!(seq.ids[0], m.vocab.bos_id());
        assert_eq!(*seq.ids.last().unwrap(), m.vocab.eos_id());
        // Every target is predicted from the immediately preceding row.
        for &(row, id) in &targets {
            assert_eq!(seq.ids[row + 1], id);
        }
        // Last target is the EOS itself; answer targets include each <SEG>.
        assert_eq!(targets.last().unwrap().1, m.vocab.eos_id());
        let seg = m.vocab.seg_id().unwrap();
        let seg_targets = targets.iter().filter(|&&(_, id)| id == seg).count();
        assert_eq!(seg_targets, sample.seg_count());
        // No target row precedes the assistant marker.
        let asst = m.vocab.id(tokenizer::ASSISTANT).unwrap();
        let marker_pos = seq.ids.iter().position(|&i| i == asst).unwrap();
        assert!(targets.iter().all(|&(row, _)| row > marker_pos));
    }

    #[test]
    fn sample_loss_is_finite_and_grads_hit_trainable_only() {
        let m = tiny_model(2);
        let corpus = small_corpus();
        let trainable = m.trainable();
        let sample = corpus
            .train
            .samples
            .iter()
            .find(|s| !s.target_masks.is_empty())
            .unwrap();
        let grid = m.vision_grid_value(&sample.image).unwrap();
        let (stats, grads) = m.sample_loss(sample, Some(&grid), &trainable, true).unwrap();
        assert!(stats.total.is_finite() && stats.total > 0.0);
        assert!(stats.l_bce > 0.0 && stats.l_dice > 0.0);
        assert!(!grads.is_empty());
        for name in grads.keys() {
            assert!(trainable.contains(name), "gradient for frozen {name}");
        }
        // The mask path must reach γ and the decoder.
        assert!(grads.contains_key("gamma.fc1.w"));
        assert!(grads.contains_key("dec.up2.w"));
        assert!(grads.contains_key("lm.embed_tokens"));
        // VQA sample: text loss only.
        let vqa = corpus
            .train
            .samples
            .iter()
            .find(|s| s.target_masks.is_empty())
            .unwrap();
        let grid = m.vision_grid_value(&vqa.image).unwrap();
        let (stats, _) = m.sample_loss(vqa, Some(&grid), &trainable, false).unwrap();
        assert_eq!(stats.l_bce, 0.0);
        assert!(stats.l_txt > 0.0);
    }

    #[test]
    fn cached_and_fresh_vision_features_agree() {
        let m = tiny_model(3);
        let corpus = small_corpus();
        let sample = &corpus.train.samples[0];
        let grid = m.vision_grid_value(&sample.image).unwrap();
        let trainable = m.trainable();
        let (a, _) = m.sample_loss(sample, Some(&grid), &trainable, false).unwrap();
        let (b, _) = m.sample_loss(sample, None, &trainable, false).unwrap();
        assert!((a.total - b.total).abs() < 1e-6, "{} vs {}", a.total, b.total);
    }

    #[test]
    fn predict_shapes_and_mask_count_match_generated_segs() {
        let m = tiny_model(4);
        let corpus = small_corpus();
        let sample = &corpus.train.samples[0];
        let pred = m.predict(&sample.image, &sample.instruction, 12).unwrap();
        assert_eq!(pred.masks.len(), pred.sequence.seg_positions.len());
        for mask in &pred.masks {
            assert_eq!(mask.height(), sample.image.height());
            assert_eq!(mask.width(), sample.image.width());
        }
        // Deterministic.
        let again = m.predict(&sample.image, &sample.instruction, 12).unwrap();
        assert_eq!(again.answer_text, pred.answer_text);
        assert_eq!(again.masks, pred.masks);
    }
}
