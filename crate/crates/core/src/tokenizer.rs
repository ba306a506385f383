//! Word-level tokenizer over a closed synthetic lexicon, with atomic special
//! tokens and append-only vocabulary expansion for `<SEG>`.

use crate::datamodel::{IMAGE_TOKEN, SEG_TOKEN};
use crate::error::{Result, SegError};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

pub const PAD: &str = "<PAD>";
pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
pub const UNK: &str = "<UNK>";
pub const USER: &str = "USER";
pub const ASSISTANT: &str = "ASSISTANT";

const PUNCT: [char; 5] = ['.', ',', '?', '!', ':'];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build a vocabulary: specials first, then the given lexicon in order.
    /// `<SEG>` is deliberately not part of the base specials; it is added
    /// later through [`Vocabulary::expand`].
    pub fn build(lexicon: &[String]) -> Result<Self> {
        let mut v = Vocabulary {
            id_to_token: Vec::new(),
            token_to_id: HashMap::new(),
        };
        for sp in [PAD, BOS, EOS, UNK, USER, ASSISTANT, IMAGE_TOKEN] {
            v.push(sp)?;
        }
        for w in lexicon {
            if !v.token_to_id.contains_key(w) {
                v.push(w)?;
            }
        }
        Ok(v)
    }

    fn push(&mut self, token: &str) -> Result<u32> {
        if self.token_to_id.contains_key(token) {
            return Err(SegError::Token(format!("duplicate token {token}")));
        }
        let id = self.id_to_token.len() as u32;
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.id_to_token
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| SegError::Token(format!("unknown token id {id}")))
    }

    pub fn pad_id(&self) -> u32 {
        self.id(PAD).unwrap()
    }

    pub fn bos_id(&self) -> u32 {
        self.id(BOS).unwrap()
    }

    pub fn eos_id(&self) -> u32 {
        self.id(EOS).unwrap()
    }

    pub fn unk_id(&self) -> u32 {
        self.id(UNK).unwrap()
    }

    pub fn image_id(&self) -> u32 {
        self.id(IMAGE_TOKEN).unwrap()
    }

    pub fn seg_id(&self) -> Option<u32> {
        self.id(SEG_TOKEN)
    }

    /// Append a new token; existing ids are untouched.
    pub fn expand(&self, new_token: &str) -> Result<Vocabulary> {
        let mut next = self.clone();
        next.push(new_token)?;
        Ok(next)
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.id_to_token.join("\n");
        fs::write(path, body + "\n").map_err(|e| SegError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let body =
            fs::read_to_string(path).map_err(|e| SegError::io(path.display().to_string(), e))?;
        let mut v = Vocabulary {
            id_to_token: Vec::new(),
            token_to_id: HashMap::new(),
        };
        for line in body.lines() {
            v.push(line)?;
        }
        Ok(v)
    }
}

/// Tokenized conversation with role spans and special-token positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// (start, end) half-open spans per role, over `ids` indices.
    pub role_spans: Vec<(usize, usize, Role)>,
    pub image_positions: Vec<usize>,
    pub seg_positions: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Recompute special positions by scanning ids; used by invariant tests.
    pub fn positions_consistent(&self, vocab: &Vocabulary) -> bool {
        let img = vocab.image_id();
        let image_positions: Vec<usize> = self
            .ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == img)
            .map(|(i, _)| i)
            .collect();
        let seg_positions: Vec<usize> = match vocab.seg_id() {
            Some(seg) => self
                .ids
                .iter()
                .enumerate()
                .filter(|(_, &id)| id == seg)
                .map(|(i, _)| i)
                .collect(),
            None => vec![],
        };
        image_positions == self.image_positions && seg_positions == self.seg_positions
    }
}

/// Normalize text into word tokens: specials kept atomic and case-sensitive,
/// punctuation split off as its own tokens, everything else lowercased.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        // Peel punctuation from both ends so "image?" and "USER:" split.
        let mut leading = Vec::new();
        let mut trailing = Vec::new();
        loop {
            if let Some(c) = rest.chars().next().filter(|c| PUNCT.contains(c)) {
                leading.push(c.to_string());
                rest = &rest[c.len_utf8()..];
            } else if let Some(c) = rest.chars().last().filter(|c| PUNCT.contains(c)) {
                // Keep specials like <SEG> intact; they contain no punctuation.
                trailing.push(c.to_string());
                rest = &rest[..rest.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        out.extend(leading);
        if !rest.is_empty() {
            if rest == USER || rest == ASSISTANT || rest == IMAGE_TOKEN || rest == SEG_TOKEN {
                out.push(rest.to_string());
            } else {
                out.push(rest.to_lowercase());
            }
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

/// Encode normalized text. Unknown words map to `<UNK>`; no BOS/EOS added.
pub fn encode(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let words = normalize(text);
    let ids: Vec<u32> = words
        .iter()
        .map(|w| vocab.id(w).unwrap_or_else(|| vocab.unk_id()))
        .collect();
    sequence_from_ids(ids, vocab)
}

/// Build a [`TokenSequence`] from raw ids, recomputing positions and spans.
pub fn sequence_from_ids(ids: Vec<u32>, vocab: &Vocabulary) -> TokenSequence {
    let img = vocab.image_id();
    let seg = vocab.seg_id();
    let image_positions = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == img)
        .map(|(i, _)| i)
        .collect();
    let seg_positions = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| Some(id) == seg)
        .map(|(i, _)| i)
        .collect();
    let role_spans = role_spans(&ids, vocab);
    TokenSequence {
        ids,
        role_spans,
        image_positions,
        seg_positions,
    }
}

fn role_spans(ids: &[u32], vocab: &Vocabulary) -> Vec<(usize, usize, Role)> {
    let user = vocab.id(USER).unwrap();
    let assistant = vocab.id(ASSISTANT).unwrap();
    let colon = vocab.id(":");
    let mut spans = Vec::new();
    let mut open: Option<(usize, Role)> = None;
    for (i, &id) in ids.iter().enumerate() {
        let marker = if id == user {
            Some(Role::User)
        } else if id == assistant {
            Some(Role::Assistant)
        } else {
            None
        };
        if let Some(role) = marker {
            if let Some((start, r)) = open.take() {
                if start < i {
                    spans.push((start, i, r));
                }
            }
            // Payload starts after the marker and an optional colon.
            let mut start = i + 1;
            if colon.is_some() && ids.get(start) == colon.as_ref() {
                start += 1;
            }
            open = Some((start, role));
        }
    }
    if let Some((start, r)) = open {
        if start < ids.len() {
            spans.push((start, ids.len(), r));
        }
    }
    spans
}

/// Inverse of [`encode`] up to whitespace normalization.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        words.push(vocab.token(id)?.to_string());
    }
    Ok(words.join(" "))
}

/// Full teacher-forcing conversation text for a training sample.
pub fn conversation_text(instruction: &str, answer: &str) -> String {
    format!("{USER} : {IMAGE_TOKEN} {instruction} {ASSISTANT} : {answer}")
}

/// Prompt prefix for generation (no answer).
pub fn prompt_text(instruction: &str) -> String {
    format!("{USER} : {IMAGE_TOKEN} {instruction} {ASSISTANT} :")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let lex: Vec<String> = [
            "can", "you", "segment", "the", "circle", "in", "this", "image", "it", "is", "sure",
            ".", ",", "?", ":", "!",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Vocabulary::build(&lex).unwrap().expand(SEG_TOKEN).unwrap()
    }

    #[test]
    fn specials_tokenize_atomically() {
        let v = vocab();
        let ts = encode("It is <SEG>.", &v);
        assert_eq!(ts.seg_positions.len(), 1);
        assert_eq!(ts.ids[ts.seg_positions[0]], v.seg_id().unwrap());
        let ts = encode("<IMAGE>", &v);
        assert_eq!(ts.image_positions, vec![0]);
        assert_eq!(ts.ids.len(), 1);
    }

    #[test]
    fn round_trip_up_to_normalization() {
        let v = vocab();
        for text in [
            "Can you segment the circle in this image?",
            "USER : <IMAGE> can you segment the circle ? ASSISTANT : It is <SEG> .",
            "Sure, it is <SEG>.",
        ] {
            let ts = encode(text, &v);
            let decoded = decode(&ts.ids, &v).unwrap();
            let renorm = normalize(text).join(" ");
            assert_eq!(decoded, renorm);
            // idempotent on already-normalized text
            let ts2 = encode(&decoded, &v);
            assert_eq!(ts.ids, ts2.ids);
        }
    }

    #[test]
    fn unknown_word_maps_to_unk_and_unknown_id_errors() {
        let v = vocab();
        let ts = encode("segment the dragon", &v);
        assert_eq!(ts.ids[2], v.unk_id());
        assert!(decode(&[1_000_000], &v).is_err());
        assert_eq!(decode(&[], &v).unwrap(), "");
    }

    #[test]
    fn role_spans_cover_user_and_assistant_payload() {
        let v = vocab();
        let ts = encode(&conversation_text("can you segment the circle ?", "It is <SEG> ."), &v);
        assert_eq!(ts.role_spans.len(), 2);
        let (us, ue, ur) = ts.role_spans[0];
        let (as_, ae, ar) = ts.role_spans[1];
        assert_eq!(ur, Role::User);
        assert_eq!(ar, Role::Assistant);
        // User span starts at <IMAGE>, assistant span runs to the end.
        assert_eq!(ts.ids[us], v.image_id());
        assert!(ue < as_);
        assert_eq!(ae, ts.len());
        assert!(ts.seg_positions[0] >= as_);
    }

    #[test]
    fn expansion_is_append_only_and_id_stable() {
        let lex: Vec<String> = ["it", "is", "."].iter().map(|s| s.to_string()).collect();
        let base = Vocabulary::build(&lex).unwrap();
        let expanded = base.expand(SEG_TOKEN).unwrap();
        assert_eq!(expanded.len(), base.len() + 1);
        for id in 0..base.len() as u32 {
            assert_eq!(base.token(id).unwrap(), expanded.token(id).unwrap());
        }
        // Encoding of an old corpus is identical before and after expansion.
        let text = "it is .";
        assert_eq!(encode(text, &base).ids, encode(text, &expanded).ids);
        // Double expansion is an error.
        assert!(expanded.expand(SEG_TOKEN).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }
}
