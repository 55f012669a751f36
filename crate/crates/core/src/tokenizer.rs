//! WordPiece-style subword tokenizer and vocabulary.
//!
//! Text is NFKC-normalized and lowercased, split into words (maximal
//! alphanumeric runs; every other non-whitespace character is its own word),
//! and each word is encoded by greedy longest-prefix matching against the
//! vocabulary. Pieces that continue a word carry the `##` prefix.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// First id eligible for random-replacement draws and vocab content.
pub const FIRST_CONTENT_ID: usize = SPECIAL_TOKENS.len();

/// Words longer than this many characters encode as [UNK] outright.
const MAX_WORD_CHARS: usize = 100;

/// NFKC normalization followed by lowercasing.
pub fn normalize(text: &str) -> String {
    text.nfkc().collect::<String>().to_lowercase()
}

/// Splits normalized text into words: maximal alphanumeric runs, with every
/// remaining non-whitespace character standing alone.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut words = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else {
            if let Some(s) = start.take() {
                words.push(&text[s..i]);
            }
            if !c.is_whitespace() {
                words.push(&text[i..i + c.len_utf8()]);
            }
        }
    }
    if let Some(s) = start {
        words.push(&text[s..]);
    }
    words
}

/// Token-string to id bijection with the five specials fixed at ids 0-4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(Error::Vocab(format!(
                "{} tokens is fewer than the {} specials",
                tokens.len(),
                SPECIAL_TOKENS.len()
            )));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Vocab(format!(
                    "token {i} must be {want}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, lookup })
    }

    /// Builds a vocabulary from corpus text: all word substrings (whole-word
    /// prefixes as plain pieces, interior substrings as `##` continuations)
    /// are ranked by frequency descending, ties broken lexicographically
    /// ascending, and the top entries fill the budget after the specials.
    pub fn build_from_text(text: &str, target_size: usize, min_frequency: usize) -> Result<Self> {
        if target_size < SPECIAL_TOKENS.len() {
            return Err(Error::Vocab(format!(
                "target size {target_size} is below the {} specials",
                SPECIAL_TOKENS.len()
            )));
        }
        let mut word_freq: HashMap<String, usize> = HashMap::new();
        let mut saw_any = false;
        for line in text.lines() {
            let norm = normalize(line);
            for w in split_words(&norm) {
                saw_any = true;
                *word_freq.entry(w.to_string()).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(Error::Vocab("corpus contains no words".into()));
        }
        let mut piece_freq: HashMap<String, usize> = HashMap::new();
        for (word, freq) in &word_freq {
            let chars: Vec<char> = word.chars().collect();
            if chars.len() > MAX_WORD_CHARS {
                continue;
            }
            for s in 0..chars.len() {
                let mut piece = if s == 0 { String::new() } else { "##".to_string() };
                for &c in &chars[s..] {
                    piece.push(c);
                    *piece_freq.entry(piece.clone()).or_insert(0) += freq;
                }
            }
        }
        let mut candidates: Vec<(String, usize)> = piece_freq
            .into_iter()
            .filter(|(_, f)| *f >= min_frequency.max(1))
            .collect();
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let budget = target_size - SPECIAL_TOKENS.len();
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(candidates.into_iter().take(budget).map(|(p, _)| p));
        Vocab::from_tokens(tokens)
    }

    pub fn build(corpus_path: &Path, target_size: usize, min_frequency: usize) -> Result<Self> {
        let text = std::fs::read_to_string(corpus_path)
            .map_err(|e| Error::corpus(corpus_path, e.to_string()))?;
        if text.trim().is_empty() {
            return Err(Error::corpus(corpus_path, "empty corpus"));
        }
        Self::build_from_text(&text, target_size, min_frequency)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or(Error::IdOutOfRange {
                id,
                vocab_size: self.tokens.len(),
            })
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::corpus(path, format!("cannot open vocab: {e}")))?;
        let mut tokens = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            tokens.push(line?);
        }
        Vocab::from_tokens(tokens)
    }

    /// Greedy longest-match piece ids for one normalized word; a word with no
    /// full tiling (or over the length cap) becomes a single [UNK].
    pub fn word_to_pieces(&self, word: &str) -> Vec<usize> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
            return vec![UNK_ID];
        }
        let mut pieces = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > pos {
                let mut cand = if pos == 0 { String::new() } else { "##".to_string() };
                cand.extend(&chars[pos..end]);
                if let Some(&id) = self.lookup.get(&cand) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    pos = end;
                }
                None => return vec![UNK_ID],
            }
        }
        pieces
    }

    /// Normalizes, splits, and tokenizes free text into piece ids.
    pub fn text_to_pieces(&self, text: &str) -> Vec<usize> {
        let norm = normalize(text);
        split_words(&norm)
            .into_iter()
            .flat_map(|w| self.word_to_pieces(w))
            .collect()
    }
}

/// One model input: ids with [CLS]/[SEP] framing, 0/1 segment ids, and a
/// mask marking structural positions ([CLS], [SEP], [PAD]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<u8>,
    pub special_mask: Vec<bool>,
}

impl EncodedSequence {
    /// Count of non-pad positions. Padding is always a suffix.
    pub fn real_len(&self) -> usize {
        self.ids.iter().take_while(|&&id| id != PAD_ID).count()
    }
}

fn finish(
    mut ids: Vec<usize>,
    mut segments: Vec<u8>,
    mut specials: Vec<bool>,
    max_len: usize,
) -> EncodedSequence {
    while ids.len() < max_len {
        ids.push(PAD_ID);
        segments.push(0);
        specials.push(true);
    }
    EncodedSequence {
        ids,
        segment_ids: segments,
        special_mask: specials,
    }
}

/// `[CLS] text [SEP]` with truncation to max_len and [PAD] fill; segment 0.
pub fn encode_single(text: &str, vocab: &Vocab, max_len: usize) -> EncodedSequence {
    assert!(max_len >= 3, "max_len {max_len} cannot fit [CLS] x [SEP]");
    let mut pieces = vocab.text_to_pieces(text);
    pieces.truncate(max_len - 2);
    let mut ids = vec![CLS_ID];
    let mut specials = vec![true];
    for p in pieces {
        ids.push(p);
        specials.push(false);
    }
    ids.push(SEP_ID);
    specials.push(true);
    let segments = vec![0u8; ids.len()];
    finish(ids, segments, specials, max_len)
}

/// `[CLS] a [SEP] b [SEP]` with longest-first truncation; segment 1 covers
/// `b [SEP]`.
pub fn encode_pair(a: &str, b: &str, vocab: &Vocab, max_len: usize) -> EncodedSequence {
    assert!(max_len >= 5, "max_len {max_len} cannot fit a pair skeleton");
    let mut pa = vocab.text_to_pieces(a);
    let mut pb = vocab.text_to_pieces(b);
    let budget = max_len - 3;
    while pa.len() + pb.len() > budget {
        if pa.len() > pb.len() {
            pa.pop();
        } else {
            pb.pop();
        }
    }
    let mut ids = vec![CLS_ID];
    let mut segments = vec![0u8];
    let mut specials = vec![true];
    for p in pa {
        ids.push(p);
        segments.push(0);
        specials.push(false);
    }
    ids.push(SEP_ID);
    segments.push(0);
    specials.push(true);
    for p in pb {
        ids.push(p);
        segments.push(1);
        specials.push(false);
    }
    ids.push(SEP_ID);
    segments.push(1);
    specials.push(true);
    finish(ids, segments, specials, max_len)
}

/// Inverse mapping: specials dropped, `##` pieces joined to the predecessor,
/// other pieces space-separated.
pub fn decode(ids: &[usize], vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id)?;
        if id < FIRST_CONTENT_ID {
            continue;
        }
        if let Some(rest) = tok.strip_prefix("##") {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
    }
    Ok(out)
}
