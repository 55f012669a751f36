//! Pretraining data pipeline: corpus ingestion, batch assembly with a
//! bounded shuffle buffer, and dynamic token masking.
//!
//! A corpus file is UTF-8 text, one sentence per line, with blank lines
//! separating documents. Ingestion never crosses document boundaries.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::{
    encode_pair, EncodedSequence, Vocab, CLS_ID, FIRST_CONTENT_ID, MASK_ID, PAD_ID, SEP_ID,
};

/// Label value for positions the MLM loss ignores.
pub const IGNORE_ID: usize = usize::MAX;

/// Shuffle-buffer capacity in sequences for [`make_batches`].
pub const SHUFFLE_BUFFER: usize = 10_000;

/// How sentences combine into model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestMode {
    /// Adjacent sentence pairs within a document: (s0,s1), (s2,s3), ...
    /// A trailing unpaired sentence is dropped.
    Pair,
    /// Document text is concatenated and chunked into full-width windows;
    /// the final partial window is kept.
    Contiguous,
}

impl IngestMode {
    pub fn parse(s: &str) -> Result<IngestMode> {
        match s {
            "pair" => Ok(IngestMode::Pair),
            "contiguous" => Ok(IngestMode::Contiguous),
            _ => Err(Error::Config(format!(
                "mode must be pair or contiguous, got {s:?}"
            ))),
        }
    }
}

/// Streams encoded sequences from a corpus file, one document at a time, so
/// memory stays bounded by the largest document plus the shuffle buffer.
pub struct CorpusStream<'v> {
    lines: std::io::Lines<std::io::BufReader<std::fs::File>>,
    path: PathBuf,
    vocab: &'v Vocab,
    mode: IngestMode,
    max_len: usize,
    exhausted: bool,
    pending: std::collections::VecDeque<EncodedSequence>,
}

/// Opens `path` for streaming ingestion.
pub fn ingest_corpus<'v>(
    path: &Path,
    vocab: &'v Vocab,
    mode: IngestMode,
    max_len: usize,
) -> Result<CorpusStream<'v>> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::corpus(path, format!("cannot open: {e}")))?;
    Ok(CorpusStream {
        lines: std::io::BufReader::new(file).lines(),
        path: path.to_path_buf(),
        vocab,
        mode,
        max_len,
        exhausted: false,
        pending: std::collections::VecDeque::new(),
    })
}

/// Collects the whole corpus; errors if it yields no sequences.
pub fn ingest_all(
    path: &Path,
    vocab: &Vocab,
    mode: IngestMode,
    max_len: usize,
) -> Result<Vec<EncodedSequence>> {
    let stream = ingest_corpus(path, vocab, mode, max_len)?;
    let seqs: Vec<EncodedSequence> = stream.collect::<Result<_>>()?;
    if seqs.is_empty() {
        return Err(Error::corpus(path, "corpus produced no sequences"));
    }
    Ok(seqs)
}

impl CorpusStream<'_> {
    fn emit_document(&mut self, sentences: &[String]) {
        match self.mode {
            IngestMode::Pair => {
                for pair in sentences.chunks_exact(2) {
                    let e = encode_pair(&pair[0], &pair[1], self.vocab, self.max_len);
                    if e.real_len() > 3 {
                        self.pending.push_back(e);
                    }
                }
            }
            IngestMode::Contiguous => {
                let mut pieces = Vec::new();
                for s in sentences {
                    pieces.extend(self.vocab.text_to_pieces(s));
                }
                let window = self.max_len - 2;
                for chunk in pieces.chunks(window) {
                    let mut ids = vec![CLS_ID];
                    let mut specials = vec![true];
                    for &p in chunk {
                        ids.push(p);
                        specials.push(false);
                    }
                    ids.push(SEP_ID);
                    specials.push(true);
                    let mut segments = vec![0u8; ids.len()];
                    while ids.len() < self.max_len {
                        ids.push(PAD_ID);
                        segments.push(0);
                        specials.push(true);
                    }
                    self.pending.push_back(EncodedSequence {
                        ids,
                        segment_ids: segments,
                        special_mask: specials,
                    });
                }
            }
        }
    }
}

impl Iterator for CorpusStream<'_> {
    type Item = Result<EncodedSequence>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(seq) = self.pending.pop_front() {
                return Some(Ok(seq));
            }
            if self.exhausted {
                return None;
            }
            let mut sentences: Vec<String> = Vec::new();
            loop {
                match self.lines.next() {
                    Some(Ok(line)) => {
                        if line.trim().is_empty() {
                            if !sentences.is_empty() {
                                break;
                            }
                        } else {
                            sentences.push(line);
                        }
                    }
                    Some(Err(e)) => {
                        self.exhausted = true;
                        return Some(Err(Error::corpus(&self.path, format!("read error: {e}"))));
                    }
                    None => {
                        self.exhausted = true;
                        break;
                    }
                }
            }
            if !sentences.is_empty() {
                self.emit_document(&sentences);
            }
            if self.exhausted && self.pending.is_empty() {
                return None;
            }
        }
    }
}

/// Masking proportions for dynamic MLM corruption.
#[derive(Debug, Clone, Copy)]
pub struct MaskingPolicy {
    /// Probability a content position is selected for prediction.
    pub mask_prob: f64,
    /// Of selected: probability the input becomes [MASK].
    pub replace_with_mask: f64,
    /// Of selected: probability the input becomes a random content token.
    pub replace_with_random: f64,
    /// Of selected: probability the input keeps the original token.
    pub keep_original: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            mask_prob: 0.15,
            replace_with_mask: 0.8,
            replace_with_random: 0.1,
            keep_original: 0.1,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!(
                "mask_prob {} outside [0, 1]",
                self.mask_prob
            )));
        }
        let sum = self.replace_with_mask + self.replace_with_random + self.keep_original;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mask branch probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// A dense batch of token sequences, row-major `[batch, seq_len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
    pub segment_ids: Vec<u8>,
    /// True where the position holds real content or framing (not [PAD]).
    pub pad_mask: Vec<bool>,
    /// True at [CLS]/[SEP]/[PAD]: positions never selected for masking.
    pub special_mask: Vec<bool>,
    /// Per-position MLM target, IGNORE_ID where no prediction is asked.
    pub mlm_labels: Vec<usize>,
    /// Per-row count of non-pad positions (padding is a row suffix).
    pub lens: Vec<usize>,
}

impl TokenBatch {
    /// Packs sequences at the width of the longest row.
    pub fn from_sequences(seqs: &[EncodedSequence]) -> TokenBatch {
        assert!(!seqs.is_empty(), "a batch needs at least one sequence");
        let seq_len = seqs.iter().map(|s| s.real_len()).max().unwrap().max(1);
        let batch = seqs.len();
        let n = batch * seq_len;
        let mut out = TokenBatch {
            batch,
            seq_len,
            ids: Vec::with_capacity(n),
            segment_ids: Vec::with_capacity(n),
            pad_mask: Vec::with_capacity(n),
            special_mask: Vec::with_capacity(n),
            mlm_labels: vec![IGNORE_ID; n],
            lens: Vec::with_capacity(batch),
        };
        for s in seqs {
            let len = s.real_len();
            out.lens.push(len);
            for t in 0..seq_len {
                if t < len {
                    out.ids.push(s.ids[t]);
                    out.segment_ids.push(s.segment_ids[t]);
                    out.pad_mask.push(true);
                    out.special_mask.push(s.special_mask[t]);
                } else {
                    out.ids.push(PAD_ID);
                    out.segment_ids.push(0);
                    out.pad_mask.push(false);
                    out.special_mask.push(true);
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.batch * self.seq_len;
        if self.ids.len() != n
            || self.segment_ids.len() != n
            || self.pad_mask.len() != n
            || self.special_mask.len() != n
            || self.mlm_labels.len() != n
            || self.lens.len() != self.batch
        {
            return Err(Error::Config("token batch field lengths disagree".into()));
        }
        for (b, &len) in self.lens.iter().enumerate() {
            if len == 0 || len > self.seq_len {
                return Err(Error::Config(format!("row {b} length {len} invalid")));
            }
            for t in 0..self.seq_len {
                let i = b * self.seq_len + t;
                if self.pad_mask[i] != (t < len) {
                    return Err(Error::Config(format!(
                        "row {b} pad mask is not a suffix at {t}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-attention-row valid lengths replicated across heads and query
    /// positions, for masked softmax over `[batch, heads, L, L]` scores.
    pub fn attention_valid(&self, heads: usize) -> Vec<usize> {
        let mut valid = Vec::with_capacity(self.batch * heads * self.seq_len);
        for &len in &self.lens {
            for _ in 0..heads * self.seq_len {
                valid.push(len);
            }
        }
        valid
    }
}

/// Applies 80/10/10 dynamic masking. Positions marked special are never
/// selected. Draw order is fixed: positions scan row-major; each eligible
/// position consumes one uniform draw; a selected position consumes a second
/// draw for the branch, and the random branch one `next_below` draw.
pub fn dynamic_mask(
    batch: &TokenBatch,
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<TokenBatch> {
    policy.validate()?;
    if vocab_size <= FIRST_CONTENT_ID {
        return Err(Error::Config(format!(
            "vocab size {vocab_size} leaves no content tokens to sample"
        )));
    }
    if batch.mlm_labels.iter().any(|&l| l != IGNORE_ID) {
        return Err(Error::Config("batch already carries mlm labels".into()));
    }
    let mut out = batch.clone();
    for i in 0..out.ids.len() {
        if out.special_mask[i] || !out.pad_mask[i] {
            continue;
        }
        if rng.next_f64() >= policy.mask_prob {
            continue;
        }
        out.mlm_labels[i] = out.ids[i];
        let branch = rng.next_f64();
        if branch < policy.replace_with_mask {
            out.ids[i] = MASK_ID;
        } else if branch < policy.replace_with_mask + policy.replace_with_random {
            out.ids[i] =
                FIRST_CONTENT_ID + rng.next_below((vocab_size - FIRST_CONTENT_ID) as u64) as usize;
        }
        // else: keep the original token; the label still asks for it.
    }
    Ok(out)
}

/// Batches a sequence stream through a bounded shuffle buffer, lazily.
///
/// Algorithm (fixed, so an independent reimplementation can replay it):
/// 1. Fill a buffer with up to [`SHUFFLE_BUFFER`] sequences from the source.
/// 2. While the buffer is non-empty: draw `i = rng.next_below(buffer.len())`,
///    emit `buffer[i]`, then refill that slot with the next source item, or
///    `swap_remove(i)` once the source is exhausted.
/// 3. Group emitted sequences into batches of `batch_size`; with `drop_last`
///    a trailing short group is discarded, otherwise it forms a short batch.
pub fn make_batches<I>(
    source: I,
    batch_size: usize,
    rng: Rng,
    drop_last: bool,
) -> Result<BatchStream<I::IntoIter>>
where
    I: IntoIterator<Item = Result<EncodedSequence>>,
{
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(BatchStream {
        source: source.into_iter(),
        buffer: Vec::new(),
        rng,
        batch_size,
        drop_last,
        filled: false,
        done: false,
    })
}

/// Iterator over shuffled [`TokenBatch`]es; see [`make_batches`].
pub struct BatchStream<I: Iterator<Item = Result<EncodedSequence>>> {
    source: I,
    buffer: Vec<EncodedSequence>,
    rng: Rng,
    batch_size: usize,
    drop_last: bool,
    filled: bool,
    done: bool,
}

impl<I: Iterator<Item = Result<EncodedSequence>>> Iterator for BatchStream<I> {
    type Item = Result<TokenBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if !self.filled {
            self.filled = true;
            while self.buffer.len() < SHUFFLE_BUFFER {
                match self.source.next() {
                    Some(Ok(seq)) => self.buffer.push(seq),
                    Some(Err(e)) => {
                        self.done = true;
                        return Some(Err(e));
                    }
                    None => break,
                }
            }
        }
        let mut group: Vec<EncodedSequence> = Vec::with_capacity(self.batch_size);
        while group.len() < self.batch_size && !self.buffer.is_empty() {
            let i = self.rng.next_below(self.buffer.len() as u64) as usize;
            let taken = match self.source.next() {
                Some(Ok(seq)) => std::mem::replace(&mut self.buffer[i], seq),
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                None => self.buffer.swap_remove(i),
            };
            group.push(taken);
        }
        if group.is_empty() || (group.len() < self.batch_size && self.drop_last) {
            self.done = true;
            return None;
        }
        Some(Ok(TokenBatch::from_sequences(&group)))
    }
}
