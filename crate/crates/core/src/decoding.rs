//! Beam search over chunks, separator-based output splitting, sliding-window
//! document translation, and per-position assembly.
//!
//! Sliding-window protocol: every window of `k` consecutive source sentences
//! is translated as one chunk, so sentence `i` receives a translation at every
//! window position `j <= min(i, k)`. Inference consumes source-side windows
//! only; context sentences are re-translated as part of each chunk rather
//! than conditioned on previous outputs.

use crate::attention::DropoutCtx;
use crate::data::{chunk_source_sentences, Vocab};
use crate::error::{Error, Result};
use crate::model::{BoundParams, Model};
use crate::numerics::{NodeId, Scalar, Tape};
use crate::TokenId;

/// A partial translation on the beam.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Generated tokens, excluding `bos`; a finished hypothesis ends in `eos`.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone)]
pub struct BeamOptions {
    pub beam_size: usize,
    pub max_len: usize,
    /// Length-normalization exponent: candidates rank by `log_prob / len^alpha`.
    pub alpha: f64,
    /// Ids never proposed as continuations (pad, bos).
    pub forbid: Vec<TokenId>,
    /// Hypotheses may not finish before generating this many real tokens.
    pub min_len: usize,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions {
            beam_size: 4,
            max_len: 128,
            alpha: 0.6,
            forbid: vec![],
            min_len: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BeamResult {
    /// Best sequence without `bos`/`eos`.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// Set when no hypothesis finished within `max_len`.
    pub truncated: bool,
}

/// Anything that can report next-token log-probabilities for a prefix of
/// generated tokens (the implementation supplies `bos` itself).
pub trait SeqScorer {
    fn vocab_size(&self) -> usize;
    fn eos_id(&self) -> TokenId;
    fn step_log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

fn normalized(score: f64, len: usize, alpha: f64) -> f64 {
    score / (len.max(1) as f64).powf(alpha)
}

/// Length-normalized beam search with deterministic tie-breaking (score, then
/// token id, then parent insertion order).
pub fn beam_search(scorer: &mut impl SeqScorer, opts: &BeamOptions) -> Result<BeamResult> {
    if opts.beam_size == 0 {
        return Err(Error::Decode("beam size must be at least 1".into()));
    }
    let eos = scorer.eos_id();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..opts.max_len {
        if live.is_empty() {
            break;
        }
        // (score, token, parent index)
        let mut candidates: Vec<(f64, TokenId, usize)> = Vec::new();
        for (pi, hyp) in live.iter().enumerate() {
            let lp = scorer.step_log_probs(&hyp.tokens)?;
            debug_assert_eq!(lp.len(), scorer.vocab_size());
            for (tok, &p) in lp.iter().enumerate() {
                let tok = tok as TokenId;
                if opts.forbid.contains(&tok) {
                    continue;
                }
                if tok == eos && hyp.tokens.len() < opts.min_len {
                    continue;
                }
                candidates.push((hyp.log_prob + p, tok, pi));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(opts.beam_size);
        for &(score, tok, pi) in candidates.iter().take(opts.beam_size) {
            let mut tokens = live[pi].tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis {
                tokens,
                log_prob: score,
                finished: tok == eos,
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }

    let pick = |pool: &[Hypothesis]| -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, h) in pool.iter().enumerate() {
            let s = normalized(h.log_prob, h.tokens.len(), opts.alpha);
            match best {
                Some((_, bs)) if s <= bs => {}
                _ => best = Some((i, s)),
            }
        }
        best.map(|(i, _)| i)
    };

    if let Some(i) = pick(&finished) {
        let h = &finished[i];
        let mut tokens = h.tokens.clone();
        tokens.pop(); // strip eos
        return Ok(BeamResult {
            tokens,
            log_prob: h.log_prob,
            truncated: false,
        });
    }
    match pick(&live) {
        Some(i) => Ok(BeamResult {
            tokens: live[i].tokens.clone(),
            log_prob: live[i].log_prob,
            truncated: true,
        }),
        None => Err(Error::Decode("beam search produced no hypotheses".into())),
    }
}

/// How a chunk's separator count compared with the expected sentence count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Exact,
    Underflow,
    Overflow,
}

#[derive(Debug, Clone, Copy)]
pub struct SplitDiagnostics {
    pub expected: usize,
    pub found: usize,
}

impl SplitDiagnostics {
    pub fn kind(&self) -> SplitKind {
        match self.found.cmp(&self.expected) {
            std::cmp::Ordering::Equal => SplitKind::Exact,
            std::cmp::Ordering::Less => SplitKind::Underflow,
            std::cmp::Ordering::Greater => SplitKind::Overflow,
        }
    }
}

/// Split chunk output at separators into exactly `expected_k` sentences:
/// missing sentences pad as empty at the tail, surplus splits merge into the
/// final sentence. Always total.
pub fn split_sentences(
    tokens: &[TokenId],
    sep_id: TokenId,
    expected_k: usize,
) -> (Vec<Vec<TokenId>>, SplitDiagnostics) {
    let mut raw: Vec<Vec<TokenId>> = vec![Vec::new()];
    for &t in tokens {
        if t == sep_id {
            raw.push(Vec::new());
        } else {
            raw.last_mut().unwrap().push(t);
        }
    }
    let diag = SplitDiagnostics {
        expected: expected_k,
        found: raw.len(),
    };
    let mut out: Vec<Vec<TokenId>>;
    if raw.len() > expected_k && expected_k > 0 {
        out = raw[..expected_k - 1].to_vec();
        let merged: Vec<TokenId> = raw[expected_k - 1..].concat();
        out.push(merged);
    } else {
        out = raw;
        out.resize(expected_k, Vec::new());
    }
    (out, diag)
}

#[derive(Debug, Clone)]
pub struct WindowDiagnostic {
    pub window_start: usize,
    pub split: SplitDiagnostics,
    pub truncated: bool,
}

/// Per-document matrix of sentence translations indexed by (sentence index
/// `i`, window position `j`), both 1-based, defined for `j <= min(i, k)`.
#[derive(Debug, Clone)]
pub struct TranslationGrid {
    pub doc_id: usize,
    pub k: usize,
    pub n_sentences: usize,
    cells: Vec<Vec<Option<Vec<TokenId>>>>,
    pub diagnostics: Vec<WindowDiagnostic>,
}

impl TranslationGrid {
    pub fn new(doc_id: usize, k: usize, n_sentences: usize) -> Self {
        TranslationGrid {
            doc_id,
            k,
            n_sentences,
            cells: (1..=n_sentences)
                .map(|i| vec![None; i.min(k)])
                .collect(),
            diagnostics: Vec::new(),
        }
    }

    pub fn set(&mut self, i: usize, j: usize, tokens: Vec<TokenId>) {
        self.cells[i - 1][j - 1] = Some(tokens);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&Vec<TokenId>> {
        self.cells
            .get(i - 1)
            .and_then(|row| row.get(j - 1))
            .and_then(|c| c.as_ref())
    }

    /// Sentence `i` rendered from entry `(i, min(i, j))`, in document order.
    pub fn assemble_position(&self, j: usize) -> Result<Vec<Vec<TokenId>>> {
        if j == 0 || j > self.k {
            return Err(Error::Decode(format!(
                "position {j} outside 1..={}",
                self.k
            )));
        }
        (1..=self.n_sentences)
            .map(|i| {
                self.get(i, i.min(j)).cloned().ok_or_else(|| {
                    Error::Internal(format!(
                        "grid contract violation: missing entry ({i}, {})",
                        i.min(j)
                    ))
                })
            })
            .collect()
    }

    /// Tab-separated dump rows `doc<TAB>i<TAB>j<TAB>text`.
    pub fn dump_rows(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for i in 1..=self.n_sentences {
            for j in 1..=i.min(self.k) {
                if let Some(tokens) = self.get(i, j) {
                    out.push_str(&format!(
                        "{}\t{}\t{}\t{}\n",
                        self.doc_id,
                        i,
                        j,
                        vocab.decode(tokens)
                    ));
                }
            }
        }
        out
    }
}

/// Text-level grid, the round-trippable form of the dump format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextGrid {
    pub doc_id: usize,
    pub k: usize,
    pub n_sentences: usize,
    cells: Vec<Vec<Option<String>>>,
}

impl TextGrid {
    pub fn from_grid(grid: &TranslationGrid, vocab: &Vocab) -> Self {
        TextGrid {
            doc_id: grid.doc_id,
            k: grid.k,
            n_sentences: grid.n_sentences,
            cells: (1..=grid.n_sentences)
                .map(|i| {
                    (1..=i.min(grid.k))
                        .map(|j| grid.get(i, j).map(|t| vocab.decode(t)))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&str> {
        self.cells
            .get(i - 1)
            .and_then(|row| row.get(j - 1))
            .and_then(|c| c.as_deref())
    }

    pub fn assemble_position(&self, j: usize) -> Result<Vec<String>> {
        if j == 0 || j > self.k {
            return Err(Error::Decode(format!(
                "position {j} outside 1..={}",
                self.k
            )));
        }
        (1..=self.n_sentences)
            .map(|i| {
                self.get(i, i.min(j))
                    .map(str::to_string)
                    .ok_or_else(|| {
                        Error::Internal(format!(
                            "grid contract violation: missing entry ({i}, {})",
                            i.min(j)
                        ))
                    })
            })
            .collect()
    }
}

/// Parse concatenated `doc<TAB>i<TAB>j<TAB>text` rows into per-document grids.
pub fn parse_grid_dump(text: &str) -> Result<Vec<TextGrid>> {
    use std::collections::BTreeMap;
    let mut rows: BTreeMap<usize, Vec<(usize, usize, String)>> = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(4, '\t');
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Eval(format!("grid dump line {}: malformed", ln + 1)))
        };
        let doc = parse(parts.next())?;
        let i = parse(parts.next())?;
        let j = parse(parts.next())?;
        let sent = parts.next().unwrap_or("").to_string();
        rows.entry(doc).or_default().push((i, j, sent));
    }
    if rows.is_empty() {
        return Err(Error::Eval("grid dump is empty".into()));
    }
    let mut grids = Vec::new();
    for (doc_id, entries) in rows {
        let n = entries.iter().map(|e| e.0).max().unwrap_or(0);
        let k = entries.iter().map(|e| e.1).max().unwrap_or(0);
        let mut cells: Vec<Vec<Option<String>>> =
            (1..=n).map(|i| vec![None; i.min(k)]).collect();
        for (i, j, sent) in entries {
            if i == 0 || j == 0 || j > i.min(k) {
                return Err(Error::Eval(format!(
                    "grid dump: invalid cell ({i}, {j}) for doc {doc_id}"
                )));
            }
            cells[i - 1][j - 1] = Some(sent);
        }
        grids.push(TextGrid {
            doc_id,
            k,
            n_sentences: n,
            cells,
        });
    }
    Ok(grids)
}

/// Translates one source chunk to one target token sequence.
pub trait ChunkTranslator {
    fn translate_chunk(&mut self, src_chunk: &[TokenId], expected_k: usize) -> Result<BeamResult>;
}

/// Translate every sliding window of `k` sentences and file each sentence's
/// translation under its window position.
pub fn sliding_translate(
    translator: &mut impl ChunkTranslator,
    doc_id: usize,
    src_sentences: &[Vec<TokenId>],
    k: usize,
    sep_id: TokenId,
) -> Result<TranslationGrid> {
    if src_sentences.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut grid = TranslationGrid::new(doc_id, k, src_sentences.len());
    for (start, chunk_ids, k_actual) in chunk_source_sentences(src_sentences, k, 1, sep_id) {
        let result = translator.translate_chunk(&chunk_ids, k_actual)?;
        let (sents, split) = split_sentences(&result.tokens, sep_id, k_actual);
        if split.kind() != SplitKind::Exact || result.truncated {
            grid.diagnostics.push(WindowDiagnostic {
                window_start: start,
                split,
                truncated: result.truncated,
            });
        }
        for (idx, sent) in sents.into_iter().enumerate() {
            let i = start + idx + 1; // 1-based sentence index
            let j = idx + 1; // 1-based window position
            grid.set(i, j, sent);
        }
    }
    Ok(grid)
}

/// Incremental decoder for one source chunk: the encoder runs once, then each
/// scoring call extends the same tape with a fresh teacher-forced pass.
pub struct ChunkDecoder<'m, S: Scalar> {
    model: &'m Model<S>,
    tape: Tape<S>,
    bound: BoundParams,
    memory: NodeId,
    src: Vec<TokenId>,
}

impl<'m, S: Scalar> ChunkDecoder<'m, S> {
    pub fn new(model: &'m Model<S>, src: &[TokenId]) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let enc = model.encode(&mut tape, &bound, src, &mut DropoutCtx::off())?;
        Ok(ChunkDecoder {
            model,
            tape,
            bound,
            memory: enc.memory,
            src: src.to_vec(),
        })
    }
}

impl<S: Scalar> SeqScorer for ChunkDecoder<'_, S> {
    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_tgt
    }

    fn eos_id(&self) -> TokenId {
        self.model.cfg.eos_id
    }

    fn step_log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(self.model.cfg.bos_id);
        input.extend_from_slice(prefix);
        // Each scoring pass appends to the shared tape (bound parameters and
        // encoder memory live at the front) and releases its nodes once the
        // last logit row has been read out.
        let mark = self.tape.len();
        let dec = self.model.decode_step(
            &mut self.tape,
            &self.bound,
            self.memory,
            &self.src,
            &input,
            &mut DropoutCtx::off(),
        )?;
        let logits = self.tape.value(dec.logits);
        let last: Vec<f64> = logits
            .row(logits.rows() - 1)
            .iter()
            .map(|v| v.to_f64_exact())
            .collect();
        self.tape.truncate(mark);
        let max = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = last.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        Ok(last.into_iter().map(|v| v - max - log_sum).collect())
    }
}

/// Beam-search translator over a frozen model.
pub struct BeamTranslator<'m, S: Scalar> {
    pub model: &'m Model<S>,
    pub beam_size: usize,
    pub alpha: f64,
}

impl<'m, S: Scalar> BeamTranslator<'m, S> {
    pub fn new(model: &'m Model<S>, beam_size: usize, alpha: f64) -> Self {
        BeamTranslator {
            model,
            beam_size,
            alpha,
        }
    }
}

impl<S: Scalar> ChunkTranslator for BeamTranslator<'_, S> {
    fn translate_chunk(&mut self, src_chunk: &[TokenId], _expected_k: usize) -> Result<BeamResult> {
        let cfg = &self.model.cfg;
        let mut decoder = ChunkDecoder::new(self.model, src_chunk)?;
        let max_len = (2 * src_chunk.len() + 8).min(cfg.max_positions - 1);
        beam_search(
            &mut decoder,
            &BeamOptions {
                beam_size: self.beam_size,
                max_len,
                alpha: self.alpha,
                forbid: vec![cfg.pad_id, cfg.bos_id],
                min_len: 1,
            },
        )
    }
}
