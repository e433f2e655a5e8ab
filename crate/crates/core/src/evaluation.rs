//! BLEU scoring, per-position BLEU reports, and contrastive consistency
//! accuracy.
//!
//! BLEU reproduces the corpus-level metric semantics of the classic reference
//! script: modified n-gram precision with clipping up to 4-grams, a strict
//! geometric mean, and the brevity penalty `exp(1 - r/c)` for `c < r`. Its
//! international tokenization is reduced to a documented simplification —
//! whitespace split plus separation of terminal punctuation.

use crate::data::Vocab;
use crate::decoding::TextGrid;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Scalar;
use crate::TokenId;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

const MAX_NGRAM: usize = 4;
const TERMINAL_PUNCT: [char; 6] = ['.', ',', '!', '?', ';', ':'];

/// Whitespace split with terminal punctuation separated into its own tokens.
pub fn tokenize_for_bleu(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in line.split_whitespace() {
        let mut tail = Vec::new();
        let mut word = raw;
        while let Some(last) = word.chars().last() {
            if TERMINAL_PUNCT.contains(&last) {
                tail.push(last.to_string());
                word = &word[..word.len() - last.len_utf8()];
            } else {
                break;
            }
        }
        if !word.is_empty() {
            out.push(word.to_string());
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// Corpus BLEU on the 0-100 scale.
    pub bleu: f64,
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.4}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            100.0 * self.precisions[0],
            100.0 * self.precisions[1],
            100.0 * self.precisions[2],
            100.0 * self.precisions[3],
            self.brevity_penalty,
            self.hyp_len as f64 / self.ref_len.max(1) as f64,
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU of hypothesis sentences against single references.
pub fn bleu(hyps: &[String], refs: &[String]) -> Result<BleuReport> {
    if hyps.is_empty() || refs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if hyps.len() != refs.len() {
        return Err(Error::Eval(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matched = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        let h_toks = tokenize_for_bleu(h);
        let r_toks = tokenize_for_bleu(r);
        hyp_len += h_toks.len();
        ref_len += r_toks.len();
        for n in 1..=MAX_NGRAM {
            let h_counts = ngram_counts(&h_toks, n);
            let r_counts = ngram_counts(&r_toks, n);
            for (gram, &c) in &h_counts {
                total[n - 1] += c;
                matched[n - 1] += c.min(r_counts.get(gram).copied().unwrap_or(0));
            }
        }
    }
    let mut precisions = [0.0; MAX_NGRAM];
    for n in 0..MAX_NGRAM {
        precisions[n] = if total[n] > 0 {
            matched[n] as f64 / total[n] as f64
        } else {
            0.0
        };
    }
    let brevity_penalty = if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    // Strict geometric mean over the n-gram orders the corpus actually has:
    // a zero precision with a nonzero denominator collapses the score, while
    // orders with no n-grams at all (every sentence shorter than n) drop out,
    // so a hypothesis identical to its reference always scores 100.
    let present: Vec<usize> = (0..MAX_NGRAM).filter(|&n| total[n] > 0).collect();
    let bleu = if present.is_empty() || present.iter().any(|&n| matched[n] == 0) {
        0.0
    } else {
        let mean_log: f64 =
            present.iter().map(|&n| precisions[n].ln()).sum::<f64>() / present.len() as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// BLEU by window position: assemble every document at position `j`, then
/// score the whole corpus, for `j = 1..=k`.
#[derive(Debug, Clone)]
pub struct PerPositionReport {
    pub rows: Vec<(usize, BleuReport)>,
}

impl PerPositionReport {
    /// Machine-readable rows `j<TAB>bleu`.
    pub fn render_rows(&self) -> String {
        self.rows
            .iter()
            .map(|(j, r)| format!("{j}\t{:.2}\n", r.bleu))
            .collect()
    }

    /// Aligned text table.
    pub fn render_table(&self) -> String {
        let mut out = String::from("  j    BLEU\n");
        for (j, r) in &self.rows {
            out.push_str(&format!("{j:>3}  {:>6.2}\n", r.bleu));
        }
        out
    }

    pub fn bleu_at(&self, j: usize) -> Option<f64> {
        self.rows.iter().find(|(jj, _)| *jj == j).map(|(_, r)| r.bleu)
    }
}

pub fn per_position_report(
    grids: &[TextGrid],
    ref_docs: &[Vec<String>],
    k: usize,
) -> Result<PerPositionReport> {
    if grids.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if grids.len() != ref_docs.len() {
        return Err(Error::Eval(format!(
            "{} grids vs {} reference documents",
            grids.len(),
            ref_docs.len()
        )));
    }
    let refs: Vec<String> = ref_docs.iter().flatten().cloned().collect();
    let mut rows = Vec::with_capacity(k);
    for j in 1..=k {
        let mut hyps = Vec::with_capacity(refs.len());
        for grid in grids {
            hyps.extend(grid.assemble_position(j)?);
        }
        rows.push((j, bleu(&hyps, &refs)?));
    }
    Ok(PerPositionReport { rows })
}

// ---- contrastive consistency --------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phenomenon {
    Deixis,
    LexicalCohesion,
    EllipsisVp,
    EllipsisInfl,
}

impl Phenomenon {
    pub fn as_str(self) -> &'static str {
        match self {
            Phenomenon::Deixis => "deixis",
            Phenomenon::LexicalCohesion => "lexical-cohesion",
            Phenomenon::EllipsisVp => "ellipsis-vp",
            Phenomenon::EllipsisInfl => "ellipsis-infl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "deixis" => Ok(Phenomenon::Deixis),
            "lexical-cohesion" => Ok(Phenomenon::LexicalCohesion),
            "ellipsis-vp" => Ok(Phenomenon::EllipsisVp),
            "ellipsis-infl" => Ok(Phenomenon::EllipsisInfl),
            other => Err(Error::Eval(format!("unknown phenomenon label `{other}`"))),
        }
    }
}

/// One contrastive block: the source chunk, candidate target chunks, the true
/// candidate's index, and the phenomenon under test.
#[derive(Debug, Clone)]
pub struct ContrastiveGroup {
    pub src_sentences: Vec<String>,
    pub candidates: Vec<String>,
    pub true_index: usize,
    pub phenomenon: Phenomenon,
}

/// Parse the block format: `SRC<TAB>text` lines, `CAND<TAB>text` lines,
/// `TRUE<TAB>index`, `PHEN<TAB>label`, blank lines between blocks. Sentence
/// boundaries inside candidate chunks use the literal `<sep>` token.
pub fn parse_contrastive(text: &str) -> Result<Vec<ContrastiveGroup>> {
    let mut groups = Vec::new();
    let mut src = Vec::new();
    let mut cands = Vec::new();
    let mut true_index: Option<usize> = None;
    let mut phen: Option<Phenomenon> = None;

    let mut flush = |src: &mut Vec<String>,
                     cands: &mut Vec<String>,
                     true_index: &mut Option<usize>,
                     phen: &mut Option<Phenomenon>|
     -> Result<()> {
        if src.is_empty() && cands.is_empty() && true_index.is_none() && phen.is_none() {
            return Ok(());
        }
        let group = ContrastiveGroup {
            src_sentences: std::mem::take(src),
            candidates: std::mem::take(cands),
            true_index: true_index.take().ok_or_else(|| {
                Error::Eval("contrastive block missing TRUE line".into())
            })?,
            phenomenon: phen
                .take()
                .ok_or_else(|| Error::Eval("contrastive block missing PHEN line".into()))?,
        };
        if group.src_sentences.is_empty() {
            return Err(Error::Eval("contrastive block missing SRC lines".into()));
        }
        if group.candidates.len() < 2 {
            return Err(Error::Eval(
                "contrastive block needs at least 2 candidates".into(),
            ));
        }
        if group.true_index >= group.candidates.len() {
            return Err(Error::Eval(format!(
                "TRUE index {} outside {} candidates",
                group.true_index,
                group.candidates.len()
            )));
        }
        groups.push(group);
        Ok(())
    };

    for (ln, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut src, &mut cands, &mut true_index, &mut phen)?;
            continue;
        }
        let (tag, rest) = line.split_once('\t').ok_or_else(|| {
            Error::Eval(format!("contrastive line {}: expected TAG<TAB>text", ln + 1))
        })?;
        match tag {
            "SRC" => src.push(rest.to_string()),
            "CAND" => cands.push(rest.to_string()),
            "TRUE" => {
                true_index = Some(rest.trim().parse().map_err(|_| {
                    Error::Eval(format!("contrastive line {}: bad TRUE index", ln + 1))
                })?)
            }
            "PHEN" => phen = Some(Phenomenon::parse(rest.trim())?),
            other => {
                return Err(Error::Eval(format!(
                    "contrastive line {}: unknown tag `{other}`",
                    ln + 1
                )))
            }
        }
    }
    flush(&mut src, &mut cands, &mut true_index, &mut phen)?;
    if groups.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(groups)
}

/// Scores a full target chunk given a source chunk; the model adapter returns
/// the total (unnormalized) log-probability including the closing `eos`.
pub trait PairScorer {
    fn score_pair(&mut self, src: &[TokenId], tgt: &[TokenId]) -> Result<f64>;
}

pub struct ModelPairScorer<'m, S: Scalar>(pub &'m Model<S>);

impl<S: Scalar> PairScorer for ModelPairScorer<'_, S> {
    fn score_pair(&mut self, src: &[TokenId], tgt: &[TokenId]) -> Result<f64> {
        self.0.sequence_log_prob(src, tgt)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PhenomenonAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl PhenomenonAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ContrastiveReport {
    pub per_phenomenon: BTreeMap<Phenomenon, PhenomenonAccuracy>,
    /// Groups dropped because a candidate tokenized to nothing.
    pub skipped: usize,
}

impl ContrastiveReport {
    pub fn render_table(&self) -> String {
        let mut out = String::from("phenomenon         correct  total  accuracy\n");
        for (p, acc) in &self.per_phenomenon {
            out.push_str(&format!(
                "{:<18} {:>7}  {:>5}  {:>7.1}%\n",
                p.as_str(),
                acc.correct,
                acc.total,
                100.0 * acc.accuracy()
            ));
        }
        if self.skipped > 0 {
            out.push_str(&format!("(skipped {} malformed groups)\n", self.skipped));
        }
        out
    }
}

/// Score every candidate of every group; the predicted candidate is the
/// argmax, exact ties count as incorrect. `mean_per_token` switches from the
/// default unnormalized sum to a per-token mean (the token count includes the
/// closing `eos`).
pub fn contrastive_accuracy(
    scorer: &mut impl PairScorer,
    groups: &[ContrastiveGroup],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    sep_id: TokenId,
    mean_per_token: bool,
) -> Result<ContrastiveReport> {
    if groups.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut report = ContrastiveReport::default();
    'group: for g in groups {
        let src_sents: Vec<Vec<TokenId>> = g
            .src_sentences
            .iter()
            .map(|s| src_vocab.encode_line(s))
            .collect();
        let (src_ids, _) = crate::data::join_sentences(&src_sents, sep_id);
        let mut scores = Vec::with_capacity(g.candidates.len());
        for cand in &g.candidates {
            let ids = tgt_vocab.encode_line(cand);
            if ids.is_empty() {
                report.skipped += 1;
                continue 'group;
            }
            let raw = scorer.score_pair(&src_ids, &ids)?;
            let score = if mean_per_token {
                raw / (ids.len() + 1) as f64
            } else {
                raw
            };
            scores.push(score);
        }
        let best = scores
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<usize> = scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == best)
            .map(|(i, _)| i)
            .collect();
        let correct = winners.len() == 1 && winners[0] == g.true_index;
        let entry = report.per_phenomenon.entry(g.phenomenon).or_default();
        entry.total += 1;
        if correct {
            entry.correct += 1;
        }
    }
    Ok(report)
}
