//! Corpus ingestion, vocabulary construction, document chunking and batching.
//!
//! Corpus format: two parallel UTF-8 text files (source, target), one sentence
//! per line, documents separated by a single blank line at identical line
//! positions in both files. Tokenization is a whitespace split; subword
//! preprocessing, when wanted, happens upstream and passes through
//! transparently.

use crate::bytes::{self, Reader};
use crate::error::{Error, Result};
use crate::TokenId;
use std::collections::HashMap;
use std::path::Path;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;
pub const UNK_ID: TokenId = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// Frequency-ranked token map with the five reserved symbols pinned to ids
/// `0..=4`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

impl Vocab {
    /// Build from an iterator of sentences (whitespace-tokenized internally).
    /// Ranking is by descending frequency, ties broken lexicographically.
    /// `max_size` caps the total size including the reserved ids; tokens seen
    /// fewer than `min_freq` times map to `<unk>`.
    pub fn build<'a>(
        sentences: impl IntoIterator<Item = &'a str>,
        max_size: usize,
        min_freq: usize,
    ) -> Result<Vocab> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for line in sentences {
            any = true;
            for tok in line.split_whitespace() {
                if RESERVED.contains(&tok) {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for (tok, _) in ranked {
            if id_to_token.len() >= max_size {
                break;
            }
            id_to_token.push(tok.to_string());
        }
        Ok(Vocab::from_tokens(id_to_token))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Vocab {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn encode_line(&self, line: &str) -> Vec<TokenId> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Space-joined surface forms; reserved ids render as their literal tags.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Parallel document: aligned source/target sentences as token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: usize,
    pub src: Vec<Vec<TokenId>>,
    pub tgt: Vec<Vec<TokenId>>,
}

impl Document {
    pub fn sentence_count(&self) -> usize {
        self.src.len()
    }
}

/// Split file content into blank-line-separated documents of trimmed lines.
pub fn read_documents(text: &str) -> Vec<Vec<String>> {
    let mut docs = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.trim().to_string());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

/// Load a parallel corpus from two files, validating that document boundaries
/// and per-document sentence counts line up.
pub fn load_parallel(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
) -> Result<(Vec<Vec<String>>, Vec<Vec<String>>)> {
    let src_path = src_path.as_ref();
    let tgt_path = tgt_path.as_ref();
    let src_text = std::fs::read_to_string(src_path)
        .map_err(|e| Error::io(src_path.display().to_string(), e))?;
    let tgt_text = std::fs::read_to_string(tgt_path)
        .map_err(|e| Error::io(tgt_path.display().to_string(), e))?;
    let src_docs = read_documents(&src_text);
    let tgt_docs = read_documents(&tgt_text);
    if src_docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if src_docs.len() != tgt_docs.len() {
        return Err(Error::CorpusMismatch(format!(
            "{} source documents vs {} target documents",
            src_docs.len(),
            tgt_docs.len()
        )));
    }
    for (i, (s, t)) in src_docs.iter().zip(&tgt_docs).enumerate() {
        if s.len() != t.len() {
            return Err(Error::CorpusMismatch(format!(
                "document {i}: {} source sentences vs {} target sentences",
                s.len(),
                t.len()
            )));
        }
    }
    Ok((src_docs, tgt_docs))
}

/// Map raw documents to token ids.
pub fn numericalize(
    src_docs: &[Vec<String>],
    tgt_docs: &[Vec<String>],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
) -> Vec<Document> {
    src_docs
        .iter()
        .zip(tgt_docs)
        .enumerate()
        .map(|(id, (s, t))| Document {
            id,
            src: s.iter().map(|l| src_vocab.encode_line(l)).collect(),
            tgt: t.iter().map(|l| tgt_vocab.encode_line(l)).collect(),
        })
        .collect()
}

/// `k` consecutive sentences joined with the separator token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub doc_id: usize,
    /// 0-based index of the first sentence in the window.
    pub window_start: usize,
    pub k_actual: usize,
    pub src_ids: Vec<TokenId>,
    pub tgt_ids: Vec<TokenId>,
    /// Source-side sentence start offsets.
    pub boundaries: Vec<usize>,
    pub tgt_boundaries: Vec<usize>,
}

impl Chunk {
    /// Budget length for batching.
    pub fn len(&self) -> usize {
        self.src_ids.len().max(self.tgt_ids.len())
    }

    pub fn is_empty(&self) -> bool {
        self.src_ids.is_empty()
    }
}

/// Join sentences with `sep_id` between them; returns the ids and the start
/// offset of each sentence.
pub fn join_sentences(sentences: &[Vec<TokenId>], sep_id: TokenId) -> (Vec<TokenId>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut boundaries = Vec::with_capacity(sentences.len());
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            ids.push(sep_id);
        }
        boundaries.push(ids.len());
        ids.extend_from_slice(s);
    }
    (ids, boundaries)
}

/// Exact inverse of [`join_sentences`]: split at every separator.
pub fn split_at_separators(ids: &[TokenId], sep_id: TokenId) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    for &t in ids {
        if t == sep_id {
            out.push(Vec::new());
        } else {
            out.last_mut().unwrap().push(t);
        }
    }
    out
}

/// Windows of up to `k` sentences starting at `0, stride, 2*stride, ...`,
/// clipped at the document end. Training uses `stride = k` (disjoint chunks,
/// tail kept); sliding-window inference uses `stride = 1`.
pub fn chunk_documents(doc: &Document, k: usize, stride: usize, sep_id: TokenId) -> Vec<Chunk> {
    assert!(k >= 1, "k must be at least 1");
    assert!(stride >= 1, "stride must be at least 1");
    let n = doc.sentence_count();
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + k).min(n);
        let (src_ids, boundaries) = join_sentences(&doc.src[start..end], sep_id);
        let (tgt_ids, tgt_boundaries) = join_sentences(&doc.tgt[start..end], sep_id);
        chunks.push(Chunk {
            doc_id: doc.id,
            window_start: start,
            k_actual: end - start,
            src_ids,
            tgt_ids,
            boundaries,
            tgt_boundaries,
        });
        start += stride;
    }
    chunks
}

/// Source-only windows for inference.
pub fn chunk_source_sentences(
    sentences: &[Vec<TokenId>],
    k: usize,
    stride: usize,
    sep_id: TokenId,
) -> Vec<(usize, Vec<TokenId>, usize)> {
    assert!(k >= 1 && stride >= 1);
    let n = sentences.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + k).min(n);
        let (ids, _) = join_sentences(&sentences[start..end], sep_id);
        out.push((start, ids, end - start));
        start += stride;
    }
    out
}

/// One padded training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub items: Vec<Chunk>,
    /// Right-padded source rows, all the same length.
    pub src: Vec<Vec<TokenId>>,
    /// Right-padded target rows, all the same length.
    pub tgt: Vec<Vec<TokenId>>,
}

impl Batch {
    pub fn token_count(&self) -> usize {
        self.items.iter().map(Chunk::len).sum()
    }
}

/// Greedy length-bucketed packing under a padded-token budget: a batch of `n`
/// chunks padded to length `L` costs `n * L`. Deterministic: chunks are
/// ordered by (length desc, doc id, window start) before packing.
pub fn batch(chunks: Vec<Chunk>, max_tokens: usize, pad_id: TokenId) -> Result<Vec<Batch>> {
    for c in &chunks {
        if c.len() > max_tokens {
            return Err(Error::ChunkTooLong {
                doc_id: c.doc_id,
                window_start: c.window_start,
                len: c.len(),
                max_tokens,
            });
        }
    }
    let mut ordered = chunks;
    ordered.sort_by(|a, b| {
        b.len()
            .cmp(&a.len())
            .then_with(|| a.doc_id.cmp(&b.doc_id))
            .then_with(|| a.window_start.cmp(&b.window_start))
    });

    let mut batches = Vec::new();
    let mut current: Vec<Chunk> = Vec::new();
    let mut current_max = 0usize;
    for c in ordered {
        let new_max = current_max.max(c.len());
        if !current.is_empty() && (current.len() + 1) * new_max > max_tokens {
            batches.push(finish_batch(std::mem::take(&mut current), pad_id));
            current_max = 0;
        }
        current_max = current_max.max(c.len());
        current.push(c);
    }
    if !current.is_empty() {
        batches.push(finish_batch(current, pad_id));
    }
    Ok(batches)
}

fn finish_batch(items: Vec<Chunk>, pad_id: TokenId) -> Batch {
    let src_max = items.iter().map(|c| c.src_ids.len()).max().unwrap_or(0);
    let tgt_max = items.iter().map(|c| c.tgt_ids.len()).max().unwrap_or(0);
    let pad_to = |ids: &[TokenId], len: usize| {
        let mut row = ids.to_vec();
        row.resize(len, pad_id);
        row
    };
    let src = items.iter().map(|c| pad_to(&c.src_ids, src_max)).collect();
    let tgt = items.iter().map(|c| pad_to(&c.tgt_ids, tgt_max)).collect();
    Batch { items, src, tgt }
}

/// Preprocessed corpus: both vocabularies plus the numericalized documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub docs: Vec<Document>,
}

const DATASET_MAGIC: &[u8; 8] = b"LSTNMTDS";
const DATASET_VERSION: u32 = 1;

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        bytes::put_u32(&mut out, DATASET_VERSION);
        for vocab in [&self.src_vocab, &self.tgt_vocab] {
            bytes::put_u32(&mut out, vocab.len() as u32);
            for id in 0..vocab.len() {
                bytes::put_string(&mut out, vocab.token(id as TokenId));
            }
        }
        bytes::put_u32(&mut out, self.docs.len() as u32);
        for doc in &self.docs {
            bytes::put_u32(&mut out, doc.sentence_count() as u32);
            for (s, t) in doc.src.iter().zip(&doc.tgt) {
                for side in [s, t] {
                    bytes::put_u32(&mut out, side.len() as u32);
                    for &id in side {
                        bytes::put_u32(&mut out, id);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(buf, "dataset");
        if r.bytes(8)? != DATASET_MAGIC {
            return Err(Error::Checkpoint("dataset: bad magic".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Checkpoint(format!(
                "dataset: unsupported version {version}"
            )));
        }
        let mut vocabs = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = r.u32()? as usize;
            let mut toks = Vec::with_capacity(n);
            for _ in 0..n {
                toks.push(r.string()?);
            }
            vocabs.push(Vocab::from_tokens(toks));
        }
        let tgt_vocab = vocabs.pop().unwrap();
        let src_vocab = vocabs.pop().unwrap();
        let n_docs = r.u32()? as usize;
        let mut docs = Vec::with_capacity(n_docs);
        for id in 0..n_docs {
            let n_sents = r.u32()? as usize;
            let mut src = Vec::with_capacity(n_sents);
            let mut tgt = Vec::with_capacity(n_sents);
            for _ in 0..n_sents {
                for side in [&mut src, &mut tgt] {
                    let len = r.u32()? as usize;
                    let mut ids = Vec::with_capacity(len);
                    for _ in 0..len {
                        ids.push(r.u32()?);
                    }
                    side.push(ids);
                }
            }
            docs.push(Document { id, src, tgt });
        }
        r.finish()?;
        Ok(Dataset {
            src_vocab,
            tgt_vocab,
            docs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let buf =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Dataset::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(n: usize) -> Document {
        Document {
            id: 0,
            src: (0..n).map(|i| vec![10 + i as TokenId]).collect(),
            tgt: (0..n).map(|i| vec![20 + i as TokenId]).collect(),
        }
    }

    #[test]
    fn vocab_frequency_order() {
        let v = Vocab::build(["a a b"], 100, 1).unwrap();
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
    }

    #[test]
    fn vocab_min_freq_maps_to_unk() {
        let v = Vocab::build(["a a b"], 100, 2).unwrap();
        assert_eq!(v.id("b"), UNK_ID);
        assert_eq!(v.id("a"), 5);
    }

    #[test]
    fn vocab_reserved_ids_never_reassigned() {
        // Even when reserved symbols appear in text, their ids stay fixed.
        let v = Vocab::build(["<sep> <pad> word word"], 100, 1).unwrap();
        assert_eq!(v.id("<pad>"), PAD_ID);
        assert_eq!(v.id("<bos>"), BOS_ID);
        assert_eq!(v.id("<eos>"), EOS_ID);
        assert_eq!(v.id("<sep>"), SEP_ID);
        assert_eq!(v.id("<unk>"), UNK_ID);
        assert_eq!(v.id("word"), 5);
    }

    #[test]
    fn vocab_empty_corpus_is_error() {
        assert!(matches!(
            Vocab::build(std::iter::empty::<&str>(), 10, 1),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn vocab_ties_break_lexicographically() {
        let v = Vocab::build(["z y x"], 100, 1).unwrap();
        assert_eq!(v.id("x"), 5);
        assert_eq!(v.id("y"), 6);
        assert_eq!(v.id("z"), 7);
    }

    #[test]
    fn chunking_stride_one_covers_all_windows() {
        let d = doc(8);
        let chunks = chunk_documents(&d, 4, 1, SEP_ID);
        assert_eq!(chunks.len(), 8);
        // Window starting at sentence 5 (1-based) holds s5..s8.
        let w5 = &chunks[4];
        assert_eq!(w5.window_start, 4);
        assert_eq!(w5.k_actual, 4);
        assert_eq!(w5.src_ids, vec![14, SEP_ID, 15, SEP_ID, 16, SEP_ID, 17]);
        // Sentence 5 (id 14) appears in windows starting at 2,3,4,5 (1-based)
        // at positions 4,3,2,1.
        for (start_1b, pos_1b) in [(2usize, 4usize), (3, 3), (4, 2), (5, 1)] {
            let c = &chunks[start_1b - 1];
            let sents = split_at_separators(&c.src_ids, SEP_ID);
            assert_eq!(sents[pos_1b - 1], vec![14]);
        }
    }

    #[test]
    fn chunking_k1_has_no_separators() {
        let d = doc(3);
        let chunks = chunk_documents(&d, 1, 1, SEP_ID);
        assert_eq!(chunks.len(), 3);
        assert!(chunks.iter().all(|c| !c.src_ids.contains(&SEP_ID)));
        assert!(chunks.iter().all(|c| c.k_actual == 1));
    }

    #[test]
    fn chunking_clips_tail() {
        let d = doc(3);
        let chunks = chunk_documents(&d, 4, 4, SEP_ID);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].k_actual, 3);
        assert_eq!(chunks[0].src_ids.iter().filter(|&&t| t == SEP_ID).count(), 2);
    }

    #[test]
    fn chunking_empty_document_is_empty() {
        let d = doc(0);
        assert!(chunk_documents(&d, 4, 1, SEP_ID).is_empty());
    }

    #[test]
    fn dechunking_inverts_chunking() {
        let d = Document {
            id: 0,
            src: vec![vec![10, 11], vec![12], vec![13, 14, 15]],
            tgt: vec![vec![20], vec![21, 22], vec![23]],
        };
        for k in 1..=4 {
            let mut covered = vec![false; d.sentence_count()];
            for c in chunk_documents(&d, k, k, SEP_ID) {
                let sents = split_at_separators(&c.src_ids, SEP_ID);
                let expect: Vec<_> =
                    d.src[c.window_start..c.window_start + c.k_actual].to_vec();
                assert_eq!(sents, expect);
                assert_eq!(
                    c.src_ids.iter().filter(|&&t| t == SEP_ID).count(),
                    c.k_actual - 1
                );
                // Boundaries point at the first token of each sentence.
                for (s, &b) in c.boundaries.iter().enumerate() {
                    assert_eq!(
                        c.src_ids[b],
                        d.src[c.window_start + s][0],
                        "k={k} boundary {s}"
                    );
                    if s > 0 {
                        assert_eq!(c.src_ids[b - 1], SEP_ID);
                    }
                }
                for s in c.window_start..c.window_start + c.k_actual {
                    covered[s] = true;
                }
            }
            // Every sentence appears in at least one training chunk.
            assert!(covered.iter().all(|&c| c), "k={k}");
        }
    }

    #[test]
    fn window_membership_count_is_min_i_k() {
        // Brute-force oracle over the stride-1 windows the engine generates:
        // sentence i (1-based) lands in exactly min(i, k) of them.
        for n in 1..=12usize {
            let d = doc(n);
            for k in 1..=5usize {
                let chunks = chunk_documents(&d, k, 1, SEP_ID);
                for i in 1..=n {
                    let count = chunks
                        .iter()
                        .filter(|c| {
                            c.window_start < i && i <= c.window_start + c.k_actual
                        })
                        .count();
                    assert_eq!(count, i.min(k), "n={n} k={k} i={i}");
                }
            }
        }
    }

    #[test]
    fn batch_packs_under_budget() {
        let mk = |len: usize, start: usize| Chunk {
            doc_id: 0,
            window_start: start,
            k_actual: 1,
            src_ids: vec![9; len],
            tgt_ids: vec![9; len],
            boundaries: vec![0],
            tgt_boundaries: vec![0],
        };
        let batches = batch(vec![mk(5, 0), mk(7, 1)], 16, PAD_ID).unwrap();
        assert_eq!(batches.len(), 1);
        assert!(batches[0].src.iter().all(|r| r.len() == 7));
        assert_eq!(batches[0].src[1][5], PAD_ID);

        let batches = batch(vec![mk(5, 0), mk(7, 1)], 7, PAD_ID).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.items.len() == 1));
    }

    #[test]
    fn batch_rejects_oversized_chunk_by_name() {
        let c = Chunk {
            doc_id: 3,
            window_start: 2,
            k_actual: 1,
            src_ids: vec![9; 10],
            tgt_ids: vec![9; 10],
            boundaries: vec![0],
            tgt_boundaries: vec![0],
        };
        match batch(vec![c], 8, PAD_ID) {
            Err(Error::ChunkTooLong {
                doc_id: 3,
                window_start: 2,
                ..
            }) => {}
            other => panic!("expected ChunkTooLong, got {other:?}"),
        }
    }

    #[test]
    fn read_documents_blank_line_separation() {
        let docs = read_documents("a b\nc d\n\ne f\n");
        assert_eq!(docs, vec![vec!["a b", "c d"], vec!["e f"]]);
    }

    #[test]
    fn dataset_roundtrip_is_exact() {
        let src_vocab = Vocab::build(["a b c"], 100, 1).unwrap();
        let tgt_vocab = Vocab::build(["x y"], 100, 1).unwrap();
        let ds = Dataset {
            src_vocab,
            tgt_vocab,
            docs: vec![Document {
                id: 0,
                src: vec![vec![5, 6]],
                tgt: vec![vec![5]],
            }],
        };
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(ds, back);
        assert_eq!(bytes, back.to_bytes());
    }
}
