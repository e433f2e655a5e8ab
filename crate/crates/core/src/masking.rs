//! Additive attention-bias matrices.
//!
//! Every mask is a dense matrix whose entries are exactly `0` (attend) or
//! [`NEG_INF`](crate::numerics::NEG_INF) (blocked). The named constructors produce the square masks the
//! model needs:
//!
//! * [`zero_mask`] — encoder self-attention and encoder-decoder attention;
//! * [`causal_mask`] — decoder self-attention, zero on and below the diagonal;
//! * [`local_block_mask`] — block-diagonal over the sentence segments induced
//!   by a separator token, for the local encoder stream;
//! * [`decoder_local_mask`] — causal and block-diagonal combined, for the
//!   local decoder stream.
//!
//! Segments follow the cumulative-separator-count rule: a separator token
//! belongs to the segment that *follows* it (its own count includes itself).

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::TokenId;

/// Square (or, for cross-attention padding, rectangular) additive mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix<S> {
    rows: usize,
    cols: usize,
    entries: Vec<S>,
}

impl<S: Scalar> MaskMatrix<S> {
    fn open(rows: usize, cols: usize) -> Self {
        MaskMatrix {
            rows,
            cols,
            entries: vec![S::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Side length; only meaningful for the square masks the constructors build.
    pub fn n(&self) -> usize {
        debug_assert_eq!(self.rows, self.cols);
        self.rows
    }

    pub fn entries(&self) -> &[S] {
        &self.entries
    }

    pub fn at(&self, i: usize, j: usize) -> S {
        self.entries[i * self.cols + j]
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.at(i, j) != S::zero()
    }

    fn block(&mut self, i: usize, j: usize) {
        self.entries[i * self.cols + j] = S::neg_inf();
    }

    /// All-zero rectangular mask (cross-attention base).
    pub fn rect_zero(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptySequence);
        }
        Ok(MaskMatrix::open(rows, cols))
    }

    /// Saturating elementwise combination: a position is attendable only if
    /// it is attendable under both masks. The sum is clamped at `NEG_INF` so
    /// entries stay in `{0, NEG_INF}`.
    pub fn combine(&self, other: &MaskMatrix<S>) -> Result<MaskMatrix<S>> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "mask_combine",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        let floor = S::neg_inf();
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(&a, &b)| (a + b).max(floor))
            .collect();
        Ok(MaskMatrix {
            rows: self.rows,
            cols: self.cols,
            entries,
        })
    }

    /// Additionally block every key column holding a pad token.
    pub fn with_key_pad_columns(mut self, key_tokens: &[TokenId], pad_id: TokenId) -> Self {
        debug_assert_eq!(self.cols, key_tokens.len());
        for (j, &t) in key_tokens.iter().enumerate() {
            if t == pad_id {
                for i in 0..self.rows {
                    self.block(i, j);
                }
            }
        }
        self
    }

    /// Row indices with no attendable position at all.
    pub fn fully_blocked_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&i| (0..self.cols).all(|j| self.is_blocked(i, j)))
            .collect()
    }

    /// The mask as an additive bias tensor of shape `(rows, cols)`.
    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(vec![self.rows, self.cols], self.entries.clone()).expect("consistent")
    }

    /// Text grid with `0` for attendable entries and `-` for blocked ones,
    /// one row per line.
    pub fn render_grid(&self) -> String {
        let mut out = String::with_capacity(self.rows * (self.cols + 1));
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(if self.is_blocked(i, j) { '-' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Per-token segment id: the number of separator tokens at or before each
/// position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentIndex(Vec<u32>);

impl SegmentIndex {
    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn same_segment(&self, i: usize, j: usize) -> bool {
        self.0[i] == self.0[j]
    }
}

/// `M = 0`: every position may attend everywhere.
pub fn zero_mask<S: Scalar>(n: usize) -> Result<MaskMatrix<S>> {
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(MaskMatrix::open(n, n))
}

/// Entry `(i, j)` is open iff `j <= i`.
pub fn causal_mask<S: Scalar>(n: usize) -> Result<MaskMatrix<S>> {
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let mut m = MaskMatrix::open(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.block(i, j);
        }
    }
    Ok(m)
}

/// Cumulative separator count; a separator increments its own position, so it
/// groups with the tokens that follow it.
pub fn segment_index(tokens: &[TokenId], sep_id: TokenId) -> Result<SegmentIndex> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut count = 0u32;
    let ids = tokens
        .iter()
        .map(|&t| {
            if t == sep_id {
                count += 1;
            }
            count
        })
        .collect();
    Ok(SegmentIndex(ids))
}

/// Block-diagonal mask: `(i, j)` open iff `i` and `j` share a segment.
pub fn local_block_mask<S: Scalar>(tokens: &[TokenId], sep_id: TokenId) -> Result<MaskMatrix<S>> {
    let seg = segment_index(tokens, sep_id)?;
    let n = tokens.len();
    let mut m = MaskMatrix::open(n, n);
    for i in 0..n {
        for j in 0..n {
            if !seg.same_segment(i, j) {
                m.block(i, j);
            }
        }
    }
    Ok(m)
}

/// Decoder-side local mask: `(i, j)` open iff `j <= i` *and* `i`, `j` share a
/// segment — the causal mask and the block mask combined with saturation.
pub fn decoder_local_mask<S: Scalar>(tokens: &[TokenId], sep_id: TokenId) -> Result<MaskMatrix<S>> {
    let causal = causal_mask::<S>(tokens.len())?;
    let local = local_block_mask::<S>(tokens, sep_id)?;
    causal.combine(&local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::NEG_INF;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    const SEP: TokenId = 3;
    const W: TokenId = 10;

    fn exact_entries<S: Scalar>(m: &MaskMatrix<S>) -> bool {
        m.entries()
            .iter()
            .all(|&e| e == S::zero() || e == S::from_f64_exact(NEG_INF))
    }

    /// Independent oracle: open iff the pairwise segment ids agree, where the
    /// segment id is recomputed by a direct scan.
    fn brute_force_local(tokens: &[TokenId], sep: TokenId) -> Vec<Vec<bool>> {
        let mut seg = Vec::with_capacity(tokens.len());
        let mut c = 0;
        for &t in tokens {
            if t == sep {
                c += 1;
            }
            seg.push(c);
        }
        (0..tokens.len())
            .map(|i| (0..tokens.len()).map(|j| seg[i] == seg[j]).collect())
            .collect()
    }

    #[test]
    fn zero_mask_cases() {
        assert_eq!(zero_mask::<f64>(1).unwrap().entries(), &[0.0]);
        let m3 = zero_mask::<f64>(3).unwrap();
        assert_eq!(m3.entries(), &[0.0; 9]);
        let m2 = zero_mask::<f64>(2).unwrap();
        assert_eq!(m2.entries(), &[0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(zero_mask::<f64>(0), Err(Error::EmptySequence)));
    }

    #[test]
    fn causal_mask_cases() {
        let m = causal_mask::<f64>(3).unwrap();
        #[rustfmt::skip]
        let expected = vec![
            0.0, NEG_INF, NEG_INF,
            0.0, 0.0, NEG_INF,
            0.0, 0.0, 0.0,
        ];
        assert_eq!(m.entries(), &expected[..]);
        assert_eq!(causal_mask::<f64>(1).unwrap().entries(), &[0.0]);
        let m2 = causal_mask::<f64>(2).unwrap();
        assert_eq!(&m2.entries()[..2], &[0.0, NEG_INF]);
        assert!(matches!(causal_mask::<f64>(0), Err(Error::EmptySequence)));
    }

    #[test]
    fn segment_index_cases() {
        let s = segment_index(&[W, W, SEP, W, W], SEP).unwrap();
        assert_eq!(s.ids(), &[0, 0, 1, 1, 1]);
        let s = segment_index(&[W, W, W], SEP).unwrap();
        assert_eq!(s.ids(), &[0, 0, 0]);
        let s = segment_index(&[SEP, W], SEP).unwrap();
        assert_eq!(s.ids(), &[1, 1]);
    }

    #[test]
    fn local_block_mask_two_blocks() {
        let m = local_block_mask::<f64>(&[W, W, SEP, W], SEP).unwrap();
        for (i, j) in [(0, 2), (0, 3), (1, 2), (1, 3)] {
            assert!(m.is_blocked(i, j));
            assert!(m.is_blocked(j, i));
        }
        for (i, j) in [(0, 0), (0, 1), (2, 3), (3, 2)] {
            assert!(!m.is_blocked(i, j));
        }
        assert!(exact_entries(&m));
    }

    #[test]
    fn local_block_mask_no_separator_degenerates_to_zero() {
        let m = local_block_mask::<f64>(&[W, W, W], SEP).unwrap();
        assert_eq!(m, zero_mask(3).unwrap());
    }

    #[test]
    fn local_block_mask_matches_brute_force_on_three_segments() {
        let tokens = [W, SEP, W, SEP, W];
        let m = local_block_mask::<f64>(&tokens, SEP).unwrap();
        let oracle = brute_force_local(&tokens, SEP);
        for i in 0..tokens.len() {
            for j in 0..tokens.len() {
                assert_eq!(!m.is_blocked(i, j), oracle[i][j]);
            }
        }
    }

    #[test]
    fn decoder_local_mask_cases() {
        // SEP joins the following segment, so the last token of [w, SEP, w]
        // may attend the separator but not the first word.
        let m = decoder_local_mask::<f64>(&[W, SEP, W], SEP).unwrap();
        assert_eq!(m.entries()[6..9], [NEG_INF, 0.0, 0.0]);

        let single = decoder_local_mask::<f64>(&[W, W, W], SEP).unwrap();
        assert_eq!(single, causal_mask(3).unwrap());

        let any = decoder_local_mask::<f64>(&[W, SEP, W], SEP).unwrap();
        assert!(any.is_blocked(0, 2));
    }

    #[test]
    fn combine_is_saturating() {
        let c = causal_mask::<f64>(3).unwrap();
        let l = local_block_mask::<f64>(&[W, SEP, W], SEP).unwrap();
        let d = c.combine(&l).unwrap();
        assert!(exact_entries(&d));
        // Never -2e9 even where both masks block.
        assert!(d.entries().iter().all(|&e| e >= NEG_INF));
    }

    #[test]
    fn randomized_oracle_comparison() {
        let mut rng = SplitMix64::new(0xBEEF);
        for _ in 0..200 {
            let len = 1 + rng.next_below(64) as usize;
            let tokens: Vec<TokenId> = (0..len)
                .map(|_| if rng.next_f64() < 0.2 { SEP } else { W })
                .collect();
            let local = local_block_mask::<f64>(&tokens, SEP).unwrap();
            let dec = decoder_local_mask::<f64>(&tokens, SEP).unwrap();
            let oracle = brute_force_local(&tokens, SEP);
            for i in 0..len {
                for j in 0..len {
                    assert_eq!(!local.is_blocked(i, j), oracle[i][j]);
                    assert_eq!(!dec.is_blocked(i, j), oracle[i][j] && j <= i);
                    assert_eq!(local.is_blocked(i, j), local.is_blocked(j, i));
                }
            }
            assert!(exact_entries(&local));
            assert!(exact_entries(&dec));
        }
    }

    #[test]
    fn pad_columns_are_blocked() {
        let pad = 0;
        let m = zero_mask::<f64>(4)
            .unwrap()
            .with_key_pad_columns(&[W, W, pad, pad], pad);
        for i in 0..4 {
            assert!(!m.is_blocked(i, 0));
            assert!(m.is_blocked(i, 2));
            assert!(m.is_blocked(i, 3));
        }
    }

    proptest! {
        #[test]
        fn decoder_mask_equals_elementwise_min(seps in prop::collection::vec(0..5u8, 1..40)) {
            let tokens: Vec<TokenId> = seps
                .iter()
                .map(|&x| if x == 0 { SEP } else { W })
                .collect();
            let dec = decoder_local_mask::<f64>(&tokens, SEP).unwrap();
            let causal = causal_mask::<f64>(tokens.len()).unwrap();
            let local = local_block_mask::<f64>(&tokens, SEP).unwrap();
            for i in 0..tokens.len() {
                for j in 0..tokens.len() {
                    let expected = causal.at(i, j).min(local.at(i, j));
                    prop_assert_eq!(dec.at(i, j), expected);
                }
            }
        }

        #[test]
        fn no_separator_masks_degenerate(len in 1usize..50) {
            let tokens = vec![W; len];
            prop_assert_eq!(
                local_block_mask::<f64>(&tokens, SEP).unwrap(),
                zero_mask(len).unwrap()
            );
            prop_assert_eq!(
                decoder_local_mask::<f64>(&tokens, SEP).unwrap(),
                causal_mask(len).unwrap()
            );
        }
    }
}
