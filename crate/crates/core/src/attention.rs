//! Masked scaled dot-product attention, the multi-head wrapper, and the
//! long-short term two-stream self-attention sublayer.
//!
//! A two-stream layer holds exactly one set of projection weights: the global
//! stream (whole-chunk mask) and the local stream (block-diagonal mask) are
//! computed by the same parameters on their own hidden states.

use crate::error::{Error, Result};
use crate::masking::MaskMatrix;
use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use crate::rng::SplitMix64;

/// Layer-norm epsilon used across the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Projection parameters for one attention sublayer. Generic over the payload
/// so the same structure describes both stored tensors and their tape
/// bindings.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub b_q: T,
    pub b_k: T,
    pub b_v: T,
    pub b_o: T,
    pub heads: usize,
    pub dim: usize,
}

impl<T> AttentionParams<T> {
    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_o"), &self.w_o);
        f(format!("{prefix}.b_q"), &self.b_q);
        f(format!("{prefix}.b_k"), &self.b_k);
        f(format!("{prefix}.b_v"), &self.b_v);
        f(format!("{prefix}.b_o"), &self.b_o);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_k"), &mut self.w_k);
        f(format!("{prefix}.w_v"), &mut self.w_v);
        f(format!("{prefix}.w_o"), &mut self.w_o);
        f(format!("{prefix}.b_q"), &mut self.b_q);
        f(format!("{prefix}.b_k"), &mut self.b_k);
        f(format!("{prefix}.b_v"), &mut self.b_v);
        f(format!("{prefix}.b_o"), &mut self.b_o);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
            b_q: f(&self.b_q),
            b_k: f(&self.b_k),
            b_v: f(&self.b_v),
            b_o: f(&self.b_o),
            heads: self.heads,
            dim: self.dim,
        }
    }
}

impl<S: Scalar> AttentionParams<Tensor<S>> {
    /// Xavier-uniform weights, zero biases. `dim` must be divisible by `heads`.
    pub fn init(dim: usize, heads: usize, rng: &mut SplitMix64) -> Self {
        assert_eq!(dim % heads, 0, "model dim not divisible by head count");
        let bound = (3.0 / dim as f64).sqrt();
        let mut w = || Tensor::rand_uniform(vec![dim, dim], -bound, bound, rng);
        let w_q = w();
        let w_k = w();
        let w_v = w();
        let w_o = w();
        AttentionParams {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: Tensor::zeros(vec![dim]),
            b_k: Tensor::zeros(vec![dim]),
            b_v: Tensor::zeros(vec![dim]),
            b_o: Tensor::zeros(vec![dim]),
            heads,
            dim,
        }
    }
}

/// Gain and bias of one layer-norm.
#[derive(Debug, Clone)]
pub struct NormParams<T> {
    pub gain: T,
    pub bias: T,
}

impl<T> NormParams<T> {
    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> NormParams<U> {
        NormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

impl<S: Scalar> NormParams<Tensor<S>> {
    pub fn init(dim: usize) -> Self {
        NormParams {
            gain: Tensor::filled(vec![dim], S::one()),
            bias: Tensor::zeros(vec![dim]),
        }
    }
}

/// Dropout rate plus its dedicated random stream. `off()` disables dropout
/// entirely, which every oracle test relies on.
#[derive(Debug, Clone)]
pub struct DropoutCtx {
    pub rate: f64,
    pub rng: SplitMix64,
}

impl DropoutCtx {
    pub fn off() -> Self {
        DropoutCtx {
            rate: 0.0,
            rng: SplitMix64::new(0),
        }
    }

    pub fn new(rate: f64, rng: SplitMix64) -> Self {
        DropoutCtx { rate, rng }
    }

    pub fn apply<S: Scalar>(&mut self, tape: &mut Tape<S>, x: NodeId) -> NodeId {
        tape.dropout(x, self.rate, &mut self.rng)
    }
}

/// Paired global/local hidden-state nodes flowing through a stack.
#[derive(Debug, Clone, Copy)]
pub struct StreamNodes {
    pub global: NodeId,
    pub local: NodeId,
}

/// Materialized stream pair, for inspection and tests.
#[derive(Debug, Clone)]
pub struct StreamState<S> {
    pub global: Tensor<S>,
    pub local: Tensor<S>,
}

impl<S: Scalar> StreamState<S> {
    pub fn from_tape(tape: &Tape<S>, nodes: StreamNodes) -> Self {
        StreamState {
            global: tape.value(nodes.global).clone(),
            local: tape.value(nodes.local).clone(),
        }
    }
}

/// Attention output with the post-softmax weights exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct ScaledDotOutput {
    pub output: NodeId,
    pub weights: NodeId,
}

/// `softmax(q k^T / sqrt(d_head) + m) v`.
///
/// `q`, `k`, `v` carry the per-head dimension; `m` must be `(len_q, len_k)`.
/// A row with every position blocked is an error — the masks this engine
/// builds can never produce one, so this is a defensive check.
pub fn scaled_dot_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &MaskMatrix<S>,
) -> Result<ScaledDotOutput> {
    scaled_dot_attention_dropped(tape, q, k, v, mask, &mut DropoutCtx::off())
}

/// As [`scaled_dot_attention`], with dropout on the post-softmax weights.
fn scaled_dot_attention_dropped<S: Scalar>(
    tape: &mut Tape<S>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &MaskMatrix<S>,
    drop: &mut DropoutCtx,
) -> Result<ScaledDotOutput> {
    let (len_q, d_head) = {
        let s = tape.value(q).shape();
        (s[0], s[1])
    };
    let len_k = tape.value(k).shape()[0];
    if mask.rows() != len_q || mask.cols() != len_k {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: vec![len_q, len_k],
            rhs: vec![mask.rows(), mask.cols()],
        });
    }
    if let Some(&row) = mask.fully_blocked_rows().first() {
        return Err(Error::FullyMaskedRow { row });
    }
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
    let biased = tape.add_const(scaled, &mask.to_tensor())?;
    let weights = tape.softmax_rows(biased)?;
    let mixed = drop.apply(tape, weights);
    let output = tape.matmul(mixed, v)?;
    Ok(ScaledDotOutput { output, weights })
}

/// Standard multi-head attention: project, attend per head slice, concatenate,
/// project out. Dropout lands on each head's attention weights.
pub fn multi_head<S: Scalar>(
    tape: &mut Tape<S>,
    x_q: NodeId,
    x_kv: NodeId,
    mask: &MaskMatrix<S>,
    p: &AttentionParams<NodeId>,
    drop: &mut DropoutCtx,
) -> Result<NodeId> {
    let d = p.dim;
    let h = p.heads;
    debug_assert_eq!(d % h, 0);
    let d_head = d / h;

    let q_lin = tape.matmul(x_q, p.w_q)?;
    let q = tape.add_bias(q_lin, p.b_q)?;
    let k_lin = tape.matmul(x_kv, p.w_k)?;
    let k = tape.add_bias(k_lin, p.b_k)?;
    let v_lin = tape.matmul(x_kv, p.w_v)?;
    let v = tape.add_bias(v_lin, p.b_v)?;

    let mut head_outputs = Vec::with_capacity(h);
    for head in 0..h {
        let start = head * d_head;
        let qh = tape.slice_cols(q, start, d_head)?;
        let kh = tape.slice_cols(k, start, d_head)?;
        let vh = tape.slice_cols(v, start, d_head)?;
        head_outputs.push(scaled_dot_attention_dropped(tape, qh, kh, vh, mask, drop)?.output);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    let out_lin = tape.matmul(concat, p.w_o)?;
    tape.add_bias(out_lin, p.b_o)
}

/// One post-norm self-attention sublayer: `norm(x + dropout(mha(x, x)))`.
pub fn self_attention_sublayer<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    mask: &MaskMatrix<S>,
    p: &AttentionParams<NodeId>,
    norm: &NormParams<NodeId>,
    drop: &mut DropoutCtx,
) -> Result<NodeId> {
    let attended = multi_head(tape, x, x, mask, p, drop)?;
    let dropped = drop.apply(tape, attended);
    let residual = tape.add(x, dropped)?;
    tape.layer_norm(residual, norm.gain, norm.bias, LAYER_NORM_EPS)
}

/// The long-short term masking self-attention: both streams pass through the
/// *same* projection and norm parameters, each under its own mask, each from
/// its own previous-layer states.
pub fn lst_self_attention<S: Scalar>(
    tape: &mut Tape<S>,
    s: StreamNodes,
    m_global: &MaskMatrix<S>,
    m_local: &MaskMatrix<S>,
    p: &AttentionParams<NodeId>,
    norm: &NormParams<NodeId>,
    drop: &mut DropoutCtx,
) -> Result<StreamNodes> {
    let global = self_attention_sublayer(tape, s.global, m_global, p, norm, drop)?;
    let local = self_attention_sublayer(tape, s.local, m_local, p, norm, drop)?;
    Ok(StreamNodes { global, local })
}
