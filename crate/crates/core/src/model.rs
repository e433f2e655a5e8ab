//! The translation model: embeddings, encoder/decoder stacks in two variants,
//! stream combination, and the output projection.
//!
//! The `Lst` variant runs the long-short term two-stream layers everywhere a
//! baseline layer would self-attend. Both streams start from the same embedded
//! input; the only parameters the variant adds are one `(2d -> d)` combine
//! affine per stack, applied after the final layer.

use crate::attention::{
    self, AttentionParams, DropoutCtx, NormParams, StreamNodes, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::masking::{self, MaskMatrix};
use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use crate::rng::SplitMix64;
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Lst,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Lst => "lst",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "lst" => Ok(Variant::Lst),
            other => Err(Error::InvalidConfig(format!("unknown variant `{other}`"))),
        }
    }
}

/// Architecture hyperparameters and the reserved token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub ffn_dim: usize,
    /// Input width of the stream-combine affine; always `2 * d`.
    pub combine_dim: usize,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    /// Sentences per chunk.
    pub k: usize,
    pub sep_id: TokenId,
    pub pad_id: TokenId,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
    pub variant: Variant,
    pub dropout: f64,
    pub max_positions: usize,
    /// Tie the output projection to the target embedding transpose.
    pub tie_output: bool,
}

impl ModelConfig {
    /// Full-scale defaults; tests and the synthetic tasks override sizes.
    pub fn base(vocab_src: usize, vocab_tgt: usize, variant: Variant) -> Self {
        ModelConfig {
            d: 512,
            heads: 8,
            n_layers_enc: 6,
            n_layers_dec: 6,
            ffn_dim: 2048,
            combine_dim: 1024,
            vocab_src,
            vocab_tgt,
            k: 4,
            sep_id: 3,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
            variant,
            dropout: 0.1,
            max_positions: 512,
            tie_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {} must be a positive multiple of head count {}",
                self.d, self.heads
            )));
        }
        if self.combine_dim != 2 * self.d {
            return Err(Error::InvalidConfig(format!(
                "combine_dim {} must equal 2*d = {}",
                self.combine_dim,
                2 * self.d
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        let ids = [self.sep_id, self.pad_id, self.bos_id, self.eos_id];
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                if a == b {
                    return Err(Error::InvalidConfig(
                        "special token ids must be distinct".into(),
                    ));
                }
            }
            let max_vocab = self.vocab_src.min(self.vocab_tgt);
            if (a as usize) >= max_vocab {
                return Err(Error::InvalidConfig(format!(
                    "special id {a} outside vocabulary of size {max_vocab}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

// ---- parameter structures ----------------------------------------------------

#[derive(Debug, Clone)]
pub struct FfnParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> FfnParams<T> {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FfnParams<U> {
        FfnParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }
}

/// Affine `(len, 2d) -> (len, d)` applied to the concatenated streams.
#[derive(Debug, Clone)]
pub struct CombineParams<T> {
    pub w: T,
    pub b: T,
}

impl<T> CombineParams<T> {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> CombineParams<U> {
        CombineParams {
            w: f(&self.w),
            b: f(&self.b),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncLayerParams<T> {
    pub attn: AttentionParams<T>,
    pub norm1: NormParams<T>,
    pub ffn: FfnParams<T>,
    pub norm2: NormParams<T>,
}

#[derive(Debug, Clone)]
pub struct DecLayerParams<T> {
    pub self_attn: AttentionParams<T>,
    pub norm1: NormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub norm2: NormParams<T>,
    pub ffn: FfnParams<T>,
    pub norm3: NormParams<T>,
}

/// Every learned tensor of the model, generic over the payload so the same
/// structure describes stored tensors (`Parameters<S>`) and tape bindings
/// (`BoundParams`).
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub src_embed: T,
    pub tgt_embed: T,
    pub enc_layers: Vec<EncLayerParams<T>>,
    pub dec_layers: Vec<DecLayerParams<T>>,
    pub enc_combine: Option<CombineParams<T>>,
    pub dec_combine: Option<CombineParams<T>>,
    pub out_proj: Option<T>,
}

pub type Parameters<S> = ModelParams<Tensor<S>>;
pub type BoundParams = ModelParams<NodeId>;

impl<T> ModelParams<T> {
    /// Visit every learned tensor in a stable order with its path name.
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        f("src_embed".into(), &self.src_embed);
        f("tgt_embed".into(), &self.tgt_embed);
        for (i, layer) in self.enc_layers.iter().enumerate() {
            layer.attn.for_each(&format!("enc.{i}.attn"), f);
            layer.norm1.for_each(&format!("enc.{i}.norm1"), f);
            layer.ffn.for_each(&format!("enc.{i}.ffn"), f);
            layer.norm2.for_each(&format!("enc.{i}.norm2"), f);
        }
        for (i, layer) in self.dec_layers.iter().enumerate() {
            layer.self_attn.for_each(&format!("dec.{i}.self_attn"), f);
            layer.norm1.for_each(&format!("dec.{i}.norm1"), f);
            layer.cross_attn.for_each(&format!("dec.{i}.cross_attn"), f);
            layer.norm2.for_each(&format!("dec.{i}.norm2"), f);
            layer.ffn.for_each(&format!("dec.{i}.ffn"), f);
            layer.norm3.for_each(&format!("dec.{i}.norm3"), f);
        }
        if let Some(c) = &self.enc_combine {
            c.for_each("enc_combine", f);
        }
        if let Some(c) = &self.dec_combine {
            c.for_each("dec_combine", f);
        }
        if let Some(o) = &self.out_proj {
            f("out_proj".into(), o);
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        f("src_embed".into(), &mut self.src_embed);
        f("tgt_embed".into(), &mut self.tgt_embed);
        for (i, layer) in self.enc_layers.iter_mut().enumerate() {
            layer.attn.for_each_mut(&format!("enc.{i}.attn"), f);
            layer.norm1.for_each_mut(&format!("enc.{i}.norm1"), f);
            layer.ffn.for_each_mut(&format!("enc.{i}.ffn"), f);
            layer.norm2.for_each_mut(&format!("enc.{i}.norm2"), f);
        }
        for (i, layer) in self.dec_layers.iter_mut().enumerate() {
            layer
                .self_attn
                .for_each_mut(&format!("dec.{i}.self_attn"), f);
            layer.norm1.for_each_mut(&format!("dec.{i}.norm1"), f);
            layer
                .cross_attn
                .for_each_mut(&format!("dec.{i}.cross_attn"), f);
            layer.norm2.for_each_mut(&format!("dec.{i}.norm2"), f);
            layer.ffn.for_each_mut(&format!("dec.{i}.ffn"), f);
            layer.norm3.for_each_mut(&format!("dec.{i}.norm3"), f);
        }
        if let Some(c) = &mut self.enc_combine {
            c.for_each_mut("enc_combine", f);
        }
        if let Some(c) = &mut self.dec_combine {
            c.for_each_mut("dec_combine", f);
        }
        if let Some(o) = &mut self.out_proj {
            f("out_proj".into(), o);
        }
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            src_embed: f(&self.src_embed),
            tgt_embed: f(&self.tgt_embed),
            enc_layers: self
                .enc_layers
                .iter()
                .map(|l| EncLayerParams {
                    attn: l.attn.map(f),
                    norm1: l.norm1.map(f),
                    ffn: l.ffn.map(f),
                    norm2: l.norm2.map(f),
                })
                .collect(),
            dec_layers: self
                .dec_layers
                .iter()
                .map(|l| DecLayerParams {
                    self_attn: l.self_attn.map(f),
                    norm1: l.norm1.map(f),
                    cross_attn: l.cross_attn.map(f),
                    norm2: l.norm2.map(f),
                    ffn: l.ffn.map(f),
                    norm3: l.norm3.map(f),
                })
                .collect(),
            enc_combine: self.enc_combine.as_ref().map(|c| c.map(f)),
            dec_combine: self.dec_combine.as_ref().map(|c| c.map(f)),
            out_proj: self.out_proj.as_ref().map(&mut *f),
        }
    }
}

impl<S: Scalar> Parameters<S> {
    pub fn init(cfg: &ModelConfig, rng: &mut SplitMix64) -> Self {
        let d = cfg.d;
        let embed_bound = 1.0 / (d as f64).sqrt();
        let ffn_in_bound = (6.0 / (d + cfg.ffn_dim) as f64).sqrt();
        let combine_bound = (6.0 / (3 * d) as f64).sqrt();

        let ffn = |rng: &mut SplitMix64| FfnParams {
            w1: Tensor::rand_uniform(vec![d, cfg.ffn_dim], -ffn_in_bound, ffn_in_bound, rng),
            b1: Tensor::zeros(vec![cfg.ffn_dim]),
            w2: Tensor::rand_uniform(vec![cfg.ffn_dim, d], -ffn_in_bound, ffn_in_bound, rng),
            b2: Tensor::zeros(vec![d]),
        };
        let combine = |rng: &mut SplitMix64| CombineParams {
            w: Tensor::rand_uniform(vec![2 * d, d], -combine_bound, combine_bound, rng),
            b: Tensor::zeros(vec![d]),
        };

        let src_embed = Tensor::rand_uniform(
            vec![cfg.vocab_src, d],
            -embed_bound,
            embed_bound,
            rng,
        );
        let tgt_embed = Tensor::rand_uniform(
            vec![cfg.vocab_tgt, d],
            -embed_bound,
            embed_bound,
            rng,
        );
        let enc_layers = (0..cfg.n_layers_enc)
            .map(|_| EncLayerParams {
                attn: AttentionParams::init(d, cfg.heads, rng),
                norm1: NormParams::init(d),
                ffn: ffn(rng),
                norm2: NormParams::init(d),
            })
            .collect();
        let dec_layers = (0..cfg.n_layers_dec)
            .map(|_| DecLayerParams {
                self_attn: AttentionParams::init(d, cfg.heads, rng),
                norm1: NormParams::init(d),
                cross_attn: AttentionParams::init(d, cfg.heads, rng),
                norm2: NormParams::init(d),
                ffn: ffn(rng),
                norm3: NormParams::init(d),
            })
            .collect();
        let lst = cfg.variant == Variant::Lst;
        ModelParams {
            src_embed,
            tgt_embed,
            enc_layers,
            dec_layers,
            enc_combine: lst.then(|| combine(rng)),
            dec_combine: lst.then(|| combine(rng)),
            out_proj: (!cfg.tie_output).then(|| {
                Tensor::rand_uniform(vec![cfg.vocab_tgt, d], -embed_bound, embed_bound, rng)
            }),
        }
    }

    /// Total learned scalars, from the tensors actually present.
    pub fn scalar_count(&self) -> u64 {
        let mut total = 0u64;
        self.for_each(&mut |_, t| total += t.numel() as u64);
        total
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |_, t| ok &= t.is_finite());
        ok
    }
}

/// Exact learned-scalar count from the closed form. For equal configs, `lst`
/// exceeds `baseline` by exactly `2 * (2d*d + d)`: one combine affine per
/// stack.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    let d = cfg.d as u64;
    let ffn = cfg.ffn_dim as u64;
    let attn = 4 * (d * d + d);
    let norm = 2 * d;
    let ffn_block = d * ffn + ffn + ffn * d + d;
    let enc_layer = attn + norm + ffn_block + norm;
    let dec_layer = 2 * attn + 3 * norm + ffn_block;
    let mut total = (cfg.vocab_src as u64) * d + (cfg.vocab_tgt as u64) * d;
    total += cfg.n_layers_enc as u64 * enc_layer;
    total += cfg.n_layers_dec as u64 * dec_layer;
    if cfg.variant == Variant::Lst {
        total += 2 * (2 * d * d + d);
    }
    if !cfg.tie_output {
        total += (cfg.vocab_tgt as u64) * d;
    }
    total
}

// ---- the model --------------------------------------------------------------

/// Encoder output: the cross-attention memory plus the per-layer stream trace
/// (for the baseline variant both stream handles point at the same node).
pub struct EncodeOutput {
    pub memory: NodeId,
    pub pre_combine: StreamNodes,
    pub layer_streams: Vec<StreamNodes>,
}

pub struct DecodeOutput {
    pub logits: NodeId,
    pub pre_combine: StreamNodes,
    pub layer_streams: Vec<StreamNodes>,
}

pub struct Model<S> {
    pub cfg: ModelConfig,
    pub params: Parameters<S>,
    pos: Tensor<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(seed);
        let params = Parameters::init(&cfg, &mut rng);
        let pos = sinusoidal_table(cfg.max_positions, cfg.d);
        Ok(Model { cfg, params, pos })
    }

    pub fn from_parts(cfg: ModelConfig, params: Parameters<S>) -> Result<Self> {
        cfg.validate()?;
        let pos = sinusoidal_table(cfg.max_positions, cfg.d);
        Ok(Model { cfg, params, pos })
    }

    /// Copy every parameter onto the tape. Training binds with
    /// `trainable = true`; inference with `false`.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> BoundParams {
        self.params.map(&mut |t| {
            let mut clean = t.clone();
            clean.clear_grad();
            tape.leaf(clean, trainable)
        })
    }

    /// After `tape.backward`, copy the accumulated leaf gradients back into
    /// the persistent parameter tensors.
    pub fn write_grads(&mut self, bound: &BoundParams, tape: &Tape<S>) -> Result<()> {
        let mut ids = Vec::new();
        bound.for_each(&mut |_, id| ids.push(*id));
        let mut idx = 0;
        let mut missing = None;
        self.params.for_each_mut(&mut |name, t| {
            let id = ids[idx];
            idx += 1;
            match tape.grad(id) {
                Some(g) => t.set_grad(g.to_vec()),
                None => {
                    // A parameter that never influenced the loss still gets a
                    // zero gradient so the optimizer sees aligned shapes.
                    if tape.value(id).numel() == t.numel() {
                        t.set_grad(vec![S::zero(); t.numel()]);
                    } else {
                        missing = Some(name);
                    }
                }
            }
        });
        match missing {
            Some(name) => Err(Error::Internal(format!(
                "gradient shape mismatch for {name}"
            ))),
            None => Ok(()),
        }
    }

    fn pos_slice(&self, len: usize) -> Tensor<S> {
        let d = self.cfg.d;
        let data = self.pos.data()[..len * d].to_vec();
        Tensor::new(vec![len, d], data).expect("consistent")
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::EmptySequence);
        }
        if len > self.cfg.max_positions {
            return Err(Error::Overlength {
                len,
                max: self.cfg.max_positions,
            });
        }
        Ok(())
    }

    fn embed(
        &self,
        tape: &mut Tape<S>,
        table: NodeId,
        tokens: &[TokenId],
        drop: &mut DropoutCtx,
    ) -> Result<NodeId> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let gathered = tape.embed(table, &ids)?;
        let scaled = tape.scale(gathered, (self.cfg.d as f64).sqrt());
        let with_pos = tape.add_const(scaled, &self.pos_slice(tokens.len()))?;
        Ok(drop.apply(tape, with_pos))
    }

    fn ffn_sublayer(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        ffn: &FfnParams<NodeId>,
        norm: &NormParams<NodeId>,
        drop: &mut DropoutCtx,
    ) -> Result<NodeId> {
        let h_lin = tape.matmul(x, ffn.w1)?;
        let h_b = tape.add_bias(h_lin, ffn.b1)?;
        let h = tape.relu(h_b);
        let out_lin = tape.matmul(h, ffn.w2)?;
        let out = tape.add_bias(out_lin, ffn.b2)?;
        let dropped = drop.apply(tape, out);
        let residual = tape.add(x, dropped)?;
        tape.layer_norm(residual, norm.gain, norm.bias, LAYER_NORM_EPS)
    }

    /// Encode a source chunk into cross-attention memory.
    pub fn encode(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        src: &[TokenId],
        drop: &mut DropoutCtx,
    ) -> Result<EncodeOutput> {
        self.check_len(src.len())?;
        let cfg = &self.cfg;
        let n = src.len();

        let m_global = masking::zero_mask::<S>(n)?.with_key_pad_columns(src, cfg.pad_id);
        let embedded = self.embed(tape, bound.src_embed, src, drop)?;

        let mut layer_streams = Vec::with_capacity(cfg.n_layers_enc);
        let (pre_combine, memory) = match cfg.variant {
            Variant::Baseline => {
                let mut x = embedded;
                for layer in &bound.enc_layers {
                    x = attention::self_attention_sublayer(
                        tape,
                        x,
                        &m_global,
                        &layer.attn,
                        &layer.norm1,
                        drop,
                    )?;
                    x = self.ffn_sublayer(tape, x, &layer.ffn, &layer.norm2, drop)?;
                    layer_streams.push(StreamNodes {
                        global: x,
                        local: x,
                    });
                }
                (
                    StreamNodes {
                        global: x,
                        local: x,
                    },
                    x,
                )
            }
            Variant::Lst => {
                let m_local = masking::local_block_mask::<S>(src, cfg.sep_id)?
                    .with_key_pad_columns(src, cfg.pad_id);
                let mut streams = StreamNodes {
                    global: embedded,
                    local: embedded,
                };
                for layer in &bound.enc_layers {
                    streams = attention::lst_self_attention(
                        tape,
                        streams,
                        &m_global,
                        &m_local,
                        &layer.attn,
                        &layer.norm1,
                        drop,
                    )?;
                    streams = StreamNodes {
                        global: self.ffn_sublayer(tape, streams.global, &layer.ffn, &layer.norm2, drop)?,
                        local: self.ffn_sublayer(tape, streams.local, &layer.ffn, &layer.norm2, drop)?,
                    };
                    layer_streams.push(streams);
                }
                let combine = bound
                    .enc_combine
                    .as_ref()
                    .ok_or_else(|| Error::Internal("lst model missing encoder combine".into()))?;
                let memory = combine_streams(tape, streams.global, streams.local, combine)?;
                (streams, memory)
            }
        };
        Ok(EncodeOutput {
            memory,
            pre_combine,
            layer_streams,
        })
    }

    /// Teacher-forced decode: logits over the target vocabulary at every
    /// prefix position. `tgt_prefix` must start with `bos`.
    pub fn decode_step(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        memory: NodeId,
        src: &[TokenId],
        tgt_prefix: &[TokenId],
        drop: &mut DropoutCtx,
    ) -> Result<DecodeOutput> {
        if tgt_prefix.is_empty() {
            return Err(Error::EmptySequence);
        }
        self.check_len(tgt_prefix.len())?;
        let cfg = &self.cfg;
        let n = tgt_prefix.len();

        let m_causal = masking::causal_mask::<S>(n)?.with_key_pad_columns(tgt_prefix, cfg.pad_id);
        let m_cross =
            MaskMatrix::rect_zero(n, src.len())?.with_key_pad_columns(src, cfg.pad_id);
        let embedded = self.embed(tape, bound.tgt_embed, tgt_prefix, drop)?;

        let mut layer_streams = Vec::with_capacity(cfg.n_layers_dec);
        let (pre_combine, hidden) = match cfg.variant {
            Variant::Baseline => {
                let mut x = embedded;
                for layer in &bound.dec_layers {
                    x = attention::self_attention_sublayer(
                        tape,
                        x,
                        &m_causal,
                        &layer.self_attn,
                        &layer.norm1,
                        drop,
                    )?;
                    x = self.cross_sublayer(tape, x, memory, &m_cross, layer, drop)?;
                    x = self.ffn_sublayer(tape, x, &layer.ffn, &layer.norm3, drop)?;
                    layer_streams.push(StreamNodes {
                        global: x,
                        local: x,
                    });
                }
                (
                    StreamNodes {
                        global: x,
                        local: x,
                    },
                    x,
                )
            }
            Variant::Lst => {
                let m_local = masking::decoder_local_mask::<S>(tgt_prefix, cfg.sep_id)?
                    .with_key_pad_columns(tgt_prefix, cfg.pad_id);
                let mut streams = StreamNodes {
                    global: embedded,
                    local: embedded,
                };
                for layer in &bound.dec_layers {
                    streams = attention::lst_self_attention(
                        tape,
                        streams,
                        &m_causal,
                        &m_local,
                        &layer.self_attn,
                        &layer.norm1,
                        drop,
                    )?;
                    streams = StreamNodes {
                        global: self.cross_sublayer(tape, streams.global, memory, &m_cross, layer, drop)?,
                        local: self.cross_sublayer(tape, streams.local, memory, &m_cross, layer, drop)?,
                    };
                    streams = StreamNodes {
                        global: self.ffn_sublayer(tape, streams.global, &layer.ffn, &layer.norm3, drop)?,
                        local: self.ffn_sublayer(tape, streams.local, &layer.ffn, &layer.norm3, drop)?,
                    };
                    layer_streams.push(streams);
                }
                let combine = bound
                    .dec_combine
                    .as_ref()
                    .ok_or_else(|| Error::Internal("lst model missing decoder combine".into()))?;
                let combined = combine_streams(tape, streams.global, streams.local, combine)?;
                (streams, combined)
            }
        };

        let logits = match (&bound.out_proj, cfg.tie_output) {
            (_, true) => tape.matmul_nt(hidden, bound.tgt_embed)?,
            (Some(w), false) => tape.matmul_nt(hidden, *w)?,
            (None, false) => {
                return Err(Error::Internal("untied model missing output projection".into()))
            }
        };
        Ok(DecodeOutput {
            logits,
            pre_combine,
            layer_streams,
        })
    }

    fn cross_sublayer(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        memory: NodeId,
        m_cross: &MaskMatrix<S>,
        layer: &DecLayerParams<NodeId>,
        drop: &mut DropoutCtx,
    ) -> Result<NodeId> {
        let attended = attention::multi_head(tape, x, memory, m_cross, &layer.cross_attn, drop)?;
        let dropped = drop.apply(tape, attended);
        let residual = tape.add(x, dropped)?;
        tape.layer_norm(residual, layer.norm2.gain, layer.norm2.bias, LAYER_NORM_EPS)
    }

    /// Summed non-pad NLL of the teacher-forced chunk, with the position
    /// count, for batch-weighted means.
    pub fn chunk_nll_sum(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        src: &[TokenId],
        tgt: &[TokenId],
        smoothing: f64,
        drop: &mut DropoutCtx,
    ) -> Result<(NodeId, usize)> {
        let (input, targets) = decoder_io(tgt, self.cfg.pad_id, self.cfg.bos_id, self.cfg.eos_id);
        let enc = self.encode(tape, bound, src, drop)?;
        let dec = self.decode_step(tape, bound, enc.memory, src, &input, drop)?;
        tape.cross_entropy_sum(dec.logits, &targets, self.cfg.pad_id as usize, smoothing)
    }

    /// Mean non-pad NLL of one chunk on a fresh tape (no gradients).
    pub fn chunk_loss_value(&self, src: &[TokenId], tgt: &[TokenId], smoothing: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (sum, count) =
            self.chunk_nll_sum(&mut tape, &bound, src, tgt, smoothing, &mut DropoutCtx::off())?;
        Ok(tape.value(sum).data()[0].to_f64_exact() / count as f64)
    }

    /// Teacher-forced logits for a full prefix on a fresh tape.
    pub fn prefix_logits(&self, src: &[TokenId], tgt_prefix: &[TokenId]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut drop = DropoutCtx::off();
        let enc = self.encode(&mut tape, &bound, src, &mut drop)?;
        let dec = self.decode_step(&mut tape, &bound, enc.memory, src, tgt_prefix, &mut drop)?;
        Ok(tape.value(dec.logits).clone())
    }

    /// Total log-probability of `tgt` (every token plus the closing `eos`)
    /// given `src`. Used by contrastive scoring.
    pub fn sequence_log_prob(&self, src: &[TokenId], tgt: &[TokenId]) -> Result<f64> {
        let (input, targets) = decoder_io(tgt, self.cfg.pad_id, self.cfg.bos_id, self.cfg.eos_id);
        let logits = self.prefix_logits(src, &input)?;
        let vocab = logits.cols();
        let mut total = 0.0;
        for (row, &t) in (0..logits.rows()).zip(&targets) {
            if t == self.cfg.pad_id as usize {
                continue;
            }
            let row: Vec<f64> = logits.row(row).iter().map(|v| v.to_f64_exact()).collect();
            debug_assert_eq!(row.len(), vocab);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += row[t] - max - log_sum;
        }
        Ok(total)
    }
}

/// Build the teacher-forcing pair for a (possibly right-padded) target chunk:
/// input `[bos, y1..yn, pad...]`, targets `[y1..yn, eos, pad...]`.
pub fn decoder_io(
    tgt: &[TokenId],
    pad_id: TokenId,
    bos_id: TokenId,
    eos_id: TokenId,
) -> (Vec<TokenId>, Vec<usize>) {
    let real = tgt
        .iter()
        .position(|&t| t == pad_id)
        .unwrap_or(tgt.len());
    let mut input = Vec::with_capacity(tgt.len() + 1);
    input.push(bos_id);
    input.extend_from_slice(&tgt[..real]);
    input.extend(std::iter::repeat_n(pad_id, tgt.len() - real));
    let mut targets: Vec<usize> = tgt[..real].iter().map(|&t| t as usize).collect();
    targets.push(eos_id as usize);
    targets.extend(std::iter::repeat_n(pad_id as usize, tgt.len() - real));
    (input, targets)
}

/// Concatenate the two streams and project back to model width. Applied only
/// after the final layer of a stack.
pub fn combine_streams<S: Scalar>(
    tape: &mut Tape<S>,
    global: NodeId,
    local: NodeId,
    p: &CombineParams<NodeId>,
) -> Result<NodeId> {
    let concat = tape.concat_cols(&[global, local])?;
    let lin = tape.matmul(concat, p.w)?;
    tape.add_bias(lin, p.b)
}

/// Sinusoidal position table, continuous across the whole chunk.
fn sinusoidal_table<S: Scalar>(max_positions: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(max_positions * d);
    for pos in 0..max_positions {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
            let angle = pos as f64 * freq;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(S::from_f64_exact(v));
        }
    }
    Tensor::new(vec![max_positions, d], data).expect("consistent")
}
