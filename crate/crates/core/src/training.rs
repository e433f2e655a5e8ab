//! Optimization: Adam with an inverse-square-root warmup schedule, the
//! epoch/step loop, metric logging, checkpointing, and validation-driven
//! model selection.

use crate::attention::DropoutCtx;
use crate::bytes::{self, Reader};
use crate::checkpoint::{self, put_tensor, read_tensor};
use crate::data::{batch, chunk_documents, Batch, Document};
use crate::error::{Error, Result};
use crate::model::{Model, Parameters};
use crate::numerics::{Scalar, Tape, Tensor};
use crate::rng::SplitMix64;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// `scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)`, written so the two
/// branches meet exactly at `step == warmup`.
pub fn lr(step: u64, d: usize, warmup: u64, scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::ZeroStep);
    }
    let base = scale * (d as f64).powf(-0.5) * (warmup as f64).powf(-0.5);
    let linear = step as f64 / warmup as f64;
    let decay = (warmup as f64 / step as f64).sqrt();
    Ok(base * linear.min(decay))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    pub scale: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup: 16000,
            scale: 4.0,
        }
    }
}

/// Step count plus per-parameter first/second moments, aligned with the
/// parameter visit order.
pub struct OptimizerState<S> {
    pub step: u64,
    pub cfg: AdamConfig,
    d_model: usize,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    names: Vec<String>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &Parameters<S>, cfg: AdamConfig, d_model: usize) -> Self {
        let mut m = Vec::new();
        let mut names = Vec::new();
        params.for_each(&mut |name, t| {
            m.push(Tensor::zeros(t.shape().to_vec()));
            names.push(name);
        });
        let v = m.clone();
        OptimizerState {
            step: 0,
            cfg,
            d_model,
            m,
            v,
            names,
        }
    }

    pub fn current_lr(&self) -> Result<f64> {
        lr(self.step.max(1), self.d_model, self.cfg.warmup, self.cfg.scale)
    }

    /// One bias-corrected Adam update from the gradients stored on `params`.
    /// Returns the learning rate used.
    pub fn adam_step(&mut self, params: &mut Parameters<S>) -> Result<f64> {
        self.step += 1;
        let t = self.step;
        let rate = lr(t, self.d_model, self.cfg.warmup, self.cfg.scale)?;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let corr1 = 1.0 - b1.powi(t as i32);
        let corr2 = 1.0 - b2.powi(t as i32);
        let eps = self.cfg.eps;

        let mut idx = 0;
        let mut bad: Option<String> = None;
        let (ms, vs, names) = (&mut self.m, &mut self.v, &self.names);
        params.for_each_mut(&mut |name, p| {
            let i = idx;
            idx += 1;
            if bad.is_some() {
                return;
            }
            let grad: Vec<f64> = match p.grad() {
                Some(g) => g.iter().map(|v| v.to_f64_exact()).collect(),
                None => {
                    bad = Some(format!("{name}: missing gradient"));
                    return;
                }
            };
            if grad.iter().any(|g| !g.is_finite()) {
                bad = Some(names[i].clone());
                return;
            }
            let m = ms[i].data_mut();
            let v = vs[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let g = grad[j];
                let mj = b1 * m[j].to_f64_exact() + (1.0 - b1) * g;
                let vj = b2 * v[j].to_f64_exact() + (1.0 - b2) * g * g;
                m[j] = S::from_f64_exact(mj);
                v[j] = S::from_f64_exact(vj);
                let m_hat = mj / corr1;
                let v_hat = vj / corr2;
                let delta = rate * m_hat / (v_hat.sqrt() + eps);
                pd[j] = S::from_f64_exact(pd[j].to_f64_exact() - delta);
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteGrad { name });
        }
        Ok(rate)
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(params: &mut Parameters<S>, max_norm: f64) -> f64 {
    let mut sum_sq = 0.0f64;
    params.for_each(&mut |_, t| {
        if let Some(g) = t.grad() {
            sum_sq += g.iter().map(|v| v.to_f64_exact().powi(2)).sum::<f64>();
        }
    });
    let norm = sum_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = S::from_f64_exact(max_norm / norm);
        params.for_each_mut(&mut |_, t| {
            if let Some(g) = t.grad_mut() {
                for v in g.iter_mut() {
                    *v = *v * factor;
                }
            }
        });
    }
    norm
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    pub max_tokens: usize,
    /// Chunking stride for training; defaults to `k` (disjoint chunks).
    pub stride: Option<usize>,
    pub label_smoothing: f64,
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<u64>,
    pub log_every: u64,
    /// Select the best checkpoint by dev BLEU instead of dev loss.
    pub select_by_bleu: bool,
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 5,
            seed: 1,
            max_tokens: 2048,
            stride: None,
            label_smoothing: 0.1,
            clip_norm: Some(5.0),
            adam: AdamConfig::default(),
            max_steps: None,
            log_every: 10,
            select_by_bleu: false,
            resume_from: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_bleu: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev_loss: f64,
    pub final_step: u64,
}

/// Run directory layout: `metrics.log`, `checkpoints/{init,epoch_*,best,
/// postmortem}.ckpt`, `checkpoints/train_state.bin`.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train_docs: &[Document],
    dev_docs: &[Document],
    opts: &TrainOptions,
    run_dir: &Path,
) -> Result<TrainOutcome> {
    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)
        .map_err(|e| Error::io(ckpt_dir.display().to_string(), e))?;
    let metrics_path = run_dir.join("metrics.log");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    let cfg = model.cfg.clone();
    let stride = opts.stride.unwrap_or(cfg.k);
    let mut chunks = Vec::new();
    for doc in train_docs {
        chunks.extend(chunk_documents(doc, cfg.k, stride, cfg.sep_id));
    }
    if chunks.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let batches = batch(chunks, opts.max_tokens, cfg.pad_id)?;
    let mut dev_chunks = Vec::new();
    for doc in dev_docs {
        dev_chunks.extend(chunk_documents(doc, cfg.k, cfg.k, cfg.sep_id));
    }

    let mut opt = OptimizerState::new(&model.params, opts.adam.clone(), cfg.d);
    let mut data_rng = SplitMix64::new(opts.seed);
    let mut drop_rng = SplitMix64::new(opts.seed ^ 0x9E3779B97F4A7C15);
    let mut start_epoch = 0usize;
    let mut best_epoch: Option<usize> = None;
    let mut best_score = f64::INFINITY;

    if let Some(state_path) = &opts.resume_from {
        let state = TrainState::load(state_path)?;
        opt.step = state.step;
        start_epoch = state.next_epoch;
        data_rng = SplitMix64::from_state(state.data_rng);
        drop_rng = SplitMix64::from_state(state.drop_rng);
        best_epoch = state.best_epoch;
        best_score = state.best_score;
        state.restore_moments(&mut opt)?;
    } else {
        checkpoint::save_model(model, ckpt_dir.join("init.ckpt"))?;
    }

    let mut records = Vec::new();
    let mut stop = false;

    for epoch in start_epoch..opts.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        data_rng.shuffle(&mut order);

        let mut last_train_loss = f64::NAN;
        for &bi in &order {
            if opts
                .max_steps
                .is_some_and(|limit| opt.step >= limit)
            {
                stop = true;
                break;
            }
            let b = &batches[bi];
            // A non-finite intermediate (overflowed activations reaching a
            // softmax) is divergence just as much as a NaN loss value.
            let loss = match train_step(model, b, opts, &mut opt, &mut drop_rng) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => f64::NAN,
                Err(e) => return Err(e),
            };
            last_train_loss = loss;
            if !loss.is_finite() {
                checkpoint::save_model(model, ckpt_dir.join("postmortem.ckpt"))?;
                return Err(Error::Diverged { step: opt.step });
            }
            if opt.step % opts.log_every == 0 {
                writeln!(
                    metrics,
                    "{}\t{}\t{:.6}\t-\t{:.6e}",
                    opt.step,
                    epoch,
                    loss,
                    opt.current_lr()?
                )
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
            }
        }

        let dev_loss = mean_dev_loss(model, &dev_chunks)?;
        let dev_bleu = if opts.select_by_bleu {
            Some(dev_chunk_bleu(model, &dev_chunks)?)
        } else {
            None
        };
        writeln!(
            metrics,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6e}",
            opt.step,
            epoch,
            last_train_loss,
            dev_loss,
            opt.current_lr()?
        )
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

        checkpoint::save_model(model, ckpt_dir.join(format!("epoch_{epoch:04}.ckpt")))?;
        // Higher BLEU is better; negate so lower-is-better selection holds.
        let score = match dev_bleu {
            Some(b) if b.is_finite() => -b,
            _ => dev_loss,
        };
        if score < best_score {
            best_score = score;
            best_epoch = Some(epoch);
            checkpoint::save_model(model, ckpt_dir.join("best.ckpt"))?;
        }
        records.push(EpochRecord {
            epoch,
            step: opt.step,
            train_loss: last_train_loss,
            dev_loss,
            dev_bleu,
        });

        TrainState {
            step: opt.step,
            next_epoch: epoch + 1,
            data_rng: data_rng.state(),
            drop_rng: drop_rng.state(),
            best_epoch,
            best_score,
            moments: opt
                .names
                .iter()
                .cloned()
                .zip(opt.m.iter().cloned().zip(opt.v.iter().cloned()))
                .collect(),
        }
        .save(ckpt_dir.join("train_state.bin"))?;

        if stop {
            break;
        }
    }

    Ok(TrainOutcome {
        epochs: records,
        best_epoch,
        best_dev_loss: best_score,
        final_step: opt.step,
    })
}

fn train_step<S: Scalar>(
    model: &mut Model<S>,
    b: &Batch,
    opts: &TrainOptions,
    opt: &mut OptimizerState<S>,
    drop_rng: &mut SplitMix64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let mut drop = DropoutCtx::new(model.cfg.dropout, drop_rng.fork());
    let mut total_count = 0usize;
    let mut sum_node = None;
    for (src, tgt) in b.src.iter().zip(&b.tgt) {
        let (s, c) =
            model.chunk_nll_sum(&mut tape, &bound, src, tgt, opts.label_smoothing, &mut drop)?;
        total_count += c;
        sum_node = Some(match sum_node {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let sum = sum_node.ok_or(Error::EmptyCorpus)?;
    let loss = tape.scale(sum, 1.0 / total_count as f64);
    let loss_value = tape.value(loss).data()[0].to_f64_exact();
    if !loss_value.is_finite() {
        return Ok(loss_value);
    }
    tape.backward(loss)?;
    model.write_grads(&bound, &tape)?;
    if let Some(max_norm) = opts.clip_norm {
        clip_global_norm(&mut model.params, max_norm);
    }
    opt.adam_step(&mut model.params)?;
    Ok(loss_value)
}

/// Greedy chunk-level BLEU over the dev set, with token ids rendered as
/// decimal strings. An internal selection metric only; the reported corpus
/// BLEU always comes from the evaluation pipeline on real text.
pub fn dev_chunk_bleu<S: Scalar>(
    model: &Model<S>,
    dev_chunks: &[crate::data::Chunk],
) -> Result<f64> {
    use crate::decoding::{BeamTranslator, ChunkTranslator};
    if dev_chunks.is_empty() {
        return Ok(f64::NAN);
    }
    let mut translator = BeamTranslator::new(model, 1, 0.6);
    let render = |ids: &[crate::TokenId]| {
        ids.iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut hyps = Vec::with_capacity(dev_chunks.len());
    let mut refs = Vec::with_capacity(dev_chunks.len());
    for c in dev_chunks {
        let out = translator.translate_chunk(&c.src_ids, c.k_actual)?;
        hyps.push(render(&out.tokens));
        refs.push(render(&c.tgt_ids));
    }
    Ok(crate::evaluation::bleu(&hyps, &refs)?.bleu)
}

/// Mean teacher-forced NLL over dev chunks, without smoothing or dropout.
pub fn mean_dev_loss<S: Scalar>(
    model: &Model<S>,
    dev_chunks: &[crate::data::Chunk],
) -> Result<f64> {
    if dev_chunks.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for c in dev_chunks {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let (s, n) = model.chunk_nll_sum(
            &mut tape,
            &bound,
            &c.src_ids,
            &c.tgt_ids,
            0.0,
            &mut DropoutCtx::off(),
        )?;
        total += tape.value(s).data()[0].to_f64_exact();
        count += n;
    }
    Ok(total / count as f64)
}

/// Everything beyond the model needed to reproduce an interrupted run
/// bit-exactly from an epoch boundary.
struct TrainState<S> {
    step: u64,
    next_epoch: usize,
    data_rng: u64,
    drop_rng: u64,
    best_epoch: Option<usize>,
    best_score: f64,
    moments: Vec<(String, (Tensor<S>, Tensor<S>))>,
}

const STATE_MAGIC: &[u8; 8] = b"LSTNMTTS";
const STATE_VERSION: u32 = 1;

impl<S: Scalar> TrainState<S> {
    fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        bytes::put_u32(&mut out, STATE_VERSION);
        bytes::put_u64(&mut out, self.step);
        bytes::put_u64(&mut out, self.next_epoch as u64);
        bytes::put_u64(&mut out, self.data_rng);
        bytes::put_u64(&mut out, self.drop_rng);
        bytes::put_u64(
            &mut out,
            self.best_epoch.map_or(u64::MAX, |e| e as u64),
        );
        bytes::put_f64(&mut out, self.best_score);
        bytes::put_u32(&mut out, self.moments.len() as u32);
        for (name, (m, v)) in &self.moments {
            put_tensor(&mut out, &format!("m.{name}"), m);
            put_tensor(&mut out, &format!("v.{name}"), v);
        }
        let path = path.as_ref();
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn load(path: impl AsRef<Path>) -> Result<TrainState<S>> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = Reader::new(&buf, "train_state");
        if r.bytes(8)? != STATE_MAGIC {
            return Err(Error::Checkpoint("train_state: bad magic".into()));
        }
        if r.u32()? != STATE_VERSION {
            return Err(Error::Checkpoint("train_state: unsupported version".into()));
        }
        let step = r.u64()?;
        let next_epoch = r.u64()? as usize;
        let data_rng = r.u64()?;
        let drop_rng = r.u64()?;
        let best_epoch = match r.u64()? {
            u64::MAX => None,
            e => Some(e as usize),
        };
        let best_score = r.f64()?;
        let n = r.u32()? as usize;
        let mut table: BTreeMap<String, Tensor<S>> = BTreeMap::new();
        for _ in 0..n {
            let (name, m) = read_tensor::<S>(&mut r)?;
            let (vname, v) = read_tensor::<S>(&mut r)?;
            let base = name
                .strip_prefix("m.")
                .ok_or_else(|| Error::Checkpoint(format!("train_state: bad entry {name}")))?;
            if vname != format!("v.{base}") {
                return Err(Error::Checkpoint(format!(
                    "train_state: mismatched pair {name} / {vname}"
                )));
            }
            table.insert(format!("m.{base}"), m);
            table.insert(vname, v);
        }
        r.finish()?;
        let moments = table
            .iter()
            .filter_map(|(k, m)| {
                k.strip_prefix("m.").map(|base| {
                    (
                        base.to_string(),
                        (m.clone(), table[&format!("v.{base}")].clone()),
                    )
                })
            })
            .collect();
        Ok(TrainState {
            step,
            next_epoch,
            data_rng,
            drop_rng,
            best_epoch,
            best_score,
            moments,
        })
    }

    fn restore_moments(&self, opt: &mut OptimizerState<S>) -> Result<()> {
        let by_name: BTreeMap<&str, &(Tensor<S>, Tensor<S>)> = self
            .moments
            .iter()
            .map(|(n, mv)| (n.as_str(), mv))
            .collect();
        for (i, name) in opt.names.iter().enumerate() {
            let (m, v) = by_name.get(name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("train_state: missing moments for {name}"))
            })?;
            if m.shape() != opt.m[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "train_state: moment shape mismatch for {name}"
                )));
            }
            opt.m[i] = (*m).clone();
            opt.v[i] = (*v).clone();
        }
        Ok(())
    }
}
