//! Run configuration: flat key/value pairs under `[section]` headers, with
//! `#` comments. Every CLI flag overrides its config key; the effective
//! config is echoed into the run directory as `config.echo`.

use anyhow::{anyhow, bail, Context, Result};
use lstnmt_core::model::{ModelConfig, Variant};
use lstnmt_core::training::{AdamConfig, TrainOptions};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum Position {
    Last,
    At(usize),
}

impl Position {
    pub fn parse(s: &str) -> Result<Position> {
        if s == "last" {
            return Ok(Position::Last);
        }
        s.parse::<usize>()
            .map(Position::At)
            .map_err(|_| anyhow!("position must be `last` or a 1-based integer, got `{s}`"))
    }

    pub fn render(&self) -> String {
        match self {
            Position::Last => "last".into(),
            Position::At(j) => j.to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    // [run]
    pub dir: PathBuf,
    pub seed: u64,
    // [data]
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub vocab_max: usize,
    pub vocab_min_freq: usize,
    // [model]
    pub variant: Variant,
    pub d: usize,
    pub heads: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub ffn_dim: usize,
    pub k: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub tie_output: bool,
    // [train]
    pub epochs: usize,
    pub max_tokens: usize,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    pub scale: f64,
    pub max_steps: Option<u64>,
    pub log_every: u64,
    pub select_by: String,
    pub stride: Option<usize>,
    // [decode]
    pub beam: usize,
    pub alpha: f64,
    pub position: Position,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dir: PathBuf::from("run"),
            seed: 1,
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
            dataset: None,
            vocab_max: 32000,
            vocab_min_freq: 1,
            variant: Variant::Lst,
            d: 64,
            heads: 4,
            layers_enc: 2,
            layers_dec: 2,
            ffn_dim: 128,
            k: 2,
            dropout: 0.1,
            max_positions: 256,
            tie_output: true,
            epochs: 5,
            max_tokens: 2048,
            label_smoothing: 0.1,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup: 16000,
            scale: 4.0,
            max_steps: None,
            log_every: 10,
            select_by: "loss".into(),
            stride: None,
            beam: 4,
            alpha: 0.6,
            position: Position::Last,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut entries = parse_entries(&text)?;
        for ov in overrides {
            let (key, value) = ov
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects SECTION.KEY=VALUE, got `{ov}`"))?;
            let (section, key) = key
                .split_once('.')
                .ok_or_else(|| anyhow!("--set expects SECTION.KEY=VALUE, got `{ov}`"))?;
            entries.insert(
                (section.trim().to_string(), key.trim().to_string()),
                value.trim().to_string(),
            );
        }
        RunConfig::from_entries(entries)
    }

    fn from_entries(mut e: BTreeMap<(String, String), String>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut take = |section: &str, key: &str| e.remove(&(section.into(), key.into()));

        macro_rules! set {
            ($field:expr, $sec:literal, $key:literal, $parse:expr) => {
                if let Some(v) = take($sec, $key) {
                    $field = $parse(&v)
                        .map_err(|err| anyhow!("[{}] {} = {v}: {err}", $sec, $key))?;
                }
            };
        }
        let parse_path = |v: &str| -> Result<PathBuf> { Ok(PathBuf::from(v)) };
        let parse_opt_path = |v: &str| -> Result<Option<PathBuf>> {
            Ok(if v.is_empty() { None } else { Some(PathBuf::from(v)) })
        };
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|e| anyhow!("{e}"));
        let parse_u64 = |v: &str| v.parse::<u64>().map_err(|e| anyhow!("{e}"));
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|e| anyhow!("{e}"));
        let parse_bool = |v: &str| match v {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(anyhow!("expected true/false, got {other}")),
        };
        let parse_opt_usize = |v: &str| -> Result<Option<usize>> {
            Ok(if v.is_empty() { None } else { Some(parse_usize(v)?) })
        };
        let parse_opt_u64 = |v: &str| -> Result<Option<u64>> {
            Ok(if v.is_empty() { None } else { Some(parse_u64(v)?) })
        };

        set!(cfg.dir, "run", "dir", parse_path);
        set!(cfg.seed, "run", "seed", parse_u64);

        set!(cfg.train_src, "data", "train_src", parse_opt_path);
        set!(cfg.train_tgt, "data", "train_tgt", parse_opt_path);
        set!(cfg.dev_src, "data", "dev_src", parse_opt_path);
        set!(cfg.dev_tgt, "data", "dev_tgt", parse_opt_path);
        set!(cfg.dataset, "data", "dataset", parse_opt_path);
        set!(cfg.vocab_max, "data", "vocab_max", parse_usize);
        set!(cfg.vocab_min_freq, "data", "vocab_min_freq", parse_usize);

        set!(cfg.variant, "model", "variant", |v: &str| Variant::parse(v)
            .map_err(|e| anyhow!("{e}")));
        set!(cfg.d, "model", "d", parse_usize);
        set!(cfg.heads, "model", "heads", parse_usize);
        set!(cfg.layers_enc, "model", "layers_enc", parse_usize);
        set!(cfg.layers_dec, "model", "layers_dec", parse_usize);
        set!(cfg.ffn_dim, "model", "ffn_dim", parse_usize);
        set!(cfg.k, "model", "k", parse_usize);
        set!(cfg.dropout, "model", "dropout", parse_f64);
        set!(cfg.max_positions, "model", "max_positions", parse_usize);
        set!(cfg.tie_output, "model", "tie_output", parse_bool);

        set!(cfg.epochs, "train", "epochs", parse_usize);
        set!(cfg.max_tokens, "train", "max_tokens", parse_usize);
        set!(cfg.label_smoothing, "train", "label_smoothing", parse_f64);
        set!(cfg.clip_norm, "train", "clip_norm", parse_f64);
        set!(cfg.beta1, "train", "beta1", parse_f64);
        set!(cfg.beta2, "train", "beta2", parse_f64);
        set!(cfg.eps, "train", "eps", parse_f64);
        set!(cfg.warmup, "train", "warmup", parse_u64);
        set!(cfg.scale, "train", "scale", parse_f64);
        set!(cfg.max_steps, "train", "max_steps", parse_opt_u64);
        set!(cfg.log_every, "train", "log_every", parse_u64);
        set!(cfg.select_by, "train", "select_by", |v: &str| -> Result<String> {
            match v {
                "loss" | "bleu" => Ok(v.to_string()),
                other => Err(anyhow!("select_by must be loss or bleu, got {other}")),
            }
        });
        set!(cfg.stride, "train", "stride", parse_opt_usize);

        set!(cfg.beam, "decode", "beam", parse_usize);
        set!(cfg.alpha, "decode", "alpha", parse_f64);
        set!(cfg.position, "decode", "position", Position::parse);

        if let Some(((section, key), _)) = e.into_iter().next() {
            bail!("unknown config key [{section}] {key}");
        }
        Ok(cfg)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.dir.join("dataset.bin"))
    }

    pub fn model_config(&self, vocab_src: usize, vocab_tgt: usize) -> ModelConfig {
        use lstnmt_core::data;
        ModelConfig {
            d: self.d,
            heads: self.heads,
            n_layers_enc: self.layers_enc,
            n_layers_dec: self.layers_dec,
            ffn_dim: self.ffn_dim,
            combine_dim: 2 * self.d,
            vocab_src,
            vocab_tgt,
            k: self.k,
            sep_id: data::SEP_ID,
            pad_id: data::PAD_ID,
            bos_id: data::BOS_ID,
            eos_id: data::EOS_ID,
            variant: self.variant,
            dropout: self.dropout,
            max_positions: self.max_positions,
            tie_output: self.tie_output,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            seed: self.seed,
            max_tokens: self.max_tokens,
            stride: self.stride,
            label_smoothing: self.label_smoothing,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                warmup: self.warmup,
                scale: self.scale,
            },
            max_steps: self.max_steps,
            log_every: self.log_every,
            select_by_bleu: self.select_by == "bleu",
            resume_from: None,
        }
    }

    /// Canonical rendering of the effective configuration.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let _ = write!(
            out,
            "[run]\ndir = {}\nseed = {}\n\n\
             [data]\ntrain_src = {}\ntrain_tgt = {}\ndev_src = {}\ndev_tgt = {}\n\
             dataset = {}\nvocab_max = {}\nvocab_min_freq = {}\n\n\
             [model]\nvariant = {}\nd = {}\nheads = {}\nlayers_enc = {}\nlayers_dec = {}\n\
             ffn_dim = {}\nk = {}\ndropout = {}\nmax_positions = {}\ntie_output = {}\n\n\
             [train]\nepochs = {}\nmax_tokens = {}\nlabel_smoothing = {}\nclip_norm = {}\n\
             beta1 = {}\nbeta2 = {}\neps = {}\nwarmup = {}\nscale = {}\nmax_steps = {}\n\
             log_every = {}\nselect_by = {}\nstride = {}\n\n\
             [decode]\nbeam = {}\nalpha = {}\nposition = {}\n",
            self.dir.display(),
            self.seed,
            path(&self.train_src),
            path(&self.train_tgt),
            path(&self.dev_src),
            path(&self.dev_tgt),
            path(&self.dataset),
            self.vocab_max,
            self.vocab_min_freq,
            self.variant.as_str(),
            self.d,
            self.heads,
            self.layers_enc,
            self.layers_dec,
            self.ffn_dim,
            self.k,
            self.dropout,
            self.max_positions,
            self.tie_output,
            self.epochs,
            self.max_tokens,
            self.label_smoothing,
            self.clip_norm,
            self.beta1,
            self.beta2,
            self.eps,
            self.warmup,
            self.scale,
            self.max_steps.map(|v| v.to_string()).unwrap_or_default(),
            self.log_every,
            self.select_by,
            self.stride.map(|v| v.to_string()).unwrap_or_default(),
            self.beam,
            self.alpha,
            self.position.render(),
        );
        out
    }
}

fn parse_entries(text: &str) -> Result<BTreeMap<(String, String), String>> {
    let mut entries = BTreeMap::new();
    let mut section = String::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key = value", ln + 1))?;
        if section.is_empty() {
            bail!("config line {}: key outside any [section]", ln + 1);
        }
        entries.insert(
            (section.clone(), key.trim().to_string()),
            value.trim().to_string(),
        );
    }
    Ok(entries)
}
