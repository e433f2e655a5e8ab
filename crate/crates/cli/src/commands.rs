//! Command implementations. Each command echoes the effective config into the
//! run directory, takes the directory lock when it writes, and reports errors
//! as single-line messages through `main`.

use crate::config::{Position, RunConfig};
use anyhow::{anyhow, bail, Context, Result};
use lstnmt_core::checkpoint;
use lstnmt_core::data::{self, Dataset, Vocab};
use lstnmt_core::decoding::{self, BeamTranslator, SplitKind, TextGrid};
use lstnmt_core::evaluation::{self, ModelPairScorer};
use lstnmt_core::masking;
use lstnmt_core::model::Model;
use lstnmt_core::training::{self, TrainOptions};
use lstnmt_core::TokenId;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Exclusive-creation lock file preventing concurrent writers in a run
/// directory. Removed on drop.
pub struct RunDirLock {
    path: PathBuf,
}

impl RunDirLock {
    pub fn acquire(run_dir: &Path) -> Result<RunDirLock> {
        std::fs::create_dir_all(run_dir)
            .with_context(|| format!("creating run dir {}", run_dir.display()))?;
        let path = run_dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunDirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow!(
                "run directory is locked by another process (remove {} if stale)",
                path.display()
            )),
            Err(e) => Err(e).with_context(|| format!("creating lock {}", path.display())),
        }
    }
}

impl Drop for RunDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    let path = cfg.dir.join("config.echo");
    std::fs::write(&path, cfg.render())
        .with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.dataset_path();
    Dataset::load(&path)
        .with_context(|| format!("loading dataset {} (run `preprocess` first?)", path.display()))
}

fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.dir.join("checkpoints").join("best.ckpt")
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model<f64>> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_checkpoint(cfg));
    checkpoint::load_model::<f64>(&path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Build the vocabularies, numericalize the training corpus, and write the
/// binary dataset plus a stats summary.
pub fn preprocess(cfg: &RunConfig) -> Result<()> {
    let _lock = RunDirLock::acquire(&cfg.dir)?;
    echo_config(cfg)?;
    let train_src = cfg
        .train_src
        .as_ref()
        .ok_or_else(|| anyhow!("[data] train_src is required for preprocess"))?;
    let train_tgt = cfg
        .train_tgt
        .as_ref()
        .ok_or_else(|| anyhow!("[data] train_tgt is required for preprocess"))?;
    let (src_docs, tgt_docs) = data::load_parallel(train_src, train_tgt)?;

    let all_src: Vec<&str> = src_docs.iter().flatten().map(String::as_str).collect();
    let all_tgt: Vec<&str> = tgt_docs.iter().flatten().map(String::as_str).collect();
    let src_vocab = Vocab::build(all_src, cfg.vocab_max, cfg.vocab_min_freq)?;
    let tgt_vocab = Vocab::build(all_tgt, cfg.vocab_max, cfg.vocab_min_freq)?;
    let docs = data::numericalize(&src_docs, &tgt_docs, &src_vocab, &tgt_vocab);

    let dataset = Dataset {
        src_vocab,
        tgt_vocab,
        docs,
    };
    let out = cfg.dataset_path();
    dataset.save(&out)?;

    let sentences: usize = dataset.docs.iter().map(|d| d.sentence_count()).sum();
    let src_tokens: usize = dataset
        .docs
        .iter()
        .flat_map(|d| d.src.iter())
        .map(Vec::len)
        .sum();
    let tgt_tokens: usize = dataset
        .docs
        .iter()
        .flat_map(|d| d.tgt.iter())
        .map(Vec::len)
        .sum();
    println!(
        "dataset {} | documents {} | sentences {} | src tokens {} | tgt tokens {} | src vocab {} | tgt vocab {}",
        out.display(),
        dataset.docs.len(),
        sentences,
        src_tokens,
        tgt_tokens,
        dataset.src_vocab.len(),
        dataset.tgt_vocab.len()
    );
    Ok(())
}

/// Train from the preprocessed dataset, writing checkpoints and metrics into
/// the run directory.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let _lock = RunDirLock::acquire(&cfg.dir)?;
    echo_config(cfg)?;
    let dataset = load_dataset(cfg)?;

    let dev_docs = match (&cfg.dev_src, &cfg.dev_tgt) {
        (Some(s), Some(t)) => {
            let (ds, dt) = data::load_parallel(s, t)?;
            data::numericalize(&ds, &dt, &dataset.src_vocab, &dataset.tgt_vocab)
        }
        _ => Vec::new(),
    };

    let model_cfg = cfg.model_config(dataset.src_vocab.len(), dataset.tgt_vocab.len());
    let mut opts: TrainOptions = cfg.train_options();
    let mut model = if resume {
        let state = cfg.dir.join("checkpoints").join("train_state.bin");
        if !state.exists() {
            bail!("--resume: no training state at {}", state.display());
        }
        opts.resume_from = Some(state);
        // Continue from the last completed epoch's parameters.
        let mut last = None;
        for e in (0..cfg.epochs).rev() {
            let p = cfg.dir.join("checkpoints").join(format!("epoch_{e:04}.ckpt"));
            if p.exists() {
                last = Some(p);
                break;
            }
        }
        let p = last.ok_or_else(|| anyhow!("--resume: no epoch checkpoints found"))?;
        checkpoint::load_model::<f64>(&p)?
    } else {
        Model::new(model_cfg, cfg.seed)?
    };

    let outcome = training::train(&mut model, &dataset.docs, &dev_docs, &opts, &cfg.dir)?;
    match outcome.best_epoch {
        Some(e) => println!(
            "trained {} steps | best epoch {} | dev loss {:.6} | checkpoints in {}",
            outcome.final_step,
            e,
            outcome.epochs[e].dev_loss,
            cfg.dir.join("checkpoints").display()
        ),
        None => println!(
            "trained {} steps | checkpoints in {}",
            outcome.final_step,
            cfg.dir.join("checkpoints").display()
        ),
    }
    Ok(())
}

/// Sliding-window translation of a source-document file.
pub fn translate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    input: &Path,
    grid_dump: bool,
) -> Result<()> {
    let _lock = RunDirLock::acquire(&cfg.dir)?;
    echo_config(cfg)?;
    let dataset = load_dataset(cfg)?;
    let model = load_model(cfg, checkpoint)?;
    if model.cfg.vocab_src != dataset.src_vocab.len()
        || model.cfg.vocab_tgt != dataset.tgt_vocab.len()
    {
        bail!(
            "checkpoint vocabulary sizes ({}, {}) do not match the dataset ({}, {})",
            model.cfg.vocab_src,
            model.cfg.vocab_tgt,
            dataset.src_vocab.len(),
            dataset.tgt_vocab.len()
        );
    }
    let k = cfg.k;
    let j = match cfg.position {
        Position::Last => k,
        Position::At(j) if (1..=k).contains(&j) => j,
        Position::At(j) => bail!("--position {j} outside 1..={k}"),
    };

    let text = std::fs::read_to_string(input)
        .with_context(|| format!("reading input {}", input.display()))?;
    let docs = data::read_documents(&text);
    if docs.is_empty() {
        bail!("input {} contains no sentences", input.display());
    }

    let out_dir = cfg.dir.join("outputs");
    std::fs::create_dir_all(&out_dir)?;
    let mut translation = String::new();
    let mut grid_rows = String::new();
    let mut windows = 0usize;
    let mut mismatched = 0usize;
    let mut truncated = 0usize;

    for (doc_id, doc) in docs.iter().enumerate() {
        let sentences: Vec<Vec<TokenId>> = doc
            .iter()
            .map(|line| dataset.src_vocab.encode_line(line))
            .collect();
        let mut translator = BeamTranslator::new(&model, cfg.beam, cfg.alpha);
        let grid =
            decoding::sliding_translate(&mut translator, doc_id, &sentences, k, model.cfg.sep_id)?;
        windows += sentences.len();
        for d in &grid.diagnostics {
            if d.split.kind() != SplitKind::Exact {
                mismatched += 1;
            }
            if d.truncated {
                truncated += 1;
            }
        }
        for sent in grid.assemble_position(j)? {
            translation.push_str(&dataset.tgt_vocab.decode(&sent));
            translation.push('\n');
        }
        if doc_id + 1 < docs.len() {
            translation.push('\n');
        }
        if grid_dump {
            grid_rows.push_str(&grid.dump_rows(&dataset.tgt_vocab));
        }
    }

    let out_path = out_dir.join("translation.txt");
    std::fs::write(&out_path, &translation)?;
    if grid_dump {
        std::fs::write(out_dir.join("grid.tsv"), &grid_rows)?;
    }
    eprintln!(
        "windows {windows} | separator mismatches {mismatched} | truncated {truncated}"
    );
    println!("wrote {}", out_path.display());
    if grid_dump {
        println!("wrote {}", out_dir.join("grid.tsv").display());
    }
    Ok(())
}

fn read_sentences(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Corpus BLEU of a hypothesis file against a reference file, or a
/// per-position report from a grid dump.
pub fn evaluate(files: &[PathBuf], per_position: Option<&Path>) -> Result<()> {
    match per_position {
        None => {
            let [hyp, reference] = files else {
                bail!("evaluate expects HYP and REF files");
            };
            let hyps = read_sentences(hyp)?;
            let refs = read_sentences(reference)?;
            let report = evaluation::bleu(&hyps, &refs)?;
            println!("{report}");
        }
        Some(grid_path) => {
            let [reference] = files else {
                bail!("evaluate --per-position expects only the REF file");
            };
            let text = std::fs::read_to_string(grid_path)
                .with_context(|| format!("reading grid dump {}", grid_path.display()))?;
            let grids: Vec<TextGrid> = decoding::parse_grid_dump(&text)?;
            let ref_text = std::fs::read_to_string(reference)
                .with_context(|| format!("reading {}", reference.display()))?;
            let ref_docs = data::read_documents(&ref_text);
            let k = grids.iter().map(|g| g.k).max().unwrap_or(1);
            let report = evaluation::per_position_report(&grids, &ref_docs, k)?;
            print!("{}", report.render_table());
            print!("{}", report.render_rows());
        }
    }
    Ok(())
}

/// Per-phenomenon contrastive consistency accuracy.
pub fn score_contrastive(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    groups_path: &Path,
    mean_per_token: bool,
) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    let model = load_model(cfg, checkpoint)?;
    let text = std::fs::read_to_string(groups_path)
        .with_context(|| format!("reading groups {}", groups_path.display()))?;
    let groups = evaluation::parse_contrastive(&text)?;
    let mut scorer = ModelPairScorer(&model);
    let report = evaluation::contrastive_accuracy(
        &mut scorer,
        &groups,
        &dataset.src_vocab,
        &dataset.tgt_vocab,
        model.cfg.sep_id,
        mean_per_token,
    )?;
    print!("{}", report.render_table());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MaskKind {
    EncLocal,
    DecLocal,
    Causal,
}

/// Print a mask over the tokens of a file as a `0`/`-` grid.
pub fn masks(tokens_file: &Path, sep: &str, kind: MaskKind) -> Result<()> {
    let text = std::fs::read_to_string(tokens_file)
        .with_context(|| format!("reading {}", tokens_file.display()))?;
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.is_empty() {
        bail!("{} contains no tokens", tokens_file.display());
    }
    // Mask construction only cares about separator positions; give every
    // other surface form a distinct id.
    let sep_id: TokenId = 3;
    let ids: Vec<TokenId> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| if *t == sep { sep_id } else { 10 + i as TokenId })
        .collect();
    let grid = match kind {
        MaskKind::EncLocal => masking::local_block_mask::<f64>(&ids, sep_id)?,
        MaskKind::DecLocal => masking::decoder_local_mask::<f64>(&ids, sep_id)?,
        MaskKind::Causal => masking::causal_mask::<f64>(ids.len())?,
    };
    print!("{}", grid.render_grid());
    Ok(())
}
