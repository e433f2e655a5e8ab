//! End-to-end behavior of the `lstnmt` binary on a tiny corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lstnmt")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn lstnmt")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Three-sentence documents; the target is a deterministic word-for-word
/// mapping of the source, so a small model can learn it quickly.
fn write_corpus(dir: &Path, docs: usize, tag: &str) -> (PathBuf, PathBuf) {
    let mut src = String::new();
    let mut tgt = String::new();
    for d in 0..docs {
        for s in 0..3 {
            let a = (d + s) % 6;
            let b = (d * 2 + s) % 6;
            let c = (d + 2 * s) % 6;
            src.push_str(&format!("W{a} W{b} W{c}\n"));
            tgt.push_str(&format!("w{a} w{b} w{c}\n"));
        }
        if d + 1 < docs {
            src.push('\n');
            tgt.push('\n');
        }
    }
    let src_path = dir.join(format!("{tag}.src"));
    let tgt_path = dir.join(format!("{tag}.tgt"));
    std::fs::write(&src_path, src).unwrap();
    std::fs::write(&tgt_path, tgt).unwrap();
    (src_path, tgt_path)
}

fn write_config(dir: &Path, run_dir: &str) -> PathBuf {
    let cfg = format!(
        "[run]\ndir = {run_dir}\nseed = 3\n\n\
         [data]\ntrain_src = train.src\ntrain_tgt = train.tgt\n\
         dev_src = dev.src\ndev_tgt = dev.tgt\nvocab_max = 64\n\n\
         [model]\nvariant = lst\nd = 16\nheads = 2\nlayers_enc = 1\nlayers_dec = 1\n\
         ffn_dim = 32\nk = 2\ndropout = 0.0\nmax_positions = 64\n\n\
         [train]\nepochs = 2\nmax_tokens = 512\nwarmup = 50\nscale = 1.0\nlog_every = 5\n\n\
         [decode]\nbeam = 2\nalpha = 0.6\nposition = last\n"
    );
    let path = dir.join("run.conf");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn setup_workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("lstnmt_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn masks_subcommand_golden_grids() {
    let dir = setup_workdir("masks");
    std::fs::write(dir.join("toks.txt"), "a b <sep> c").unwrap();
    let out = run_in(&dir, &["masks", "toks.txt", "--kind", "enc-local"]);
    assert_ok(&out, "masks enc-local");
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "00--\n00--\n--00\n--00\n"
    );
    let out = run_in(&dir, &["masks", "toks.txt", "--kind", "causal"]);
    assert_ok(&out, "masks causal");
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "0---\n00--\n000-\n0000\n"
    );
    let out = run_in(&dir, &["masks", "toks.txt", "--kind", "dec-local"]);
    assert_ok(&out, "masks dec-local");
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "0---\n00--\n--0-\n--00\n"
    );
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn evaluate_identity_prints_bleu_100() {
    let dir = setup_workdir("eval");
    std::fs::write(dir.join("h.txt"), "the cat sat on the mat\n").unwrap();
    let out = run_in(&dir, &["evaluate", "h.txt", "h.txt"]);
    assert_ok(&out, "evaluate");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("BLEU = 100.00"), "stdout: {stdout}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn every_subcommand_documents_its_flags() {
    let dir = setup_workdir("help");
    let expectations: &[(&str, &[&str])] = &[
        ("preprocess", &["--config", "--set"]),
        (
            "train",
            &["--config", "--seed", "--epochs", "--max-steps", "--resume", "--set"],
        ),
        (
            "translate",
            &[
                "--config",
                "--checkpoint",
                "--input",
                "--k",
                "--beam",
                "--position",
                "--grid-dump",
                "--set",
            ],
        ),
        ("evaluate", &["--per-position"]),
        (
            "score-contrastive",
            &["--config", "--checkpoint", "--groups", "--mean-per-token", "--set"],
        ),
        ("masks", &["--sep", "--kind"]),
    ];
    for (cmd, flags) in expectations {
        let out = run_in(&dir, &[cmd, "--help"]);
        assert_ok(&out, &format!("{cmd} --help"));
        let help = String::from_utf8_lossy(&out.stdout);
        for flag in *flags {
            assert!(help.contains(flag), "{cmd} --help missing {flag}:\n{help}");
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn unknown_flags_are_errors() {
    let dir = setup_workdir("flags");
    let out = run_in(&dir, &["evaluate", "--definitely-not-a-flag", "x"]);
    assert!(!out.status.success());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn errors_are_single_line_and_nonzero() {
    let dir = setup_workdir("err");
    let cfg = write_config(&dir, "run");
    // No corpus files exist yet.
    let out = run_in(&dir, &["preprocess", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| !l.is_empty()).collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    assert!(lines[0].starts_with("error: "), "stderr: {stderr}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn full_pipeline_and_degenerations() {
    let dir = setup_workdir("pipeline");
    write_corpus(&dir, 24, "train");
    write_corpus(&dir, 4, "dev");
    let cfg = write_config(&dir, "run");
    let cfg_s = cfg.to_str().unwrap();

    assert_ok(&run_in(&dir, &["preprocess", "--config", cfg_s]), "preprocess");
    assert!(dir.join("run/dataset.bin").exists());
    assert!(dir.join("run/config.echo").exists());

    assert_ok(
        &run_in(&dir, &["train", "--config", cfg_s, "--max-steps", "60"]),
        "train",
    );
    assert!(dir.join("run/checkpoints/best.ckpt").exists());
    assert!(dir.join("run/metrics.log").exists());
    let metrics = std::fs::read_to_string(dir.join("run/metrics.log")).unwrap();
    for line in metrics.lines() {
        assert_eq!(line.split('\t').count(), 5, "metrics line: {line}");
    }

    // Translate with the grid dump, then score it per position.
    write_corpus(&dir, 3, "test");
    assert_ok(
        &run_in(
            &dir,
            &[
                "translate",
                "--config",
                cfg_s,
                "--input",
                "test.src",
                "--grid-dump",
            ],
        ),
        "translate",
    );
    let translation = std::fs::read_to_string(dir.join("run/outputs/translation.txt")).unwrap();
    // Mirror of the input format: 3 docs of 3 sentences plus two blank
    // separator lines; sentence lines may be empty for a weak model.
    let lines: Vec<&str> = translation.lines().collect();
    assert_eq!(lines.len(), 11, "translation:\n{translation}");
    assert_eq!(lines[3], "");
    assert_eq!(lines[7], "");
    assert!(dir.join("run/outputs/grid.tsv").exists());

    let out = run_in(
        &dir,
        &[
            "evaluate",
            "--per-position",
            "run/outputs/grid.tsv",
            "test.tgt",
        ],
    );
    assert_ok(&out, "evaluate --per-position");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("BLEU"), "stdout: {stdout}");
    // Machine-readable rows for j = 1 and j = 2.
    assert!(stdout.lines().any(|l| l.starts_with("1\t")));
    assert!(stdout.lines().any(|l| l.starts_with("2\t")));

    // k = 1 degenerates to sentence-by-sentence translation.
    assert_ok(
        &run_in(
            &dir,
            &[
                "translate",
                "--config",
                cfg_s,
                "--input",
                "test.src",
                "--k",
                "1",
            ],
        ),
        "translate --k 1",
    );
    let k1 = std::fs::read_to_string(dir.join("run/outputs/translation.txt")).unwrap();
    {
        use lstnmt_core::data::Dataset;
        use lstnmt_core::decoding::{BeamTranslator, ChunkTranslator};
        let dataset = Dataset::load(dir.join("run/dataset.bin")).unwrap();
        let model =
            lstnmt_core::checkpoint::load_model::<f64>(dir.join("run/checkpoints/best.ckpt"))
                .unwrap();
        let mut translator = BeamTranslator::new(&model, 2, 0.6);
        let test_src = std::fs::read_to_string(dir.join("test.src")).unwrap();
        let mut expected = Vec::new();
        for doc in lstnmt_core::data::read_documents(&test_src) {
            for line in doc {
                let ids = dataset.src_vocab.encode_line(&line);
                let out = translator.translate_chunk(&ids, 1).unwrap();
                expected.push(dataset.tgt_vocab.decode(&out.tokens));
            }
        }
        // The beam enforces at least one token per chunk, so with k = 1 no
        // sentence line is empty and blank lines are doc separators only.
        let got: Vec<&str> = k1.lines().filter(|l| !l.is_empty()).collect();
        assert_eq!(got, expected);
        assert!(expected.iter().all(|s| !s.is_empty()));
    }

    // Contrastive scoring runs end to end on a small fixture.
    let groups = "SRC\tW0 W1 W2\nSRC\tW1 W2 W3\nCAND\tw0 w1 w2 <sep> w1 w2 w3\nCAND\tw5 w5 w5 <sep> w5 w5 w5\nTRUE\t0\nPHEN\tlexical-cohesion\n";
    std::fs::write(dir.join("groups.txt"), groups).unwrap();
    let out = run_in(
        &dir,
        &[
            "score-contrastive",
            "--config",
            cfg_s,
            "--groups",
            "groups.txt",
        ],
    );
    assert_ok(&out, "score-contrastive");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("lexical-cohesion"), "stdout: {stdout}");

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn run_directory_lock_prevents_concurrent_writers() {
    let dir = setup_workdir("lock");
    write_corpus(&dir, 6, "train");
    write_corpus(&dir, 2, "dev");
    let cfg = write_config(&dir, "locked_run");
    std::fs::create_dir_all(dir.join("locked_run")).unwrap();
    std::fs::write(dir.join("locked_run/.lock"), "999999\n").unwrap();
    let out = run_in(&dir, &["preprocess", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("locked"), "stderr: {stderr}");
    let _ = std::fs::remove_dir_all(&dir);
}
