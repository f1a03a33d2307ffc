//! End-to-end checks of the `v2s` binary: exit codes, reproducibility, and a
//! full pipeline smoke run over a tiny synthetic corpus.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn v2s() -> Command {
    Command::new(env!("CARGO_BIN_EXE_v2s"))
}

fn run(args: &[&str]) -> Output {
    v2s().args(args).output().expect("binary runs")
}

const SUBCOMMANDS: [&str; 10] = [
    "build-vocab",
    "encode",
    "train",
    "generate",
    "diagnose",
    "correlate",
    "rank",
    "analogy",
    "interpolate",
    "repl",
];

#[test]
fn help_exits_zero_everywhere() {
    let top = run(&["--help"]);
    assert_eq!(top.status.code(), Some(0));
    for sub in SUBCOMMANDS {
        let out = run(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub} --help");
        assert!(!out.stdout.is_empty(), "{sub} --help prints usage");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["rank", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn module_errors_exit_one() {
    let out = run(&["rank", "--table", "/nonexistent/table.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn rank_average_uses_mean_ranks() {
    let dir = tempfile::tempdir().unwrap();
    let out = v2s()
        .args(["rank", "--table", "fixtures/downstream.csv", "--average", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let order: Vec<&str> = stdout
        .lines()
        .filter_map(|l| l.split_whitespace().nth(1))
        .collect();
    assert_eq!(order.first(), Some(&"SBERT"));
    assert_eq!(order.last(), Some(&"GEM"));
    assert!(dir.path().join("ranks.csv").exists());
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn correlate_identical_rows_print_rho_one() {
    let dir = tempfile::tempdir().unwrap();
    let diag = dir.path().join("diag.csv");
    let down = dir.path().join("down.csv");
    std::fs::write(&diag, "task,A,B,C,D\nId,1,2,3,4\n").unwrap();
    std::fs::write(&down, "task,A,B,C,D\nsame,10,20,30,40\nflipped,4,3,2,1\n").unwrap();
    let out = v2s()
        .args(["correlate", "--diagnostics"])
        .arg(&diag)
        .arg("--downstream")
        .arg(&down)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let corr = std::fs::read_to_string(dir.path().join("corr.csv")).unwrap();
    let line = corr.lines().nth(1).unwrap();
    assert!(line.starts_with("Id,1.000000,-1.000000"), "got {line}");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["Id"]["min_rho"], -1.0);
}

#[test]
fn correlate_defaults_to_bundled_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = v2s()
        .args(["correlate", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let corr = std::fs::read_to_string(dir.path().join("corr.csv")).unwrap();
    assert!(corr.starts_with("diagnostic,STS,MR,"));
    assert_eq!(corr.lines().count(), 6); // header + five diagnostics
}

struct Pipeline {
    dir: tempfile::TempDir,
    corpus: PathBuf,
    vocab: PathBuf,
    checkpoint: PathBuf,
}

/// build-vocab -> train on a tiny corpus; shared by the pipeline tests.
fn tiny_pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    let text: String = common::template_corpus(40, 11)
        .iter()
        .map(|t| t.join(" ") + "\n")
        .collect();
    std::fs::write(&corpus, text).unwrap();

    let vocab_out = dir.path().join("vocab-out");
    let out = v2s()
        .args(["build-vocab", "--corpus"])
        .arg(&corpus)
        .arg("--out")
        .arg(&vocab_out)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let vocab = vocab_out.join("vocab.txt");

    let train_out = dir.path().join("train-out");
    let out = train_cmd(&corpus, &vocab, &train_out).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let checkpoint = train_out.join("checkpoint.v2s");
    assert!(checkpoint.exists());
    assert!(train_out.join("train_log.jsonl").exists());
    assert!(train_out.join("config.json").exists());
    Pipeline {
        dir,
        corpus,
        vocab,
        checkpoint,
    }
}

fn train_cmd(corpus: &Path, vocab: &Path, out: &Path) -> Command {
    let mut cmd = v2s();
    cmd.args(["train", "--corpus"])
        .arg(corpus)
        .arg("--vocab")
        .arg(vocab)
        .args([
            "--encoder",
            "avg",
            "--table",
            "random:16",
            "--word-dim",
            "16",
            "--hidden-dim",
            "24",
            "--num-layers",
            "1",
            "--head",
            "softmax",
            "--epochs",
            "3",
            "--batch-size",
            "8",
            "--seed",
            "5",
        ])
        .arg("--out")
        .arg(out);
    cmd
}

#[test]
fn pipeline_encode_generate_diagnose_and_reproducibility() {
    let p = tiny_pipeline();

    // training twice with the same seed produces a byte-identical checkpoint
    let again = p.dir.path().join("train-again");
    let out = train_cmd(&p.corpus, &p.vocab, &again).output().unwrap();
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(&p.checkpoint).unwrap(),
        std::fs::read(again.join("checkpoint.v2s")).unwrap(),
        "same config + seed must give identical checkpoints"
    );

    // encode in both file formats
    for format in ["text", "binary"] {
        let enc_out = p.dir.path().join(format!("enc-{format}"));
        let out = v2s()
            .args(["encode", "--corpus"])
            .arg(&p.corpus)
            .arg("--vocab")
            .arg(&p.vocab)
            .args(["--encoder", "avg", "--table", "random:16", "--seed", "5", "--format", format])
            .arg("--out")
            .arg(&enc_out)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let name = if format == "text" { "embeddings.txt" } else { "embeddings.bin" };
        assert!(enc_out.join(name).exists());
    }

    // generate from the text embedding file
    let gen_out = p.dir.path().join("gen");
    let out = v2s()
        .args(["generate", "--checkpoint"])
        .arg(&p.checkpoint)
        .arg("--vocab")
        .arg(&p.vocab)
        .arg("--embeddings")
        .arg(p.dir.path().join("enc-text").join("embeddings.txt"))
        .arg("--out")
        .arg(&gen_out)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pairs = std::fs::read_to_string(gen_out.join("pairs.jsonl")).unwrap();
    assert_eq!(pairs.lines().count(), 40);

    // diagnose twice; primary outputs must be byte-identical
    let diagnose_once = |out_dir: &Path| {
        let out = v2s()
            .args(["diagnose", "--checkpoint"])
            .arg(&p.checkpoint)
            .arg("--vocab")
            .arg(&p.vocab)
            .arg("--corpus")
            .arg(&p.corpus)
            .args([
                "--encoder",
                "avg",
                "--table",
                "random:16",
                "--seed",
                "5",
                "--soft-scorer",
                "lexical",
            ])
            .arg("--out")
            .arg(out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let d1 = p.dir.path().join("diag1");
    let d2 = p.dir.path().join("diag2");
    diagnose_once(&d1);
    diagnose_once(&d2);
    for name in ["report.json", "pairs.jsonl"] {
        assert_eq!(
            std::fs::read(d1.join(name)).unwrap(),
            std::fs::read(d2.join(name)).unwrap(),
            "{name} must be reproducible"
        );
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d1.join("report.json")).unwrap()).unwrap();
    for field in ["encoder_id", "n_pairs", "id_rate", "perm_rate", "bleu", "mover"] {
        assert!(report.get(field).is_some(), "report field {field}");
    }
    assert_eq!(report["encoder_id"], "avg");
    assert_eq!(report["n_pairs"], 40);
}

#[test]
fn analogy_interpolate_and_repl_run() {
    let p = tiny_pipeline();
    let encoder_args = ["--encoder", "avg", "--table", "random:16", "--seed", "5"];

    // batch analogies
    let batch = p.dir.path().join("batch.jsonl");
    std::fs::write(
        &batch,
        "{\"a\":\"the dog sees a cat\",\"b\":\"the dog likes a cat\",\"c\":\"the bird likes a horse\"}\n",
    )
    .unwrap();
    let ana_out = p.dir.path().join("ana");
    let out = v2s()
        .args(["analogy", "--checkpoint"])
        .arg(&p.checkpoint)
        .arg("--vocab")
        .arg(&p.vocab)
        .args(encoder_args)
        .arg("--batch")
        .arg(&batch)
        .arg("--out")
        .arg(&ana_out)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = std::fs::read_to_string(ana_out.join("analogies.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert!(rec.get("z_text").is_some());

    // interpolation endpoints decode like the pure inputs
    let int_out = p.dir.path().join("interp");
    let out = v2s()
        .args(["interpolate", "--checkpoint"])
        .arg(&p.checkpoint)
        .arg("--vocab")
        .arg(&p.vocab)
        .args(encoder_args)
        .args(["--a", "the dog sees a cat", "--b", "the bird likes a horse"])
        .args(["--alphas", "0,0.5,1"])
        .arg("--out")
        .arg(&int_out)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = std::fs::read_to_string(int_out.join("interpolations.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);

    // the interactive loop consumes piped commands and exits cleanly
    use std::io::Write as _;
    let mut child = v2s()
        .args(["repl", "--checkpoint"])
        .arg(&p.checkpoint)
        .arg("--vocab")
        .arg(&p.vocab)
        .args(encoder_args)
        .arg("--out")
        .arg(p.dir.path().join("repl-out"))
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .as_mut()
        .unwrap()
        .write_all(
            b"the dog sees a cat\n:a the dog sees a cat | the dog likes a cat | the bird likes a horse\n:i the dog sees a cat | the bird likes a horse\n:q\n",
        )
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("alpha=0"), "repl prints interpolation sweeps:\n{stdout}");
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "a b\nc d\n").unwrap();
    let out_a = dir.path().join("a");
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "corpus": corpus,
            "out": out_a,
            "max_len": 15,
            "min_freq": 1
        })
        .to_string(),
    )
    .unwrap();
    // config supplies corpus and out
    let out = v2s()
        .args(["build-vocab", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_a.join("vocab.txt").exists());
    // a flag overrides the config's out directory
    let out_b = dir.path().join("b");
    let out = v2s()
        .args(["build-vocab", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_b)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(out_b.join("vocab.txt").exists());
    let effective: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_b.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(effective["out"], serde_json::json!(out_b));
}
