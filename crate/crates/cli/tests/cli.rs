use std::path::Path;
use std::process::{Command, Output};

use medseq::config::KeyValues;
use medseq::decode::{write_predictions, Prediction};
use medseq::pipeline::gold_codes;
use medseq::records::read_corpus;

fn medseq(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medseq"))
        .args(args)
        .current_dir(dir)
        .env_remove("MEDSEQ_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) {
    let out = medseq(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_kv(path: &Path) -> KeyValues {
    KeyValues::parse(&std::fs::read_to_string(path).unwrap(), "test").unwrap()
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--n", "300", "--seed", "1", "--out", "a"], dir.path());
    ok(&["gen-data", "--n", "300", "--seed", "1", "--out", "b"], dir.path());
    ok(&["gen-data", "--n", "300", "--seed", "2", "--out", "c"], dir.path());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("corpus.tsv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn seed_environment_variable_is_a_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let run_env = |out: &str, extra: &[&str]| {
        let mut args = vec!["gen-data", "--n", "100", "--out", out];
        args.extend_from_slice(extra);
        let status = Command::new(env!("CARGO_BIN_EXE_medseq"))
            .args(&args)
            .current_dir(dir.path())
            .env("MEDSEQ_SEED", "5")
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(dir.path().join(out).join("corpus.tsv")).unwrap()
    };
    ok(&["gen-data", "--n", "100", "--seed", "5", "--out", "flag"], dir.path());
    let flag = std::fs::read(dir.path().join("flag/corpus.tsv")).unwrap();
    assert_eq!(run_env("env", &[]), flag);
    assert_ne!(run_env("override", &["--seed", "6"]), flag);
    let cfg = read_kv(&dir.path().join("env/config.txt"));
    assert_eq!(cfg.get("seed"), Some("5"));
}

#[test]
fn exit_codes_distinguish_usage_validation_and_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| medseq(args, dir.path()).status.code();
    assert_eq!(code(&["no-such-command"]), Some(1));
    assert_eq!(code(&["split", "--out", "x"]), Some(1));
    assert_eq!(code(&["gen-data", "--n", "10", "--set", "colour=red", "--out", "x"]), Some(2));
    assert_eq!(code(&["gen-data", "--n", "10", "--set", "train.momentum=1", "--out", "x"]), Some(2));
    assert_eq!(code(&["split", "--corpus", "missing.tsv", "--out", "x"]), Some(2));
    std::fs::write(dir.path().join("bad.tsv"), "not a corpus\n").unwrap();
    assert_eq!(code(&["split", "--corpus", "bad.tsv", "--out", "x"]), Some(2));
    std::fs::write(dir.path().join("blocker"), "").unwrap();
    assert_eq!(code(&["gen-data", "--n", "10", "--out", "blocker/sub"]), Some(3));
    assert_eq!(code(&["gen-data", "--help"]), Some(0));
}

#[test]
fn evaluate_on_gold_reports_perfect_scores() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--n", "200", "--out", "gen"], dir.path());
    let certs = read_corpus(&dir.path().join("gen/corpus.tsv")).unwrap();
    let preds: Vec<Prediction> = certs
        .iter()
        .zip(gold_codes(&certs))
        .map(|(c, codes)| Prediction {
            id: c.id().to_string(),
            codes,
            score: 1.0,
        })
        .collect();
    write_predictions(&dir.path().join("gold_preds.tsv"), &preds).unwrap();
    ok(
        &[
            "evaluate",
            "--predictions",
            "gold_preds.tsv",
            "--gold",
            "gen/corpus.tsv",
            "--stratum",
            "origin",
            "--set",
            "eval.bootstrap_replicates=50",
            "--out",
            "ev",
        ],
        dir.path(),
    );
    let kv = read_kv(&dir.path().join("ev/report.kv"));
    assert_eq!(kv.get("all.f_measure"), Some("1.000000"));
    assert_eq!(kv.get("all.f_measure_ci"), Some("1.000000,1.000000"));
    assert_eq!(kv.get("paper.f_measure"), Some("1.000000"));
    assert!(std::fs::read_to_string(dir.path().join("ev/report.txt")).unwrap().contains("1.0000"));

    let mut missing = preds.clone();
    missing.pop();
    write_predictions(&dir.path().join("short.tsv"), &missing).unwrap();
    let out = medseq(
        &["evaluate", "--predictions", "short.tsv", "--gold", "gen/corpus.tsv", "--out", "ev2"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn desk_pipeline_runs_end_to_end_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let small = [
        "--set", "split.per_year_val=8",
        "--set", "split.per_year_test=8",
        "--set", "tokenize.src_vocab=300",
        "--set", "tokenize.tgt_vocab=300",
        "--set", "model.hidden_size=16",
        "--set", "model.ffn_size=32",
        "--set", "train.max_steps=40",
        "--set", "train.batch_size=16",
        "--set", "train.eval_every=20",
        "--set", "decode.beam_width=2",
        "--set", "eval.bootstrap_replicates=20",
    ];
    let run = |args: &[&str]| {
        let mut v: Vec<&str> = args.to_vec();
        v.extend_from_slice(&small);
        ok(&v, d);
    };
    run(&["gen-data", "--n", "400", "--out", "gen"]);
    run(&["split", "--corpus", "gen/corpus.tsv", "--out", "split"]);
    run(&["tokenize", "--train", "split/train.tsv", "--out", "tok"]);
    run(&["train", "--train", "split/train.tsv", "--val", "split/val.tsv", "--tokenizers", "tok", "--out", "m1"]);
    run(&[
            "train", "--train", "split/train.tsv", "--val", "split/val.tsv", "--tokenizers", "tok", "--seed", "2",
            "--out", "m2",
        ]);
    run(&["predict", "--checkpoint", "m1/model.ckpt", "--tokenizers", "tok", "--input", "split/test.tsv", "--out", "p"]);
    run(&[
            "ensemble-select", "--val", "split/val.tsv", "--tokenizers", "tok", "--checkpoints", "m1/model.ckpt",
            "m2/model.ckpt", "--out", "ens",
        ]);
    run(&[
            "ensemble-predict", "--manifest", "ens/ensemble.txt", "--tokenizers", "tok", "--input", "split/test.tsv",
            "--out", "ep",
        ]);
    for preds in ["p", "ep"] {
        let pf = format!("{preds}/predictions.tsv");
        run(&["evaluate", "--predictions", &pf, "--gold", "split/test.tsv", "--out", &format!("{preds}_ev")]);
        run(&["calibrate", "--predictions", &pf, "--gold", "split/test.tsv", "--out", &format!("{preds}_cal")]);
        run(&["report", "--predictions", &pf, "--gold", "split/test.tsv", "--out", &format!("{preds}_rep")]);
    }
    let report = read_kv(&d.join("p_ev/report.kv"));
    let f: f64 = report.get("all.f_measure").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&f));
    let curve = std::fs::read_to_string(d.join("p_cal/calibration.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 102);
    let text = std::fs::read_to_string(d.join("ep_rep/report.txt")).unwrap();
    for section in ["# origin", "# chapters", "# calibration"] {
        assert!(text.contains(section), "{section}");
    }

    for run in ["gen", "split", "tok", "m1", "p", "ens", "ep", "p_ev", "p_rep"] {
        let cfg_text = std::fs::read_to_string(d.join(run).join("config.txt")).unwrap();
        let prov = read_kv(&d.join(run).join("provenance.txt"));
        assert_eq!(prov.get("tool"), Some(concat!("medseq ", env!("CARGO_PKG_VERSION"))));
        assert_eq!(prov.get("config_hash"), Some(medseq::train::text_hash(&cfg_text).as_str()));
        assert!(d.join(run).join("run.log").exists());
        if run != "gen" {
            assert!(prov.keys().any(|k| k.starts_with("input.") && k.ends_with(".sha256")), "{run}");
        }
    }
    let prov = read_kv(&d.join("p_ev/provenance.txt"));
    assert_eq!(
        prov.get("input.predictions.sha256").unwrap(),
        medseq::train::file_hash(&d.join("p/predictions.tsv")).unwrap()
    );

    // Training the same config twice yields the same checkpoint.
    run(&["train", "--train", "split/train.tsv", "--val", "split/val.tsv", "--tokenizers", "tok", "--out", "m1b"]);
    assert_eq!(std::fs::read(d.join("m1/model.ckpt")).unwrap(), std::fs::read(d.join("m1b/model.ckpt")).unwrap());

    let out = medseq(
        &["predict", "--checkpoint", "split/train.tsv", "--tokenizers", "tok", "--input", "split/test.tsv", "--out", "bad"],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
}
