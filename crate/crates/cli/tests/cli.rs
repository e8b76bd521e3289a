use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use horse_core::model::init_model;
use horse_core::Model;
use horse_edit::RunConfig;
use serde_json::{json, Value};
use tempfile::TempDir;

const SMALL: &str = r#"{
  "model": {"n_layers": 2, "d_model": 16, "d_ff": 32, "vocab_size": 128, "n_heads": 2, "max_seq_len": 4},
  "corpus": {"n_facts": 80, "vocab_size": 128, "n_edits": 50, "n_train_facts": 10, "train_variants": 2,
             "n_relations": 2, "n_objects": 8},
  "base_train": {"steps": 300, "stop_loss": 0.05, "trainable": "all"},
  "hyper": {"steps": 5, "rank": 2, "hidden_width": 4, "batch_size": 5}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_horse-edit"));
    c.env("HORSE_EDIT_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Corpus, base checkpoint and hypernetwork for the small config, built once.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("small.json")
    }

    fn cfg(&self) -> String {
        s(&self.config()).to_string()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
        let f = Fixture { dir };
        let (cfg, out) = (f.cfg(), s(f.dir.path()).to_string());
        ok(&["--config", &cfg, "--out-dir", &out, "gen-corpus"]);
        ok(&["--config", &cfg, "--out-dir", &out, "train-base"]);
        ok(&["--config", &cfg, "--out-dir", &out, "train-hyper"]);
        ok(&["--config", &cfg, "--out-dir", &out, "--variant", "no_ci_in_loss", "train-hyper"]);
        f
    })
}

/// Flags pointing every input at the fixture.
fn inputs(f: &Fixture) -> Vec<String> {
    vec![
        "--model".into(),
        s(&f.path("base.hedt")).into(),
        "--corpus".into(),
        s(&f.path("corpus.jsonl")).into(),
    ]
}

fn edit_args(f: &Fixture, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut a: Vec<String> = vec!["--config".into(), f.cfg(), "--out-dir".into(), s(out).into()];
    a.extend(extra.iter().map(|x| x.to_string()));
    a.push("edit".into());
    a.extend(inputs(f));
    a.extend(["--hyper".into(), s(&f.path("hyper.hhyp")).into()]);
    a
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn schema_check(schema: &str, instance: &Value) {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas").join(schema);
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(root).unwrap()).unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = v.iter_errors(instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_corpus_is_deterministic_and_creates_missing_directories() {
    let t = TempDir::new().unwrap();
    let a = t.path().join("a/b/c");
    let b = t.path().join("d");
    for dir in [&a, &b] {
        ok(&["--seed", "7", "--out-dir", s(dir), "gen-corpus", "--facts", "200"]);
    }
    let ca = std::fs::read(a.join("corpus.jsonl")).unwrap();
    assert_eq!(ca, std::fs::read(b.join("corpus.jsonl")).unwrap());
    let text = String::from_utf8(ca).unwrap();
    for line in text.lines() {
        schema_check("corpus_record.schema.json", &serde_json::from_str(line).unwrap());
    }
    ok(&["--seed", "8", "--out-dir", s(&b), "gen-corpus", "--facts", "200"]);
    assert_ne!(text.as_bytes(), std::fs::read(b.join("corpus.jsonl")).unwrap());
}

#[test]
fn gen_corpus_rejects_oversize_requests() {
    let t = TempDir::new().unwrap();
    let out = run(&["--out-dir", s(t.path()), "gen-corpus", "--facts", "100000"]);
    assert_eq!(code(&out), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("capacity"));
    assert!(!t.path().join("corpus.jsonl").exists());
}

#[test]
fn train_base_prints_accuracy_and_zero_steps_is_the_initial_model() {
    let f = fixture();
    let report = read_json(&f.path("base_report.json"));
    schema_check("base_report.schema.json", &report);
    assert!(report["accuracy"].as_f64().unwrap() >= 0.9, "{report}");

    let t = TempDir::new().unwrap();
    let corpus = f.path("corpus.jsonl");
    let stdout = ok(&["--config", &f.cfg(), "--out-dir", s(t.path()), "train-base", "--corpus", s(&corpus), "--steps", "0"]);
    assert!(stdout.contains("base accuracy: "), "{stdout}");
    let cfg = RunConfig::load(&f.config()).unwrap();
    let fresh = t.path().join("fresh.hedt");
    init_model(&cfg.model).unwrap().save(&fresh).unwrap();
    assert_eq!(std::fs::read(t.path().join("base.hedt")).unwrap(), std::fs::read(fresh).unwrap());
}

#[test]
fn train_base_is_byte_identical_across_runs() {
    let f = fixture();
    let t = TempDir::new().unwrap();
    let corpus = f.path("corpus.jsonl");
    ok(&["--config", &f.cfg(), "--out-dir", s(t.path()), "train-base", "--corpus", s(&corpus)]);
    for name in ["base.hedt", "base_report.json"] {
        assert_eq!(std::fs::read(t.path().join(name)).unwrap(), std::fs::read(f.path(name)).unwrap(), "{name}");
    }
}

#[test]
fn train_hyper_logs_one_row_per_step() {
    let f = fixture();
    let log = std::fs::read_to_string(f.path("hyper_log.csv")).unwrap();
    let mut lines = log.lines();
    let header = lines.next().unwrap();
    assert_eq!(header, "step,ce_term,trace_term,grad_norm,lambda_0,lambda_1,eta_0,eta_1");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<&str> = r.split(',').collect();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0].parse::<usize>().unwrap(), i);
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
    assert!(f.path("hyper_no_ci_in_loss.hhyp").is_file());
    assert!(f.path("hyper_no_ci_in_loss_log.csv").is_file());
}

#[test]
fn grad_check_passes_and_a_coarse_step_fails_with_numerical_exit() {
    let f = fixture();
    let t = TempDir::new().unwrap();
    let mut args: Vec<String> = vec!["--config".into(), f.cfg(), "--out-dir".into(), s(t.path()).into()];
    args.extend(["--grad-check".into(), "train-hyper".into()]);
    args.extend(inputs(f));
    ok(&strs(&args));
    let report = read_json(&t.path().join("grad_check.json"));
    schema_check("grad_check.schema.json", &report);
    assert_eq!(report["passed"], json!(true));

    let mut cfg: Value = serde_json::from_str(SMALL).unwrap();
    cfg["grad_check"] = json!({"step": 0.5, "tolerance": 1e-9});
    let coarse = t.path().join("coarse.json");
    std::fs::write(&coarse, cfg.to_string()).unwrap();
    args[1] = s(&coarse).into();
    let out = run(&strs(&args));
    assert_eq!(code(&out), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_json(&t.path().join("grad_check.json"))["passed"], json!(false));
}

#[test]
fn edit_writes_checkpoint_report_snapshots_and_dumps() {
    let f = fixture();
    let t = TempDir::new().unwrap();
    let dumps = t.path().join("dumps");
    let args = edit_args(f, t.path(), &["--variant", "full", "--snapshot-every", "2", "--dump-residuals", s(&dumps)]);
    let stdout = ok(&strs(&args));
    assert!(stdout.contains("efficacy"), "{stdout}");
    let report = read_json(&t.path().join("edit_report.json"));
    schema_check("edit_report.schema.json", &report);
    let m = &report["metrics"];
    for k in ["efficacy", "generalization", "specificity"] {
        assert!(m[k].is_number(), "{k}: {report}");
    }
    assert_eq!(report["batches"].as_array().unwrap().len(), 5);
    Model::load(&t.path().join("edited.hedt")).unwrap();
    schema_check("timings.schema.json", &read_json(&t.path().join("timings.json")));

    let csv = std::fs::read_to_string(t.path().join("edit_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().nth(1).unwrap().starts_with("all,full,7,10,50,"));

    for k in [2, 4] {
        Model::load(&t.path().join(format!("snapshots/batch{k:03}.hedt"))).unwrap();
        let snap = read_json(&t.path().join(format!("snapshots/batch{k:03}.json")));
        schema_check("snapshot.schema.json", &snap);
        assert_eq!(snap["edits_applied"], json!(k * 10));
    }
    assert!(!t.path().join("snapshots/batch003.hedt").exists());

    let first = std::fs::read_to_string(dumps.join("batch000_layer1_spread.csv")).unwrap();
    let mut lines = first.lines();
    assert_eq!(lines.next().unwrap(), "# layer=1 rows=16 cols=10");
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), 16);
    assert!(body.iter().all(|l| l.split(',').count() == 10 && l.split(',').all(|v| v.parse::<f64>().is_ok())));
    assert_eq!(std::fs::read_dir(&dumps).unwrap().count(), 5 * 2 * 2);
}

#[test]
fn edit_sweep_gives_one_row_per_count() {
    let f = fixture();
    let t = TempDir::new().unwrap();
    ok(&strs(&edit_args(f, t.path(), &["--sweep", "10,20,50"])));
    let report = read_json(&t.path().join("sweep_report.json"));
    schema_check("sweep_report.schema.json", &report);
    let n: Vec<u64> = report["reports"].as_array().unwrap().iter().map(|r| r["n_edits"].as_u64().unwrap()).collect();
    assert_eq!(n, vec![10, 20, 50]);
    let csv = std::fs::read_to_string(t.path().join("sweep_report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.starts_with("all,full,")));
}

#[test]
fn edit_is_deterministic_and_thread_count_invariant() {
    let f = fixture();
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    ok(&strs(&edit_args(f, a.path(), &["--threads", "1"])));
    ok(&strs(&edit_args(f, b.path(), &["--threads", "3"])));
    for name in ["edited.hedt", "edit_report.json", "edit_report.csv"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn every_variant_edits_and_memit_needs_no_network() {
    let f = fixture();
    for v in ["no_orthogonal_spread", "no_ci", "no_ci_in_loss", "no_training", "linear_decay_spread"] {
        let t = TempDir::new().unwrap();
        let mut args = vec!["--config".to_string(), f.cfg(), "--out-dir".into(), s(t.path()).into(), "--variant".into(), v.into()];
        args.push("edit".into());
        args.extend(inputs(f));
        let hyper = if v == "no_ci_in_loss" { "hyper_no_ci_in_loss.hhyp" } else { "hyper.hhyp" };
        args.extend(["--hyper".into(), s(&f.path(hyper)).into()]);
        ok(&strs(&args));
        assert_eq!(read_json(&t.path().join("edit_report.json"))["variant"], json!(v));
    }
    let t = TempDir::new().unwrap();
    let mut args = vec!["--config".to_string(), f.cfg(), "--out-dir".into(), s(t.path()).into()];
    args.extend(["--variant".into(), "memit_baseline".into(), "edit".into(), "--num-edits".into(), "10".into()]);
    args.extend(inputs(f));
    ok(&strs(&args));
    assert_eq!(read_json(&t.path().join("edit_report.json"))["n_edits"], json!(10));
}

#[test]
fn eval_of_identical_checkpoints_has_full_specificity() {
    let f = fixture();
    let t = TempDir::new().unwrap();
    let base = f.path("base.hedt");
    let corpus = f.path("corpus.jsonl");
    ok(&["--out-dir", s(t.path()), "eval", "--pre", s(&base), "--post", s(&base), "--corpus", s(&corpus)]);
    let m = read_json(&t.path().join("metrics.json"));
    schema_check("metrics.schema.json", &m);
    assert_eq!(m["metrics"]["specificity"], json!(100.0));
    assert_eq!(m["drift"]["mean_kl"], json!(0.0));
    assert_eq!(m["drift"]["agreement"], json!(100.0));
    let csv = std::fs::read_to_string(t.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "n_edits,efficacy,generalization,specificity,mean_kl,max_kl,agreement");
}

#[test]
fn eval_after_edit_matches_the_edit_report() {
    let f = fixture();
    let t = TempDir::new().unwrap();
    ok(&strs(&edit_args(f, t.path(), &[])));
    let (base, post, corpus) = (f.path("base.hedt"), t.path().join("edited.hedt"), f.path("corpus.jsonl"));
    ok(&["--out-dir", s(t.path()), "eval", "--pre", s(&base), "--post", s(&post), "--corpus", s(&corpus)]);
    let report = read_json(&t.path().join("edit_report.json"));
    let m = read_json(&t.path().join("metrics.json"));
    assert_eq!(report["metrics"], m["metrics"]);
}

#[test]
fn missing_inputs_exit_with_code_two() {
    let f = fixture();
    let t = TempDir::new().unwrap();
    let missing = t.path().join("nope.hedt");
    let corpus = f.path("corpus.jsonl");
    let out = run(&["--out-dir", s(t.path()), "eval", "--pre", s(&missing), "--post", s(&missing), "--corpus", s(&corpus)]);
    assert_eq!(code(&out), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    let out = run(&["--out-dir", s(t.path()), "train-base"]);
    assert_eq!(code(&out), Some(2));
    let out = run(&["--out-dir", s(t.path()), "edit", "--model", s(&f.path("base.hedt")), "--corpus", s(&corpus)]);
    assert_eq!(code(&out), Some(2), "missing hypernetwork");
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let f = fixture();
    let t = TempDir::new().unwrap();
    let out_dir = s(t.path());
    let bad = t.path().join("bad.json");
    std::fs::write(&bad, r#"{"hyper": {"stpes": 3}}"#).unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["--config", s(&bad), "--out-dir", out_dir, "gen-corpus"],
        vec!["--out-dir", out_dir, "--variant", "bogus", "gen-corpus"],
        vec!["--out-dir", out_dir, "--sweep", "10", "train-base"],
        vec!["--out-dir", out_dir, "--grad-check", "edit"],
        vec!["--out-dir", out_dir, "--snapshot-every", "0", "edit"],
        vec!["--out-dir", out_dir, "--variant", "no_training", "train-hyper"],
    ];
    for args in cases {
        let out = run(&args);
        assert_eq!(code(&out), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut args = edit_args(f, t.path(), &[]);
    args.extend(["--num-edits".into(), "51".into()]);
    assert_eq!(code(&run(&strs(&args))), Some(2));

    let out = bin().env("HORSE_EDIT_LOG", "trace").args(["--out-dir", out_dir, "gen-corpus"]).output().unwrap();
    assert_eq!(code(&out), Some(2));
    let out = bin().env("HORSE_EDIT_LOG", "debug").args(["--out-dir", out_dir, "gen-corpus"]).output().unwrap();
    assert!(out.status.success());
}

#[test]
fn ablate_gives_one_row_per_variant() {
    let f = fixture();
    let t = TempDir::new().unwrap();
    let mut args = vec!["--config".to_string(), f.cfg(), "--out-dir".into(), s(t.path()).into(), "ablate".into()];
    args.extend(inputs(f));
    args.extend(["--hyper".into(), s(&f.path("hyper.hhyp")).into()]);
    ok(&strs(&args));
    let table = read_json(&t.path().join("ablation.json"));
    schema_check("ablation.schema.json", &table);
    let variants: Vec<&str> = table["rows"].as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(variants, ["full", "no_orthogonal_spread", "no_ci", "no_ci_in_loss", "no_training"]);
    let csv = std::fs::read_to_string(t.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(csv.lines().next().unwrap(), "seed,variant,efficacy,generalization,specificity");
}
