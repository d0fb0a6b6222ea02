use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lift_core::model::checkpoint;

const CONFIG: &str = r#"
seed = 1

[model]
context_window = 96
n_layers = 1
n_heads = 2
embed_dim = 16

[lift]
seg_len = 48
epochs = 2
gamma = 0.0
optimizer = { learning_rate = 0.003 }

[corpus]
n_docs = 2
n_facts = 3
doc_len = 300

[eval]
max_new_tokens = 4
lift = { seg_len = 48, epochs = 1, answer_reserve = 4, optimizer = { learning_rate = 0.003 } }

[bench]
model = { context_window = 32, n_layers = 1, n_heads = 2, embed_dim = 16 }
lengths = [64, 96]
repeats = 1
lift = { seg_len = 32, optimizer = { learning_rate = 0.003 } }
"#;

fn lift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lift")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
        Env { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("run.toml")
    }

    fn corpus(&self) -> PathBuf {
        let out = self.path("docs.jsonl");
        if !out.exists() {
            let o = lift(&["corpus", "--config", s(&self.config()), "--out", s(&out)]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        }
        out
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn corpus_single_record_and_rerun() {
    let env = Env::new();
    let a = env.path("a.jsonl");
    let o = lift(&["corpus", "--config", s(&env.config()), "--set", "corpus.n_docs=1", "--out", s(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("config_hash"));
    let b = env.path("b.jsonl");
    lift(&["corpus", "--config", s(&env.config()), "--set", "corpus.n_docs=1", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let env = Env::new();
    let bad = env.path("bad.toml");
    fs::write(&bad, "[lift]\nepochz = 3\n").unwrap();
    let o = lift(&["corpus", "--config", s(&bad), "--out", s(&env.path("x.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));
}

#[test]
fn lift_checkpoint_round_trip_and_deterministic_rerun() {
    let env = Env::new();
    let docs = env.corpus();
    let ck = env.path("a.ckpt");
    let o = lift(&[
        "lift",
        "--config",
        s(&env.config()),
        "--doc",
        s(&docs),
        "--ckpt-out",
        s(&ck),
        "--out",
        s(&env.path("a.report.jsonl")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loaded = checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.model.context_window(), 96);
    assert!(loaded.meta.contains_key("meta.config_hash"));

    let manifest = env.path("a.ckpt.manifest.json");
    let ck2 = env.path("b.ckpt");
    let o = lift(&[
        "lift",
        "--manifest",
        s(&manifest),
        "--ckpt-out",
        s(&ck2),
        "--out",
        s(&env.path("b.report.jsonl")),
        "--manifest-out",
        s(&env.path("b.manifest.json")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&ck).unwrap(), fs::read(&ck2).unwrap());
    let strip = |p: &str| {
        let t = fs::read_to_string(env.path(p)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&t).unwrap();
        v.as_object_mut().unwrap().remove("timing");
        v
    };
    assert_eq!(strip("a.report.jsonl"), strip("b.report.jsonl"));
}

#[test]
fn missing_input_is_an_io_error() {
    let env = Env::new();
    let o = lift(&[
        "lift",
        "--config",
        s(&env.config()),
        "--doc",
        s(&env.path("nope.jsonl")),
        "--ckpt-out",
        s(&env.path("x.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn diverging_run_is_a_numeric_error() {
    let env = Env::new();
    let docs = env.corpus();
    let o = lift(&[
        "lift",
        "--config",
        s(&env.config()),
        "--set",
        "lift.optimizer.learning_rate=1e39",
        "--doc",
        s(&docs),
        "--ckpt-out",
        s(&env.path("x.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn icl_eval_needs_no_checkpoint_but_sft_modes_do() {
    let env = Env::new();
    let docs = env.corpus();
    let out = env.path("icl.jsonl");
    let o = lift(&["eval", "--config", s(&env.config()), "--doc", s(&docs), "--mode", "ICL", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = fs::read_to_string(&out).unwrap();
    assert!(line.contains("\"mode\":\"ICL\"") && line.contains("config_hash"));
    assert!(env.path("icl.jsonl.csv").exists());

    let o = lift(&[
        "eval",
        "--config",
        s(&env.config()),
        "--doc",
        s(&docs),
        "--mode",
        "SFT+LIFT+ICL",
        "--out",
        s(&env.path("sft.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("SFT checkpoint"), "{}", stderr(&o));
}

#[test]
fn sft_then_eval_from_checkpoint() {
    let env = Env::new();
    let corpus = env.path("sft.jsonl");
    let o = lift(&["corpus", "--config", s(&env.config()), "--set", "corpus.kind=sft", "--out", s(&corpus)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = env.path("sft.ckpt");
    let o = lift(&[
        "sft",
        "--config",
        s(&env.config()),
        "--set",
        "sft.outer_epochs=1",
        "--set",
        "sft.lift.seg_len=48",
        "--set",
        "sft.lift.optimizer.learning_rate=0.003",
        "--corpus",
        s(&corpus),
        "--ckpt-out",
        s(&ck),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let docs = env.corpus();
    let out = env.path("e.jsonl");
    let o = lift(&[
        "eval",
        "--config",
        s(&env.config()),
        "--doc",
        s(&docs),
        "--mode",
        "SFT+ICL",
        "--sft-ckpt",
        s(&ck),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = env.path("summary.csv");
    let o = lift(&["report", "--input", s(&out), "--out", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.contains("SFT+ICL"));
}

#[test]
fn bench_writes_one_row_per_length_and_mode() {
    let env = Env::new();
    let dir = env.path("bench");
    let o = lift(&["bench", "--config", s(&env.config()), "--out-dir", s(&dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for mode in ["lift_adapt", "icl_full_forward"] {
        assert_eq!(rows.iter().filter(|r| r.contains(mode)).count(), 2);
    }
    assert!(dir.join("fit.json").exists());
    assert!(dir.join("bench.manifest.json").exists());
}

#[test]
fn pipeline_rerun_from_manifest_is_identical() {
    let env = Env::new();
    let a = env.path("pa");
    let o = lift(&[
        "pipeline",
        "--config",
        s(&env.config()),
        "--set",
        "pipeline.modes=[\"ICL\",\"LIFT+ICL\"]",
        "--set",
        "pipeline.doc_len=400",
        "--set",
        "pipeline.n_facts=3",
        "--out-dir",
        s(&a),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let b = env.path("pb");
    let o = lift(&["pipeline", "--manifest", s(&a.join("manifest.json")), "--out-dir", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["base.ckpt", "reports.jsonl", "summary.csv", "plot_data.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}
