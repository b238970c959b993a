//! End-to-end runs of the `umct` binary on tiny phantoms.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[train]
mode = "SSL"
mc_samples = 3
labeled_batch = 1
unlabeled_batch = 4
iters_stage1 = 6
iters_stage2 = 4
probe_every = 2
seed = 5

[train.patch]
size = [8, 8, 8]
fg_ratio = 0.5

[train.model]
base_width = 2
depth = 2

[data]
seed = 40
n_labeled = 2
n_unlabeled = 4
n_test = 2

[data.recipe]
shape = [16, 16, 16]
blob_radius = [3.0, 5.0]
"#;

fn umct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_umct"))
        .args(args)
        .env("UMCT_THREADS", "1")
        .output()
        .expect("spawn umct")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn train_tiny(root: &Path, body: &str) -> PathBuf {
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, body).unwrap();
    let out = umct(&["train", "--config", s(&cfg), "--out", s(&root.join("runs"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

#[test]
fn eval_reproduces_training_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train_tiny(tmp.path(), TINY);
    for f in ["metrics.csv", "summary.json", "manifest.json", "config.json", "view0.ckpt", "view2.ckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let eval_dir = tmp.path().join("eval");
    let out = umct(&["eval", "--run", s(&run), "--out", s(&eval_dir), "--ensemble", "average", "--ensemble", "majority"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let summary = json(&run.join("summary.json"));
    let report = json(&eval_dir.join("eval_summary.json"));
    let trained: Vec<f64> = summary["result"]["per_view_dsc"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let evaluated: Vec<f64> = report["per_view_dsc"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(trained.len(), evaluated.len());
    for (a, b) in trained.iter().zip(&evaluated) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    let ens = &report["ensemble_dsc"];
    let avg = ens[0][1].as_f64().unwrap();
    let maj = ens[1][1].as_f64().unwrap();
    assert!((avg - summary["result"]["ensemble_dsc"].as_f64().unwrap()).abs() < 1e-6);
    assert!((maj - summary["result"]["majority_dsc"].as_f64().unwrap()).abs() < 1e-6);
    assert!(eval_dir.join("eval_view0.csv").is_file());
    assert!(eval_dir.join("eval_majority.csv").is_file());

    // Retraining into the same run directory needs --force.
    let again = umct(&["train", "--config", s(&tmp.path().join("tiny.toml")), "--out", s(&tmp.path().join("runs"))]);
    assert_eq!(code(&again), 1);
}

#[test]
fn synth_then_predict_writes_a_label_map() {
    let tmp = tempfile::tempdir().unwrap();
    let recipe = tmp.path().join("recipe.toml");
    std::fs::write(&recipe, "n = 2\nseed = 3\n[recipe]\nshape = [16, 16, 16]\nblob_radius = [3.0, 5.0]\n").unwrap();
    let data = tmp.path().join("data");
    let out = umct(&["synth-data", "--recipe", s(&recipe), "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = json(&data.join("dataset.json"));
    let ids = manifest["case_ids"].as_array().unwrap();
    assert_eq!(ids.len(), 2);
    let id = ids[0].as_str().unwrap();

    let body = TINY.replace("[data]\n", &format!("[data]\ndir = \"{}\"\n", s(&data)))
        .replace("n_labeled = 2\nn_unlabeled = 4\nn_test = 2", "n_labeled = 1\nn_unlabeled = 0\nn_test = 1")
        .replace("mode = \"SSL\"", "mode = \"SUPERVISED_ONLY\"");
    let run = train_tiny(tmp.path(), &body);

    let pred = tmp.path().join("pred.lbl.umct");
    let probs = tmp.path().join("probs.umct");
    let input = data.join(format!("{id}.vol.umct"));
    let mut args = vec!["predict", "--input", s(&input), "--out", s(&pred), "--probs", s(&probs), "--window", "8", "--checkpoints"];
    let ckpts: Vec<PathBuf> = (0..3).map(|i| run.join(format!("view{i}.ckpt"))).collect();
    args.extend(ckpts.iter().map(|p| s(p)));
    let out = umct(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let label = umct::container::read_label(&pred).unwrap();
    assert_eq!(label.shape(), [16, 16, 16]);
    assert!(probs.is_file());
}

#[test]
fn plot_copies_metric_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train_tiny(tmp.path(), TINY);
    let plots = tmp.path().join("plots");
    let out = umct(&["plot", s(&run), "--out", s(&plots)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["loss_curves.svg", "agreement.svg", "label_ratio.csv", "label_ratio.svg"] {
        assert!(plots.join(f).is_file(), "missing {f}");
    }

    let mut metrics = csv::Reader::from_path(run.join("metrics.csv")).unwrap();
    let head = metrics.headers().unwrap().clone();
    let col = |n: &str| head.iter().position(|h| h == n).unwrap();
    let (it, stage, total) = (col("iter"), col("stage"), col("total"));
    let expected: Vec<(String, String, String)> = metrics
        .records()
        .map(|r| r.unwrap())
        .filter(|r| !r[total].is_empty())
        .map(|r| (r[it].to_string(), r[stage].to_string(), r[total].to_string()))
        .collect();
    let mut plotted = csv::Reader::from_path(plots.join("loss_curves.csv")).unwrap();
    let got: Vec<(String, String, String)> =
        plotted.records().map(|r| r.unwrap()).map(|r| (r[1].to_string(), r[2].to_string(), r[3].to_string())).collect();
    assert!(!got.is_empty());
    assert_eq!(got, expected);
}

#[test]
fn plot_rejects_foreign_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("fake");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join("metrics.csv"), "step,loss\n1,0.5\n").unwrap();
    let out = umct(&["plot", s(&run), "--out", s(&tmp.path().join("plots"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema"));
}

#[test]
fn validation_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&umct(&["train", "--config", s(&missing)])), 1);
    assert_eq!(code(&umct(&["synth-data", "--recipe", s(&missing), "--out", s(tmp.path())])), 1);

    let cfg = tmp.path().join("uda.toml");
    std::fs::write(&cfg, TINY.replace("mode = \"SSL\"", "mode = \"UDA_NO_SOURCE\"")).unwrap();
    let out = umct(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("runs"))]);
    assert_eq!(code(&out), 1);
    assert!(!tmp.path().join("runs").exists());

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nn_views = 4\n").unwrap();
    assert_eq!(code(&umct(&["train", "--config", s(&bad), "--out", s(&tmp.path().join("runs"))])), 1);

    assert_eq!(code(&umct(&["eval"])), 1);
    assert_eq!(code(&umct(&["--help"])), 0);
}
