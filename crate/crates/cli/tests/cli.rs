use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn facdiff(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_facdiff")).args(args).output().unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into(),
        stderr: String::from_utf8_lossy(&out.stderr).into(),
    }
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("out = {:?}\n{body}", dir.join("out").display().to_string())).unwrap();
    p
}

const TINY_MODELS: &str = r#"
[models]
hidden = [16]
emb_dim = 4
level_dim = 4

[models.train]
lr = 3e-3
batch_size = 8
epochs = 4
steps_per_epoch = 10
cosine_decay = true
weighting = "clean-action"
"#;

/// One tiny trained roster shared by the tests that need learned models.
fn trained() -> &'static (TempDir, PathBuf) {
    static DIR: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let cfg = write_config(
            dir.path(),
            &format!(
                "{TINY_MODELS}\n[race]\ntasks = [\"race1_standard\", \"race4_standard\"]\n\n[diagnose]\ntasks = [\"race4_standard\", \"race2_wide\"]\n"
            ),
        );
        let r = facdiff(&["train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        (dir, cfg)
    })
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn fixture_contraction(dir: &Path, lambda: f64, b: f64, w: f64) -> PathBuf {
    let p = dir.join("contraction.json");
    let doc = serde_json::json!({
        "provenance": { "command": "fixture" },
        "contraction": {
            "lambda": lambda, "b_kappa": b, "w": w, "c_ref": 0.0,
            "n_triples": 0, "min_slack": 0.0, "ensemble": "fixture"
        }
    });
    std::fs::write(&p, doc.to_string()).unwrap();
    p
}

#[test]
fn dry_run_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "");
    for cmd in ["train", "race", "sweep", "diagnose", "estimate-contraction"] {
        let r = facdiff(&[cmd, "--config", cfg.to_str().unwrap(), "--dry-run"]);
        assert_eq!(r.code, 0, "{cmd}: {}", r.stderr);
        assert!(r.stdout.contains("config ok"), "{}", r.stdout);
    }
    assert!(!dir.path().join("out").exists());
}

#[test]
fn config_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let bad = write_config(dir.path(), "ddim_steps = 500\n");
    let r = facdiff(&["race", "--config", bad.to_str().unwrap()]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("ddim_steps"), "{}", r.stderr);
    assert_eq!(facdiff(&["race", "--config", "/nonexistent/run.toml"]).code, 1);
    assert_eq!(facdiff(&["fly"]).code, 1);
    let cfg = write_config(dir.path(), "roster = \"closed-form\"\n");
    let r = facdiff(&["certify", "--config", cfg.to_str().unwrap(), "--task", "race9_wide"]);
    assert_eq!(r.code, 1);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = TempDir::new().unwrap();
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{ not json").unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            "checkpoint = {:?}\n[race]\ntasks = [\"race1_wide\"]\n",
            broken.display().to_string()
        ),
    );
    let r = facdiff(&["race", "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.code, 2, "{}", r.stderr);
}

#[test]
fn certify_without_contraction_says_what_to_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "roster = \"closed-form\"\n");
    let r = facdiff(&["certify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("facdiff estimate-contraction"), "{}", r.stderr);
    assert!(!dir.path().join("out").join("certify").exists());
}

fn certify_fixture(eps_d: f64, task: &str) -> (Value, String) {
    let dir = TempDir::new().unwrap();
    let k = fixture_contraction(dir.path(), 0.5, 1.0, 0.01);
    let cfg = write_config(
        dir.path(),
        &format!(
            "roster = \"closed-form\"\n[certify]\ncontraction = {:?}\nbudget = {{ eps_d = {eps_d}, eta = 0.0, lipschitz = [1.0, 1.0] }}\n",
            k.display().to_string()
        ),
    );
    let r = facdiff(&["certify", "--config", cfg.to_str().unwrap(), "--task", task]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let text = std::fs::read_to_string(dir.path().join("out/certify/certificates.json")).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    (doc["certificates"][0].clone(), r.stdout)
}

#[test]
fn certify_fixture_with_small_budget_is_certified() {
    let (entry, stdout) = certify_fixture(0.1, "race4_standard");
    let cert = &entry["certificate"];
    assert_eq!(cert["certified"], Value::Bool(true));
    let radius = cert["radius"].as_f64().unwrap();
    let r = cert["gate_radius"].as_f64().unwrap();
    assert!(radius < r, "{radius} vs {r}");
    assert_eq!(r, 0.762);
    assert!(stdout.contains("race4_standard: certified: R = "), "{stdout}");
}

#[test]
fn narrow_gate_with_large_budget_is_not_certified() {
    let (entry, stdout) = certify_fixture(10.0, "race6_narrow");
    let cert = &entry["certificate"];
    assert_eq!(cert["certified"], Value::Bool(false));
    let sizes: Vec<&str> = cert["certifiable"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(!sizes.contains(&"narrow"), "{sizes:?}");
    assert!(cert["gates"]
        .as_array()
        .unwrap()
        .iter()
        .all(|g| g["certified"] == Value::Bool(false)));
    assert!(stdout.contains("not certified"), "{stdout}");
}

#[test]
fn estimate_contraction_feeds_certify() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "roster = \"closed-form\"\n[certify]\nbudget = { eps_d = 1.0, eta = 0.0, lipschitz = [1.0, 1.0] }\n",
    );
    let c = cfg.to_str().unwrap();
    let r = facdiff(&["estimate-contraction", "--config", c]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let k: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/estimate-contraction/contraction.json")).unwrap(),
    )
    .unwrap();
    let lambda = k["contraction"]["lambda"].as_f64().unwrap();
    assert!((0.0..1.0).contains(&lambda));
    let r = facdiff(&["certify", "--config", c, "--task", "race1_wide"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("race1_wide: "), "{}", r.stdout);
}

#[test]
fn train_writes_checkpoint_losses_and_manifest() {
    let (dir, _) = trained();
    let out = dir.path().join("out/train");
    assert!(out.join("models.json").exists());
    let rows = csv_rows(&out.join("losses.csv"));
    assert_eq!(rows[0], ["network", "step", "loss"]);
    let factored: Vec<f64> = rows[1..]
        .iter()
        .filter(|r| r[0] == "factored")
        .map(|r| r[2].parse().unwrap())
        .collect();
    assert_eq!(factored.len(), 40);
    let head: f64 = factored[..10].iter().sum();
    let tail: f64 = factored[30..].iter().sum();
    assert!(tail < head, "loss did not go down: {head} -> {tail}");

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert_eq!(manifest["seeds"], serde_json::json!([0]));
    let losses = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    assert!(losses.starts_with(&format!("# config_sha256={hash} seeds=0")));
    let models: Value = serde_json::from_str(&std::fs::read_to_string(out.join("models.json")).unwrap()).unwrap();
    assert_eq!(models["provenance"]["config_sha256"], Value::String(hash.into()));
}

#[test]
fn retraining_is_bitwise_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &TINY_MODELS.replace("epochs = 4", "epochs = 1"));
    let c = cfg.to_str().unwrap();
    let ckpt = dir.path().join("out/train/models.json");
    assert_eq!(facdiff(&["train", "--config", c]).code, 0);
    let first = std::fs::read(&ckpt).unwrap();
    assert_eq!(facdiff(&["train", "--config", c, "--jobs", "1"]).code, 0);
    assert_eq!(first, std::fs::read(&ckpt).unwrap());
    assert_eq!(facdiff(&["train", "--config", c, "--seed", "7"]).code, 0);
    assert_ne!(first, std::fs::read(&ckpt).unwrap());
}

#[test]
fn race_emits_the_four_row_aggregate() {
    let (dir, cfg) = trained();
    let r = facdiff(&["race", "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rows = csv_rows(&dir.path().join("out/race/aggregate.csv"));
    assert_eq!(rows[0], ["model", "all", "training", "held_out", "crashes"]);
    let models: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(models, ["baseline", "factored-composed", "factored-joint", "knet"]);
    for r in &rows[1..] {
        for v in &r[1..4] {
            let p: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
    }
    // sequential and parallel runs agree
    let first = std::fs::read(dir.path().join("out/race/rows.csv")).unwrap();
    assert_eq!(
        facdiff(&["race", "--config", cfg.to_str().unwrap(), "--jobs", "1"]).code,
        0
    );
    assert_eq!(first, std::fs::read(dir.path().join("out/race/rows.csv")).unwrap());
}

#[test]
fn empty_task_list_gives_an_empty_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "roster = \"closed-form\"\n[race]\nmodels = [\"baseline\"]\ntasks = []\n",
    );
    let r = facdiff(&["race", "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rows = csv_rows(&dir.path().join("out/race/aggregate.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(csv_rows(&dir.path().join("out/race/rows.csv")).len(), 1);
}

#[test]
fn closed_form_roster_has_no_joint_model() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "roster = \"closed-form\"\n");
    let r = facdiff(&["race", "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("factored-joint"), "{}", r.stderr);
}

#[test]
fn diagnose_emits_the_gap_triple_per_task() {
    let (dir, cfg) = trained();
    let r = facdiff(&["diagnose", "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rows = csv_rows(&dir.path().join("out/diagnose/diagnose.csv"));
    assert_eq!(
        &rows[0][..6],
        ["task", "seed", "split", "actual", "linearized", "ltv_bound"]
    );
    let tasks: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(tasks, ["race4_standard", "race2_wide"]);
    for r in &rows[1..] {
        let v: Vec<f64> = r[3..6].iter().map(|x| x.parse().unwrap()).collect();
        assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0), "{r:?}");
        assert!(v[0] > 0.0, "composed and joint samples coincide: {r:?}");
    }
}
