use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ddgp");

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(format!("{name}.toml"));
    std::fs::write(&p, body).unwrap();
    p
}

fn ddgp(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env("DDGP_OUT_ROOT", cwd.join("default-runs"))
        .output()
        .unwrap()
}

fn run_dir(out: &Output) -> PathBuf {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(out.stderr.trim_ascii()).expect("error record is JSON")
}

const TOY_FIT: &str = r#"
kind = "fit"
seeds = [3]

[data]
source = "toy_1d"
n = 80

[model]
architectures = ["dgp"]
layers = 1
inducing = [8]

[train]
learning_rate = 0.01
batch_size = 32
max_iters = 150
convergence_window = 0
"#;

#[test]
fn toy_fit_reports_test_log_likelihood() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "toy", TOY_FIT);
    let out = ddgp(&["run", "--config", cfg.to_str().unwrap(), "--out", "runs"], tmp.path());
    let dir = tmp.path().join(run_dir(&out));
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("metrics.json")).unwrap()).unwrap();
    let records = metrics.as_array().unwrap();
    let tll = records
        .iter()
        .find(|r| r["metric"] == "test_log_likelihood")
        .expect("test_log_likelihood recorded");
    assert!(tll["value"].as_f64().unwrap().is_finite());
    assert_eq!(tll["seed"], 3);
    for f in ["config.toml", "manifest.json", "metrics.csv", "dgp-s3/trace.csv", "dgp-s3/checkpoint.json"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    // The saved config is itself a valid config.
    let again = ddgp(&["describe", "--config", dir.join("config.toml").to_str().unwrap()], tmp.path());
    assert!(again.status.success());
}

#[test]
fn identical_runs_write_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "toy", TOY_FIT);
    let a = run_dir(&ddgp(&["run", "--config", cfg.to_str().unwrap(), "--out", "runs"], tmp.path()));
    let b = run_dir(&ddgp(&["run", "--config", cfg.to_str().unwrap(), "--out", "runs"], tmp.path()));
    assert_ne!(a, b);
    let read = |d: &Path, f: &str| std::fs::read(tmp.path().join(d).join(f)).unwrap();
    assert_eq!(read(&a, "metrics.json"), read(&b, "metrics.json"));
    assert_eq!(read(&a, "metrics.csv"), read(&b, "metrics.csv"));
}

#[test]
fn seed_flag_overrides_the_seed_list() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "toy", TOY_FIT);
    let dir = run_dir(&ddgp(
        &["run", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", "runs"],
        tmp.path(),
    ));
    assert!(tmp.path().join(dir).join("dgp-s9").is_dir());
}

#[test]
fn output_root_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "toy", TOY_FIT);
    let dir = run_dir(&ddgp(&["run", "--config", cfg.to_str().unwrap()], tmp.path()));
    assert!(dir.starts_with(tmp.path().join("default-runs")));
}

#[test]
fn gradcheck_on_a_two_layer_ddgp_is_accurate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "grad",
        r#"
kind = "gradcheck"

[data]
source = "toy_1d"
n = 40

[model]
architectures = ["ddgp"]
layers = 2
width = 2
inducing = [4]

[gradcheck]
n_points = 5
"#,
    );
    let dir = tmp.path().join(run_dir(&ddgp(&["run", "--config", cfg.to_str().unwrap(), "--out", "runs"], tmp.path())));
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("metrics.json")).unwrap()).unwrap();
    let err = metrics
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["metric"] == "max_rel_error")
        .unwrap()["value"]
        .as_f64()
        .unwrap();
    assert!(err < 1e-3, "max relative error {err}");
}

const BANANA_DDGP: &str = r#"
kind = "fit"

[data]
source = "banana"
n = 200

[model]
architectures = ["ddgp"]
layers = 2
width = 5
inducing = [100]
"#;

#[test]
fn describe_counts_parameters_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "banana", BANANA_DDGP);
    let before: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().path()).collect();
    let out = ddgp(&["describe", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let after: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(before, after);

    // Layer 1 (2 -> 5, SE): Z 100·2, q_mu 100·5, five triangular factors 5·5050, variance and 2 lengthscales.
    let first = 200 + 500 + 5 * 5050 + 3;
    // Layer 2 (5 -> 2 class logits, hybrid): Z means and variances 2·100·5, q_mu 100·2, 2·5050, variance and 5 lengthscales.
    let second = 1000 + 200 + 2 * 5050 + 6;
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.contains(&format!("{} parameters", first + second)),
        "expected {} in:\n{text}",
        first + second
    );
    assert!(text.contains("2 classes"));
}

#[test]
fn list_experiments_names_every_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ddgp(&["list-experiments"], tmp.path());
    let text = String::from_utf8(out.stdout).unwrap();
    for k in ["fit", "collapse_curve", "banana_map", "smoothness", "ood", "moments_demo", "gradcheck"] {
        assert!(text.lines().any(|l| l.starts_with(k)), "{k} missing");
    }
}

#[test]
fn zero_layers_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "zero", &BANANA_DDGP.replace("layers = 2", "layers = 0"));
    for verb in ["run", "describe"] {
        let out = ddgp(&[verb, "--config", cfg.to_str().unwrap()], tmp.path());
        assert_eq!(out.status.code(), Some(2));
        let rec = stderr_json(&out);
        assert_eq!(rec["error"], "config");
        assert_eq!(rec["keys"][0], "model.layers");
    }
    assert!(!tmp.path().join("default-runs").exists());
}

#[test]
fn unknown_keys_are_all_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let body = TOY_FIT.replace("n = 80", "n = 80\nsize = 3").replace("max_iters = 150", "max_iters = 150\nlr = 0.1");
    let cfg = write_config(tmp.path(), "typo", &body);
    let out = ddgp(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let rec = stderr_json(&out);
    let mut keys: Vec<String> = rec["keys"].as_array().unwrap().iter().map(|k| k.as_str().unwrap().to_string()).collect();
    keys.sort();
    assert_eq!(keys, ["data.size", "train.lr"]);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "nofile",
        r#"
kind = "fit"

[data]
source = "csv"
path = "absent.csv"
target = "y"
task = "regression"

[model]
architectures = ["dgp"]
layers = 1
inducing = [5]

[train]
max_iters = 10
"#,
    );
    let out = ddgp(&["run", "--config", cfg.to_str().unwrap(), "--out", "runs"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "data");
    // A failed run leaves no directory behind, finished or scratch.
    let leftovers = std::fs::read_dir(tmp.path().join("runs")).map(|d| d.count()).unwrap_or(0);
    assert_eq!(leftovers, 0);
}

#[test]
fn malformed_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad", "kind = \"fit\"\n[model\n");
    let out = ddgp(&["describe", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ddgp(&["run", "--config", "nowhere.toml"], tmp.path());
    assert!(!out.status.success());
    assert!(stderr_json(&out)["exit_code"].as_i64().unwrap() > 0);
}
