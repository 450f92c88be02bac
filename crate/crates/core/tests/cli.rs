use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
    "seed": 4,
    "model": {"family": "margin-constructed", "hidden_dim": 8, "vocab_size": 12,
              "margin": {"delta": 0.5, "lambda": 2.0}},
    "behavior": {"aligned": [0, 1, 2], "misaligned": [3, 4, 5], "choice_set": [6, 7, 8, 9]},
    "grid": "0:6:0.5",
    "queries": 6,
    "checks": ["thm1", "thm2"]
}"#;

fn steerlab(args: &[&str], config: Option<&Path>, out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_steerlab"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    if let Some(o) = out {
        cmd.arg("--out").arg(o);
    }
    cmd.args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn sweep_fit_report_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let o = steerlab(&["sweep"], Some(&cfg), Some(&out));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["sweep.csv", "manifest.json", "fits.csv", "validators.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let o = steerlab(&["fit"], None, Some(&out));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let fits = std::fs::read_to_string(out.join("fits.csv")).unwrap();
    assert!(fits.starts_with("parameter,estimate,lower,upper,rss,r2,trace_len\n"));
    assert!(fits.contains("\ntanh_slope,"));
    let o = steerlab(&["report"], None, Some(&out));
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("thm1: pass"));
}

#[test]
fn gen_model_and_extract_write_loadable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let body = CONFIG.replace(r#""checks""#, r#""steering": {"source": "extracted", "pairs": 16}, "checks""#);
    let cfg = write_config(dir.path(), &body);
    let out = dir.path().join("out");
    assert_eq!(steerlab(&["gen-model"], Some(&cfg), Some(&out)).status.code(), Some(0));
    assert_eq!(steerlab(&["extract"], Some(&cfg), Some(&out)).status.code(), Some(0));
    let model = steerlab::LayeredModel::load(&out.join("model.json")).unwrap();
    assert_eq!(model.vocab_size(), 12);
    let steering = std::fs::read_to_string(out.join("steering.json")).unwrap();
    assert_eq!(steerlab::SteeringVectorSet::from_json(&steering).unwrap().dim(), 8);
    assert!(out.join("contrast.json").exists());
}

#[test]
fn dry_run_validates_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let o = steerlab(&["validate", "--dry-run"], Some(&cfg), Some(&out));
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("config ok sha256="));
    assert!(!out.exists());
}

#[test]
fn quiet_suppresses_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let o = steerlab(&["--quiet", "validate", "--dry-run"], Some(&cfg), None);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let o = steerlab(&["--seed", "99", "sweep"], Some(&cfg), Some(&out));
    assert_eq!(o.status.code(), Some(0));
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 99"));
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("0:6:0.5", "1:6:0.5"));
    let o = steerlab(&["sweep"], Some(&cfg), None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("must contain 0"));

    let cfg = write_config(dir.path(), &CONFIG.replace("\"queries\"", "\"querys\""));
    let o = steerlab(&["validate", "--dry-run"], Some(&cfg), None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("querys"));

    assert_eq!(steerlab(&["sweep"], None, None).status.code(), Some(1));
    assert_eq!(steerlab(&["no-such-command"], None, None).status.code(), Some(1));
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(steerlab(&["sweep"], Some(&missing), None).status.code(), Some(3));

    let cfg = write_config(dir.path(), CONFIG);
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "x").unwrap();
    let o = steerlab(&["sweep"], Some(&cfg), Some(&blocker.join("out")));
    assert_eq!(o.status.code(), Some(3));

    assert_eq!(steerlab(&["report"], None, Some(&dir.path().join("empty"))).status.code(), Some(3));
}

#[test]
fn bound_violation_exits_2() {
    // the unit slope convention overshoots on constructed instances
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("\"seed\": 4,", "\"seed\": 4, \"kappa\": 1,"));
    let out = dir.path().join("out");
    let o = steerlab(&["sweep"], Some(&cfg), Some(&out));
    assert_eq!(o.status.code(), Some(2));
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(sweep.contains("thm1=fail("));
    assert_eq!(steerlab(&["report"], None, Some(&out)).status.code(), Some(2));
}
