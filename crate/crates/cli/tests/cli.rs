use std::path::Path;
use std::process::{Command, Output};

fn lab(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blowup-lab"))
        .env("BLOWUP_LAB_CACHE", cache)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn groundstate_writes_cache_and_metadata() {
    let cache = tempfile::tempdir().unwrap();
    let out = lab(cache.path(), &["groundstate", "--dim", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let meta: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let closed_form = 3f64.sqrt() * std::f64::consts::PI.powi(3) / 32.0;
    assert!((meta["virial_sq"].as_f64().unwrap() - closed_form).abs() < 1e-6);
    assert!(cache.path().join("rho_N1.json").exists());
    assert!(cache.path().join("q_N1_M512_L16.nlsf").exists());
}

#[test]
fn identity_suite_passes_and_writes_junit() {
    let cache = tempfile::tempdir().unwrap();
    let junit = cache.path().join("report.xml");
    let out = lab(
        cache.path(),
        &["verify", "--suite", "identities", "--dim", "1", "--junit", junit.to_str().unwrap()],
    );
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let xml = std::fs::read_to_string(&junit).unwrap();
    assert!(xml.contains("<testsuites>"));
    assert!(!xml.contains("<failure"));
}

#[test]
fn corrupted_rho_cache_fails_identity_suite() {
    let cache = tempfile::tempdir().unwrap();
    assert_eq!(code(&lab(cache.path(), &["groundstate", "--dim", "1"])), 0);
    let path = cache.path().join("rho_N1.json");
    let mut rho: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for v in rho["values"].as_array_mut().unwrap() {
        *v = serde_json::json!(v.as_f64().unwrap() * 1.01);
    }
    std::fs::write(&path, rho.to_string()).unwrap();

    let out = lab(cache.path(), &["verify", "--suite", "identities", "--dim", "1"]);
    assert_eq!(code(&out), 1, "{}", stdout(&out));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"dim":1,"e0":-1.0,"s1":5.0,"grid":{"points":512,"half_width":8.0}}"#).unwrap();
    assert_eq!(code(&lab(dir.path(), &["run", "--config", cfg.to_str().unwrap()])), 2);

    std::fs::write(&cfg, r#"{"dim":1,"e0":1.0,"s1":5.0,"grid":{"points":512,"half_width":8.0},"typo":1}"#).unwrap();
    assert_eq!(code(&lab(dir.path(), &["run", "--config", cfg.to_str().unwrap()])), 2);

    let missing = dir.path().join("missing.json");
    assert_eq!(code(&lab(dir.path(), &["run", "--config", missing.to_str().unwrap()])), 2);
    assert_eq!(code(&lab(dir.path(), &["verify", "--suite", "nonsense"])), 2);
}

#[test]
fn run_then_fit_recovers_free_rate() {
    let dir = tempfile::tempdir().unwrap();
    let half_width = 0.5;
    let virial_sq = 3f64.sqrt() * std::f64::consts::PI.powi(3) / 32.0;
    // λ₁ = half_width / 12 at E₀ = 1.
    let s1 = (virial_sq / 8.0).sqrt() / (half_width / 12.0);
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "dim": 1,
            "e0": 1.0,
            "s1": s1,
            "model": {"catalog": "free"},
            "grid": {"points": 512, "half_width": half_width}
        })
        .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = lab(
        dir.path(),
        &["run", "--config", cfg.to_str().unwrap(), "--output", out_dir.to_str().unwrap()],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["trajectory.csv", "modulation.csv", "summary.json", "rates.svg"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }

    let h = 2.0 * half_width / 512.0;
    let out = lab(
        dir.path(),
        &[
            "fit",
            "--trajectory",
            out_dir.join("modulation.csv").to_str().unwrap(),
            "--lambda-min",
            &(16.0 * h).to_string(),
        ],
    );
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let predicted = (8.0 / virial_sq).sqrt();
    let slope = report["lambda_slope"].as_f64().unwrap();
    assert!((slope - predicted).abs() / predicted < 0.01, "slope {slope}");
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = blowup_core::harness::ExperimentConfig::from_json(&std::fs::read_to_string(&path).unwrap())
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap();
            cfg.model.resolve(cfg.dim).unwrap();
            seen += 1;
        }
    }
    assert!(seen > 0);
}
