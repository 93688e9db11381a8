use std::process::{Command, Output};

fn lfpcenter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfpcenter")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_lists_defaults_for_an_empty_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.json");
    std::fs::write(&cfg, "{}").unwrap();
    let o = lfpcenter(&["--config", cfg.to_str().unwrap(), "--validate"]);
    let out = String::from_utf8_lossy(&o.stdout);
    for key in ["mode", "t_used", "window", "centering", "seed"] {
        assert!(out.contains(&format!("default {key} = ")), "{out}");
    }
    // no data source for the default mode
    assert!(!o.status.success());
    assert!(out.trim_end().ends_with("invalid"));
}

#[test]
fn failures_print_one_categorised_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = lfpcenter(&["--mode", "cross_subject", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[config]: "), "{err}");
    assert!(!out.exists());

    let o = lfpcenter(&["--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert!(stderr(&o).starts_with("error[io]: "));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let o = lfpcenter(&["--config", bad.to_str().unwrap()]);
    assert!(stderr(&o).starts_with("error[format]: "));
}

#[test]
fn generate_then_cross_subject_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let gen_cfg = dir.path().join("gen.json");
    std::fs::write(
        &gen_cfg,
        r#"{"synth": {"channels": 2, "T": 256, "num_targets": 3, "trials_per_target": 20,
                      "subject_link": {"kind": "random_spd", "log_scale": 0.5, "noise_ratio": 0.05}}}"#,
    )
    .unwrap();
    let gen_out = dir.path().join("gen");
    let o = lfpcenter(&["--config", gen_cfg.to_str().unwrap(), "--mode", "generate", "--out", gen_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["source.trials", "destination.trials", "ground_truth.json", "manifest.json", "results.csv", "summary.json"] {
        assert!(gen_out.join(f).exists(), "{f}");
    }

    let cs_cfg = dir.path().join("cs.json");
    let body = serde_json::json!({
        "mode": "cross_subject",
        "source": gen_out.join("source.trials"),
        "destination": gen_out.join("destination.trials"),
        "t_used": 256,
    });
    std::fs::write(&cs_cfg, body.to_string()).unwrap();
    let cs_out = dir.path().join("cs");
    let o = lfpcenter(&["--config", cs_cfg.to_str().unwrap(), "--seed", "3", "--out", cs_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(cs_out.join("results.csv")).unwrap();
    let ids: Vec<_> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["centered", "uncentered", "destination_only"]);
    let header: Vec<_> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 5 + 3);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(cs_out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["centered"]["per_target_accuracy"].as_array().unwrap().len(), 3);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(cs_out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);

    // t_used beyond the stored trial length is reported before any work
    let o = lfpcenter(&["--config", cs_cfg.to_str().unwrap(), "--validate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    std::fs::write(&cs_cfg, serde_json::json!({"mode": "cross_subject", "source": gen_out.join("source.trials"),
        "destination": gen_out.join("destination.trials"), "t_used": 300}).to_string()).unwrap();
    let o = lfpcenter(&["--config", cs_cfg.to_str().unwrap(), "--validate"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("exceeds the trial length T = 256"));
}

#[test]
fn diagnostics_and_benchmark_modes_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let synth = serde_json::json!({"channels": 2, "T": 400, "num_targets": 2, "trials_per_target": 12});
    for (mode, files) in [
        ("diagnostics", vec!["results.csv", "psd.csv", "correlation.csv", "summary.json"]),
        ("benchmark", vec!["results.csv", "summary.json"]),
    ] {
        let cfg = dir.path().join(format!("{mode}.json"));
        std::fs::write(&cfg, serde_json::json!({"mode": mode, "synth": synth, "t_used": 400}).to_string()).unwrap();
        let out = dir.path().join(mode);
        let o = lfpcenter(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{mode}: {}", stderr(&o));
        for f in files {
            assert!(out.join(f).exists(), "{mode}: {f}");
        }
    }
    let bench = std::fs::read_to_string(dir.path().join("benchmark/results.csv")).unwrap();
    assert_eq!(bench.lines().count(), 1 + 7);
}
