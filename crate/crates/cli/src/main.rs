use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lfp_centering::runner::{run, validate, ExperimentConfig};
use lfp_centering::Error;
use serde_json::Value;

/// Runs a cross-subject LFP decoding experiment described by a JSON config.
///
/// Flags override the matching config fields. A run manifest is accepted in
/// place of a config and reproduces that run.
#[derive(Parser, Debug)]
#[command(name = "lfpcenter", version)]
struct Args {
    /// JSON experiment config or manifest.json of a previous run
    #[arg(long)]
    config: Option<PathBuf>,
    /// benchmark | cross_subject | cross_subject_sweep | imbalance | diagnostics | generate
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// List defaulted knobs and problems, then exit without running
    #[arg(long)]
    validate: bool,
}

fn load(args: &Args) -> Result<Value, Error> {
    let mut v = match &args.config {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => Value::Object(Default::default()),
    };
    // unwrap manifests so overrides land on the config itself
    if v.get("config_hash").is_some() {
        if let Some(c) = v.get("config") {
            v = c.clone();
        }
    }
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
    if let Some(m) = &args.mode {
        obj.insert("mode".into(), Value::String(m.clone()));
    }
    if let Some(s) = args.seed {
        obj.insert("seed".into(), s.into());
    }
    if let Some(o) = &args.out {
        obj.insert("output_dir".into(), Value::String(o.to_string_lossy().into_owned()));
    }
    if let Some(t) = args.threads {
        obj.insert("threads".into(), t.into());
    }
    Ok(v)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = load(&args).and_then(|v| {
        if args.validate {
            let report = validate(&v);
            print!("{}", report.render());
            return Ok(report.is_ok());
        }
        let cfg = ExperimentConfig::from_value(v)?;
        let summary = run(&cfg)?;
        println!(
            "{} {} -> {} ({})",
            serde_json::to_value(summary.mode)?.as_str().unwrap_or("?"),
            summary.config_hash,
            summary.output_dir.display(),
            summary.files.join(", ")
        );
        Ok(true)
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(2)
        }
    }
}
