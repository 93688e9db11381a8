//! Configuration-driven experiment runner: resolves a JSON config, runs one
//! study and writes its artifacts (results.csv, summary.json, manifest.json
//! and the mode-specific extras) atomically into the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::centering::CenteringConfig;
use crate::dataset::{bundle_order, generate_pair, SynthSpec, TrialStore};
use crate::decode::{cross_subject_eval, cross_validate, CrossSubjectParams, EvalReport, PriorMode, Split, DEFAULT_SHRINKAGE};
use crate::diagnostics::{extract_noise, noise_report, welch_psd, DEFAULT_SIGNIFICANCE};
use crate::error::{Error, Result};
use crate::features::{bands_for_cutoff, cutoff_hz, extract_dataset, max_bands, Estimator, FeatureDataset};
use crate::imbalance::{run_imbalance_study, ImbalanceResults, ImbalanceStudy};
use crate::trial_file::{read_header, read_store, write_atomic, write_store};

/// Bumped whenever a column or field of the output files changes.
pub const OUTPUT_SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Subject-specific decoding accuracy versus retained bands.
    #[default]
    Benchmark,
    CrossSubject,
    /// All (destination EDC bundle, source EDC bundle) pairs.
    CrossSubjectSweep,
    Imbalance,
    Diagnostics,
    Generate,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Benchmark => "benchmark",
            Mode::CrossSubject => "cross_subject",
            Mode::CrossSubjectSweep => "cross_subject_sweep",
            Mode::Imbalance => "imbalance",
            Mode::Diagnostics => "diagnostics",
            Mode::Generate => "generate",
        }
    }

    fn needs_source(self) -> bool {
        matches!(self, Mode::CrossSubject | Mode::CrossSubjectSweep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsConfig {
    pub cutoffs_hz: Vec<f64>,
    pub significance: f64,
    /// Channel whose residuals feed the PSD.
    pub channel: usize,
    pub welch_segment: usize,
    pub welch_overlap: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            cutoffs_hz: (2..=15).map(f64::from).collect(),
            significance: DEFAULT_SIGNIFICANCE,
            channel: 0,
            welch_segment: 256,
            welch_overlap: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Subject X trial file.
    pub source: Option<PathBuf>,
    /// Subject Y trial file.
    pub destination: Option<PathBuf>,
    /// Generated pair used in place of missing files (X is the source).
    pub synth: Option<SynthSpec>,
    pub t_used: usize,
    pub estimator: Estimator,
    /// Band counts evaluated by the benchmark.
    pub bands_sweep: Vec<usize>,
    /// LDA covariance shrinkage.
    pub shrinkage: f64,
    /// Source sampling proportion.
    pub alpha: f64,
    pub centering: CenteringConfig,
    /// Clustering window for EDC bundling in sweep mode.
    pub window: usize,
    pub priors: PriorMode,
    pub split: Split,
    pub imbalance: ImbalanceStudy,
    pub diagnostics: DiagnosticsConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; never affects results.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Benchmark,
            source: None,
            destination: None,
            synth: None,
            t_used: 650,
            estimator: Estimator::default(),
            bands_sweep: (1..=7).collect(),
            shrinkage: DEFAULT_SHRINKAGE,
            alpha: 1.0,
            centering: CenteringConfig::default(),
            window: 900,
            priors: PriorMode::Empirical,
            split: Split::Loo,
            imbalance: ImbalanceStudy::default(),
            diagnostics: DiagnosticsConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            threads: None,
        }
    }
}

impl ExperimentConfig {
    /// Accepts either a config object or a run manifest.
    pub fn from_value(v: Value) -> Result<Self> {
        let v = match v {
            Value::Object(mut m) if m.contains_key("config_hash") && m.contains_key("config") => {
                m.remove("config").unwrap_or(Value::Null)
            }
            other => other,
        };
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_value(read_json(path)?)
    }

    /// Stable hash of everything that can change a numeric output.
    pub fn config_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut v {
            m.remove("threads");
            m.remove("output_dir");
        }
        Ok(hex(&Sha256::digest(serde_json::to_vec(&v)?)))
    }

    fn check(&self) -> Result<()> {
        let issues = self.issues(None);
        match issues.into_iter().next() {
            Some(msg) => Err(Error::Config(msg)),
            None => Ok(()),
        }
    }

    /// Static problems; `trial_len` adds the T_used check when known.
    fn issues(&self, trial_len: Option<usize>) -> Vec<String> {
        let mut out = Vec::new();
        let has_dest = self.destination.is_some() || self.synth.is_some();
        let has_source = self.source.is_some() || self.synth.is_some();
        match self.mode {
            Mode::Generate if self.synth.is_none() => out.push("mode generate requires `synth`".into()),
            Mode::Generate => {}
            m => {
                if !has_dest {
                    out.push(format!("mode {} requires `destination` or `synth`", m.name()));
                }
                if m.needs_source() && !has_source {
                    out.push(format!("mode {} requires `source` or `synth`", m.name()));
                }
            }
        }
        if self.t_used == 0 {
            out.push("t_used must be positive".into());
        }
        if let Some(t) = trial_len {
            if self.t_used > t {
                out.push(format!("t_used = {} exceeds the trial length T = {t}", self.t_used));
            }
        }
        let admissible = max_bands(self.t_used);
        let mut bands = vec![self.estimator.bands()];
        if self.mode == Mode::Benchmark {
            bands.extend(&self.bands_sweep);
        }
        for l in bands {
            if l == 0 || l > admissible {
                out.push(format!(
                    "L = {l} outside [1, {admissible}] admissible for t_used = {}",
                    self.t_used
                ));
            }
        }
        if self.mode == Mode::Benchmark && self.bands_sweep.is_empty() {
            out.push("bands_sweep is empty".into());
        }
        if !(self.shrinkage >= 0.0 && self.shrinkage <= 1.0) {
            out.push(format!("shrinkage {} outside [0, 1]", self.shrinkage));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            out.push(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if let Err(e) = self.centering.validate() {
            out.push(e.to_string());
        }
        if self.window == 0 {
            out.push("window must be positive".into());
        }
        if self.mode == Mode::Imbalance {
            if let Err(e) = self.imbalance.validate() {
                out.push(e.to_string());
            }
        }
        if let Some(s) = &self.synth {
            if let Err(e) = s.validate() {
                out.push(e.to_string());
            }
        }
        if self.threads == Some(0) {
            out.push("threads must be positive".into());
        }
        out
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_json(path: impl AsRef<Path>) -> Result<Value> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefaultedKnob {
    pub key: String,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Dotted keys absent from the input, with the value that will be used.
    pub defaulted: Vec<DefaultedKnob>,
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for d in &self.defaulted {
            out.push_str(&format!("default {} = {}\n", d.key, d.value));
        }
        for i in &self.issues {
            out.push_str(&format!("issue {i}\n"));
        }
        out.push_str(if self.is_ok() { "ok\n" } else { "invalid\n" });
        out
    }
}

fn collect_defaults(prefix: &str, default: &Value, raw: Option<&Value>, out: &mut Vec<DefaultedKnob>) {
    let Value::Object(dm) = default else { return };
    for (k, dv) in dm {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match raw.and_then(|r| r.get(k)) {
            None => out.push(DefaultedKnob { key, value: dv.clone() }),
            // tagged enums are replaced wholesale, plain structs are merged
            Some(rv) if dv.is_object() && rv.is_object() && dv.get("kind").is_none() => {
                collect_defaults(&key, dv, Some(rv), out)
            }
            Some(_) => {}
        }
    }
}

/// Pure check of a raw config (or manifest): lists every defaulted knob and
/// every problem found. Trial-file headers are read to learn T when needed.
pub fn validate(raw: &Value) -> ValidationReport {
    let raw = match raw.get("config") {
        Some(c) if raw.get("config_hash").is_some() => c,
        _ => raw,
    };
    let mut defaulted = Vec::new();
    let mut issues = Vec::new();
    if !raw.is_object() {
        issues.push("config must be a JSON object".into());
    }
    let default = serde_json::to_value(ExperimentConfig::default()).expect("default config serializes");
    collect_defaults("", &default, Some(raw), &mut defaulted);
    if let Some(s) = raw.get("synth") {
        let d = serde_json::to_value(SynthSpec::default()).expect("default spec serializes");
        collect_defaults("synth", &d, Some(s), &mut defaulted);
    }
    match ExperimentConfig::from_value(raw.clone()) {
        Err(e) => issues.push(e.to_string()),
        Ok(cfg) => {
            let mut lens = Vec::new();
            if let Some(s) = &cfg.synth {
                lens.push(s.len);
            }
            for p in cfg.source.iter().chain(cfg.destination.iter()) {
                match read_header(p) {
                    Ok(h) => lens.push(h.len),
                    Err(e) => issues.push(format!("{}: {e}", p.display())),
                }
            }
            issues.extend(cfg.issues(lens.into_iter().min()));
        }
    }
    ValidationReport { defaulted, issues }
}

/// Paths and hash of every file a run wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub code_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// File name to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
}

impl Outputs {
    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    fn add_json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(v)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    fn commit(self) -> Result<BTreeMap<String, String>> {
        fs::create_dir_all(&self.dir)?;
        let mut hashes = BTreeMap::new();
        for (name, bytes) in &self.files {
            write_atomic(self.dir.join(name), bytes)?;
            hashes.insert(name.clone(), hex(&Sha256::digest(bytes)));
        }
        Ok(hashes)
    }
}

struct Inputs {
    source: Option<TrialStore>,
    destination: TrialStore,
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    let generated = match (&cfg.synth, &cfg.source, &cfg.destination) {
        (Some(s), src, dst) if src.is_none() || dst.is_none() => Some(generate_pair(s)?),
        _ => None,
    };
    let (gx, gy) = match generated {
        Some((x, y, _)) => (Some(x), Some(y)),
        None => (None, None),
    };
    let source = match &cfg.source {
        Some(p) => Some(read_store(p)?),
        None => gx,
    };
    let destination = match &cfg.destination {
        Some(p) => read_store(p)?,
        None => gy.ok_or_else(|| Error::Config("no destination data".into()))?,
    };
    for s in source.iter().chain(std::iter::once(&destination)) {
        if cfg.t_used > s.len {
            return Err(Error::Config(format!(
                "t_used = {} exceeds the trial length T = {} of subject {}",
                cfg.t_used, s.len, s.subject_id
            )));
        }
    }
    if cfg.mode.needs_source() && source.is_none() {
        return Err(Error::Config("no source data".into()));
    }
    Ok(Inputs { source, destination })
}

fn features(store: &TrialStore, estimator: &Estimator, t_used: usize) -> Result<FeatureDataset> {
    extract_dataset(&store.trials, estimator, Some(t_used), store.num_targets)
}

fn params(cfg: &ExperimentConfig, seed: u64) -> CrossSubjectParams {
    CrossSubjectParams {
        alpha: cfg.alpha,
        shrinkage: cfg.shrinkage,
        priors: cfg.priors,
        split: cfg.split,
        seed,
    }
}

fn report_csv(rows: &[(String, &EvalReport)], num_targets: usize, hash: &str) -> Vec<u8> {
    let mut out = EvalReport::csv_header(num_targets);
    out.push('\n');
    for (id, r) in rows {
        out.push_str(&r.csv_row(id, hash));
        out.push('\n');
    }
    out.into_bytes()
}

/// Summary returned to the caller (and written as summary.json).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub files: Vec<String>,
}

/// Runs one experiment and writes its artifacts.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.check()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(cfg))
}

fn run_inner(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let hash = cfg.config_hash()?;
    let mut out = Outputs {
        dir: cfg.output_dir.clone(),
        files: BTreeMap::new(),
    };
    match cfg.mode {
        Mode::Generate => run_generate(cfg, &hash, &mut out)?,
        Mode::Benchmark => run_benchmark(cfg, &hash, &mut out)?,
        Mode::CrossSubject => run_cross_subject(cfg, &hash, &mut out)?,
        Mode::CrossSubjectSweep => run_sweep(cfg, &hash, &mut out)?,
        Mode::Imbalance => run_imbalance(cfg, &hash, &mut out)?,
        Mode::Diagnostics => run_diagnostics(cfg, &hash, &mut out)?,
    }
    let dir = out.dir.clone();
    let mut outputs = out.commit()?;
    let manifest = RunManifest {
        schema_version: OUTPUT_SCHEMA_VERSION,
        code_version: CODE_VERSION.into(),
        seed: cfg.seed,
        config_hash: hash.clone(),
        config: cfg.clone(),
        outputs: outputs.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(dir.join("manifest.json"), &bytes)?;
    outputs.insert("manifest.json".into(), hex(&Sha256::digest(&bytes)));
    Ok(RunSummary {
        mode: cfg.mode,
        config_hash: hash,
        output_dir: dir,
        files: outputs.into_keys().collect(),
    })
}

fn run_generate(cfg: &ExperimentConfig, hash: &str, out: &mut Outputs) -> Result<()> {
    let spec = cfg.synth.as_ref().ok_or_else(|| Error::Config("generate needs synth".into()))?;
    let (x, y, truth) = generate_pair(spec)?;
    fs::create_dir_all(&out.dir)?;
    let mut csv = String::from("file,subject_id,channels,T,trials,edcs,config_hash\n");
    for (name, store) in [("source.trials", &x), ("destination.trials", &y)] {
        write_store(out.dir.join(name), store)?;
        csv.push_str(&format!(
            "{name},{},{},{},{},{},{hash}\n",
            store.subject_id,
            store.channels,
            store.len,
            store.trials.len(),
            store.edcs.len()
        ));
    }
    out.add_json("ground_truth.json", &truth)?;
    out.add("results.csv", csv.into_bytes());
    let max_ratio = truth.targets.iter().map(|t| t.frobenius_ratio).fold(0.0, f64::max);
    out.add_json(
        "summary.json",
        &json!({
            "mode": "generate",
            "config_hash": hash,
            "source": "source.trials",
            "destination": "destination.trials",
            "ground_truth": "ground_truth.json",
            "feature_dim": truth.feature_dim,
            "max_frobenius_ratio": max_ratio,
        }),
    )
}

fn run_benchmark(cfg: &ExperimentConfig, hash: &str, out: &mut Outputs) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let store = &inputs.destination;
    let reports = cfg
        .bands_sweep
        .iter()
        .map(|&l| {
            let data = features(store, &cfg.estimator.with_bands(l), cfg.t_used)?;
            cross_validate(&data, cfg.split, cfg.shrinkage, cfg.priors, cfg.seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<_> = cfg
        .bands_sweep
        .iter()
        .zip(&reports)
        .map(|(l, r)| (format!("bands_{l}"), r))
        .collect();
    out.add("results.csv", report_csv(&rows, store.num_targets, hash));
    let curve: Vec<_> = cfg
        .bands_sweep
        .iter()
        .zip(&reports)
        .map(|(&l, r)| {
            json!({
                "bands": l,
                "cutoff_hz": cutoff_hz(l, cfg.t_used, store.sample_rate_hz),
                "features": l.saturating_mul(2).saturating_sub(1) * store.channels,
                "overall_accuracy": r.overall_accuracy,
                "per_target_accuracy": r.per_target_accuracy,
            })
        })
        .collect();
    out.add_json(
        "summary.json",
        &json!({ "mode": "benchmark", "config_hash": hash, "subject": store.subject_id, "split": cfg.split, "curve": curve }),
    )
}

fn run_cross_subject(cfg: &ExperimentConfig, hash: &str, out: &mut Outputs) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let source = inputs.source.as_ref().expect("checked by load_inputs");
    let src = features(source, &cfg.estimator, cfg.t_used)?;
    let dst = features(&inputs.destination, &cfg.estimator, cfg.t_used)?;
    let report = cross_subject_eval(&src, &dst, &cfg.centering, &params(cfg, cfg.seed))?;
    let own = cross_validate(&dst, cfg.split, cfg.shrinkage, cfg.priors, cfg.seed)?;
    let rows = vec![
        ("centered".to_string(), &report.centered),
        ("uncentered".to_string(), &report.uncentered),
        ("destination_only".to_string(), &own),
    ];
    out.add("results.csv", report_csv(&rows, dst.num_targets, hash));
    out.add_json(
        "summary.json",
        &json!({
            "mode": "cross_subject",
            "config_hash": hash,
            "source": source.subject_id,
            "destination": inputs.destination.subject_id,
            "centered": report.centered,
            "uncentered": report.uncentered,
            "destination_only": own,
            "centering": report.centering,
        }),
    )
}

/// Feature rows of the trials of the bundled EDCs, in bundling order.
fn bundled(data: &FeatureDataset, store: &TrialStore, concurrent: u32, window: usize) -> Result<FeatureDataset> {
    let order = bundle_order(store, concurrent, window)?;
    let idx: Vec<usize> = order
        .iter()
        .flat_map(|e| (0..store.trials.len()).filter(move |&i| store.trials[i].edc_index == *e))
        .collect();
    Ok(data.subset(&idx))
}

fn run_sweep(cfg: &ExperimentConfig, hash: &str, out: &mut Outputs) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let source = inputs.source.as_ref().expect("checked by load_inputs");
    let dest = &inputs.destination;
    let src = features(source, &cfg.estimator, cfg.t_used)?;
    let dst = features(dest, &cfg.estimator, cfg.t_used)?;
    let dst_edcs: Vec<u32> = dest.edcs.keys().copied().collect();
    let src_edcs: Vec<u32> = source.edcs.keys().copied().collect();
    let dst_bundles = dst_edcs
        .iter()
        .map(|&e| bundled(&dst, dest, e, cfg.window))
        .collect::<Result<Vec<_>>>()?;
    let src_bundles = src_edcs
        .iter()
        .map(|&e| bundled(&src, source, e, cfg.window))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..dst_edcs.len())
        .flat_map(|d| (0..src_edcs.len()).map(move |s| (d, s)))
        .collect();
    let reports = cells
        .par_iter()
        .map(|&(d, s)| cross_subject_eval(&src_bundles[s], &dst_bundles[d], &cfg.centering, &params(cfg, cfg.seed)))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (&(d, s), r) in cells.iter().zip(&reports) {
        let id = format!("dst{}_src{}", dst_edcs[d], src_edcs[s]);
        rows.push((format!("{id}_centered"), &r.centered));
        rows.push((format!("{id}_uncentered"), &r.uncentered));
    }
    out.add("results.csv", report_csv(&rows, dest.num_targets, hash));

    let mut matrix = String::from("destination_edc");
    for e in &src_edcs {
        matrix.push_str(&format!(",src_{e}"));
    }
    matrix.push('\n');
    for (d, e) in dst_edcs.iter().enumerate() {
        matrix.push_str(&e.to_string());
        for s in 0..src_edcs.len() {
            matrix.push_str(&format!(",{:.6}", reports[d * src_edcs.len() + s].centered.overall_accuracy));
        }
        matrix.push('\n');
    }
    out.add("matrix.csv", matrix.into_bytes());

    let best: Vec<_> = dst_edcs
        .iter()
        .enumerate()
        .map(|(d, e)| {
            let row = &reports[d * src_edcs.len()..(d + 1) * src_edcs.len()];
            let s = (0..row.len()).fold(0, |b, i| {
                if row[i].centered.overall_accuracy > row[b].centered.overall_accuracy { i } else { b }
            });
            json!({
                "destination_edc": e,
                "destination_mean_depth_mm": dest.edcs[e].mean_depth_mm(),
                "best_source_edc": src_edcs[s],
                "best_source_mean_depth_mm": source.edcs[&src_edcs[s]].mean_depth_mm(),
                "centered_accuracy": row[s].centered.overall_accuracy,
            })
        })
        .collect();
    out.add_json(
        "summary.json",
        &json!({
            "mode": "cross_subject_sweep",
            "config_hash": hash,
            "window": cfg.window,
            "destination_edcs": dst_edcs,
            "source_edcs": src_edcs,
            "best_per_destination": best,
        }),
    )
}

/// Counts of minority-class accuracy per (ratio, strategy) in 20 equal bins.
fn histogram_csv(results: &ImbalanceResults) -> String {
    const BINS: usize = 20;
    let mut out = String::from("ratio,strategy,bin_lo,bin_hi,count\n");
    for &ratio in &results.study.ratios {
        for &strategy in &results.study.strategies {
            let mut counts = [0usize; BINS];
            for r in results.records_for(ratio, strategy) {
                let b = ((r.minority_accuracy * BINS as f64) as usize).min(BINS - 1);
                counts[b] += 1;
            }
            for (b, c) in counts.iter().enumerate() {
                out.push_str(&format!(
                    "{ratio},{},{:.2},{:.2},{c}\n",
                    strategy.name(),
                    b as f64 / BINS as f64,
                    (b + 1) as f64 / BINS as f64
                ));
            }
        }
    }
    out
}

fn run_imbalance(cfg: &ExperimentConfig, hash: &str, out: &mut Outputs) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let dst = features(&inputs.destination, &cfg.estimator, cfg.t_used)?;
    let src = inputs
        .source
        .as_ref()
        .map(|s| features(s, &cfg.estimator, cfg.t_used))
        .transpose()?;
    let study = ImbalanceStudy {
        shrinkage: cfg.shrinkage,
        priors: cfg.priors,
        seed: cfg.seed,
        ..cfg.imbalance.clone()
    };
    let results = run_imbalance_study(&dst, src.as_ref(), &study, &cfg.centering)?;
    out.add("results.csv", results.to_csv().into_bytes());
    out.add("histogram.csv", histogram_csv(&results).into_bytes());
    out.add_json(
        "summary.json",
        &json!({
            "mode": "imbalance",
            "config_hash": hash,
            "test_split": format!("stratified holdout, fraction {}", study.holdout_fraction),
            "study": study,
            "summaries": results.summaries,
        }),
    )
}

fn run_diagnostics(cfg: &ExperimentConfig, hash: &str, out: &mut Outputs) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let store = &inputs.destination;
    let d = &cfg.diagnostics;
    if d.channel >= store.channels {
        return Err(Error::Config(format!("channel {} outside store with {} channels", d.channel, store.channels)));
    }
    let report = noise_report(&store.trials, &d.cutoffs_hz, d.significance, Some(cfg.t_used))?;
    out.add("results.csv", report.to_csv().into_bytes());

    // PSD of the residual noise, averaged over trials
    let bands = bands_for_cutoff(d.cutoffs_hz[0], cfg.t_used, store.sample_rate_hz);
    let psds = store
        .trials
        .par_iter()
        .map(|t| {
            let r = extract_noise(&t.channel(d.channel)[..cfg.t_used], t.sample_rate_hz, bands)?;
            welch_psd(&r, t.sample_rate_hz, d.welch_segment, d.welch_overlap)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = psds[0].clone();
    for p in &psds[1..] {
        for (m, v) in mean.power.iter_mut().zip(&p.power) {
            *m += v;
        }
    }
    for m in &mut mean.power {
        *m /= psds.len() as f64;
    }
    out.add("psd.csv", mean.to_csv().into_bytes());

    let corr = report.correlation();
    let n = corr.nrows();
    let mut csv = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{:.6}", corr[(i, j)])).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    out.add("correlation.csv", csv.into_bytes());
    let off_diag = if n > 1 {
        let total: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| corr[(i, j)].abs()).sum();
        total / (n * (n - 1)) as f64
    } else {
        0.0
    };
    out.add_json(
        "summary.json",
        &json!({
            "mode": "diagnostics",
            "config_hash": hash,
            "subject": store.subject_id,
            "cutoffs_hz": report.cutoffs_hz,
            "bands": report.bands,
            "confirm_proportion": report.confirm_proportion,
            "significance": report.significance,
            "mean_abs_off_diagonal_correlation": off_diag,
            "psd_total_power": mean.integral(),
            "welch": mean.params,
        }),
    )
}
