//! The `murrenet` command line: argument definitions, command bodies and
//! the run manifest written next to every result.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use murrenet_core::autodiff::BackwardFault;
use murrenet_core::checkpoint::{Checkpoint, FoldMetrics};
use murrenet_core::cohort_io::{read_cohort_dir, read_manifest, resolve, write_cohort_dir, MANIFEST};
use murrenet_core::data::{apply_bin_edges, make_synthetic_cohort, SyntheticSpec};
use murrenet_core::metrics::{concordance_index, kaplan_meier, km_to_tsv, log_rank_test, stratify_by_median};
use murrenet_core::model::Ablation;
use murrenet_core::training::{gradient_check, run_cv, GradCheckConfig, GradCheckReport, TrainConfig};
use murrenet_core::Error as CoreError;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("{0}")]
    Degenerate(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Training(_) => 3,
            CliError::Degenerate(_) => 4,
            CliError::GradCheck(_) => 5,
        }
    }
}

fn one_line(s: impl std::fmt::Display) -> String {
    s.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Maps library errors by kind; anything not obviously a config, data
/// or stratification problem goes to `otherwise`.
fn classify(e: CoreError, otherwise: fn(String) -> CliError) -> CliError {
    let msg = one_line(&e);
    match e {
        CoreError::Config { .. } => CliError::Config(msg),
        CoreError::DegenerateStratification => CliError::Degenerate(msg),
        CoreError::Io { .. }
        | CoreError::Data(_)
        | CoreError::Shape { .. }
        | CoreError::NoObservedEvents
        | CoreError::Stratum { .. }
        | CoreError::TimeBin { .. } => CliError::Data(msg),
        _ => otherwise(msg),
    }
}

fn data_err(e: CoreError) -> CliError {
    CliError::Data(one_line(e))
}

#[derive(Debug, Parser)]
#[command(name = "murrenet", version, about = "Multimodal survival prediction on pathology and genomic features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort directory.
    Synth(SynthArgs),
    /// Cross-validated training; writes fit results, checkpoints and metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a cohort (C-index and per-patient risks).
    Eval(ScoreArgs),
    /// Median risk split, Kaplan-Meier curves and log-rank test.
    Stratify(ScoreArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator settings (TOML); defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "MURRENET_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (TOML); library defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "MURRENET_SEED")]
    pub seed: Option<u64>,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Gradient-check config (TOML); tiny defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "MURRENET_SEED")]
    pub seed: Option<u64>,
    /// Check every ablation rung A-F instead of the configured one.
    #[arg(long)]
    pub ladder: bool,
    /// Test fixture: corrupt a backward rule (only `gelu`).
    #[arg(long, hide = true)]
    pub corrupt_backward: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub cohort: Option<String>,
    pub cohort_fingerprint: Option<String>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
    pub metrics: serde_json::Value,
}

/// SHA-256 over `manifest.tsv` and every referenced feature file, in
/// manifest order, each prefixed by its byte length.
pub fn cohort_fingerprint(dir: &Path) -> Result<String, CliError> {
    let mut h = Sha256::new();
    let mut feed = |path: &Path| -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
        Ok(())
    };
    feed(&dir.join(MANIFEST))?;
    for row in read_manifest(dir).map_err(data_err)? {
        feed(&resolve(dir, &row.pathology_file))?;
        feed(&resolve(dir, &row.genomics_file))?;
    }
    Ok(hex::encode(h.finalize()))
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(one_line(format!("{}: {e}", path.display()))))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        create_dir(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        fs::write(&path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable output");
        text.push('\n');
        self.write(rel, text)
    }

    fn finish(self, mut manifest: RunManifest) -> Result<(), CliError> {
        manifest.outputs = self.files.clone();
        let mut text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
        text.push('\n');
        let path = self.dir.join(RUN_MANIFEST);
        fs::write(&path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable value")
}

/// Runs one command and returns the lines it prints on success.
pub fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Stratify(a) => stratify(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<Vec<String>, CliError> {
    let started = Instant::now();
    let mut spec: SyntheticSpec = read_toml(a.spec.as_deref())?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let cohort = make_synthetic_cohort(&spec).map_err(|e| classify(e, CliError::Config))?;
    let mut out = Outputs::new(&a.out)?;
    let written = write_cohort_dir(&cohort, &a.out).map_err(data_err)?;
    out.files = written
        .iter()
        .map(|p| p.strip_prefix(&a.out).unwrap_or(p).display().to_string())
        .collect();
    let fingerprint = cohort_fingerprint(&a.out)?;
    let events = cohort.n_events();
    out.finish(RunManifest {
        command: "synth".into(),
        config_path: a.spec.map(|p| p.display().to_string()),
        config: to_value(&spec),
        seed: Some(spec.seed),
        cohort: Some(a.out.display().to_string()),
        cohort_fingerprint: Some(fingerprint.clone()),
        outputs: Vec::new(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        metrics: serde_json::json!({ "n_patients": cohort.len(), "n_events": events }),
    })?;
    Ok(vec![format!(
        "wrote {} patients ({} events) to {} [fingerprint {}]",
        cohort.len(),
        events,
        a.out.display(),
        &fingerprint[..16]
    )])
}

/// Per-run metric summary; identical inputs give byte-identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean_c_index: f64,
    pub std_c_index: f64,
    pub fold_c_index: Vec<f64>,
    pub final_epoch_loss: Vec<Option<f64>>,
}

fn train(a: TrainArgs) -> Result<Vec<String>, CliError> {
    let started = Instant::now();
    let mut config: TrainConfig = read_toml(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| CliError::Config(one_line(e)))?;
    if a.jobs == 0 {
        return Err(CliError::Config("invalid value for '--jobs': must be >= 1".into()));
    }
    let cohort = read_cohort_dir(&a.cohort).map_err(data_err)?;
    let fingerprint = cohort_fingerprint(&a.cohort)?;
    let fit = run_cv(&cohort, &config, a.jobs).map_err(|e| match e {
        CoreError::Fold { .. } => CliError::Training(one_line(e)),
        other => classify(other, CliError::Training),
    })?;

    let mut out = Outputs::new(&a.out)?;
    out.json("fit_result.json", &fit)?;
    for (f, model) in fit.folds.iter().zip(&fit.models) {
        let ck = Checkpoint::from_model(
            model,
            &config,
            &f.bin_edges,
            FoldMetrics {
                fold: Some(f.fold),
                c_index: Some(f.c_index),
                epochs: f.epochs.clone(),
            },
        );
        out.write(&format!("checkpoints/fold_{}.json", f.fold), ck.to_json())?;
    }
    let summary = MetricSummary {
        mean_c_index: fit.mean_c_index,
        std_c_index: fit.std_c_index,
        fold_c_index: fit.folds.iter().map(|f| f.c_index).collect(),
        final_epoch_loss: fit.folds.iter().map(|f| f.epochs.last().map(|e| e.l_total)).collect(),
    };
    out.json("metrics.json", &summary)?;
    out.finish(RunManifest {
        command: "train".into(),
        config_path: a.config.map(|p| p.display().to_string()),
        config: to_value(&config),
        seed: Some(config.seed),
        cohort: Some(a.cohort.display().to_string()),
        cohort_fingerprint: Some(fingerprint),
        outputs: Vec::new(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        metrics: to_value(&summary),
    })?;
    Ok(vec![format!(
        "C-index {:.4} ± {:.4} over {} folds",
        fit.mean_c_index,
        fit.std_c_index,
        fit.folds.len()
    )])
}

struct Scored {
    checkpoint: Checkpoint,
    cohort: murrenet_core::data::Cohort,
    risks: Vec<f64>,
    fingerprint: String,
}

fn score(a: &ScoreArgs) -> Result<Scored, CliError> {
    let checkpoint = Checkpoint::load(&a.checkpoint).map_err(data_err)?;
    let model = checkpoint.to_model().map_err(|e| classify(e, CliError::Data))?;
    let cohort = read_cohort_dir(&a.cohort).map_err(data_err)?;
    let fingerprint = cohort_fingerprint(&a.cohort)?;
    let cohort = apply_bin_edges(cohort, &checkpoint.bin_edges);
    let risks = cohort
        .patients
        .iter()
        .map(|p| model.risk(p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(data_err)?;
    Ok(Scored {
        checkpoint,
        cohort,
        risks,
        fingerprint,
    })
}

fn risks_tsv(s: &Scored) -> String {
    let mut text = String::from("patient_id\trisk\tsurvival_time\tevent_observed\n");
    for (p, r) in s.cohort.patients.iter().zip(&s.risks) {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", p.patient_id, r, p.survival_time, u8::from(p.event_observed)));
    }
    text
}

fn score_manifest(command: &str, a: &ScoreArgs, s: &Scored, metrics: serde_json::Value, started: Instant) -> RunManifest {
    RunManifest {
        command: command.into(),
        config_path: Some(a.checkpoint.display().to_string()),
        config: to_value(&s.checkpoint.config),
        seed: Some(s.checkpoint.config.seed),
        cohort: Some(a.cohort.display().to_string()),
        cohort_fingerprint: Some(s.fingerprint.clone()),
        outputs: Vec::new(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        metrics,
    }
}

fn eval(a: ScoreArgs) -> Result<Vec<String>, CliError> {
    let started = Instant::now();
    let s = score(&a)?;
    let c = concordance_index(&s.risks, &s.cohort.times(), &s.cohort.events()).map_err(data_err)?;
    let metrics = serde_json::json!({ "c_index": c, "n_patients": s.cohort.len() });
    let mut out = Outputs::new(&a.out)?;
    out.write("risks.tsv", risks_tsv(&s))?;
    out.json("eval.json", &metrics)?;
    out.finish(score_manifest("eval", &a, &s, metrics, started))?;
    Ok(vec![format!("C-index {c:.4} on {} patients", s.cohort.len())])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifySummary {
    pub chi2: f64,
    pub p_value: f64,
    pub n_low: usize,
    pub n_high: usize,
}

fn stratify(a: ScoreArgs) -> Result<Vec<String>, CliError> {
    let started = Instant::now();
    let s = score(&a)?;
    let (low, high) = stratify_by_median(&s.risks).map_err(|e| classify(e, CliError::Data))?;
    let pick = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) {
        idx.iter()
            .map(|&i| (s.cohort.patients[i].survival_time, s.cohort.patients[i].event_observed))
            .unzip()
    };
    let (tl, el) = pick(&low);
    let (th, eh) = pick(&high);
    let km_low = kaplan_meier(&tl, &el).map_err(data_err)?;
    let km_high = kaplan_meier(&th, &eh).map_err(data_err)?;
    let lr = log_rank_test(&tl, &el, &th, &eh).map_err(|e| CliError::Degenerate(one_line(e)))?;
    let summary = StratifySummary {
        chi2: lr.chi2,
        p_value: lr.p_value,
        n_low: low.len(),
        n_high: high.len(),
    };
    let mut out = Outputs::new(&a.out)?;
    out.write("km.tsv", km_to_tsv(&[("low", &km_low), ("high", &km_high)]))?;
    out.write("risks.tsv", risks_tsv(&s))?;
    out.json("stratify.json", &summary)?;
    out.finish(score_manifest("stratify", &a, &s, to_value(&summary), started))?;
    Ok(vec![format!(
        "log-rank chi2 {:.4} p {:.4e} (low {}, high {})",
        lr.chi2,
        lr.p_value,
        low.len(),
        high.len()
    )])
}

fn gradcheck(a: GradcheckArgs) -> Result<Vec<String>, CliError> {
    let started = Instant::now();
    let mut config: GradCheckConfig = read_toml(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let fault = match a.corrupt_backward.as_deref() {
        None => None,
        Some("gelu") => Some(BackwardFault::Gelu),
        Some(other) => return Err(CliError::Config(format!("invalid value for '--corrupt-backward': {other}"))),
    };
    let rungs: Vec<(String, Ablation)> = if a.ladder {
        Ablation::LADDER
            .iter()
            .map(|&r| (r.to_string(), Ablation::ladder(r).expect("ladder rung")))
            .collect()
    } else {
        vec![("configured".to_string(), config.ablation)]
    };
    let mut lines = Vec::new();
    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
    for (label, ablation) in rungs {
        let c = GradCheckConfig {
            ablation,
            ..config.clone()
        };
        let r = gradient_check(&c, fault).map_err(|e| classify(e, CliError::Config))?;
        lines.push(format!(
            "gradcheck {label}: {} arrays, max rel err {:.3e} (worst {}) {}",
            r.entries.len(),
            r.max_rel_err,
            r.worst,
            if r.passed { "ok" } else { "FAIL" }
        ));
        reports.push((label, r));
    }
    if let Some(dir) = &a.out {
        let mut out = Outputs::new(dir)?;
        let by_rung: Vec<serde_json::Value> = reports
            .iter()
            .map(|(l, r)| serde_json::json!({ "rung": l, "report": r }))
            .collect();
        out.json("gradcheck.json", &by_rung)?;
        let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
        out.finish(RunManifest {
            command: "gradcheck".into(),
            config_path: a.config.as_ref().map(|p| p.display().to_string()),
            config: to_value(&config),
            seed: Some(config.seed),
            cohort: None,
            cohort_fingerprint: None,
            outputs: Vec::new(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
            metrics: serde_json::json!({ "max_rel_err": worst }),
        })?;
    }
    if let Some((label, r)) = reports.iter().find(|(_, r)| !r.passed) {
        eprintln!("{}", lines.join("\n"));
        return Err(CliError::GradCheck(format!(
            "{label}: worst parameter {} rel err {:.3e} >= {:e}",
            r.worst, r.max_rel_err, r.tolerance
        )));
    }
    Ok(lines)
}
