//! Command implementations behind the `cliplab` binary.
//!
//! Each command resolves its inputs into an [`Invocation`], validates it,
//! writes a [`RunManifest`] into the output directory and only then starts
//! computing. A manifest holds the fully resolved invocation, so
//! `cliplab replay` can re-run it from the manifest alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use cliplab_core::curation::{self, CorpusRecord, FilterReport, PipelineConfig};
use cliplab_core::gradcheck::{self, Fault, GradcheckConfig, GradcheckReport};
use cliplab_core::numerics;
use cliplab_core::objectives::Method;
use cliplab_core::policy::Checkpoint;
use cliplab_core::trainer::{self, StepMetrics, TrainConfig};

pub const MANIFEST_FORMAT: &str = "cliplab.manifest";
pub const SUMMARY_FORMAT: &str = "cliplab.compare_summary";
pub const CURVES_FORMAT: &str = "cliplab.curves";
pub const REPLAY_FORMAT: &str = "cliplab.replay_report";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Default output root when `--out` is not given.
pub const OUT_ENV: &str = "CLIPLAB_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("suite failure: {0}")]
    SuiteFailure(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::SuiteFailure(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// A `--section.key value` flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Override {
    pub path: String,
    pub value: String,
}

/// Pulls `--a.b value` and `--a.b=value` flags out of `args`.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<Override>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| invalid(format!("override --{name} needs a value")))?,
        };
        overrides.push(Override { path: name, value });
    }
    Ok((rest, overrides))
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_overrides(mut base: toml::Value, overrides: &[Override]) -> Result<toml::Value, CliError> {
    for o in overrides {
        let keys: Vec<&str> = o.path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(invalid(format!("malformed override path `{}`", o.path)));
        }
        let mut node = &mut base;
        for key in &keys[..keys.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| invalid(format!("`{}`: `{key}` is not a table", o.path)))?;
            node = table
                .entry(key.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| invalid(format!("`{}` does not name a table entry", o.path)))?;
        table.insert(keys[keys.len() - 1].to_string(), parse_literal(&o.value));
    }
    Ok(base)
}

/// Reads an optional TOML file, applies overrides and deserializes.
pub fn load_config<T: for<'de> Deserialize<'de>>(
    path: Option<&Path>,
    overrides: &[Override],
) -> Result<T, CliError> {
    let base = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| invalid(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map(toml::Value::Table)
                .map_err(|e| invalid(format!("config {}: {e}", p.display())))?
        }
        None => toml::Value::Table(toml::Table::new()),
    };
    apply_overrides(base, overrides)?
        .try_into()
        .map_err(|e: toml::de::Error| invalid(e.message().to_string()))
}

/// One column of a comparison grid: a name and the overrides that define it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<Override>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSpec {
    pub config: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Trailing moving-average window applied to median curves.
    pub smoothing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurateSpec {
    pub corpus: PathBuf,
    pub eval: PathBuf,
    pub oracle: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

/// A fully resolved command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    Gradcheck { config: GradcheckConfig },
    Train { config: TrainConfig, dry_run: bool },
    Compare(CompareSpec),
    Curate(CurateSpec),
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Gradcheck { .. } => "gradcheck",
            Invocation::Train { .. } => "train",
            Invocation::Compare(_) => "compare",
            Invocation::Curate(_) => "curate",
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self {
            Invocation::Gradcheck { config } => vec![config.seed],
            Invocation::Train { config, .. } => vec![config.seed],
            Invocation::Compare(spec) => spec.seeds.clone(),
            Invocation::Curate(spec) => vec![spec.pipeline.passrate.seed],
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match self {
            Invocation::Gradcheck { config } => {
                if config.instances == 0 || !(config.fd_step > 0.0) || !(config.tolerance > 0.0) {
                    return Err(invalid("gradcheck needs instances > 0 and positive step and tolerance"));
                }
            }
            Invocation::Train { config, .. } => config.validate().map_err(|e| invalid(e.to_string()))?,
            Invocation::Compare(spec) => {
                if spec.variants.len() < 2 {
                    return Err(invalid("compare needs at least 2 variants"));
                }
                if spec.seeds.len() < 2 {
                    return Err(invalid("compare needs at least 2 seeds"));
                }
                if spec.smoothing == 0 {
                    return Err(invalid("smoothing window must be ≥ 1"));
                }
                let mut names: Vec<&str> = spec.variants.iter().map(|v| v.name.as_str()).collect();
                names.sort_unstable();
                if names.windows(2).any(|w| w[0] == w[1]) {
                    return Err(invalid("variant names must be distinct"));
                }
                for v in &spec.variants {
                    variant_config(&spec.config, v)?
                        .validate()
                        .map_err(|e| invalid(format!("variant {}: {e}", v.name)))?;
                }
            }
            Invocation::Curate(spec) => {
                for p in [&spec.corpus, &spec.eval].into_iter().chain(spec.oracle.as_ref()) {
                    if !p.is_file() {
                        return Err(invalid(format!("cannot read {}", p.display())));
                    }
                }
                if !spec.pipeline.skip_passrate && spec.oracle.is_none() {
                    return Err(invalid("pass-rate filtering needs --oracle (or --skip-passrate)"));
                }
                if spec.pipeline.ngram == 0 || spec.pipeline.passrate.k == 0 {
                    return Err(invalid("--ngram and --k must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub invocation: Invocation,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<Override>,
    pub seeds: Vec<u64>,
    pub artifact_versions: BTreeMap<String, String>,
    pub output_dir: PathBuf,
}

pub fn artifact_versions() -> BTreeMap<String, String> {
    [
        ("cliplab", env!("CARGO_PKG_VERSION").to_string()),
        ("manifest", FORMAT_VERSION.to_string()),
        ("metrics", trainer::FORMAT_VERSION.to_string()),
        ("checkpoint", cliplab_core::policy::CHECKPOINT_VERSION.to_string()),
        ("gradcheck_report", gradcheck::REPORT_VERSION.to_string()),
        ("curation_report", curation::REPORT_VERSION.to_string()),
        ("compare_summary", FORMAT_VERSION.to_string()),
        ("rng", cliplab_core::numerics::RNG_ALGORITHM.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn read_manifest(path: &Path) -> anyhow::Result<RunManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    anyhow::ensure!(m.format == MANIFEST_FORMAT, "{} is not a run manifest", path.display());
    anyhow::ensure!(m.version == FORMAT_VERSION, "unsupported manifest version {}", m.version);
    Ok(m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string_pretty(value)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `explicit`, or the next unused `<root>/<command>-NNN` under the
/// `CLIPLAB_OUT` root (default `runs`).
pub fn resolve_out_dir(explicit: Option<&Path>, command: &str) -> Result<PathBuf, CliError> {
    if let Some(dir) = explicit {
        let occupied = dir.is_dir()
            && fs::read_dir(dir)
                .map_err(anyhow::Error::from)?
                .next()
                .is_some();
        if occupied {
            return Err(invalid(format!("output directory {} is not empty", dir.display())));
        }
        return Ok(dir.to_path_buf());
    }
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    (0..10_000)
        .map(|i| root.join(format!("{command}-{i:03}")))
        .find(|p| !p.exists())
        .ok_or_else(|| invalid(format!("no free run directory under {}", root.display())))
}

/// What a command produced.
#[derive(Debug, Clone)]
pub enum Outcome {
    Gradcheck(GradcheckReport),
    Train { steps: usize, dry_run: bool },
    Compare(CompareSummary),
    Curate(FilterReport),
    Replay(ReplayReport),
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub out_dir: PathBuf,
    pub outcome: Outcome,
}

/// Validates, writes the manifest, then executes.
pub fn run_invocation(
    invocation: Invocation,
    config_path: Option<PathBuf>,
    overrides: Vec<Override>,
    out: Option<&Path>,
) -> Result<RunResult, CliError> {
    invocation.validate()?;
    let out_dir = resolve_out_dir(out, invocation.name())?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: FORMAT_VERSION,
        seeds: invocation.seeds(),
        invocation,
        config_path,
        overrides,
        artifact_versions: artifact_versions(),
        output_dir: out_dir.clone(),
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    let outcome = execute(&manifest.invocation, &out_dir)?;
    Ok(RunResult { out_dir, outcome })
}

fn execute(inv: &Invocation, out: &Path) -> Result<Outcome, CliError> {
    match inv {
        Invocation::Gradcheck { config } => cmd_gradcheck(config, out).map(Outcome::Gradcheck),
        Invocation::Train { config, dry_run } => {
            if *dry_run {
                return Ok(Outcome::Train { steps: 0, dry_run: true });
            }
            let steps = cmd_train(config, out)?.len();
            Ok(Outcome::Train { steps, dry_run: false })
        }
        Invocation::Compare(spec) => cmd_compare(spec, out).map(Outcome::Compare),
        Invocation::Curate(spec) => cmd_curate(spec, out).map(Outcome::Curate),
    }
}

/// Runs every oracle suite and writes `report.json`. Any failing suite is a
/// suite failure.
pub fn cmd_gradcheck(cfg: &GradcheckConfig, out: &Path) -> Result<GradcheckReport, CliError> {
    let report = gradcheck::run_all(cfg).map_err(anyhow::Error::from)?;
    write_json(&out.join("report.json"), &report)?;
    if !report.passed {
        let failing: Vec<String> = report
            .suites
            .iter()
            .filter(|s| !s.passed)
            .map(|s| {
                let first = s.failures.first().map_or("", String::as_str);
                format!("{}: {first}", s.suite)
            })
            .collect();
        return Err(CliError::SuiteFailure(failing.join("; ")));
    }
    Ok(report)
}

pub fn cmd_train(cfg: &TrainConfig, out: &Path) -> Result<Vec<StepMetrics>, CliError> {
    let outcome = trainer::train(cfg, Some(out)).map_err(anyhow::Error::from)?;
    Ok(outcome.metrics)
}

pub fn variant_config(base: &TrainConfig, variant: &Variant) -> Result<TrainConfig, CliError> {
    let value = toml::Value::try_from(base).map_err(|e| CliError::Runtime(e.into()))?;
    apply_overrides(value, &variant.overrides)?
        .try_into()
        .map_err(|e: toml::de::Error| invalid(format!("variant {}: {}", variant.name, e.message())))
}

/// Metrics aggregated into `curves.csv`.
pub const CURVE_METRICS: [&str; 7] = [
    "mean_reward",
    "reward_variance",
    "solve_rate",
    "clip_lower_frac",
    "clip_upper_frac",
    "grad_norm",
    "mean_entropy",
];

fn metric(m: &StepMetrics, name: &str) -> f64 {
    match name {
        "mean_reward" => m.mean_reward,
        "reward_variance" => m.reward_variance,
        "solve_rate" => m.solve_rate,
        "clip_lower_frac" => m.clip_lower_frac,
        "clip_upper_frac" => m.clip_upper_frac,
        "grad_norm" => m.grad_norm,
        "mean_entropy" => m.mean_entropy,
        _ => f64::NAN,
    }
}

/// Per-step median and quartiles across seeds, plus the trailing moving
/// average of the median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub median: Vec<f64>,
    pub q1: Vec<f64>,
    pub q3: Vec<f64>,
    pub smoothed: Vec<f64>,
}

pub fn trailing_average(xs: &[f64], window: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

pub fn aggregate(runs: &[Vec<StepMetrics>], name: &str, window: usize) -> Curve {
    let steps = runs.iter().map(Vec::len).min().unwrap_or(0);
    let mut curve = Curve {
        median: Vec::with_capacity(steps),
        q1: Vec::with_capacity(steps),
        q3: Vec::with_capacity(steps),
        smoothed: Vec::new(),
    };
    for i in 0..steps {
        let xs: Vec<f64> = runs.iter().map(|r| metric(&r[i], name)).collect();
        curve.median.push(numerics::median(&xs));
        curve.q1.push(numerics::quantile(&xs, 0.25));
        curve.q3.push(numerics::quantile(&xs, 0.75));
    }
    curve.smoothed = trailing_average(&curve.median, window);
    curve
}

/// First step at which `curve` reaches `target`.
pub fn first_reach(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|&v| v >= target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub steps: usize,
    /// Last point of the smoothed median mean-reward curve.
    pub endpoint: f64,
    /// For every variant, the first step at which this variant's smoothed
    /// median curve reaches that variant's endpoint.
    pub reach: BTreeMap<String, Option<usize>>,
    /// Median over seeds of the mean within-step reward variance across
    /// the first quarter of training.
    pub early_reward_variance: f64,
    /// Median over seeds of the final step's mean reward.
    pub final_mean_reward: f64,
    pub aborted_updates: usize,
    /// Every seed produced one finite record per step, in order.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub format: String,
    pub version: u32,
    pub metric: String,
    pub smoothing: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
}

impl CompareSummary {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }
}

fn complete(metrics: &[StepMetrics], steps: usize) -> bool {
    metrics.len() == steps
        && metrics
            .iter()
            .enumerate()
            .all(|(i, m)| m.step == i && m.is_finite())
}

fn cell_name(variant: &str, seed: u64) -> String {
    let safe: String = variant
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}-seed{seed}")
}

/// Matched-seed grid: every variant runs with the same seeds, so cells that
/// share a seed see the same task pool, prompt order and rollout streams.
pub fn cmd_compare(spec: &CompareSpec, out: &Path) -> Result<CompareSummary, CliError> {
    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir).map_err(anyhow::Error::from)?;
    let mut jobs = Vec::new();
    for v in &spec.variants {
        let cfg = variant_config(&spec.config, v)?;
        for &seed in &spec.seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            jobs.push((v.name.clone(), seed, c));
        }
    }
    let results: Vec<anyhow::Result<Vec<StepMetrics>>> = jobs
        .par_iter()
        .map(|(name, seed, cfg)| {
            let cell = cell_name(name, *seed);
            let tmp = cells_dir.join(format!(".{cell}.partial"));
            if tmp.exists() {
                fs::remove_dir_all(&tmp)?;
            }
            let outcome = trainer::train(cfg, Some(&tmp))?;
            fs::rename(&tmp, cells_dir.join(&cell))?;
            Ok(outcome.metrics)
        })
        .collect();
    let mut by_variant: BTreeMap<&str, Vec<Vec<StepMetrics>>> = BTreeMap::new();
    for ((name, _, _), r) in jobs.iter().zip(results) {
        by_variant.entry(name).or_default().push(r.map_err(CliError::Runtime)?);
    }
    let steps = spec.config.total_steps;
    let mut curves_csv = format!("# {CURVES_FORMAT} v{FORMAT_VERSION}\nvariant,step,metric,median,q1,q3,smoothed_median\n");
    let mut reward_curves = Vec::new();
    for v in &spec.variants {
        let runs = &by_variant[v.name.as_str()];
        for name in CURVE_METRICS {
            let c = aggregate(runs, name, spec.smoothing);
            for i in 0..c.median.len() {
                curves_csv += &format!(
                    "{},{i},{name},{},{},{},{}\n",
                    v.name, c.median[i], c.q1[i], c.q3[i], c.smoothed[i]
                );
            }
            if name == "mean_reward" {
                reward_curves.push(c);
            }
        }
    }
    let endpoints: Vec<f64> = reward_curves
        .iter()
        .map(|c| c.smoothed.last().copied().unwrap_or(f64::NAN))
        .collect();
    let quarter = steps.div_ceil(4).max(1);
    let mut variants = Vec::new();
    for (vi, v) in spec.variants.iter().enumerate() {
        let runs = &by_variant[v.name.as_str()];
        let reach = spec
            .variants
            .iter()
            .zip(&endpoints)
            .map(|(other, &target)| (other.name.clone(), first_reach(&reward_curves[vi].smoothed, target)))
            .collect();
        let early: Vec<f64> = runs
            .iter()
            .map(|r| {
                let n = quarter.min(r.len()).max(1);
                r.iter().take(n).map(|m| m.reward_variance).sum::<f64>() / n as f64
            })
            .collect();
        let finals: Vec<f64> = runs.iter().filter_map(|r| r.last().map(|m| m.mean_reward)).collect();
        variants.push(VariantSummary {
            name: v.name.clone(),
            steps,
            endpoint: endpoints[vi],
            reach,
            early_reward_variance: numerics::median(&early),
            final_mean_reward: numerics::median(&finals),
            aborted_updates: runs.iter().flatten().map(|m| m.aborted_updates).sum(),
            complete: runs.iter().all(|r| complete(r, steps)),
        });
    }
    let tmp = out.join("curves.csv.tmp");
    fs::write(&tmp, curves_csv).map_err(anyhow::Error::from)?;
    fs::rename(&tmp, out.join("curves.csv")).map_err(anyhow::Error::from)?;
    let summary = CompareSummary {
        format: SUMMARY_FORMAT.into(),
        version: FORMAT_VERSION,
        metric: "mean_reward".into(),
        smoothing: spec.smoothing,
        seeds: spec.seeds.clone(),
        variants,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// dedup → n-gram → pass-rate. Writes `kept.jsonl`, `rejected.jsonl` and
/// `report.json`.
pub fn cmd_curate(spec: &CurateSpec, out: &Path) -> Result<FilterReport, CliError> {
    let corpus: Vec<CorpusRecord> = curation::read_jsonl(&spec.corpus).map_err(|e| invalid(e.to_string()))?;
    let eval = curation::read_eval_set(&spec.eval).map_err(|e| invalid(e.to_string()))?;
    let oracle = match &spec.oracle {
        Some(p) if !spec.pipeline.skip_passrate => {
            Some(Checkpoint::load(p).map_err(|e| invalid(e.to_string()))?.model)
        }
        _ => None,
    };
    let result = curation::run_pipeline(corpus, &eval, oracle.as_ref(), &spec.pipeline)
        .map_err(anyhow::Error::from)?;
    curation::write_jsonl(&out.join("kept.jsonl"), &result.kept).map_err(anyhow::Error::from)?;
    curation::write_jsonl(&out.join("rejected.jsonl"), &result.rejected).map_err(anyhow::Error::from)?;
    write_json(&out.join("report.json"), &result.report)?;
    Ok(result.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub format: String,
    pub version: u32,
    pub original: PathBuf,
    pub replay: PathBuf,
    pub files_compared: usize,
    pub missing: Vec<String>,
    pub mismatched: Vec<String>,
    pub identical: bool,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_path_buf());
        }
    }
    Ok(())
}

/// Byte-for-byte comparison of every artifact except the manifests.
pub fn compare_dirs(original: &Path, replay: &Path) -> anyhow::Result<ReplayReport> {
    let mut files = Vec::new();
    collect_files(original, original, &mut files)?;
    files.sort();
    let mut report = ReplayReport {
        format: REPLAY_FORMAT.into(),
        version: FORMAT_VERSION,
        original: original.to_path_buf(),
        replay: replay.to_path_buf(),
        files_compared: 0,
        missing: Vec::new(),
        mismatched: Vec::new(),
        identical: true,
    };
    for rel in files {
        if rel == Path::new(MANIFEST_FILE) || rel == Path::new("replay.json") {
            continue;
        }
        let name = rel.display().to_string();
        let theirs = replay.join(&rel);
        if !theirs.is_file() {
            report.missing.push(name);
            continue;
        }
        report.files_compared += 1;
        if fs::read(original.join(&rel))? != fs::read(&theirs)? {
            report.mismatched.push(name);
        }
    }
    report.identical = report.missing.is_empty() && report.mismatched.is_empty();
    Ok(report)
}

/// Re-runs a manifest's invocation into a fresh directory and compares every
/// artifact with the original run.
pub fn cmd_replay(manifest_path: &Path, out: Option<&Path>) -> Result<RunResult, CliError> {
    let manifest = read_manifest(manifest_path).map_err(|e| invalid(e.to_string()))?;
    let original = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest.output_dir.clone());
    let run = run_invocation(
        manifest.invocation.clone(),
        manifest.config_path.clone(),
        manifest.overrides.clone(),
        out,
    )?;
    let report = compare_dirs(&original, &run.out_dir)?;
    write_json(&run.out_dir.join("replay.json"), &report)?;
    if !report.identical {
        return Err(CliError::SuiteFailure(format!(
            "replay differs from {}: mismatched {:?}, missing {:?}",
            original.display(),
            report.mismatched,
            report.missing
        )));
    }
    Ok(RunResult {
        out_dir: run.out_dir,
        outcome: Outcome::Replay(report),
    })
}

#[derive(Debug, Parser)]
#[command(name = "cliplab", version, about = "Clipped policy-gradient objectives: checks, training and curation")]
#[command(after_help = "Any config field can be overridden with --section.key value.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to a fresh directory under $CLIPLAB_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference, case-table and identity suites for every method.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Inject a known defect (gppo_upper_sign_flip).
        #[arg(long)]
        fault: Option<String>,
    },
    /// One training run.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the manifest and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Matched-seed grid over methods or any config field.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// Comma-separated SFT mixing weights.
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<String>,
        /// Vary a config field: `section.key=v1,v2,...`.
        #[arg(long)]
        vary: Option<String>,
        /// Seeds as a list (`0,1,2`) or range (`0-9`).
        #[arg(long, default_value = "0-9")]
        seeds: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 10)]
        smoothing: usize,
    },
    /// Dedup, n-gram decontamination and pass-rate filtering.
    Curate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        /// Checkpoint of the policy used for pass-rate rollouts.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long, default_value_t = 9)]
        ngram: usize,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 16)]
        min_checks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        skip_passrate: bool,
    },
    /// Re-run a manifest and compare every artifact with the original.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || invalid(format!("cannot parse seeds `{s}`"));
    if let Some((a, b)) = s.split_once('-') {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse().map_err(|_| bad()))
        .collect()
}

fn parse_method(name: &str) -> Result<Method, CliError> {
    Method::parse(name).ok_or_else(|| {
        let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        invalid(format!("unknown method `{name}` (expected one of {})", known.join(", ")))
    })
}

fn push(overrides: &mut Vec<Override>, path: &str, value: String) {
    overrides.push(Override { path: path.into(), value });
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Entry point shared by the binary and the tests. `args` excludes the
/// program name.
pub fn run(args: Vec<String>) -> Result<RunResult, CliError> {
    let (rest, mut overrides) = split_overrides(args)?;
    let cli = Cli::try_parse_from(std::iter::once("cliplab".to_string()).chain(rest))
        .map_err(|e| match e.kind() {
            clap::error::ErrorKind::DisplayHelp
            | clap::error::ErrorKind::DisplayVersion
            | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => e.exit(),
            _ => invalid(e.to_string()),
        })?;
    match cli.command {
        Command::Gradcheck { common, seed, fault } => {
            if let Some(s) = seed {
                push(&mut overrides, "seed", s.to_string());
            }
            if let Some(f) = fault {
                Fault::parse(&f).ok_or_else(|| invalid(format!("unknown fault `{f}`")))?;
                push(&mut overrides, "fault", format!("\"{f}\""));
            }
            let config: GradcheckConfig = load_config(common.config.as_deref(), &overrides)?;
            run_invocation(Invocation::Gradcheck { config }, common.config.as_deref().map(absolute), overrides, common.out.as_deref())
        }
        Command::Train { common, method, steps, seed, dry_run } => {
            if let Some(m) = method {
                push(&mut overrides, "objective.method", format!("\"{}\"", parse_method(&m)?.name()));
            }
            if let Some(s) = steps {
                push(&mut overrides, "total_steps", s.to_string());
            }
            if let Some(s) = seed {
                push(&mut overrides, "seed", s.to_string());
            }
            let config: TrainConfig = load_config(common.config.as_deref(), &overrides)?;
            run_invocation(
                Invocation::Train { config, dry_run },
                common.config.as_deref().map(absolute),
                overrides,
                common.out.as_deref(),
            )
        }
        Command::Compare { common, methods, alphas, vary, seeds, steps, smoothing } => {
            if let Some(s) = steps {
                push(&mut overrides, "total_steps", s.to_string());
            }
            let config: TrainConfig = load_config(common.config.as_deref(), &overrides)?;
            let axes = usize::from(!methods.is_empty()) + usize::from(!alphas.is_empty()) + usize::from(vary.is_some());
            if axes != 1 {
                return Err(invalid("give exactly one of --methods, --alphas or --vary"));
            }
            let variants = if !methods.is_empty() {
                methods
                    .iter()
                    .map(|m| {
                        let m = parse_method(m)?;
                        Ok(Variant {
                            name: m.name().into(),
                            overrides: vec![Override { path: "objective.method".into(), value: format!("\"{}\"", m.name()) }],
                        })
                    })
                    .collect::<Result<Vec<_>, CliError>>()?
            } else {
                let (path, values) = match &vary {
                    Some(spec) => {
                        let (p, vs) = spec
                            .split_once('=')
                            .ok_or_else(|| invalid("--vary expects section.key=v1,v2,..."))?;
                        (p.to_string(), vs.split(',').map(str::to_string).collect::<Vec<_>>())
                    }
                    None => ("update.alpha".to_string(), alphas.clone()),
                };
                values
                    .into_iter()
                    .map(|v| Variant {
                        name: format!("{path}={v}"),
                        overrides: vec![Override { path: path.clone(), value: v }],
                    })
                    .collect()
            };
            let spec = CompareSpec { config, variants, seeds: parse_seeds(&seeds)?, smoothing };
            run_invocation(Invocation::Compare(spec), common.config.as_deref().map(absolute), overrides, common.out.as_deref())
        }
        Command::Curate { out, corpus, eval, oracle, ngram, k, threshold, min_checks, seed, skip_passrate } => {
            if !overrides.is_empty() {
                return Err(invalid("curate takes no --section.key overrides"));
            }
            let mut pipeline = PipelineConfig { ngram, skip_passrate, ..PipelineConfig::default() };
            pipeline.passrate.k = k;
            pipeline.passrate.threshold = threshold;
            pipeline.passrate.min_checks = min_checks;
            pipeline.passrate.seed = seed;
            let spec = CurateSpec {
                corpus: absolute(&corpus),
                eval: absolute(&eval),
                oracle: oracle.as_deref().map(absolute),
                pipeline,
            };
            run_invocation(Invocation::Curate(spec), None, Vec::new(), out.as_deref())
        }
        Command::Replay { manifest, out } => {
            if !overrides.is_empty() {
                return Err(invalid("replay takes no overrides"));
            }
            cmd_replay(&manifest, out.as_deref())
        }
    }
}

/// Human-readable summary of a finished command.
pub fn render(result: &RunResult) -> String {
    let dir = result.out_dir.display();
    match &result.outcome {
        Outcome::Gradcheck(r) => {
            let mut s = String::from("method          max rel. error\n");
            for m in &r.methods {
                s += &format!("{:<15} {:.3e}\n", m.method.name(), m.max_rel_error);
            }
            for suite in r.suites.iter().filter(|s| s.method.is_none()) {
                s += &format!("{:<24} {} ({} cases)\n", suite.suite, if suite.passed { "ok" } else { "FAILED" }, suite.cases);
            }
            s + &format!("report: {dir}/report.json")
        }
        Outcome::Train { dry_run: true, .. } => format!("dry run: manifest written to {dir}/{MANIFEST_FILE}"),
        Outcome::Train { steps, .. } => format!("{steps} steps; metrics in {dir}/metrics.jsonl"),
        Outcome::Compare(summary) => {
            let mut s = String::from("variant                      endpoint  early var  complete\n");
            for v in &summary.variants {
                s += &format!("{:<28} {:>8.4}  {:>9.4}  {}\n", v.name, v.endpoint, v.early_reward_variance, v.complete);
            }
            s + &format!("curves: {dir}/curves.csv")
        }
        Outcome::Curate(r) => {
            let mut s = format!("input {} → output {}\n", r.input, r.output);
            for st in &r.stages {
                s += &format!("{:<16} in {:>6}  kept {:>6}  removed {:>6}\n", st.name, st.input, st.kept, st.removed);
            }
            s + &format!("kept records: {dir}/kept.jsonl")
        }
        Outcome::Replay(r) => format!("replay identical: {} files compared ({dir})", r.files_compared),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, ov) = split_overrides(args("train --update.lr 0.2 --steps 3 --task.kind=multi_check_code")).unwrap();
        assert_eq!(rest, args("train --steps 3"));
        assert_eq!(ov[0], Override { path: "update.lr".into(), value: "0.2".into() });
        assert_eq!(ov[1].value, "multi_check_code");
        assert!(split_overrides(args("train --update.lr")).is_err());
    }

    #[test]
    fn override_values_parse_as_toml_or_string() {
        let ov = vec![
            Override { path: "update.lr".into(), value: "0.2".into() },
            Override { path: "task.kind".into(), value: "multi_check_code".into() },
            Override { path: "update.zero_adv_filter".into(), value: "true".into() },
        ];
        let cfg: TrainConfig = load_config(None, &ov).unwrap();
        assert_eq!(cfg.update.lr, Some(0.2));
        assert!(cfg.update.zero_adv_filter);
        assert_eq!(cfg.task.kind, cliplab_core::TaskKind::MultiCheckCode);
    }

    #[test]
    fn unknown_override_is_a_validation_error() {
        let ov = vec![Override { path: "update.lrr".into(), value: "0.2".into() }];
        let err = load_config::<TrainConfig>(None, &ov).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn seeds_parse() {
        assert_eq!(parse_seeds("0-3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_seeds("5,7").unwrap(), vec![5, 7]);
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn trailing_average_and_reach() {
        let s = trailing_average(&[0.0, 2.0, 4.0, 6.0], 2);
        assert_eq!(s, vec![0.0, 1.0, 3.0, 5.0]);
        assert_eq!(first_reach(&s, 3.0), Some(2));
        assert_eq!(first_reach(&s, 9.0), None);
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            CliError::Validation(String::new()).exit_code(),
            CliError::SuiteFailure(String::new()).exit_code(),
            CliError::Runtime(anyhow::anyhow!("x")).exit_code(),
        ];
        assert_eq!(codes, [2, 3, 1]);
    }
}
