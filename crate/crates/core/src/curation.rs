//! RL prompt curation: exact deduplication, n-gram decontamination against
//! an evaluation set, and pass-rate filtering with rollouts from an oracle
//! policy.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{self, EnvError, TaskKind, TaskSpec, Token};
use crate::numerics::SeededRng;
use crate::policy::{sample_trajectory, PolicyError, PolicyModel};

pub const REPORT_FORMAT: &str = "cliplab.curation_report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One candidate RL prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    #[serde(flatten)]
    pub task: TaskSpec,
    #[serde(default)]
    pub source: String,
}

impl CorpusRecord {
    pub fn id(&self) -> u64 {
        self.task.id
    }

    pub fn prompt(&self) -> &[Token] {
        &self.task.prompt_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    Duplicate { first_id: u64 },
    Contaminated { window_start: usize },
    UnderTested { check_count: usize, min_checks: usize },
    LowPassRate { fraction: f64 },
    /// Pass fraction exactly at the threshold; rejected under the strict rule.
    PassRateTie { fraction: f64 },
    VerifierFailure { message: String },
}

impl RejectReason {
    pub fn label(&self) -> &'static str {
        match self {
            RejectReason::Duplicate { .. } => "duplicate",
            RejectReason::Contaminated { .. } => "contaminated",
            RejectReason::UnderTested { .. } => "under_tested",
            RejectReason::LowPassRate { .. } => "low_pass_rate",
            RejectReason::PassRateTie { .. } => "pass_rate_tie",
            RejectReason::VerifierFailure { .. } => "verifier_failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub record: CorpusRecord,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterOutcome {
    pub kept: Vec<CorpusRecord>,
    pub rejected: Vec<Rejected>,
}

impl FilterOutcome {
    pub fn removed(&self) -> usize {
        self.rejected.len()
    }
}

/// Keeps the first occurrence of each prompt token sequence.
pub fn exact_dedup(corpus: Vec<CorpusRecord>) -> FilterOutcome {
    let mut seen: std::collections::HashMap<Vec<Token>, u64> = std::collections::HashMap::new();
    let mut out = FilterOutcome::default();
    for rec in corpus {
        match seen.get(rec.prompt()) {
            Some(&first_id) => out.rejected.push(Rejected {
                record: rec,
                reason: RejectReason::Duplicate { first_id },
            }),
            None => {
                seen.insert(rec.prompt().to_vec(), rec.id());
                out.kept.push(rec);
            }
        }
    }
    out
}

/// Rejects any record whose prompt shares a contiguous `n`-token window with
/// any evaluation sequence.
pub fn ngram_filter(
    corpus: Vec<CorpusRecord>,
    eval_set: &[Vec<Token>],
    n: usize,
) -> Result<FilterOutcome, CurationError> {
    if n == 0 {
        return Err(CurationError::InvalidInput("n-gram size must be ≥ 1".into()));
    }
    let index: HashSet<&[Token]> = eval_set.iter().flat_map(|s| s.windows(n)).collect();
    let mut out = FilterOutcome::default();
    for rec in corpus {
        let hit = rec.prompt().windows(n).position(|w| index.contains(w));
        match hit {
            Some(window_start) => out.rejected.push(Rejected {
                record: rec,
                reason: RejectReason::Contaminated { window_start },
            }),
            None => out.kept.push(rec),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PassrateConfig {
    pub k: usize,
    pub threshold: f64,
    pub min_checks: usize,
    pub seed: u64,
    pub temperature: f64,
    /// Response budget beyond the answer length.
    pub max_len_slack: usize,
}

impl Default for PassrateConfig {
    fn default() -> Self {
        Self {
            k: 16,
            threshold: 0.5,
            min_checks: 16,
            seed: 0,
            temperature: 1.0,
            max_len_slack: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassStat {
    pub id: u64,
    pub passes: usize,
    pub k: usize,
    pub fraction: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PassrateOutcome {
    pub filter: FilterOutcome,
    pub stats: Vec<PassStat>,
    pub ties: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassDecision {
    Keep,
    Tie,
    Low,
}

/// Strict rule: keep iff `passes / k > threshold`.
pub fn pass_decision(passes: usize, k: usize, threshold: f64) -> PassDecision {
    let fraction = passes as f64 / k as f64;
    if fraction > threshold {
        PassDecision::Keep
    } else if fraction == threshold {
        PassDecision::Tie
    } else {
        PassDecision::Low
    }
}

enum RecordVerdict {
    Skip(RejectReason),
    Scored { passes: usize },
}

fn rollout_record(
    rec: &CorpusRecord,
    oracle: &PolicyModel,
    cfg: &PassrateConfig,
) -> Result<RecordVerdict, CurationError> {
    if rec.task.kind == TaskKind::MultiCheckCode && rec.task.check_count < cfg.min_checks {
        return Ok(RecordVerdict::Skip(RejectReason::UnderTested {
            check_count: rec.task.check_count,
            min_checks: cfg.min_checks,
        }));
    }
    if let Err(e) = rec.task.validate() {
        return Ok(RecordVerdict::Skip(verifier_failure(rec, e)));
    }
    let mut rng = SeededRng::new(cfg.seed, rec.id());
    let max_len = rec.task.answer_len() + cfg.max_len_slack;
    let mut passes = 0;
    for _ in 0..cfg.k {
        let traj = sample_trajectory(oracle, &rec.task, max_len, cfg.temperature, &mut rng)?;
        match envs::fully_passes(&traj.tokens, &rec.task) {
            Ok(true) => passes += 1,
            Ok(false) => {}
            Err(e) => return Ok(RecordVerdict::Skip(verifier_failure(rec, e))),
        }
    }
    Ok(RecordVerdict::Scored { passes })
}

fn verifier_failure(rec: &CorpusRecord, e: EnvError) -> RejectReason {
    log::warn!("record {}: verifier failure: {e}", rec.id());
    RejectReason::VerifierFailure {
        message: e.to_string(),
    }
}

/// Rejects under-tested code records, then keeps a record iff the fraction
/// of its `k` oracle rollouts that fully pass is strictly above `threshold`.
///
/// Each record samples from its own stream `(seed, record id)`, so results
/// do not depend on scheduling.
pub fn passrate_filter(
    corpus: Vec<CorpusRecord>,
    oracle: &PolicyModel,
    cfg: &PassrateConfig,
) -> Result<PassrateOutcome, CurationError> {
    if cfg.k == 0 {
        return Err(CurationError::InvalidInput("k must be ≥ 1".into()));
    }
    let verdicts = corpus
        .par_iter()
        .map(|rec| rollout_record(rec, oracle, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = PassrateOutcome::default();
    for (rec, verdict) in corpus.into_iter().zip(verdicts) {
        match verdict {
            RecordVerdict::Skip(reason) => out.filter.rejected.push(Rejected { record: rec, reason }),
            RecordVerdict::Scored { passes } => {
                let fraction = passes as f64 / cfg.k as f64;
                let decision = pass_decision(passes, cfg.k, cfg.threshold);
                out.stats.push(PassStat {
                    id: rec.id(),
                    passes,
                    k: cfg.k,
                    fraction,
                    kept: decision == PassDecision::Keep,
                });
                match decision {
                    PassDecision::Keep => out.filter.kept.push(rec),
                    PassDecision::Tie => {
                        out.ties += 1;
                        out.filter.rejected.push(Rejected {
                            record: rec,
                            reason: RejectReason::PassRateTie { fraction },
                        });
                    }
                    PassDecision::Low => out.filter.rejected.push(Rejected {
                        record: rec,
                        reason: RejectReason::LowPassRate { fraction },
                    }),
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub input: usize,
    pub kept: usize,
    pub removed: usize,
    pub reasons: BTreeMap<String, usize>,
}

impl StageReport {
    fn from_outcome(name: &str, input: usize, out: &FilterOutcome) -> Self {
        let mut reasons = BTreeMap::new();
        for r in &out.rejected {
            *reasons.entry(r.reason.label().to_string()).or_insert(0) += 1;
        }
        Self {
            name: name.into(),
            input,
            kept: out.kept.len(),
            removed: out.removed(),
            reasons,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub format: String,
    pub version: u32,
    pub input: usize,
    pub output: usize,
    pub stages: Vec<StageReport>,
    pub pass_rate_ties: usize,
    #[serde(default)]
    pub pass_stats: Vec<PassStat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ngram: usize,
    pub passrate: PassrateConfig,
    pub skip_passrate: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ngram: 9,
            passrate: PassrateConfig::default(),
            skip_passrate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub kept: Vec<CorpusRecord>,
    pub rejected: Vec<Rejected>,
    pub report: FilterReport,
}

/// dedup → n-gram → pass-rate, in that order.
pub fn run_pipeline(
    corpus: Vec<CorpusRecord>,
    eval_set: &[Vec<Token>],
    oracle: Option<&PolicyModel>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, CurationError> {
    let input = corpus.len();
    let mut stages = Vec::new();
    let mut rejected = Vec::new();

    let dedup = exact_dedup(corpus);
    stages.push(StageReport::from_outcome("exact_dedup", input, &dedup));
    rejected.extend(dedup.rejected);

    let n_in = dedup.kept.len();
    let ngram = ngram_filter(dedup.kept, eval_set, cfg.ngram)?;
    stages.push(StageReport::from_outcome("ngram_filter", n_in, &ngram));
    rejected.extend(ngram.rejected);

    let mut kept = ngram.kept;
    let mut ties = 0;
    let mut pass_stats = Vec::new();
    if !cfg.skip_passrate {
        let oracle = oracle.ok_or_else(|| {
            CurationError::InvalidInput("pass-rate filtering needs an oracle policy".into())
        })?;
        let p_in = kept.len();
        let pr = passrate_filter(kept, oracle, &cfg.passrate)?;
        stages.push(StageReport::from_outcome("passrate_filter", p_in, &pr.filter));
        rejected.extend(pr.filter.rejected);
        kept = pr.filter.kept;
        ties = pr.ties;
        pass_stats = pr.stats;
    }
    let report = FilterReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        input,
        output: kept.len(),
        stages,
        pass_rate_ties: ties,
        pass_stats,
    };
    Ok(PipelineOutcome {
        kept,
        rejected,
        report,
    })
}

/// Reads line-delimited JSON values, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CurationError> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| CurationError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Writes one JSON value per line, via a temporary file and rename.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CurationError> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        for item in items {
            serde_json::to_writer(&mut f, item).map_err(std::io::Error::other)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Evaluation items are stored either as bare token arrays or as records
/// with a `prompt_tokens` field.
pub fn read_eval_set(path: &Path) -> Result<Vec<Vec<Token>>, CurationError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum EvalItem {
        Tokens(Vec<Token>),
        Record { prompt_tokens: Vec<Token> },
    }
    Ok(read_jsonl::<EvalItem>(path)?
        .into_iter()
        .map(|item| match item {
            EvalItem::Tokens(t) => t,
            EvalItem::Record { prompt_tokens } => prompt_tokens,
        })
        .collect())
}
