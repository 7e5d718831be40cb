//! The RL loop: group rollouts, minibatched off-policy updates, optional SFT
//! mixing and zero-advantage filtering, with per-step metrics.
//!
//! Each step draws `global_batch_prompts` prompts from a fixed task pool,
//! samples a group per prompt with the current model (freezing `logp_old`),
//! then walks the prompts in minibatches for `epochs_per_rollout` passes,
//! taking one optimizer step per minibatch. From the second minibatch on the
//! model has moved away from the behaviour policy, so ratios drift from 1
//! and the clipping cases become active.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{self, Difficulty, EnvError, RewardMode, TaskKind, TaskSpec, VOCAB_SIZE};
use crate::numerics::{self, SeededRng};
use crate::objectives::{
    self, ClipCase, ClipConfig, Group, ObjectiveError, TokenGradRecord, TokenLocation,
};
use crate::policy::{
    self, apply_update, Checkpoint, OptimizerKind, OptimizerState, PolicyError, PolicyModel,
    Trajectory,
};

pub const METRICS_FORMAT: &str = "cliplab.metrics";
pub const TOKENS_FORMAT: &str = "cliplab.token_records";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKindName {
    Tabular,
    Feedforward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKindName,
    pub context_window: usize,
    pub hidden: usize,
    pub rows: usize,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKindName::Feedforward,
            context_window: 8,
            hidden: 64,
            rows: 4096,
            init_scale: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub group_size: usize,
    pub global_batch_prompts: usize,
    pub max_len: usize,
    pub temperature: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            global_batch_prompts: 32,
            max_len: 8,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateConfig {
    pub minibatch_prompts: usize,
    pub epochs_per_rollout: usize,
    /// Defaults to 0.05 for tabular and 0.01 for feedforward models.
    pub lr: Option<f64>,
    pub optimizer: OptimizerKind,
    pub alpha: f64,
    pub zero_adv_filter: bool,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            minibatch_prompts: 8,
            epochs_per_rollout: 1,
            lr: None,
            optimizer: OptimizerKind::Sgd,
            alpha: 0.1,
            zero_adv_filter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub difficulty: Difficulty,
    pub pool_size: usize,
    pub require_think_tags: bool,
    pub reward_mode: RewardMode,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::BinaryMath,
            difficulty: Difficulty::Easy,
            pool_size: 256,
            require_think_tags: false,
            reward_mode: RewardMode::Binary,
        }
    }
}

/// Supervised steps on reference responses before RL starts, standing in
/// for the SFT checkpoint RL is usually launched from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmstartConfig {
    pub sft_steps: usize,
    pub lr: f64,
}

impl Default for WarmstartConfig {
    fn default() -> Self {
        Self {
            sft_steps: 0,
            lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_steps: usize,
    /// Write a checkpoint every this many steps; 0 writes only the initial
    /// and final ones.
    pub checkpoint_every: usize,
    /// Stream per-token gradient records to `tokens.jsonl`.
    pub token_records: bool,
    pub model: ModelConfig,
    pub objective: ClipConfig,
    pub rollout: RolloutConfig,
    pub update: UpdateConfig,
    pub task: TaskConfig,
    pub warmstart: WarmstartConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 200,
            checkpoint_every: 0,
            token_records: false,
            model: ModelConfig::default(),
            objective: ClipConfig::default(),
            rollout: RolloutConfig::default(),
            update: UpdateConfig::default(),
            task: TaskConfig::default(),
            warmstart: WarmstartConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.update.lr.unwrap_or(match self.model.kind {
            ModelKindName::Tabular => 0.05,
            ModelKindName::Feedforward => 0.01,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let r = &self.rollout;
        let u = &self.update;
        if r.group_size < 2 {
            return bad("rollout.group_size must be ≥ 2");
        }
        if r.global_batch_prompts == 0 || u.minibatch_prompts == 0 {
            return bad("batch sizes must be positive");
        }
        if !r.global_batch_prompts.is_multiple_of(u.minibatch_prompts) {
            return bad("update.minibatch_prompts must divide rollout.global_batch_prompts");
        }
        if self.task.pool_size < r.global_batch_prompts {
            return bad("task.pool_size must be at least rollout.global_batch_prompts");
        }
        if r.max_len == 0 {
            return bad("rollout.max_len must be ≥ 1");
        }
        if !(r.temperature > 0.0 && r.temperature.is_finite()) {
            return bad("rollout.temperature must be positive");
        }
        if u.epochs_per_rollout == 0 {
            return bad("update.epochs_per_rollout must be ≥ 1");
        }
        if !(u.alpha >= 0.0 && u.alpha.is_finite()) {
            return bad("update.alpha must be ≥ 0");
        }
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return bad("update.lr must be positive");
        }
        if !(self.warmstart.lr > 0.0) {
            return bad("warmstart.lr must be positive");
        }
        let m = &self.model;
        if m.context_window == 0 || m.hidden == 0 || m.rows == 0 {
            return bad("model sizes must be positive");
        }
        if !(m.init_scale >= 0.0) {
            return bad("model.init_scale must be ≥ 0");
        }
        if self.task.kind == TaskKind::BinaryMath && self.task.reward_mode != RewardMode::Binary {
            return bad("binary_math tasks use reward_mode = binary");
        }
        self.objective.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Purposes that partition the RNG stream space of one seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Stream {
    ModelInit = 1,
    TaskPool = 2,
    PromptSelect = 3,
    Rollout = 4,
    Warmstart = 5,
}

fn stream_id(purpose: Stream, step: usize, index: usize) -> u64 {
    ((purpose as u64) << 56) | ((step as u64) << 24) | index as u64
}

pub fn init_model(cfg: &TrainConfig) -> Result<PolicyModel, TrainError> {
    let m = &cfg.model;
    Ok(match m.kind {
        ModelKindName::Tabular => PolicyModel::tabular(VOCAB_SIZE, m.context_window, m.rows)?,
        ModelKindName::Feedforward => {
            let mut rng = SeededRng::new(cfg.seed, stream_id(Stream::ModelInit, 0, 0));
            PolicyModel::feedforward(VOCAB_SIZE, m.context_window, m.hidden, m.init_scale, &mut rng)?
        }
    })
}

pub fn task_pool(cfg: &TrainConfig) -> Vec<TaskSpec> {
    let mut rng = SeededRng::new(cfg.seed, stream_id(Stream::TaskPool, 0, 0));
    envs::gen_task_set(
        &mut rng,
        cfg.task.pool_size,
        cfg.task.kind,
        cfg.task.difficulty,
        cfg.task.require_think_tags,
    )
}

fn select_prompts(pool: &[TaskSpec], count: usize, rng: &mut SeededRng) -> Vec<TaskSpec> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    // partial Fisher-Yates: the first `count` slots are a uniform sample
    for i in 0..count {
        let j = i + rng.below(idx.len() - i);
        idx.swap(i, j);
    }
    idx[..count].iter().map(|&i| pool[i].clone()).collect()
}

/// Prompts used at `step`.
pub fn step_prompts(cfg: &TrainConfig, pool: &[TaskSpec], step: usize) -> Vec<TaskSpec> {
    let mut rng = SeededRng::new(cfg.seed, stream_id(Stream::PromptSelect, step, 0));
    select_prompts(pool, cfg.rollout.global_batch_prompts, &mut rng)
}

/// One group per prompt, each prompt sampling from its own stream.
pub fn rollout_phase(
    model: &PolicyModel,
    prompts: &[TaskSpec],
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<Group>, TrainError> {
    if prompts.is_empty() {
        return Err(TrainError::Config("rollout needs at least one prompt".into()));
    }
    let r = &cfg.rollout;
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let mut rng = SeededRng::new(cfg.seed, stream_id(Stream::Rollout, step, i));
            let mut group =
                policy::sample_group(model, task, r.group_size, r.max_len, r.temperature, &mut rng)?;
            let rewards = group
                .trajectories
                .iter()
                .map(|t| envs::verify(&t.tokens, task, cfg.task.reward_mode).map(|o| o.value))
                .collect::<Result<Vec<_>, _>>()?;
            group.set_rewards(&rewards);
            Ok(group)
        })
        .collect()
}

/// Diagnostics for one optimizer step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub epoch: usize,
    pub minibatch: usize,
    pub loss: f64,
    pub rl_loss: f64,
    pub sft_loss: f64,
    pub grad_norm: f64,
    pub tokens: usize,
    pub lower_clipped: usize,
    pub upper_clipped: usize,
    pub entropy_sum: f64,
    pub max_ratio: f64,
    pub min_ratio: f64,
    pub dropped_groups: usize,
    /// Non-finite loss or gradient; the model was left unchanged.
    pub aborted: bool,
    /// Every group in the minibatch was filtered out.
    pub skipped: bool,
}

/// One exported token-gradient record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRecordLine {
    pub step: usize,
    pub epoch: usize,
    pub minibatch: usize,
    pub prompt_id: u64,
    pub trajectory: usize,
    pub token: usize,
    pub ratio: f64,
    pub advantage: f64,
    pub coefficient: f64,
    pub case: ClipCase,
    pub entropy: f64,
}

impl TokenRecordLine {
    fn new(step: usize, epoch: usize, minibatch: usize, loc: &TokenLocation, r: &TokenGradRecord) -> Self {
        Self {
            step,
            epoch,
            minibatch,
            prompt_id: loc.prompt_id,
            trajectory: loc.trajectory,
            token: loc.token,
            ratio: r.ratio,
            advantage: r.advantage,
            coefficient: r.coefficient,
            case: r.case,
            entropy: r.entropy,
        }
    }
}

/// Loss and gradient for one minibatch, before the optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct MinibatchGradient {
    pub loss: f64,
    pub rl_loss: f64,
    pub sft_loss: f64,
    pub grad: Vec<f64>,
    pub records: Vec<(TokenLocation, TokenGradRecord)>,
}

/// RL surrogate plus `α ·` SFT loss over the positive-advantage responses.
pub fn minibatch_gradient(
    batch: &[Group],
    model: &PolicyModel,
    cfg: &TrainConfig,
) -> Result<MinibatchGradient, ObjectiveError> {
    let rl = objectives::surrogate_batch(batch, model, &cfg.objective)?;
    let mut total = rl.loss_grad();
    let mut sft_value = 0.0;
    if cfg.update.alpha > 0.0 {
        let positives: Vec<&Trajectory> = batch
            .iter()
            .flat_map(|g| g.trajectories.iter().zip(&g.advantages))
            .filter(|(_, &a)| a > 0.0)
            .map(|(t, _)| t)
            .collect();
        let sft = objectives::sft_loss(&positives, model)?;
        sft_value = sft.loss;
        total = objectives::combined_loss(&total, &sft.loss_grad(), cfg.update.alpha)?;
    }
    Ok(MinibatchGradient {
        loss: total.value,
        rl_loss: rl.loss,
        sft_loss: sft_value,
        grad: total.grad,
        records: rl.records,
    })
}

/// Minibatched updates over one rollout batch.
///
/// Prompts are partitioned into minibatches first; zero-advantage filtering
/// (when enabled) then applies within each minibatch.
pub fn update_phase(
    groups: &[Group],
    model: &mut PolicyModel,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    step: usize,
    mut token_sink: Option<&mut Vec<TokenRecordLine>>,
) -> Result<Vec<UpdateMetrics>, TrainError> {
    let lr = cfg.lr();
    let mb = cfg.update.minibatch_prompts;
    let mut out = Vec::new();
    for epoch in 0..cfg.update.epochs_per_rollout {
        for (mi, chunk) in groups.chunks(mb).enumerate() {
            let mut m = UpdateMetrics {
                epoch,
                minibatch: mi,
                ..Default::default()
            };
            let (batch, dropped) = if cfg.update.zero_adv_filter {
                objectives::filter_zero_advantage(chunk.to_vec())
            } else {
                (chunk.to_vec(), 0)
            };
            m.dropped_groups = dropped;
            if batch.is_empty() {
                m.skipped = true;
                out.push(m);
                continue;
            }
            let grad = match minibatch_gradient(&batch, model, cfg) {
                Ok(g) => g,
                Err(ObjectiveError::RatioOverflow { log_ratio, location }) => {
                    log::warn!("step {step}: ratio overflow ({log_ratio}) at {location:?}; update aborted");
                    m.aborted = true;
                    out.push(m);
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            m.loss = grad.loss;
            m.rl_loss = grad.rl_loss;
            m.sft_loss = grad.sft_loss;
            m.grad_norm = numerics::norm2(&grad.grad);
            m.tokens = grad.records.len();
            m.min_ratio = f64::INFINITY;
            for (_, r) in &grad.records {
                match r.case {
                    ClipCase::Lower => m.lower_clipped += 1,
                    ClipCase::Upper => m.upper_clipped += 1,
                    ClipCase::Interior => {}
                }
                m.entropy_sum += r.entropy;
                m.max_ratio = m.max_ratio.max(r.ratio);
                m.min_ratio = m.min_ratio.min(r.ratio);
            }
            if !m.loss.is_finite() || !m.grad_norm.is_finite() {
                log::warn!("step {step}: non-finite loss or gradient; update aborted");
                m.aborted = true;
                out.push(m);
                continue;
            }
            if let Some(sink) = token_sink.as_deref_mut() {
                sink.extend(
                    grad.records
                        .iter()
                        .map(|(loc, r)| TokenRecordLine::new(step, epoch, mi, loc, r)),
                );
            }
            match apply_update(model, &grad.grad, opt, lr) {
                Ok(()) => {}
                Err(PolicyError::UpdateRejected(msg)) => {
                    log::warn!("step {step}: {msg}");
                    m.aborted = true;
                }
                Err(e) => return Err(e.into()),
            }
            out.push(m);
        }
    }
    Ok(out)
}

/// Per-step summary written to `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub rl_loss: f64,
    pub sft_loss: f64,
    pub mean_reward: f64,
    pub reward_variance: f64,
    /// Fraction of responses that fully solve their task.
    pub solve_rate: f64,
    pub grad_norm: f64,
    pub mean_entropy: f64,
    pub clip_lower_frac: f64,
    pub clip_upper_frac: f64,
    pub max_ratio: f64,
    pub min_ratio: f64,
    pub zero_adv_groups: usize,
    pub tokens: usize,
    pub mean_response_len: f64,
    pub updates: usize,
    pub aborted_updates: usize,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        [
            self.loss,
            self.rl_loss,
            self.sft_loss,
            self.mean_reward,
            self.reward_variance,
            self.solve_rate,
            self.grad_norm,
            self.mean_entropy,
            self.clip_lower_frac,
            self.clip_upper_frac,
            self.max_ratio,
            self.min_ratio,
            self.mean_response_len,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

pub fn summarize_step(
    step: usize,
    groups: &[Group],
    prompts: &[TaskSpec],
    updates: &[UpdateMetrics],
) -> Result<StepMetrics, TrainError> {
    let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
    let (mean_reward, reward_variance) = numerics::mean_var(&rewards);
    let mut solved = 0usize;
    let mut lengths = 0usize;
    for (g, task) in groups.iter().zip(prompts) {
        for t in &g.trajectories {
            solved += usize::from(envs::fully_passes(&t.tokens, task)?);
            lengths += t.len();
        }
    }
    let n_resp = rewards.len().max(1) as f64;
    let done: Vec<&UpdateMetrics> = updates.iter().filter(|u| !u.aborted && !u.skipped).collect();
    let n_done = done.len().max(1) as f64;
    let tokens: usize = done.iter().map(|u| u.tokens).sum();
    let tok = tokens.max(1) as f64;
    let min_ratio = done.iter().map(|u| u.min_ratio).fold(f64::INFINITY, f64::min);
    Ok(StepMetrics {
        step,
        loss: done.iter().map(|u| u.loss).sum::<f64>() / n_done,
        rl_loss: done.iter().map(|u| u.rl_loss).sum::<f64>() / n_done,
        sft_loss: done.iter().map(|u| u.sft_loss).sum::<f64>() / n_done,
        mean_reward,
        reward_variance,
        solve_rate: solved as f64 / n_resp,
        grad_norm: done.iter().map(|u| u.grad_norm).sum::<f64>() / n_done,
        mean_entropy: done.iter().map(|u| u.entropy_sum).sum::<f64>() / tok,
        clip_lower_frac: done.iter().map(|u| u.lower_clipped).sum::<usize>() as f64 / tok,
        clip_upper_frac: done.iter().map(|u| u.upper_clipped).sum::<usize>() as f64 / tok,
        max_ratio: done.iter().map(|u| u.max_ratio).fold(0.0, f64::max),
        min_ratio: if min_ratio.is_finite() { min_ratio } else { 0.0 },
        zero_adv_groups: groups.iter().filter(|g| g.degenerate).count(),
        tokens,
        mean_response_len: lengths as f64 / n_resp,
        updates: done.len(),
        aborted_updates: updates.iter().filter(|u| u.aborted).count(),
    })
}

/// SFT on reference responses for `cfg.warmstart.sft_steps` steps.
pub fn warm_start(model: &mut PolicyModel, pool: &[TaskSpec], cfg: &TrainConfig) -> Result<(), TrainError> {
    let mut opt = OptimizerState::new(cfg.update.optimizer, model.num_params());
    for step in 0..cfg.warmstart.sft_steps {
        let mut rng = SeededRng::new(cfg.seed, stream_id(Stream::Warmstart, step, 0));
        let prompts = select_prompts(pool, cfg.rollout.global_batch_prompts, &mut rng);
        let demos = prompts
            .iter()
            .map(|t| Trajectory::score(model, t, t.reference_response()))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Trajectory> = demos.iter().collect();
        let sft = objectives::sft_loss(&refs, model)?;
        apply_update(model, &sft.grad, &mut opt, cfg.warmstart.lr)?;
    }
    Ok(())
}

/// Run directory writer. Every line-delimited file starts with a header
/// record carrying its format tag and version.
struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<fs::File>,
    tokens: Option<BufWriter<fs::File>>,
}

#[derive(Serialize)]
struct Header<'a> {
    format: &'a str,
    version: u32,
}

#[derive(Serialize)]
struct MetricsHeader<'a> {
    format: &'a str,
    version: u32,
    method: &'a str,
    optimizer: OptimizerKind,
    rng: &'a str,
}

fn write_line<T: Serialize>(w: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(std::io::Error::other)?;
    w.write_all(b"\n")
}

impl RunWriter {
    fn create(dir: &Path, cfg: &TrainConfig) -> Result<Self, TrainError> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let snapshot = serde_json::to_string_pretty(cfg).map_err(std::io::Error::other)?;
        fs::write(dir.join("config.json"), snapshot)?;
        let mut metrics = BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?);
        let header = MetricsHeader {
            format: METRICS_FORMAT,
            version: FORMAT_VERSION,
            method: cfg.objective.method.name(),
            optimizer: cfg.update.optimizer,
            rng: numerics::RNG_ALGORITHM,
        };
        write_line(&mut metrics, &header)?;
        let tokens = if cfg.token_records {
            let mut w = BufWriter::new(fs::File::create(dir.join("tokens.jsonl"))?);
            write_line(&mut w, &Header { format: TOKENS_FORMAT, version: FORMAT_VERSION })?;
            Some(w)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            tokens,
        })
    }

    fn checkpoint(&self, step: usize, model: &PolicyModel, opt: &OptimizerState) -> Result<PathBuf, TrainError> {
        let path = self.dir.join("checkpoints").join(format!("step-{step:06}.json"));
        Checkpoint::new(step as u64, model.clone(), Some(opt.clone())).save(&path)?;
        Ok(path)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub model: PolicyModel,
    pub optimizer: OptimizerState,
    pub final_checkpoint: Option<PathBuf>,
}

/// Reads `metrics.jsonl`, skipping the header line.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, TrainError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

/// Full training run. With `run_dir` set, writes the config snapshot,
/// streams metrics, and stores checkpoints at step 0, every
/// `checkpoint_every` steps and at the end.
pub fn train(cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let pool = task_pool(cfg);
    let mut model = init_model(cfg)?;
    warm_start(&mut model, &pool, cfg)?;
    let opt = OptimizerState::new(cfg.update.optimizer, model.num_params());
    train_from(cfg, &pool, model, opt, 0, run_dir)
}

/// Continues training from an explicit model and optimizer state at
/// `start_step`.
pub fn train_from(
    cfg: &TrainConfig,
    pool: &[TaskSpec],
    mut model: PolicyModel,
    mut opt: OptimizerState,
    start_step: usize,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let mut writer = run_dir.map(|d| RunWriter::create(d, cfg)).transpose()?;
    let mut final_checkpoint = None;
    if let Some(w) = &writer {
        final_checkpoint = Some(w.checkpoint(start_step, &model, &opt)?);
    }
    let mut history = Vec::with_capacity(cfg.total_steps);
    for step in start_step..start_step + cfg.total_steps {
        let prompts = step_prompts(cfg, pool, step);
        let groups = rollout_phase(&model, &prompts, cfg, step)?;
        let mut sink = Vec::new();
        let want_tokens = writer.as_ref().is_some_and(|w| w.tokens.is_some());
        let updates = update_phase(
            &groups,
            &mut model,
            &mut opt,
            cfg,
            step,
            want_tokens.then_some(&mut sink),
        )?;
        let metrics = summarize_step(step, &groups, &prompts, &updates)?;
        if let Some(w) = writer.as_mut() {
            write_line(&mut w.metrics, &metrics)?;
            w.metrics.flush()?;
            if let Some(t) = w.tokens.as_mut() {
                for line in &sink {
                    write_line(t, line)?;
                }
                t.flush()?;
            }
            let done = step + 1;
            let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
            if periodic || done == start_step + cfg.total_steps {
                final_checkpoint = Some(w.checkpoint(done, &model, &opt)?);
            }
        }
        history.push(metrics);
    }
    Ok(TrainOutcome {
        metrics: history,
        model,
        optimizer: opt,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Method;

    fn small_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.total_steps = 3;
        cfg.rollout.global_batch_prompts = 8;
        cfg.rollout.group_size = 4;
        cfg.update.minibatch_prompts = 4;
        cfg.task.pool_size = 16;
        cfg.model.hidden = 8;
        cfg
    }

    #[test]
    fn validation_rejects_bad_batches() {
        let mut cfg = small_cfg();
        cfg.update.minibatch_prompts = 3;
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        let mut cfg = small_cfg();
        cfg.rollout.group_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.update.alpha = -1.0;
        assert!(cfg.validate().is_err());
        assert!(small_cfg().validate().is_ok());
    }

    #[test]
    fn default_learning_rates() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.lr(), 0.01);
        cfg.model.kind = ModelKindName::Tabular;
        assert_eq!(cfg.lr(), 0.05);
    }

    #[test]
    fn rollout_shapes_and_rewards() {
        let mut cfg = small_cfg();
        cfg.rollout.group_size = 8;
        cfg.rollout.global_batch_prompts = 16;
        cfg.update.minibatch_prompts = 16;
        let pool = task_pool(&cfg);
        let model = init_model(&cfg).unwrap();
        let prompts = step_prompts(&cfg, &pool, 0);
        let groups = rollout_phase(&model, &prompts, &cfg, 0).unwrap();
        assert_eq!(groups.len(), 16);
        for (g, task) in groups.iter().zip(&prompts) {
            assert_eq!(g.trajectories.len(), 8);
            for (t, &r) in g.trajectories.iter().zip(&g.rewards) {
                assert_eq!(envs::verify_binary(&t.tokens, task).unwrap().value, r);
            }
        }
        let again = rollout_phase(&model, &prompts, &cfg, 0).unwrap();
        assert_eq!(groups, again);
    }

    #[test]
    fn second_minibatch_activates_clipping() {
        let mut cfg = small_cfg();
        cfg.update.lr = Some(2.0);
        cfg.objective = ClipConfig::with_method(Method::ClipHigher);
        let pool = task_pool(&cfg);
        let mut model = init_model(&cfg).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, model.num_params());
        let prompts = step_prompts(&cfg, &pool, 0);
        let groups = rollout_phase(&model, &prompts, &cfg, 0).unwrap();
        let ups = update_phase(&groups, &mut model, &mut opt, &cfg, 0, None).unwrap();
        assert_eq!(ups.len(), 2);
        assert_eq!(ups[0].lower_clipped + ups[0].upper_clipped, 0);
        assert!(ups[1].max_ratio > 1.0 || ups[1].min_ratio < 1.0);
    }

    #[test]
    fn non_finite_loss_leaves_model_unchanged() {
        let cfg = small_cfg();
        let pool = task_pool(&cfg);
        let mut model = init_model(&cfg).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, model.num_params());
        let prompts = step_prompts(&cfg, &pool, 0);
        let mut groups = rollout_phase(&model, &prompts, &cfg, 0).unwrap();
        for g in &mut groups {
            g.advantages.iter_mut().for_each(|a| *a = f64::NAN);
        }
        let before = model.clone();
        let ups = update_phase(&groups, &mut model, &mut opt, &cfg, 0, None).unwrap();
        assert!(ups.iter().all(|u| u.aborted));
        assert_eq!(model, before);
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.total_steps = 0;
        let out = train(&cfg, Some(dir.path())).unwrap();
        assert!(out.metrics.is_empty());
        let ckpts: Vec<_> = fs::read_dir(dir.path().join("checkpoints")).unwrap().collect();
        assert_eq!(ckpts.len(), 1);
        assert!(dir.path().join("checkpoints/step-000000.json").exists());
    }

    #[test]
    fn training_is_deterministic_and_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.token_records = true;
        let a = train(&cfg, Some(dir.path())).unwrap();
        let b = train(&cfg, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
        assert!(a.metrics.iter().all(StepMetrics::is_finite));
        let back = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(back, a.metrics);
        let tokens = fs::read_to_string(dir.path().join("tokens.jsonl")).unwrap();
        assert!(tokens.lines().next().unwrap().contains(TOKENS_FORMAT));
        assert!(tokens.lines().count() > 1);
        assert!(dir.path().join("checkpoints/step-000003.json").exists());
    }

    #[test]
    fn warm_start_improves_reference_likelihood() {
        let mut cfg = small_cfg();
        cfg.task.kind = TaskKind::MultiCheckCode;
        cfg.task.reward_mode = RewardMode::Soft;
        cfg.model.context_window = 6;
        cfg.warmstart.sft_steps = 30;
        cfg.warmstart.lr = 0.5;
        let pool = task_pool(&cfg);
        let base = init_model(&cfg).unwrap();
        let mut warm = base.clone();
        warm_start(&mut warm, &pool, &cfg).unwrap();
        let nll = |m: &PolicyModel| {
            let demos: Vec<Trajectory> = pool
                .iter()
                .map(|t| Trajectory::score(m, t, t.reference_response()).unwrap())
                .collect();
            let refs: Vec<&Trajectory> = demos.iter().collect();
            objectives::sft_loss(&refs, m).unwrap().loss
        };
        assert!(nll(&warm) < nll(&base));
    }
}
