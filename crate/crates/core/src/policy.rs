//! Small token policies with exact log-probabilities and manual backprop.
//!
//! Two kinds are provided. `Tabular` hashes the context window to one logit
//! row. `Feedforward` one-hot encodes the window, applies one tanh hidden
//! layer and a linear read-out to logits. In both cases the gradient of
//! `log π(a|s)` with respect to the logits is `onehot(a) − π(·|s)`, which is
//! then chained through the model's layers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{TaskSpec, Token};
use crate::numerics::{self, NumericsError, ProbDist, SeededRng, RNG_ALGORITHM};
use crate::objectives::Group;

/// Marks an empty slot at the left edge of a context window.
pub const PAD: Token = u32::MAX;

pub const CHECKPOINT_FORMAT: &str = "cliplab.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("update rejected: {0}")]
    UpdateRejected(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// The state `s_t`: the last `window` tokens of prompt + response,
/// left-padded with [`PAD`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Context(pub Vec<Token>);

impl Context {
    pub fn from_history(prompt: &[Token], response: &[Token], window: usize) -> Self {
        let total = prompt.len() + response.len();
        let mut slots = vec![PAD; window];
        for (k, slot) in slots.iter_mut().enumerate() {
            // slot k holds history position total - window + k
            let pos = (total + k).checked_sub(window);
            if let Some(p) = pos {
                *slot = if p < prompt.len() {
                    prompt[p]
                } else {
                    response[p - prompt.len()]
                };
            }
        }
        Context(slots)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelKind {
    Tabular { rows: usize },
    Feedforward { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    kind: ModelKind,
    vocab_size: usize,
    context_window: usize,
    params: Vec<f64>,
    init_seed: u64,
    init_stream: u64,
}

fn fnv1a(tokens: &[Token]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Offsets into the flat parameter vector of a feedforward model.
/// Cached activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    hidden: Vec<f64>,
}

/// Parameter layout: `w1` input-major (`D × H`), `b1`, `w2` (`V × H`), `b2`.
#[derive(Debug, Clone, Copy)]
struct FfLayout {
    input: usize,
    hidden: usize,
    vocab: usize,
}

impl FfLayout {
    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.hidden * self.input
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.vocab * self.hidden
    }
    fn total(&self) -> usize {
        self.b2() + self.vocab
    }
}

impl PolicyModel {
    /// Tabular model with all-zero logits.
    pub fn tabular(vocab_size: usize, context_window: usize, rows: usize) -> Result<Self, PolicyError> {
        if vocab_size == 0 || context_window == 0 || rows == 0 {
            return Err(PolicyError::InvalidInput(
                "vocab size, context window and row count must be positive".into(),
            ));
        }
        Ok(Self {
            kind: ModelKind::Tabular { rows },
            vocab_size,
            context_window,
            params: vec![0.0; rows * vocab_size],
            init_seed: 0,
            init_stream: 0,
        })
    }

    /// Feedforward model with weights uniform in `[-init_scale, init_scale]`
    /// drawn from `rng`.
    pub fn feedforward(
        vocab_size: usize,
        context_window: usize,
        hidden: usize,
        init_scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self, PolicyError> {
        if vocab_size == 0 || context_window == 0 || hidden == 0 {
            return Err(PolicyError::InvalidInput(
                "vocab size, context window and hidden width must be positive".into(),
            ));
        }
        let layout = FfLayout {
            input: vocab_size * context_window,
            hidden,
            vocab: vocab_size,
        };
        let params = (0..layout.total())
            .map(|_| rng.uniform_range(-init_scale, init_scale))
            .collect();
        Ok(Self {
            kind: ModelKind::Feedforward { hidden },
            vocab_size,
            context_window,
            params,
            init_seed: rng.seed(),
            init_stream: rng.stream_id(),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Copy of this model with a different parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self, PolicyError> {
        if params.len() != self.params.len() {
            return Err(PolicyError::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn ff_layout(&self, hidden: usize) -> FfLayout {
        FfLayout {
            input: self.vocab_size * self.context_window,
            hidden,
            vocab: self.vocab_size,
        }
    }

    fn check_context(&self, ctx: &Context) -> Result<(), PolicyError> {
        if ctx.0.len() != self.context_window {
            return Err(PolicyError::InvalidInput(format!(
                "context has {} slots, model window is {}",
                ctx.0.len(),
                self.context_window
            )));
        }
        if let Some(t) = ctx
            .0
            .iter()
            .find(|&&t| t != PAD && t as usize >= self.vocab_size)
        {
            return Err(PolicyError::InvalidInput(format!(
                "context token {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Index of the logit row a tabular model uses for `ctx`.
    pub fn row_index(&self, ctx: &Context) -> Option<usize> {
        match self.kind {
            ModelKind::Tabular { rows } => Some((fnv1a(&ctx.0) % rows as u64) as usize),
            ModelKind::Feedforward { .. } => None,
        }
    }

    /// Active one-hot input columns for a feedforward model.
    fn active_inputs<'a>(&self, ctx: &'a Context) -> impl Iterator<Item = usize> + 'a {
        let v = self.vocab_size;
        ctx.0
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != PAD)
            .map(move |(slot, &t)| slot * v + t as usize)
    }

    fn ff_hidden(&self, layout: FfLayout, ctx: &Context) -> Vec<f64> {
        let p = &self.params;
        let mut pre: Vec<f64> = p[layout.b1()..layout.b1() + layout.hidden].to_vec();
        for col in self.active_inputs(ctx) {
            let w = &p[layout.w1() + col * layout.hidden..][..layout.hidden];
            for (h, w) in pre.iter_mut().zip(w) {
                *h += w;
            }
        }
        pre.into_iter().map(f64::tanh).collect()
    }

    /// Forward pass, keeping what the backward pass needs.
    pub fn forward(&self, ctx: &Context) -> Result<Forward, PolicyError> {
        self.check_context(ctx)?;
        Ok(match self.kind {
            ModelKind::Tabular { .. } => {
                let row = self.row_index(ctx).expect("tabular");
                Forward {
                    logits: self.params[row * self.vocab_size..(row + 1) * self.vocab_size].to_vec(),
                    hidden: Vec::new(),
                }
            }
            ModelKind::Feedforward { hidden } => {
                let layout = self.ff_layout(hidden);
                let h = self.ff_hidden(layout, ctx);
                let p = &self.params;
                let w2 = &p[layout.w2()..layout.b2()];
                let mut logits = numerics::matvec(w2, layout.vocab, layout.hidden, &h);
                for (o, b) in logits.iter_mut().zip(&p[layout.b2()..]) {
                    *o += b;
                }
                Forward { logits, hidden: h }
            }
        })
    }

    /// Logits `f_θ(·, s)`.
    pub fn logits(&self, ctx: &Context) -> Result<Vec<f64>, PolicyError> {
        Ok(self.forward(ctx)?.logits)
    }

    pub fn logprobs(&self, ctx: &Context) -> Result<Vec<f64>, PolicyError> {
        Ok(numerics::log_softmax(&self.logits(ctx)?)?)
    }

    pub fn distribution(&self, ctx: &Context) -> Result<ProbDist, PolicyError> {
        Ok(numerics::softmax(&self.logits(ctx)?)?)
    }

    /// `log π_θ(action | ctx)` at temperature 1.
    pub fn logprob(&self, ctx: &Context, action: Token) -> Result<f64, PolicyError> {
        let a = action as usize;
        if a >= self.vocab_size {
            return Err(PolicyError::InvalidInput(format!(
                "action {action} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(self.logprobs(ctx)?[a])
    }

    /// Adds `Σ_a dlogits[a] · ∂f_θ(a, s)/∂θ` into `out`.
    pub fn accumulate_logit_grad(
        &self,
        ctx: &Context,
        dlogits: &[f64],
        out: &mut [f64],
    ) -> Result<(), PolicyError> {
        let fwd = self.forward(ctx)?;
        self.backward(ctx, &fwd, dlogits, out)
    }

    /// Backward pass from logit gradients, reusing `fwd` computed for `ctx`.
    pub fn backward(
        &self,
        ctx: &Context,
        fwd: &Forward,
        dlogits: &[f64],
        out: &mut [f64],
    ) -> Result<(), PolicyError> {
        self.check_context(ctx)?;
        if dlogits.len() != self.vocab_size || out.len() != self.params.len() {
            return Err(PolicyError::InvalidInput("gradient buffer size mismatch".into()));
        }
        match self.kind {
            ModelKind::Tabular { .. } => {
                let row = self.row_index(ctx).expect("tabular");
                let base = row * self.vocab_size;
                for (o, g) in out[base..base + self.vocab_size].iter_mut().zip(dlogits) {
                    *o += g;
                }
            }
            ModelKind::Feedforward { hidden } => {
                let layout = self.ff_layout(hidden);
                let h = &fwd.hidden;
                if h.len() != layout.hidden {
                    return Err(PolicyError::InvalidInput("forward pass from another model".into()));
                }
                let p = &self.params;
                let mut dpre = vec![0.0; layout.hidden];
                for (a, &g) in dlogits.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    out[layout.b2() + a] += g;
                    let row = layout.w2() + a * layout.hidden;
                    for j in 0..layout.hidden {
                        out[row + j] += g * h[j];
                        dpre[j] += g * p[row + j];
                    }
                }
                for (d, hj) in dpre.iter_mut().zip(h) {
                    *d *= 1.0 - hj * hj;
                }
                for (o, d) in out[layout.b1()..layout.b1() + layout.hidden].iter_mut().zip(&dpre) {
                    *o += d;
                }
                for col in self.active_inputs(ctx) {
                    let o = &mut out[layout.w1() + col * layout.hidden..][..layout.hidden];
                    for (o, d) in o.iter_mut().zip(&dpre) {
                        *o += d;
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds `scale · φ_θ(action, ctx)` into `out`, where φ is the gradient of
    /// `log π_θ(action | ctx)`.
    pub fn accumulate_score_grad(
        &self,
        ctx: &Context,
        action: Token,
        scale: f64,
        out: &mut [f64],
    ) -> Result<(), PolicyError> {
        if scale == 0.0 {
            return Ok(());
        }
        let a = action as usize;
        if a >= self.vocab_size {
            return Err(PolicyError::InvalidInput(format!("action {action} out of range")));
        }
        let fwd = self.forward(ctx)?;
        let probs = numerics::softmax(&fwd.logits)?;
        let mut dlogits: Vec<f64> = probs.probs().iter().map(|p| -scale * p).collect();
        dlogits[a] += scale;
        self.backward(ctx, &fwd, &dlogits, out)
    }

    /// `scale · φ_θ(action, ctx)` as a fresh parameter-sized vector.
    pub fn backprop_token(&self, ctx: &Context, action: Token, scale: f64) -> Result<Vec<f64>, PolicyError> {
        let mut out = vec![0.0; self.params.len()];
        self.accumulate_score_grad(ctx, action, scale, &mut out)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AnswerEmitted,
    MaxLength,
}

/// One sampled response with its behaviour-policy log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: u64,
    pub tokens: Vec<Token>,
    pub contexts: Vec<Context>,
    pub logp_old: Vec<f64>,
    pub reward: f64,
    pub terminated: Termination,
    /// Per-token advantages (e.g. from GAE). When absent the group-relative
    /// advantage of the trajectory applies to every token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_advantages: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Scores a fixed response under `model`, recording its log-probs as the
    /// behaviour policy.
    pub fn score(
        model: &PolicyModel,
        task: &TaskSpec,
        response: Vec<Token>,
    ) -> Result<Self, PolicyError> {
        if response.is_empty() {
            return Err(PolicyError::InvalidInput("empty response".into()));
        }
        let mut contexts = Vec::with_capacity(response.len());
        let mut logp_old = Vec::with_capacity(response.len());
        for t in 0..response.len() {
            let ctx = Context::from_history(&task.prompt_tokens, &response[..t], model.context_window());
            logp_old.push(model.logprob(&ctx, response[t])?);
            contexts.push(ctx);
        }
        let terminated = if task.response_complete(&response) {
            Termination::AnswerEmitted
        } else {
            Termination::MaxLength
        };
        Ok(Self {
            prompt_id: task.id,
            tokens: response,
            contexts,
            logp_old,
            reward: 0.0,
            terminated,
            token_advantages: None,
        })
    }

    /// Trajectory from explicit contexts, tokens and behaviour log-probs.
    pub fn from_parts(
        prompt_id: u64,
        contexts: Vec<Context>,
        tokens: Vec<Token>,
        logp_old: Vec<f64>,
        reward: f64,
    ) -> Result<Self, PolicyError> {
        if tokens.is_empty() || tokens.len() != contexts.len() || tokens.len() != logp_old.len() {
            return Err(PolicyError::InvalidInput(
                "tokens, contexts and logp_old must be nonempty and equally long".into(),
            ));
        }
        if logp_old.iter().any(|l| !(l.is_finite() && *l <= 0.0)) {
            return Err(PolicyError::InvalidInput("logp_old must be finite and ≤ 0".into()));
        }
        Ok(Self {
            prompt_id,
            tokens,
            contexts,
            logp_old,
            reward,
            terminated: Termination::AnswerEmitted,
            token_advantages: None,
        })
    }
}

/// Samples one response. Temperature shapes the sampling distribution only;
/// the recorded log-probs are always at temperature 1.
pub fn sample_trajectory(
    model: &PolicyModel,
    task: &TaskSpec,
    max_len: usize,
    temperature: f64,
    rng: &mut SeededRng,
) -> Result<Trajectory, PolicyError> {
    let mut tokens = Vec::new();
    let mut contexts = Vec::new();
    let mut logp_old = Vec::new();
    let mut terminated = Termination::MaxLength;
    while tokens.len() < max_len {
        let ctx = Context::from_history(&task.prompt_tokens, &tokens, model.context_window());
        let logits = model.logits(&ctx)?;
        let logp = numerics::log_softmax(&logits)?;
        let action = if temperature == 1.0 {
            let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            rng.categorical(&probs)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            rng.categorical(numerics::softmax(&scaled)?.probs())
        };
        tokens.push(action as Token);
        contexts.push(ctx);
        logp_old.push(logp[action]);
        if task.response_complete(&tokens) {
            terminated = Termination::AnswerEmitted;
            break;
        }
    }
    Ok(Trajectory {
        prompt_id: task.id,
        tokens,
        contexts,
        logp_old,
        reward: 0.0,
        terminated,
        token_advantages: None,
    })
}

/// Samples `m` independent responses for one prompt. Rewards are left at
/// zero; the caller assigns them with a verifier.
pub fn sample_group(
    model: &PolicyModel,
    task: &TaskSpec,
    m: usize,
    max_len: usize,
    temperature: f64,
    rng: &mut SeededRng,
) -> Result<Group, PolicyError> {
    if m < 2 {
        return Err(PolicyError::InvalidInput(format!("group size must be ≥ 2, got {m}")));
    }
    if max_len == 0 {
        return Err(PolicyError::InvalidInput("max_len must be ≥ 1".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(PolicyError::InvalidInput(format!("temperature must be > 0, got {temperature}")));
    }
    let trajectories = (0..m)
        .map(|_| sample_trajectory(model, task, max_len, temperature, rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Group::new(task.id, trajectories))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain constant-step gradient descent.
    #[default]
    Sgd,
    /// Adaptive moment estimation.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(default)]
    pub m: Vec<f64>,
    #[serde(default)]
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { num_params } else { 0 };
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }
}

/// One descent step `θ ← θ − lr · update(grad)`.
///
/// A non-finite gradient is rejected and leaves both model and state
/// untouched.
pub fn apply_update(
    model: &mut PolicyModel,
    gradient: &[f64],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), PolicyError> {
    if gradient.len() != model.num_params() {
        return Err(PolicyError::InvalidInput(format!(
            "gradient has {} entries, model has {} parameters",
            gradient.len(),
            model.num_params()
        )));
    }
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        log::warn!("rejecting update: non-finite gradient at coordinate {i}");
        return Err(PolicyError::UpdateRejected(format!(
            "non-finite gradient at coordinate {i}"
        )));
    }
    match state.kind {
        OptimizerKind::Sgd => numerics::axpy(-lr, gradient, &mut model.params),
        OptimizerKind::Adam => {
            if state.m.len() != gradient.len() {
                state.m = vec![0.0; gradient.len()];
                state.v = vec![0.0; gradient.len()];
            }
            state.step += 1;
            let t = state.step as i32;
            let bc1 = 1.0 - state.beta1.powi(t);
            let bc2 = 1.0 - state.beta2.powi(t);
            for i in 0..gradient.len() {
                let g = gradient[i];
                state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
                state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                model.params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
            }
        }
    }
    Ok(())
}

/// On-disk model record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub rng_algorithm: String,
    pub step: u64,
    pub model: PolicyModel,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(step: u64, model: PolicyModel, optimizer: Option<OptimizerState>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            rng_algorithm: RNG_ALGORITHM.into(),
            step,
            model,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let text = serde_json::to_string(self).map_err(|e| PolicyError::Format(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| PolicyError::Format(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Format(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let expected = match ckpt.model.kind {
            ModelKind::Tabular { rows } => rows * ckpt.model.vocab_size,
            ModelKind::Feedforward { hidden } => ckpt.model.ff_layout(hidden).total(),
        };
        if ckpt.model.params.len() != expected {
            return Err(PolicyError::Format(format!(
                "parameter count {} does not match shape ({expected})",
                ckpt.model.params.len()
            )));
        }
        Ok(ckpt)
    }
}
