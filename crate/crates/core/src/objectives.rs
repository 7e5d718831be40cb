//! Advantage estimators, importance ratios, surrogate objectives and the
//! per-token gradient coefficients of every clipped objective.
//!
//! All objectives share one gradient shape. For token `t` of response `j`
//!
//! ```text
//! ∇J = Σ_{j,t} w_{j,t} · F_{j,t} · Â_{j,t} · φ_θ(a_t, s_t)
//! ```
//!
//! where `w` is the normalization weight, `Â` the advantage, `φ` the score
//! function and `F` the method's gradient coefficient. The methods differ
//! only in how `F` depends on the ratio `δ` and the sign of the advantage,
//! so the backward pass is written as an explicit case table rather than
//! derived through stop-gradient nodes. [`stop_gradient_objective`] keeps
//! the stop-gradient form of each loss for use as a finite-difference
//! target.
//!
//! Objectives are written to be maximized. Losses returned by
//! [`surrogate_batch`] are their negation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, mean_var};
use crate::policy::{PolicyError, PolicyModel, Trajectory};

/// `ln δ` above which the ratio is treated as overflowing.
pub const MAX_LOG_RATIO: f64 = 700.0;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("importance ratio overflow (log ratio {log_ratio}) at {location:?}")]
    RatioOverflow {
        log_ratio: f64,
        location: Option<TokenLocation>,
    },
    #[error("{0:?} has no min/clip forward form; its value is assembled in surrogate_batch")]
    NoTokenForward(Method),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PpoClip,
    GrpoToken,
    ClipHigher,
    Gppo,
    GppoGeneral,
    Cispo,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::PpoClip,
        Method::GrpoToken,
        Method::ClipHigher,
        Method::Gppo,
        Method::GppoGeneral,
        Method::Cispo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::PpoClip => "ppo_clip",
            Method::GrpoToken => "grpo_token",
            Method::ClipHigher => "clip_higher",
            Method::Gppo => "gppo",
            Method::GppoGeneral => "gppo_general",
            Method::Cispo => "cispo",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `1/M · Σ_j 1/|y_j| · Σ_t`, averaged over groups.
    SampleLevel,
    /// `1 / Σ_j T_j` over every token in the batch.
    TokenLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_l: f64,
    pub eps_h: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub method: Method,
    pub normalization: Normalization,
    /// Upper cap on the GPPO coefficient for negative-advantage tokens with
    /// large ratios. Off by default; every application is logged.
    #[serde(default)]
    pub ratio_cap: Option<f64>,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_l: 0.2,
            eps_h: 0.28,
            beta1: 1.0,
            beta2: 1.0,
            method: Method::Gppo,
            normalization: Normalization::TokenLevel,
            ratio_cap: None,
        }
    }
}

impl ClipConfig {
    pub fn with_method(method: Method) -> Self {
        let mut cfg = Self {
            method,
            ..Self::default()
        };
        if matches!(method, Method::PpoClip | Method::GrpoToken) {
            cfg.eps_h = cfg.eps_l;
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let err = |m: String| Err(ObjectiveError::InvalidInput(m));
        if !(self.eps_l > 0.0 && self.eps_l < 1.0) {
            return err(format!("eps_l must lie in (0, 1), got {}", self.eps_l));
        }
        if !(self.eps_h > 0.0 && self.eps_h.is_finite()) {
            return err(format!("eps_h must be positive, got {}", self.eps_h));
        }
        if !(self.beta1 > 0.0 && self.beta2 > 0.0) {
            return err("beta1 and beta2 must be positive".into());
        }
        if self.method == Method::PpoClip && self.eps_l != self.eps_h {
            return err("ppo_clip uses a symmetric bound: eps_l must equal eps_h".into());
        }
        if let Some(cap) = self.ratio_cap {
            if !(cap >= 1.0 + self.eps_h) {
                return err(format!("ratio_cap {cap} must be at least 1 + eps_h"));
            }
        }
        Ok(())
    }

    /// Clipping interval `[1 − ε_low, 1 + ε_high]` used by the method.
    /// `grpo_token` clips symmetrically with `ε_l`; the asymmetric methods use
    /// `ε_h` for the upper edge.
    pub fn bounds(&self) -> (f64, f64) {
        match self.method {
            Method::PpoClip | Method::GrpoToken => (1.0 - self.eps_l, 1.0 + self.eps_l),
            _ => (1.0 - self.eps_l, 1.0 + self.eps_h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda: f64,
}

/// Where a token sits inside a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLocation {
    pub group: usize,
    pub prompt_id: u64,
    pub trajectory: usize,
    pub token: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipCase {
    Lower,
    Upper,
    Interior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenGradRecord {
    pub ratio: f64,
    pub advantage: f64,
    pub coefficient: f64,
    pub case: ClipCase,
    pub entropy: f64,
}

/// M responses for one prompt with their group-relative advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt_id: u64,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

impl Group {
    /// Builds a group from trajectories, normalizing their stored rewards.
    pub fn new(prompt_id: u64, trajectories: Vec<Trajectory>) -> Self {
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
        let stats = group_advantage(&rewards);
        Self {
            prompt_id,
            trajectories,
            rewards,
            mean: stats.mean,
            std: stats.std,
            advantages: stats.advantages,
            degenerate: stats.degenerate,
        }
    }

    /// Replaces rewards and recomputes advantages.
    pub fn set_rewards(&mut self, rewards: &[f64]) {
        assert_eq!(rewards.len(), self.trajectories.len(), "one reward per trajectory");
        for (t, &r) in self.trajectories.iter_mut().zip(rewards) {
            t.reward = r;
        }
        *self = Group::new(self.prompt_id, std::mem::take(&mut self.trajectories));
    }

    pub fn num_tokens(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

/// `Ã_j = (R_j − μ_R) / σ_R` with the population standard deviation. Groups
/// whose rewards are all equal get all-zero advantages and are flagged.
pub fn group_advantage(rewards: &[f64]) -> GroupStats {
    let (mean, var) = mean_var(rewards);
    let degenerate = rewards.windows(2).all(|w| w[0] == w[1]);
    if degenerate {
        return GroupStats {
            mean,
            std: 0.0,
            advantages: vec![0.0; rewards.len()],
            degenerate: true,
        };
    }
    let std = var.sqrt();
    GroupStats {
        mean,
        std,
        advantages: rewards.iter().map(|r| (r - mean) / std).collect(),
        degenerate: false,
    }
}

/// Generalized advantage estimation.
///
/// `values` holds `V(s_1..s_T)` followed by the bootstrap `V(s_{T+1})`.
pub fn gae(rewards: &[f64], values: &[f64], cfg: GaeConfig) -> Result<Vec<f64>, ObjectiveError> {
    if values.len() != rewards.len() + 1 {
        return Err(ObjectiveError::InvalidInput(format!(
            "expected {} values (rewards + bootstrap), got {}",
            rewards.len() + 1,
            values.len()
        )));
    }
    if !(0.0..=1.0).contains(&cfg.gamma) || !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(ObjectiveError::InvalidInput("gamma and lambda must lie in [0, 1]".into()));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        let td = rewards[t] + cfg.gamma * values[t + 1] - values[t];
        running = td + cfg.gamma * cfg.lambda * running;
        out[t] = running;
    }
    Ok(out)
}

/// `δ = exp(logp_new − logp_old)`.
pub fn importance_ratio(logp_new: f64, logp_old: f64) -> Result<f64, ObjectiveError> {
    if !(logp_new.is_finite() && logp_old.is_finite() && logp_new <= 0.0 && logp_old <= 0.0) {
        return Err(ObjectiveError::InvalidInput(format!(
            "log-probs must be finite and ≤ 0, got ({logp_new}, {logp_old})"
        )));
    }
    let log_ratio = logp_new - logp_old;
    if log_ratio > MAX_LOG_RATIO {
        return Err(ObjectiveError::RatioOverflow {
            log_ratio,
            location: None,
        });
    }
    Ok(log_ratio.exp())
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Per-token pessimistic surrogate value for the min/clip family and for
/// general-form GPPO, whose forward value scales the clipped branches by β.
pub fn forward_token_objective(delta: f64, adv: f64, cfg: &ClipConfig) -> Result<f64, ObjectiveError> {
    let (lo, hi) = cfg.bounds();
    match cfg.method {
        Method::Cispo => Err(ObjectiveError::NoTokenForward(Method::Cispo)),
        Method::GppoGeneral => Ok(match pessimistic_case(delta, adv, lo, hi) {
            ClipCase::Lower => cfg.beta1 * lo * adv,
            ClipCase::Upper => cfg.beta2 * hi * adv,
            ClipCase::Interior => delta * adv,
        }),
        _ => Ok(f64::min(delta * adv, clip(delta, lo, hi) * adv)),
    }
}

/// The case of the pessimistic min/clip objective in which the clipped
/// branch is active.
fn pessimistic_case(delta: f64, adv: f64, lo: f64, hi: f64) -> ClipCase {
    if delta < lo && adv < 0.0 {
        ClipCase::Lower
    } else if delta > hi && adv > 0.0 {
        ClipCase::Upper
    } else {
        ClipCase::Interior
    }
}

fn record(delta: f64, adv: f64, coefficient: f64, case: ClipCase) -> TokenGradRecord {
    TokenGradRecord {
        ratio: delta,
        advantage: adv,
        coefficient,
        case,
        entropy: 0.0,
    }
}

/// Standard clipping: the indicator zeroes the gradient wherever the clipped
/// branch of the min is active.
pub fn grad_coeff_ppo_clip(delta: f64, adv: f64, eps: f64) -> TokenGradRecord {
    grad_coeff_hard_clip(delta, adv, 1.0 - eps, 1.0 + eps)
}

fn grad_coeff_hard_clip(delta: f64, adv: f64, lo: f64, hi: f64) -> TokenGradRecord {
    match pessimistic_case(delta, adv, lo, hi) {
        ClipCase::Interior => record(delta, adv, delta, ClipCase::Interior),
        case => record(delta, adv, 0.0, case),
    }
}

/// Gradient-preserving clipping: clipped tokens keep a bounded coefficient.
pub fn grad_coeff_gppo(delta: f64, adv: f64, cfg: &ClipConfig) -> TokenGradRecord {
    let (lo, hi) = cfg.bounds();
    let mut rec = match pessimistic_case(delta, adv, lo, hi) {
        ClipCase::Lower => record(delta, adv, lo, ClipCase::Lower),
        ClipCase::Upper => record(delta, adv, hi, ClipCase::Upper),
        ClipCase::Interior => record(delta, adv, delta, ClipCase::Interior),
    };
    if let Some(cap) = cfg.ratio_cap {
        if rec.coefficient > cap {
            log::info!("gppo ratio cap applied: coefficient {} capped at {cap}", rec.coefficient);
            rec.coefficient = cap;
        }
    }
    rec
}

/// General form with β₁, β₂ scaling the two clipped boundaries.
pub fn grad_coeff_gppo_general(delta: f64, adv: f64, cfg: &ClipConfig) -> TokenGradRecord {
    let (lo, hi) = cfg.bounds();
    match pessimistic_case(delta, adv, lo, hi) {
        ClipCase::Lower => record(delta, adv, cfg.beta1 * lo, ClipCase::Lower),
        ClipCase::Upper => record(delta, adv, cfg.beta2 * hi, ClipCase::Upper),
        ClipCase::Interior => record(delta, adv, delta, ClipCase::Interior),
    }
}

/// CISPO clips the ratio weight on both advantage signs.
pub fn grad_coeff_cispo(delta: f64, adv: f64, cfg: &ClipConfig) -> TokenGradRecord {
    let (lo, hi) = cfg.bounds();
    if adv != 0.0 && delta < lo {
        record(delta, adv, lo, ClipCase::Lower)
    } else if adv != 0.0 && delta > hi {
        record(delta, adv, hi, ClipCase::Upper)
    } else {
        record(delta, adv, delta, ClipCase::Interior)
    }
}

/// Coefficient `F` for `cfg.method`.
pub fn token_coefficient(delta: f64, adv: f64, cfg: &ClipConfig) -> TokenGradRecord {
    let (lo, hi) = cfg.bounds();
    match cfg.method {
        Method::PpoClip | Method::GrpoToken | Method::ClipHigher => {
            grad_coeff_hard_clip(delta, adv, lo, hi)
        }
        Method::Gppo => grad_coeff_gppo(delta, adv, cfg),
        Method::GppoGeneral => grad_coeff_gppo_general(delta, adv, cfg),
        Method::Cispo => grad_coeff_cispo(delta, adv, cfg),
    }
}

/// Scalar value paired with its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    /// Negated objective, to be minimized.
    pub loss: f64,
    /// Gradient of `loss` with respect to the model parameters.
    pub grad: Vec<f64>,
    pub records: Vec<(TokenLocation, TokenGradRecord)>,
    pub num_tokens: usize,
}

impl SurrogateOutput {
    pub fn loss_grad(&self) -> LossGrad {
        LossGrad {
            value: self.loss,
            grad: self.grad.clone(),
        }
    }
}

/// Per-trajectory token weight, in batch order.
fn normalization_weights(groups: &[Group], norm: Normalization) -> Vec<f64> {
    match norm {
        Normalization::TokenLevel => {
            let total: usize = groups.iter().map(Group::num_tokens).sum();
            let w = 1.0 / total as f64;
            groups
                .iter()
                .flat_map(|g| g.trajectories.iter().map(move |_| w))
                .collect()
        }
        Normalization::SampleLevel => {
            let n_groups = groups.len() as f64;
            groups
                .iter()
                .flat_map(|g| {
                    let m = g.trajectories.len() as f64;
                    g.trajectories
                        .iter()
                        .map(move |t| 1.0 / (n_groups * m * t.len() as f64))
                })
                .collect()
        }
    }
}

fn check_batch(groups: &[Group]) -> Result<(), ObjectiveError> {
    if groups.is_empty() || groups.iter().all(|g| g.trajectories.is_empty()) {
        return Err(ObjectiveError::InvalidInput("empty batch".into()));
    }
    for g in groups {
        if g.advantages.len() != g.trajectories.len() {
            return Err(ObjectiveError::InvalidInput(format!(
                "group {} has {} advantages for {} trajectories",
                g.prompt_id,
                g.advantages.len(),
                g.trajectories.len()
            )));
        }
        for t in &g.trajectories {
            if t.is_empty() || t.logp_old.len() != t.len() || t.contexts.len() != t.len() {
                return Err(ObjectiveError::InvalidInput(format!(
                    "malformed trajectory in group {}",
                    g.prompt_id
                )));
            }
            if let Some(a) = &t.token_advantages {
                if a.len() != t.len() {
                    return Err(ObjectiveError::InvalidInput(
                        "token advantages must match trajectory length".into(),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn token_advantage(g: &Group, j: usize, t: usize) -> f64 {
    match &g.trajectories[j].token_advantages {
        Some(a) => a[t],
        None => g.advantages[j],
    }
}

/// Batch surrogate with the library's case tables.
pub fn surrogate_batch(
    groups: &[Group],
    model: &PolicyModel,
    cfg: &ClipConfig,
) -> Result<SurrogateOutput, ObjectiveError> {
    surrogate_batch_with(groups, model, cfg, token_coefficient)
}

/// Batch surrogate with a caller-supplied coefficient rule. The forward
/// value does not depend on `coeff`; only the gradient does.
pub fn surrogate_batch_with<C>(
    groups: &[Group],
    model: &PolicyModel,
    cfg: &ClipConfig,
    coeff: C,
) -> Result<SurrogateOutput, ObjectiveError>
where
    C: Fn(f64, f64, &ClipConfig) -> TokenGradRecord,
{
    cfg.validate()?;
    check_batch(groups)?;
    let weights = normalization_weights(groups, cfg.normalization);
    let (lo, hi) = cfg.bounds();
    let mut objective = 0.0;
    let mut grad = vec![0.0; model.num_params()];
    let mut records = Vec::new();
    let mut num_tokens = 0;
    let mut traj_index = 0;
    for (gi, g) in groups.iter().enumerate() {
        for (j, traj) in g.trajectories.iter().enumerate() {
            let w = weights[traj_index];
            traj_index += 1;
            for t in 0..traj.len() {
                let location = TokenLocation {
                    group: gi,
                    prompt_id: g.prompt_id,
                    trajectory: j,
                    token: t,
                };
                let ctx = &traj.contexts[t];
                let action = traj.tokens[t];
                let fwd = model.forward(ctx)?;
                let logp_all = numerics::log_softmax(&fwd.logits).map_err(PolicyError::from)?;
                let logp_new = logp_all[action as usize];
                let delta = importance_ratio(logp_new, traj.logp_old[t]).map_err(|e| match e {
                    ObjectiveError::RatioOverflow { log_ratio, .. } => ObjectiveError::RatioOverflow {
                        log_ratio,
                        location: Some(location),
                    },
                    other => other,
                })?;
                let adv = token_advantage(g, j, t);
                let token_value = match cfg.method {
                    Method::Cispo => clip(delta, lo, hi) * adv * logp_new,
                    _ => forward_token_objective(delta, adv, cfg)?,
                };
                objective += w * token_value;

                let mut rec = coeff(delta, adv, cfg);
                let probs: Vec<f64> = logp_all.iter().map(|l| l.exp()).collect();
                rec.entropy = -probs
                    .iter()
                    .zip(&logp_all)
                    .filter(|(p, _)| **p > 0.0)
                    .map(|(p, l)| p * l)
                    .sum::<f64>();
                // d(loss) = −w · F · A · φ
                let scale = -w * rec.coefficient * adv;
                if scale != 0.0 {
                    let mut dlogits: Vec<f64> = probs.iter().map(|p| -scale * p).collect();
                    dlogits[action as usize] += scale;
                    model.backward(ctx, &fwd, &dlogits, &mut grad)?;
                }
                records.push((location, rec));
                num_tokens += 1;
            }
        }
    }
    Ok(SurrogateOutput {
        loss: -objective,
        grad,
        records,
        num_tokens,
    })
}

/// The maximization objective written with explicit stop-gradients.
///
/// Quantities under `sg(·)` are evaluated with `reference`; everything else
/// with `model`. At `model == reference` the value equals the forward
/// objective, and its derivative with respect to `model`'s parameters is the
/// gradient that each method's case table prescribes. This gives a
/// finite-difference target that also covers clipped tokens.
pub fn stop_gradient_objective(
    groups: &[Group],
    model: &PolicyModel,
    reference: &PolicyModel,
    cfg: &ClipConfig,
) -> Result<f64, ObjectiveError> {
    cfg.validate()?;
    check_batch(groups)?;
    let weights = normalization_weights(groups, cfg.normalization);
    let (lo, hi) = cfg.bounds();
    let mut total = 0.0;
    let mut traj_index = 0;
    for g in groups {
        for (j, traj) in g.trajectories.iter().enumerate() {
            let w = weights[traj_index];
            traj_index += 1;
            for t in 0..traj.len() {
                let ctx = &traj.contexts[t];
                let action = traj.tokens[t];
                let logp = model.logprob(ctx, action)?;
                let delta = (logp - traj.logp_old[t]).exp();
                let sg_delta = (reference.logprob(ctx, action)? - traj.logp_old[t]).exp();
                let adv = token_advantage(g, j, t);
                let value = match cfg.method {
                    Method::PpoClip | Method::GrpoToken | Method::ClipHigher => {
                        f64::min(delta * adv, clip(delta, lo, hi) * adv)
                    }
                    Method::Gppo => {
                        let lower = lo / sg_delta * delta;
                        let upper = hi / sg_delta * delta;
                        f64::min(delta * adv, clip(delta, lower, upper) * adv)
                    }
                    Method::GppoGeneral => {
                        if delta < lo && adv < 0.0 {
                            cfg.beta1 * lo / sg_delta * delta * adv
                        } else if delta > hi && adv > 0.0 {
                            cfg.beta2 * hi / sg_delta * delta * adv
                        } else {
                            delta * adv
                        }
                    }
                    Method::Cispo => clip(sg_delta, lo, hi) * adv * logp,
                };
                total += w * value;
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub num_tokens: usize,
    /// Set when there were no positive trajectories.
    pub empty: bool,
}

impl SftOutput {
    pub fn loss_grad(&self) -> LossGrad {
        LossGrad {
            value: self.loss,
            grad: self.grad.clone(),
        }
    }
}

/// Token-level mean negative log-likelihood over `positives`.
pub fn sft_loss(positives: &[&Trajectory], model: &PolicyModel) -> Result<SftOutput, ObjectiveError> {
    let total: usize = positives.iter().map(|t| t.len()).sum();
    let mut grad = vec![0.0; model.num_params()];
    if total == 0 {
        return Ok(SftOutput {
            loss: 0.0,
            grad,
            num_tokens: 0,
            empty: true,
        });
    }
    let w = 1.0 / total as f64;
    let mut nll = 0.0;
    for traj in positives {
        for (ctx, &a) in traj.contexts.iter().zip(&traj.tokens) {
            let fwd = model.forward(ctx)?;
            let logp = numerics::log_softmax(&fwd.logits).map_err(PolicyError::from)?;
            let a = a as usize;
            if a >= logp.len() {
                return Err(PolicyError::InvalidInput(format!("action {a} outside vocabulary")).into());
            }
            nll -= logp[a];
            // d(−w·log π(a))/d logits = w·(π − onehot(a))
            let mut dlogits: Vec<f64> = logp.iter().map(|l| w * l.exp()).collect();
            dlogits[a] -= w;
            model.backward(ctx, &fwd, &dlogits, &mut grad)?;
        }
    }
    Ok(SftOutput {
        loss: w * nll,
        grad,
        num_tokens: total,
        empty: false,
    })
}

/// `rl + α · sft`, values and gradients.
pub fn combined_loss(rl: &LossGrad, sft: &LossGrad, alpha: f64) -> Result<LossGrad, ObjectiveError> {
    if !(alpha >= 0.0) {
        return Err(ObjectiveError::InvalidInput(format!("alpha must be ≥ 0, got {alpha}")));
    }
    if rl.grad.len() != sft.grad.len() {
        return Err(ObjectiveError::InvalidInput("gradient length mismatch".into()));
    }
    let mut grad = rl.grad.clone();
    numerics::axpy(alpha, &sft.grad, &mut grad);
    Ok(LossGrad {
        value: rl.value + alpha * sft.value,
        grad,
    })
}

/// Drops groups whose rewards are all equal. Survivors keep their order.
pub fn filter_zero_advantage(groups: Vec<Group>) -> (Vec<Group>, usize) {
    let before = groups.len();
    let kept: Vec<Group> = groups.into_iter().filter(|g| !g.degenerate).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}
