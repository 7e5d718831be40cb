//! Oracle suites for the objective family.
//!
//! Every suite builds seeded random instances on small tabular policies and
//! compares the library against something computed independently: central
//! finite differences, a hand-written case table, or an algebraic identity.

use serde::{Deserialize, Serialize};

use crate::envs::Token;
use crate::numerics::{self, SeededRng};
use crate::objectives::{
    self, ClipCase, ClipConfig, Group, Method, Normalization, ObjectiveError, TokenGradRecord,
};
use crate::policy::{Context, PolicyError, PolicyModel, Trajectory};

pub const REPORT_FORMAT: &str = "cliplab.gradcheck_report";
pub const REPORT_VERSION: u32 = 1;

/// Deliberate defects for checking that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Negates the GPPO coefficient on upper-clipped tokens.
    GppoUpperSignFlip,
}

impl Fault {
    pub fn parse(s: &str) -> Option<Fault> {
        match s {
            "gppo_upper_sign_flip" => Some(Fault::GppoUpperSignFlip),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub fd_step: f64,
    pub tolerance: f64,
    pub exact_tolerance: f64,
    pub forward_batches: usize,
    pub onpolicy_batches: usize,
    pub dilution_batches: usize,
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            fd_step: 1e-5,
            tolerance: 1e-5,
            exact_tolerance: 1e-12,
            forward_batches: 1000,
            onpolicy_batches: 100,
            dilution_batches: 100,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// The first few failures, each naming where it happened.
    pub failures: Vec<String>,
}

const MAX_LISTED_FAILURES: usize = 5;

impl SuiteResult {
    fn new(suite: &str, method: Option<Method>, tolerance: f64) -> Self {
        Self {
            suite: suite.to_string(),
            method,
            cases: 0,
            max_error: 0.0,
            tolerance,
            passed: true,
            failures: Vec::new(),
        }
    }

    fn observe(&mut self, error: f64, describe: impl FnOnce() -> String) {
        self.cases += 1;
        // NaN counts as a failure
        if !(error <= self.max_error) {
            self.max_error = if error.is_nan() { f64::INFINITY } else { error };
        }
        if !(error <= self.tolerance) {
            self.passed = false;
            if self.failures.len() < MAX_LISTED_FAILURES {
                self.failures.push(describe());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<Fault>,
    pub methods: Vec<MethodSummary>,
    pub suites: Vec<SuiteResult>,
    pub passed: bool,
}

/// The coefficient rule under test, with the configured fault applied.
fn coefficient_rule(fault: Option<Fault>) -> impl Fn(f64, f64, &ClipConfig) -> TokenGradRecord + Copy {
    move |delta, adv, cfg| {
        let mut rec = objectives::token_coefficient(delta, adv, cfg);
        if fault == Some(Fault::GppoUpperSignFlip) && cfg.method == Method::Gppo && rec.case == ClipCase::Upper {
            rec.coefficient = -rec.coefficient;
        }
        rec
    }
}

/// Coefficient tables transcribed case by case.
pub fn reference_coefficient(method: Method, delta: f64, adv: f64, cfg: &ClipConfig) -> (ClipCase, f64) {
    let lo = 1.0 - cfg.eps_l;
    match method {
        Method::PpoClip | Method::GrpoToken => {
            let hi = 1.0 + cfg.eps_l;
            if delta > hi && adv > 0.0 {
                (ClipCase::Upper, 0.0)
            } else if delta < lo && adv < 0.0 {
                (ClipCase::Lower, 0.0)
            } else {
                (ClipCase::Interior, delta)
            }
        }
        Method::ClipHigher => {
            let hi = 1.0 + cfg.eps_h;
            if delta > hi && adv > 0.0 {
                (ClipCase::Upper, 0.0)
            } else if delta < lo && adv < 0.0 {
                (ClipCase::Lower, 0.0)
            } else {
                (ClipCase::Interior, delta)
            }
        }
        Method::Gppo => {
            let hi = 1.0 + cfg.eps_h;
            if delta < lo && adv < 0.0 {
                (ClipCase::Lower, 1.0 - cfg.eps_l)
            } else if delta > hi && adv > 0.0 {
                (ClipCase::Upper, 1.0 + cfg.eps_h)
            } else {
                (ClipCase::Interior, delta)
            }
        }
        Method::GppoGeneral => {
            let hi = 1.0 + cfg.eps_h;
            if delta < lo && adv < 0.0 {
                (ClipCase::Lower, cfg.beta1 * (1.0 - cfg.eps_l))
            } else if delta > hi && adv > 0.0 {
                (ClipCase::Upper, cfg.beta2 * (1.0 + cfg.eps_h))
            } else {
                (ClipCase::Interior, delta)
            }
        }
        Method::Cispo => {
            let hi = 1.0 + cfg.eps_h;
            if delta < lo && adv < 0.0 {
                (ClipCase::Lower, 1.0 - cfg.eps_l)
            } else if delta > hi && adv > 0.0 {
                (ClipCase::Upper, 1.0 + cfg.eps_h)
            } else if delta < lo && adv > 0.0 {
                (ClipCase::Lower, 1.0 - cfg.eps_l)
            } else if delta > hi && adv < 0.0 {
                (ClipCase::Upper, 1.0 + cfg.eps_h)
            } else {
                (ClipCase::Interior, delta)
            }
        }
    }
}

/// How behaviour log-probs are placed relative to the current model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioMode {
    /// `δ` within about ±15% of 1, inside every method's clip range.
    Interior,
    /// `δ` across `[0.3, 3]`, kept away from every clip boundary.
    Spread,
    /// `logp_old` equal to the current log-prob, so `δ = 1` exactly.
    OnPolicy,
}

/// A random batch on a small tabular policy.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: PolicyModel,
    pub groups: Vec<Group>,
}

impl Instance {
    pub fn num_tokens(&self) -> usize {
        self.groups.iter().map(Group::num_tokens).sum()
    }

    pub fn count_cases(&self, cfg: &ClipConfig) -> Result<[usize; 3], ObjectiveError> {
        let out = objectives::surrogate_batch(&self.groups, &self.model, cfg)?;
        let mut counts = [0; 3];
        for (_, r) in &out.records {
            counts[match r.case {
                ClipCase::Lower => 0,
                ClipCase::Upper => 1,
                ClipCase::Interior => 2,
            }] += 1;
        }
        Ok(counts)
    }
}

/// Clip boundaries of every default configuration.
const BOUNDARIES: [f64; 3] = [0.8, 1.2, 1.28];
const BOUNDARY_MARGIN: f64 = 1e-3;

fn behaviour_logp(logp: f64, mode: RatioMode, rng: &mut SeededRng) -> f64 {
    match mode {
        RatioMode::OnPolicy => logp,
        RatioMode::Interior => {
            let u = rng.uniform_range(-0.15, 0.15);
            // keep logp_old a valid log-probability
            if logp - u > 0.0 {
                logp - u.abs()
            } else {
                logp - u
            }
        }
        RatioMode::Spread => loop {
            let log_delta = rng.uniform_range(0.3f64.ln(), 3.0f64.ln());
            let old = (logp - log_delta).min(0.0);
            let delta = (logp - old).exp();
            if BOUNDARIES.iter().all(|b| (delta - b).abs() > BOUNDARY_MARGIN) {
                return old;
            }
        },
    }
}

/// Builds a random instance: vocab 2..=5, responses of 1..=6 tokens, one to
/// `max_groups` groups of 2..=4 responses. Groups listed in `degenerate`
/// get identical rewards.
pub fn random_instance(
    rng: &mut SeededRng,
    mode: RatioMode,
    max_groups: usize,
    degenerate: &[bool],
) -> Result<Instance, PolicyError> {
    let vocab = 2 + rng.below(4);
    let window = 1 + rng.below(2);
    let rows = 4 + rng.below(5);
    let base = PolicyModel::tabular(vocab, window, rows)?;
    let params: Vec<f64> = (0..base.num_params()).map(|_| rng.uniform_range(-1.5, 1.5)).collect();
    let model = base.with_params(params)?;
    let n_groups = if degenerate.is_empty() {
        1 + rng.below(max_groups.max(1))
    } else {
        degenerate.len()
    };
    let mut groups = Vec::with_capacity(n_groups);
    for gi in 0..n_groups {
        let flat = degenerate.get(gi).copied().unwrap_or(false);
        let m = 2 + rng.below(3);
        let prompt: Vec<Token> = (0..2).map(|_| rng.below(vocab) as Token).collect();
        let shared_reward = rng.uniform_range(-1.0, 1.0);
        let mut trajs = Vec::with_capacity(m);
        for _ in 0..m {
            let len = 1 + rng.below(6);
            let tokens: Vec<Token> = (0..len).map(|_| rng.below(vocab) as Token).collect();
            let mut contexts = Vec::with_capacity(len);
            let mut logp_old = Vec::with_capacity(len);
            for t in 0..len {
                let ctx = Context::from_history(&prompt, &tokens[..t], window);
                logp_old.push(behaviour_logp(model.logprob(&ctx, tokens[t])?, mode, rng));
                contexts.push(ctx);
            }
            let reward = if flat { shared_reward } else { rng.uniform_range(-1.0, 1.0) };
            trajs.push(Trajectory::from_parts(gi as u64, contexts, tokens, logp_old, reward)?);
        }
        groups.push(Group::new(gi as u64, trajs));
    }
    Ok(Instance { model, groups })
}

fn instance_config(method: Method, rng: &mut SeededRng) -> ClipConfig {
    let mut cfg = ClipConfig::with_method(method);
    cfg.normalization = if rng.below(2) == 0 {
        Normalization::TokenLevel
    } else {
        Normalization::SampleLevel
    };
    if method == Method::GppoGeneral {
        cfg.beta1 = rng.uniform_range(0.5, 1.5);
        cfg.beta2 = rng.uniform_range(0.5, 1.5);
    }
    cfg
}

fn method_index(method: Method) -> u64 {
    Method::ALL.iter().position(|&m| m == method).unwrap_or(0) as u64
}

fn suite_rng(cfg: &GradcheckConfig, suite: u64, method: Option<Method>) -> SeededRng {
    let m = method.map_or(0, |m| method_index(m) + 1);
    SeededRng::new(cfg.seed, (suite << 8) | m)
}

/// Gradient of `loss(θ)` as the library computes it, with the fault rule.
fn analytic_grad(inst: &Instance, clip: &ClipConfig, fault: Option<Fault>) -> Result<Vec<f64>, ObjectiveError> {
    Ok(objectives::surrogate_batch_with(&inst.groups, &inst.model, clip, coefficient_rule(fault))?.grad)
}

fn params_model(inst: &Instance, theta: &[f64]) -> Option<PolicyModel> {
    inst.model.with_params(theta.to_vec()).ok()
}

/// Finite differences of the negated stop-gradient objective, with the
/// stop-gradient side frozen at the instance's model.
fn fd_stop_gradient(inst: &Instance, clip: &ClipConfig, h: f64) -> Result<Vec<f64>, ObjectiveError> {
    let f = |theta: &[f64]| {
        params_model(inst, theta)
            .and_then(|m| objectives::stop_gradient_objective(&inst.groups, &m, &inst.model, clip).ok())
            .map_or(f64::NAN, |v| -v)
    };
    numerics::finite_diff_grad(f, inst.model.params(), h).map_err(|e| ObjectiveError::Policy(e.into()))
}

/// Finite differences of the forward loss itself.
fn fd_forward(inst: &Instance, clip: &ClipConfig, h: f64) -> Result<Vec<f64>, ObjectiveError> {
    let f = |theta: &[f64]| {
        params_model(inst, theta)
            .and_then(|m| objectives::surrogate_batch(&inst.groups, &m, clip).ok())
            .map_or(f64::NAN, |o| o.loss)
    };
    numerics::finite_diff_grad(f, inst.model.params(), h).map_err(|e| ObjectiveError::Policy(e.into()))
}

/// Analytic gradients against central differences on instances whose ratios
/// all lie inside the clip range. The forward loss is differentiated
/// directly, except for CISPO whose weight is a stop-gradient.
pub fn fd_interior_suite(method: Method, cfg: &GradcheckConfig) -> Result<SuiteResult, ObjectiveError> {
    let mut rng = suite_rng(cfg, 1, Some(method));
    let mut out = SuiteResult::new("fd_interior", Some(method), cfg.tolerance);
    for i in 0..cfg.instances {
        let inst = random_instance(&mut rng, RatioMode::Interior, 3, &[])?;
        let clip = instance_config(method, &mut rng);
        let analytic = analytic_grad(&inst, &clip, cfg.fault)?;
        let numeric = match method {
            Method::Cispo => fd_stop_gradient(&inst, &clip, cfg.fd_step)?,
            _ => fd_forward(&inst, &clip, cfg.fd_step)?,
        };
        let err = numerics::max_rel_error(&analytic, &numeric);
        out.observe(err, || format!("{method}: instance {i} interior rel error {err:.3e}"));
    }
    Ok(out)
}

/// Analytic gradients against central differences of the stop-gradient
/// objective on instances with clipped tokens in every case.
pub fn fd_clipped_suite(method: Method, cfg: &GradcheckConfig) -> Result<SuiteResult, ObjectiveError> {
    let mut rng = suite_rng(cfg, 2, Some(method));
    let mut out = SuiteResult::new("fd_clipped", Some(method), cfg.tolerance);
    for i in 0..cfg.instances {
        let inst = random_instance(&mut rng, RatioMode::Spread, 3, &[])?;
        let clip = instance_config(method, &mut rng);
        let analytic = analytic_grad(&inst, &clip, cfg.fault)?;
        let numeric = fd_stop_gradient(&inst, &clip, cfg.fd_step)?;
        let err = numerics::max_rel_error(&analytic, &numeric);
        let [lower, upper, interior] = inst.count_cases(&clip)?;
        out.observe(err, || {
            format!(
                "{method}: instance {i} clipped-ratio rel error {err:.3e} \
                 (tokens lower={lower} upper={upper} interior={interior})"
            )
        });
    }
    Ok(out)
}

/// Grid points `0.01, 0.02, …, 3.00`.
pub fn ratio_grid() -> Vec<f64> {
    (1..=300).map(|i| i as f64 / 100.0).collect()
}

fn case_name(c: ClipCase) -> &'static str {
    match c {
        ClipCase::Lower => "lower",
        ClipCase::Upper => "upper",
        ClipCase::Interior => "interior",
    }
}

/// Every method's coefficient rule against the transcribed tables on the
/// ratio grid. Case selection must match exactly.
pub fn case_table_suite(cfg: &GradcheckConfig) -> SuiteResult {
    let rule = coefficient_rule(cfg.fault);
    let mut out = SuiteResult::new("case_table", None, cfg.exact_tolerance);
    let mut configs: Vec<ClipConfig> = Method::ALL.iter().map(|&m| ClipConfig::with_method(m)).collect();
    let mut scaled = ClipConfig::with_method(Method::GppoGeneral);
    scaled.beta1 = 0.7;
    scaled.beta2 = 1.6;
    configs.push(scaled);
    for clip in &configs {
        for &delta in &ratio_grid() {
            for adv in [-1.0, 1.0] {
                let got = rule(delta, adv, clip);
                let (case, coeff) = reference_coefficient(clip.method, delta, adv, clip);
                let err = if got.case == case {
                    (got.coefficient - coeff).abs()
                } else {
                    f64::INFINITY
                };
                out.observe(err, || {
                    format!(
                        "{}: δ={delta:.2} A={adv:+} expected {} case F={coeff}, got {} case F={}",
                        clip.method,
                        case_name(case),
                        case_name(got.case),
                        got.coefficient
                    )
                });
            }
        }
    }
    // general form at β₁ = β₂ = 1 is GPPO
    let gppo = ClipConfig::with_method(Method::Gppo);
    let general = ClipConfig::with_method(Method::GppoGeneral);
    for &delta in &ratio_grid() {
        for adv in [-1.0, 1.0] {
            let a = rule(delta, adv, &gppo);
            let b = rule(delta, adv, &general);
            let err = if a.case == b.case {
                (a.coefficient - b.coefficient).abs()
            } else {
                f64::INFINITY
            };
            out.observe(err, || {
                format!("gppo_general(β=1) vs gppo: δ={delta:.2} A={adv:+} differ in {} case", case_name(a.case))
            });
        }
    }
    out
}

/// GPPO and Clip-Higher forward losses compared bit for bit.
pub fn forward_equivalence_suite(cfg: &GradcheckConfig) -> Result<SuiteResult, ObjectiveError> {
    let mut rng = suite_rng(cfg, 3, None);
    let mut out = SuiteResult::new("forward_equivalence", None, 0.0);
    for i in 0..cfg.forward_batches {
        let inst = random_instance(&mut rng, RatioMode::Spread, 3, &[])?;
        let mut gppo = instance_config(Method::Gppo, &mut rng);
        let mut higher = ClipConfig::with_method(Method::ClipHigher);
        higher.normalization = gppo.normalization;
        gppo.eps_h = higher.eps_h;
        let a = objectives::surrogate_batch(&inst.groups, &inst.model, &gppo)?.loss;
        let b = objectives::surrogate_batch(&inst.groups, &inst.model, &higher)?.loss;
        let err = if a.to_bits() == b.to_bits() { 0.0 } else { (a - b).abs().max(f64::MIN_POSITIVE) };
        out.observe(err, || format!("batch {i}: gppo forward {a:e} != clip_higher forward {b:e}"));
    }
    Ok(out)
}

/// With `δ = 1` everywhere all methods share one gradient.
pub fn on_policy_suite(cfg: &GradcheckConfig) -> Result<SuiteResult, ObjectiveError> {
    let mut rng = suite_rng(cfg, 4, None);
    let mut out = SuiteResult::new("on_policy_agreement", None, cfg.exact_tolerance);
    for i in 0..cfg.onpolicy_batches {
        let inst = random_instance(&mut rng, RatioMode::OnPolicy, 3, &[])?;
        let mut base = ClipConfig::with_method(Method::Gppo);
        base.normalization = instance_config(Method::Gppo, &mut rng).normalization;
        let reference = analytic_grad(&inst, &base, cfg.fault)?;
        for &method in Method::ALL.iter() {
            let mut clip = ClipConfig::with_method(method);
            clip.normalization = base.normalization;
            let g = analytic_grad(&inst, &clip, cfg.fault)?;
            let err = reference
                .iter()
                .zip(&g)
                .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
            out.observe(err, || format!("batch {i}: {method} differs from gppo by {err:.3e} on-policy"));
        }
    }
    Ok(out)
}

/// Dropping zero-advantage groups rescales the token-level gradient by the
/// surviving token fraction and changes nothing else.
pub fn dilution_suite(cfg: &GradcheckConfig) -> Result<SuiteResult, ObjectiveError> {
    let mut rng = suite_rng(cfg, 5, None);
    let mut out = SuiteResult::new("zero_advantage_dilution", None, cfg.exact_tolerance);
    for i in 0..cfg.dilution_batches {
        let n = 2 + rng.below(3);
        let mut flags: Vec<bool> = (0..n).map(|_| rng.below(2) == 0).collect();
        flags[0] = true;
        flags[n - 1] = false;
        rng.shuffle(&mut flags);
        let inst = random_instance(&mut rng, RatioMode::Spread, n, &flags)?;
        let method = Method::ALL[rng.below(Method::ALL.len())];
        let mut clip = ClipConfig::with_method(method);
        clip.normalization = Normalization::TokenLevel;
        let full = analytic_grad(&inst, &clip, cfg.fault)?;
        let total = inst.num_tokens();
        let (kept, _) = objectives::filter_zero_advantage(inst.groups.clone());
        let filtered_tokens: usize = kept.iter().map(Group::num_tokens).sum();
        let filtered = objectives::surrogate_batch_with(&kept, &inst.model, &clip, coefficient_rule(cfg.fault))?.grad;
        let scale = filtered_tokens as f64 / total as f64;
        let err = full
            .iter()
            .zip(&filtered)
            .fold(0.0, |m: f64, (a, b)| m.max((a - b * scale).abs()));
        out.observe(err, || format!("batch {i} ({method}): dilution identity off by {err:.3e}"));
    }
    Ok(out)
}

/// Runs every suite. Deterministic for a fixed config.
pub fn run_all(cfg: &GradcheckConfig) -> Result<GradcheckReport, ObjectiveError> {
    let mut suites = Vec::new();
    let mut methods = Vec::new();
    for &method in Method::ALL.iter() {
        let interior = fd_interior_suite(method, cfg)?;
        let clipped = fd_clipped_suite(method, cfg)?;
        methods.push(MethodSummary {
            method,
            max_rel_error: interior.max_error.max(clipped.max_error),
            passed: interior.passed && clipped.passed,
        });
        suites.push(interior);
        suites.push(clipped);
    }
    suites.push(case_table_suite(cfg));
    suites.push(forward_equivalence_suite(cfg)?);
    suites.push(on_policy_suite(cfg)?);
    suites.push(dilution_suite(cfg)?);
    let passed = suites.iter().all(|s| s.passed);
    Ok(GradcheckReport {
        format: REPORT_FORMAT.to_string(),
        version: REPORT_VERSION,
        seed: cfg.seed,
        fault: cfg.fault,
        methods,
        suites,
        passed,
    })
}
