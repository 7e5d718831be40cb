//! Synthetic verifiable-reward tasks.
//!
//! Two task kinds share one token vocabulary:
//!
//! * `BinaryMath`: the prompt is a left-to-right arithmetic chain
//!   `a1 op a2 op ... aL` over digits with `op ∈ {+, ×}`, evaluated mod 10.
//!   The answer is a single digit and the reward is ±1.
//! * `MultiCheckCode`: the prompt is a K-digit string `x`; the expected
//!   output is `y_i = (x_i + 1) mod 10`. Each output position is one
//!   independent check, so a response can pass any subset of the K checks.
//!
//! A response may contain a reasoning region delimited by the reserved
//! `OPEN`/`CLOSE` tokens. Digits emitted outside any open region are answer
//! digits; a response is complete once it has emitted as many answer digits
//! as the task expects.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::SeededRng;

pub type Token = u32;

pub const PLUS: Token = 10;
pub const TIMES: Token = 11;
pub const OPEN: Token = 12;
pub const CLOSE: Token = 13;
pub const VOCAB_SIZE: usize = 14;

pub const MATH_CHAIN_EASY: usize = 3;
pub const MATH_CHAIN_HARD: usize = 8;
pub const CODE_CHECKS_EASY: usize = 4;
pub const CODE_CHECKS_HARD: usize = 16;

pub fn is_digit(t: Token) -> bool {
    t < 10
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("task {id} is malformed: {reason}")]
    MalformedTask { id: u64, reason: String },
    #[error("verifier for {expected:?} tasks called on a {found:?} task")]
    WrongKind { expected: TaskKind, found: TaskKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BinaryMath,
    MultiCheckCode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

/// How a response is turned into a scalar reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// ±1 on final correctness.
    Binary,
    /// Fraction of passing checks, in `[0, 1]`.
    Soft,
    /// +1 only when every check passes, −1 otherwise.
    HardAllpass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: u64,
    pub prompt_tokens: Vec<Token>,
    pub kind: TaskKind,
    pub answer: Vec<Token>,
    pub check_count: usize,
    pub require_think_tags: bool,
    pub difficulty: Difficulty,
}

impl TaskSpec {
    /// Number of answer digits a complete response emits.
    pub fn answer_len(&self) -> usize {
        self.answer.len()
    }

    /// True once `response` has emitted all of its answer digits.
    pub fn response_complete(&self, response: &[Token]) -> bool {
        parse_response(response).answer.len() >= self.answer_len()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |reason: String| EnvError::MalformedTask {
            id: self.id,
            reason,
        };
        if self.answer.is_empty() {
            return Err(bad("empty answer".into()));
        }
        if let Some(t) = self.answer.iter().find(|&&t| !is_digit(t)) {
            return Err(bad(format!("answer token {t} is not a digit")));
        }
        if let Some(t) = self
            .prompt_tokens
            .iter()
            .find(|&&t| t as usize >= VOCAB_SIZE)
        {
            return Err(bad(format!("prompt token {t} outside vocabulary")));
        }
        match self.kind {
            TaskKind::BinaryMath => {
                if self.answer.len() != 1 {
                    return Err(bad("math answers are a single digit".into()));
                }
            }
            TaskKind::MultiCheckCode => {
                if self.check_count == 0 {
                    return Err(bad("code tasks need at least one check".into()));
                }
                if self.answer.len() != self.check_count {
                    return Err(bad(format!(
                        "answer length {} differs from check count {}",
                        self.answer.len(),
                        self.check_count
                    )));
                }
            }
        }
        Ok(())
    }

    /// A correct response, used for warm-start demonstrations.
    pub fn reference_response(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.answer.len() + 2);
        if self.require_think_tags {
            out.push(OPEN);
            out.push(CLOSE);
        }
        out.extend_from_slice(&self.answer);
        out
    }
}

/// Left-to-right evaluation of an arithmetic chain mod 10.
pub fn eval_chain(prompt: &[Token]) -> Option<Token> {
    let mut it = prompt.iter();
    let mut acc = *it.next().filter(|t| is_digit(**t))? as u64;
    loop {
        let Some(&op) = it.next() else {
            return Some((acc % 10) as Token);
        };
        let &d = it.next().filter(|t| is_digit(**t))?;
        acc = match op {
            PLUS => (acc + d as u64) % 10,
            TIMES => (acc * d as u64) % 10,
            _ => return None,
        };
    }
}

pub fn code_target(prompt: &[Token]) -> Vec<Token> {
    prompt.iter().map(|&x| (x + 1) % 10).collect()
}

/// Generate one task. The id is 0; set it when building a task set.
pub fn gen_task(rng: &mut SeededRng, kind: TaskKind, difficulty: Difficulty) -> TaskSpec {
    match kind {
        TaskKind::BinaryMath => {
            let len = match difficulty {
                Difficulty::Easy => MATH_CHAIN_EASY,
                Difficulty::Hard => MATH_CHAIN_HARD,
            };
            gen_math_task(rng, len, difficulty)
        }
        TaskKind::MultiCheckCode => {
            let k = match difficulty {
                Difficulty::Easy => CODE_CHECKS_EASY,
                Difficulty::Hard => CODE_CHECKS_HARD,
            };
            gen_code_task(rng, k, difficulty)
        }
    }
}

pub fn gen_math_task(rng: &mut SeededRng, chain_len: usize, difficulty: Difficulty) -> TaskSpec {
    let mut prompt = Vec::with_capacity(2 * chain_len);
    for i in 0..chain_len {
        if i > 0 {
            prompt.push(if rng.below(2) == 0 { PLUS } else { TIMES });
        }
        prompt.push(rng.below(10) as Token);
    }
    let answer = eval_chain(&prompt).expect("generated chain is well formed");
    TaskSpec {
        id: 0,
        prompt_tokens: prompt,
        kind: TaskKind::BinaryMath,
        answer: vec![answer],
        check_count: 1,
        require_think_tags: false,
        difficulty,
    }
}

pub fn gen_code_task(rng: &mut SeededRng, checks: usize, difficulty: Difficulty) -> TaskSpec {
    let prompt: Vec<Token> = (0..checks).map(|_| rng.below(10) as Token).collect();
    TaskSpec {
        id: 0,
        answer: code_target(&prompt),
        prompt_tokens: prompt,
        kind: TaskKind::MultiCheckCode,
        check_count: checks,
        require_think_tags: false,
        difficulty,
    }
}

/// `count` tasks with ids `0..count` drawn from one stream.
pub fn gen_task_set(
    rng: &mut SeededRng,
    count: usize,
    kind: TaskKind,
    difficulty: Difficulty,
    require_think_tags: bool,
) -> Vec<TaskSpec> {
    (0..count)
        .map(|i| {
            let mut t = gen_task(rng, kind, difficulty);
            t.id = i as u64;
            t.require_think_tags = require_think_tags;
            t
        })
        .collect()
}

/// Answer digits and tag structure extracted from a response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub answer: Vec<Token>,
    /// Exactly one `OPEN`, then one `CLOSE`, both before the first answer digit.
    pub tags_well_formed: bool,
}

pub fn parse_response(response: &[Token]) -> ParsedResponse {
    let mut depth = 0usize;
    let mut answer = Vec::new();
    let mut opens = 0;
    let mut closes = 0;
    let mut open_at = None;
    let mut close_at = None;
    let mut first_answer_at = None;
    for (i, &t) in response.iter().enumerate() {
        match t {
            OPEN => {
                opens += 1;
                open_at.get_or_insert(i);
                depth += 1;
            }
            CLOSE => {
                closes += 1;
                close_at.get_or_insert(i);
                depth = depth.saturating_sub(1);
            }
            d if is_digit(d) && depth == 0 => {
                first_answer_at.get_or_insert(i);
                answer.push(d);
            }
            _ => {}
        }
    }
    let tags_well_formed = match (open_at, close_at, first_answer_at) {
        (Some(o), Some(c), Some(a)) => opens == 1 && closes == 1 && o < c && c < a,
        _ => false,
    };
    ParsedResponse {
        answer,
        tags_well_formed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub value: f64,
    pub passes: usize,
    pub total: usize,
    pub tag_violation: bool,
}

fn expect_kind(spec: &TaskSpec, kind: TaskKind) -> Result<(), EnvError> {
    if spec.kind != kind {
        return Err(EnvError::WrongKind {
            expected: kind,
            found: spec.kind,
        });
    }
    spec.validate()
}

fn count_passes(answer: &[Token], expected: &[Token]) -> usize {
    answer
        .iter()
        .zip(expected)
        .filter(|(got, want)| got == want)
        .count()
}

/// +1 iff the answer is right and, when required, the reasoning is wrapped
/// in well-formed think tags; −1 otherwise.
pub fn verify_binary(response: &[Token], spec: &TaskSpec) -> Result<RewardOutcome, EnvError> {
    expect_kind(spec, TaskKind::BinaryMath)?;
    let parsed = parse_response(response);
    let tag_violation = spec.require_think_tags && !parsed.tags_well_formed;
    let correct = parsed.answer.len() >= spec.answer.len()
        && parsed.answer[..spec.answer.len()] == spec.answer[..];
    let pass = correct && !tag_violation;
    Ok(RewardOutcome {
        value: if pass { 1.0 } else { -1.0 },
        passes: usize::from(pass),
        total: 1,
        tag_violation,
    })
}

/// Fraction of passing checks. A tag violation scores 0.
pub fn verify_soft(response: &[Token], spec: &TaskSpec) -> Result<RewardOutcome, EnvError> {
    expect_kind(spec, TaskKind::MultiCheckCode)?;
    let parsed = parse_response(response);
    let tag_violation = spec.require_think_tags && !parsed.tags_well_formed;
    let passes = count_passes(&parsed.answer, &spec.answer);
    let value = if tag_violation {
        0.0
    } else {
        passes as f64 / spec.check_count as f64
    };
    Ok(RewardOutcome {
        value,
        passes,
        total: spec.check_count,
        tag_violation,
    })
}

/// +1 only when all checks pass (and tags are fine), −1 otherwise.
pub fn verify_hard_allpass(response: &[Token], spec: &TaskSpec) -> Result<RewardOutcome, EnvError> {
    let soft = verify_soft(response, spec)?;
    let pass = soft.passes == soft.total && !soft.tag_violation;
    Ok(RewardOutcome {
        value: if pass { 1.0 } else { -1.0 },
        ..soft
    })
}

/// Dispatch on task kind. Math tasks are always scored with
/// [`verify_binary`]; code tasks use `mode`, with `Binary` meaning all-pass.
pub fn verify(response: &[Token], spec: &TaskSpec, mode: RewardMode) -> Result<RewardOutcome, EnvError> {
    match (spec.kind, mode) {
        (TaskKind::BinaryMath, _) => verify_binary(response, spec),
        (TaskKind::MultiCheckCode, RewardMode::Soft) => verify_soft(response, spec),
        (TaskKind::MultiCheckCode, _) => verify_hard_allpass(response, spec),
    }
}

/// True when the response fully solves the task (all checks, tags if required).
pub fn fully_passes(response: &[Token], spec: &TaskSpec) -> Result<bool, EnvError> {
    let out = match spec.kind {
        TaskKind::BinaryMath => verify_binary(response, spec)?,
        TaskKind::MultiCheckCode => verify_hard_allpass(response, spec)?,
    };
    Ok(out.value > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Evaluates the chain on exact integers and reduces once at the end.
    fn brute_force_chain(prompt: &[Token]) -> Token {
        let mut acc: u128 = prompt[0] as u128;
        for pair in prompt[1..].chunks(2) {
            let d = pair[1] as u128;
            acc = if pair[0] == PLUS { acc + d } else { acc * d };
        }
        (acc % 10) as Token
    }

    fn math(answer: Token, tags: bool) -> TaskSpec {
        TaskSpec {
            id: 1,
            prompt_tokens: vec![3, PLUS, 4],
            kind: TaskKind::BinaryMath,
            answer: vec![answer],
            check_count: 1,
            require_think_tags: tags,
            difficulty: Difficulty::Easy,
        }
    }

    #[test]
    fn gen_task_is_deterministic() {
        let a = gen_task(&mut SeededRng::new(5, 9), TaskKind::BinaryMath, Difficulty::Hard);
        let b = gen_task(&mut SeededRng::new(5, 9), TaskKind::BinaryMath, Difficulty::Hard);
        assert_eq!(a, b);
        assert_eq!(a.prompt_tokens.len(), 2 * MATH_CHAIN_HARD - 1);
    }

    #[test]
    fn hard_code_task_has_sixteen_checks() {
        let t = gen_task(&mut SeededRng::new(0, 0), TaskKind::MultiCheckCode, Difficulty::Hard);
        assert_eq!(t.check_count, 16);
        t.validate().unwrap();
    }

    #[test]
    fn binary_verifier_cases() {
        let spec = math(7, true);
        let ok = verify_binary(&[OPEN, PLUS, CLOSE, 7], &spec).unwrap();
        assert_eq!(ok.value, 1.0);
        assert!(!ok.tag_violation);

        let missing_close = verify_binary(&[OPEN, PLUS, 7], &spec).unwrap();
        assert_eq!(missing_close.value, -1.0);
        assert!(missing_close.tag_violation);

        let wrong = verify_binary(&[OPEN, CLOSE, 6], &spec).unwrap();
        assert_eq!(wrong.value, -1.0);
        assert!(!wrong.tag_violation);

        let answer_before_tags = verify_binary(&[7, OPEN, CLOSE], &spec).unwrap();
        assert!(answer_before_tags.tag_violation);

        let no_tags_needed = verify_binary(&[PLUS, 7], &math(7, false)).unwrap();
        assert_eq!(no_tags_needed.value, 1.0);
    }

    #[test]
    fn verifier_rejects_wrong_kind() {
        let code = gen_code_task(&mut SeededRng::new(0, 0), 4, Difficulty::Easy);
        assert!(matches!(
            verify_binary(&[1], &code),
            Err(EnvError::WrongKind { .. })
        ));
        assert!(verify_soft(&[1], &math(1, false)).is_err());
    }

    #[test]
    fn soft_reward_fractions() {
        let mut spec = gen_code_task(&mut SeededRng::new(3, 0), 16, Difficulty::Hard);
        spec.answer = vec![1; 16];
        let mut resp = vec![1, 1, 1, 1];
        resp.extend([2; 12]);
        assert_eq!(verify_soft(&resp, &spec).unwrap().value, 0.25);
        assert_eq!(verify_soft(&[1; 16], &spec).unwrap().value, 1.0);
        assert_eq!(verify_soft(&[2; 16], &spec).unwrap().value, 0.0);
        // Truncated response: missing positions fail.
        assert_eq!(verify_soft(&[1; 8], &spec).unwrap().passes, 8);
    }

    #[test]
    fn hard_allpass_matches_soft_at_endpoints() {
        let spec = gen_code_task(&mut SeededRng::new(4, 0), 4, Difficulty::Easy);
        let all = spec.answer.clone();
        assert_eq!(verify_hard_allpass(&all, &spec).unwrap().value, 1.0);
        let none: Vec<Token> = all.iter().map(|t| (t + 1) % 10).collect();
        assert_eq!(verify_hard_allpass(&none, &spec).unwrap().value, -1.0);
        assert_eq!(verify_soft(&none, &spec).unwrap().value, 0.0);
    }

    #[test]
    fn response_completion_tracks_answer_digits() {
        let spec = math(3, false);
        assert!(!spec.response_complete(&[OPEN, 3, 4]));
        assert!(spec.response_complete(&[OPEN, 3, CLOSE, 4]));
        let parsed = parse_response(&[CLOSE, 5]);
        assert_eq!(parsed.answer, vec![5]);
        assert!(!parsed.tags_well_formed);
    }

    #[test]
    fn reference_response_passes() {
        let mut rng = SeededRng::new(11, 0);
        for tags in [false, true] {
            for kind in [TaskKind::BinaryMath, TaskKind::MultiCheckCode] {
                let mut t = gen_task(&mut rng, kind, Difficulty::Hard);
                t.require_think_tags = tags;
                let r = t.reference_response();
                assert!(t.response_complete(&r));
                assert!(fully_passes(&r, &t).unwrap());
            }
        }
    }

    #[test]
    fn malformed_tasks_are_detected() {
        let mut t = math(3, false);
        t.answer = vec![PLUS];
        assert!(t.validate().is_err());
        let mut c = gen_code_task(&mut SeededRng::new(0, 0), 4, Difficulty::Easy);
        c.check_count = 5;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn generator_answers_match_brute_force(seed in any::<u64>(), hard in any::<bool>()) {
            let d = if hard { Difficulty::Hard } else { Difficulty::Easy };
            let t = gen_task(&mut SeededRng::new(seed, 1), TaskKind::BinaryMath, d);
            prop_assert_eq!(t.answer[0], brute_force_chain(&t.prompt_tokens));
        }

        #[test]
        fn soft_reward_monotone_in_passes(seed in any::<u64>(), passes in 0usize..=16) {
            let spec = gen_code_task(&mut SeededRng::new(seed, 2), 16, Difficulty::Hard);
            let mut resp = spec.answer.clone();
            for t in resp.iter_mut().skip(passes) {
                *t = (*t + 1) % 10;
            }
            let v = verify_soft(&resp, &spec).unwrap().value;
            prop_assert_eq!(v, passes as f64 / 16.0);
            let hard = verify_hard_allpass(&resp, &spec).unwrap().value;
            prop_assert_eq!(hard > 0.0, passes == 16);
        }
    }
}
