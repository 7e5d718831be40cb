//! Acceptance gate. Prints one line per criterion and exits non-zero if any
//! criterion fails. Artifacts are left under the cargo target tmp directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cliplab_cli::{run, CompareSummary, Outcome, RunResult};
use cliplab_core::curation::{self, CorpusRecord};
use cliplab_core::envs::{self, Difficulty};
use cliplab_core::gradcheck::GradcheckReport;
use cliplab_core::objectives::Method;
use cliplab_core::trainer;
use cliplab_core::{SeededRng, TaskKind, TaskSpec, Token};

const HARD_MATH: &str = r#"
total_steps = 200
[model]
kind = "feedforward"
context_window = 16
hidden = 64
init_scale = 0.05
[rollout]
group_size = 8
global_batch_prompts = 32
max_len = 4
[update]
minibatch_prompts = 8
epochs_per_rollout = 2
lr = 0.1
alpha = 0.1
[task]
kind = "binary_math"
difficulty = "hard"
pool_size = 256
"#;

const CODE: &str = r#"
total_steps = 200
[model]
kind = "feedforward"
context_window = 17
hidden = 64
init_scale = 0.05
[rollout]
group_size = 8
global_batch_prompts = 32
max_len = 20
[update]
minibatch_prompts = 8
epochs_per_rollout = 2
lr = 0.1
alpha = 0.1
[objective]
method = "gppo"
[task]
kind = "multi_check_code"
difficulty = "hard"
pool_size = 256
[warmstart]
sft_steps = 90
lr = 0.5
"#;

const ORACLE: &str = r#"
total_steps = 0
[model]
kind = "feedforward"
context_window = 17
hidden = 64
init_scale = 0.05
[rollout]
max_len = 24
[task]
kind = "multi_check_code"
difficulty = "hard"
pool_size = 512
reward_mode = "soft"
[warmstart]
sft_steps = 1500
lr = 0.5
"#;

const ABLATION: &str = r#"
total_steps = 60
[model]
kind = "feedforward"
context_window = 16
hidden = 32
[rollout]
group_size = 8
global_batch_prompts = 16
max_len = 4
[update]
minibatch_prompts = 4
epochs_per_rollout = 2
lr = 0.1
[task]
kind = "binary_math"
difficulty = "hard"
pool_size = 128
"#;

struct Verdict {
    passed: bool,
    detail: String,
}

fn pass(detail: String) -> Verdict {
    Verdict { passed: true, detail }
}

fn fail(detail: String) -> Verdict {
    Verdict { passed: false, detail }
}

fn check(ok: bool, detail: String) -> Verdict {
    Verdict { passed: ok, detail }
}

struct Ctx {
    root: PathBuf,
}

impl Ctx {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn config(&self, name: &str, body: &str) -> PathBuf {
        let p = self.root.join(format!("{name}.toml"));
        fs::write(&p, body).expect("writing config");
        p
    }

    fn cli(&self, args: &[&str]) -> Result<RunResult, String> {
        run(args.iter().map(|s| s.to_string()).collect()).map_err(|e| format!("{e:#}"))
    }
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn gradcheck(ctx: &Ctx) -> Result<(GradcheckReport, Duration), String> {
    let out = ctx.dir("gradcheck");
    let t = Instant::now();
    let res = ctx.cli(&["gradcheck", "--out", path_str(&out)])?;
    let elapsed = t.elapsed();
    match res.outcome {
        Outcome::Gradcheck(r) => Ok((r, elapsed)),
        other => Err(format!("unexpected outcome {other:?}")),
    }
}

fn criterion_1(report: &GradcheckReport, elapsed: Duration) -> Verdict {
    let mut worst = 0.0_f64;
    let mut problems = Vec::new();
    for m in Method::ALL {
        let suite = report
            .suites
            .iter()
            .find(|s| s.suite == "fd_interior" && s.method == Some(m));
        match suite {
            Some(s) if s.passed && s.cases >= 100 && s.max_error < 1e-5 => worst = worst.max(s.max_error),
            Some(s) => problems.push(format!("{}: cases {} max {:.3e} {:?}", m.name(), s.cases, s.max_error, s.failures)),
            None => problems.push(format!("{}: no suite", m.name())),
        }
    }
    let clipped_ok = report.suites.iter().filter(|s| s.suite == "fd_clipped").all(|s| s.passed);
    if !clipped_ok {
        problems.push("clipped-ratio finite-difference suite failed".into());
    }
    if elapsed >= Duration::from_secs(60) {
        problems.push(format!("runtime {elapsed:.1?}"));
    }
    if problems.is_empty() {
        pass(format!(
            "6 methods × ≥100 instances, worst relative error {worst:.2e} < 1e-5, all suites in {elapsed:.1?}"
        ))
    } else {
        fail(problems.join("; "))
    }
}

fn suite_verdict(report: &GradcheckReport, name: &str, what: &str) -> Verdict {
    match report.suites.iter().find(|s| s.suite == name) {
        Some(s) => check(
            s.passed,
            format!("{what}: {} cases, max error {:.2e} (tolerance {:.0e}) {:?}", s.cases, s.max_error, s.tolerance, s.failures),
        ),
        None => fail(format!("suite {name} missing")),
    }
}

fn compare_summary(res: Result<RunResult, String>) -> Result<(CompareSummary, PathBuf), String> {
    let res = res?;
    match res.outcome {
        Outcome::Compare(s) => Ok((s, res.out_dir)),
        other => Err(format!("unexpected outcome {other:?}")),
    }
}

fn criterion_6(ctx: &Ctx) -> Verdict {
    let cfg = ctx.config("hard_math", HARD_MATH);
    let out = ctx.dir("method_compare");
    let t = Instant::now();
    let res = ctx.cli(&[
        "compare", "--config", path_str(&cfg), "--methods", "gppo,clip_higher", "--seeds", "0-9", "--out", path_str(&out),
    ]);
    let elapsed = t.elapsed();
    let (s, dir) = match compare_summary(res) {
        Ok(x) => x,
        Err(e) => return fail(e),
    };
    let (g, c) = (s.variant("gppo").unwrap(), s.variant("clip_higher").unwrap());
    let reach_g = g.reach["clip_higher"];
    let reach_c = c.reach["clip_higher"];
    let ordering = g.endpoint >= c.endpoint;
    let reach_ok = matches!((reach_g, reach_c), (Some(a), Some(b)) if a <= b);
    let timely = elapsed <= Duration::from_secs(15 * 60);
    check(
        ordering && reach_ok && timely && g.complete && c.complete,
        format!(
            "smoothed median endpoint gppo {:.4} vs clip_higher {:.4}; raw final median {:.4} vs {:.4}; \
             steps to reach clip_higher endpoint gppo {reach_g:?} vs clip_higher {reach_c:?}; {elapsed:.0?}; curves {}",
            g.endpoint,
            c.endpoint,
            g.final_mean_reward,
            c.final_mean_reward,
            dir.join("curves.csv").display()
        ),
    )
}

fn criterion_7(ctx: &Ctx) -> Verdict {
    let cfg = ctx.config("code", CODE);
    let out = ctx.dir("reward_modes");
    let res = ctx.cli(&[
        "compare", "--config", path_str(&cfg), "--vary", "task.reward_mode=soft,hard_allpass", "--seeds", "0-9",
        "--out", path_str(&out),
    ]);
    let (s, _) = match compare_summary(res) {
        Ok(x) => x,
        Err(e) => return fail(e),
    };
    let soft = s.variant("task.reward_mode=soft").unwrap();
    let hard = s.variant("task.reward_mode=hard_allpass").unwrap();
    check(
        soft.early_reward_variance < hard.early_reward_variance && soft.complete && hard.complete,
        format!(
            "first-quartile reward variance (median of 10 seeds) soft {:.4} vs hard_allpass {:.4}",
            soft.early_reward_variance, hard.early_reward_variance
        ),
    )
}

struct Planted {
    corpus: Vec<CorpusRecord>,
    eval: Vec<Vec<Token>>,
    planted: BTreeSet<u64>,
}

fn record(prompt: Vec<Token>, source: &str) -> CorpusRecord {
    let task = TaskSpec {
        id: 0,
        answer: envs::code_target(&prompt),
        check_count: prompt.len(),
        prompt_tokens: prompt,
        kind: TaskKind::MultiCheckCode,
        require_think_tags: false,
        difficulty: Difficulty::Hard,
    };
    CorpusRecord { task, source: source.into() }
}

fn has_ngram(prompt: &[Token], index: &BTreeSet<Vec<Token>>, n: usize) -> bool {
    prompt.windows(n).any(|w| index.contains(w))
}

/// 900 clean records, 50 exact duplicates of clean records placed after
/// their originals, 30 records carrying an evaluation 9-gram and 20 records
/// with only 8 checks.
fn planted_corpus() -> Planted {
    const N: usize = 9;
    let mut rng = SeededRng::new(2024, 8);
    let digits = |rng: &mut SeededRng, len: usize| -> Vec<Token> { (0..len).map(|_| rng.below(10) as Token).collect() };
    let eval: Vec<Vec<Token>> = (0..50).map(|_| digits(&mut rng, 16)).collect();
    let index: BTreeSet<Vec<Token>> = eval.iter().flat_map(|s| s.windows(N).map(<[Token]>::to_vec)).collect();

    let mut seen = BTreeSet::new();
    let mut fresh = |rng: &mut SeededRng, len: usize| loop {
        let p = digits(rng, len);
        if !has_ngram(&p, &index, N) && seen.insert(p.clone()) {
            return p;
        }
    };
    let mut base: Vec<(CorpusRecord, bool)> = Vec::new();
    for _ in 0..900 {
        base.push((record(fresh(&mut rng, 16), "clean"), false));
    }
    for i in 0..30 {
        let mut p = fresh(&mut rng, 16);
        let src = &eval[i % eval.len()];
        let from = rng.below(src.len() - N + 1);
        let at = rng.below(16 - N + 1);
        p[at..at + N].copy_from_slice(&src[from..from + N]);
        base.push((record(p, "contaminated"), true));
    }
    for _ in 0..20 {
        base.push((record(fresh(&mut rng, 8), "under_tested"), true));
    }
    rng.shuffle(&mut base);

    let mut picks: Vec<usize> = base.iter().enumerate().filter(|(_, (r, _))| r.source == "clean").map(|(i, _)| i).collect();
    rng.shuffle(&mut picks);
    let mut dup_after: Vec<Vec<CorpusRecord>> = vec![Vec::new(); base.len()];
    for &orig in picks.iter().take(50) {
        let at = orig + rng.below(base.len() - orig);
        let mut copy = base[orig].0.clone();
        copy.source = "duplicate".into();
        dup_after[at].push(copy);
    }
    let mut corpus = Vec::new();
    let mut planted = BTreeSet::new();
    for ((rec, bad), dups) in base.into_iter().zip(dup_after) {
        let items = std::iter::once((rec, bad)).chain(dups.into_iter().map(|d| (d, true)));
        for (mut r, bad) in items {
            r.task.id = corpus.len() as u64;
            if bad {
                planted.insert(r.task.id);
            }
            corpus.push(r);
        }
    }
    Planted { corpus, eval, planted }
}

fn criterion_8(ctx: &Ctx) -> Verdict {
    let p = planted_corpus();
    if p.corpus.len() != 1000 || p.planted.len() != 100 {
        return fail(format!("constructed {} records with {} planted", p.corpus.len(), p.planted.len()));
    }
    let corpus_path = ctx.dir("corpus.jsonl");
    let eval_path = ctx.dir("eval.jsonl");
    curation::write_jsonl(&corpus_path, &p.corpus).expect("writing corpus");
    curation::write_jsonl(&eval_path, &p.eval).expect("writing eval set");

    let oracle_cfg = ctx.config("oracle", ORACLE);
    let oracle_dir = ctx.dir("oracle");
    if let Err(e) = ctx.cli(&["train", "--config", path_str(&oracle_cfg), "--out", path_str(&oracle_dir)]) {
        return fail(format!("oracle training: {e}"));
    }
    let checkpoint = oracle_dir.join("checkpoints").join("step-000000.json");

    let out = ctx.dir("curate");
    let res = ctx.cli(&[
        "curate", "--corpus", path_str(&corpus_path), "--eval", path_str(&eval_path), "--oracle", path_str(&checkpoint),
        "--out", path_str(&out),
    ]);
    let report = match res {
        Ok(RunResult { outcome: Outcome::Curate(r), .. }) => r,
        Ok(other) => return fail(format!("unexpected outcome {:?}", other.outcome)),
        Err(e) => return fail(e),
    };
    let rejected: Vec<curation::Rejected> = curation::read_jsonl(&out.join("rejected.jsonl")).expect("reading rejected");
    let removed: BTreeSet<u64> = rejected.iter().map(|r| r.record.id()).collect();
    let reasons_match = rejected.iter().all(|r| {
        let want = match r.record.source.as_str() {
            "duplicate" => "duplicate",
            "contaminated" => "contaminated",
            "under_tested" => "under_tested",
            _ => "",
        };
        r.reason.label() == want
    });
    let false_removals: Vec<u64> = removed.difference(&p.planted).copied().collect();
    let missed: Vec<u64> = p.planted.difference(&removed).copied().collect();
    let stages: Vec<String> = report.stages.iter().map(|s| format!("{} −{}", s.name, s.removed)).collect();
    let worst = report.pass_stats.iter().map(|s| s.passes).min().unwrap_or(0);
    check(
        false_removals.is_empty() && missed.is_empty() && reasons_match && report.output == 900,
        format!(
            "removed {} of 1000 ({}); kept {}; false removals {false_removals:?}; missed {missed:?}; \
             lowest oracle pass count on clean records {worst}/16",
            removed.len(),
            stages.join(", "),
            report.output
        ),
    )
}

fn criterion_9(ctx: &Ctx) -> Result<(Verdict, PathBuf), String> {
    let cfg = ctx.config("ablation", ABLATION);
    let out = ctx.dir("alpha");
    let (s, dir) = compare_summary(ctx.cli(&[
        "compare", "--config", path_str(&cfg), "--alphas", "0,0.05,0.1,0.2", "--seeds", "0-2", "--out", path_str(&out),
    ]))?;
    let names: Vec<&str> = s.variants.iter().map(|v| v.name.as_str()).collect();
    let complete = s.variants.len() == 4 && s.variants.iter().all(|v| v.complete && v.steps == 60);
    let cells_ok = s.variants.iter().all(|v| {
        (0..3).all(|seed| {
            let cell = dir.join("cells").join(format!("{}-seed{seed}", v.name.replace(['=', '"'], "_")));
            trainer::read_metrics(&cell.join("metrics.jsonl"))
                .map(|m| m.len() == 60 && m.iter().enumerate().all(|(i, r)| r.step == i && r.is_finite()))
                .unwrap_or(false)
        })
    });
    let finals: Vec<String> = s.variants.iter().map(|v| format!("{:.3}", v.final_mean_reward)).collect();
    Ok((
        check(
            complete && cells_ok,
            format!("variants {names:?} × 3 seeds × 60 steps, every record present and finite; final medians {finals:?}"),
        ),
        dir,
    ))
}

fn criterion_10(ctx: &Ctx, compare_dir: Option<&Path>) -> Verdict {
    let cfg = ctx.config("replay_train", &format!("checkpoint_every = 10\ntoken_records = true\n{HARD_MATH}"));
    let train_dir = ctx.dir("replay_src");
    if let Err(e) = ctx.cli(&[
        "train", "--config", path_str(&cfg), "--steps", "25", "--method", "cispo", "--update.epochs_per_rollout", "3",
        "--out", path_str(&train_dir),
    ]) {
        return fail(format!("source run: {e}"));
    }
    let mut sources = vec![train_dir];
    sources.extend(compare_dir.map(Path::to_path_buf));
    let mut lines = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        let manifest = src.join(cliplab_cli::MANIFEST_FILE);
        let out = ctx.dir(&format!("replay_{i}"));
        match ctx.cli(&["replay", path_str(&manifest), "--out", path_str(&out)]) {
            Ok(RunResult { outcome: Outcome::Replay(r), .. }) if r.identical => {
                lines.push(format!("{}: {} files identical", src.file_name().unwrap().to_string_lossy(), r.files_compared))
            }
            Ok(other) => return fail(format!("unexpected outcome {:?}", other.outcome)),
            Err(e) => return fail(e),
        }
    }
    pass(lines.join("; "))
}

fn main() -> ExitCode {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if root.exists() {
        fs::remove_dir_all(&root).expect("clearing previous artifacts");
    }
    fs::create_dir_all(&root).expect("creating artifact root");
    let ctx = Ctx { root };

    let mut verdicts: Vec<(usize, Verdict)> = Vec::new();
    let mut report_line = |n: usize, v: Verdict| {
        println!("criterion {n} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        verdicts.push((n, v));
    };

    match gradcheck(&ctx) {
        Ok((report, elapsed)) => {
            report_line(1, criterion_1(&report, elapsed));
            report_line(2, suite_verdict(&report, "case_table", "δ grid 0.01..3.00 × A ±1 for every method"));
            report_line(3, suite_verdict(&report, "forward_equivalence", "GPPO vs Clip-Higher forward bits"));
            report_line(4, suite_verdict(&report, "on_policy_agreement", "δ = 1 gradients across group methods"));
            report_line(5, suite_verdict(&report, "zero_advantage_dilution", "filtered × kept/total vs unfiltered"));
        }
        Err(e) => {
            for n in 1..=5 {
                report_line(n, fail(format!("gradcheck did not run: {e}")));
            }
        }
    }
    report_line(6, criterion_6(&ctx));
    report_line(7, criterion_7(&ctx));
    report_line(8, criterion_8(&ctx));
    let alpha_dir = match criterion_9(&ctx) {
        Ok((v, dir)) => {
            report_line(9, v);
            Some(dir)
        }
        Err(e) => {
            report_line(9, fail(e));
            None
        }
    };
    report_line(10, criterion_10(&ctx, alpha_dir.as_deref()));

    let failed: Vec<usize> = verdicts.iter().filter(|(_, v)| !v.passed).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", verdicts.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
