use cliplab_core::numerics::median;
use cliplab_core::objectives::{self, ClipConfig, Method, Normalization};
use cliplab_core::policy::{Checkpoint, OptimizerState};
use cliplab_core::trainer::{self, ModelKindName, TrainConfig};
use cliplab_core::{Difficulty, TaskKind};

fn small() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.total_steps = 4;
    cfg.rollout.global_batch_prompts = 8;
    cfg.rollout.group_size = 4;
    cfg.update.minibatch_prompts = 4;
    cfg.task.pool_size = 32;
    cfg.model.hidden = 16;
    cfg.update.lr = Some(0.2);
    cfg
}

#[test]
fn checkpoint_round_trip_then_update_matches() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let first = trainer::train(&cfg, Some(dir.path())).unwrap();
    let path = first.final_checkpoint.clone().unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.model, first.model);
    assert_eq!(loaded.optimizer.as_ref(), Some(&first.optimizer));

    let pool = trainer::task_pool(&cfg);
    let mut one = cfg.clone();
    one.total_steps = 1;
    let a = trainer::train_from(&one, &pool, first.model.clone(), first.optimizer.clone(), 4, None).unwrap();
    let b = trainer::train_from(&one, &pool, loaded.model, loaded.optimizer.unwrap(), 4, None).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn adam_checkpoint_round_trip_then_update_matches() {
    let mut cfg = small();
    cfg.update.optimizer = cliplab_core::policy::OptimizerKind::Adam;
    cfg.update.lr = Some(0.01);
    let dir = tempfile::tempdir().unwrap();
    let first = trainer::train(&cfg, Some(dir.path())).unwrap();
    let loaded = Checkpoint::load(&first.final_checkpoint.unwrap()).unwrap();
    let pool = trainer::task_pool(&cfg);
    let mut one = cfg.clone();
    one.total_steps = 1;
    let a = trainer::train_from(&one, &pool, first.model, first.optimizer, 4, None).unwrap();
    let b = trainer::train_from(&one, &pool, loaded.model, loaded.optimizer.unwrap(), 4, None).unwrap();
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn zero_advantage_filter_rescales_rollout_gradients() {
    let mut cfg = small();
    cfg.update.alpha = 0.0;
    cfg.objective.normalization = Normalization::TokenLevel;
    let pool = trainer::task_pool(&cfg);
    let model = trainer::init_model(&cfg).unwrap();
    let mut checked = 0;
    for step in 0..6 {
        let prompts = trainer::step_prompts(&cfg, &pool, step);
        let groups = trainer::rollout_phase(&model, &prompts, &cfg, step).unwrap();
        let (kept, dropped) = objectives::filter_zero_advantage(groups.clone());
        if dropped == 0 || kept.is_empty() {
            continue;
        }
        let full = trainer::minibatch_gradient(&groups, &model, &cfg).unwrap();
        let filt = trainer::minibatch_gradient(&kept, &model, &cfg).unwrap();
        let total: usize = groups.iter().map(|g| g.num_tokens()).sum();
        let kept_tokens: usize = kept.iter().map(|g| g.num_tokens()).sum();
        let scale = kept_tokens as f64 / total as f64;
        for (a, b) in full.grad.iter().zip(&filt.grad) {
            assert!((a - b * scale).abs() <= 1e-12, "{a} vs {}", b * scale);
        }
        checked += 1;
    }
    assert!(checked > 0, "no rollout batch had degenerate groups");
}

#[test]
fn on_policy_single_update_is_method_independent() {
    let mut cfg = small();
    cfg.update.minibatch_prompts = cfg.rollout.global_batch_prompts;
    cfg.update.alpha = 0.0;
    let pool = trainer::task_pool(&cfg);
    let base = trainer::init_model(&cfg).unwrap();
    let prompts = trainer::step_prompts(&cfg, &pool, 0);
    let groups = trainer::rollout_phase(&base, &prompts, &cfg, 0).unwrap();
    let mut params = Vec::new();
    for method in [Method::Gppo, Method::GrpoToken, Method::Cispo, Method::ClipHigher] {
        let mut c = cfg.clone();
        c.objective = ClipConfig::with_method(method);
        let mut model = base.clone();
        let mut opt = OptimizerState::new(c.update.optimizer, model.num_params());
        trainer::update_phase(&groups, &mut model, &mut opt, &c, 0, None).unwrap();
        params.push(model.params().to_vec());
    }
    for p in &params[1..] {
        let diff = p.iter().zip(&params[0]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-12, "{diff}");
    }
}

#[test]
fn sft_mixing_path_is_exercised() {
    let mut cfg = small();
    cfg.update.alpha = 0.1;
    let out = trainer::train(&cfg, None).unwrap();
    assert!(out.metrics.iter().any(|m| m.sft_loss > 0.0));
    assert!(out.metrics.iter().all(|m| (m.loss - (m.rl_loss + 0.1 * m.sft_loss)).abs() < 1e-12));
}

#[test]
fn rollouts_do_not_depend_on_thread_count() {
    let cfg = small();
    let pool = trainer::task_pool(&cfg);
    let model = trainer::init_model(&cfg).unwrap();
    let prompts = trainer::step_prompts(&cfg, &pool, 0);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| trainer::rollout_phase(&model, &prompts, &cfg, 0).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn uniform_start_improves_on_easy_math_for_every_method() {
    for method in Method::ALL {
        let mut early = Vec::new();
        let mut late = Vec::new();
        for seed in 0..10 {
            let mut cfg = TrainConfig::default();
            cfg.seed = seed;
            cfg.total_steps = 50;
            cfg.model.kind = ModelKindName::Tabular;
            cfg.task.kind = TaskKind::BinaryMath;
            cfg.task.difficulty = Difficulty::Easy;
            cfg.rollout.max_len = 4;
            cfg.objective = ClipConfig::with_method(method);
            let m = trainer::train(&cfg, None).unwrap().metrics;
            early.push(m[..10].iter().map(|s| s.mean_reward).sum::<f64>() / 10.0);
            late.push(m[40..].iter().map(|s| s.mean_reward).sum::<f64>() / 10.0);
        }
        let (e, l) = (median(&early), median(&late));
        assert!(l > e, "{method}: reward {e} → {l}");
    }
}
