use std::collections::BTreeSet;

use rand::Rng;

use super::*;
use crate::data::{JudgmentLabel, KnowledgeConcept, Question, TaggingExample};
use crate::episode::{enumerate_returns, RewardMode};
use crate::judge::{CountingJudge, Decoding, PairBehavior, SimulatedJudge, SimulatedJudgeSpec};
use crate::policy::{encode_query, score_actions};

struct Fixture {
    env: TrainingEnv,
    judge: SimulatedJudge,
}

/// One knowledge id, `bank` demos, `pairs` questions; demo 0 is golden for
/// every pair. `base` fixes zero-shot correctness.
fn fixture(bank: usize, pairs: usize, d: usize, base: bool, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let knowledge = KnowledgeConcept {
        id: "k0".into(),
        definition_text: "definition".into(),
    };
    let vec = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let entries: Vec<TaggingExample> = (0..bank)
        .map(|i| {
            TaggingExample::new(
                knowledge.clone(),
                Question {
                    id: format!("demo{i}"),
                    stem_text: format!("demo question {i}"),
                },
                JudgmentLabel::Match,
                Some("reason <Yes>".into()),
            )
            .unwrap()
        })
        .collect();
    let embeddings: Vec<Vec<f64>> = (0..bank).map(|_| vec(&mut rng)).collect();
    let prepared = PreparedBank {
        knowledge: knowledge.clone(),
        x_k: vec(&mut rng),
        entries,
        embeddings,
    };
    let mut behaviors = Vec::new();
    let train: Vec<EpisodePair> = (0..pairs)
        .map(|i| {
            let gold = if i % 2 == 0 { JudgmentLabel::Match } else { JudgmentLabel::NoMatch };
            behaviors.push(PairBehavior {
                knowledge_id: "k0".into(),
                question_id: format!("q{i}"),
                gold,
                golden: BTreeSet::from(["demo0".to_string()]),
                required: 1,
                base_correct: Some(base),
            });
            EpisodePair {
                knowledge_id: "k0".into(),
                question: Question {
                    id: format!("q{i}"),
                    stem_text: format!("question {i}"),
                },
                gold,
                x_q: vec(&mut rng),
                excluded: None,
            }
        })
        .collect();
    let judge = SimulatedJudge::new(SimulatedJudgeSpec {
        seed,
        base_correct_rate: 0.5,
        pairs: behaviors,
    })
    .unwrap();
    Fixture {
        env: TrainingEnv {
            banks: BTreeMap::from([("k0".to_string(), prepared)]),
            train,
            validation: Vec::new(),
        },
        judge,
    }
}

fn small_cfg(variant: Variant, t_max: usize) -> TrainingConfig {
    TrainingConfig {
        variant,
        t_max,
        hidden: 4,
        layers: 1,
        batch_episodes: 16,
        off_policy_epochs: 10,
        total_iterations: 3,
        patience: 0,
        ..TrainingConfig::default()
    }
}

fn session(judge: &dyn crate::judge::JudgeBackend) -> JudgeSession<'_> {
    JudgeSession::new(judge, "simulated", Decoding::default())
}

#[test]
fn first_epoch_ratios_are_exactly_one() {
    let f = fixture(5, 6, 4, false, 1);
    let mut cfg = small_cfg(Variant::FlexSdr, 3);
    cfg.layers = 2;
    let mut params = init_params(4, 4, 2, 9).unwrap();
    let mut adam = Adam::new(cfg.learning_rate, params.num_params());
    for it in 0..3 {
        let batch = collect_rollouts(&params, &f.env, &session(&f.judge), &cfg, it).unwrap();
        let report = ppo_update(&mut params, &mut adam, &batch, &f.env, &cfg).unwrap();
        assert!(report.first_epoch.max_ratio_deviation <= 1e-9);
        assert_eq!(report.first_epoch.clip_fraction, 0.0);
    }
}

#[test]
fn ppo_policy_gradient_reduces_to_vanilla_estimate() {
    let f = fixture(4, 5, 3, false, 2);
    let mut cfg = small_cfg(Variant::FlexSdr, 2);
    cfg.value_loss_weight = 0.0;
    cfg.entropy_weight = 0.0;
    cfg.clip_epsilon = 0.999;
    let params = init_params(3, 3, 1, 4).unwrap();
    let batch = collect_rollouts(&params, &f.env, &session(&f.judge), &cfg, 0).unwrap();
    let (grads, _) = ppo_gradients(&params, &batch, &f.env, &cfg).unwrap();
    // J(θ) = mean_t A_t log π_θ(a_t|s_t), differentiated numerically.
    let objective = |p: &PolicyParameters| {
        let mut j = 0.0;
        for (e, tr) in batch.trajectories.iter().enumerate() {
            let pair = &f.env.train[batch.pairs[e]];
            let bank = &f.env.banks["k0"];
            let trace =
                trace_episode(p, &bank.x_k, &pair.x_q, &bank.embeddings, None, &tr.actions(), true).unwrap();
            for (t, step) in batch.steps.iter().filter(|s| s.episode == e).enumerate() {
                j += step.advantage * trace.action_log_prob(t);
            }
        }
        j / batch.steps.len() as f64
    };
    let analytic = grads.flatten();
    let mut k = 0;
    for ti in 0..params.tensors().len() {
        for e in 0..params.tensors()[ti].2.len() {
            let mut a = params.clone();
            a.tensors_mut()[ti].1[e] += 1e-5;
            let mut b = params.clone();
            b.tensors_mut()[ti].1[e] -= 1e-5;
            let num = -(objective(&a) - objective(&b)) / 2e-5;
            let rel = (num - analytic[k]).abs() / (num.abs() + analytic[k].abs()).max(1e-5);
            assert!(rel < 1e-4, "param {k}: {num} vs {}", analytic[k]);
            k += 1;
        }
    }
}

#[test]
fn zero_advantages_leave_only_value_and_entropy_terms() {
    let f = fixture(4, 4, 3, false, 3);
    let mut cfg = small_cfg(Variant::FlexSdr, 2);
    let params = init_params(3, 3, 1, 4).unwrap();
    let mut batch = collect_rollouts(&params, &f.env, &session(&f.judge), &cfg, 0).unwrap();
    batch.steps.iter_mut().for_each(|s| s.advantage = 0.0);
    let (_, stats) = ppo_gradients(&params, &batch, &f.env, &cfg).unwrap();
    assert_eq!(stats.policy_loss, 0.0);
    cfg.value_loss_weight = 0.0;
    cfg.entropy_weight = 0.0;
    let (g, _) = ppo_gradients(&params, &batch, &f.env, &cfg).unwrap();
    assert!(g.flatten().iter().all(|v| *v == 0.0));
}

#[test]
fn uniform_policy_entropy_is_log_of_action_count() {
    let f = fixture(6, 3, 3, false, 4);
    let params = PolicyParameters::zeros(crate::policy::PolicyShape {
        embedding_dim: 3,
        hidden: 2,
        layers: 1,
    });
    for (variant, actions) in [(Variant::FlexSdr, 7.0f64), (Variant::RetIcl, 6.0)] {
        let cfg = small_cfg(variant, 1);
        let batch = collect_rollouts(&params, &f.env, &session(&f.judge), &cfg, 0).unwrap();
        let (_, stats) = ppo_gradients(&params, &batch, &f.env, &cfg).unwrap();
        assert!((stats.entropy - actions.ln()).abs() < 1e-12);
    }
}

#[test]
fn rollouts_are_deterministic_and_bounded_in_queries() {
    let f = fixture(5, 7, 4, false, 5);
    let cfg = small_cfg(Variant::FlexSdr, 2);
    let params = init_params(4, 4, 1, 1).unwrap();
    let counting = CountingJudge::new(&f.judge);
    let a = collect_rollouts(&params, &f.env, &session(&counting), &cfg, 3).unwrap();
    assert!(counting.count() <= cfg.batch_episodes * 3);
    let b = collect_rollouts(&params, &f.env, &session(&f.judge), &cfg, 3).unwrap();
    assert_eq!(a, b);
    let mut threaded = cfg.clone();
    threaded.threads = 3;
    assert_eq!(collect_rollouts(&params, &f.env, &session(&f.judge), &threaded, 3).unwrap(), a);
}

#[test]
fn all_correct_judge_returns_match_enumeration() {
    let f = fixture(5, 6, 4, true, 6);
    let mut cfg = small_cfg(Variant::FlexSdr, 2);
    cfg.normalize_advantages = false;
    let rv = cfg.retriever().unwrap();
    let table = enumerate_returns(2, &[rv.gamma], rv.omega, RewardMode::PerStep, true).unwrap();
    let params = init_params(4, 4, 1, 2).unwrap();
    let batch = collect_rollouts(&params, &f.env, &session(&f.judge), &cfg, 0).unwrap();
    for (e, tr) in batch.trajectories.iter().enumerate() {
        let mut pattern = String::from("[✓]");
        for s in &tr.steps {
            pattern.push_str(if s.action == Action::Stop { ",-" } else { ",✓" });
        }
        assert_eq!(tr.returns[0], table.return_of(&pattern, 0).unwrap(), "{pattern}");
        for s in batch.steps.iter().filter(|s| s.episode == e) {
            assert_eq!(s.advantage, s.ret - s.old_value);
        }
    }
    let best = table.rows.iter().filter(|r| r.pattern.starts_with("[✓]")).map(|r| r.returns[0]).fold(f64::MIN, f64::max);
    assert!(batch.trajectories.iter().all(|t| t.returns[0] <= best));
}

#[test]
fn ppo_solves_two_armed_bandit() {
    let f = fixture(2, 8, 4, false, 7);
    let mut cfg = small_cfg(Variant::RetIcl, 1);
    cfg.total_iterations = 200;
    cfg.off_policy_epochs = 20;
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &f.env, &session(&f.judge), dir.path(), &TrainOptions::default()).unwrap();
    let TrainedModel::Retriever(params) = out.last else { panic!() };
    let bank = &f.env.banks["k0"];
    for pair in &f.env.train {
        let s = encode_query(&params, &bank.x_k, &pair.x_q, 2).unwrap();
        let dist = score_actions(&s, &params, &bank.embeddings, false).unwrap();
        assert!(dist.probs[0] > 0.99, "{:?}", dist.probs);
    }
}

#[test]
fn reticl_training_never_stops() {
    let f = fixture(5, 4, 4, false, 8);
    let cfg = small_cfg(Variant::RetIcl, 3);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &f.env, &session(&f.judge), dir.path(), &TrainOptions::default()).unwrap();
    assert!(out.log.iter().all(|l| l.stop_actions == 0 && l.mean_demos == 3.0));
}

#[test]
fn zero_iterations_return_initialization() {
    let f = fixture(3, 2, 4, false, 9);
    let mut cfg = small_cfg(Variant::FlexSdr, 2);
    cfg.total_iterations = 0;
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &f.env, &session(&f.judge), dir.path(), &TrainOptions::default()).unwrap();
    let init = init_params(4, cfg.hidden, cfg.layers, derive_seed(cfg.seed, &["init"])).unwrap();
    assert_eq!(out.model, TrainedModel::Retriever(init));
    assert!(dir.path().join("policy.bin").exists());
}

#[test]
fn resume_is_bit_identical_and_refuses_foreign_config() {
    let f = fixture(4, 6, 4, false, 10);
    let mut cfg = small_cfg(Variant::FlexSdr, 2);
    cfg.total_iterations = 3;
    let full = tempfile::tempdir().unwrap();
    let a = train(&cfg, &f.env, &session(&f.judge), full.path(), &TrainOptions::default()).unwrap();

    let split = tempfile::tempdir().unwrap();
    let mut partial = cfg.clone();
    partial.total_iterations = 2;
    train(&partial, &f.env, &session(&f.judge), split.path(), &TrainOptions::default()).unwrap();
    let resume = TrainOptions {
        resume: true,
        ..TrainOptions::default()
    };
    let b = train(&cfg, &f.env, &session(&f.judge), split.path(), &resume).unwrap();
    assert_eq!(a.last.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.last.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.log, b.log);
    assert_eq!(
        fs::read(full.path().join("training_log.jsonl")).unwrap(),
        fs::read(split.path().join("training_log.jsonl")).unwrap()
    );

    let mut other = cfg.clone();
    other.learning_rate = 0.5;
    assert!(matches!(
        train(&other, &f.env, &session(&f.judge), split.path(), &resume),
        Err(Error::Config(_))
    ));
}

#[test]
fn promptpg_learns_the_golden_demo_and_is_deterministic() {
    let f = fixture(5, 8, 4, false, 11);
    let mut cfg = small_cfg(Variant::PromptPg, 1);
    cfg.total_iterations = 150;
    cfg.learning_rate = 0.02;
    cfg.hidden = 8;
    let d1 = tempfile::tempdir().unwrap();
    let a = train(&cfg, &f.env, &session(&f.judge), d1.path(), &TrainOptions::default()).unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let b = train(&cfg, &f.env, &session(&f.judge), d2.path(), &TrainOptions::default()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.last, b.last);
    let TrainedModel::PromptPg(p) = a.last else { panic!() };
    let bank = &f.env.banks["k0"];
    for pair in &f.env.train {
        let scores = candidate_scores(&p, &bank.x_k, &pair.x_q, &bank.embeddings).unwrap();
        let lp = crate::policy::log_softmax(&scores);
        assert!(lp[0].exp() > 0.95, "{:?}", lp.iter().map(|v| v.exp()).collect::<Vec<_>>());
    }
}

#[test]
fn config_file_rules() {
    let cfg = TrainingConfig::from_toml_str("variant = \"flexreticr\"\nt_max = 2\n").unwrap();
    assert_eq!(cfg.retriever().unwrap().omega, 0.5);
    let cfg = TrainingConfig::from_toml_str("variant = \"reticl\"\ngamma = 0.5\n").unwrap();
    let rv = cfg.retriever().unwrap();
    assert_eq!((rv.gamma, rv.stop_enabled, rv.reward_mode), (1.0, false, RewardMode::FinalOnly));
    assert_eq!(cfg.warnings().len(), 1);
    let cfg = TrainingConfig::from_toml_str("").unwrap();
    let rv = cfg.retriever().unwrap();
    assert_eq!((rv.gamma, rv.omega), (0.99, 1.0));
    assert_eq!((cfg.value_loss_weight, cfg.entropy_weight, cfg.off_policy_epochs), (0.5, 0.01, 80));
    assert!(TrainingConfig::from_toml_str("variant = \"nope\"").is_err());
    assert!(TrainingConfig::from_toml_str("clip_epsilon = 1.5").is_err());
    assert!(TrainingConfig::from_toml_str("mystery = 1").is_err());
    let round = TrainingConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(round, cfg);
    let mut longer = cfg.clone();
    longer.total_iterations += 10;
    assert_eq!(longer.digest(), cfg.digest());
    longer.seed += 1;
    assert_ne!(longer.digest(), cfg.digest());
}
