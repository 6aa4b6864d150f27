//! Synthetic environments with a known optimum: each pair has one golden
//! demonstration whose embedding is close to the question's, and a
//! simulated judge that answers correctly iff the golden demo is present
//! (or, for "easy" knowledge ids, always).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{JudgmentLabel, KnowledgeConcept, Question, TaggingDataset, TaggingExample};
use crate::episode::{EpisodePair, PreparedBank, Variant};
use crate::error::{Error, Result};
use crate::judge::{PairBehavior, SimulatedJudge, SimulatedJudgeSpec};
use crate::trainer::{TrainingConfig, TrainingEnv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub num_knowledge: usize,
    pub bank_size: usize,
    pub dim: usize,
    pub num_pairs: usize,
    pub num_train: usize,
    /// Norm of the perturbation added to the golden embedding.
    pub query_noise: f64,
    /// Norm of the per-knowledge perturbation of each demo prototype.
    pub demo_spread: f64,
    /// Fraction of pairs labelled Match.
    pub match_fraction: f64,
    /// Fraction of knowledge ids whose zero-shot answer is already correct.
    pub easy_fraction: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            num_knowledge: 24,
            bank_size: 10,
            dim: 16,
            num_pairs: 240,
            num_train: 80,
            query_noise: 0.3,
            demo_spread: 0.3,
            match_fraction: 0.2,
            easy_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Trainer settings that solve the planted environment well inside the
/// iteration budget. The discount is kept below 1/2: at larger γ, adding
/// extra demos after the golden one out-earns stopping right away.
pub fn planted_training(variant: Variant) -> TrainingConfig {
    TrainingConfig {
        variant,
        t_max: 4,
        gamma: (variant == Variant::FlexSdr).then_some(0.25),
        omega: (variant == Variant::FlexSdr).then_some(1.0),
        hidden: 32,
        layers: 1,
        learning_rate: 3e-3,
        off_policy_epochs: 4,
        batch_episodes: 64,
        total_iterations: 300,
        patience: 0,
        ..TrainingConfig::default()
    }
}

pub struct PlantedEnv {
    pub env: TrainingEnv,
    pub eval: Vec<EpisodePair>,
    pub judge: SimulatedJudge,
    /// Knowledge ids answered correctly without demonstrations.
    pub easy: BTreeSet<String>,
    /// Golden bank index per (knowledge id, question id).
    pub golden: BTreeMap<(String, String), usize>,
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn perturb(base: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = unit(rng, base.len());
    normalize(base.iter().zip(&noise).map(|(a, b)| a + scale * b).collect())
}

/// `n` unit vectors, orthonormal while `n <= d`.
fn prototypes(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v = unit(rng, d);
        if out.len() < d {
            for p in &out {
                let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(p).for_each(|(x, y)| *x -= dot * y);
            }
            if v.iter().map(|x| x * x).sum::<f64>() < 1e-6 {
                continue;
            }
            v = normalize(v);
        }
        out.push(v);
    }
    out
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn build_planted(cfg: &PlantedConfig) -> Result<PlantedEnv> {
    if cfg.num_knowledge == 0 || cfg.bank_size == 0 || cfg.dim == 0 || cfg.num_train > cfg.num_pairs {
        return Err(Error::Domain("invalid planted configuration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<String> = (0..cfg.num_knowledge).map(|i| format!("k{i:02}")).collect();
    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut rng);
    let n_easy = (cfg.easy_fraction * cfg.num_knowledge as f64).round() as usize;
    let easy: BTreeSet<String> = shuffled.into_iter().take(n_easy).collect();

    let protos = prototypes(&mut rng, cfg.bank_size, cfg.dim);
    let mut banks = BTreeMap::new();
    for id in &ids {
        let knowledge = KnowledgeConcept {
            id: id.clone(),
            definition_text: format!("planted knowledge {id}"),
        };
        let entries = (0..cfg.bank_size)
            .map(|j| {
                TaggingExample::new(
                    knowledge.clone(),
                    Question {
                        id: format!("{id}-demo{j}"),
                        stem_text: format!("planted demonstration {j} of {id}"),
                    },
                    JudgmentLabel::Match,
                    Some("planted rationale <Yes>".into()),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let embeddings = protos.iter().map(|p| perturb(p, cfg.demo_spread, &mut rng)).collect();
        banks.insert(
            id.clone(),
            PreparedBank {
                x_k: unit(&mut rng, cfg.dim),
                knowledge,
                entries,
                embeddings,
            },
        );
    }

    let mut pairs = Vec::with_capacity(cfg.num_pairs);
    let mut behaviors = Vec::with_capacity(cfg.num_pairs);
    let mut golden = BTreeMap::new();
    for i in 0..cfg.num_pairs {
        let kid = &ids[i % cfg.num_knowledge];
        let bank = &banks[kid];
        let g = rng.gen_range(0..cfg.bank_size);
        let x_q = perturb(&bank.embeddings[g], cfg.query_noise, &mut rng);
        let gold = if rng.gen_bool(cfg.match_fraction) {
            JudgmentLabel::Match
        } else {
            JudgmentLabel::NoMatch
        };
        let qid = format!("q{i:04}");
        behaviors.push(PairBehavior {
            knowledge_id: kid.clone(),
            question_id: qid.clone(),
            gold,
            golden: BTreeSet::from([bank.entries[g].question.id.clone()]),
            required: 1,
            base_correct: Some(easy.contains(kid)),
        });
        golden.insert((kid.clone(), qid.clone()), g);
        pairs.push(EpisodePair {
            knowledge_id: kid.clone(),
            question: Question {
                id: qid,
                stem_text: format!("planted question {i}"),
            },
            gold,
            x_q,
            excluded: None,
        });
    }
    let eval = pairs.split_off(cfg.num_train);
    let judge = SimulatedJudge::new(SimulatedJudgeSpec {
        seed: cfg.seed,
        base_correct_rate: 0.0,
        pairs: behaviors,
    })?;
    Ok(PlantedEnv {
        env: TrainingEnv {
            banks,
            validation: pairs.clone(),
            train: pairs,
        },
        eval,
        judge,
        easy,
        golden,
    })
}

/// A small text dataset shaped like a real one: every knowledge id gets
/// `per_knowledge` questions, a fifth of them positive, all with rationales.
pub fn synthetic_dataset(num_knowledge: usize, per_knowledge: usize, seed: u64) -> Result<TaggingDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(num_knowledge * per_knowledge);
    for k in 0..num_knowledge {
        let knowledge = KnowledgeConcept {
            id: format!("K{k:02}"),
            definition_text: format!("Knowledge point {k}: solving problems of family {k}."),
        };
        for q in 0..per_knowledge {
            let label = if q % 5 == 0 { JudgmentLabel::Match } else { JudgmentLabel::NoMatch };
            let family = if label == JudgmentLabel::Match || num_knowledge < 2 {
                k
            } else {
                (k + 1 + rng.gen_range(0..num_knowledge - 1)) % num_knowledge
            };
            examples.push(TaggingExample::new(
                knowledge.clone(),
                Question {
                    id: format!("Q{k:02}-{q:03}"),
                    stem_text: format!("Question {q} drawn from family {family}, variant {}.", rng.gen_range(0..1000)),
                },
                label,
                Some(format!("The question is from family {family}. {}", label.token())),
            )?);
        }
    }
    TaggingDataset::from_examples(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_planting() {
        let p = build_planted(&PlantedConfig::default()).unwrap();
        assert_eq!(p.env.train.len(), 80);
        assert_eq!(p.eval.len(), 160);
        assert_eq!(p.env.banks.len(), 24);
        assert!(p.env.banks.values().all(|b| b.len() == 10));
        assert!(p.easy.is_empty());
        for pair in p.env.train.iter().chain(&p.eval) {
            let bank = &p.env.banks[&pair.knowledge_id];
            let g = p.golden[&(pair.knowledge_id.clone(), pair.question.id.clone())];
            let cos = |x: &[f64]| x.iter().zip(&pair.x_q).map(|(a, b)| a * b).sum::<f64>();
            assert!(cos(&bank.embeddings[g]) > 0.9);
            assert!((0..10).all(|j| j == g || cos(&bank.embeddings[j]) < cos(&bank.embeddings[g])));
            let b = p.judge.behavior(&pair.knowledge_id, &pair.question.id).unwrap();
            assert!(!p.judge.is_correct(b, &Vec::<String>::new()));
            assert!(p.judge.is_correct(b, &[bank.entries[g].question.id.clone()]));
        }
        let same = build_planted(&PlantedConfig::default()).unwrap();
        assert_eq!(same.golden, p.golden);
    }

    #[test]
    fn synthetic_dataset_is_valid_and_seeded() {
        let a = synthetic_dataset(4, 20, 3).unwrap();
        assert_eq!(a.len(), 80);
        assert_eq!(a.knowledge_ids().len(), 4);
        assert_eq!(a.label_counts("K00"), (4, 16));
        assert_eq!(a.to_jsonl(), synthetic_dataset(4, 20, 3).unwrap().to_jsonl());
    }

    #[test]
    fn case_study_halves() {
        let p = build_planted(&PlantedConfig {
            easy_fraction: 0.5,
            ..PlantedConfig::default()
        })
        .unwrap();
        assert_eq!(p.easy.len(), 12);
        for pair in &p.eval {
            let b = p.judge.behavior(&pair.knowledge_id, &pair.question.id).unwrap();
            assert_eq!(p.judge.is_correct(b, &Vec::<String>::new()), p.easy.contains(&pair.knowledge_id));
        }
    }
}
