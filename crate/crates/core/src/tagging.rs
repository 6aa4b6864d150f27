//! Tagging pipelines and their evaluation over a set of pairs.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::data::{JudgmentLabel, TaggingExample};
use crate::episode::{run_episode, EpisodePair, PreparedBank, RetrieverVariantConfig};
use crate::error::{Error, Result};
use crate::eval::{MetricReport, PairOutcome};
use crate::judge::JudgeSession;
use crate::par::parallel_map;
use crate::policy::{DecodeMode, PolicyParameters};
use crate::prompt::{build_few_shot_prompt, build_zero_shot_prompt};
use crate::seeds::derive_seed;
use crate::trainer::promptpg::{available_mask, run_promptpg_episode, PromptPgParams};

#[derive(Debug, Clone, PartialEq)]
pub struct TagResult {
    pub predicted: Option<JudgmentLabel>,
    pub demos_used: usize,
    /// Free-form audit record for this pair.
    pub audit: serde_json::Value,
}

pub trait Tagger: Sync {
    fn name(&self) -> String;
    fn tag(&self, pair: &EpisodePair, bank: &PreparedBank, judge: &JudgeSession<'_>) -> Result<TagResult>;
}

fn ask(
    bank: &PreparedBank,
    pair: &EpisodePair,
    demos: &[usize],
    judge: &JudgeSession<'_>,
) -> Result<TagResult> {
    let prompt = if demos.is_empty() {
        build_zero_shot_prompt(&bank.knowledge, &pair.question)
    } else {
        let ex: Vec<&TaggingExample> = demos.iter().map(|&i| &bank.entries[i]).collect();
        build_few_shot_prompt(&bank.knowledge, &pair.question, &ex)?
    };
    let demo_ids = prompt.meta.demo_ids.clone();
    let response = judge.ask(prompt)?;
    Ok(TagResult {
        predicted: response.parsed.verdict.label(),
        demos_used: demos.len(),
        audit: json!({
            "demo_ids": demo_ids,
            "judgment": response.parsed,
        }),
    })
}

pub struct ZeroShotTagger;

impl Tagger for ZeroShotTagger {
    fn name(&self) -> String {
        "zero-shot".into()
    }

    fn tag(&self, pair: &EpisodePair, bank: &PreparedBank, judge: &JudgeSession<'_>) -> Result<TagResult> {
        ask(bank, pair, &[], judge)
    }
}

/// `shots` demos drawn uniformly without replacement, seeded per pair.
pub struct RandomShotTagger {
    pub shots: usize,
    pub seed: u64,
}

impl Tagger for RandomShotTagger {
    fn name(&self) -> String {
        format!("{}-shot", self.shots)
    }

    fn tag(&self, pair: &EpisodePair, bank: &PreparedBank, judge: &JudgeSession<'_>) -> Result<TagResult> {
        let pool: Vec<usize> = available_mask(bank, pair)
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.then_some(i))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed,
            &["random-shots", &pair.knowledge_id, &pair.question.id],
        ));
        let k = self.shots.min(pool.len());
        let demos: Vec<usize> = sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        ask(bank, pair, &demos, judge)
    }
}

/// Greedy decoding of a trained retriever.
pub struct RetrieverTagger {
    pub label: String,
    pub params: PolicyParameters,
    pub config: RetrieverVariantConfig,
}

impl Tagger for RetrieverTagger {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn tag(&self, pair: &EpisodePair, bank: &PreparedBank, judge: &JudgeSession<'_>) -> Result<TagResult> {
        if bank.is_empty() {
            return ask(bank, pair, &[], judge);
        }
        // Greedy decoding never draws from the rng.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = run_episode(pair, bank, &self.params, judge, &self.config, DecodeMode::Greedy, &mut rng)?;
        let ids: Vec<&str> = traj.selected().iter().map(|&i| bank.entries[i].question.id.as_str()).collect();
        Ok(TagResult {
            predicted: traj.prediction(),
            demos_used: traj.demos_used(),
            audit: json!({
                "demo_ids": ids,
                "judgment": traj.final_judgment(),
                "trajectory": traj,
            }),
        })
    }
}

/// Greedy top-k of a trained one-shot selector.
pub struct PromptPgTagger {
    pub params: PromptPgParams,
    pub shots: usize,
}

impl Tagger for PromptPgTagger {
    fn name(&self) -> String {
        "promptpg".into()
    }

    fn tag(&self, pair: &EpisodePair, bank: &PreparedBank, judge: &JudgeSession<'_>) -> Result<TagResult> {
        if bank.is_empty() {
            return ask(bank, pair, &[], judge);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = run_promptpg_episode(pair, bank, &self.params, judge, self.shots, DecodeMode::Greedy, &mut rng)?;
        let ids: Vec<&str> = ep.selected.iter().map(|&i| bank.entries[i].question.id.as_str()).collect();
        Ok(TagResult {
            predicted: ep.judgment.verdict.label(),
            demos_used: ep.selected.len(),
            audit: json!({
                "demo_ids": ids,
                "judgment": ep.judgment,
            }),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub outcomes: Vec<PairOutcome>,
    /// One JSON line per pair, in input order, errored pairs included.
    pub audit: Vec<String>,
}

/// Tags every pair with at most `threads` judge calls in flight. Pairs whose
/// judge call fails are recorded as errored and excluded from the metrics.
pub fn evaluate(
    tagger: &dyn Tagger,
    pairs: &[EpisodePair],
    banks: &BTreeMap<String, PreparedBank>,
    judge: &JudgeSession<'_>,
    threads: usize,
) -> Result<Evaluation> {
    let name = tagger.name();
    let results = parallel_map(pairs, threads, |_, pair| {
        let bank = banks
            .get(&pair.knowledge_id)
            .ok_or_else(|| Error::Contract(format!("no bank for knowledge `{}`", pair.knowledge_id)))?;
        match tagger.tag(pair, bank, judge) {
            Ok(r) => Ok(Ok(r)),
            Err(e @ Error::BackendUnavailable { .. }) => Ok(Err(e.to_string())),
            Err(e) => Err(e),
        }
    });
    let mut outcomes = Vec::with_capacity(pairs.len());
    let mut audit = Vec::with_capacity(pairs.len());
    let mut errored = 0;
    for (pair, result) in pairs.iter().zip(results) {
        let base = json!({
            "pipeline": name,
            "knowledge_id": pair.knowledge_id,
            "question_id": pair.question.id,
            "gold": pair.gold,
        });
        let mut line = base.as_object().cloned().expect("object");
        match result? {
            Ok(r) => {
                outcomes.push(PairOutcome {
                    knowledge_id: pair.knowledge_id.clone(),
                    question_id: pair.question.id.clone(),
                    gold: pair.gold,
                    predicted: r.predicted,
                    demos_used: r.demos_used,
                });
                line.insert("predicted".into(), json!(r.predicted));
                line.insert("demos_used".into(), json!(r.demos_used));
                if let serde_json::Value::Object(extra) = r.audit {
                    line.extend(extra);
                }
            }
            Err(message) => {
                errored += 1;
                line.insert("error".into(), json!(message));
            }
        }
        audit.push(serde_json::Value::Object(line).to_string());
    }
    Ok(Evaluation {
        report: MetricReport::from_outcomes(&name, &outcomes, errored),
        outcomes,
        audit,
    })
}
