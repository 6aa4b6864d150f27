use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{JudgeBackend, JudgeRequest, Provenance};
use crate::data::JudgmentLabel;
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

/// How the simulation treats one (knowledge, question) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairBehavior {
    pub knowledge_id: String,
    pub question_id: String,
    pub gold: JudgmentLabel,
    /// Demo question ids that make the judge answer correctly.
    #[serde(default)]
    pub golden: BTreeSet<String>,
    /// Golden demos that must be present together; at least 1.
    #[serde(default = "one")]
    pub required: usize,
    /// Correctness without enough golden demos; `None` draws it from the
    /// seeded hash of the pair.
    #[serde(default)]
    pub base_correct: Option<bool>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulatedJudgeSpec {
    pub seed: u64,
    /// Probability that a hashed base behavior is correct.
    #[serde(default = "half")]
    pub base_correct_rate: f64,
    pub pairs: Vec<PairBehavior>,
}

fn half() -> f64 {
    0.5
}

impl SimulatedJudgeSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("spec serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Answers correctly iff enough golden demos for the pair appear in the
/// prompt; otherwise emits the pair's fixed base behavior. Depends only on
/// the set of demo ids, never on their order.
#[derive(Debug, Clone)]
pub struct SimulatedJudge {
    seed: u64,
    base_correct_rate: f64,
    pairs: BTreeMap<(String, String), PairBehavior>,
}

impl SimulatedJudge {
    pub fn new(spec: SimulatedJudgeSpec) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for p in spec.pairs {
            if p.required == 0 {
                return Err(Error::Config(format!(
                    "pair {}/{}: required golden count must be at least 1",
                    p.knowledge_id, p.question_id
                )));
            }
            let key = (p.knowledge_id.clone(), p.question_id.clone());
            if pairs.insert(key, p).is_some() {
                return Err(Error::Config("simulated judge spec lists a pair twice".into()));
            }
        }
        Ok(SimulatedJudge {
            seed: spec.seed,
            base_correct_rate: spec.base_correct_rate,
            pairs,
        })
    }

    pub fn behavior(&self, knowledge_id: &str, question_id: &str) -> Option<&PairBehavior> {
        self.pairs
            .get(&(knowledge_id.to_string(), question_id.to_string()))
    }

    pub fn base_correct(&self, pair: &PairBehavior) -> bool {
        pair.base_correct.unwrap_or_else(|| {
            let h = derive_seed(self.seed, &["sim-base", &pair.knowledge_id, &pair.question_id]);
            ((h >> 11) as f64 / (1u64 << 53) as f64) < self.base_correct_rate
        })
    }

    /// Whether a prompt with these demo ids is answered correctly.
    pub fn is_correct<S: AsRef<str>>(&self, pair: &PairBehavior, demo_ids: &[S]) -> bool {
        let present: BTreeSet<&str> = demo_ids.iter().map(|s| s.as_ref()).collect();
        let hits = pair.golden.iter().filter(|g| present.contains(g.as_str())).count();
        hits >= pair.required || self.base_correct(pair)
    }
}

impl JudgeBackend for SimulatedJudge {
    fn complete(&self, request: &JudgeRequest) -> Result<(String, Provenance)> {
        let meta = &request.prompt.meta;
        let pair = self
            .behavior(&meta.knowledge_id, &meta.question_id)
            .ok_or_else(|| {
                Error::Config(format!(
                    "simulated judge has no behavior for {}/{}",
                    meta.knowledge_id, meta.question_id
                ))
            })?;
        let verdict = if self.is_correct(pair, &meta.demo_ids) {
            pair.gold
        } else {
            pair.gold.flipped()
        };
        let text = format!(
            "Simulated judgement of question {} against knowledge {} with {} demonstration(s). {}",
            meta.question_id,
            meta.knowledge_id,
            meta.demo_ids.len(),
            verdict.token()
        );
        Ok((text, Provenance::Simulated))
    }
}
