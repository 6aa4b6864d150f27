//! Embedding-similarity taggers: threshold and top-K decisions over cosine
//! scores, with exhaustive grid search.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{cosine_similarity, Embedder};
use crate::data::{DemonstrationBank, JudgmentLabel, TaggingExample};
use crate::error::{Error, Result};
use crate::eval::{ConfusionCounts, Metrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Question against the knowledge definition.
    KnowledgeQuestion,
    /// Question against the bank's positive demo questions (max).
    QuestionQuestion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BaselineConfig {
    Threshold { eta: f64 },
    TopK { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub knowledge_id: String,
    pub question_id: String,
    pub gold: JudgmentLabel,
    pub similarity: f64,
}

pub fn score_pool(
    eval: &[TaggingExample],
    banks: &BTreeMap<String, DemonstrationBank>,
    embedder: &Embedder,
    mode: SimilarityMode,
) -> Result<Vec<ScoredPair>> {
    let questions: Vec<&str> = eval.iter().map(|e| e.question.stem_text.as_str()).collect();
    let xq = embedder.embed_many(&questions)?;
    let mut out = Vec::with_capacity(eval.len());
    match mode {
        SimilarityMode::KnowledgeQuestion => {
            let knowledge: Vec<&str> = eval.iter().map(|e| e.knowledge.definition_text.as_str()).collect();
            let xk = embedder.embed_many(&knowledge)?;
            for ((e, q), k) in eval.iter().zip(&xq).zip(&xk) {
                out.push(scored(e, cosine_similarity(k, q)?));
            }
        }
        SimilarityMode::QuestionQuestion => {
            let mut positives: BTreeMap<&str, Vec<_>> = BTreeMap::new();
            for (kid, bank) in banks {
                let texts: Vec<&str> = bank
                    .entries
                    .iter()
                    .filter(|d| d.label == JudgmentLabel::Match)
                    .map(|d| d.question.stem_text.as_str())
                    .collect();
                positives.insert(kid.as_str(), if texts.is_empty() { vec![] } else { embedder.embed_many(&texts)? });
            }
            for (e, q) in eval.iter().zip(&xq) {
                let mut best = -1.0f64;
                for d in positives.get(e.knowledge.id.as_str()).into_iter().flatten() {
                    best = best.max(cosine_similarity(q, d)?);
                }
                out.push(scored(e, best));
            }
        }
    }
    Ok(out)
}

fn scored(e: &TaggingExample, similarity: f64) -> ScoredPair {
    ScoredPair {
        knowledge_id: e.knowledge.id.clone(),
        question_id: e.question.id.clone(),
        gold: e.label,
        similarity,
    }
}

/// Predictions for every pair in the pool, aligned with it.
pub fn predict_all(pool: &[ScoredPair], cfg: BaselineConfig) -> Vec<JudgmentLabel> {
    match cfg {
        BaselineConfig::Threshold { eta } => pool
            .iter()
            .map(|p| if p.similarity >= eta { JudgmentLabel::Match } else { JudgmentLabel::NoMatch })
            .collect(),
        BaselineConfig::TopK { k } => {
            let mut by_knowledge: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, p) in pool.iter().enumerate() {
                by_knowledge.entry(&p.knowledge_id).or_default().push(i);
            }
            let mut out = vec![JudgmentLabel::NoMatch; pool.len()];
            for idx in by_knowledge.values_mut() {
                idx.sort_by(|&a, &b| {
                    pool[b]
                        .similarity
                        .partial_cmp(&pool[a].similarity)
                        .unwrap_or(Ordering::Equal)
                        .then_with(|| pool[a].question_id.cmp(&pool[b].question_id))
                });
                for &i in idx.iter().take(k) {
                    out[i] = JudgmentLabel::Match;
                }
            }
            out
        }
    }
}

pub fn baseline_predict(
    pool: &[ScoredPair],
    knowledge_id: &str,
    question_id: &str,
    cfg: BaselineConfig,
) -> Option<JudgmentLabel> {
    let i = pool
        .iter()
        .position(|p| p.knowledge_id == knowledge_id && p.question_id == question_id)?;
    Some(predict_all(pool, cfg)[i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: BaselineConfig,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: BaselineConfig,
    pub table: Vec<GridRow>,
}

/// Preference among equal-F1 configs: thresholds before top-K, larger eta,
/// smaller K.
fn tie_rank(a: &BaselineConfig, b: &BaselineConfig) -> Ordering {
    use BaselineConfig::*;
    match (a, b) {
        (Threshold { eta: x }, Threshold { eta: y }) => y.partial_cmp(x).unwrap_or(Ordering::Equal),
        (TopK { k: x }, TopK { k: y }) => x.cmp(y),
        (Threshold { .. }, TopK { .. }) => Ordering::Less,
        (TopK { .. }, Threshold { .. }) => Ordering::Greater,
    }
}

pub fn grid_search_baseline(pool: &[ScoredPair], space: &[BaselineConfig]) -> Result<GridSearchResult> {
    if space.is_empty() {
        return Err(Error::Domain("baseline grid search over an empty config space".into()));
    }
    let table: Vec<GridRow> = space
        .iter()
        .map(|&config| {
            let mut counts = ConfusionCounts::default();
            for (p, pred) in pool.iter().zip(predict_all(pool, config)) {
                counts.record(p.gold, pred);
            }
            GridRow { config, counts, metrics: counts.metrics() }
        })
        .collect();
    let best = table
        .iter()
        .min_by(|a, b| {
            b.metrics
                .f1
                .partial_cmp(&a.metrics.f1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| tie_rank(&a.config, &b.config))
        })
        .map(|r| r.config)
        .expect("non-empty table");
    Ok(GridSearchResult { best, table })
}

/// eta in {0.00, 0.05, ..., 0.95} and K in {1, ..., 50}.
pub fn default_grid() -> Vec<BaselineConfig> {
    let mut out: Vec<BaselineConfig> = (0..20)
        .map(|i| BaselineConfig::Threshold { eta: i as f64 / 20.0 })
        .collect();
    out.extend((1..=50).map(|k| BaselineConfig::TopK { k }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(k: &str, q: &str, gold: JudgmentLabel, sim: f64) -> ScoredPair {
        ScoredPair { knowledge_id: k.into(), question_id: q.into(), gold, similarity: sim }
    }

    fn separable_pool() -> Vec<ScoredPair> {
        // positives in [0.5, 0.6), negatives in (0.4, 0.5): only eta = 0.5 on
        // a 0.1-step grid separates them.
        let mut pool = Vec::new();
        for i in 0..20 {
            let k = format!("k{}", i % 3);
            let s = i as f64 / 200.0;
            pool.push(pair(&k, &format!("p{i}"), JudgmentLabel::Match, 0.5 + s));
            pool.push(pair(&k, &format!("n{i}"), JudgmentLabel::NoMatch, 0.499 - s));
        }
        pool
    }

    #[test]
    fn extreme_configs() {
        let pool = separable_pool();
        assert!(predict_all(&pool, BaselineConfig::Threshold { eta: -1.0 })
            .iter()
            .all(|l| *l == JudgmentLabel::Match));
        assert!(predict_all(&pool, BaselineConfig::TopK { k: 0 })
            .iter()
            .all(|l| *l == JudgmentLabel::NoMatch));
    }

    #[test]
    fn grid_recovers_planted_threshold() {
        let pool = separable_pool();
        let space: Vec<_> = (0..10).map(|i| BaselineConfig::Threshold { eta: i as f64 / 10.0 }).collect();
        let res = grid_search_baseline(&pool, &space).unwrap();
        assert_eq!(res.best, BaselineConfig::Threshold { eta: 0.5 });
        let best = res.table.iter().find(|r| r.config == res.best).unwrap();
        assert_eq!(best.metrics.f1, 1.0);
        assert_eq!(res.table.len(), 10);
    }

    #[test]
    fn singleton_and_empty_spaces() {
        let pool = separable_pool();
        let only = BaselineConfig::TopK { k: 3 };
        assert_eq!(grid_search_baseline(&pool, &[only]).unwrap().best, only);
        assert!(matches!(grid_search_baseline(&pool, &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn equal_f1_tie_breaks() {
        let pool = vec![pair("k", "a", JudgmentLabel::Match, 0.9), pair("k", "b", JudgmentLabel::NoMatch, 0.1)];
        let space = [
            BaselineConfig::TopK { k: 1 },
            BaselineConfig::Threshold { eta: 0.3 },
            BaselineConfig::Threshold { eta: 0.5 },
        ];
        assert_eq!(grid_search_baseline(&pool, &space).unwrap().best, BaselineConfig::Threshold { eta: 0.5 });
        let ks = [BaselineConfig::TopK { k: 1 }, BaselineConfig::TopK { k: 1 }];
        assert_eq!(grid_search_baseline(&pool, &ks).unwrap().best, BaselineConfig::TopK { k: 1 });
    }

    #[test]
    fn top_k_ties_break_by_question_id() {
        let pool = vec![
            pair("k", "b", JudgmentLabel::Match, 0.5),
            pair("k", "a", JudgmentLabel::Match, 0.5),
        ];
        assert_eq!(
            predict_all(&pool, BaselineConfig::TopK { k: 1 }),
            vec![JudgmentLabel::NoMatch, JudgmentLabel::Match]
        );
        assert_eq!(baseline_predict(&pool, "k", "a", BaselineConfig::TopK { k: 1 }), Some(JudgmentLabel::Match));
    }

    fn arb_pool() -> impl Strategy<Value = Vec<ScoredPair>> {
        proptest::collection::vec((0..3usize, -1.0f64..1.0, any::<bool>()), 1..30).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (k, s, g))| {
                    let gold = if g { JudgmentLabel::Match } else { JudgmentLabel::NoMatch };
                    pair(&format!("k{k}"), &format!("q{i:03}"), gold, s)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn threshold_is_monotone(pool in arb_pool(), lo in -1.0f64..1.0, d in 0.0f64..1.0) {
            let a = predict_all(&pool, BaselineConfig::Threshold { eta: lo });
            let b = predict_all(&pool, BaselineConfig::Threshold { eta: lo + d });
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(!(*x == JudgmentLabel::NoMatch && *y == JudgmentLabel::Match));
            }
        }

        #[test]
        fn top_k_grows_by_at_most_one_per_knowledge(pool in arb_pool(), k in 0usize..10) {
            let a = predict_all(&pool, BaselineConfig::TopK { k });
            let b = predict_all(&pool, BaselineConfig::TopK { k: k + 1 });
            let mut diff: BTreeMap<&str, usize> = BTreeMap::new();
            for ((p, x), y) in pool.iter().zip(&a).zip(&b) {
                if x != y {
                    prop_assert_eq!(*x, JudgmentLabel::NoMatch);
                    *diff.entry(&p.knowledge_id).or_default() += 1;
                }
            }
            prop_assert!(diff.values().all(|&n| n <= 1));
        }
    }
}
