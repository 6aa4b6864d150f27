//! Glue from a split dataset to embedded banks and episode pairs.

use std::collections::{BTreeMap, BTreeSet};

use crate::data::{Split, TaggingDataset, TaggingExample};
use crate::embedding::Embedder;
use crate::episode::{EpisodePair, PreparedBank};
use crate::error::{Error, Result};
use crate::judge::{PairBehavior, SimulatedJudgeSpec};

/// One bank per knowledge id in the dataset, empty where the demo split
/// has nothing for it. Demos are embedded by question stem.
pub fn prepare_banks(dataset: &TaggingDataset, embedder: &Embedder) -> Result<BTreeMap<String, PreparedBank>> {
    let mut by_id = dataset.banks_from_assignment();
    let mut out = BTreeMap::new();
    for kid in dataset.knowledge_ids() {
        let knowledge = dataset.knowledge(kid).expect("listed id exists").clone();
        let entries = by_id.remove(kid).map(|b| b.entries).unwrap_or_default();
        let x_k = embedder.embed_text(&knowledge.definition_text)?.to_f64();
        let stems: Vec<&str> = entries.iter().map(|e| e.question.stem_text.as_str()).collect();
        let embeddings = if stems.is_empty() {
            Vec::new()
        } else {
            embedder.embed_many(&stems)?.iter().map(|v| v.to_f64()).collect()
        };
        out.insert(
            kid.to_string(),
            PreparedBank {
                knowledge,
                x_k,
                entries,
                embeddings,
            },
        );
    }
    Ok(out)
}

fn to_pairs(examples: &[&TaggingExample], embedder: &Embedder) -> Result<Vec<EpisodePair>> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let stems: Vec<&str> = examples.iter().map(|e| e.question.stem_text.as_str()).collect();
    let vectors = embedder.embed_many(&stems)?;
    Ok(examples
        .iter()
        .zip(vectors)
        .map(|(e, v)| EpisodePair {
            knowledge_id: e.knowledge.id.clone(),
            question: e.question.clone(),
            gold: e.label,
            x_q: v.to_f64(),
            excluded: None,
        })
        .collect())
}

/// Eval-split pairs in dataset order.
pub fn eval_pairs(dataset: &TaggingDataset, embedder: &Embedder) -> Result<Vec<EpisodePair>> {
    let eval: Vec<&TaggingExample> = dataset.in_split(Split::Eval).collect();
    to_pairs(&eval, embedder)
}

/// Every bank entry as a query against its own bank with itself masked.
/// Banks with a single entry contribute nothing.
pub fn demo_pairs(banks: &BTreeMap<String, PreparedBank>) -> Vec<EpisodePair> {
    banks
        .values()
        .filter(|b| b.len() > 1)
        .flat_map(|b| {
            b.entries.iter().enumerate().map(move |(i, e)| EpisodePair {
                knowledge_id: b.knowledge.id.clone(),
                question: e.question.clone(),
                gold: e.label,
                x_q: b.embeddings[i].clone(),
                excluded: Some(i),
            })
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// A simulated judge for arbitrary data: each pair's golden demo is the
/// most similar offered bank entry (lowest index on ties) and its base
/// behavior is drawn from the seeded hash.
pub fn nearest_demo_spec(
    banks: &BTreeMap<String, PreparedBank>,
    pairs: &[EpisodePair],
    seed: u64,
    base_correct_rate: f64,
) -> Result<SimulatedJudgeSpec> {
    let mut seen = BTreeSet::new();
    let mut behaviors = Vec::new();
    for p in pairs {
        if !seen.insert((p.knowledge_id.as_str(), p.question.id.as_str())) {
            continue;
        }
        let bank = banks
            .get(&p.knowledge_id)
            .ok_or_else(|| Error::Contract(format!("no bank for knowledge `{}`", p.knowledge_id)))?;
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in bank.embeddings.iter().enumerate() {
            if Some(i) == p.excluded {
                continue;
            }
            let s = cosine(e, &p.x_q);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        behaviors.push(PairBehavior {
            knowledge_id: p.knowledge_id.clone(),
            question_id: p.question.id.clone(),
            gold: p.gold,
            golden: best
                .map(|(i, _)| BTreeSet::from([bank.entries[i].question.id.clone()]))
                .unwrap_or_default(),
            required: 1,
            base_correct: None,
        });
    }
    Ok(SimulatedJudgeSpec {
        seed,
        base_correct_rate,
        pairs: behaviors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_dataset, split_demo_bank};
    use crate::embedding::HashEmbedder;

    fn dataset() -> TaggingDataset {
        let mut lines = Vec::new();
        for k in 0..3 {
            for q in 0..8 {
                lines.push(
                    serde_json::json!({
                        "knowledge_id": format!("k{k}"),
                        "knowledge_text": format!("definition {k}"),
                        "question_id": format!("q{q}"),
                        "question_text": format!("stem {k} {q}"),
                        "label": (q % 2) as i64,
                        "rationale": if q % 2 == 1 { "because <Yes>" } else { "because <No>" },
                    })
                    .to_string(),
                );
            }
        }
        let ds = parse_dataset(&lines.join("\n")).unwrap();
        split_demo_bank(&ds, 2, 1).assigned_dataset(&ds)
    }

    #[test]
    fn banks_pairs_and_spec_line_up() {
        let ds = dataset();
        let embedder = Embedder::new(Box::new(HashEmbedder::new("h", 8, 0)), None);
        let banks = prepare_banks(&ds, &embedder).unwrap();
        assert_eq!(banks.len(), 3);
        assert!(banks.values().all(|b| b.len() == 4 && b.embeddings.len() == 4 && b.x_k.len() == 8));
        let eval = eval_pairs(&ds, &embedder).unwrap();
        assert_eq!(eval.len(), 12);
        let demo = demo_pairs(&banks);
        assert_eq!(demo.len(), 12);
        assert!(demo.iter().all(|p| p.excluded.is_some()));

        let all: Vec<EpisodePair> = eval.iter().chain(&demo).cloned().collect();
        let spec = nearest_demo_spec(&banks, &all, 3, 0.5).unwrap();
        assert_eq!(spec.pairs.len(), 24);
        for (p, b) in all.iter().zip(&spec.pairs) {
            let bank = &banks[&p.knowledge_id];
            let g = b.golden.iter().next().unwrap();
            let gi = bank.entries.iter().position(|e| &e.question.id == g).unwrap();
            assert_ne!(Some(gi), p.excluded);
            for j in 0..bank.len() {
                if Some(j) != p.excluded {
                    assert!(cosine(&bank.embeddings[j], &p.x_q) <= cosine(&bank.embeddings[gi], &p.x_q));
                }
            }
        }
    }
}
