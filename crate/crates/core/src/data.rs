//! Tagging records, JSONL ingestion and the demonstration/evaluation split.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::prompt::{JUDGMENT_NO, JUDGMENT_YES};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeConcept {
    pub id: String,
    pub definition_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub stem_text: String,
}

/// Binary judgment `y`: `Match` is 1, `NoMatch` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JudgmentLabel {
    Match,
    NoMatch,
}

impl JudgmentLabel {
    pub fn from_int(value: i64) -> Result<Self> {
        match value {
            1 => Ok(JudgmentLabel::Match),
            0 => Ok(JudgmentLabel::NoMatch),
            other => Err(Error::Domain(format!("label must be 0 or 1, got {other}"))),
        }
    }

    pub fn as_int(self) -> u8 {
        match self {
            JudgmentLabel::Match => 1,
            JudgmentLabel::NoMatch => 0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            JudgmentLabel::Match => JudgmentLabel::NoMatch,
            JudgmentLabel::NoMatch => JudgmentLabel::Match,
        }
    }

    /// The judgment token a correct response ends with.
    pub fn token(self) -> &'static str {
        match self {
            JudgmentLabel::Match => JUDGMENT_YES,
            JudgmentLabel::NoMatch => JUDGMENT_NO,
        }
    }
}

impl fmt::Display for JudgmentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_int())
    }
}

impl Serialize for JudgmentLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_int())
    }
}

impl<'de> Deserialize<'de> for JudgmentLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        JudgmentLabel::from_int(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggingExample {
    pub knowledge: KnowledgeConcept,
    pub question: Question,
    pub label: JudgmentLabel,
    pub rationale: Option<String>,
}

impl TaggingExample {
    pub fn new(
        knowledge: KnowledgeConcept,
        question: Question,
        label: JudgmentLabel,
        rationale: Option<String>,
    ) -> Result<Self> {
        let example = TaggingExample {
            knowledge,
            question,
            label,
            rationale,
        };
        example.validate()?;
        Ok(example)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knowledge.id.is_empty() {
            return Err(Error::Domain("knowledge id is empty".into()));
        }
        if self.knowledge.definition_text.trim().is_empty() {
            return Err(Error::Domain(format!(
                "knowledge `{}` has an empty definition",
                self.knowledge.id
            )));
        }
        if self.question.stem_text.trim().is_empty() {
            return Err(Error::Domain(format!(
                "question `{}` has an empty stem",
                self.question.id
            )));
        }
        if let Some(rationale) = &self.rationale {
            let token = rationale_token(rationale)?;
            if token != self.label {
                return Err(Error::Domain(format!(
                    "rationale of question `{}` ends with {} but the label is {}",
                    self.question.id,
                    token.token(),
                    self.label
                )));
            }
        }
        Ok(())
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.knowledge.id, &self.question.id)
    }
}

/// The verdict carried by an expert rationale: exactly one judgment token,
/// placed as the final non-whitespace content.
pub fn rationale_token(rationale: &str) -> Result<JudgmentLabel> {
    let count = rationale.matches(JUDGMENT_YES).count() + rationale.matches(JUDGMENT_NO).count();
    if count != 1 {
        return Err(Error::Domain(format!(
            "rationale must contain exactly one judgment token, found {count}"
        )));
    }
    let trimmed = rationale.trim_end();
    if trimmed.ends_with(JUDGMENT_YES) {
        Ok(JudgmentLabel::Match)
    } else if trimmed.ends_with(JUDGMENT_NO) {
        Ok(JudgmentLabel::NoMatch)
    } else {
        Err(Error::Domain(
            "rationale judgment token must be its final content".into(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Demo,
    Eval,
}

/// One line of the JSONL dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub knowledge_id: String,
    pub knowledge_text: String,
    pub question_id: String,
    pub question_text: String,
    pub label: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaggingDataset {
    examples: Vec<TaggingExample>,
    splits: Vec<Split>,
}

impl TaggingDataset {
    /// Builds a dataset, checking key uniqueness and per-knowledge
    /// definition consistency. Every example starts in the eval split.
    pub fn from_examples(examples: Vec<TaggingExample>) -> Result<Self> {
        let splits = vec![Split::Eval; examples.len()];
        Self::with_assignment(examples, splits)
    }

    pub fn with_assignment(examples: Vec<TaggingExample>, splits: Vec<Split>) -> Result<Self> {
        if examples.len() != splits.len() {
            return Err(Error::Contract(format!(
                "{} examples but {} split assignments",
                examples.len(),
                splits.len()
            )));
        }
        let mut keys = HashSet::new();
        let mut definitions: HashMap<&str, &str> = HashMap::new();
        for (i, ex) in examples.iter().enumerate() {
            ex.validate()?;
            if !keys.insert(ex.key()) {
                return Err(Error::DuplicateKey {
                    knowledge_id: ex.knowledge.id.clone(),
                    question_id: ex.question.id.clone(),
                    line: i + 1,
                });
            }
            let def = definitions
                .entry(&ex.knowledge.id)
                .or_insert(&ex.knowledge.definition_text);
            if *def != ex.knowledge.definition_text {
                return Err(Error::Domain(format!(
                    "knowledge `{}` has conflicting definitions",
                    ex.knowledge.id
                )));
            }
        }
        Ok(TaggingDataset { examples, splits })
    }

    pub fn examples(&self) -> &[TaggingExample] {
        &self.examples
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Knowledge ids in first-appearance order.
    pub fn knowledge_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.examples
            .iter()
            .filter(|e| seen.insert(e.knowledge.id.as_str()))
            .map(|e| e.knowledge.id.as_str())
            .collect()
    }

    pub fn knowledge(&self, id: &str) -> Option<&KnowledgeConcept> {
        self.examples
            .iter()
            .find(|e| e.knowledge.id == id)
            .map(|e| &e.knowledge)
    }

    /// (positives, negatives) for one knowledge id.
    pub fn label_counts(&self, knowledge_id: &str) -> (usize, usize) {
        self.examples
            .iter()
            .filter(|e| e.knowledge.id == knowledge_id)
            .fold((0, 0), |(p, n), e| match e.label {
                JudgmentLabel::Match => (p + 1, n),
                JudgmentLabel::NoMatch => (p, n + 1),
            })
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &TaggingExample> {
        self.examples
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(e, _)| e)
    }

    /// Banks built from the split assignment already stored in the dataset.
    /// Demo-split examples without a rationale are left out.
    pub fn banks_from_assignment(&self) -> BTreeMap<String, DemonstrationBank> {
        let mut banks: BTreeMap<String, DemonstrationBank> = BTreeMap::new();
        for ex in self.in_split(Split::Demo).filter(|e| e.rationale.is_some()) {
            banks
                .entry(ex.knowledge.id.clone())
                .or_insert_with(|| DemonstrationBank::empty(&ex.knowledge.id))
                .entries
                .push(ex.clone());
        }
        banks
    }

    pub fn to_records(&self) -> Vec<DatasetRecord> {
        self.examples
            .iter()
            .zip(&self.splits)
            .map(|(e, s)| DatasetRecord {
                knowledge_id: e.knowledge.id.clone(),
                knowledge_text: e.knowledge.definition_text.clone(),
                question_id: e.question.id.clone(),
                question_text: e.question.stem_text.clone(),
                label: e.label.as_int() as i64,
                rationale: e.rationale.clone(),
                split: Some(*s),
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in self.to_records() {
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Parses JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_dataset(text: &str) -> Result<TaggingDataset> {
    let mut examples = Vec::new();
    let mut splits = Vec::new();
    let mut keys: HashMap<(String, String), usize> = HashMap::new();
    let mut definitions: HashMap<String, String> = HashMap::new();

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let label = JudgmentLabel::from_int(record.label)
            .map_err(|e| Error::Domain(format!("line {line_no}: {e}")))?;
        let key = (record.knowledge_id.clone(), record.question_id.clone());
        if keys.insert(key, line_no).is_some() {
            return Err(Error::DuplicateKey {
                knowledge_id: record.knowledge_id,
                question_id: record.question_id,
                line: line_no,
            });
        }
        if let Some(def) = definitions.get(&record.knowledge_id) {
            if *def != record.knowledge_text {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!(
                        "knowledge `{}` redefined with different text",
                        record.knowledge_id
                    ),
                });
            }
        } else {
            definitions.insert(record.knowledge_id.clone(), record.knowledge_text.clone());
        }
        let example = TaggingExample {
            knowledge: KnowledgeConcept {
                id: record.knowledge_id,
                definition_text: record.knowledge_text,
            },
            question: Question {
                id: record.question_id,
                stem_text: record.question_text,
            },
            label,
            rationale: record.rationale,
        };
        example
            .validate()
            .map_err(|e| Error::Domain(format!("line {line_no}: {e}")))?;
        examples.push(example);
        splits.push(record.split.unwrap_or(Split::Eval));
    }
    Ok(TaggingDataset { examples, splits })
}

pub fn load_dataset(path: &Path) -> Result<TaggingDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Per-knowledge pool of candidate demonstrations.
#[derive(Debug, Clone, PartialEq)]
pub struct DemonstrationBank {
    pub knowledge_id: String,
    pub entries: Vec<TaggingExample>,
    /// One vector per entry once embedded; empty before that.
    pub embeddings: Vec<EmbeddingVector>,
}

impl DemonstrationBank {
    pub fn empty(knowledge_id: &str) -> Self {
        DemonstrationBank {
            knowledge_id: knowledge_id.to_string(),
            entries: Vec::new(),
            embeddings: Vec::new(),
        }
    }

    pub fn new(knowledge_id: &str, entries: Vec<TaggingExample>) -> Result<Self> {
        let bank = DemonstrationBank {
            knowledge_id: knowledge_id.to_string(),
            entries,
            embeddings: Vec::new(),
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.knowledge.id != self.knowledge_id {
                return Err(Error::Contract(format!(
                    "bank `{}` holds an entry of knowledge `{}`",
                    self.knowledge_id, e.knowledge.id
                )));
            }
            if e.rationale.is_none() {
                return Err(Error::Contract(format!(
                    "bank entry `{}` has no rationale",
                    e.question.id
                )));
            }
        }
        if !self.embeddings.is_empty() && self.embeddings.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "bank `{}` has {} entries but {} embeddings",
                self.knowledge_id,
                self.entries.len(),
                self.embeddings.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, question_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.question.id == question_id)
    }
}

#[derive(Debug, Clone)]
pub struct DemoSplit {
    pub banks: BTreeMap<String, DemonstrationBank>,
    pub eval: Vec<TaggingExample>,
    /// Split assignment aligned with the source dataset's examples.
    pub assignment: Vec<Split>,
    pub warnings: Vec<String>,
}

impl DemoSplit {
    pub fn assigned_dataset(&self, dataset: &TaggingDataset) -> TaggingDataset {
        TaggingDataset {
            examples: dataset.examples.clone(),
            splits: self.assignment.clone(),
        }
    }
}

/// Draws up to `per_label` rationale-bearing positives and negatives per
/// knowledge id into its bank; everything else becomes the eval set.
pub fn split_demo_bank(dataset: &TaggingDataset, per_label: usize, seed: u64) -> DemoSplit {
    let mut assignment = vec![Split::Eval; dataset.len()];
    let mut warnings = Vec::new();
    let mut banks = BTreeMap::new();

    for kid in dataset.knowledge_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["split", kid]));
        let mut chosen = Vec::new();
        for label in [JudgmentLabel::Match, JudgmentLabel::NoMatch] {
            let mut pool: Vec<usize> = dataset
                .examples
                .iter()
                .enumerate()
                .filter(|(_, e)| e.knowledge.id == kid && e.label == label && e.rationale.is_some())
                .map(|(i, _)| i)
                .collect();
            if pool.len() < per_label {
                warnings.push(format!(
                    "knowledge `{kid}`: only {} rationale-bearing examples with label {label}, wanted {per_label}",
                    pool.len()
                ));
            }
            pool.shuffle(&mut rng);
            chosen.extend(pool.into_iter().take(per_label));
        }
        if chosen.is_empty() {
            continue;
        }
        chosen.sort_unstable();
        for &i in &chosen {
            assignment[i] = Split::Demo;
        }
        let entries = chosen.iter().map(|&i| dataset.examples[i].clone()).collect();
        banks.insert(
            kid.to_string(),
            DemonstrationBank {
                knowledge_id: kid.to_string(),
                entries,
                embeddings: Vec::new(),
            },
        );
    }

    let eval = dataset
        .examples
        .iter()
        .zip(&assignment)
        .filter(|(_, s)| **s == Split::Eval)
        .map(|(e, _)| e.clone())
        .collect();

    DemoSplit {
        banks,
        eval,
        assignment,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(kid: &str, qid: &str, label: i64, rationale: Option<&str>) -> String {
        let mut v = serde_json::json!({
            "knowledge_id": kid,
            "knowledge_text": format!("definition of {kid}"),
            "question_id": qid,
            "question_text": format!("stem {qid}"),
            "label": label,
        });
        if let Some(r) = rationale {
            v["rationale"] = serde_json::json!(r);
        }
        v.to_string()
    }

    fn knowledge_with(kid: &str, pos: usize, neg: usize) -> Vec<String> {
        (0..pos + neg)
            .map(|i| {
                let label = if i < pos { 1 } else { 0 };
                let token = if label == 1 { "<Yes>" } else { "<No>" };
                record(kid, &format!("q{i}"), label, Some(&format!("because. {token}")))
            })
            .collect()
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let ds = parse_dataset("").unwrap();
        assert_eq!(ds.len(), 0);
        assert!(ds.knowledge_ids().is_empty());
    }

    #[test]
    fn rationale_label_disagreement_is_rejected() {
        let text = record("k1", "q1", 1, Some("thus it does not match. <No>"));
        let err = parse_dataset(&text).unwrap_err();
        assert!(matches!(err, Error::Domain(_)), "{err}");
    }

    #[test]
    fn rationale_token_must_be_final_and_unique() {
        assert_eq!(rationale_token("ok <Yes>  \n").unwrap(), JudgmentLabel::Match);
        assert!(rationale_token("<Yes> trailing").is_err());
        assert!(rationale_token("<No> then <Yes>").is_err());
        assert!(rationale_token("no token").is_err());
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = format!("{}\n{{not json\n", record("k", "q", 0, None));
        match parse_dataset(&text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let text = format!("{}\n{}\n", record("k", "q", 0, None), record("k", "q", 1, None));
        assert!(matches!(
            parse_dataset(&text).unwrap_err(),
            Error::DuplicateKey { line: 2, .. }
        ));
    }

    #[test]
    fn label_outside_domain() {
        let text = record("k", "q", 2, None);
        assert!(matches!(parse_dataset(&text).unwrap_err(), Error::Domain(_)));
    }

    #[test]
    fn missing_split_defaults_to_eval() {
        let ds = parse_dataset(&record("k", "q", 0, None)).unwrap();
        assert_eq!(ds.splits(), &[Split::Eval]);
    }

    #[test]
    fn split_25_75_gives_bank_of_10() {
        let text = knowledge_with("x02030701", 25, 75).join("\n");
        let ds = parse_dataset(&text).unwrap();
        assert_eq!(ds.label_counts("x02030701"), (25, 75));
        let split = split_demo_bank(&ds, 5, 11);
        assert_eq!(split.banks["x02030701"].len(), 10);
        assert_eq!(split.eval.len(), 90);
        assert!(split.warnings.is_empty());
    }

    #[test]
    fn per_label_zero_keeps_everything_in_eval() {
        let text = knowledge_with("k", 3, 4).join("\n");
        let ds = parse_dataset(&text).unwrap();
        let split = split_demo_bank(&ds, 0, 1);
        assert!(split.banks.is_empty());
        assert_eq!(split.eval, ds.examples().to_vec());
    }

    #[test]
    fn short_supply_warns_and_keeps_all() {
        let text = knowledge_with("k", 2, 8).join("\n");
        let ds = parse_dataset(&text).unwrap();
        let split = split_demo_bank(&ds, 5, 1);
        assert_eq!(split.banks["k"].len(), 7);
        assert_eq!(split.warnings.len(), 1);
    }

    #[test]
    fn examples_without_rationale_never_enter_banks() {
        let mut lines = knowledge_with("k", 1, 1);
        lines.push(record("k", "bare", 1, None));
        let ds = parse_dataset(&lines.join("\n")).unwrap();
        let split = split_demo_bank(&ds, 5, 3);
        assert!(split.banks["k"].position("bare").is_none());
        assert!(split.eval.iter().any(|e| e.question.id == "bare"));
    }

    #[test]
    fn split_is_deterministic_under_seed() {
        let mut lines = knowledge_with("a", 20, 30);
        lines.extend(knowledge_with("b", 10, 40));
        let ds = parse_dataset(&lines.join("\n")).unwrap();
        let a = split_demo_bank(&ds, 5, 42);
        let b = split_demo_bank(&ds, 5, 42);
        assert_eq!(
            a.assigned_dataset(&ds).to_jsonl(),
            b.assigned_dataset(&ds).to_jsonl()
        );
        let c = split_demo_bank(&ds, 5, 43);
        assert_ne!(a.assignment, c.assignment);
    }

    #[test]
    fn banks_from_assignment_matches_split() {
        let text = knowledge_with("k", 10, 10).join("\n");
        let ds = parse_dataset(&text).unwrap();
        let split = split_demo_bank(&ds, 3, 9);
        let assigned = split.assigned_dataset(&ds);
        let reloaded = parse_dataset(&assigned.to_jsonl()).unwrap();
        assert_eq!(reloaded.banks_from_assignment()["k"].entries, split.banks["k"].entries);
        assert_eq!(reloaded.in_split(Split::Eval).count(), split.eval.len());
    }
}
