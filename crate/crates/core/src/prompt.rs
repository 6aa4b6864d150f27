//! Judge prompts and response parsing.

use serde::{Deserialize, Serialize};

use crate::data::{JudgmentLabel, KnowledgeConcept, Question, TaggingExample};
use crate::error::{Error, Result};

pub const JUDGMENT_YES: &str = "<Yes>";
pub const JUDGMENT_NO: &str = "<No>";

/// Task instruction shared by every pipeline. The final sentence is the
/// response-format contract `parse_judgment` relies on.
pub const INSTRUCTION: &str = "You are a knowledge concept annotator. \
Your job is to judge whether the <Question> is concerning the <Knowledge>. \
You should first provide the reasons before giving your judgment. \
The judgment token: <Yes> or <No> should be provided at the end of the response.";

const KNOWLEDGE_HEADER: &str = "Knowledge: <Knowledge>: ";
const QUESTION_HEADER: &str = "Question: <Question>: ";
const JUDGEMENT_HEADER: &str = "Judgement:";

/// Ids of everything a prompt was built from. Not rendered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub knowledge_id: String,
    pub question_id: String,
    pub demo_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub instruction_text: String,
    pub knowledge_block: String,
    pub demonstration_blocks: Vec<String>,
    pub question_block: String,
    pub meta: PromptMeta,
}

impl Prompt {
    /// Instruction, knowledge, demonstrations in selection order, question;
    /// blocks separated by blank lines.
    pub fn render(&self) -> String {
        format!("Instruction: {}\n\n{}", self.instruction_text, self.render_body())
    }

    /// Everything after the instruction.
    pub fn render_body(&self) -> String {
        let mut blocks = Vec::with_capacity(self.demonstration_blocks.len() + 2);
        blocks.push(self.knowledge_block.as_str());
        blocks.extend(self.demonstration_blocks.iter().map(String::as_str));
        blocks.push(self.question_block.as_str());
        blocks.join("\n\n")
    }

    pub fn num_demonstrations(&self) -> usize {
        self.demonstration_blocks.len()
    }
}

fn knowledge_block(k: &KnowledgeConcept) -> String {
    format!("{KNOWLEDGE_HEADER}{}", k.definition_text.trim())
}

fn question_block(q: &Question) -> String {
    format!("{QUESTION_HEADER}{}\n{JUDGEMENT_HEADER}", q.stem_text.trim())
}

fn demonstration_block(demo: &TaggingExample, rationale: &str) -> String {
    format!(
        "{QUESTION_HEADER}{}\n{JUDGEMENT_HEADER} {}",
        demo.question.stem_text.trim(),
        rationale.trim()
    )
}

pub fn build_zero_shot_prompt(k: &KnowledgeConcept, q: &Question) -> Prompt {
    Prompt {
        instruction_text: INSTRUCTION.to_string(),
        knowledge_block: knowledge_block(k),
        demonstration_blocks: Vec::new(),
        question_block: question_block(q),
        meta: PromptMeta {
            knowledge_id: k.id.clone(),
            question_id: q.id.clone(),
            demo_ids: Vec::new(),
        },
    }
}

pub fn build_few_shot_prompt(
    k: &KnowledgeConcept,
    q: &Question,
    demos: &[&TaggingExample],
) -> Result<Prompt> {
    let mut prompt = build_zero_shot_prompt(k, q);
    for demo in demos {
        if demo.knowledge.id != k.id {
            return Err(Error::Contract(format!(
                "demonstration `{}` belongs to knowledge `{}`, not `{}`",
                demo.question.id, demo.knowledge.id, k.id
            )));
        }
        let rationale = demo.rationale.as_deref().ok_or_else(|| {
            Error::Contract(format!(
                "demonstration `{}` has no rationale",
                demo.question.id
            ))
        })?;
        prompt
            .demonstration_blocks
            .push(demonstration_block(demo, rationale));
        prompt.meta.demo_ids.push(demo.question.id.clone());
    }
    Ok(prompt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Yes,
    No,
    Unparseable,
}

impl Verdict {
    pub fn label(self) -> Option<JudgmentLabel> {
        match self {
            Verdict::Yes => Some(JudgmentLabel::Match),
            Verdict::No => Some(JudgmentLabel::NoMatch),
            Verdict::Unparseable => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedJudgment {
    pub verdict: Verdict,
    pub reasoning_text: String,
}

/// Takes the last `<Yes>`/`<No>` in the response as the verdict.
pub fn parse_judgment(response_text: &str) -> ParsedJudgment {
    let yes = response_text.rfind(JUDGMENT_YES);
    let no = response_text.rfind(JUDGMENT_NO);
    let (verdict, at) = match (yes, no) {
        (None, None) => {
            return ParsedJudgment {
                verdict: Verdict::Unparseable,
                reasoning_text: response_text.trim().to_string(),
            }
        }
        (Some(y), None) => (Verdict::Yes, y),
        (None, Some(n)) => (Verdict::No, n),
        (Some(y), Some(n)) if y > n => (Verdict::Yes, y),
        (Some(_), Some(n)) => (Verdict::No, n),
    };
    ParsedJudgment {
        verdict,
        reasoning_text: response_text[..at].trim().to_string(),
    }
}
