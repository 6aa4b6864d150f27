//! Retrieval episodes against a judge: rewards, stop bonuses, returns.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{JudgmentLabel, KnowledgeConcept, Question, TaggingExample};
use crate::error::{Error, Result};
use crate::judge::JudgeSession;
use crate::policy::{
    advance_state, encode_query, score_actions, select_action, value_estimate, Action, DecodeMode,
    PolicyParameters,
};
use crate::prompt::{build_few_shot_prompt, build_zero_shot_prompt, ParsedJudgment, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    FlexSdr,
    RetIcl,
    FlexRetIcr,
    PromptPg,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::FlexSdr, Variant::RetIcl, Variant::FlexRetIcr, Variant::PromptPg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FlexSdr => "flexsdr",
            Variant::RetIcl => "reticl",
            Variant::FlexRetIcr => "flexreticr",
            Variant::PromptPg => "promptpg",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected flexsdr, reticl, flexreticr or promptpg)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    PerStep,
    FinalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrieverVariantConfig {
    pub variant: Variant,
    pub gamma: f64,
    pub omega: f64,
    pub t_max: usize,
    pub reward_mode: RewardMode,
    pub stop_enabled: bool,
}

impl RetrieverVariantConfig {
    pub fn flexsdr(t_max: usize) -> Self {
        RetrieverVariantConfig {
            variant: Variant::FlexSdr,
            gamma: 0.99,
            omega: 1.0,
            t_max,
            reward_mode: RewardMode::PerStep,
            stop_enabled: true,
        }
    }

    pub fn reticl(t_max: usize) -> Self {
        RetrieverVariantConfig {
            variant: Variant::RetIcl,
            gamma: 1.0,
            omega: 0.0,
            t_max,
            reward_mode: RewardMode::FinalOnly,
            stop_enabled: false,
        }
    }

    pub fn flexreticr(t_max: usize) -> Self {
        RetrieverVariantConfig {
            variant: Variant::FlexRetIcr,
            gamma: 1.0,
            omega: 1.0 / t_max.max(1) as f64,
            t_max,
            reward_mode: RewardMode::FinalOnly,
            stop_enabled: true,
        }
    }

    /// One-shot selection of `shots` demos; no recurrence and no stop.
    pub fn promptpg(shots: usize) -> Self {
        RetrieverVariantConfig {
            variant: Variant::PromptPg,
            gamma: 1.0,
            omega: 0.0,
            t_max: shots,
            reward_mode: RewardMode::FinalOnly,
            stop_enabled: false,
        }
    }

    /// Builds a config for `variant`, applying the variant's forced settings.
    /// Overrides that conflict with a forced setting are dropped and
    /// reported in the returned warnings.
    pub fn resolve(
        variant: Variant,
        t_max: usize,
        gamma: Option<f64>,
        omega: Option<f64>,
    ) -> Result<(Self, Vec<String>)> {
        let mut warnings = Vec::new();
        let mut cfg = match variant {
            Variant::FlexSdr => Self::flexsdr(t_max),
            Variant::RetIcl => Self::reticl(t_max),
            Variant::FlexRetIcr => Self::flexreticr(t_max),
            Variant::PromptPg => Self::promptpg(t_max),
        };
        match variant {
            Variant::FlexSdr => {
                if let Some(g) = gamma {
                    cfg.gamma = g;
                }
                if let Some(w) = omega {
                    cfg.omega = w;
                }
            }
            _ => {
                if gamma.is_some_and(|g| g != cfg.gamma) {
                    warnings.push(format!("{variant} forces gamma = {}; configured value ignored", cfg.gamma));
                }
                if omega.is_some_and(|w| w != cfg.omega) {
                    warnings.push(format!("{variant} forces omega = {}; configured value ignored", cfg.omega));
                }
            }
        }
        cfg.validate()?;
        Ok((cfg, warnings))
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::Config(format!("omega must be a finite non-negative number, got {}", self.omega)));
        }
        match self.variant {
            Variant::FlexSdr => {
                if !(self.gamma > 0.0 && self.gamma < 1.0) {
                    return Err(Error::Config(format!("flexsdr needs gamma in (0, 1), got {}", self.gamma)));
                }
                if self.reward_mode != RewardMode::PerStep || !self.stop_enabled {
                    return Err(Error::Config("flexsdr uses per-step rewards with stop enabled".into()));
                }
            }
            Variant::RetIcl | Variant::PromptPg => {
                if self.gamma != 1.0 || self.reward_mode != RewardMode::FinalOnly || self.stop_enabled {
                    return Err(Error::Config(format!("{} uses final-only rewards, gamma = 1, no stop", self.variant)));
                }
            }
            Variant::FlexRetIcr => {
                if self.gamma != 1.0 || self.reward_mode != RewardMode::FinalOnly || !self.stop_enabled {
                    return Err(Error::Config("flexreticr uses final-only rewards, gamma = 1, stop enabled".into()));
                }
                if self.omega != 1.0 / self.t_max as f64 {
                    return Err(Error::Config("flexreticr needs omega = 1/t_max".into()));
                }
            }
        }
        Ok(())
    }
}

/// +1 when the verdict agrees with the gold label, -1 otherwise.
pub fn eval_reward(verdict: Verdict, gold: JudgmentLabel) -> i32 {
    if verdict.label() == Some(gold) {
        1
    } else {
        -1
    }
}

/// Discounted returns R'(s_t) = (r_t + ω r'_t) + γ R'(s_{t+1}).
pub fn compute_returns(rewards: &[i32], bonuses: &[i32], mode: RewardMode, gamma: f64, omega: f64) -> Vec<f64> {
    debug_assert_eq!(rewards.len(), bonuses.len());
    let n = rewards.len();
    let mut out = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let r = match mode {
            RewardMode::PerStep => rewards[t] as f64,
            RewardMode::FinalOnly if t + 1 == n => rewards[t] as f64,
            RewardMode::FinalOnly => 0.0,
        };
        next = (r + omega * bonuses[t] as f64) + gamma * next;
        out[t] = next;
    }
    out
}

/// Σ_{j≥t} γ^{j−t} (r_j + ω r'_j), evaluated term by term.
pub fn direct_returns(rewards: &[i32], bonuses: &[i32], mode: RewardMode, gamma: f64, omega: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            (t..n)
                .map(|j| {
                    let r = match mode {
                        RewardMode::PerStep => rewards[j] as f64,
                        RewardMode::FinalOnly if j + 1 == n => rewards[j] as f64,
                        RewardMode::FinalOnly => 0.0,
                    };
                    gamma.powi((j - t) as i32) * (r + omega * bonuses[j] as f64)
                })
                .sum()
        })
        .collect()
}

/// One knowledge concept's demonstrations with their embeddings.
#[derive(Debug, Clone)]
pub struct PreparedBank {
    pub knowledge: KnowledgeConcept,
    pub x_k: Vec<f64>,
    pub entries: Vec<TaggingExample>,
    pub embeddings: Vec<Vec<f64>>,
}

impl PreparedBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A (knowledge, question) pair ready for retrieval.
#[derive(Debug, Clone)]
pub struct EpisodePair {
    pub knowledge_id: String,
    pub question: Question,
    pub gold: JudgmentLabel,
    pub x_q: Vec<f64>,
    /// Bank entry that must not be offered, e.g. the pair's own demo.
    pub excluded: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: Action,
    pub log_prob: f64,
    pub value: f64,
    /// `None` for Stop, which issues no query.
    pub judgment: Option<ParsedJudgment>,
    pub reward: i32,
    pub stop_bonus: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Stop,
    MaxLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub knowledge_id: String,
    pub question_id: String,
    pub gold: JudgmentLabel,
    pub excluded: Option<usize>,
    pub zero_shot: ParsedJudgment,
    pub zero_shot_reward: i32,
    pub steps: Vec<StepRecord>,
    pub terminated_by: Termination,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn demos_used(&self) -> usize {
        self.steps.iter().filter(|s| matches!(s.action, Action::Demo(_))).count()
    }

    pub fn selected(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter_map(|s| match s.action {
                Action::Demo(i) => Some(i),
                Action::Stop => None,
            })
            .collect()
    }

    /// Verdict of the most recent judge query.
    pub fn final_judgment(&self) -> &ParsedJudgment {
        self.steps
            .iter()
            .rev()
            .find_map(|s| s.judgment.as_ref())
            .unwrap_or(&self.zero_shot)
    }

    pub fn prediction(&self) -> Option<JudgmentLabel> {
        self.final_judgment().verdict.label()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }
}

/// Runs one retrieval episode: a zero-shot probe, then up to `t_max`
/// policy-chosen demonstrations, each followed by a judge query.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<R: Rng + ?Sized>(
    pair: &EpisodePair,
    bank: &PreparedBank,
    params: &PolicyParameters,
    judge: &JudgeSession<'_>,
    cfg: &RetrieverVariantConfig,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Trajectory> {
    if bank.is_empty() {
        return Err(Error::Contract(format!("bank `{}` is empty", bank.knowledge.id)));
    }
    if pair.knowledge_id != bank.knowledge.id {
        return Err(Error::Contract(format!(
            "pair of knowledge `{}` run against bank `{}`",
            pair.knowledge_id, bank.knowledge.id
        )));
    }
    let zero_shot = judge.ask(build_zero_shot_prompt(&bank.knowledge, &pair.question))?.parsed;
    let r0 = eval_reward(zero_shot.verdict, pair.gold);

    let mut state = encode_query(params, &bank.x_k, &pair.x_q, bank.len())?;
    if let Some(e) = pair.excluded {
        if e >= bank.len() {
            return Err(Error::Contract(format!("excluded entry {e} is outside the bank")));
        }
        state.available[e] = false;
    }
    let mut steps = Vec::new();
    let mut previous = r0;
    let mut terminated_by = Termination::MaxLength;
    while state.selected.len() < cfg.t_max {
        if !cfg.stop_enabled && !state.available.iter().any(|a| *a) {
            break;
        }
        let dist = score_actions(&state, params, &bank.embeddings, cfg.stop_enabled)?;
        let idx = select_action(&dist, mode, rng);
        let action = Action::from_index(idx, bank.len());
        let log_prob = dist.log_probs[idx];
        let value = value_estimate(&state, params);
        match action {
            Action::Stop => {
                steps.push(StepRecord {
                    action,
                    log_prob,
                    value,
                    judgment: None,
                    reward: previous,
                    stop_bonus: previous,
                });
                terminated_by = Termination::Stop;
                break;
            }
            Action::Demo(i) => {
                let next = advance_state(&state, params, i, &bank.embeddings[i])?;
                let demos: Vec<&TaggingExample> = next.selected.iter().map(|&j| &bank.entries[j]).collect();
                let prompt = build_few_shot_prompt(&bank.knowledge, &pair.question, &demos)?;
                let judgment = judge.ask(prompt)?.parsed;
                let reward = eval_reward(judgment.verdict, pair.gold);
                steps.push(StepRecord {
                    action,
                    log_prob,
                    value,
                    judgment: Some(judgment),
                    reward,
                    stop_bonus: 0,
                });
                previous = reward;
                state = next;
            }
        }
    }
    let rewards: Vec<i32> = steps.iter().map(|s| s.reward).collect();
    let bonuses: Vec<i32> = steps.iter().map(|s| s.stop_bonus).collect();
    let returns = compute_returns(&rewards, &bonuses, cfg.reward_mode, cfg.gamma, cfg.omega);
    Ok(Trajectory {
        knowledge_id: pair.knowledge_id.clone(),
        question_id: pair.question.id.clone(),
        gold: pair.gold,
        excluded: pair.excluded,
        zero_shot,
        zero_shot_reward: r0,
        steps,
        terminated_by,
        returns,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Correct,
    Wrong,
    Stop,
}

impl Outcome {
    fn symbol(self) -> &'static str {
        match self {
            Outcome::Correct => "✓",
            Outcome::Wrong => "×",
            Outcome::Stop => "-",
        }
    }
}

/// A correctness pattern: step-0 outcome then one outcome per step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pattern {
    pub zero_shot_correct: bool,
    pub steps: Vec<Outcome>,
}

impl Pattern {
    pub fn parse(text: &str) -> Result<Self> {
        let mut parts = text.split(',').map(str::trim);
        let head = parts.next().unwrap_or("");
        let zero_shot_correct = match head {
            "[✓]" => true,
            "[×]" => false,
            _ => return Err(Error::Domain(format!("bad pattern head `{head}`"))),
        };
        let steps = parts
            .map(|p| match p {
                "✓" => Ok(Outcome::Correct),
                "×" => Ok(Outcome::Wrong),
                "-" => Ok(Outcome::Stop),
                _ => Err(Error::Domain(format!("bad pattern step `{p}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Pattern { zero_shot_correct, steps })
    }

    /// Per-step (r_t, r'_t).
    pub fn rewards(&self) -> (Vec<i32>, Vec<i32>) {
        let mut previous = if self.zero_shot_correct { 1 } else { -1 };
        let mut rewards = Vec::new();
        let mut bonuses = Vec::new();
        for s in &self.steps {
            match s {
                Outcome::Stop => {
                    rewards.push(previous);
                    bonuses.push(previous);
                }
                Outcome::Correct | Outcome::Wrong => {
                    previous = if *s == Outcome::Correct { 1 } else { -1 };
                    rewards.push(previous);
                    bonuses.push(0);
                }
            }
        }
        (rewards, bonuses)
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", if self.zero_shot_correct { "✓" } else { "×" })?;
        for s in &self.steps {
            write!(f, ",{}", s.symbol())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnRow {
    pub pattern: String,
    pub rewards: Vec<i32>,
    pub stop_bonuses: Vec<i32>,
    /// R'(s_1) for each γ on the grid.
    pub returns: Vec<f64>,
    /// Largest |recursion − direct sum| over all steps and γ.
    pub max_recursion_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub lhs: String,
    pub rhs: String,
    /// `true` for lhs > rhs, one entry per γ.
    pub holds: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnTable {
    pub t: usize,
    pub omega: f64,
    pub reward_mode: RewardMode,
    pub stop_enabled: bool,
    pub gammas: Vec<f64>,
    pub rows: Vec<ReturnRow>,
    pub orderings: Vec<OrderingCheck>,
}

impl ReturnTable {
    pub fn row(&self, pattern: &str) -> Option<&ReturnRow> {
        self.rows.iter().find(|r| r.pattern == pattern)
    }

    pub fn return_of(&self, pattern: &str, gamma_index: usize) -> Option<f64> {
        self.row(pattern).map(|r| r.returns[gamma_index])
    }

    pub fn max_recursion_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_recursion_error).fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "T = {}, omega = {}, reward mode = {:?}, stop = {}\n",
            self.t, self.omega, self.reward_mode, self.stop_enabled
        );
        out.push_str(&format!("{:<16}", "pattern"));
        for g in &self.gammas {
            out.push_str(&format!("{:>10}", format!("g={g}")));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<16}", row.pattern));
            for r in &row.returns {
                out.push_str(&format!("{r:>10.4}"));
            }
            out.push('\n');
        }
        if !self.orderings.is_empty() {
            out.push_str("\nordering\n");
            for o in &self.orderings {
                out.push_str(&format!("{:<16}", format!("{} > {}", o.lhs, o.rhs)));
                for h in &o.holds {
                    out.push_str(&format!("{:>10}", if *h { "holds" } else { "FAILS" }));
                }
                out.push('\n');
            }
        }
        out
    }
}

fn patterns(t: usize, stop_enabled: bool) -> Vec<Pattern> {
    let mut out = Vec::new();
    for r0 in [true, false] {
        for len in 0..=t {
            if len < t && !stop_enabled {
                continue;
            }
            for bits in 0..(1usize << len) {
                let mut steps: Vec<Outcome> = (0..len)
                    .map(|i| if bits >> (len - 1 - i) & 1 == 0 { Outcome::Correct } else { Outcome::Wrong })
                    .collect();
                if len < t {
                    steps.push(Outcome::Stop);
                }
                out.push(Pattern {
                    zero_shot_correct: r0,
                    steps,
                });
            }
        }
    }
    out
}

/// Enumerates every correctness pattern of length `t` (plus stop-terminated
/// prefixes when stop is enabled) and evaluates R'(s_1) over `gammas`.
pub fn enumerate_returns(t: usize, gammas: &[f64], omega: f64, reward_mode: RewardMode, stop_enabled: bool) -> Result<ReturnTable> {
    if t == 0 || t > 4 {
        return Err(Error::Domain(format!("enumeration supports 1 <= T <= 4, got {t}")));
    }
    if gammas.is_empty() {
        return Err(Error::Domain("empty gamma grid".into()));
    }
    let mut rows = Vec::new();
    for p in patterns(t, stop_enabled) {
        let (rewards, bonuses) = p.rewards();
        let mut returns = Vec::with_capacity(gammas.len());
        let mut err: f64 = 0.0;
        for &g in gammas {
            let rec = compute_returns(&rewards, &bonuses, reward_mode, g, omega);
            let direct = direct_returns(&rewards, &bonuses, reward_mode, g, omega);
            for (a, b) in rec.iter().zip(&direct) {
                err = err.max((a - b).abs());
            }
            returns.push(rec.first().copied().unwrap_or(0.0));
        }
        rows.push(ReturnRow {
            pattern: p.to_string(),
            rewards,
            stop_bonuses: bonuses,
            returns,
            max_recursion_error: err,
        });
    }
    let mut table = ReturnTable {
        t,
        omega,
        reward_mode,
        stop_enabled,
        gammas: gammas.to_vec(),
        rows,
        orderings: Vec::new(),
    };
    if t == 2 {
        let mut pairs = vec![("[×],✓,✓", "[×],×,✓"), ("[×],✓,✓", "[×],✓,×")];
        if stop_enabled {
            pairs.extend([
                ("[✓],-", "[✓],✓,-"),
                ("[✓],✓,-", "[✓],✓,✓"),
                ("[×],×,-", "[×],-"),
                ("[×],×,×", "[×],×,-"),
            ]);
        }
        for (lhs, rhs) in pairs {
            let holds = (0..gammas.len())
                .map(|i| table.return_of(lhs, i).unwrap() > table.return_of(rhs, i).unwrap())
                .collect();
            table.orderings.push(OrderingCheck {
                lhs: lhs.into(),
                rhs: rhs.into(),
                holds,
            });
        }
    }
    Ok(table)
}
