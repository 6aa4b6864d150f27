//! PPO training for the sequential retriever and REINFORCE for PromptPG.

pub mod adam;
pub mod promptpg;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{run_episode, EpisodePair, PreparedBank, RetrieverVariantConfig, Trajectory, Variant};
use crate::error::{Error, Result};
use crate::judge::JudgeSession;
use crate::par::parallel_map;
use crate::policy::{
    backward, init_params, load_params, save_params, trace_episode, Action, DecodeMode, ParamFileMeta,
    PolicyParameters, StepGrad,
};
use crate::seeds::{derive_seed, sha256_hex};

pub use adam::Adam;
pub use promptpg::{
    available_mask, candidate_scores, reinforce_gradients, reinforce_update, run_promptpg_episode, sample_selection,
    selection_log_prob, PgEpisode, PromptPgParams, ReinforceReport, PROMPTPG_KIND,
};

pub const RETRIEVER_KIND: &str = "retriever";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub variant: Variant,
    /// Maximum demonstrations per episode (shot count for PromptPG).
    pub t_max: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    pub value_loss_weight: f64,
    pub entropy_weight: f64,
    pub off_policy_epochs: usize,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub batch_episodes: usize,
    pub total_iterations: usize,
    pub seed: u64,
    pub normalize_advantages: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    /// Iterations without a better validation return before training stops; 0 disables.
    pub patience: usize,
    pub hidden: usize,
    pub layers: usize,
    pub threads: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            variant: Variant::FlexSdr,
            t_max: 4,
            gamma: None,
            omega: None,
            value_loss_weight: 0.5,
            entropy_weight: 0.01,
            off_policy_epochs: 80,
            clip_epsilon: 0.2,
            learning_rate: 1e-3,
            batch_episodes: 64,
            total_iterations: 300,
            seed: 0,
            normalize_advantages: true,
            max_grad_norm: None,
            patience: 20,
            hidden: 64,
            layers: 2,
            threads: 1,
        }
    }
}

impl TrainingConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainingConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("training config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!("clip_epsilon must be in (0, 1), got {}", self.clip_epsilon));
        }
        for (name, v) in [
            ("value_loss_weight", self.value_loss_weight),
            ("entropy_weight", self.entropy_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_episodes == 0 || self.off_policy_epochs == 0 {
            return bad("batch_episodes and off_policy_epochs must be at least 1".into());
        }
        if self.hidden == 0 || self.layers == 0 {
            return bad("hidden and layers must be at least 1".into());
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return bad("max_grad_norm must be positive".into());
        }
        self.retriever()?;
        Ok(())
    }

    /// Variant settings with forced values applied.
    pub fn retriever(&self) -> Result<RetrieverVariantConfig> {
        RetrieverVariantConfig::resolve(self.variant, self.t_max, self.gamma, self.omega).map(|r| r.0)
    }

    pub fn warnings(&self) -> Vec<String> {
        RetrieverVariantConfig::resolve(self.variant, self.t_max, self.gamma, self.omega)
            .map(|r| r.1)
            .unwrap_or_default()
    }

    /// Digest of everything that affects the parameter trajectory.
    /// The iteration budget and thread count are excluded so a run can be
    /// extended or resumed on a different machine.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.total_iterations = 0;
        c.threads = 0;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

/// Demo banks plus the pairs used for rollouts and validation.
#[derive(Debug, Clone)]
pub struct TrainingEnv {
    pub banks: BTreeMap<String, PreparedBank>,
    pub train: Vec<EpisodePair>,
    pub validation: Vec<EpisodePair>,
}

impl TrainingEnv {
    pub fn bank(&self, knowledge_id: &str) -> Result<&PreparedBank> {
        self.banks
            .get(knowledge_id)
            .filter(|b| !b.is_empty())
            .ok_or_else(|| Error::Contract(format!("no demonstrations for knowledge `{knowledge_id}`")))
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        self.banks
            .values()
            .map(|b| b.x_k.len())
            .next()
            .ok_or_else(|| Error::Contract("training environment has no banks".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub episode: usize,
    pub t: usize,
    pub old_log_prob: f64,
    pub old_value: f64,
    pub ret: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    /// Index into `TrainingEnv::train` for each trajectory.
    pub pairs: Vec<usize>,
    pub steps: Vec<RolloutStep>,
}

impl RolloutBatch {
    pub fn mean_return(&self) -> f64 {
        mean(self.trajectories.iter().map(|t| t.returns.first().copied().unwrap_or(0.0)))
    }

    pub fn mean_demos(&self) -> f64 {
        mean(self.trajectories.iter().map(|t| t.demos_used() as f64))
    }

    pub fn accuracy(&self) -> f64 {
        mean(self.trajectories.iter().map(|t| if t.prediction() == Some(t.gold) { 1.0 } else { 0.0 }))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Pair indices for one iteration: concatenated seeded permutations.
pub fn batch_indices(num_pairs: usize, batch: usize, seed: u64, iteration: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["batch", &iteration.to_string()]));
    let mut out = Vec::with_capacity(batch);
    while out.len() < batch && num_pairs > 0 {
        let mut perm: Vec<usize> = (0..num_pairs).collect();
        perm.shuffle(&mut rng);
        out.extend(perm);
    }
    out.truncate(batch);
    out
}

fn episode_rng(seed: u64, iteration: usize, j: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &["episode", &iteration.to_string(), &j.to_string()]))
}

/// Runs sample-mode episodes over a shuffled batch of training pairs.
pub fn collect_rollouts(
    params: &PolicyParameters,
    env: &TrainingEnv,
    judge: &JudgeSession<'_>,
    cfg: &TrainingConfig,
    iteration: usize,
) -> Result<RolloutBatch> {
    let rv = cfg.retriever()?;
    if env.train.is_empty() {
        return Err(Error::Contract("no training pairs".into()));
    }
    let pairs = batch_indices(env.train.len(), cfg.batch_episodes, cfg.seed, iteration);
    let results = parallel_map(&pairs, cfg.threads, |j, &pi| {
        let pair = &env.train[pi];
        let bank = env.bank(&pair.knowledge_id)?;
        let mut rng = episode_rng(cfg.seed, iteration, j);
        run_episode(pair, bank, params, judge, &rv, DecodeMode::Sample, &mut rng)
    });
    let trajectories = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut steps = Vec::new();
    for (e, tr) in trajectories.iter().enumerate() {
        for (t, s) in tr.steps.iter().enumerate() {
            steps.push(RolloutStep {
                episode: e,
                t,
                old_log_prob: s.log_prob,
                old_value: s.value,
                ret: tr.returns[t],
                advantage: tr.returns[t] - s.value,
            });
        }
    }
    if cfg.normalize_advantages && steps.len() > 1 {
        let n = steps.len() as f64;
        let m = steps.iter().map(|s| s.advantage).sum::<f64>() / n;
        let var = steps.iter().map(|s| (s.advantage - m).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt() + 1e-8;
        steps.iter_mut().for_each(|s| s.advantage = (s.advantage - m) / sd);
    }
    Ok(RolloutBatch {
        trajectories,
        pairs,
        steps,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
    pub max_ratio_deviation: f64,
    pub clip_fraction: f64,
}

/// Gradient of the PPO loss on `batch` at the current parameters.
pub fn ppo_gradients(
    params: &PolicyParameters,
    batch: &RolloutBatch,
    env: &TrainingEnv,
    cfg: &TrainingConfig,
) -> Result<(PolicyParameters, EpochStats)> {
    let rv = cfg.retriever()?;
    if batch.steps.is_empty() {
        return Err(Error::Contract("empty rollout batch".into()));
    }
    let s_count = batch.steps.len() as f64;
    let eps = cfg.clip_epsilon;
    let mut offsets = Vec::with_capacity(batch.trajectories.len());
    let mut acc = 0;
    for tr in &batch.trajectories {
        offsets.push(acc);
        acc += tr.steps.len();
    }
    let indices: Vec<usize> = (0..batch.trajectories.len()).collect();
    let per_episode = parallel_map(&indices, cfg.threads, |_, &e| -> Result<(PolicyParameters, EpochStats, usize)> {
        let tr = &batch.trajectories[e];
        let pair = &env.train[batch.pairs[e]];
        let bank = env.bank(&pair.knowledge_id)?;
        let actions: Vec<Action> = tr.actions();
        let trace = trace_episode(params, &bank.x_k, &pair.x_q, &bank.embeddings, pair.excluded, &actions, rv.stop_enabled)?;
        let mut stats = EpochStats::default();
        let mut clipped = 0;
        let mut grads_in = Vec::with_capacity(actions.len());
        for t in 0..actions.len() {
            let step = &batch.steps[offsets[e] + t];
            let dist = trace.distribution(t);
            let a = actions[t].index(dist.bank_len());
            let lp = dist.log_probs[a];
            let ratio = (lp - step.old_log_prob).exp();
            stats.max_ratio_deviation = stats.max_ratio_deviation.max((ratio - 1.0).abs());
            let adv = step.advantage;
            let unclipped = ratio * adv;
            let clipped_term = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
            let (surrogate, dsur) = if unclipped <= clipped_term {
                (unclipped, ratio * adv)
            } else {
                clipped += 1;
                (clipped_term, 0.0)
            };
            let h = dist.entropy();
            let v = trace.value(t);
            stats.policy_loss -= surrogate / s_count;
            stats.value_loss += (v - step.ret).powi(2) / s_count;
            stats.entropy += h / s_count;
            let mut dlogits = vec![0.0; dist.probs.len()];
            for (i, d) in dlogits.iter_mut().enumerate() {
                let p = dist.probs[i];
                if p <= 0.0 {
                    continue;
                }
                let ind = if i == a { 1.0 } else { 0.0 };
                *d = -(dsur / s_count) * (ind - p) + (cfg.entropy_weight / s_count) * p * (dist.log_probs[i] + h);
            }
            grads_in.push(StepGrad {
                dlogits,
                dvalue: cfg.value_loss_weight * 2.0 * (v - step.ret) / s_count,
            });
        }
        let mut g = params.zeros_like();
        backward(params, &trace, &grads_in, &mut g)?;
        Ok((g, stats, clipped))
    });
    let mut grads = params.zeros_like();
    let mut stats = EpochStats::default();
    let mut clipped = 0;
    for r in per_episode {
        let (g, s, c) = r?;
        grads.add_scaled(1.0, &g);
        stats.policy_loss += s.policy_loss;
        stats.value_loss += s.value_loss;
        stats.entropy += s.entropy;
        stats.max_ratio_deviation = stats.max_ratio_deviation.max(s.max_ratio_deviation);
        clipped += c;
    }
    stats.clip_fraction = clipped as f64 / s_count;
    stats.total_loss = stats.policy_loss + cfg.value_loss_weight * stats.value_loss - cfg.entropy_weight * stats.entropy;
    if !stats.total_loss.is_finite() {
        return Err(Error::NonFinite(format!("PPO loss: {stats:?}")));
    }
    Ok((grads, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoReport {
    pub first_epoch: EpochStats,
    pub last_epoch: EpochStats,
    pub value_loss_increases: usize,
    /// Set when the value loss rose in more than half of the epochs.
    pub value_loss_alarm: bool,
}

/// One optimizer step per off-policy epoch on the full batch.
pub fn ppo_update(
    params: &mut PolicyParameters,
    adam: &mut Adam,
    batch: &RolloutBatch,
    env: &TrainingEnv,
    cfg: &TrainingConfig,
) -> Result<PpoReport> {
    let mut first = None;
    let mut last = EpochStats::default();
    let mut increases = 0;
    let mut prev_value_loss = f64::INFINITY;
    for _ in 0..cfg.off_policy_epochs {
        let (mut grads, stats) = ppo_gradients(params, batch, env, cfg)?;
        if let Some(max) = cfg.max_grad_norm {
            let norm = grads.squared_norm().sqrt();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        let flat = grads.flatten();
        adam.step(params.tensors_mut().into_iter().map(|t| t.1), &flat)?;
        params.check_finite("updated parameter")?;
        if stats.value_loss > prev_value_loss {
            increases += 1;
        }
        prev_value_loss = stats.value_loss;
        if first.is_none() {
            first = Some(stats.clone());
        }
        last = stats;
    }
    Ok(PpoReport {
        first_epoch: first.unwrap_or_default(),
        last_epoch: last,
        value_loss_increases: increases,
        value_loss_alarm: increases * 2 > cfg.off_policy_epochs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_return: f64,
    pub mean_demos: f64,
    pub accuracy: f64,
    pub entropy: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub first_epoch_max_ratio_deviation: f64,
    pub clip_fraction: f64,
    pub value_loss_alarm: bool,
    pub validation_return: f64,
    pub stop_actions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Retriever(PolicyParameters),
    PromptPg(PromptPgParams),
}

impl TrainedModel {
    pub fn save(&self, path: &Path, seed: u64, digest: &str) -> Result<()> {
        match self {
            TrainedModel::Retriever(p) => save_params(
                path,
                p,
                &ParamFileMeta {
                    kind: RETRIEVER_KIND.into(),
                    seed,
                    config_digest: digest.into(),
                },
            ),
            TrainedModel::PromptPg(p) => p.save(path, seed, digest),
        }
    }

    /// Loads either model kind, dispatching on the stored kind.
    pub fn load(path: &Path) -> Result<(Self, ParamFileMeta)> {
        let (meta, _, _) = crate::policy::read_tensor_file(path)?;
        match meta.kind.as_str() {
            PROMPTPG_KIND => PromptPgParams::load(path).map(|(p, m)| (TrainedModel::PromptPg(p), m)),
            RETRIEVER_KIND => load_params(path).map(|(p, m)| (TrainedModel::Retriever(p), m)),
            other => Err(Error::Format(format!("{}: unknown model kind `{other}`", path.display()))),
        }
    }

    fn flatten(&self) -> Vec<f64> {
        match self {
            TrainedModel::Retriever(p) => p.flatten(),
            TrainedModel::PromptPg(p) => p.flatten(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Append every rollout trajectory to `rollouts.jsonl`.
    pub log_trajectories: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation return.
    pub model: TrainedModel,
    pub last: TrainedModel,
    pub log: Vec<IterationLog>,
    pub iterations_run: usize,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointState {
    config_digest: String,
    completed_iterations: usize,
    best_validation: Option<f64>,
    since_best: usize,
    baseline: f64,
    baseline_count: u64,
    stopped_early: bool,
}

pub struct OutputPaths {
    pub model: PathBuf,
    pub log: PathBuf,
    pub rollouts: PathBuf,
    pub checkpoint: PathBuf,
}

impl OutputPaths {
    pub fn new(out_dir: &Path) -> Self {
        OutputPaths {
            model: out_dir.join("policy.bin"),
            log: out_dir.join("training_log.jsonl"),
            rollouts: out_dir.join("rollouts.jsonl"),
            checkpoint: out_dir.join("checkpoint"),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn append_lines(path: &Path, lines: &[String]) -> Result<()> {
    if lines.is_empty() {
        return Ok(());
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = lines.join("\n");
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Keeps the first `keep` lines of a JSONL file.
fn truncate_lines(path: &Path, keep: usize) -> Result<Vec<String>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let lines: Vec<String> = text.lines().take(keep).map(str::to_string).collect();
    let mut body = lines.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    Ok(lines)
}

fn validation_return_retriever(
    params: &PolicyParameters,
    env: &TrainingEnv,
    judge: &JudgeSession<'_>,
    rv: &RetrieverVariantConfig,
    threads: usize,
) -> Result<Option<f64>> {
    if env.validation.is_empty() {
        return Ok(None);
    }
    let results = parallel_map(&env.validation, threads, |_, pair| {
        let bank = env.bank(&pair.knowledge_id)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        run_episode(pair, bank, params, judge, rv, DecodeMode::Greedy, &mut rng)
    });
    let trs = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Some(mean(trs.iter().map(|t| t.returns.first().copied().unwrap_or(0.0)))))
}

fn validation_return_promptpg(
    params: &PromptPgParams,
    env: &TrainingEnv,
    judge: &JudgeSession<'_>,
    shots: usize,
    threads: usize,
) -> Result<Option<f64>> {
    if env.validation.is_empty() {
        return Ok(None);
    }
    let results = parallel_map(&env.validation, threads, |_, pair| {
        let bank = env.bank(&pair.knowledge_id)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        run_promptpg_episode(pair, bank, params, judge, shots, DecodeMode::Greedy, &mut rng)
    });
    let eps = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Some(mean(eps.iter().map(|e| e.reward as f64))))
}

/// Alternates rollouts and updates, checkpointing after every iteration.
pub fn train(
    cfg: &TrainingConfig,
    env: &TrainingEnv,
    judge: &JudgeSession<'_>,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let rv = cfg.retriever()?;
    let digest = cfg.digest();
    let paths = OutputPaths::new(out_dir);
    fs::create_dir_all(&paths.checkpoint).map_err(|e| Error::io(&paths.checkpoint, e))?;
    let d = env.embedding_dim()?;
    let init_seed = derive_seed(cfg.seed, &["init"]);
    let fresh = || -> Result<TrainedModel> {
        Ok(match cfg.variant {
            Variant::PromptPg => TrainedModel::PromptPg(PromptPgParams::init(d, cfg.hidden, init_seed)?),
            _ => TrainedModel::Retriever(init_params(d, cfg.hidden, cfg.layers, init_seed)?),
        })
    };
    let state_path = paths.checkpoint.join("state.json");
    let params_path = paths.checkpoint.join("params.bin");
    let best_path = paths.checkpoint.join("best.bin");
    let optim_path = paths.checkpoint.join("optimizer.bin");

    let (mut model, mut best, mut adam, mut state, mut log) = if opts.resume && state_path.exists() {
        let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: CheckpointState = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if state.config_digest != digest {
            return Err(Error::Config(format!(
                "checkpoint in {} was written under a different configuration; refusing to resume",
                out_dir.display()
            )));
        }
        let (model, _) = TrainedModel::load(&params_path)?;
        let (best, _) = TrainedModel::load(&best_path)?;
        let adam = Adam::load(&optim_path)?;
        let lines = truncate_lines(&paths.log, state.completed_iterations)?;
        let log = lines
            .iter()
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
            .collect::<Result<Vec<IterationLog>>>()?;
        (model, best, adam, state, log)
    } else {
        let model = fresh()?;
        let n = model.flatten().len();
        let state = CheckpointState {
            config_digest: digest.clone(),
            completed_iterations: 0,
            best_validation: None,
            since_best: 0,
            baseline: 0.0,
            baseline_count: 0,
            stopped_early: false,
        };
        for p in [&paths.log, &paths.rollouts] {
            if p.exists() {
                fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
        (model.clone(), model, Adam::new(cfg.learning_rate, n), state, Vec::new())
    };

    while state.completed_iterations < cfg.total_iterations && !state.stopped_early {
        let it = state.completed_iterations;
        let entry = match &mut model {
            TrainedModel::Retriever(params) => {
                let batch = collect_rollouts(params, env, judge, cfg, it)?;
                if opts.log_trajectories {
                    let lines: Vec<String> = batch.trajectories.iter().map(|t| t.to_json_line()).collect();
                    append_lines(&paths.rollouts, &lines)?;
                }
                let report = ppo_update(params, &mut adam, &batch, env, cfg)?;
                let validation = validation_return_retriever(params, env, judge, &rv, cfg.threads)?;
                IterationLog {
                    iteration: it,
                    mean_return: batch.mean_return(),
                    mean_demos: batch.mean_demos(),
                    accuracy: batch.accuracy(),
                    entropy: report.first_epoch.entropy,
                    policy_loss: report.first_epoch.policy_loss,
                    value_loss: report.first_epoch.value_loss,
                    first_epoch_max_ratio_deviation: report.first_epoch.max_ratio_deviation,
                    clip_fraction: report.last_epoch.clip_fraction,
                    value_loss_alarm: report.value_loss_alarm,
                    validation_return: validation.unwrap_or_else(|| batch.mean_return()),
                    stop_actions: batch
                        .trajectories
                        .iter()
                        .filter(|t| t.steps.last().is_some_and(|s| s.action == Action::Stop))
                        .count(),
                }
            }
            TrainedModel::PromptPg(params) => {
                let idx = batch_indices(env.train.len(), cfg.batch_episodes, cfg.seed, it);
                let results = parallel_map(&idx, cfg.threads, |j, &pi| {
                    let pair = &env.train[pi];
                    let bank = env.bank(&pair.knowledge_id)?;
                    let mut rng = episode_rng(cfg.seed, it, j);
                    run_promptpg_episode(pair, bank, params, judge, cfg.t_max, DecodeMode::Sample, &mut rng)
                });
                let episodes = results.into_iter().collect::<Result<Vec<_>>>()?;
                if opts.log_trajectories {
                    let lines: Vec<String> = episodes.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
                    append_lines(&paths.rollouts, &lines)?;
                }
                let mut triples = Vec::with_capacity(episodes.len());
                for (ep, &pi) in episodes.iter().zip(&idx) {
                    let pair = &env.train[pi];
                    triples.push((ep.clone(), pair, env.bank(&pair.knowledge_id)?));
                }
                let report = reinforce_update(params, &mut adam, &triples, state.baseline, cfg.max_grad_norm)?;
                let n = episodes.len() as u64;
                let total: f64 = episodes.iter().map(|e| e.reward as f64).sum();
                state.baseline = (state.baseline * state.baseline_count as f64 + total) / (state.baseline_count + n) as f64;
                state.baseline_count += n;
                let validation = validation_return_promptpg(params, env, judge, cfg.t_max, cfg.threads)?;
                IterationLog {
                    iteration: it,
                    mean_return: report.mean_reward,
                    mean_demos: mean(episodes.iter().map(|e| e.selected.len() as f64)),
                    accuracy: mean(episodes.iter().map(|e| if e.reward > 0 { 1.0 } else { 0.0 })),
                    entropy: 0.0,
                    policy_loss: report.loss,
                    value_loss: 0.0,
                    first_epoch_max_ratio_deviation: 0.0,
                    clip_fraction: 0.0,
                    value_loss_alarm: false,
                    validation_return: validation.unwrap_or(report.mean_reward),
                    stop_actions: 0,
                }
            }
        };
        if state.best_validation.is_none_or(|b| entry.validation_return > b) {
            state.best_validation = Some(entry.validation_return);
            state.since_best = 0;
            best = model.clone();
        } else {
            state.since_best += 1;
        }
        if cfg.patience > 0 && state.since_best >= cfg.patience {
            state.stopped_early = true;
        }
        state.completed_iterations += 1;
        model.save(&params_path, cfg.seed, &digest)?;
        best.save(&best_path, cfg.seed, &digest)?;
        adam.save(&optim_path, &digest)?;
        write_json(&state_path, &state)?;
        append_lines(&paths.log, &[serde_json::to_string(&entry).expect("log serializes")])?;
        log.push(entry);
    }
    if state.completed_iterations == 0 {
        model.save(&params_path, cfg.seed, &digest)?;
        best.save(&best_path, cfg.seed, &digest)?;
        write_json(&state_path, &state)?;
    }
    best.save(&paths.model, cfg.seed, &digest)?;
    Ok(TrainOutcome {
        model: best,
        last: model,
        iterations_run: state.completed_iterations,
        stopped_early: state.stopped_early,
        log,
        warnings: cfg.warnings(),
    })
}

#[cfg(test)]
mod tests;
