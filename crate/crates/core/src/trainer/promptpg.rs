//! One-shot demonstration selection: a one-hidden-layer scorer over
//! [x_k ‖ x_q ‖ x_e], Plackett–Luce sampling without replacement, and
//! REINFORCE with a running-mean baseline.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TaggingExample;
use crate::episode::{eval_reward, EpisodePair, PreparedBank};
use crate::error::{Error, Result};
use crate::judge::JudgeSession;
use crate::policy::{log_softmax, read_tensor_file, write_tensor_file, DecodeMode, Matrix, ParamFileMeta};
use crate::prompt::{build_few_shot_prompt, ParsedJudgment};

pub const PROMPTPG_KIND: &str = "promptpg";

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPgParams {
    pub embedding_dim: usize,
    pub hidden: usize,
    /// hidden × 3·embedding_dim
    pub w: Matrix,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
}

impl PromptPgParams {
    pub fn zeros(embedding_dim: usize, hidden: usize) -> Self {
        PromptPgParams {
            embedding_dim,
            hidden,
            w: Matrix::zeros(hidden, 3 * embedding_dim),
            b: vec![0.0; hidden],
            u: vec![0.0; hidden],
        }
    }

    pub fn init(embedding_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if embedding_dim == 0 || hidden == 0 {
            return Err(Error::Domain("scorer dimensions must be positive".into()));
        }
        let mut p = Self::zeros(embedding_dim, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / ((3 * embedding_dim) as f64).sqrt();
        p.w.data.iter_mut().for_each(|v| *v = rng.gen_range(-s..=s));
        let s = 1.0 / (hidden as f64).sqrt();
        p.u.iter_mut().for_each(|v| *v = rng.gen_range(-s..=s));
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.embedding_dim, self.hidden)
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        vec![
            ("w".into(), vec![self.w.rows, self.w.cols], &self.w.data),
            ("b".into(), vec![self.b.len()], &self.b),
            ("u".into(), vec![self.u.len()], &self.u),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w.data, &mut self.b, &mut self.u]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.2.iter().copied()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.w.data.len() + self.b.len() + self.u.len()
    }

    pub fn save(&self, path: &Path, seed: u64, config_digest: &str) -> Result<()> {
        let meta = ParamFileMeta {
            kind: PROMPTPG_KIND.into(),
            seed,
            config_digest: config_digest.into(),
        };
        write_tensor_file(
            path,
            &meta,
            &[("embedding_dim", self.embedding_dim), ("hidden", self.hidden)],
            &self.tensors(),
        )
    }

    pub fn load(path: &Path) -> Result<(Self, ParamFileMeta)> {
        let (meta, dims, tensors) = read_tensor_file(path)?;
        let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        if meta.kind != PROMPTPG_KIND {
            return Err(bad(&format!("stored kind `{}`, expected `{PROMPTPG_KIND}`", meta.kind)));
        }
        let dim = |k: &str| dims.iter().find(|(n, _)| n == k).map(|(_, v)| *v).ok_or_else(|| bad("missing dimension"));
        let mut p = Self::zeros(dim("embedding_dim")?, dim("hidden")?);
        let expected: Vec<(String, Vec<usize>)> = p.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if tensors.len() != expected.len() {
            return Err(bad("wrong tensor count"));
        }
        for ((dst, (name, shape)), stored) in p.tensors_mut().into_iter().zip(&expected).zip(&tensors) {
            if &stored.name != name || &stored.shape != shape {
                return Err(bad(&format!("tensor `{}` does not match `{name}`", stored.name)));
            }
            dst.copy_from_slice(&stored.data);
        }
        Ok((p, meta))
    }
}

struct ScoreCache {
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
}

fn scores_with_cache(p: &PromptPgParams, x_k: &[f64], x_q: &[f64], bank: &[Vec<f64>]) -> Result<(Vec<f64>, ScoreCache)> {
    let d = p.embedding_dim;
    if x_k.len() != d || x_q.len() != d || bank.iter().any(|x| x.len() != d) {
        return Err(Error::Contract(format!("scorer expects embeddings of dim {d}")));
    }
    let mut scores = Vec::with_capacity(bank.len());
    let mut cache = ScoreCache {
        inputs: Vec::with_capacity(bank.len()),
        hidden: Vec::with_capacity(bank.len()),
    };
    for x_e in bank {
        let z: Vec<f64> = x_k.iter().chain(x_q).chain(x_e).copied().collect();
        let mut h = p.b.clone();
        p.w.matvec_add(&z, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        scores.push(h.iter().zip(&p.u).map(|(a, b)| a * b).sum());
        cache.inputs.push(z);
        cache.hidden.push(h);
    }
    Ok((scores, cache))
}

/// u · tanh(W [x_k ‖ x_q ‖ x_e] + b) for each bank entry.
pub fn candidate_scores(p: &PromptPgParams, x_k: &[f64], x_q: &[f64], bank: &[Vec<f64>]) -> Result<Vec<f64>> {
    scores_with_cache(p, x_k, x_q, bank).map(|(s, _)| s)
}

fn masked(scores: &[f64], available: &[bool]) -> Vec<f64> {
    scores
        .iter()
        .zip(available)
        .map(|(&s, &a)| if a { s } else { f64::NEG_INFINITY })
        .collect()
}

/// Draws `shots` distinct entries in order. Greedy takes the top scores
/// (ties to the lower index). Returns the selection and its log-probability.
pub fn sample_selection<R: Rng + ?Sized>(
    scores: &[f64],
    available: &[bool],
    shots: usize,
    mode: DecodeMode,
    rng: &mut R,
) -> (Vec<usize>, f64) {
    let mut avail = available.to_vec();
    let mut selected = Vec::new();
    let mut logp = 0.0;
    while selected.len() < shots && avail.iter().any(|a| *a) {
        let lp = log_softmax(&masked(scores, &avail));
        let pick = match mode {
            DecodeMode::Greedy => {
                let mut best = None;
                for (i, v) in lp.iter().enumerate() {
                    if avail[i] && best.is_none_or(|b: usize| *v > lp[b]) {
                        best = Some(i);
                    }
                }
                best.unwrap()
            }
            DecodeMode::Sample => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = None;
                for (i, v) in lp.iter().enumerate() {
                    if !avail[i] {
                        continue;
                    }
                    acc += v.exp();
                    pick = Some(i);
                    if u < acc {
                        break;
                    }
                }
                pick.unwrap()
            }
        };
        logp += lp[pick];
        avail[pick] = false;
        selected.push(pick);
    }
    (selected, logp)
}

pub fn selection_log_prob(scores: &[f64], available: &[bool], selected: &[usize]) -> f64 {
    let mut avail = available.to_vec();
    let mut logp = 0.0;
    for &s in selected {
        logp += log_softmax(&masked(scores, &avail))[s];
        avail[s] = false;
    }
    logp
}

/// d log P(selected) / d score_i.
fn selection_score_grad(scores: &[f64], available: &[bool], selected: &[usize]) -> Vec<f64> {
    let mut avail = available.to_vec();
    let mut g = vec![0.0; scores.len()];
    for &s in selected {
        let lp = log_softmax(&masked(scores, &avail));
        for i in 0..scores.len() {
            if avail[i] {
                g[i] -= lp[i].exp();
            }
        }
        g[s] += 1.0;
        avail[s] = false;
    }
    g
}

fn backward_scores(p: &PromptPgParams, cache: &ScoreCache, dscores: &[f64], grads: &mut PromptPgParams) {
    for ((z, h), &ds) in cache.inputs.iter().zip(&cache.hidden).zip(dscores) {
        if ds == 0.0 {
            continue;
        }
        let mut dpre = vec![0.0; p.hidden];
        for j in 0..p.hidden {
            grads.u[j] += ds * h[j];
            dpre[j] = ds * p.u[j] * (1.0 - h[j] * h[j]);
        }
        grads.w.add_outer(&dpre, z);
        for (gb, d) in grads.b.iter_mut().zip(&dpre) {
            *gb += d;
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PgEpisode {
    pub knowledge_id: String,
    pub question_id: String,
    pub selected: Vec<usize>,
    pub log_prob: f64,
    pub reward: i32,
    pub judgment: ParsedJudgment,
}

pub fn available_mask(bank: &PreparedBank, pair: &EpisodePair) -> Vec<bool> {
    let mut avail = vec![true; bank.len()];
    if let Some(e) = pair.excluded {
        if e < avail.len() {
            avail[e] = false;
        }
    }
    avail
}

/// Selects `shots` demos in one go and queries the judge once.
pub fn run_promptpg_episode<R: Rng + ?Sized>(
    pair: &EpisodePair,
    bank: &PreparedBank,
    params: &PromptPgParams,
    judge: &JudgeSession<'_>,
    shots: usize,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<PgEpisode> {
    let scores = candidate_scores(params, &bank.x_k, &pair.x_q, &bank.embeddings)?;
    let (selected, log_prob) = sample_selection(&scores, &available_mask(bank, pair), shots, mode, rng);
    let demos: Vec<&TaggingExample> = selected.iter().map(|&i| &bank.entries[i]).collect();
    let judgment = judge.ask(build_few_shot_prompt(&bank.knowledge, &pair.question, &demos)?)?.parsed;
    Ok(PgEpisode {
        knowledge_id: pair.knowledge_id.clone(),
        question_id: pair.question.id.clone(),
        selected,
        log_prob,
        reward: eval_reward(judgment.verdict, pair.gold),
        judgment,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReinforceReport {
    pub mean_reward: f64,
    pub baseline: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Gradient of -mean(log P(selection) · (reward − baseline)).
pub fn reinforce_gradients(
    params: &PromptPgParams,
    episodes: &[(PgEpisode, &EpisodePair, &PreparedBank)],
    baseline: f64,
) -> Result<(PromptPgParams, f64)> {
    if episodes.is_empty() {
        return Err(Error::Contract("empty REINFORCE batch".into()));
    }
    let n = episodes.len() as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for (ep, pair, bank) in episodes {
        let (scores, cache) = scores_with_cache(params, &bank.x_k, &pair.x_q, &bank.embeddings)?;
        let avail = available_mask(bank, pair);
        let adv = ep.reward as f64 - baseline;
        loss -= selection_log_prob(&scores, &avail, &ep.selected) * adv / n;
        let g = selection_score_grad(&scores, &avail, &ep.selected);
        let ds: Vec<f64> = g.iter().map(|v| -v * adv / n).collect();
        backward_scores(params, &cache, &ds, &mut grads);
    }
    if !loss.is_finite() || grads.flatten().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("REINFORCE loss/gradient (loss = {loss})")));
    }
    Ok((grads, loss))
}

pub fn reinforce_update(
    params: &mut PromptPgParams,
    adam: &mut super::Adam,
    episodes: &[(PgEpisode, &EpisodePair, &PreparedBank)],
    baseline: f64,
    max_grad_norm: Option<f64>,
) -> Result<ReinforceReport> {
    let (grads, loss) = reinforce_gradients(params, episodes, baseline)?;
    let mut flat = grads.flatten();
    let grad_norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if let Some(max) = max_grad_norm {
        if grad_norm > max {
            flat.iter_mut().for_each(|v| *v *= max / grad_norm);
        }
    }
    adam.step(params.tensors_mut(), &flat)?;
    let mean_reward = episodes.iter().map(|e| e.0.reward as f64).sum::<f64>() / episodes.len() as f64;
    Ok(ReinforceReport {
        mean_reward,
        baseline,
        loss,
        grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vecs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn selection_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..20 {
            let d = 3;
            let p = PromptPgParams::init(d, 4, trial).unwrap();
            let xs = rand_vecs(&mut rng, 7, d);
            let (xk, xq, bank) = (&xs[0], &xs[1], &xs[2..]);
            let avail = vec![true, false, true, true, true];
            let selected = vec![3, 0];
            let f = |p: &PromptPgParams| {
                selection_log_prob(&candidate_scores(p, xk, xq, bank).unwrap(), &avail, &selected)
            };
            let (scores, cache) = scores_with_cache(&p, xk, xq, bank).unwrap();
            let ds = selection_score_grad(&scores, &avail, &selected);
            let mut g = p.zeros_like();
            backward_scores(&p, &cache, &ds, &mut g);
            let ga = g.flatten();
            let mut k = 0;
            for ti in 0..3 {
                let len = p.tensors()[ti].2.len();
                for e in 0..len {
                    let mut a = p.clone();
                    a.tensors_mut()[ti][e] += 1e-5;
                    let mut b = p.clone();
                    b.tensors_mut()[ti][e] -= 1e-5;
                    let num = (f(&a) - f(&b)) / 2e-5;
                    let rel = (num - ga[k]).abs() / (num.abs() + ga[k].abs()).max(1e-5);
                    assert!(rel < 1e-4, "tensor {ti} elem {e}: {num} vs {}", ga[k]);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn greedy_takes_top_scores_and_sampling_is_without_replacement() {
        let scores = [0.1, 2.0, -1.0, 2.0, 0.5];
        let avail = [true; 5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (sel, _) = sample_selection(&scores, &avail, 3, DecodeMode::Greedy, &mut rng);
        assert_eq!(sel, vec![1, 3, 4]);
        for _ in 0..200 {
            let (sel, lp) = sample_selection(&scores, &avail, 4, DecodeMode::Sample, &mut rng);
            let mut s = sel.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 4);
            assert!((lp - selection_log_prob(&scores, &avail, &sel)).abs() < 1e-12);
        }
        let (sel, _) = sample_selection(&scores, &[false, true, false, false, false], 3, DecodeMode::Sample, &mut rng);
        assert_eq!(sel, vec![1]);
    }

    #[test]
    fn constant_reward_gives_zero_expected_gradient() {
        // Exact expectation over all single selections: Σ_i p_i ∇log p_i = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PromptPgParams::init(3, 4, 1).unwrap();
        let xs = rand_vecs(&mut rng, 6, 3);
        let bank = &xs[2..];
        let (scores, cache) = scores_with_cache(&p, &xs[0], &xs[1], bank).unwrap();
        let avail = vec![true; 4];
        let lp = log_softmax(&scores);
        let mut expected = p.zeros_like();
        for i in 0..4 {
            let ds: Vec<f64> = selection_score_grad(&scores, &avail, &[i]).iter().map(|g| g * lp[i].exp()).collect();
            backward_scores(&p, &cache, &ds, &mut expected);
        }
        assert!(expected.flatten().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = PromptPgParams::init(4, 3, 2).unwrap();
        p.save(&dir.path().join("pg.bin"), 2, "x").unwrap();
        let (q, meta) = PromptPgParams::load(&dir.path().join("pg.bin")).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta.kind, PROMPTPG_KIND);
    }
}
