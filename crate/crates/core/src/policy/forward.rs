use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{dot, LstmLayer, PolicyParameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Demo(usize),
    Stop,
}

impl Action {
    /// Index into the action vector of a bank with `bank_len` entries.
    pub fn index(self, bank_len: usize) -> usize {
        match self {
            Action::Demo(i) => i,
            Action::Stop => bank_len,
        }
    }

    pub fn from_index(index: usize, bank_len: usize) -> Self {
        if index == bank_len {
            Action::Stop
        } else {
            Action::Demo(index)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverState {
    /// Top-layer hidden vector.
    pub h: Vec<f64>,
    pub(crate) layers: Vec<LayerState>,
    pub selected: Vec<usize>,
    /// Availability of each bank entry.
    pub available: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    /// One per bank entry, then stop. Masked entries hold `-inf`.
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn bank_len(&self) -> usize {
        self.logits.len() - 1
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, lp)| -p * lp)
            .sum()
    }
}

/// Cached activations of one LSTM cell step.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CellCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Post-activation gates, laid out i, f, g, o.
    pub gates: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn lstm_cell(layer: &LstmLayer, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> CellCache {
    let hd = h_prev.len();
    let mut z = layer.bias.clone();
    layer.w_ih.matvec_add(x, &mut z);
    layer.w_hh.matvec_add(h_prev, &mut z);
    let mut gates = z;
    for (k, g) in gates.iter_mut().enumerate() {
        *g = if k / hd == 2 { g.tanh() } else { sigmoid(*g) };
    }
    let mut c = vec![0.0; hd];
    let mut tanh_c = vec![0.0; hd];
    let mut h = vec![0.0; hd];
    for j in 0..hd {
        let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    CellCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        tanh_c,
        c,
        h,
    }
}

fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Contract(format!("{what} has dim {got}, policy expects {want}")));
    }
    Ok(())
}

/// tanh(W0 [x_k ‖ x_q] + b0)
pub(crate) fn fused_query(params: &PolicyParameters, x_k: &[f64], x_q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = params.embedding_dim();
    check_dim("knowledge embedding", x_k.len(), d)?;
    check_dim("question embedding", x_q.len(), d)?;
    let input: Vec<f64> = x_k.iter().chain(x_q).copied().collect();
    let mut h0 = params.b0.clone();
    params.w0.matvec_add(&input, &mut h0);
    h0.iter_mut().for_each(|v| *v = v.tanh());
    Ok((input, h0))
}

/// Initial state: h0 seeds the hidden and cell state of every layer.
pub fn encode_query(params: &PolicyParameters, x_k: &[f64], x_q: &[f64], bank_len: usize) -> Result<RetrieverState> {
    let (_, h0) = fused_query(params, x_k, x_q)?;
    let layers = (0..params.layers())
        .map(|_| LayerState {
            h: h0.clone(),
            c: h0.clone(),
        })
        .collect();
    Ok(RetrieverState {
        h: h0,
        layers,
        selected: Vec::new(),
        available: vec![true; bank_len],
    })
}

/// Feeds the chosen demo's embedding through the LSTM stack and masks it.
pub fn advance_state(
    state: &RetrieverState,
    params: &PolicyParameters,
    demo: usize,
    x_e: &[f64],
) -> Result<RetrieverState> {
    check_dim("demo embedding", x_e.len(), params.embedding_dim())?;
    match state.available.get(demo) {
        Some(true) => {}
        Some(false) => return Err(Error::Contract(format!("demo {demo} is already masked"))),
        None => return Err(Error::Contract(format!("demo {demo} is outside the bank"))),
    }
    let mut layers = Vec::with_capacity(state.layers.len());
    let mut input = x_e.to_vec();
    for (layer, prev) in params.lstm.iter().zip(&state.layers) {
        let cell = lstm_cell(layer, &input, &prev.h, &prev.c);
        input = cell.h.clone();
        layers.push(LayerState { h: cell.h, c: cell.c });
    }
    let mut next = RetrieverState {
        h: input,
        layers,
        selected: state.selected.clone(),
        available: state.available.clone(),
    };
    next.selected.push(demo);
    next.available[demo] = false;
    Ok(next)
}

/// Max-subtracted log-softmax over entries whose logit is finite.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| (v - m).exp())
        .sum();
    let lz = z.ln();
    logits
        .iter()
        .map(|&v| if v.is_finite() { v - m - lz } else { f64::NEG_INFINITY })
        .collect()
}

pub(crate) fn distribution(
    params: &PolicyParameters,
    h: &[f64],
    bank: &[Vec<f64>],
    available: &[bool],
    stop_enabled: bool,
) -> Result<(Vec<f64>, ActionDistribution)> {
    if bank.is_empty() {
        return Err(Error::Contract("scoring against an empty bank".into()));
    }
    let d = params.embedding_dim();
    let mut q = vec![0.0; d];
    params.wa.matvec_t_add(h, &mut q);
    let mut logits = Vec::with_capacity(bank.len() + 1);
    for (x, &ok) in bank.iter().zip(available) {
        check_dim("bank embedding", x.len(), d)?;
        logits.push(if ok { dot(&q, x) } else { f64::NEG_INFINITY });
    }
    logits.push(if stop_enabled { dot(&q, &params.x_stop) } else { f64::NEG_INFINITY });
    if logits.iter().all(|v| !v.is_finite()) {
        return Err(Error::Contract("every action is masked".into()));
    }
    let log_probs = log_softmax(&logits);
    let probs = log_probs.iter().map(|lp| lp.exp()).collect();
    Ok((
        q,
        ActionDistribution {
            logits,
            probs,
            log_probs,
        },
    ))
}

/// Logits hᵀ Wa x for each bank entry and the stop embedding.
pub fn score_actions(
    state: &RetrieverState,
    params: &PolicyParameters,
    bank: &[Vec<f64>],
    stop_enabled: bool,
) -> Result<ActionDistribution> {
    if state.available.len() != bank.len() {
        return Err(Error::Contract(format!(
            "state tracks {} demos, bank has {}",
            state.available.len(),
            bank.len()
        )));
    }
    distribution(params, &state.h, bank, &state.available, stop_enabled).map(|(_, d)| d)
}

/// Greedy picks the highest probability (lowest index on ties).
pub fn select_action<R: Rng + ?Sized>(dist: &ActionDistribution, mode: DecodeMode, rng: &mut R) -> usize {
    match mode {
        DecodeMode::Greedy => {
            let mut best = 0;
            for (i, &p) in dist.probs.iter().enumerate() {
                if p > dist.probs[best] {
                    best = i;
                }
            }
            best
        }
        DecodeMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last = 0;
            for (i, &p) in dist.probs.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
            last
        }
    }
}

pub fn value_estimate(state: &RetrieverState, params: &PolicyParameters) -> f64 {
    dot(&params.value_w, &state.h) + params.value_b[0]
}

pub(crate) fn value_of(params: &PolicyParameters, h: &[f64]) -> f64 {
    dot(&params.value_w, h) + params.value_b[0]
}

/// Greedy action sequence for one query. The policy never sees judge
/// output, so this is exactly the demo sequence a greedy episode uses.
pub fn greedy_plan(
    params: &PolicyParameters,
    x_k: &[f64],
    x_q: &[f64],
    bank: &[Vec<f64>],
    max_steps: usize,
    stop_enabled: bool,
    excluded: Option<usize>,
) -> Result<Vec<Action>> {
    let mut state = encode_query(params, x_k, x_q, bank.len())?;
    if let Some(e) = excluded {
        state.available[e] = false;
    }
    let mut actions = Vec::new();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    while state.selected.len() < max_steps {
        if !stop_enabled && state.available.iter().all(|a| !a) {
            break;
        }
        let dist = score_actions(&state, params, bank, stop_enabled)?;
        let action = Action::from_index(select_action(&dist, DecodeMode::Greedy, &mut rng), bank.len());
        actions.push(action);
        match action {
            Action::Stop => break,
            Action::Demo(i) => state = advance_state(&state, params, i, &bank[i])?,
        }
    }
    Ok(actions)
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DecisionCache {
    pub h: Vec<f64>,
    pub q: Vec<f64>,
    pub dist: ActionDistribution,
    pub value: f64,
}

/// Every intermediate of one episode's forward pass under fixed actions.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub(crate) input: Vec<f64>,
    pub(crate) h0: Vec<f64>,
    /// advances[k][l]: layer l's cell while consuming the k-th selected demo.
    pub(crate) advances: Vec<Vec<CellCache>>,
    pub(crate) decisions: Vec<DecisionCache>,
    pub(crate) bank: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
}

impl EpisodeTrace {
    pub fn num_decisions(&self) -> usize {
        self.decisions.len()
    }

    pub fn distribution(&self, t: usize) -> &ActionDistribution {
        &self.decisions[t].dist
    }

    pub fn value(&self, t: usize) -> f64 {
        self.decisions[t].value
    }

    pub fn hidden(&self, t: usize) -> &[f64] {
        &self.decisions[t].h
    }

    /// Log-probability of the action taken at decision `t`.
    pub fn action_log_prob(&self, t: usize) -> f64 {
        let d = &self.decisions[t].dist;
        d.log_probs[self.actions[t].index(d.bank_len())]
    }
}

/// Replays a fixed action sequence, caching what `backward` needs.
pub fn trace_episode(
    params: &PolicyParameters,
    x_k: &[f64],
    x_q: &[f64],
    bank: &[Vec<f64>],
    excluded: Option<usize>,
    actions: &[Action],
    stop_enabled: bool,
) -> Result<EpisodeTrace> {
    let (input, h0) = fused_query(params, x_k, x_q)?;
    let mut layers: Vec<LayerState> = (0..params.layers())
        .map(|_| LayerState { h: h0.clone(), c: h0.clone() })
        .collect();
    let mut available = vec![true; bank.len()];
    if let Some(e) = excluded {
        available[e] = false;
    }
    let mut top = h0.clone();
    let mut advances = Vec::new();
    let mut decisions = Vec::with_capacity(actions.len());
    for (t, &action) in actions.iter().enumerate() {
        let (q, dist) = distribution(params, &top, bank, &available, stop_enabled)?;
        let idx = action.index(bank.len());
        if idx > bank.len() || !dist.logits[idx].is_finite() {
            return Err(Error::Contract(format!("action {action:?} at step {t} was not available")));
        }
        decisions.push(DecisionCache {
            value: value_of(params, &top),
            h: top.clone(),
            q,
            dist,
        });
        match action {
            Action::Stop => {
                if t + 1 != actions.len() {
                    return Err(Error::Contract("stop must be the final action".into()));
                }
            }
            Action::Demo(i) => {
                available[i] = false;
                if t + 1 < actions.len() {
                    let mut cells = Vec::with_capacity(layers.len());
                    let mut x = bank[i].clone();
                    for (layer, st) in params.lstm.iter().zip(layers.iter_mut()) {
                        let cell = lstm_cell(layer, &x, &st.h, &st.c);
                        x = cell.h.clone();
                        st.h = cell.h.clone();
                        st.c = cell.c.clone();
                        cells.push(cell);
                    }
                    top = x;
                    advances.push(cells);
                }
            }
        }
    }
    Ok(EpisodeTrace {
        input,
        h0,
        advances,
        decisions,
        bank: bank.to_vec(),
        actions: actions.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, PolicyShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn setup(d: usize, h: usize, layers: usize, n: usize, seed: u64) -> (PolicyParameters, Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        let p = init_params(d, h, layers, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let xk = rand_vec(&mut rng, d);
        let xq = rand_vec(&mut rng, d);
        let bank = (0..n).map(|_| rand_vec(&mut rng, d)).collect();
        (p, xk, xq, bank)
    }

    #[test]
    fn zero_fusion_gives_zero_h0_and_uniform_scores() {
        let p = PolicyParameters::zeros(PolicyShape { embedding_dim: 3, hidden: 4, layers: 2 });
        let s = encode_query(&p, &[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5], 4).unwrap();
        assert!(s.h.iter().all(|&v| v == 0.0));
        let bank = vec![vec![1.0; 3]; 4];
        let dist = score_actions(&s, &p, &bank, true).unwrap();
        assert!(dist.logits.iter().all(|&l| l == 0.0));
        assert!(dist.probs.iter().all(|&q| (q - 0.2).abs() < 1e-15));
    }

    #[test]
    fn h0_is_strictly_inside_tanh_range() {
        let (mut p, xk, xq, _) = setup(5, 6, 1, 3, 1);
        p.w0.data.iter_mut().for_each(|v| *v *= 3.0);
        let s = encode_query(&p, &xk, &xq, 3).unwrap();
        assert!(s.h.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn dim_mismatch_is_contract_violation() {
        let (p, xk, _, _) = setup(5, 6, 1, 3, 1);
        assert!(matches!(encode_query(&p, &xk, &[0.0; 4], 3), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_lstm_weights_hand_computed_step() {
        // With all LSTM weights zero and bias b, every gate is a constant:
        // i = f = o = sigmoid(b), g = tanh(b); c1 = f*h0 + i*g; h1 = o*tanh(c1).
        let d = 2;
        let mut p = PolicyParameters::zeros(PolicyShape { embedding_dim: d, hidden: 2, layers: 1 });
        p.b0 = vec![0.3, -0.2];
        let b = 0.4;
        p.lstm[0].bias = vec![b; 8];
        let s0 = encode_query(&p, &[0.0, 0.0], &[0.0, 0.0], 2).unwrap();
        let h0: Vec<f64> = vec![0.3f64.tanh(), (-0.2f64).tanh()];
        assert_eq!(s0.h, h0);
        let s1 = advance_state(&s0, &p, 1, &[0.7, -0.9]).unwrap();
        let sg = 1.0 / (1.0 + (-b).exp());
        let g = b.tanh();
        for j in 0..2 {
            let c1 = sg * h0[j] + sg * g;
            let want = sg * c1.tanh();
            assert!((s1.h[j] - want).abs() < 1e-15);
        }
        assert_eq!(s1.selected, vec![1]);
        assert!(!s1.available[1]);
        assert!(matches!(advance_state(&s1, &p, 1, &[0.7, -0.9]), Err(Error::Contract(_))));
    }

    #[test]
    fn order_of_demos_matters() {
        let (p, xk, xq, bank) = setup(4, 5, 2, 3, 7);
        let s = encode_query(&p, &xk, &xq, 3).unwrap();
        let ab = advance_state(&advance_state(&s, &p, 0, &bank[0]).unwrap(), &p, 1, &bank[1]).unwrap();
        let ba = advance_state(&advance_state(&s, &p, 1, &bank[1]).unwrap(), &p, 0, &bank[0]).unwrap();
        assert_eq!(ab.selected.len(), 2);
        assert!(ab.h.iter().zip(&ba.h).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn masked_entries_get_zero_probability() {
        let (p, xk, xq, bank) = setup(4, 5, 2, 4, 3);
        let s = encode_query(&p, &xk, &xq, 4).unwrap();
        let s = advance_state(&s, &p, 2, &bank[2]).unwrap();
        let dist = score_actions(&s, &p, &bank, false).unwrap();
        assert_eq!(dist.probs[2], 0.0);
        assert_eq!(dist.probs[4], 0.0);
        assert!((dist.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probabilities_normalize_over_many_random_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..1000u64 {
            let (mut p, xk, xq, bank) = setup(3, 4, 1 + (trial % 2) as usize, 5, trial);
            p.wa.data.iter_mut().for_each(|v| *v *= rng.gen_range(0.1..20.0));
            let mut s = encode_query(&p, &xk, &xq, 5).unwrap();
            if trial % 3 == 0 {
                s = advance_state(&s, &p, 1, &bank[1]).unwrap();
            }
            let dist = score_actions(&s, &p, &bank, trial % 5 != 0).unwrap();
            assert!((dist.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn positive_rescaling_of_wa_scales_logits_and_keeps_argmax() {
        let (p, xk, xq, bank) = setup(4, 5, 2, 6, 11);
        let mut scaled = p.clone();
        scaled.wa.data.iter_mut().for_each(|v| *v *= 2.5);
        let s = encode_query(&p, &xk, &xq, 6).unwrap();
        let a = score_actions(&s, &p, &bank, true).unwrap();
        let b = score_actions(&s, &scaled, &bank, true).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((2.5 * x - y).abs() < 1e-12);
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        assert_eq!(
            select_action(&a, DecodeMode::Greedy, &mut rng),
            select_action(&b, DecodeMode::Greedy, &mut rng)
        );
        assert_eq!(
            greedy_plan(&p, &xk, &xq, &bank, 4, true, None).unwrap(),
            greedy_plan(&scaled, &xk, &xq, &bank, 4, true, None).unwrap()
        );
    }

    fn dist_of(probs: &[f64]) -> ActionDistribution {
        ActionDistribution {
            logits: probs.iter().map(|p| p.ln()).collect(),
            probs: probs.to_vec(),
            log_probs: probs.iter().map(|p| p.ln()).collect(),
        }
    }

    #[test]
    fn greedy_and_degenerate_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&dist_of(&[0.1, 0.7, 0.2]), DecodeMode::Greedy, &mut rng), 1);
        assert_eq!(select_action(&dist_of(&[0.5, 0.5]), DecodeMode::Greedy, &mut rng), 0);
        let one_hot = dist_of(&[0.0, 0.0, 1.0]);
        for _ in 0..1000 {
            assert_eq!(select_action(&one_hot, DecodeMode::Sample, &mut rng), 2);
        }
    }

    #[test]
    fn sample_frequencies_within_three_sigma() {
        let probs = [0.05, 0.25, 0.1, 0.6];
        let dist = dist_of(&probs);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[select_action(&dist, DecodeMode::Sample, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn value_head_is_linear() {
        let (mut p, xk, xq, _) = setup(4, 5, 1, 2, 5);
        let s = encode_query(&p, &xk, &xq, 2).unwrap();
        p.value_w.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(value_estimate(&s, &p), 0.0);
        p.value_w = vec![0.3, -0.1, 0.2, 0.5, 0.05];
        let v1 = value_estimate(&s, &p);
        p.value_w.iter_mut().for_each(|v| *v *= 2.0);
        assert!((value_estimate(&s, &p) - 2.0 * v1).abs() < 1e-15);
    }

    #[test]
    fn trace_matches_stepwise_api_exactly() {
        let (p, xk, xq, bank) = setup(4, 5, 2, 5, 21);
        let actions = vec![Action::Demo(3), Action::Demo(0), Action::Stop];
        let trace = trace_episode(&p, &xk, &xq, &bank, Some(1), &actions, true).unwrap();
        let mut s = encode_query(&p, &xk, &xq, 5).unwrap();
        s.available[1] = false;
        for (t, a) in actions.iter().enumerate() {
            let d = score_actions(&s, &p, &bank, true).unwrap();
            assert_eq!(&d, trace.distribution(t));
            assert_eq!(value_estimate(&s, &p), trace.value(t));
            if let Action::Demo(i) = a {
                s = advance_state(&s, &p, *i, &bank[*i]).unwrap();
            }
        }
        assert!(trace_episode(&p, &xk, &xq, &bank, Some(1), &[Action::Demo(1)], true).is_err());
    }
}
