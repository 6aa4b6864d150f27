use super::forward::EpisodeTrace;
use super::{axpy, PolicyParameters};
use crate::error::{Error, Result};

/// Upstream gradient of a scalar loss at one decision point.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrad {
    /// dL/dlogit for each bank entry then stop; masked entries are ignored.
    pub dlogits: Vec<f64>,
    /// dL/dV at this state.
    pub dvalue: f64,
}

impl StepGrad {
    pub fn zero(actions: usize) -> Self {
        StepGrad {
            dlogits: vec![0.0; actions],
            dvalue: 0.0,
        }
    }
}

/// Back-propagates per-decision gradients through the whole episode,
/// accumulating into `grads`.
pub fn backward(
    params: &PolicyParameters,
    trace: &EpisodeTrace,
    steps: &[StepGrad],
    grads: &mut PolicyParameters,
) -> Result<()> {
    if steps.len() != trace.decisions.len() {
        return Err(Error::Contract(format!(
            "{} step gradients for {} decisions",
            steps.len(),
            trace.decisions.len()
        )));
    }
    let hd = params.hidden();
    let n = trace.bank.len();
    let mut dtop: Vec<Vec<f64>> = Vec::with_capacity(steps.len());
    for (dec, sg) in trace.decisions.iter().zip(steps) {
        if sg.dlogits.len() != n + 1 {
            return Err(Error::Contract("step gradient has wrong action count".into()));
        }
        let mut dq = vec![0.0; params.embedding_dim()];
        for (i, &g) in sg.dlogits.iter().enumerate() {
            if g == 0.0 || !dec.dist.logits[i].is_finite() {
                continue;
            }
            if i < n {
                axpy(g, &trace.bank[i], &mut dq);
            } else {
                axpy(g, &dec.q, &mut grads.x_stop);
                axpy(g, &params.x_stop, &mut dq);
            }
        }
        grads.wa.add_outer(&dec.h, &dq);
        let mut dh = vec![0.0; hd];
        params.wa.matvec_add(&dq, &mut dh);
        if sg.dvalue != 0.0 {
            axpy(sg.dvalue, &dec.h, &mut grads.value_w);
            grads.value_b[0] += sg.dvalue;
            axpy(sg.dvalue, &params.value_w, &mut dh);
        }
        dtop.push(dh);
    }

    let nl = params.layers();
    let mut dh = vec![vec![0.0; hd]; nl];
    let mut dc = vec![vec![0.0; hd]; nl];
    if let Some(last) = dtop.last() {
        axpy(1.0, last, &mut dh[nl - 1]);
    }
    for k in (0..trace.advances.len()).rev() {
        for l in (0..nl).rev() {
            let cell = &trace.advances[k][l];
            let layer = &params.lstm[l];
            let glayer = &mut grads.lstm[l];
            let mut dz = vec![0.0; 4 * hd];
            let mut dc_prev = vec![0.0; hd];
            for j in 0..hd {
                let (i, f, g, o) = (
                    cell.gates[j],
                    cell.gates[hd + j],
                    cell.gates[2 * hd + j],
                    cell.gates[3 * hd + j],
                );
                let tc = cell.tanh_c[j];
                let dcj = dc[l][j] + dh[l][j] * o * (1.0 - tc * tc);
                let d_o = dh[l][j] * tc;
                dz[j] = dcj * g * i * (1.0 - i);
                dz[hd + j] = dcj * cell.c_prev[j] * f * (1.0 - f);
                dz[2 * hd + j] = dcj * i * (1.0 - g * g);
                dz[3 * hd + j] = d_o * o * (1.0 - o);
                dc_prev[j] = dcj * f;
            }
            glayer.w_ih.add_outer(&dz, &cell.x);
            glayer.w_hh.add_outer(&dz, &cell.h_prev);
            axpy(1.0, &dz, &mut glayer.bias);
            let mut dh_prev = vec![0.0; hd];
            layer.w_hh.matvec_t_add(&dz, &mut dh_prev);
            if l > 0 {
                layer.w_ih.matvec_t_add(&dz, &mut dh[l - 1]);
            }
            dh[l] = dh_prev;
            dc[l] = dc_prev;
        }
        axpy(1.0, &dtop[k], &mut dh[nl - 1]);
    }
    let mut dz0 = vec![0.0; hd];
    for j in 0..hd {
        let total: f64 = (0..nl).map(|l| dh[l][j] + dc[l][j]).sum();
        dz0[j] = total * (1.0 - trace.h0[j] * trace.h0[j]);
    }
    grads.w0.add_outer(&dz0, &trace.input);
    axpy(1.0, &dz0, &mut grads.b0);

    for (name, _, data) in grads.tensors() {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient tensor `{name}`")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::forward::{trace_episode, Action};
    use crate::policy::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Case {
        xk: Vec<f64>,
        xq: Vec<f64>,
        bank: Vec<Vec<f64>>,
        actions: Vec<Action>,
        stop: bool,
        // Fixed random loss weights: L = Σ_t Σ_i a_ti·logp_ti + b_t·V_t + c_t·H_t
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        c: Vec<f64>,
    }

    fn loss(p: &PolicyParameters, case: &Case) -> f64 {
        let tr = trace_episode(p, &case.xk, &case.xq, &case.bank, None, &case.actions, case.stop).unwrap();
        let mut l = 0.0;
        for t in 0..tr.num_decisions() {
            let d = tr.distribution(t);
            for (i, lp) in d.log_probs.iter().enumerate() {
                if lp.is_finite() {
                    l += case.a[t][i] * lp;
                }
            }
            l += case.b[t] * tr.value(t) + case.c[t] * d.entropy();
        }
        l
    }

    fn analytic(p: &PolicyParameters, case: &Case) -> PolicyParameters {
        let tr = trace_episode(p, &case.xk, &case.xq, &case.bank, None, &case.actions, case.stop).unwrap();
        let mut steps = Vec::new();
        for t in 0..tr.num_decisions() {
            let d = tr.distribution(t);
            let m = d.probs.len();
            let mut g = vec![0.0; m];
            let asum: f64 = (0..m).filter(|&i| d.probs[i] > 0.0).map(|i| case.a[t][i]).sum();
            let h = d.entropy();
            for i in 0..m {
                if d.probs[i] > 0.0 {
                    // d/dz_i Σ_j a_j logp_j = a_i - p_i Σ a_j
                    g[i] = case.a[t][i] - d.probs[i] * asum;
                    // dH/dz_i = -p_i (log p_i + H)
                    g[i] += case.c[t] * (-d.probs[i] * (d.log_probs[i] + h));
                }
            }
            steps.push(StepGrad { dlogits: g, dvalue: case.b[t] });
        }
        let mut grads = p.zeros_like();
        backward(p, &tr, &steps, &mut grads).unwrap();
        grads
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let mut worst: f64 = 0.0;
        for net in 0..100u64 {
            let d = rng.gen_range(2..=8);
            let h = rng.gen_range(2..=4);
            let layers = rng.gen_range(1..=2);
            let n = rng.gen_range(3..=5);
            let mut p = init_params(d, h, layers, net).unwrap();
            for (_, t) in p.tensors_mut() {
                t.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
            let v = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let bank: Vec<Vec<f64>> = (0..n).map(|_| v(&mut rng)).collect();
            let steps = rng.gen_range(1..=3);
            let stop = rng.gen_bool(0.7);
            let mut actions: Vec<Action> = (0..steps).map(Action::Demo).collect();
            if stop && rng.gen_bool(0.5) {
                *actions.last_mut().unwrap() = Action::Stop;
            }
            let case = Case {
                xk: v(&mut rng),
                xq: v(&mut rng),
                bank,
                a: (0..steps).map(|_| (0..=n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
                b: (0..steps).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                c: (0..steps).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                actions,
                stop,
            };
            let g = analytic(&p, &case);
            let eps = 1e-5;
            let names: Vec<String> = p.tensors().into_iter().map(|t| t.0).collect();
            let sizes: Vec<usize> = p.tensors().into_iter().map(|t| t.2.len()).collect();
            let ga = g.flatten();
            let mut offset = 0;
            for (ti, &size) in sizes.iter().enumerate() {
                for e in 0..size {
                    let mut plus = p.clone();
                    plus.tensors_mut()[ti].1[e] += eps;
                    let mut minus = p.clone();
                    minus.tensors_mut()[ti].1[e] -= eps;
                    let num = (loss(&plus, &case) - loss(&minus, &case)) / (2.0 * eps);
                    let an = ga[offset + e];
                    let rel = (num - an).abs() / (num.abs() + an.abs()).max(1e-5);
                    worst = worst.max(rel);
                    assert!(rel <= 1e-4, "net {net} tensor {} elem {e}: analytic {an} numeric {num}", names[ti]);
                }
                offset += size;
            }
        }
        assert!(worst <= 1e-4);
    }

    #[test]
    fn masked_logit_gradients_are_ignored() {
        let p = init_params(3, 2, 1, 0).unwrap();
        let bank = vec![vec![0.1, 0.2, 0.3], vec![0.3, -0.1, 0.0]];
        let tr = trace_episode(&p, &[0.1; 3], &[0.2; 3], &bank, None, &[Action::Demo(0)], false).unwrap();
        let mut a = p.zeros_like();
        let mut b = p.zeros_like();
        backward(&p, &tr, &[StepGrad { dlogits: vec![0.5, -0.5, 0.0], dvalue: 0.0 }], &mut a).unwrap();
        backward(&p, &tr, &[StepGrad { dlogits: vec![0.5, -0.5, 9.0], dvalue: 0.0 }], &mut b).unwrap();
        assert_eq!(a, b);
        assert!(a.x_stop.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let p = init_params(3, 2, 1, 0).unwrap();
        let bank = vec![vec![0.1, 0.2, 0.3]];
        let tr = trace_episode(&p, &[0.1; 3], &[0.2; 3], &bank, None, &[Action::Stop], true).unwrap();
        let mut g = p.zeros_like();
        let err = backward(&p, &tr, &[StepGrad { dlogits: vec![0.0, f64::NAN], dvalue: 0.0 }], &mut g).unwrap_err();
        assert!(matches!(err, Error::NonFinite(m) if m.starts_with("gradient tensor")));
    }
}
