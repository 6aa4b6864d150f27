//! The sequential retriever policy: a fused (knowledge, question) encoding
//! seeds a stacked LSTM that consumes selected demonstrations; a bilinear
//! form scores every bank entry plus a learned stop embedding.

mod backward;
mod forward;
mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{backward, StepGrad};
pub use forward::{
    advance_state, encode_query, greedy_plan, log_softmax, score_actions, select_action,
    trace_episode, value_estimate, Action, ActionDistribution, DecodeMode, EpisodeTrace,
    RetrieverState,
};
pub use io::{
    load_params, load_params_expecting, read_tensor_file, save_params, write_tensor_file, ParamFileMeta,
    StoredTensor,
};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// out += self * x
    pub fn matvec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// out += selfᵀ * y
    pub fn matvec_t_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yr, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yr != 0.0 {
                axpy(yr, row, out);
            }
        }
    }

    /// self += a bᵀ
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (&ar, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if ar != 0.0 {
                axpy(ar, b, row);
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// One LSTM layer; gate rows are ordered input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub w_ih: Matrix,
    pub w_hh: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    pub shape: PolicyShape,
    /// Fusion layer, hidden × 2·embedding_dim.
    pub w0: Matrix,
    pub b0: Vec<f64>,
    pub lstm: Vec<LstmLayer>,
    /// Bilinear action form, hidden × embedding_dim.
    pub wa: Matrix,
    pub x_stop: Vec<f64>,
    pub value_w: Vec<f64>,
    pub value_b: Vec<f64>,
}

impl PolicyParameters {
    pub fn zeros(shape: PolicyShape) -> Self {
        let PolicyShape {
            embedding_dim: d,
            hidden: h,
            layers,
        } = shape;
        let lstm = (0..layers)
            .map(|l| LstmLayer {
                w_ih: Matrix::zeros(4 * h, if l == 0 { d } else { h }),
                w_hh: Matrix::zeros(4 * h, h),
                bias: vec![0.0; 4 * h],
            })
            .collect();
        PolicyParameters {
            shape,
            w0: Matrix::zeros(h, 2 * d),
            b0: vec![0.0; h],
            lstm,
            wa: Matrix::zeros(h, d),
            x_stop: vec![0.0; d],
            value_w: vec![0.0; h],
            value_b: vec![0.0],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    pub fn embedding_dim(&self) -> usize {
        self.shape.embedding_dim
    }

    pub fn hidden(&self) -> usize {
        self.shape.hidden
    }

    pub fn layers(&self) -> usize {
        self.shape.layers
    }

    /// Named tensors with their shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![
            ("w0".into(), vec![self.w0.rows, self.w0.cols], &self.w0.data),
            ("b0".into(), vec![self.b0.len()], &self.b0),
        ];
        for (l, layer) in self.lstm.iter().enumerate() {
            out.push((format!("lstm.{l}.w_ih"), vec![layer.w_ih.rows, layer.w_ih.cols], &layer.w_ih.data));
            out.push((format!("lstm.{l}.w_hh"), vec![layer.w_hh.rows, layer.w_hh.cols], &layer.w_hh.data));
            out.push((format!("lstm.{l}.bias"), vec![layer.bias.len()], &layer.bias));
        }
        out.push(("wa".into(), vec![self.wa.rows, self.wa.cols], &self.wa.data));
        out.push(("x_stop".into(), vec![self.x_stop.len()], &self.x_stop));
        out.push(("value.w".into(), vec![self.value_w.len()], &self.value_w));
        out.push(("value.b".into(), vec![1], &self.value_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("w0".into(), &mut self.w0.data),
            ("b0".into(), &mut self.b0),
        ];
        for (l, layer) in self.lstm.iter_mut().enumerate() {
            out.push((format!("lstm.{l}.w_ih"), &mut layer.w_ih.data));
            out.push((format!("lstm.{l}.w_hh"), &mut layer.w_hh.data));
            out.push((format!("lstm.{l}.bias"), &mut layer.bias));
        }
        out.push(("wa".into(), &mut self.wa.data));
        out.push(("x_stop".into(), &mut self.x_stop));
        out.push(("value.w".into(), &mut self.value_w));
        out.push(("value.b".into(), &mut self.value_b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.2.iter().copied()).collect()
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (name, _, data) in self.tensors() {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{what} tensor `{name}`")));
            }
        }
        Ok(())
    }

    /// self += alpha * other
    pub fn add_scaled(&mut self, alpha: f64, other: &PolicyParameters) {
        let src = other.tensors();
        for ((_, dst), (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            axpy(alpha, s, dst);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|t| dot(t.2, t.2)).sum()
    }
}

/// Uniform in [-s, s] with s = 1/sqrt(fan-in) for weights, zero biases.
pub fn init_params(embedding_dim: usize, hidden: usize, layers: usize, seed: u64) -> Result<PolicyParameters> {
    if embedding_dim == 0 || hidden == 0 || layers == 0 {
        return Err(Error::Domain("policy dimensions must be positive".into()));
    }
    let shape = PolicyShape {
        embedding_dim,
        hidden,
        layers,
    };
    let mut p = PolicyParameters::zeros(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |data: &mut [f64], fan_in: usize| {
        let s = 1.0 / (fan_in as f64).sqrt();
        data.iter_mut().for_each(|v| *v = rng.gen_range(-s..=s));
    };
    fill(&mut p.w0.data, 2 * embedding_dim);
    for (l, layer) in p.lstm.iter_mut().enumerate() {
        fill(&mut layer.w_ih.data, if l == 0 { embedding_dim } else { hidden });
        fill(&mut layer.w_hh.data, hidden);
    }
    fill(&mut p.wa.data, embedding_dim);
    fill(&mut p.x_stop, embedding_dim);
    fill(&mut p.value_w, hidden);
    Ok(p)
}
