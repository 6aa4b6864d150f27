use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{read_tensor_file, write_tensor_file, ParamFileMeta};

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// Descends along `grads`, flattened in the same order as `tensors`.
    pub fn step<'a>(&mut self, tensors: impl IntoIterator<Item = &'a mut [f64]>, grads: &[f64]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut k = 0;
        for tensor in tensors {
            for p in tensor.iter_mut() {
                let g = grads[k];
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
                let mh = self.m[k] / c1;
                let vh = self.v[k] / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
                k += 1;
            }
        }
        if k != grads.len() {
            return Err(Error::Contract("parameter count changed under the optimizer".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, config_digest: &str) -> Result<()> {
        let meta = ParamFileMeta {
            kind: "adam".into(),
            seed: 0,
            config_digest: config_digest.into(),
        };
        let n = self.m.len();
        write_tensor_file(
            path,
            &meta,
            &[("t", self.t as usize)],
            &[
                ("hyper".into(), vec![4], &[self.lr, self.beta1, self.beta2, self.eps]),
                ("m".into(), vec![n], &self.m),
                ("v".into(), vec![n], &self.v),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, dims, tensors) = read_tensor_file(path)?;
        let bad = || Error::Format(format!("{}: not an optimizer state file", path.display()));
        if meta.kind != "adam" || tensors.len() != 3 {
            return Err(bad());
        }
        let t = dims.iter().find(|(k, _)| k == "t").map(|(_, v)| *v as u64).ok_or_else(bad)?;
        let h = &tensors[0].data;
        if h.len() != 4 {
            return Err(bad());
        }
        Ok(Adam {
            lr: h[0],
            beta1: h[1],
            beta2: h[2],
            eps: h[3],
            t,
            m: tensors[1].data.clone(),
            v: tensors[2].data.clone(),
        })
    }
}
