use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::tensor::{ParamId, ParamStore, Tensor};

const STEP_KEY: &str = "adam.step";

/// Adam with a warm-up/inverse-square-root learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
    step: usize,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64, warmup: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Number of updates applied so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// `lr · min(t/warmup, sqrt(warmup/t))` for update number `t ≥ 1`.
    pub fn rate(&self, t: usize) -> f64 {
        if self.warmup == 0 {
            return self.lr;
        }
        let (t, w) = (t as f64, self.warmup as f64);
        self.lr * (t / w).min((w / t).sqrt())
    }

    /// Applies one update to every listed parameter that holds a gradient.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) {
        self.step += 1;
        let t = self.step;
        let lr = self.rate(t);
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for &id in ids {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let n = grad.len();
            let m = self.m[id.0].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.0].get_or_insert_with(|| vec![0.0; n]);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }

    /// Moments as named arrays (`adam.m/<param>`, `adam.v/<param>`) plus the
    /// step counter, for resumable checkpoints.
    pub fn write_state(&self, store: &ParamStore, ck: &mut Checkpoint) {
        ck.meta.insert(STEP_KEY.into(), self.step.to_string());
        for (which, slots) in [("m", &self.m), ("v", &self.v)] {
            for (i, s) in slots.iter().enumerate() {
                if let Some(s) = s {
                    let p = store.get(ParamId(i));
                    let t = Tensor::new(p.value.shape().to_vec(), s.clone()).expect("moment matches parameter");
                    ck.arrays.push((format!("adam.{which}/{}", p.name), t));
                }
            }
        }
    }

    pub fn read_state(&mut self, store: &ParamStore, ck: &Checkpoint) -> Result<()> {
        let step = ck.meta.get(STEP_KEY).ok_or_else(|| Error::Checkpoint("no optimizer state in checkpoint".into()))?;
        self.step = step.parse().map_err(|_| Error::Checkpoint(format!("bad {STEP_KEY}")))?;
        self.m = vec![None; store.len()];
        self.v = vec![None; store.len()];
        let by_name: BTreeMap<&str, ParamId> = store.iter().map(|(id, p)| (p.name.as_str(), id)).collect();
        for (name, t) in &ck.arrays {
            let Some((head, param)) = name.split_once('/') else { continue };
            let slots = match head {
                "adam.m" => &mut self.m,
                "adam.v" => &mut self.v,
                _ => continue,
            };
            let id = *by_name.get(param).ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown {param}")))?;
            if store.get(id).value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {param}")));
            }
            slots[id.0] = Some(t.data().to_vec());
        }
        Ok(())
    }
}
