//! Adam with a fixed learning rate and global-norm gradient clipping.

use crate::model::ParamStore;

pub const CLIP_NORM: f32 = 1.0;

pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f32) -> Self {
        let m = (0..params.len())
            .map(|i| vec![0.0; params.values(i).len()])
            .collect();
        let v = (0..params.len())
            .map(|i| vec![0.0; params.values(i).len()])
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    /// Drop all moment state (used at re-initialization).
    pub fn reset(&mut self) {
        self.t = 0;
        for m in &mut self.m {
            m.iter_mut().for_each(|x| *x = 0.0);
        }
        for v in &mut self.v {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// One update from per-parameter gradients (aligned with the store).
    /// Gradients are jointly rescaled to a global norm of at most
    /// [`CLIP_NORM`] first.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut [Option<Vec<f32>>]) {
        let mut sq_sum = 0.0f64;
        for g in grads.iter().flatten() {
            for &x in g {
                sq_sum += (x as f64) * (x as f64);
            }
        }
        let norm = sq_sum.sqrt() as f32;
        if norm > CLIP_NORM {
            let scale = CLIP_NORM / norm;
            for g in grads.iter_mut().flatten() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        }

        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.values_mut(i);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / b1c;
                let vhat = v[j] / b2c;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
