//! AdamW with decoupled weight decay, and a linear-warmup cosine schedule.

use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

pub struct AdamW<T: Scalar> {
    cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    /// State is sized from the parameter shapes, in the order they will be
    /// passed to [`AdamW::step`].
    pub fn new(cfg: AdamWConfig, params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        AdamW {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update at learning rate `lr`:
    /// `p ← p − lr·(m̂/(√v̂ + ε) + λ·p)`.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = self.cfg;
        let (b1, b2): (T, T) = (s(c.beta1), s(c.beta2));
        let bc1: T = s(1.0 - c.beta1.powi(self.t));
        let bc2: T = s(1.0 - c.beta2.powi(self.t));
        let (lr, eps, wd): (T, T, T) = (s(lr), s(c.eps), s(c.weight_decay));
        let one = T::one();
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if g.len() != p.numel() {
                return Err(Error::dim("adamw", &[g.len()], p.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup` steps, then cosine decay to zero
/// at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    /// Warmup length is `ceil(warmup_frac · total)`.
    pub fn new(base_lr: f64, warmup_frac: f64, total: usize) -> Self {
        let warmup = ((warmup_frac * total as f64).ceil() as usize).min(total);
        CosineSchedule {
            base_lr,
            warmup,
            total,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base_lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
