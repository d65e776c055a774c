//! RAdam and AdamW over flat parameter slices, plus the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Radam,
    Adamw,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radam" => Ok(OptimizerKind::Radam),
            "adamw" => Ok(OptimizerKind::Adamw),
            _ => Err(Error::Config(format!("unknown optimizer '{s}'"))),
        }
    }
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Radam => "radam",
            OptimizerKind::Adamw => "adamw",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed update steps.
    pub t: u64,
    /// First and second moments per parameter slot; empty until first touched.
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_slots: usize, weight_decay: f64) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: vec![Vec::new(); n_slots],
            v: vec![Vec::new(); n_slots],
        }
    }

    /// Starts a new update step; call once before the per-slot updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates `param` in place from `grad` using moments in `slot`.
    pub fn update(&mut self, slot: usize, param: &mut [f32], grad: &[f32], lr: f64) {
        assert_eq!(param.len(), grad.len());
        assert!(self.t > 0, "begin_step not called");
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        if m.is_empty() {
            m.resize(param.len(), 0.0);
            v.resize(param.len(), 0.0);
        }
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let t = self.t as f64;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        // variance rectification term; None means the un-adapted momentum step
        let rect = match self.kind {
            OptimizerKind::Adamw => Some(1.0),
            OptimizerKind::Radam => {
                let rho_inf = 2.0 / (1.0 - b2) - 1.0;
                let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bc2;
                (rho_t > 5.0).then(|| {
                    ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
                })
            }
        };
        let decay = if self.kind == OptimizerKind::Adamw {
            1.0 - lr * self.weight_decay
        } else {
            1.0
        };
        for i in 0..param.len() {
            let g = f64::from(grad[i]);
            let mi = b1 * f64::from(m[i]) + (1.0 - b1) * g;
            let vi = b2 * f64::from(v[i]) + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let mut p = f64::from(param[i]) * decay;
            let m_hat = mi / bc1;
            p -= match rect {
                Some(r) => lr * r * m_hat / ((vi / bc2).sqrt() + eps),
                None => lr * m_hat,
            };
            param[i] = p as f32;
        }
    }
}

/// Linear warmup to `lr`, then constant or linear decay to zero at `total` steps.
pub fn lr_at(step: usize, lr: f64, warmup: usize, total: usize, decay: bool) -> f64 {
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    if !decay || total <= warmup {
        return lr;
    }
    let rem = total.saturating_sub(step) as f64 / (total - warmup) as f64;
    lr * rem.clamp(0.0, 1.0)
}

/// Scales all gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [&mut [f32]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_probe(kind: OptimizerKind) -> f64 {
        // f(x) = 0.5 Σ a_i (x_i - c_i)^2 with varied curvature
        let a = [1.0f64, 10.0, 0.1, 3.0];
        let c = [0.5f64, -1.0, 2.0, 0.25];
        let mut x = vec![0.0f32; 4];
        let mut opt = Optimizer::new(kind, 1, 0.0);
        let steps = 5000;
        for s in 0..steps {
            let g: Vec<f32> = (0..4).map(|i| (a[i] * (f64::from(x[i]) - c[i])) as f32).collect();
            opt.begin_step();
            opt.update(0, &mut x, &g, lr_at(s, 1e-2, 0, steps, true));
        }
        (0..4).map(|i| (f64::from(x[i]) - c[i]).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn optimizers_reach_the_minimizer() {
        for kind in [OptimizerKind::Radam, OptimizerKind::Adamw] {
            let err = quadratic_probe(kind);
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    #[test]
    fn radam_warms_up_with_plain_momentum() {
        // rho_t <= 5 for the first steps, so the update is lr * m_hat = lr * g
        let mut opt = Optimizer::new(OptimizerKind::Radam, 1, 0.0);
        let mut x = vec![1.0f32];
        opt.begin_step();
        opt.update(0, &mut x, &[2.0], 0.1);
        assert!((x[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn schedule_shape() {
        assert!((lr_at(0, 1.0, 4, 100, false) - 0.25).abs() < 1e-12);
        assert_eq!(lr_at(3, 1.0, 4, 100, false), 1.0);
        assert_eq!(lr_at(50, 1.0, 0, 100, false), 1.0);
        assert!((lr_at(50, 1.0, 0, 100, true) - 0.5).abs() < 1e-12);
        assert_eq!(lr_at(100, 1.0, 0, 100, true), 0.0);
    }

    #[test]
    fn clipping() {
        let mut a = vec![3.0f32];
        let mut b = vec![4.0f32];
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-6 && (b[0] - 0.8).abs() < 1e-6);
        let mut c = vec![0.3f32];
        clip_global_norm(&mut [&mut c], 1.0);
        assert_eq!(c[0], 0.3);
    }
}
