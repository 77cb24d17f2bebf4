//! AdamW, gradient clipping, and scalar schedules.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::params::ParamSet;
use crate::{arg_err, fm, Result};

/// One optimizer group: the named parameters it owns plus its current
/// learning rate and weight decay (callers refresh these from schedules).
pub struct Group {
    pub names: Vec<String>,
    pub lr: f64,
    pub weight_decay: f64,
}

/// AdamW with decoupled weight decay.
///
/// Decay multiplies the parameter by `1 - lr * wd` before the moment update,
/// and is skipped for vector-shaped parameters (biases, norm gains, tokens,
/// scalar temperatures), the usual transformer convention.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new() -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over all groups. Parameters must have harvested gradients.
    pub fn step(&mut self, params: &mut ParamSet, groups: &[Group]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - fm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - fm::pow(self.beta2, self.t as f64);
        for group in groups {
            for name in &group.names {
                let t = params
                    .get_mut(name)
                    .ok_or_else(|| arg_err!("optimizer: missing {name}"))?;
                let decayable = t.shape().iter().filter(|&&d| d > 1).count() >= 2;
                let n = t.numel();
                let grad = t
                    .grad
                    .clone()
                    .ok_or_else(|| arg_err!("optimizer: no grad for {name}"))?;
                let (m, v) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                let data = t.data_mut();
                let decay = if decayable {
                    1.0 - group.lr * group.weight_decay
                } else {
                    1.0
                };
                for i in 0..n {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data[i] = data[i] * decay - group.lr * mhat / (fm::sqrt(vhat) + self.eps);
                }
            }
        }
        Ok(())
    }
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new()
    }
}

/// Clip the global L2 norm of the gradients of `names` to `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut ParamSet, names: &[String], max_norm: f64) -> Result<f64> {
    let mut total = 0.0;
    for name in names {
        let t = params.expect(name)?;
        if let Some(g) = &t.grad {
            for &v in g {
                total += v * v;
            }
        }
    }
    let norm = fm::sqrt(total);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for name in names {
            if let Some(t) = params.get_mut(name) {
                if let Some(g) = &mut t.grad {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
    }
    Ok(norm)
}

/// Piecewise schedule: optional linear warmup from `start` to `peak`, then a
/// half-cosine from `peak` to `end` over the remaining steps, then `end`.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub start: f64,
    pub peak: f64,
    pub end: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn constant(v: f64) -> Schedule {
        Schedule {
            start: v,
            peak: v,
            end: v,
            warmup: 0,
            total: 1,
        }
    }

    /// Half-cosine from `peak` at step 0 to `end` at `total`.
    pub fn cosine(peak: f64, end: f64, total: usize) -> Schedule {
        Schedule {
            start: peak,
            peak,
            end,
            warmup: 0,
            total,
        }
    }

    /// Linear warmup `start -> peak` over `warmup` steps, then cosine to `end`.
    pub fn warmup_cosine(start: f64, peak: f64, end: f64, warmup: usize, total: usize) -> Schedule {
        Schedule {
            start,
            peak,
            end,
            warmup,
            total,
        }
    }

    /// Linear warmup then flat. Used for the teacher temperature.
    pub fn warmup_flat(start: f64, peak: f64, warmup: usize) -> Schedule {
        Schedule {
            start,
            peak,
            end: peak,
            warmup,
            total: warmup.max(1),
        }
    }

    pub fn value(&self, step: usize) -> f64 {
        if step < self.warmup {
            let f = step as f64 / self.warmup as f64;
            return self.start + (self.peak - self.start) * f;
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 {
            return self.end;
        }
        let t = (step - self.warmup).min(span) as f64 / span as f64;
        self.end + 0.5 * (self.peak - self.end) * (1.0 + fm::cos(fm::PI * t))
    }
}
