//! Adam / SGD with linear warmup, and the shared step driver.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimOptions {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of total steps spent ramping the learning rate up from 0.
    pub warmup_frac: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
}

impl OptimOptions {
    pub fn adam(lr: f64) -> Self {
        OptimOptions {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.1,
            grad_clip: Some(1.0),
        }
    }
}

/// Learning-rate multiplier at 0-based `step`: linear from 1/w to 1 over the
/// first `w = ceil(warmup_frac * total)` steps, then constant.
pub fn warmup_factor(step: usize, total: usize, warmup_frac: f64) -> f64 {
    let w = (warmup_frac * total as f64).ceil() as usize;
    if w == 0 || step >= w {
        1.0
    } else {
        (step + 1) as f64 / w as f64
    }
}

pub struct Optimizer {
    opts: OptimOptions,
    total_steps: usize,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(opts: OptimOptions, total_steps: usize) -> Self {
        Optimizer {
            opts,
            total_steps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let lr = self.opts.lr * warmup_factor(self.step, self.total_steps, self.opts.warmup_frac);
        let clip = match self.opts.grad_clip {
            Some(max) => {
                let norm = grads
                    .values()
                    .flat_map(|g| g.data())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let o = &self.opts;
        for (name, g) in grads {
            let p = params.get_mut(name)?.data_mut();
            match o.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.iter_mut().zip(g.data()) {
                        *w -= lr * clip * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
                    let (bc1, bc2) = (1.0 - o.beta1.powi(t), 1.0 - o.beta2.powi(t));
                    for i in 0..p.len() {
                        let gi = g.data()[i] * clip;
                        m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
                        v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
                        p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + o.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Run `total_steps` optimizer steps. `step_loss` records one step's scalar
/// loss on the given tape. Parameters are only updated after a finite loss and
/// finite gradients, so on [`Error::Divergence`] `params` still hold the last
/// good state.
pub fn run_steps<F>(
    params: &mut ParamSet,
    trainable: &dyn Fn(&str) -> bool,
    opts: &OptimOptions,
    total_steps: usize,
    mut step_loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, &mut Tape, &Bound) -> Result<Var>,
{
    let mut opt = Optimizer::new(opts.clone(), total_steps);
    let mut losses = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, trainable);
        let loss = match step_loss(step, &mut tape, &bound) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        if grads.values().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss: value });
        }
        opt.apply(params, &grads)?;
        losses.push(value);
    }
    Ok(losses)
}
