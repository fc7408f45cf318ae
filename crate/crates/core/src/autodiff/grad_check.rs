//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::params::{Bound, ParamSet};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor name, flat index)` of every coordinate over tolerance.
    pub failing: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64, tol: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = err;
        }
        if !(err < tol) {
            self.failing.push((name.to_string(), idx));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.failing.extend(other.failing);
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compare the tape gradient of scalar `f` at `x` against
/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.scalar_value(out))
    };
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.record("x", i, analytic.data()[i], (plus - minus) / (2.0 * eps), tol);
    }
    Ok(report)
}

/// Which coordinates of each parameter tensor to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to this many coordinates per tensor, drawn without replacement.
    SamplePerTensor(usize),
}

/// Finite-difference check of `loss(params)` over named parameters.
pub fn grad_check_params<F, R>(
    params: &ParamSet,
    loss: F,
    eps: f64,
    tol: f64,
    coords: Coords,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let bound = params.bind_all(&mut tape);
    let out = loss(&mut tape, &bound)?;
    tape.backward(out)?;
    let grads = bound.grads(&tape);

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let out = loss(&mut tape, &b)?;
        Ok(tape.scalar_value(out))
    };

    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let idxs: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::SamplePerTensor(k) if k >= n => (0..n).collect(),
            Coords::SamplePerTensor(k) => {
                let mut v = sample(rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
        };
        for i in idxs {
            let orig = probe.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            report.record(&name, i, analytic, (plus - minus) / (2.0 * eps), tol);
        }
    }
    Ok(report)
}
