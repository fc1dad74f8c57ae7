//! Finite-difference gradient checking.
//!
//! The checked function is sum-reduced when it is not already scalar, its
//! analytic gradient comes from [`Tape::backward`], and each component is
//! compared with a central difference `(f(x+h) - f(x-h)) / 2h`. The error
//! for one component is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input or parameter index, element index) of the worst component.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric values at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
    /// Frozen parameters, which have no analytic gradient.
    pub skipped: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            worst_values: None,
            checked: 0,
            skipped: 0,
        }
    }

    fn observe(&mut self, which: (usize, usize), analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            if err >= self.max_rel_error {
                self.worst = Some(which);
                self.worst_values = Some((analytic, numeric));
            }
        }
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(TensorError::InvalidArgument(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    Ok(())
}

fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        Ok(out)
    } else {
        tape.sum(out)
    }
}

/// Checks `f` with respect to every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_step(h)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let out = reduce(&mut tape, out)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let out = reduce(&mut tape, out)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::new();
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + h;
            let fp = eval(&probe)?;
            probe[i].data_mut()[e] = orig - h;
            let fm = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            report.observe((i, e), analytic.data()[e], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks a parameterised graph against every trainable parameter element.
/// Frozen parameters are counted in `skipped`; if one of them does receive
/// an analytic gradient that is an error.
pub fn grad_check_params<F>(f: F, store: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_step(h)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        let out = reduce(&mut tape, out)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let out = reduce(&mut tape, out)?;
    let grads = tape.backward(out)?.by_param();

    let mut report = GradCheckReport::new();
    let mut probe = store.clone();
    for (id, p) in store.iter() {
        if p.frozen {
            if grads.contains_key(&id) {
                return Err(TensorError::Frozen(format!("{} received a gradient", p.name)));
            }
            report.skipped += 1;
            continue;
        }
        let analytic = grads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for e in 0..p.value.numel() {
            let orig = p.value.data()[e];
            set(&mut probe, id, e, orig + h);
            let fp = eval(&probe)?;
            set(&mut probe, id, e, orig - h);
            let fm = eval(&probe)?;
            set(&mut probe, id, e, orig);
            report.observe((id.0, e), analytic.data()[e], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}

fn set(store: &mut ParamStore, id: ParamId, e: usize, v: f64) {
    store.value_mut(id).expect("trainable").data_mut()[e] = v;
}
