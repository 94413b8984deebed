//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes on fresh tapes, so it
//! shares nothing with the backward rules it certifies.
//!
//! Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
//! The floor keeps gradients that are zero up to rounding from dividing noise
//! by noise.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input or parameter index, element index, analytic, numeric)
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = Some((input, elem, analytic, numeric));
        }
    }
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract(format!("gradcheck needs a scalar, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Checks the gradient of `build` with respect to every element of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], build: F, step: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut tape, &vars)?;
    scalar_of(&tape, loss)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
        let l = build(&mut t, &vs)?;
        scalar_of(&t, l)
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            report.record(i, e, analytic[e], (plus - minus) / (2.0 * step), floor);
        }
    }
    Ok(report)
}

/// Checks the gradient of a model loss with respect to the listed stored
/// weights. `build` must place weights on the tape via [`Tape::param`].
pub fn check_params<F>(
    store: &ParamStore<f64>,
    params: &[ParamId],
    build: F,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&analytic_store, &mut tape)?;
    scalar_of(&tape, loss)?;
    tape.backward_into(loss, &mut analytic_store)?;

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (pi, &id) in params.iter().enumerate() {
        let p = analytic_store.get(id);
        let n = p.tensor.numel();
        let analytic = p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for e in 0..n {
            let orig = store.tensor(id).data()[e];
            work.tensor_mut(id).data_mut()[e] = orig + step;
            let mut t = Tape::inference();
            let l = build(&work, &mut t)?;
            let plus = scalar_of(&t, l)?;
            work.tensor_mut(id).data_mut()[e] = orig - step;
            let mut t = Tape::inference();
            let l = build(&work, &mut t)?;
            let minus = scalar_of(&t, l)?;
            work.tensor_mut(id).data_mut()[e] = orig;
            report.record(pi, e, analytic[e], (plus - minus) / (2.0 * step), floor);
        }
    }
    Ok(report)
}
