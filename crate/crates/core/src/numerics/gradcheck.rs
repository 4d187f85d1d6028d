//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{Matrix, ParamMap, Tape, Var};
use crate::error::{Error, Result};

/// Per-parameter worst relative error from [`grad_check`].
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }
}

/// Compares analytic gradients returned by `f` against central differences with step `h`.
///
/// `f` maps a parameter set to `(value, gradient per parameter)`. The error for a
/// coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(theta: &ParamMap, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamMap) -> Result<(f64, ParamMap)>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be > 0, got {h}")));
    }
    let (value, analytic) = f(theta)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("f(theta) = {value}")));
    }
    let mut per_param = BTreeMap::new();
    let mut probe = theta.clone();
    for (name, m) in theta {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for {name}")))?;
        grad.expect_shape(m.shape())?;
        let mut worst = 0.0f64;
        for idx in 0..m.len() {
            let original = m.data()[idx];
            probe.get_mut(name).unwrap().data_mut()[idx] = original + h;
            let plus = f(&probe)?.0;
            probe.get_mut(name).unwrap().data_mut()[idx] = original - h;
            let minus = f(&probe)?.0;
            probe.get_mut(name).unwrap().data_mut()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!("non-finite value perturbing {name}[{idx}]")));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = (grad.data()[idx] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        per_param.insert(name.clone(), worst);
    }
    Ok(GradCheckReport { per_param })
}

/// Adapts a tape-building closure to the signature [`grad_check`] expects.
///
/// The closure receives the tape and one registered leaf per entry of the
/// parameter map, and returns the scalar loss node.
pub fn tape_objective<B>(build: B) -> impl Fn(&ParamMap) -> Result<(f64, ParamMap)>
where
    B: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    move |theta: &ParamMap| {
        let mut tape = Tape::new();
        let vars = theta
            .iter()
            .map(|(name, m)| Ok((name.clone(), tape.param(name, m.clone())?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        Ok((value, tape.backward(loss)?.into_named()))
    }
}

/// Single-parameter convenience map.
pub fn single(name: &str, m: Matrix) -> ParamMap {
    BTreeMap::from([(name.to_owned(), m)])
}
