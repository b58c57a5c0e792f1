//! Central finite-difference verification of tape gradients (always 64-bit).

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Dtype;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a − n| / max(|a|, |n|, 1e−8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new(Dtype::F64);
    let bound = store.bind(&mut tape, false);
    let out = f(&mut tape, &bound)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", "function must return a scalar"));
    }
    Ok(v.item())
}

/// Compares tape gradients of the scalar function `f` against the five-point
/// central difference `(8(f₊₁ − f₋₁) − (f₊₂ − f₋₂)) / 12eps`, where `f₊ₖ`
/// is `f` with one element shifted by `k·eps`, for every element of every
/// parameter. The stencil's O(eps⁴) truncation error lets `eps` be large
/// enough that rounding noise stays far below small gradients.
pub fn grad_check<F>(params: &ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new(Dtype::F64);
    let bound = params.bind(&mut tape, true);
    let loss = f(&mut tape, &bound)?;
    let base = tape.value(loss).item();
    let grads = tape.backward(loss)?.into_tensors();

    let again = eval(params, &f)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (pi, entry) in params.entries().iter().enumerate() {
        let id = work.id(&entry.name).expect("cloned store");
        let mut check = ParamCheck {
            name: entry.name.clone(),
            max_rel_err: 0.0,
            worst: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..entry.value.numel() {
            let orig = entry.value.data()[j];
            let mut at = |delta: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[j] = orig + delta;
                eval(&work, &f)
            };
            let (p1, m1) = (at(eps)?, at(-eps)?);
            let (p2, m2) = (at(2.0 * eps)?, at(-2.0 * eps)?);
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let analytic = grads[pi].data()[j];
            let err = relative_error(analytic, numeric);
            if err > check.max_rel_err {
                check = ParamCheck {
                    max_rel_err: err,
                    worst: j,
                    analytic,
                    numeric,
                    ..check
                };
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.add(
            "theta",
            Tensor::matrix(1, 4, vec![0.3, -1.2, 2.5, 0.01]).unwrap(),
            false,
        );
        let id = store.id("theta").unwrap();
        let report = grad_check(&store, |t, b| t.sum_squares(b[id]), 1e-5).unwrap();
        assert!(report.max_rel_err() < 1e-9, "{report:?}");
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::full(&[1, 1], 1.0), false);
        let calls = Cell::new(0.0);
        let err = grad_check(
            &store,
            |t, b| {
                calls.set(calls.get() + 1.0);
                let s = t.sum(b[id])?;
                t.scale(s, calls.get())
            },
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
