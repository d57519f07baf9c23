use alloc::format;
use alloc::vec::Vec;

use super::{Gradients, ParamId, ParamStore};
use crate::{Error, Result};

/// Outcome of comparing analytic gradients with finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - c| / max(|a|, |c|, 1e-8)` over all scalars.
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Difference quotient used for the numerical gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    #[default]
    Central,
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`, with `O(h^4)`
    /// truncation error; suits larger steps on coordinates whose gradient is
    /// too small for a short central difference to resolve.
    FourPoint,
}

/// Check the gradient returned by `f` against central differences with the
/// given `step`. `f` evaluates the scalar loss at the store's current
/// values and returns it together with its analytic gradient.
pub fn finite_difference_check<F>(f: F, params: &mut ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    let ids: Vec<ParamId> = params.ids().collect();
    finite_difference_check_with(f, params, step, &ids, Stencil::Central)
}

/// [`finite_difference_check`] restricted to the listed parameters.
pub fn finite_difference_check_on<F>(f: F, params: &mut ParamStore, step: f64, ids: &[ParamId]) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    finite_difference_check_with(f, params, step, ids, Stencil::Central)
}

/// Check the listed parameters with a chosen stencil.
pub fn finite_difference_check_with<F>(
    mut f: F,
    params: &mut ParamStore,
    step: f64,
    ids: &[ParamId],
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (loss, grads) = f(params)?;
    let (again, grads_again) = f(params)?;
    if loss.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!("loss {loss} vs {again}")));
    }
    if grads.flatten(params) != grads_again.flatten(params) {
        return Err(Error::NonDeterministic("gradient".into()));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &id in ids {
        let analytic: Vec<f64> = match grads.get(id) {
            Some(g) => g.data().to_vec(),
            None => alloc::vec![0.0; params.value(id).numel()],
        };
        for j in 0..params.value(id).numel() {
            let orig = params.value(id).data()[j];
            let mut at = |d: f64| -> Result<f64> {
                params.value_mut(id).data_mut()[j] = orig + d;
                Ok(f(params)?.0)
            };
            let central = match stencil {
                Stencil::Central => (at(step)? - at(-step)?) / (2.0 * step),
                Stencil::FourPoint => {
                    let (m2, m1, p1, p2) = (at(-2.0 * step)?, at(-step)?, at(step)?, at(2.0 * step)?);
                    (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * step)
                }
            };
            params.value_mut(id).data_mut()[j] = orig;
            let a = analytic[j];
            let denom = a.abs().max(central.abs()).max(1e-8);
            let rel = (a - central).abs() / denom;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((id.index(), j));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};
    use alloc::vec;

    #[test]
    fn linear_function_is_exact() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let c = Tensor::vector(vec![1.5, -0.5, 0.25]);
        let report = finite_difference_check(
            |st| {
                let mut t = Tape::new(st);
                let w = t.param(id);
                let k = t.constant(c.clone());
                let p = t.mul(w, k)?;
                let l = t.sum(p)?;
                let v = t.value(l).data()[0];
                Ok((v, t.backward(l)?))
            },
            &mut s,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn zero_step_is_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        let r = finite_difference_check(|st| Ok((0.0, Gradients::zeros_like(st))), &mut s, 0.0);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn nondeterminism_is_detected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut calls = 0.0;
        let r = finite_difference_check(
            |st| {
                calls += 1.0;
                Ok((calls, Gradients::zeros_like(st)))
            },
            &mut s,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonDeterministic(_))));
    }
}
