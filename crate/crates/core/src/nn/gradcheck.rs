//! Central finite-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that gradients that are
/// zero analytically are compared on an absolute scale.
pub const DEFAULT_ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` gradients of `loss` at `params` against central
/// differences `(f(p+ε) − f(p−ε)) / 2ε`, element by element.
pub fn grad_check<L>(
    params: &ParamStore,
    analytic: &[Tensor],
    eps: f64,
    tolerance: f64,
    mut loss: L,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamStore) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradient tensors for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("grad_check base loss {base}"),
        });
    }
    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    for id in params.ids() {
        let a = &analytic[id.index()];
        if a.shape() != params.get(id).shape() {
            return Err(Error::InvalidArgument(format!(
                "gradient for {} has shape {:?}",
                params.name(id),
                a.shape()
            )));
        }
        let mut check = TensorCheck {
            name: params.name(id).to_string(),
            elements: a.data().len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for e in 0..a.data().len() {
            let orig = work.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + eps;
            let up = loss(&work)?;
            work.get_mut(id).data_mut()[e] = orig - eps;
            let down = loss(&work)?;
            work.get_mut(id).data_mut()[e] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite {
                    step: 0,
                    detail: format!("grad_check perturbing {}[{e}]", params.name(id)),
                });
            }
            let numeric = (up - down) / (2.0 * eps);
            let an = a.data()[e];
            check.max_abs_err = check.max_abs_err.max((an - numeric).abs());
            check.max_rel_err = check
                .max_rel_err
                .max(relative_error(an, numeric, DEFAULT_ABS_FLOOR));
        }
        tensors.push(check);
    }
    let (max_rel_err, worst_param) = tensors
        .iter()
        .map(|t| (t.max_rel_err, t.name.clone()))
        .fold((0.0, String::new()), |acc, x| if x.0 > acc.0 { x } else { acc });
    Ok(GradCheckReport {
        eps,
        tolerance,
        max_rel_err,
        worst_param,
        passed: max_rel_err <= tolerance,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(p: &ParamStore) -> Result<f64> {
        Ok(p.tensors().iter().map(Tensor::squared_norm).sum())
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_vec(2, 2, vec![0.3, -1.2, 2.5, 0.01]).unwrap());
        s.add("b", Tensor::row_vector(vec![4.0, -0.7]));
        s
    }

    #[test]
    fn quadratic_matches_to_1e8() {
        let s = store();
        let grads: Vec<Tensor> = s
            .tensors()
            .iter()
            .map(|t| {
                Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|v| 2.0 * v).collect())
                    .unwrap()
            })
            .collect();
        let report = grad_check(&s, &grads, 1e-5, 1e-8, quadratic).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.tensors.len(), 2);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let s = store();
        let mut grads: Vec<Tensor> = s
            .tensors()
            .iter()
            .map(|t| {
                Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|v| 2.0 * v).collect())
                    .unwrap()
            })
            .collect();
        grads[1].data_mut()[0] += 0.5;
        let report = grad_check(&s, &grads, 1e-5, 1e-4, quadratic).unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_param, "b");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let s = store();
        let grads: Vec<Tensor> = s.tensors().to_vec();
        let r = grad_check(&s, &grads, 1e-5, 1e-4, |_| Ok(f64::NAN));
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
