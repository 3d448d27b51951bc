//! Central finite-difference verification of reverse-mode gradients.

use crate::error::TensorError;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Parameter name and flat coordinate of the worst error.
    pub worst: Option<(String, usize)>,
}

/// Compare analytic gradients against central finite differences.
///
/// `analytic` pairs parameter names with the gradients produced by
/// `Tape::backward`; `f` re-evaluates the scalar objective from a parameter
/// set. Every coordinate of every listed parameter is perturbed by +/- eps
/// and the relative error |g_ad - g_fd| / max(1, |g_ad|, |g_fd|) is taken;
/// the maximum over all coordinates is returned.
pub fn finite_difference_check<F>(
    params: &ParamSet,
    analytic: &[(String, Tensor)],
    mut f: F,
    eps: f64,
) -> Result<FdReport, TensorError>
where
    F: FnMut(&ParamSet) -> Result<f64, TensorError>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(TensorError::BadEps(eps));
    }
    let mut work = params.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut coords = 0usize;

    for (name, grad) in analytic {
        let len = work.get(name)?.len();
        if grad.len() != len {
            return Err(TensorError::ShapeMismatch {
                op: "finite_difference_check",
                expected: format!("{len} grad coords for `{name}`"),
                got: format!("{}", grad.len()),
            });
        }
        for i in 0..len {
            let orig = work.get(name)?.data()[i];

            work.get_mut(name)?.data_mut()[i] = orig + eps;
            let f_plus = f(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - eps;
            let f_minus = f(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "finite_difference_check",
                });
            }
            let g_fd = (f_plus - f_minus) / (2.0 * eps);
            let g_ad = grad.data()[i];
            let rel = (g_ad - g_fd).abs() / 1.0f64.max(g_ad.abs()).max(g_fd.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((name.clone(), i));
            }
            coords += 1;
        }
    }
    Ok(FdReport {
        max_rel_err,
        coords_checked: coords,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    // Quadratic objective: central differences are exact up to rounding.
    #[test]
    fn quadratic_error_below_1e9() {
        let mut params = ParamSet::new();
        params
            .add("x", Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap())
            .unwrap();

        let eval = |p: &ParamSet| -> Result<(f64, Vec<(String, Tensor)>), TensorError> {
            let mut tape = Tape::new();
            let x = tape.leaf(p.get("x")?.clone());
            let sq = tape.matmul_transb(x, x)?;
            let loss = tape.scale(sq, 0.5);
            let v = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            Ok((v, vec![("x".to_string(), grads.get(x).unwrap().clone())]))
        };

        let (_, analytic) = eval(&params).unwrap();
        let report =
            finite_difference_check(&params, &analytic, |p| eval(p).map(|(v, _)| v), 1e-5)
                .unwrap();
        assert!(report.max_rel_err < 1e-9, "err = {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn eps_outside_range_rejected() {
        let params = ParamSet::new();
        let r = finite_difference_check(&params, &[], |_| Ok(0.0), 1e-2);
        assert!(matches!(r, Err(TensorError::BadEps(_))));
    }
}
