//! Central finite-difference gradient checking.
//!
//! The checker never inspects the tape: it re-evaluates the supplied
//! closure at perturbed inputs, so it stays independent of the backward
//! implementation it verifies. Shared by unit tests and the acceptance
//! suite.

use crate::diffcore::DiffArray;
use crate::error::Result;

/// Perturbation step for central differences.
pub const FD_EPS: f64 = 1e-6;

/// Worst relative error over the checked entries.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative disagreement between an analytic and a finite-difference value,
/// with an absolute floor so near-zero gradients compare sanely.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs()).max(1e-8);
    (analytic - fd).abs() / denom
}

/// Check the gradient of a scalar function of several arrays.
///
/// `f` receives the input arrays and must return the scalar value;
/// `analytic` holds the gradient arrays produced by one backward pass at
/// the unperturbed inputs. `entries` selects which flat indices of each
/// input to probe (`None` probes all).
pub fn check_gradients(
    inputs: &[DiffArray],
    analytic: &[Vec<f64>],
    entries: Option<&[Vec<usize>]>,
    mut f: impl FnMut(&[DiffArray]) -> Result<f64>,
) -> Result<FdReport> {
    assert_eq!(inputs.len(), analytic.len());
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (which, input) in inputs.iter().enumerate() {
        let all: Vec<usize>;
        let probe: &[usize] = match entries {
            Some(e) => &e[which],
            None => {
                all = (0..input.len()).collect();
                &all
            }
        };
        for &idx in probe {
            let mut plus = inputs.to_vec();
            plus[which].values_mut()[idx] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[which].values_mut()[idx] -= FD_EPS;
            let fd = (f(&plus)? - f(&minus)?) / (2.0 * FD_EPS);
            max_rel_err = max_rel_err.max(rel_err(analytic[which][idx], fd));
            checked += 1;
        }
    }
    Ok(FdReport { max_rel_err, checked })
}
