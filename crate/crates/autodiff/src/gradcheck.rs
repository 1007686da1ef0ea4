use rand::Rng as _;

use crate::error::Result;
use crate::params::ParameterSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared absolutely: the relative
/// error is `|a − n| / max(|a|, |n|, GRAD_FLOOR)`. Central differences of an
/// O(1) loss carry roughly 1e-11 of roundoff, so the floor keeps exactly
/// zero gradients from reporting noise as error.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// (tensor, element, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares analytic gradients with central differences on `samples`
/// randomly chosen scalar parameters (all of them if there are fewer).
///
/// `loss_and_grads` must be deterministic: any randomness inside it has to
/// be re-seeded identically on every call.
pub fn grad_check<F>(params: &ParameterSet, mut loss_and_grads: F, samples: usize, rng: &mut Rng) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterSet) -> Result<(f64, Vec<Tensor>)>,
{
    let (_, grads) = loss_and_grads(params)?;
    params.check_shapes(&grads, "grad_check")?;
    let total = params.numel();
    let picks: Vec<usize> = if total <= samples {
        (0..total).collect()
    } else {
        (0..samples).map(|_| rng.random_range(0..total)).collect()
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
    };
    for k in picks {
        let (ti, ei) = params.locate(k).expect("index within numel");
        let orig = params.get(ti).data()[ei];
        work.get_mut(ti).data_mut()[ei] = orig + FD_STEP;
        let (plus, _) = loss_and_grads(&work)?;
        work.get_mut(ti).data_mut()[ei] = orig - FD_STEP;
        let (minus, _) = loss_and_grads(&work)?;
        work.get_mut(ti).data_mut()[ei] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let analytic = grads[ti].data()[ei];
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((ti, ei, analytic, numeric));
        }
    }
    Ok(report)
}
