//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::nn::network::{Network, Targets};
use crate::nn::tensor::Tensor;
use crate::scalar::{lit, Scalar};

/// Guards the normalization of arrays whose gradient is identically zero.
pub const GRAD_CHECK_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked arrays of `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`.
    pub max_relative_error: f64,
    /// Array index of the worst array; `None` when it is the input.
    pub worst_array: Option<usize>,
    /// Largest per-entry `|a − n| / max(|a|, |n|)`; sensitive to truncation
    /// error on near-zero entries, reported for diagnosis.
    pub max_entry_error: f64,
    pub checked: usize,
}

/// Relative error of an analytic gradient array against a numeric one.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(GRAD_CHECK_FLOOR)
}

fn entry_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares backpropagated gradients with central differences of step `eps`
/// for every parameter (or every `stride`-th one) and, if `check_input`,
/// every input value.
pub fn grad_check<T: Scalar>(
    net: &Network<T>,
    batch: &Tensor<T>,
    targets: &Targets<T>,
    eps: f64,
    stride: usize,
    check_input: bool,
) -> Result<GradCheckReport> {
    let pass = net.forward_cached(batch)?;
    let (grads, input_grad) = net.backward_with_input(pass, targets)?;
    let eps_t: T = lit(eps);
    let two_eps = 2.0 * eps;
    let stride = stride.max(1);
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_array: None,
        max_entry_error: 0.0,
        checked: 0,
    };
    let record = |report: &mut GradCheckReport, array: Option<usize>, analytic: &[f64], numeric: &[f64]| {
        let e = relative_error(analytic, numeric);
        if e > report.max_relative_error {
            report.max_relative_error = e;
            report.worst_array = array;
        }
        for (a, n) in analytic.iter().zip(numeric) {
            report.max_entry_error = report.max_entry_error.max(entry_error(*a, *n));
        }
        report.checked += analytic.len();
    };
    for a in 0..grads.arrays().len() {
        let len = grads.arrays()[a].len();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in (0..len).step_by(stride) {
            let orig = probe.params()[a][i];
            probe.params_mut()[a][i] = orig + eps_t;
            let up = probe.loss(&probe.forward(batch)?, targets)?.to_f64_lossy();
            probe.params_mut()[a][i] = orig - eps_t;
            let down = probe.loss(&probe.forward(batch)?, targets)?.to_f64_lossy();
            probe.params_mut()[a][i] = orig;
            numeric.push((up - down) / two_eps);
            analytic.push(grads.arrays()[a][i].to_f64_lossy());
        }
        record(&mut report, Some(a), &analytic, &numeric);
    }
    if check_input {
        let mut x = batch.clone();
        let mut numeric = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + eps_t;
            let up = net.loss(&net.forward(&x)?, targets)?.to_f64_lossy();
            x.data_mut()[i] = orig - eps_t;
            let down = net.loss(&net.forward(&x)?, targets)?.to_f64_lossy();
            x.data_mut()[i] = orig;
            numeric.push((up - down) / two_eps);
        }
        let analytic: Vec<f64> = input_grad.data().iter().map(|v| v.to_f64_lossy()).collect();
        record(&mut report, None, &analytic, &numeric);
    }
    Ok(report)
}
