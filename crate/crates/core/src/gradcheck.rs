//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::tensor::{Parameter, Tensor};
use crate::rng::rng_from;
use rand::Rng;

const DENOM_FLOOR: f64 = 1e-8;

/// Relative discrepancy used by every check.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + DENOM_FLOOR)
}

/// Compares the reverse-mode gradient of the scalar function `f` at `x`
/// against central differences with step `h`, returning the maximum
/// relative error over coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    finite_diff_check_steps(f, x, &[h])
}

/// Like [`finite_diff_check`], but each coordinate keeps its best step.
/// Rounding dominates small steps and kinks (ReLU inputs near zero) spoil
/// large ones; a wrong gradient disagrees at every step.
pub fn finite_diff_check_steps<F>(f: F, x: &Tensor, steps: &[f64]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let values = x.to_vec();
    let shape = x.shape().to_vec();
    let leaf = Tensor::leaf(values.clone(), &shape)?;
    f(&leaf)?.backward()?;
    let analytic = leaf.grad().unwrap_or_default();
    let mut worst: f64 = 0.0;
    for i in 0..values.len() {
        let mut best = f64::INFINITY;
        for &h in steps {
            let mut plus = values.clone();
            plus[i] += h;
            let mut minus = values.clone();
            minus[i] -= h;
            let fp = f(&Tensor::new(plus, &shape)?)?.item()?;
            let fm = f(&Tensor::new(minus, &shape)?)?.item()?;
            best = best.min(relative_error(analytic[i], (fp - fm) / (2.0 * h)));
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

/// Outcome of a parameter-level check.
#[derive(Clone, Debug)]
pub struct ParamCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub coordinates_checked: usize,
}

/// Checks `d loss / d param` for up to `per_param` randomly chosen
/// coordinates of every parameter. `loss` must be deterministic.
pub fn check_parameters<F>(
    loss: F,
    params: &[Parameter],
    per_param: usize,
    h: f64,
    seed: u64,
) -> Result<ParamCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    check_parameters_steps(loss, params, per_param, &[h], seed)
}

/// [`check_parameters`] keeping the best of `steps` per coordinate, as in
/// [`finite_diff_check_steps`].
pub fn check_parameters_steps<F>(
    loss: F,
    params: &[Parameter],
    per_param: usize,
    steps: &[f64],
    seed: u64,
) -> Result<ParamCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    params.iter().for_each(|p| p.tensor.zero_grad());
    loss()?.backward()?;
    let mut rng = rng_from(&[seed, 0x9c]);
    let mut report = ParamCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        coordinates_checked: 0,
    };
    for p in params {
        let analytic = p.tensor.grad().unwrap_or_default();
        let n = p.tensor.numel();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let orig = p.tensor.data()[i];
            let mut err = f64::INFINITY;
            for &h in steps {
                p.tensor.update_data(|d| d[i] = orig + h);
                let fp = loss()?.item()?;
                p.tensor.update_data(|d| d[i] = orig - h);
                let fm = loss()?.item()?;
                p.tensor.update_data(|d| d[i] = orig);
                err = err.min(relative_error(analytic[i], (fp - fm) / (2.0 * h)));
            }
            report.coordinates_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_parameter = format!("{}[{i}]", p.name);
            }
        }
    }
    params.iter().for_each(|p| p.tensor.zero_grad());
    Ok(report)
}
