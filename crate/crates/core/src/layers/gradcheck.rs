//! Central finite-difference gradient checks.

use super::LayerContract;
use crate::error::{Error, Result};
use crate::tensor::{random_normal, Rng, Tensor};

/// Seed of the fixed random projection used to reduce a layer output to a
/// scalar.
const PROJECTION_SEED: u64 = 0x5_EED0_F9AD;

/// Denominator floor of [`relative_error`]. Central differences carry
/// rounding noise of roughly `1e-16 * |f| / h`, which for gradients near
/// zero would otherwise dominate the ratio.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(RELATIVE_ERROR_FLOOR, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (argument index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares `analytic[i]` (the claimed gradient of `f` w.r.t. `args[i]`)
/// against central differences on every coordinate of every argument.
pub fn grad_check_fn<F>(f: F, args: &[Tensor], analytic: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if args.len() != analytic.len() {
        return Err(Error::arg(format!("{} arguments but {} gradients", args.len(), analytic.len())));
    }
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), coordinates: 0 };
    let mut probe = args.to_vec();
    for (ai, grad) in analytic.iter().enumerate() {
        if grad.shape() != args[ai].shape() {
            return Err(Error::dim(format!(
                "gradient {ai} has shape {:?}, argument has {:?}",
                grad.shape(),
                args[ai].shape()
            )));
        }
        for j in 0..args[ai].len() {
            let x0 = args[ai].data()[j];
            probe[ai].data_mut()[j] = x0 + h;
            let plus = f(&probe)?;
            probe[ai].data_mut()[j] = x0 - h;
            let minus = f(&probe)?;
            probe[ai].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad.data()[j], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ai, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Checks a layer's backward pass on `input` and every tensor in `params`,
/// projecting the output onto a fixed random direction.
pub fn grad_check<L: LayerContract>(layer: &L, input: &Tensor, params: &[Tensor], h: f64) -> Result<f64> {
    Ok(grad_check_report(layer, input, params, h)?.max_rel_error)
}

pub fn grad_check_report<L: LayerContract>(
    layer: &L,
    input: &Tensor,
    params: &[Tensor],
    h: f64,
) -> Result<GradCheckReport> {
    let (out, cache) = layer.forward(input, params)?;
    let projection = random_normal(out.shape(), 0.0, 1.0, &mut Rng::new(PROJECTION_SEED))?;
    let (d_input, d_params) = layer.backward(&cache, &projection)?;

    let mut args = Vec::with_capacity(1 + params.len());
    args.push(input.clone());
    args.extend(params.iter().cloned());
    let mut analytic = Vec::with_capacity(args.len());
    analytic.push(d_input);
    analytic.extend(d_params);

    let scalar = |a: &[Tensor]| -> Result<f64> {
        let (y, _) = layer.forward(&a[0], &a[1..])?;
        y.dot(&projection)
    };
    grad_check_fn(scalar, &args, &analytic, h)
}
