//! Central finite differences for verifying analytic gradients.
//!
//! Checks run in `f64` so truncation and round-off stay far below the
//! tolerances being tested.

use crate::error::Result;
use crate::tensor::Tensor;

/// Central-difference gradient of `f` with respect to every entry of every
/// parameter tensor.
pub fn finite_difference<F>(f: &F, params: &[Tensor<f64>], step: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let mut grad = Tensor::zeros(params[k].shape().to_vec());
        for i in 0..params[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[k].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Central differences for a subset of coordinates `(tensor, index)` only.
pub fn finite_difference_at<F>(
    f: &F,
    params: &[Tensor<f64>],
    coords: &[(usize, usize)],
    step: f64,
) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work = params.to_vec();
    coords
        .iter()
        .map(|&(k, i)| {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[k].data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * step))
        })
        .collect()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, with an absolute floor
/// so two vanishing gradients compare as equal.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    relative_error_slices(a.data(), b.data())
}

pub fn relative_error_slices(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}
