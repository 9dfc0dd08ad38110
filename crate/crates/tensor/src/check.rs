//! Central finite differences for verifying analytic gradients.

use crate::{Scalar, Tensor};

/// Central-difference derivative of `f` at `x` along each flat index in `coords`.
pub fn numeric_grad<T: Scalar>(
    x: &Tensor<T>,
    coords: &[usize],
    step: f64,
    mut f: impl FnMut(&Tensor<T>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + T::lit(step);
            let fp = f(&probe);
            probe.data_mut()[i] = orig - T::lit(step);
            let fm = f(&probe);
            probe.data_mut()[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
