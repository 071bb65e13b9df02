//! Reconstruction quality.

use crate::error::{invalid, Result};
use crate::grid::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub mse: f64,
    /// `10·log10(peak²/mse)` in dB; `+inf` when `mse` is 0.
    pub psnr: f64,
    /// Sum of squared errors `‖f̂ − f‖²`.
    pub delta: f64,
}

pub fn compute_metrics(
    estimate: &ImageGrid,
    truth: &ImageGrid,
    peak: f64,
) -> Result<MetricsReport> {
    if estimate.shape() != truth.shape() {
        return Err(invalid(format!(
            "estimate {:?} and truth {:?} differ in shape",
            estimate.shape(),
            truth.shape()
        )));
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(invalid(format!("peak must be positive, got {peak}")));
    }
    let delta = crate::grid::squared_distance(estimate.values(), truth.values());
    let mse = delta / truth.len() as f64;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    };
    Ok(MetricsReport { mse, psnr, delta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_values() {
        let t = ImageGrid::zeros(4, 5);
        let r = compute_metrics(&t, &t, 1.0).unwrap();
        assert_eq!((r.mse, r.delta), (0.0, 0.0));
        assert_eq!(r.psnr, f64::INFINITY);

        let r = compute_metrics(&ImageGrid::filled(4, 5, 1.0), &t, 1.0).unwrap();
        assert_eq!((r.mse, r.delta), (1.0, 20.0));

        let r =
            compute_metrics(&ImageGrid::filled(1, 1, 0.1), &ImageGrid::zeros(1, 1), 1.0).unwrap();
        assert!((r.psnr - 20.0).abs() < 1e-12);
        assert!(compute_metrics(&t, &ImageGrid::zeros(5, 4), 1.0).is_err());
        assert!(compute_metrics(&t, &t, 0.0).is_err());
    }
}
