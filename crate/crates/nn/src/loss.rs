//! Scalar reference forms of the loss kernels used by the graph ops.

pub use crate::graph::{focal_elem, gauss_kl, gauss_nll_elem, FOCAL_EPS};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Focal loss summed over paired prediction / target values.
pub fn focal_loss(pred: &[f64], target: &[f64], alpha: f64, gamma: f64) -> f64 {
    assert_eq!(pred.len(), target.len());
    pred.iter().zip(target).map(|(&q, &t)| focal_elem(q, t, alpha, gamma)).sum()
}

/// Sum of per-dimension KL divergences between diagonal Gaussians.
pub fn diag_gauss_kl(mq: &[f64], sq: &[f64], mp: &[f64], sp: &[f64]) -> f64 {
    (0..mq.len()).map(|i| gauss_kl(mq[i], sq[i], mp[i], sp[i])).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_single_pixel_values() {
        assert!((focal_loss(&[0.5], &[1.0], FOCAL_ALPHA, FOCAL_GAMMA) - 0.043_321_698_784_996_58).abs() < 1e-12);
        assert!((focal_loss(&[0.5], &[0.0], FOCAL_ALPHA, FOCAL_GAMMA) - 0.12996509635498974).abs() < 1e-12);
    }

    #[test]
    fn focal_perfect_prediction_is_near_zero() {
        assert!(focal_loss(&[1.0, 0.0], &[1.0, 0.0], FOCAL_ALPHA, FOCAL_GAMMA) < 1e-5);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(diag_gauss_kl(&[0.3, -1.0], &[0.7, 2.0], &[0.3, -1.0], &[0.7, 2.0]), 0.0);
        assert!((gauss_kl(2.0, 1.0, 0.0, 1.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn unit_gaussian_nll_at_mean() {
        let per_step = gauss_nll_elem(0.0, 1.0, 0.0) * 2.0;
        assert!((per_step - 1.8378770664093453).abs() < 1e-12);
    }
}
