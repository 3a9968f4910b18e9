//! Diagonal Gaussian latents: plain values and their graph counterparts.

use goalcast_nn::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Added to softplus outputs so standard deviations stay strictly positive.
pub const MIN_STD: f64 = 1e-4;

/// Row-wise diagonal Gaussians, `mean` and `std` shaped `[n, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Tensor,
    pub std: Tensor,
}

impl DiagonalGaussian {
    pub fn new(mean: Tensor, std: Tensor) -> Result<Self> {
        if mean.shape() != std.shape() || mean.shape().len() != 2 {
            return Err(Error::Config(format!(
                "gaussian mean {:?} and std {:?} must share a 2-D shape",
                mean.shape(),
                std.shape()
            )));
        }
        if !std.data().iter().all(|&s| s > 0.0) {
            return Err(Error::Config("gaussian std must be > 0".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.mean.shape()[0]
    }

    /// Per-row KL(self ‖ other), summed over dimensions.
    pub fn kl(&self, other: &DiagonalGaussian) -> Vec<f64> {
        let d = self.dim();
        (0..self.rows())
            .map(|r| {
                let s = r * d..(r + 1) * d;
                goalcast_nn::loss::diag_gauss_kl(
                    &self.mean.data()[s.clone()],
                    &self.std.data()[s.clone()],
                    &other.mean.data()[s.clone()],
                    &other.std.data()[s],
                )
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.mean.all_finite() && self.std.all_finite()
    }
}

/// Standard-normal noise of the given shape.
pub fn standard_normal<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

/// A diagonal Gaussian living in a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct GaussVars {
    pub mean: Var,
    pub std: Var,
}

impl GaussVars {
    /// Splits a `[n, 2d]` head into mean and `softplus(·) + MIN_STD` std.
    pub fn from_head(g: &mut Graph, head: Var, d: usize) -> Self {
        assert_eq!(g.shape(head)[1], 2 * d, "gaussian head width");
        let mean = g.slice(head, 0, d);
        let raw = g.slice(head, d, 2 * d);
        let sp = g.softplus(raw);
        let std = g.add_scalar(sp, MIN_STD);
        Self { mean, std }
    }

    pub fn value(&self, g: &Graph) -> DiagonalGaussian {
        DiagonalGaussian {
            mean: g.value(self.mean).clone(),
            std: g.value(self.std).clone(),
        }
    }

    /// Reparameterised sample `mean + std ⊙ eps`.
    pub fn rsample(&self, g: &mut Graph, eps: Tensor) -> Var {
        let e = g.constant(eps);
        let s = g.mul(self.std, e);
        g.add(self.mean, s)
    }

    /// Batch-mean KL(self ‖ prior) per dimension, shape `[1, d]`.
    pub fn kl_per_dim(&self, g: &mut Graph, prior: &GaussVars) -> Var {
        let k = g.kl_diag(self.mean, self.std, prior.mean, prior.std);
        g.mean_rows(k)
    }
}
