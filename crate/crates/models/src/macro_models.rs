//! Pixel-space goal networks: a conditional VAE over long-term goal heatmaps
//! and a deterministic waypoint network.

use goalcast_core::{Exec, Raster};
use goalcast_nn::layers::{Conv2d, Linear};
use goalcast_nn::loss::{FOCAL_ALPHA, FOCAL_GAMMA};
use goalcast_nn::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gaussian::{standard_normal, DiagonalGaussian, GaussVars};
use crate::unet::{UNet, UNetSpec};
use crate::{Error, Result};

/// Width of the long-goal latent.
pub const LONG_GOAL_LATENT: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongGoalSpec {
    pub unet: UNetSpec,
    pub latent_dim: usize,
    /// Convolutions applied to the bottleneck before pooling in the prior net.
    pub prior_channels: Vec<usize>,
    /// Encoder widths of the posterior net over (goal, past, map).
    pub posterior_channels: Vec<usize>,
}

impl LongGoalSpec {
    pub fn full() -> Self {
        Self {
            unet: UNetSpec::long_goal_full(),
            latent_dim: LONG_GOAL_LATENT,
            prior_channels: vec![32, 32],
            posterior_channels: vec![32, 32, 64, 64, 64],
        }
    }

    pub fn desk() -> Self {
        Self {
            unet: UNetSpec::long_goal_desk(),
            latent_dim: LONG_GOAL_LATENT,
            prior_channels: vec![32, 32],
            posterior_channels: vec![16, 16, 32, 32, 32],
        }
    }
}

/// Outputs of one training-mode pass.
#[derive(Debug, Clone, Copy)]
pub struct LongGoalForward {
    pub recon: Var,
    pub posterior: GaussVars,
    pub prior: GaussVars,
    /// Spatially pooled bottleneck, `[n, C]`.
    pub pooled: Var,
}

/// `k` sampled long-goal heatmaps for one scene.
#[derive(Debug, Clone)]
pub struct LongGoalSamples {
    /// `[k, 1, H, W]`.
    pub heatmaps: Tensor,
    pub prior: DiagonalGaussian,
    /// `[1, C]`.
    pub pooled: Tensor,
}

/// Conditional VAE over long-term goal heatmaps. Parameters live under `lg.`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongGoalCvae {
    pub spec: LongGoalSpec,
    pub unet: UNet,
    prior_convs: Vec<Conv2d>,
    prior_head: Linear,
    post_convs: Vec<Conv2d>,
    post_head: Linear,
}

/// Name prefix of the U-Net trained by the autoencoder warm-up.
pub const LONG_GOAL_UNET_PREFIX: &str = "lg.unet.";

impl LongGoalCvae {
    pub fn new(spec: LongGoalSpec) -> Result<Self> {
        if spec.unet.in_channels != 2 || spec.unet.out_channels != 1 {
            return Err(Error::Config("long-goal U-Net must map 2 channels to 1".into()));
        }
        if spec.latent_dim == 0 || spec.prior_channels.is_empty() || spec.posterior_channels.is_empty() {
            return Err(Error::Config("long-goal latent and prior/posterior nets must be non-empty".into()));
        }
        let d = spec.latent_dim;
        let unet = UNet::new("lg.unet", spec.unet.clone(), d)?;
        let mut ci = unet.bottleneck_channels();
        let mut prior_convs = Vec::new();
        for (i, &c) in spec.prior_channels.iter().enumerate() {
            prior_convs.push(Conv2d::new(format!("lg.prior.conv{i}"), ci, c, 3));
            ci = c;
        }
        let prior_head = Linear::new("lg.prior.head", ci, 2 * d);
        let mut ci = 3;
        let mut post_convs = Vec::new();
        for (i, &c) in spec.posterior_channels.iter().enumerate() {
            post_convs.push(Conv2d::new(format!("lg.post.conv{i}"), ci, c, 3));
            ci = c;
        }
        let post_head = Linear::new("lg.post.head", ci, 2 * d);
        Ok(Self { spec, unet, prior_convs, prior_head, post_convs, post_head })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.unet.init(store, rng);
        for c in self.prior_convs.iter().chain(&self.post_convs) {
            c.init(store, rng);
        }
        self.prior_head.init(store, rng);
        self.post_head.init(store, rng);
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    /// Width of the pooled map feature handed to the trajectory model.
    pub fn feature_dim(&self) -> usize {
        self.unet.bottleneck_channels()
    }

    fn ensure_loaded(&self, store: &ParamStore) -> Result<()> {
        if store.contains("lg.prior.head.w") && store.contains("lg.unet.head.w") {
            Ok(())
        } else {
            Err(Error::State("long-goal model parameters are not loaded".into()))
        }
    }

    fn prior(&self, g: &mut Graph, store: &ParamStore, bottleneck: Var) -> Result<GaussVars> {
        let mut h = bottleneck;
        for c in &self.prior_convs {
            h = c.forward(g, store, h)?;
            h = g.relu(h);
        }
        let p = g.global_avg_pool(h);
        let head = self.prior_head.forward(g, store, p)?;
        Ok(GaussVars::from_head(g, head, self.spec.latent_dim))
    }

    fn posterior(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<GaussVars> {
        let mut h = x;
        for (i, c) in self.post_convs.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            h = c.forward(g, store, h)?;
            h = g.relu(h);
        }
        let p = g.global_avg_pool(h);
        let head = self.post_head.forward(g, store, p)?;
        Ok(GaussVars::from_head(g, head, self.spec.latent_dim))
    }

    /// `cond` is (map, past) `[n, 2, H, W]`; `post_input` is (goal, past, map)
    /// `[n, 3, H, W]`; `eps` is `[n, latent]` standard-normal noise.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cond: Var,
        post_input: Var,
        eps: Tensor,
    ) -> Result<LongGoalForward> {
        if g.shape(post_input).get(1) != Some(&3) {
            return Err(Error::Config("posterior input must have 3 channels".into()));
        }
        let skips = self.unet.encode(g, store, cond)?;
        let pooled = self.unet.pooled(g, &skips);
        let prior = self.prior(g, store, *skips.last().unwrap())?;
        let posterior = self.posterior(g, store, post_input)?;
        let w = posterior.rsample(g, eps);
        let recon = self.unet.decode(g, store, &skips, Some(w))?;
        Ok(LongGoalForward { recon, posterior, prior, pooled })
    }

    /// Plain encoder–decoder pass with a zero latent, used for warm-up.
    pub fn forward_autoencoder(&self, g: &mut Graph, store: &ParamStore, cond: Var) -> Result<Var> {
        let skips = self.unet.encode(g, store, cond)?;
        let n = g.shape(cond)[0];
        let w = g.constant(Tensor::zeros(&[n, self.spec.latent_dim]));
        self.unet.decode(g, store, &skips, Some(w))
    }

    /// Draws `k` latents from the prior (std multiplied by `std_scale`) and
    /// decodes each to a heatmap. `cond` is `[1, 2, H, W]`.
    pub fn sample<R: Rng>(
        &self,
        store: &ParamStore,
        cond: &Tensor,
        k: usize,
        std_scale: f64,
        rng: &mut R,
        exec: Exec,
    ) -> Result<LongGoalSamples> {
        self.ensure_loaded(store)?;
        if cond.shape().first() != Some(&1) || k == 0 {
            return Err(Error::Config("sampling needs a single condition and k ≥ 1".into()));
        }
        let d = self.spec.latent_dim;
        let mut g = Graph::new(exec);
        let x = g.constant(cond.clone());
        let skips = self.unet.encode(&mut g, store, x)?;
        let pooled = self.unet.pooled(&mut g, &skips);
        let prior = self.prior(&mut g, store, *skips.last().unwrap())?.value(&g);
        let eps = standard_normal(rng, &[k, d]);
        let w: Vec<f64> = (0..k * d)
            .map(|j| prior.mean.data()[j % d] + std_scale * prior.std.data()[j % d] * eps.data()[j])
            .collect();
        let w = g.constant(Tensor::from_vec(&[k, d], w));
        let tiled = self.unet.tile(&mut g, &skips, k);
        let out = self.unet.decode(&mut g, store, &tiled, Some(w))?;
        Ok(LongGoalSamples {
            heatmaps: g.value(out).clone(),
            prior,
            pooled: g.value(pooled).clone(),
        })
    }

    /// Pooled bottleneck features for a batch of conditions, `[n, C]`.
    pub fn map_features(&self, store: &ParamStore, cond: &Tensor, exec: Exec) -> Result<Tensor> {
        self.ensure_loaded(store)?;
        let mut g = Graph::new(exec);
        let x = g.constant(cond.clone());
        let skips = self.unet.encode(&mut g, store, x)?;
        let p = self.unet.pooled(&mut g, &skips);
        Ok(g.value(p).clone())
    }
}

/// Scalar parts of the long-goal objective.
#[derive(Debug, Clone, Copy)]
pub struct LongGoalLoss {
    pub total: Var,
    /// Focal reconstruction, summed over pixels, mean over the batch.
    pub focal: f64,
    /// Σ_d batch-mean KL_d before the floor.
    pub kl: f64,
    /// Σ_d max(floor, batch-mean KL_d).
    pub kl_clamped: f64,
}

/// Focal reconstruction plus `anneal · Σ_d max(floor_per_dim, KL_d)`.
pub fn long_goal_loss(
    g: &mut Graph,
    fwd: &LongGoalForward,
    target: &Tensor,
    floor_per_dim: f64,
    anneal: f64,
) -> LongGoalLoss {
    assert!((0.0..=1.0).contains(&anneal) && floor_per_dim >= 0.0);
    let n = g.shape(fwd.recon)[0] as f64;
    let f = g.focal_loss(fwd.recon, target, FOCAL_ALPHA, FOCAL_GAMMA);
    let f = g.scale(f, 1.0 / n);
    let kl = fwd.posterior.kl_per_dim(g, &fwd.prior);
    let kc = g.max_floor(kl, floor_per_dim);
    let ks = g.sum(kc);
    let weighted = g.scale(ks, anneal);
    let total = g.add(f, weighted);
    LongGoalLoss {
        total,
        focal: g.value(f).item(),
        kl: g.value(kl).data().iter().sum(),
        kl_clamped: g.value(ks).item(),
    }
}

/// Deterministic waypoint network; parameters live under `sg.`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointNet {
    pub n_short_goals: usize,
    pub unet: UNet,
}

impl WaypointNet {
    pub fn new(spec: UNetSpec) -> Result<Self> {
        if spec.in_channels != 3 || spec.out_channels < 1 {
            return Err(Error::Config("waypoint U-Net must take 3 channels".into()));
        }
        let n_short_goals = spec.out_channels - 1;
        Ok(Self { n_short_goals, unet: UNet::new("sg.unet", spec, 0)? })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.unet.init(store, rng);
    }

    /// `x` is (map, past, long goal) `[n, 3, H, W]`; output channel `k <
    /// n_short_goals` is waypoint `k`, the last channel the refined long goal.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let skips = self.unet.encode(g, store, x)?;
        self.unet.decode(g, store, &skips, None)
    }

    pub fn predict(&self, store: &ParamStore, x: &Tensor, exec: Exec) -> Result<Tensor> {
        if !store.contains("sg.unet.head.w") {
            return Err(Error::State("waypoint model parameters are not loaded".into()));
        }
        let mut g = Graph::new(exec);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Focal loss summed over channels and pixels, mean over the batch.
pub fn waypoint_loss(g: &mut Graph, out: Var, target: &Tensor) -> Var {
    let n = g.shape(out)[0] as f64;
    let f = g.focal_loss(out, target, FOCAL_ALPHA, FOCAL_GAMMA);
    g.scale(f, 1.0 / n)
}

/// Focal loss between two rasters with the default α, γ.
pub fn focal_loss(pred: &Raster, target: &Raster) -> Result<f64> {
    if pred.height != target.height || pred.width != target.width {
        return Err(Error::Config("focal loss rasters differ in size".into()));
    }
    Ok(goalcast_nn::loss::focal_loss(&pred.data, &target.data, FOCAL_ALPHA, FOCAL_GAMMA))
}

/// Splits a `[n, c, H, W]` tensor into per-channel rasters of sample `i`.
pub fn channel_rasters(t: &Tensor, i: usize) -> Vec<Raster> {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    (0..c)
        .map(|ch| {
            let off = (i * c + ch) * h * w;
            Raster { height: h, width: w, data: t.data()[off..off + h * w].to_vec() }
        })
        .collect()
}
