//! Encoder–decoder with skip connections over heatmap stacks.
//!
//! Encoder block `i` average-pools by 2 (except the first) and applies a
//! 3×3 convolution with ReLU. Decoder block 0 runs at the bottleneck on the
//! bottleneck features, optionally concatenated with a spatially broadcast
//! latent vector; every later block upsamples, concatenates the matching
//! encoder output and convolves. A 1×1 convolution and a sigmoid produce the
//! output heatmaps.

use goalcast_nn::layers::Conv2d;
use goalcast_nn::{Graph, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UNetSpec {
    /// Long-goal network at full width.
    pub fn long_goal_full() -> Self {
        Self {
            encoder_channels: vec![32, 32, 64, 64, 64],
            decoder_channels: vec![64, 64, 64, 32, 32],
            in_channels: 2,
            out_channels: 1,
        }
    }

    /// Waypoint network at full width: one extra 128-channel level.
    pub fn waypoint_full(n_short_goals: usize) -> Self {
        Self {
            encoder_channels: vec![32, 32, 64, 64, 64, 128],
            decoder_channels: vec![128, 64, 64, 64, 32, 32],
            in_channels: 3,
            out_channels: n_short_goals + 1,
        }
    }

    /// Reduced widths for quick runs.
    pub fn long_goal_desk() -> Self {
        Self {
            encoder_channels: vec![16, 16, 32, 32, 32],
            decoder_channels: vec![32, 32, 32, 16, 16],
            in_channels: 2,
            out_channels: 1,
        }
    }

    pub fn waypoint_desk(n_short_goals: usize) -> Self {
        Self {
            encoder_channels: vec![16, 16, 32, 32, 32, 64],
            decoder_channels: vec![64, 32, 32, 32, 16, 16],
            in_channels: 3,
            out_channels: n_short_goals + 1,
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.encoder_channels.is_empty()
            && self.encoder_channels.len() == self.decoder_channels.len()
            && self.in_channels > 0
            && self.out_channels > 0
            && self.encoder_channels.iter().chain(&self.decoder_channels).all(|&c| c > 0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid U-Net spec {self:?}")))
        }
    }

    /// Raster sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub spec: UNetSpec,
    /// Width of the latent vector injected at the bottleneck (0 for none).
    pub latent: usize,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    head: Conv2d,
}

impl UNet {
    pub fn new(name: &str, spec: UNetSpec, latent: usize) -> Result<Self> {
        spec.validate()?;
        let l = spec.levels();
        let e = &spec.encoder_channels;
        let d = &spec.decoder_channels;
        let enc = (0..l)
            .map(|i| {
                let ci = if i == 0 { spec.in_channels } else { e[i - 1] };
                Conv2d::new(format!("{name}.enc{i}"), ci, e[i], 3)
            })
            .collect();
        let dec = (0..l)
            .map(|i| {
                let ci = if i == 0 { e[l - 1] + latent } else { d[i - 1] + e[l - 1 - i] };
                Conv2d::new(format!("{name}.dec{i}"), ci, d[i], 3)
            })
            .collect();
        let head = Conv2d::new(format!("{name}.head"), d[l - 1], spec.out_channels, 1);
        Ok(Self { spec, latent, enc, dec, head })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for c in self.enc.iter().chain(&self.dec) {
            c.init(store, rng);
        }
        self.head.init(store, rng);
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.spec.encoder_channels.last().unwrap()
    }

    /// Encoder outputs from full resolution down to the bottleneck.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(Error::Config(format!(
                "U-Net expects {} input channels, got shape {s:?}",
                self.spec.in_channels
            )));
        }
        let m = self.spec.size_multiple();
        if !s[2].is_multiple_of(m) || !s[3].is_multiple_of(m) {
            return Err(Error::Config(format!("raster {}x{} not divisible by {m}", s[2], s[3])));
        }
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for (i, conv) in self.enc.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            h = conv.forward(g, store, h)?;
            h = g.relu(h);
            skips.push(h);
        }
        Ok(skips)
    }

    /// Spatial mean of the bottleneck, `[n, C]`.
    pub fn pooled(&self, g: &mut Graph, skips: &[Var]) -> Var {
        g.global_avg_pool(*skips.last().unwrap())
    }

    /// Decodes to sigmoid heatmaps; `latent` is `[n, self.latent]`.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, skips: &[Var], latent: Option<Var>) -> Result<Var> {
        let l = self.enc.len();
        let bott = skips[l - 1];
        let mut h = match (latent, self.latent) {
            (None, 0) => bott,
            (Some(w), d) if d > 0 && g.shape(w)[1] == d => {
                let s = g.shape(bott).to_vec();
                let wb = g.broadcast_spatial(w, s[2], s[3]);
                g.concat(&[bott, wb])
            }
            _ => {
                return Err(Error::Config(format!(
                    "U-Net latent width {} does not match decoder input",
                    self.latent
                )))
            }
        };
        for (i, conv) in self.dec.iter().enumerate() {
            if i > 0 {
                let up = g.upsample2(h);
                h = g.concat(&[up, skips[l - 1 - i]]);
            }
            h = conv.forward(g, store, h)?;
            h = g.relu(h);
        }
        let logits = self.head.forward(g, store, h)?;
        Ok(g.sigmoid(logits))
    }

    /// Repeats every encoder output `k` times along the batch axis.
    pub fn tile(&self, g: &mut Graph, skips: &[Var], k: usize) -> Vec<Var> {
        skips.iter().map(|&s| g.repeat_batch(s, k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use goalcast_core::Exec;
    use goalcast_nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> UNetSpec {
        UNetSpec {
            encoder_channels: vec![2, 3, 4],
            decoder_channels: vec![4, 3, 2],
            in_channels: 2,
            out_channels: 3,
        }
    }

    #[test]
    fn output_shape_and_range() {
        let net = UNet::new("u", tiny(), 5).unwrap();
        let mut store = ParamStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new(Exec::Sequential);
        let x = g.constant(Tensor::full(&[2, 2, 8, 8], 0.5));
        let w = g.constant(Tensor::full(&[2, 5], 0.1));
        let skips = net.encode(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(skips[2]), &[2, 4, 2, 2]);
        let y = net.decode(&mut g, &store, &skips, Some(w)).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 8, 8]);
        assert!(g.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_wrong_inputs() {
        let net = UNet::new("u", tiny(), 0).unwrap();
        let mut store = ParamStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new(Exec::Sequential);
        let bad_c = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(net.encode(&mut g, &store, bad_c).is_err());
        let bad_s = g.constant(Tensor::zeros(&[1, 2, 6, 6]));
        assert!(net.encode(&mut g, &store, bad_s).is_err());
        let x = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let skips = net.encode(&mut g, &store, x).unwrap();
        let w = g.constant(Tensor::zeros(&[1, 2]));
        assert!(net.decode(&mut g, &store, &skips, Some(w)).is_err());
    }

    #[test]
    fn profile_shapes() {
        assert_eq!(UNetSpec::long_goal_full().encoder_channels, vec![32, 32, 64, 64, 64]);
        assert_eq!(UNetSpec::waypoint_full(2).out_channels, 3);
        assert_eq!(UNetSpec::waypoint_full(2).encoder_channels.last(), Some(&128));
        assert!(UNetSpec::waypoint_desk(2).validate().is_ok());
    }
}
