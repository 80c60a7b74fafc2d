//! Two-level conditional UNet predicting the noise of a latent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use restore_autodiff::{Binding, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::TimeEmbedding;
use crate::error::{invalid, Result};
use crate::nn::{Conv2d, GroupNorm, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnetConfig {
    pub latent_channels: usize,
    /// Channels at the latent resolution and at half of it.
    pub channels: [usize; 2],
    pub time_dim: usize,
    pub groups: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            channels: [24, 32],
            time_dim: 32,
            groups: 4,
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(p: &mut ParamStore, name: &str, c: usize, temb: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: GroupNorm::new(p, &format!("{name}.norm1"), c, groups),
            conv1: Conv2d::same(p, &format!("{name}.conv1"), c, c, 3, rng),
            time: Linear::new(p, &format!("{name}.time"), temb, c, rng),
            norm2: GroupNorm::new(p, &format!("{name}.norm2"), c, groups),
            conv2: Conv2d::same(p, &format!("{name}.conv2"), c, c, 3, rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Binding, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h)?;
        let t = self.time.forward(g, p, temb)?;
        let h = g.add_channel(h, t)?;
        let h = self.norm2.forward(g, p, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h)?;
        Ok(g.add(x, h)?)
    }
}

/// `ε_θ = U(z_cond, z_r, T(r))`, with the condition concatenated to the
/// noisy latent along channels.
#[derive(Debug, Clone)]
pub struct ConditionalUnet {
    config: UnetConfig,
    params: ParamStore,
    time_embedding: TimeEmbedding,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    block_hi: ResBlock,
    down: Conv2d,
    block_lo: ResBlock,
    merge: Conv2d,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl ConditionalUnet {
    pub fn new(config: UnetConfig, seed: u64) -> Result<Self> {
        let [c0, c1] = config.channels;
        if config.groups == 0 || c0 % config.groups != 0 || c1 % config.groups != 0 || config.latent_channels == 0 {
            return Err(invalid("unet", format!("inconsistent config {config:?}")));
        }
        let time_embedding = TimeEmbedding::new(config.time_dim)?;
        let temb = 2 * config.time_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut p = ParamStore::new();
        let lc = config.latent_channels;
        let g = config.groups;
        Ok(Self {
            time1: Linear::new(&mut p, "time.fc1", config.time_dim, temb, rng),
            time2: Linear::new(&mut p, "time.fc2", temb, temb, rng),
            conv_in: Conv2d::same(&mut p, "conv_in", 2 * lc, c0, 3, rng),
            block_hi: ResBlock::new(&mut p, "block_hi", c0, temb, g, rng),
            down: Conv2d::new(&mut p, "down", c0, c1, 3, 2, 1, rng),
            block_lo: ResBlock::new(&mut p, "block_lo", c1, temb, g, rng),
            merge: Conv2d::same(&mut p, "merge", c0 + c1, c0, 3, rng),
            norm_out: GroupNorm::new(&mut p, "norm_out", c0, g),
            conv_out: Conv2d::same(&mut p, "conv_out", c0, lc, 3, rng),
            config,
            params: p,
            time_embedding,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn time_embedding(&self) -> &TimeEmbedding {
        &self.time_embedding
    }

    /// Channel count of the first layer's input.
    pub fn input_channels(&self) -> usize {
        2 * self.config.latent_channels
    }

    /// Graph forward on batches: `z_cond`, `z_noisy` are `[N, C, h, w]`,
    /// `temb` is `[N, time_dim]`.
    pub fn forward_graph(&self, g: &mut Graph, p: &Binding, z_cond: Var, z_noisy: Var, temb: Var) -> Result<Var> {
        if g.shape(z_cond) != g.shape(z_noisy) {
            return Err(invalid(
                "unet_forward",
                format!("condition {:?} vs noisy latent {:?}", g.shape(z_cond), g.shape(z_noisy)),
            ));
        }
        let s = g.shape(z_noisy);
        if s.len() != 4 || s[1] != self.config.latent_channels || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(invalid("unet_forward", format!("unsupported latent shape {s:?}")));
        }
        let t = self.time1.forward(g, p, temb)?;
        let t = g.silu(t);
        let t = self.time2.forward(g, p, t)?;
        let t = g.silu(t);

        let x = g.concat_channels(z_cond, z_noisy)?;
        let h0 = self.conv_in.forward(g, p, x)?;
        let h0 = self.block_hi.forward(g, p, h0, t)?;
        let h1 = self.down.forward(g, p, h0)?;
        let h1 = self.block_lo.forward(g, p, h1, t)?;
        let up = g.upsample_nearest(h1, 2)?;
        let h = g.concat_channels(h0, up)?;
        let h = self.merge.forward(g, p, h)?;
        let h = self.norm_out.forward(g, p, h)?;
        let h = g.silu(h);
        self.conv_out.forward(g, p, h)
    }

    /// Noise prediction for single `[C, h, w]` latents at timestep `r`.
    pub fn predict(&self, z_cond: &Tensor, z_noisy: &Tensor, r: usize) -> Result<Tensor> {
        if z_cond.shape() != z_noisy.shape() {
            return Err(invalid(
                "unet_forward",
                format!("condition {:?} vs noisy latent {:?}", z_cond.shape(), z_noisy.shape()),
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind_constant(&mut g);
        let c = g.constant(z_cond.unsqueeze0());
        let z = g.constant(z_noisy.unsqueeze0());
        let t = g.constant(self.time_embedding.embed(r).unsqueeze0());
        let eps = self.forward_graph(&mut g, &p, c, z, t)?;
        Ok(g.value(eps).index_outer(0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_and_determinism() {
        let u = ConditionalUnet::new(UnetConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Tensor::randn(&[4, 8, 8], &mut rng);
        let z = Tensor::randn(&[4, 8, 8], &mut rng);
        let e = u.predict(&c, &z, 10).unwrap();
        assert_eq!(e.shape(), z.shape());
        assert_eq!(u.predict(&c, &z, 10).unwrap(), e);
        assert!(u.predict(&c, &Tensor::zeros(&[4, 4, 4]), 10).is_err());
    }

    #[test]
    fn parameter_count_is_small() {
        let u = ConditionalUnet::new(UnetConfig::default(), 0).unwrap();
        let n = u.params().num_scalars();
        assert!((30_000..90_000).contains(&n), "{n}");
        assert_eq!(u.input_channels(), 8);
    }
}
