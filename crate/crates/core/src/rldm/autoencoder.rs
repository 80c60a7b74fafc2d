//! Convolutional autoencoder providing the latent space for restoration.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use restore_autodiff::{Adam, Binding, Graph, Optimizer, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::{load_store, store_blobs, Checkpoint, ModelKind};
use crate::nn::{Conv2d, Upconv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    /// Spatial reduction factor, a power of two.
    pub downsample: usize,
    /// Channel width at full resolution; doubles at every level.
    pub width: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            latent_channels: 4,
            downsample: 4,
            width: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for AutoencoderTraining {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 2e-3,
        }
    }
}

/// Encoder/decoder pair. Latents returned by [`Autoencoder::encode`] are
/// multiplied by a scale fitted after training so they have unit variance.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    config: AutoencoderConfig,
    params: ParamStore,
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: Conv2d,
    dec_up: Vec<Upconv>,
    dec_out: Conv2d,
    latent_scale: ParamId,
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        let levels = config.downsample.trailing_zeros() as usize;
        if !config.downsample.is_power_of_two() || config.downsample < 2 {
            return Err(invalid(
                "autoencoder",
                format!("downsample {} is not a power of two", config.downsample),
            ));
        }
        if !config.image_size.is_multiple_of(config.downsample) || config.latent_channels == 0 || config.width == 0 {
            return Err(invalid("autoencoder", format!("inconsistent config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let width = |l: usize| config.width << l;
        let enc_in = Conv2d::same(&mut p, "enc.in", 1, width(0), 3, &mut rng);
        let enc_down = (0..levels)
            .map(|l| {
                Conv2d::new(
                    &mut p,
                    &format!("enc.down{l}"),
                    width(l),
                    width(l + 1),
                    3,
                    2,
                    1,
                    &mut rng,
                )
            })
            .collect();
        let enc_out = Conv2d::same(&mut p, "enc.out", width(levels), config.latent_channels, 1, &mut rng);
        let dec_in = Conv2d::same(&mut p, "dec.in", config.latent_channels, width(levels), 3, &mut rng);
        let dec_mid = Conv2d::same(&mut p, "dec.mid", width(levels), width(levels), 3, &mut rng);
        let dec_up = (1..=levels)
            .rev()
            .map(|l| Upconv::new(&mut p, &format!("dec.up{l}"), width(l), width(l - 1), &mut rng))
            .collect();
        let dec_out = Conv2d::same(&mut p, "dec.out", width(0), 1, 3, &mut rng);
        let latent_scale = p.add("latent_scale", Tensor::scalar(1.0));
        Ok(Self {
            config,
            params: p,
            enc_in,
            enc_down,
            enc_out,
            dec_in,
            dec_mid,
            dec_up,
            dec_out,
            latent_scale,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    pub fn latent_scale(&self) -> f64 {
        self.params.get(self.latent_scale).value().data()[0]
    }

    /// `[C, H/f, W/f]`.
    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.config.image_size / self.config.downsample;
        [self.config.latent_channels, s, s]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [1, self.config.image_size, self.config.image_size]
    }

    /// Raw (unscaled) latents for a `[N, 1, H, W]` batch.
    pub fn encode_graph(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let mut h = self.enc_in.forward(g, p, x)?;
        h = g.silu(h);
        for conv in &self.enc_down {
            h = conv.forward(g, p, h)?;
            h = g.silu(h);
        }
        self.enc_out.forward(g, p, h)
    }

    /// Unclamped reconstruction from raw latents.
    pub fn decode_graph(&self, g: &mut Graph, p: &Binding, z: Var) -> Result<Var> {
        let mut h = self.dec_in.forward(g, p, z)?;
        h = g.silu(h);
        h = self.dec_mid.forward(g, p, h)?;
        h = g.silu(h);
        for up in &self.dec_up {
            h = up.forward(g, p, h)?;
            h = g.silu(h);
        }
        self.dec_out.forward(g, p, h)
    }

    /// Unclamped reconstruction from scaled latents, differentiable in `z`.
    pub fn decode_scaled_graph(&self, g: &mut Graph, p: &Binding, z: Var) -> Result<Var> {
        let raw = g.scale(z, 1.0 / self.latent_scale());
        self.decode_graph(g, p, raw)
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.image_shape() {
            return Err(invalid(
                "encode",
                format!("expected image {:?}, got {:?}", self.image_shape(), x.shape()),
            ));
        }
        Ok(())
    }

    /// Scaled latent `[C, h, w]` of a `[1, H, W]` image.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn encode_batch(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        for x in images {
            self.check_image(x)?;
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut g = Graph::new();
            let p = self.params.bind_constant(&mut g);
            let x = g.constant(Tensor::stack(chunk)?);
            let z = self.encode_graph(&mut g, &p, x)?;
            let z = g.value(z).scale(self.latent_scale());
            for i in 0..chunk.len() {
                out.push(z.index_outer(i)?);
            }
        }
        Ok(out)
    }

    /// Image `[1, H, W]` clamped to `[0, 1]` from a scaled latent.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape() != self.latent_shape() {
            return Err(invalid(
                "decode",
                format!("expected latent {:?}, got {:?}", self.latent_shape(), z.shape()),
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind_constant(&mut g);
        let zv = g.constant(z.unsqueeze0());
        let x = self.decode_scaled_graph(&mut g, &p, zv)?;
        Ok(g.value(x).index_outer(0)?.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: ModelKind::Autoencoder,
            config: serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?,
            blobs: store_blobs(&self.params, ""),
        })
    }

    /// Rebuilds a frozen autoencoder from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let ckpt = ckpt.clone().expect_kind(ModelKind::Autoencoder)?;
        let config: AutoencoderConfig =
            serde_json::from_str(&ckpt.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut ae = Self::new(config, 0)?;
        load_store(&mut ae.params, &ckpt.blobs, "")?;
        ae.freeze();
        Ok(ae)
    }

    /// Mean-squared reconstruction loss of a batch, accumulating gradients.
    fn train_step(&mut self, batch: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(batch.clone());
        let z = self.encode_graph(&mut g, &p, x)?;
        let y = self.decode_graph(&mut g, &p, z)?;
        let loss = g.mse(y, x)?;
        let grads = g.backward(loss)?;
        self.params.zero_grad();
        self.params.accumulate(&grads, &p)?;
        Ok(g.value(loss).data()[0])
    }
}

/// Trains an autoencoder on reconstruction MSE, fits the latent scale and
/// returns it frozen along with the per-step loss curve.
pub fn train_autoencoder(
    images: &[Tensor],
    config: AutoencoderConfig,
    training: &AutoencoderTraining,
    seed: u64,
) -> Result<(Autoencoder, Vec<f64>)> {
    if images.len() < training.batch_size || training.batch_size == 0 {
        return Err(invalid("train_autoencoder", "dataset smaller than one batch"));
    }
    let mut ae = Autoencoder::new(config, seed)?;
    for x in images {
        ae.check_image(x)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xae);
    let mut opt = Adam::new(training.lr);
    let mut losses = Vec::with_capacity(training.steps);
    for step in 0..training.steps {
        let idx = sample(&mut rng, images.len(), training.batch_size);
        let batch: Vec<Tensor> = idx.iter().map(|i| images[i].clone()).collect();
        let loss = ae.train_step(&Tensor::stack(&batch)?)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("autoencoder loss {loss} at step {step}")));
        }
        opt.lr = training.lr * cosine_decay(step, training.steps);
        opt.step(&mut ae.params)?;
        losses.push(loss);
    }
    ae.params.set_value("latent_scale", Tensor::scalar(1.0))?;
    let latents = ae.encode_batch(images)?;
    let n: usize = latents.iter().map(Tensor::len).sum();
    let mean = latents.iter().map(Tensor::sum).sum::<f64>() / n as f64;
    let var = latents
        .iter()
        .flat_map(|z| z.data().iter())
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    ae.params
        .set_value("latent_scale", Tensor::scalar(1.0 / var.sqrt().max(1e-8)))?;
    ae.freeze();
    Ok((ae, losses))
}

/// Learning-rate multiplier decaying from 1 to 0.1 along a half cosine.
pub(crate) fn cosine_decay(step: usize, total: usize) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_shape_contract() {
        let ae = Autoencoder::new(AutoencoderConfig::default(), 0).unwrap();
        let x = Tensor::full(&[1, 32, 32], 0.5);
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[4, 8, 8]);
        assert_eq!(ae.encode(&x).unwrap(), z);
        let y = ae.decode(&z).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ae.decode(&z).unwrap(), y);
    }

    #[test]
    fn wrong_resolution_rejected() {
        let ae = Autoencoder::new(AutoencoderConfig::default(), 0).unwrap();
        assert!(ae.encode(&Tensor::zeros(&[1, 16, 16])).is_err());
        assert!(ae.decode(&Tensor::zeros(&[4, 4, 4])).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = AutoencoderConfig {
            downsample: 3,
            ..Default::default()
        };
        assert!(Autoencoder::new(cfg, 0).is_err());
    }
}
