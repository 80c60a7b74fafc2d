//! The assembled restoration model: training with the simple noise-prediction
//! loss and DDIM restoration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restore_autodiff::{Adam, Graph, Optimizer, Tensor};
use serde::{Deserialize, Serialize};

use super::autoencoder::{cosine_decay, Autoencoder, AutoencoderConfig};
use super::unet::{ConditionalUnet, UnetConfig};
use crate::diffusion::{ddim_step, q_sample, sigma_between, DdimSubsequence, VarianceSchedule};
use crate::error::{invalid, Error, Result};
use crate::io::{load_store, store_blobs, Checkpoint, ModelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Length of the DDIM sub-schedule used at inference.
    pub ddim_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RldmTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for RldmTraining {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 2e-3,
        }
    }
}

/// Noised training inputs for one batch.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub timesteps: Vec<usize>,
    /// `[N, C, h, w]` noise that the UNet must predict.
    pub xi: Tensor,
    pub z_noisy: Tensor,
}

/// Draws `r` uniformly from `1..=N` and `ξ ~ N(0, I)` per sample and forms
/// the forward-noised latents.
pub fn noise_batch<R: Rng + ?Sized>(z0: &[Tensor], sched: &VarianceSchedule, rng: &mut R) -> Result<NoisedBatch> {
    let mut timesteps = Vec::with_capacity(z0.len());
    let mut xis = Vec::with_capacity(z0.len());
    let mut noisy = Vec::with_capacity(z0.len());
    for z in z0 {
        let r = rng.random_range(1..=sched.num_steps());
        let xi = Tensor::randn(z.shape(), rng);
        noisy.push(q_sample(z, r, &xi, sched)?);
        timesteps.push(r);
        xis.push(xi);
    }
    Ok(NoisedBatch {
        timesteps,
        xi: Tensor::stack(&xis)?,
        z_noisy: Tensor::stack(&noisy)?,
    })
}

/// Everything produced by one restoration run, including the state needed
/// to redo the final reverse step with a modified noise prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Restoration {
    /// Decoded restoration `x̄`, clamped to `[0, 1]`.
    pub image: Tensor,
    /// Conditioning latent of the input image.
    pub z_cond: Tensor,
    /// UNet output at the final reverse step.
    pub eps_final: Tensor,
    /// Latent entering the final reverse step.
    pub z_last: Tensor,
    /// Latent after the final reverse step (the decoder input).
    pub z_final: Tensor,
    /// `(r, r_prev)` of the final reverse step.
    pub final_step: (usize, usize),
    /// Noise drawn for the final step; `None` when that step is deterministic.
    pub final_noise: Option<Tensor>,
    /// Timesteps at which the UNet was evaluated, in call order.
    pub unet_timesteps: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Rldm {
    autoencoder: Autoencoder,
    unet: ConditionalUnet,
    schedule_config: ScheduleConfig,
    schedule: VarianceSchedule,
    subsequence: DdimSubsequence,
}

impl Rldm {
    pub fn new(autoencoder: Autoencoder, unet: ConditionalUnet, schedule_config: ScheduleConfig) -> Result<Self> {
        let schedule = VarianceSchedule::linear(
            schedule_config.num_steps,
            schedule_config.beta_start,
            schedule_config.beta_end,
        )?;
        let subsequence = DdimSubsequence::evenly_spaced(schedule_config.num_steps, schedule_config.ddim_steps)?;
        if unet.config().latent_channels != autoencoder.config().latent_channels {
            return Err(invalid("rldm", "UNet and autoencoder disagree on latent channels"));
        }
        Ok(Self {
            autoencoder,
            unet,
            schedule_config,
            schedule,
            subsequence,
        })
    }

    pub fn autoencoder(&self) -> &Autoencoder {
        &self.autoencoder
    }

    pub fn unet(&self) -> &ConditionalUnet {
        &self.unet
    }

    pub fn unet_mut(&mut self) -> &mut ConditionalUnet {
        &mut self.unet
    }

    pub fn schedule(&self) -> &VarianceSchedule {
        &self.schedule
    }

    pub fn schedule_config(&self) -> &ScheduleConfig {
        &self.schedule_config
    }

    pub fn subsequence(&self) -> &DdimSubsequence {
        &self.subsequence
    }

    /// Replaces the inference sub-schedule.
    pub fn set_subsequence(&mut self, subsequence: DdimSubsequence) -> Result<()> {
        if *subsequence.steps().last().unwrap_or(&0) > self.schedule.num_steps() {
            return Err(invalid("rldm", "subsequence exceeds the schedule"));
        }
        self.schedule_config.ddim_steps = subsequence.len();
        self.subsequence = subsequence;
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.autoencoder.encode(x)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.autoencoder.decode(z)
    }

    /// Bundles autoencoder and UNet parameters with their configurations.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::json!({
            "autoencoder": self.autoencoder.config(),
            "unet": self.unet.config(),
            "schedule": self.schedule_config,
        });
        let mut blobs = store_blobs(self.autoencoder.params(), "ae.");
        blobs.extend(store_blobs(self.unet.params(), "unet."));
        Ok(Checkpoint {
            kind: ModelKind::Rldm,
            config: config.to_string(),
            blobs,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let ckpt = ckpt.clone().expect_kind(ModelKind::Rldm)?;
        let bad = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        let v: serde_json::Value = serde_json::from_str(&ckpt.config).map_err(bad)?;
        let ae_cfg: AutoencoderConfig = serde_json::from_value(v["autoencoder"].clone()).map_err(bad)?;
        let unet_cfg: UnetConfig = serde_json::from_value(v["unet"].clone()).map_err(bad)?;
        let sched: ScheduleConfig = serde_json::from_value(v["schedule"].clone()).map_err(bad)?;
        let mut ae = Autoencoder::new(ae_cfg, 0)?;
        load_store(ae.params_mut(), &ckpt.blobs, "ae.")?;
        ae.freeze();
        let mut unet = ConditionalUnet::new(unet_cfg, 0)?;
        load_store(unet.params_mut(), &ckpt.blobs, "unet.")?;
        Self::new(ae, unet, sched)
    }

    /// One optimisation step of the simple loss on pre-encoded latents.
    /// Returns the batch loss; only UNet parameters change.
    pub fn train_step_latents<R: Rng + ?Sized>(
        &mut self,
        z_hq: &[Tensor],
        z_cond: &[Tensor],
        opt: &mut dyn Optimizer,
        rng: &mut R,
    ) -> Result<f64> {
        if !self.autoencoder.is_frozen() {
            return Err(invalid("train_rldm_step", "autoencoder must be frozen"));
        }
        if z_hq.len() != z_cond.len() || z_hq.is_empty() {
            return Err(invalid("train_rldm_step", "need equally many targets and conditions"));
        }
        let batch = noise_batch(z_hq, &self.schedule, rng)?;
        let mut g = Graph::new();
        let p = self.unet.params().bind(&mut g);
        let c = g.constant(Tensor::stack(z_cond)?);
        let z = g.constant(batch.z_noisy);
        let t = g.constant(self.unet.time_embedding().embed_batch(&batch.timesteps));
        let xi = g.constant(batch.xi);
        let eps = self.unet.forward_graph(&mut g, &p, c, z, t)?;
        let loss = g.mse(eps, xi)?;
        let grads = g.backward(loss)?;
        let params = self.unet.params_mut();
        params.zero_grad();
        params.accumulate(&grads, &p)?;
        opt.step(params)?;
        Ok(g.value(loss).data()[0])
    }

    /// One training step from image pairs `(x^hq, x^d)`.
    pub fn train_rldm_step<R: Rng + ?Sized>(
        &mut self,
        hq: &[Tensor],
        degraded: &[Tensor],
        opt: &mut dyn Optimizer,
        rng: &mut R,
    ) -> Result<f64> {
        if !self.autoencoder.is_frozen() {
            return Err(invalid("train_rldm_step", "autoencoder must be frozen"));
        }
        let z_hq = self.autoencoder.encode_batch(hq)?;
        let z_d = self.autoencoder.encode_batch(degraded)?;
        self.train_step_latents(&z_hq, &z_d, opt, rng)
    }

    /// Restores `x_in` by running the reverse process from seeded Gaussian
    /// noise over the DDIM sub-schedule, conditioned on `Enc(x_in)`.
    pub fn restore(&self, x_in: &Tensor, seed: u64) -> Result<Restoration> {
        let z_cond = self.autoencoder.encode(x_in)?;
        self.restore_latent(z_cond, seed)
    }

    pub fn restore_latent(&self, z_cond: Tensor, seed: u64) -> Result<Restoration> {
        let pairs = self.subsequence.reverse_pairs();
        let Some(&final_step) = pairs.last() else {
            return Err(invalid("restore", "empty subsequence"));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Tensor::randn(z_cond.shape(), &mut rng);
        let mut unet_timesteps = Vec::with_capacity(pairs.len());
        let mut eps = z.clone();
        let mut z_last = z.clone();
        let mut final_noise = None;
        for &(r, r_prev) in &pairs {
            eps = self.unet.predict(&z_cond, &z, r)?;
            unet_timesteps.push(r);
            let noise = if sigma_between(r, r_prev, &self.schedule) > 0.0 {
                Some(Tensor::randn(z.shape(), &mut rng))
            } else {
                None
            };
            z_last = z;
            z = ddim_step(&eps, &z_last, r, r_prev, noise.as_ref(), &self.schedule)?;
            final_noise = noise;
        }
        let image = self.autoencoder.decode(&z)?;
        Ok(Restoration {
            image,
            z_cond,
            eps_final: eps,
            z_last,
            z_final: z,
            final_step,
            final_noise,
            unet_timesteps,
        })
    }
}

/// Trains the UNet of a restoration model on `(x^hq, x^d)` pairs with a frozen
/// autoencoder. Returns the model and the per-step loss curve.
pub fn train_rldm(
    autoencoder: Autoencoder,
    hq: &[Tensor],
    degraded: &[Tensor],
    unet_config: UnetConfig,
    schedule: ScheduleConfig,
    training: &RldmTraining,
    seed: u64,
) -> Result<(Rldm, Vec<f64>)> {
    if hq.len() != degraded.len() || hq.len() < training.batch_size || training.batch_size == 0 {
        return Err(invalid("train_rldm", "need at least one batch of (hq, degraded) pairs"));
    }
    let unet = ConditionalUnet::new(unet_config, seed)?;
    let mut model = Rldm::new(autoencoder, unet, schedule)?;
    if !model.autoencoder.is_frozen() {
        return Err(invalid("train_rldm", "autoencoder must be frozen"));
    }
    let z_hq = model.autoencoder.encode_batch(hq)?;
    let z_d = model.autoencoder.encode_batch(degraded)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ff);
    let mut opt = Adam::new(training.lr);
    let mut losses = Vec::with_capacity(training.steps);
    for step in 0..training.steps {
        let idx = rand::seq::index::sample(&mut rng, z_hq.len(), training.batch_size);
        let bh: Vec<Tensor> = idx.iter().map(|i| z_hq[i].clone()).collect();
        let bd: Vec<Tensor> = idx.iter().map(|i| z_d[i].clone()).collect();
        opt.lr = training.lr * cosine_decay(step, training.steps);
        let loss = model.train_step_latents(&bh, &bd, &mut opt, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("diffusion loss {loss} at step {step}")));
        }
        losses.push(loss);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use restore_autodiff::Sgd;

    fn tiny_model() -> Rldm {
        let mut ae = Autoencoder::new(AutoencoderConfig::default(), 1).unwrap();
        ae.freeze();
        let unet = ConditionalUnet::new(UnetConfig::default(), 2).unwrap();
        Rldm::new(ae, unet, ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sched = VarianceSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let z0 = vec![Tensor::randn(&[4, 8, 8], &mut rng); 3];
        let b = noise_batch(&z0, &sched, &mut rng).unwrap();
        let mut g = Graph::new();
        let a = g.constant(b.xi.clone());
        let c = g.constant(b.xi.clone());
        let l = g.mse(a, c).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        assert!(b.timesteps.iter().all(|&r| (1..=1000).contains(&r)));
    }

    #[test]
    fn training_requires_frozen_autoencoder() {
        let ae = Autoencoder::new(AutoencoderConfig::default(), 1).unwrap();
        let unet = ConditionalUnet::new(UnetConfig::default(), 2).unwrap();
        let mut m = Rldm::new(ae, unet, ScheduleConfig::default()).unwrap();
        let x = vec![Tensor::full(&[1, 32, 32], 0.5)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.train_rldm_step(&x, &x, &mut Sgd { lr: 0.1 }, &mut rng).is_err());
    }

    #[test]
    fn step_leaves_autoencoder_untouched() {
        let mut m = tiny_model();
        let before = m.autoencoder().params().fingerprint();
        let unet_before = m.unet().params().fingerprint();
        let x = vec![Tensor::full(&[1, 32, 32], 0.5), Tensor::full(&[1, 32, 32], 0.2)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = m.train_rldm_step(&x, &x, &mut Sgd { lr: 0.01 }, &mut rng).unwrap();
        assert!(loss.is_finite());
        assert_eq!(m.autoencoder().params().fingerprint(), before);
        assert_ne!(m.unet().params().fingerprint(), unet_before);
    }

    #[test]
    fn restore_visits_subsequence_in_reverse() {
        let m = tiny_model();
        let x = Tensor::full(&[1, 32, 32], 0.4);
        let a = m.restore(&x, 9).unwrap();
        assert_eq!(a.unet_timesteps, vec![1000, 875, 750, 625, 500, 375, 250, 125]);
        assert_eq!(a.final_step, (125, 0));
        assert_eq!(a.image.shape(), &[1, 32, 32]);
        let b = m.restore(&x, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(m.restore(&x, 10).unwrap().image, a.image);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny_model();
        let back =
            Rldm::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.unet().params().fingerprint(), m.unet().params().fingerprint());
        assert_eq!(
            back.autoencoder().params().fingerprint(),
            m.autoencoder().params().fingerprint()
        );
        assert!(back.autoencoder().is_frozen());
        assert!(Autoencoder::from_checkpoint(&m.to_checkpoint().unwrap()).is_err());
    }
}
