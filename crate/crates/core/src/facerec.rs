//! Toy face-embedding models, the normalised embedding distance and
//! verification thresholds.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restore_autodiff::{Adam, Binding, Graph, Optimizer, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, IMAGE_SIZE};
use crate::error::{invalid, Error, Result};
use crate::io::{load_store, store_blobs, Checkpoint, ModelKind};
use crate::nn::{Conv2d, Linear};
use crate::rldm::autoencoder::cosine_decay;

pub const EMBED_DIM: usize = 32;
/// Fewest impostor pairs accepted by [`calibrate_threshold`].
pub const MIN_IMPOSTOR_PAIRS: usize = 100;
const STRIDED_STAGES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Surrogate,
    Victim,
}

/// Backbone shape: one `conv → SiLU` stage per entry, the first three with
/// stride 2, then a linear embedding layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrArchitecture {
    pub kernels: Vec<usize>,
    pub widths: Vec<usize>,
    pub embed_dim: usize,
}

impl FrArchitecture {
    /// Depth 3 or 4, kernel sizes 3 or 5 and base width 6 to 12, all drawn
    /// from `arch_seed`.
    pub fn from_seed(arch_seed: u64) -> Self {
        let h = derive_seed(arch_seed, 0xF00D, 0);
        let depth = 3 + (h & 1) as usize;
        let base = [6, 8, 10, 12][((h >> 1) & 3) as usize];
        Self {
            kernels: (0..depth)
                .map(|i| if (h >> (3 + i)) & 1 == 1 { 5 } else { 3 })
                .collect(),
            widths: (0..depth).map(|i| if i == 0 { base } else { 2 * base }).collect(),
            embed_dim: EMBED_DIM,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernels.len() < STRIDED_STAGES
            || self.kernels.len() != self.widths.len()
            || self.kernels.iter().any(|k| k % 2 == 0)
            || self.widths.contains(&0)
            || self.embed_dim == 0
        {
            return Err(invalid("embedding_model", format!("unsupported architecture {self:?}")));
        }
        Ok(())
    }
}

/// Calibrated accept rule: a pair is accepted when its distance is strictly
/// below `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationThreshold {
    pub threshold: f64,
    pub far: f64,
}

impl VerificationThreshold {
    pub fn accepts(&self, distance: f64) -> bool {
        distance < self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied to normalised embeddings before the class head.
    pub logit_scale: f64,
}

impl Default for FrTraining {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            lr: 3e-3,
            logit_scale: 2.0,
        }
    }
}

/// Anything that maps a batch of images `[N, 1, H, W]` to embeddings `[N, D]`
/// inside a graph.
pub trait Embedder {
    fn name(&self) -> &str;

    fn embed_var(&self, g: &mut Graph, x: Var) -> Result<Var>;

    /// Called once per attack iteration; stochastic views resample here.
    fn next_iteration(&mut self) {}
}

#[derive(Debug, Clone)]
struct ClassHead {
    params: ParamStore,
    fc: Linear,
    n_classes: usize,
}

type MaskFn<'a> = dyn FnMut(usize, &[usize]) -> Tensor + 'a;

/// Convolutional embedding network with its verification threshold.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    name: String,
    role: Role,
    arch_seed: u64,
    arch: FrArchitecture,
    params: ParamStore,
    convs: Vec<Conv2d>,
    fc: Linear,
    head: Option<ClassHead>,
    logit_scale: f64,
    threshold: Option<VerificationThreshold>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingModelMeta {
    name: String,
    role: Role,
    arch_seed: u64,
    arch: FrArchitecture,
    logit_scale: f64,
    n_classes: Option<usize>,
    threshold: Option<VerificationThreshold>,
}

impl EmbeddingModel {
    pub fn new(name: impl Into<String>, role: Role, arch_seed: u64, init_seed: u64) -> Result<Self> {
        Self::with_architecture(name, role, arch_seed, FrArchitecture::from_seed(arch_seed), init_seed)
    }

    fn with_architecture(
        name: impl Into<String>,
        role: Role,
        arch_seed: u64,
        arch: FrArchitecture,
        init_seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut p = ParamStore::new();
        let mut cin = 1;
        let mut convs = Vec::with_capacity(arch.kernels.len());
        for (i, (&k, &w)) in arch.kernels.iter().zip(&arch.widths).enumerate() {
            let stride = if i < STRIDED_STAGES { 2 } else { 1 };
            convs.push(Conv2d::new(
                &mut p,
                &format!("stage{i}"),
                cin,
                w,
                k,
                stride,
                k / 2,
                &mut rng,
            ));
            cin = w;
        }
        let side = IMAGE_SIZE >> STRIDED_STAGES;
        let fc = Linear::new(&mut p, "embed", cin * side * side, arch.embed_dim, &mut rng);
        Ok(Self {
            name: name.into(),
            role,
            arch_seed,
            arch,
            params: p,
            convs,
            fc,
            head: None,
            logit_scale: FrTraining::default().logit_scale,
            threshold: None,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn arch_seed(&self) -> u64 {
        self.arch_seed
    }

    pub fn architecture(&self) -> &FrArchitecture {
        &self.arch
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn threshold(&self) -> Option<VerificationThreshold> {
        self.threshold
    }

    pub fn set_threshold(&mut self, t: VerificationThreshold) {
        self.threshold = Some(t);
    }

    pub fn rename(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    /// Backbone forward. `dropout` supplies a multiplicative mask for the
    /// output of stage `i` given its shape.
    fn forward(&self, g: &mut Graph, p: &Binding, x: Var, mut dropout: Option<&mut MaskFn<'_>>) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != IMAGE_SIZE || s[3] != IMAGE_SIZE {
            return Err(invalid(
                "embed",
                format!("expected [N, 1, {IMAGE_SIZE}, {IMAGE_SIZE}] images, got {s:?}"),
            ));
        }
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            h = g.silu(h);
            if let Some(mask_fn) = dropout.as_mut() {
                let mask = g.constant(mask_fn(i, g.shape(h)));
                h = g.mul(h, mask)?;
            }
        }
        let hs = g.shape(h).to_vec();
        let h = g.reshape(h, &[hs[0], hs[1] * hs[2] * hs[3]])?;
        self.fc.forward(g, p, h)
    }

    /// Embedding of one `[1, H, W]` image.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.embed_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn embed_batch(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::stack(chunk)?);
            let e = self.embed_var(&mut g, x)?;
            for i in 0..chunk.len() {
                out.push(g.value(e).index_outer(i)?);
            }
        }
        Ok(out)
    }

    /// Normalised-embedding distances of index pairs into `images`.
    pub fn pair_distances(&self, images: &[Tensor], pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let mut needed: BTreeMap<usize, usize> = BTreeMap::new();
        for &(a, b) in pairs {
            for i in [a, b] {
                if i >= images.len() {
                    return Err(invalid("pair_distances", format!("image index {i} out of range")));
                }
                let next = needed.len();
                needed.entry(i).or_insert(next);
            }
        }
        let mut order: Vec<(usize, usize)> = needed.iter().map(|(&img, &slot)| (slot, img)).collect();
        order.sort_unstable();
        let batch: Vec<Tensor> = order.iter().map(|&(_, img)| images[img].clone()).collect();
        let emb = self.embed_batch(&batch)?;
        pairs
            .iter()
            .map(|(a, b)| embedding_distance(&emb[needed[a]], &emb[needed[b]]))
            .collect()
    }

    /// Sets the threshold from impostor pairs at the given false accept rate.
    pub fn calibrate(
        &mut self,
        images: &[Tensor],
        impostor_pairs: &[(usize, usize)],
        far: f64,
    ) -> Result<VerificationThreshold> {
        let d = self.pair_distances(images, impostor_pairs)?;
        let t = calibrate_threshold(&d, far)?;
        self.threshold = Some(t);
        Ok(t)
    }

    fn class_loss(
        &self,
        g: &mut Graph,
        p: &Binding,
        head: &ClassHead,
        hp: &Binding,
        x: Var,
        labels: &[usize],
    ) -> Result<Var> {
        let e = self.forward(g, p, x, None)?;
        let e = g.l2_normalize(e)?;
        let e = g.scale(e, self.logit_scale);
        let logits = head.fc.forward(g, hp, e)?;
        Ok(g.softmax_cross_entropy(logits, labels)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = EmbeddingModelMeta {
            name: self.name.clone(),
            role: self.role,
            arch_seed: self.arch_seed,
            arch: self.arch.clone(),
            logit_scale: self.logit_scale,
            n_classes: self.head.as_ref().map(|h| h.n_classes),
            threshold: self.threshold,
        };
        let mut blobs = store_blobs(&self.params, "net.");
        if let Some(h) = &self.head {
            blobs.extend(store_blobs(&h.params, "head."));
        }
        Ok(Checkpoint {
            kind: ModelKind::EmbeddingModel,
            config: serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
            blobs,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let ckpt = ckpt.clone().expect_kind(ModelKind::EmbeddingModel)?;
        let meta: EmbeddingModelMeta =
            serde_json::from_str(&ckpt.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut m = Self::with_architecture(meta.name, meta.role, meta.arch_seed, meta.arch, 0)?;
        load_store(&mut m.params, &ckpt.blobs, "net.")?;
        if let Some(k) = meta.n_classes {
            let mut head = new_head(m.arch.embed_dim, k, 0);
            load_store(&mut head.params, &ckpt.blobs, "head.")?;
            m.head = Some(head);
        }
        m.logit_scale = meta.logit_scale;
        m.threshold = meta.threshold;
        Ok(m)
    }
}

impl Embedder for EmbeddingModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = self.params.bind_constant(g);
        self.forward(g, &p, x, None)
    }
}

/// Surrogate view that applies fresh random dropout to every stage's
/// feature map on each attack iteration.
#[derive(Debug, Clone)]
pub struct DropoutSurrogate<'a> {
    model: &'a EmbeddingModel,
    name: String,
    p: f64,
    seed: u64,
    iteration: u64,
}

impl<'a> DropoutSurrogate<'a> {
    pub fn new(model: &'a EmbeddingModel, p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid(
                "dfanet_dropout_wrap",
                format!("drop probability {p} outside [0, 1)"),
            ));
        }
        Ok(Self {
            model,
            name: format!("{}+dropout", model.name),
            p,
            seed,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Mask of stage `layer` for the current iteration, scaled by `1/(1−p)`.
    pub fn mask(&self, layer: usize, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.iteration, layer as u64));
        let keep = 1.0 / (1.0 - self.p);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.random::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("positive mask shape")
    }
}

impl Embedder for DropoutSurrogate<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = self.model.params.bind_constant(g);
        if self.p == 0.0 {
            return self.model.forward(g, &p, x, None);
        }
        let mut masks = |layer: usize, shape: &[usize]| self.mask(layer, shape);
        self.model.forward(g, &p, x, Some(&mut masks))
    }

    fn next_iteration(&mut self) {
        self.iteration += 1;
    }
}

/// `v / ‖v‖₂`.
pub fn normalize_phi(v: &Tensor) -> Result<Tensor> {
    let n = v.norm_sq().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(invalid("normalize_phi", format!("embedding norm is {n}")));
    }
    Ok(v.map(|x| x / n))
}

/// `‖φ(a) − φ(b)‖²`, in `[0, 4]`.
pub fn embedding_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(invalid(
            "embedding_distance",
            format!("dimension mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(normalize_phi(a)?.sub(&normalize_phi(b)?)?.norm_sq())
}

/// Threshold accepting a `far` fraction of the impostor distances: the
/// `⌊far·n⌋`-th smallest distance, or just above the largest when every
/// pair must be accepted.
pub fn calibrate_threshold(impostor_distances: &[f64], far: f64) -> Result<VerificationThreshold> {
    if impostor_distances.len() < MIN_IMPOSTOR_PAIRS {
        return Err(invalid(
            "calibrate_threshold",
            format!(
                "{} impostor pairs, need at least {MIN_IMPOSTOR_PAIRS}",
                impostor_distances.len()
            ),
        ));
    }
    if !(0.0..=1.0).contains(&far) {
        return Err(invalid("calibrate_threshold", format!("far {far} outside [0, 1]")));
    }
    if impostor_distances.iter().any(|d| !d.is_finite()) {
        return Err(invalid("calibrate_threshold", "non-finite distance"));
    }
    let mut d = impostor_distances.to_vec();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let k = ((far * n as f64).floor() as usize).min(n);
    let threshold = if k == n { d[n - 1].next_up() } else { d[k] };
    Ok(VerificationThreshold {
        threshold: threshold.max(f64::MIN_POSITIVE),
        far,
    })
}

/// Fraction of genuine pairs accepted plus impostor pairs rejected.
pub fn verification_accuracy(genuine: &[f64], impostor: &[f64], t: &VerificationThreshold) -> f64 {
    let ok = genuine.iter().filter(|&&d| t.accepts(d)).count() + impostor.iter().filter(|&&d| !t.accepts(d)).count();
    ok as f64 / (genuine.len() + impostor.len()).max(1) as f64
}

/// Sign with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn new_head(embed_dim: usize, n_classes: usize, seed: u64) -> ClassHead {
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fc = Linear::new(&mut params, "fc", embed_dim, n_classes, &mut rng);
    ClassHead { params, fc, n_classes }
}

fn check_labels(images: &[Tensor], labels: &[usize]) -> Result<usize> {
    if images.len() != labels.len() {
        return Err(invalid("train_fr_model", "images and labels differ in length"));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    let usable = counts.iter().filter(|&&c| c >= 2).count();
    if usable < 2 || counts.contains(&1) {
        return Err(invalid(
            "train_fr_model",
            "need at least 2 identities with at least 2 images each",
        ));
    }
    Ok(n_classes)
}

/// Trains an embedding network by identity classification on normalised,
/// scaled embeddings. The class head is kept aside and is not part of the
/// embedding path.
pub fn train_fr_model(
    name: &str,
    images: &[Tensor],
    labels: &[usize],
    role: Role,
    arch_seed: u64,
    training: &FrTraining,
    seed: u64,
) -> Result<EmbeddingModel> {
    let n_classes = check_labels(images, labels)?;
    let mut model = EmbeddingModel::new(name, role, arch_seed, seed)?;
    model.logit_scale = training.logit_scale;
    let mut head = new_head(model.arch.embed_dim, n_classes, seed ^ 0x4EAD);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF4CE);
    let (mut opt, mut head_opt) = (Adam::new(training.lr), Adam::new(training.lr));
    let bs = training.batch_size.min(images.len());
    for step in 0..training.steps {
        let idx = sample(&mut rng, images.len(), bs);
        let batch: Vec<Tensor> = idx.iter().map(|i| images[i].clone()).collect();
        let y: Vec<usize> = idx.iter().map(|i| labels[i]).collect();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let hp = head.params.bind(&mut g);
        let x = g.constant(Tensor::stack(&batch)?);
        let loss = model.class_loss(&mut g, &p, &head, &hp, x, &y)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Diverged(format!(
                "{name}: classification loss {lv} at step {step}"
            )));
        }
        let grads = g.backward(loss)?;
        apply(
            &mut model.params,
            &mut opt,
            &grads,
            &p,
            training.lr * cosine_decay(step, training.steps),
        )?;
        apply(
            &mut head.params,
            &mut head_opt,
            &grads,
            &hp,
            training.lr * cosine_decay(step, training.steps),
        )?;
    }
    model.head = Some(head);
    Ok(model)
}

fn apply(
    store: &mut ParamStore,
    opt: &mut Adam,
    grads: &restore_autodiff::Gradients,
    binding: &Binding,
    lr: f64,
) -> Result<()> {
    store.zero_grad();
    store.accumulate(grads, binding)?;
    opt.lr = lr;
    opt.step(store)?;
    Ok(())
}

/// Single-step sign-gradient adversarial fine-tuning: every batch is
/// perturbed by `rho·sign(∇ₓ loss)` (clamped to `[0, 1]`) and the model is
/// trained on clean and perturbed images together. The threshold is cleared
/// and must be recalibrated.
pub fn adversarial_finetune(
    model: &EmbeddingModel,
    images: &[Tensor],
    labels: &[usize],
    rho: f64,
    training: &FrTraining,
    seed: u64,
) -> Result<EmbeddingModel> {
    check_labels(images, labels)?;
    if !(rho > 0.0 && rho < 1.0) {
        return Err(invalid("adversarial_finetune", format!("budget {rho} outside (0, 1)")));
    }
    let mut m = model.clone();
    m.name = format!("{}-adv", model.name);
    m.threshold = None;
    let mut head = m
        .head
        .take()
        .ok_or_else(|| invalid("adversarial_finetune", "model has no classification head"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xADF7);
    let (mut opt, mut head_opt) = (Adam::new(training.lr), Adam::new(training.lr));
    let bs = training.batch_size.min(images.len());
    for step in 0..training.steps {
        let idx = sample(&mut rng, images.len(), bs);
        let batch: Vec<Tensor> = idx.iter().map(|i| images[i].clone()).collect();
        let y: Vec<usize> = idx.iter().map(|i| labels[i]).collect();
        let clean = Tensor::stack(&batch)?;

        let mut g = Graph::new();
        let p = m.params.bind_constant(&mut g);
        let hp = head.params.bind_constant(&mut g);
        let x = g.leaf(clean.clone());
        let loss = m.class_loss(&mut g, &p, &head, &hp, x, &y)?;
        let gx = g.backward(loss)?.wrt(x);
        let adv = clean.zip_map(&gx, "fgsm", |v, d| (v + rho * sign(d)).clamp(0.0, 1.0))?;

        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let hp = head.params.bind(&mut g);
        let xc = g.constant(clean);
        let xa = g.constant(adv);
        let lc = m.class_loss(&mut g, &p, &head, &hp, xc, &y)?;
        let la = m.class_loss(&mut g, &p, &head, &hp, xa, &y)?;
        let both = g.add(lc, la)?;
        let loss = g.scale(both, 0.5);
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Diverged(format!(
                "{}: adversarial loss {lv} at step {step}",
                m.name
            )));
        }
        let grads = g.backward(loss)?;
        let lr = training.lr * cosine_decay(step, training.steps);
        apply(&mut m.params, &mut opt, &grads, &p, lr)?;
        apply(&mut head.params, &mut head_opt, &grads, &hp, lr)?;
    }
    m.head = Some(head);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_examples() {
        let v = normalize_phi(&Tensor::from_vec(vec![3.0, 4.0])).unwrap();
        assert!((v.data()[0] - 0.6).abs() < 1e-15 && (v.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(normalize_phi(&v).unwrap(), v);
        assert!(normalize_phi(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn distance_examples() {
        let e1 = Tensor::from_vec(vec![1.0, 0.0]);
        let e2 = Tensor::from_vec(vec![0.0, 1.0]);
        assert_eq!(embedding_distance(&e1, &e1).unwrap(), 0.0);
        assert!((embedding_distance(&e1, &e2).unwrap() - 2.0).abs() < 1e-15);
        assert!((embedding_distance(&e1, &e1.scale(-1.0)).unwrap() - 4.0).abs() < 1e-15);
        assert!(embedding_distance(&e1, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn threshold_quantile() {
        let d: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let t = calibrate_threshold(&d, 0.01).unwrap();
        assert_eq!(d.iter().filter(|&&x| t.accepts(x)).count(), 1);
        let all = calibrate_threshold(&d, 1.0).unwrap();
        assert!(all.threshold >= 1.0 && d.iter().all(|&x| all.accepts(x)));
        assert_eq!(calibrate_threshold(&d, 0.01).unwrap(), t);
        assert!(calibrate_threshold(&d[..99], 0.01).is_err());
    }

    #[test]
    fn architectures_vary_with_seed() {
        let archs: Vec<FrArchitecture> = (0..16).map(FrArchitecture::from_seed).collect();
        assert!(archs.iter().any(|a| a.kernels.len() == 3) && archs.iter().any(|a| a.kernels.len() == 4));
        assert!(archs.iter().any(|a| a != &archs[0]));
    }

    #[test]
    fn embed_contract() {
        let m = EmbeddingModel::new("m", Role::Surrogate, 1, 2).unwrap();
        let x = Tensor::full(&[1, 32, 32], 0.3);
        let e = m.embed(&x).unwrap();
        assert_eq!(e.shape(), &[EMBED_DIM]);
        assert_eq!(m.embed(&x).unwrap(), e);
        assert!(m.embed(&Tensor::zeros(&[1, 16, 16])).is_err());
    }

    #[test]
    fn dropout_view_contract() {
        let m = EmbeddingModel::new("m", Role::Surrogate, 1, 2).unwrap();
        let x = Tensor::full(&[1, 1, 32, 32], 0.3);
        let run = |e: &dyn Embedder| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let v = e.embed_var(&mut g, xv).unwrap();
            g.value(v).clone()
        };
        assert_eq!(run(&DropoutSurrogate::new(&m, 0.0, 5).unwrap()), run(&m));
        let mut a = DropoutSurrogate::new(&m, 0.3, 5).unwrap();
        let mut b = DropoutSurrogate::new(&m, 0.3, 5).unwrap();
        let first = run(&a);
        assert_ne!(first, run(&m));
        a.next_iteration();
        b.next_iteration();
        assert_eq!(run(&a), run(&b));
        assert_ne!(run(&a), first);
        assert!(DropoutSurrogate::new(&m, 1.0, 0).is_err());
        assert!(DropoutSurrogate::new(&m, -0.1, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = EmbeddingModel::new("v", Role::Victim, 7, 3).unwrap();
        m.set_threshold(VerificationThreshold {
            threshold: 0.5,
            far: 0.01,
        });
        let back = EmbeddingModel::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.params().fingerprint(), m.params().fingerprint());
        assert_eq!(back.threshold(), m.threshold());
        assert_eq!(back.architecture(), m.architecture());
    }
}
