//! Procedural face dataset, the degradation operator, and pair lists.
//!
//! Each identity draws a fixed set of geometric and tonal traits (face oval,
//! hair line, eyes, brows, nose, mouth, shading). Variants of an identity
//! jitter pose, illumination and expression, and add sensor noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use restore_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationParams {
    /// Gaussian blur standard deviation in pixels; 0 disables blurring.
    pub blur_sigma: f64,
    /// Integer down/up-sampling factor.
    pub scale: usize,
    /// Standard deviation of additive Gaussian noise at low resolution.
    pub noise_sigma: f64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            scale: 4,
            noise_sigma: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub n_identities: usize,
    pub n_variants: usize,
    /// Variants `0..n_train_variants` of every identity form the train split.
    pub n_train_variants: usize,
    pub degradation: DegradationParams,
    pub n_genuine_pairs: usize,
    pub n_impostor_pairs: usize,
    pub n_attack_pairs: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n_identities: 16,
            n_variants: 24,
            n_train_variants: 16,
            degradation: DegradationParams::default(),
            n_genuine_pairs: 200,
            n_impostor_pairs: 400,
            n_attack_pairs: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub identity: usize,
    pub variant: usize,
    pub split: Split,
    pub hq: Tensor,
    pub degraded: Tensor,
    pub degradation_seed: u64,
}

/// Indices into [`Dataset::records`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
}

/// An attacker image (used degraded) and a victim image of another identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackPair {
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub params: DatasetParams,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub genuine_pairs: Vec<Pair>,
    pub impostor_pairs: Vec<Pair>,
    pub attack_pairs: Vec<AttackPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn record(&self, i: usize) -> &ImageRecord {
        &self.records[i]
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Traits fixed for an identity.
#[derive(Debug, Clone)]
struct Identity {
    face_cx: f64,
    face_cy: f64,
    face_rx: f64,
    face_ry: f64,
    skin: f64,
    background: f64,
    hair_level: f64,
    hair_tone: f64,
    eye_y: f64,
    eye_dx: f64,
    eye_rx: f64,
    eye_ry: f64,
    eye_tone: f64,
    brow_gap: f64,
    brow_tilt: f64,
    brow_tone: f64,
    nose_len: f64,
    nose_width: f64,
    mouth_y: f64,
    mouth_w: f64,
    mouth_curve: f64,
    mouth_tone: f64,
    beard: f64,
}

impl Identity {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        Self {
            face_cx: u(15.0, 17.0),
            face_cy: u(16.5, 18.0),
            face_rx: u(8.5, 11.5),
            face_ry: u(10.5, 13.5),
            skin: u(0.5, 0.85),
            background: u(0.05, 0.35),
            hair_level: u(-0.95, -0.55),
            hair_tone: u(0.02, 0.4),
            eye_y: u(-4.5, -1.5),
            eye_dx: u(3.2, 5.2),
            eye_rx: u(1.2, 2.4),
            eye_ry: u(0.8, 1.6),
            eye_tone: u(0.0, 0.25),
            brow_gap: u(1.8, 3.2),
            brow_tilt: u(-0.25, 0.25),
            brow_tone: u(0.05, 0.4),
            nose_len: u(2.0, 5.0),
            nose_width: u(0.8, 2.0),
            mouth_y: u(4.0, 7.0),
            mouth_w: u(2.5, 5.5),
            mouth_curve: u(-0.12, 0.12),
            mouth_tone: u(0.1, 0.4),
            beard: if u(0.0, 1.0) < 0.3 { u(0.15, 0.35) } else { 0.0 },
        }
    }
}

/// Per-image nuisance factors.
struct Jitter {
    dx: f64,
    dy: f64,
    gain: f64,
    offset: f64,
    light_slope: f64,
    expression: f64,
}

impl Jitter {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        Self {
            dx: u(-1.5, 1.5),
            dy: u(-1.5, 1.5),
            gain: u(0.85, 1.15),
            offset: u(-0.05, 0.05),
            light_slope: u(-0.1, 0.1),
            expression: u(-0.05, 0.05),
        }
    }
}

/// Anti-aliased coverage for a signed distance in pixels (negative inside).
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

fn ellipse_distance(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let q = ((x - cx) / rx).hypot((y - cy) / ry);
    (q - 1.0) * rx.min(ry)
}

fn blend(base: f64, tone: f64, alpha: f64) -> f64 {
    base * (1.0 - alpha) + tone * alpha
}

const PIXEL_NOISE: f64 = 0.01;

fn render<R: Rng>(id: &Identity, j: &Jitter, rng: &mut R) -> Tensor {
    let noise = Normal::new(0.0, PIXEL_NOISE).unwrap();
    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    let (cx, cy) = (id.face_cx + j.dx, id.face_cy + j.dy);
    for yi in 0..IMAGE_SIZE {
        for xi in 0..IMAGE_SIZE {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let mut v = id.background;
            let face_d = ellipse_distance(x, y, cx, cy, id.face_rx, id.face_ry);
            let face = coverage(face_d);
            // Shade toward the rim so the oval reads as a surface.
            let rim = ((x - cx) / id.face_rx).hypot((y - cy) / id.face_ry).min(1.0);
            v = blend(v, id.skin * (1.0 - 0.18 * rim * rim), face);

            // Hair covers the part of the head above a tilted line.
            let ny = (y - cy) / id.face_ry;
            let hair = coverage(face_d - 1.0) * coverage((ny - id.hair_level) * id.face_ry);
            v = blend(v, id.hair_tone, hair);

            if id.beard > 0.0 {
                let chin = coverage(face_d) * coverage((id.mouth_y - 1.0 - (y - cy)) * 1.5);
                v = blend(v, v - id.beard, chin);
            }

            for side in [-1.0, 1.0] {
                let ex = cx + side * id.eye_dx;
                let ey = cy + id.eye_y;
                let eye = coverage(ellipse_distance(x, y, ex, ey, id.eye_rx, id.eye_ry));
                v = blend(v, id.eye_tone, eye);
                let by = ey - id.brow_gap + side * id.brow_tilt * (x - ex);
                let brow = coverage((y - by).abs() - 0.5) * coverage((x - ex).abs() - id.eye_rx - 0.5);
                v = blend(v, id.brow_tone, brow * face);
            }

            let nose_top = cy + id.eye_y + 1.0;
            let nose = coverage((x - cx).abs() - id.nose_width * 0.5)
                * coverage((y - nose_top - id.nose_len * 0.5).abs() - id.nose_len * 0.5);
            v = blend(v, v * 0.8, nose);

            let curve = id.mouth_curve + j.expression;
            let dxm = x - cx;
            let my = cy + id.mouth_y - curve * dxm * dxm;
            let mouth = coverage((y - my).abs() - 0.6) * coverage(dxm.abs() - id.mouth_w);
            v = blend(v, id.mouth_tone, mouth);

            let light = 1.0 + j.light_slope * (x - 16.0) / 16.0;
            v = v * j.gain * light + j.offset + noise.sample(rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![1, IMAGE_SIZE, IMAGE_SIZE], data).expect("static image shape")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders over a `[C, H, W]` image.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; img.len()];
    let mut out = vec![0.0; img.len()];
    let src = img.data();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                        kv * src[base + y * w + xx]
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                        kv * tmp[base + yy * w + x]
                    })
                    .sum();
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

/// Blur, box-downsample by `scale`, add noise, nearest-upsample back and
/// clamp to `[0, 1]`. Deterministic in `seed`.
pub fn degrade(hq: &Tensor, params: &DegradationParams, seed: u64) -> Result<Tensor> {
    let shape = hq.shape();
    if shape.len() != 3
        || params.scale == 0
        || !shape[1].is_multiple_of(params.scale)
        || !shape[2].is_multiple_of(params.scale)
    {
        return Err(invalid(
            "degrade",
            format!("cannot downsample {shape:?} by {}", params.scale),
        ));
    }
    let (c, h, w, s) = (shape[0], shape[1], shape[2], params.scale);
    let blurred = gaussian_blur(hq, params.blur_sigma);
    let (lh, lw) = (h / s, w / s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut low = vec![0.0; c * lh * lw];
    for ch in 0..c {
        for y in 0..lh {
            for x in 0..lw {
                let mut acc = 0.0;
                for dy in 0..s {
                    for dx in 0..s {
                        acc += blurred.data()[ch * h * w + (y * s + dy) * w + x * s + dx];
                    }
                }
                low[ch * lh * lw + y * lw + x] = acc / (s * s) as f64;
            }
        }
    }
    if params.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, params.noise_sigma).map_err(|e| invalid("degrade", e.to_string()))?;
        low.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let mut out = vec![0.0; hq.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = low[ch * lh * lw + (y / s) * lw + x / s].clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::new(shape.to_vec(), out)?)
}

/// Mixes a base seed with two stream indices into an independent seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finaliser over the combined key.
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders `n_identities × n_variants` faces (hq and degraded).
pub fn generate_synthetic_faces(
    seed: u64,
    n_identities: usize,
    n_variants: usize,
    degradation: &DegradationParams,
) -> Result<Vec<ImageRecord>> {
    if n_identities < 2 || n_variants == 0 {
        return Err(invalid(
            "generate_synthetic_faces",
            format!("need at least 2 identities and 1 variant, got {n_identities} x {n_variants}"),
        ));
    }
    let mut records = Vec::with_capacity(n_identities * n_variants);
    for identity in 0..n_identities {
        let mut id_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, identity as u64, 0));
        let traits = Identity::sample(&mut id_rng);
        for variant in 0..n_variants {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, identity as u64, variant as u64 + 1));
            let jitter = Jitter::sample(&mut rng);
            let hq = render(&traits, &jitter, &mut rng);
            let degradation_seed = derive_seed(seed ^ 0xD3, identity as u64, variant as u64);
            let degraded = degrade(&hq, degradation, degradation_seed)?;
            records.push(ImageRecord {
                identity,
                variant,
                split: Split::Train,
                hq,
                degraded,
                degradation_seed,
            });
        }
    }
    Ok(records)
}

/// Generates the dataset, assigns splits and draws the pair lists.
pub fn build_dataset(seed: u64, params: &DatasetParams) -> Result<Dataset> {
    if params.n_train_variants == 0 || params.n_train_variants >= params.n_variants {
        return Err(invalid("build_dataset", "both splits need at least one variant"));
    }
    if params.n_variants - params.n_train_variants < 2 {
        return Err(invalid(
            "build_dataset",
            "test split needs two variants per identity for genuine pairs",
        ));
    }
    let mut records = generate_synthetic_faces(seed, params.n_identities, params.n_variants, &params.degradation)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, r) in records.iter_mut().enumerate() {
        if r.variant < params.n_train_variants {
            train.push(i);
        } else {
            r.split = Split::Test;
            test.push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xA77A, 0));
    let mut genuine: Vec<Pair> = Vec::new();
    let mut impostor: Vec<Pair> = Vec::new();
    for (k, &a) in test.iter().enumerate() {
        for &b in &test[k + 1..] {
            let pair = Pair { a, b };
            if records[a].identity == records[b].identity {
                genuine.push(pair);
            } else {
                impostor.push(pair);
            }
        }
    }
    genuine.shuffle(&mut rng);
    impostor.shuffle(&mut rng);
    genuine.truncate(params.n_genuine_pairs);
    impostor.truncate(params.n_impostor_pairs);

    let mut attack_pairs = Vec::with_capacity(params.n_attack_pairs);
    while attack_pairs.len() < params.n_attack_pairs {
        let source = test[rng.random_range(0..test.len())];
        let target = test[rng.random_range(0..test.len())];
        if records[source].identity != records[target].identity {
            attack_pairs.push(AttackPair { source, target });
        }
    }
    Ok(Dataset {
        records,
        manifest: DatasetManifest {
            seed,
            params: params.clone(),
            train,
            test,
            genuine_pairs: genuine,
            impostor_pairs: impostor,
            attack_pairs,
        },
    })
}

/// Mean absolute pixel difference.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let d = DegradationParams::default();
        let a = generate_synthetic_faces(3, 3, 4, &d).unwrap();
        let b = generate_synthetic_faces(3, 3, 4, &d).unwrap();
        assert_eq!(a, b);
        for r in &a {
            assert!(r
                .hq
                .data()
                .iter()
                .chain(r.degraded.data())
                .all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(r.degraded, degrade(&r.hq, &d, r.degradation_seed).unwrap());
        }
        assert!(generate_synthetic_faces(3, 1, 4, &d).is_err());
    }

    #[test]
    fn identities_are_separable_in_pixel_space() {
        let recs = generate_synthetic_faces(11, 8, 6, &DegradationParams::default()).unwrap();
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for (i, a) in recs.iter().enumerate() {
            for b in &recs[i + 1..] {
                let d = mean_abs_diff(&a.hq, &b.hq);
                if a.identity == b.identity {
                    intra += d;
                    ni += 1;
                } else {
                    inter += d;
                    nx += 1;
                }
            }
        }
        assert!(intra / (ni as f64) < inter / (nx as f64));
    }

    #[test]
    fn degradation_free_limit_on_constant() {
        let img = Tensor::full(&[1, 32, 32], 0.37);
        let p = DegradationParams {
            blur_sigma: 0.0,
            scale: 4,
            noise_sigma: 0.0,
        };
        let out = degrade(&img, &p, 1).unwrap();
        assert!(out.max_abs_diff(&img).unwrap() < 1e-15);
    }

    #[test]
    fn attack_pairs_are_cross_identity() {
        let ds = build_dataset(5, &DatasetParams::default()).unwrap();
        let m = &ds.manifest;
        assert_eq!(m.attack_pairs.len(), 50);
        for p in &m.attack_pairs {
            assert_ne!(ds.record(p.source).identity, ds.record(p.target).identity);
            assert_eq!(ds.record(p.source).split, Split::Test);
        }
        for p in &m.impostor_pairs {
            assert_ne!(ds.record(p.a).identity, ds.record(p.b).identity);
        }
        for p in &m.genuine_pairs {
            assert_eq!(ds.record(p.a).identity, ds.record(p.b).identity);
        }
        assert!(m.train.iter().all(|i| !m.test.contains(i)));
    }
}
