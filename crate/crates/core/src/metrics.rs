//! Image quality (PSNR, SSIM) and attack-success-rate reporting.

use std::fmt::Write as _;

use restore_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Returned by [`psnr`] for identical images and used as an upper cap.
pub const PSNR_SENTINEL: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Row labels of the attack tables, in display order.
pub const ATTACK_ROWS: [&str; 4] = ["FIM", "FIM+AdvRestore", "DFANet", "DFANet+AdvRestore"];
pub const BENIGN_ROW: &str = "Benign";

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(
            op,
            format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_SENTINEL`].
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    check_same_shape("psnr", a, b)?;
    let mse = a.sub(b)?.norm_sq() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_SENTINEL))
}

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn ssim_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM over all valid 11×11 window positions, averaged
/// over channels. Images are `[C, H, W]` or `[H, W]` with dynamic range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("ssim", a, b)?;
    let s = a.shape();
    let (c, h, w) = match *s {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(invalid("ssim", format!("expected [C, H, W], got {s:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let k = ssim_window();
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..][..h * w];
        let pb = &b.data()[ch * h * w..][..h * w];
        let sq = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let e_aa = filter_valid(&sq(pa, pa), h, w, &k);
        let e_bb = filter_valid(&sq(pb, pb), h, w, &k);
        let e_ab = filter_valid(&sq(pa, pb), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Per-image SSIM/PSNR of a set of images against matching references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub anchor: String,
    pub ssim: Vec<f64>,
    pub psnr: Vec<f64>,
}

impl QualityReport {
    pub fn compute(anchor: impl Into<String>, images: &[Tensor], references: &[Tensor]) -> Result<Self> {
        if images.len() != references.len() || images.is_empty() {
            return Err(invalid("quality_report", "need equally many images and references"));
        }
        let mut ssim_v = Vec::with_capacity(images.len());
        let mut psnr_v = Vec::with_capacity(images.len());
        for (x, r) in images.iter().zip(references) {
            ssim_v.push(ssim(x, r)?);
            psnr_v.push(psnr(x, r, 1.0)?);
        }
        Ok(Self {
            anchor: anchor.into(),
            ssim: ssim_v,
            psnr: psnr_v,
        })
    }

    pub fn mean_ssim(&self) -> f64 {
        self.ssim.iter().sum::<f64>() / self.ssim.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len() as f64
    }
}

/// Success counts of one attack against one victim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrReport {
    pub victim: String,
    pub threshold: f64,
    pub successes: usize,
    pub total: usize,
}

impl AsrReport {
    /// Counts pairs whose embedding distance is strictly below `threshold`.
    pub fn from_distances(victim: impl Into<String>, distances: &[f64], threshold: f64) -> Result<Self> {
        if distances.is_empty() {
            return Err(invalid("attack_success_rate", "no attack results"));
        }
        Ok(Self {
            victim: victim.into(),
            threshold,
            successes: distances.iter().filter(|&&d| d < threshold).count(),
            total: distances.len(),
        })
    }

    /// Percentage in `[0, 100]`.
    pub fn asr(&self) -> f64 {
        100.0 * self.successes as f64 / self.total as f64
    }

    /// Pools two reports for the same victim and threshold.
    pub fn merge(&self, other: &Self) -> Self {
        Self {
            victim: self.victim.clone(),
            threshold: self.threshold,
            successes: self.successes + other.successes,
            total: self.total + other.total,
        }
    }
}

/// One quality row: outputs measured against the attacker image and
/// against its high-quality ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub label: String,
    pub vs_source: QualityReport,
    pub vs_hq: QualityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrTable {
    pub title: String,
    pub victims: Vec<String>,
    pub rows: Vec<(String, Vec<AsrReport>)>,
}

/// One point of the success-rate-versus-iteration curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub asr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationCurve {
    pub labels: Vec<String>,
    pub points: Vec<CurvePoint>,
}

/// Plain-text report with the quality table, the success-rate tables and
/// the success-rate-per-iteration data.
pub fn emit_report(header: &str, quality: &[QualityRow], asr: &[AsrTable], curve: Option<&IterationCurve>) -> String {
    let mut s = String::new();
    s.push_str(header);
    if !header.ends_with('\n') {
        s.push('\n');
    }
    s.push('\n');
    s.push_str("Visual quality (mean over attack pairs)\n");
    let _ = writeln!(
        s,
        "{:<20} | {:>12} | {:>12} | {:>12} | {:>12}",
        "Image", "SSIM(x^s)", "PSNR(x^s)", "SSIM(x^hq)", "PSNR(x^hq)"
    );
    let _ = writeln!(s, "{}", "-".repeat(20 + 4 * 15));
    for row in quality {
        let _ = writeln!(
            s,
            "{:<20} | {:>12.3} | {:>12.1} | {:>12.3} | {:>12.1}",
            row.label,
            row.vs_source.mean_ssim(),
            row.vs_source.mean_psnr(),
            row.vs_hq.mean_ssim(),
            row.vs_hq.mean_psnr()
        );
    }
    for table in asr {
        s.push('\n');
        let _ = writeln!(s, "{}", table.title);
        let mut head = format!("{:<20}", "Attacks");
        for v in &table.victims {
            let _ = write!(head, " | {v:>14}");
        }
        let _ = writeln!(s, "{head}");
        let _ = writeln!(s, "{}", "-".repeat(head.len()));
        for (label, reports) in &table.rows {
            let mut line = format!("{label:<20}");
            for r in reports {
                let _ = write!(line, " | {:>14.1}", r.asr());
            }
            let _ = writeln!(s, "{line}");
        }
    }
    if let Some(curve) = curve {
        s.push('\n');
        s.push_str("White-box success rate (%) by iteration\n");
        let mut head = format!("{:>9}", "iteration");
        for l in &curve.labels {
            let _ = write!(head, " | {l:>18}");
        }
        let _ = writeln!(s, "{head}");
        for p in &curve.points {
            let mut line = format!("{:>9}", p.iteration);
            for v in &p.asr {
                let _ = write!(line, " | {v:>18.1}");
            }
            let _ = writeln!(s, "{line}");
        }
    }
    s
}
