//! Recovery-quality metrics (MSE, PSNR, SSIM, pluggable perceptual distance),
//! Hungarian batch alignment, the training-wide recovery consistency index,
//! and compute-cost accounting.

pub mod hungarian;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorData};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// PSNR of identical images is +inf; serialized outputs cap it here.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn mse(a: &TensorData, b: &TensorData) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Structure(format!(
            "mse shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.numel() as f64;
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

pub fn psnr(a: &TensorData, b: &TensorData, range: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * ((range * range) / m).log10())
}

/// Cap the +inf sentinel for file output.
pub fn psnr_for_output(psnr_db: f64) -> f64 {
    psnr_db.min(PSNR_CAP_DB)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Separable Gaussian filter, valid positions only: [H,W] -> [H-k+1, W-k+1].
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &wv) in win.iter().enumerate() {
                acc += img[r * w + c + i] * wv;
            }
            tmp[r * ow + c] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &wv) in win.iter().enumerate() {
                acc += tmp[(r + i) * ow + c] * wv;
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

/// Structural similarity with a Gaussian window (11x11, sigma 1.5, K1 = 0.01,
/// K2 = 0.03, range 1.0), computed per channel then averaged. Accepts [C,H,W]
/// or [B,C,H,W]; the window shrinks to fit small images.
pub fn ssim(a: &TensorData, b: &TensorData) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Structure(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (planes, h, w) = match a.shape() {
        [c, h, w] => (*c, *h, *w),
        [n, c, h, w] => (n * c, *h, *w),
        s => {
            return Err(Error::Structure(format!(
                "ssim expects [C,H,W] or [B,C,H,W], got {s:?}"
            )))
        }
    };
    let mut k = 11usize.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    let win = gaussian_window(k, 1.5);
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    for p in 0..planes {
        let x = &a.values()[p * h * w..(p + 1) * h * w];
        let y = &b.values()[p * h * w..(p + 1) * h * w];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
        let mu_x = filter_valid(x, h, w, &win);
        let mu_y = filter_valid(y, h, w, &win);
        let e_xx = filter_valid(&xx, h, w, &win);
        let e_yy = filter_valid(&yy, h, w, &win);
        let e_xy = filter_valid(&xy, h, w, &win);
        let mut acc = 0.0;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cxy = e_xy[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / planes as f64)
}

// ---- perceptual distance -----------------------------------------------------

/// Pluggable perceptual distance over single images [C,H,W]; lower is more
/// similar.
pub trait Perceptual: Sync {
    fn distance(&self, a: &TensorData, b: &TensorData) -> Result<f64>;
    /// Column label for reports; implementations backed by a proxy should say
    /// so to avoid being misread as a reference metric.
    fn label(&self) -> &'static str;
}

pub const DEFAULT_PERCEPTUAL_SEED: u64 = 0x1ab5_cafe;

/// Default perceptual proxy: l2 distance between unit-normalized feature maps
/// of a fixed, seed-frozen 3-layer random convolutional extractor, averaged
/// over layers.
pub struct RandomConvPerceptual {
    weights: Vec<TensorData>, // per layer [C_out, C_in, 3, 3]
    strides: Vec<usize>,
}

impl RandomConvPerceptual {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chans = [in_channels, 12, 16, 16];
        let strides = vec![1, 2, 2];
        let mut weights = Vec::new();
        for l in 0..3 {
            let (ci, co) = (chans[l], chans[l + 1]);
            let fan_in = (ci * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let data: Vec<f64> = (0..co * ci * 9)
                .map(|_| {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect();
            weights.push(TensorData::new_unchecked(vec![co, ci, 3, 3], data));
        }
        Self { weights, strides }
    }

    fn features(&self, img: &TensorData) -> Result<Vec<Vec<f64>>> {
        let [c, h, w] = img.shape() else {
            return Err(Error::Structure(format!(
                "perceptual distance expects [C,H,W], got {:?}",
                img.shape()
            )));
        };
        let mut x = Tensor::from_data(TensorData::new_unchecked(
            vec![1, *c, *h, *w],
            img.values().to_vec(),
        ));
        let mut maps = Vec::new();
        for (wt, &s) in self.weights.iter().zip(&self.strides) {
            x = x.conv2d(&Tensor::from_data(wt.clone()), s, 1)?.relu()?;
            let norm = x.values().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            maps.push(x.values().iter().map(|v| v / norm).collect());
        }
        Ok(maps)
    }
}

impl Perceptual for RandomConvPerceptual {
    fn distance(&self, a: &TensorData, b: &TensorData) -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::Structure(format!(
                "perceptual shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total = 0.0;
        for (ma, mb) in fa.iter().zip(&fb) {
            total += ma
                .iter()
                .zip(mb)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
        Ok(total / fa.len() as f64)
    }

    fn label(&self) -> &'static str {
        "perceptual (proxy)"
    }
}

// ---- alignment -----------------------------------------------------------

/// Which pairwise metric fills the Hungarian cost matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignCost {
    Perceptual,
    Mse,
    /// 1 - SSIM, so that lower stays better.
    Ssim,
}

pub fn image_slice(batch: &TensorData, i: usize) -> Result<TensorData> {
    let [_, c, h, w] = batch.shape() else {
        return Err(Error::Structure(format!(
            "expected [B,C,H,W], got {:?}",
            batch.shape()
        )));
    };
    let img = c * h * w;
    Ok(TensorData::new_unchecked(
        vec![*c, *h, *w],
        batch.values()[i * img..(i + 1) * img].to_vec(),
    ))
}

#[derive(Debug, Clone)]
pub struct Alignment {
    /// `permutation[i]` is the recovered index paired with truth image `i`.
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

/// Optimal pairing of recovered images to ground truths (batch order is not
/// recoverable from gradients, so metrics are computed on aligned pairs).
pub fn hungarian_align(
    recovered: &TensorData,
    truth: &TensorData,
    cost: &dyn Fn(&TensorData, &TensorData) -> Result<f64>,
) -> Result<Alignment> {
    if recovered.shape() != truth.shape() {
        return Err(Error::Structure(format!(
            "alignment shape mismatch: {:?} vs {:?}",
            recovered.shape(),
            truth.shape()
        )));
    }
    let b = truth.shape()[0];
    if b > 64 {
        return Err(Error::Structure(format!("batch {b} exceeds alignment cap 64")));
    }
    let mut matrix = vec![vec![0.0; b]; b];
    for (t, row) in matrix.iter_mut().enumerate() {
        let truth_img = image_slice(truth, t)?;
        for (r, cell) in row.iter_mut().enumerate() {
            *cell = cost(&image_slice(recovered, r)?, &truth_img)?;
        }
    }
    let (assignment, total_cost) = hungarian::solve(&matrix)?;
    Ok(Alignment {
        permutation: assignment,
        total_cost,
    })
}

/// Per-image and batch-mean metrics computed on aligned pairs.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub permutation: Vec<usize>,
    pub per_image_mse: Vec<f64>,
    pub per_image_psnr: Vec<f64>,
    pub per_image_ssim: Vec<f64>,
    pub per_image_perceptual: Vec<f64>,
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

pub fn score_aligned(
    recovered: &TensorData,
    truth: &TensorData,
    align_cost: AlignCost,
    perceptual: &dyn Perceptual,
) -> Result<MetricReport> {
    let cost_fn: Box<dyn Fn(&TensorData, &TensorData) -> Result<f64>> = match align_cost {
        AlignCost::Perceptual => Box::new(|a: &TensorData, b: &TensorData| perceptual.distance(a, b)),
        AlignCost::Mse => Box::new(|a: &TensorData, b: &TensorData| mse(a, b)),
        AlignCost::Ssim => Box::new(|a: &TensorData, b: &TensorData| Ok(1.0 - ssim(a, b)?)),
    };
    let alignment = hungarian_align(recovered, truth, &cost_fn)?;
    let b = truth.shape()[0];
    let mut report = MetricReport {
        permutation: alignment.permutation.clone(),
        per_image_mse: Vec::with_capacity(b),
        per_image_psnr: Vec::with_capacity(b),
        per_image_ssim: Vec::with_capacity(b),
        per_image_perceptual: Vec::with_capacity(b),
        mse: 0.0,
        psnr_db: 0.0,
        ssim: 0.0,
        perceptual: 0.0,
    };
    for t in 0..b {
        let truth_img = image_slice(truth, t)?;
        let rec_img = image_slice(recovered, alignment.permutation[t])?;
        report.per_image_mse.push(mse(&rec_img, &truth_img)?);
        report.per_image_psnr.push(psnr(&rec_img, &truth_img, 1.0)?);
        report.per_image_ssim.push(ssim(&rec_img, &truth_img)?);
        report
            .per_image_perceptual
            .push(perceptual.distance(&rec_img, &truth_img)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    report.mse = mean(&report.per_image_mse);
    report.psnr_db = mean(&report.per_image_psnr);
    report.ssim = mean(&report.per_image_ssim);
    report.perceptual = mean(&report.per_image_perceptual);
    Ok(report)
}

// ---- recovery consistency index -------------------------------------------

/// Time-indexed recovery scores across training, one point per attack
/// timestamp, evenly spaced.
#[derive(Debug, Clone)]
pub struct RecoveryCurve {
    pub points: Vec<(u64, f64)>,
    pub metric: String,
}

/// Normalized trapezoidal area under the recovery curve:
/// (dI / I_N) * ((R(I_0) + R(I_N)) / 2 + sum of interior points).
pub fn rci(curve: &RecoveryCurve) -> Result<f64> {
    let pts = &curve.points;
    if pts.len() < 2 {
        return Err(Error::Config(format!(
            "recovery curve needs at least 2 points, got {}",
            pts.len()
        )));
    }
    let dt = pts[1].0 as i128 - pts[0].0 as i128;
    if dt <= 0 {
        return Err(Error::Config("curve timestamps must be increasing".into()));
    }
    for w in pts.windows(2) {
        if w[1].0 as i128 - w[0].0 as i128 != dt {
            return Err(Error::Config(format!(
                "uneven curve spacing: {} then {}",
                dt,
                w[1].0 as i128 - w[0].0 as i128
            )));
        }
    }
    let i_n = pts.last().unwrap().0 as f64;
    let ends = (pts[0].1 + pts.last().unwrap().1) / 2.0;
    let interior: f64 = pts[1..pts.len() - 1].iter().map(|(_, r)| r).sum();
    Ok(dt as f64 / i_n * (ends + interior))
}

// ---- compute cost -----------------------------------------------------------

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CostReport {
    pub wall_seconds: f64,
    /// Growth of the process resident-set high-water mark across the scope;
    /// `None` when the platform does not expose it.
    pub peak_memory_bytes: Option<u64>,
}

/// Peak resident-set size of this process in bytes.
pub fn peak_rss_bytes() -> Option<u64> {
    #[cfg(unix)]
    {
        let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
        if unsafe { libc::getrusage(libc::RUSAGE_SELF, &mut usage) } == 0 {
            // ru_maxrss is kilobytes on Linux.
            return Some(usage.ru_maxrss as u64 * 1024);
        }
    }
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: u64 = rest.trim().trim_end_matches("kB").trim().parse().ok()?;
            return Some(kb * 1024);
        }
    }
    None
}

/// Current resident-set size of this process in bytes.
pub fn current_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmRSS:") {
            let kb: u64 = rest.trim().trim_end_matches("kB").trim().parse().ok()?;
            return Some(kb * 1024);
        }
    }
    None
}

/// Run `f`, reporting wall time and the peak-resident-memory delta it caused.
pub fn compute_cost_probe<R>(f: impl FnOnce() -> R) -> (R, CostReport) {
    let before = peak_rss_bytes();
    let start = Instant::now();
    let out = f();
    let wall_seconds = start.elapsed().as_secs_f64();
    let peak_memory_bytes = match (before, peak_rss_bytes()) {
        (Some(b), Some(a)) => Some(a.saturating_sub(b)),
        _ => None,
    };
    (out, CostReport {
        wall_seconds,
        peak_memory_bytes,
    })
}
