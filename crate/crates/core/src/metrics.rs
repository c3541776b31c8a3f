//! Reconstruction and distribution metrics.
//!
//! Images are `[B, C, H, W]` tensors in `[-1, 1]`; pixel metrics rescale to `[0, 1]`.
//! The perceptual distance and the toy-FID features both come from a small
//! convolutional pyramid with fixed seed-derived weights.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{randn, seeded, to_f64_vec};

/// Channel widths of the extractor pyramid after the RGB input.
const PYRAMID_CHANNELS: [usize; 3] = [8, 16, 32];
const FEATURE_EPS: f64 = 1e-6;

/// Deterministic multi-scale conv feature pyramid used as a perceptual network.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    seed: u64,
    in_channels: usize,
    kernels: Vec<(Tensor, Tensor)>,
    fingerprint: String,
}

impl PerceptualExtractor {
    pub fn new(seed: u64, in_channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = seeded(seed ^ 0x5eed_f00d);
        let mut kernels = Vec::new();
        let mut c_in = in_channels;
        for &c_out in &PYRAMID_CHANNELS {
            let std = (2.0 / (9 * c_in) as f64).sqrt();
            let w = (randn(&mut rng, &[c_out, c_in, 3, 3], DType::F64, device)? * std)?.to_dtype(dtype)?;
            let b = (randn(&mut rng, &[1, c_out, 1, 1], DType::F64, device)? * 0.1)?.to_dtype(dtype)?;
            kernels.push((w, b));
            c_in = c_out;
        }
        let mut h = Sha256::new();
        h.update(format!("pyramid{:?}/in{}/seed{}", PYRAMID_CHANNELS, in_channels, seed).as_bytes());
        let fingerprint = hex::encode(&h.finalize()[..8]);
        Ok(PerceptualExtractor { seed, in_channels, kernels, fingerprint })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Short hash of architecture and seed; labels toy-FID numbers.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!("extractor expects {} channels, got {c}", self.in_channels)));
        }
        Ok(())
    }

    /// Activations of every pyramid level, `[B, C_l, H_l, W_l]`.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check(x)?;
        let mut out = Vec::with_capacity(self.kernels.len());
        let mut h = x.clone();
        for (i, (w, b)) in self.kernels.iter().enumerate() {
            if i > 0 && h.dim(2)? >= 2 && h.dim(3)? >= 2 {
                h = h.avg_pool2d(2)?;
            }
            h = h.conv2d(&w.to_dtype(x.dtype())?, 1, 1, 1, 1)?.broadcast_add(&b.to_dtype(x.dtype())?)?.silu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Spatially pooled activations of every level, `[B, 56]`.
    pub fn pooled_features(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.features(x)?;
        let pooled = feats
            .iter()
            .map(|f| Ok(f.mean(3)?.mean(2)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&pooled, 1)?)
    }

    /// Per-image distance `[B]`: over levels, the spatial mean of the squared difference
    /// of channel-normalized features, summed over channels.
    pub fn distance_per_image(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        if x.dims() != y.dims() {
            return Err(Error::shape(format!("perceptual inputs {:?} vs {:?}", x.dims(), y.dims())));
        }
        let fx = self.features(x)?;
        let fy = self.features(y)?;
        let mut total: Option<Tensor> = None;
        for (a, b) in fx.iter().zip(&fy) {
            let d = (normalize_channels(a)? - normalize_channels(b)?)?
                .sqr()?
                .sum(1)?
                .mean(2)?
                .mean(1)?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        Ok(total.expect("pyramid has levels"))
    }

    /// Batch-mean perceptual distance, differentiable in both arguments.
    pub fn distance(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        Ok(self.distance_per_image(x, y)?.mean_all()?)
    }
}

fn normalize_channels(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + FEATURE_EPS)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

/// Free-function form of [`PerceptualExtractor::distance`].
pub fn perceptual_distance(extractor: &PerceptualExtractor, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    extractor.distance(x, y)
}

fn to_unit(v: f64) -> f64 {
    (v + 1.0) / 2.0
}

/// PSNR in dB of one image pair in `[-1, 1]` (peak 1 after rescaling). Identical inputs give `+inf`.
pub fn psnr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape(format!("psnr inputs of length {} and {}", x.len(), y.len())));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (to_unit(*a) - to_unit(*b)).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of one image `[C, H, W]` pair in `[-1, 1]`, averaged over channels.
///
/// 11x11 Gaussian window (σ = 1.5) over valid positions, K1 = 0.01, K2 = 0.03, range 1.
pub fn ssim(x: &[f64], y: &[f64], channels: usize, height: usize, width: usize) -> Result<f64> {
    if x.len() != y.len() || x.len() != channels * height * width {
        return Err(Error::shape("ssim inputs disagree with [C, H, W]".to_string()));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {height}x{width}"
        )));
    }
    let g = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (oh, ow) = (height - SSIM_WINDOW + 1, width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..channels {
        let base = c * height * width;
        let px = |i: usize, j: usize| to_unit(x[base + i * width + j]);
        let py = |i: usize, j: usize| to_unit(y[base + i * width + j]);
        let mut acc = 0.0;
        for i in 0..oh {
            for j in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (a, ga) in g.iter().enumerate() {
                    for (b, gb) in g.iter().enumerate() {
                        let wgt = ga * gb;
                        let (u, v) = (px(i + a, j + b), py(i + a, j + b));
                        mx += wgt * u;
                        my += wgt * v;
                        sxx += wgt * u * u;
                        syy += wgt * v * v;
                        sxy += wgt * u * v;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / channels as f64)
}

/// Per-image PSNR and SSIM of two image batches.
pub fn pixel_metrics(x: &Tensor, y: &Tensor) -> Result<Vec<(f64, f64)>> {
    if x.dims() != y.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.dims(), y.dims())));
    }
    let (b, c, h, w) = x.dims4()?;
    let xs = to_f64_vec(x)?;
    let ys = to_f64_vec(y)?;
    let n = c * h * w;
    (0..b)
        .map(|i| {
            let (a, bb) = (&xs[i * n..(i + 1) * n], &ys[i * n..(i + 1) * n]);
            let s = if h >= SSIM_WINDOW && w >= SSIM_WINDOW { ssim(a, bb, c, h, w)? } else { f64::NAN };
            Ok((psnr(a, bb)?, s))
        })
        .collect()
}

/// Mean vector and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

const STATS_MAGIC: &[u8; 4] = b"FMFS";

impl FeatureStats {
    /// Statistics of `rows` (each a feature vector); needs at least two rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::invalid(format!("feature stats need >= 2 samples, got {}", rows.len())));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("feature rows of unequal length".to_string()));
        }
        let n = rows.len();
        let mut mean = DVector::zeros(d);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(FeatureStats { mean, cov, count: n })
    }

    pub fn from_tensor(features: &Tensor) -> Result<Self> {
        let (n, d) = features.dims2()?;
        let v = to_f64_vec(features)?;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| v[i * d..(i + 1) * d].to_vec()).collect();
        Self::from_rows(&rows)
    }

    /// Exact combination of two shards' statistics.
    pub fn merge(&self, other: &FeatureStats) -> Result<FeatureStats> {
        if self.mean.len() != other.mean.len() {
            return Err(Error::shape("merging stats of different dimension".to_string()));
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        let mean = &self.mean + &delta * (nb / n);
        let scatter = &self.cov * (na - 1.0) + &other.cov * (nb - 1.0) + (&delta * delta.transpose()) * (na * nb / n);
        Ok(FeatureStats { mean, cov: scatter / (n - 1.0), count: self.count + other.count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Binary sidecar: magic, key, count, dim, then mean and covariance as LE f64.
    pub fn write_to<W: Write>(&self, key: &str, mut w: W) -> Result<()> {
        w.write_all(STATS_MAGIC)?;
        w.write_all(&(key.len() as u32).to_le_bytes())?;
        w.write_all(key.as_bytes())?;
        w.write_all(&(self.count as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for v in self.mean.iter().chain(self.cov.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a sidecar; returns `None` if it was written under a different key.
    pub fn read_from<R: Read>(expected_key: &str, mut r: R) -> Result<Option<Self>> {
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        if &buf4 != STATS_MAGIC {
            return Err(Error::invalid("not a feature-stats file"));
        }
        r.read_exact(&mut buf4)?;
        let mut key = vec![0u8; u32::from_le_bytes(buf4) as usize];
        r.read_exact(&mut key)?;
        if key != expected_key.as_bytes() {
            return Ok(None);
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let count = u64::from_le_bytes(buf8) as usize;
        r.read_exact(&mut buf8)?;
        let d = u64::from_le_bytes(buf8) as usize;
        let mut vals = Vec::with_capacity(d + d * d);
        for _ in 0..d + d * d {
            r.read_exact(&mut buf8)?;
            vals.push(f64::from_le_bytes(buf8));
        }
        Ok(Some(FeatureStats {
            mean: DVector::from_column_slice(&vals[..d]),
            cov: DMatrix::from_column_slice(d, d, &vals[d..]),
            count,
        }))
    }

    /// Loads cached stats under `key`, or computes and caches them.
    pub fn cached(path: &Path, key: &str, compute: impl FnOnce() -> Result<Self>) -> Result<Self> {
        if let Ok(f) = std::fs::File::open(path) {
            if let Ok(Some(s)) = Self::read_from(key, std::io::BufReader::new(f)) {
                return Ok(s);
            }
        }
        let s = compute()?;
        s.write_to(key, std::io::BufWriter::new(std::fs::File::create(path)?))?;
        Ok(s)
    }
}

/// Tolerance below zero for covariance eigenvalues.
pub const PSD_TOLERANCE: f64 = 1e-8;

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(min) = eig.eigenvalues.iter().cloned().reduce(f64::min) {
        if min < -PSD_TOLERANCE {
            return Err(Error::invalid(format!("{what} is not PSD (eigenvalue {min})")));
        }
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `||μ_a - μ_b||^2 + tr(Σ_a + Σ_b - 2 (Σ_a Σ_b)^{1/2})`.
///
/// The cross term uses `tr((A^{1/2} B A^{1/2})^{1/2})`, which equals the trace of
/// `(Σ_a Σ_b)^{1/2}` and stays symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    let ra = psd_sqrt(&a.cov, "first covariance")?;
    psd_sqrt(&b.cov, "second covariance")?;
    let inner = &ra * &b.cov * &ra;
    let cross = psd_sqrt(&inner, "cross product")?.trace();
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Squared distance from each point to its k-th nearest neighbour in the same set.
fn knn_radii(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| sq_dist(p, q))
                .collect();
            d.sort_by(|a, b| a.total_cmp(b));
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &[Vec<f64>], radii: &[f64], queries: &[Vec<f64>]) -> f64 {
    let inside = queries
        .iter()
        .filter(|q| manifold.iter().zip(radii).any(|(m, r)| sq_dist(q, m) <= *r))
        .count();
    inside as f64 / queries.len() as f64
}

/// k-NN manifold precision and recall of `fake` against `real`.
pub fn precision_recall(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    if k == 0 || real.len() < k + 1 || fake.len() < k + 1 {
        return Err(Error::invalid(format!(
            "precision/recall needs k >= 1 and at least k+1 points per set (k={k}, real={}, fake={})",
            real.len(),
            fake.len()
        )));
    }
    let d = real[0].len();
    if real.iter().chain(fake).any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("degenerate feature set (ragged or non-finite)"));
    }
    let precision = coverage(real, &knn_radii(real, k), fake);
    let recall = coverage(fake, &knn_radii(fake, k), real);
    Ok((precision, recall))
}

/// One per-image row of a [`MetricReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

/// Per-image and aggregate reconstruction metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub toy_fid: f64,
    pub extractor: String,
}

impl MetricReport {
    /// Computes every metric for originals `x` and reconstructions `y`.
    pub fn compute(extractor: &PerceptualExtractor, x: &Tensor, y: &Tensor) -> Result<Self> {
        let pix = pixel_metrics(x, y)?;
        let perc = to_f64_vec(&extractor.distance_per_image(x, y)?)?;
        let images = pix
            .iter()
            .zip(perc)
            .enumerate()
            .map(|(index, (&(psnr, ssim), perceptual))| ImageMetrics { index, psnr, ssim, perceptual })
            .collect();
        let toy_fid = if x.dim(0)? >= 2 {
            let a = FeatureStats::from_tensor(&extractor.pooled_features(x)?)?;
            let b = FeatureStats::from_tensor(&extractor.pooled_features(y)?)?;
            frechet_distance(&a, &b)?
        } else {
            f64::NAN
        };
        Ok(MetricReport { images, toy_fid, extractor: extractor.fingerprint().to_string() })
    }

    fn mean_of(&self, f: impl Fn(&ImageMetrics) -> f64) -> f64 {
        self.images.iter().map(f).sum::<f64>() / self.images.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean_of(|m| m.psnr)
    }
    pub fn mean_ssim(&self) -> f64 {
        self.mean_of(|m| m.ssim)
    }
    pub fn mean_perceptual(&self) -> f64 {
        self.mean_of(|m| m.perceptual)
    }

    /// CSV with one row per image and a final `mean` row carrying toy-FID.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["image", "psnr", "ssim", "perceptual", "toy_fid", "extractor"])?;
        for m in &self.images {
            out.write_record([
                m.index.to_string(),
                fmt_metric(m.psnr),
                fmt_metric(m.ssim),
                fmt_metric(m.perceptual),
                String::new(),
                String::new(),
            ])?;
        }
        out.write_record([
            "mean".to_string(),
            fmt_metric(self.mean_psnr()),
            fmt_metric(self.mean_ssim()),
            fmt_metric(self.mean_perceptual()),
            fmt_metric(self.toy_fid),
            self.extractor.clone(),
        ])?;
        out.flush()?;
        Ok(())
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr(&[0.1, 0.2], &[0.1, 0.2]).unwrap(), f64::INFINITY);
        // [0,1]-scale MSE of 0.01 is a difference of 0.1, i.e. 0.2 in [-1,1] units.
        let p = psnr(&[0.0; 4], &[0.2; 4]).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
        let p = psnr(&[-1.0; 4], &[1.0; 4]).unwrap();
        assert!(p.abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_symmetry_and_small_reject() {
        let mut rng = seeded(3);
        let x = to_f64_vec(&randn(&mut rng, &[3 * 16 * 16], DType::F64, &Device::Cpu).unwrap().tanh().unwrap()).unwrap();
        let y = to_f64_vec(&randn(&mut rng, &[3 * 16 * 16], DType::F64, &Device::Cpu).unwrap().tanh().unwrap()).unwrap();
        assert!((ssim(&x, &x, 3, 16, 16).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&x, &y, 3, 16, 16).unwrap() - ssim(&y, &x, 3, 16, 16).unwrap()).abs() < 1e-12);
        assert!(ssim(&x[..3 * 64], &y[..3 * 64], 3, 8, 8).is_err());
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // 0.2 and 0.8 on the [0, 1] scale.
        let x = vec![-0.6; 16 * 16];
        let y = vec![0.6; 16 * 16];
        let (c1, c2) = (1e-4, 9e-4);
        let expect = (2.0 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1) * (c2 / c2);
        let s = ssim(&x, &y, 1, 16, 16).unwrap();
        assert!((s - expect).abs() < 1e-12, "{s} vs {expect}");
    }

    #[test]
    fn perceptual_axioms() {
        let dev = Device::Cpu;
        let ex = PerceptualExtractor::new(1, 3, DType::F64, &dev).unwrap();
        let mut rng = seeded(5);
        let x = randn(&mut rng, &[2, 3, 8, 8], DType::F64, &dev).unwrap().tanh().unwrap();
        let y = randn(&mut rng, &[2, 3, 8, 8], DType::F64, &dev).unwrap().tanh().unwrap();
        let dxx = crate::nn::scalar_f64(&ex.distance(&x, &x).unwrap()).unwrap();
        let dxy = crate::nn::scalar_f64(&ex.distance(&x, &y).unwrap()).unwrap();
        let dyx = crate::nn::scalar_f64(&ex.distance(&y, &x).unwrap()).unwrap();
        assert_eq!(dxx, 0.0);
        assert!(dxy > 0.0);
        assert_eq!(dxy, dyx);
        let other = PerceptualExtractor::new(2, 3, DType::F64, &dev).unwrap();
        assert_ne!(ex.fingerprint(), other.fingerprint());
    }

    #[test]
    fn perceptual_is_differentiable() {
        let dev = Device::Cpu;
        let ex = PerceptualExtractor::new(1, 3, DType::F64, &dev).unwrap();
        let mut rng = seeded(5);
        let x = randn(&mut rng, &[1, 3, 8, 8], DType::F64, &dev).unwrap();
        let y = Var::from_tensor(&randn(&mut rng, &[1, 3, 8, 8], DType::F64, &dev).unwrap()).unwrap();
        let g = ex.distance(&x, y.as_tensor()).unwrap().backward().unwrap();
        assert!(g.get(y.as_tensor()).is_some());
    }

    #[test]
    fn frechet_closed_forms() {
        let a = FeatureStats { mean: DVector::from_vec(vec![0.0]), cov: DMatrix::from_vec(1, 1, vec![1.0]), count: 10 };
        let b = FeatureStats { mean: DVector::from_vec(vec![1.0]), ..a.clone() };
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-12);
        let bad = FeatureStats { cov: DMatrix::from_vec(1, 1, vec![-1.0]), ..a.clone() };
        assert!(frechet_distance(&a, &bad).is_err());
        let wide = FeatureStats { mean: DVector::zeros(2), cov: DMatrix::identity(2, 2), count: 3 };
        assert!(frechet_distance(&a, &wide).is_err());
    }

    #[test]
    fn stats_merge_is_exact() {
        let rows: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64, (i * i) as f64 * 0.1, (i % 3) as f64]).collect();
        let all = FeatureStats::from_rows(&rows).unwrap();
        let merged = FeatureStats::from_rows(&rows[..4]).unwrap().merge(&FeatureStats::from_rows(&rows[4..]).unwrap()).unwrap();
        assert_eq!(merged.count, 9);
        assert!((&merged.mean - &all.mean).norm() < 1e-12);
        assert!((&merged.cov - &all.cov).norm() < 1e-12);
    }

    #[test]
    fn stats_sidecar_keyed() {
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 1.0 - i as f64]).collect();
        let s = FeatureStats::from_rows(&rows).unwrap();
        let mut buf = Vec::new();
        s.write_to("k1", &mut buf).unwrap();
        assert_eq!(FeatureStats::read_from("k1", &buf[..]).unwrap(), Some(s));
        assert_eq!(FeatureStats::read_from("k2", &buf[..]).unwrap(), None);
    }

    #[test]
    fn precision_recall_extremes() {
        let a: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 0.0]).collect();
        assert_eq!(precision_recall(&a, &a, 3).unwrap(), (1.0, 1.0));
        let far: Vec<Vec<f64>> = a.iter().map(|p| vec![p[0] + 1000.0, 0.0]).collect();
        assert_eq!(precision_recall(&a, &far, 3).unwrap(), (0.0, 0.0));
        assert!(precision_recall(&a[..3], &a, 3).is_err());
    }
}
