//! Graded synthetic distortions and ranked-group synthesis.
//!
//! Three kinds are implemented: separable Gaussian blur, additive Gaussian
//! noise, and a DCT-based JPEG proxy. A ranked group is one reference image
//! distorted at every level of a spec; within the group a lower level index
//! always means higher quality, which is the only supervision ranking
//! training consumes.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistortionKind {
    GaussianBlur,
    GaussianNoise,
    JpegProxy,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 3] = [
        DistortionKind::GaussianBlur,
        DistortionKind::GaussianNoise,
        DistortionKind::JpegProxy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DistortionKind::GaussianBlur => "gaussian_blur",
            DistortionKind::GaussianNoise => "gaussian_noise",
            DistortionKind::JpegProxy => "jpeg_proxy",
        }
    }
}

impl std::fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<DistortionKind> {
        match s {
            "gaussian_blur" => Ok(DistortionKind::GaussianBlur),
            "gaussian_noise" => Ok(DistortionKind::GaussianNoise),
            "jpeg_proxy" => Ok(DistortionKind::JpegProxy),
            other => Err(Error::Config(format!("unknown distortion kind `{other}`"))),
        }
    }
}

/// A distortion kind with its ordered intensity grid (ascending severity)
/// and the seed for stochastic kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub levels: Vec<f32>,
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, levels: Vec<f32>, seed: u64) -> Result<DistortionSpec> {
        let spec = DistortionSpec { kind, levels, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// Default level grids, graded and PSNR-monotone on the fixture corpus.
    /// Blur sigmas are spaced geometrically: adjacent levels then differ by a
    /// constant factor in their frequency response, so every adjacent pair is
    /// about equally separable, which linear spacing loses at higher sigmas.
    pub fn default_levels(kind: DistortionKind) -> Vec<f32> {
        match kind {
            DistortionKind::GaussianBlur => vec![0.5, 1.0, 2.0, 4.0, 8.0],
            DistortionKind::GaussianNoise => vec![0.02, 0.05, 0.1, 0.2, 0.4],
            DistortionKind::JpegProxy => vec![80.0, 60.0, 40.0, 20.0, 10.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::Config(format!(
                "{} needs at least 2 levels, got {}",
                self.kind,
                self.levels.len()
            )));
        }
        if self.levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("{} levels must be finite", self.kind)));
        }
        let ascending_severity: Box<dyn Fn(f32, f32) -> bool> = match self.kind {
            // blur/noise severity grows with sigma
            DistortionKind::GaussianBlur | DistortionKind::GaussianNoise => {
                if self.levels.iter().any(|v| *v < 0.0) {
                    return Err(Error::Config(format!("{} sigma must be non-negative", self.kind)));
                }
                Box::new(|a, b| a < b)
            }
            // jpeg severity grows as quality drops
            DistortionKind::JpegProxy => {
                if self.levels.iter().any(|v| !(1.0..=100.0).contains(v)) {
                    return Err(Error::Config("jpeg_proxy quality must be in [1, 100]".into()));
                }
                Box::new(|a, b| a > b)
            }
        };
        for pair in self.levels.windows(2) {
            if !ascending_severity(pair[0], pair[1]) {
                return Err(Error::Config(format!(
                    "{} levels must be strictly monotone in severity: {:?}",
                    self.kind, self.levels
                )));
            }
        }
        Ok(())
    }

    /// Applies level `index` of this spec to an image.
    pub fn apply(&self, image: &Tensor, index: usize) -> Result<Tensor> {
        let level = *self.levels.get(index).ok_or_else(|| {
            Error::Config(format!("level index {index} out of range for {:?}", self.levels))
        })?;
        match self.kind {
            DistortionKind::GaussianBlur => gaussian_blur(image, level),
            DistortionKind::GaussianNoise => gaussian_noise(image, level, level_seed(self.seed, index)),
            DistortionKind::JpegProxy => jpeg_proxy(image, level),
        }
    }
}

/// Distinct per-level noise streams from one group seed (splitmix64 step).
fn level_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn require_image(image: &Tensor) -> Result<(usize, usize)> {
    if image.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "distortions act on [H, W] images, got {:?}",
            image.shape()
        )));
    }
    Ok((image.shape()[0], image.shape()[1]))
}

/// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, reflecting at the
/// edges. `sigma = 0` is the identity.
pub fn gaussian_blur(image: &Tensor, sigma: f32) -> Result<Tensor> {
    let (h, w) = require_image(image)?;
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Config(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }

    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let inv = -0.5 / (sigma * sigma);
    for i in -(radius as isize)..=(radius as isize) {
        kernel.push(((i * i) as f32 * inv).exp());
    }
    let sum: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= sum);

    // mirror about the edge pixel (reflect-101)
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * n - 2 - i;
            }
        }
        i as usize
    };

    // horizontal pass
    let src = image.data();
    let mut tmp = vec![0.0f32; h * w];
    for_each_chunk(&mut tmp, w, |y, row| {
        let base = y * w;
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (k, kv) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + k as isize - radius as isize, w);
                acc += kv * src[base + sx];
            }
            *out = acc;
        }
    });

    // vertical pass
    let mut out = vec![0.0f32; h * w];
    for_each_chunk(&mut out, w, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (k, kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - radius as isize, h);
                acc += kv * tmp[sy * w + x];
            }
            *o = acc;
        }
    });

    Tensor::from_vec(&[h, w], out)
}

/// The pre-clamp noise field added by [`gaussian_noise`]: i.i.d. zero-mean
/// Gaussian with standard deviation `sigma`, a pure function of
/// `(shape, sigma, seed)`.
pub fn gaussian_noise_field(height: usize, width: usize, sigma: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; height * width];
    // Box-Muller, pairs at a time
    let mut i = 0;
    while i < data.len() {
        let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        data[i] = (r * theta.cos()) as f32 * sigma;
        if i + 1 < data.len() {
            data[i + 1] = (r * theta.sin()) as f32 * sigma;
        }
        i += 2;
    }
    Tensor::from_vec(&[height, width], data).expect("field size")
}

/// Adds i.i.d. zero-mean Gaussian noise and clamps to [0, 1]. Deterministic
/// per `(seed, image shape)`.
pub fn gaussian_noise(image: &Tensor, sigma: f32, seed: u64) -> Result<Tensor> {
    let (h, w) = require_image(image)?;
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let field = gaussian_noise_field(h, w, sigma, seed);
    let data = image
        .data()
        .iter()
        .zip(field.data())
        .map(|(x, n)| (x + n).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(&[h, w], data)
}

/// Standard luminance quantization table.
const LUMA_TABLE: [f32; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Quality-scaled table per the usual 5000/q | 200-2q rule, entries clamped
/// to [1, 255].
fn scaled_luma_table(quality: f32) -> [f32; 64] {
    let scale = if quality < 50.0 { 5000.0 / quality } else { 200.0 - 2.0 * quality };
    let mut t = [0.0f32; 64];
    for (o, v) in t.iter_mut().zip(LUMA_TABLE) {
        *o = ((v * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

/// Orthonormal 8x8 DCT-II basis matrix.
fn dct_matrix() -> [f32; 64] {
    let mut c = [0.0f32; 64];
    for u in 0..8 {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for x in 0..8 {
            c[u * 8 + x] =
                (alpha * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos()) as f32;
        }
    }
    c
}

fn mat8_mul(a: &[f32; 64], b: &[f32; 64]) -> [f32; 64] {
    let mut out = [0.0f32; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0f32;
            for k in 0..8 {
                acc += a[i * 8 + k] * b[k * 8 + j];
            }
            out[i * 8 + j] = acc;
        }
    }
    out
}

fn mat8_transpose(a: &[f32; 64]) -> [f32; 64] {
    let mut out = [0.0f32; 64];
    for i in 0..8 {
        for j in 0..8 {
            out[j * 8 + i] = a[i * 8 + j];
        }
    }
    out
}

/// JPEG-style degradation: 8x8 block DCT, AC coefficients quantized by the
/// quality-scaled luminance table, inverse DCT, clamp. The DC coefficient is
/// carried through unquantized so flat regions keep their level; quality acts
/// on detail, which is where the visible artifacts live.
pub fn jpeg_proxy(image: &Tensor, quality: f32) -> Result<Tensor> {
    let (h, w) = require_image(image)?;
    if !(1.0..=100.0).contains(&quality) {
        return Err(Error::Config(format!("jpeg quality must be in [1, 100], got {quality}")));
    }

    let table = scaled_luma_table(quality);
    let dct = dct_matrix();
    let dct_t = mat8_transpose(&dct);

    // pad to block multiples by edge replication
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let src = image.data();
    let mut padded = vec![0.0f32; ph * pw];
    for y in 0..ph {
        let sy = y.min(h - 1);
        for x in 0..pw {
            let sx = x.min(w - 1);
            padded[y * pw + x] = src[sy * w + sx] * 255.0 - 128.0;
        }
    }

    // each band of 8 rows owns a disjoint row of blocks
    for_each_chunk(&mut padded, 8 * pw, |_, band| {
        for bx in (0..pw).step_by(8) {
            let mut block = [0.0f32; 64];
            for r in 0..8 {
                block[r * 8..r * 8 + 8].copy_from_slice(&band[r * pw + bx..r * pw + bx + 8]);
            }
            let mut coeff = mat8_mul(&mat8_mul(&dct, &block), &dct_t);
            for (i, c) in coeff.iter_mut().enumerate() {
                if i != 0 {
                    *c = (*c / table[i]).round() * table[i];
                }
            }
            let rec = mat8_mul(&mat8_mul(&dct_t, &coeff), &dct);
            for r in 0..8 {
                band[r * pw + bx..r * pw + bx + 8].copy_from_slice(&rec[r * 8..r * 8 + 8]);
            }
        }
    });

    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = ((padded[y * pw + x] + 128.0) / 255.0).clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(&[h, w], out)
}

/// Peak signal-to-noise ratio in dB against a [0, 1] pixel range; infinite
/// for identical images. Used as the severity-monotonicity proxy.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut mse = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = (*x - *y) as f64;
        mse += d * d;
    }
    mse /= a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// One reference image with its graded distorted variants. Lower level index
/// means higher quality; group size `n` is the number of levels. The group
/// carries only within-group order, never absolute severity.
#[derive(Debug, Clone)]
pub struct RankedGroup {
    pub reference_id: String,
    pub kind: DistortionKind,
    pub reference: Tensor,
    pub distorted: Vec<(usize, Tensor)>,
}

impl RankedGroup {
    pub fn level_count(&self) -> usize {
        self.distorted.len()
    }

    /// Ordered within-group pairs: n(n-1)/2.
    pub fn comparable_pair_count(&self) -> usize {
        let n = self.distorted.len();
        n * (n - 1) / 2
    }

    pub fn image_shape(&self) -> &[usize] {
        self.reference.shape()
    }
}

/// Applies every level of `spec` to `reference`.
pub fn synthesize_ranked_group(
    reference: &Tensor,
    reference_id: &str,
    spec: &DistortionSpec,
) -> Result<RankedGroup> {
    spec.validate()?;
    require_image(reference)?;
    let mut distorted = Vec::with_capacity(spec.levels.len());
    for index in 0..spec.levels.len() {
        distorted.push((index, spec.apply(reference, index)?));
    }
    Ok(RankedGroup {
        reference_id: reference_id.to_string(),
        kind: spec.kind,
        reference: reference.clone(),
        distorted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::synthetic_reference;

    #[test]
    fn blur_identity_and_errors() {
        let img = synthetic_reference(40, 30, 1);
        let same = gaussian_blur(&img, 0.0).unwrap();
        assert_eq!(same.data(), img.data());
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = Tensor::filled(&[16, 16], 0.42);
        for sigma in [0.5, 2.0, 5.0] {
            let out = gaussian_blur(&img, sigma).unwrap();
            for v in out.data() {
                assert!((v - 0.42).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blur_psnr_non_increasing_in_sigma() {
        let img = synthetic_reference(64, 64, 2);
        let mut last = f64::INFINITY;
        for sigma in DistortionSpec::default_levels(DistortionKind::GaussianBlur) {
            let out = gaussian_blur(&img, sigma).unwrap();
            let p = psnr(&img, &out).unwrap();
            assert!(p <= last, "psnr rose from {last} to {p} at sigma {sigma}");
            last = p;
        }
    }

    #[test]
    fn noise_determinism_and_identity() {
        let img = synthetic_reference(32, 32, 3);
        assert_eq!(gaussian_noise(&img, 0.0, 9).unwrap().data(), img.data());
        let a = gaussian_noise(&img, 0.1, 9).unwrap();
        let b = gaussian_noise(&img, 0.1, 9).unwrap();
        assert_eq!(a.data(), b.data());
        let c = gaussian_noise(&img, 0.1, 10).unwrap();
        assert_ne!(a.data(), c.data());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(gaussian_noise(&img, -0.1, 0).is_err());
    }

    #[test]
    fn noise_field_variance_matches_sigma() {
        // pre-clamp field on a 256x256 canvas, fixed seed
        let sigma = 0.1f32;
        let field = gaussian_noise_field(256, 256, sigma, 1234);
        let n = field.len() as f64;
        let mean: f64 = field.data().iter().map(|v| *v as f64).sum::<f64>() / n;
        let var: f64 = field.data().iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = (sigma as f64).powi(2);
        assert!(
            (var - target).abs() / target < 0.05,
            "variance {var} vs sigma^2 {target}"
        );
        // and the clamped op is exactly input + field where no clamp hits
        let img = Tensor::filled(&[256, 256], 0.5);
        let out = gaussian_noise(&img, sigma, 1234).unwrap();
        for (o, f) in out.data().iter().zip(field.data()) {
            let raw = 0.5 + f;
            assert_eq!(*o, raw.clamp(0.0, 1.0));
        }
    }

    #[test]
    fn jpeg_constant_images_survive_any_quality() {
        for value in [0.0f32, 128.0 / 255.0, 0.9, 1.0] {
            let img = Tensor::filled(&[24, 24], value);
            for quality in [1.0f32, 10.0, 50.0, 100.0] {
                let out = jpeg_proxy(&img, quality).unwrap();
                for v in out.data() {
                    assert!(
                        (v - value).abs() <= 1.0 / 255.0,
                        "value {value} quality {quality}: {v}"
                    );
                }
            }
        }
    }

    #[test]
    fn jpeg_quality_100_is_near_lossless() {
        let img = synthetic_reference(64, 48, 4);
        let out = jpeg_proxy(&img, 100.0).unwrap();
        let p = psnr(&img, &out).unwrap();
        assert!(p > 45.0, "psnr {p}");
    }

    #[test]
    fn jpeg_psnr_non_increasing_as_quality_drops() {
        let img = synthetic_reference(64, 64, 5);
        let mut last = f64::INFINITY;
        for quality in [90.0, 70.0, 50.0, 30.0, 10.0] {
            let out = jpeg_proxy(&img, quality).unwrap();
            let p = psnr(&img, &out).unwrap();
            assert!(p <= last, "psnr rose from {last} to {p} at quality {quality}");
            last = p;
        }
    }

    #[test]
    fn jpeg_rejects_out_of_range_quality() {
        let img = Tensor::filled(&[8, 8], 0.5);
        assert!(jpeg_proxy(&img, 0.5).is_err());
        assert!(jpeg_proxy(&img, 101.0).is_err());
        // non multiple-of-8 sizes pad fine
        let odd = synthetic_reference(37, 29, 6);
        let out = jpeg_proxy(&odd, 50.0).unwrap();
        assert_eq!(out.shape(), odd.shape());
    }

    #[test]
    fn spec_validation_rules() {
        use DistortionKind::*;
        assert!(DistortionSpec::new(GaussianBlur, vec![1.0], 0).is_err()); // < 2 levels
        assert!(DistortionSpec::new(GaussianBlur, vec![2.0, 1.0], 0).is_err()); // not ascending
        assert!(DistortionSpec::new(JpegProxy, vec![10.0, 80.0], 0).is_err()); // severity must ascend
        assert!(DistortionSpec::new(JpegProxy, vec![80.0, 10.0], 0).is_ok());
        assert!(DistortionSpec::new(GaussianNoise, vec![-0.1, 0.2], 0).is_err());
        for kind in DistortionKind::ALL {
            DistortionSpec::new(kind, DistortionSpec::default_levels(kind), 0).unwrap();
        }
    }

    #[test]
    fn ranked_group_structure_and_determinism() {
        let img = synthetic_reference(48, 48, 7);
        let spec = DistortionSpec::new(
            DistortionKind::GaussianBlur,
            DistortionSpec::default_levels(DistortionKind::GaussianBlur),
            11,
        )
        .unwrap();
        let group = synthesize_ranked_group(&img, "ref_a", &spec).unwrap();
        assert_eq!(group.level_count(), 5);
        assert_eq!(group.comparable_pair_count(), 10);
        for (idx, (level, distorted)) in group.distorted.iter().enumerate() {
            assert_eq!(*level, idx);
            assert_eq!(distorted.shape(), img.shape());
        }

        // PSNR monotone across the group
        let mut last = f64::INFINITY;
        for (_, d) in &group.distorted {
            let p = psnr(&img, d).unwrap();
            assert!(p <= last);
            last = p;
        }

        // bit-identical regeneration
        let again = synthesize_ranked_group(&img, "ref_a", &spec).unwrap();
        for ((_, a), (_, b)) in group.distorted.iter().zip(&again.distorted) {
            assert_eq!(a.data(), b.data());
        }

        // pair-count arithmetic used by the efficiency accounting
        let two = DistortionSpec::new(DistortionKind::GaussianBlur, vec![1.0, 2.0], 0).unwrap();
        assert_eq!(synthesize_ranked_group(&img, "r", &two).unwrap().comparable_pair_count(), 1);
        let six = DistortionSpec::new(DistortionKind::GaussianBlur, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0).unwrap();
        assert_eq!(synthesize_ranked_group(&img, "r", &six).unwrap().comparable_pair_count(), 15);
    }
}
