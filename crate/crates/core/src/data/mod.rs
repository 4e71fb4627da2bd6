//! Synthetic distorted-image data: procedural pristine images, Gaussian blur
//! and noise distortions with a deterministic score per level, bilinear
//! resizing, file IO, and manifest handling with content-level splits.

pub mod io;
mod manifest;

pub use manifest::{DatasetManifest, ManifestEntry, SplitIndices};

use std::fmt;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{labels, stream};
use crate::scalar::{c, Scalar};

/// Height x width x channels, intensities in [0,1].
pub type Image<T> = Array3<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    GaussianBlur,
    GaussianNoise,
}

impl DistortionKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian_blur" | "blur" => Some(Self::GaussianBlur),
            "gaussian_noise" | "noise" => Some(Self::GaussianNoise),
            _ => None,
        }
    }

    pub fn short(&self) -> &'static str {
        match self {
            Self::GaussianBlur => "blur",
            Self::GaussianNoise => "noise",
        }
    }

    /// Severity parameter for a level: blur kernel std in pixels, or noise
    /// std in intensity units. Strictly increasing in level.
    pub fn default_sigma(&self, level: u32) -> f64 {
        match self {
            Self::GaussianBlur => 0.6 * level as f64,
            Self::GaussianNoise => 0.05 * level as f64,
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::GaussianBlur => write!(f, "gaussian_blur"),
            Self::GaussianNoise => write!(f, "gaussian_noise"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    /// 0 is the identity (pristine); 1..=levels increase severity.
    pub level: u32,
    pub levels: u32,
    pub sigma: f64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, level: u32, levels: u32) -> Result<Self> {
        let spec = Self {
            kind,
            level,
            levels,
            sigma: kind.default_sigma(level),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidArgument("levels must be positive".into()));
        }
        if self.level > self.levels {
            return Err(Error::InvalidArgument(format!(
                "level {} exceeds levels {}",
                self.level, self.levels
            )));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma {} must be finite and nonnegative",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Deterministic stand-in score: 100 * (1 - level/(levels+1)), in [0,100],
/// strictly decreasing in level, identical across kinds.
pub fn synth_mos(spec: &DistortionSpec) -> f64 {
    100.0 * (1.0 - spec.level as f64 / (spec.levels as f64 + 1.0))
}

fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Normalized 1-d Gaussian taps with radius ceil(3 sigma).
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur with reflected borders. Sums are accumulated
/// relative to the center tap, so constant regions pass through bit-exact.
pub fn gaussian_blur<T: Scalar>(image: &Image<T>, sigma: f64) -> Result<Image<T>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "blur sigma {sigma} must be finite and nonnegative"
        )));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let taps: Vec<T> = gaussian_kernel(sigma).into_iter().map(c::<T>).collect();
    let radius = (taps.len() / 2) as isize;
    let (h, w, ch) = image.dim();

    let mut horizontal: Image<T> = Array3::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for k in 0..ch {
                let center = image[[y, x, k]];
                let mut acc = T::zero();
                for (ti, &tap) in taps.iter().enumerate() {
                    let sx = reflect(x as isize + ti as isize - radius, w);
                    acc = acc + tap * (image[[y, sx, k]] - center);
                }
                horizontal[[y, x, k]] = center + acc;
            }
        }
    }
    let mut blurred: Image<T> = Array3::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for k in 0..ch {
                let center = horizontal[[y, x, k]];
                let mut acc = T::zero();
                for (ti, &tap) in taps.iter().enumerate() {
                    let sy = reflect(y as isize + ti as isize - radius, h);
                    acc = acc + tap * (horizontal[[sy, x, k]] - center);
                }
                blurred[[y, x, k]] = center + acc;
            }
        }
    }
    Ok(blurred)
}

/// Applies the distortion: blur convolves with a normalized Gaussian, noise
/// adds N(0, sigma^2) per value (drawn row-major) and clamps to [0,1].
/// Sigma zero is the identity.
pub fn apply_distortion<T: Scalar, R: Rng>(
    image: &Image<T>,
    spec: &DistortionSpec,
    rng: &mut R,
) -> Result<Image<T>> {
    spec.validate()?;
    match spec.kind {
        DistortionKind::GaussianBlur => gaussian_blur(image, spec.sigma),
        DistortionKind::GaussianNoise => {
            let normal = Normal::new(0.0, spec.sigma)
                .map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
            let mut out = image.clone();
            for v in out.iter_mut() {
                let noisy = v.to_f64_lossy() + normal.sample(rng);
                *v = c::<T>(noisy.clamp(0.0, 1.0));
            }
            Ok(out)
        }
    }
}

/// Bilinear resample to `(height, width)`, preserving channel count.
/// Sample positions follow the half-pixel-center convention.
pub fn resize_bilinear<T: Scalar>(
    image: &Image<T>,
    height: usize,
    width: usize,
) -> Result<Image<T>> {
    let (h, w, ch) = image.dim();
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(
            "resize target must be positive".into(),
        ));
    }
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let mut out: Image<T> = Array3::zeros((height, width, ch));
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for k in 0..ch {
                let v00 = image[[y0, x0, k]].to_f64_lossy();
                let v01 = image[[y0, x1, k]].to_f64_lossy();
                let v10 = image[[y1, x0, k]].to_f64_lossy();
                let v11 = image[[y1, x1, k]].to_f64_lossy();
                let top = v00 * (1.0 - wx) + v01 * wx;
                let bottom = v10 * (1.0 - wx) + v11 * wx;
                out[[y, x, k]] = c::<T>(top * (1.0 - wy) + bottom * wy);
            }
        }
    }
    Ok(out)
}

/// Extracts the axis-aligned crop described by `rect`.
pub fn crop_image<T: Scalar>(
    image: &Image<T>,
    rect: &crate::saliency::PixelRect,
) -> Result<Image<T>> {
    let (h, w, _) = image.dim();
    if rect.x + rect.width > w || rect.y + rect.height > h {
        return Err(Error::OutOfRange(format!(
            "crop {}x{}+{}+{} exceeds image {w}x{h}",
            rect.width, rect.height, rect.x, rect.y
        )));
    }
    Ok(image
        .slice(ndarray::s![
            rect.y..rect.y + rect.height,
            rect.x..rect.x + rect.width,
            ..
        ])
        .to_owned())
}

fn min_max_normalize(field: &mut Array2<f64>, lo: f64, hi: f64) {
    let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span <= 0.0 {
        field.fill(0.5 * (lo + hi));
    } else {
        field.mapv_inplace(|v| lo + (hi - lo) * (v - min) / span);
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    Uniform::new(lo, hi).expect("valid range").sample(rng)
}

/// Procedural pristine images mixing an oriented gradient, a sinusoidal
/// grating, a checkerboard and band-limited noise, so both blur and additive
/// noise are perceptible. Deterministic per (seed, index).
pub fn generate_pristine<T: Scalar>(
    count: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<Image<T>>> {
    if size < 4 {
        return Err(Error::InvalidArgument(format!(
            "image size {size} too small"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    let mut images = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = stream(seed, &[labels::DATA, index as u64]);
        let parts = [
            pattern_gradient(size, &mut rng),
            pattern_grating(size, &mut rng),
            pattern_checker(size, &mut rng),
            pattern_texture(size, &mut rng),
        ];
        let weights: Vec<f64> = (0..parts.len())
            .map(|_| uniform(&mut rng, 0.15, 1.0))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut field = Array2::zeros((size, size));
        for (part, &weight) in parts.iter().zip(&weights) {
            field = field + &(part * (weight / total));
        }
        min_max_normalize(&mut field, 0.03, 0.97);

        let gains: Vec<f64> = (0..channels)
            .map(|_| {
                if channels == 1 {
                    1.0
                } else {
                    uniform(&mut rng, 0.85, 1.0)
                }
            })
            .collect();
        let mut image: Image<T> = Array3::zeros((size, size, channels));
        for y in 0..size {
            for x in 0..size {
                for (k, &gain) in gains.iter().enumerate() {
                    image[[y, x, k]] = c::<T>((field[[y, x]] * gain).clamp(0.0, 1.0));
                }
            }
        }
        images.push(image);
    }
    Ok(images)
}

fn pattern_gradient(size: usize, rng: &mut impl Rng) -> Array2<f64> {
    let theta = uniform(rng, 0.0, std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut field = Array2::from_shape_fn((size, size), |(y, x)| dx * x as f64 + dy * y as f64);
    min_max_normalize(&mut field, 0.0, 1.0);
    field
}

fn pattern_grating(size: usize, rng: &mut impl Rng) -> Array2<f64> {
    let cycles = uniform(rng, 1.5, 5.5);
    let theta = uniform(rng, 0.0, std::f64::consts::TAU);
    let phase = uniform(rng, 0.0, std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    Array2::from_shape_fn((size, size), |(y, x)| {
        let u = (dx * x as f64 + dy * y as f64) / size as f64;
        0.5 + 0.5 * (std::f64::consts::TAU * cycles * u + phase).sin()
    })
}

fn pattern_checker(size: usize, rng: &mut impl Rng) -> Array2<f64> {
    let max_cell = (size / 2).max(2);
    let choices: Vec<usize> = [4, 8, 16].into_iter().filter(|&c| c <= max_cell).collect();
    let cell = if choices.is_empty() {
        2
    } else {
        choices[rng.random_range(0..choices.len())]
    };
    let ox = rng.random_range(0..cell);
    let oy = rng.random_range(0..cell);
    Array2::from_shape_fn((size, size), |(y, x)| {
        (((x + ox) / cell + (y + oy) / cell) % 2) as f64
    })
}

fn pattern_texture(size: usize, rng: &mut impl Rng) -> Array2<f64> {
    let sigma = uniform(rng, 1.0, 2.5);
    let white: Image<f64> = Array3::from_shape_fn((size, size, 1), |_| rng.random::<f64>());
    let smooth = gaussian_blur(&white, sigma).expect("sigma positive");
    let mut field = Array2::from_shape_fn((size, size), |(y, x)| smooth[[y, x, 0]]);
    min_max_normalize(&mut field, 0.0, 1.0);
    field
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub pristine_count: usize,
    pub size: usize,
    pub channels: usize,
    pub levels: u32,
    pub kinds: Vec<DistortionKind>,
    pub seed: u64,
    pub write_pristine: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            pristine_count: 60,
            size: 64,
            channels: 1,
            levels: 5,
            kinds: vec![DistortionKind::GaussianBlur, DistortionKind::GaussianNoise],
            seed: 0,
            write_pristine: true,
        }
    }
}

/// Writes `pristine_count * levels * kinds` distorted images plus a manifest
/// CSV under `dir`. Distorted versions of one pristine share a path stem
/// prefix, which is what the content-level split groups by.
pub fn generate_dataset(dir: &Path, opts: &GenerateOptions) -> Result<DatasetManifest> {
    if opts.kinds.is_empty() {
        return Err(Error::InvalidArgument("no distortion kinds".into()));
    }
    if opts.levels == 0 {
        return Err(Error::InvalidArgument("levels must be positive".into()));
    }
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| Error::io(format!("creating {}", images_dir.display()), e))?;
    let pristine_dir = dir.join("pristine");
    if opts.write_pristine {
        std::fs::create_dir_all(&pristine_dir)
            .map_err(|e| Error::io(format!("creating {}", pristine_dir.display()), e))?;
    }

    let pristine: Vec<Image<f64>> =
        generate_pristine(opts.pristine_count, opts.size, opts.channels, opts.seed)?;
    let ext = if opts.channels == 1 { "pgm" } else { "ppm" };
    let mut entries = Vec::new();
    for (i, source) in pristine.iter().enumerate() {
        if opts.write_pristine {
            io::write_image(&pristine_dir.join(format!("img{i:03}.{ext}")), source)?;
        }
        for kind in &opts.kinds {
            for level in 1..=opts.levels {
                let spec = DistortionSpec::new(*kind, level, opts.levels)?;
                let mut rng = stream(
                    opts.seed,
                    &[labels::NOISE, i as u64, *kind as u64, level as u64],
                );
                let distorted = apply_distortion(source, &spec, &mut rng)?;
                let name = format!("img{i:03}_{}{level}.{ext}", kind.short());
                io::write_image(&images_dir.join(&name), &distorted)?;
                entries.push(ManifestEntry {
                    path: format!("images/{name}").into(),
                    mos: synth_mos(&spec),
                    distortion: Some(spec),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        base_dir: dir.to_path_buf(),
        entries,
        splits: None,
    };
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn synth_mos_formula_and_monotonicity() {
        let l5 = |level| DistortionSpec::new(DistortionKind::GaussianBlur, level, 5).unwrap();
        assert_eq!(synth_mos(&l5(0)), 100.0);
        assert!((synth_mos(&l5(5)) - 100.0 * (1.0 - 5.0 / 6.0)).abs() < 1e-12);
        for level in 0..5 {
            assert!(synth_mos(&l5(level)) > synth_mos(&l5(level + 1)));
        }
        let noise = DistortionSpec::new(DistortionKind::GaussianNoise, 3, 5).unwrap();
        assert_eq!(synth_mos(&l5(3)), synth_mos(&noise));
    }

    #[test]
    fn sigma_increases_with_level() {
        for kind in [DistortionKind::GaussianBlur, DistortionKind::GaussianNoise] {
            for level in 1..5 {
                assert!(kind.default_sigma(level) < kind.default_sigma(level + 1));
            }
        }
    }

    #[test]
    fn blur_kernel_normalized_and_identity_at_zero() {
        for sigma in [0.3, 0.6, 1.7, 3.0] {
            let taps = gaussian_kernel(sigma);
            assert_eq!(taps.len(), 2 * (3.0f64 * sigma).ceil() as usize + 1);
            assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);

        let image: Image<f64> =
            Array3::from_shape_fn((5, 5, 1), |(y, x, _)| (y * 5 + x) as f64 / 24.0);
        let same = gaussian_blur(&image, 0.0).unwrap();
        assert_eq!(image, same);
    }

    #[test]
    fn blur_preserves_constants_exactly() {
        for &value in &[0.3, 0.5, 0.7239847] {
            let image: Image<f64> = Array3::from_elem((7, 9, 2), value);
            let blurred = gaussian_blur(&image, 1.4).unwrap();
            assert_eq!(image, blurred);
        }
    }

    #[test]
    fn blur_smooths_an_impulse() {
        let mut image: Image<f64> = Array3::zeros((9, 9, 1));
        image[[4, 4, 0]] = 1.0;
        let blurred = gaussian_blur(&image, 1.0).unwrap();
        assert!(blurred[[4, 4, 0]] < 1.0);
        assert!(blurred[[4, 3, 0]] > 0.0);
        let total: f64 = blurred.iter().sum();
        assert!(
            (total - 1.0).abs() < 1e-9,
            "mass preserved away from borders"
        );
    }

    #[test]
    fn noise_is_seeded_and_clamped() {
        let image: Image<f64> = Array3::from_elem((6, 6, 1), 0.5);
        let spec = DistortionSpec::new(DistortionKind::GaussianNoise, 4, 5).unwrap();
        let a = apply_distortion(&image, &spec, &mut stream(9, &[labels::NOISE])).unwrap();
        let b = apply_distortion(&image, &spec, &mut stream(9, &[labels::NOISE])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, image);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let zero = DistortionSpec {
            kind: DistortionKind::GaussianNoise,
            level: 0,
            levels: 5,
            sigma: 0.0,
        };
        let same = apply_distortion(&image, &zero, &mut stream(9, &[labels::NOISE])).unwrap();
        assert_eq!(same, image);
    }

    #[test]
    fn negative_sigma_is_rejected() {
        let bad = DistortionSpec {
            kind: DistortionKind::GaussianBlur,
            level: 1,
            levels: 5,
            sigma: -0.1,
        };
        let image: Image<f64> = Array3::zeros((4, 4, 1));
        assert!(apply_distortion(&image, &bad, &mut stream(0, &[1])).is_err());
    }

    #[test]
    fn pristine_images_are_seeded_and_in_range() {
        let a: Vec<Image<f64>> = generate_pristine(3, 16, 1, 5).unwrap();
        let b: Vec<Image<f64>> = generate_pristine(3, 16, 1, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let none: Vec<Image<f64>> = generate_pristine(0, 16, 1, 5).unwrap();
        assert!(none.is_empty());
        for image in &a {
            assert_eq!(image.dim(), (16, 16, 1));
            assert!(image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let lo = image.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(hi - lo > 0.3, "image should have visible contrast");
        }
        let c: Vec<Image<f64>> = generate_pristine(3, 16, 1, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn resize_preserves_constants_and_shape() {
        let image: Image<f64> = Array3::from_elem((8, 6, 1), 0.42);
        let out = resize_bilinear(&image, 5, 9).unwrap();
        assert_eq!(out.dim(), (5, 9, 1));
        assert!(out.iter().all(|&v| (v - 0.42).abs() < 1e-12));

        let same = resize_bilinear(&image, 8, 6).unwrap();
        assert_eq!(same, image);
    }

    #[test]
    fn resize_downsamples_gradient_sensibly() {
        let image: Image<f64> = Array3::from_shape_fn((16, 16, 1), |(_, x, _)| x as f64 / 15.0);
        let out = resize_bilinear(&image, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..3 {
                assert!(out[[y, x, 0]] < out[[y, x + 1, 0]]);
            }
        }
    }

    #[test]
    fn crop_extracts_expected_region() {
        let image: Image<f64> = Array3::from_shape_fn((8, 8, 1), |(y, x, _)| (y * 8 + x) as f64);
        let rect = crate::saliency::PixelRect {
            x: 2,
            y: 3,
            width: 4,
            height: 2,
        };
        let crop = crop_image(&image, &rect).unwrap();
        assert_eq!(crop.dim(), (2, 4, 1));
        assert_eq!(crop[[0, 0, 0]], (3 * 8 + 2) as f64);
        assert_eq!(crop[[1, 3, 0]], (4 * 8 + 5) as f64);

        let bad = crate::saliency::PixelRect {
            x: 6,
            y: 0,
            width: 4,
            height: 2,
        };
        assert!(crop_image(&image, &bad).is_err());
    }
}
