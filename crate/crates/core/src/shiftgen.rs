//! Controlled synthetic covariate shifts applied to whole scans.

use std::fmt;

use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Scan;
use crate::rng;

/// Photon count at unit intensity for the dose model.
pub const DEFAULT_DOSE_COUNTS: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    GaussianNoise,
    GaussianBlur,
    Gamma,
    DoseSim,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [
        ShiftKind::GaussianNoise,
        ShiftKind::GaussianBlur,
        ShiftKind::Gamma,
        ShiftKind::DoseSim,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ShiftKind::GaussianNoise => "noise",
            ShiftKind::GaussianBlur => "blur",
            ShiftKind::Gamma => "gamma",
            ShiftKind::DoseSim => "dose",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian_noise" | "noise" => Some(ShiftKind::GaussianNoise),
            "gaussian_blur" | "blur" => Some(ShiftKind::GaussianBlur),
            "gamma" => Some(ShiftKind::Gamma),
            "dose_sim" | "dose" => Some(ShiftKind::DoseSim),
            _ => None,
        }
    }

    /// Whether a larger magnitude means a stronger shift. Dose is the
    /// exception: a smaller dose factor is the stronger shift.
    pub fn severity_increases_with_magnitude(self) -> bool {
        !matches!(self, ShiftKind::DoseSim)
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::GaussianNoise => "gaussian_noise",
            ShiftKind::GaussianBlur => "gaussian_blur",
            ShiftKind::Gamma => "gamma",
            ShiftKind::DoseSim => "dose_sim",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    pub rng_seed: u64,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, magnitude: f64, rng_seed: u64) -> Result<Self> {
        if !(magnitude > 0.0 && magnitude.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{kind} magnitude {magnitude} must be positive"
            )));
        }
        if kind == ShiftKind::DoseSim && magnitude > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "dose factor {magnitude} must lie in (0, 1]"
            )));
        }
        Ok(ShiftSpec {
            kind,
            magnitude,
            rng_seed,
        })
    }

    /// Group label for shifted corpora, e.g. `noise_0.05`.
    pub fn label(&self) -> String {
        format!("{}_{}", self.kind.label(), self.magnitude)
    }

    pub fn apply(&self, scan: &Scan) -> Result<Scan> {
        match self.kind {
            ShiftKind::GaussianNoise => apply_gaussian_noise(scan, self.magnitude, self.rng_seed),
            ShiftKind::GaussianBlur => apply_gaussian_blur(scan, self.magnitude),
            ShiftKind::Gamma => apply_gamma(scan, self.magnitude),
            ShiftKind::DoseSim => apply_dose_sim(scan, self.magnitude, self.rng_seed),
        }
    }
}

fn tagged(scan: &Scan, pixels: Vec<f32>, spec: ShiftSpec) -> Scan {
    let mut out = scan.map_pixels(pixels);
    out.shift = Some(spec);
    out
}

/// Additive white Gaussian noise, clamped to `[0, 1]`.
pub fn apply_gaussian_noise(scan: &Scan, sigma: f64, seed: u64) -> Result<Scan> {
    let spec = ShiftSpec::new(ShiftKind::GaussianNoise, sigma, seed)?;
    let mut r = rng::stream(seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let pixels = scan
        .pixels()
        .iter()
        .map(|&v| (f64::from(v) + normal.sample(&mut r)) as f32)
        .collect();
    Ok(tagged(scan, pixels, spec))
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Symmetric reflection of an out-of-range index (`-1 -> 0`, `n -> n-1`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable Gaussian blur of a row-major plane with reflective borders.
pub fn blur_plane(pixels: &[f32], height: usize, width: usize, sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f64; pixels.len()];
    for y in 0..height {
        let row = &pixels[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (j, &w) in k.iter().enumerate() {
                acc += w * f64::from(row[reflect(x as isize + j as isize - r, width)]);
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0f32; pixels.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, &w) in k.iter().enumerate() {
                acc += w * tmp[reflect(y as isize + j as isize - r, height) * width + x];
            }
            out[y * width + x] = acc as f32;
        }
    }
    out
}

pub fn apply_gaussian_blur(scan: &Scan, kernel_sigma: f64) -> Result<Scan> {
    let spec = ShiftSpec::new(ShiftKind::GaussianBlur, kernel_sigma, 0)?;
    let pixels = blur_plane(scan.pixels(), scan.height(), scan.width(), kernel_sigma);
    Ok(tagged(scan, pixels, spec))
}

pub fn apply_gamma(scan: &Scan, gamma: f64) -> Result<Scan> {
    let spec = ShiftSpec::new(ShiftKind::Gamma, gamma, 0)?;
    let pixels = scan
        .pixels()
        .iter()
        .map(|&v| f64::from(v).powf(gamma) as f32)
        .collect();
    Ok(tagged(scan, pixels, spec))
}

/// Signal-dependent Poisson noise for a reduced dose.
pub fn apply_dose_sim(scan: &Scan, dose_factor: f64, seed: u64) -> Result<Scan> {
    apply_dose_sim_with_counts(scan, dose_factor, DEFAULT_DOSE_COUNTS, seed)
}

pub fn apply_dose_sim_with_counts(scan: &Scan, dose_factor: f64, counts: f64, seed: u64) -> Result<Scan> {
    let spec = ShiftSpec::new(ShiftKind::DoseSim, dose_factor, seed)?;
    if !(counts > 0.0 && counts.is_finite()) {
        return Err(Error::InvalidArgument(format!("dose counts {counts} must be positive")));
    }
    let mut r = rng::stream(seed);
    let scale = counts * dose_factor;
    let mut pixels = Vec::with_capacity(scan.pixels().len());
    for &v in scan.pixels() {
        let lambda = f64::from(v) * scale;
        let k = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| Error::Numerical(e.to_string()))?
                .sample(&mut r)
        } else {
            0.0
        };
        pixels.push((k / scale) as f32);
    }
    Ok(tagged(scan, pixels, spec))
}
