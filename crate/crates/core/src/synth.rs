//! Procedural filtered-noise textures standing in for in-distribution scans.
//!
//! Each texture is a sum of band-limited Gaussian random fields at three
//! scales plus a faint white-noise floor, offset to mid-gray and clamped.
//! Per-scan amplitudes are jittered so the corpus is a family, not copies.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::Scan;
use crate::rng;
use crate::shiftgen::blur_plane;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub size: usize,
    /// `(blur sigma, amplitude)` per band.
    pub bands: Vec<(f64, f64)>,
    /// Relative amplitude jitter per band and scan, uniform in `1 ± jitter`.
    pub jitter: f64,
    pub floor_noise: f64,
    pub offset: f64,
    /// Bit depth recorded on generated scans.
    pub bit_depth: u8,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            size: 512,
            bands: vec![(16.0, 0.12), (4.0, 0.06), (1.0, 0.03)],
            jitter: 0.2,
            floor_noise: 0.01,
            offset: 0.5,
            bit_depth: 16,
        }
    }
}

fn standardize(v: &mut [f32]) {
    let n = v.len() as f64;
    let m = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let sd = (v.iter().map(|&x| (f64::from(x) - m).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    v.iter_mut().for_each(|x| *x = ((f64::from(*x) - m) / sd) as f32);
}

/// One texture; fully determined by `(spec, seed)`.
pub fn texture(spec: &TextureSpec, seed: u64) -> Result<Scan> {
    let n = spec.size;
    let mut r = rng::stream(seed);
    let mut acc = vec![spec.offset; n * n];
    for (band, &(sigma, amp)) in spec.bands.iter().enumerate() {
        let gain = amp * r.gen_range(1.0 - spec.jitter..=1.0 + spec.jitter);
        let mut field = rng::normals(&mut rng::stream(rng::derive(seed, &[band as u64])), n * n)
            .into_iter()
            .map(|v| v as f32)
            .collect::<Vec<_>>();
        field = blur_plane(&field, n, n, sigma);
        standardize(&mut field);
        for (a, &f) in acc.iter_mut().zip(&field) {
            *a += gain * f64::from(f);
        }
    }
    if spec.floor_noise > 0.0 {
        let floor = rng::normals(&mut rng::stream(rng::derive(seed, &[u64::MAX])), n * n);
        for (a, f) in acc.iter_mut().zip(floor) {
            *a += spec.floor_noise * f;
        }
    }
    let pixels = acc.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    let scan = Scan::new(pixels, n, n, spec.bit_depth)?;
    Ok(scan.with_source(format!("synth/{seed:06}"), "synth"))
}

/// `count` textures with seeds derived from `seed`.
pub fn corpus(spec: &TextureSpec, count: usize, seed: u64) -> Result<Vec<Scan>> {
    (0..count)
        .map(|i| {
            let s = texture(spec, rng::derive(seed, &[i as u64]))?;
            Ok(s.with_source(format!("synth/{i:04}"), "synth"))
        })
        .collect()
}
