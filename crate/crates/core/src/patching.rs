//! Region of interest and patch sampling.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Scan;
use crate::rng;

pub const DEFAULT_PATCH_SIZE: usize = 128;
pub const DEFAULT_MARGIN: f64 = 0.2;

/// Half-open row/column window: rows `[top, bottom)`, columns `[left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionOfInterest {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl RegionOfInterest {
    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }
}

/// Strip `floor(margin * extent)` from each side of both axes.
pub fn compute_roi(height: usize, width: usize, margin: f64) -> Result<RegionOfInterest> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("image size {height}x{width}")));
    }
    if !(0.0..0.5).contains(&margin) {
        return Err(Error::InvalidArgument(format!("margin {margin} outside [0, 0.5)")));
    }
    let mh = (margin * height as f64).floor() as usize;
    let mw = (margin * width as f64).floor() as usize;
    if 2 * mh >= height || 2 * mw >= width {
        return Err(Error::DegenerateRoi(format!(
            "margin {margin} leaves nothing of {height}x{width}"
        )));
    }
    Ok(RegionOfInterest {
        top: mh,
        bottom: height - mh,
        left: mw,
        right: width - mw,
    })
}

pub fn anchor_lattice_size(roi: &RegionOfInterest, patch_size: usize) -> usize {
    let rows = (roi.height() + 1).saturating_sub(patch_size);
    let cols = (roi.width() + 1).saturating_sub(patch_size);
    rows * cols
}

/// `K` square patches cut from one scan, stored contiguously `K x S x S`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    patches: Vec<f32>,
    source_scan_id: String,
    patch_size: usize,
    coordinates: Vec<(usize, usize)>,
}

impl PatchBatch {
    /// Cut patches at the given top-left anchors.
    pub fn from_anchors(scan: &Scan, patch_size: usize, anchors: Vec<(usize, usize)>) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::InvalidArgument("patch size 0".into()));
        }
        let (h, w) = (scan.height(), scan.width());
        let px = scan.pixels();
        let mut patches = Vec::with_capacity(anchors.len() * patch_size * patch_size);
        for &(r, c) in &anchors {
            if r + patch_size > h || c + patch_size > w {
                return Err(Error::InvalidArgument(format!(
                    "anchor ({r}, {c}) puts a {patch_size}px patch outside {h}x{w}"
                )));
            }
            for row in r..r + patch_size {
                patches.extend_from_slice(&px[row * w + c..row * w + c + patch_size]);
            }
        }
        Ok(PatchBatch {
            patches,
            source_scan_id: scan.id().to_string(),
            patch_size,
            coordinates: anchors,
        })
    }

    /// Wrap patches that were cut elsewhere (e.g. handed over a foreign
    /// interface). Anchors are unknown and recorded as `(0, 0)`.
    pub fn from_raw(patches: Vec<f32>, patch_size: usize, source_scan_id: impl Into<String>) -> Result<Self> {
        let item = patch_size * patch_size;
        if patch_size == 0 || patches.is_empty() || patches.len() % item != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form {patch_size}x{patch_size} patches",
                patches.len()
            )));
        }
        if patches.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("patch values must lie in [0, 1]".into()));
        }
        let k = patches.len() / item;
        Ok(PatchBatch {
            patches,
            source_scan_id: source_scan_id.into(),
            patch_size,
            coordinates: vec![(0, 0); k],
        })
    }

    pub fn len(&self) -> usize {
        self.coordinates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coordinates.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn source_scan_id(&self) -> &str {
        &self.source_scan_id
    }

    pub fn coordinates(&self) -> &[(usize, usize)] {
        &self.coordinates
    }

    pub fn data(&self) -> &[f32] {
        &self.patches
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let n = self.patch_size * self.patch_size;
        &self.patches[i * n..(i + 1) * n]
    }

    /// Write each patch as a 16-bit PNG named `<scan_id>_<row>_<col>.png`.
    /// Path separators in the scan id are replaced so files stay in `dir`.
    pub fn dump_png(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem: String = self
            .source_scan_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        let s = self.patch_size as u32;
        let mut out = Vec::with_capacity(self.len());
        for (i, &(r, c)) in self.coordinates.iter().enumerate() {
            let buf: Vec<u16> = self
                .patch(i)
                .iter()
                .map(|&v| (f64::from(v) * 65535.0).round() as u16)
                .collect();
            let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(s, s, buf)
                .ok_or_else(|| Error::Internal("patch buffer size".into()))?;
            let path = dir.join(format!("{stem}_{r}_{c}.png"));
            img.save(&path)?;
            out.push(path);
        }
        Ok(out)
    }
}

/// Draw `k` anchors uniformly, with replacement, from the ROI's anchor
/// lattice and cut the patches.
pub fn sample_patches(scan: &Scan, k: usize, patch_size: usize, margin: f64, rng_seed: u64) -> Result<PatchBatch> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let roi = compute_roi(scan.height(), scan.width(), margin)?;
    if roi.height() < patch_size || roi.width() < patch_size {
        return Err(Error::RoiTooSmall {
            roi_height: roi.height(),
            roi_width: roi.width(),
            patch_size,
        });
    }
    let mut r = rng::stream(rng_seed);
    let max_row = roi.bottom - patch_size;
    let max_col = roi.right - patch_size;
    let anchors = (0..k)
        .map(|_| (r.gen_range(roi.top..=max_row), r.gen_range(roi.left..=max_col)))
        .collect();
    PatchBatch::from_anchors(scan, patch_size, anchors)
}
