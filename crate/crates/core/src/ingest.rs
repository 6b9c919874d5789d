//! Scan loading, intensity normalization and dataset manifests.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dicom_core::value::{PrimitiveValue, Value};
use dicom_core::value::DicomValueType as _;
use dicom_dictionary_std::tags;
use image::DynamicImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::shiftgen::ShiftSpec;

pub const MANIFEST_MAGIC: &str = "#adverx-manifest v1";
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanFormat {
    Dicom,
    Png8,
    Png16,
}

impl ScanFormat {
    /// Format implied by a file name. PNG files report [`ScanFormat::Png16`]
    /// as a provisional answer; [`load_scan_auto`] settles the depth from
    /// the file itself.
    pub fn from_extension(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "dcm" | "dicom" => Some(ScanFormat::Dicom),
            "png" => Some(ScanFormat::Png16),
            _ => None,
        }
    }
}

/// Options that change how raw pixel values are interpreted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Declared bits per pixel for data stored in a wider container, e.g.
    /// 12-bit data in a 16-bit PNG.
    pub bit_depth: Option<u8>,
}

/// One grayscale image with intensities normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pixels: Vec<f32>,
    height: usize,
    width: usize,
    bit_depth: u8,
    pub group_key: String,
    pub source_path: String,
    /// Set when a colour source was reduced to one channel by averaging.
    pub luminance_reduced: bool,
    /// Set by the synthetic shift generators.
    pub shift: Option<ShiftSpec>,
}

fn check_bit_depth(bits: u8) -> Result<()> {
    if matches!(bits, 8 | 12 | 16) {
        Ok(())
    } else {
        Err(Error::UnsupportedInput(format!(
            "bit depth {bits} (supported: 8, 12, 16)"
        )))
    }
}

impl Scan {
    /// Build a scan from already-normalized pixels (row-major).
    pub fn new(pixels: Vec<f32>, height: usize, width: usize, bit_depth: u8) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "scan dimensions {height}x{width} must be at least 1x1"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} scan",
                pixels.len()
            )));
        }
        check_bit_depth(bit_depth)?;
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::CorruptPixelData(format!(
                "normalized intensity {v} outside [0, 1]"
            )));
        }
        Ok(Scan {
            pixels,
            height,
            width,
            bit_depth,
            group_key: String::new(),
            source_path: String::new(),
            luminance_reduced: false,
            shift: None,
        })
    }

    /// Normalize raw integer samples by `2^bit_depth - 1`.
    pub fn from_raw(raw: &[u16], height: usize, width: usize, bit_depth: u8) -> Result<Self> {
        check_bit_depth(bit_depth)?;
        let max = max_value(bit_depth);
        if let Some(v) = raw.iter().find(|&&v| u32::from(v) > max) {
            return Err(Error::CorruptPixelData(format!(
                "raw value {v} exceeds {bit_depth}-bit range"
            )));
        }
        let scale = max as f64;
        let pixels = raw.iter().map(|&v| (f64::from(v) / scale) as f32).collect();
        Scan::new(pixels, height, width, bit_depth)
    }

    pub fn with_source(mut self, source_path: impl Into<String>, group_key: impl Into<String>) -> Self {
        self.source_path = source_path.into();
        self.group_key = group_key.into();
        self
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn id(&self) -> &str {
        &self.source_path
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Replace the pixel buffer, keeping dimensions and metadata. Values are
    /// clamped into `[0, 1]`.
    pub(crate) fn map_pixels(&self, pixels: Vec<f32>) -> Scan {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Scan {
            pixels: pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Raw integer samples at the scan's bit depth (the inverse of the
    /// normalization for lossless sources).
    pub fn to_raw(&self) -> Vec<u16> {
        let scale = max_value(self.bit_depth) as f64;
        self.pixels
            .iter()
            .map(|&v| (f64::from(v) * scale).round() as u16)
            .collect()
    }

    /// Write a 16-bit grayscale PNG spanning the full 16-bit range, so the
    /// file reloads without a declared bit depth.
    pub fn write_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let raw: Vec<u16> = self
            .pixels
            .iter()
            .map(|&v| (f64::from(v) * 65535.0).round() as u16)
            .collect();
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Internal("pixel buffer does not match scan size".into()))?
            .save(path)?;
        Ok(())
    }
}

fn max_value(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Load a scan in the declared format.
pub fn load_scan(path: impl AsRef<Path>, format: ScanFormat) -> Result<Scan> {
    load_scan_with(path, format, &LoadOptions::default())
}

pub fn load_scan_with(
    path: impl AsRef<Path>,
    format: ScanFormat,
    opts: &LoadOptions,
) -> Result<Scan> {
    let path = path.as_ref();
    let scan = match format {
        ScanFormat::Dicom => load_dicom(path, opts)?,
        ScanFormat::Png8 | ScanFormat::Png16 => load_png(path, Some(format), opts)?,
    };
    Ok(scan.with_source(path.to_string_lossy(), ""))
}

/// Load a scan, inferring the format from the extension and, for PNG, the
/// container depth.
pub fn load_scan_auto(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Scan> {
    let path = path.as_ref();
    let scan = match ScanFormat::from_extension(path) {
        Some(ScanFormat::Dicom) => load_dicom(path, opts)?,
        Some(_) => load_png(path, None, opts)?,
        None => {
            return Err(Error::UnsupportedInput(format!(
                "unrecognised scan extension: {}",
                path.display()
            )))
        }
    };
    Ok(scan.with_source(path.to_string_lossy(), ""))
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    Ok(reader.with_guessed_format().map_err(|e| Error::io(path, e))?.decode()?)
}

fn load_png(path: &Path, declared: Option<ScanFormat>, opts: &LoadOptions) -> Result<Scan> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let container: u8 = match img.color().bits_per_pixel() / u16::from(img.color().channel_count()) {
        8 => 8,
        16 => 16,
        other => {
            return Err(Error::UnsupportedInput(format!(
                "{}: {other}-bit channels",
                path.display()
            )))
        }
    };
    match (declared, container) {
        (Some(ScanFormat::Png8), 16) | (Some(ScanFormat::Png16), 8) => {
            return Err(Error::UnsupportedInput(format!(
                "{}: declared {:?} but file holds {container}-bit samples",
                path.display(),
                declared.unwrap()
            )))
        }
        _ => {}
    }
    let bits = opts.bit_depth.unwrap_or(container);
    check_bit_depth(bits)?;
    if bits > container {
        return Err(Error::InvalidArgument(format!(
            "declared bit depth {bits} exceeds the {container}-bit container"
        )));
    }

    let (raw, reduced): (Vec<u16>, bool) = match img {
        DynamicImage::ImageLuma8(b) => (b.into_raw().into_iter().map(u16::from).collect(), false),
        DynamicImage::ImageLuma16(b) => (b.into_raw(), false),
        other if other.color().channel_count() <= 2 => {
            // Gray with alpha: keep the gray channel.
            let raw = if container == 8 {
                other.to_luma8().into_raw().into_iter().map(u16::from).collect()
            } else {
                other.to_luma16().into_raw()
            };
            (raw, false)
        }
        other => {
            // Average the colour channels; alpha is ignored.
            let rgb: Vec<u16> = if container == 8 {
                other.to_rgb8().into_raw().into_iter().map(u16::from).collect()
            } else {
                other.to_rgb16().into_raw()
            };
            let raw = rgb
                .chunks_exact(3)
                .map(|px| {
                    let s: u32 = px.iter().map(|&v| u32::from(v)).sum();
                    (f64::from(s) / 3.0).round() as u16
                })
                .collect();
            (raw, true)
        }
    };
    let mut scan = Scan::from_raw(&raw, h, w, bits)?;
    scan.luminance_reduced = reduced;
    Ok(scan)
}

fn dicom_int(obj: &dicom_object::DefaultDicomObject, tag: dicom_core::Tag, name: &str) -> Result<u32> {
    obj.element(tag)
        .map_err(|e| Error::Dicom(format!("missing {name}: {e}")))?
        .to_int::<u32>()
        .map_err(|e| Error::Dicom(format!("bad {name}: {e}")))
}

fn dicom_str(obj: &dicom_object::DefaultDicomObject, tag: dicom_core::Tag) -> Option<String> {
    obj.element_opt(tag)
        .ok()
        .flatten()
        .and_then(|e| e.to_str().ok())
        .map(|s| s.trim().trim_end_matches('\0').trim().to_string())
        .filter(|s| !s.is_empty())
}

fn load_dicom(path: &Path, opts: &LoadOptions) -> Result<Scan> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let obj = dicom_object::open_file(path).map_err(|e| Error::Dicom(format!("{}: {e}", path.display())))?;

    let frames = dicom_str(&obj, tags::NUMBER_OF_FRAMES)
        .and_then(|s| s.parse::<u32>().ok())
        .unwrap_or(1);
    if frames != 1 {
        return Err(Error::UnsupportedInput(format!(
            "{}: multi-frame DICOM ({frames} frames)",
            path.display()
        )));
    }
    let samples = obj
        .element_opt(tags::SAMPLES_PER_PIXEL)
        .ok()
        .flatten()
        .and_then(|e| e.to_int::<u32>().ok())
        .unwrap_or(1);
    if samples != 1 {
        return Err(Error::UnsupportedInput(format!(
            "{}: {samples} samples per pixel",
            path.display()
        )));
    }
    let rows = dicom_int(&obj, tags::ROWS, "Rows")? as usize;
    let cols = dicom_int(&obj, tags::COLUMNS, "Columns")? as usize;
    let allocated = dicom_int(&obj, tags::BITS_ALLOCATED, "BitsAllocated")?;
    let stored = dicom_int(&obj, tags::BITS_STORED, "BitsStored").unwrap_or(allocated);
    let signed = obj
        .element_opt(tags::PIXEL_REPRESENTATION)
        .ok()
        .flatten()
        .and_then(|e| e.to_int::<u32>().ok())
        .unwrap_or(0);
    if signed != 0 {
        return Err(Error::UnsupportedInput(format!(
            "{}: signed pixel representation",
            path.display()
        )));
    }
    let photometric = dicom_str(&obj, tags::PHOTOMETRIC_INTERPRETATION)
        .unwrap_or_else(|| "MONOCHROME2".to_string());
    let invert = match photometric.as_str() {
        "MONOCHROME2" => false,
        "MONOCHROME1" => true,
        other => {
            return Err(Error::UnsupportedInput(format!(
                "{}: photometric interpretation {other}",
                path.display()
            )))
        }
    };
    let bits = opts.bit_depth.map(u32::from).unwrap_or(stored);
    if bits > allocated {
        return Err(Error::InvalidArgument(format!(
            "declared bit depth {bits} exceeds BitsAllocated {allocated}"
        )));
    }
    let bits = u8::try_from(bits).map_err(|_| Error::UnsupportedInput(format!("bit depth {bits}")))?;
    check_bit_depth(bits)?;

    let pixel_el = obj
        .element(tags::PIXEL_DATA)
        .map_err(|e| Error::Dicom(format!("missing PixelData: {e}")))?;
    let raw: Vec<u16> = match pixel_el.value() {
        Value::Primitive(p) => match (p, allocated) {
            (PrimitiveValue::U16(v), 16) => v.to_vec(),
            (PrimitiveValue::U8(v), 16) => v
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect(),
            (PrimitiveValue::U8(v), 8) => v.iter().map(|&b| u16::from(b)).collect(),
            (PrimitiveValue::U16(v), 8) => v
                .iter()
                .flat_map(|w| w.to_le_bytes())
                .map(u16::from)
                .collect(),
            (other, _) => {
                return Err(Error::UnsupportedInput(format!(
                    "{}: pixel data stored as {:?} with {allocated} bits allocated",
                    path.display(),
                    other.value_type()
                )))
            }
        },
        _ => {
            return Err(Error::UnsupportedInput(format!(
                "{}: encapsulated (compressed) pixel data",
                path.display()
            )))
        }
    };
    if raw.len() < rows * cols {
        return Err(Error::CorruptPixelData(format!(
            "{}: {} samples for {rows}x{cols}",
            path.display(),
            raw.len()
        )));
    }
    let mut raw = raw;
    raw.truncate(rows * cols);
    let max = max_value(bits);
    if let Some(v) = raw.iter().find(|&&v| u32::from(v) > max) {
        return Err(Error::CorruptPixelData(format!(
            "{}: raw value {v} exceeds {bits}-bit range",
            path.display()
        )));
    }
    if invert {
        raw.iter_mut().for_each(|v| *v = (max - u32::from(*v)) as u16);
    }
    Scan::from_raw(&raw, rows, cols, bits)
}

/// Grouping strategy for [`build_manifest`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    /// Parent directory relative to the dataset root.
    Directory,
    /// DICOM device model (falling back to manufacturer); non-DICOM files
    /// fall back to the directory rule.
    MetadataTag,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest root, `/`-separated.
    pub path: String,
    pub group_key: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory that entry paths are resolved against.
    pub root: PathBuf,
    entries: Vec<ManifestEntry>,
    pub split_seed: u64,
    pub train_fraction: f64,
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "train fraction {f} must lie strictly between 0 and 1"
        )))
    }
}

impl Manifest {
    pub fn new(
        root: impl Into<PathBuf>,
        entries: Vec<ManifestEntry>,
        split_seed: u64,
        train_fraction: f64,
    ) -> Result<Self> {
        check_fraction(train_fraction)?;
        let mut seen = BTreeSet::new();
        for e in &entries {
            if e.group_key.trim().is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "entry {} has an empty group key",
                    e.path
                )));
            }
            if e.group_key.contains(['\t', '\n']) || e.path.contains(['\t', '\n']) {
                return Err(Error::InvalidArgument(format!(
                    "entry {} contains a tab or newline",
                    e.path
                )));
            }
            if !seen.insert(e.path.as_str()) {
                return Err(Error::DuplicateEntry(e.path.clone()));
            }
        }
        Ok(Manifest {
            root: root.into(),
            entries,
            split_seed,
            train_fraction,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.group_key.as_str()).collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Load every entry. The scan id is the manifest-relative path.
    pub fn load_scans(&self, opts: &LoadOptions) -> Result<Vec<Scan>> {
        self.entries.iter().map(|e| self.load_entry(e, opts)).collect()
    }

    pub fn load_entry(&self, entry: &ManifestEntry, opts: &LoadOptions) -> Result<Scan> {
        let scan = load_scan_auto(self.resolve(entry), opts)?;
        Ok(scan.with_source(entry.path.clone(), entry.group_key.clone()))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{MANIFEST_MAGIC} seed={} train_fraction={}\n",
            self.split_seed, self.train_fraction
        );
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}", e.path, e.group_key);
        }
        out
    }

    /// Parse manifest text; relative entry paths resolve against `root`.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::ManifestParse {
            line: 1,
            message: "empty manifest".into(),
        })?;
        let rest = header.strip_prefix(MANIFEST_MAGIC).ok_or(Error::ManifestParse {
            line: 1,
            message: format!("expected header starting with `{MANIFEST_MAGIC}`"),
        })?;
        let mut seed = None;
        let mut fraction = None;
        for field in rest.split_whitespace() {
            let bad = |m: String| Error::ManifestParse { line: 1, message: m };
            match field.split_once('=') {
                Some(("seed", v)) => {
                    seed = Some(v.parse::<u64>().map_err(|e| bad(format!("seed: {e}")))?)
                }
                Some(("train_fraction", v)) => {
                    fraction =
                        Some(v.parse::<f64>().map_err(|e| bad(format!("train_fraction: {e}")))?)
                }
                _ => return Err(bad(format!("unknown header field `{field}`"))),
            }
        }
        let (seed, fraction) = match (seed, fraction) {
            (Some(s), Some(f)) => (s, f),
            _ => {
                return Err(Error::ManifestParse {
                    line: 1,
                    message: "header needs seed= and train_fraction=".into(),
                })
            }
        };
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (path, group) = line.split_once('\t').ok_or(Error::ManifestParse {
                line: i + 1,
                message: "expected `<path>\\t<group_key>`".into(),
            })?;
            entries.push(ManifestEntry {
                path: path.to_string(),
                group_key: group.to_string(),
            });
        }
        Manifest::new(root, entries, seed, fraction)
    }

    /// Read a manifest file; entries resolve against the file's directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(&text, root)
    }

    /// Write the manifest, rewriting entry paths so they resolve relative to
    /// the file's own directory (absolute when the root lies elsewhere).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let rebased = self.rebased(&dir);
        fs::write(path, rebased.to_text()).map_err(|e| Error::io(path, e))
    }

    fn rebased(&self, dir: &Path) -> Manifest {
        let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
        let (root, dir) = (abs(&self.root), abs(dir));
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let full = if Path::new(&e.path).is_absolute() {
                    PathBuf::from(&e.path)
                } else {
                    root.join(&e.path)
                };
                let path = match full.strip_prefix(&dir) {
                    Ok(rel) => to_slash(rel),
                    Err(_) => full.to_string_lossy().into_owned(),
                };
                ManifestEntry {
                    path,
                    group_key: e.group_key.clone(),
                }
            })
            .collect();
        Manifest {
            root: dir,
            entries,
            split_seed: self.split_seed,
            train_fraction: self.train_fraction,
        }
    }
}

fn to_slash(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn directory_group(rel: &Path, root: &Path) -> String {
    match rel.parent() {
        Some(parent) if !parent.as_os_str().is_empty() => to_slash(parent),
        _ => root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "root".to_string()),
    }
}

fn metadata_group(path: &Path) -> Option<String> {
    if ScanFormat::from_extension(path) != Some(ScanFormat::Dicom) {
        return None;
    }
    let obj = dicom_object::OpenFileOptions::new()
        .read_until(tags::PIXEL_DATA)
        .open_file(path)
        .ok()?;
    dicom_str(&obj, tags::MANUFACTURER_MODEL_NAME).or_else(|| dicom_str(&obj, tags::MANUFACTURER))
}

/// Discover scans under `root_dir` and group them.
pub fn build_manifest(root_dir: impl AsRef<Path>, group_by: GroupBy) -> Result<Manifest> {
    let root = root_dir.as_ref();
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut entries = Vec::new();
    for item in walkdir::WalkDir::new(root).follow_links(true) {
        let item = item.map_err(|e| {
            let p = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            Error::io(p, e.into())
        })?;
        if !item.file_type().is_file() || ScanFormat::from_extension(item.path()).is_none() {
            continue;
        }
        let rel = item.path().strip_prefix(root).expect("walkdir stays under root");
        let group_key = match group_by {
            GroupBy::Directory => directory_group(rel, root),
            GroupBy::MetadataTag => {
                metadata_group(item.path()).unwrap_or_else(|| directory_group(rel, root))
            }
        };
        entries.push(ManifestEntry {
            path: to_slash(rel),
            group_key,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no scans found under {}",
            root.display()
        )));
    }
    entries.sort();
    Manifest::new(root, entries, 0, DEFAULT_TRAIN_FRACTION)
}

/// Seeded per-image split into (train, test). `|train| = floor(fraction * N)`.
pub fn split_manifest(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    check_fraction(train_fraction)?;
    let n = manifest.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "cannot split {n} entries"
        )));
    }
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InsufficientData(format!(
            "fraction {train_fraction} of {n} entries leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed));
    let pick = |idx: &[usize]| {
        let mut e: Vec<ManifestEntry> = idx.iter().map(|&i| manifest.entries[i].clone()).collect();
        e.sort();
        Manifest {
            root: manifest.root.clone(),
            entries: e,
            split_seed: seed,
            train_fraction,
        }
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}
