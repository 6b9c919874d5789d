//! Weight archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic          4 bytes  "AXR1"
//! config_len     u32
//! config         config_len bytes of canonical JSON (sorted keys, compact)
//! tensor_count   u32
//! tensor_count x {
//!     name_len   u32
//!     name       name_len bytes, UTF-8
//!     dtype      u8       0 = f32
//!     ndim       u32
//!     dims       ndim x u64
//!     offset     u64      byte offset into the payload
//! }
//! payload        f32 little-endian values, tensors back to back in table order
//! ```
//!
//! A discriminator-only archive simply omits the encoder and decoder tensors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdverxModel, ArchitectureConfig};
use crate::nn::Param;

pub const MAGIC: &[u8; 4] = b"AXR1";
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveSubset {
    Full,
    DiscriminatorOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveInfo {
    pub path: PathBuf,
    pub subset: ArchiveSubset,
    pub size_bytes: u64,
    pub tensors: usize,
    pub parameters: usize,
}

/// Canonical JSON: object keys sorted, no whitespace.
pub fn canonical_config_json(config: &ArchitectureConfig) -> Result<String> {
    // `Value` objects are ordered maps, so keys come out sorted.
    let v = serde_json::to_value(config)?;
    Ok(serde_json::to_string(&v)?)
}

fn selected(model: &AdverxModel<f32>, subset: ArchiveSubset) -> Result<Vec<&Param<f32>>> {
    match subset {
        ArchiveSubset::Full => {
            model.generator()?;
            Ok(model.params())
        }
        ArchiveSubset::DiscriminatorOnly => Ok(model.discriminator.params()),
    }
}

/// Archive bytes for `model`.
pub fn encode_model(model: &AdverxModel<f32>, subset: ArchiveSubset) -> Result<Vec<u8>> {
    let params = selected(model, subset)?;
    let config = canonical_config_json(&model.config)?;
    let payload_len: usize = params.iter().map(|p| 4 * p.len()).sum();
    let mut out = Vec::with_capacity(payload_len + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32::try_from(config.len()).map_err(|_| Error::Internal("config too long".into()))?.to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for p in &params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * p.len() as u64;
    }
    for p in &params {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_model(model: &AdverxModel<f32>, path: impl AsRef<Path>, subset: ArchiveSubset) -> Result<ArchiveInfo> {
    let path = path.as_ref();
    let bytes = encode_model(model, subset)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let params = selected(model, subset)?;
    Ok(ArchiveInfo {
        path: path.to_path_buf(),
        subset,
        size_bytes: bytes.len() as u64,
        tensors: params.len(),
        parameters: params.iter().map(|p| p.len()).sum(),
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptArchive(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct TableEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Parse archive bytes. `expected` rejects an archive of the other subset.
pub fn decode_model(bytes: &[u8], expected: Option<ArchiveSubset>) -> Result<(AdverxModel<f32>, ArchiveSubset)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing AXR1 magic".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let clen = r.u32("config length")? as usize;
    let cjson = std::str::from_utf8(r.take(clen, "config")?)
        .map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let config: ArchitectureConfig =
        serde_json::from_str(cjson).map_err(|e| Error::Schema(format!("config: {e}")))?;
    config.validate().map_err(|e| Error::Schema(format!("config: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let nlen = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let ndim = r.u32("rank")? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("tensor `{name}` has rank {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64("offset")?;
        table.push(TableEntry { name, shape, offset });
    }
    let payload = &bytes[r.pos..];

    let mut model = AdverxModel::<f32>::new(config, 0).map_err(|e| Error::Schema(e.to_string()))?;
    let has_generator = table.iter().any(|t| !t.name.starts_with("discriminator."));
    let subset = if has_generator {
        ArchiveSubset::Full
    } else {
        ArchiveSubset::DiscriminatorOnly
    };
    if let Some(want) = expected {
        if want != subset {
            return Err(Error::Schema(format!("expected a {want:?} archive, found {subset:?}")));
        }
    }
    if subset == ArchiveSubset::DiscriminatorOnly {
        model.generator = None;
    }

    let mut by_name: BTreeMap<&str, &TableEntry> = BTreeMap::new();
    for t in &table {
        if by_name.insert(&t.name, t).is_some() {
            return Err(Error::Schema(format!("tensor `{}` appears twice", t.name)));
        }
    }
    let mut params = model.params_mut();
    let known: std::collections::BTreeSet<String> = params.iter().map(|p| p.name.clone()).collect();
    if let Some(extra) = table.iter().find(|t| !known.contains(&t.name)) {
        return Err(Error::Schema(format!("tensor `{}` is not part of the architecture", extra.name)));
    }
    for p in params.iter() {
        let t = by_name
            .get(p.name.as_str())
            .ok_or_else(|| Error::Schema(format!("tensor `{}` is missing", p.name)))?;
        if t.shape != p.shape {
            return Err(Error::Schema(format!(
                "tensor `{}` has shape {:?}, architecture expects {:?}",
                p.name, t.shape, p.shape
            )));
        }
    }
    // Offsets must follow the declared order without gaps or overlap.
    let mut expected_offset = 0u64;
    for t in &table {
        if t.offset != expected_offset {
            return Err(Error::CorruptArchive(format!(
                "tensor `{}` at offset {} but {} expected",
                t.name, t.offset, expected_offset
            )));
        }
        expected_offset += 4 * t.shape.iter().product::<usize>() as u64;
    }
    if (payload.len() as u64) < expected_offset {
        return Err(Error::CorruptArchive(format!(
            "payload holds {} bytes, table needs {expected_offset}",
            payload.len()
        )));
    }
    if payload.len() as u64 > expected_offset {
        return Err(Error::CorruptArchive(format!(
            "{} trailing bytes after the payload",
            payload.len() as u64 - expected_offset
        )));
    }
    for p in params.iter_mut() {
        let t = by_name[p.name.as_str()];
        let start = t.offset as usize;
        let raw = &payload[start..start + 4 * p.len()];
        for (v, c) in p.value.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().unwrap());
        }
        p.zero_grad();
    }
    drop(params);
    Ok((model, subset))
}

pub fn load_model(path: impl AsRef<Path>, expected: Option<ArchiveSubset>) -> Result<AdverxModel<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_model(&bytes, expected)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::PatchBatch;
    use crate::rng;

    fn toy() -> AdverxModel<f32> {
        AdverxModel::new(ArchitectureConfig::toy(), 21).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = toy();
        let bytes = encode_model(&m, ArchiveSubset::Full).unwrap();
        let (back, subset) = decode_model(&bytes, Some(ArchiveSubset::Full)).unwrap();
        assert_eq!(subset, ArchiveSubset::Full);
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(bytes, encode_model(&back, ArchiveSubset::Full).unwrap());
    }

    #[test]
    fn discriminator_only_archives() {
        let m = toy();
        let full = encode_model(&m, ArchiveSubset::Full).unwrap();
        let disc = encode_model(&m, ArchiveSubset::DiscriminatorOnly).unwrap();
        assert!(full.len() > disc.len());
        let (d, subset) = decode_model(&disc, None).unwrap();
        assert_eq!(subset, ArchiveSubset::DiscriminatorOnly);
        assert!(d.generator.is_none());
        assert!(matches!(decode_model(&disc, Some(ArchiveSubset::Full)), Err(Error::Schema(_))));
        assert!(crate::training::Trainer::new(d.clone(), Default::default()).is_err());

        let px: Vec<f32> = rng::normals(&mut rng::stream(1), 4 * 256).iter().map(|v| (0.5 + 0.1 * v).clamp(0.0, 1.0) as f32).collect();
        let b = PatchBatch::from_raw(px, 16, "b").unwrap();
        assert_eq!(m.discriminate(&b).unwrap(), d.discriminate(&b).unwrap());
        assert_eq!(disc, encode_model(&d, ArchiveSubset::DiscriminatorOnly).unwrap());
    }

    #[test]
    fn default_discriminator_archive_fits_the_budget() {
        let m = AdverxModel::<f32>::discriminator_only(ArchitectureConfig::default(), 0).unwrap();
        let bytes = encode_model(&m, ArchiveSubset::DiscriminatorOnly).unwrap();
        assert!(bytes.len() <= 20 * 1024 * 1024, "{}", bytes.len());
        assert!(bytes.len() > 4 * 2_795_969);
    }

    #[test]
    fn corruption_is_classified() {
        let m = toy();
        let bytes = encode_model(&m, ArchiveSubset::Full).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad, None), Err(Error::Format(_))));
        assert!(matches!(decode_model(&bytes[..bytes.len() - 3], None), Err(Error::CorruptArchive(_))));
        assert!(matches!(decode_model(&bytes[..40], None), Err(Error::CorruptArchive(_))));

        // Perturb the first dimension of the first tensor.
        let clen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut pos = 8 + clen + 4;
        let nlen = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let name = std::str::from_utf8(&bytes[pos + 4..pos + 4 + nlen]).unwrap().to_string();
        pos += 4 + nlen + 1 + 4;
        let mut bad = bytes.clone();
        let d0 = u64::from_le_bytes(bad[pos..pos + 8].try_into().unwrap());
        bad[pos..pos + 8].copy_from_slice(&(d0 + 1).to_le_bytes());
        match decode_model(&bad, None) {
            Err(Error::Schema(msg)) => assert!(msg.contains(&name), "{msg}"),
            other => panic!("expected a schema error, got {other:?}"),
        }
    }

    #[test]
    fn config_json_is_canonical() {
        let s = canonical_config_json(&ArchitectureConfig::toy()).unwrap();
        assert!(!s.contains(' '));
        let keys: Vec<&str> = s.split('"').skip(1).step_by(2).filter(|k| k.chars().all(|c| c.is_ascii_lowercase() || c == '_')).collect();
        assert!(s.starts_with("{\"decoder_channels\""), "{s}");
        assert!(keys.contains(&"patch_size"));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy();
        let info = save_model(&m, dir.path().join("a/m.axr"), ArchiveSubset::DiscriminatorOnly).unwrap();
        assert_eq!(info.size_bytes, std::fs::metadata(&info.path).unwrap().len());
        assert_eq!(info.parameters, m.parameter_count().discriminator);
        let back = load_model(&info.path, Some(ArchiveSubset::DiscriminatorOnly)).unwrap();
        assert_eq!(back.parameter_count().discriminator, info.parameters);
        assert!(matches!(load_model(dir.path().join("nope"), None), Err(Error::Io { .. })));
    }
}
