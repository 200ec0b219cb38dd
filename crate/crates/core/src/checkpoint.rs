//! Binary weight archive plus a JSON manifest.
//!
//! Archive layout, all integers little-endian:
//!
//! ```text
//! "VIGC"  version:u8  count:u32
//! count × { name_len:u16  name:utf8  dtype:u8  rank:u8  extents:u32×rank  elements }
//! ```
//!
//! The manifest, written next to the archive as `<archive>.json`, lists the records in
//! order with their byte offsets and echoes the model config so the model can be rebuilt.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VigError};
use crate::model::{ConfigFile, Model, ModelConfig};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"VIGC";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: TensorKind,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Start of the record (its name length field).
    pub offset: u64,
    /// Start of the element bytes.
    pub data_offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u8,
    pub config: Option<ModelConfig>,
    pub tensors: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn param_elements(&self) -> usize {
        self.tensors
            .iter()
            .filter(|e| e.kind == TensorKind::Param)
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }
}

/// One tensor read back from an archive, widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

pub fn manifest_path(archive: &Path) -> PathBuf {
    let mut s = archive.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Serialize named tensors; returns the archive bytes and the manifest entries.
pub fn encode<'a, T: Element>(
    tensors: impl IntoIterator<Item = (&'a str, TensorKind, &'a Tensor<T>)>,
) -> Result<(Vec<u8>, Vec<ManifestEntry>)> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| VigError::Format("too many tensors".into()))?.to_le_bytes());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, kind, t) in tensors {
        let offset = out.len() as u64;
        let name_len =
            u16::try_from(name.len()).map_err(|_| VigError::Format(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| VigError::Format(format!("rank too high: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| VigError::Format(format!("extent too large: {name}")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        let data_offset = out.len() as u64;
        for &v in t.data() {
            v.write_le(&mut out);
        }
        entries.push(ManifestEntry {
            name: name.to_owned(),
            kind,
            dtype: dtype_name(T::DTYPE).into(),
            shape: t.shape().to_vec(),
            offset,
            data_offset,
            nbytes: out.len() as u64 - data_offset,
        });
    }
    Ok((out, entries))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            VigError::Format(format!("truncated archive at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(VigError::Format("not a VIGC archive".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(VigError::Format(format!("unsupported archive version {version}")));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| VigError::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| VigError::Format(format!("unknown dtype tag {tag}")))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * dtype.size())?;
        let values = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        records.push(Record {
            name,
            dtype,
            shape,
            values,
        });
    }
    if r.pos != bytes.len() {
        return Err(VigError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(records)
}

impl<T: Element> Model<T> {
    /// Write the archive and its manifest; returns the manifest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let tensors = self
            .store
            .params()
            .iter()
            .map(|(n, t)| (n.as_str(), TensorKind::Param, t))
            .chain(self.store.buffers().iter().map(|(n, t)| (n.as_str(), TensorKind::Buffer, t)));
        let (bytes, entries) = encode(tensors)?;
        let manifest = Manifest {
            format: "VIGC".into(),
            version: VERSION,
            config: Some(self.config().clone()),
            tensors: entries,
        };
        fs::write(path, bytes)?;
        fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Rebuild a model from an archive and its manifest.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(path))?)?;
        let config = manifest
            .config
            .clone()
            .ok_or_else(|| VigError::Format("manifest carries no model config".into()))?;
        let mut model = Model::structure(config)?;
        model.load_weights(path)?;
        Ok(model)
    }

    /// Overwrite every parameter and buffer from an archive with the same layout.
    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let records = decode(&fs::read(path.as_ref())?)?;
        let expected = self.store.params().len() + self.store.buffers().len();
        if records.len() != expected {
            return Err(VigError::Format(format!(
                "archive holds {} tensors, model has {expected}",
                records.len()
            )));
        }
        for rec in records {
            let t = Tensor::new(rec.shape, rec.values.into_iter().map(T::lit).collect())?;
            self.store.assign(&rec.name, t)?;
        }
        Ok(())
    }
}

/// Config from a preset name or JSON file, as used by the tools.
pub fn resolve_config(preset: Option<&str>, config: Option<&Path>) -> Result<ModelConfig> {
    match (preset, config) {
        (_, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| VigError::config(path.display().to_string(), e.to_string()))?;
            let mut file = ConfigFile::parse(&text)?;
            if file.preset.is_none() && file.kind.is_none() {
                file.preset = preset.map(str::to_owned);
            }
            file.resolve()
        }
        (Some(name), None) => ConfigFile {
            preset: Some(name.to_owned()),
            ..Default::default()
        }
        .resolve(),
        (None, None) => Err(VigError::config("preset", "give --preset or --config")),
    }
}
