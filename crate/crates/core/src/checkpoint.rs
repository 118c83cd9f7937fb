//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes      | content                                   |
//! |------------|-------------------------------------------|
//! | 0..4       | magic `NGZC`                              |
//! | 4..8       | `u32` header length `n`                   |
//! | 8..8+n     | UTF-8 JSON header                         |
//! | 8+n..      | `f32` tensors, back to back, in the order of `header.tensors` |
//!
//! The header holds the format version, the model config, the perceptual
//! extractor identity, the latent-bank keys, a name/length table for every
//! tensor and a CRC-32 of the tensor bytes. Network tensors come first
//! (face field, eye field, regressors, decoder), then latents (subjects,
//! then frames, each sorted by id).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExtractorSpec, LatentBank, ModelBundle, ModelConfig, Networks};
use crate::nn::Parameters;

pub const MAGIC: &[u8; 4] = b"NGZC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameKey {
    pub id: String,
    pub subject: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model: ModelConfig,
    pub extractor: ExtractorSpec,
    pub subjects: Vec<String>,
    pub frames: Vec<FrameKey>,
    pub tensors: Vec<TensorEntry>,
    pub crc32: u32,
}

fn table(p: &dyn Parameters<f32>, prefix: &str, out: &mut Vec<TensorEntry>, blob: &mut Vec<u8>) {
    p.visit(prefix, &mut |name, s| {
        out.push(TensorEntry {
            name: name.to_string(),
            len: s.len(),
        });
        for v in s {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
}

pub fn to_bytes(bundle: &ModelBundle<f32>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    table(&bundle.networks, "net", &mut tensors, &mut blob);
    table(&bundle.latents, "latent", &mut tensors, &mut blob);
    let header = Header {
        format_version: FORMAT_VERSION,
        model: bundle.config.clone(),
        extractor: bundle.extractor.clone(),
        subjects: bundle.latents.subjects.keys().cloned().collect(),
        frames: bundle
            .latents
            .frames
            .iter()
            .map(|(id, f)| FrameKey {
                id: id.clone(),
                subject: f.subject.clone(),
            })
            .collect(),
        tensors,
        crc32: crc32fast::hash(&blob),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Writes through a temporary sibling file so a failed save never leaves a
/// truncated checkpoint behind.
pub fn save_checkpoint(bundle: &ModelBundle<f32>, path: &Path) -> Result<()> {
    let bytes = to_bytes(bundle)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing NGZC magic".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(8..8 + n)
        .ok_or_else(|| Error::Corrupt(format!("header length {n} exceeds file size {}", bytes.len())))?;
    let raw: serde_json::Value = serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Corrupt("header has no format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            what: "checkpoint",
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    Ok((header, &bytes[8 + n..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle<f32>> {
    let (header, blob) = read_header(bytes)?;
    header.model.validate().map_err(|e| Error::Corrupt(format!("stored model config: {e}")))?;
    header.extractor.build()?;
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if blob.len() != total * 4 {
        return Err(Error::Corrupt(format!(
            "tensor data is {} bytes, header describes {}",
            blob.len(),
            total * 4
        )));
    }
    if crc32fast::hash(blob) != header.crc32 {
        return Err(Error::Corrupt("tensor data checksum mismatch".into()));
    }
    let mut networks = Networks::<f32>::zeros(&header.model);
    let mut latents = LatentBank::<f32>::zeros(
        &header.model.latent,
        header.subjects.iter().map(String::as_str),
        header.frames.iter().map(|f| (f.id.as_str(), f.subject.as_str())),
    );
    for f in &header.frames {
        if !latents.subjects.contains_key(&f.subject) {
            return Err(Error::Corrupt(format!("frame `{}` names unknown subject `{}`", f.id, f.subject)));
        }
    }
    let mut entries = header.tensors.iter();
    let mut offset = 0;
    let mut problem: Option<String> = None;
    let mut fill = |name: &str, s: &mut [f32]| {
        if problem.is_some() {
            return;
        }
        match entries.next() {
            Some(e) if e.name == name && e.len == s.len() => {
                for (k, v) in s.iter_mut().enumerate() {
                    let b = offset + 4 * k;
                    *v = f32::from_le_bytes(blob[b..b + 4].try_into().expect("4 bytes"));
                }
                offset += 4 * s.len();
            }
            Some(e) => problem = Some(format!("tensor `{}` ({}) where `{name}` ({}) was expected", e.name, e.len, s.len())),
            None => problem = Some(format!("tensor table ends before `{name}`")),
        }
    };
    networks.visit_mut("net", &mut fill);
    latents.visit_mut("latent", &mut fill);
    if let Some(p) = problem {
        return Err(Error::Corrupt(p));
    }
    if let Some(extra) = entries.next() {
        return Err(Error::Corrupt(format!("unexpected extra tensor `{}`", extra.name)));
    }
    Ok(ModelBundle {
        config: header.model,
        networks,
        latents,
        extractor: header.extractor,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle<f32>> {
    from_bytes(&fs::read(path)?)
}
