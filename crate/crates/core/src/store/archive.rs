use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Label, Split};
use crate::element::{DType, Float};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor, MAX_RANK};

pub const TENSOR_MAGIC: &[u8; 4] = b"LSPA";
pub const TENSOR_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.jsonl";
const CLIP_DIR: &str = "clips";

/// Serializes a tensor as `"LSPA" | u32 version | u8 dtype | u8 ndim |
/// u64 extents | f32 payload | u32 CRC32 of everything before it`.
pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + 8 * t.dims().len() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(DType::F32.code());
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format("not a latent tensor (bad magic)".into()));
    }
    if bytes.len() < 14 {
        return Err(Error::Corrupt("truncated latent tensor header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported latent tensor version {version}")));
    }
    if DType::from_code(bytes[8]) != Some(DType::F32) {
        return Err(Error::Format(format!("unsupported dtype code {}", bytes[8])));
    }
    let ndim = bytes[9] as usize;
    if ndim == 0 || ndim > MAX_RANK {
        return Err(Error::Corrupt(format!("latent tensor rank {ndim}")));
    }
    let header = 10 + 8 * ndim;
    if bytes.len() < header + 4 {
        return Err(Error::Corrupt("truncated latent tensor header".into()));
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    if crc32fast::hash(&bytes[..body]) != stored {
        return Err(Error::Corrupt("latent tensor checksum mismatch".into()));
    }
    let dims: Vec<usize> = bytes[10..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let shape = Shape::new(dims.clone()).map_err(|e| Error::Corrupt(e.to_string()))?;
    if shape.numel().checked_mul(4) != Some(body - header) {
        return Err(Error::Corrupt(format!("payload length does not match extents {shape}")));
    }
    let data = bytes[header..body].chunks_exact(4).map(f32::read_le).collect();
    Tensor::from_vec(dims, data)
}

fn checksum_of(encoded: &[u8]) -> u32 {
    u32::from_le_bytes(encoded[encoded.len() - 4..].try_into().unwrap())
}

#[derive(Debug, Clone)]
pub struct LatentClip {
    pub clip_id: String,
    pub split: Split,
    pub label: Label,
    pub source_id: String,
    pub fps: f64,
    /// `C×T×H×W`.
    pub tensor: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub split: Split,
    pub label: Label,
    pub source_id: String,
    pub fps: f64,
    pub dims: Vec<usize>,
    pub checksum: String,
    pub file: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    records: Vec<ClipRecord>,
    index: HashMap<String, usize>,
}

impl Manifest {
    pub fn new(records: Vec<ClipRecord>) -> Result<Self> {
        let mut m = Manifest::default();
        for r in records {
            m.push(r)?;
        }
        Ok(m)
    }

    fn push(&mut self, r: ClipRecord) -> Result<()> {
        if self.index.contains_key(&r.clip_id) {
            return Err(Error::Duplicate(format!("clip {}", r.clip_id)));
        }
        if let Some(other) = self.records.iter().find(|o| o.source_id == r.source_id && o.split != r.split) {
            return Err(Error::Stratification(format!(
                "source {} would appear in both {} and {}",
                r.source_id, other.split, r.split
            )));
        }
        self.index.insert(r.clip_id.clone(), self.records.len());
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[ClipRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.index.get(clip_id).map(|&i| &self.records[i])
    }

    /// Records of one split, in manifest order.
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn counts(&self) -> BTreeMap<(Split, Label), usize> {
        let mut c = BTreeMap::new();
        for r in &self.records {
            *c.entry((r.split, r.label)).or_insert(0) += 1;
        }
        c
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            records.push(
                serde_json::from_str(line).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?,
            );
        }
        Self::new(records)
    }
}

/// A directory holding `manifest.jsonl` and one tensor file per clip.
/// One writer at a time; readers only ever see complete manifests.
#[derive(Debug)]
pub struct Archive {
    root: PathBuf,
    manifest: Manifest,
}

impl Archive {
    /// Opens an existing archive or initializes an empty one.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if root.join(MANIFEST_FILE).exists() {
            return Self::open(root);
        }
        let clips = root.join(CLIP_DIR);
        fs::create_dir_all(&clips).map_err(|e| Error::io(&clips, e))?;
        let a = Self {
            root,
            manifest: Manifest::default(),
        };
        a.write_manifest()?;
        Ok(a)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("no archive manifest at {}", path.display())),
            _ => Error::io(&path, e),
        })?;
        Ok(Self {
            manifest: Manifest::from_jsonl(&text)?,
            root,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn write_latent(&mut self, clip: &LatentClip) -> Result<&ClipRecord> {
        validate_id(&clip.clip_id)?;
        if self.manifest.get(&clip.clip_id).is_some() {
            return Err(Error::Duplicate(format!("clip {}", clip.clip_id)));
        }
        let bytes = encode_tensor(&clip.tensor);
        let file = format!("{CLIP_DIR}/{}.lspa", clip.clip_id);
        let record = ClipRecord {
            clip_id: clip.clip_id.clone(),
            split: clip.split,
            label: clip.label,
            source_id: clip.source_id.clone(),
            fps: clip.fps,
            dims: clip.tensor.dims().to_vec(),
            checksum: format!("{:08x}", checksum_of(&bytes)),
            file: file.clone(),
        };
        let mut next = self.manifest.clone();
        next.push(record)?;
        atomic_write(&self.root.join(&file), &bytes)?;
        self.manifest = next;
        self.write_manifest()?;
        Ok(self.manifest.records.last().unwrap())
    }

    pub fn read_tensor(&self, clip_id: &str) -> Result<Tensor<f32>> {
        let r = self
            .manifest
            .get(clip_id)
            .ok_or_else(|| Error::NotFound(format!("clip {clip_id}")))?;
        let path = self.root.join(&r.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let t = decode_tensor(&bytes).map_err(|e| match e {
            Error::Corrupt(m) => Error::Corrupt(format!("{clip_id}: {m}")),
            other => other,
        })?;
        if format!("{:08x}", checksum_of(&bytes)) != r.checksum {
            return Err(Error::Corrupt(format!("{clip_id}: checksum differs from manifest")));
        }
        if t.dims() != r.dims.as_slice() {
            return Err(Error::Corrupt(format!("{clip_id}: extents differ from manifest")));
        }
        Ok(t)
    }

    pub fn read_latent(&self, clip_id: &str) -> Result<LatentClip> {
        let tensor = self.read_tensor(clip_id)?;
        let r = self.manifest.get(clip_id).unwrap();
        Ok(LatentClip {
            clip_id: r.clip_id.clone(),
            split: r.split,
            label: r.label,
            source_id: r.source_id.clone(),
            fps: r.fps,
            tensor,
        })
    }

    fn write_manifest(&self) -> Result<()> {
        atomic_write(&self.root.join(MANIFEST_FILE), self.manifest.to_jsonl()?.as_bytes())
    }
}

fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Input(format!("invalid clip id {id:?} (use letters, digits, '-', '_', '.')")))
    }
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
