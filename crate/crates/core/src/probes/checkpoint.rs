//! Binary checkpoint format.
//!
//! ```text
//! "LSPC" | u32 version | u32 len, JSON header | u32 entry count |
//! entries: u32 len, name | u8 dtype | u8 ndim | u64 extents... | payload
//! ```
//!
//! All integers are little-endian. The payload is f32. The header carries the
//! probe configuration and run metadata, so a checkpoint loads on its own.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ProbeConfig, ProbeModel};
use crate::element::{DType, Float};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor, MAX_RANK};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Prefix of entries that belong to optimizer state rather than the model.
pub const OPTIMIZER_PREFIX: &str = "optim/";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: Option<usize>,
    pub step: u64,
    /// Named metrics; `None` marks a metric that was undefined.
    #[serde(default)]
    pub metrics: BTreeMap<String, Option<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ProbeConfig,
    init: String,
    meta: CheckpointMeta,
}

const INIT_SCHEME: &str = "kaiming_uniform(relu-fed), xavier_uniform(attention, sigmoid/logit-fed), norm gamma=1 beta=0, bias=0";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ProbeModel<f32>,
    pub meta: CheckpointMeta,
    /// Optimizer tensors keyed by name, without the `optim/` prefix.
    pub optimizer: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(model: ProbeModel<f32>) -> Self {
        let meta = CheckpointMeta {
            seed: model.seed(),
            ..Default::default()
        };
        Self {
            model,
            meta,
            optimizer: IndexMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&Header {
            config: self.model.config().clone(),
            init: INIT_SCHEME.into(),
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &header)?;
        let store = self.model.store();
        let count = store.len() + self.optimizer.len();
        out.extend_from_slice(&len_u32(count)?.to_le_bytes());
        let optim = self.optimizer.iter().map(|(n, t)| (format!("{OPTIMIZER_PREFIX}{n}"), t));
        for (name, t) in store.iter().map(|(n, e)| (n.to_string(), &e.tensor)).chain(optim) {
            put_str(&mut out, &name)?;
            out.push(DType::F32.code());
            out.push(t.dims().len() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a probe checkpoint (bad magic)".into()));
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header: Header = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut model = ProbeModel::<f32>::build(header.config, header.meta.seed)?;
        let count = r.u32()? as usize;
        let mut seen = std::collections::HashSet::new();
        let mut optimizer = IndexMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.u8()?;
            if DType::from_code(dtype) != Some(DType::F32) {
                return Err(Error::Format(format!("entry {name}: unsupported dtype code {dtype}")));
            }
            let ndim = r.u8()? as usize;
            if ndim == 0 || ndim > MAX_RANK {
                return Err(Error::Corrupt(format!("entry {name}: rank {ndim}")));
            }
            let dims = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let shape = Shape::new(dims.clone()).map_err(|e| Error::Corrupt(format!("entry {name}: {e}")))?;
            let n = shape.numel();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt(format!("entry {name}: size overflow")))?)?;
            let data: Vec<f32> = payload.chunks_exact(4).map(f32::read_le).collect();
            let t = Tensor::from_vec(dims, data)?;
            if !seen.insert(name.clone()) {
                return Err(Error::Corrupt(format!("duplicate entry {name}")));
            }
            if let Some(rest) = name.strip_prefix(OPTIMIZER_PREFIX) {
                optimizer.insert(rest.to_string(), t);
            } else {
                model.store_mut().set(&name, t).map_err(|e| match e {
                    Error::NotFound(m) => Error::Format(format!("unexpected entry: {m}")),
                    Error::Shape(m) => Error::Format(m),
                    other => other,
                })?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if let Some((missing, _)) = model.store().iter().find(|(n, _)| !seen.contains(*n)) {
            return Err(Error::Format(format!("checkpoint lacks entry {missing}")));
        }
        Ok(Self {
            model,
            meta: header.meta,
            optimizer,
        })
    }
}

/// Writes through a temporary sibling and renames, so a crash never leaves
/// a half-written checkpoint under `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&len_u32(s.len())?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupt(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("non-UTF-8 string".into()))
    }
}
