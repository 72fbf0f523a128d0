//! Parameter checkpoints.
//!
//! Layout (little-endian): magic `LADK`, `u32` version, `u8` component tag, 32-byte
//! SHA-256 digest of the component configuration, `u32` block count, then per block
//! `u32` name length, UTF-8 name, `u32` rows, `u32` cols, `rows * cols` f32 values.
//! A trailing CRC-32 covers every preceding byte.

use std::fmt::Debug;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::io::{missing, Cursor};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore};

pub const MAGIC: &[u8; 4] = b"LADK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Vae,
    Denoiser,
    Extractor,
}

impl Component {
    pub fn tag(self) -> u8 {
        match self {
            Self::Vae => 0,
            Self::Denoiser => 1,
            Self::Extractor => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Vae => "vae",
            Self::Denoiser => "denoiser",
            Self::Extractor => "extractor",
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        [Self::Vae, Self::Denoiser, Self::Extractor].into_iter().find(|c| c.tag() == tag)
    }
}

/// SHA-256 of the configuration's debug rendering, which lists every field including
/// derived ones.
pub fn config_digest(config: &impl Debug) -> [u8; 32] {
    Sha256::digest(format!("{config:?}").as_bytes()).into()
}

pub fn save_checkpoint(path: &Path, component: Component, digest: &[u8; 32], store: &ParamStore<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + store.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(component.tag());
    buf.extend_from_slice(digest);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let (rows, cols) = store.shape(id);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for x in store.get(id) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a checkpoint written for `component` under a configuration with `digest`.
pub fn load_checkpoint(path: &Path, component: Component, digest: &[u8; 32]) -> Result<ParamStore<f32>> {
    let hint = format!("run `ladiff train-{}` first", match component {
        Component::Vae => "vae",
        Component::Denoiser => "denoiser",
        Component::Extractor => "extractors",
    });
    let bytes = fs::read(path).map_err(|e| missing(path, e, &hint))?;
    if bytes.len() < 4 {
        return Err(Error::Format { what: "checkpoint", offset: 0, detail: "file shorter than its checksum".into() });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { path: path.to_owned(), stored, computed });
    }
    let mut r = Cursor::new(body, "checkpoint");
    if r.bytes(4)? != MAGIC {
        return Err(Error::Format { what: "checkpoint", offset: 0, detail: "bad magic, expected LADK".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let tag = r.u8()?;
    match Component::from_tag(tag) {
        Some(c) if c == component => {}
        Some(c) => return Err(r.fail(format!("holds a {} checkpoint, expected {}", c.name(), component.name()))),
        None => return Err(r.fail(format!("unknown component tag {tag}"))),
    }
    if r.bytes(32)? != digest {
        return Err(Error::DigestMismatch { path: path.to_owned(), component: component.name() });
    }
    let blocks = r.u32()? as usize;
    let mut store = ParamStore::new();
    let mut rng = crate::rng::seeded(0);
    for _ in 0..blocks {
        let len = r.u32()? as usize;
        if len > body.len() {
            return Err(r.fail(format!("block name length {len} exceeds the file")));
        }
        let name = String::from_utf8(r.bytes(len)?).map_err(|_| r.fail("block name is not UTF-8"))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows.checked_mul(cols).is_none_or(|n| n > body.len() / 4) {
            return Err(r.fail(format!("block `{name}` claims {rows}x{cols} values")));
        }
        let values = r.f32s(rows * cols)?;
        let id = store.add(name, rows, cols, Init::Zeros, &mut rng);
        store.get_mut(id).copy_from_slice(&values);
    }
    if !r.at_end()? {
        return Err(r.fail("trailing bytes after the last block"));
    }
    Ok(store)
}
