//! Binary corpus and normalizer files.
//!
//! Both share a little-endian header: 4-byte magic, `u32` version, `u32` joints,
//! `u32` pose dimension, `u32` fps, `u32` record count. Corpus records are
//! `u32 id, u8 split, u32 text length, text bytes, u32 frames, frames * dim f32`.
//! The normalizer body is `dim` means followed by `dim` standard deviations, as f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::motion::{MotionSequence, PoseLayout};
use super::normalize::Normalizer;
use super::text::TextDescriptor;
use super::{CorpusSample, Split};
use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 4] = b"LADC";
pub const NORMALIZER_MAGIC: &[u8; 4] = b"LADN";
pub const VERSION: u32 = 1;

struct Header {
    dim: usize,
    fps: u32,
    count: usize,
}

fn write_header(
    w: &mut impl Write,
    magic: &[u8; 4],
    dim: usize,
    fps: u32,
    count: usize,
) -> Result<()> {
    let joints = PoseLayout::from_dim(dim).map_or(0, |l| l.joints);
    w.write_all(magic)?;
    for v in [VERSION, joints as u32, dim as u32, fps, count as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reader that remembers its byte offset for error messages.
pub(crate) struct Cursor<R> {
    inner: R,
    offset: u64,
    what: &'static str,
}

impl<R: Read> Cursor<R> {
    pub(crate) fn new(inner: R, what: &'static str) -> Self {
        Self {
            inner,
            offset: 0,
            what,
        }
    }

    pub(crate) fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            offset: self.offset,
            detail: detail.into(),
        }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => {
                    self.fail(format!("truncated: expected {n} more bytes"))
                }
                _ => Error::Io(e),
            })?;
        self.offset += n as u64;
        Ok(buf)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.bytes(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn at_end(&mut self) -> Result<bool> {
        let mut probe = [0u8; 1];
        Ok(self.inner.read(&mut probe)? == 0)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<Header> {
        let m = self.bytes(4)?;
        if m != magic {
            return Err(Error::Format {
                what: self.what,
                offset: 0,
                detail: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&m),
                    std::str::from_utf8(magic).unwrap()
                ),
            });
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(self.fail(format!("unsupported version {version}")));
        }
        let joints = self.u32()? as usize;
        let dim = self.u32()? as usize;
        if dim == 0 || PoseLayout::from_dim(dim).map_or(0, |l| l.joints) != joints {
            return Err(self.fail(format!(
                "pose dimension {dim} does not match {joints} joints"
            )));
        }
        let fps = self.u32()?;
        if fps == 0 {
            return Err(self.fail("fps is zero"));
        }
        let count = self.u32()? as usize;
        Ok(Header { dim, fps, count })
    }
}

fn write_f32s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for &x in values {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_corpus(path: &Path, samples: &[CorpusSample]) -> Result<()> {
    let first = samples.first().ok_or(Error::InsufficientData {
        what: "corpus samples",
        needed: 1,
        available: 0,
    })?;
    let (dim, fps) = (first.motion.pose_dim(), first.motion.fps());
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, CORPUS_MAGIC, dim, fps, samples.len())?;
    for s in samples {
        if s.motion.pose_dim() != dim || s.motion.fps() != fps {
            return Err(Error::Shape(format!(
                "sample {} differs in pose dimension or fps",
                s.id
            )));
        }
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&[s.split.tag()])?;
        let text = s.descriptor.text.as_bytes();
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text)?;
        w.write_all(&(s.motion.frames() as u32).to_le_bytes())?;
        write_f32s(&mut w, s.motion.data())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusSample>> {
    let file = File::open(path).map_err(|e| missing(path, e, "run `ladiff gen-corpus` first"))?;
    let mut r = Cursor::new(BufReader::new(file), "corpus");
    let h = r.header(CORPUS_MAGIC)?;
    let mut samples = Vec::with_capacity(h.count);
    for _ in 0..h.count {
        let id = r.u32()?;
        let tag = r.u8()?;
        let split = Split::from_tag(tag).ok_or_else(|| r.fail(format!("bad split tag {tag}")))?;
        let len = r.u32()? as usize;
        let text = String::from_utf8(r.bytes(len)?).map_err(|_| r.fail("text is not UTF-8"))?;
        let descriptor =
            TextDescriptor::parse(&text).map_err(|e| r.fail(format!("sample {id}: {e}")))?;
        let frames = r.u32()? as usize;
        if frames == 0 {
            return Err(r.fail(format!("sample {id} has no frames")));
        }
        let data = r.f32s(frames * h.dim)?.into_iter().map(f64::from).collect();
        let motion = MotionSequence::new(h.fps, h.dim, data)
            .map_err(|e| r.fail(format!("sample {id}: {e}")))?;
        samples.push(CorpusSample {
            id,
            motion,
            descriptor,
            split,
        });
    }
    if !r.at_end()? {
        return Err(r.fail("trailing bytes after the last record"));
    }
    Ok(samples)
}

pub fn write_normalizer(path: &Path, n: &Normalizer, fps: u32) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, NORMALIZER_MAGIC, n.dim(), fps, 1)?;
    write_f32s(&mut w, &n.mean)?;
    write_f32s(&mut w, &n.std)?;
    w.flush()?;
    Ok(())
}

pub fn read_normalizer(path: &Path) -> Result<Normalizer> {
    let file = File::open(path).map_err(|e| missing(path, e, "run `ladiff gen-corpus` first"))?;
    let mut r = Cursor::new(BufReader::new(file), "normalizer");
    let h = r.header(NORMALIZER_MAGIC)?;
    if h.count != 1 {
        return Err(r.fail(format!("expected one record, found {}", h.count)));
    }
    let mean: Vec<f64> = r.f32s(h.dim)?.into_iter().map(f64::from).collect();
    let std: Vec<f64> = r.f32s(h.dim)?.into_iter().map(f64::from).collect();
    if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
        return Err(r.fail("statistics must be finite with positive deviations"));
    }
    if !r.at_end()? {
        return Err(r.fail("trailing bytes"));
    }
    Ok(Normalizer { mean, std })
}

pub(crate) fn missing(path: &Path, e: std::io::Error, hint: &str) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: hint.into(),
        }
    } else {
        Error::Io(e)
    }
}
