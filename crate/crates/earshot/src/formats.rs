//! Binary tensor files, all little-endian.
//!
//! * `EARS` parameter checkpoint: version u32, count u32, then per
//!   parameter name length u16, utf-8 name, rank u8, u32 extents, f64 data.
//! * `SFMF` SFM layer stack: version u32, backbone id u8, n_layers u32,
//!   layer indices u32[n_layers], T u32, D u32, then f64 data layer-major
//!   then time-major.
//! * `LMEL` log-Mel matrix: version u32, T u32, D u32, f64 data row-major.

use std::fs;
use std::path::Path;

use earshot_core::dsp::{Backbone, SfmStack, N_MELS, SFM_DIM};
use earshot_core::{ParameterStore, Tensor};

use crate::error::{Error, IoContext, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EARS";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const SFM_MAGIC: &[u8; 4] = b"SFMF";
pub const SFM_VERSION: u32 = 1;
pub const LOGMEL_MAGIC: &[u8; 4] = b"LMEL";
pub const LOGMEL_VERSION: u32 = 1;

/// Byte reader that reports the offset of whatever it failed on.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    fn fail<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => self.fail(
                self.pos,
                format!("truncated reading {what} ({n} bytes, {} left)", self.buf.len() - self.pos),
            ),
        }
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expect {
            return self.fail(0, format!("bad magic {m:?}, expected {:?}", std::str::from_utf8(expect).unwrap_or("?")));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn version(&mut self, expect: u32) -> Result<()> {
        let at = self.pos;
        let v = self.u32("version")?;
        if v != expect {
            return self.fail(at, format!("unsupported version {v}, expected {expect}"));
        }
        Ok(())
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .map_or_else(|| self.fail(self.pos, format!("{what}: element count overflows")), Ok)?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    out.reserve(xs.len() * 8);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(store: &ParameterStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, store.len(), "parameter count")?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("parameter name too long: {}", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let rank = u8::try_from(p.value.rank()).map_err(|_| Error::Data(format!("rank of {} exceeds 255", p.name)))?;
        out.push(rank);
        for &e in p.value.shape() {
            put_u32(&mut out, e, "extent")?;
        }
        put_f64s(&mut out, p.value.data());
    }
    Ok(out)
}

/// `path` only labels errors.
pub fn decode_checkpoint(buf: &[u8], path: &Path) -> Result<ParameterStore> {
    let mut r = Reader::new(buf, path);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let count = r.u32("parameter count")?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_or_else(|_| r.fail(at, "parameter name is not utf-8"), Ok)?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let at = r.pos;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let data = match n {
            Some(n) if rank > 0 && n > 0 => r.f64s(n, &name)?,
            _ => return r.fail(at, format!("invalid shape {shape:?} for {name}")),
        };
        store
            .register(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset: at,
                msg: e.to_string(),
            })?;
    }
    r.finish()?;
    Ok(store)
}

pub fn encode_sfm(stack: &SfmStack) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(SFM_MAGIC);
    out.extend_from_slice(&SFM_VERSION.to_le_bytes());
    out.push(stack.backbone.id());
    put_u32(&mut out, stack.n_layers(), "layer count")?;
    for &i in &stack.layer_indices {
        put_u32(&mut out, i, "layer index")?;
    }
    put_u32(&mut out, stack.n_frames(), "frame count")?;
    put_u32(&mut out, SFM_DIM, "hidden size")?;
    for l in &stack.layers {
        put_f64s(&mut out, l.data());
    }
    Ok(out)
}

pub fn decode_sfm(buf: &[u8], path: &Path) -> Result<SfmStack> {
    let mut r = Reader::new(buf, path);
    r.magic(SFM_MAGIC)?;
    r.version(SFM_VERSION)?;
    let at = r.pos;
    let id = r.u8("backbone id")?;
    let backbone = Backbone::from_id(id).map_or_else(|| r.fail(at, format!("unknown backbone id {id}")), Ok)?;
    let n_layers = r.u32("layer count")? as usize;
    let mut indices = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        indices.push(r.u32("layer index")? as usize);
    }
    let t = r.u32("frame count")? as usize;
    let at = r.pos;
    let d = r.u32("hidden size")? as usize;
    if d != SFM_DIM {
        return r.fail(at, format!("hidden size {d}, expected {SFM_DIM}"));
    }
    if t == 0 {
        return r.fail(at - 4, "zero frames");
    }
    let mut layers = Vec::with_capacity(n_layers);
    for i in &indices {
        let data = r.f64s(t * d, &format!("layer {i}"))?;
        layers.push(Tensor::new([t, d], data)?);
    }
    r.finish()?;
    SfmStack::new(backbone, indices, layers).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 9,
        msg: e.to_string(),
    })
}

pub fn encode_logmel(frames: &Tensor) -> Result<Vec<u8>> {
    if frames.rank() != 2 || frames.shape()[1] != N_MELS {
        return Err(Error::Data(format!("log-Mel shape {:?}, expected [T, {N_MELS}]", frames.shape())));
    }
    let mut out = Vec::new();
    out.extend_from_slice(LOGMEL_MAGIC);
    out.extend_from_slice(&LOGMEL_VERSION.to_le_bytes());
    put_u32(&mut out, frames.shape()[0], "frame count")?;
    put_u32(&mut out, N_MELS, "band count")?;
    put_f64s(&mut out, frames.data());
    Ok(out)
}

pub fn decode_logmel(buf: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader::new(buf, path);
    r.magic(LOGMEL_MAGIC)?;
    r.version(LOGMEL_VERSION)?;
    let t = r.u32("frame count")? as usize;
    let at = r.pos;
    let d = r.u32("band count")? as usize;
    if d != N_MELS {
        return r.fail(at, format!("band count {d}, expected {N_MELS}"));
    }
    if t == 0 {
        return r.fail(at - 4, "zero frames");
    }
    let data = r.f64s(t * d, "log-Mel data")?;
    r.finish()?;
    Ok(Tensor::new([t, d], data)?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).at(path)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, bytes).at(path)
}

pub fn write_checkpoint(path: &Path, store: &ParameterStore) -> Result<()> {
    write(path, &encode_checkpoint(store)?)
}

pub fn read_checkpoint(path: &Path) -> Result<ParameterStore> {
    decode_checkpoint(&read(path)?, path)
}

pub fn write_sfm(path: &Path, stack: &SfmStack) -> Result<()> {
    write(path, &encode_sfm(stack)?)
}

pub fn read_sfm(path: &Path) -> Result<SfmStack> {
    decode_sfm(&read(path)?, path)
}

pub fn write_logmel(path: &Path, frames: &Tensor) -> Result<()> {
    write(path, &encode_logmel(frames)?)
}

pub fn read_logmel(path: &Path) -> Result<Tensor> {
    decode_logmel(&read(path)?, path)
}
