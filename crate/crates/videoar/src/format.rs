//! Little-endian binary files.
//!
//! Latent volume (`VLAT`):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `VLAT` |
//! | 2 | version, u16 = 1 |
//! | 16 | `t, h, w, c` as u32 |
//! | 4·t·h·w·c | f32 payload, row-major `(t, h, w, c)` |
//!
//! Unit sequence (`VUNS`): magic, version, scheme, dims, unit count (u32),
//! then per unit its index (u32), ownership and payload (u32 length + f32s).
//! Ownership is tag 0 followed by a u32 count and `(t, h, w)` u32 triples,
//! or tag 1 followed by the level (u32) and its `(t, h, w)` extent.
//!
//! Checkpoint (`VGCK`): magic, version, `d_model, n_layers, n_heads` (u32),
//! parameter seed (u64), scheme, dims, block count (u32), then per block its
//! name (u16 length + UTF-8), value count (u32) and f32 values.
//!
//! A scheme is a tag byte (0 frame, 1 keydetail, 2 cube, 3 multiscale)
//! followed by `k`, `kt kh kw`, or a level count and `(t, h, w)` per level,
//! all u32.

use std::fs;
use std::path::Path;

use videoar_core::{Dims, GenConfig, Generator, GeneratorParams, LatentVolume, Ownership, Scale, Unit, UnitScheme, UnitSequence};

use crate::error::{Error, Result};

pub const LATENT_MAGIC: &[u8; 4] = b"VLAT";
pub const UNITS_MAGIC: &[u8; 4] = b"VUNS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VGCK";
pub const VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn err<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset, msg: msg.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return self.err(self.buf.len(), format!("truncated {what}: need {n} bytes, {left} remain"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let expected = String::from_utf8_lossy(want);
        if self.buf.len() < 4 {
            return self.err(0, format!("file too short for magic {expected:?}"));
        }
        let got = self.take(4, "magic")?;
        if got != want {
            return self.err(0, format!("expected magic {expected:?}, found {:?}", String::from_utf8_lossy(got)));
        }
        let at = self.pos;
        let version = self.u16("version")?;
        if version != VERSION {
            return self.err(at, format!("unsupported version {version}, expected {VERSION}"));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format { offset: self.pos, msg: format!("{what} length {n} overflows") })?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn dims(&mut self) -> Result<Dims> {
        let at = self.pos;
        let d = Dims::new(self.usize("dim t")?, self.usize("dim h")?, self.usize("dim w")?, self.usize("dim c")?);
        let len = [d.t, d.h, d.w, d.c].iter().try_fold(1usize, |acc, &x| acc.checked_mul(x));
        if len.is_none_or(|n| n.checked_mul(4).is_none()) {
            return self.err(at, format!("dims {}x{}x{}x{} overflow", d.t, d.h, d.w, d.c));
        }
        if d.validate().is_err() {
            return self.err(at, format!("dims {}x{}x{}x{} contain a zero extent", d.t, d.h, d.w, d.c));
        }
        Ok(d)
    }

    fn scale(&mut self) -> Result<Scale> {
        Ok(Scale::new(self.usize("scale t")?, self.usize("scale h")?, self.usize("scale w")?))
    }

    fn scheme(&mut self) -> Result<UnitScheme> {
        let at = self.pos;
        Ok(match self.u8("scheme tag")? {
            0 => UnitScheme::Frame,
            1 => UnitScheme::KeyDetail { k: self.usize("keydetail k")? },
            2 => UnitScheme::Cube {
                kt: self.usize("cube kt")?,
                kh: self.usize("cube kh")?,
                kw: self.usize("cube kw")?,
            },
            3 => {
                let n = self.usize("scale count")?;
                if n > self.buf.len() {
                    return self.err(at + 1, format!("scale count {n} exceeds file size"));
                }
                UnitScheme::Multiscale((0..n).map(|_| self.scale()).collect::<Result<_>>()?)
            }
            tag => return self.err(at, format!("unknown scheme tag {tag}")),
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.err(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(magic: &[u8; 4]) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w.u16(VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("value fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn dims(&mut self, d: Dims) {
        for x in [d.t, d.h, d.w, d.c] {
            self.u32(x);
        }
    }

    fn scale(&mut self, s: Scale) {
        for x in [s.t, s.h, s.w] {
            self.u32(x);
        }
    }

    fn scheme(&mut self, s: &UnitScheme) {
        match s {
            UnitScheme::Frame => self.u8(0),
            UnitScheme::KeyDetail { k } => {
                self.u8(1);
                self.u32(*k);
            }
            UnitScheme::Cube { kt, kh, kw } => {
                self.u8(2);
                for x in [kt, kh, kw] {
                    self.u32(*x);
                }
            }
            UnitScheme::Multiscale(scales) => {
                self.u8(3);
                self.u32(scales.len());
                for s in scales {
                    self.scale(*s);
                }
            }
        }
    }
}

pub fn encode_latent(z: &LatentVolume) -> Vec<u8> {
    let mut w = Writer::header(LATENT_MAGIC);
    w.dims(z.dims());
    w.f32s(z.data());
    w.buf
}

pub fn decode_latent(buf: &[u8]) -> Result<LatentVolume> {
    let mut r = Reader::new(buf);
    r.magic(LATENT_MAGIC)?;
    let dims = r.dims()?;
    let n = dims.len();
    let start = r.pos;
    let have = buf.len() - start;
    if have < n * 4 {
        return r.err(buf.len(), format!("truncated payload: header declares {n} values ({} bytes), {have} bytes follow", n * 4));
    }
    let data = r.f32s(n, "payload")?;
    r.finish()?;
    Ok(LatentVolume::new(dims, data)?)
}

pub fn encode_units(seq: &UnitSequence) -> Vec<u8> {
    let mut w = Writer::header(UNITS_MAGIC);
    w.scheme(&seq.scheme);
    w.dims(seq.dims);
    w.u32(seq.units.len());
    for u in &seq.units {
        w.u32(u.index);
        match &u.ownership {
            Ownership::Voxels(v) => {
                w.u8(0);
                w.u32(v.len());
                for &[t, h, x] in v {
                    for c in [t, h, x] {
                        w.u32(c as usize);
                    }
                }
            }
            Ownership::Scale { level, extent } => {
                w.u8(1);
                w.u32(*level);
                w.scale(*extent);
            }
        }
        w.u32(u.payload.len());
        w.f32s(&u.payload);
    }
    w.buf
}

/// Decodes a unit sequence. Structural checks (coverage, lengths against
/// the scheme) are left to `reconstruct`.
pub fn decode_units(buf: &[u8]) -> Result<UnitSequence> {
    let mut r = Reader::new(buf);
    r.magic(UNITS_MAGIC)?;
    let scheme = r.scheme()?;
    let dims = r.dims()?;
    let at = r.pos;
    let n = r.usize("unit count")?;
    if n > buf.len() {
        return r.err(at, format!("unit count {n} exceeds file size"));
    }
    let mut units = Vec::with_capacity(n);
    for _ in 0..n {
        let index = r.usize("unit index")?;
        let at = r.pos;
        let ownership = match r.u8("ownership tag")? {
            0 => {
                let at = r.pos;
                let count = r.usize("voxel count")?;
                if count.saturating_mul(12) > buf.len() - r.pos {
                    return r.err(at, format!("voxel count {count} exceeds remaining bytes"));
                }
                let mut v = Vec::with_capacity(count);
                for _ in 0..count {
                    v.push([r.u32("voxel t")?, r.u32("voxel h")?, r.u32("voxel w")?]);
                }
                Ownership::Voxels(v)
            }
            1 => Ownership::Scale {
                level: r.usize("level")?,
                extent: r.scale()?,
            },
            tag => return r.err(at, format!("unknown ownership tag {tag}")),
        };
        let len = r.usize("payload length")?;
        let payload = r.f32s(len, "unit payload")?;
        units.push(Unit { index, payload, ownership });
    }
    r.finish()?;
    Ok(UnitSequence { scheme, dims, units })
}

pub fn encode_checkpoint(config: &GenConfig, params: &GeneratorParams) -> Vec<u8> {
    let mut w = Writer::header(CHECKPOINT_MAGIC);
    w.u32(config.d_model);
    w.u32(config.n_layers);
    w.u32(config.n_heads);
    w.u64(config.param_seed);
    w.scheme(&config.scheme);
    w.dims(config.dims);
    w.u32(params.blocks.len());
    for b in &params.blocks {
        w.u16(u16::try_from(b.name.len()).expect("block name fits in u16"));
        w.buf.extend_from_slice(b.name.as_bytes());
        w.u32(b.len);
        w.f32s(&params.theta[b.offset..b.offset + b.len]);
    }
    w.buf
}

/// Decodes a checkpoint and checks its blocks against the architecture the
/// stored configuration builds.
pub fn decode_checkpoint(buf: &[u8]) -> Result<(Generator, GeneratorParams)> {
    let mut r = Reader::new(buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let d_model = r.usize("d_model")?;
    let n_layers = r.usize("n_layers")?;
    let n_heads = r.usize("n_heads")?;
    let param_seed = r.u64("param seed")?;
    let scheme = r.scheme()?;
    let dims = r.dims()?;
    let config = GenConfig {
        d_model,
        n_layers,
        n_heads,
        scheme,
        dims,
        param_seed,
    };
    let gen = Generator::new(config)?;
    let expected = gen.architecture().blocks().to_vec();
    let at = r.pos;
    let n = r.usize("block count")?;
    if n != expected.len() {
        return r.err(at, format!("checkpoint has {n} blocks, architecture has {}", expected.len()));
    }
    let mut theta = vec![0.0f32; gen.param_count()];
    for b in &expected {
        let at = r.pos;
        let name_len = r.u16("block name length")? as usize;
        let name = r.take(name_len, "block name")?;
        if name != b.name.as_bytes() {
            return r.err(at, format!("expected block {:?}, found {:?}", b.name, String::from_utf8_lossy(name)));
        }
        let at = r.pos;
        let len = r.usize("block length")?;
        if len != b.len {
            return r.err(at, format!("block {} has {len} values, expected {}", b.name, b.len));
        }
        theta[b.offset..b.offset + len].copy_from_slice(&r.f32s(len, "block values")?);
    }
    r.finish()?;
    let params = GeneratorParams { theta, blocks: expected };
    gen.check_params(&params)?;
    Ok((gen, params))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes via a temporary sibling and a rename.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_latent(path: &Path) -> Result<LatentVolume> {
    decode_latent(&read(path)?)
}

pub fn write_latent(z: &LatentVolume, path: &Path) -> Result<()> {
    write_bytes(path, &encode_latent(z))
}

pub fn read_units(path: &Path) -> Result<UnitSequence> {
    decode_units(&read(path)?)
}

pub fn write_units(seq: &UnitSequence, path: &Path) -> Result<()> {
    write_bytes(path, &encode_units(seq))
}

pub fn read_checkpoint(path: &Path) -> Result<(Generator, GeneratorParams)> {
    decode_checkpoint(&read(path)?)
}

pub fn write_checkpoint(config: &GenConfig, params: &GeneratorParams, path: &Path) -> Result<()> {
    write_bytes(path, &encode_checkpoint(config, params))
}
