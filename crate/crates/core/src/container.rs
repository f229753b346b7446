//! Wire format of a compressed image. All integers little-endian.
//!
//! ```text
//! offset  size  field
//! 0       2     magic "NC"
//! 2       1     version
//! 3       1     flags: bit0 side section present, bit1 extra section present
//! 4       1     quality index
//! 5       1     overfit layer count l (0 iff no extra section)
//! 6       2     width
//! 8       2     height
//! 10      4+n   side section (if flagged): u32 length, coded bytes
//! ..      4+n   main section: u32 length, coded bytes
//! ..      8     extra parameters (if flagged): q, mean, scale as binary16, s_min i8, s_max i8
//! ..      4+n   extra section: u32 length, coded update bytes
//! ```

use half::f16;
use thiserror::Error;

pub const MAGIC: [u8; 2] = *b"NC";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 10;
/// Bytes of transmitted update parameters; `8 * EXTRA_PARAM_BYTES` is the side cost `C`.
pub const EXTRA_PARAM_BYTES: usize = 8;
pub const SIDE_INFO_BITS: u32 = 8 * EXTRA_PARAM_BYTES as u32;
/// Lower bound on a transmitted update scale, in symbol units.
pub const UPDATE_SCALE_FLOOR: f32 = 0.1;

const FLAG_SIDE: u8 = 1;
const FLAG_EXTRA: u8 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContainerError {
    #[error("container truncated in {0}")]
    Truncated(&'static str),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown flag bits {0:#04x}")]
    UnknownFlags(u8),
    #[error("layer count {layers} inconsistent with extra-section flag {has_extra}")]
    FlagMismatch { layers: u8, has_extra: bool },
    #[error("invalid extra parameters: {0}")]
    InvalidExtra(&'static str),
    #[error("image dimensions must be positive")]
    ZeroDimension,
    #[error("{0} trailing bytes after container")]
    TrailingBytes(usize),
    #[error("section {0} exceeds u32 length")]
    TooLong(&'static str),
}

pub fn encode_f16(v: f32) -> u16 {
    f16::from_f32(v).to_bits()
}

pub fn decode_f16(bits: u16) -> f32 {
    f16::from_bits(bits).to_f32()
}

/// `v` after a binary16 round trip.
pub fn round_f16(v: f32) -> f32 {
    decode_f16(encode_f16(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    pub quality: u8,
    pub layers: u8,
    pub width: u16,
    pub height: u16,
}

/// Transmitted bias update: parameters as raw binary16 codes plus the coded symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtraSection {
    pub q: u16,
    pub mean: u16,
    pub scale: u16,
    pub s_min: i8,
    pub s_max: i8,
    pub payload: Vec<u8>,
}

impl ExtraSection {
    pub fn q(&self) -> f32 {
        decode_f16(self.q)
    }

    pub fn mean(&self) -> f32 {
        decode_f16(self.mean)
    }

    pub fn scale(&self) -> f32 {
        decode_f16(self.scale)
    }

    fn validate(&self) -> Result<(), ContainerError> {
        let q = self.q();
        if !(q.is_finite() && q > 0.0) {
            return Err(ContainerError::InvalidExtra("q must be positive and finite"));
        }
        if !self.mean().is_finite() {
            return Err(ContainerError::InvalidExtra("mean must be finite"));
        }
        let s = self.scale();
        if !(s.is_finite() && s >= UPDATE_SCALE_FLOOR) {
            return Err(ContainerError::InvalidExtra("scale below floor"));
        }
        if self.s_min > self.s_max {
            return Err(ContainerError::InvalidExtra("s_min > s_max"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    pub side: Option<Vec<u8>>,
    pub main: Vec<u8>,
    pub extra: Option<ExtraSection>,
}

impl Container {
    /// Same container with the extra section dropped and `l` cleared.
    pub fn without_extra(&self) -> Self {
        Self {
            header: ContainerHeader {
                layers: 0,
                ..self.header
            },
            extra: None,
            ..self.clone()
        }
    }

    /// Coded latent payload bits, framing excluded.
    pub fn payload_bits(&self) -> u64 {
        8 * (self.main.len() + self.side.as_ref().map_or(0, Vec::len)) as u64
    }
}

fn push_section(out: &mut Vec<u8>, bytes: &[u8], name: &'static str) -> Result<(), ContainerError> {
    let len = u32::try_from(bytes.len()).map_err(|_| ContainerError::TooLong(name))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

pub fn write_container(c: &Container) -> Result<Vec<u8>, ContainerError> {
    let h = &c.header;
    if (h.layers > 0) != c.extra.is_some() {
        return Err(ContainerError::FlagMismatch {
            layers: h.layers,
            has_extra: c.extra.is_some(),
        });
    }
    if h.width == 0 || h.height == 0 {
        return Err(ContainerError::ZeroDimension);
    }
    let mut flags = 0;
    if c.side.is_some() {
        flags |= FLAG_SIDE;
    }
    if c.extra.is_some() {
        flags |= FLAG_EXTRA;
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + c.main.len() + 32);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, flags, h.quality, h.layers]);
    out.extend_from_slice(&h.width.to_le_bytes());
    out.extend_from_slice(&h.height.to_le_bytes());
    if let Some(sb) = &c.side {
        push_section(&mut out, sb, "side")?;
    }
    push_section(&mut out, &c.main, "main")?;
    if let Some(e) = &c.extra {
        e.validate()?;
        out.extend_from_slice(&e.q.to_le_bytes());
        out.extend_from_slice(&e.mean.to_le_bytes());
        out.extend_from_slice(&e.scale.to_le_bytes());
        out.extend_from_slice(&[e.s_min as u8, e.s_max as u8]);
        push_section(&mut out, &e.payload, "extra")?;
    }
    Ok(out)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or(ContainerError::Truncated(what))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, ContainerError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn section(&mut self, what: &'static str) -> Result<Vec<u8>, ContainerError> {
        let b = self.take(4, what)?;
        let len = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        Ok(self.take(len, what)?.to_vec())
    }
}

pub fn read_container(bytes: &[u8]) -> Result<Container, ContainerError> {
    let mut cur = Cursor { data: bytes, pos: 0 };
    if cur.take(2, "header")? != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let fixed = cur.take(4, "header")?;
    let (version, flags, quality, layers) = (fixed[0], fixed[1], fixed[2], fixed[3]);
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    if flags & !(FLAG_SIDE | FLAG_EXTRA) != 0 {
        return Err(ContainerError::UnknownFlags(flags));
    }
    let has_extra = flags & FLAG_EXTRA != 0;
    if (layers > 0) != has_extra {
        return Err(ContainerError::FlagMismatch { layers, has_extra });
    }
    let width = cur.u16("header")?;
    let height = cur.u16("header")?;
    if width == 0 || height == 0 {
        return Err(ContainerError::ZeroDimension);
    }
    let side = if flags & FLAG_SIDE != 0 {
        Some(cur.section("side section")?)
    } else {
        None
    };
    let main = cur.section("main section")?;
    let extra = if has_extra {
        let q = cur.u16("extra parameters")?;
        let mean = cur.u16("extra parameters")?;
        let scale = cur.u16("extra parameters")?;
        let b = cur.take(2, "extra parameters")?;
        let e = ExtraSection {
            q,
            mean,
            scale,
            s_min: b[0] as i8,
            s_max: b[1] as i8,
            payload: cur.section("extra section")?,
        };
        e.validate()?;
        Some(e)
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(ContainerError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(Container {
        header: ContainerHeader {
            quality,
            layers,
            width,
            height,
        },
        side,
        main,
        extra,
    })
}
