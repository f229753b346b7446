//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "NICM" | version u8 | kind u8 | latent, hyper, width, kernel,
//! enc layers, dec layers, hyper layers (u32 each) | tensor count u32 |
//! per tensor: name len u32, name, rank u32, extents u32 x rank, f32 data
//! ```
//!
//! Tensors appear in [`ModelParams::named_tensors`] order and are checked
//! against the architecture on load.

use std::io::{Read, Write};

use super::{ArchConfig, CodecError, ModelKind, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NICM";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint(params: &ModelParams, mut w: impl Write) -> Result<(), CodecError> {
    let c = &params.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION, kind_byte(c.kind)])?;
    for v in [
        c.latent_channels,
        c.hyper_channels,
        c.base_width,
        c.kernel,
        c.encoder_layers,
        c.decoder_layers,
        c.hyper_layers,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let tensors = params.named_tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelParams, CodecError> {
    let bad = |m: String| CodecError::Checkpoint(m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", head[0])));
    }
    let kind = match head[1] {
        0 => ModelKind::Factorized,
        1 => ModelKind::Hyperprior,
        k => return Err(bad(format!("unknown model kind {k}"))),
    };
    let mut field = || read_u32(&mut r).map(|v| v as usize);
    let config = ArchConfig {
        kind,
        latent_channels: field()?,
        hyper_channels: field()?,
        base_width: field()?,
        kernel: field()?,
        encoder_layers: field()?,
        decoder_layers: field()?,
        hyper_layers: field()?,
    };
    if [config.latent_channels, config.hyper_channels, config.base_width, config.kernel]
        .iter()
        .any(|&v| v > 4096)
        || config.encoder_layers + config.decoder_layers + config.hyper_layers > 64
    {
        return Err(bad("implausible architecture".into()));
    }
    let mut params = ModelParams::init(&config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = read_u32(&mut r)? as usize;
    if count != expected.len() {
        return Err(bad(format!("{count} tensors, architecture has {}", expected.len())));
    }
    for ((name, shape), slot) in expected.iter().zip(params.tensors_mut()) {
        let len = read_u32(&mut r)? as usize;
        if len != name.len() {
            return Err(bad(format!("expected tensor {name}")));
        }
        let mut got = vec![0u8; len];
        r.read_exact(&mut got)?;
        if got != name.as_bytes() {
            return Err(bad(format!("expected tensor {name}, found {}", String::from_utf8_lossy(&got))));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank != shape.len() {
            return Err(bad(format!("{name}: rank {rank}, expected {}", shape.len())));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r)? as usize);
        }
        if &dims != shape {
            return Err(bad(format!("{name}: shape {dims:?}, expected {shape:?}")));
        }
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; 4 * numel];
        r.read_exact(&mut raw)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::NonFinite("checkpoint tensor"));
        }
        *slot = Tensor::new(dims, data)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes".into()));
    }
    Ok(params)
}

fn kind_byte(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Factorized => 0,
        ModelKind::Hyperprior => 1,
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, CodecError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl ModelParams {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), CodecError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        write_checkpoint(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, CodecError> {
        let f = std::fs::File::open(path)?;
        read_checkpoint(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_both_kinds() {
        for cfg in [ArchConfig::default(), ArchConfig::factorized()] {
            let p = ModelParams::init(&cfg, 11).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&p, &mut buf).unwrap();
            assert_eq!(read_checkpoint(&buf[..]).unwrap(), p);
        }
    }

    #[test]
    fn corruption_detected() {
        let p = ModelParams::init(&ArchConfig::factorized(), 11).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
        let mut magic = buf.clone();
        magic[0] = b'X';
        assert!(read_checkpoint(&magic[..]).is_err());
        let mut name = buf;
        name[4 + 2 + 28 + 4 + 4] = b'x';
        assert!(read_checkpoint(&name[..]).is_err());
    }
}
