//! Image-level encode and decode: padding, latent coding and containers.

use thiserror::Error;

use crate::codec::{coding, forward_stack, quantize_round, CodecError, ConvLayer, ModelKind, ModelParams};
use crate::container::{read_container, write_container, Container, ContainerError, ContainerHeader};
use crate::entropy::{RangeDecoder, RangeEncoder};
use crate::image::{crop_tensor, reflect_pad, round_up, ImageError, RgbImage};
use crate::rd::psnr_from_mse;
use crate::tensor::Tensor;
use crate::update::{apply_update, decode_update, select_bias_subset, CodedUpdate, UpdateError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{0}")]
    Mismatch(String),
}

impl From<crate::entropy::EntropyError> for PipelineError {
    fn from(e: crate::entropy::EntropyError) -> Self {
        Self::Codec(e.into())
    }
}

/// Quantized latents and their coded sections.
#[derive(Clone, Debug)]
pub struct LatentCode {
    pub y_hat: Tensor,
    pub z_hat: Option<Tensor>,
    pub main: Vec<u8>,
    pub side: Option<Vec<u8>>,
}

impl LatentCode {
    /// `|mb| + |sb|` in bits.
    pub fn payload_bits(&self) -> u64 {
        8 * (self.main.len() + self.side.as_ref().map_or(0, Vec::len)) as u64
    }
}

fn latent_shape(params: &ModelParams, padded_h: usize, padded_w: usize) -> [usize; 4] {
    let f = params.config.latent_downsampling();
    [1, params.config.latent_channels, padded_h / f, padded_w / f]
}

fn side_shape(params: &ModelParams, padded_h: usize, padded_w: usize) -> [usize; 4] {
    let f = params.config.pad_multiple();
    [1, params.config.hyper_channels, padded_h / f, padded_w / f]
}

fn symbols(t: &Tensor) -> Vec<i32> {
    t.data().iter().map(|&v| v as i32).collect()
}

fn from_symbols(shape: &[usize], s: &[i32]) -> Result<Tensor, CodecError> {
    Ok(Tensor::new(shape.to_vec(), s.iter().map(|&v| v as f32).collect())?)
}

/// Analyzes, quantizes and entropy-codes a padded `[1, 3, H, W]` image.
pub fn encode_latents(params: &ModelParams, padded: &Tensor) -> Result<LatentCode, CodecError> {
    let y = params.analyze(padded)?;
    let y_hat = quantize_round(&y)?;
    match params.config.kind {
        ModelKind::Factorized => {
            let mut enc = RangeEncoder::new();
            coding::encode_factorized(&mut enc, &symbols(&y_hat), y_hat.shape(), &params.prior)?;
            Ok(LatentCode {
                y_hat,
                z_hat: None,
                main: enc.finish(),
                side: None,
            })
        }
        ModelKind::Hyperprior => {
            let z_hat = quantize_round(&params.hyper_analyze(&y)?)?;
            let mut enc = RangeEncoder::new();
            coding::encode_factorized(&mut enc, &symbols(&z_hat), z_hat.shape(), &params.prior)?;
            let side = enc.finish();
            let (mean, scale) = params.hyper_synthesize(&z_hat)?;
            let mut enc = RangeEncoder::new();
            coding::encode_gaussian(&mut enc, &symbols(&y_hat), mean.data(), scale.data())?;
            Ok(LatentCode {
                y_hat,
                z_hat: Some(z_hat),
                main: enc.finish(),
                side: Some(side),
            })
        }
    }
}

/// Inverse of [`encode_latents`] for an image padded to `padded_h x padded_w`.
pub fn decode_latents(
    params: &ModelParams,
    main: &[u8],
    side: Option<&[u8]>,
    padded_h: usize,
    padded_w: usize,
) -> Result<Tensor, PipelineError> {
    let yshape = latent_shape(params, padded_h, padded_w);
    match (params.config.kind, side) {
        (ModelKind::Factorized, None) => {
            let mut dec = RangeDecoder::new(main)?;
            let y = coding::decode_factorized(&mut dec, &yshape, &params.prior)?;
            Ok(from_symbols(&yshape, &y)?)
        }
        (ModelKind::Hyperprior, Some(side)) => {
            let zshape = side_shape(params, padded_h, padded_w);
            let mut dec = RangeDecoder::new(side)?;
            let z = coding::decode_factorized(&mut dec, &zshape, &params.prior)?;
            let z_hat = from_symbols(&zshape, &z)?;
            let (mean, scale) = params.hyper_synthesize(&z_hat)?;
            let mut dec = RangeDecoder::new(main)?;
            let y = coding::decode_gaussian(&mut dec, mean.data(), scale.data())?;
            Ok(from_symbols(&yshape, &y)?)
        }
        (kind, side) => Err(PipelineError::Mismatch(format!(
            "{kind:?} model cannot decode a container {} a side section",
            if side.is_some() { "with" } else { "without" }
        ))),
    }
}

/// An input image with its model-ready padded tensor.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub image: RgbImage,
    pub original: Tensor,
    pub padded: Tensor,
}

impl Prepared {
    pub fn new(image: &RgbImage, params: &ModelParams) -> Result<Self, PipelineError> {
        if image.width() > u16::MAX as usize || image.height() > u16::MAX as usize {
            return Err(PipelineError::Mismatch("image dimensions exceed 65535".into()));
        }
        let original = image.to_tensor();
        let padded = reflect_pad(&original, params.config.pad_multiple());
        Ok(Self {
            image: image.clone(),
            original,
            padded,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn num_pixels(&self) -> usize {
        self.width() * self.height()
    }
}

/// Decoder output cropped to `width x height` and rounded to 8 bits.
pub fn reconstruct(y_hat: &Tensor, decoder: &[ConvLayer], width: usize, height: usize) -> Result<RgbImage, PipelineError> {
    finish_reconstruction(&forward_stack(y_hat, decoder, false).map_err(CodecError::from)?, width, height)
}

/// Clamps raw decoder output to `[0, 1]`, crops the padding and rounds to 8 bits.
pub fn finish_reconstruction(decoder_out: &Tensor, width: usize, height: usize) -> Result<RgbImage, PipelineError> {
    let x = decoder_out.map(|v| v.clamp(0.0, 1.0));
    Ok(RgbImage::from_tensor(&crop_tensor(&x, height, width))?)
}

/// PSNR of 8-bit images with peak 255.
pub fn psnr_u8(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!((a.width(), a.height()), (b.width(), b.height()), "psnr operands differ in size");
    let sse: u64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    psnr_from_mse(sse as f64 / a.data().len() as f64, 255.0)
}

/// Everything produced by a baseline (no update) encode.
#[derive(Clone, Debug)]
pub struct Baseline {
    pub prepared: Prepared,
    pub code: LatentCode,
    pub container: Container,
    pub bytes: Vec<u8>,
    pub recon: RgbImage,
    pub psnr: f64,
}

impl Baseline {
    pub fn total_bits(&self) -> u64 {
        8 * self.bytes.len() as u64
    }
}

pub fn encode_baseline(params: &ModelParams, image: &RgbImage, quality: u8) -> Result<Baseline, PipelineError> {
    let prepared = Prepared::new(image, params)?;
    let code = encode_latents(params, &prepared.padded)?;
    let recon = reconstruct(&code.y_hat, &params.decoder, image.width(), image.height())?;
    let container = Container {
        header: ContainerHeader {
            quality,
            layers: 0,
            width: image.width() as u16,
            height: image.height() as u16,
        },
        side: code.side.clone(),
        main: code.main.clone(),
        extra: None,
    };
    let bytes = write_container(&container)?;
    let psnr = psnr_u8(image, &recon);
    Ok(Baseline {
        prepared,
        code,
        container,
        bytes,
        recon,
        psnr,
    })
}

/// Baseline container extended with a coded update for the last `layers` decoder layers.
pub fn container_with_update(base: &Baseline, layers: usize, update: &CodedUpdate) -> Result<Container, PipelineError> {
    let l = u8::try_from(layers).map_err(|_| PipelineError::Mismatch("layer count exceeds 255".into()))?;
    Ok(Container {
        header: ContainerHeader {
            layers: l,
            ..base.container.header
        },
        extra: Some(update.extra.clone()),
        ..base.container.clone()
    })
}

/// Decodes a serialized container into the 8-bit image.
pub fn decode_image(params: &ModelParams, bytes: &[u8]) -> Result<RgbImage, PipelineError> {
    let c = read_container(bytes)?;
    decode_container(params, &c)
}

pub fn decode_container(params: &ModelParams, c: &Container) -> Result<RgbImage, PipelineError> {
    let (w, h) = (c.header.width as usize, c.header.height as usize);
    let m = params.config.pad_multiple();
    let (ph, pw) = (round_up(h, m), round_up(w, m));
    let y_hat = decode_latents(params, &c.main, c.side.as_deref(), ph, pw)?;
    let decoder = match &c.extra {
        None => params.decoder.clone(),
        Some(extra) => {
            let layers = c.header.layers as usize;
            let count = select_bias_subset(params, layers)?.len();
            let (_, delta) = decode_update(extra, count)?;
            apply_update(params, layers, &delta)?
        }
    };
    reconstruct(&y_hat, &decoder, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ArchConfig;
    use crate::image::synthetic_image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn baseline_roundtrip_both_kinds() {
        let img = synthetic_image(37, 21, &mut ChaCha8Rng::seed_from_u64(4));
        for cfg in [ArchConfig::default(), ArchConfig::factorized()] {
            let p = ModelParams::init(&cfg, 2).unwrap();
            let base = encode_baseline(&p, &img, 1).unwrap();
            assert_eq!(decode_image(&p, &base.bytes).unwrap(), base.recon);
            let est = p.rate_estimate(&base.code.y_hat, base.code.z_hat.as_ref()).unwrap();
            assert!((base.code.payload_bits() as f64) <= est + 2.0 * 128.0);
        }
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let img = synthetic_image(16, 16, &mut ChaCha8Rng::seed_from_u64(4));
        let hp = ModelParams::init(&ArchConfig::default(), 2).unwrap();
        let fp = ModelParams::init(&ArchConfig::factorized(), 2).unwrap();
        let base = encode_baseline(&hp, &img, 1).unwrap();
        assert!(matches!(decode_image(&fp, &base.bytes), Err(PipelineError::Mismatch(_))));
    }

    #[test]
    fn psnr_u8_reference() {
        let a = RgbImage::new(1, 1, vec![10, 10, 10]).unwrap();
        let b = RgbImage::new(1, 1, vec![11, 9, 10]).unwrap();
        let expect = 10.0 * (255.0f64 * 255.0 / (2.0 / 3.0)).log10();
        assert!((psnr_u8(&a, &b) - expect).abs() < 1e-12);
    }
}
