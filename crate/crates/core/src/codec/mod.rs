//! The neural codec: transforms, quantizers and entropy models.
//!
//! Analysis and synthesis transforms are stacks of stride-2 convolutions with
//! leaky ReLU between layers. The hyperprior variant adds a two-layer
//! hyper-analysis producing side latents `z` and a hyper-synthesis producing
//! per-element `(mean, scale)` for the latents `y`.

mod checkpoint;
pub mod coding;
mod forward;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    analyze_graph, forward_stack, hyper_synthesize_graph, run_stack, LayerVars, ModelVars, StackKind,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::EntropyError;
use crate::tensor::{Tensor, TensorError};

/// Every transform layer downsamples (or upsamples) by this factor.
pub const STRIDE: usize = 2;
pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("image extent {height}x{width} is not a multiple of {multiple}; pad the input first")]
    Indivisible {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("NaN or infinite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Factorized,
    Hyperprior,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kind: ModelKind,
    /// Channels of the latent `y`.
    pub latent_channels: usize,
    /// Channels of the side latent `z`.
    pub hyper_channels: usize,
    /// Width of the hidden layers of the main transforms.
    pub base_width: usize,
    pub kernel: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hyper_layers: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Hyperprior,
            latent_channels: 48,
            hyper_channels: 32,
            base_width: 64,
            kernel: 5,
            encoder_layers: 3,
            decoder_layers: 3,
            hyper_layers: 2,
        }
    }
}

impl ArchConfig {
    pub fn factorized() -> Self {
        Self {
            kind: ModelKind::Factorized,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |m: &str| Err(CodecError::Arch(m.to_string()));
        if self.kernel % 2 == 0 || self.kernel < 3 {
            return bad("kernel must be odd and at least 3");
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder and decoder need at least one layer");
        }
        if self.latent_channels == 0 || self.base_width == 0 {
            return bad("channel counts must be positive");
        }
        if self.kind == ModelKind::Hyperprior && (self.hyper_layers == 0 || self.hyper_channels == 0) {
            return bad("hyperprior needs hyper layers and channels");
        }
        Ok(())
    }

    /// Required divisor of input height and width.
    pub fn pad_multiple(&self) -> usize {
        let layers = match self.kind {
            ModelKind::Factorized => self.encoder_layers,
            ModelKind::Hyperprior => self.encoder_layers + self.hyper_layers,
        };
        STRIDE.pow(layers as u32)
    }

    pub fn latent_downsampling(&self) -> usize {
        STRIDE.pow(self.encoder_layers as u32)
    }

    fn widths(inputs: usize, hidden: usize, output: usize, layers: usize) -> Vec<(usize, usize)> {
        (0..layers)
            .map(|i| {
                let cin = if i == 0 { inputs } else { hidden };
                let cout = if i + 1 == layers { output } else { hidden };
                (cin, cout)
            })
            .collect()
    }

    /// `(in, out)` channels per encoder layer.
    pub fn encoder_widths(&self) -> Vec<(usize, usize)> {
        Self::widths(3, self.base_width, self.latent_channels, self.encoder_layers)
    }

    pub fn decoder_widths(&self) -> Vec<(usize, usize)> {
        Self::widths(self.latent_channels, self.base_width, 3, self.decoder_layers)
    }

    pub fn hyper_encoder_widths(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::Factorized => Vec::new(),
            ModelKind::Hyperprior => Self::widths(
                self.latent_channels,
                self.hyper_channels,
                self.hyper_channels,
                self.hyper_layers,
            ),
        }
    }

    /// The last hyper-decoder layer emits means and raw scales stacked on the channel axis.
    pub fn hyper_decoder_widths(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::Factorized => Vec::new(),
            ModelKind::Hyperprior => Self::widths(
                self.hyper_channels,
                self.hyper_channels,
                2 * self.latent_channels,
                self.hyper_layers,
            ),
        }
    }

    /// Channels coded with the factorized prior.
    pub fn prior_channels(&self) -> usize {
        match self.kind {
            ModelKind::Factorized => self.latent_channels,
            ModelKind::Hyperprior => self.hyper_channels,
        }
    }
}

/// One convolution layer. Transposed layers store weights as `[C_in, O, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub transposed: bool,
}

impl ConvLayer {
    fn init(cin: usize, cout: usize, k: usize, transposed: bool, rng: &mut ChaCha8Rng) -> Self {
        let shape = if transposed {
            vec![cin, cout, k, k]
        } else {
            vec![cout, cin, k, k]
        };
        let mut fan_in = (cin * k * k) as f64;
        if transposed {
            fan_in /= (STRIDE * STRIDE) as f64;
        }
        let slope = LEAKY_SLOPE as f64;
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in)).sqrt() as f32;
        let weight = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        Self {
            weight,
            bias: Tensor::zeros(vec![cout]),
            transposed,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.numel()
    }
}

/// Per-channel logistic prior.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrior {
    pub loc: Tensor,
    pub log_scale: Tensor,
}

impl FactorizedPrior {
    pub fn new(channels: usize) -> Self {
        Self {
            loc: Tensor::zeros(vec![channels]),
            log_scale: Tensor::zeros(vec![channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.loc.numel()
    }

    pub fn scale(&self, channel: usize) -> f64 {
        (self.log_scale.data()[channel] as f64).exp()
    }

    pub fn pmf(&self, x: f64, channel: usize) -> f64 {
        crate::prob::logistic_pmf(x, self.loc.data()[channel] as f64, self.scale(channel))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ArchConfig,
    pub encoder: Vec<ConvLayer>,
    /// Decoder layers. Their bias vectors, in order, are the overfittable biases.
    pub decoder: Vec<ConvLayer>,
    pub hyper_encoder: Vec<ConvLayer>,
    pub hyper_decoder: Vec<ConvLayer>,
    pub prior: FactorizedPrior,
}

impl ModelParams {
    /// Deterministic Kaiming-uniform initialization with zero biases.
    pub fn init(config: &ArchConfig, seed: u64) -> Result<Self, CodecError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel;
        let mut stack = |widths: Vec<(usize, usize)>, transposed: bool| -> Vec<ConvLayer> {
            widths
                .into_iter()
                .map(|(i, o)| ConvLayer::init(i, o, k, transposed, &mut rng))
                .collect()
        };
        let encoder = stack(config.encoder_widths(), false);
        let decoder = stack(config.decoder_widths(), true);
        let hyper_encoder = stack(config.hyper_encoder_widths(), false);
        let hyper_decoder = stack(config.hyper_decoder_widths(), true);
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            hyper_encoder,
            hyper_decoder,
            prior: FactorizedPrior::new(config.prior_channels()),
        })
    }

    /// Every parameter tensor with its checkpoint name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, layers) in [
            ("enc", &self.encoder),
            ("dec", &self.decoder),
            ("hyper_enc", &self.hyper_encoder),
            ("hyper_dec", &self.hyper_decoder),
        ] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out.push(("prior.loc".to_string(), &self.prior.loc));
        out.push(("prior.log_scale".to_string(), &self.prior.log_scale));
        out
    }

    /// Mutable counterpart of [`named_tensors`](Self::named_tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layers in [
            &mut self.encoder,
            &mut self.decoder,
            &mut self.hyper_encoder,
            &mut self.hyper_decoder,
        ] {
            for l in layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.prior.loc);
        out.push(&mut self.prior.log_scale);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Decoder bias vectors in layer order.
    pub fn decoder_biases(&self) -> Vec<&Tensor> {
        self.decoder.iter().map(|l| &l.bias).collect()
    }

    /// Length of the concatenated decoder biases.
    pub fn decoder_bias_count(&self) -> usize {
        self.decoder.iter().map(|l| l.bias.numel()).sum()
    }

    /// Decoder parameters other than biases.
    pub fn decoder_weight_count(&self) -> usize {
        self.decoder.iter().map(|l| l.weight.numel()).sum()
    }

    /// Decoder with `delta` added to the concatenated bias vector.
    pub fn decoder_with_bias_delta(&self, delta: &[f32]) -> Result<Vec<ConvLayer>, CodecError> {
        if delta.len() != self.decoder_bias_count() {
            return Err(CodecError::Arch(format!(
                "bias delta has {} entries, decoder has {} biases",
                delta.len(),
                self.decoder_bias_count()
            )));
        }
        let mut offset = 0;
        let mut layers = self.decoder.clone();
        for l in &mut layers {
            let n = l.bias.numel();
            add_bias_delta(l.bias.data_mut(), &delta[offset..offset + n]);
            offset += n;
        }
        Ok(layers)
    }
}

/// The one place decoder biases are offset, so encoder and decoder agree bit for bit.
pub fn add_bias_delta(bias: &mut [f32], delta: &[f32]) {
    for (b, d) in bias.iter_mut().zip(delta) {
        *b += *d;
    }
}

/// Round half away from zero.
pub fn quantize_round(v: &Tensor) -> Result<Tensor, CodecError> {
    if !v.all_finite() {
        return Err(CodecError::NonFinite("quantize_round input"));
    }
    Ok(v.map(f32::round))
}

/// Additive `U[-0.5, 0.5)` noise of the given shape.
pub fn uniform_noise<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen::<f32>() - 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_bias_count_and_ratio() {
        let p = ModelParams::init(&ArchConfig::default(), 0).unwrap();
        assert_eq!(p.decoder_biases().len(), 3);
        assert_eq!(p.decoder_bias_count(), 64 + 64 + 3);
        assert!(p.decoder_bias_count() * 100 < p.decoder_weight_count());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let t = Tensor::from_vec(vec![0.4, 0.5, -0.5, -1.6, 2.0, -3.0]);
        assert_eq!(quantize_round(&t).unwrap().data(), &[0.0, 1.0, -1.0, -2.0, 2.0, -3.0]);
        let bad = Tensor::from_vec(vec![f32::NAN]);
        assert!(matches!(quantize_round(&bad), Err(CodecError::NonFinite(_))));
    }

    #[test]
    fn noise_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = uniform_noise(&[1000], &mut rng);
        assert!(n.data().iter().all(|&u| (-0.5..0.5).contains(&u)));
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(&ArchConfig::default(), 42).unwrap();
        let b = ModelParams::init(&ArchConfig::default(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pad_multiples() {
        assert_eq!(ArchConfig::default().pad_multiple(), 32);
        assert_eq!(ArchConfig::factorized().pad_multiple(), 8);
    }

    #[test]
    fn bias_delta_shape_checked() {
        let p = ModelParams::init(&ArchConfig::default(), 0).unwrap();
        assert!(p.decoder_with_bias_delta(&[0.0; 5]).is_err());
        let layers = p.decoder_with_bias_delta(&vec![0.0; 131]).unwrap();
        assert_eq!(layers, p.decoder);
    }
}
