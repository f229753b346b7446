use super::{CodecError, ConvLayer, ModelKind, ModelParams, LEAKY_SLOPE, STRIDE};
use crate::prob::{self, SCALE_CAP, SCALE_FLOOR};
use crate::tensor::{conv2d, conv_transpose2d, Graph, Real, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StackKind {
    Conv,
    Transposed,
}

/// Graph handles for every model parameter.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: Vec<LayerVars>,
    pub decoder: Vec<LayerVars>,
    pub hyper_encoder: Vec<LayerVars>,
    pub hyper_decoder: Vec<LayerVars>,
    pub prior_loc: Var,
    pub prior_log_scale: Var,
}

impl ModelVars {
    /// Registers all parameters as leaves, cast to `T`.
    pub fn bind<T: Real>(g: &mut Graph<T>, params: &ModelParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| g.leaf(t.cast::<T>(), trainable);
        let layers = |ls: &[ConvLayer], leaf: &mut dyn FnMut(&Tensor) -> Var| {
            ls.iter()
                .map(|l| LayerVars {
                    weight: leaf(&l.weight),
                    bias: leaf(&l.bias),
                })
                .collect::<Vec<_>>()
        };
        let encoder = layers(&params.encoder, &mut leaf);
        let decoder = layers(&params.decoder, &mut leaf);
        let hyper_encoder = layers(&params.hyper_encoder, &mut leaf);
        let hyper_decoder = layers(&params.hyper_decoder, &mut leaf);
        let prior_loc = leaf(&params.prior.loc);
        let prior_log_scale = leaf(&params.prior.log_scale);
        Self {
            encoder,
            decoder,
            hyper_encoder,
            hyper_decoder,
            prior_loc,
            prior_log_scale,
        }
    }

    /// Handles in the order of [`ModelParams::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for ls in [&self.encoder, &self.decoder, &self.hyper_encoder, &self.hyper_decoder] {
            for l in ls {
                out.push(l.weight);
                out.push(l.bias);
            }
        }
        out.push(self.prior_loc);
        out.push(self.prior_log_scale);
        out
    }
}

/// Stride-2 layers with leaky ReLU between them, and after the last one if `activate_last`.
pub fn run_stack<T: Real>(
    g: &mut Graph<T>,
    mut x: Var,
    layers: &[LayerVars],
    kind: StackKind,
    activate_last: bool,
) -> Result<Var, TensorError> {
    for (i, l) in layers.iter().enumerate() {
        let pad = g.shape(l.weight)[2] / 2;
        x = match kind {
            StackKind::Conv => g.conv2d(x, l.weight, l.bias, STRIDE, pad)?,
            StackKind::Transposed => g.conv_transpose2d(x, l.weight, l.bias, STRIDE, pad, STRIDE - 1)?,
        };
        if activate_last || i + 1 < layers.len() {
            x = g.leaky_relu(x, T::of(LEAKY_SLOPE as f64));
        }
    }
    Ok(x)
}

pub fn analyze_graph<T: Real>(g: &mut Graph<T>, mv: &ModelVars, x: Var) -> Result<Var, TensorError> {
    run_stack(g, x, &mv.encoder, StackKind::Conv, false)
}

/// `(mean, scale)` with the scale clamped to `[SCALE_FLOOR, SCALE_CAP]`.
pub fn hyper_synthesize_graph<T: Real>(
    g: &mut Graph<T>,
    mv: &ModelVars,
    z_hat: Var,
) -> Result<(Var, Var), TensorError> {
    let out = run_stack(g, z_hat, &mv.hyper_decoder, StackKind::Transposed, false)?;
    let c = g.shape(out)[1] / 2;
    let mean = g.narrow(out, 1, 0, c)?;
    let raw = g.narrow(out, 1, c, c)?;
    let scale = g.exp(raw);
    let scale = g.clamp(scale, T::of(SCALE_FLOOR), T::of(SCALE_CAP));
    Ok((mean, scale))
}

/// Plain forward through a layer stack, identical in arithmetic to [`run_stack`].
pub fn forward_stack(x: &Tensor, layers: &[ConvLayer], activate_last: bool) -> Result<Tensor, TensorError> {
    let mut x = x.clone();
    for (i, l) in layers.iter().enumerate() {
        let pad = l.weight.shape()[2] / 2;
        x = if l.transposed {
            conv_transpose2d(&x, &l.weight, &l.bias, STRIDE, pad, STRIDE - 1)?
        } else {
            conv2d(&x, &l.weight, &l.bias, STRIDE, pad)?
        };
        if activate_last || i + 1 < layers.len() {
            x = x.map(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v });
        }
    }
    Ok(x)
}

impl ModelParams {
    fn check_extent(&self, x: &Tensor) -> Result<(), CodecError> {
        let m = self.config.pad_multiple();
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(CodecError::Tensor(crate::tensor::shape_err(
                "analyze",
                format!("expected [N, 3, H, W], got {s:?}"),
            )));
        }
        if s[2] % m != 0 || s[3] % m != 0 {
            return Err(CodecError::Indivisible {
                height: s[2],
                width: s[3],
                multiple: m,
            });
        }
        Ok(())
    }

    /// Latent `y` of an image batch in `[0, 1]`.
    pub fn analyze(&self, x: &Tensor) -> Result<Tensor, CodecError> {
        self.check_extent(x)?;
        Ok(forward_stack(x, &self.encoder, false)?)
    }

    /// Side latent `z` of `y`.
    pub fn hyper_analyze(&self, y: &Tensor) -> Result<Tensor, CodecError> {
        Ok(forward_stack(y, &self.hyper_encoder, false)?)
    }

    /// Per-element `(mean, scale)` for `y` given the decoded side latent.
    pub fn hyper_synthesize(&self, z_hat: &Tensor) -> Result<(Tensor, Tensor), CodecError> {
        let out = forward_stack(z_hat, &self.hyper_decoder, false)?;
        let s = out.shape().to_vec();
        let c = s[1] / 2;
        let plane: usize = s[2] * s[3];
        let mut mean = Vec::with_capacity(out.numel() / 2);
        let mut scale = Vec::with_capacity(out.numel() / 2);
        for n in 0..s[0] {
            let base = n * 2 * c * plane;
            mean.extend_from_slice(&out.data()[base..base + c * plane]);
            scale.extend(
                out.data()[base + c * plane..base + 2 * c * plane]
                    .iter()
                    .map(|&r| r.exp().clamp(SCALE_FLOOR as f32, SCALE_CAP as f32)),
            );
        }
        let shape = vec![s[0], c, s[2], s[3]];
        Ok((Tensor::new(shape.clone(), mean)?, Tensor::new(shape, scale)?))
    }

    /// Reconstruction clamped to `[0, 1]` through the given decoder layers.
    pub fn synthesize_with(&self, y_hat: &Tensor, decoder: &[ConvLayer]) -> Result<Tensor, CodecError> {
        let x = forward_stack(y_hat, decoder, false)?;
        Ok(x.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn synthesize(&self, y_hat: &Tensor) -> Result<Tensor, CodecError> {
        self.synthesize_with(y_hat, &self.decoder)
    }

    /// Estimated bits for quantized latents: `-sum log2 pmf` with the likelihood floor.
    ///
    /// `z_hat` is required for the hyperprior model and ignored otherwise.
    pub fn rate_estimate(&self, y_hat: &Tensor, z_hat: Option<&Tensor>) -> Result<f64, CodecError> {
        match self.config.kind {
            ModelKind::Factorized => Ok(self.factorized_bits(y_hat)),
            ModelKind::Hyperprior => {
                let z_hat = z_hat.ok_or(CodecError::Arch("hyperprior rate needs z_hat".into()))?;
                let (mean, scale) = self.hyper_synthesize(z_hat)?;
                let y_bits: f64 = y_hat
                    .data()
                    .iter()
                    .zip(mean.data())
                    .zip(scale.data())
                    .map(|((&v, &m), &s)| prob::bits_of(prob::gaussian_pmf(v as f64, m as f64, s as f64)))
                    .sum();
                Ok(y_bits + self.factorized_bits(z_hat))
            }
        }
    }

    fn factorized_bits(&self, v: &Tensor) -> f64 {
        let c = v.shape()[1];
        let plane: usize = v.shape()[2..].iter().product();
        v.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| prob::bits_of(self.prior.pmf(x as f64, (i / plane) % c)))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{quantize_round, ArchConfig};

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(vec![1, 3, h, w], |i| ((i * 37) % 101) as f32 / 100.0)
    }

    #[test]
    fn shapes_through_the_hyperprior_model() {
        let p = ModelParams::init(&ArchConfig::default(), 3).unwrap();
        let x = image(64, 32);
        let y = p.analyze(&x).unwrap();
        assert_eq!(y.shape(), &[1, 48, 8, 4]);
        let z = p.hyper_analyze(&y).unwrap();
        assert_eq!(z.shape(), &[1, 32, 2, 1]);
        let (m, s) = p.hyper_synthesize(&quantize_round(&z).unwrap()).unwrap();
        assert_eq!(m.shape(), y.shape());
        assert!(s.data().iter().all(|&v| (0.04..=64.0).contains(&v)));
        let xr = p.synthesize(&quantize_round(&y).unwrap()).unwrap();
        assert_eq!(xr.shape(), x.shape());
        assert!(xr.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn indivisible_input_rejected() {
        let p = ModelParams::init(&ArchConfig::default(), 3).unwrap();
        assert!(matches!(p.analyze(&image(40, 32)), Err(CodecError::Indivisible { .. })));
        let f = ModelParams::init(&ArchConfig::factorized(), 3).unwrap();
        assert!(f.analyze(&image(40, 32)).is_ok());
    }

    #[test]
    fn graph_and_plain_forward_agree_bitwise() {
        let p = ModelParams::init(&ArchConfig::default(), 9).unwrap();
        let x = image(32, 32);
        let mut g = Graph::<f32>::new();
        let mv = ModelVars::bind(&mut g, &p, false);
        let xv = g.constant(x.clone());
        let y = analyze_graph(&mut g, &mv, xv).unwrap();
        assert_eq!(g.value(y), &p.analyze(&x).unwrap());
        let yq = g.constant(quantize_round(g.value(y)).unwrap());
        let xr = run_stack(&mut g, yq, &mv.decoder, StackKind::Transposed, false).unwrap();
        let plain = forward_stack(g.value(yq), &p.decoder, false).unwrap();
        assert_eq!(g.value(xr), &plain);
    }

    #[test]
    fn rate_estimate_matches_direct_sum() {
        let p = ModelParams::init(&ArchConfig::factorized(), 1).unwrap();
        let y = quantize_round(&p.analyze(&image(16, 16)).unwrap()).unwrap();
        let direct: f64 = y
            .data()
            .iter()
            .map(|&v| -crate::prob::logistic_pmf(v as f64, 0.0, 1.0).max(1e-9).log2())
            .sum();
        assert!((p.rate_estimate(&y, None).unwrap() - direct).abs() < 1e-9);
    }
}
