//! Per-image fine-tuning of the last decoder biases together with the update
//! quantization scale.
//!
//! The objective is a ratio: total bits over the bits the baseline zoo would
//! spend for the achieved PSNR. Training uses additive-noise quantization of
//! the update and a Gaussian fitted by moments; every evaluation step codes the
//! update for real and measures the exact ratio, and the best evaluated
//! snapshot is what gets transmitted.

use std::io::Write;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{add_bias_delta, forward_stack, uniform_noise, ConvLayer, ModelParams, LEAKY_SLOPE, STRIDE};
use crate::container::{write_container, Container, SIDE_INFO_BITS, UPDATE_SCALE_FLOOR};
use crate::image::RgbImage;
use crate::pipeline::{container_with_update, finish_reconstruction, psnr_u8, Baseline, PipelineError};
use crate::rd::{RdError, RdInterp, RdPoint};
use crate::tensor::{adam_step, AdamState, Graph, Real, Tensor, TensorError, Var};
use crate::train::Anchor;
use crate::update::{
    code_quantized, fit_truncated_gaussian, quantize_for_transmission, select_bias_subset, CodedUpdate,
    TruncatedGaussian, UpdateError,
};

pub const DEFAULT_ITERATIONS: usize = 2500;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_Q: f32 = 10.0;

#[derive(Debug, Error)]
pub enum OverfitError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Rd(#[from] RdError),
    #[error("non-finite loss at iteration {iteration}")]
    NonFinite { iteration: usize, trace: Vec<TraceRow> },
    #[error("rate interpolant is not positive ({0} bits) at the current PSNR")]
    NonPositiveRate(f64),
    #[error("invalid overfit config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverfitConfig {
    /// Number of trailing decoder layers whose biases are tuned.
    pub layers: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub q_init: f32,
    /// Bits charged for the transmitted update parameters.
    pub side_bits: f64,
    /// Test-time evaluation stride; the last iteration is always evaluated.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            iterations: DEFAULT_ITERATIONS,
            learning_rate: DEFAULT_LEARNING_RATE,
            q_init: DEFAULT_Q,
            side_bits: SIDE_INFO_BITS as f64,
            eval_every: 1,
            seed: 0,
        }
    }
}

/// Noise-relaxed quantization: `b q + u` and `b + u / q`, with `q` a 0-dimensional node.
pub fn quantize_updates_train<T: Real>(
    g: &mut Graph<T>,
    b: Var,
    q: Var,
    noise: Var,
) -> Result<(Var, Var), TensorError> {
    let shape = g.shape(b).to_vec();
    let qe = g.expand(q, &shape)?;
    let scaled = g.mul(b, qe)?;
    let relaxed = g.add(scaled, noise)?;
    let back = g.div(noise, qe)?;
    let delta = g.add(b, back)?;
    Ok((relaxed, delta))
}

/// Bits of the relaxed symbols under a Gaussian with their own mean and
/// standard deviation, the latter floored at the update scale floor.
pub fn update_rate_train<T: Real>(g: &mut Graph<T>, relaxed: Var) -> Result<Var, TensorError> {
    let shape = g.shape(relaxed).to_vec();
    let mean = g.mean(relaxed);
    let mean_e = g.expand(mean, &shape)?;
    let centered = g.sub(relaxed, mean_e)?;
    let sq = g.square(centered);
    let var = g.mean(sq);
    let floor = UPDATE_SCALE_FLOOR as f64;
    let var = g.clamp(var, T::of(floor * floor), T::infinity());
    let sd = g.sqrt(var);
    let sd_e = g.expand(sd, &shape)?;
    g.gaussian_bits(relaxed, mean_e, sd_e)
}

/// Fixed per-image inputs of the overfitting objective.
#[derive(Clone, Debug)]
pub struct OverfitProblem {
    pub layers: usize,
    /// Decoder activation entering the first tuned layer.
    pub prefix: Tensor,
    /// The tuned layers with their baseline parameters.
    pub tail: Vec<ConvLayer>,
    /// Original image, `[1, 3, H, W]` in `[0, 1]`.
    pub target: Tensor,
    pub image: RgbImage,
    /// `|mb| + |sb|` in bits.
    pub latent_bits: f64,
    pub side_bits: f64,
    pub r_func: RdInterp,
}

impl OverfitProblem {
    pub fn new(
        params: &ModelParams,
        base: &Baseline,
        layers: usize,
        r_func: RdInterp,
        side_bits: f64,
    ) -> Result<Self, OverfitError> {
        select_bias_subset(params, layers)?;
        let split = params.decoder.len() - layers;
        let prefix = forward_stack(&base.code.y_hat, &params.decoder[..split], true)?;
        Ok(Self {
            layers,
            prefix,
            tail: params.decoder[split..].to_vec(),
            target: base.prepared.original.clone(),
            image: base.prepared.image.clone(),
            latent_bits: base.code.payload_bits() as f64,
            side_bits,
            r_func,
        })
    }

    pub fn update_len(&self) -> usize {
        self.tail.iter().map(|l| l.bias.numel()).sum()
    }

    /// The relaxed ratio loss as a graph node, given leaves for `b`, `log q` and the noise.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, b: Var, log_q: Var, noise: Var) -> Result<Var, OverfitError> {
        let q = g.exp(log_q);
        let (relaxed, delta) = quantize_updates_train(g, b, q, noise)?;
        let rate = update_rate_train(g, relaxed)?;
        let num = g.shift(rate, T::of(self.latent_bits + self.side_bits));
        let mut x = g.constant(self.prefix.cast());
        let mut off = 0;
        for (i, l) in self.tail.iter().enumerate() {
            let n = l.bias.numel();
            let w = g.constant(l.weight.cast());
            let beta = g.constant(l.bias.cast());
            let d = g.narrow(delta, 0, off, n)?;
            let bias = g.add(beta, d)?;
            off += n;
            let pad = l.weight.shape()[2] / 2;
            x = if l.transposed {
                g.conv_transpose2d(x, w, bias, STRIDE, pad, STRIDE - 1)?
            } else {
                g.conv2d(x, w, bias, STRIDE, pad)?
            };
            if i + 1 < self.tail.len() {
                x = g.leaky_relu(x, T::of(LEAKY_SLOPE as f64));
            }
        }
        let (h, w) = (self.image.height(), self.image.width());
        if g.shape(x)[2] != h {
            x = g.narrow(x, 2, 0, h)?;
        }
        if g.shape(x)[3] != w {
            x = g.narrow(x, 3, 0, w)?;
        }
        let x = g.clamp(x, T::zero(), T::one());
        let target = g.constant(self.target.cast());
        let diff = g.sub(x, target)?;
        let sq = g.square(diff);
        let mse = g.mean(sq);
        let ln_mse = g.ln(mse);
        let psnr = g.scale(ln_mse, T::of(-10.0 / std::f64::consts::LN_10));
        let (lo, _) = self.r_func.anchors();
        let slope = self.r_func.slope();
        let den = g.scale(psnr, T::of(slope));
        let den = g.shift(den, T::of(lo.bits - slope * lo.psnr));
        let den_value = g.value(den).item().f64();
        if !(den_value > 0.0) {
            return Err(OverfitError::NonPositiveRate(den_value));
        }
        Ok(g.div(num, den)?)
    }

    /// Codes the update for real and measures the exact ratio.
    /// `None` when the update cannot be transmitted (symbols outside 8 bits).
    pub fn evaluate(&self, b: &[f32], q: f32, cache: &mut FitCache) -> Result<Option<Evaluation>, OverfitError> {
        let (q_code, b_hat) = match quantize_for_transmission(b, q) {
            Ok(v) => v,
            Err(UpdateError::OutOfRange { .. } | UpdateError::BadScale(_) | UpdateError::NonFinite) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let fit = cache.fit(&b_hat)?;
        let update = code_quantized(q_code, b_hat, fit)?;
        let mut tail = self.tail.clone();
        let mut off = 0;
        for l in &mut tail {
            let n = l.bias.numel();
            add_bias_delta(l.bias.data_mut(), &update.delta[off..off + n]);
            off += n;
        }
        let out = forward_stack(&self.prefix, &tail, false)?;
        let recon = finish_reconstruction(&out, self.image.width(), self.image.height())?;
        let psnr = psnr_u8(&self.image, &recon);
        let bits = self.latent_bits + update.payload_bits() as f64 + self.side_bits;
        // Below the interpolant's zero crossing the ratio is meaningless; never a candidate.
        let rate = self.r_func.rate(psnr);
        let acc = if rate > 0.0 { bits / rate } else { f64::INFINITY };
        Ok(Some(Evaluation {
            update,
            recon,
            psnr,
            bits,
            acc,
        }))
    }
}

/// Reuses the truncated-Gaussian fit while the quantized update is unchanged.
#[derive(Default)]
pub struct FitCache {
    last: Option<(Vec<i32>, TruncatedGaussian)>,
}

impl FitCache {
    fn fit(&mut self, b_hat: &[i32]) -> Result<TruncatedGaussian, UpdateError> {
        if let Some((k, f)) = &self.last {
            if k == b_hat {
                return Ok(*f);
            }
        }
        let f = fit_truncated_gaussian(b_hat)?;
        self.last = Some((b_hat.to_vec(), f));
        Ok(f)
    }
}

/// Test-time result of one candidate update.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub update: CodedUpdate,
    pub recon: RgbImage,
    /// PSNR of the 8-bit reconstruction.
    pub psnr: f64,
    /// `|mb| + |sb| + |update| + C`.
    pub bits: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// NaN for the initial row.
    pub train_loss: f64,
    /// `+inf` when the update could not be transmitted, NaN when not evaluated.
    pub test_acc: f64,
    pub psnr_db: f64,
    pub update_bits: f64,
}

pub const TRACE_HEADER: &str = "iteration,train_loss,test_acc,psnr_db,update_bits";

pub fn write_trace_csv(rows: &[TraceRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.iteration, r.train_loss, r.test_acc, r.psnr_db, r.update_bits
        )?;
    }
    Ok(())
}

/// Best snapshot of an overfitting run.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub iteration: usize,
    pub b: Vec<f32>,
    pub q: f32,
    pub eval: Evaluation,
}

#[derive(Clone, Debug)]
pub struct OverfitResult {
    pub best: Snapshot,
    /// Ratio of the zero update, including its side information.
    pub initial_acc: f64,
    /// Ratio of the baseline container alone, `(|mb| + |sb|) / R(psnr_base)`.
    pub baseline_acc: f64,
    pub trace: Vec<TraceRow>,
}

fn trace_row(iteration: usize, train_loss: f64, eval: Option<&Evaluation>) -> TraceRow {
    match eval {
        Some(e) => TraceRow {
            iteration,
            train_loss,
            test_acc: e.acc,
            psnr_db: e.psnr,
            update_bits: e.update.payload_bits() as f64,
        },
        None => TraceRow {
            iteration,
            train_loss,
            test_acc: f64::INFINITY,
            psnr_db: f64::NAN,
            update_bits: f64::NAN,
        },
    }
}

/// Runs the fine-tuning loop and returns the snapshot with the lowest test-time ratio.
pub fn overfit_image(problem: &OverfitProblem, cfg: &OverfitConfig) -> Result<OverfitResult, OverfitError> {
    if cfg.layers != problem.layers {
        return Err(OverfitError::Config(format!(
            "config tunes {} layers, problem was built for {}",
            cfg.layers, problem.layers
        )));
    }
    if !(cfg.q_init > 0.0 && cfg.q_init.is_finite()) || cfg.eval_every == 0 {
        return Err(OverfitError::Config("q_init must be positive and eval_every nonzero".into()));
    }
    let n = problem.update_len();
    let mut b = Tensor::<f32>::zeros(vec![n]);
    let mut log_q = Tensor::<f32>::scalar(cfg.q_init.ln());
    let mut adam_b = AdamState::new(n, cfg.learning_rate);
    let mut adam_q = AdamState::new(1, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = FitCache::default();
    let mut skipped = 0usize;

    let first = problem
        .evaluate(b.data(), cfg.q_init, &mut cache)?
        .ok_or_else(|| OverfitError::Config("initial update is not transmittable".into()))?;
    let mut trace = vec![trace_row(0, f64::NAN, Some(&first))];
    let initial_acc = first.acc;
    let baseline_acc = problem.latent_bits / problem.r_func.rate(first.psnr);
    let mut best = Snapshot {
        iteration: 0,
        b: b.data().to_vec(),
        q: cfg.q_init,
        eval: first,
    };

    for it in 1..=cfg.iterations {
        let mut g = Graph::<f32>::new();
        let bv = g.param(b.clone());
        let qv = g.param(log_q.clone());
        let noise = g.constant(uniform_noise(&[n], &mut rng));
        let loss_value = match problem.loss(&mut g, bv, qv, noise) {
            Ok(loss) => {
                let value = g.value(loss).item() as f64;
                if !value.is_finite() {
                    trace.push(trace_row(it, value, None));
                    return Err(OverfitError::NonFinite { iteration: it, trace });
                }
                g.backward(loss)?;
                if let Some(gb) = g.grad(bv) {
                    adam_step(&mut b, gb, &mut adam_b)?;
                }
                if let Some(gq) = g.grad(qv) {
                    adam_step(&mut log_q, gq, &mut adam_q)?;
                }
                value
            }
            // The noisy reconstruction fell below the rate line's zero crossing. The ratio has
            // no meaningful gradient there, so the step is skipped and the state kept.
            Err(OverfitError::NonPositiveRate(den)) => {
                debug!("iteration {it}: rate interpolant {den:.1} <= 0, step skipped");
                skipped += 1;
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        if it % cfg.eval_every != 0 && it != cfg.iterations {
            trace.push(TraceRow {
                iteration: it,
                train_loss: loss_value,
                test_acc: f64::NAN,
                psnr_db: f64::NAN,
                update_bits: f64::NAN,
            });
            continue;
        }
        let q = log_q.item().exp();
        let eval = problem.evaluate(b.data(), q, &mut cache)?;
        trace.push(trace_row(it, loss_value, eval.as_ref()));
        if let Some(e) = eval {
            if e.acc < best.eval.acc {
                debug!("iteration {it}: acc {:.5} psnr {:.3}", e.acc, e.psnr);
                best = Snapshot {
                    iteration: it,
                    b: b.data().to_vec(),
                    q,
                    eval: e,
                };
            }
        }
    }
    if skipped > 0 {
        info!("{skipped} of {} steps skipped with a non-positive rate interpolant", cfg.iterations);
    }
    Ok(OverfitResult {
        best,
        initial_acc,
        baseline_acc,
        trace,
    })
}

/// Rate interpolants for one image.
#[derive(Clone, Copy, Debug)]
pub struct ImageAnchors {
    /// Over `|mb| + |sb|`, used inside the objective.
    pub payload: RdInterp,
    /// Over whole-container bits, used for reported savings.
    pub container: RdInterp,
    /// False when the validation-mean fallback was used.
    pub per_image: bool,
}

/// Anchors from baseline encodes of the same image at two zoo qualities,
/// falling back to validation means if those are not strictly increasing.
pub fn image_anchors(a: &Baseline, b: &Baseline, fallback: Option<(Anchor, Anchor)>) -> Result<ImageAnchors, RdError> {
    let per_image = (|| {
        Ok::<_, RdError>(ImageAnchors {
            payload: RdInterp::new(
                RdPoint::new(a.code.payload_bits() as f64, a.psnr),
                RdPoint::new(b.code.payload_bits() as f64, b.psnr),
            )?,
            container: RdInterp::new(
                RdPoint::new(a.total_bits() as f64, a.psnr),
                RdPoint::new(b.total_bits() as f64, b.psnr),
            )?,
            per_image: true,
        })
    })();
    match (per_image, fallback) {
        (Ok(v), _) => Ok(v),
        (Err(e), None) => Err(e),
        (Err(_), Some((x, y))) => {
            log::warn!("per-image anchors not monotone; using validation means");
            Ok(ImageAnchors {
                payload: RdInterp::new(RdPoint::new(x.payload_bits, x.psnr), RdPoint::new(y.payload_bits, y.psnr))?,
                container: RdInterp::new(RdPoint::new(x.bits, x.psnr), RdPoint::new(y.bits, y.psnr))?,
                per_image: false,
            })
        }
    }
}

/// Result of an overfitted encode.
#[derive(Clone, Debug)]
pub struct OverfitEncoding {
    pub container: Container,
    pub bytes: Vec<u8>,
    pub result: OverfitResult,
}

impl OverfitEncoding {
    pub fn total_bits(&self) -> u64 {
        8 * self.bytes.len() as u64
    }

    /// Whether the best update failed to beat the plain baseline container.
    pub fn never_helped(&self) -> bool {
        self.result.best.eval.acc >= self.result.baseline_acc
    }
}

/// Overfits the baseline encode of an image and packs the best update into a container.
pub fn encode_overfit(
    params: &ModelParams,
    base: &Baseline,
    r_func: RdInterp,
    cfg: &OverfitConfig,
) -> Result<OverfitEncoding, OverfitError> {
    let problem = OverfitProblem::new(params, base, cfg.layers, r_func, cfg.side_bits)?;
    let result = overfit_image(&problem, cfg)?;
    let container = container_with_update(base, cfg.layers, &result.best.eval.update)?;
    let bytes = write_container(&container).map_err(PipelineError::from)?;
    Ok(OverfitEncoding {
        container,
        bytes,
        result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ArchConfig;
    use crate::image::synthetic_image;
    use crate::pipeline::{decode_image, encode_baseline};

    fn setup() -> (ModelParams, Baseline, RdInterp) {
        let p = ModelParams::init(&ArchConfig::default(), 7).unwrap();
        let img = synthetic_image(40, 24, &mut ChaCha8Rng::seed_from_u64(2));
        let base = encode_baseline(&p, &img, 1).unwrap();
        let bits = base.code.payload_bits() as f64;
        let r = RdInterp::new(RdPoint::new(bits, base.psnr), RdPoint::new(2.0 * bits, base.psnr + 3.0)).unwrap();
        (p, base, r)
    }

    #[test]
    fn zero_noise_relaxation_is_identity() {
        let mut g = Graph::<f64>::new();
        let b = g.param(Tensor::from_vec(vec![0.25, -0.5]));
        let q = g.param(Tensor::scalar(10.0));
        let u = g.constant(Tensor::zeros(vec![2]));
        let (r, d) = quantize_updates_train(&mut g, b, q, u).unwrap();
        assert_eq!(g.value(r).data(), &[2.5, -5.0]);
        assert_eq!(g.value(d).data(), &[0.25, -0.5]);
    }

    #[test]
    fn degenerate_rate_is_near_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(vec![50], 3.0));
        let r = update_rate_train(&mut g, x).unwrap();
        assert!(g.value(r).item() < 1e-3);
        g.backward(r).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let (p, base, r) = setup();
        let cfg = OverfitConfig {
            layers: 3,
            iterations: 0,
            ..OverfitConfig::default()
        };
        let enc = encode_overfit(&p, &base, r, &cfg).unwrap();
        let best = &enc.result.best;
        assert_eq!(best.iteration, 0);
        assert!(best.b.iter().all(|&v| v == 0.0));
        assert_eq!(best.q, 10.0);
        assert_eq!(best.eval.psnr, base.psnr);
        assert_eq!(best.eval.recon, base.recon);
        let expect = (base.code.payload_bits() as f64 + 64.0) / r.rate(base.psnr);
        assert_eq!(best.eval.acc, expect);
        assert_eq!(enc.total_bits(), base.total_bits() + 64 + 32);
        assert_eq!(decode_image(&p, &enc.bytes).unwrap(), base.recon);
    }

    #[test]
    fn steps_below_the_rate_zero_crossing_are_skipped() {
        let (p, base, _) = setup();
        let bits = base.code.payload_bits() as f64;
        // The rate line crosses zero 1 dB above the baseline, so no draw has a positive rate.
        let r = RdInterp::new(RdPoint::new(bits, base.psnr + 2.0), RdPoint::new(2.0 * bits, base.psnr + 3.0)).unwrap();
        let cfg = OverfitConfig {
            layers: 2,
            iterations: 5,
            ..OverfitConfig::default()
        };
        let res = encode_overfit(&p, &base, r, &cfg).unwrap().result;
        assert!(res.trace[1..].iter().all(|t| t.train_loss.is_nan() && t.test_acc == f64::INFINITY));
        assert_eq!(res.best.iteration, 0);
        assert!(res.best.b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn best_tracking_and_decoder_agreement() {
        let (p, base, r) = setup();
        for layers in 1..=3 {
            let cfg = OverfitConfig {
                layers,
                iterations: 12,
                learning_rate: 1e-2,
                ..OverfitConfig::default()
            };
            let enc = encode_overfit(&p, &base, r, &cfg).unwrap();
            let res = &enc.result;
            let min = res.trace.iter().map(|t| t.test_acc).fold(f64::INFINITY, f64::min);
            assert_eq!(res.best.eval.acc, min);
            assert_eq!(res.trace.len(), 13);
            assert_eq!(decode_image(&p, &enc.bytes).unwrap(), res.best.eval.recon);
        }
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let rows = vec![trace_row(0, f64::NAN, None)];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(TRACE_HEADER));
        assert_eq!(text.lines().count(), 2);
    }
}
