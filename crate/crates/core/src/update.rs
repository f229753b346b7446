//! Quantized decoder-bias updates: subset selection, hard quantization,
//! the truncated discretized Gaussian model and its coding.

use std::ops::Range;

use thiserror::Error;

use crate::codec::{CodecError, ConvLayer, ModelParams};
use crate::container::{decode_f16, encode_f16, ExtraSection, UPDATE_SCALE_FLOOR};
use crate::entropy::{CdfTable, EntropyError, RangeDecoder, RangeEncoder};
use crate::prob;

#[derive(Debug, Error)]
pub enum UpdateError {
    #[error("layer count {layers} outside 1..={max}")]
    BadLayerCount { layers: usize, max: usize },
    #[error("empty update vector")]
    Empty,
    #[error("update symbols span [{min}, {max}], outside the signed 8-bit range")]
    OutOfRange { min: i64, max: i64 },
    #[error("quantization scale {0} is not a positive finite binary16 value")]
    BadScale(f32),
    #[error("non-finite update value")]
    NonFinite,
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Indices into the concatenated decoder biases covered by the last `layers` layers.
pub fn select_bias_subset(params: &ModelParams, layers: usize) -> Result<Range<usize>, UpdateError> {
    let total = params.decoder.len();
    if layers == 0 || layers > total {
        return Err(UpdateError::BadLayerCount { layers, max: total });
    }
    let start: usize = params.decoder[..total - layers].iter().map(|l| l.bias.numel()).sum();
    Ok(start..params.decoder_bias_count())
}

/// Hard quantization `b_hat = round(b q)` and its dequantization `b_hat / q`.
pub fn quantize_updates_test(b: &[f32], q: f32) -> (Vec<i32>, Vec<f32>) {
    let b_hat: Vec<i32> = b.iter().map(|&v| (v * q).round() as i32).collect();
    let delta = dequantize(&b_hat, q);
    (b_hat, delta)
}

pub fn dequantize(b_hat: &[i32], q: f32) -> Vec<f32> {
    b_hat.iter().map(|&s| s as f32 / q).collect()
}

/// Maximum-likelihood parameters of a Gaussian discretized to integers and
/// truncated to `[s_min, s_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncatedGaussian {
    pub mean: f64,
    pub scale: f64,
    pub s_min: i32,
    pub s_max: i32,
}

impl TruncatedGaussian {
    /// Normalized pmf over `s_min..=s_max`.
    pub fn pmf(&self) -> Vec<f64> {
        truncated_pmf(self.mean, self.scale, self.s_min, self.s_max)
    }

    /// `sum ln pmf(b_hat_i)` under the truncated model.
    pub fn log_likelihood(&self, b_hat: &[i32]) -> f64 {
        let hist = histogram(b_hat, self.s_min, self.s_max);
        hist_log_likelihood(&hist, self.s_min, self.mean, self.scale)
    }
}

pub fn truncated_pmf(mean: f64, scale: f64, s_min: i32, s_max: i32) -> Vec<f64> {
    let raw: Vec<f64> = (s_min..=s_max).map(|z| prob::gaussian_pmf(z as f64, mean, scale)).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        let n = raw.len() as f64;
        return vec![1.0 / n; raw.len()];
    }
    raw.into_iter().map(|p| p / total).collect()
}

fn histogram(b_hat: &[i32], s_min: i32, s_max: i32) -> Vec<u32> {
    let mut h = vec![0u32; (s_max - s_min + 1) as usize];
    for &v in b_hat {
        h[(v - s_min) as usize] += 1;
    }
    h
}

fn hist_log_likelihood(hist: &[u32], s_min: i32, mean: f64, scale: f64) -> f64 {
    let mut ll = 0.0;
    let mut norm = 0.0;
    let mut n = 0.0;
    for (i, &c) in hist.iter().enumerate() {
        let p = prob::gaussian_pmf((s_min + i as i32) as f64, mean, scale);
        norm += p;
        if c > 0 {
            ll += c as f64 * p.ln();
            n += c as f64;
        }
    }
    let ll = ll - n * norm.ln();
    if ll.is_nan() {
        f64::NEG_INFINITY
    } else {
        ll
    }
}

const SCAN_POINTS: usize = 64;
const GOLDEN_STEPS: usize = 60;

/// Maximizes `f` on `[lo, hi]`: a uniform scan locates the best cell, golden-section refines it.
fn maximize_1d(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let (mut best_x, mut best_f) = (lo, f64::NEG_INFINITY);
    let mut best_i = 0;
    for i in 0..SCAN_POINTS {
        let x = lo + step * i as f64;
        let v = f(x);
        if v > best_f {
            (best_x, best_f, best_i) = (x, v, i);
        }
    }
    let mut a = lo + step * best_i.saturating_sub(1) as f64;
    let mut b = (lo + step * (best_i + 1) as f64).min(hi);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_STEPS {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    for (x, v) in [(c, fc), (d, fd)] {
        if v > best_f {
            (best_x, best_f) = (x, v);
        }
    }
    (best_x, best_f)
}

/// Fits `(mean, scale)` by maximizing the truncated discretized likelihood.
///
/// The scale is searched on the profile likelihood `max_mean LL(mean, scale)`,
/// each profile point being itself a scan plus golden-section search over the mean.
pub fn fit_truncated_gaussian(b_hat: &[i32]) -> Result<TruncatedGaussian, UpdateError> {
    let (&lo, &hi) = match (b_hat.iter().min(), b_hat.iter().max()) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => return Err(UpdateError::Empty),
    };
    if lo < i8::MIN as i32 || hi > i8::MAX as i32 {
        return Err(UpdateError::OutOfRange {
            min: lo as i64,
            max: hi as i64,
        });
    }
    if lo == hi {
        return Ok(TruncatedGaussian {
            mean: lo as f64,
            scale: UPDATE_SCALE_FLOOR as f64,
            s_min: lo,
            s_max: hi,
        });
    }
    let hist = histogram(b_hat, lo, hi);
    let width = (hi - lo + 1) as f64;
    let (m_lo, m_hi) = (lo as f64 - width, hi as f64 + width);
    let (s_lo, s_hi) = (UPDATE_SCALE_FLOOR as f64, (4.0 * width).max(1.0));
    // A mirror-symmetric histogram has its optimum on the axis of symmetry.
    let symmetric = hist.iter().eq(hist.iter().rev());
    let axis = (lo + hi) as f64 / 2.0;
    let profile = |s: f64| {
        if symmetric {
            (axis, hist_log_likelihood(&hist, lo, axis, s))
        } else {
            maximize_1d(m_lo, m_hi, |m| hist_log_likelihood(&hist, lo, m, s))
        }
    };
    let (scale, _) = maximize_1d(s_lo, s_hi, |s| profile(s).1);
    let (mean, _) = profile(scale);
    Ok(TruncatedGaussian {
        mean,
        scale,
        s_min: lo,
        s_max: hi,
    })
}

/// binary16 code of `scale`, bumped up one code if rounding fell below the floor.
pub fn encode_update_scale(scale: f64) -> u16 {
    let code = encode_f16(scale.max(UPDATE_SCALE_FLOOR as f64) as f32);
    if decode_f16(code) < UPDATE_SCALE_FLOOR {
        code + 1
    } else {
        code
    }
}

/// Update coding table rebuilt from the transmitted binary16 parameters.
pub fn update_table(mean: f32, scale: f32, s_min: i32, s_max: i32) -> Result<CdfTable, UpdateError> {
    let pmf = truncated_pmf(mean as f64, scale as f64, s_min, s_max);
    Ok(CdfTable::build(&pmf, s_min)?)
}

/// A hard-quantized update as it would be transmitted.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedUpdate {
    pub b_hat: Vec<i32>,
    /// `b_hat / q` with the decoded binary16 `q`.
    pub delta: Vec<f32>,
    pub extra: ExtraSection,
    /// Unrounded fit, for diagnostics.
    pub fit: TruncatedGaussian,
}

impl CodedUpdate {
    /// Exact bits of the coded symbol payload.
    pub fn payload_bits(&self) -> u64 {
        8 * self.extra.payload.len() as u64
    }
}

/// Quantizes `b` with the binary16 rounding of `q`. Returns the `q` code and `b_hat`.
pub fn quantize_for_transmission(b: &[f32], q: f32) -> Result<(u16, Vec<i32>), UpdateError> {
    if b.is_empty() {
        return Err(UpdateError::Empty);
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(UpdateError::NonFinite);
    }
    let q_code = encode_f16(q);
    let q16 = decode_f16(q_code);
    if !(q16.is_finite() && q16 > 0.0) {
        return Err(UpdateError::BadScale(q));
    }
    let scaled: Vec<f32> = b.iter().map(|&v| (v * q16).round()).collect();
    let (lo, hi) = scaled
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, c), &v| (a.min(v), c.max(v)));
    if lo < i8::MIN as f32 || hi > i8::MAX as f32 {
        return Err(UpdateError::OutOfRange {
            min: lo as i64,
            max: hi as i64,
        });
    }
    Ok((q_code, scaled.iter().map(|&v| v as i32).collect()))
}

/// Codes `b_hat` under `fit`, whose parameters are first rounded to binary16.
pub fn code_quantized(q_code: u16, b_hat: Vec<i32>, fit: TruncatedGaussian) -> Result<CodedUpdate, UpdateError> {
    let mean_code = encode_f16(fit.mean as f32);
    let scale_code = encode_update_scale(fit.scale);
    let payload = if fit.s_min == fit.s_max {
        Vec::new()
    } else {
        let table = update_table(decode_f16(mean_code), decode_f16(scale_code), fit.s_min, fit.s_max)?;
        let mut enc = RangeEncoder::new();
        for &s in &b_hat {
            enc.encode(s, &table)?;
        }
        enc.finish()
    };
    Ok(CodedUpdate {
        delta: dequantize(&b_hat, decode_f16(q_code)),
        b_hat,
        extra: ExtraSection {
            q: q_code,
            mean: mean_code,
            scale: scale_code,
            s_min: fit.s_min as i8,
            s_max: fit.s_max as i8,
            payload,
        },
        fit,
    })
}

/// Quantizes `b` with `q` through binary16, fits and codes the update.
pub fn code_update(b: &[f32], q: f32) -> Result<CodedUpdate, UpdateError> {
    let (q_code, b_hat) = quantize_for_transmission(b, q)?;
    let fit = fit_truncated_gaussian(&b_hat)?;
    code_quantized(q_code, b_hat, fit)
}

/// Recovers `count` update symbols and their dequantized values from an extra section.
pub fn decode_update(extra: &ExtraSection, count: usize) -> Result<(Vec<i32>, Vec<f32>), UpdateError> {
    let (s_min, s_max) = (extra.s_min as i32, extra.s_max as i32);
    let b_hat = if s_min == s_max {
        if !extra.payload.is_empty() {
            return Err(EntropyError::Corrupt.into());
        }
        vec![s_min; count]
    } else {
        let table = update_table(extra.mean(), extra.scale(), s_min, s_max)?;
        let mut dec = RangeDecoder::new(&extra.payload)?;
        let out = (0..count).map(|_| dec.decode(&table)).collect::<Result<Vec<_>, _>>()?;
        if dec.position() != extra.payload.len() {
            return Err(EntropyError::Corrupt.into());
        }
        out
    };
    let q = extra.q();
    if !(q.is_finite() && q > 0.0) {
        return Err(UpdateError::BadScale(q));
    }
    let delta = dequantize(&b_hat, q);
    Ok((b_hat, delta))
}

/// Decoder layers with `subset_delta` added to the biases of the last `layers` layers.
pub fn apply_update(params: &ModelParams, layers: usize, subset_delta: &[f32]) -> Result<Vec<ConvLayer>, UpdateError> {
    let range = select_bias_subset(params, layers)?;
    if subset_delta.len() != range.len() {
        return Err(CodecError::Arch(format!(
            "update has {} entries, subset has {}",
            subset_delta.len(),
            range.len()
        ))
        .into());
    }
    let mut full = vec![0.0f32; params.decoder_bias_count()];
    full[range].copy_from_slice(subset_delta);
    Ok(params.decoder_with_bias_delta(&full)?)
}
