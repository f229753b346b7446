//! Entropy coding of quantized latents.
//!
//! Each element is coded with a table over `[c - R, c + R]` around the model
//! mode `c`, plus one escape symbol. Values outside the window are sent as the
//! escape, then a sign bit and an Exp-Golomb code of `|v - c| - R - 1`, all
//! with equiprobable binary tables. Decoding rebuilds the identical tables from
//! the same `(mean, scale)` inputs.

use std::sync::OnceLock;

use super::{CodecError, FactorizedPrior};
use crate::entropy::{CdfTable, EntropyError, RangeDecoder, RangeEncoder};
use crate::prob;

/// Gaussian windows span `ceil(GAUSSIAN_SPAN * scale) + 1` on each side of the mode.
pub const GAUSSIAN_SPAN: f64 = 5.0;
/// Logistic windows span `ceil(LOGISTIC_SPAN * scale) + 1` on each side of the mode.
pub const LOGISTIC_SPAN: f64 = 12.0;
/// Upper bound on any window radius.
pub const MAX_RADIUS: i32 = 2048;
const MAX_GOLOMB_PREFIX: u32 = 31;

fn binary_table() -> &'static CdfTable {
    static TABLE: OnceLock<CdfTable> = OnceLock::new();
    TABLE.get_or_init(|| CdfTable::uniform(2, 0).expect("two-symbol table"))
}

/// Windowed table with an escape symbol at `center + radius + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct EscapeTable {
    table: CdfTable,
    center: i32,
    radius: i32,
}

impl EscapeTable {
    pub fn from_pmf(center: i32, radius: i32, pmf: impl Fn(i32) -> f64) -> Result<Self, EntropyError> {
        let mut probs: Vec<f64> = (center - radius..=center + radius).map(pmf).collect();
        let inside: f64 = probs.iter().sum();
        probs.push((1.0 - inside).max(0.0));
        let table = CdfTable::build(&probs, center - radius)?;
        Ok(Self { table, center, radius })
    }

    pub fn gaussian(mean: f64, scale: f64) -> Result<Self, CodecError> {
        if !mean.is_finite() || !(scale > 0.0) || !scale.is_finite() {
            return Err(CodecError::NonFinite("gaussian coding parameters"));
        }
        let center = clamp_center(mean);
        let radius = window(GAUSSIAN_SPAN, scale);
        Ok(Self::from_pmf(center, radius, |s| prob::gaussian_pmf(s as f64, mean, scale))?)
    }

    pub fn logistic(loc: f64, scale: f64) -> Result<Self, CodecError> {
        if !loc.is_finite() || !(scale > 0.0) || !scale.is_finite() {
            return Err(CodecError::NonFinite("logistic coding parameters"));
        }
        let center = clamp_center(loc);
        let radius = window(LOGISTIC_SPAN, scale);
        Ok(Self::from_pmf(center, radius, |s| prob::logistic_pmf(s as f64, loc, scale))?)
    }

    fn escape(&self) -> i32 {
        self.center + self.radius + 1
    }

    pub fn encode(&self, enc: &mut RangeEncoder, v: i32) -> Result<(), EntropyError> {
        let off = v as i64 - self.center as i64;
        if off.abs() <= self.radius as i64 {
            return enc.encode(v, &self.table);
        }
        enc.encode(self.escape(), &self.table)?;
        let bin = binary_table();
        enc.encode(i32::from(off < 0), bin)?;
        let val = (off.unsigned_abs() - self.radius as u64) as u64;
        let nbits = 63 - val.leading_zeros();
        if nbits > MAX_GOLOMB_PREFIX {
            return Err(EntropyError::SymbolOutOfSupport {
                symbol: v,
                min: self.center - self.radius,
                max: self.center + self.radius,
            });
        }
        for _ in 0..nbits {
            enc.encode(1, bin)?;
        }
        enc.encode(0, bin)?;
        for b in (0..nbits).rev() {
            enc.encode(((val >> b) & 1) as i32, bin)?;
        }
        Ok(())
    }

    pub fn decode(&self, dec: &mut RangeDecoder) -> Result<i32, EntropyError> {
        let s = dec.decode(&self.table)?;
        if s != self.escape() {
            return Ok(s);
        }
        let bin = binary_table();
        let negative = dec.decode(bin)? == 1;
        let mut nbits = 0;
        while dec.decode(bin)? == 1 {
            nbits += 1;
            if nbits > MAX_GOLOMB_PREFIX {
                return Err(EntropyError::Corrupt);
            }
        }
        let mut val: u64 = 1;
        for _ in 0..nbits {
            val = (val << 1) | dec.decode(bin)? as u64;
        }
        let mag = val + self.radius as u64;
        let v = if negative {
            self.center as i64 - mag as i64
        } else {
            self.center as i64 + mag as i64
        };
        i32::try_from(v).map_err(|_| EntropyError::Corrupt)
    }

    /// Exact cost in bits under the quantized table, escape payload included.
    pub fn cost_bits(&self, v: i32) -> f64 {
        let off = v as i64 - self.center as i64;
        if off.abs() <= self.radius as i64 {
            return self.table.cost_bits(v).unwrap_or(f64::INFINITY);
        }
        let val = off.unsigned_abs() - self.radius as u64;
        let nbits = (63 - val.leading_zeros()) as f64;
        self.table.cost_bits(self.escape()).unwrap_or(f64::INFINITY) + 2.0 + 2.0 * nbits
    }
}

fn clamp_center(mean: f64) -> i32 {
    mean.round().clamp(-(1 << 24) as f64, (1 << 24) as f64) as i32
}

fn window(span: f64, scale: f64) -> i32 {
    ((span * scale).ceil() as i32 + 1).min(MAX_RADIUS)
}

/// Codes `symbols` with per-element Gaussians. All slices share one length.
pub fn encode_gaussian(
    enc: &mut RangeEncoder,
    symbols: &[i32],
    mean: &[f32],
    scale: &[f32],
) -> Result<(), CodecError> {
    check_lengths(symbols.len(), mean.len(), scale.len())?;
    for ((&v, &m), &s) in symbols.iter().zip(mean).zip(scale) {
        EscapeTable::gaussian(m as f64, s as f64)?.encode(enc, v)?;
    }
    Ok(())
}

pub fn decode_gaussian(dec: &mut RangeDecoder, mean: &[f32], scale: &[f32]) -> Result<Vec<i32>, CodecError> {
    check_lengths(mean.len(), mean.len(), scale.len())?;
    mean.iter()
        .zip(scale)
        .map(|(&m, &s)| Ok(EscapeTable::gaussian(m as f64, s as f64)?.decode(dec)?))
        .collect()
}

fn prior_tables(prior: &FactorizedPrior) -> Result<Vec<EscapeTable>, CodecError> {
    (0..prior.channels())
        .map(|c| EscapeTable::logistic(prior.loc.data()[c] as f64, prior.scale(c)))
        .collect()
}

/// Codes an `[N, C, H, W]` symbol array with the per-channel prior.
pub fn encode_factorized(
    enc: &mut RangeEncoder,
    symbols: &[i32],
    shape: &[usize],
    prior: &FactorizedPrior,
) -> Result<(), CodecError> {
    let (c, plane) = channel_layout(shape, prior, symbols.len())?;
    let tables = prior_tables(prior)?;
    for (i, &v) in symbols.iter().enumerate() {
        tables[(i / plane) % c].encode(enc, v)?;
    }
    Ok(())
}

pub fn decode_factorized(
    dec: &mut RangeDecoder,
    shape: &[usize],
    prior: &FactorizedPrior,
) -> Result<Vec<i32>, CodecError> {
    let count: usize = shape.iter().product();
    let (c, plane) = channel_layout(shape, prior, count)?;
    let tables = prior_tables(prior)?;
    (0..count).map(|i| Ok(tables[(i / plane) % c].decode(dec)?)).collect()
}

fn channel_layout(shape: &[usize], prior: &FactorizedPrior, count: usize) -> Result<(usize, usize), CodecError> {
    let numel: usize = shape.iter().product();
    if shape.len() < 2 || shape[1] != prior.channels() || numel != count {
        return Err(CodecError::Arch(format!(
            "symbol shape {shape:?} does not match {count} symbols over {} channels",
            prior.channels()
        )));
    }
    Ok((shape[1], shape[2..].iter().product()))
}

fn check_lengths(a: usize, b: usize, c: usize) -> Result<(), CodecError> {
    if a != b || a != c {
        return Err(EntropyError::LengthMismatch { symbols: a, tables: b.min(c) }.into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn roundtrip_gaussian(symbols: &[i32], mean: &[f32], scale: &[f32]) -> Vec<i32> {
        let mut enc = RangeEncoder::new();
        encode_gaussian(&mut enc, symbols, mean, scale).unwrap();
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        decode_gaussian(&mut dec, mean, scale).unwrap()
    }

    #[test]
    fn far_outliers_use_escape() {
        let sym = [0, 1000, -1000, 7, i32::from(i16::MAX), -3];
        let mean = [0.2f32, 0.0, 0.0, -0.4, 3.0, -3.0];
        let scale = [0.5f32, 1.0, 0.04, 2.0, 0.3, 64.0];
        assert_eq!(roundtrip_gaussian(&sym, &mean, &scale), sym);
    }

    #[test]
    fn escape_cost_accounts_for_payload() {
        let t = EscapeTable::gaussian(0.0, 1.0).unwrap();
        assert!(t.cost_bits(100) > t.cost_bits(10));
        assert!(t.cost_bits(0) < 2.0);
    }

    #[test]
    fn factorized_roundtrip() {
        let mut prior = FactorizedPrior::new(3);
        prior.loc = Tensor::from_vec(vec![0.0, 2.3, -1.0]);
        prior.log_scale = Tensor::from_vec(vec![0.0, 1.5, -2.0]);
        let shape = [2, 3, 2, 2];
        let sym: Vec<i32> = (0..24).map(|i| (i * 7 % 13) - 6).collect();
        let mut enc = RangeEncoder::new();
        encode_factorized(&mut enc, &sym, &shape, &prior).unwrap();
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        assert_eq!(decode_factorized(&mut dec, &shape, &prior).unwrap(), sym);
    }

    #[test]
    fn rejects_non_finite_parameters() {
        assert!(EscapeTable::gaussian(f64::NAN, 1.0).is_err());
        assert!(EscapeTable::gaussian(0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn gaussian_roundtrip(
            items in prop::collection::vec((-300i32..300, -20.0f32..20.0, 0.04f32..64.0), 1..200)
        ) {
            let sym: Vec<i32> = items.iter().map(|t| t.0).collect();
            let mean: Vec<f32> = items.iter().map(|t| t.1).collect();
            let scale: Vec<f32> = items.iter().map(|t| t.2).collect();
            prop_assert_eq!(roundtrip_gaussian(&sym, &mean, &scale), sym);
        }
    }
}
