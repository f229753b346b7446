//! Range coder over integer symbols with static 16-bit frequency tables.
//!
//! The coder keeps a 56-bit window in a `u64` (`low` carries one extra bit for
//! carry detection) and renormalizes a byte at a time. Carries are resolved
//! with the cache/run-of-0xFF scheme familiar from LZMA. The leading byte of
//! that scheme is always zero and is not emitted.

use thiserror::Error;

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;

const WINDOW_BITS: u32 = 56;
const TOP: u64 = 1 << WINDOW_BITS;
const BOTTOM: u64 = 1 << (WINDOW_BITS - 8);
const INITIAL_RANGE: u64 = TOP - 1;
const HEAD_BYTES: usize = (WINDOW_BITS / 8) as usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("empty pmf")]
    EmptyPmf,
    #[error("pmf entries must be finite, non-negative and sum to at most 1 (entry {0})")]
    InvalidPmf(usize),
    #[error("pmf has no mass")]
    ZeroMass,
    #[error("{0} symbols do not fit a {PRECISION_BITS}-bit table")]
    TooManySymbols(usize),
    #[error("symbol {symbol} outside table support [{min}, {max}]")]
    SymbolOutOfSupport { symbol: i32, min: i32, max: i32 },
    #[error("{symbols} symbols but {tables} tables")]
    LengthMismatch { symbols: usize, tables: usize },
    #[error("byte stream truncated")]
    Truncated,
    #[error("byte stream corrupt")]
    Corrupt,
}

/// Cumulative frequency table over a contiguous symbol range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    offset: i32,
    cum: Vec<u32>,
}

impl CdfTable {
    /// Quantize `pmf` (for symbols `min_symbol..`) to counts summing to 2^16.
    ///
    /// Every symbol gets at least one count. Remaining counts are handed out
    /// by largest remainder; any excess created by the one-count floor is
    /// taken back from the entries with the smallest remainders.
    pub fn build(pmf: &[f64], min_symbol: i32) -> Result<Self, EntropyError> {
        let n = pmf.len();
        if n == 0 {
            return Err(EntropyError::EmptyPmf);
        }
        if n > TOTAL as usize {
            return Err(EntropyError::TooManySymbols(n));
        }
        if let Some(i) = pmf.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(EntropyError::InvalidPmf(i));
        }
        let sum: f64 = pmf.iter().sum();
        if sum <= 0.0 {
            return Err(EntropyError::ZeroMass);
        }
        if sum > 1.0 + 1e-6 {
            return Err(EntropyError::InvalidPmf(n - 1));
        }
        let scale = TOTAL as f64 / sum;
        let real: Vec<f64> = pmf.iter().map(|p| p * scale).collect();
        let mut counts: Vec<u32> = real.iter().map(|r| (r.floor() as u32).max(1)).collect();
        let rem: Vec<f64> = real.iter().map(|r| r - r.floor()).collect();
        let assigned: i64 = counts.iter().map(|&c| c as i64).sum();
        let mut diff = TOTAL as i64 - assigned;
        if diff > 0 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
            for &i in order.iter().cycle() {
                if diff == 0 {
                    break;
                }
                counts[i] += 1;
                diff -= 1;
            }
        }
        while diff < 0 {
            let mut order: Vec<usize> = (0..n).filter(|&i| counts[i] > 1).collect();
            order.sort_by(|&a, &b| rem[a].total_cmp(&rem[b]).then(a.cmp(&b)));
            for i in order {
                if diff == 0 {
                    break;
                }
                counts[i] -= 1;
                diff += 1;
            }
        }
        Self::from_counts(&counts, min_symbol)
    }

    /// Equiprobable table over `n` symbols starting at `min_symbol`.
    pub fn uniform(n: usize, min_symbol: i32) -> Result<Self, EntropyError> {
        Self::build(&vec![1.0 / n as f64; n], min_symbol)
    }

    fn from_counts(counts: &[u32], offset: i32) -> Result<Self, EntropyError> {
        let mut cum = Vec::with_capacity(counts.len() + 1);
        cum.push(0);
        let mut acc = 0u32;
        for &c in counts {
            acc += c;
            cum.push(acc);
        }
        debug_assert_eq!(acc, TOTAL);
        Ok(Self { offset, cum })
    }

    pub fn min_symbol(&self) -> i32 {
        self.offset
    }

    pub fn max_symbol(&self) -> i32 {
        self.offset + self.len() as i32 - 1
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    fn index(&self, symbol: i32) -> Result<usize, EntropyError> {
        let i = symbol as i64 - self.offset as i64;
        if i < 0 || i >= self.len() as i64 {
            return Err(EntropyError::SymbolOutOfSupport {
                symbol,
                min: self.min_symbol(),
                max: self.max_symbol(),
            });
        }
        Ok(i as usize)
    }

    pub fn count(&self, symbol: i32) -> Option<u32> {
        let i = self.index(symbol).ok()?;
        Some(self.cum[i + 1] - self.cum[i])
    }

    /// Coding probability `count / 2^16`.
    pub fn probability(&self, symbol: i32) -> Option<f64> {
        self.count(symbol).map(|c| c as f64 / TOTAL as f64)
    }

    /// Ideal code length of `symbol` under this table, in bits.
    pub fn cost_bits(&self, symbol: i32) -> Option<f64> {
        self.probability(symbol).map(|p| -p.log2())
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: u8,
    pending: u64,
    skip_lead: bool,
    out: Vec<u8>,
    ideal_bits: f64,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: INITIAL_RANGE,
            cache: 0,
            pending: 1,
            skip_lead: true,
            out: Vec::new(),
            ideal_bits: 0.0,
        }
    }

    pub fn encode(&mut self, symbol: i32, table: &CdfTable) -> Result<(), EntropyError> {
        let i = table.index(symbol)?;
        let (start, end) = (table.cum[i] as u64, table.cum[i + 1] as u64);
        self.ideal_bits -= ((end - start) as f64 / TOTAL as f64).log2();
        let r = self.range >> PRECISION_BITS;
        self.low += start * r;
        self.range = (end - start) * r;
        while self.range < BOTTOM {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn emit(&mut self, byte: u8) {
        if self.skip_lead {
            debug_assert_eq!(byte, 0);
            self.skip_lead = false;
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> WINDOW_BITS) as u8;
        if (self.low & (TOP - 1)) < (0xFF << (WINDOW_BITS - 8)) || carry != 0 {
            let mut byte = self.cache;
            while self.pending > 0 {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
            }
            self.cache = ((self.low >> (WINDOW_BITS - 8)) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & (BOTTOM - 1)) << 8;
    }

    /// Sum of `-log2(count / 2^16)` over the symbols encoded so far.
    pub fn ideal_bits(&self) -> f64 {
        self.ideal_bits
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..=HEAD_BYTES {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u64,
    range: u64,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, EntropyError> {
        if data.len() < HEAD_BYTES {
            return Err(EntropyError::Truncated);
        }
        let code = data[..HEAD_BYTES].iter().fold(0u64, |acc, &b| (acc << 8) | b as u64);
        if code >= INITIAL_RANGE {
            return Err(EntropyError::Corrupt);
        }
        Ok(Self {
            code,
            range: INITIAL_RANGE,
            data,
            pos: HEAD_BYTES,
        })
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32, EntropyError> {
        let r = self.range >> PRECISION_BITS;
        let v = self.code / r;
        if v >= TOTAL as u64 {
            return Err(EntropyError::Corrupt);
        }
        let v = v as u32;
        // Largest i with cum[i] <= v.
        let i = table.cum.partition_point(|&c| c <= v) - 1;
        let (start, end) = (table.cum[i] as u64, table.cum[i + 1] as u64);
        self.code -= start * r;
        self.range = (end - start) * r;
        if self.code >= self.range {
            return Err(EntropyError::Corrupt);
        }
        while self.range < BOTTOM {
            let byte = *self.data.get(self.pos).ok_or(EntropyError::Truncated)?;
            self.pos += 1;
            self.code = (self.code << 8) | byte as u64;
            self.range <<= 8;
        }
        Ok(table.offset + i as i32)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Encode `symbols[i]` with `tables[i]`.
pub fn encode_symbols(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>, EntropyError> {
    if symbols.len() != tables.len() {
        return Err(EntropyError::LengthMismatch {
            symbols: symbols.len(),
            tables: tables.len(),
        });
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(s, t)?;
    }
    Ok(enc.finish())
}

pub fn decode_symbols(bytes: &[u8], tables: &[&CdfTable], count: usize) -> Result<Vec<i32>, EntropyError> {
    if tables.len() != count {
        return Err(EntropyError::LengthMismatch {
            symbols: count,
            tables: tables.len(),
        });
    }
    let mut dec = RangeDecoder::new(bytes)?;
    tables.iter().map(|t| dec.decode(t)).collect()
}
