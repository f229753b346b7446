//! Rate-distortion metrics: PSNR, the two-anchor rate interpolant, bit saving
//! and Bjøntegaard delta rate.

use std::fmt;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RdError {
    #[error("anchors must differ and the higher-rate anchor must have higher PSNR: {0:?}, {1:?}")]
    BadAnchors(RdPoint, RdPoint),
    #[error("curve is not strictly increasing in rate and PSNR at point {0}")]
    NotMonotone(usize),
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("curves do not overlap in PSNR")]
    NoOverlap,
    #[error("curves use different rate units")]
    UnitMismatch,
    #[error("non-finite value: {0}")]
    NonFinite(&'static str),
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

/// `10 log10(peak^2 / mse)`; `+inf` for identical inputs.
pub fn psnr(x: &Tensor, x_hat: &Tensor, peak: f64) -> f64 {
    psnr_from_mse(mse(x, x_hat), peak)
}

pub fn mse(x: &Tensor, x_hat: &Tensor) -> f64 {
    assert_eq!(x.shape(), x_hat.shape(), "mse operands differ in shape");
    let sum: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    sum / x.numel() as f64
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bits: f64,
    pub psnr: f64,
}

impl RdPoint {
    pub fn new(bits: f64, psnr: f64) -> Self {
        Self { bits, psnr }
    }
}

/// Rate as a linear function of PSNR through two anchors, extrapolated with
/// the same slope on both sides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdInterp {
    lo: RdPoint,
    hi: RdPoint,
    slope: f64,
}

impl RdInterp {
    pub fn new(a: RdPoint, b: RdPoint) -> Result<Self, RdError> {
        let (lo, hi) = if a.bits <= b.bits { (a, b) } else { (b, a) };
        if ![lo.bits, lo.psnr, hi.bits, hi.psnr].iter().all(|v| v.is_finite()) {
            return Err(RdError::NonFinite("anchor"));
        }
        if !(hi.bits > lo.bits && hi.psnr > lo.psnr) {
            return Err(RdError::BadAnchors(a, b));
        }
        Ok(Self {
            lo,
            hi,
            slope: (hi.bits - lo.bits) / (hi.psnr - lo.psnr),
        })
    }

    pub fn anchors(&self) -> (RdPoint, RdPoint) {
        (self.lo, self.hi)
    }

    /// Baseline-equivalent bits at `psnr`.
    pub fn rate(&self, psnr: f64) -> f64 {
        if psnr == self.hi.psnr {
            return self.hi.bits;
        }
        self.lo.bits + self.slope * (psnr - self.lo.psnr)
    }

    /// d rate / d psnr, constant.
    pub fn slope(&self) -> f64 {
        self.slope
    }

    /// PSNR reached by the baseline at `bits`.
    pub fn psnr_at(&self, bits: f64) -> f64 {
        self.lo.psnr + (bits - self.lo.bits) / self.slope
    }
}

/// `1 - new_bits / R(psnr)`; positive means fewer bits than the baseline at equal quality.
pub fn bit_saving(new_bits: f64, interp: &RdInterp, psnr: f64) -> f64 {
    1.0 - new_bits / interp.rate(psnr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateUnit {
    Bits,
    BitsPerPixel,
}

impl RateUnit {
    fn column(self) -> &'static str {
        match self {
            RateUnit::Bits => "rate_bits",
            RateUnit::BitsPerPixel => "rate_bpp",
        }
    }
}

impl fmt::Display for RateUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

/// Operating points sorted by rate, strictly increasing in both coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    unit: RateUnit,
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(unit: RateUnit, mut points: Vec<RdPoint>) -> Result<Self, RdError> {
        if points.iter().any(|p| !(p.bits.is_finite() && p.psnr.is_finite() && p.bits > 0.0)) {
            return Err(RdError::NonFinite("curve point (rates must be positive)"));
        }
        points.sort_by(|a, b| a.bits.total_cmp(&b.bits));
        for i in 1..points.len() {
            if !(points[i].bits > points[i - 1].bits && points[i].psnr > points[i - 1].psnr) {
                return Err(RdError::NotMonotone(i));
            }
        }
        Ok(Self { unit, points })
    }

    pub fn unit(&self) -> RateUnit {
        self.unit
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, RdError> {
        let pts = self.points.iter().map(|p| RdPoint::new(p.bits * factor, p.psnr)).collect();
        Self::new(self.unit, pts)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<(), RdError> {
        let io = |e: std::io::Error| RdError::Io(e.to_string());
        writeln!(w, "{},psnr_db", self.unit.column()).map_err(io)?;
        for p in &self.points {
            writeln!(w, "{},{}", p.bits, p.psnr).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self, RdError> {
        let mut unit = None;
        let mut points = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| RdError::Io(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let csv = |msg: String| RdError::Csv { line: i + 1, msg };
            if unit.is_none() {
                unit = Some(match line {
                    "rate_bits,psnr_db" => RateUnit::Bits,
                    "rate_bpp,psnr_db" => RateUnit::BitsPerPixel,
                    other => return Err(csv(format!("expected unit header, got {other:?}"))),
                });
                continue;
            }
            let mut f = line.split(',');
            let (Some(a), Some(b), None) = (f.next(), f.next(), f.next()) else {
                return Err(csv("expected two fields".into()));
            };
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| csv(format!("{s:?}: {e}")));
            points.push(RdPoint::new(parse(a)?, parse(b)?));
        }
        let unit = unit.ok_or(RdError::Csv {
            line: 1,
            msg: "missing header".into(),
        })?;
        Self::new(unit, points)
    }
}

/// Cubic least-squares fit of `log10(rate)` against PSNR, in centred coordinates.
#[derive(Clone, Debug)]
struct LogRateFit {
    coef: [f64; 4],
    center: f64,
    spread: f64,
}

impl LogRateFit {
    fn new(points: &[RdPoint]) -> Self {
        let n = points.len() as f64;
        let center = points.iter().map(|p| p.psnr).sum::<f64>() / n;
        let spread = points
            .iter()
            .map(|p| (p.psnr - center).abs())
            .fold(0.0, f64::max)
            .max(1e-12);
        let mut ata = [[0.0; 4]; 4];
        let mut aty = [0.0; 4];
        for p in points {
            let t = (p.psnr - center) / spread;
            let pows = [1.0, t, t * t, t * t * t];
            let y = p.bits.log10();
            for r in 0..4 {
                aty[r] += pows[r] * y;
                for c in 0..4 {
                    ata[r][c] += pows[r] * pows[c];
                }
            }
        }
        Self {
            coef: solve4(ata, aty),
            center,
            spread,
        }
    }

    fn antiderivative(&self, psnr: f64) -> f64 {
        let t = (psnr - self.center) / self.spread;
        let c = &self.coef;
        self.spread * t * (c[0] + t * (c[1] / 2.0 + t * (c[2] / 3.0 + t * c[3] / 4.0)))
    }

    fn integral(&self, lo: f64, hi: f64) -> f64 {
        self.antiderivative(hi) - self.antiderivative(lo)
    }
}

/// Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> [f64; 4] {
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Average rate difference of `b` relative to `a` at equal PSNR, in percent.
/// Negative values mean `b` needs fewer bits.
pub fn bd_rate(a: &RdCurve, b: &RdCurve) -> Result<f64, RdError> {
    if a.unit != b.unit {
        return Err(RdError::UnitMismatch);
    }
    for c in [a, b] {
        if c.points.len() < 4 {
            return Err(RdError::TooFewPoints {
                need: 4,
                got: c.points.len(),
            });
        }
    }
    let range = |c: &RdCurve| (c.points[0].psnr, c.points[c.points.len() - 1].psnr);
    let (alo, ahi) = range(a);
    let (blo, bhi) = range(b);
    let (lo, hi) = (alo.max(blo), ahi.min(bhi));
    if !(hi > lo) {
        return Err(RdError::NoOverlap);
    }
    let (fa, fb) = (LogRateFit::new(&a.points), LogRateFit::new(&b.points));
    let avg = (fb.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok(100.0 * (10f64.powf(avg) - 1.0))
}
