//! Discretized probability models evaluated in binary64.
//!
//! The Gaussian cdf uses the Abramowitz–Stegun 7.1.26 polynomial
//! approximation of erf so that encoder and decoder build identical coding
//! tables from identical `(mean, scale)` inputs. Derivatives are those of the
//! approximation itself, which keeps analytic and numerical gradients in
//! agreement.
//!
//! Both pmfs are evaluated on the left side of the mode (`x - loc` reflected
//! to be non-positive), where the cdf differences are taken between small
//! numbers and do not cancel catastrophically.

/// Lower clamp for the scale of the latent Gaussian model.
pub const SCALE_FLOOR: f64 = 0.04;
/// Upper clamp for the scale of the latent Gaussian model.
pub const SCALE_CAP: f64 = 64.0;
/// Probabilities below this contribute `-log2(LIKELIHOOD_FLOOR)` bits to rate
/// estimates and no gradient.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

const AS_P: f64 = 0.327_591_1;
const AS_A: [f64; 5] = [
    0.254_829_592,
    -0.284_496_736,
    1.421_413_741,
    -1.453_152_027,
    1.061_405_429,
];

/// `erfc(x)` for `x >= 0`.
fn erfc_pos(x: f64) -> f64 {
    let t = 1.0 / (1.0 + AS_P * x);
    let poly = t * (AS_A[0] + t * (AS_A[1] + t * (AS_A[2] + t * (AS_A[3] + t * AS_A[4]))));
    poly * (-x * x).exp()
}

/// Derivative of [`erfc_pos`].
fn erfc_pos_deriv(x: f64) -> f64 {
    let t = 1.0 / (1.0 + AS_P * x);
    let poly = t * (AS_A[0] + t * (AS_A[1] + t * (AS_A[2] + t * (AS_A[3] + t * AS_A[4]))));
    let dpoly_dt = AS_A[0]
        + t * (2.0 * AS_A[1] + t * (3.0 * AS_A[2] + t * (4.0 * AS_A[3] + t * 5.0 * AS_A[4])));
    let dt_dx = -AS_P * t * t;
    (-x * x).exp() * (dpoly_dt * dt_dx - 2.0 * x * poly)
}

pub fn erf(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 - erfc_pos(x)
    } else {
        erfc_pos(-x) - 1.0
    }
}

/// Standard normal cdf.
pub fn normal_cdf(t: f64) -> f64 {
    let x = t.abs() * std::f64::consts::FRAC_1_SQRT_2;
    if t < 0.0 {
        0.5 * erfc_pos(x)
    } else {
        1.0 - 0.5 * erfc_pos(x)
    }
}

/// Density of the approximated [`normal_cdf`].
pub fn normal_cdf_deriv(t: f64) -> f64 {
    let x = t.abs() * std::f64::consts::FRAC_1_SQRT_2;
    -0.5 * erfc_pos_deriv(x) * std::f64::consts::FRAC_1_SQRT_2
}

/// `P(x - 0.5 < X < x + 0.5)` for `X ~ N(mean, scale^2)`.
pub fn gaussian_pmf(x: f64, mean: f64, scale: f64) -> f64 {
    let d = -(x - mean).abs();
    normal_cdf((d + 0.5) / scale) - normal_cdf((d - 0.5) / scale)
}

/// Partial derivatives of a discretized pmf.
#[derive(Clone, Copy, Debug)]
pub struct PmfGrad {
    pub pmf: f64,
    pub d_x: f64,
    pub d_loc: f64,
    pub d_scale: f64,
}

/// [`gaussian_pmf`] with its derivatives in `x`, `mean` and `scale`.
pub fn gaussian_pmf_grad(x: f64, mean: f64, scale: f64) -> PmfGrad {
    let diff = x - mean;
    let d = -diff.abs();
    let hi = (d + 0.5) / scale;
    let lo = (d - 0.5) / scale;
    let (dhi, dlo) = (normal_cdf_deriv(hi), normal_cdf_deriv(lo));
    let d_x = -diff.signum() * (dhi - dlo) / scale;
    let d_x = if diff == 0.0 { 0.0 } else { d_x };
    PmfGrad {
        pmf: normal_cdf(hi) - normal_cdf(lo),
        d_x,
        d_loc: -d_x,
        d_scale: -(hi * dhi - lo * dlo) / scale,
    }
}

pub fn logistic_cdf(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn logistic_density(t: f64) -> f64 {
    let c = logistic_cdf(t);
    c * (1.0 - c)
}

/// `P(x - 0.5 < X < x + 0.5)` for a logistic `X` with location `loc` and scale `scale`.
pub fn logistic_pmf(x: f64, loc: f64, scale: f64) -> f64 {
    let d = -(x - loc).abs();
    logistic_cdf((d + 0.5) / scale) - logistic_cdf((d - 0.5) / scale)
}

/// [`logistic_pmf`] with derivatives in `x`, `loc` and `log(scale)` (reported in `d_scale`).
pub fn logistic_pmf_grad(x: f64, loc: f64, log_scale: f64) -> PmfGrad {
    let scale = log_scale.exp();
    let diff = x - loc;
    let d = -diff.abs();
    let hi = (d + 0.5) / scale;
    let lo = (d - 0.5) / scale;
    let (dhi, dlo) = (logistic_density(hi), logistic_density(lo));
    let d_x = if diff == 0.0 {
        0.0
    } else {
        -diff.signum() * (dhi - dlo) / scale
    };
    PmfGrad {
        pmf: logistic_cdf(hi) - logistic_cdf(lo),
        d_x,
        d_loc: -d_x,
        d_scale: -(hi * dhi - lo * dlo),
    }
}

/// Self-information in bits with the likelihood floor applied.
pub fn bits_of(p: f64) -> f64 {
    -p.max(LIKELIHOOD_FLOOR).log2()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_matches_reference_values() {
        // math.erf from CPython at binary64.
        let refs = [
            (0.1, 0.1124629160182849),
            (0.5, 0.5204998778130465),
            (1.0, 0.8427007929497149),
            (2.0, 0.9953222650189527),
            (3.5, 0.9999992569016276),
        ];
        for (x, e) in refs {
            assert!((erf(x) - e).abs() < 1.5e-7, "erf({x})");
            assert!((erf(-x) + e).abs() < 1.5e-7);
        }
    }

    #[test]
    fn gaussian_pmf_at_mode() {
        // 2*Phi(0.5) - 1 = erf(0.5/sqrt 2) = 0.3829249225480262
        assert!((gaussian_pmf(0.0, 0.0, 1.0) - 0.382_924_922_548).abs() < 1e-6);
    }

    #[test]
    fn gaussian_pmf_is_symmetric_about_mean() {
        for &(mu, sigma) in &[(0.3, 0.7), (-2.25, 3.0), (10.1, 0.05)] {
            for x in -20..20 {
                let x = x as f64;
                let a = gaussian_pmf(x, mu, sigma);
                let b = gaussian_pmf(2.0 * mu - x, mu, sigma);
                assert!((a - b).abs() <= 1e-12, "mu {mu} sigma {sigma} x {x}");
            }
        }
    }

    #[test]
    fn gaussian_pmf_concentrates_at_floor() {
        for &mu in &[0.0, 0.2, -0.3, 3.1, -7.25] {
            let x = (mu as f64).round();
            assert!(gaussian_pmf(x, mu, SCALE_FLOOR) >= 0.999_999);
        }
    }

    #[test]
    fn gaussian_pmf_sums_to_one() {
        let s: f64 = (-200..=200).map(|x| gaussian_pmf(x as f64, 1.3, 9.0)).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn logistic_pmf_closed_form() {
        // L(0.5) - L(-0.5) = tanh(0.25)
        assert!((logistic_pmf(0.0, 0.0, 1.0) - 0.25f64.tanh()).abs() < 1e-15);
        for x in 0..50 {
            assert_eq!(logistic_pmf(x as f64, 0.0, 2.5), logistic_pmf(-(x as f64), 0.0, 2.5));
        }
    }

    #[test]
    fn logistic_pmf_mass() {
        for &s in &[0.3, 1.0, 4.0, 10.0] {
            let total: f64 = (-1000..=1000).map(|x| logistic_pmf(x as f64, 0.0, s)).sum();
            assert!(total <= 1.0 + 1e-12 && total >= 1.0 - 1e-6, "scale {s}: {total}");
        }
    }

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gaussian_grads_match_finite_differences() {
        for &(x, mu, s) in &[(0.0, 0.3, 0.8), (3.0, -1.2, 2.0), (-4.0, -3.7, 0.5), (1.0, 1.0, 1.5)] {
            let g = gaussian_pmf_grad(x, mu, s);
            let fx = central(|v| gaussian_pmf(v, mu, s), x);
            let fm = central(|v| gaussian_pmf(x, v, s), mu);
            let fs = central(|v| gaussian_pmf(x, mu, v), s);
            assert!((g.d_x - fx).abs() < 1e-6, "{} {}", g.d_x, fx);
            assert!((g.d_loc - fm).abs() < 1e-6);
            assert!((g.d_scale - fs).abs() < 1e-6);
        }
    }

    #[test]
    fn logistic_grads_match_finite_differences() {
        for &(x, loc, ls) in &[(0.0, 0.3, -0.2), (3.0, -1.2, 0.7), (-4.0, -3.7, 0.1)] {
            let g = logistic_pmf_grad(x, loc, ls);
            let f = |x: f64, l: f64, s: f64| logistic_pmf(x, l, s.exp());
            assert!((g.d_x - central(|v| f(v, loc, ls), x)).abs() < 1e-6);
            assert!((g.d_loc - central(|v| f(x, v, ls), loc)).abs() < 1e-6);
            assert!((g.d_scale - central(|v| f(x, loc, v), ls)).abs() < 1e-6);
        }
    }
}
