//! Overflow-free modified Bessel quantities.
//!
//! The statistical objectives only ever need `ln I0(x)` and the ratio
//! `I1(x)/I0(x)`. Both are evaluated without forming `I0` or `I1` for large
//! arguments, so they stay finite far beyond the `exp` overflow at x ~ 709.
//!
//! Below [`CROSSOVER`] `ln I0` uses the power series and the ratio a
//! continued fraction; above it both use the exponentially scaled Hankel
//! asymptotic expansion, whose smallest term at x = 30 is around `e^-60`.

use crate::error::{Error, Result};

/// Switch point between the convergent and asymptotic branches.
pub const CROSSOVER: f64 = 30.0;

const SERIES_EPS: f64 = 1e-17;

/// `ln I0(x)` for `x >= 0`.
pub fn log_i0(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain {
            function: "log_i0",
            value: x,
        });
    }
    Ok(ln_i0(x))
}

/// `I1(x) / I0(x)` for `x >= 0`; always in `[0, 1)`.
pub fn bessel_ratio(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain {
            function: "bessel_ratio",
            value: x,
        });
    }
    Ok(ratio_i1_i0(x))
}

/// Unchecked `ln I0`; callers guarantee `x >= 0`.
#[inline]
pub(crate) fn ln_i0(x: f64) -> f64 {
    if x < CROSSOVER {
        ln_i0_series(x)
    } else {
        ln_i0_asymptotic(x)
    }
}

/// Unchecked `I1/I0`; callers guarantee `x >= 0`.
#[inline]
pub(crate) fn ratio_i1_i0(x: f64) -> f64 {
    if x < CROSSOVER {
        ratio_continued_fraction(x)
    } else {
        ratio_asymptotic(x)
    }
}

pub(crate) fn ln_i0_series(x: f64) -> f64 {
    // I0(x) = sum_j (x^2/4)^j / (j!)^2; all terms positive.
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut tail = 0.0;
    let mut j = 1.0;
    loop {
        term *= q / (j * j);
        tail += term;
        if term <= SERIES_EPS * (1.0 + tail) {
            break;
        }
        j += 1.0;
    }
    tail.ln_1p()
}

/// Sum of `sum_k t_k` with `t_k = t_{k-1} ((2k-1)^2 - 4 nu^2) / (8 k x)`,
/// truncated at the smallest term.
fn hankel_sum(nu: f64, x: f64) -> f64 {
    let four_nu2 = 4.0 * nu * nu;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut k = 1.0;
    loop {
        let odd = 2.0 * k - 1.0;
        let next = term * (odd * odd - four_nu2) / (8.0 * k * x);
        if next.abs() >= term.abs() || next.abs() < SERIES_EPS * sum.abs() {
            if next.abs() < term.abs() {
                sum += next;
            }
            break;
        }
        sum += next;
        term = next;
        k += 1.0;
    }
    sum
}

pub(crate) fn ln_i0_asymptotic(x: f64) -> f64 {
    x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + hankel_sum(0.0, x).ln()
}

pub(crate) fn ratio_continued_fraction(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if x < 1e-8 {
        return 0.5 * x - x * x * x / 16.0;
    }
    // I1/I0 = 1 / (2/x + 1 / (4/x + 1 / (6/x + ...))), modified Lentz.
    const TINY: f64 = 1e-300;
    let inv_x = 1.0 / x;
    let mut f = 2.0 * inv_x;
    let mut c = f;
    let mut d = 0.0;
    let mut j = 2.0;
    loop {
        let b = 2.0 * j * inv_x;
        d += b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + 1.0 / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 || j > 10_000.0 {
            break;
        }
        j += 1.0;
    }
    1.0 / f
}

pub(crate) fn ratio_asymptotic(x: f64) -> f64 {
    // The exponential prefactors cancel in the ratio.
    hankel_sum(1.0, x) / hankel_sum(0.0, x)
}
