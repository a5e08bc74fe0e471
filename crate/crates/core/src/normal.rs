//! Standard normal functions and the truncated-normal correction kernel
//! `(φ(b) − φ(a)) / (Φ(b) − Φ(a))`.
//!
//! The kernel equals minus the mean of a standard normal truncated to
//! `(a, b)`. Naive evaluation fails in the tails: both differences underflow
//! or cancel long before `|z| = 38`. The evaluation here is split by where
//! the interval sits:
//!
//! * entirely in the right tail (`a ≥ 0`): everything is expressed relative
//!   to `φ(a)` through the Mills ratio `R(z) = (1 − Φ(z)) / φ(z)`, which is
//!   computed by Lentz's continued fraction once `z ≥ 5`;
//! * entirely in the left tail: reflected onto the right tail;
//! * straddling zero: the probability is a sum of two positive `erf` terms
//!   and the density difference is formed with `expm1`, so neither cancels;
//! * narrow right-tail intervals, where `R(a) − e^{−d} R(b)` would cancel,
//!   fall back to a 10-point Gauss–Legendre rule on the rescaled density.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

/// `ln √(2π)`
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Below this the Mills ratio comes from `erfc`, above it from the
/// continued fraction.
const MILLS_SWITCH: f64 = 5.0;

/// Right-tail intervals with `(b² − a²)/2` under this use quadrature.
const NARROW_EXPONENT: f64 = 0.5;

/// 10-point Gauss–Legendre nodes on [-1, 1] (positive half).
const GL10_NODES: [f64; 5] = [
    0.148_874_338_981_631_22,
    0.433_395_394_129_247_2,
    0.679_409_568_299_024_4,
    0.865_063_366_688_984_5,
    0.973_906_528_517_171_7,
];
const GL10_WEIGHTS: [f64; 5] = [
    0.295_524_224_714_752_87,
    0.269_266_719_309_996_35,
    0.219_086_362_515_982_04,
    0.149_451_349_150_580_6,
    0.066_671_344_308_688_14,
];

#[inline]
pub fn pdf(z: f64) -> f64 {
    if z.is_infinite() {
        return 0.0;
    }
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn log_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// `Φ(z)`
#[inline]
pub fn cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// `1 − Φ(z)` without cancellation.
#[inline]
pub fn sf(z: f64) -> f64 {
    0.5 * libm::erfc(z * FRAC_1_SQRT_2)
}

/// Mills ratio `(1 − Φ(z)) / φ(z)`. Accurate to a few ulp for `z ≥ 0` and
/// finite up to `z = f64::MAX`; for negative `z` it grows like
/// `1/φ(z)` and overflows below roughly −38.
pub fn mills_ratio(z: f64) -> f64 {
    if z == f64::INFINITY {
        return 0.0;
    }
    if z < MILLS_SWITCH {
        return sf(z) / pdf(z);
    }
    mills_continued_fraction(z)
}

/// `R(z) = 1/(z + 1/(z + 2/(z + 3/(z + …))))`, modified Lentz.
fn mills_continued_fraction(z: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = z;
    let mut c = f;
    let mut d = 0.0;
    for n in 1..5000 {
        let a = n as f64;
        d = z + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        d = 1.0 / d;
        c = z + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

/// `Φ(b) − Φ(a)` for `a < b`, avoiding the worst cancellation by staying on
/// the tail that holds the mass.
pub fn interval_probability(a: f64, b: f64) -> f64 {
    if b <= 0.0 {
        return interval_probability(-b, -a);
    }
    if a >= 0.0 {
        if b.is_finite() && 0.5 * (b - a) * (b + a) < NARROW_EXPONENT {
            return narrow_probability(a, b);
        }
        sf(a) - sf(b)
    } else {
        0.5 * (libm::erf(b * FRAC_1_SQRT_2) - libm::erf(a * FRAC_1_SQRT_2))
    }
}

/// `(φ(b) − φ(a)) / (Φ(b) − Φ(a))` for standardized bounds `a < b`
/// (infinite endpoints allowed).
pub fn truncnorm_correction(a: f64, b: f64) -> Result<f64> {
    if a.is_nan() || b.is_nan() || a >= b {
        return Err(Error::InvalidInterval { lower: a, upper: b });
    }
    Ok(correction_unchecked(a, b))
}

fn correction_unchecked(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return 0.0;
    }
    if b <= 0.0 {
        return -correction_unchecked(-b, -a);
    }
    if a >= 0.0 {
        return right_tail_correction(a, b);
    }
    straddle_correction(a, b)
}

/// `0 ≤ a < b`. Dividing numerator and denominator by `φ(a)` gives
/// `expm1(−d) / (R(a) − e^{−d} R(b))` with `d = (b² − a²)/2`.
fn right_tail_correction(a: f64, b: f64) -> f64 {
    if b == f64::INFINITY {
        return -1.0 / mills_ratio(a);
    }
    let d = 0.5 * (b - a) * (b + a);
    if d < NARROW_EXPONENT {
        return narrow_correction(a, b);
    }
    let num = (-d).exp_m1();
    let den = mills_ratio(a) - (-d).exp() * mills_ratio(b);
    num / den
}

/// `a < 0 < b`.
fn straddle_correction(a: f64, b: f64) -> f64 {
    // φ(b) − φ(a), anchored on whichever endpoint has the larger density
    let num = if a.abs() <= b.abs() {
        pdf(a) * (-0.5 * (b - a) * (b + a)).exp_m1()
    } else {
        -pdf(b) * (-0.5 * (a - b) * (a + b)).exp_m1()
    };
    let den = 0.5 * (libm::erf(b * FRAC_1_SQRT_2) + libm::erf(-a * FRAC_1_SQRT_2));
    num / den
}

/// `∫ φ` over a narrow right-tail interval by 10-point Gauss–Legendre.
fn narrow_probability(a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut sum = 0.0;
    for (&x, &w) in GL10_NODES.iter().zip(GL10_WEIGHTS.iter()) {
        sum += w * (pdf(mid - half * x) + pdf(mid + half * x));
    }
    half * sum
}

/// `−∫ t g / ∫ g` over `[a, b]` with `g(t) = exp(−(t − a)(t + a)/2)`, the
/// density rescaled by `φ(a)`. Only used when `g` varies by less than
/// `e^{0.5}` over the interval, where 10 Gauss–Legendre points are exact to
/// rounding.
fn narrow_correction(a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut mass = 0.0;
    // first moment about `mid`, so the result is mid + small shift
    let mut moment = 0.0;
    for (&x, &w) in GL10_NODES.iter().zip(GL10_WEIGHTS.iter()) {
        for s in [-1.0, 1.0] {
            let off = s * half * x;
            let t = mid + off;
            let g = (-0.5 * (t - a) * (t + a)).exp();
            mass += w * g;
            moment += w * off * g;
        }
    }
    -(mid + moment / mass)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unbounded_interval_is_zero() {
        assert_eq!(
            truncnorm_correction(f64::NEG_INFINITY, f64::INFINITY).unwrap(),
            0.0
        );
    }

    #[test]
    fn symmetric_interval_is_zero() {
        for c in [1e-8, 0.3, 1.0, 2.5, 8.0, 30.0] {
            assert_eq!(truncnorm_correction(-c, c).unwrap(), 0.0, "c = {c}");
        }
    }

    #[test]
    fn worked_example_intermediate() {
        // lower bound of the overall-population UMVCUE in the worked example
        let z = -1.0886;
        let got = truncnorm_correction(z, f64::INFINITY).unwrap();
        let naive = -pdf(z) / (1.0 - cdf(z));
        assert!((got - naive).abs() < 1e-14);
        assert!((got + 0.2560).abs() < 5e-5, "{got}");
    }

    #[test]
    fn reflection_antisymmetry() {
        for (a, b) in [(-3.0, 1.0), (0.5, 2.0), (6.0, 8.0), (-20.0, f64::INFINITY)] {
            let lhs = truncnorm_correction(a, b).unwrap();
            let rhs = truncnorm_correction(-b, -a).unwrap();
            assert_eq!(lhs, -rhs);
        }
    }

    #[test]
    fn rejects_bad_intervals() {
        assert!(truncnorm_correction(1.0, 1.0).is_err());
        assert!(truncnorm_correction(2.0, 1.0).is_err());
        assert!(truncnorm_correction(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn mills_ratio_branches_agree_at_switch() {
        for z in [4.0, 4.5, 5.0, 5.5, 6.0] {
            let direct = sf(z) / pdf(z);
            let cf = mills_continued_fraction(z);
            assert!(
                ((direct - cf) / cf).abs() < 1e-13,
                "z = {z}: {direct} vs {cf}"
            );
        }
    }

    #[test]
    fn mills_ratio_asymptotics() {
        // R(z) ~ 1/z − 1/z³ + 3/z⁵ for large z
        let z: f64 = 1e4;
        let expected = 1.0 / z - 1.0 / z.powi(3) + 3.0 / z.powi(5);
        assert!(((mills_ratio(z) - expected) / expected).abs() < 1e-15);
        assert!((mills_ratio(0.0) - (PI / 2.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn narrow_branch_matches_limit() {
        // as b → a the correction tends to −a
        let a = 3.0;
        let c = truncnorm_correction(a, a + 1e-9).unwrap();
        assert!((c + a).abs() < 1e-8);
        // continuity across the narrow threshold
        let b_edge = (a * a + 2.0 * NARROW_EXPONENT).sqrt();
        let lo = truncnorm_correction(a, b_edge - 1e-12).unwrap();
        let hi = truncnorm_correction(a, b_edge + 1e-12).unwrap();
        assert!(((lo - hi) / hi).abs() < 1e-12, "{lo} vs {hi}");
    }

    #[test]
    fn interval_probability_narrow_and_wide() {
        // wide: matches the survival-function difference
        let p = interval_probability(1.0, 3.0);
        assert!((p - (sf(1.0) - sf(3.0))).abs() < 1e-16);
        // narrow: ≈ width · φ(mid)
        let (a, b) = (4.0, 4.0 + 1e-7);
        let p = interval_probability(a, b);
        assert!(((p - (b - a) * pdf(0.5 * (a + b))) / p).abs() < 1e-12);
        assert_eq!(interval_probability(-b, -a), p);
        let s = interval_probability(-0.5, 2.0);
        assert!((s - (cdf(2.0) - cdf(-0.5))).abs() < 1e-15);
    }

    #[test]
    fn finite_far_into_tails() {
        let grid = [-38.0, -30.0, -12.0, -1.0, 0.0, 1.0, 12.0, 30.0, 38.0];
        for &a in &grid {
            for &b in &grid {
                if a < b {
                    let c = truncnorm_correction(a, b).unwrap();
                    assert!(c.is_finite(), "({a}, {b}) -> {c}");
                    // minus a mean of a distribution supported on (a, b)
                    assert!(-c > a && -c < b, "({a}, {b}) -> {c}");
                }
            }
        }
    }
}
