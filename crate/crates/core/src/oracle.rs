//! Independent checks of the closed-form estimators: quadrature of the
//! conditional density of the stage-2 mean, and Monte Carlo conditional
//! bias.
//!
//! Given the pooled mean `X` (with `r X₁ + X₂ = (1 + r) X`) and the event
//! `L < X₁ < U`, the stage-2 mean `X₂` is normal with mean `X` and standard
//! deviation `√r·v`, truncated to `((1 + r)X − rU, (1 + r)X − rL)`. Its
//! mean is the conditionally unbiased estimate.

use crate::error::{Error, Result};
use crate::normal::{interval_probability, pdf};
use crate::population::{DesignSpec, PopulationSpec};
use crate::quadrature::integrate;
pub use crate::quadrature::QuadratureSpec;
use crate::selection::{ExtendedInterval, SelectionRule};
use crate::simulation::{
    run_scenario, Estimator, RngPolicy, Scenario, ScenarioResult, SimulationOptions,
};

fn check_scale(v: f64, r: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite() && r > 0.0 && r.is_finite()) {
        return Err(Error::Config(format!(
            "need v > 0 and r > 0, got v = {v}, r = {r}"
        )));
    }
    Ok(())
}

/// Stage-2 support in units of `√r·v` around `X`.
fn standardized_support(x_pooled: f64, bounds: ExtendedInterval, v: f64, r: f64) -> (f64, f64) {
    let s = r.sqrt() * v;
    let map = |b: f64| {
        if b.is_infinite() {
            -b
        } else {
            (1.0 + r) * x_pooled - r * b
        }
    };
    let (lo, hi) = (map(bounds.upper()), map(bounds.lower()));
    let z = |y: f64| {
        if y.is_infinite() {
            y
        } else {
            (y - x_pooled) / s
        }
    };
    (z(lo), z(hi))
}

/// `(∫ z g, ∫ g)` over `(a, b)` for `g(z) = φ(z)/φ(z₀)`, `z₀` the point of
/// `[a, b]` nearest zero. Pieces on either side of zero are integrated
/// separately so that each integrand keeps one sign; for the first moment
/// the symmetric part `(−c, c)` contributes nothing and is skipped, which
/// avoids cancelling two nearly equal halves.
fn truncated_moments(a: f64, b: f64, q: &QuadratureSpec) -> Result<(f64, f64)> {
    let z0 = if a > 0.0 {
        a
    } else if b < 0.0 {
        -b
    } else {
        0.0
    };
    let g = move |z: f64| {
        let u = z.abs();
        (-0.5 * (u - z0) * (u + z0)).exp()
    };
    let pieces: Vec<(f64, f64)> = if a < 0.0 && b > 0.0 {
        vec![(a, 0.0), (0.0, b)]
    } else {
        vec![(a, b)]
    };
    let mut mass = 0.0;
    for &(lo, hi) in &pieces {
        mass += integrate(g, lo, hi, q)?.value;
    }
    let first = if pieces.len() == 1 {
        integrate(|z| z * g(z), a, b, q)?.value
    } else if b > -a {
        integrate(|z| z * g(z), -a, b, q)?.value
    } else if b < -a {
        integrate(|z| z * g(z), a, -b, q)?.value
    } else {
        0.0
    };
    Ok((first, mass))
}

/// `E[X₂ | X, L < X₁ < U]` by adaptive quadrature of the truncated density.
pub fn conditional_mean_quadrature(
    x_pooled: f64,
    bounds: ExtendedInterval,
    v: f64,
    r: f64,
    q: &QuadratureSpec,
) -> Result<f64> {
    check_scale(v, r)?;
    if bounds.is_unbounded() {
        return Ok(x_pooled);
    }
    let (a, b) = standardized_support(x_pooled, bounds, v, r);
    let (first, mass) = truncated_moments(a, b, q)?;
    Ok(x_pooled + r.sqrt() * v * first / mass)
}

/// `|∫ f − 1|` for the conditional density `f` of `X₂`, integrated by
/// quadrature and normalized by the closed-form probability of its support.
pub fn density_normalization_check(
    x_pooled: f64,
    bounds: ExtendedInterval,
    v: f64,
    r: f64,
    q: &QuadratureSpec,
) -> Result<f64> {
    check_scale(v, r)?;
    let (a, b) = standardized_support(x_pooled, bounds, v, r);
    let p = interval_probability(a, b);
    let integral = integrate(pdf, a, b, q)?.value;
    Ok((integral / p - 1.0).abs())
}

/// `(φ(b) − φ(a)) / (Φ(b) − Φ(a))` by quadrature.
pub fn truncnorm_correction_quadrature(a: f64, b: f64, q: &QuadratureSpec) -> Result<f64> {
    if a.is_nan() || b.is_nan() || a >= b {
        return Err(Error::InvalidInterval { lower: a, upper: b });
    }
    let (first, mass) = truncated_moments(a, b, q)?;
    Ok(-first / mass)
}

/// Per-selection conditional bias, MSE and Monte Carlo standard error of
/// every estimator.
pub fn mc_conditional_bias(
    scenario: &Scenario,
    spec: &PopulationSpec,
    design: &DesignSpec,
    rule: &dyn SelectionRule,
    reps: usize,
    seed: u64,
    options: SimulationOptions,
) -> Result<ScenarioResult> {
    run_scenario(
        scenario,
        spec,
        design,
        rule,
        reps,
        RngPolicy::new(seed),
        options,
    )
}

/// A selection cell whose mean estimate is too far from the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasViolation {
    pub scenario: String,
    pub cell: String,
    pub estimator: Estimator,
    pub count: usize,
    pub bias: f64,
    pub se: f64,
}

impl BiasViolation {
    pub fn z(&self) -> f64 {
        self.bias / self.se
    }
}

/// Cells with at least `min_hits` replications where `estimator`'s bias
/// exceeds `z_max` standard errors.
pub fn unbiasedness_violations(
    result: &ScenarioResult,
    estimator: Estimator,
    min_hits: usize,
    z_max: f64,
) -> Vec<BiasViolation> {
    result
        .cells
        .iter()
        .filter(|c| c.count >= min_hits)
        .filter_map(|c| {
            let s = c.stat(estimator)?;
            let se = s.se?;
            (s.bias.abs() > z_max * se).then(|| BiasViolation {
                scenario: result.scenario.clone(),
                cell: c.label.clone(),
                estimator,
                count: c.count,
                bias: s.bias,
                se,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{pooled_sd, umvcue};
    use crate::normal::truncnorm_correction;

    #[test]
    fn unbounded_returns_pooled_mean() {
        let q = QuadratureSpec::default();
        let got =
            conditional_mean_quadrature(0.37, ExtendedInterval::unbounded(), 0.1, 2.0, &q).unwrap();
        assert_eq!(got, 0.37);
    }

    #[test]
    fn worked_example_overall_population() {
        let q = QuadratureSpec::default();
        let b = ExtendedInterval::new(0.025, f64::INFINITY).unwrap();
        let v = pooled_sd(0.36 * 0.36, 300);
        let got = conditional_mean_quadrature(0.057, b, v, 2.0, &q).unwrap();
        assert!((got - 0.042).abs() < 5e-4, "{got}");
        let closed = umvcue(0.057, b, v, 2.0).unwrap();
        assert!(((got - closed) / closed).abs() < 1e-10);
    }

    #[test]
    fn kernel_matches_closed_form() {
        let q = QuadratureSpec::default();
        for (a, b) in [
            (-1.0886, f64::INFINITY),
            (6.0, 8.0),
            (-8.0, -6.0),
            (-2.0, 0.5),
            (0.1, 0.2),
        ] {
            let quad = truncnorm_correction_quadrature(a, b, &q).unwrap();
            let closed = truncnorm_correction(a, b).unwrap();
            assert!(
                ((quad - closed) / closed).abs() < 1e-11,
                "({a}, {b}): {quad} vs {closed}"
            );
        }
    }

    #[test]
    fn normalization_in_far_tail() {
        let q = QuadratureSpec::default();
        // X₁ bounds six standard units above X: the support of X₂ is far below
        let v = 0.1;
        let r: f64 = 1.0;
        let b = ExtendedInterval::new(6.0 * v / r.sqrt(), f64::INFINITY).unwrap();
        let dev = density_normalization_check(0.0, b, v, r, &q).unwrap();
        assert!(dev <= 1e-9, "{dev}");
        let dev =
            density_normalization_check(0.3, ExtendedInterval::unbounded(), v, r, &q).unwrap();
        assert!(dev <= 1e-9, "{dev}");
    }
}
