//! Self-verification suite behind `enrich-est verify`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::estimators::umvcue;
use crate::normal::{cdf, truncnorm_correction};
use crate::oracle::{
    conditional_mean_quadrature, density_normalization_check, mc_conditional_bias,
    truncnorm_correction_quadrature, unbiasedness_violations, QuadratureSpec,
};
use crate::population::{DesignSpec, PopulationSpec};
use crate::selection::{ExtendedInterval, RuleConfig, RuleKind, SelectionRule};
use crate::simulation::{Estimator, Scenario, ScenarioResult, SimulationOptions};

/// High-precision values of `(φ(b) − φ(a)) / (Φ(b) − Φ(a))`.
pub const KERNEL_REFERENCE: &str = include_str!("../tests/data/kernel_reference.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Fast,
    Full,
}

impl std::str::FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            _ => Err(format!("unknown level {s:?}; expected fast or full")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub id: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(id: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            id: id.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub level: Level,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed_ids(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.id.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render(&self) -> String {
        let width = self
            .checks
            .iter()
            .map(|c| c.id.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!("{:<width$}  result  detail\n", "check");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<width$}  {:<6}  {}",
                c.id,
                if c.passed { "pass" } else { "FAIL" },
                c.detail
            );
        }
        out
    }
}

/// Parsed reference row `(a, b, value)`.
pub fn kernel_reference() -> Vec<(f64, f64, f64)> {
    KERNEL_REFERENCE
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<f64> = l
                .split(',')
                .map(|s| s.trim().parse().expect("reference values parse"))
                .collect();
            (f[0], f[1], f[2])
        })
        .collect()
}

fn relative_error(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

fn in_grid(a: f64, b: f64, limit: f64) -> bool {
    let ok = |z: f64| z.is_infinite() || z.abs() <= limit;
    ok(a) && ok(b)
}

/// Closed-form kernel against the reference: `≤ 1e-10` relative error for
/// `|z| ≤ 8`, finite values out to `|z| = 38`.
pub fn kernel_accuracy_check() -> CheckResult {
    let mut worst = (0.0, f64::NAN, f64::NAN);
    let mut non_finite = Vec::new();
    for (a, b, want) in kernel_reference() {
        let got = truncnorm_correction(a, b).unwrap_or(f64::NAN);
        if !got.is_finite() {
            non_finite.push(format!("({a}, {b})"));
            continue;
        }
        if in_grid(a, b, 8.0) {
            let e = relative_error(got, want);
            if e > worst.0 {
                worst = (e, a, b);
            }
        }
    }
    let passed = worst.0 <= 1e-10 && non_finite.is_empty();
    CheckResult::new(
        "kernel-accuracy",
        passed,
        format!(
            "max relative error {:.2e} at ({}, {}); {} non-finite",
            worst.0,
            worst.1,
            worst.2,
            non_finite.len()
        ),
    )
}

/// Quadrature kernel against the reference, validating the oracle itself.
pub fn kernel_quadrature_check(q: &QuadratureSpec) -> CheckResult {
    let mut worst = 0.0f64;
    let mut errors = 0;
    for (a, b, want) in kernel_reference() {
        if !in_grid(a, b, 8.0) {
            continue;
        }
        match truncnorm_correction_quadrature(a, b, q) {
            Ok(got) => worst = worst.max(relative_error(got, want)),
            Err(_) => errors += 1,
        }
    }
    CheckResult::new(
        "kernel-quadrature",
        worst <= 1e-10 && errors == 0,
        format!("max relative error {worst:.2e}; {errors} quadrature failures"),
    )
}

/// A random `(x, (L, U), v, r)` configuration with standardized bounds
/// `√r (B − x)/v` in `[−8, 8]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub x: f64,
    pub bounds: ExtendedInterval,
    pub v: f64,
    pub r: f64,
}

pub fn random_oracle_config<R: Rng>(rng: &mut R) -> OracleConfig {
    let x: f64 = rng.random_range(-2.0..2.0);
    let v = (rng.random_range(0.01f64.ln()..1.0f64.ln())).exp();
    let r = (rng.random_range(0.1f64.ln()..10.0f64.ln())).exp();
    let (mut zl, mut zu) = match rng.random_range(0..10) {
        // far tail on one side
        0 => {
            let lo = rng.random_range(6.0..7.9);
            (lo, rng.random_range(lo + 0.05..8.0))
        }
        1 => {
            let hi = rng.random_range(-7.9..-6.0);
            (rng.random_range(-8.0..hi - 0.05), hi)
        }
        _ => {
            let a: f64 = rng.random_range(-8.0..8.0);
            let b: f64 = rng.random_range(-8.0..8.0);
            if (a - b).abs() < 1e-3 {
                (a.min(b), a.min(b) + 1e-3)
            } else {
                (a.min(b), a.max(b))
            }
        }
    };
    match rng.random_range(0..3) {
        0 => zu = f64::INFINITY,
        1 => zl = f64::NEG_INFINITY,
        _ => {}
    }
    let to_bound = |z: f64| {
        if z.is_infinite() {
            z
        } else {
            x + z * v / r.sqrt()
        }
    };
    let bounds = ExtendedInterval::new(to_bound(zl), to_bound(zu)).expect("ordered bounds");
    OracleConfig { x, bounds, v, r }
}

/// Worst relative disagreement between `estimator` and the quadrature
/// conditional mean over `n` random configurations.
pub fn oracle_equivalence_with(
    estimator: &dyn Fn(f64, ExtendedInterval, f64, f64) -> Result<f64>,
    n: usize,
    seed: u64,
    q: &QuadratureSpec,
) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, None);
    let mut failures = 0;
    for _ in 0..n {
        let c = random_oracle_config(&mut rng);
        let closed = estimator(c.x, c.bounds, c.v, c.r);
        let quad = conditional_mean_quadrature(c.x, c.bounds, c.v, c.r, q);
        match (closed, quad) {
            (Ok(a), Ok(b)) => {
                let e = relative_error(a, b);
                if e > worst.0 || e.is_nan() {
                    worst = (e, Some(c));
                }
            }
            _ => failures += 1,
        }
    }
    let passed = worst.0 <= 1e-8 && failures == 0;
    let at = worst
        .1
        .map(|c| format!(" at x={}, bounds={}, v={}, r={}", c.x, c.bounds, c.v, c.r))
        .unwrap_or_default();
    CheckResult::new(
        "oracle-equivalence",
        passed,
        format!(
            "{n} configs, max relative error {:.2e}{at}; {failures} failures",
            worst.0
        ),
    )
}

pub fn normalization_check(n: usize, seed: u64, q: &QuadratureSpec) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_726d);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..n {
        let c = random_oracle_config(&mut rng);
        match density_normalization_check(c.x, c.bounds, c.v, c.r, q) {
            Ok(d) => worst = worst.max(d),
            Err(_) => failures += 1,
        }
    }
    CheckResult::new(
        "normalization",
        worst <= 1e-9 && failures == 0,
        format!("{n} configs, max deviation {worst:.2e}; {failures} failures"),
    )
}

/// Published selection percentages and bias ×10³ for the five two-group
/// scenarios, columns ordered F, {1}, {2}, stop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceScenario {
    pub name: &'static str,
    pub effects: [f64; 2],
    pub percent: [f64; 4],
    pub mle: [f64; 3],
    pub umvcue: [f64; 3],
    pub pice: [f64; 3],
}

pub const TWO_GROUP_REFERENCE: [ReferenceScenario; 5] = [
    ReferenceScenario {
        name: "1",
        effects: [0.5, 0.5],
        percent: [84.17, 5.06, 5.03, 5.74],
        mle: [28.71, -17.36, -22.33],
        umvcue: [-0.05, 4.02, -2.36],
        pice: [-0.03, 4.01, -2.34],
    },
    ReferenceScenario {
        name: "2",
        effects: [0.5, 0.2],
        percent: [59.64, 21.13, 3.97, 15.27],
        mle: [64.45, -6.81, 66.83],
        umvcue: [-0.15, -0.98, -0.21],
        pice: [-0.05, -0.95, -0.15],
    },
    ReferenceScenario {
        name: "3",
        effects: [0.5, 0.0],
        percent: [40.21, 37.45, 1.83, 20.51],
        mle: [97.01, 5.02, 127.25],
        umvcue: [1.09, -0.50, -2.10],
        pice: [1.19, -0.48, -2.12],
    },
    ReferenceScenario {
        name: "4",
        effects: [0.0, 0.0],
        percent: [6.76, 9.92, 10.14, 73.18],
        mle: [195.07, 139.30, 138.89],
        umvcue: [1.93, -0.14, -0.87],
        pice: [1.58, -0.25, -0.89],
    },
    ReferenceScenario {
        name: "5",
        effects: [0.5, -0.2],
        percent: [22.88, 53.62, 0.57, 22.93],
        mle: [133.16, 16.90, 187.93],
        umvcue: [0.45, 0.50, -4.47],
        pice: [0.40, 0.55, -4.54],
    },
];

pub const TWO_GROUP_LABELS: [&str; 4] = ["F", "1", "2", "stop"];

/// Two equal subpopulations, `n1 = n2 = 100`, `σ² = 1`, D1 with
/// threshold 0.3, and the five reference scenarios.
pub fn two_group_setup() -> (PopulationSpec, DesignSpec, Vec<Scenario>) {
    let spec = PopulationSpec::new(vec![0.5, 0.5], None).expect("valid prevalences");
    let design = DesignSpec::new(
        100,
        100,
        Some(1.0),
        RuleConfig::new(RuleKind::D1, Some(0.3)),
    )
    .expect("valid design");
    let scenarios = TWO_GROUP_REFERENCE
        .iter()
        .map(|r| Scenario::new(r.name, r.effects.to_vec(), 1.0))
        .collect();
    (spec, design, scenarios)
}

/// Three ordered subpopulations under D2.
pub fn d2_setup() -> (PopulationSpec, DesignSpec, Scenario) {
    let spec = PopulationSpec::new(vec![1.0 / 3.0; 3], None).expect("valid prevalences");
    let design = DesignSpec::new(
        150,
        150,
        Some(1.0),
        RuleConfig::new(RuleKind::D2, Some(0.2)),
    )
    .expect("valid design");
    (spec, design, Scenario::new("D2", vec![0.5, 0.3, 0.1], 1.0))
}

/// Four subpopulations under pick-the-winner.
pub fn d3_setup() -> (PopulationSpec, DesignSpec, Scenario) {
    let spec = PopulationSpec::new(vec![0.25; 4], None).expect("valid prevalences");
    let design = DesignSpec::new(200, 200, Some(1.0), RuleConfig::new(RuleKind::D3, None))
        .expect("valid design");
    (
        spec,
        design,
        Scenario::new("D3", vec![0.4, 0.3, 0.2, 0.1], 1.0),
    )
}

/// Tolerances for comparing a run against [`TWO_GROUP_REFERENCE`], widened
/// by `√(100000 / reps)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceTolerances {
    pub percent: f64,
    pub umvcue: f64,
    pub mle: f64,
    pub mle_small_cell: f64,
    pub pice_vs_umvcue: f64,
}

impl ReferenceTolerances {
    pub fn for_reps(reps: usize) -> Self {
        let w = (100_000.0 / reps as f64).sqrt().max(1.0);
        ReferenceTolerances {
            percent: 0.5 * w,
            umvcue: 2.5 * w,
            mle: 3.0 * w,
            mle_small_cell: 8.0 * w,
            pice_vs_umvcue: 2.5 * w,
        }
    }
}

/// Reference comparisons, one check per criterion, over all scenarios.
pub fn reference_checks(results: &[ScenarioResult], reps: usize) -> Vec<CheckResult> {
    let tol = ReferenceTolerances::for_reps(reps);
    let mut percent = Vec::new();
    let mut umv = Vec::new();
    let mut mle = Vec::new();
    let mut pice = Vec::new();
    let mut missing = Vec::new();
    for reference in &TWO_GROUP_REFERENCE {
        let Some(res) = results.iter().find(|r| r.scenario == reference.name) else {
            missing.push(reference.name);
            continue;
        };
        for (j, label) in TWO_GROUP_LABELS.iter().enumerate() {
            let Some(cell) = res.cell(label) else {
                missing.push(reference.name);
                continue;
            };
            let got = 100.0 * cell.proportion;
            let want = reference.percent[j];
            if (got - want).abs() > tol.percent {
                percent.push(format!(
                    "s{} {label}: {got:.2}% vs {want:.2}%",
                    reference.name
                ));
            }
            if j == 3 {
                continue;
            }
            let bias = |e: Estimator| cell.stat(e).map(|s| 1e3 * s.bias);
            let (Some(b_mle), Some(b_umv), Some(b_pice)) = (
                bias(Estimator::Mle),
                bias(Estimator::Umvcue),
                bias(Estimator::Pice),
            ) else {
                continue;
            };
            if want >= 5.0 {
                if (b_umv - reference.umvcue[j]).abs() > tol.umvcue {
                    umv.push(format!(
                        "s{} {label}: {b_umv:.2} vs {:.2}",
                        reference.name, reference.umvcue[j]
                    ));
                }
                let t = if want < 10.0 {
                    tol.mle_small_cell
                } else {
                    tol.mle
                };
                if (b_mle - reference.mle[j]).abs() > t {
                    mle.push(format!(
                        "s{} {label}: {b_mle:.2} vs {:.2}",
                        reference.name, reference.mle[j]
                    ));
                }
            }
            if (b_pice - b_umv).abs() > tol.pice_vs_umvcue {
                pice.push(format!(
                    "s{} {label}: {b_pice:.2} vs {b_umv:.2}",
                    reference.name
                ));
            }
        }
    }
    let summarize = |id: &str, fails: Vec<String>, t: f64| {
        let detail = if fails.is_empty() {
            format!("all cells within ±{t:.2}")
        } else {
            format!("outside ±{t:.2}: {}", fails.join("; "))
        };
        CheckResult::new(id, fails.is_empty() && missing.is_empty(), detail)
    };
    vec![
        summarize("reference-proportions", percent, tol.percent),
        summarize("reference-umvcue-bias", umv, tol.umvcue),
        summarize("reference-mle-bias", mle, tol.mle),
        summarize("reference-pice-vs-umvcue", pice, tol.pice_vs_umvcue),
    ]
}

/// `P(X_{F,1} > Δ*)` in closed form against the simulated continue-with-F
/// proportion, within 4 Monte Carlo standard errors.
pub fn continue_full_check(
    results: &[ScenarioResult],
    spec: &PopulationSpec,
    design: &DesignSpec,
    sigma2: f64,
) -> CheckResult {
    let delta_star = design.delta_star().unwrap_or_default();
    let sd = (4.0 * sigma2 / design.n1 as f64).sqrt();
    let mut fails = Vec::new();
    let mut worst = 0.0f64;
    for res in results {
        let delta_f: f64 = res
            .effects
            .iter()
            .zip(spec.prevalences())
            .map(|(d, p)| d * p)
            .sum();
        let p = cdf((delta_f - delta_star) / sd);
        let got = res.cell("F").map(|c| c.proportion).unwrap_or(0.0);
        let se = (p * (1.0 - p) / res.reps as f64).sqrt();
        let z = (got - p).abs() / se;
        worst = worst.max(z);
        if z > 4.0 {
            fails.push(format!("s{}: {got:.4} vs {p:.4}", res.scenario));
        }
    }
    CheckResult::new(
        "continue-full-closed-form",
        fails.is_empty(),
        format!(
            "max |z| {worst:.2}{}",
            if fails.is_empty() {
                String::new()
            } else {
                format!("; {}", fails.join("; "))
            }
        ),
    )
}

fn unbiasedness_check(id: &str, results: &[ScenarioResult]) -> CheckResult {
    let violations: Vec<String> = results
        .iter()
        .flat_map(|r| unbiasedness_violations(r, Estimator::Umvcue, 1000, 3.0))
        .map(|v| format!("{} {}: z = {:.2}", v.scenario, v.cell, v.z()))
        .collect();
    let cells: usize = results
        .iter()
        .map(|r| {
            r.cells
                .iter()
                .filter(|c| c.count >= 1000 && c.stats.is_some())
                .count()
        })
        .sum();
    CheckResult::new(
        id,
        violations.is_empty(),
        if violations.is_empty() {
            format!("{cells} cells within 3 se")
        } else {
            violations.join("; ")
        },
    )
}

fn run_all(
    spec: &PopulationSpec,
    design: &DesignSpec,
    scenarios: &[Scenario],
    reps: usize,
    seed: u64,
) -> Result<Vec<ScenarioResult>> {
    let rule = design.rule.build()?;
    scenarios
        .iter()
        .map(|s| {
            mc_conditional_bias(
                s,
                spec,
                design,
                &rule as &dyn SelectionRule,
                reps,
                seed,
                SimulationOptions::default(),
            )
        })
        .collect()
}

pub fn run_verify(level: Level, seed: u64) -> Result<VerifyReport> {
    let q = QuadratureSpec::default();
    let configs = match level {
        Level::Fast => 100,
        Level::Full => 1000,
    };
    let mut checks = vec![
        kernel_accuracy_check(),
        kernel_quadrature_check(&q),
        normalization_check(configs, seed, &q),
        oracle_equivalence_with(&umvcue, configs, seed, &q),
    ];
    if level == Level::Full {
        let reps = 100_000;
        let (spec, design, scenarios) = two_group_setup();
        let results = run_all(&spec, &design, &scenarios, reps, seed)?;
        checks.push(unbiasedness_check("mc-unbiasedness-d1", &results));
        checks.push(continue_full_check(&results, &spec, &design, 1.0));
        checks.extend(reference_checks(&results, reps));
        for (id, (spec, design, scenario)) in [
            ("mc-unbiasedness-d2", d2_setup()),
            ("mc-unbiasedness-d3", d3_setup()),
        ] {
            let results = run_all(&spec, &design, &[scenario], reps, seed)?;
            checks.push(unbiasedness_check(id, &results));
        }
    }
    Ok(VerifyReport {
        level,
        seed,
        checks,
    })
}
