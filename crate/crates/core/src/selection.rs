//! Interim subpopulation selection rules.
//!
//! A rule maps the stage-1 mean differences to the selected index set `E`.
//! The rules handled here all induce an interval partition of the stage-1
//! sample space: holding the unselected means fixed, `E` is selected exactly
//! when the aggregated stage-1 mean of `E` lies in `(L, U)`. Those bounds
//! are what the conditional estimators consume.
//!
//! Membership tests use strict inequalities on both sides. Boundaries have
//! probability zero under continuous outcomes.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{combined_prevalence, IndexSet, PopulationSpec};

/// An interval `(lower, upper)` on the extended real line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendedInterval {
    lower: f64,
    upper: f64,
}

impl ExtendedInterval {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if lower.is_nan() || upper.is_nan() || lower >= upper {
            return Err(Error::InvalidInterval { lower, upper });
        }
        Ok(ExtendedInterval { lower, upper })
    }

    pub fn unbounded() -> Self {
        ExtendedInterval {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower < x && x < self.upper
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower == f64::NEG_INFINITY && self.upper == f64::INFINITY
    }
}

impl fmt::Display for ExtendedInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lower, self.upper)
    }
}

/// Stage-1 mean differences `X_{m,1}`, one per subpopulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Summary {
    x1: Vec<f64>,
    counts: Option<Vec<usize>>,
}

impl Stage1Summary {
    pub fn new(x1: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if counts.len() != x1.len() {
            return Err(Error::ShapeError(format!(
                "{} stage-1 means but {} counts",
                x1.len(),
                counts.len()
            )));
        }
        if counts.contains(&0) {
            return Err(Error::EmptyCell(
                "stage-1 subpopulation with no patients".into(),
            ));
        }
        Ok(Stage1Summary {
            x1,
            counts: Some(counts),
        })
    }

    /// Means without patient counts; enough for every rule.
    pub fn from_means(x1: Vec<f64>) -> Self {
        Stage1Summary { x1, counts: None }
    }

    pub fn x1(&self) -> &[f64] {
        &self.x1
    }

    pub fn counts(&self) -> Option<&[usize]> {
        self.counts.as_deref()
    }

    pub fn k(&self) -> usize {
        self.x1.len()
    }

    /// `X_{I,1} = Σ_{m∈I} p_m X_{m,1} / p_I`.
    pub fn aggregate(&self, spec: &PopulationSpec, target: &IndexSet) -> Result<f64> {
        let p = combined_prevalence(spec, target)?;
        Ok(target
            .iter()
            .map(|m| spec.prevalence(m) * self.x1[m])
            .sum::<f64>()
            / p)
    }

    fn check_shape(&self, spec: &PopulationSpec) -> Result<()> {
        if self.k() != spec.k() {
            return Err(Error::ShapeError(format!(
                "{} stage-1 means for k = {}",
                self.k(),
                spec.k()
            )));
        }
        Ok(())
    }
}

/// Result of applying a rule at the interim.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub selected: IndexSet,
    /// Bounds on `X_{E,1}`; `None` after a futility stop.
    pub bounds: Option<ExtendedInterval>,
    pub rule_id: String,
}

impl SelectionOutcome {
    pub fn is_stop(&self) -> bool {
        self.selected.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleKind {
    /// Two subpopulations: continue with the full population, else enrich
    /// to the better subpopulation, else stop.
    D1,
    /// Ordered subpopulations: select the largest prefix `[m]` whose
    /// stage-1 mean reaches the threshold.
    D2,
    /// Pick the winner.
    D3,
}

impl RuleKind {
    pub fn id(self) -> &'static str {
        match self {
            RuleKind::D1 => "D1",
            RuleKind::D2 => "D2",
            RuleKind::D3 => "D3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleConfig {
    pub kind: RuleKind,
    /// Interim threshold; required by D1 and D2, ignored by D3.
    pub delta_star: Option<f64>,
    /// Records that D2's monotone-effect ordering is assumed. Never checked
    /// against data.
    pub assume_monotone: bool,
}

impl RuleConfig {
    pub fn new(kind: RuleKind, delta_star: Option<f64>) -> Self {
        RuleConfig {
            kind,
            delta_star,
            assume_monotone: kind == RuleKind::D2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            RuleKind::D1 | RuleKind::D2 => match self.delta_star {
                Some(d) if d.is_finite() => Ok(()),
                Some(d) => Err(Error::Config(format!("delta_star must be finite, got {d}"))),
                None => Err(Error::Config(format!(
                    "rule {} requires delta_star",
                    self.kind.id()
                ))),
            },
            RuleKind::D3 => Ok(()),
        }
    }

    pub fn validate_for(&self, k: usize) -> Result<()> {
        self.validate()?;
        match self.kind {
            RuleKind::D1 if k != 2 => Err(Error::Config(format!(
                "rule D1 is defined for two subpopulations, got k = {k}"
            ))),
            RuleKind::D2 | RuleKind::D3 if k < 2 => Err(Error::Config(format!(
                "rule {} needs at least two subpopulations",
                self.kind.id()
            ))),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<BuiltinRule> {
        self.validate()?;
        Ok(match self.kind {
            RuleKind::D1 => BuiltinRule::D1 {
                delta_star: self.delta_star.unwrap_or_default(),
            },
            RuleKind::D2 => BuiltinRule::D2 {
                delta_star: self.delta_star.unwrap_or_default(),
            },
            RuleKind::D3 => BuiltinRule::D3,
        })
    }
}

/// A selection rule with an interval representation of its selection
/// events. Implementors supply the selection map and the bounds for the
/// selected aggregate; per-target bounds follow for every rule whose bounds
/// depend only on the unselected means.
pub trait SelectionRule: Send + Sync {
    fn id(&self) -> &str;

    fn select(&self, spec: &PopulationSpec, s1: &Stage1Summary) -> Result<IndexSet>;

    /// `(L, U)` for `X_{E,1}`, a function of the means outside `selected`
    /// only. Called with non-empty `selected`.
    fn selected_bounds(
        &self,
        spec: &PopulationSpec,
        s1: &Stage1Summary,
        selected: &IndexSet,
    ) -> Result<ExtendedInterval>;

    /// Bounds on `X_{I,1}` for a target `I ⊆ E`, holding the means outside
    /// `I` at their observed values.
    ///
    /// With `X_{E,1} = (p_I X_{I,1} + Σ_{m∈E∖I} p_m X_{m,1}) / p_E` and
    /// `(L, U)` free of `X_{I,1}`, the event is the affine image
    /// `(p_E L − Σ p_m X_{m,1}) / p_I < X_{I,1} < (p_E U − Σ p_m X_{m,1}) / p_I`.
    /// Rules whose events are not of this form override this and return
    /// [`Error::NotIntervalRepresentable`].
    fn bounds_for_target(
        &self,
        spec: &PopulationSpec,
        outcome: &SelectionOutcome,
        target: &IndexSet,
        s1: &Stage1Summary,
    ) -> Result<ExtendedInterval> {
        affine_target_bounds(spec, outcome, target, s1)
    }

    /// Every selection the rule can return for `k` subpopulations, in
    /// display order, when known.
    fn image(&self, _k: usize) -> Option<Vec<IndexSet>> {
        None
    }
}

/// The default per-target bounds, shared by all class-`D` rules.
pub fn affine_target_bounds(
    spec: &PopulationSpec,
    outcome: &SelectionOutcome,
    target: &IndexSet,
    s1: &Stage1Summary,
) -> Result<ExtendedInterval> {
    let selected = &outcome.selected;
    if selected.is_empty() {
        return Err(Error::NoEstimateAfterStop);
    }
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    if !target.is_subset_of(selected) {
        return Err(Error::TargetNotSelected {
            target: target.to_string(),
            selected: selected.to_string(),
        });
    }
    let bounds = outcome
        .bounds
        .ok_or_else(|| Error::NotIntervalRepresentable("outcome carries no bounds".into()))?;
    if target == selected {
        return Ok(bounds);
    }
    let p_e = combined_prevalence(spec, selected)?;
    let p_i = combined_prevalence(spec, target)?;
    let rest: f64 = selected
        .difference(target)
        .iter()
        .map(|m| spec.prevalence(m) * s1.x1()[m])
        .sum();
    let map = |b: f64| {
        if b.is_infinite() {
            b
        } else {
            (p_e * b - rest) / p_i
        }
    };
    ExtendedInterval::new(map(bounds.lower()), map(bounds.upper()))
}

/// Applies `rule` and attaches the bounds of the selected aggregate.
pub fn apply_rule(
    rule: &dyn SelectionRule,
    spec: &PopulationSpec,
    s1: &Stage1Summary,
) -> Result<SelectionOutcome> {
    let selected = rule.select(spec, s1)?;
    let bounds = if selected.is_empty() {
        None
    } else {
        Some(rule.selected_bounds(spec, s1, &selected)?)
    };
    Ok(SelectionOutcome {
        selected,
        bounds,
        rule_id: rule.id().to_string(),
    })
}

/// `U_{D2}([m], X_{[m]',1}) = min_{ℓ=m+1..k} (p_{[ℓ]} Δ* − Σ_{i=m+1..ℓ} p_i X_{i,1}) / p_{[m]}`.
///
/// `m` is the prefix size (one-based, `1 ≤ m ≤ k`) and `x_complement` holds
/// the stage-1 means of subpopulations `m+1..k`. The minimum over an empty
/// set (`m = k`) is `+∞`.
pub fn d2_upper_bound(
    spec: &PopulationSpec,
    delta_star: f64,
    m: usize,
    x_complement: &[f64],
) -> Result<f64> {
    let k = spec.k();
    if m == 0 || m > k {
        return Err(Error::ShapeError(format!(
            "prefix size {m} outside 1..={k}"
        )));
    }
    if x_complement.len() != k - m {
        return Err(Error::ShapeError(format!(
            "{} complement means for prefix {m} of k = {k}",
            x_complement.len()
        )));
    }
    let p = spec.prevalences();
    let p_m: f64 = p[..m].iter().sum();
    let mut p_l = p_m;
    let mut partial = 0.0;
    let mut best = f64::INFINITY;
    for (offset, &x) in x_complement.iter().enumerate() {
        let i = m + offset;
        p_l += p[i];
        partial += p[i] * x;
        best = best.min((p_l * delta_star - partial) / p_m);
    }
    Ok(best)
}

/// Pick-the-winner selection with its bounds `(max_{m≠w} X_{m,1}, +∞)`.
/// Ties go to the lowest index.
pub fn d3_select(spec: &PopulationSpec, s1: &Stage1Summary) -> Result<SelectionOutcome> {
    apply_rule(&BuiltinRule::D3, spec, s1)
}

fn argmax_lowest(x: &[f64]) -> usize {
    let mut best = 0;
    for (m, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = m;
        }
    }
    best
}

/// The rules shipped with the library.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BuiltinRule {
    D1 { delta_star: f64 },
    D2 { delta_star: f64 },
    D3,
}

impl SelectionRule for BuiltinRule {
    fn id(&self) -> &str {
        match self {
            BuiltinRule::D1 { .. } => "D1",
            BuiltinRule::D2 { .. } => "D2",
            BuiltinRule::D3 => "D3",
        }
    }

    fn image(&self, k: usize) -> Option<Vec<IndexSet>> {
        Some(match self {
            BuiltinRule::D1 { .. } => vec![
                IndexSet::full(k),
                IndexSet::single(0),
                IndexSet::single(1),
                IndexSet::empty(),
            ],
            BuiltinRule::D2 { .. } => (1..=k)
                .rev()
                .map(IndexSet::prefix)
                .chain(std::iter::once(IndexSet::empty()))
                .collect(),
            BuiltinRule::D3 => (0..k).map(IndexSet::single).collect(),
        })
    }

    fn select(&self, spec: &PopulationSpec, s1: &Stage1Summary) -> Result<IndexSet> {
        s1.check_shape(spec)?;
        let k = spec.k();
        let x = s1.x1();
        match *self {
            BuiltinRule::D1 { delta_star } => {
                if k != 2 {
                    return Err(Error::ShapeError(format!("D1 needs k = 2, got {k}")));
                }
                let xf = spec.prevalence(0) * x[0] + spec.prevalence(1) * x[1];
                if xf > delta_star {
                    Ok(IndexSet::full(2))
                } else {
                    let w = argmax_lowest(x);
                    if x[w] > delta_star {
                        Ok(IndexSet::single(w))
                    } else {
                        Ok(IndexSet::empty())
                    }
                }
            }
            BuiltinRule::D2 { delta_star } => {
                if k < 2 {
                    return Err(Error::ShapeError("D2 needs k >= 2".into()));
                }
                let p = spec.prevalences();
                // running prefix aggregates X_{[m],1}, largest prefix first
                let mut sums = Vec::with_capacity(k);
                let (mut pw, mut pp) = (0.0, 0.0);
                for m in 0..k {
                    pw += p[m] * x[m];
                    pp += p[m];
                    sums.push(pw / pp);
                }
                Ok(match (1..=k).rev().find(|&m| sums[m - 1] >= delta_star) {
                    Some(m) => IndexSet::prefix(m),
                    None => IndexSet::empty(),
                })
            }
            BuiltinRule::D3 => {
                if k < 2 {
                    return Err(Error::ShapeError("D3 needs k >= 2".into()));
                }
                Ok(IndexSet::single(argmax_lowest(x)))
            }
        }
    }

    fn selected_bounds(
        &self,
        spec: &PopulationSpec,
        s1: &Stage1Summary,
        selected: &IndexSet,
    ) -> Result<ExtendedInterval> {
        s1.check_shape(spec)?;
        let k = spec.k();
        let x = s1.x1();
        match *self {
            BuiltinRule::D1 { delta_star } => {
                let p = spec.prevalences();
                match selected.members() {
                    [0, 1] => ExtendedInterval::new(delta_star, f64::INFINITY),
                    [0] => ExtendedInterval::new(delta_star, (delta_star - p[1] * x[1]) / p[0]),
                    [1] => ExtendedInterval::new(delta_star, (delta_star - p[0] * x[0]) / p[1]),
                    _ => Err(Error::NotIntervalRepresentable(format!(
                        "{selected} is not an outcome of D1"
                    ))),
                }
            }
            BuiltinRule::D2 { delta_star } => {
                let m = selected.len();
                if *selected != IndexSet::prefix(m) {
                    return Err(Error::NotIntervalRepresentable(format!(
                        "{selected} is not a prefix set, so not an outcome of D2"
                    )));
                }
                let upper = d2_upper_bound(spec, delta_star, m, &x[m..k])?;
                ExtendedInterval::new(delta_star, upper)
            }
            BuiltinRule::D3 => {
                let [w] = selected.members() else {
                    return Err(Error::NotIntervalRepresentable(format!(
                        "{selected} is not a single winner"
                    )));
                };
                let lower = (0..k)
                    .filter(|m| m != w)
                    .map(|m| x[m])
                    .fold(f64::NEG_INFINITY, f64::max);
                ExtendedInterval::new(lower, f64::INFINITY)
            }
        }
    }
}

/// Outcome of a randomized partition-consistency check.
#[derive(Debug, Clone, Default)]
pub struct PartitionReport {
    pub draws: usize,
    pub perturbations: usize,
    /// Selection label → number of draws that produced it.
    pub outcomes: BTreeMap<String, usize>,
    /// First few failures, human readable.
    pub failures: Vec<String>,
    pub failure_count: usize,
}

impl PartitionReport {
    pub fn passed(&self) -> bool {
        self.failure_count == 0
    }

    fn fail(&mut self, msg: String) {
        self.failure_count += 1;
        if self.failures.len() < 10 {
            self.failures.push(msg);
        }
    }
}

/// Randomized check of the interval representation of `rule`.
///
/// Each draw samples stage-1 means `x_m = centre + scale·N(0,1)` and checks
/// that the observed aggregate lies strictly inside the reported bounds.
/// It then moves the selected aggregate to `per_draw` new positions while
/// holding the unselected means fixed. Points inside `(L, U)` must keep the
/// selection and leave the bounds unchanged. Points outside must change
/// the selection. Moves spread the shift unevenly over the selected members
/// whenever there are at least two.
pub fn check_partition<R: Rng + ?Sized>(
    rule: &dyn SelectionRule,
    spec: &PopulationSpec,
    centre: f64,
    scale: f64,
    draws: usize,
    per_draw: usize,
    rng: &mut R,
) -> PartitionReport {
    let k = spec.k();
    let mut report = PartitionReport::default();
    for _ in 0..draws {
        report.draws += 1;
        let x: Vec<f64> = (0..k)
            .map(|_| centre + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let s1 = Stage1Summary::from_means(x.clone());
        let outcome = match apply_rule(rule, spec, &s1) {
            Ok(o) => o,
            Err(e) => {
                report.fail(format!("x = {x:?}: rule failed: {e}"));
                continue;
            }
        };
        *report
            .outcomes
            .entry(outcome.selected.label(k))
            .or_default() += 1;
        let Some(bounds) = outcome.bounds else {
            continue;
        };
        let selected = &outcome.selected;
        let observed = s1
            .aggregate(spec, selected)
            .expect("selected set is non-empty");
        if !bounds.contains(observed) {
            report.fail(format!(
                "x = {x:?}: X_E1 = {observed} outside {bounds} for {selected}"
            ));
        }
        for _ in 0..per_draw {
            report.perturbations += 1;
            let (target, inside) = perturbation_target(bounds, observed, scale, rng);
            let moved = move_aggregate(spec, selected, &x, target, rng);
            let s1_moved = Stage1Summary::from_means(moved.clone());
            let now = match rule.select(spec, &s1_moved) {
                Ok(now) => now,
                Err(e) => {
                    report.fail(format!("x = {moved:?}: rule failed: {e}"));
                    continue;
                }
            };
            if inside {
                if now != *selected {
                    report.fail(format!(
                        "x = {moved:?}: aggregate {target} inside {bounds} but selected {now} instead of {selected}"
                    ));
                } else if let Ok(b) = rule.selected_bounds(spec, &s1_moved, selected) {
                    if !same_bound(b.lower(), bounds.lower())
                        || !same_bound(b.upper(), bounds.upper())
                    {
                        report.fail(format!(
                            "x = {moved:?}: bounds moved from {bounds} to {b} with unselected means fixed"
                        ));
                    }
                }
            } else if now == *selected {
                report.fail(format!(
                    "x = {moved:?}: aggregate {target} outside {bounds} but {selected} still selected"
                ));
            }
        }
    }
    report
}

fn same_bound(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

/// A random new value for the selected aggregate and whether it lies in
/// `bounds`. Outside points are only drawn past finite endpoints.
fn perturbation_target<R: Rng + ?Sized>(
    bounds: ExtendedInterval,
    observed: f64,
    scale: f64,
    rng: &mut R,
) -> (f64, bool) {
    let (lo, hi) = (bounds.lower(), bounds.upper());
    let mut sides = Vec::with_capacity(3);
    sides.push(0u8);
    if lo.is_finite() {
        sides.push(1);
    }
    if hi.is_finite() {
        sides.push(2);
    }
    let side = sides[rng.random_range(0..sides.len())];
    let gap = |r: &mut R| -> f64 {
        let e: f64 = Exp1.sample(r);
        scale * (1e-6 + e)
    };
    match side {
        1 => (lo - gap(rng), false),
        2 => (hi + gap(rng), false),
        _ => {
            let t = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => lo + (hi - lo) * rng.random_range(1e-9..1.0 - 1e-9),
                (true, false) => lo + gap(rng),
                (false, true) => hi - gap(rng),
                (false, false) => observed + scale * rng.sample::<f64, _>(StandardNormal),
            };
            (t, true)
        }
    }
}

/// New means with the selected aggregate at `target` and every unselected
/// mean unchanged. Changes to individual selected means are uneven but sum
/// (prevalence-weighted) to the required aggregate shift.
fn move_aggregate<R: Rng + ?Sized>(
    spec: &PopulationSpec,
    selected: &IndexSet,
    x: &[f64],
    target: f64,
    rng: &mut R,
) -> Vec<f64> {
    let p_e: f64 = selected.iter().map(|m| spec.prevalence(m)).sum();
    let current: f64 = selected
        .iter()
        .map(|m| spec.prevalence(m) * x[m])
        .sum::<f64>()
        / p_e;
    let shift = target - current;
    let mut out = x.to_vec();
    // zero-mean (prevalence-weighted) jitter inside the selected set
    let jitter: Vec<f64> = selected
        .iter()
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let jbar: f64 = selected
        .iter()
        .zip(&jitter)
        .map(|(m, j)| spec.prevalence(m) * j)
        .sum::<f64>()
        / p_e;
    for (m, j) in selected.iter().zip(&jitter) {
        out[m] += shift + (j - jbar) * 0.5 * shift.abs().max(1e-3);
    }
    out
}

/// Rules keyed by identifier. Registration runs [`check_partition`] and
/// refuses rules whose reported bounds disagree with their selections.
#[derive(Default, Clone)]
pub struct RuleRegistry {
    rules: BTreeMap<String, Arc<dyn SelectionRule>>,
}

impl RuleRegistry {
    pub fn new() -> Self {
        RuleRegistry::default()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng + ?Sized>(
        &mut self,
        rule: Arc<dyn SelectionRule>,
        spec: &PopulationSpec,
        centre: f64,
        scale: f64,
        draws: usize,
        rng: &mut R,
    ) -> Result<PartitionReport> {
        let report = check_partition(rule.as_ref(), spec, centre, scale, draws, 4, rng);
        if !report.passed() {
            return Err(Error::InconsistentRule {
                rule: rule.id().to_string(),
                detail: report.failures.first().cloned().unwrap_or_default(),
            });
        }
        self.rules.insert(rule.id().to_string(), rule);
        Ok(report)
    }

    pub fn get(&self, id: &str) -> Option<Arc<dyn SelectionRule>> {
        self.rules.get(id).cloned()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rules.keys().map(String::as_str)
    }
}
