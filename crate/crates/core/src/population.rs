//! Population partition, design constants and the allocation algebra shared
//! by the selection rules, estimators and simulator.
//!
//! Subpopulation indices are zero-based internally. Every user-facing label
//! (`IndexSet::label`, `IndexSet::parse`) is one-based, with `F` denoting the
//! full population.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::RuleConfig;

const PREVALENCE_SUM_TOL: f64 = 1e-12;

/// Trial stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub const BOTH: [Stage; 2] = [Stage::One, Stage::Two];

    pub fn index(self) -> usize {
        match self {
            Stage::One => 0,
            Stage::Two => 1,
        }
    }

    pub fn from_number(j: u8) -> Option<Stage> {
        match j {
            1 => Some(Stage::One),
            2 => Some(Stage::Two),
            _ => None,
        }
    }
}

/// Randomized arm; `Control` is coded 0 and `Treatment` 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Control,
    Treatment,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treatment];

    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Treatment => 1,
        }
    }

    pub fn from_code(a: u8) -> Option<Arm> {
        match a {
            0 => Some(Arm::Control),
            1 => Some(Arm::Treatment),
            _ => None,
        }
    }
}

/// A sorted set of subpopulation indices. May be empty (futility stop).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct IndexSet {
    members: Vec<usize>,
}

impl IndexSet {
    /// Builds a set from arbitrary zero-based indices, sorting and
    /// deduplicating. Every index must be below `k`.
    pub fn new(mut members: Vec<usize>, k: usize) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if let Some(&m) = members.iter().find(|&&m| m >= k) {
            return Err(Error::ShapeError(format!(
                "subpopulation index {} outside 1..={}",
                m + 1,
                k
            )));
        }
        Ok(IndexSet { members })
    }

    pub fn empty() -> Self {
        IndexSet::default()
    }

    pub fn full(k: usize) -> Self {
        IndexSet {
            members: (0..k).collect(),
        }
    }

    pub fn single(m: usize) -> Self {
        IndexSet { members: vec![m] }
    }

    /// The prefix `{0, .., m-1}`, written `[m]` for ordered subpopulations.
    pub fn prefix(m: usize) -> Self {
        IndexSet {
            members: (0..m).collect(),
        }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, m: usize) -> bool {
        self.members.binary_search(&m).is_ok()
    }

    pub fn is_subset_of(&self, other: &IndexSet) -> bool {
        self.members.iter().all(|&m| other.contains(m))
    }

    pub fn complement(&self, k: usize) -> IndexSet {
        IndexSet {
            members: (0..k).filter(|&m| !self.contains(m)).collect(),
        }
    }

    /// Members of `self` that are not in `other`.
    pub fn difference(&self, other: &IndexSet) -> IndexSet {
        IndexSet {
            members: self
                .members
                .iter()
                .copied()
                .filter(|&m| !other.contains(m))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied()
    }

    /// One-based label: `F` for the full population, `stop` for the empty
    /// set, otherwise members joined by `+` (e.g. `1+3`).
    pub fn label(&self, k: usize) -> String {
        if self.is_empty() {
            "stop".to_string()
        } else if self.len() == k {
            "F".to_string()
        } else {
            self.members
                .iter()
                .map(|m| (m + 1).to_string())
                .collect::<Vec<_>>()
                .join("+")
        }
    }

    /// Inverse of [`IndexSet::label`] for non-empty sets.
    pub fn parse(label: &str, k: usize) -> Result<Self> {
        let label = label.trim();
        if label.eq_ignore_ascii_case("f") {
            return Ok(IndexSet::full(k));
        }
        let mut members = Vec::new();
        for part in label.split('+') {
            let m: usize = part.trim().parse().map_err(|_| {
                Error::Config(format!("cannot parse subpopulation label {label:?}"))
            })?;
            if m == 0 || m > k {
                return Err(Error::Config(format!(
                    "subpopulation {m} in {label:?} outside 1..={k}"
                )));
            }
            members.push(m - 1);
        }
        IndexSet::new(members, k)
    }
}

impl fmt::Display for IndexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self
            .members
            .iter()
            .map(|m| (m + 1).to_string())
            .collect::<Vec<_>>()
            .join(",");
        write!(f, "{{{inner}}}")
    }
}

/// Prevalences of the `k` disjoint subpopulations and, for scenarios, their
/// true treatment effects.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    prevalences: Vec<f64>,
    effects: Option<Vec<f64>>,
}

impl PopulationSpec {
    pub fn new(prevalences: Vec<f64>, effects: Option<Vec<f64>>) -> Result<Self> {
        if prevalences.is_empty() {
            return Err(Error::Config(
                "at least one subpopulation is required".into(),
            ));
        }
        if let Some(p) = prevalences.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::Config(format!("prevalence {p} outside (0, 1]")));
        }
        let total: f64 = prevalences.iter().sum();
        if (total - 1.0).abs() > PREVALENCE_SUM_TOL {
            return Err(Error::Config(format!(
                "prevalences sum to {total}, expected 1 within {PREVALENCE_SUM_TOL:e}"
            )));
        }
        if let Some(effects) = &effects {
            if effects.len() != prevalences.len() {
                return Err(Error::ShapeError(format!(
                    "{} effects for {} subpopulations",
                    effects.len(),
                    prevalences.len()
                )));
            }
            if effects.iter().any(|d| !d.is_finite()) {
                return Err(Error::Config("treatment effects must be finite".into()));
            }
        }
        Ok(PopulationSpec {
            prevalences,
            effects,
        })
    }

    pub fn k(&self) -> usize {
        self.prevalences.len()
    }

    pub fn prevalences(&self) -> &[f64] {
        &self.prevalences
    }

    pub fn prevalence(&self, m: usize) -> f64 {
        self.prevalences[m]
    }

    pub fn effects(&self) -> Option<&[f64]> {
        self.effects.as_deref()
    }

    /// Same partition with the scenario effects replaced.
    pub fn with_effects(&self, effects: Vec<f64>) -> Result<Self> {
        PopulationSpec::new(self.prevalences.clone(), Some(effects))
    }

    fn check_target(&self, target: &IndexSet) -> Result<()> {
        if target.is_empty() {
            return Err(Error::EmptyTarget);
        }
        if target.iter().any(|m| m >= self.k()) {
            return Err(Error::ShapeError(format!(
                "target {target} outside 1..={}",
                self.k()
            )));
        }
        Ok(())
    }
}

/// `p_I`, the combined prevalence of the subpopulations in `target`.
pub fn combined_prevalence(spec: &PopulationSpec, target: &IndexSet) -> Result<f64> {
    spec.check_target(target)?;
    Ok(target.iter().map(|m| spec.prevalence(m)).sum())
}

/// `Δ_I`, the prevalence-weighted average of the member effects.
pub fn aggregate_effect(spec: &PopulationSpec, target: &IndexSet) -> Result<f64> {
    let effects = spec.effects().ok_or(Error::MissingScenario)?;
    let p = combined_prevalence(spec, target)?;
    let weighted: f64 = target.iter().map(|m| spec.prevalence(m) * effects[m]).sum();
    Ok(weighted / p)
}

/// Fixed design constants.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub n1: usize,
    pub n2: usize,
    /// Known outcome variance; `None` means unknown (plug-in estimation).
    pub sigma2: Option<f64>,
    pub rule: RuleConfig,
}

impl DesignSpec {
    pub fn new(n1: usize, n2: usize, sigma2: Option<f64>, rule: RuleConfig) -> Result<Self> {
        let design = DesignSpec {
            n1,
            n2,
            sigma2,
            rule,
        };
        if let Some(s2) = sigma2 {
            if !(s2 > 0.0 && s2.is_finite()) {
                return Err(Error::Config(format!("sigma2 must be positive, got {s2}")));
            }
        }
        if n2 < 2 {
            return Err(Error::Config(format!("n2 = {n2} < 2")));
        }
        design.rule.validate()?;
        Ok(design)
    }

    /// Checks the design against a population partition.
    pub fn validate_for(&self, spec: &PopulationSpec) -> Result<()> {
        let k = spec.k();
        if self.n1 < 2 * k {
            return Err(Error::Config(format!(
                "n1 = {} leaves some stage-1 arm empty for k = {k}",
                self.n1
            )));
        }
        self.rule.validate_for(k)
    }

    pub fn delta_star(&self) -> Option<f64> {
        self.rule.delta_star
    }
}

/// Patient counts per (subpopulation, stage, arm).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationTable {
    counts: Vec<[[usize; 2]; 2]>,
}

impl AllocationTable {
    pub fn zeros(k: usize) -> Self {
        AllocationTable {
            counts: vec![[[0; 2]; 2]; k],
        }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, m: usize, stage: Stage, arm: Arm) -> usize {
        self.counts[m][stage.index()][arm.index()]
    }

    pub fn set(&mut self, m: usize, stage: Stage, arm: Arm, n: usize) {
        self.counts[m][stage.index()][arm.index()] = n;
    }

    /// Both arms of one (subpopulation, stage) cell.
    pub fn cell_total(&self, m: usize, stage: Stage) -> usize {
        let c = self.counts[m][stage.index()];
        c[0] + c[1]
    }

    /// Patients in `scope` at `stage`, or over both stages when `None`.
    pub fn scope_count(&self, scope: &IndexSet, stage: Option<Stage>) -> usize {
        scope
            .iter()
            .map(|m| match stage {
                Some(s) => self.cell_total(m, s),
                None => self.cell_total(m, Stage::One) + self.cell_total(m, Stage::Two),
            })
            .sum()
    }

    pub fn stage_total(&self, stage: Stage) -> usize {
        (0..self.k()).map(|m| self.cell_total(m, stage)).sum()
    }

    pub fn total(&self) -> usize {
        self.stage_total(Stage::One) + self.stage_total(Stage::Two)
    }
}

/// Largest-remainder apportionment of `total` by non-negative `weights`
/// (normalized internally); ties go to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights
        .iter()
        .map(|w| {
            let q = total as f64 * w / sum;
            // snap representation noise such as 28.999999999999996
            if (q - q.round()).abs() < 1e-9 {
                q.round()
            } else {
                q
            }
        })
        .collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps lower indices first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra)
    });
    for &m in order.iter().take(total.saturating_sub(assigned)) {
        out[m] += 1;
    }
    out
}

fn split_arms(total: usize) -> (usize, usize) {
    // (control, treatment); an odd patient goes to treatment
    (total / 2, total - total / 2)
}

/// Stage-1 counts for all subpopulations and stage-2 counts for `selected`.
pub fn allocate(
    spec: &PopulationSpec,
    design: &DesignSpec,
    selected: &IndexSet,
) -> Result<AllocationTable> {
    let k = spec.k();
    if selected.iter().any(|m| m >= k) {
        return Err(Error::ShapeError(format!(
            "selected set {selected} outside 1..={k}"
        )));
    }
    let mut table = AllocationTable::zeros(k);

    let stage1 = largest_remainder(design.n1, spec.prevalences());
    for (m, &n) in stage1.iter().enumerate() {
        fill_cell(&mut table, m, Stage::One, n)?;
    }

    if !selected.is_empty() {
        let weights: Vec<f64> = selected.iter().map(|m| spec.prevalence(m)).collect();
        let stage2 = largest_remainder(design.n2, &weights);
        for (m, n) in selected.iter().zip(stage2) {
            fill_cell(&mut table, m, Stage::Two, n)?;
        }
    }
    Ok(table)
}

fn fill_cell(table: &mut AllocationTable, m: usize, stage: Stage, n: usize) -> Result<()> {
    let (control, treatment) = split_arms(n);
    if control == 0 {
        return Err(Error::InfeasibleAllocation(format!(
            "subpopulation {} receives {n} patient(s) in stage {}",
            m + 1,
            stage.index() + 1
        )));
    }
    table.set(m, stage, Arm::Control, control);
    table.set(m, stage, Arm::Treatment, treatment);
    Ok(())
}

/// `v²` of the mean difference over `scope`: `4σ² / count`, using the
/// realized count at `stage` or pooled over both stages.
pub fn mean_diff_variance(
    counts: &AllocationTable,
    sigma2: f64,
    scope: &IndexSet,
    stage: Option<Stage>,
) -> Result<f64> {
    let n = counts.scope_count(scope, stage);
    if n == 0 {
        return Err(Error::EmptyCell(format!("no patients in {scope}")));
    }
    Ok(4.0 * sigma2 / n as f64)
}

/// `r_E = n1 p_E / n2`; also the ratio for every `I ⊆ E`.
pub fn stage_ratio(spec: &PopulationSpec, design: &DesignSpec, selected: &IndexSet) -> Result<f64> {
    let p = combined_prevalence(spec, selected)?;
    Ok(design.n1 as f64 * p / design.n2 as f64)
}
