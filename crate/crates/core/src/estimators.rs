//! Point estimators for the treatment effect in a selected (sub)population:
//! the pooled two-stage MLE, the UMVCUE conditional on the interim
//! selection, and its plug-in variant for unknown variance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal::truncnorm_correction;
use crate::population::{AllocationTable, Arm, DesignSpec, IndexSet, PopulationSpec, Stage};
use crate::selection::{ExtendedInterval, SelectionOutcome, SelectionRule, Stage1Summary};

/// Sufficient statistics of one (subpopulation, stage, arm) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub count: usize,
    pub mean: f64,
    /// Sum of squared deviations from `mean`; absent for mean-only input.
    pub ssd: Option<f64>,
}

impl CellSummary {
    /// Pools two cells (parallel-variance update).
    pub fn merge(self, other: CellSummary) -> CellSummary {
        if self.count == 0 {
            return other;
        }
        if other.count == 0 {
            return self;
        }
        let n = (self.count + other.count) as f64;
        let (na, nb) = (self.count as f64, other.count as f64);
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * nb / n;
        let ssd = match (self.ssd, other.ssd) {
            (Some(a), Some(b)) => Some(a + b + delta * delta * na * nb / n),
            _ => None,
        };
        CellSummary {
            count: self.count + other.count,
            mean,
            ssd,
        }
    }
}

/// One patient: subpopulation (zero-based), stage, arm and outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatientRecord {
    pub m: usize,
    pub stage: Stage,
    pub arm: Arm,
    pub y: f64,
}

/// Trial data held as per-cell sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    k: usize,
    cells: BTreeMap<(usize, Stage, Arm), CellSummary>,
}

impl TrialData {
    pub fn new(k: usize) -> Self {
        TrialData {
            k,
            cells: BTreeMap::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn insert(&mut self, m: usize, stage: Stage, arm: Arm, cell: CellSummary) -> Result<()> {
        if m >= self.k {
            return Err(Error::ShapeError(format!(
                "subpopulation {} outside 1..={}",
                m + 1,
                self.k
            )));
        }
        if cell.count == 0 {
            return Ok(());
        }
        if !cell.mean.is_finite() || cell.ssd.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "non-finite or negative summary in subpopulation {} stage {}",
                m + 1,
                stage.index() + 1
            )));
        }
        if self.cells.insert((m, stage, arm), cell).is_some() {
            return Err(Error::Config(format!(
                "duplicate cell for subpopulation {}, stage {}, arm {}",
                m + 1,
                stage.index() + 1,
                arm.index()
            )));
        }
        Ok(())
    }

    /// Builds cell summaries with a two-pass mean / deviation computation.
    pub fn from_records(k: usize, records: &[PatientRecord]) -> Result<Self> {
        let mut groups: BTreeMap<(usize, Stage, Arm), Vec<f64>> = BTreeMap::new();
        for r in records {
            if r.m >= k {
                return Err(Error::ShapeError(format!(
                    "record subpopulation {} outside 1..={k}",
                    r.m + 1
                )));
            }
            if !r.y.is_finite() {
                return Err(Error::Config("non-finite outcome".into()));
            }
            groups.entry((r.m, r.stage, r.arm)).or_default().push(r.y);
        }
        let mut data = TrialData::new(k);
        for ((m, stage, arm), ys) in groups {
            data.insert(m, stage, arm, summarize(&ys))?;
        }
        Ok(data)
    }

    /// Mean-difference input for one (subpopulation, stage): `n` patients
    /// split as evenly as possible (treatment gets an odd patient), the
    /// treatment mean set to `mean_diff` and the control mean to zero.
    pub fn insert_mean_difference(
        &mut self,
        m: usize,
        stage: Stage,
        n: usize,
        mean_diff: f64,
    ) -> Result<()> {
        let control = n / 2;
        let treatment = n - control;
        if control == 0 {
            return Err(Error::EmptyCell(format!(
                "subpopulation {} stage {} has {n} patient(s)",
                m + 1,
                stage.index() + 1
            )));
        }
        self.insert(
            m,
            stage,
            Arm::Treatment,
            CellSummary {
                count: treatment,
                mean: mean_diff,
                ssd: None,
            },
        )?;
        self.insert(
            m,
            stage,
            Arm::Control,
            CellSummary {
                count: control,
                mean: 0.0,
                ssd: None,
            },
        )
    }

    pub fn cell(&self, m: usize, stage: Stage, arm: Arm) -> Option<&CellSummary> {
        self.cells.get(&(m, stage, arm))
    }

    pub fn has_stage(&self, m: usize, stage: Stage) -> bool {
        Arm::BOTH.iter().any(|&a| self.cell(m, stage, a).is_some())
    }

    /// Realized counts.
    pub fn allocation(&self) -> AllocationTable {
        let mut table = AllocationTable::zeros(self.k);
        for (&(m, stage, arm), cell) in &self.cells {
            table.set(m, stage, arm, cell.count);
        }
        table
    }

    /// Subpopulations with stage-2 data.
    pub fn stage2_members(&self) -> IndexSet {
        let members = (0..self.k)
            .filter(|&m| self.has_stage(m, Stage::Two))
            .collect();
        IndexSet::new(members, self.k).expect("indices below k")
    }

    /// Stage-1 mean differences for the interim rule.
    pub fn stage1_summary(&self) -> Result<Stage1Summary> {
        let mut x1 = Vec::with_capacity(self.k);
        let mut counts = Vec::with_capacity(self.k);
        for m in 0..self.k {
            x1.push(stagewise_mean_diff(self, &IndexSet::single(m), Stage::One)?);
            counts.push(
                Arm::BOTH
                    .iter()
                    .filter_map(|&a| self.cell(m, Stage::One, a))
                    .map(|c| c.count)
                    .sum(),
            );
        }
        Stage1Summary::new(x1, counts)
    }

    fn pooled_arm(&self, scope: &IndexSet, stages: &[Stage], arm: Arm) -> CellSummary {
        let mut acc = CellSummary {
            count: 0,
            mean: 0.0,
            ssd: Some(0.0),
        };
        for m in scope.iter() {
            for &s in stages {
                if let Some(c) = self.cell(m, s, arm) {
                    acc = acc.merge(*c);
                }
            }
        }
        acc
    }
}

fn summarize(ys: &[f64]) -> CellSummary {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let ssd = ys.iter().map(|y| (y - mean) * (y - mean)).sum();
    CellSummary {
        count: ys.len(),
        mean,
        ssd: Some(ssd),
    }
}

fn arm_difference(data: &TrialData, scope: &IndexSet, stages: &[Stage], what: &str) -> Result<f64> {
    let t = data.pooled_arm(scope, stages, Arm::Treatment);
    let c = data.pooled_arm(scope, stages, Arm::Control);
    if t.count == 0 || c.count == 0 {
        return Err(Error::EmptyCell(format!("empty arm for {what} in {scope}")));
    }
    Ok(t.mean - c.mean)
}

/// `X_{I,j}`: treatment minus control mean over stage-`stage` patients in
/// `S_I`. Every member of `I` must have been enrolled at that stage.
pub fn stagewise_mean_diff(data: &TrialData, target: &IndexSet, stage: Stage) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    for m in target.iter() {
        for arm in Arm::BOTH {
            if data.cell(m, stage, arm).is_none() {
                return Err(Error::EmptyCell(format!(
                    "subpopulation {} has no {} patients in stage {}",
                    m + 1,
                    if arm == Arm::Treatment {
                        "treatment"
                    } else {
                        "control"
                    },
                    stage.index() + 1
                )));
            }
        }
    }
    arm_difference(data, target, &[stage], "stage-wise mean")
}

/// `X_I`: patient-level pooled mean difference over both stages. Members
/// without stage-2 data contribute their stage-1 patients only.
pub fn pooled_mle(data: &TrialData, target: &IndexSet) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    arm_difference(data, target, &Stage::BOTH, "pooled MLE")
}

/// Standard deviation `v = √(4σ²/n)` of a mean difference over `n` patients.
pub fn pooled_sd(sigma2: f64, count: usize) -> f64 {
    (4.0 * sigma2 / count as f64).sqrt()
}

/// Conditionally unbiased estimate
/// `X + v√r · (φ(z_U) − φ(z_L)) / (Φ(z_U) − Φ(z_L))` with
/// `z_B = √r (B − X) / v`.
pub fn umvcue(x_pooled: f64, bounds: ExtendedInterval, v: f64, r: f64) -> Result<f64> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Config(format!(
            "standard deviation must be positive, got {v}"
        )));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Config(format!(
            "stage ratio must be positive, got {r}"
        )));
    }
    if bounds.is_unbounded() {
        return Ok(x_pooled);
    }
    let scale = r.sqrt() / v;
    let z_lower = scale * (bounds.lower() - x_pooled);
    let z_upper = scale * (bounds.upper() - x_pooled);
    let correction = truncnorm_correction(z_lower, z_upper)?;
    Ok(x_pooled + v * r.sqrt() * correction)
}

/// Degrees of freedom for the pooled within-cell variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PiceDf {
    /// `Σ_{m∈E,a} (n_{ma} − 1)`, matching the cells that are summed.
    #[default]
    Pooled,
    /// `n1 + n2 − 2k` regardless of which cells are summed.
    PaperLiteral,
}

/// `σ̂² = Σ_{m∈E,a} SSW_{ma} / df`, with `SSW` pooled over both stages.
pub fn pice_sigma_hat(
    data: &TrialData,
    selected: &IndexSet,
    k: usize,
    df_mode: PiceDf,
) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let mut ssw = 0.0;
    let mut df_pooled = 0usize;
    for m in selected.iter() {
        for arm in Arm::BOTH {
            let cell = data.pooled_arm(&IndexSet::single(m), &Stage::BOTH, arm);
            if cell.count < 2 {
                return Err(Error::InsufficientData(format!(
                    "subpopulation {} arm {} has {} patient(s); at least 2 are needed",
                    m + 1,
                    arm.index(),
                    cell.count
                )));
            }
            let ssd = cell.ssd.ok_or_else(|| {
                Error::InsufficientData(
                    "within-cell deviations are required to estimate the variance".into(),
                )
            })?;
            ssw += ssd;
            df_pooled += cell.count - 1;
        }
    }
    let df = match df_mode {
        PiceDf::Pooled => df_pooled as i64,
        PiceDf::PaperLiteral => data.allocation().total() as i64 - 2 * k as i64,
    };
    if df <= 0 {
        return Err(Error::InsufficientData(format!("{df} degrees of freedom")));
    }
    Ok(ssw / df as f64)
}

/// The UMVCUE with `σ²` replaced by `sigma_hat2`; `count` is the number of
/// patients behind `x_pooled`.
pub fn pice(
    x_pooled: f64,
    bounds: ExtendedInterval,
    count: usize,
    r: f64,
    sigma_hat2: f64,
) -> Result<f64> {
    if count == 0 {
        return Err(Error::EmptyCell(
            "no patients behind the pooled estimate".into(),
        ));
    }
    umvcue(x_pooled, bounds, pooled_sd(sigma_hat2, count), r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaSource {
    Known,
    PlugIn,
}

/// Estimates for one target population.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub target: IndexSet,
    pub mle: f64,
    /// Present when the variance is known.
    pub umvcue: Option<f64>,
    /// Present when the variance is estimated.
    pub pice: Option<f64>,
    pub bounds_used: ExtendedInterval,
    /// `v²` of the pooled estimate under the variance actually used.
    pub v_pooled: f64,
    pub r: f64,
    pub sigma2_used: f64,
    pub sigma_source: SigmaSource,
}

impl EstimateReport {
    /// The conditional estimate, whichever variant was computed.
    pub fn conditional(&self) -> f64 {
        self.umvcue
            .or(self.pice)
            .expect("one conditional estimate is always set")
    }
}

/// Runs the full estimation workflow after an interim selection: per target,
/// the MLE plus the UMVCUE (known `σ²`) or PiCE (estimated `σ²`).
///
/// Futility stops fail as a whole; target-specific failures (a target
/// outside the selected set, a non-interval event) are returned per entry.
pub fn estimate_report(
    data: &TrialData,
    spec: &PopulationSpec,
    design: &DesignSpec,
    rule: &dyn SelectionRule,
    outcome: &SelectionOutcome,
    targets: &[IndexSet],
    df_mode: PiceDf,
) -> Result<Vec<Result<EstimateReport>>> {
    let selected = &outcome.selected;
    if selected.is_empty() {
        return Err(Error::NoEstimateAfterStop);
    }
    if data.k() != spec.k() {
        return Err(Error::ShapeError(format!(
            "data has k = {}, population has k = {}",
            data.k(),
            spec.k()
        )));
    }
    let with_stage2 = data.stage2_members();
    if !with_stage2.is_subset_of(selected) {
        return Err(Error::Config(format!(
            "stage-2 data for {with_stage2} but only {selected} was selected"
        )));
    }
    let s1 = data.stage1_summary()?;
    let (sigma2, source) = match design.sigma2 {
        Some(s2) => (s2, SigmaSource::Known),
        None => (
            pice_sigma_hat(data, selected, spec.k(), df_mode)?,
            SigmaSource::PlugIn,
        ),
    };
    let counts = data.allocation();

    Ok(targets
        .iter()
        .map(|target| {
            let bounds = rule.bounds_for_target(spec, outcome, target, &s1)?;
            let mle = pooled_mle(data, target)?;
            let n1 = counts.scope_count(target, Some(Stage::One));
            let n2 = counts.scope_count(target, Some(Stage::Two));
            if n2 == 0 || n1 == 0 {
                return Err(Error::EmptyCell(format!(
                    "no stage-{} patients in {target}",
                    if n1 == 0 { 1 } else { 2 }
                )));
            }
            let r = n1 as f64 / n2 as f64;
            let n = n1 + n2;
            let v_pooled = 4.0 * sigma2 / n as f64;
            let (umv, pic) = match source {
                SigmaSource::Known => (Some(umvcue(mle, bounds, pooled_sd(sigma2, n), r)?), None),
                SigmaSource::PlugIn => (None, Some(pice(mle, bounds, n, r, sigma2)?)),
            };
            Ok(EstimateReport {
                target: target.clone(),
                mle,
                umvcue: umv,
                pice: pic,
                bounds_used: bounds,
                v_pooled,
                r,
                sigma2_used: sigma2,
                sigma_source: source,
            })
        })
        .collect())
}
