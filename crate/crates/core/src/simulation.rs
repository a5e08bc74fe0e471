//! Monte Carlo simulation of two-stage enrichment trials: selection
//! proportions and conditional bias / MSE of the MLE, UMVCUE and PiCE.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    pice, pice_sigma_hat, pooled_mle, pooled_sd, umvcue, CellSummary, PiceDf, TrialData,
};
use crate::population::{
    aggregate_effect, allocate, Arm, DesignSpec, IndexSet, PopulationSpec, Stage,
};
use crate::selection::{apply_rule, SelectionOutcome, SelectionRule};

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    /// Treatment minus control mean per subpopulation.
    pub effects: Vec<f64>,
    /// Control-arm means; zero by default.
    pub control_means: Vec<f64>,
    pub sigma2: f64,
}

impl Scenario {
    pub fn new(name: impl Into<String>, effects: Vec<f64>, sigma2: f64) -> Self {
        let k = effects.len();
        Scenario {
            name: name.into(),
            effects,
            control_means: vec![0.0; k],
            sigma2,
        }
    }

    pub fn validate_for(&self, spec: &PopulationSpec) -> Result<()> {
        let k = spec.k();
        if self.effects.len() != k || self.control_means.len() != k {
            return Err(Error::ShapeError(format!(
                "scenario {:?} has {} effects and {} control means for k = {k}",
                self.name,
                self.effects.len(),
                self.control_means.len()
            )));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Config(format!(
                "scenario {:?}: sigma2 must be positive",
                self.name
            )));
        }
        if self
            .effects
            .iter()
            .chain(&self.control_means)
            .any(|x| !x.is_finite())
        {
            return Err(Error::Config(format!(
                "scenario {:?}: non-finite mean",
                self.name
            )));
        }
        Ok(())
    }

    fn mean(&self, m: usize, arm: Arm) -> f64 {
        match arm {
            Arm::Control => self.control_means[m],
            Arm::Treatment => self.control_means[m] + self.effects[m],
        }
    }
}

/// Replication `i` draws from ChaCha8 stream `i` of the master seed, so a
/// replication's data depend only on `(master_seed, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngPolicy {
    pub master_seed: u64,
}

impl RngPolicy {
    pub fn new(master_seed: u64) -> Self {
        RngPolicy { master_seed }
    }

    pub fn stream(&self, replication: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(replication);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationMode {
    /// Every patient outcome is drawn.
    #[default]
    PerPatient,
    /// Cell means and deviation sums are drawn from their exact
    /// distributions.
    SummaryFast,
}

impl std::str::FromStr for GenerationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-patient" => Ok(GenerationMode::PerPatient),
            "summary-fast" => Ok(GenerationMode::SummaryFast),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?}; expected per-patient or summary-fast"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Estimator {
    Mle,
    Umvcue,
    Pice,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Mle, Estimator::Umvcue, Estimator::Pice];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Mle => "MLE",
            Estimator::Umvcue => "UMVCUE",
            Estimator::Pice => "PiCE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorStats {
    pub bias: f64,
    pub mse: f64,
    /// Monte Carlo standard error of `bias`; absent with one hit.
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub selection: IndexSet,
    pub label: String,
    pub count: usize,
    pub proportion: f64,
    /// `Δ_E`; absent for the stop cell.
    pub truth: Option<f64>,
    /// Indexed like [`Estimator::ALL`]; absent for the stop cell and for
    /// cells without hits.
    pub stats: Option<[EstimatorStats; 3]>,
}

impl CellResult {
    pub fn stat(&self, e: Estimator) -> Option<EstimatorStats> {
        self.stats.map(|s| s[e as usize])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub scenario: String,
    pub effects: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    pub rule_id: String,
    pub mode: GenerationMode,
    pub cells: Vec<CellResult>,
}

impl ScenarioResult {
    pub fn cell(&self, label: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.label == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimulationOptions {
    pub mode: GenerationMode,
    pub pice_df: PiceDf,
}

fn draw_cell<R: rand::Rng>(
    rng: &mut R,
    n: usize,
    mean: f64,
    sd: f64,
    mode: GenerationMode,
) -> CellSummary {
    match mode {
        GenerationMode::PerPatient => {
            // Welford
            let mut mu = 0.0;
            let mut m2 = 0.0;
            for i in 0..n {
                let z: f64 = StandardNormal.sample(rng);
                let y = mean + sd * z;
                let d = y - mu;
                mu += d / (i + 1) as f64;
                m2 += d * (y - mu);
            }
            CellSummary {
                count: n,
                mean: mu,
                ssd: Some(m2),
            }
        }
        GenerationMode::SummaryFast => {
            let z: f64 = StandardNormal.sample(rng);
            let mu = mean + sd / (n as f64).sqrt() * z;
            let ssd = if n > 1 {
                let chi: f64 = ChiSquared::new((n - 1) as f64)
                    .expect("positive degrees of freedom")
                    .sample(rng);
                sd * sd * chi
            } else {
                0.0
            };
            CellSummary {
                count: n,
                mean: mu,
                ssd: Some(ssd),
            }
        }
    }
}

/// Simulates one trial: stage 1 in every subpopulation, the interim rule,
/// then stage 2 in the selected subpopulations only.
pub fn generate_trial<R: rand::Rng>(
    scenario: &Scenario,
    spec: &PopulationSpec,
    design: &DesignSpec,
    rule: &dyn SelectionRule,
    rng: &mut R,
    mode: GenerationMode,
) -> Result<(TrialData, SelectionOutcome)> {
    let k = spec.k();
    let sd = scenario.sigma2.sqrt();
    let mut data = TrialData::new(k);
    let stage1 = allocate(spec, design, &IndexSet::empty())?;
    for m in 0..k {
        for arm in Arm::BOTH {
            let n = stage1.count(m, Stage::One, arm);
            let cell = draw_cell(rng, n, scenario.mean(m, arm), sd, mode);
            data.insert(m, Stage::One, arm, cell)?;
        }
    }
    let outcome = apply_rule(rule, spec, &data.stage1_summary()?)?;
    if !outcome.is_stop() {
        let counts = allocate(spec, design, &outcome.selected)?;
        for m in outcome.selected.iter() {
            for arm in Arm::BOTH {
                let n = counts.count(m, Stage::Two, arm);
                let cell = draw_cell(rng, n, scenario.mean(m, arm), sd, mode);
                data.insert(m, Stage::Two, arm, cell)?;
            }
        }
    }
    Ok((data, outcome))
}

/// MLE, UMVCUE (true variance) and PiCE for the selected population.
pub fn selected_estimates(
    data: &TrialData,
    outcome: &SelectionOutcome,
    sigma2: f64,
    pice_df: PiceDf,
) -> Result<Option<[f64; 3]>> {
    let selected = &outcome.selected;
    let Some(bounds) = outcome.bounds else {
        return Ok(None);
    };
    let counts = data.allocation();
    let n1 = counts.scope_count(selected, Some(Stage::One));
    let n2 = counts.scope_count(selected, Some(Stage::Two));
    let r = n1 as f64 / n2 as f64;
    let n = n1 + n2;
    let mle = pooled_mle(data, selected)?;
    let u = umvcue(mle, bounds, pooled_sd(sigma2, n), r)?;
    let sigma_hat2 = pice_sigma_hat(data, selected, data.k(), pice_df)?;
    let p = pice(mle, bounds, n, r, sigma_hat2)?;
    Ok(Some([mle, u, p]))
}

#[derive(Default, Clone, Copy)]
struct Running {
    n: usize,
    mean: f64,
    m2: f64,
    sq: f64,
}

impl Running {
    fn push(&mut self, err: f64) {
        self.n += 1;
        let d = err - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (err - self.mean);
        self.sq += (err * err - self.sq) / self.n as f64;
    }

    fn stats(&self) -> EstimatorStats {
        let se = (self.n > 1).then(|| (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt());
        EstimatorStats {
            bias: self.mean,
            mse: self.sq,
            se,
        }
    }
}

fn cell_order(a: &IndexSet, b: &IndexSet) -> std::cmp::Ordering {
    // larger sets first, the stop cell last
    match (a.is_empty(), b.is_empty()) {
        (true, false) => std::cmp::Ordering::Greater,
        (false, true) => std::cmp::Ordering::Less,
        _ => b
            .len()
            .cmp(&a.len())
            .then_with(|| a.members().cmp(b.members())),
    }
}

/// Runs `reps` replications in parallel. Results are collected in
/// replication order and reduced sequentially, so they do not depend on the
/// number of worker threads.
pub fn run_scenario(
    scenario: &Scenario,
    spec: &PopulationSpec,
    design: &DesignSpec,
    rule: &dyn SelectionRule,
    reps: usize,
    rng: RngPolicy,
    options: SimulationOptions,
) -> Result<ScenarioResult> {
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    scenario.validate_for(spec)?;
    design.validate_for(spec)?;
    let k = spec.k();
    let truth_spec = spec.with_effects(scenario.effects.clone())?;

    let draws: Vec<(IndexSet, Option<[f64; 3]>)> = (0..reps as u64)
        .into_par_iter()
        .map(|i| {
            let mut stream = rng.stream(i);
            let (data, outcome) =
                generate_trial(scenario, spec, design, rule, &mut stream, options.mode)?;
            let est = selected_estimates(&data, &outcome, scenario.sigma2, options.pice_df)?;
            Ok((outcome.selected, est))
        })
        .collect::<Result<_>>()?;

    let mut acc: BTreeMap<Vec<usize>, (usize, [Running; 3])> = BTreeMap::new();
    let mut truths: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for (selected, est) in &draws {
        let key = selected.members().to_vec();
        let entry = acc.entry(key.clone()).or_default();
        entry.0 += 1;
        if let Some(values) = est {
            let truth = match truths.get(&key) {
                Some(t) => *t,
                None => {
                    let t = aggregate_effect(&truth_spec, selected)?;
                    truths.insert(key, t);
                    t
                }
            };
            for (run, v) in entry.1.iter_mut().zip(values) {
                run.push(v - truth);
            }
        }
    }

    let mut selections: Vec<IndexSet> = rule.image(k).unwrap_or_default();
    for key in acc.keys() {
        let set = IndexSet::new(key.clone(), k)?;
        if !selections.contains(&set) {
            selections.push(set);
        }
    }
    if rule.image(k).is_none() {
        selections.sort_by(cell_order);
    }

    let cells = selections
        .into_iter()
        .map(|selection| {
            let (count, runs) = acc.get(selection.members()).copied().unwrap_or_default();
            let truth = if selection.is_empty() {
                None
            } else {
                Some(aggregate_effect(&truth_spec, &selection)?)
            };
            let stats = (count > 0 && !selection.is_empty())
                .then(|| [runs[0].stats(), runs[1].stats(), runs[2].stats()]);
            Ok(CellResult {
                label: selection.label(k),
                selection,
                count,
                proportion: count as f64 / reps as f64,
                truth,
                stats,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ScenarioResult {
        scenario: scenario.name.clone(),
        effects: scenario.effects.clone(),
        reps,
        seed: rng.master_seed,
        rule_id: rule.id().to_string(),
        mode: options.mode,
        cells,
    })
}

/// One CSV row: a (scenario, selection, estimator) triple. The stop cell
/// has a single row with estimator `-` and empty statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub scenario: String,
    pub cell: String,
    pub estimator: String,
    pub proportion: f64,
    pub bias_e3: Option<f64>,
    pub mse_e3: Option<f64>,
    pub se_e3: Option<f64>,
    pub n_cell: usize,
}

pub fn csv_rows(results: &[ScenarioResult]) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for res in results {
        for cell in &res.cells {
            match cell.stats {
                Some(stats) => {
                    for e in Estimator::ALL {
                        let s = stats[e as usize];
                        rows.push(CsvRow {
                            scenario: res.scenario.clone(),
                            cell: cell.label.clone(),
                            estimator: e.name().to_string(),
                            proportion: cell.proportion,
                            bias_e3: Some(s.bias * 1e3),
                            mse_e3: Some(s.mse * 1e3),
                            se_e3: s.se.map(|x| x * 1e3),
                            n_cell: cell.count,
                        });
                    }
                }
                None => rows.push(CsvRow {
                    scenario: res.scenario.clone(),
                    cell: cell.label.clone(),
                    estimator: "-".to_string(),
                    proportion: cell.proportion,
                    bias_e3: None,
                    mse_e3: None,
                    se_e3: None,
                    n_cell: cell.count,
                }),
            }
        }
    }
    rows
}

pub fn write_csv<W: io::Write>(results: &[ScenarioResult], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in csv_rows(results) {
        w.serialize(row).map_err(io::Error::other)?;
    }
    w.flush()
}

pub fn read_csv<R: io::Read>(input: R) -> io::Result<Vec<CsvRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(io::Error::other)
}

fn fmt_effects(effects: &[f64]) -> String {
    let parts: Vec<String> = effects.iter().map(|e| format!("{e}")).collect();
    format!("({})", parts.join(", "))
}

/// Markdown table: per scenario a selection-percentage row followed by one
/// `bias (MSE)` row per estimator, both ×10³.
pub fn bias_mse_table(results: &[ScenarioResult]) -> String {
    let columns: Vec<String> = results
        .first()
        .map(|r| r.cells.iter().map(|c| c.label.clone()).collect())
        .unwrap_or_default();
    let mut out = String::new();
    let mut header = "| Scenario | Effects | |".to_string();
    let mut rule = "|---|---|---|".to_string();
    for c in &columns {
        let _ = write!(header, " {c} |");
        rule.push_str("---:|");
    }
    out.push_str(&header);
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for res in results {
        let mut line = format!(
            "| {} | {} | Selection |",
            res.scenario,
            fmt_effects(&res.effects)
        );
        for c in &columns {
            match res.cell(c) {
                Some(cell) => {
                    let _ = write!(line, " {:.2}% |", 100.0 * cell.proportion);
                }
                None => line.push_str(" − |"),
            }
        }
        out.push_str(&line);
        out.push('\n');
        for e in Estimator::ALL {
            let mut line = format!("| | | {} |", e.name());
            for c in &columns {
                match res.cell(c).and_then(|cell| cell.stat(e)) {
                    Some(s) => {
                        let _ = write!(line, " {:.2} ({:.2}) |", s.bias * 1e3, s.mse * 1e3);
                    }
                    None => line.push_str(" − |"),
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}
