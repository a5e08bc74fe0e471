use enrich_est::estimators::{pice_sigma_hat, PiceDf};
use enrich_est::oracle::{mc_conditional_bias, unbiasedness_violations};
use enrich_est::population::{IndexSet, PopulationSpec};
use enrich_est::selection::{apply_rule, RuleConfig, RuleKind, SelectionRule, Stage1Summary};
use enrich_est::simulation::{
    generate_trial, selected_estimates, Estimator, GenerationMode, RngPolicy, ScenarioResult,
    SimulationOptions,
};
use enrich_est::verify::{d3_setup, two_group_setup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Critical value at level 0.001.
fn ks_critical(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    1.949 * ((n + m) / (n * m)).sqrt()
}

struct Draws {
    stage1_full: Vec<f64>,
    sigma_hat: Vec<f64>,
    by_estimator: [Vec<f64>; 3],
    selections: Vec<IndexSet>,
}

fn draws(mode: GenerationMode, seed: u64, reps: u64) -> Draws {
    let (spec, design, scenario) = d3_setup();
    let rule = design.rule.build().unwrap();
    let policy = RngPolicy::new(seed);
    let mut out = Draws {
        stage1_full: Vec::new(),
        sigma_hat: Vec::new(),
        by_estimator: Default::default(),
        selections: Vec::new(),
    };
    for i in 0..reps {
        let (data, outcome) = generate_trial(
            &scenario,
            &spec,
            &design,
            &rule,
            &mut policy.stream(i),
            mode,
        )
        .unwrap();
        let s1 = data.stage1_summary().unwrap();
        out.stage1_full
            .push(s1.aggregate(&spec, &IndexSet::full(4)).unwrap());
        out.sigma_hat
            .push(pice_sigma_hat(&data, &outcome.selected, 4, PiceDf::Pooled).unwrap());
        let est = selected_estimates(&data, &outcome, scenario.sigma2, PiceDf::Pooled)
            .unwrap()
            .unwrap();
        let truth = scenario.effects[outcome.selected.members()[0]];
        for (v, e) in out.by_estimator.iter_mut().zip(est) {
            v.push(e - truth);
        }
        out.selections.push(outcome.selected);
    }
    out
}

#[test]
fn generation_modes_agree_in_distribution() {
    let reps = 20_000;
    let a = draws(GenerationMode::PerPatient, 101, reps);
    let b = draws(GenerationMode::SummaryFast, 202, reps);
    let crit = ks_critical(reps as usize, reps as usize);
    let pairs = [
        ("stage-1 aggregate", &a.stage1_full, &b.stage1_full),
        ("sigma hat", &a.sigma_hat, &b.sigma_hat),
        ("mle error", &a.by_estimator[0], &b.by_estimator[0]),
        ("umvcue error", &a.by_estimator[1], &b.by_estimator[1]),
        ("pice error", &a.by_estimator[2], &b.by_estimator[2]),
    ];
    for (name, x, y) in pairs {
        let d = ks_statistic(x.clone(), y.clone());
        assert!(d < crit, "{name}: D = {d:.4}, critical {crit:.4}");
    }
    for w in 0..4 {
        let count =
            |s: &[IndexSet]| s.iter().filter(|e| e.members() == [w]).count() as f64 / reps as f64;
        let (p, q) = (count(&a.selections), count(&b.selections));
        let se = (p * (1.0 - p) * 2.0 / reps as f64).sqrt();
        assert!(
            (p - q).abs() < 4.0 * se + 1e-9,
            "winner {}: {p} vs {q}",
            w + 1
        );
    }
}

#[test]
fn ks_statistic_detects_a_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..5000)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let b: Vec<f64> = (0..5000)
        .map(|_| 0.2 + rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    assert!(ks_statistic(a.clone(), b) > ks_critical(5000, 5000));
    assert_eq!(ks_statistic(a.clone(), a), 0.0);
}

fn two_group_results(reps: usize, seed: u64) -> Vec<ScenarioResult> {
    let (spec, design, scenarios) = two_group_setup();
    let rule = design.rule.build().unwrap();
    scenarios
        .iter()
        .map(|s| {
            mc_conditional_bias(
                s,
                &spec,
                &design,
                &rule,
                reps,
                seed,
                SimulationOptions::default(),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn two_group_cells_are_unbiased_and_mle_signs_follow_selection() {
    let results = two_group_results(100_000, 42);
    for res in &results {
        let total: usize = res.cells.iter().map(|c| c.count).sum();
        assert_eq!(total, res.reps);
        let v = unbiasedness_violations(res, Estimator::Umvcue, 1000, 3.0);
        assert!(v.is_empty(), "{v:?}");
    }
    let mle = |s: &str, cell: &str| {
        let res = results.iter().find(|r| r.scenario == s).unwrap();
        res.cell(cell).unwrap().stat(Estimator::Mle).unwrap().bias
    };
    for cell in ["F", "1", "2"] {
        assert!(mle("4", cell) > 0.0, "scenario 4 {cell}");
    }
    assert!(mle("1", "F") > 0.0);
    assert!(mle("1", "1") < 0.0 && mle("1", "2") < 0.0);
}

#[test]
fn summary_fast_mode_is_unbiased_under_d2() {
    let spec = PopulationSpec::new(vec![0.2, 0.3, 0.5], None).unwrap();
    let design = enrich_est::population::DesignSpec::new(
        120,
        120,
        Some(0.5),
        RuleConfig::new(RuleKind::D2, Some(0.15)),
    )
    .unwrap();
    let scenario = enrich_est::simulation::Scenario::new("d2", vec![0.4, 0.2, 0.05], 0.5);
    let rule = design.rule.build().unwrap();
    let options = SimulationOptions {
        mode: GenerationMode::SummaryFast,
        pice_df: PiceDf::Pooled,
    };
    let res = mc_conditional_bias(&scenario, &spec, &design, &rule, 100_000, 5, options).unwrap();
    let v = unbiasedness_violations(&res, Estimator::Umvcue, 1000, 3.0);
    assert!(v.is_empty(), "{v:?}");
    assert_eq!(res.cells.len(), 4);
}

#[test]
fn d3_winner_attains_maximum_and_lower_bound_is_runner_up() {
    let spec = PopulationSpec::new(vec![0.1, 0.2, 0.3, 0.4], None).unwrap();
    let rule = RuleConfig::new(RuleKind::D3, None).build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..20_000 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let o = apply_rule(&rule, &spec, &Stage1Summary::from_means(x.clone())).unwrap();
        let w = o.selected.members()[0];
        assert!(x.iter().all(|&v| v <= x[w]));
        let mut sorted = x.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(o.bounds.unwrap().lower(), sorted[1]);
        seen.insert(w);
    }
    assert_eq!(seen.len(), 4);
}

#[test]
fn grid_covers_every_outcome_of_each_rule() {
    let grid: Vec<f64> = (-6..=6).map(|i| i as f64 * 0.1).collect();
    for (kind, delta, k) in [
        (RuleKind::D1, Some(0.1), 2),
        (RuleKind::D2, Some(0.1), 3),
        (RuleKind::D3, None, 3),
    ] {
        let spec = PopulationSpec::new(vec![1.0 / k as f64; k], None).unwrap();
        let rule = RuleConfig::new(kind, delta).build().unwrap();
        let mut seen = std::collections::BTreeSet::new();
        let mut idx = vec![0usize; k];
        loop {
            let x: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
            seen.insert(rule.select(&spec, &Stage1Summary::from_means(x)).unwrap());
            let mut d = 0;
            while d < k && idx[d] + 1 == grid.len() {
                idx[d] = 0;
                d += 1;
            }
            if d == k {
                break;
            }
            idx[d] += 1;
        }
        let image: std::collections::BTreeSet<IndexSet> =
            rule.image(k).unwrap().into_iter().collect();
        assert_eq!(seen, image, "{}", rule.id());
    }
}
