use enrich_est::estimators::{
    estimate_report, pice, pice_sigma_hat, pooled_mle, pooled_sd, stagewise_mean_diff, umvcue,
    PatientRecord, PiceDf, TrialData,
};
use enrich_est::population::{
    aggregate_effect, allocate, combined_prevalence, mean_diff_variance, stage_ratio,
    AllocationTable, Arm, DesignSpec, IndexSet, PopulationSpec, Stage,
};
use enrich_est::selection::{
    apply_rule, ExtendedInterval, RuleConfig, RuleKind, SelectionRule, Stage1Summary,
};
use proptest::prelude::*;

fn prevalences(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, k).prop_map(|w| {
        let total: f64 = w.iter().sum();
        let mut p: Vec<f64> = w.iter().map(|x| x / total).collect();
        let head: f64 = p[..p.len() - 1].iter().sum();
        let last = p.len() - 1;
        p[last] = 1.0 - head;
        p
    })
}

fn spec_and_subset() -> impl Strategy<Value = (PopulationSpec, IndexSet)> {
    (2usize..=5)
        .prop_flat_map(|k| (prevalences(k), prop::collection::vec(any::<bool>(), k)))
        .prop_filter_map("valid prevalences and non-empty subset", |(p, mask)| {
            let k = p.len();
            let spec = PopulationSpec::new(p, None).ok()?;
            let members: Vec<usize> = (0..k).filter(|&m| mask[m]).collect();
            if members.is_empty() {
                return None;
            }
            Some((spec, IndexSet::new(members, k).unwrap()))
        })
}

fn rule_for(k: usize, choice: u8) -> RuleConfig {
    match (k, choice % 3) {
        (2, 0) => RuleConfig::new(RuleKind::D1, Some(0.1)),
        (_, 1) => RuleConfig::new(RuleKind::D2, Some(0.1)),
        _ => RuleConfig::new(RuleKind::D3, None),
    }
}

/// Outcomes per (subpopulation, stage, arm), 2 to 6 patients each.
fn raw_trial(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2..7), 4 * k)
}

fn slot(m: usize, stage: Stage, arm: Arm) -> usize {
    4 * m + 2 * stage.index() + arm.index()
}

fn records(k: usize, raw: &[Vec<f64>], stage2: &IndexSet) -> Vec<PatientRecord> {
    let mut out = Vec::new();
    for m in 0..k {
        for stage in Stage::BOTH {
            if stage == Stage::Two && !stage2.contains(m) {
                continue;
            }
            for arm in Arm::BOTH {
                for &y in &raw[slot(m, stage, arm)] {
                    out.push(PatientRecord { m, stage, arm, y });
                }
            }
        }
    }
    out
}

fn mean(ys: &[f64]) -> f64 {
    ys.iter().sum::<f64>() / ys.len() as f64
}

fn brute_diff(recs: &[PatientRecord], keep: impl Fn(&PatientRecord) -> bool) -> f64 {
    let pick = |arm: Arm| -> Vec<f64> {
        recs.iter()
            .filter(|r| r.arm == arm && keep(r))
            .map(|r| r.y)
            .collect()
    };
    mean(&pick(Arm::Treatment)) - mean(&pick(Arm::Control))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn prevalence_of_target_and_complement_sum_to_one((spec, target) in spec_and_subset()) {
        let p = combined_prevalence(&spec, &target).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0 + 1e-12);
        let rest = target.complement(spec.k());
        let q = if rest.is_empty() { 0.0 } else { combined_prevalence(&spec, &rest).unwrap() };
        prop_assert!((p + q - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_effect_is_a_convex_combination(
        (spec, target) in spec_and_subset(),
        effects in prop::collection::vec(-2.0f64..2.0, 5),
    ) {
        let spec = spec.with_effects(effects[..spec.k()].to_vec()).unwrap();
        let d = aggregate_effect(&spec, &target).unwrap();
        let chosen: Vec<f64> = target.iter().map(|m| effects[m]).collect();
        let lo = chosen.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = chosen.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(d >= lo - 1e-12 && d <= hi + 1e-12);
    }

    #[test]
    fn allocation_conserves_totals((spec, selected) in spec_and_subset(), n1 in 40usize..400, n2 in 40usize..400) {
        let design = DesignSpec::new(n1, n2, Some(1.0), RuleConfig::new(RuleKind::D3, None)).unwrap();
        let Ok(table) = allocate(&spec, &design, &selected) else { return Ok(()); };
        prop_assert_eq!(table.stage_total(Stage::One), n1);
        prop_assert_eq!(table.stage_total(Stage::Two), n2);
        for m in 0..spec.k() {
            let c = table.count(m, Stage::One, Arm::Control);
            let t = table.count(m, Stage::One, Arm::Treatment);
            prop_assert!(t == c || t == c + 1);
            if !selected.contains(m) {
                prop_assert_eq!(table.cell_total(m, Stage::Two), 0);
            }
        }
        prop_assert_eq!(allocate(&spec, &design, &selected).unwrap(), table);
    }

    #[test]
    fn stage_ratio_is_shared_by_targets((spec, selected) in spec_and_subset(), n1 in 10usize..500, n2 in 10usize..500) {
        let design = DesignSpec::new(n1, n2, Some(1.0), RuleConfig::new(RuleKind::D3, None)).unwrap();
        let r = stage_ratio(&spec, &design, &selected).unwrap();
        let p = combined_prevalence(&spec, &selected).unwrap();
        prop_assert_eq!(r, n1 as f64 * p / n2 as f64);
    }

    #[test]
    fn variance_halves_when_counts_double(counts in prop::collection::vec(1usize..60, 8), sigma2 in 0.01f64..10.0) {
        let mut single = AllocationTable::zeros(2);
        let mut double = AllocationTable::zeros(2);
        let mut i = 0;
        for m in 0..2 {
            for stage in Stage::BOTH {
                for arm in Arm::BOTH {
                    single.set(m, stage, arm, counts[i]);
                    double.set(m, stage, arm, 2 * counts[i]);
                    i += 1;
                }
            }
        }
        let scope = IndexSet::full(2);
        for stage in [None, Some(Stage::One), Some(Stage::Two)] {
            let a = mean_diff_variance(&single, sigma2, &scope, stage).unwrap();
            let b = mean_diff_variance(&double, sigma2, &scope, stage).unwrap();
            prop_assert!(close(b, a / 2.0, 1e-15));
        }
    }

    #[test]
    fn pooled_and_stagewise_means_match_brute_force(
        (k, raw, mask) in (2usize..=4).prop_flat_map(|k| (Just(k), raw_trial(k), prop::collection::vec(any::<bool>(), k)))
    ) {
        let mut members: Vec<usize> = (0..k).filter(|&m| mask[m]).collect();
        if members.is_empty() { members.push(0); }
        let selected = IndexSet::new(members, k).unwrap();
        let recs = records(k, &raw, &selected);
        let data = TrialData::from_records(k, &recs).unwrap();
        for target in [selected.clone(), IndexSet::full(k), IndexSet::single(k - 1)] {
            let got = pooled_mle(&data, &target).unwrap();
            let want = brute_diff(&recs, |r| target.contains(r.m));
            prop_assert!(close(got, want, 1e-12), "{} vs {}", got, want);
            let got = stagewise_mean_diff(&data, &target, Stage::One).unwrap();
            let want = brute_diff(&recs, |r| target.contains(r.m) && r.stage == Stage::One);
            prop_assert!(close(got, want, 1e-12));
        }
    }

    #[test]
    fn sigma_hat_matches_two_pass_oracle(
        (k, raw, mask) in (2usize..=4).prop_flat_map(|k| (Just(k), raw_trial(k), prop::collection::vec(any::<bool>(), k))),
        scale in 0.1f64..10.0,
    ) {
        let mut members: Vec<usize> = (0..k).filter(|&m| mask[m]).collect();
        if members.is_empty() { members.push(k - 1); }
        let selected = IndexSet::new(members, k).unwrap();
        let recs = records(k, &raw, &selected);
        let data = TrialData::from_records(k, &recs).unwrap();
        let (mut ssw, mut df) = (0.0, 0usize);
        for m in selected.iter() {
            for arm in Arm::BOTH {
                let ys: Vec<f64> = recs.iter().filter(|r| r.m == m && r.arm == arm).map(|r| r.y).collect();
                let mu = mean(&ys);
                ssw += ys.iter().map(|y| (y - mu) * (y - mu)).sum::<f64>();
                df += ys.len() - 1;
            }
        }
        let got = pice_sigma_hat(&data, &selected, k, PiceDf::Pooled).unwrap();
        prop_assert!(close(got, ssw / df as f64, 1e-12));
        let literal = pice_sigma_hat(&data, &selected, k, PiceDf::PaperLiteral).unwrap();
        prop_assert!(close(literal, ssw / (recs.len() - 2 * k) as f64, 1e-12));
        let scaled: Vec<PatientRecord> = recs.iter().map(|r| PatientRecord { y: scale * r.y, ..*r }).collect();
        let data = TrialData::from_records(k, &scaled).unwrap();
        let again = pice_sigma_hat(&data, &selected, k, PiceDf::Pooled).unwrap();
        prop_assert!(close(again, scale * scale * got, 1e-11));
    }

    #[test]
    fn estimators_are_translation_equivariant(
        (k, raw) in (2usize..=4).prop_flat_map(|k| (Just(k), raw_trial(k))),
        shift in -5.0f64..5.0,
        delta in -1.0f64..1.0,
        known in any::<bool>(),
    ) {
        let spec = PopulationSpec::new(vec![1.0 / k as f64; k], None).unwrap();
        let design = DesignSpec::new(8 * k, 8 * k, known.then_some(1.0), RuleConfig::new(RuleKind::D3, None)).unwrap();
        let rule = design.rule.build().unwrap();
        let estimate = |recs_of: &dyn Fn(&IndexSet) -> Vec<PatientRecord>| {
            let s1 = TrialData::from_records(k, &recs_of(&IndexSet::empty())).unwrap().stage1_summary().unwrap();
            let outcome = apply_rule(&rule, &spec, &s1).unwrap();
            let data = TrialData::from_records(k, &recs_of(&outcome.selected)).unwrap();
            let targets = vec![outcome.selected.clone()];
            let reports = estimate_report(&data, &spec, &design, &rule as &dyn SelectionRule, &outcome, &targets, PiceDf::Pooled).unwrap();
            let rep = reports.into_iter().next().unwrap().unwrap();
            (outcome.selected, rep.mle, rep.conditional(), rep.bounds_used)
        };
        let base = estimate(&|e| records(k, &raw, e));
        let moved = estimate(&|e| records(k, &raw, e).into_iter().map(|r| PatientRecord { y: r.y + shift, ..r }).collect());
        prop_assert_eq!(&base.0, &moved.0);
        prop_assert!(close(base.1, moved.1, 1e-9) && close(base.2, moved.2, 1e-9));
        let treated = estimate(&|e| {
            records(k, &raw, e)
                .into_iter()
                .map(|r| if r.arm == Arm::Treatment { PatientRecord { y: r.y + delta, ..r } } else { r })
                .collect()
        });
        prop_assert_eq!(&base.0, &treated.0);
        prop_assert!(close(treated.1, base.1 + delta, 1e-9));
        prop_assert!(close(treated.2, base.2 + delta, 1e-9), "{} vs {}", treated.2, base.2 + delta);
        prop_assert!(close(treated.3.lower(), base.3.lower() + delta, 1e-9));
    }

    #[test]
    fn umvcue_is_identity_without_selection_and_monotone_in_x(
        x in -3.0f64..3.0, dx in 1e-6f64..1.0, v in 0.01f64..1.0, r in 0.1f64..10.0,
        zl in -6.0f64..6.0, width in 0.01f64..6.0,
    ) {
        prop_assert_eq!(umvcue(x, ExtendedInterval::unbounded(), v, r).unwrap(), x);
        let s = v / r.sqrt();
        for bounds in [
            ExtendedInterval::new(x + zl * s, x + (zl + width) * s).unwrap(),
            ExtendedInterval::new(x + zl * s, f64::INFINITY).unwrap(),
            ExtendedInterval::new(f64::NEG_INFINITY, x + zl * s).unwrap(),
        ] {
            let a = umvcue(x, bounds, v, r).unwrap();
            let b = umvcue(x + dx, bounds, v, r).unwrap();
            prop_assert!(b >= a - 1e-12 * (1.0 + a.abs()), "{} then {} on {}", a, b, bounds);
            prop_assert!(a.is_finite());
        }
    }

    #[test]
    fn pice_difference_respects_sensitivity_bound(
        x in -1.0f64..1.0, zl in -4.0f64..4.0, width in 0.1f64..4.0, one_sided in any::<bool>(),
        n in 20usize..2000, r in 0.2f64..5.0, sigma in 0.2f64..3.0, rel in -0.5f64..0.5,
    ) {
        let v = pooled_sd(sigma * sigma, n);
        let s = v / r.sqrt();
        let upper = if one_sided { f64::INFINITY } else { x + (zl + width) * s };
        let bounds = ExtendedInterval::new(x + zl * s, upper).unwrap();
        let sigma_hat = sigma * (1.0 + rel);
        let at = |sd: f64| pice(x, bounds, n, r, sd * sd).unwrap();
        // sensitivity sweep: central differences over [σ, σ̂]
        let (lo, hi) = (sigma.min(sigma_hat), sigma.max(sigma_hat));
        let h = 1e-6 * sigma;
        let mut lipschitz = 0.0f64;
        for i in 0..=64 {
            let t = lo + (hi - lo) * i as f64 / 64.0;
            lipschitz = lipschitz.max(((at(t + h) - at((t - h).max(1e-9))) / (2.0 * h)).abs());
        }
        let gap = (at(sigma_hat) - umvcue(x, bounds, v, r).unwrap()).abs();
        prop_assert!(gap <= 1.05 * lipschitz * (hi - lo) + 1e-12, "gap {} vs {} * {}", gap, lipschitz, hi - lo);
    }

    #[test]
    fn target_bounds_contain_observed_and_are_stable(
        choice in 0u8..3,
        (spec, _) in spec_and_subset(),
        x in prop::collection::vec(-0.5f64..0.8, 5),
        mask in prop::collection::vec(any::<bool>(), 5),
        frac in 0.001f64..0.999,
    ) {
        let k = spec.k();
        let rule = rule_for(k, choice).build().unwrap();
        let mut x = x[..k].to_vec();
        if choice % 3 == 1 {
            x.sort_by(|a, b| b.total_cmp(a));
        }
        let s1 = Stage1Summary::from_means(x.clone());
        let outcome = apply_rule(&rule, &spec, &s1).unwrap();
        if outcome.is_stop() { return Ok(()); }
        let e = &outcome.selected;
        prop_assert_eq!(rule.bounds_for_target(&spec, &outcome, e, &s1).unwrap(), outcome.bounds.unwrap());
        let mut members: Vec<usize> = e.iter().filter(|&m| mask[m]).collect();
        if members.is_empty() { members.push(e.members()[0]); }
        let target = IndexSet::new(members, k).unwrap();
        let b = rule.bounds_for_target(&spec, &outcome, &target, &s1).unwrap();
        let observed = s1.aggregate(&spec, &target).unwrap();
        prop_assert!(b.contains(observed), "{} not in {}", observed, b);
        // move X_I,1 to another point of the interval, other means fixed
        let goal = match (b.lower().is_finite(), b.upper().is_finite()) {
            (true, true) => b.lower() + frac * (b.upper() - b.lower()),
            (true, false) => b.lower() + frac,
            (false, true) => b.upper() - frac,
            (false, false) => observed + frac,
        };
        let mut moved = x.clone();
        for m in target.iter() { moved[m] += goal - observed; }
        let now = rule.select(&spec, &Stage1Summary::from_means(moved)).unwrap();
        prop_assert_eq!(&now, e);
    }
}
