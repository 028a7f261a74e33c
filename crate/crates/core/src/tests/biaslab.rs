use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::biaslab::oracle::{
    latent_posterior_mean, latent_posterior_mean_closed_form, mlrp_bias_oracle, scenario_grid, visit_posterior_mean,
    visit_posterior_mean_dense, LatentScenario, Scenario, Theorem, VisitScenario,
};
use crate::biaslab::{bias_experiment, bias_report, build_variant, high_risk_profile, visit_severities, ModelVariant};
use crate::model::{GroupId, GroupParams, PatientLatents, Posterior, PriorSpec};
use crate::sampler::SamplerConfig;
use crate::simulate::{draw_true_params, simulate, simulate_dataset, SimConfig};

#[test]
fn ablations_drop_their_parameters() {
    let (data, _) = simulate(&SimConfig { n_patients: 20, n_bins: 8, seed: 3, ..Default::default() }).unwrap();
    let n = |v| Posterior::new(&build_variant(v, 2, data.d), &data, &PriorSpec::synthetic_fit()).unwrap().layout().n_global();
    let full = n(ModelVariant::Full);
    assert_eq!(full - n(ModelVariant::NoDisparities), 5);
    assert_eq!(full - n(ModelVariant::NoInitialSeverityDisparity), 2);
    assert_eq!(full - n(ModelVariant::NoRateDisparity), 2);
    assert_eq!(full - n(ModelVariant::NoVisitDisparity), 1);
}

#[test]
fn visit_ablation_keeps_the_emission_term() {
    let (data, truth) = simulate(&SimConfig { n_patients: 30, n_bins: 12, seed: 6, ..Default::default() }).unwrap();
    let priors = PriorSpec::synthetic_fit();
    let comp = |v| {
        let post = Posterior::new(&build_variant(v, 2, data.d), &data, &priors).unwrap();
        post.components(&post.layout().unconstrain(&truth.params).unwrap())
    };
    let (full, novis) = (comp(ModelVariant::Full), comp(ModelVariant::NoVisitDisparity));
    assert!((full.emission - novis.emission).abs() < 1e-9 * full.emission.abs());
    assert!(full.visits != novis.visits);
}

#[test]
fn blind_model_ignores_group_labels() {
    let (data, truth) = simulate(&SimConfig { n_patients: 30, n_bins: 12, seed: 7, ..Default::default() }).unwrap();
    let mut swapped = data.clone();
    for p in &mut swapped.patients {
        p.group = GroupId::new(1 - p.group.index);
    }
    let s = build_variant(ModelVariant::NoDisparities, 2, data.d);
    let priors = PriorSpec::synthetic_fit();
    let a = Posterior::new(&s, &data, &priors).unwrap();
    let b = Posterior::new(&s, &swapped, &priors).unwrap();
    assert_eq!(a.layout().names(), b.layout().names());
    let theta = a.layout().unconstrain(&truth.params).unwrap();
    assert!((a.log_density(&theta) - b.log_density(&theta)).abs() < 1e-9);
}

#[test]
fn exact_estimates_have_no_bias() {
    let (data, truth) = simulate(&SimConfig { n_patients: 40, n_bins: 10, seed: 8, ..Default::default() }).unwrap();
    let rep = bias_report(ModelVariant::Full, &data, &truth, &truth.params.latents, Some(1.0)).unwrap();
    for g in &rep.groups {
        assert_eq!(g.mean_error, 0.0);
        assert!((g.correlation.unwrap() - 1.0).abs() < 1e-12);
    }
    assert!(!rep.sign_pattern_holds());
    assert!(!rep.flagged);
    assert!(bias_report(ModelVariant::Full, &data, &truth, &truth.params.latents, Some(1.3)).unwrap().flagged);
}

#[test]
fn bias_report_hand_example() {
    let (data, truth) = simulate(&SimConfig { n_patients: 40, n_bins: 10, seed: 9, ..Default::default() }).unwrap();
    let est: Vec<PatientLatents> = data
        .patients
        .iter()
        .zip(&truth.params.latents)
        .map(|(p, l)| PatientLatents { z0: l.z0 + if p.group.index == 1 { -0.3 } else { 0.2 }, r: l.r })
        .collect();
    let rep = bias_report(ModelVariant::NoDisparities, &data, &truth, &est, Some(1.0)).unwrap();
    let under = rep.underserved;
    assert_eq!(under, if truth.params.groups[1].mu_z0 > 0.0 { 1 } else { 0 });
    assert!((rep.group(1).unwrap().mean_error + 0.3).abs() < 1e-12);
    assert!((rep.group(0).unwrap().mean_error - 0.2).abs() < 1e-12);
    let visits: usize = data.patients.iter().filter(|p| p.group.index == 1).map(|p| p.visit_bins().count()).sum();
    assert_eq!(rep.group(1).unwrap().n_visits, visits);
    assert_eq!(rep.sign_pattern_holds(), under == 1);
}

#[test]
fn high_risk_shift_flags_the_shifted_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut sev: Vec<(usize, f64)> = (0..400).map(|i| (i % 2, rng.random_range(0.0..1.0))).collect();
    for s in sev.iter_mut().filter(|s| s.0 == 1) {
        s.1 += 10.0;
    }
    let p = high_risk_profile(&sev, 0.25).unwrap();
    assert_eq!(p.groups[0].n_flagged, 0);
    assert_eq!(p.groups[1].n_flagged, 100);
    assert!((p.groups[1].flagged_fraction - 0.5).abs() < 1e-15);
    assert!(high_risk_profile(&sev, 0.0).is_err());
}

#[test]
fn oracle_rate_scenario_and_null_shift() {
    let base = LatentScenario {
        t: 1.0, mu_z0: 0.0, sd_z0: 1.0, mu_r: 1.0, sd_r: 0.5, loading: 1.0, noise_sd: 1.0, x_obs: 0.5, shift: 1.0,
    };
    let up = mlrp_bias_oracle(Theorem::Rate, &Scenario::Latent(base)).unwrap();
    assert!(up.holds);
    assert!(up.comparisons[0].e_group > up.comparisons[0].e_pop);
    let same = mlrp_bias_oracle(Theorem::InitialSeverity, &Scenario::Latent(LatentScenario { shift: 0.0, ..base })).unwrap();
    assert!(same.holds);
    assert_eq!(same.comparisons[0].predicted, 0);
    assert!((same.comparisons[0].e_group - same.comparisons[0].e_pop).abs() < 1e-12);
    assert!(mlrp_bias_oracle(Theorem::Rate, &Scenario::Latent(LatentScenario { t: 0.0, ..base })).is_err());
}

#[test]
fn oracle_visit_scenario() {
    let s = VisitScenario { mu: 0.0, sd: 1.0, beta0: 0.0, beta_z: 1.0, alpha: 0.7 };
    let out = mlrp_bias_oracle(Theorem::VisitFrequency, &Scenario::Visit(s)).unwrap();
    assert_eq!(out.comparisons.len(), 2);
    assert!(out.holds);
    for c in &out.comparisons {
        assert!(c.e_group > c.e_pop);
    }
    assert!(mlrp_bias_oracle(Theorem::Rate, &Scenario::Visit(s)).is_err());
}

#[test]
fn grids_cover_both_directions() {
    for th in [Theorem::InitialSeverity, Theorem::Rate, Theorem::VisitFrequency] {
        let g = scenario_grid(th);
        assert_eq!(g.len(), 30);
        let signs: Vec<f64> = g
            .iter()
            .map(|s| match s {
                Scenario::Latent(l) => l.shift,
                Scenario::Visit(v) => v.alpha,
            })
            .collect();
        assert_eq!(signs.iter().filter(|&&x| x > 0.0).count(), 15);
    }
}

fn quick_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig { chains: 2, warmup: 200, draws: 150, seed, ..Default::default() }
}

#[test]
fn disparity_free_cohorts_show_no_group_pattern() {
    // Which group's error is lower should be a coin flip; 2..=8 of 10 is the
    // two-sided 5% acceptance region of Binomial(10, 1/2).
    let mut lower = [0usize; 2];
    for trial in 0..10u64 {
        let cfg = SimConfig { n_patients: 80, n_bins: 20, seed: 500 + trial, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (shared, mut groups) = draw_true_params(&cfg, &mut rng);
        groups[1] = GroupParams { beta_a: 0.0, ..groups[0] };
        let (data, truth) = simulate_dataset(&cfg, &shared, &groups).unwrap();
        let variants = [ModelVariant::Full, ModelVariant::NoDisparities];
        let out = bias_experiment(&data, &truth, &variants, &PriorSpec::synthetic_fit(), &quick_sampler(trial)).unwrap();
        for (k, (rep, _)) in out.iter().enumerate() {
            if rep.group(1).unwrap().mean_error < rep.group(0).unwrap().mean_error {
                lower[k] += 1;
            }
        }
    }
    for (k, n) in lower.iter().enumerate() {
        assert!((2..=8).contains(n), "variant {k}: group 1 lower in {n} of 10");
    }
}

#[test]
fn full_model_flags_more_underserved_visits() {
    let cfg = SimConfig { n_patients: 150, n_bins: 30, seed: 77, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (shared, mut groups) = draw_true_params(&cfg, &mut rng);
    groups[1] = GroupParams { mu_z0: 2.0, beta_a: -1.0, ..groups[0] };
    groups[1].sigma_z0 = 1.0;
    let (data, truth) = simulate_dataset(&cfg, &shared, &groups).unwrap();
    let variants = [ModelVariant::Full, ModelVariant::NoDisparities];
    let out = bias_experiment(&data, &truth, &variants, &PriorSpec::synthetic_fit(), &quick_sampler(3)).unwrap();
    let share = |k: usize| {
        let est: Vec<PatientLatents> = data
            .patients
            .iter()
            .map(|p| crate::inference::latent_means(&out[k].1.draws, &p.patient_id).unwrap())
            .collect();
        let sev: Vec<(usize, f64)> = visit_severities(&data, &truth.params.latents, &est).iter().map(|r| (r.0, r.2)).collect();
        high_risk_profile(&sev, 0.25).unwrap().groups.iter().find(|g| g.group == 1).unwrap().flagged_fraction
    };
    let (full, blind) = (share(0), share(1));
    assert!(full > blind, "full {full} vs blind {blind}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn latent_quadrature_matches_closed_form(
        t in 0.0..2.0f64, sd_z0 in 0.3..2.0f64, sd_r in 0.2..1.5f64, loading in 0.3..2.0f64,
        noise in 0.25..3.0f64, x in -2.0..2.0f64, mu_z0 in -1.0..1.0f64, mu_r in -1.0..1.0f64,
    ) {
        let s = LatentScenario { t, mu_z0, sd_z0, mu_r, sd_r, loading, noise_sd: noise, x_obs: x, shift: 0.0 };
        let q = latent_posterior_mean(&s, mu_z0, mu_r).unwrap();
        let c = latent_posterior_mean_closed_form(&s, mu_z0, mu_r);
        prop_assert!((q - c).abs() < 1e-6, "{} vs {}", q, c);
    }

    #[test]
    fn visit_quadrature_matches_simpson(
        sd in 0.25..3.0f64, beta0 in -1.5..1.0f64, beta_z in 0.2..1.5f64, alpha in -2.0..2.0f64, visit in any::<bool>(),
    ) {
        let s = VisitScenario { mu: 0.0, sd, beta0, beta_z, alpha };
        let q = visit_posterior_mean(&s, alpha, visit).unwrap();
        let d = visit_posterior_mean_dense(&s, alpha, visit, 4000);
        prop_assert!((q - d).abs() < 1e-6, "{} vs {}", q, d);
    }

    #[test]
    fn shift_sign_sets_bias_direction(m in 0.05..2.5f64, x in -1.5..1.5f64, noise in 0.25..3.0f64) {
        for (th, t) in [(Theorem::InitialSeverity, 0.3), (Theorem::Rate, 0.8)] {
            for dir in [1.0, -1.0] {
                let s = LatentScenario {
                    t, mu_z0: 0.0, sd_z0: 1.0, mu_r: 1.0, sd_r: 0.5, loading: 1.0, noise_sd: noise, x_obs: x, shift: dir * m,
                };
                let out = mlrp_bias_oracle(th, &Scenario::Latent(s)).unwrap();
                prop_assert!(out.holds, "{:?}", out.comparisons);
            }
        }
    }

    #[test]
    fn reversing_the_visit_shift_reverses_the_bias(a in 0.05..2.5f64, sd in 0.25..4.0f64, beta0 in -1.0..0.5f64) {
        let s = VisitScenario { mu: 0.0, sd, beta0, beta_z: 1.0, alpha: a };
        let up = mlrp_bias_oracle(Theorem::VisitFrequency, &Scenario::Visit(s)).unwrap();
        let down = mlrp_bias_oracle(Theorem::VisitFrequency, &Scenario::Visit(VisitScenario { alpha: -a, ..s })).unwrap();
        for (u, d) in up.comparisons.iter().zip(&down.comparisons) {
            prop_assert!((u.e_group - u.e_pop) * (d.e_group - d.e_pop) < 0.0);
        }
    }

    #[test]
    fn high_risk_matches_sort_oracle(seed in any::<u64>(), n in 5usize..300, q in 0.01..0.99f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sev: Vec<(usize, f64)> = (0..n).map(|_| (rng.random_range(0..3), rng.random_range(-5.0..5.0))).collect();
        let p = high_risk_profile(&sev, q).unwrap();
        let mut sorted: Vec<f64> = sev.iter().map(|s| s.1).collect();
        sorted.sort_by(f64::total_cmp);
        let keep = ((1.0 - q) * n as f64).ceil() as usize;
        let expected = n - keep.clamp(1, n);
        let total: usize = p.groups.iter().map(|g| g.n_flagged).sum();
        prop_assert_eq!(total, expected);
        for g in &p.groups {
            let hand = sev.iter().filter(|s| s.0 == g.group && s.1 > sorted[keep.clamp(1, n) - 1]).count();
            prop_assert_eq!(g.n_flagged, hand);
        }
    }
}
