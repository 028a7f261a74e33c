use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{GroupParams, ModelStructure, Posterior, PriorSpec, SharedParams};
use crate::simulate::{draw_true_params, simulate, simulate_dataset, SimConfig};
use crate::stats::{mean, variance};

#[test]
fn initial_severity_mean_prior_draws() {
    let cfg = SimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xs: Vec<f64> = (0..10_000).map(|_| draw_true_params(&cfg, &mut rng).1[1].mu_z0).collect();
    let (m, sd) = (mean(&xs), variance(&xs).sqrt());
    assert!(m.abs() < 3.0 * 4.0 / 100.0, "mean {m}");
    assert!((sd - 4.0).abs() < 0.1, "sd {sd}");
    assert!((0..200).all(|_| draw_true_params(&cfg, &mut rng).0.loadings[0] >= 0.5));
}

fn flat_params(beta0: f64) -> (SharedParams, Vec<GroupParams>) {
    let shared = SharedParams { loadings: vec![1.0, -0.5], intercepts: vec![0.5, 2.0], noise_var: vec![1.0, 1.0], beta0, beta_z: 0.0 };
    let other = GroupParams { mu_z0: 1.0, sigma_z0: 0.8, mu_r: 0.5, sigma_r: 0.3, beta_a: 0.0 };
    (shared, vec![GroupParams::reference(0.5, 0.3), other])
}

#[test]
fn visit_frequency_at_unit_expected_count() {
    let cfg = SimConfig { n_patients: 400, d: 2, n_bins: 50, delta: 0.02, seed: 4, ..Default::default() };
    let (shared, groups) = flat_params((1.0 / cfg.delta).ln());
    let (data, _) = simulate_dataset(&cfg, &shared, &groups).unwrap();
    let (mut hits, mut n) = (0usize, 0usize);
    for p in &data.patients {
        for t in 1..p.horizon() {
            hits += p.visits[t] as usize;
            n += 1;
        }
    }
    let p = 1.0 - (-1f64).exp();
    let freq = hits as f64 / n as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((freq - p).abs() < 3.0 * se, "{freq} vs {p} (se {se})");
}

#[test]
fn noiseless_emission_lies_on_the_line() {
    let cfg = SimConfig { n_patients: 30, d: 2, n_bins: 20, delta: 0.05, seed: 8, ..Default::default() };
    let (mut shared, groups) = flat_params(2.0);
    shared.noise_var = vec![1e-300; 2];
    let (data, truth) = simulate_dataset(&cfg, &shared, &groups).unwrap();
    for (p, lat) in data.patients.iter().zip(&truth.params.latents) {
        assert!(p.visits[0]);
        for t in p.visit_bins() {
            let z = lat.severity(t as f64 * cfg.delta);
            for j in 0..2 {
                let x = p.features[t][j].unwrap();
                assert!((x - (shared.loadings[j] * z + shared.intercepts[j])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn group_assignment_fraction() {
    let (data, _) = simulate(&SimConfig { n_patients: 1000, n_bins: 2, seed: 21, ..Default::default() }).unwrap();
    let frac = data.patients.iter().filter(|p| p.group.index == 1).count() as f64 / 1000.0;
    assert!((frac - 0.5).abs() < 3.0 * (0.25f64 / 1000.0).sqrt(), "{frac}");
}

#[test]
fn visit_frequency_tracks_true_rate() {
    // Bins grouped by their true visit probability: the observed share in
    // each group matches the mean probability there.
    let cfg = SimConfig { n_patients: 600, seed: 5, ..Default::default() };
    let (data, truth) = simulate(&cfg).unwrap();
    let sh = &truth.params.shared;
    let mut cells: Vec<(f64, bool)> = Vec::new();
    for (p, lat) in data.patients.iter().zip(&truth.params.latents) {
        let ba = truth.params.groups[p.group.index].beta_a;
        for t in 1..p.horizon() {
            let lam = (sh.beta0 + sh.beta_z * lat.severity(t as f64 * cfg.delta) + ba).exp();
            cells.push((-(-lam * cfg.delta).exp_m1(), p.visits[t]));
        }
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    for chunk in cells.chunks(cells.len() / 8) {
        if chunk.len() < 100 {
            continue;
        }
        let pm = chunk.iter().map(|c| c.0).sum::<f64>() / chunk.len() as f64;
        let var = chunk.iter().map(|c| c.0 * (1.0 - c.0)).sum::<f64>();
        let hits = chunk.iter().filter(|c| c.1).count() as f64;
        let z = (hits - pm * chunk.len() as f64) / var.sqrt().max(1e-12);
        assert!(z.abs() < 3.5, "p≈{pm}: z = {z}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(simulate(&SimConfig { n_patients: 0, ..Default::default() }).is_err());
    assert!(simulate(&SimConfig { group_probability: 1.0, ..Default::default() }).is_err());
    assert!(simulate(&SimConfig { delta: 0.0, ..Default::default() }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn truth_has_finite_density(seed in any::<u64>(), rates in any::<bool>()) {
        let cfg = SimConfig { n_patients: 25, seed, group_specific_rates: rates, ..Default::default() };
        let (data, truth) = simulate(&cfg).unwrap();
        data.validate().unwrap();
        let post = Posterior::new(&ModelStructure::full(2, cfg.d), &data, &PriorSpec::synthetic_fit()).unwrap();
        let theta = post.layout().unconstrain(&truth.params).unwrap();
        prop_assert!(post.log_density(&theta).is_finite());
        let total_rows: usize = data.patients.iter().map(|p| p.horizon()).sum();
        prop_assert_eq!(total_rows, cfg.n_patients * cfg.n_bins);
    }
}
