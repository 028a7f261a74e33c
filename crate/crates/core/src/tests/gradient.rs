use crate::model::{LatentParameterization, ModelStructure, Posterior, PriorSpec};
use crate::simulate::{simulate, SimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fd_gradient(post: &Posterior, theta: &[f64], h: f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            x[k] = theta[k] + h;
            let up = post.log_density(&x);
            x[k] = theta[k] - h;
            let down = post.log_density(&x);
            x[k] = theta[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn check(structure: ModelStructure, draws: usize, seed: u64) -> f64 {
    let cfg = SimConfig {
        n_patients: 10,
        n_bins: 20,
        delta: 1.0 / 20.0,
        d: 3,
        seed,
        ..Default::default()
    };
    let (data, _) = simulate(&cfg).unwrap();
    let post = Posterior::new(&structure, &data, &PriorSpec::synthetic_fit()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut evaluated = 0;
    while evaluated < draws {
        let theta = post.prior_draw(&mut rng);
        let mut g = vec![0.0; post.dim()];
        let lp = post.log_density_grad(&theta, &mut g);
        if !lp.is_finite() {
            continue;
        }
        let fd = fd_gradient(&post, &theta, 1e-5);
        if fd.iter().any(|v| !v.is_finite()) {
            continue;
        }
        worst = worst.max(relative_error(&g, &fd));
        evaluated += 1;
    }
    worst
}

#[test]
fn full_model_matches_finite_differences() {
    for p in [
        LatentParameterization::Centered,
        LatentParameterization::NonCentered,
        LatentParameterization::CenteredInitial,
    ] {
        let worst = check(ModelStructure::full(2, 3).with_parameterization(p), 100, 11);
        assert!(worst < 1e-5, "{p:?}: worst relative error {worst:e}");
    }
}

#[test]
fn ablated_models_match_finite_differences() {
    let base = ModelStructure::full(2, 3);
    let variants = [
        ModelStructure { initial_disparity: false, ..base.clone() },
        ModelStructure { rate_disparity: false, ..base.clone() },
        ModelStructure { visit_disparity: false, ..base.clone() },
        ModelStructure {
            initial_disparity: false,
            rate_disparity: false,
            visit_disparity: false,
            ..base.clone()
        },
    ];
    for (i, s) in variants.into_iter().enumerate() {
        let worst = check(s, 20, 40 + i as u64);
        assert!(worst < 1e-5, "variant {i}: worst relative error {worst:e}");
    }
}
