use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wisteria_core::model::{backward, forward, forward_all, init_params};
use wisteria_core::objective::{evaluate_loss, finite_diff_grad, relative_error, wisteria_loss};
use wisteria_core::ontology::{build_tree_ontology, laplacian};
use wisteria_core::{Activation, AgreementKind, LossConfig, ModelConfig, ModelParams, ViewSet};

const H: f64 = 1e-5;

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// d_x = 5, d_h = 4, |V| = 7, K = 3, two records.
fn canonical(activation: Activation) -> (ModelParams, Vec<Vec<f64>>, ViewSet) {
    let cfg = ModelConfig {
        hidden_dim: 4,
        activation,
        init_scale: 1.0,
        seed: 11,
    };
    let params = init_params(&cfg, 5, 7, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xs: Vec<Vec<f64>> = (0..2).map(|_| (0..5).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
    let data: Vec<f64> = (0..2 * 3).flat_map(|_| random_simplex(&mut rng, 7)).collect();
    (params, xs, ViewSet::from_data(2, 3, 7, data).unwrap())
}

fn loss_cfg(kind: AgreementKind, lambda: f64, gamma: f64) -> LossConfig {
    LossConfig {
        lambda,
        gamma,
        agreement_kind: kind,
        eps_clamp: 1e-8,
        batch_size: 2,
        learning_rate: 0.1,
        momentum: 0.0,
        epochs: 1,
        seed: 0,
    }
}

#[test]
fn full_objective_gradient() {
    let graph = build_tree_ontology(2, 2, 4).unwrap();
    let lap = laplacian(&graph);
    for activation in [Activation::Tanh, Activation::Identity] {
        let (params, xs, views) = canonical(activation);
        let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        for kind in [AgreementKind::SymKl, AgreementKind::SqDist] {
            for (lambda, gamma) in [(1.0, 0.0), (1.0, 0.1), (0.3, 2.0), (0.0, 0.0)] {
                let cfg = loss_cfg(kind, lambda, gamma);
                let (_, analytic) = wisteria_loss(&params, &inputs, &views, &lap, &cfg).unwrap();
                let numeric = finite_diff_grad(
                    |theta| {
                        let p = ModelParams::from_vec(params.dims(), activation, theta.to_vec()).unwrap();
                        evaluate_loss(&p, &inputs, &views, &lap, &cfg).unwrap().total
                    },
                    params.as_slice(),
                    H,
                )
                .unwrap();
                let err = relative_error(&analytic, &numeric);
                assert!(err <= 1e-6, "{activation:?} {kind:?} λ={lambda} γ={gamma}: {err:e}");
            }
        }
    }
}

/// Each head's output, pulled back through `backward` with a random
/// cotangent, matches the finite-difference directional derivative.
#[test]
fn backward_matches_forward_jacobian() {
    let (params, xs, _) = canonical(Activation::Tanh);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for x in &xs {
        let fwd = forward(&params, x).unwrap();
        let upstream: Vec<Vec<f64>> = (0..3).map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut grad = vec![0.0; params.as_slice().len()];
        backward(&params, x, &fwd, &upstream, &mut grad);
        let numeric = finite_diff_grad(
            |theta| {
                let p = ModelParams::from_vec(params.dims(), Activation::Tanh, theta.to_vec()).unwrap();
                let probs = forward_all(&p, x).unwrap();
                probs.iter().zip(&upstream).map(|(pk, uk)| pk.iter().zip(uk).map(|(a, b)| a * b).sum::<f64>()).sum()
            },
            params.as_slice(),
            H,
        )
        .unwrap();
        assert!(relative_error(&grad, &numeric) <= 1e-7);
    }
}

#[test]
fn step_size_outside_range_is_rejected() {
    assert!(finite_diff_grad(|t| t[0], &[1.0], 1e-2).is_err());
    assert!(finite_diff_grad(|t| t[0], &[1.0], 1e-9).is_err());
}
