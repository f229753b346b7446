//! Central finite-difference checks of analytic gradients, in binary64.

mod common;

use common::fd_max_rel_error;
use nic_core::codec::uniform_noise;
use nic_core::overfit::{quantize_updates_train, update_rate_train};
use nic_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
/// The tuned tail is piecewise linear (leaky ReLU); a smaller step keeps the stencil off its kinks.
const H_LOSS: f64 = 1e-5;
const TOL: f64 = 1e-3;
const SEEDS: [u64; 3] = [11, 12, 13];

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Scalar probe `sum(w * y)` with fixed random `w`, so every output element matters.
fn probe(g: &mut Graph<f64>, y: Var, rng: &mut ChaCha8Rng) -> Var {
    let w = random(g.shape(y), 1.0, rng);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

#[test]
fn conv2d_matches_finite_differences() {
    for seed in SEEDS {
        for stride in [1, 2] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                random(&[1, 3, 8, 8], 1.0, &mut rng),
                random(&[4, 3, 3, 3], 0.5, &mut rng),
                random(&[4], 0.5, &mut rng),
            ];
            let probe_seed = rng.gen();
            let err = fd_max_rel_error(&inputs, H, |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, 1).unwrap();
                probe(g, y, &mut ChaCha8Rng::seed_from_u64(probe_seed))
            });
            assert!(err <= TOL, "seed {seed} stride {stride}: {err}");
        }
    }
}

#[test]
fn tconv2d_matches_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random(&[1, 3, 5, 5], 1.0, &mut rng),
            random(&[3, 4, 5, 5], 0.5, &mut rng),
            random(&[4], 0.5, &mut rng),
        ];
        let probe_seed = rng.gen();
        let err = fd_max_rel_error(&inputs, H, |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], v[2], 2, 2, 1).unwrap();
            assert_eq!(g.shape(y), &[1, 4, 10, 10]);
            probe(g, y, &mut ChaCha8Rng::seed_from_u64(probe_seed))
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn relaxed_update_quantizer_matches_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&[19], 0.3, &mut rng), Tensor::scalar(rng.gen_range(2.0..20.0))];
        let noise: Tensor<f64> = uniform_noise(&[19], &mut rng).cast();
        let probe_seed = rng.gen();
        let err = fd_max_rel_error(&inputs, H, |g, v| {
            let u = g.constant(noise.clone());
            let (relaxed, delta) = quantize_updates_train(g, v[0], v[1], u).unwrap();
            let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
            let a = probe(g, relaxed, &mut prng);
            let b = probe(g, delta, &mut prng);
            g.add(a, b).unwrap()
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn delta_gradient_in_q_is_minus_noise_over_q_squared() {
    let mut g = Graph::<f64>::new();
    let b = g.param(Tensor::from_vec(vec![0.1, -0.2, 0.3]));
    let q = g.param(Tensor::scalar(4.0));
    let u = g.constant(Tensor::from_vec(vec![0.25, -0.5, 0.125]));
    let (_, delta) = quantize_updates_train(&mut g, b, q, u).unwrap();
    let s = g.sum(delta);
    g.backward(s).unwrap();
    let expect = -(0.25 - 0.5 + 0.125) / 16.0;
    assert!((g.grad(q).unwrap().item() - expect).abs() < 1e-15);
}

#[test]
fn update_rate_matches_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&[40], 4.0, &mut rng)];
        let err = fd_max_rel_error(&inputs, H, |g, v| update_rate_train(g, v[0]).unwrap());
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn loss_ratio_matches_finite_differences() {
    for seed in SEEDS {
        for layers in 1..=3 {
            let (problem, mut rng) = common::overfit_problem(seed, layers, 32, 32);
            let n = problem.update_len();
            let inputs = vec![random(&[n], 0.05, &mut rng), Tensor::scalar(10f64.ln())];
            let noise: Tensor<f64> = uniform_noise(&[n], &mut rng).cast();
            let err = fd_max_rel_error(&inputs, H_LOSS, |g, v| {
                let u = g.constant(noise.clone());
                problem.loss(g, v[0], v[1], u).unwrap()
            });
            assert!(err <= TOL, "seed {seed} l={layers}: {err}");
        }
    }
}
