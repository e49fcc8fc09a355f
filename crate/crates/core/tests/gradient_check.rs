//! Analytic gradients of the reference network against central finite
//! differences.

use cftrace::model::{InputSpec, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

/// |a - n| / max(|a|, |n|, 1e-6); the floor keeps exactly-zero gradients of
/// inactive units from dividing round-off by zero.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn batch(spec: InputSpec, rng: &mut impl Rng) -> Vec<(Vec<f64>, usize)> {
    (0..3)
        .map(|i| {
            let x = (0..spec.channels * spec.side * spec.side)
                .map(|_| rng.gen::<f64>())
                .collect();
            (x, i % 2)
        })
        .collect()
}

fn check(spec: InputSpec, indices: impl Iterator<Item = usize>, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::init(spec, &mut rng).unwrap();
    // Non-zero biases so every bias path is exercised.
    let n = net.params().len();
    for p in net.params_mut() {
        if *p == 0.0 {
            *p = rng.gen_range(-0.05..0.05);
        }
    }
    let data = batch(spec, &mut rng);
    let (_, grad) = net.loss_and_gradient(&data);
    assert_eq!(grad.len(), n);

    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in indices {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + STEP;
        let up = net.loss(&data);
        net.params_mut()[i] = orig - STEP;
        let down = net.loss(&data);
        net.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let err = relative_error(grad[i], numeric);
        assert!(
            err < 1e-4,
            "param {i}: analytic {} numeric {numeric} rel {err}",
            grad[i]
        );
        worst = worst.max(err);
        checked += 1;
    }
    (checked, worst)
}

#[test]
fn every_parameter_small_input() {
    let spec = InputSpec {
        side: 16,
        channels: 1,
    };
    let n = Network::zeros(spec).unwrap().params().len();
    let (checked, worst) = check(spec, 0..n, 21);
    assert_eq!(checked, n);
    println!("checked {checked} parameters, worst relative error {worst:.3e}");
}

#[test]
fn sampled_parameters_default_input() {
    let spec = InputSpec {
        side: 28,
        channels: 1,
    };
    let n = Network::zeros(spec).unwrap().params().len();
    let (checked, worst) = check(spec, (0..n).step_by(37), 22);
    println!("checked {checked} parameters, worst relative error {worst:.3e}");
}

#[test]
fn three_channel_input() {
    let spec = InputSpec {
        side: 16,
        channels: 3,
    };
    let n = Network::zeros(spec).unwrap().params().len();
    check(spec, (0..n).step_by(7), 23);
}
