#![allow(dead_code)]

use cvfl_core::ctensor::ComplexTensor;
use cvfl_core::cvnn::{Activation, ModelKind, NetConfig, NetParams};
use cvfl_core::training::Example;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> ComplexTensor {
    let n: usize = shape.iter().product();
    let re = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    let im = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    ComplexTensor::from_parts(shape, re, im).unwrap()
}

/// Every weight and bias random, including the biases `init` leaves at zero.
pub fn random_params(cfg: &NetConfig, kind: ModelKind, seed: u64, scale: f64) -> NetParams {
    let mut r = rng(seed);
    let mut p = NetParams::zeros(cfg, kind).unwrap();
    for t in p.tensors_mut() {
        let (re, im) = t.planes_mut();
        for v in re.iter_mut() {
            *v = r.random_range(-scale..scale);
        }
        if kind == ModelKind::Cvnn {
            for v in im.iter_mut() {
                *v = r.random_range(-scale..scale);
            }
        }
    }
    for q in p.modrelu_q.iter_mut() {
        *q = r.random_range(-0.05..0.05);
    }
    p
}

/// C = 2, L = 16 with the reference layer sequence scaled down.
pub fn tiny_net(activation: Activation, seed: u64) -> NetConfig {
    NetConfig {
        antennas: 2,
        subcarriers: 16,
        conv1_channels: 2,
        conv1_kernel: 2,
        pool1_window: 3,
        pool1_stride: 1,
        conv2_channels: 2,
        conv2_kernel: 2,
        pool2_window: 3,
        pool2_stride: 2,
        fc1_units: 4,
        fc2_units: 3,
        activation,
        seed,
        ..NetConfig::default()
    }
}

pub fn random_examples(cfg: &NetConfig, n: usize, seed: u64) -> Vec<Example> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| Example {
            id: i as u64,
            input: random_tensor(&mut r, &[cfg.antennas, cfg.subcarriers], 1.0),
            position: [r.random_range(0.0..4.0), r.random_range(0.0..4.0)],
            los: r.random_bool(0.5),
            toa: r.random_range(0.5..3.0),
        })
        .collect()
}

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}
