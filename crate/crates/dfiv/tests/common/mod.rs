#![allow(dead_code)]

use dfiv::iv::Features;
use dfiv::linalg::{Mat, RngStream};
use dfiv::neural::{Activation, FeatureMap};

/// Tanh network with jittered biases, so every parameter matters.
pub fn tanh_net(dims: &[usize], seed: u64) -> Features {
    let mut rng = RngStream::new(seed, 91);
    let acts = vec![Activation::Tanh; dims.len() - 1];
    let mut fm = FeatureMap::init(dims, &acts, &mut rng).unwrap();
    let p: Vec<f64> = fm
        .params()
        .iter()
        .map(|v| v + 0.1 * rng.gaussian())
        .collect();
    fm.set_params(&p).unwrap();
    Features::mlp(fm)
}

/// Central differences over the network parameters of `feat`.
pub fn fd_grad(feat: &Features, f: impl Fn(&Features) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let base = feat.as_mlp().unwrap().params();
    let mut probe = feat.clone();
    (0..base.len())
        .map(|k| {
            let mut p = base.clone();
            p[k] = base[k] + h;
            probe.as_mlp_mut().unwrap().set_params(&p).unwrap();
            let up = f(&probe);
            p[k] = base[k] - h;
            probe.as_mlp_mut().unwrap().set_params(&p).unwrap();
            (up - f(&probe)) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn random_mat(rng: &mut RngStream, rows: usize, cols: usize) -> Mat {
    rng.gaussian_mat(rows, cols, 1.0)
}
