//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::HashMap;

use mipae_core::miest::{FactorSamples, Points};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

/// Plug-in MI from a joint histogram of (label, bin).
pub fn binned_mi(labels: &[u32], bins: &[u64]) -> f64 {
    let n = labels.len() as f64;
    let mut joint: HashMap<(u32, u64), f64> = HashMap::new();
    let mut pl: HashMap<u32, f64> = HashMap::new();
    let mut pb: HashMap<u64, f64> = HashMap::new();
    for (&l, &b) in labels.iter().zip(bins) {
        *joint.entry((l, b)).or_default() += 1.0 / n;
        *pl.entry(l).or_default() += 1.0 / n;
        *pb.entry(b).or_default() += 1.0 / n;
    }
    joint.iter().map(|(&(l, b), &p)| p * (p / (pl[&l] * pb[&b])).ln()).sum()
}

/// Bins of width 1/40 over [-6, 6].
pub fn fine_bin(v: f64) -> u64 {
    ((v.clamp(-6.0, 6.0) + 6.0) * 40.0) as u64
}

/// `I(sign(x + s*e); x)` for standard normal `x`, `e`, by quadrature of the
/// analytic conditional label distribution.
pub fn noisy_sign_mi(s: f64) -> f64 {
    let phi = Normal::new(0.0, 1.0).unwrap();
    let hb = |p: f64| if p <= 0.0 || p >= 1.0 { 0.0 } else { -p * p.ln() - (1.0 - p) * (1.0 - p).ln() };
    let steps = 20_000;
    let (lo, hi) = (-8.0, 8.0);
    let h = (hi - lo) / steps as f64;
    let density = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cond: f64 = (0..=steps)
        .map(|i| {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            w * density(x) * hb(phi.cdf(x / s))
        })
        .sum::<f64>()
        * h;
    2f64.ln() - cond
}

pub fn noisy_sample(rng: &mut ChaCha8Rng, n: usize, s: f64) -> (Vec<u32>, Points) {
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let labels = x.iter().map(|&v| (v + s * rng.sample::<f64, _>(StandardNormal) > 0.0) as u32).collect();
    (labels, Points::new(1, x).unwrap())
}

/// 2-D standard normal points labelled by quadrant, with the histogram oracle.
pub fn quadrant_problem(n: usize, seed: u64) -> (Vec<u32>, Points, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<[f64; 2]> = (0..n).map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
    let labels: Vec<u32> = rows.iter().map(|r| (r[0] > 0.0) as u32 * 2 + (r[1] > 0.0) as u32).collect();
    let bins: Vec<u64> = rows.iter().map(|r| fine_bin(r[0]) * 1000 + fine_bin(r[1])).collect();
    let oracle = binned_mi(&labels, &bins);
    (labels, Points::new(2, rows.concat()).unwrap(), oracle)
}

pub fn one_hot(label: u32, width: usize) -> Vec<f64> {
    (0..width).map(|j| (j == label as usize) as u32 as f64).collect()
}

/// 12 content classes and 64 pose classes drawn uniformly.
pub fn factor_sample(n: usize, seed: u64) -> FactorSamples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FactorSamples {
        content: (0..n).map(|_| rng.gen_range(0..12)).collect(),
        pose: (0..n).map(|_| rng.gen_range(0..64)).collect(),
    }
}

pub fn encode(labels: &[u32], width: usize) -> Points {
    Points::from_rows(&labels.iter().map(|&l| one_hot(l, width)).collect::<Vec<_>>()).unwrap()
}

pub fn gaussian_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Points {
    Points::new(d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}
