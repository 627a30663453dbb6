//! Shared helpers for the integration suites: deterministic synthetic
//! datasets and random tensors.

#![allow(dead_code)]

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agenet::scalar::Scalar;
use agenet::tensor::Tensor;

/// Writes `n` synthetic face-like images with valid UTK-style names into
/// `dir`. Pixels are deterministic per (seed, index) so reruns see identical
/// bytes, and each image carries enough unique structure to memorize.
pub fn write_synthetic_dataset(dir: &Path, n: usize, seed: u64) -> Vec<String> {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    for i in 0..n {
        let age: u32 = rng.gen_range(1..=110);
        let gender: u32 = rng.gen_range(0..=1);
        let name = format!("{}_{}_{}_2020{:06}.ppm", age, gender, rng.gen_range(0..5), i);
        let (w, h) = (80usize, 80usize);
        let mut px = Vec::with_capacity(3 * w * h);
        // unique per-image noise plus a weak label-correlated wash
        for y in 0..h {
            for x in 0..w {
                let noise: u8 = rng.gen();
                px.push(noise);
                px.push((((age * 2) % 256) as u8) ^ (x as u8));
                px.push(if gender == 0 { (y % 256) as u8 } else { 255 - (y % 256) as u8 });
            }
        }
        let mut f = std::fs::File::create(dir.join(&name)).unwrap();
        write!(f, "P6\n{} {}\n255\n", w, h).unwrap();
        f.write_all(&px).unwrap();
        names.push(name);
    }
    names
}

/// Uniform random tensor in (lo, hi), reproducible from the seed.
pub fn rand_tensor<S: Scalar>(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.gen_range(lo..hi))).collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// Like `rand_tensor` but with every value at least `margin` away from zero,
/// for checking gradients of kinked functions (ReLU, max pooling).
pub fn rand_tensor_off_zero<S: Scalar>(dims: &[usize], seed: u64, margin: f64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(margin..1.0);
            S::from_f64(if rng.gen::<bool>() { v } else { -v })
        })
        .collect();
    Tensor::from_vec(dims, data).unwrap()
}
