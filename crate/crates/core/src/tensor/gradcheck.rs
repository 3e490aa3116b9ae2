//! Central finite-difference helpers shared by the kernel tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn weighted_sum(t: &Tensor, coef: &Tensor) -> f64 {
    t.data()
        .iter()
        .zip(coef.data())
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum()
}

/// Central differences of `f` with respect to every entry of `t`, dividing
/// by the step actually representable in f32.
pub fn numeric_grad(t: &Tensor, h: f32, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = t.clone();
    (0..t.len())
        .map(|i| {
            let orig = t.data()[i];
            let (up, down) = (orig + h, orig - h);
            probe.data_mut()[i] = up;
            let fp = f(&probe);
            probe.data_mut()[i] = down;
            let fm = f(&probe);
            probe.data_mut()[i] = orig;
            (fp - fm) / (up as f64 - down as f64)
        })
        .collect()
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn rel_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let a = *a as f64;
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}
