//! Seeded helpers shared by the unit tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, dims: Vec<usize>) -> Tensor {
    let len: usize = dims.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(dims, data).unwrap()
}

pub(crate) fn random_int(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> i64 {
    rng.random_range(lo..=hi)
}

/// Central finite differences of a scalar function at `x`.
pub(crate) fn fd_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fp = f(&Tensor::new(x.dims().to_vec(), plus).unwrap());
        let fm = f(&Tensor::new(x.dims().to_vec(), minus).unwrap());
        out[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.dims().to_vec(), out).unwrap()
}

/// Asserts element-wise relative closeness (denominator floored at 1).
pub(crate) fn assert_close_rel(got: &Tensor, want: &Tensor, tol: f64) {
    assert_eq!(got.dims(), want.dims());
    for (g, w) in got.data().iter().zip(want.data()) {
        let denom = w.abs().max(1.0);
        assert!(
            ((g - w) / denom).abs() < tol,
            "gradient mismatch: got {g}, want {w}"
        );
    }
}
