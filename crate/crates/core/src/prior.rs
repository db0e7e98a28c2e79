//! The latent prior: a uniform one-hot category next to an isotropic
//! Gaussian style vector, plus the interpolates used by the gradient penalty.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// `n` prior draws as one `[n, k + style_dim]` matrix: the first `k` columns
/// are one-hot, the rest are `N(0, sigma^2)`.
pub fn sample_prior<T: Element>(
    n: usize,
    k: usize,
    style_dim: usize,
    sigma: f64,
    rng: &mut Rng,
) -> Tensor<T> {
    assert!(n >= 1 && k >= 2 && sigma > 0.0, "invalid prior request");
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let width = k + style_dim;
    let mut data = vec![T::zero(); n * width];
    for row in data.chunks_exact_mut(width) {
        let c = rng.random_range(0..k);
        row[c] = T::one();
        for v in &mut row[k..] {
            *v = T::lit(normal.sample(rng));
        }
    }
    Tensor::from_vec(vec![n, width], data)
}

/// `eps * z + (1 - eps) * z_tilde`, coordinate-wise.
pub fn interpolate(z: &[f64], z_tilde: &[f64], eps: f64) -> Result<Vec<f64>> {
    if z.len() != z_tilde.len() {
        return Err(Error::Shape(format!(
            "cannot interpolate vectors of length {} and {}",
            z.len(),
            z_tilde.len()
        )));
    }
    Ok(z.iter()
        .zip(z_tilde)
        .map(|(&a, &b)| eps * a + (1.0 - eps) * b)
        .collect())
}

/// Row-wise [`interpolate`] of two `[m, d]` matrices with one `eps` per row.
pub fn interpolate_rows<T: Element>(z: &Tensor<T>, z_tilde: &Tensor<T>, eps: &[f64]) -> Tensor<T> {
    assert_eq!(z.shape(), z_tilde.shape(), "interpolate_rows shape mismatch");
    assert_eq!(eps.len(), z.dim(0));
    let d = z.dim(1);
    let mut out = Vec::with_capacity(z.numel());
    for (i, &e) in eps.iter().enumerate() {
        let e = T::lit(e);
        let one_minus = T::one() - e;
        out.extend(
            z.row(i)
                .iter()
                .zip(z_tilde.row(i))
                .map(|(&a, &b)| e * a + one_minus * b),
        );
    }
    Tensor::from_vec(vec![eps.len(), d], out)
}

/// `m` mixing weights from `U[0, 1]`.
pub fn sample_eps(m: usize, rng: &mut Rng) -> Vec<f64> {
    (0..m).map(|_| rng.random::<f64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn rows_are_one_hot_then_style() {
        let mut rng = stream(3, Stream::Prior);
        let s = sample_prior::<f64>(50, 4, 3, 0.1, &mut rng);
        assert_eq!(s.shape(), &[50, 7]);
        for i in 0..50 {
            let c = &s.row(i)[..4];
            assert_eq!(c.iter().sum::<f64>(), 1.0);
            assert_eq!(c.iter().filter(|&&v| v != 0.0).count(), 1);
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let z = [1.0, 0.0];
        let t = [0.0, 1.0];
        assert_eq!(interpolate(&z, &t, 1.0).unwrap(), z);
        assert_eq!(interpolate(&z, &t, 0.0).unwrap(), t);
        assert_eq!(interpolate(&z, &t, 0.25).unwrap(), vec![0.25, 0.75]);
        assert!(interpolate(&z, &[0.0], 0.5).is_err());
    }

    #[test]
    fn interpolate_rows_uses_per_row_weight() {
        let z = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let t = Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]);
        let h = interpolate_rows(&z, &t, &[1.0, 0.25]);
        assert_eq!(h.data(), &[1.0, 0.0, 0.25, 0.75]);
    }
}
