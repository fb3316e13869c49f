//! Dense arrays, reverse-mode differentiation, and the activation and
//! normalisation primitives the model is built from.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GradEntry};
pub use kernels::{logit, sigmoid};
pub use tape::{bce_term, focal_term, Gradients, Tape, Var, PROB_CLAMP};
pub use tensor::Tensor;

use rand::Rng;

use crate::error::{ensure, Result};

/// Softmax over the last dimension with max-subtraction.
///
/// `-inf` entries are masked; a slice that is entirely `-inf` maps to zeros.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    ensure!(x.last_dim() >= 1, Shape, "softmax over an empty last dimension");
    ensure!(!x.has_nan(), Numerical, "NaN in softmax input");
    let mut out = vec![0.0; x.len()];
    kernels::softmax_rows(x.data(), x.last_dim(), None, &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

/// `x / sqrt(mean(x²) + eps) * gain` along the last dimension.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    ensure!(
        gain.len() == x.last_dim(),
        Shape,
        "rmsnorm gain length {} for last dimension {}",
        gain.len(),
        x.last_dim()
    );
    ensure!(eps >= 0.0, InvalidArgument, "rmsnorm eps must be nonnegative");
    let mut out = vec![0.0; x.len()];
    kernels::rmsnorm_rows(x.data(), gain.data(), eps, &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(kernels::silu)
}

/// Glorot-uniform `[rows, cols]` matrix.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

pub(crate) fn laplace_bias_values(alpha: &[f64], mu: &[f64], dist: &Tensor) -> Tensor {
    let s = dist.last_dim();
    let mut out = Vec::with_capacity(s * s);
    for (i, row) in dist.data().chunks(s).enumerate() {
        let (a, m) = (alpha[i], mu[i]);
        out.extend(row.iter().map(|&d| -a * (d - m).abs()));
    }
    Tensor::from_parts(vec![s, s], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_lastdim(&Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        close(s.data(), &[1.0 / 3.0; 3], 1e-15);

        let ninf = f64::NEG_INFINITY;
        let s = softmax_lastdim(&Tensor::vector(vec![0.0, ninf, ninf])).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0]);

        // exp(k - 3) / Σ exp(j - 3), evaluated independently
        let z: f64 = (1..=3).map(|k| ((k as f64) - 3.0).exp()).sum();
        let expect: Vec<f64> = (1..=3).map(|k| ((k as f64) - 3.0).exp() / z).collect();
        let s = softmax_lastdim(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        close(s.data(), &expect, 1e-15);
        close(s.data(), &[0.09003, 0.24473, 0.66524], 5e-6);
    }

    #[test]
    fn softmax_all_masked_row_is_zero() {
        let ninf = f64::NEG_INFINITY;
        let x = Tensor::matrix(2, 2, vec![ninf, ninf, 1.0, ninf]).unwrap();
        let s = softmax_lastdim(&x).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax_lastdim(&Tensor::vector(vec![0.0, f64::NAN])).is_err());
    }

    #[test]
    fn rmsnorm_examples() {
        let ones = Tensor::vector(vec![1.0; 4]);
        let y = rmsnorm(&Tensor::vector(vec![2.5; 4]), &ones, 0.0).unwrap();
        close(y.data(), &[1.0; 4], 1e-15);

        let y = rmsnorm(&Tensor::vector(vec![3.0, 4.0]), &Tensor::vector(vec![1.0, 1.0]), 0.0).unwrap();
        let r = 12.5f64.sqrt();
        close(y.data(), &[3.0 / r, 4.0 / r], 1e-15);
        close(y.data(), &[0.84853, 1.13137], 5e-6);

        let y = rmsnorm(&Tensor::vector(vec![3.0, 4.0]), &Tensor::vector(vec![0.0, 0.0]), 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);

        assert!(rmsnorm(&Tensor::vector(vec![1.0, 2.0]), &ones, 1e-6).is_err());
    }

    #[test]
    fn silu_examples() {
        let y = silu(&Tensor::vector(vec![0.0, 1.0, -1.0]));
        assert_eq!(y.data()[0], 0.0);
        close(&y.data()[1..], &[0.73106, -0.26894], 5e-6);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..16)) {
            let s = softmax_lastdim(&Tensor::vector(v)).unwrap();
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn rmsnorm_scale_equivariant_in_gain(
            x in prop::collection::vec(-10.0f64..10.0, 4),
            g in prop::collection::vec(-2.0f64..2.0, 4),
            c in -5.0f64..5.0,
        ) {
            let xt = Tensor::vector(x);
            let base = rmsnorm(&xt, &Tensor::vector(g.clone()), 1e-6).unwrap();
            let scaled = rmsnorm(&xt, &Tensor::vector(g.iter().map(|v| v * c).collect()), 1e-6).unwrap();
            for (a, b) in base.data().iter().zip(scaled.data()) {
                prop_assert!((c * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn silu_even_and_odd_parts(x in -30.0f64..30.0) {
            let (p, m) = (kernels::silu(x), kernels::silu(-x));
            prop_assert!((p + m - x * (2.0 * sigmoid(x) - 1.0)).abs() < 1e-12);
            prop_assert!((p - m - x).abs() < 1e-12);
        }
    }
}
