//! Closed-form algebra on Gaussian measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const DEFAULT_JITTER: f64 = 1e-6;
pub const MAX_JITTER_ATTEMPTS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian1D<T> {
    pub mean: T,
    pub variance: T,
}

impl<T: Scalar> Gaussian1D<T> {
    pub fn new(mean: T, variance: T) -> Result<Self> {
        if !(variance >= T::zero()) {
            return Err(Error::Domain(format!("variance {variance} is negative")));
        }
        Ok(Gaussian1D { mean, variance })
    }
}

/// Independent per-point, per-dimension Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianVector<T> {
    pub means: Matrix<T>,
    pub variances: Matrix<T>,
}

impl<T: Scalar> GaussianVector<T> {
    pub fn new(means: Matrix<T>, variances: Matrix<T>) -> Result<Self> {
        means.check_same_shape(&variances, "gaussian vector")?;
        if variances.as_slice().iter().any(|v| !(*v >= T::zero())) {
            return Err(Error::Domain("gaussian vector has negative variance".into()));
        }
        Ok(GaussianVector { means, variances })
    }

    /// Point masses at the given locations.
    pub fn degenerate(means: Matrix<T>) -> Self {
        let variances = Matrix::zeros(means.rows(), means.cols());
        GaussianVector { means, variances }
    }

    pub fn n_points(&self) -> usize {
        self.means.rows()
    }

    pub fn n_dims(&self) -> usize {
        self.means.cols()
    }

    pub fn get(&self, i: usize, d: usize) -> Gaussian1D<T> {
        Gaussian1D {
            mean: self.means[(i, d)],
            variance: self.variances[(i, d)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullGaussian<T> {
    pub mean: Vec<T>,
    pub covariance: Matrix<T>,
}

impl<T: Scalar> FullGaussian<T> {
    pub fn new(mean: Vec<T>, covariance: Matrix<T>) -> Result<Self> {
        if covariance.shape() != (mean.len(), mean.len()) {
            return Err(Error::Shape(format!(
                "mean of length {} with covariance {:?}",
                mean.len(),
                covariance.shape()
            )));
        }
        if !covariance.is_symmetric(T::of(1e-10)) {
            return Err(Error::Domain("covariance is not symmetric".into()));
        }
        Ok(FullGaussian { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log density at `x`.
    pub fn log_pdf(&self, x: &[T]) -> Result<T> {
        let l = self.covariance.cholesky()?;
        log_pdf_with_factor(x, &self.mean, &l)
    }
}

fn log_pdf_with_factor<T: Scalar>(x: &[T], mean: &[T], l: &Matrix<T>) -> Result<T> {
    let diff: Vec<T> = x.iter().zip(mean).map(|(&a, &b)| a - b).collect();
    let alpha = l.solve_lower(&Matrix::column_vector(&diff))?;
    let k = T::of_usize(x.len());
    Ok(-T::half() * (alpha.frobenius_sq() + l.cholesky_logdet() + k * T::ln_2pi()))
}

/// Squared Wasserstein-2 distance between univariate Gaussians.
pub fn w2_sq<T: Scalar>(a: Gaussian1D<T>, b: Gaussian1D<T>) -> Result<T> {
    if !(a.variance >= T::zero()) || !(b.variance >= T::zero()) {
        return Err(Error::Domain("w2_sq of a negative variance".into()));
    }
    let dm = a.mean - b.mean;
    let ds = a.variance.sqrt() - b.variance.sqrt();
    Ok(dm * dm + ds * ds)
}

/// Product of two Gaussian densities: `N(x|a,A)·N(x|b,B) = z·N(x|c,C)`.
///
/// Evaluated through `(A+B)⁻¹` only, so either factor may be singular
/// (a point mass) as long as the sum is not.
pub fn gaussian_product<T: Scalar>(
    a: &FullGaussian<T>,
    b: &FullGaussian<T>,
) -> Result<(T, FullGaussian<T>)> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("product of {}-d and {}-d Gaussians", a.dim(), b.dim())));
    }
    let s = a.covariance.add(&b.covariance)?;
    let (l, _) = robust_cholesky(&s)?;
    let log_z = log_pdf_with_factor(&a.mean, &b.mean, &l)?;
    // C = A (A+B)⁻¹ B ; c = B (A+B)⁻¹ a + A (A+B)⁻¹ b
    let s_inv_b = l.cholesky_solve(&b.covariance)?;
    let c = a.covariance.matmul(&s_inv_b)?;
    let c = c.add(&c.transpose())?.scale(T::half());
    let s_inv_a = l.cholesky_solve(&Matrix::column_vector(&a.mean))?;
    let s_inv_bm = l.cholesky_solve(&Matrix::column_vector(&b.mean))?;
    let mean = b
        .covariance
        .matmul(&s_inv_a)?
        .add(&a.covariance.matmul(&s_inv_bm)?)?
        .into_vec();
    Ok((log_z.exp(), FullGaussian { mean, covariance: c }))
}

/// `KL[q ‖ p]` between full-covariance Gaussians.
pub fn kl_gaussians<T: Scalar>(q: &FullGaussian<T>, p: &FullGaussian<T>) -> Result<T> {
    if q.dim() != p.dim() {
        return Err(Error::Shape(format!("KL between {}-d and {}-d Gaussians", q.dim(), p.dim())));
    }
    let lp = p.covariance.cholesky()?;
    let lq = q.covariance.cholesky()?;
    let k = T::of_usize(q.dim());
    let trace = lp.solve_lower(&lq)?.frobenius_sq();
    let diff: Vec<T> = p.mean.iter().zip(&q.mean).map(|(&a, &b)| a - b).collect();
    let maha = lp.solve_lower(&Matrix::column_vector(&diff))?.frobenius_sq();
    let kl = T::half() * (trace + maha - k + lp.cholesky_logdet() - lq.cholesky_logdet());
    Ok(kl.max(T::zero()))
}

/// Differential entropy of a diagonal Gaussian with the given variances.
pub fn diff_entropy_diag<T: Scalar>(variances: &[T]) -> Result<T> {
    let mut s = T::zero();
    for &v in variances {
        if !(v > T::zero()) {
            return Err(Error::Domain(format!("entropy of non-positive variance {v}")));
        }
        s = s + v.ln();
    }
    let n = T::of_usize(variances.len());
    Ok(T::half() * n * T::ln_2pi() + T::half() * s + T::half() * n)
}

/// Cholesky factor of `m + jI`, with `j` growing ×10 from `base_jitter` on failure.
///
/// Returns the factor and the jitter that succeeded.
pub fn chol_with_jitter<T: Scalar>(m: &Matrix<T>, base_jitter: T) -> Result<(Matrix<T>, T)> {
    let mut jitter = base_jitter;
    for _ in 0..MAX_JITTER_ATTEMPTS {
        if let Ok(l) = m.add_diag(jitter).cholesky() {
            return Ok((l, jitter));
        }
        jitter = jitter * T::of(10.0);
    }
    Err(Error::Cholesky {
        attempts: MAX_JITTER_ATTEMPTS,
        jitter: (jitter / T::of(10.0)).as_f64(),
    })
}

/// Plain Cholesky, falling back to escalating jitter only when it fails.
pub(crate) fn robust_cholesky<T: Scalar>(m: &Matrix<T>) -> Result<(Matrix<T>, T)> {
    match m.cholesky() {
        Ok(l) => Ok((l, T::zero())),
        Err(_) => chol_with_jitter(m, T::of(DEFAULT_JITTER)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn g(m: f64, v: f64) -> Gaussian1D<f64> {
        Gaussian1D::new(m, v).unwrap()
    }

    fn full(mean: &[f64], cov: &[&[f64]]) -> FullGaussian<f64> {
        FullGaussian::new(mean.to_vec(), Matrix::from_rows(cov).unwrap()).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix<f64> {
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        a.matmul_t(&a).unwrap().add_diag(0.3)
    }

    #[test]
    fn w2_examples() {
        assert_eq!(w2_sq(g(0.0, 1.0), g(0.0, 1.0)).unwrap(), 0.0);
        assert_eq!(w2_sq(g(0.0, 1.0), g(2.0, 1.0)).unwrap(), 4.0);
        assert_eq!(w2_sq(g(0.0, 4.0), g(0.0, 1.0)).unwrap(), 1.0);
        let bad = Gaussian1D { mean: 0.0, variance: -1.0 };
        assert!(matches!(w2_sq(bad, g(0.0, 1.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn product_examples() {
        let i2 = full(&[0.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let (_, r) = gaussian_product(&i2, &i2).unwrap();
        assert!(r.mean.iter().all(|m| m.abs() < 1e-15));
        assert!(r.covariance.max_abs_diff(&Matrix::identity(2).scale(0.5)) < 1e-15);

        let (z, r) = gaussian_product(&full(&[0.0], &[&[1.0]]), &full(&[2.0], &[&[1.0]])).unwrap();
        assert!((r.mean[0] - 1.0).abs() < 1e-15);
        assert!((r.covariance[(0, 0)] - 0.5).abs() < 1e-15);
        let expect = (-(4.0f64) / 4.0).exp() / (2.0 * std::f64::consts::PI * 2.0).sqrt();
        assert!((z - expect).abs() < 1e-15);
    }

    #[test]
    fn product_scale_matches_grid_integral_2d() {
        let a = full(&[0.3, -0.2], &[&[0.8, 0.2], &[0.2, 0.5]]);
        let b = full(&[-0.4, 0.6], &[&[0.6, -0.1], &[-0.1, 0.9]]);
        let (z, _) = gaussian_product(&a, &b).unwrap();
        // Trapezoid rule over [-8, 8]^2.
        let n = 801;
        let h = 16.0 / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [-8.0 + i as f64 * h, -8.0 + j as f64 * h];
                let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                let f = (a.log_pdf(&x).unwrap() + b.log_pdf(&x).unwrap()).exp();
                total += wi * wj * f * h * h;
            }
        }
        assert!((total - z).abs() < 1e-3, "grid {total} vs closed form {z}");
    }

    #[test]
    fn product_scale_matches_grid_integral_1d() {
        let a = full(&[0.7], &[&[0.3]]);
        let b = full(&[-1.1], &[&[2.0]]);
        let (z, r) = gaussian_product(&a, &b).unwrap();
        let n = 20001;
        let h = 40.0 / (n - 1) as f64;
        let total: f64 = (0..n)
            .map(|i| {
                let x = [-20.0 + i as f64 * h];
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                w * h * (a.log_pdf(&x).unwrap() + b.log_pdf(&x).unwrap()).exp()
            })
            .sum();
        assert!((total - z).abs() < 1e-10);
        let inv = 1.0 / (1.0 / 0.3 + 1.0 / 2.0);
        assert!((r.covariance[(0, 0)] - inv).abs() < 1e-14);
        assert!((r.mean[0] - inv * (0.7 / 0.3 - 1.1 / 2.0)).abs() < 1e-14);
    }

    #[test]
    fn kl_examples() {
        let q = full(&[0.0], &[&[1.0]]);
        let p = full(&[0.0], &[&[std::f64::consts::E]]);
        let want = 1.0 / (2.0 * std::f64::consts::E);
        assert!((kl_gaussians(&q, &p).unwrap() - want).abs() < 1e-15);
        assert!(kl_gaussians(&q, &q).unwrap().abs() < 1e-15);
        let bad = FullGaussian {
            mean: vec![0.0, 0.0],
            covariance: Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap(),
        };
        assert!(kl_gaussians(&bad, &bad).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = FullGaussian::new(vec![0.2, -0.5, 1.0], random_spd(&mut rng, 3)).unwrap();
        let p = FullGaussian::new(vec![-0.3, 0.1, 0.4], random_spd(&mut rng, 3)).unwrap();
        let exact = kl_gaussians(&q, &p).unwrap();
        let lq = q.covariance.cholesky().unwrap();
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x = lq.matmul(&Matrix::column_vector(&eps)).unwrap();
            let x: Vec<f64> = x.as_slice().iter().zip(&q.mean).map(|(a, b)| a + b).collect();
            let d = q.log_pdf(&x).unwrap() - p.log_pdf(&x).unwrap();
            s += d;
            s2 += d * d;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} ± {se} vs {exact}");
    }

    #[test]
    fn entropy_examples() {
        let h1 = 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5;
        assert!((diff_entropy_diag(&[1.0f64]).unwrap() - 1.4189385332046727).abs() < 1e-15);
        let e2 = std::f64::consts::E.powi(2);
        assert!((diff_entropy_diag(&[e2]).unwrap() - (h1 + 1.0)).abs() < 1e-14);
        assert!((diff_entropy_diag(&[1.0, 1.0]).unwrap() - 2.0 * h1).abs() < 1e-14);
        assert!(diff_entropy_diag(&[0.0]).is_err());
    }

    #[test]
    fn jitter_examples() {
        let (l, j) = chol_with_jitter(&Matrix::<f64>::identity(3), 1e-6).unwrap();
        assert_eq!(j, 1e-6);
        assert!(l.max_abs_diff(&Matrix::identity(3)) < 1e-6);

        let m = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let (l, j) = chol_with_jitter(&m, 1e-6).unwrap();
        assert!(j >= 1e-6);
        assert!(l.matmul_t(&l).unwrap().max_abs_diff(&m.add_diag(j)) < 1e-8);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_spd(&mut rng, 20);
        let (l, j) = chol_with_jitter(&m, 1e-6).unwrap();
        assert!(l.matmul_t(&l).unwrap().max_abs_diff(&m.add_diag(j)) < 1e-10);
    }

    #[test]
    fn jitter_failure_reports_last_attempt() {
        let m = Matrix::from_rows(&[[-1.0, 0.0], [0.0, -1.0]]).unwrap();
        match chol_with_jitter(&m, 1e-6) {
            Err(Error::Cholesky { attempts, jitter }) => {
                assert_eq!(attempts, 6);
                assert!((jitter - 1e-1).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn arb_gauss() -> impl Strategy<Value = Gaussian1D<f64>> {
        (-5.0..5.0f64, 0.0..4.0f64).prop_map(|(m, v)| Gaussian1D { mean: m, variance: v })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn w2_is_a_symmetric_metric(a in arb_gauss(), b in arb_gauss(), c in arb_gauss()) {
            let ab = w2_sq(a, b).unwrap();
            prop_assert_eq!(ab, w2_sq(b, a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(w2_sq(a, a).unwrap(), 0.0);
            let (dab, dbc, dac) = (ab.sqrt(), w2_sq(b, c).unwrap().sqrt(), w2_sq(a, c).unwrap().sqrt());
            prop_assert!(dac <= dab + dbc + 1e-12);
        }

        #[test]
        fn entropy_is_monotone(v in prop::collection::vec(1e-3..10.0f64, 1..6), k in 0usize..6, bump in 1e-6..2.0f64) {
            let k = k % v.len();
            let mut w = v.clone();
            w[k] += bump;
            prop_assert!(diff_entropy_diag(&w).unwrap() > diff_entropy_diag(&v).unwrap());
        }

        #[test]
        fn kl_is_nonnegative(seed in 0u64..10_000, n in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mq: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mp: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = FullGaussian::new(mq, random_spd(&mut rng, n)).unwrap();
            let p = FullGaussian::new(mp, random_spd(&mut rng, n)).unwrap();
            prop_assert!(kl_gaussians(&q, &p).unwrap() >= 0.0);
            prop_assert!(kl_gaussians(&q, &q).unwrap().abs() < 1e-10);
        }
    }
}
