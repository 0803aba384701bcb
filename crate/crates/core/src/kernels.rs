//! Reference kernel evaluations on plain matrices.
//!
//! The training path evaluates the same kernels on the autodiff tape
//! (`svgp`); these functions are the straightforward versions used for
//! prediction-free checks, diagnostics and as the oracle for the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussmath::{w2_sq, GaussianVector};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Kernel hyperparameters, stored as logs.
///
/// `log_w2_lengthscales` decouples the lengthscales of the Wasserstein
/// factor of the hybrid kernel; when absent both factors share
/// `log_lengthscales`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de>"))]
pub struct KernelParams<T> {
    pub log_variance: T,
    pub log_lengthscales: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_w2_lengthscales: Option<Vec<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// Squared exponential with ARD on Euclidean inputs.
    Se,
    /// SE on samples times a Wasserstein-2 RBF factor on marginals.
    Hybrid,
}

impl<T: Scalar> KernelParams<T> {
    pub fn new(signal_variance: T, lengthscales: &[T]) -> Result<Self> {
        if !(signal_variance > T::zero()) || lengthscales.iter().any(|l| !(*l > T::zero())) {
            return Err(Error::Domain("kernel parameters must be positive".into()));
        }
        Ok(KernelParams {
            log_variance: signal_variance.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_w2_lengthscales: None,
        })
    }

    /// Same signal variance and lengthscale in every dimension.
    pub fn isotropic(signal_variance: T, lengthscale: T, dims: usize) -> Result<Self> {
        Self::new(signal_variance, &vec![lengthscale; dims])
    }

    pub fn with_decoupled_w2(mut self) -> Self {
        self.log_w2_lengthscales = Some(self.log_lengthscales.clone());
        self
    }

    pub fn signal_variance(&self) -> T {
        self.log_variance.exp()
    }

    pub fn lengthscales(&self) -> Vec<T> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn w2_lengthscales(&self) -> Vec<T> {
        self.log_w2_lengthscales
            .as_ref()
            .unwrap_or(&self.log_lengthscales)
            .iter()
            .map(|l| l.exp())
            .collect()
    }

    pub fn dims(&self) -> usize {
        self.log_lengthscales.len()
    }

    fn check_dims(&self, d: usize, what: &str) -> Result<()> {
        if d != self.dims() {
            return Err(Error::Shape(format!(
                "{what} has {d} columns but the kernel has {} lengthscales",
                self.dims()
            )));
        }
        Ok(())
    }
}

/// Sum over dimensions of squared differences divided by squared lengthscales.
fn scaled_sq_dist<T: Scalar>(a: &[T], b: &[T], inv_l2: &[T]) -> T {
    let mut s = T::zero();
    for ((&x, &y), &w) in a.iter().zip(b).zip(inv_l2) {
        let d = x - y;
        s = s + d * d * w;
    }
    s
}

fn inv_sq<T: Scalar>(ls: &[T]) -> Vec<T> {
    ls.iter().map(|&l| (l * l).recip()).collect()
}

pub fn se_ard<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>, p: &KernelParams<T>) -> Result<Matrix<T>> {
    p.check_dims(x.cols(), "x")?;
    p.check_dims(y.cols(), "y")?;
    let s2 = p.signal_variance();
    let w: Vec<T> = inv_sq(&p.lengthscales());
    Ok(Matrix::from_fn(x.rows(), y.rows(), |i, j| {
        s2 * (-scaled_sq_dist(x.row(i), y.row(j), &w)).exp()
    }))
}

fn w2_exponent<T: Scalar>(
    a: &GaussianVector<T>,
    b: &GaussianVector<T>,
    i: usize,
    j: usize,
    w: &[T],
) -> Result<T> {
    let mut s = T::zero();
    for (d, &wd) in w.iter().enumerate() {
        s = s + w2_sq(a.get(i, d), b.get(j, d))? * wd;
    }
    Ok(s)
}

fn check_dist<T: Scalar>(g: &GaussianVector<T>) -> Result<()> {
    g.means.check_same_shape(&g.variances, "gaussian vector")?;
    if g.variances.as_slice().iter().any(|v| !(*v >= T::zero())) {
        return Err(Error::Domain("negative variance in kernel input".into()));
    }
    Ok(())
}

/// Wasserstein-2 RBF kernel between diagonal Gaussian measures.
pub fn w2_ard<T: Scalar>(
    a: &GaussianVector<T>,
    b: &GaussianVector<T>,
    p: &KernelParams<T>,
) -> Result<Matrix<T>> {
    check_dist(a)?;
    check_dist(b)?;
    p.check_dims(a.n_dims(), "a")?;
    p.check_dims(b.n_dims(), "b")?;
    let s2 = p.signal_variance();
    let w: Vec<T> = inv_sq(&p.w2_lengthscales());
    let mut k = Matrix::zeros(a.n_points(), b.n_points());
    for i in 0..a.n_points() {
        for j in 0..b.n_points() {
            k[(i, j)] = s2 * (-w2_exponent(a, b, i, j, &w)?).exp();
        }
    }
    Ok(k)
}

/// Unit-amplitude Wasserstein factor `exp(−Σ_d W₂²/l_d²)`.
fn w2_factor<T: Scalar>(
    a: &GaussianVector<T>,
    b: &GaussianVector<T>,
    p: &KernelParams<T>,
) -> Result<Matrix<T>> {
    check_dist(a)?;
    check_dist(b)?;
    let w: Vec<T> = inv_sq(&p.w2_lengthscales());
    let mut k = Matrix::zeros(a.n_points(), b.n_points());
    for i in 0..a.n_points() {
        for j in 0..b.n_points() {
            k[(i, j)] = (-w2_exponent(a, b, i, j, &w)?).exp();
        }
    }
    Ok(k)
}

fn check_hybrid_shapes<T: Scalar>(
    samples: &Matrix<T>,
    dist: &GaussianVector<T>,
    p: &KernelParams<T>,
) -> Result<()> {
    if samples.shape() != dist.means.shape() {
        return Err(Error::Shape(format!(
            "samples {:?} vs distributions {:?}",
            samples.shape(),
            dist.means.shape()
        )));
    }
    p.check_dims(samples.cols(), "samples")
}

/// Hybrid kernel: SE on samples times the unit-amplitude W₂ factor on marginals.
pub fn hybrid<T: Scalar>(
    samples_a: &Matrix<T>,
    samples_b: &Matrix<T>,
    dist_a: &GaussianVector<T>,
    dist_b: &GaussianVector<T>,
    p: &KernelParams<T>,
) -> Result<Matrix<T>> {
    check_hybrid_shapes(samples_a, dist_a, p)?;
    check_hybrid_shapes(samples_b, dist_b, p)?;
    se_ard(samples_a, samples_b, p)?.hadamard(&w2_factor(dist_a, dist_b, p)?)
}

/// Hybrid kernel averaged over all pairs of sample sets.
pub fn hybrid_multisample<T: Scalar>(
    sample_sets_a: &[Matrix<T>],
    sample_sets_b: &[Matrix<T>],
    dist_a: &GaussianVector<T>,
    dist_b: &GaussianVector<T>,
    p: &KernelParams<T>,
) -> Result<Matrix<T>> {
    if sample_sets_a.is_empty() || sample_sets_b.is_empty() {
        return Err(Error::Argument("hybrid_multisample needs at least one sample set".into()));
    }
    let mut acc = Matrix::zeros(dist_a.n_points(), dist_b.n_points());
    for sa in sample_sets_a {
        check_hybrid_shapes(sa, dist_a, p)?;
        for sb in sample_sets_b {
            check_hybrid_shapes(sb, dist_b, p)?;
            acc.add_assign(&se_ard(sa, sb, p)?);
        }
    }
    let pairs = T::of_usize(sample_sets_a.len() * sample_sets_b.len());
    acc.scale(pairs.recip()).hadamard(&w2_factor(dist_a, dist_b, p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, d: usize, lo: f64, hi: f64) -> Matrix<f64> {
        Matrix::from_fn(n, d, |_, _| rng.random_range(lo..hi))
    }

    fn rand_dist(rng: &mut ChaCha8Rng, n: usize, d: usize) -> GaussianVector<f64> {
        GaussianVector::new(rand_mat(rng, n, d, -2.0, 2.0), rand_mat(rng, n, d, 0.0, 1.5)).unwrap()
    }

    fn params(d: usize) -> KernelParams<f64> {
        KernelParams::isotropic(1.351, 1.351, d).unwrap()
    }

    #[test]
    fn se_single_point_is_signal_variance() {
        let x = Matrix::from_rows(&[[0.3, -1.0]]).unwrap();
        let p = KernelParams::new(2.5f64, &[0.7, 1.9]).unwrap();
        let k = se_ard(&x, &x, &p).unwrap();
        assert!((k[(0, 0)] - 2.5).abs() < 1e-15);
        let far = Matrix::from_rows(&[[1e3, 1e3]]).unwrap();
        assert_eq!(se_ard(&x, &far, &p).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn se_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_mat(&mut rng, 5, 3, -2.0, 2.0);
        let p = params(3);
        let k = se_ard(&x, &x, &p).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for d in 0..3 {
                    s += (x[(i, d)] - x[(j, d)]).powi(2) / (1.351f64 * 1.351);
                }
                assert!((k[(i, j)] - 1.351 * (-s).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn se_rejects_dimension_mismatch() {
        let x = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(se_ard(&x, &x, &params(2)), Err(Error::Shape(_))));
    }

    #[test]
    fn w2_with_point_masses_is_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = rand_mat(&mut rng, 6, 2, -2.0, 2.0);
        let p = KernelParams::new(0.8, &[0.5, 2.0]).unwrap();
        let a = GaussianVector::degenerate(m.clone());
        assert_eq!(w2_ard(&a, &a, &p).unwrap(), se_ard(&m, &m, &p).unwrap());
        let d = rand_dist(&mut rng, 4, 2);
        let k = w2_ard(&d, &d, &p).unwrap();
        assert!(k.diag().iter().all(|v| (v - 0.8).abs() < 1e-15));
    }

    #[test]
    fn hybrid_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = params(3);
        let s = rand_mat(&mut rng, 5, 3, -2.0, 2.0);
        let d = rand_dist(&mut rng, 5, 3);
        // Identical distributions pointwise: W₂ factor is exactly one.
        let same = GaussianVector::new(Matrix::zeros(5, 3), Matrix::filled(5, 3, 0.4)).unwrap();
        assert_eq!(hybrid(&s, &s, &same, &same, &p).unwrap(), se_ard(&s, &s, &p).unwrap());
        // Equal samples: diagonal equals the W₂ kernel's diagonal.
        let h = hybrid(&s, &s, &d, &d, &p).unwrap();
        let w = w2_ard(&d, &d, &p).unwrap();
        for i in 0..5 {
            assert!((h[(i, i)] - w[(i, i)]).abs() < 1e-15);
        }
        // Point masses at the samples reduce to SE on the samples.
        let pm = GaussianVector::degenerate(s.clone());
        let h = hybrid(&s, &s, &pm, &pm, &p).unwrap();
        let k = se_ard(&s, &s, &p).unwrap();
        for (a, b) in h.as_slice().iter().zip(k.as_slice()) {
            assert!((a - b * b / 1.351).abs() < 1e-12);
        }
    }

    #[test]
    fn hybrid_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = KernelParams::new(1.7, &[0.9, 1.4]).unwrap();
        let (sa, sb) = (rand_mat(&mut rng, 4, 2, -2.0, 2.0), rand_mat(&mut rng, 3, 2, -2.0, 2.0));
        let (da, db) = (rand_dist(&mut rng, 4, 2), rand_dist(&mut rng, 3, 2));
        let h = hybrid(&sa, &sb, &da, &db, &p).unwrap();
        let se = se_ard(&sa, &sb, &p).unwrap();
        let w2 = w2_ard(&da, &db, &p).unwrap();
        let ls = [0.9f64, 1.4];
        for i in 0..4 {
            for j in 0..3 {
                assert!((h[(i, j)] - se[(i, j)] * w2[(i, j)] / 1.7).abs() < 1e-12);
                let mut e = 0.0;
                for d in 0..2 {
                    let dm = sa[(i, d)] - sb[(j, d)];
                    let w = (da.means[(i, d)] - db.means[(j, d)]).powi(2)
                        + (da.variances[(i, d)].sqrt() - db.variances[(j, d)].sqrt()).powi(2);
                    e += (dm * dm + w) / (ls[d] * ls[d]);
                }
                assert!((h[(i, j)] - 1.7 * (-e).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multisample_reductions_and_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = params(2);
        let s = rand_mat(&mut rng, 4, 2, -2.0, 2.0);
        let d = rand_dist(&mut rng, 4, 2);
        let h = hybrid(&s, &s, &d, &d, &p).unwrap();
        let one = [s.clone()];
        assert_eq!(hybrid_multisample(&one, &one, &d, &d, &p).unwrap(), h);
        let two = [s.clone(), s.clone()];
        assert!(hybrid_multisample(&two, &two, &d, &d, &p).unwrap().max_abs_diff(&h) < 1e-15);
        let empty: [Matrix<f64>; 0] = [];
        assert!(matches!(hybrid_multisample(&empty, &one, &d, &d, &p), Err(Error::Argument(_))));

        let sets: Vec<Matrix<f64>> = (0..4).map(|_| rand_mat(&mut rng, 4, 2, -2.0, 2.0)).collect();
        let k = hybrid_multisample(&sets, &sets, &d, &d, &p).unwrap();
        let l2 = 1.351f64 * 1.351;
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for a in &sets {
                    for b in &sets {
                        let mut e = 0.0;
                        for dd in 0..2 {
                            e += (a[(i, dd)] - b[(j, dd)]).powi(2) / l2;
                        }
                        acc += (-e).exp();
                    }
                }
                let mut w = 0.0;
                for dd in 0..2 {
                    w += w2_sq(d.get(i, dd), d.get(j, dd)).unwrap() / l2;
                }
                let want = 1.351 * acc / 16.0 * (-w).exp();
                assert!((k[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_matrices_are_bitwise_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let p = params(3);
        let s = rand_mat(&mut rng, 7, 3, -2.0, 2.0);
        let d = rand_dist(&mut rng, 7, 3);
        for k in [
            se_ard(&s, &s, &p).unwrap(),
            w2_ard(&d, &d, &p).unwrap(),
            hybrid(&s, &s, &d, &d, &p).unwrap(),
        ] {
            assert_eq!(k, k.transpose());
        }
    }

    #[test]
    fn w2_psd_on_ten_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = rand_dist(&mut rng, 10, 2);
        let (vals, _) = sym_eigen(&w2_ard(&d, &d, &params(2)).unwrap()).unwrap();
        assert!(*vals.last().unwrap() >= -1e-9);
    }

    #[test]
    fn decoupled_lengthscales_only_touch_w2_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut p = params(2).with_decoupled_w2();
        let s = rand_mat(&mut rng, 3, 2, -1.0, 1.0);
        let d = rand_dist(&mut rng, 3, 2);
        let base = hybrid(&s, &s, &d, &d, &p).unwrap();
        p.log_w2_lengthscales = Some(vec![30.0, 30.0]);
        let wide = hybrid(&s, &s, &d, &d, &p).unwrap();
        assert!(wide.max_abs_diff(&se_ard(&s, &s, &p).unwrap()) < 1e-12);
        assert!(base.max_abs_diff(&wide) > 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn se_decays_with_distance(x in -3.0..3.0f64, y in -3.0..3.0f64, bump in 1e-3..2.0f64) {
            let p = params(1);
            let a = Matrix::from_rows(&[[x]]).unwrap();
            let near = Matrix::from_rows(&[[y]]).unwrap();
            let away = if y >= x { y + bump } else { y - bump };
            let far = Matrix::from_rows(&[[away]]).unwrap();
            prop_assume!(se_ard(&a, &near, &p).unwrap()[(0, 0)] > 1e-300);
            prop_assert!(se_ard(&a, &far, &p).unwrap()[(0, 0)] < se_ard(&a, &near, &p).unwrap()[(0, 0)]);
        }

        #[test]
        fn w2_factor_decays_with_variance_gap(v in 0.0..2.0f64, bump in 1e-3..2.0f64) {
            let p = params(1);
            let a = GaussianVector::new(Matrix::from_rows(&[[0.0]]).unwrap(), Matrix::from_rows(&[[v]]).unwrap()).unwrap();
            let b = GaussianVector::new(Matrix::from_rows(&[[0.0]]).unwrap(), Matrix::from_rows(&[[v + bump]]).unwrap()).unwrap();
            prop_assert!(w2_ard(&a, &b, &p).unwrap()[(0, 0)] < w2_ard(&a, &a, &p).unwrap()[(0, 0)]);
        }
    }
}
