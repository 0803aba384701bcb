//! Predictive moments of an exact GP at a Gaussian-distributed input.
//!
//! Three estimators: Monte Carlo over input draws, a second-order Taylor
//! expansion, and closed-form moments for the SE kernel. All three target the
//! latent function value at the uncertain input; observation noise enters only
//! through the training covariance.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gaussmath::{gaussian_product, FullGaussian};
use crate::kernels::{se_ard, KernelParams};
use crate::linalg::Matrix;
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;

/// An uncertain test input `x* ~ N(mean, diag(variances))`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyInput<T> {
    pub mean: Vec<T>,
    pub variances: Vec<T>,
}

impl<T: Scalar> NoisyInput<T> {
    pub fn new(mean: Vec<T>, variances: Vec<T>) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(Error::Shape(format!(
                "input mean has {} dims, covariance {}",
                mean.len(),
                variances.len()
            )));
        }
        if variances.iter().any(|v| !(*v >= T::zero())) {
            return Err(Error::Domain("input variances must be non-negative".into()));
        }
        Ok(NoisyInput { mean, variances })
    }

    pub fn point(mean: Vec<T>) -> Self {
        let variances = vec![T::zero(); mean.len()];
        NoisyInput { mean, variances }
    }
}

/// GP regression posterior with an SE kernel and Gaussian noise.
#[derive(Clone, Debug)]
pub struct ExactGp<T> {
    pub x: Matrix<T>,
    pub y: Matrix<T>,
    pub kernel: KernelParams<T>,
    pub noise_variance: T,
    chol: Matrix<T>,
    alpha: Matrix<T>,
}

impl<T: Scalar> ExactGp<T> {
    pub fn new(x: Matrix<T>, y: Matrix<T>, kernel: KernelParams<T>, noise_variance: T) -> Result<Self> {
        if y.shape() != (x.rows(), 1) {
            return Err(Error::Shape(format!("targets {:?} for {} inputs", y.shape(), x.rows())));
        }
        if !(noise_variance >= T::zero()) {
            return Err(Error::Domain("noise variance must be non-negative".into()));
        }
        let chol = se_ard(&x, &x, &kernel)?.add_diag(noise_variance).cholesky()?;
        let alpha = chol.cholesky_solve(&y)?;
        Ok(ExactGp {
            x,
            y,
            kernel,
            noise_variance,
            chol,
            alpha,
        })
    }

    pub fn dims(&self) -> usize {
        self.x.cols()
    }

    /// `K⁻¹y`, with `K` including the noise diagonal.
    pub fn weights(&self) -> &Matrix<T> {
        &self.alpha
    }

    pub fn k_inverse(&self) -> Result<Matrix<T>> {
        self.chol.cholesky_inverse()
    }

    /// Latent predictive mean and variance at each row of `xs`.
    pub fn predict(&self, xs: &Matrix<T>) -> Result<(Vec<T>, Vec<T>)> {
        let ks = se_ard(&self.x, xs, &self.kernel)?;
        let mean = ks.t_matmul(&self.alpha)?.into_vec();
        let v = self.chol.solve_lower(&ks)?;
        let s2 = self.kernel.signal_variance();
        let var = v.map(|a| a * a).col_sums().into_iter().map(|q| (s2 - q).max(T::zero())).collect();
        Ok((mean, var))
    }

    /// `log N(y | 0, K + σ²_noise I)`.
    pub fn log_marginal_likelihood(&self) -> T {
        let n = T::of_usize(self.x.rows());
        let quad = crate::linalg::dot(self.y.as_slice(), self.alpha.as_slice());
        -T::half() * (quad + self.chol.cholesky_logdet() + n * T::ln_2pi())
    }

    fn check_input(&self, input: &NoisyInput<T>) -> Result<()> {
        if input.mean.len() != self.dims() {
            return Err(Error::Shape(format!(
                "{}-d input for a {}-d GP",
                input.mean.len(),
                self.dims()
            )));
        }
        Ok(())
    }

    /// Gradients and diagonal Hessians of the predictive mean and variance at `x`.
    ///
    /// Returns `(μ, ∂μ, ∂²μ, σ², ∂σ², ∂²σ²)` with per-dimension derivatives.
    pub fn derivatives(&self, x: &[T]) -> Result<Derivatives<T>> {
        let d = self.dims();
        let n = self.x.rows();
        let xs = Matrix::row_vector(x);
        let k = se_ard(&self.x, &xs, &self.kernel)?;
        let inv_l2: Vec<T> = self.kernel.lengthscales().iter().map(|l| (*l * *l).recip()).collect();
        let two = T::two();
        let four = T::of(4.0);
        let k_inv_k = self.chol.cholesky_solve(&k)?;
        let (mean, var) = self.predict(&xs)?;
        let mut out = Derivatives {
            mean: mean[0],
            mean_grad: vec![T::zero(); d],
            mean_hess_diag: vec![T::zero(); d],
            var: var[0],
            var_grad: vec![T::zero(); d],
            var_hess_diag: vec![T::zero(); d],
        };
        for dim in 0..d {
            let mut g = Matrix::zeros(n, 1);
            let mut h = Matrix::zeros(n, 1);
            for i in 0..n {
                let r = x[dim] - self.x[(i, dim)];
                let ki = k[(i, 0)];
                g[(i, 0)] = -two * r * inv_l2[dim] * ki;
                h[(i, 0)] = (four * r * r * inv_l2[dim] * inv_l2[dim] - two * inv_l2[dim]) * ki;
            }
            out.mean_grad[dim] = crate::linalg::dot(g.as_slice(), self.alpha.as_slice());
            out.mean_hess_diag[dim] = crate::linalg::dot(h.as_slice(), self.alpha.as_slice());
            let k_inv_g = self.chol.cholesky_solve(&g)?;
            out.var_grad[dim] = -two * crate::linalg::dot(g.as_slice(), k_inv_k.as_slice());
            out.var_hess_diag[dim] = -two
                * (crate::linalg::dot(h.as_slice(), k_inv_k.as_slice())
                    + crate::linalg::dot(g.as_slice(), k_inv_g.as_slice()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Derivatives<T> {
    pub mean: T,
    pub mean_grad: Vec<T>,
    pub mean_hess_diag: Vec<T>,
    pub var: T,
    pub var_grad: Vec<T>,
    pub var_hess_diag: Vec<T>,
}

/// Moments with Monte Carlo standard errors (zero for deterministic estimators).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments<T> {
    pub mean: T,
    pub variance: T,
    pub mean_se: T,
    pub variance_se: T,
}

const MC_BATCH: usize = 4096;

/// Mean and variance of the equal-weight mixture over `t` input draws.
pub fn mc_moments<T: Scalar>(gp: &ExactGp<T>, input: &NoisyInput<T>, t: usize, seed: u64) -> Result<Moments<T>> {
    gp.check_input(input)?;
    if t == 0 {
        return Err(Error::Argument("mc_moments needs at least one draw".into()));
    }
    let d = gp.dims();
    let sd: Vec<T> = input.variances.iter().map(|v| v.sqrt()).collect();
    let mut rng = rng::stream(seed, 0, Purpose::Eval);
    let mut means = Vec::with_capacity(t);
    let mut vars = Vec::with_capacity(t);
    let mut done = 0;
    while done < t {
        let b = MC_BATCH.min(t - done);
        let xs = Matrix::from_fn(b, d, |_, j| {
            let e: f64 = StandardNormal.sample(&mut rng);
            input.mean[j] + sd[j] * T::of(e)
        });
        let (m, v) = gp.predict(&xs)?;
        means.extend(m);
        vars.extend(v);
        done += b;
    }
    // Accumulate in f64 so long runs in f32 keep their precision.
    let tf = t as f64;
    let m: f64 = means.iter().map(|v| v.as_f64()).sum::<f64>() / tf;
    let second: Vec<f64> = means
        .iter()
        .zip(&vars)
        .map(|(mu, s2)| s2.as_f64() + (mu.as_f64() - m).powi(2))
        .collect();
    let variance = second.iter().sum::<f64>() / tf;
    let spread = |xs: &mut dyn Iterator<Item = f64>, centre: f64| -> f64 {
        if t < 2 {
            return 0.0;
        }
        let ss: f64 = xs.map(|x| (x - centre).powi(2)).sum();
        (ss / (tf - 1.0) / tf).sqrt()
    };
    let mean_se = spread(&mut means.iter().map(|v| v.as_f64()), m);
    let variance_se = spread(&mut second.iter().copied(), variance);
    Ok(Moments {
        mean: T::of(m),
        variance: T::of(variance),
        mean_se: T::of(mean_se),
        variance_se: T::of(variance_se),
    })
}

/// Second-order Taylor expansion of the predictive mean and variance around the input mean.
pub fn taylor_moments<T: Scalar>(gp: &ExactGp<T>, input: &NoisyInput<T>) -> Result<Moments<T>> {
    gp.check_input(input)?;
    let der = gp.derivatives(&input.mean)?;
    let mut mean = der.mean;
    let mut variance = der.var;
    for d in 0..gp.dims() {
        let s = input.variances[d];
        mean = mean + T::half() * s * der.mean_hess_diag[d];
        variance = variance + s * (T::half() * der.var_hess_diag[d] + der.mean_grad[d] * der.mean_grad[d]);
    }
    Ok(Moments {
        mean,
        variance,
        mean_se: T::zero(),
        variance_se: T::zero(),
    })
}

/// Closed-form moments for the SE kernel.
///
/// The kernel `σ² exp(−Σ(x−y)²/l²)` is `c·N(x|y, W)` with `W = diag(l²/2)`
/// and `c = (2π)^{D/2}|W|^{1/2}σ²`. Expectations of one and two kernel
/// factors under the input density become Gaussian products:
/// `Ψᵢ = c·N(μ|xᵢ, W+Σ)` and `Ψᵢⱼ = c²·N(xᵢ|xⱼ, 2W)·N(μ|(xᵢ+xⱼ)/2, W/2+Σ)`.
pub fn exact_moments<T: Scalar>(gp: &ExactGp<T>, input: &NoisyInput<T>) -> Result<Moments<T>> {
    gp.check_input(input)?;
    let d = gp.dims();
    let n = gp.x.rows();
    let w: Vec<T> = gp.kernel.lengthscales().iter().map(|l| *l * *l * T::half()).collect();
    let w_mat = Matrix::from_diag(&w);
    let log_c = T::half() * T::of_usize(d) * T::ln_2pi()
        + T::half() * w.iter().map(|v| v.ln()).sum::<T>()
        + gp.kernel.log_variance;
    let c = log_c.exp();
    let x_star = FullGaussian::new(input.mean.clone(), Matrix::from_diag(&input.variances))?;
    let centred = |i: usize| FullGaussian::new(gp.x.row(i).to_vec(), w_mat.clone());

    let mut psi_i = vec![T::zero(); n];
    for (i, p) in psi_i.iter_mut().enumerate() {
        let (z, _) = gaussian_product(&centred(i)?, &x_star)?;
        *p = c * z;
    }
    let mut psi_ij = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let (z_pair, mid) = gaussian_product(&centred(i)?, &centred(j)?)?;
            let (z_in, _) = gaussian_product(&mid, &x_star)?;
            let v = c * c * z_pair * z_in;
            psi_ij[(i, j)] = v;
            psi_ij[(j, i)] = v;
        }
    }
    let beta = gp.weights().as_slice();
    let mean = crate::linalg::dot(beta, &psi_i);
    let k_inv = gp.k_inverse()?;
    let mut corr = T::zero();
    for i in 0..n {
        for j in 0..n {
            corr = corr + (k_inv[(i, j)] - beta[i] * beta[j]) * psi_ij[(i, j)];
        }
    }
    let psi = gp.kernel.signal_variance();
    Ok(Moments {
        mean,
        variance: psi - corr - mean * mean,
        mean_se: T::zero(),
        variance_se: T::zero(),
    })
}
