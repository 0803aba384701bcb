//! Observation models.

use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood<T> {
    /// Additive Gaussian noise with variance `exp(log_variance)`.
    Gaussian { log_variance: T },
    /// Categorical over `n_classes` with softmax link.
    Softmax { n_classes: usize },
}

/// Observed targets for a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets<T> {
    Real(Matrix<T>),
    Classes(Vec<usize>),
}

impl<T: Scalar> Targets<T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(y) => y.rows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            Targets::Real(y) => Targets::Real(y.select_rows(idx)),
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

impl<T: Scalar> Likelihood<T> {
    pub fn gaussian(variance: T) -> Result<Self> {
        if !(variance > T::zero()) {
            return Err(Error::Domain(format!("noise variance {variance} must be positive")));
        }
        Ok(Likelihood::Gaussian {
            log_variance: variance.ln(),
        })
    }

    pub fn noise_variance(&self) -> Option<T> {
        match self {
            Likelihood::Gaussian { log_variance } => Some(log_variance.exp()),
            Likelihood::Softmax { .. } => None,
        }
    }

    /// Latent output width the likelihood expects.
    pub fn latent_dim(&self, target_dim: usize) -> usize {
        match self {
            Likelihood::Gaussian { .. } => target_dim,
            Likelihood::Softmax { n_classes } => *n_classes,
        }
    }

    fn check_targets(&self, y: &Targets<T>, n: usize, d: usize) -> Result<()> {
        if y.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} outputs", y.len())));
        }
        match (self, y) {
            (Likelihood::Gaussian { .. }, Targets::Real(m)) if m.cols() == d => Ok(()),
            (Likelihood::Softmax { n_classes }, Targets::Classes(c)) => {
                if d != *n_classes {
                    return Err(Error::Shape(format!("{d} latent outputs for {n_classes} classes")));
                }
                match c.iter().find(|&&k| k >= *n_classes) {
                    Some(k) => Err(Error::Argument(format!("class index {k} out of range"))),
                    None => Ok(()),
                }
            }
            _ => Err(Error::Argument("targets do not match the likelihood".into())),
        }
    }

    /// Summed expected log-likelihood on the tape.
    ///
    /// Gaussian: analytic in the latent mean and total variance. Softmax:
    /// one Monte Carlo sample, the provided latent samples.
    pub(crate) fn expected_log_lik_graph(
        &self,
        tape: &Tape<T>,
        log_variance: Option<Var>,
        mean: Var,
        var: Var,
        samples: Var,
        y: &Targets<T>,
    ) -> Result<Var> {
        let (n, d) = tape.shape(mean);
        self.check_targets(y, n, d)?;
        match (self, y) {
            (Likelihood::Gaussian { .. }, Targets::Real(ym)) => {
                let lv = log_variance.expect("gaussian likelihood binds its variance");
                let count = T::of_usize(n * d);
                let resid = tape.square(tape.sub(tape.constant(ym.clone()), mean)?);
                let spread = tape.sum(tape.add(resid, var)?);
                let inv = tape.exp(tape.neg(lv));
                let quad = tape.scale(tape.scale_by(spread, inv)?, -T::half());
                let norm = tape.add_const(tape.scale(lv, -T::half() * count), -T::half() * count * T::ln_2pi());
                tape.add(quad, norm)
            }
            (Likelihood::Softmax { .. }, Targets::Classes(c)) => {
                let picked = tape.gather(samples, c)?;
                let lse = tape.logsumexp_rows(samples);
                Ok(tape.sum(tape.sub(picked, lse)?))
            }
            _ => unreachable!("checked above"),
        }
    }

    /// Per-point expected log-likelihood, evaluated directly.
    pub fn expected_log_lik(
        &self,
        mean: &Matrix<T>,
        var: &Matrix<T>,
        samples: &Matrix<T>,
        y: &Targets<T>,
    ) -> Result<Vec<T>> {
        self.check_targets(y, mean.rows(), mean.cols())?;
        match (self, y) {
            (Likelihood::Gaussian { log_variance }, Targets::Real(ym)) => {
                let s2 = log_variance.exp();
                Ok((0..mean.rows())
                    .map(|i| {
                        (0..mean.cols())
                            .map(|j| {
                                let r = ym[(i, j)] - mean[(i, j)];
                                -T::half() * (T::ln_2pi() + s2.ln()) - (r * r + var[(i, j)]) / (T::two() * s2)
                            })
                            .sum()
                    })
                    .collect())
            }
            (Likelihood::Softmax { .. }, Targets::Classes(c)) => Ok(c
                .iter()
                .enumerate()
                .map(|(i, &k)| samples[(i, k)] - logsumexp(samples.row(i)))
                .collect()),
            _ => unreachable!("checked above"),
        }
    }

    /// Predictive mean and variance of `y` for a Gaussian likelihood.
    pub fn predict_y(&self, mean: &Matrix<T>, var: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        match self {
            Likelihood::Gaussian { log_variance } => {
                let s2 = log_variance.exp();
                Ok((mean.clone(), var.map(|v| v + s2)))
            }
            Likelihood::Softmax { .. } => Err(Error::Unsupported(
                "use class_probabilities for categorical likelihoods".into(),
            )),
        }
    }

    /// Log density of each row of `y` under `N(mean, var + σ²_noise)`.
    pub fn log_density(&self, mean: &Matrix<T>, var: &Matrix<T>, y: &Matrix<T>) -> Result<Vec<T>> {
        let (m, v) = self.predict_y(mean, var)?;
        Ok((0..m.rows())
            .map(|i| {
                (0..m.cols())
                    .map(|j| {
                        let r = y[(i, j)] - m[(i, j)];
                        -T::half() * (T::ln_2pi() + v[(i, j)].ln() + r * r / v[(i, j)])
                    })
                    .sum()
            })
            .collect())
    }
}

/// Row-wise softmax.
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for i in 0..logits.rows() {
        let lse = logsumexp(logits.row(i));
        for v in out.row_mut(i) {
            *v = (*v - lse).exp();
        }
    }
    out
}

/// Class probabilities averaged over latent samples (one `n × C` matrix per sample).
pub fn class_probabilities<T: Scalar>(latent_samples: &[Matrix<T>]) -> Result<Matrix<T>> {
    let first = latent_samples
        .first()
        .ok_or_else(|| Error::Argument("no latent samples".into()))?;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for s in latent_samples {
        acc.add_assign(&softmax_rows(s));
    }
    Ok(acc.scale(T::of_usize(latent_samples.len()).recip()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_latent_variance_gives_noise_variance() {
        let lik = Likelihood::gaussian(0.3).unwrap();
        let (_, v) = lik.predict_y(&Matrix::zeros(2, 1), &Matrix::zeros(2, 1)).unwrap();
        assert!(v.as_slice().iter().all(|&x| (x - 0.3f64).abs() < 1e-15));
        assert!(Likelihood::gaussian(0.0f64).is_err());
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let p = class_probabilities(&[Matrix::<f64>::filled(3, 4, 0.7)]).unwrap();
        assert!(p.as_slice().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn class_index_is_checked() {
        let lik = Likelihood::<f64>::Softmax { n_classes: 3 };
        let s = Matrix::zeros(2, 3);
        let r = lik.expected_log_lik(&s, &s, &s, &Targets::Classes(vec![0, 3]));
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn graph_and_direct_evaluations_agree() {
        let lik = Likelihood::gaussian(0.4).unwrap();
        let mean = Matrix::from_rows(&[[0.1], [-0.5], [2.0]]).unwrap();
        let var = Matrix::from_rows(&[[0.2], [0.0], [1.3]]).unwrap();
        let y = Targets::Real(Matrix::from_rows(&[[0.0], [0.3], [1.0]]).unwrap());
        let direct: f64 = lik.expected_log_lik(&mean, &var, &mean, &y).unwrap().iter().sum();
        let tape = Tape::new();
        let lv = tape.leaf(Matrix::scalar(0.4f64.ln()));
        let (m, v) = (tape.constant(mean.clone()), tape.constant(var.clone()));
        let out = lik.expected_log_lik_graph(&tape, Some(lv), m, v, m, &y).unwrap();
        assert!((tape.scalar_value(out) - direct).abs() < 1e-12);

        let soft = Likelihood::Softmax { n_classes: 2 };
        let logits = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.0]]).unwrap();
        let c = Targets::Classes(vec![1, 0]);
        let direct: f64 = soft.expected_log_lik(&logits, &logits, &logits, &c).unwrap().iter().sum();
        let tape = Tape::new();
        let s = tape.constant(logits);
        let out = soft.expected_log_lik_graph(&tape, None, s, s, s, &c).unwrap();
        assert!((tape.scalar_value(out) - direct).abs() < 1e-12);
    }
}
