//! Test-time metrics and OOD tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::logsumexp;
use crate::data::{Dataset, Standardizer};
use crate::deep::DeepModel;
use crate::error::{Error, Result};
use crate::likelihood::{class_probabilities, Likelihood, Targets};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::uncertainty::{auc, ood_score};

/// Per-sample Gaussian predictive moments of `y` (regression) at the output layer.
fn predictive_passes<T: Scalar>(
    model: &DeepModel<T>,
    x: &Matrix<T>,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(Matrix<T>, Matrix<T>)>> {
    let passes = model.forward(x, n_samples, seed)?;
    passes
        .iter()
        .map(|p| {
            let out = p.last().expect("at least one layer");
            model.likelihood.predict_y(&out.mean, &out.total_variance())
        })
        .collect()
}

/// Per-point log density of a Gaussian mixture with equal weights.
pub fn mixture_log_density<T: Scalar>(components: &[(Matrix<T>, Matrix<T>)], noise: T, y: &Matrix<T>) -> Result<Vec<T>> {
    if components.is_empty() {
        return Err(Error::Argument("empty mixture".into()));
    }
    let lik = Likelihood::Gaussian { log_variance: noise.ln() };
    let per: Vec<Vec<T>> = components
        .iter()
        .map(|(m, v)| lik.log_density(m, v, y))
        .collect::<Result<_>>()?;
    let ln_s = T::of_usize(components.len()).ln();
    Ok((0..y.rows())
        .map(|i| {
            let terms: Vec<T> = per.iter().map(|p| p[i]).collect();
            logsumexp(&terms) - ln_s
        })
        .collect())
}

/// Mean per-point test log-likelihood over `n_samples` forward passes.
///
/// Regression uses the equal-weight mixture of the per-pass Gaussians; `y_scaler`
/// converts the density back to original target units. Classification uses the
/// log of the pass-averaged probability of the true class.
pub fn test_log_likelihood<T: Scalar>(
    model: &DeepModel<T>,
    test: &Dataset<T>,
    n_samples: usize,
    seed: u64,
    y_scaler: Option<&Standardizer>,
) -> Result<f64> {
    let per_point = match (&model.likelihood, &test.y) {
        (Likelihood::Gaussian { .. }, Targets::Real(y)) => {
            let passes = model.forward(&test.x, n_samples, seed)?;
            let comps: Vec<(Matrix<T>, Matrix<T>)> = passes
                .iter()
                .map(|p| {
                    let out = p.last().expect("layer");
                    (out.mean.clone(), out.total_variance())
                })
                .collect();
            let noise = model.likelihood.noise_variance().expect("gaussian");
            let ll = mixture_log_density(&comps, noise, y)?;
            let shift: f64 = y_scaler.map_or(0.0, |s| s.std.iter().map(|v| v.ln()).sum());
            ll.into_iter().map(|v| v.as_f64() - shift).collect::<Vec<_>>()
        }
        (Likelihood::Softmax { .. }, Targets::Classes(c)) => {
            let probs = class_probs(model, &test.x, n_samples, seed)?;
            c.iter()
                .enumerate()
                .map(|(i, &k)| probs[(i, k)].as_f64().max(f64::MIN_POSITIVE).ln())
                .collect()
        }
        _ => return Err(Error::Argument("targets do not match the likelihood".into())),
    };
    Ok(per_point.iter().sum::<f64>() / per_point.len() as f64)
}

/// Pass-averaged class probabilities.
pub fn class_probs<T: Scalar>(model: &DeepModel<T>, x: &Matrix<T>, n_samples: usize, seed: u64) -> Result<Matrix<T>> {
    let passes = model.forward(x, n_samples, seed)?;
    let latent: Vec<Matrix<T>> = passes.iter().map(|p| p.last().expect("layer").samples.clone()).collect();
    class_probabilities(&latent)
}

/// Mixture mean and variance of `y`.
pub fn predict_regression<T: Scalar>(
    model: &DeepModel<T>,
    x: &Matrix<T>,
    n_samples: usize,
    seed: u64,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let comps = predictive_passes(model, x, n_samples, seed)?;
    let inv = T::of_usize(comps.len()).recip();
    let (n, d) = comps[0].0.shape();
    let mut mean = Matrix::zeros(n, d);
    let mut second = Matrix::zeros(n, d);
    for (m, v) in &comps {
        mean.add_assign(m);
        second.add_assign(&v.add(&m.hadamard(m)?)?);
    }
    let mean = mean.scale(inv);
    let var = second.scale(inv).sub(&mean.hadamard(&mean)?)?;
    Ok((mean, var))
}

/// Root mean squared error of the mixture mean, in original units when `y_scaler` is given.
pub fn rmse<T: Scalar>(
    model: &DeepModel<T>,
    test: &Dataset<T>,
    n_samples: usize,
    seed: u64,
    y_scaler: Option<&Standardizer>,
) -> Result<f64> {
    let Targets::Real(y) = &test.y else {
        return Err(Error::Argument("rmse needs real-valued targets".into()));
    };
    let (mean, _) = predict_regression(model, &test.x, n_samples, seed)?;
    let mut s = 0.0;
    for i in 0..y.rows() {
        for j in 0..y.cols() {
            let scale = y_scaler.map_or(1.0, |sc| sc.std[j]);
            s += ((mean[(i, j)] - y[(i, j)]).as_f64() * scale).powi(2);
        }
    }
    Ok((s / y.len() as f64).sqrt())
}

pub fn accuracy<T: Scalar>(model: &DeepModel<T>, test: &Dataset<T>, n_samples: usize, seed: u64) -> Result<f64> {
    let Targets::Classes(c) = &test.y else {
        return Err(Error::Argument("accuracy needs class targets".into()));
    };
    let probs = class_probs(model, &test.x, n_samples, seed)?;
    let hits = c
        .iter()
        .enumerate()
        .filter(|(i, &k)| {
            let row = probs.row(*i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == k
        })
        .count();
    Ok(hits as f64 / c.len() as f64)
}

/// One metric value, as written to `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
}

pub fn write_metrics_json(records: &[MetricRecord], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub model: String,
    pub out_set: String,
    pub auc: f64,
    pub n_in: usize,
    pub n_out: usize,
    pub mean_score_in: f64,
    pub mean_score_out: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OodTable {
    pub rows: Vec<OodRow>,
}

fn mean_of<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len().max(1) as f64
}

/// AUC of the OOD score separating each out-set from the in-distribution test inputs, per model.
pub fn ood_table<T: Scalar>(
    models: &[(&str, &DeepModel<T>)],
    in_test: &Matrix<T>,
    out_sets: &[(&str, &Matrix<T>)],
    n_samples: usize,
    seed: u64,
) -> Result<OodTable> {
    let mut rows = Vec::new();
    for (name, model) in models {
        let s_in = ood_score(model, in_test, n_samples, seed)?;
        for (out_name, out) in out_sets {
            let s_out = ood_score(model, out, n_samples, seed)?;
            rows.push(OodRow {
                model: name.to_string(),
                out_set: out_name.to_string(),
                auc: auc(&s_out, &s_in)?,
                n_in: s_in.len(),
                n_out: s_out.len(),
                mean_score_in: mean_of(&s_in),
                mean_score_out: mean_of(&s_out),
            });
        }
    }
    Ok(OodTable { rows })
}

impl OodTable {
    pub fn auc(&self, model: &str, out_set: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.out_set == out_set)
            .map(|r| r.auc)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_toy_1d;
    use crate::deep::{Architecture, InitSpec, ModelSpec};
    use crate::gaussmath::Gaussian1D;

    fn comps(ms: &[f64], vs: &[f64]) -> Vec<(Matrix<f64>, Matrix<f64>)> {
        ms.iter()
            .zip(vs)
            .map(|(&m, &v)| (Matrix::scalar(m), Matrix::scalar(v)))
            .collect()
    }

    #[test]
    fn single_component_is_gaussian_log_density() {
        let c = comps(&[0.3], &[0.5]);
        let y = Matrix::scalar(1.1);
        let got = mixture_log_density(&c, 0.2, &y).unwrap()[0];
        let g = Gaussian1D::new(0.3, 0.7).unwrap();
        let want = -0.5 * ((2.0 * std::f64::consts::PI * g.variance).ln() + (1.1 - g.mean).powi(2) / g.variance);
        assert!((got - want).abs() < 1e-13);
    }

    #[test]
    fn mixture_integrates_to_one() {
        let (lo, hi, n) = (-10.0, 12.0, 20001);
        let h = (hi - lo) / (n - 1) as f64;
        let c: Vec<(Matrix<f64>, Matrix<f64>)> = [(-1.0, 0.3), (0.5, 0.1), (2.0, 0.6)]
            .iter()
            .map(|&(m, v)| (Matrix::filled(n, 1, m), Matrix::filled(n, 1, v)))
            .collect();
        let ys = Matrix::from_fn(n, 1, |i, _| lo + h * i as f64);
        let dens: Vec<f64> = mixture_log_density(&c, 0.05, &ys).unwrap().iter().map(|v| v.exp()).collect();
        let trap = h * (dens.iter().sum::<f64>() - 0.5 * (dens[0] + dens[n - 1]));
        assert!((trap - 1.0).abs() < 1e-3, "{trap}");
    }

    #[test]
    fn density_sharpens_as_noise_shrinks() {
        let c = comps(&[1.0], &[0.0]);
        let y = Matrix::scalar(1.0);
        let a = mixture_log_density(&c, 1e-2, &y).unwrap()[0];
        let b = mixture_log_density(&c, 1e-4, &y).unwrap()[0];
        assert!(b > a && a > 0.0);
    }

    fn toy_model() -> (DeepModel<f64>, Dataset<f64>) {
        toy_model_with(vec![2])
    }

    fn toy_model_with(hidden: Vec<usize>) -> (DeepModel<f64>, Dataset<f64>) {
        let data = make_toy_1d::<f64>(40, 0).unwrap();
        let spec = ModelSpec {
            architecture: Architecture::Ddgp,
            input_dim: 1,
            inducing: vec![8; hidden.len() + 1],
            hidden_widths: hidden,
            output_dim: 1,
            pca_mean: false,
            whiten: false,
            decoupled_w2_lengthscales: false,
            n_classes: None,
            init: InitSpec::default(),
        };
        (DeepModel::build(&spec, &data.x, 0).unwrap(), data)
    }

    #[test]
    fn log_likelihood_ignores_test_order() {
        let (model, data) = toy_model();
        // Noise is drawn per row, so shuffling needs a model whose passes agree: use one sample
        // through a fixed permutation of both inputs and the noise rows.
        let perm: Vec<usize> = (0..data.len()).rev().collect();
        let a = test_log_likelihood(&model, &data, 1, 3, None).unwrap();
        let passes = model.forward(&data.x, 1, 3).unwrap();
        let out = passes[0].last().unwrap();
        let Targets::Real(y) = &data.y else { unreachable!() };
        let c = vec![(out.mean.select_rows(&perm), out.total_variance().select_rows(&perm))];
        let ll = mixture_log_density(&c, model.likelihood.noise_variance().unwrap(), &y.select_rows(&perm)).unwrap();
        let b = ll.iter().sum::<f64>() / ll.len() as f64;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_deterministic() {
        let (model, data) = toy_model();
        let a = test_log_likelihood(&model, &data, 5, 1, None).unwrap();
        let b = test_log_likelihood(&model, &data, 5, 1, None).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(rmse(&model, &data, 5, 1, None).unwrap(), rmse(&model, &data, 5, 1, None).unwrap());
    }

    #[test]
    fn ood_table_separates_far_field() {
        // A single layer at initialization: k-means inducing inputs cover the data.
        let (model, data) = toy_model_with(vec![]);
        let far = Matrix::from_fn(20, 1, |i, _| 6.0 + i as f64 * 0.2);
        let t = ood_table(&[("ddgp", &model)], &data.x, &[("far", &far), ("self", &data.x)], 5, 0).unwrap();
        assert!(t.auc("ddgp", "far").unwrap() > 0.99);
        assert!((t.auc("ddgp", "self").unwrap() - 0.5).abs() < 1e-12);
    }
}
