//! Uncertainty decomposition and out-of-distribution scores.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::deep::DeepModel;
use crate::error::{Error, Result};
use crate::gaussmath::diff_entropy_diag;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Forward samples averaged for every report.
pub const EVAL_SAMPLES: usize = 20;
/// Floor applied to non-parametric variances before taking logs.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Per-layer variance components averaged over forward samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSummary<T> {
    pub mean: Matrix<T>,
    pub var_parametric: Matrix<T>,
    pub var_nonparametric: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UncertaintyReport<T> {
    pub layers: Vec<LayerSummary<T>>,
    /// Differential entropy of the output layer's non-parametric variances.
    pub ood_score: Vec<T>,
    /// Entropy of the averaged class probabilities (classification only).
    pub predictive_entropy: Option<Vec<T>>,
}

/// Averages every layer's output over `n_samples` forward passes.
pub fn decompose<T: Scalar>(model: &DeepModel<T>, x: &Matrix<T>, n_samples: usize, seed: u64) -> Result<UncertaintyReport<T>> {
    let passes = model.forward(x, n_samples, seed)?;
    let inv = T::of_usize(n_samples).recip();
    let mut layers = Vec::with_capacity(model.n_layers());
    for l in 0..model.n_layers() {
        let (n, d) = passes[0][l].mean.shape();
        let mut s = LayerSummary {
            mean: Matrix::zeros(n, d),
            var_parametric: Matrix::zeros(n, d),
            var_nonparametric: Matrix::zeros(n, d),
        };
        for pass in &passes {
            s.mean.add_assign(&pass[l].mean);
            s.var_parametric.add_assign(&pass[l].var_parametric);
            s.var_nonparametric.add_assign(&pass[l].var_nonparametric);
        }
        s.mean = s.mean.scale(inv);
        s.var_parametric = s.var_parametric.scale(inv);
        s.var_nonparametric = s.var_nonparametric.scale(inv);
        layers.push(s);
    }
    let ood_score = entropy_rows(&layers.last().expect("at least one layer").var_nonparametric)?;
    let predictive_entropy = match model.likelihood {
        crate::likelihood::Likelihood::Softmax { .. } => {
            let latent: Vec<Matrix<T>> = passes.iter().map(|p| p.last().expect("layer").samples.clone()).collect();
            Some(predictive_entropy(&crate::likelihood::class_probabilities(&latent)?)?)
        }
        crate::likelihood::Likelihood::Gaussian { .. } => None,
    };
    Ok(UncertaintyReport {
        layers,
        ood_score,
        predictive_entropy,
    })
}

fn entropy_rows<T: Scalar>(vars: &Matrix<T>) -> Result<Vec<T>> {
    let floor = T::of(VARIANCE_FLOOR);
    (0..vars.rows())
        .map(|i| {
            let v: Vec<T> = vars.row(i).iter().map(|&a| a.max(floor)).collect();
            diff_entropy_diag(&v)
        })
        .collect()
}

/// Distributional differential entropy per point, averaged over forward samples.
pub fn ood_score<T: Scalar>(model: &DeepModel<T>, x: &Matrix<T>, n_samples: usize, seed: u64) -> Result<Vec<T>> {
    let passes = model.forward(x, n_samples, seed)?;
    let mut acc = vec![T::zero(); x.rows()];
    for pass in &passes {
        let e = entropy_rows(&pass.last().expect("layer").var_nonparametric)?;
        for (a, v) in acc.iter_mut().zip(e) {
            *a = *a + v;
        }
    }
    let inv = T::of_usize(n_samples).recip();
    Ok(acc.into_iter().map(|a| a * inv).collect())
}

/// Probability that a random positive outscores a random negative, ties counted half.
pub fn auc<T: Scalar>(pos: &[T], neg: &[T]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Argument("auc needs non-empty score sets".into()));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::Domain("auc of NaN scores".into()));
    }
    // Rank-sum with average ranks for ties.
    let mut all: Vec<(T, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN"));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Shannon entropy of each row of a probability matrix.
pub fn predictive_entropy<T: Scalar>(probs: &Matrix<T>) -> Result<Vec<T>> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            if row.iter().any(|&p| p < T::zero()) {
                return Err(Error::Domain(format!("negative probability in row {i}")));
            }
            let total: T = row.iter().copied().sum();
            if (total - T::one()).abs() > T::of(1e-6) {
                return Err(Error::Domain(format!("row {i} sums to {total}")));
            }
            Ok(row
                .iter()
                .filter(|&&p| p > T::zero())
                .map(|&p| -p * p.ln())
                .sum())
        })
        .collect()
}

impl<T: Scalar> UncertaintyReport<T> {
    /// One row per point: layer-wise mean variances, then the scores.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        let mut header = vec!["point".to_string()];
        for l in 0..self.layers.len() {
            header.push(format!("layer{}_var_parametric", l + 1));
            header.push(format!("layer{}_var_nonparametric", l + 1));
        }
        header.push("ood_score".into());
        if self.predictive_entropy.is_some() {
            header.push("predictive_entropy".into());
        }
        w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
        for i in 0..self.ood_score.len() {
            let mut rec = vec![i.to_string()];
            for layer in &self.layers {
                rec.push(fmt(row_mean(&layer.var_parametric, i)));
                rec.push(fmt(row_mean(&layer.var_nonparametric, i)));
            }
            rec.push(fmt(self.ood_score[i]));
            if let Some(pe) = &self.predictive_entropy {
                rec.push(fmt(pe[i]));
            }
            w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> ReportSummary {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let layers = self
            .layers
            .iter()
            .map(|l| LayerMeans {
                var_parametric: mean(&l.var_parametric.as_slice().iter().map(|v| v.as_f64()).collect::<Vec<_>>()),
                var_nonparametric: mean(
                    &l.var_nonparametric.as_slice().iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                ),
            })
            .collect();
        ReportSummary {
            n_points: self.ood_score.len(),
            layers,
            mean_ood_score: mean(&self.ood_score.iter().map(|v| v.as_f64()).collect::<Vec<_>>()),
        }
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, &self.summary())?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMeans {
    pub var_parametric: f64,
    pub var_nonparametric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportSummary {
    pub n_points: usize,
    pub layers: Vec<LayerMeans>,
    pub mean_ood_score: f64,
}

/// Mean across output dimensions of row `i`.
pub fn row_mean<T: Scalar>(m: &Matrix<T>, i: usize) -> T {
    m.row(i).iter().copied().sum::<T>() / T::of_usize(m.cols())
}

pub(crate) fn fmt<T: Scalar>(v: T) -> String {
    format!("{:e}", v.as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deep::{Architecture, InitSpec, ModelSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for &p in pos {
            for &n in neg {
                s += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert!(auc::<f64>(&[], &[1.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Rounded so ties occur.
        let a: Vec<f64> = (0..100).map(|_| (rng.random_range(0.0..1.0f64) * 20.0).round()).collect();
        let b: Vec<f64> = (0..100).map(|_| (rng.random_range(0.2..1.2f64) * 20.0).round()).collect();
        assert_eq!(auc(&a, &b).unwrap(), brute_auc(&a, &b));
    }

    #[test]
    fn entropy_examples() {
        let p = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.25, 0.25, 0.5]]).unwrap();
        let h = predictive_entropy(&p).unwrap();
        assert_eq!(h[0], 0.0);
        let direct: f64 = -(0.25f64.ln() * 0.5 + 0.5 * 0.5f64.ln());
        assert!((h[1] - direct).abs() < 1e-12);
        let u = Matrix::filled(1, 4, 0.25);
        assert!((predictive_entropy(&u).unwrap()[0] - 4f64.ln()).abs() < 1e-12);
        assert!(predictive_entropy(&Matrix::from_rows(&[[1.2, -0.2]]).unwrap()).is_err());
    }

    #[test]
    fn random_simplex_entropy_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Matrix::<f64>::from_fn(50, 6, |_, _| rng.random_range(0.0..1.0));
        let sums = raw.row_sums();
        let p = Matrix::from_fn(50, 6, |i, j| raw[(i, j)] / sums[i]);
        let h = predictive_entropy(&p).unwrap();
        for (i, hi) in h.iter().enumerate() {
            let mut direct = 0.0;
            for j in 0..6 {
                direct -= p[(i, j)] * p[(i, j)].ln();
            }
            assert!((hi - direct).abs() < 1e-12);
        }
    }

    fn toy_model() -> (DeepModel<f64>, Matrix<f64>) {
        let x = Matrix::from_fn(40, 1, |i, _| -2.0 + 4.0 * i as f64 / 39.0);
        let spec = ModelSpec {
            architecture: Architecture::Dgp,
            input_dim: 1,
            hidden_widths: vec![],
            output_dim: 1,
            inducing: vec![10],
            pca_mean: false,
            whiten: false,
            decoupled_w2_lengthscales: false,
            n_classes: None,
            init: InitSpec::default(),
        };
        (DeepModel::build(&spec, &x, 0).unwrap(), x)
    }

    #[test]
    fn far_field_scores_separate_perfectly() {
        let (model, x) = toy_model();
        let far = Matrix::from_fn(20, 1, |i, _| 12.0 + i as f64);
        let s_in = ood_score(&model, &x, 5, 1).unwrap();
        let s_out = ood_score(&model, &far, 5, 1).unwrap();
        assert_eq!(auc(&s_out, &s_in).unwrap(), 1.0);
        let report = decompose(&model, &far, 3, 1).unwrap();
        for i in 0..20 {
            assert!((report.layers[0].var_nonparametric[(i, 0)] - 1.351).abs() < 1e-6);
        }
    }

    #[test]
    fn scores_follow_row_permutation() {
        let (model, x) = toy_model();
        let perm: Vec<usize> = (0..40).rev().collect();
        let a = ood_score(&model, &x, 1, 2).unwrap();
        // Noise is drawn per row, so compare the deterministic non-parametric part directly.
        let b = ood_score(&model, &x.select_rows(&perm), 1, 2).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert!((a[p] - b[i]).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn auc_is_antisymmetric(a in prop::collection::vec(-100.0f64..100.0, 1..30),
                                b in prop::collection::vec(-100.0f64..100.0, 1..30)) {
            prop_assume!(a.iter().all(|x| !b.contains(x)));
            let s = auc(&a, &b).unwrap() + auc(&b, &a).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn scaling_variances_raises_score(v in prop::collection::vec(1e-6f64..10.0, 1..6), c in 1.001f64..10.0) {
            let m = Matrix::row_vector(&v);
            let scaled = m.scale(c);
            prop_assert!(entropy_rows(&scaled).unwrap()[0] > entropy_rows(&m).unwrap()[0]);
        }
    }
}
