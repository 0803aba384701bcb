//! Adam, the minibatch training loop and the finite-difference gradient check.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::deep::DeepModel;
use crate::error::{Error, Result};
use crate::likelihood::Targets;
use crate::linalg::Matrix;
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;
use crate::svgp::{LayerNoise, ParamGroup};

/// Adam with bias correction, ascending the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: T, shapes: &[(usize, usize)]) -> Self {
        Adam {
            learning_rate,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    /// Moves `params` along `grads`; entries with `mask[k] == false` are left alone.
    pub fn update(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>], mask: &[bool]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || mask.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match the parameter list".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for k in 0..params.len() {
            if !mask[k] {
                continue;
            }
            params[k].check_same_shape(&grads[k], "adam")?;
            let (m, v) = (self.m[k].as_mut_slice(), self.v[k].as_mut_slice());
            for ((p, &g), (mi, vi)) in params[k]
                .as_mut_slice()
                .iter_mut()
                .zip(grads[k].as_slice())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * g;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p = *p + self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    /// Stop once the smoothed ELBO improves by less than `convergence_tol`
    /// (relative) across this many steps; `0` disables the check.
    pub convergence_window: usize,
    pub convergence_tol: f64,
    /// Moving-average width used for the smoothed ELBO.
    pub smoothing: usize,
    pub seed: u64,
    /// Checkpoint cadence in steps; `0` writes only the final checkpoint.
    pub eval_every: usize,
    /// Multiply the learning rate by `lr_decay_factor` every `lr_decay_every` steps (`0` = constant).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// Parameter groups to optimize; empty means all of them.
    pub trainable: Vec<ParamGroup>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 32,
            max_iters: 50_000,
            convergence_window: 2000,
            convergence_tol: 1e-5,
            smoothing: 100,
            seed: 0,
            eval_every: 0,
            lr_decay_every: 0,
            lr_decay_factor: 0.1,
            trainable: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n_train {
            return Err(Error::Argument(format!(
                "batch size {} must be in 1..={n_train}",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0) || self.smoothing == 0 {
            return Err(Error::Argument("learning rate must be ≥ 0 and smoothing ≥ 1".into()));
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize) -> f64 {
        match self.lr_decay_every {
            0 => self.learning_rate,
            every => self.learning_rate * self.lr_decay_factor.powi((step / every) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub elbo: f64,
    pub smoothed_elbo: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
    pub converged: bool,
    /// Steps skipped because the objective or its gradient was not finite.
    pub skipped: usize,
}

impl TrainingTrace {
    pub fn final_smoothed_elbo(&self) -> Option<f64> {
        self.records.last().map(|r| r.smoothed_elbo)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        w.write_record(["iteration", "elbo", "smoothed_elbo", "wall_seconds"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                format!("{:e}", r.elbo),
                format!("{:e}", r.smoothed_elbo),
                format!("{:.3}", r.wall_seconds),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Checkpoint<T> {
    pub format_version: u32,
    /// Steps completed; batch and noise streams for the next step are indexed by this.
    pub step: u64,
    pub seed: u64,
    pub model: DeepModel<T>,
    pub optimizer: Adam<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let text = serde_json::to_string(self)?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} (this build reads {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        ck.model.validate()?;
        Ok(ck)
    }
}

/// Where `fit` writes checkpoints, if anywhere.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPlan {
    pub dir: Option<PathBuf>,
}

const MAX_BAD_STEPS: usize = 10;

fn trainable_mask<T: Scalar>(model: &DeepModel<T>, groups: &[ParamGroup]) -> Vec<bool> {
    model
        .param_infos()
        .iter()
        .map(|i| groups.is_empty() || groups.contains(&i.group))
        .collect()
}

/// Batch indices for step `step`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut rng = rng::stream(seed, step, Purpose::Batch);
    let mut idx = index::sample(&mut rng, n, batch).into_vec();
    idx.sort_unstable();
    idx
}

/// Maximizes the ELBO with Adam on minibatches.
pub fn fit<T: Scalar>(
    model: &mut DeepModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    checkpoints: &CheckpointPlan,
) -> Result<TrainingTrace> {
    cfg.validate(data.len())?;
    let shapes: Vec<(usize, usize)> = model.param_infos().iter().map(|i| i.shape).collect();
    let mut adam = Adam::new(T::of(cfg.learning_rate), &shapes);
    fit_from(model, &mut adam, data, cfg, checkpoints, 0)
}

/// Continues training from `start_step` with an existing optimizer state.
pub fn fit_from<T: Scalar>(
    model: &mut DeepModel<T>,
    adam: &mut Adam<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    checkpoints: &CheckpointPlan,
    start_step: u64,
) -> Result<TrainingTrace> {
    cfg.validate(data.len())?;
    let mask = trainable_mask(model, &cfg.trainable);
    let n = data.len();
    let clock = Instant::now();
    let mut trace = TrainingTrace::default();
    let mut window: std::collections::VecDeque<f64> = std::collections::VecDeque::new();
    let mut window_sum = 0.0;
    let mut bad = 0;
    let mut step = start_step;
    let end = start_step + cfg.max_iters as u64;
    while step < end {
        let idx = batch_indices(n, cfg.batch_size, cfg.seed, step);
        let x = data.x.select_rows(&idx);
        let y = data.y.select(&idx);
        let noise = model.noise_for(idx.len(), cfg.seed, step);
        let outcome = model.elbo_and_gradient(&x, &y, n, &noise);
        let usable = match outcome {
            Ok((v, g)) if v.is_finite() && g.iter().all(|m| m.all_finite()) => Some((v, g)),
            Ok(_) => None,
            Err(e) if e.is_numerical() => None,
            Err(e) => return Err(e),
        };
        let Some((value, grads)) = usable else {
            bad += 1;
            trace.skipped += 1;
            if bad >= MAX_BAD_STEPS {
                let dump = serde_json::to_string(&model.param_values())?;
                if let Some(dir) = &checkpoints.dir {
                    let p = dir.join("diverged_params.json");
                    std::fs::write(&p, &dump).map_err(|e| Error::io(&p, e))?;
                }
                return Err(Error::Numerical(format!(
                    "objective not finite for {MAX_BAD_STEPS} consecutive steps at step {step}"
                )));
            }
            step += 1;
            continue;
        };
        bad = 0;
        adam.learning_rate = T::of(cfg.learning_rate_at(step as usize));
        let mut params = model.param_values();
        adam.update(&mut params, &grads, &mask)?;
        model.set_param_values(params)?;

        let v = value.as_f64();
        window.push_back(v);
        window_sum += v;
        if window.len() > cfg.smoothing {
            window_sum -= window.pop_front().expect("non-empty");
        }
        let smoothed = window_sum / window.len() as f64;
        trace.records.push(TraceRecord {
            iteration: step as usize,
            elbo: v,
            smoothed_elbo: smoothed,
            wall_seconds: clock.elapsed().as_secs_f64(),
        });
        step += 1;
        if cfg.eval_every > 0 && step % cfg.eval_every as u64 == 0 {
            write_checkpoint(model, adam, cfg, checkpoints, step)?;
        }
        if converged(&trace, cfg) {
            trace.converged = true;
            break;
        }
    }
    write_checkpoint(model, adam, cfg, checkpoints, step)?;
    Ok(trace)
}

fn converged(trace: &TrainingTrace, cfg: &TrainConfig) -> bool {
    let w = cfg.convergence_window;
    let r = &trace.records;
    if w == 0 || r.len() <= w + cfg.smoothing {
        return false;
    }
    let now = r[r.len() - 1].smoothed_elbo;
    let then = r[r.len() - 1 - w].smoothed_elbo;
    (now - then) / then.abs().max(1e-12) < cfg.convergence_tol
}

fn write_checkpoint<T: Scalar>(
    model: &DeepModel<T>,
    adam: &Adam<T>,
    cfg: &TrainConfig,
    plan: &CheckpointPlan,
    step: u64,
) -> Result<()> {
    let Some(dir) = &plan.dir else { return Ok(()) };
    let ck = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        step,
        seed: cfg.seed,
        model: model.clone(),
        optimizer: adam.clone(),
    };
    ck.save(&dir.join("checkpoint.json"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_gradient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_error: f64,
    pub step: f64,
}

/// Denominator floor for relative gradient errors.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

/// Compares `elbo_and_gradient` with central differences at frozen noise.
///
/// Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
/// Upper triangles of covariance factors are not parameters and are skipped.
pub fn gradcheck<T: Scalar>(
    model: &DeepModel<T>,
    x: &Matrix<T>,
    y: &Targets<T>,
    n_total: usize,
    noise: &[LayerNoise<T>],
    h: f64,
) -> Result<GradcheckReport> {
    let (_, grads) = model.elbo_and_gradient(x, y, n_total, noise)?;
    let infos = model.param_infos();
    let base = model.param_values();
    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(infos.len());
    for (k, info) in infos.iter().enumerate() {
        let lower_only = info.name.contains("q_sqrt");
        let mut worst = 0.0f64;
        let mut biggest = 0.0f64;
        for i in 0..info.shape.0 {
            for j in 0..info.shape.1 {
                if lower_only && j > i {
                    continue;
                }
                let mut eval = |delta: f64| -> Result<f64> {
                    let mut vals = base.clone();
                    vals[k][(i, j)] = vals[k][(i, j)] + T::of(delta);
                    probe.set_param_values(vals)?;
                    Ok(probe.elbo(x, y, n_total, noise)?.as_f64())
                };
                let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
                let analytic = grads[k][(i, j)].as_f64();
                let denom = analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
                worst = worst.max((analytic - numeric).abs() / denom);
                biggest = biggest.max(analytic.abs());
            }
        }
        entries.push(GradcheckEntry {
            name: info.name.clone(),
            max_rel_error: worst,
            max_abs_gradient: biggest,
        });
    }
    let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        entries,
        max_rel_error,
        step: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_toy_1d;
    use crate::deep::{Architecture, InitSpec, ModelSpec};

    #[test]
    fn adam_matches_hand_computed_steps() {
        // f(θ) = −(θ − 3)², gradient −2(θ − 3), θ₀ = 0, lr 0.1.
        let mut adam = Adam::new(0.1f64, &[(1, 1)]);
        let mut theta = vec![Matrix::scalar(0.0)];
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut th) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = -2.0 * (th - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            th += 0.1 * mhat / (vhat.sqrt() + eps);
            let grad = vec![Matrix::scalar(-2.0 * (theta[0].item() - 3.0))];
            adam.update(&mut theta, &grad, &[true]).unwrap();
            assert_eq!(theta[0].item(), th);
            if t == 1 {
                // The first step has magnitude lr whatever the gradient scale.
                assert!((th - 0.1).abs() < 1e-9);
            }
        }
    }

    fn toy_spec(widths: Vec<usize>, arch: Architecture, m: usize) -> ModelSpec {
        let n_layers = widths.len() + 1;
        ModelSpec {
            architecture: arch,
            input_dim: 1,
            hidden_widths: widths,
            output_dim: 1,
            inducing: vec![m; n_layers],
            pca_mean: false,
            whiten: false,
            decoupled_w2_lengthscales: false,
            n_classes: None,
            init: InitSpec::default(),
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise() {
        let data = make_toy_1d::<f64>(50, 0).unwrap();
        let mut model = DeepModel::build(&toy_spec(vec![2], Architecture::Ddgp, 5), &data.x, 0).unwrap();
        let before = model.param_values();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_iters: 5,
            batch_size: 10,
            ..TrainConfig::default()
        };
        fit(&mut model, &data, &cfg, &CheckpointPlan::default()).unwrap();
        assert_eq!(model.param_values(), before);
    }

    #[test]
    fn same_seed_gives_identical_traces() {
        let data = make_toy_1d::<f64>(60, 1).unwrap();
        let spec = toy_spec(vec![2], Architecture::Dgp, 6);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            max_iters: 30,
            batch_size: 16,
            seed: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = DeepModel::build(&spec, &data.x, 2).unwrap();
            let t = fit(&mut model, &data, &cfg, &CheckpointPlan::default()).unwrap();
            (t.records.iter().map(|r| r.elbo.to_bits()).collect::<Vec<_>>(), model.param_values())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_groups_stay_fixed() {
        let data = make_toy_1d::<f64>(40, 2).unwrap();
        let mut model = DeepModel::build(&toy_spec(vec![], Architecture::Dgp, 5), &data.x, 0).unwrap();
        let before = model.params();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            max_iters: 10,
            batch_size: 40,
            trainable: vec![ParamGroup::Variational],
            ..TrainConfig::default()
        };
        fit(&mut model, &data, &cfg, &CheckpointPlan::default()).unwrap();
        for ((info, b), a) in before.iter().zip(model.param_values()) {
            if info.group == ParamGroup::Variational {
                assert_ne!(b, &a, "{}", info.name);
            } else {
                assert_eq!(b, &a, "{}", info.name);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let data = make_toy_1d::<f64>(40, 3).unwrap();
        let spec = toy_spec(vec![2], Architecture::Ddgp, 5);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            max_iters: 6,
            batch_size: 8,
            seed: 1,
            ..TrainConfig::default()
        };
        let plan = CheckpointPlan {
            dir: Some(dir.path().to_path_buf()),
        };
        // Six steps straight versus three, checkpoint, reload, three more.
        let mut straight = DeepModel::build(&spec, &data.x, 0).unwrap();
        fit(&mut straight, &data, &cfg, &CheckpointPlan::default()).unwrap();
        let mut first = DeepModel::build(&spec, &data.x, 0).unwrap();
        fit(&mut first, &data, &TrainConfig { max_iters: 3, ..cfg.clone() }, &plan).unwrap();
        let ck = Checkpoint::<f64>::load(&dir.path().join("checkpoint.json")).unwrap();
        assert_eq!(ck.model, first);
        let mut resumed = ck.model.clone();
        let mut adam = ck.optimizer.clone();
        fit_from(
            &mut resumed,
            &mut adam,
            &data,
            &TrainConfig { max_iters: 3, ..cfg.clone() },
            &CheckpointPlan::default(),
            ck.step,
        )
        .unwrap();
        assert_eq!(resumed.param_values(), straight.param_values());
    }

    #[test]
    fn single_layer_gradients_match_finite_differences() {
        let full = make_toy_1d::<f64>(10, 5).unwrap();
        let small = full.head(5);
        let mut model = DeepModel::build(&toy_spec(vec![], Architecture::Dgp, 3), &small.x, 1).unwrap();
        for q in &mut model.layers[0].q_sqrt {
            *q = Matrix::from_fn(3, 3, |i, j| if i == j { 0.5 } else if i > j { 0.1 } else { 0.0 });
        }
        let noise = model.noise_for(5, 0, 0);
        let r = gradcheck(&model, &small.x, &small.y, 5, &noise, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn deep_gradients_match_finite_differences() {
        let full = make_toy_1d::<f64>(12, 6).unwrap();
        let small = full.head(6);
        for arch in [Architecture::Dgp, Architecture::Ddgp] {
            let mut model = DeepModel::build(&toy_spec(vec![2], arch, 4), &small.x, 3).unwrap();
            for layer in &mut model.layers {
                let m = layer.n_inducing();
                for q in &mut layer.q_sqrt {
                    *q = Matrix::from_fn(m, m, |i, j| if i == j { 0.4 } else if i > j { 0.05 } else { 0.0 });
                }
            }
            let noise = model.noise_for(6, 9, 0);
            let r = gradcheck(&model, &small.x, &small.y, 30, &noise, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-3, "{arch:?}: {r:?}");
        }
    }
}
