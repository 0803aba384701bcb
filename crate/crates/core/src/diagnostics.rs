//! Numerical probes: derivative conditions, variance collapse, feature
//! contraction, correlation maps and radius concentration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::deep::{DeepModel, ModelSpec};
use crate::error::{Error, Result};
use crate::gaussmath::{chol_with_jitter, GaussianVector};
use crate::kernels::{self, KernelKind};
use crate::linalg::{dot, Matrix};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;
use crate::svgp::{LayerInputs, LayerNoise, LayerOutput, VariationalLayer};
use crate::train::{self, CheckpointPlan, TrainConfig};
use crate::uncertainty::EVAL_SAMPLES;

/// Finite-difference step for mean and variance probes.
pub const FD_STEP: f64 = 1e-4;
/// Finite-difference step for the two-inducing-point variance derivative.
pub const FD_STEP_FINE: f64 = 1e-6;
/// Forward samples behind each correlation map.
pub const SMOOTHNESS_SAMPLES: usize = 200;

/// Outcome of one probe, serializable for the run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub name: String,
    pub inputs: BTreeMap<String, String>,
    pub scalars: BTreeMap<String, f64>,
    pub vectors: BTreeMap<String, Vec<f64>>,
    /// Human-readable statement of what `passed` checks.
    pub condition: String,
    pub passed: Option<bool>,
    pub seed: u64,
    pub model_hash: Option<String>,
}

impl ProbeResult {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        ProbeResult {
            name: name.into(),
            seed,
            ..Default::default()
        }
    }

    pub fn input(mut self, key: &str, value: impl ToString) -> Self {
        self.inputs.insert(key.into(), value.to_string());
        self
    }

    pub fn scalar(mut self, key: &str, value: f64) -> Self {
        self.scalars.insert(key.into(), value);
        self
    }

    pub fn vector(mut self, key: &str, value: Vec<f64>) -> Self {
        self.vectors.insert(key.into(), value);
        self
    }

    pub fn check(mut self, condition: impl Into<String>, passed: bool) -> Self {
        self.condition = condition.into();
        self.passed = Some(passed);
        self
    }

    pub fn with_model<T: Scalar>(mut self, model: &DeepModel<T>) -> Result<Self> {
        self.model_hash = Some(model_hash(model)?);
        Ok(self)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// SHA-256 of the model's JSON serialization.
pub fn model_hash<T: Scalar>(model: &DeepModel<T>) -> Result<String> {
    let bytes = serde_json::to_vec(model)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn vec_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

// ---------------------------------------------------------------------------
// Derivatives of a layer along a one-dimensional input.

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DerivativeProbe {
    pub grid: Vec<f64>,
    /// `grid × D_out` parametric mean.
    pub mean: Matrix<f64>,
    pub mean_slope: Matrix<f64>,
    /// Non-parametric variance (shared by all outputs).
    pub var_nonparametric: Vec<f64>,
    pub var_nonparametric_curvature: Vec<f64>,
}

/// Evaluates one layer on scalar inputs with zero noise.
///
/// Hybrid layers see each input as `N(f, input_variance)`.
fn layer_at<T: Scalar>(
    layer: &VariationalLayer<T>,
    points: &[T],
    input_variance: T,
    jitter: T,
) -> Result<LayerOutput<T>> {
    let x = Matrix::column_vector(points);
    let inputs = match layer.kernel_kind {
        KernelKind::Se => LayerInputs::euclidean(x),
        KernelKind::Hybrid => {
            let v = Matrix::filled(points.len(), 1, input_variance);
            LayerInputs {
                dist: Some(GaussianVector::new(x.clone(), v)?),
                samples: x,
            }
        }
    };
    layer.predict_with_jitter(&inputs, &LayerNoise::zeros(points.len(), layer), jitter)
}

/// Central differences (step [`FD_STEP`]) of a layer's mean and non-parametric variance along `grid`.
pub fn mean_derivative_probe<T: Scalar>(
    model: &DeepModel<T>,
    layer_index: usize,
    grid: &[T],
    input_variance: T,
) -> Result<DerivativeProbe> {
    if grid.len() < 3 {
        return Err(Error::Argument(format!("derivative grid needs at least 3 points, got {}", grid.len())));
    }
    let layer = model
        .layers
        .get(layer_index)
        .ok_or_else(|| Error::Argument(format!("no layer {layer_index}")))?;
    if layer.d_in() != 1 {
        return Err(Error::Unsupported(format!(
            "derivative probe needs a one-dimensional layer input, layer {layer_index} has {}",
            layer.d_in()
        )));
    }
    let h = T::of(FD_STEP);
    let n = grid.len();
    let mut pts = Vec::with_capacity(3 * n);
    for &g in grid {
        pts.extend([g - h, g, g + h]);
    }
    let out = layer_at(layer, &pts, input_variance, model.jitter)?;
    let d_out = layer.d_out();
    let hf = h.as_f64();
    let mut mean = Matrix::zeros(n, d_out);
    let mut slope = Matrix::zeros(n, d_out);
    let mut var = Vec::with_capacity(n);
    let mut curv = Vec::with_capacity(n);
    for i in 0..n {
        let (lo, mid, hi) = (3 * i, 3 * i + 1, 3 * i + 2);
        for d in 0..d_out {
            mean[(i, d)] = out.mean[(mid, d)].as_f64();
            slope[(i, d)] = (out.mean[(hi, d)].as_f64() - out.mean[(lo, d)].as_f64()) / (2.0 * hf);
        }
        let v = |r: usize| out.var_nonparametric[(r, 0)].as_f64();
        var.push(v(mid));
        curv.push((v(hi) - 2.0 * v(mid) + v(lo)) / (hf * hf));
    }
    Ok(DerivativeProbe {
        grid: vec_f64(grid),
        mean,
        mean_slope: slope,
        var_nonparametric: var,
        var_nonparametric_curvature: curv,
    })
}

/// Slope-ratio condition for an in-distribution summary `(m_in, v_in)` against
/// a far-field point mapped to `N(0, var_far)` by the previous layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeRatioCheck {
    /// `(dμ/df at m_in)² / (dμ/df at 0)²`, output 0.
    pub slope_ratio: f64,
    /// `var_far / v_in`.
    pub variance_ratio: f64,
    pub holds: bool,
}

pub fn slope_ratio_check<T: Scalar>(
    model: &DeepModel<T>,
    layer_index: usize,
    m_in: T,
    v_in: T,
    var_far: T,
) -> Result<SlopeRatioCheck> {
    if !(v_in > T::zero()) {
        return Err(Error::Domain("in-distribution variance must be positive".into()));
    }
    let grid = [T::zero(), m_in, m_in + T::one()];
    let p = mean_derivative_probe(model, layer_index, &grid, T::zero())?;
    let at0 = p.mean_slope[(0, 0)];
    let at_in = p.mean_slope[(1, 0)];
    let slope_ratio = (at_in * at_in) / (at0 * at0);
    let variance_ratio = var_far.as_f64() / v_in.as_f64();
    Ok(SlopeRatioCheck {
        slope_ratio,
        variance_ratio,
        holds: slope_ratio <= variance_ratio,
    })
}

// ---------------------------------------------------------------------------
// Variance collapse as the number of inducing points grows.

/// Far-field grid `[min−5, min−2] ∪ [max+2, max+5]` with `per_side` points on each side.
pub fn ood_grid(min: f64, max: f64, per_side: usize) -> Vec<f64> {
    let side = |a: f64, b: f64| -> Vec<f64> {
        if per_side == 1 {
            return vec![(a + b) / 2.0];
        }
        (0..per_side).map(|i| a + (b - a) * i as f64 / (per_side - 1) as f64).collect()
    };
    let mut g = side(min - 5.0, min - 2.0);
    g.extend(side(max + 2.0, max + 5.0));
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseEntry {
    pub inducing: usize,
    /// Mean non-parametric variance of the deepest hidden layer on the far-field grid; absent if training failed.
    pub value: Option<f64>,
    /// Same mean for every layer.
    pub per_layer: Vec<f64>,
    pub final_elbo: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseCurve {
    pub entries: Vec<CollapseEntry>,
    pub grid: Vec<f64>,
}

impl CollapseCurve {
    pub fn value_at(&self, m: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.inducing == m).and_then(|e| e.value)
    }
}

/// Mean of every layer's non-parametric variance at `x`, over [`EVAL_SAMPLES`] passes.
pub fn mean_nonparametric<T: Scalar>(model: &DeepModel<T>, x: &Matrix<T>, seed: u64) -> Result<Vec<f64>> {
    let passes = model.forward(x, EVAL_SAMPLES, seed)?;
    let mut acc = vec![0.0; model.n_layers()];
    for pass in &passes {
        for (a, out) in acc.iter_mut().zip(pass) {
            *a += out.var_nonparametric.sum().as_f64() / out.var_nonparametric.len() as f64;
        }
    }
    Ok(acc.into_iter().map(|a| a / passes.len() as f64).collect())
}

/// Trains one model per inducing count and records far-field non-parametric variance.
///
/// `base.inducing` is overwritten; the data must be one-dimensional and standardized.
pub fn collapse_curve<T: Scalar>(
    data: &Dataset<T>,
    base: &ModelSpec,
    inducing_counts: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<CollapseCurve> {
    if data.dims() != 1 {
        return Err(Error::Unsupported("collapse curve is defined for one-dimensional inputs".into()));
    }
    let xs = data.x.col(0);
    let min = xs.iter().fold(f64::INFINITY, |a, v| a.min(v.as_f64()));
    let max = xs.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
    let grid = ood_grid(min, max, 25);
    let gx = Matrix::from_fn(grid.len(), 1, |i, _| T::of(grid[i]));
    let mut entries = Vec::with_capacity(inducing_counts.len());
    for &m in inducing_counts {
        let mut spec = base.clone();
        spec.inducing = vec![m; spec.n_layers()];
        let mut model = DeepModel::build(&spec, &data.x, seed)?;
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let entry = match train::fit(&mut model, data, &cfg, &CheckpointPlan::default()) {
            Ok(trace) => {
                let per_layer = mean_nonparametric(&model, &gx, seed)?;
                CollapseEntry {
                    inducing: m,
                    value: deepest_hidden(&per_layer),
                    per_layer,
                    final_elbo: trace.final_smoothed_elbo(),
                    status: "ok".into(),
                }
            }
            Err(e) if e.is_numerical() => CollapseEntry {
                inducing: m,
                value: None,
                per_layer: Vec::new(),
                final_elbo: None,
                status: format!("failed: {e}"),
            },
            Err(e) => return Err(e),
        };
        entries.push(entry);
    }
    Ok(CollapseCurve { entries, grid })
}

// ---------------------------------------------------------------------------
// Feature contraction.

/// The collapse statistic: the deepest hidden layer, whose input is itself
/// uncertain. Single-layer models fall back to their only layer.
fn deepest_hidden(per_layer: &[f64]) -> Option<f64> {
    match per_layer.len() {
        0 => None,
        1 => Some(per_layer[0]),
        n => Some(per_layer[n - 2]),
    }
}

/// `(σ⁴ / 4l⁴)·‖K_uu⁻¹U‖²`.
pub fn collapse_bound_factor(signal_variance: f64, lengthscale: f64, kinv_u_norm_sq: f64) -> f64 {
    signal_variance.powi(2) / (4.0 * lengthscale.powi(4)) * kinv_u_norm_sq
}

/// Cholesky factor of `K_uu` at the inducing means.
fn kuu_factor<T: Scalar>(layer: &VariationalLayer<T>, jitter: T) -> Result<Matrix<T>> {
    let z = layer.inducing.means().clone();
    let inputs = match layer.kernel_kind {
        KernelKind::Se => LayerInputs::euclidean(z.clone()),
        KernelKind::Hybrid => LayerInputs {
            samples: z.clone(),
            dist: Some(GaussianVector::new(
                z.clone(),
                layer.inducing.variances().expect("hybrid layers have distributional inducing points"),
            )?),
        },
    };
    let (kuu, _) = layer.gram_blocks(&inputs, &z)?;
    Ok(chol_with_jitter(&kuu, jitter)?.0)
}

/// Bound factor of one layer at its posterior mean, using the shortest lengthscale.
pub fn layer_bound_factor<T: Scalar>(layer: &VariationalLayer<T>, jitter: T) -> Result<f64> {
    let l = kuu_factor(layer, jitter)?;
    let u = match &layer.mean_fn.weight {
        Some(w) if !layer.whiten => layer.q_mu.sub(&layer.inducing.means().matmul(w)?)?,
        _ => layer.q_mu.clone(),
    };
    // Whitened means already are L⁻¹U, so only the transposed solve remains.
    let kinv_u = if layer.whiten {
        l.solve_lower_t(&u)?
    } else {
        l.cholesky_solve(&u)?
    };
    let ls = layer
        .kernel
        .lengthscales()
        .iter()
        .fold(f64::INFINITY, |a, v| a.min(v.as_f64()));
    Ok(collapse_bound_factor(
        layer.kernel.signal_variance().as_f64(),
        ls,
        kinv_u.frobenius_sq().as_f64(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeatureCollapse {
    /// Mean of `‖f_l(x) − f_l(x′)‖ / ‖x − x′‖` over pairs and samples, per layer.
    pub ratios: Vec<f64>,
    pub bound_factors: Vec<f64>,
}

/// Layerwise contraction of nearby input pairs (`a[i]`, `b[i]`).
///
/// Both members of a pair share their noise so the ratio measures the
/// sampled function rather than independent draws.
pub fn feature_collapse_metric<T: Scalar>(
    model: &DeepModel<T>,
    a: &Matrix<T>,
    b: &Matrix<T>,
    n_samples: usize,
    seed: u64,
) -> Result<FeatureCollapse> {
    a.check_same_shape(b, "pair inputs")?;
    let n = a.rows();
    if n == 0 {
        return Err(Error::Argument("no input pairs".into()));
    }
    let stacked = Matrix::vcat(&[a, b])?;
    let dist: Vec<f64> = (0..n)
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(&p, &q)| (p - q).as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    if dist.iter().any(|d| *d == 0.0) {
        return Err(Error::Argument("pair members must differ".into()));
    }
    let mut ratios = vec![0.0; model.n_layers()];
    for s in 0..n_samples {
        let half = model.noise_for(n, seed, s as u64);
        let noise: Vec<LayerNoise<T>> = half
            .into_iter()
            .map(|nz| LayerNoise {
                output: Matrix::vcat(&[&nz.output, &nz.output]).expect("same widths"),
                inducing: nz.inducing,
            })
            .collect();
        let outs = model.forward_with_noise(&stacked, &noise)?;
        for (l, out) in outs.iter().enumerate() {
            for i in 0..n {
                let diff: f64 = out
                    .samples
                    .row(i)
                    .iter()
                    .zip(out.samples.row(n + i))
                    .map(|(&p, &q)| (p - q).as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt();
                ratios[l] += diff / dist[i];
            }
        }
    }
    let denom = (n * n_samples) as f64;
    let bound_factors = model
        .layers
        .iter()
        .map(|layer| layer_bound_factor(layer, model.jitter))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureCollapse {
        ratios: ratios.into_iter().map(|r| r / denom).collect(),
        bound_factors,
    })
}

// ---------------------------------------------------------------------------
// Correlation maps.

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmoothnessMap {
    pub grid: Matrix<f64>,
    pub focus: Matrix<f64>,
    /// `fields[layer]` is `grid × focus`: correlation between the focus point and each grid point,
    /// averaged over the layer's outputs.
    pub fields: Vec<Matrix<f64>>,
}

impl SmoothnessMap {
    /// Fraction of grid points where `|corr| > threshold`, per layer and focus point.
    pub fn area_fraction(&self, threshold: f64) -> Vec<Vec<f64>> {
        self.fields
            .iter()
            .map(|f| {
                (0..f.cols())
                    .map(|j| {
                        let c = f.col(j);
                        c.iter().filter(|v| v.abs() > threshold).count() as f64 / c.len() as f64
                    })
                    .collect()
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["layer", "focus", "x1", "x2", "correlation"]).map_err(err)?;
        for (l, f) in self.fields.iter().enumerate() {
            for j in 0..f.cols() {
                for i in 0..f.rows() {
                    w.write_record([
                        (l + 1).to_string(),
                        j.to_string(),
                        self.grid[(i, 0)].to_string(),
                        self.grid[(i, 1)].to_string(),
                        format!("{:.6}", f[(i, j)]),
                    ])
                    .map_err(err)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Pairwise joint propagation state: both members' samples and marginals at one layer.
struct PairState<T> {
    a: LayerInputs<T>,
    b: LayerInputs<T>,
}

/// Prior covariance between row `i` of `a` and row `i` of `b` under a layer's kernel.
fn paired_kernel<T: Scalar>(layer: &VariationalLayer<T>, a: &LayerInputs<T>, b: &LayerInputs<T>, i: usize) -> Result<T> {
    let ra = a.samples.select_rows(&[i]);
    let rb = b.samples.select_rows(&[i]);
    let k = match layer.kernel_kind {
        KernelKind::Se => kernels::se_ard(&ra, &rb, &layer.kernel)?,
        KernelKind::Hybrid => {
            let da = a.dist.as_ref().ok_or_else(|| Error::Argument("hybrid layer needs marginals".into()))?;
            let db = b.dist.as_ref().ok_or_else(|| Error::Argument("hybrid layer needs marginals".into()))?;
            let pick = |g: &GaussianVector<T>| GaussianVector {
                means: g.means.select_rows(&[i]),
                variances: g.variances.select_rows(&[i]),
            };
            kernels::hybrid(&ra, &rb, &pick(da), &pick(db), &layer.kernel)?
        }
    };
    Ok(k.item())
}

/// One joint draw of a layer at paired inputs.
fn pair_step<T: Scalar>(
    layer: &VariationalLayer<T>,
    state: &PairState<T>,
    z_eps: Option<&Matrix<T>>,
    eps: (&Matrix<T>, &Matrix<T>),
    jitter: T,
) -> Result<PairState<T>> {
    let n = state.a.n_points();
    let stacked = LayerInputs {
        samples: Matrix::vcat(&[&state.a.samples, &state.b.samples])?,
        dist: match (&state.a.dist, &state.b.dist) {
            (Some(da), Some(db)) => Some(GaussianVector::new(
                Matrix::vcat(&[&da.means, &db.means])?,
                Matrix::vcat(&[&da.variances, &db.variances])?,
            )?),
            _ => None,
        },
    };
    let noise = LayerNoise {
        output: Matrix::zeros(2 * n, layer.d_out()),
        inducing: z_eps.cloned(),
    };
    let marg = layer.predict_with_jitter(&stacked, &noise, jitter)?;

    let z = layer.inducing.draw(z_eps)?;
    let (kuu, kuf) = layer.gram_blocks(&stacked, &z)?;
    let (lk, _) = chol_with_jitter(&kuu, jitter)?;
    let a = lk.solve_lower(&kuf)?;
    let proj = if layer.whiten { a.clone() } else { lk.solve_lower_t(&a)? };
    let factors: Vec<Matrix<T>> = layer.q_sqrt.iter().map(|q| q.tril()).collect();
    let lp: Vec<Matrix<T>> = factors.iter().map(|l| l.t_matmul(&proj)).collect::<Result<_>>()?;

    let d_out = layer.d_out();
    let mut fa = Matrix::zeros(n, d_out);
    let mut fb = Matrix::zeros(n, d_out);
    let tiny = T::of(1e-300);
    for i in 0..n {
        let k_ab = paired_kernel(layer, &state.a, &state.b, i)?;
        let ai = a.col(i);
        let bi = a.col(n + i);
        let schur = k_ab - dot(&ai, &bi);
        for d in 0..d_out {
            let c = schur + dot(&lp[d].col(i), &lp[d].col(n + i));
            let va = marg.var_parametric[(i, d)] + marg.var_nonparametric[(i, d)];
            let vb = marg.var_parametric[(n + i, d)] + marg.var_nonparametric[(n + i, d)];
            let sa = va.max(T::zero()).sqrt();
            let (e1, e2) = (eps.0[(i, d)], eps.1[(i, d)]);
            let coupling = if sa > tiny { c / sa } else { T::zero() };
            let rest = (vb - coupling * coupling).max(T::zero()).sqrt();
            fa[(i, d)] = marg.mean[(i, d)] + sa * e1;
            fb[(i, d)] = marg.mean[(n + i, d)] + coupling * e1 + rest * e2;
        }
    }
    let total = marg.total_variance();
    let pick = |rows: std::ops::Range<usize>| -> Vec<usize> { rows.collect() };
    let (ia, ib) = (pick(0..n), pick(n..2 * n));
    Ok(PairState {
        a: LayerInputs {
            samples: fa,
            dist: Some(GaussianVector::new(marg.mean.select_rows(&ia), total.select_rows(&ia))?),
        },
        b: LayerInputs {
            samples: fb,
            dist: Some(GaussianVector::new(marg.mean.select_rows(&ib), total.select_rows(&ib))?),
        },
    })
}

/// Correlation between each focus point and every grid point, per layer.
///
/// The joint law of a layer at two inputs depends only on the joint law of the
/// previous layer at those inputs, so each (focus, grid) pair is propagated as
/// a bivariate sample instead of sampling the whole grid jointly.
pub fn smoothness_map<T: Scalar>(
    model: &DeepModel<T>,
    focus: &Matrix<T>,
    grid: &Matrix<T>,
    n_samples: usize,
    seed: u64,
) -> Result<SmoothnessMap> {
    if model.input_dim() != 2 || focus.cols() != 2 || grid.cols() != 2 {
        return Err(Error::Unsupported("smoothness maps need two-dimensional inputs".into()));
    }
    if n_samples < 2 {
        return Err(Error::Argument("correlation needs at least 2 samples".into()));
    }
    let g = grid.rows();
    let n_layers = model.n_layers();
    let mut fields = vec![Matrix::zeros(g, focus.rows()); n_layers];
    for j in 0..focus.rows() {
        let a0 = Matrix::from_fn(g, 2, |_, c| focus[(j, c)]);
        // Running sums per layer: Σa, Σb, Σa², Σb², Σab over samples, per output.
        let mut sums: Vec<[Matrix<f64>; 5]> = model
            .layers
            .iter()
            .map(|layer| std::array::from_fn(|_| Matrix::zeros(g, layer.d_out())))
            .collect();
        for s in 0..n_samples {
            let mut out_rng = rng::stream(seed, (j * n_samples + s) as u64, Purpose::LayerNoise);
            let mut z_rng = rng::stream(seed, (j * n_samples + s) as u64, Purpose::InducingNoise);
            let mut state = PairState {
                a: LayerInputs::euclidean(a0.clone()),
                b: LayerInputs::euclidean(grid.clone()),
            };
            for (l, layer) in model.layers.iter().enumerate() {
                let e1: Matrix<T> = rng::standard_normal(&mut out_rng, g, layer.d_out());
                let e2: Matrix<T> = rng::standard_normal(&mut out_rng, g, layer.d_out());
                let z_eps: Option<Matrix<T>> = layer
                    .inducing
                    .variances()
                    .map(|_| rng::standard_normal(&mut z_rng, layer.n_inducing(), layer.d_in()));
                state = pair_step(layer, &state, z_eps.as_ref(), (&e1, &e2), model.jitter)?;
                let acc = &mut sums[l];
                for i in 0..g {
                    for d in 0..layer.d_out() {
                        let fa = state.a.samples[(i, d)].as_f64();
                        let fb = state.b.samples[(i, d)].as_f64();
                        acc[0][(i, d)] += fa;
                        acc[1][(i, d)] += fb;
                        acc[2][(i, d)] += fa * fa;
                        acc[3][(i, d)] += fb * fb;
                        acc[4][(i, d)] += fa * fb;
                    }
                }
            }
        }
        let ns = n_samples as f64;
        for (l, acc) in sums.iter().enumerate() {
            let d_out = acc[0].cols();
            for i in 0..g {
                let mut total = 0.0;
                for d in 0..d_out {
                    let (ma, mb) = (acc[0][(i, d)] / ns, acc[1][(i, d)] / ns);
                    let va = acc[2][(i, d)] / ns - ma * ma;
                    let vb = acc[3][(i, d)] / ns - mb * mb;
                    let cov = acc[4][(i, d)] / ns - ma * mb;
                    let denom = (va * vb).sqrt();
                    total += if denom > 0.0 { (cov / denom).clamp(-1.0, 1.0) } else { 0.0 };
                }
                fields[l][(i, j)] = total / d_out as f64;
            }
        }
    }
    Ok(SmoothnessMap {
        grid: grid.to_f64(),
        focus: focus.to_f64(),
        fields,
    })
}

/// Regular `n × n` grid over `[lo, hi]²`, row-major in the second coordinate.
pub fn square_grid<T: Scalar>(lo: f64, hi: f64, n: usize) -> Matrix<T> {
    let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
    Matrix::from_fn(n * n, 2, |r, c| {
        let (i, j) = (r / n, r % n);
        T::of(lo + step * if c == 0 { i as f64 } else { j as f64 })
    })
}

// ---------------------------------------------------------------------------
// Radius concentration.

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnnulusStats {
    pub dims: usize,
    pub mean_radius: f64,
    pub predicted_radius: f64,
    pub radius_sd: f64,
    /// Fraction of rows whose norm lies within `band` of `√d`.
    pub fraction_within: f64,
    pub band: f64,
}

pub fn annulus_stats<T: Scalar>(samples: &Matrix<T>, band: f64) -> Result<AnnulusStats> {
    let (n, d) = samples.shape();
    if n == 0 || d == 0 {
        return Err(Error::Argument("annulus statistics need a non-empty sample matrix".into()));
    }
    let radii: Vec<f64> = (0..n)
        .map(|i| samples.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect();
    let mean = radii.iter().sum::<f64>() / n as f64;
    let var = radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let target = (d as f64).sqrt();
    let within = radii.iter().filter(|r| (*r - target).abs() <= band).count();
    Ok(AnnulusStats {
        dims: d,
        mean_radius: mean,
        predicted_radius: target,
        radius_sd: var.sqrt(),
        fraction_within: within as f64 / n as f64,
        band,
    })
}

// ---------------------------------------------------------------------------
// Two inducing points at ±c, far-field input N(0, s).

/// Expected non-parametric variance `E_x[k(x,x) − k_xᵀK_uu⁻¹k_x]` for `x ~ N(0, s)` and
/// inducing inputs `±c`, under `k(x, y) = σ²·exp(−(x−y)²/(2l²))`.
pub fn two_point_variance(c: f64, lengthscale_sq: f64, s: f64, signal_variance: f64) -> f64 {
    let l2 = lengthscale_sq;
    let u = l2 + 2.0 * s;
    let num = (-c * c / u).exp() - (-3.0 * c * c / l2).exp();
    let den = (1.0 - (-4.0 * c * c / l2).exp()) * (u / l2).sqrt();
    signal_variance - 2.0 * signal_variance * num / den
}

/// Derivative expression at `s = 0` whose sign the check is meant to confirm:
/// `σ²(1 − e^{−4c²/l²})·(−c²/l²)·(2c²/l⁴ − 1/l²)`.
pub fn claimed_derivative_at_zero(c: f64, lengthscale_sq: f64, signal_variance: f64) -> f64 {
    let l2 = lengthscale_sq;
    signal_variance * (1.0 - (-4.0 * c * c / l2).exp()) * (-c * c / l2) * (2.0 * c * c / (l2 * l2) - 1.0 / l2)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TwoPointCheck {
    pub c: f64,
    pub lengthscale_sq: f64,
    pub input_variance: f64,
    /// Central difference of [`two_point_variance`] in `s`.
    pub derivative: f64,
    /// `l² + s ≥ 2c²`.
    pub condition: bool,
    /// The derivative's sign (≥ 0) matches `condition`.
    pub agrees: bool,
}

pub fn two_point_condition_check(c: f64, lengthscale_sq: f64, input_variance: f64) -> Result<TwoPointCheck> {
    if !(c > 0.0) || !(lengthscale_sq > 0.0) || !(input_variance >= 0.0) {
        return Err(Error::Domain("need c > 0, l² > 0 and s ≥ 0".into()));
    }
    let h = FD_STEP_FINE;
    let v = |s: f64| two_point_variance(c, lengthscale_sq, s, 1.0);
    let derivative = (v(input_variance + h) - v(input_variance - h)) / (2.0 * h);
    let condition = lengthscale_sq + input_variance >= 2.0 * c * c;
    Ok(TwoPointCheck {
        c,
        lengthscale_sq,
        input_variance,
        derivative,
        condition,
        agrees: (derivative >= 0.0) == condition,
    })
}

/// The check over a `cs × l²s` grid; returns the cells and the agreeing fraction.
pub fn two_point_grid(cs: &[f64], lengthscales_sq: &[f64], input_variance: f64) -> Result<(Vec<TwoPointCheck>, f64)> {
    let mut cells = Vec::with_capacity(cs.len() * lengthscales_sq.len());
    for &c in cs {
        for &l2 in lengthscales_sq {
            cells.push(two_point_condition_check(c, l2, input_variance)?);
        }
    }
    let agree = cells.iter().filter(|x| x.agrees).count() as f64 / cells.len().max(1) as f64;
    Ok((cells, agree))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deep::{Architecture, InitSpec};
    use crate::kernels::KernelParams;
    use crate::likelihood::Likelihood;
    use crate::moments::{exact_moments, ExactGp, NoisyInput};
    use crate::svgp::{InducingInputs, MeanFunctionSpec};
    use rand_distr::{Distribution, StandardNormal};

    fn one_layer(mean_fn: MeanFunctionSpec<f64>, q_mu: Matrix<f64>, ls: f64) -> DeepModel<f64> {
        let z = Matrix::column_vector(&[-2.0, -1.0, 0.0, 1.0, 2.0]);
        let mut layer = VariationalLayer::new(
            InducingInputs::Euclidean(z),
            1,
            KernelParams::isotropic(1.0, ls, 1).unwrap(),
            KernelKind::Se,
            mean_fn,
            1.0,
        )
        .unwrap();
        layer.q_mu = q_mu;
        DeepModel::from_layers(vec![layer], Likelihood::gaussian(0.1).unwrap(), Architecture::Dgp).unwrap()
    }

    #[test]
    fn linear_mean_has_constant_slope() {
        // q = p with a linear mean function: the posterior mean is the mean function itself.
        let w = Matrix::scalar(0.7);
        let z = Matrix::column_vector(&[-2.0, -1.0, 0.0, 1.0, 2.0]);
        let q_mu = z.matmul(&w).unwrap();
        let model = one_layer(MeanFunctionSpec::linear(crate::svgp::MeanKind::Identity, w), q_mu, 1.0);
        let grid: Vec<f64> = (0..9).map(|i| -4.0 + i as f64).collect();
        let p = mean_derivative_probe(&model, 0, &grid, 0.0).unwrap();
        for i in 0..grid.len() {
            assert!((p.mean_slope[(i, 0)] - 0.7).abs() < 1e-6, "{}", p.mean_slope[(i, 0)]);
        }
    }

    #[test]
    fn prior_layer_is_flat() {
        let model = one_layer(MeanFunctionSpec::zero(), Matrix::zeros(5, 1), 1.0);
        let grid: Vec<f64> = (0..11).map(|i| -5.0 + i as f64).collect();
        let p = mean_derivative_probe(&model, 0, &grid, 0.0).unwrap();
        assert!(p.mean_slope.max_abs() < 1e-9);
        assert!(mean_derivative_probe(&model, 0, &grid[..2], 0.0).is_err());
    }

    #[test]
    fn far_field_variance_is_signal_variance() {
        let model = one_layer(MeanFunctionSpec::zero(), Matrix::zeros(5, 1), 0.5);
        let p = mean_derivative_probe(&model, 0, &[-40.0, 0.0, 40.0], 0.0).unwrap();
        assert!((p.var_nonparametric[0] - 1.0).abs() < 1e-12);
        assert!(p.var_nonparametric[1] < 1e-3);
    }

    #[test]
    fn ood_grid_brackets_the_data() {
        let g = ood_grid(-1.0, 2.0, 4);
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], -6.0);
        assert_eq!(g[3], -3.0);
        assert_eq!(g[4], 4.0);
        assert_eq!(g[7], 7.0);
    }

    #[test]
    fn bound_factor_scales_with_variance_squared() {
        let a = collapse_bound_factor(1.3, 0.8, 2.5);
        let b = collapse_bound_factor(2.6, 0.8, 2.5);
        assert!((b / a - 4.0).abs() < 1e-12);
        assert!((collapse_bound_factor(1.0, 1.0, 4.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smooth_prior_contracts_pairs() {
        // Near-deterministic posterior with a long lengthscale: nearby inputs land together.
        let mut model = one_layer(MeanFunctionSpec::zero(), Matrix::zeros(5, 1), 50.0);
        model.layers[0].q_sqrt = vec![Matrix::identity(5).scale(1e-3)];
        let a = Matrix::column_vector(&[0.0, 0.5, -0.3]);
        let b = Matrix::column_vector(&[0.05, 0.55, -0.25]);
        let fc = feature_collapse_metric(&model, &a, &b, 20, 0).unwrap();
        assert!(fc.ratios[0] < 0.05, "{:?}", fc);
    }

    fn toy_ddgp() -> DeepModel<f64> {
        let spec = ModelSpec {
            architecture: Architecture::Ddgp,
            input_dim: 2,
            hidden_widths: vec![2],
            output_dim: 1,
            inducing: vec![6, 6],
            pca_mean: false,
            whiten: false,
            decoupled_w2_lengthscales: false,
            n_classes: None,
            init: InitSpec::default(),
        };
        let x = Matrix::from_fn(20, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        DeepModel::build(&spec, &x, 4).unwrap()
    }

    #[test]
    fn correlation_is_one_at_the_focus() {
        let model = toy_ddgp();
        let focus = Matrix::from_rows(&[[0.2, -0.1]]).unwrap();
        let grid = Matrix::from_rows(&[[0.2, -0.1], [0.25, -0.1], [3.0, 3.0]]).unwrap();
        let map = smoothness_map(&model, &focus, &grid, 200, 1).unwrap();
        for f in &map.fields {
            assert!((f[(0, 0)] - 1.0).abs() < 1e-6, "{f:?}");
            assert!(f[(1, 0)] > f[(2, 0)]);
        }
    }

    #[test]
    fn correlation_decays_along_a_ray() {
        // A 2-D first layer at the prior: correlation is exp(−r²/l²) up to sampling noise.
        let z = Matrix::from_rows(&[[5.0, 5.0], [-5.0, 5.0]]).unwrap();
        let layer = VariationalLayer::new(
            InducingInputs::Euclidean(z),
            1,
            KernelParams::isotropic(1.0, 1.0, 2).unwrap(),
            KernelKind::Se,
            MeanFunctionSpec::zero(),
            1.0,
        )
        .unwrap();
        let model = DeepModel::from_layers(vec![layer], Likelihood::gaussian(0.1).unwrap(), Architecture::Dgp).unwrap();
        let focus = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let rs: [f64; 7] = [0.0, 0.3, 0.6, 0.9, 1.2, 1.5, 2.0];
        let grid = Matrix::from_fn(rs.len(), 2, |i, j| if j == 0 { rs[i] } else { 0.0 });
        let map = smoothness_map(&model, &focus, &grid, 200, 3).unwrap();
        for (i, &r) in rs.iter().enumerate() {
            let expect = (-(r * r)).exp();
            assert!((map.fields[0][(i, 0)] - expect).abs() < 0.1, "r={r}: {}", map.fields[0][(i, 0)]);
        }
        for i in 1..rs.len() {
            assert!(map.fields[0][(i, 0)] <= map.fields[0][(i - 1, 0)] + 0.1);
        }
        assert!(map.area_fraction(0.5)[0][0] > 0.0);
    }

    #[test]
    fn smoothness_rejects_other_dimensions() {
        let model = one_layer(MeanFunctionSpec::zero(), Matrix::zeros(5, 1), 1.0);
        let p = Matrix::column_vector(&[0.0]);
        assert!(matches!(smoothness_map(&model, &p, &p, 10, 0), Err(Error::Unsupported(_))));
    }

    fn gaussian_samples(n: usize, d: usize, seed: u64) -> Matrix<f64> {
        let mut rng = rng::stream(seed, 0, Purpose::Eval);
        Matrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn high_dimensional_radius_concentrates() {
        let s = annulus_stats(&gaussian_samples(500, 1000, 0), 1.0).unwrap();
        assert!((s.mean_radius / s.predicted_radius - 1.0).abs() < 0.02);
        let low = annulus_stats(&gaussian_samples(2000, 2, 1), 1.0).unwrap();
        assert!(low.fraction_within < 0.99, "{low:?}");
    }

    #[test]
    fn two_point_variance_matches_quadrature_oracle() {
        // The closed form equals the exact latent variance of a zero-data GP whose
        // kernel has no ½ in the exponent, with lengthscale² doubled.
        for &(c, l2, s) in &[(1.0, 4.0, 0.3), (1.0, 1.0, 0.3), (0.5, 3.0, 0.1), (1.5, 2.0, 1.0)] {
            let gp = ExactGp::new(
                Matrix::column_vector(&[-c, c]),
                Matrix::zeros(2, 1),
                KernelParams::isotropic(1.0, (2.0f64 * l2).sqrt(), 1).unwrap(),
                0.0,
            )
            .unwrap();
            let m = exact_moments(&gp, &NoisyInput::new(vec![0.0], vec![s]).unwrap()).unwrap();
            assert!((m.variance - two_point_variance(c, l2, s, 1.0)).abs() < 1e-10, "{c} {l2} {s}");
        }
    }

    #[test]
    fn two_point_derivative_is_never_positive() {
        // For inducing inputs at ±c the expected Schur complement shrinks as the
        // input spreads out, whatever the lengthscale.
        let cs: Vec<f64> = (1..=20).map(|i| 0.1 * i as f64).collect();
        let ls: Vec<f64> = (1..=20).map(|i| 0.4 * i as f64).collect();
        let (cells, _) = two_point_grid(&cs, &ls, 0.0).unwrap();
        assert!(cells.iter().all(|x| x.derivative < 0.0));
        // The claimed expression changes sign at l² = 2c² instead.
        assert!(claimed_derivative_at_zero(1.0, 4.0, 1.0) > 0.0);
        assert!(claimed_derivative_at_zero(1.0, 1.0, 1.0) < 0.0);
        assert!(claimed_derivative_at_zero(1.0, 2.0, 1.0).abs() < 1e-15);
    }

    #[test]
    fn probes_are_deterministic() {
        let model = toy_ddgp();
        let a = Matrix::from_rows(&[[0.0, 0.0], [0.3, 0.2]]).unwrap();
        let b = a.map(|v| v + 0.05);
        let r1 = feature_collapse_metric(&model, &a, &b, 5, 7).unwrap();
        let r2 = feature_collapse_metric(&model, &a, &b, 5, 7).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(model_hash(&model).unwrap(), model_hash(&model.clone()).unwrap());
    }
}
