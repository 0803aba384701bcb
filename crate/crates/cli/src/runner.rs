//! Executes one experiment into a directory.

use std::path::{Path, PathBuf};

use ddgp::data::{self, Dataset, Prepared, Standardizer, Task};
use ddgp::deep::{pca_weight, Architecture, DeepModel, ModelSpec};
use ddgp::diagnostics::{self, square_grid};
use ddgp::eval::{self, MetricRecord, OodTable};
use ddgp::kernels::KernelParams;
use ddgp::likelihood::Targets;
use ddgp::linalg::Matrix;
use ddgp::moments::{exact_moments, mc_moments, taylor_moments, ExactGp, NoisyInput};
use ddgp::rng::{self, Purpose};
use ddgp::train::{self, CheckpointPlan, TrainingTrace};
use ddgp::uncertainty;
use serde::Serialize;

use crate::config::{architecture_name, DataConfig, ExperimentConfig, Kind, ModelConfig, OutSet};
use crate::error::CliError;

/// Loaded, split and standardized data.
pub struct LoadedData {
    pub name: String,
    pub prepared: Prepared<f64>,
    /// Rows dropped by the CSV loader.
    pub dropped: usize,
}

impl LoadedData {
    pub fn train(&self) -> &Dataset<f64> {
        &self.prepared.train
    }

    pub fn test(&self) -> &Dataset<f64> {
        &self.prepared.test
    }

    /// Latent output width and class count.
    pub fn outputs(&self) -> (usize, Option<usize>) {
        let train = self.train();
        match &train.y {
            Targets::Real(y) => (y.cols(), None),
            Targets::Classes(_) => {
                let k = train.n_classes().unwrap_or(0).max(self.test().n_classes().unwrap_or(0));
                (1, Some(k))
            }
        }
    }
}

pub fn load_data(cfg: &DataConfig) -> Result<LoadedData, CliError> {
    match cfg {
        DataConfig::Toy1d { n, seed, test_fraction } => Ok(LoadedData {
            name: "toy_1d".into(),
            prepared: data::prepare(&data::make_toy_1d(*n, *seed)?, *test_fraction, *seed)?,
            dropped: 0,
        }),
        DataConfig::Banana { n, seed, test_fraction } => Ok(LoadedData {
            name: "banana".into(),
            prepared: data::prepare(&data::make_banana(*n, *seed)?, *test_fraction, *seed)?,
            dropped: 0,
        }),
        DataConfig::Csv {
            path,
            target,
            task,
            seed,
            test_fraction,
        } => {
            let (ds, dropped) = data::load_csv(path, target, *task)?;
            if dropped > 0 {
                eprintln!("warning: dropped {dropped} rows with unusable targets from {}", path.display());
            }
            Ok(LoadedData {
                name: path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned()),
                prepared: data::prepare(&ds, *test_fraction, *seed)?,
                dropped,
            })
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            side,
            max_train,
            max_test,
        } => {
            let mut train = data::load_idx::<f64>(train_images, train_labels, *side)?;
            let mut test = data::load_idx::<f64>(test_images, test_labels, *side)?;
            if let Some(n) = max_train {
                train = train.head(*n);
            }
            if let Some(n) = max_test {
                test = test.head(*n);
            }
            let x_scaler = Standardizer::fit(&train.x)?;
            train.x = x_scaler.apply(&train.x)?;
            test.x = x_scaler.apply(&test.x)?;
            let name = train_images
                .file_name()
                .map(|s| s.to_string_lossy().split('-').next().unwrap_or("idx").to_string())
                .unwrap_or_else(|| "idx".into());
            Ok(LoadedData {
                name,
                prepared: Prepared {
                    train,
                    test,
                    x_scaler,
                    y_scaler: None,
                },
                dropped: 0,
            })
        }
    }
}

fn load_out_set(set: &OutSet, side: usize, scaler: &Standardizer) -> Result<Matrix<f64>, CliError> {
    let mut ds = data::load_idx::<f64>(&set.images, &set.labels, side)?;
    if let Some(n) = set.max_points {
        ds = ds.head(n);
    }
    Ok(scaler.apply(&ds.x)?)
}

/// Metric sink keyed by dataset.
struct Metrics {
    dataset: String,
    n_samples: usize,
    records: Vec<MetricRecord>,
}

impl Metrics {
    fn push(&mut self, model: &str, seed: u64, metric: impl Into<String>, value: f64) {
        self.records.push(MetricRecord {
            dataset: self.dataset.clone(),
            model: model.to_string(),
            seed,
            metric: metric.into(),
            value,
            n_samples: self.n_samples,
        });
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    kind: &'a str,
    version: &'a str,
    created_unix: u64,
    seeds: &'a [u64],
    dataset: Option<DataManifest>,
    files: Vec<String>,
}

#[derive(Serialize)]
struct DataManifest {
    name: String,
    train_provenance: String,
    test_provenance: String,
    n_train: usize,
    n_test: usize,
    dims: usize,
    dropped_rows: usize,
    x_scaler: Standardizer,
    y_scaler: Option<Standardizer>,
}

/// Runs `cfg` into `dir` (which must exist) and returns the metrics written.
pub fn execute(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<MetricRecord>, CliError> {
    cfg.validate()?;
    let loaded = cfg.data.as_ref().map(load_data).transpose()?;
    let mut metrics = Metrics {
        dataset: loaded.as_ref().map_or_else(|| "synthetic_gp".to_string(), |d| d.name.clone()),
        n_samples: cfg.eval_samples,
        records: Vec::new(),
    };
    for &seed in &cfg.seeds {
        match cfg.kind {
            Kind::MomentsDemo => moments_demo(cfg, seed, dir, &mut metrics)?,
            Kind::Ood => ood(cfg, loaded.as_ref().expect("validated"), seed, dir, &mut metrics)?,
            Kind::CollapseCurve => collapse(cfg, loaded.as_ref().expect("validated"), seed, dir, &mut metrics)?,
            _ => {
                let model_cfg = cfg.model.as_ref().expect("validated");
                let data = loaded.as_ref().expect("validated");
                for &arch in &model_cfg.architectures {
                    let spec = model_spec(model_cfg, arch, data, None);
                    let tag = format!("{}-s{seed}", architecture_name(arch));
                    match cfg.kind {
                        Kind::Gradcheck => gradcheck(cfg, data, &spec, seed, &tag, dir, &mut metrics)?,
                        _ => {
                            let model = train_model(cfg, data, &spec, seed, &tag, dir)?;
                            let name = architecture_name(arch);
                            evaluate(cfg, data, &model.0, &model.1, name, seed, &mut metrics)?;
                            match cfg.kind {
                                Kind::Fit => fit_extras(cfg, data, &model.0, name, seed, &tag, dir, &mut metrics)?,
                                Kind::BananaMap => banana_map(cfg, data, &model.0, name, seed, &tag, dir, &mut metrics)?,
                                Kind::Smoothness => smoothness(cfg, &model.0, name, seed, &tag, dir, &mut metrics)?,
                                _ => unreachable!("handled above"),
                            }
                        }
                    }
                }
            }
        }
    }
    eval::write_metrics_json(&metrics.records, &dir.join("metrics.json"))?;
    write_metrics_csv(&metrics.records, &dir.join("metrics.csv"))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let mut files: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    files.push("manifest.json".into());
    files.sort();
    let manifest = Manifest {
        name: cfg.name(),
        kind: cfg.kind.name(),
        version: env!("CARGO_PKG_VERSION"),
        created_unix: unix_now(),
        seeds: &cfg.seeds,
        dataset: loaded.map(|d| DataManifest {
            name: d.name.clone(),
            train_provenance: d.train().provenance.clone(),
            test_provenance: d.test().provenance.clone(),
            n_train: d.train().len(),
            n_test: d.test().len(),
            dims: d.train().dims(),
            dropped_rows: d.dropped,
            x_scaler: d.prepared.x_scaler,
            y_scaler: d.prepared.y_scaler,
        }),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(metrics.records)
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_metrics_csv(records: &[MetricRecord], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn model_spec(m: &ModelConfig, arch: Architecture, data: &LoadedData, inducing: Option<usize>) -> ModelSpec {
    let (out, classes) = data.outputs();
    m.spec(arch, data.train().dims(), out, classes, inducing)
}

/// Builds and trains one model; writes its trace and checkpoint under `dir/<tag>/`.
fn train_model(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    spec: &ModelSpec,
    seed: u64,
    tag: &str,
    dir: &Path,
) -> Result<(DeepModel<f64>, TrainingTrace), CliError> {
    let sub = dir.join(tag);
    std::fs::create_dir_all(&sub)?;
    let mut model = DeepModel::build(spec, &data.train().x, seed)?;
    let plan = CheckpointPlan { dir: Some(sub.clone()) };
    let trace = train::fit(&mut model, data.train(), &cfg.train_config(seed), &plan)?;
    trace.write_csv(&sub.join("trace.csv"))?;
    Ok((model, trace))
}

/// Training summary and test metrics shared by every training kind.
fn evaluate(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    model: &DeepModel<f64>,
    trace: &TrainingTrace,
    name: &str,
    seed: u64,
    metrics: &mut Metrics,
) -> Result<(), CliError> {
    let s = cfg.eval_samples;
    metrics.push(name, seed, "iterations", trace.records.len() as f64);
    metrics.push(name, seed, "skipped_steps", trace.skipped as f64);
    metrics.push(name, seed, "converged", if trace.converged { 1.0 } else { 0.0 });
    if let Some(e) = trace.final_smoothed_elbo() {
        metrics.push(name, seed, "final_elbo", e);
    }
    let test = data.test();
    let y_scaler = data.prepared.y_scaler.as_ref();
    metrics.push(name, seed, "test_log_likelihood", eval::test_log_likelihood(model, test, s, seed, y_scaler)?);
    match test.task {
        Task::Regression => metrics.push(name, seed, "rmse", eval::rmse(model, test, s, seed, y_scaler)?),
        Task::Classification => metrics.push(name, seed, "accuracy", eval::accuracy(model, test, s, seed)?),
    }
    Ok(())
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64).collect()
}

#[allow(clippy::too_many_arguments)]
fn fit_extras(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    model: &DeepModel<f64>,
    name: &str,
    seed: u64,
    tag: &str,
    dir: &Path,
    metrics: &mut Metrics,
) -> Result<(), CliError> {
    let s = cfg.eval_samples;
    let test = data.test();
    uncertainty::decompose(model, &test.x, s, seed)?.write_csv(&dir.join(tag).join("uncertainty.csv"))?;
    if data.train().dims() == 1 {
        let xs = data.train().x.col(0);
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let grid = diagnostics::ood_grid(lo, hi, 25);
        let ood = diagnostics::mean_nonparametric(model, &Matrix::column_vector(&grid), seed)?;
        let inside = diagnostics::mean_nonparametric(model, &test.x, seed)?;
        for (l, (o, i)) in ood.iter().zip(&inside).enumerate() {
            metrics.push(name, seed, format!("var_np_ood_layer{}", l + 1), *o);
            metrics.push(name, seed, format!("var_np_in_layer{}", l + 1), *i);
        }
    }
    let Some(p) = &cfg.probe else { return Ok(()) };
    let grid = linspace(p.grid_min, p.grid_max, p.grid_points);
    let probe = diagnostics::mean_derivative_probe(model, p.layer, &grid, p.input_variance)?;
    write_probe_csv(&probe, &dir.join(tag).join("derivatives.csv"))?;
    // Where training inputs land in the probed layer's input space.
    let mut landing: Vec<f64> = if p.layer == 0 {
        data.train().x.col(0)
    } else {
        uncertainty::decompose(model, &data.train().x, s, seed)?.layers[p.layer - 1].mean.col(0)
    };
    landing.sort_by(|a, b| a.total_cmp(b));
    let landing_probe = diagnostics::mean_derivative_probe(model, p.layer, &landing, p.input_variance)?;
    let near = diagnostics::mean_derivative_probe(model, p.layer, &linspace(-p.near_zero, p.near_zero, 11), p.input_variance)?;
    let mean_abs = |m: &Matrix<f64>| m.as_slice().iter().map(|v| v.abs()).sum::<f64>() / m.len() as f64;
    metrics.push(name, seed, "slope_abs_in_distribution", mean_abs(&landing_probe.mean_slope));
    metrics.push(name, seed, "slope_abs_near_zero", mean_abs(&near.mean_slope));
    Ok(())
}

fn write_probe_csv(p: &diagnostics::DerivativeProbe, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    let d = p.mean.cols();
    let mut header = vec!["input".to_string()];
    for j in 0..d {
        header.push(format!("mean{j}"));
        header.push(format!("mean_slope{j}"));
    }
    header.extend(["var_nonparametric".into(), "var_nonparametric_curvature".into()]);
    w.write_record(&header).map_err(|e| CliError::Data(e.to_string()))?;
    for i in 0..p.grid.len() {
        let mut rec = vec![p.grid[i].to_string()];
        for j in 0..d {
            rec.push(format!("{:e}", p.mean[(i, j)]));
            rec.push(format!("{:e}", p.mean_slope[(i, j)]));
        }
        rec.push(format!("{:e}", p.var_nonparametric[i]));
        rec.push(format!("{:e}", p.var_nonparametric_curvature[i]));
        w.write_record(&rec).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn collapse(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    seed: u64,
    dir: &Path,
    metrics: &mut Metrics,
) -> Result<(), CliError> {
    let model_cfg = cfg.model.as_ref().expect("validated");
    let counts = &cfg.collapse_curve.as_ref().expect("validated").inducing_counts;
    let path = dir.join(format!("collapse-s{seed}.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_record(["model", "inducing", "status", "value", "final_elbo", "per_layer"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for &arch in &model_cfg.architectures {
        let name = architecture_name(arch);
        let spec = model_spec(model_cfg, arch, data, None);
        let curve = diagnostics::collapse_curve(data.train(), &spec, counts, &cfg.train_config(seed), seed)?;
        for e in &curve.entries {
            if let Some(v) = e.value {
                metrics.push(name, seed, format!("var_np_m{}", e.inducing), v);
            }
            if let Some(v) = e.final_elbo {
                metrics.push(name, seed, format!("final_elbo_m{}", e.inducing), v);
            }
            let layers: Vec<String> = e.per_layer.iter().map(|v| format!("{v:e}")).collect();
            w.write_record([
                name.to_string(),
                e.inducing.to_string(),
                e.status.clone(),
                e.value.map_or(String::new(), |v| format!("{v:e}")),
                e.final_elbo.map_or(String::new(), |v| format!("{v:e}")),
                layers.join(";"),
            ])
            .map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Grid regions used by the variance-field summaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    OnManifold,
    Between,
    /// Off-manifold, but projecting inside the training range on the first principal axis.
    Perpendicular,
    /// Off-manifold elsewhere.
    Outside,
}

impl Region {
    fn name(self) -> &'static str {
        match self {
            Region::OnManifold => "on_manifold",
            Region::Between => "between",
            Region::Perpendicular => "perpendicular",
            Region::Outside => "outside",
        }
    }
}

/// Classifies grid points by distance to the nearest training input and by
/// their projection on the training data's first principal axis.
pub fn classify_grid(train: &Matrix<f64>, grid: &Matrix<f64>, on_radius: f64, ood_radius: f64) -> Result<Vec<(f64, Region)>, CliError> {
    let axis = pca_weight(train, 1)?;
    let proj = |m: &Matrix<f64>| -> Result<Vec<f64>, CliError> { Ok(m.matmul(&axis)?.col(0)) };
    let p_train = proj(train)?;
    let lo = p_train.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = p_train.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p_grid = proj(grid)?;
    Ok((0..grid.rows())
        .map(|i| {
            let g = grid.row(i);
            let d = (0..train.rows())
                .map(|k| train.row(k).iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            let region = if d <= on_radius {
                Region::OnManifold
            } else if d < ood_radius {
                Region::Between
            } else if p_grid[i] >= lo && p_grid[i] <= hi {
                Region::Perpendicular
            } else {
                Region::Outside
            };
            (d, region)
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn banana_map(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    model: &DeepModel<f64>,
    name: &str,
    seed: u64,
    tag: &str,
    dir: &Path,
    metrics: &mut Metrics,
) -> Result<(), CliError> {
    let b = cfg.banana_map.as_ref().expect("validated");
    let grid: Matrix<f64> = square_grid(b.grid_min, b.grid_max, b.grid_side);
    let regions = classify_grid(&data.train().x, &grid, b.on_manifold_radius, b.ood_radius)?;
    let report = uncertainty::decompose(model, &grid, cfg.eval_samples, seed)?;
    let n_layers = report.layers.len();

    let path = dir.join(tag).join("field.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(e.to_string()))?;
    let mut header = vec!["x1".to_string(), "x2".into(), "distance".into(), "region".into()];
    for l in 1..=n_layers {
        header.extend([format!("layer{l}_mean"), format!("layer{l}_var_parametric"), format!("layer{l}_var_nonparametric")]);
    }
    w.write_record(&header).map_err(|e| CliError::Data(e.to_string()))?;
    for (i, (d, r)) in regions.iter().enumerate() {
        let mut rec = vec![grid[(i, 0)].to_string(), grid[(i, 1)].to_string(), format!("{d:e}"), r.name().into()];
        for layer in &report.layers {
            rec.push(format!("{:e}", uncertainty::row_mean(&layer.mean, i)));
            rec.push(format!("{:e}", uncertainty::row_mean(&layer.var_parametric, i)));
            rec.push(format!("{:e}", uncertainty::row_mean(&layer.var_nonparametric, i)));
        }
        w.write_record(&rec).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush()?;

    let region_mean = |l: usize, keep: &dyn Fn(Region) -> bool| -> f64 {
        let v = &report.layers[l].var_nonparametric;
        let (mut s, mut c) = (0.0, 0usize);
        for (i, (_, r)) in regions.iter().enumerate() {
            if keep(*r) {
                s += uncertainty::row_mean(v, i);
                c += 1;
            }
        }
        if c == 0 {
            f64::NAN
        } else {
            s / c as f64
        }
    };
    for l in 0..n_layers {
        let on = region_mean(l, &|r| r == Region::OnManifold);
        let off = region_mean(l, &|r| matches!(r, Region::Perpendicular | Region::Outside));
        let perp = region_mean(l, &|r| r == Region::Perpendicular);
        let k = l + 1;
        metrics.push(name, seed, format!("var_np_on_manifold_layer{k}"), on);
        metrics.push(name, seed, format!("var_np_ood_layer{k}"), off);
        metrics.push(name, seed, format!("var_np_perpendicular_layer{k}"), perp);
        metrics.push(name, seed, format!("ood_ratio_layer{k}"), off / on);
        metrics.push(name, seed, format!("perpendicular_ratio_layer{k}"), perp / on);
    }

    // Contraction of nearby test pairs.
    let test = &data.test().x;
    let mut rng = rng::stream(seed, 0, Purpose::Eval);
    let dirs: Matrix<f64> = rng::standard_normal(&mut rng, test.rows(), test.cols());
    let partner = Matrix::from_fn(test.rows(), test.cols(), |i, j| {
        let norm = dirs.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        test[(i, j)] + PAIR_OFFSET * dirs[(i, j)] / norm
    });
    let fc = diagnostics::feature_collapse_metric(model, test, &partner, cfg.eval_samples, seed)?;
    for (l, (r, bf)) in fc.ratios.iter().zip(&fc.bound_factors).enumerate() {
        metrics.push(name, seed, format!("contraction_layer{}", l + 1), *r);
        metrics.push(name, seed, format!("bound_factor_layer{}", l + 1), *bf);
    }
    Ok(())
}

/// Distance between the members of a contraction pair, in standardized units.
const PAIR_OFFSET: f64 = 0.05;

fn smoothness(
    cfg: &ExperimentConfig,
    model: &DeepModel<f64>,
    name: &str,
    seed: u64,
    tag: &str,
    dir: &Path,
    metrics: &mut Metrics,
) -> Result<(), CliError> {
    let s = cfg.smoothness.as_ref().expect("validated");
    let grid: Matrix<f64> = square_grid(s.grid_min, s.grid_max, s.grid_side);
    let focus = Matrix::from_rows(&s.focus)?;
    let map = diagnostics::smoothness_map(model, &focus, &grid, s.samples, seed)?;
    map.write_csv(&dir.join(tag).join("correlation.csv"))?;
    for (l, per_focus) in map.area_fraction(s.threshold).iter().enumerate() {
        for (j, a) in per_focus.iter().enumerate() {
            metrics.push(name, seed, format!("corr_area_layer{}_focus{j}", l + 1), *a);
        }
        let mean = per_focus.iter().sum::<f64>() / per_focus.len() as f64;
        metrics.push(name, seed, format!("corr_area_layer{}", l + 1), mean);
    }
    Ok(())
}

fn ood(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    seed: u64,
    dir: &Path,
    metrics: &mut Metrics,
) -> Result<(), CliError> {
    let o = cfg.ood.as_ref().expect("validated");
    let model_cfg = cfg.model.as_ref().expect("validated");
    let Some(DataConfig::Idx { side, .. }) = &cfg.data else {
        unreachable!("validated")
    };
    let outs: Vec<(String, Matrix<f64>)> = o
        .out_sets
        .iter()
        .map(|s| Ok((s.name.clone(), load_out_set(s, *side, &data.prepared.x_scaler)?)))
        .collect::<Result<_, CliError>>()?;
    let mut table = OodTable::default();
    for &m in &o.inducing_counts {
        for &arch in &model_cfg.architectures {
            let name = format!("{}_m{m}", architecture_name(arch));
            let spec = model_spec(model_cfg, arch, data, Some(m));
            let (model, trace) = train_model(cfg, data, &spec, seed, &format!("{name}-s{seed}"), dir)?;
            evaluate(cfg, data, &model, &trace, &name, seed, metrics)?;
            let sets: Vec<(&str, &Matrix<f64>)> = outs.iter().map(|(n, x)| (n.as_str(), x)).collect();
            let t = eval::ood_table(&[(name.as_str(), &model)], &data.test().x, &sets, cfg.eval_samples, seed)?;
            for row in &t.rows {
                metrics.push(&name, seed, format!("auc_{}", row.out_set), row.auc);
            }
            table.rows.extend(t.rows);
        }
    }
    table.write_json(&dir.join(format!("ood_table-s{seed}.json")))?;
    table.write_csv(&dir.join(format!("ood_table-s{seed}.csv")))?;
    Ok(())
}

fn moments_demo(cfg: &ExperimentConfig, seed: u64, dir: &Path, metrics: &mut Metrics) -> Result<(), CliError> {
    let m = cfg.moments_demo.as_ref().expect("validated");
    let mut rng = rng::stream(seed, 0, Purpose::Data);
    let x: Matrix<f64> = rng::uniform(&mut rng, m.n_train, m.dims, -3.0, 3.0);
    let eps: Matrix<f64> = rng::standard_normal(&mut rng, m.n_train, 1);
    let y = Matrix::from_fn(m.n_train, 1, |i, _| {
        x.row(i).iter().sum::<f64>().sin() + m.noise_variance.sqrt() * eps[(i, 0)]
    });
    let kernel = KernelParams::isotropic(m.signal_variance, m.lengthscale, m.dims)?;
    let gp = ExactGp::new(x, y, kernel, m.noise_variance)?;
    let centre: Vec<f64> = rng::uniform::<f64>(&mut rng, 1, m.dims, -2.0, 2.0).into_vec();

    let path = dir.join(format!("moments-s{seed}.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_record([
        "input_variance",
        "exact_mean",
        "exact_variance",
        "mc_mean",
        "mc_mean_se",
        "mc_variance",
        "mc_variance_se",
        "taylor_mean",
        "taylor_variance",
    ])
    .map_err(|e| CliError::Data(e.to_string()))?;
    let name = "exact_gp";
    for (k, &v) in m.input_variances.iter().enumerate() {
        let input = NoisyInput::new(centre.clone(), vec![v; m.dims])?;
        let exact = exact_moments(&gp, &input)?;
        let mc = mc_moments(&gp, &input, m.mc_draws, seed)?;
        let taylor = taylor_moments(&gp, &input)?;
        let row = [
            v,
            exact.mean,
            exact.variance,
            mc.mean,
            mc.mean_se,
            mc.variance,
            mc.variance_se,
            taylor.mean,
            taylor.variance,
        ];
        w.write_record(row.iter().map(|x| format!("{x:e}")))
            .map_err(|e| CliError::Data(e.to_string()))?;
        metrics.push(name, seed, format!("exact_mean_v{k}"), exact.mean);
        metrics.push(name, seed, format!("exact_variance_v{k}"), exact.variance);
        metrics.push(name, seed, format!("mc_mean_z_v{k}"), (exact.mean - mc.mean) / mc.mean_se);
        metrics.push(name, seed, format!("mc_variance_z_v{k}"), (exact.variance - mc.variance) / mc.variance_se);
        metrics.push(name, seed, format!("taylor_mean_error_v{k}"), (taylor.mean - exact.mean).abs());
        metrics.push(name, seed, format!("taylor_variance_error_v{k}"), (taylor.variance - exact.variance).abs());
    }
    w.flush()?;
    Ok(())
}

fn gradcheck(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    spec: &ModelSpec,
    seed: u64,
    tag: &str,
    dir: &Path,
    metrics: &mut Metrics,
) -> Result<(), CliError> {
    let g = cfg.gradcheck.as_ref().expect("validated");
    let subset = data.train().head(g.n_points.min(data.train().len()));
    let model = DeepModel::build(spec, &subset.x, seed)?;
    let noise = model.noise_for(subset.len(), seed, 0);
    let report = train::gradcheck(&model, &subset.x, &subset.y, subset.len(), &noise, g.step)?;
    let path: PathBuf = dir.join(format!("gradcheck-{tag}.json"));
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(&path, text + "\n")?;
    let name = architecture_name(spec.architecture);
    metrics.push(name, seed, "max_rel_error", report.max_rel_error);
    Ok(())
}
