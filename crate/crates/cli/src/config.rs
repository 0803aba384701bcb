//! Experiment configuration: strict TOML with kind-specific sections.

use std::path::{Path, PathBuf};

use ddgp::deep::{Architecture, InitSpec, ModelSpec};
use ddgp::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Fit,
    CollapseCurve,
    BananaMap,
    Smoothness,
    Ood,
    MomentsDemo,
    Gradcheck,
}

impl Kind {
    pub const ALL: [Kind; 7] = [
        Kind::Fit,
        Kind::CollapseCurve,
        Kind::BananaMap,
        Kind::Smoothness,
        Kind::Ood,
        Kind::MomentsDemo,
        Kind::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Fit => "fit",
            Kind::CollapseCurve => "collapse_curve",
            Kind::BananaMap => "banana_map",
            Kind::Smoothness => "smoothness",
            Kind::Ood => "ood",
            Kind::MomentsDemo => "moments_demo",
            Kind::Gradcheck => "gradcheck",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            Kind::Fit => "train models and report test metrics; optional layer derivative probe",
            Kind::CollapseCurve => "OOD non-parametric variance against the number of inducing points",
            Kind::BananaMap => "layerwise variance fields over a 2-D grid",
            Kind::Smoothness => "layerwise correlation fields around focus points",
            Kind::Ood => "distributional-entropy AUC against out-of-distribution sets",
            Kind::MomentsDemo => "exact, Monte Carlo and Taylor moments under noisy inputs",
            Kind::Gradcheck => "ELBO gradients against central finite differences",
        }
    }

    fn needs_model(self) -> bool {
        self != Kind::MomentsDemo
    }

    fn needs_training(self) -> bool {
        !matches!(self, Kind::MomentsDemo | Kind::Gradcheck)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    /// Output directory prefix; defaults to the config file stem.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Forward passes averaged by every evaluation.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    #[serde(default)]
    pub collapse_curve: Option<CollapseConfig>,
    #[serde(default)]
    pub banana_map: Option<BananaMapConfig>,
    #[serde(default)]
    pub smoothness: Option<SmoothnessConfig>,
    #[serde(default)]
    pub ood: Option<OodConfig>,
    #[serde(default)]
    pub moments_demo: Option<MomentsConfig>,
    #[serde(default)]
    pub gradcheck: Option<GradcheckConfig>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_eval_samples() -> usize {
    ddgp::uncertainty::EVAL_SAMPLES
}

fn default_test_fraction() -> f64 {
    ddgp::data::TEST_FRACTION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    #[serde(rename = "toy_1d")]
    Toy1d {
        n: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Banana {
        n: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Csv {
        path: PathBuf,
        target: String,
        task: ddgp::data::Task,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// Separate IDX train and test files; no split is drawn.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        side: usize,
        #[serde(default)]
        max_train: Option<usize>,
        #[serde(default)]
        max_test: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanChoice {
    Zero,
    Pca,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architectures: Vec<Architecture>,
    /// Total number of GP layers, output layer included.
    pub layers: usize,
    /// Width of every hidden layer.
    #[serde(default)]
    pub width: Option<usize>,
    /// One count for all layers, or one per layer.
    pub inducing: Vec<usize>,
    #[serde(default = "default_mean")]
    pub mean: MeanChoice,
    #[serde(default)]
    pub whiten: bool,
    #[serde(default)]
    pub decoupled_w2_lengthscales: bool,
    #[serde(default)]
    pub init: InitSpec,
}

fn default_mean() -> MeanChoice {
    MeanChoice::Zero
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Zero-based layer whose mean and variance are differentiated; must have 1-D input.
    pub layer: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    /// Input variance seen by hybrid layers along the grid.
    #[serde(default)]
    pub input_variance: f64,
    /// Half-width of the region around zero compared with in-distribution points.
    #[serde(default = "default_near_zero")]
    pub near_zero: f64,
}

fn default_near_zero() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseConfig {
    pub inducing_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BananaMapConfig {
    /// Square grid in standardized units.
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_side: usize,
    /// Grid points within this distance of a training input count as on-manifold.
    pub on_manifold_radius: f64,
    /// Grid points beyond this distance from every training input count as OOD.
    pub ood_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessConfig {
    /// Focus points in standardized units.
    pub focus: Vec<[f64; 2]>,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_side: usize,
    pub samples: usize,
    #[serde(default = "default_corr_threshold")]
    pub threshold: f64,
}

fn default_corr_threshold() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutSet {
    pub name: String,
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub max_points: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    /// Overrides the model's inducing counts; one run per entry.
    pub inducing_counts: Vec<usize>,
    pub out_sets: Vec<OutSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    pub dims: usize,
    pub n_train: usize,
    pub mc_draws: usize,
    /// Isotropic input variances to sweep.
    pub input_variances: Vec<f64>,
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub n_points: usize,
    #[serde(default = "default_fd_step")]
    pub step: f64,
}

fn default_fd_step() -> f64 {
    1e-5
}

impl ExperimentConfig {
    /// Parses and validates, reporting every unknown key at once.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| CliError::config(format!("invalid TOML: {}", e.message()), vec![]))?;
        let mut unknown = Vec::new();
        loop {
            match serde_path_to_error::deserialize::<_, ExperimentConfig>(value.clone()) {
                Ok(cfg) if unknown.is_empty() => {
                    cfg.validate()?;
                    return Ok(cfg);
                }
                Ok(_) => return Err(CliError::config("unknown keys", unknown)),
                Err(e) => {
                    let mut path = e.path().to_string();
                    let full = e.inner().to_string();
                    let msg = full.lines().next().unwrap_or_default().to_string();
                    let field = unknown_field(&msg);
                    if let Some(f) = &field {
                        // Some paths already end in the offending key.
                        if path == *f {
                            path = ".".into();
                        } else if let Some(p) = path.strip_suffix(&format!(".{f}")) {
                            path = p.to_string();
                        }
                    }
                    match field {
                        Some(field) if remove_key(&mut value, &path, &field) => {
                            unknown.push(join_path(&path, &field));
                        }
                        _ => {
                            let mut keys = unknown;
                            if path != "." {
                                keys.push(path.clone());
                            }
                            return Err(CliError::config(format!("{path}: {msg}"), keys));
                        }
                    }
                }
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.name.is_none() {
            cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(self.kind.name())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Makes relative data paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            Some(DataConfig::Csv { path, .. }) => fix(path),
            Some(DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            }) => {
                fix(train_images);
                fix(train_labels);
                fix(test_images);
                fix(test_labels);
            }
            _ => {}
        }
        if let Some(ood) = &mut self.ood {
            for s in &mut ood.out_sets {
                fix(&mut s.images);
                fix(&mut s.labels);
            }
        }
    }

    /// Checks cross-field rules that serde cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        let present = [
            ("probe", self.probe.is_some(), Kind::Fit),
            ("collapse_curve", self.collapse_curve.is_some(), Kind::CollapseCurve),
            ("banana_map", self.banana_map.is_some(), Kind::BananaMap),
            ("smoothness", self.smoothness.is_some(), Kind::Smoothness),
            ("ood", self.ood.is_some(), Kind::Ood),
            ("moments_demo", self.moments_demo.is_some(), Kind::MomentsDemo),
            ("gradcheck", self.gradcheck.is_some(), Kind::Gradcheck),
        ];
        for (key, is_set, owner) in present {
            if is_set && owner != self.kind {
                bad.push(format!("{key} (not used by kind {})", self.kind.name()));
            }
            let required = owner == self.kind && key != "probe";
            if required && !is_set {
                bad.push(format!("{key} (required by kind {})", self.kind.name()));
            }
        }
        let needs_data = self.kind != Kind::MomentsDemo;
        if needs_data != self.data.is_some() {
            bad.push(format!("data ({})", if needs_data { "required" } else { "not used" }));
        }
        if self.kind.needs_model() != self.model.is_some() {
            bad.push(format!("model ({})", if self.kind.needs_model() { "required" } else { "not used" }));
        }
        if self.train.is_some() && !self.kind.needs_training() {
            bad.push(format!("train (not used by kind {})", self.kind.name()));
        }
        if self.seeds.is_empty() {
            bad.push("seeds (empty)".into());
        }
        if self.eval_samples == 0 {
            bad.push("eval_samples (must be positive)".into());
        }
        if let Some(m) = &self.model {
            if m.layers == 0 {
                bad.push("model.layers (must be at least 1)".into());
            }
            if m.layers > 1 && m.width.unwrap_or(0) == 0 {
                bad.push("model.width (required and positive when layers > 1)".into());
            }
            if m.architectures.is_empty() {
                bad.push("model.architectures (empty)".into());
            }
            if m.inducing.is_empty() || m.inducing.contains(&0) || (m.inducing.len() != 1 && m.inducing.len() != m.layers)
            {
                bad.push(format!("model.inducing (one positive count or {} of them)", m.layers));
            }
        }
        match &self.data {
            Some(
                DataConfig::Toy1d { test_fraction, .. }
                | DataConfig::Banana { test_fraction, .. }
                | DataConfig::Csv { test_fraction, .. },
            ) if !(*test_fraction > 0.0 && *test_fraction < 1.0) => {
                bad.push("data.test_fraction (must lie in (0, 1))".into());
            }
            _ => {}
        }
        let is_image = matches!(self.data, Some(DataConfig::Idx { .. }));
        if self.kind == Kind::Ood && !is_image {
            bad.push("data.source (ood needs idx data)".into());
        }
        if let Some(c) = &self.collapse_curve {
            if c.inducing_counts.is_empty() || c.inducing_counts.contains(&0) {
                bad.push("collapse_curve.inducing_counts (positive counts required)".into());
            }
        }
        if let Some(o) = &self.ood {
            if o.inducing_counts.is_empty() || o.out_sets.is_empty() {
                bad.push("ood (inducing_counts and out_sets must be non-empty)".into());
            }
        }
        if let Some(p) = &self.probe {
            if p.grid_points < 3 || !(p.grid_max > p.grid_min) {
                bad.push("probe (grid needs at least 3 points and grid_max > grid_min)".into());
            }
        }
        if let Some(b) = &self.banana_map {
            if b.grid_side < 2 || !(b.grid_max > b.grid_min) || !(b.ood_radius > b.on_manifold_radius) {
                bad.push("banana_map (grid_side ≥ 2, grid_max > grid_min, ood_radius > on_manifold_radius)".into());
            }
        }
        if let Some(s) = &self.smoothness {
            if s.focus.is_empty() || s.grid_side < 2 || s.samples < 2 {
                bad.push("smoothness (focus non-empty, grid_side ≥ 2, samples ≥ 2)".into());
            }
        }
        if let Some(m) = &self.moments_demo {
            if m.dims == 0 || m.n_train == 0 || m.mc_draws < 2 || m.input_variances.is_empty() {
                bad.push("moments_demo (dims, n_train positive; mc_draws ≥ 2; variances non-empty)".into());
            }
        }
        if let Some(g) = &self.gradcheck {
            if g.n_points == 0 || !(g.step > 0.0) {
                bad.push("gradcheck (n_points and step must be positive)".into());
            }
        }
        if bad.is_empty() {
            return Ok(());
        }
        // Entries read "key (reason)"; keys go to the record bare, reasons into the message.
        let keys = bad
            .iter()
            .map(|b| b.split_once(" (").map_or(b.as_str(), |(k, _)| k).to_string())
            .collect();
        Err(CliError::config(format!("invalid configuration: {}", bad.join("; ")), keys))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone().unwrap_or_default()
        }
    }
}

impl ModelConfig {
    /// Resolves the architecture for data of the given shape.
    pub fn spec(
        &self,
        architecture: Architecture,
        input_dim: usize,
        output_dim: usize,
        n_classes: Option<usize>,
        inducing_override: Option<usize>,
    ) -> ModelSpec {
        let hidden = vec![self.width.unwrap_or(0); self.layers.saturating_sub(1)];
        let inducing = match inducing_override {
            Some(m) => vec![m; self.layers],
            None if self.inducing.len() == 1 => vec![self.inducing[0]; self.layers],
            None => self.inducing.clone(),
        };
        ModelSpec {
            architecture,
            input_dim,
            hidden_widths: hidden,
            output_dim,
            inducing,
            pca_mean: self.mean == MeanChoice::Pca,
            whiten: self.whiten,
            decoupled_w2_lengthscales: self.decoupled_w2_lengthscales,
            n_classes,
            init: self.init.clone(),
        }
    }
}

pub fn architecture_name(a: Architecture) -> &'static str {
    match a {
        Architecture::Dgp => "dgp",
        Architecture::Ddgp => "ddgp",
    }
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

fn join_path(parent: &str, field: &str) -> String {
    if parent == "." || parent.is_empty() {
        field.to_string()
    } else {
        format!("{parent}.{field}")
    }
}

/// Removes `field` from the table at dotted `path`; `false` if it is not there.
fn remove_key(value: &mut toml::Value, path: &str, field: &str) -> bool {
    let mut cur = value;
    if path != "." && !path.is_empty() {
        for seg in path.split('.') {
            cur = match cur {
                toml::Value::Table(t) => match t.get_mut(seg) {
                    Some(v) => v,
                    None => return false,
                },
                toml::Value::Array(a) => match seg.trim_matches(|c| c == '[' || c == ']').parse::<usize>() {
                    Ok(i) if i < a.len() => &mut a[i],
                    _ => return false,
                },
                _ => return false,
            };
        }
    }
    match cur {
        toml::Value::Table(t) => t.remove(field).is_some(),
        _ => false,
    }
}
