//! Config-driven experiment runner.
//!
//! A run loads a TOML [`config::ExperimentConfig`], executes it into a scratch
//! directory next to the output root and renames that directory into place
//! once everything has been written, so a run directory is either complete or
//! absent.

pub mod config;
pub mod error;
pub mod runner;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ddgp::eval::MetricRecord;

pub use config::{ExperimentConfig, Kind};
pub use error::CliError;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "DDGP_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from)
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub metrics: Vec<MetricRecord>,
}

/// Removes the scratch directory unless the run completed.
struct Scratch(Option<PathBuf>);

impl Drop for Scratch {
    fn drop(&mut self) {
        if let Some(p) = self.0.take() {
            let _ = std::fs::remove_dir_all(p);
        }
    }
}

/// Executes `cfg` and moves its outputs to `<out_root>/<name>-<unix seconds>`.
pub fn run(cfg: &ExperimentConfig, out_root: &Path) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_root)?;
    let stamp = runner::unix_now();
    let tmp = out_root.join(format!(".tmp-{}-{}-{stamp}", cfg.name(), std::process::id()));
    std::fs::create_dir_all(&tmp)?;
    let mut scratch = Scratch(Some(tmp.clone()));
    let metrics = runner::execute(cfg, &tmp)?;
    let mut dir = out_root.join(format!("{}-{stamp}", cfg.name()));
    let mut k = 1;
    while dir.exists() {
        dir = out_root.join(format!("{}-{stamp}-{k}", cfg.name()));
        k += 1;
    }
    std::fs::rename(&tmp, &dir)?;
    scratch.0 = None;
    Ok(RunOutcome { dir, metrics })
}

/// Human-readable plan; reads data to report shapes but writes nothing.
pub fn describe(cfg: &ExperimentConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let mut s = String::new();
    let _ = writeln!(s, "experiment {} (kind {})", cfg.name(), cfg.kind.name());
    let _ = writeln!(s, "seeds: {:?}", cfg.seeds);
    let data = cfg.data.as_ref().map(runner::load_data).transpose()?;
    if let Some(d) = &data {
        let (out, classes) = d.outputs();
        let _ = writeln!(
            s,
            "data {}: train {}×{}, test {}×{}, {}",
            d.name,
            d.train().len(),
            d.train().dims(),
            d.test().len(),
            d.test().dims(),
            match classes {
                Some(k) => format!("{k} classes"),
                None => format!("{out} regression target(s)"),
            }
        );
    }
    if let Some(m) = &cfg.moments_demo {
        let _ = writeln!(
            s,
            "exact GP on {} synthetic points in {} dimension(s); {} Monte Carlo draws per input variance",
            m.n_train, m.dims, m.mc_draws
        );
    }
    if let (Some(m), Some(d)) = (&cfg.model, &data) {
        let counts: Vec<Option<usize>> = match (&cfg.ood, &cfg.collapse_curve) {
            (Some(o), _) => o.inducing_counts.iter().copied().map(Some).collect(),
            (_, Some(c)) => c.inducing_counts.iter().copied().map(Some).collect(),
            _ => vec![None],
        };
        for &arch in &m.architectures {
            for &count in &counts {
                let spec = runner::model_spec(m, arch, d, count);
                spec.validate().map_err(|e| CliError::config(e, vec!["model".into()]))?;
                let _ = writeln!(
                    s,
                    "model {} ({} layers, {} mean{}): {} parameters",
                    config::architecture_name(arch),
                    spec.n_layers(),
                    if spec.pca_mean { "pca" } else { "zero" },
                    if spec.whiten { ", whitened" } else { "" },
                    spec.parameter_count()
                );
                for (l, ((d_in, d_out), kind)) in spec.layer_dims().into_iter().zip(spec.kernel_kinds()).enumerate() {
                    let _ = writeln!(
                        s,
                        "  layer {}: {d_in} -> {d_out}, kernel {:?}, {} inducing",
                        l + 1,
                        kind,
                        spec.inducing[l]
                    );
                }
            }
        }
    }
    if let Some(t) = &cfg.train {
        let _ = writeln!(
            s,
            "training: lr {}, batch {}, up to {} steps",
            t.learning_rate, t.batch_size, t.max_iters
        );
    }
    Ok(s)
}

pub fn list_experiments() -> String {
    let mut s = String::new();
    for k in Kind::ALL {
        let _ = writeln!(s, "{:<15} {}", k.name(), k.summary());
    }
    s
}
