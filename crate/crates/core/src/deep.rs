//! Deep compositions of variational layers.
//!
//! A DGP stacks SE layers on Euclidean inputs. A DDGP keeps an SE first
//! layer and uses hybrid kernels with distributional inducing locations for
//! every later layer; those layers see both the previous layer's samples and
//! its marginals `(mean, parametric + non-parametric variance)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gaussmath::DEFAULT_JITTER;
use crate::kernels::{KernelKind, KernelParams};
use crate::likelihood::{Likelihood, Targets};
use crate::linalg::{sym_eigen, Matrix};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;
use crate::svgp::{
    bound_from_leaves, layer_graph, layer_params, set_layer_params, BoundLayer, GraphInput, InducingInputs,
    LayerNodes, LayerNoise, LayerOutput, MeanFunctionSpec, MeanKind, ParamGroup, ParamInfo, VariationalLayer,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Dgp,
    Ddgp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepModel<T> {
    pub layers: Vec<VariationalLayer<T>>,
    pub architecture: Architecture,
    pub likelihood: Likelihood<T>,
    /// Base jitter added to every `K_uu` before factorization.
    pub jitter: T,
}

/// Initial values, defaulting to the settings used throughout the experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSpec {
    pub kernel_variance: f64,
    pub lengthscale: f64,
    pub q_sqrt_scale: f64,
    /// `q_mu` entries uniform in `[-q_mu_range, q_mu_range]`.
    pub q_mu_range: f64,
    /// Hidden-layer inducing means uniform in `[-inducing_range, inducing_range]`.
    pub inducing_range: f64,
    /// Initial variance of distributional inducing locations.
    pub inducing_variance: f64,
    pub noise_variance: f64,
    pub kmeans_iters: usize,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            kernel_variance: 1.351,
            lengthscale: 1.351,
            q_sqrt_scale: 1e-5,
            q_mu_range: 2.0,
            inducing_range: 2.0,
            inducing_variance: 0.1,
            noise_variance: 1.0,
            kmeans_iters: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    /// Inducing points per layer (`hidden_widths.len() + 1` entries).
    pub inducing: Vec<usize>,
    pub pca_mean: bool,
    pub whiten: bool,
    pub decoupled_w2_lengthscales: bool,
    /// `None` for regression with a Gaussian likelihood, else the class count.
    pub n_classes: Option<usize>,
    pub init: InitSpec,
}

impl ModelSpec {
    pub fn n_layers(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_widths);
        widths.push(self.latent_output_dim());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn latent_output_dim(&self) -> usize {
        self.n_classes.unwrap_or(self.output_dim)
    }

    pub fn kernel_kinds(&self) -> Vec<KernelKind> {
        (0..self.n_layers())
            .map(|l| match (self.architecture, l) {
                (Architecture::Ddgp, l) if l > 0 => KernelKind::Hybrid,
                _ => KernelKind::Se,
            })
            .collect()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.input_dim == 0 || self.latent_output_dim() == 0 {
            return Err("input and output dimensions must be positive".into());
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err("hidden widths must be positive".into());
        }
        if self.inducing.len() != self.n_layers() {
            return Err(format!(
                "{} inducing counts for {} layers",
                self.inducing.len(),
                self.n_layers()
            ));
        }
        if self.inducing.iter().any(|&m| m == 0) {
            return Err("inducing counts must be positive".into());
        }
        Ok(())
    }

    /// Number of free scalars, counting each covariance factor's lower triangle once.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        for ((l, (d_in, d_out)), kind) in self.layer_dims().into_iter().enumerate().zip(self.kernel_kinds()) {
            let m = self.inducing[l];
            total += match kind {
                KernelKind::Se => m * d_in,
                KernelKind::Hybrid => 2 * m * d_in,
            };
            total += m * d_out + d_out * m * (m + 1) / 2;
            total += 1 + d_in;
            if kind == KernelKind::Hybrid && self.decoupled_w2_lengthscales {
                total += d_in;
            }
        }
        if self.n_classes.is_none() {
            total += 1;
        }
        total
    }
}

/// Tape handles for every model parameter.
#[derive(Clone, Debug)]
pub(crate) struct BoundModel {
    pub layers: Vec<BoundLayer>,
    pub lik_log_variance: Option<Var>,
}

/// Graph of one ELBO evaluation.
pub(crate) struct ElboGraph {
    pub elbo: Var,
    pub leaves: Vec<Var>,
}

/// Evaluation chunk size; bounds the memory of one forward tape.
const CHUNK: usize = 1024;

impl<T: Scalar> DeepModel<T> {
    pub fn from_layers(
        layers: Vec<VariationalLayer<T>>,
        likelihood: Likelihood<T>,
        architecture: Architecture,
    ) -> Result<Self> {
        let model = DeepModel {
            layers,
            architecture,
            likelihood,
            jitter: T::of(DEFAULT_JITTER),
        };
        model.validate()?;
        Ok(model)
    }

    /// Builds and initializes a model. `x_train` must be standardized.
    pub fn build(spec: &ModelSpec, x_train: &Matrix<T>, seed: u64) -> Result<Self> {
        spec.validate().map_err(Error::Argument)?;
        if x_train.cols() != spec.input_dim {
            return Err(Error::Shape(format!(
                "training inputs have {} columns, spec says {}",
                x_train.cols(),
                spec.input_dim
            )));
        }
        let init = &spec.init;
        let mut rng = rng::stream(seed, 0, Purpose::Init);
        let kinds = spec.kernel_kinds();
        let mut layers = Vec::with_capacity(spec.n_layers());
        for (l, (d_in, d_out)) in spec.layer_dims().into_iter().enumerate() {
            let m = spec.inducing[l];
            let inducing = if l == 0 {
                InducingInputs::Euclidean(kmeans(x_train, m, init.kmeans_iters, &mut rng)?)
            } else {
                let r = init.inducing_range;
                let means = rng::uniform(&mut rng, m, d_in, -r, r);
                match kinds[l] {
                    KernelKind::Se => InducingInputs::Euclidean(means),
                    KernelKind::Hybrid => InducingInputs::Distributional {
                        means,
                        log_variances: Matrix::filled(m, d_in, T::of(init.inducing_variance.ln())),
                    },
                }
            };
            let mut kernel =
                KernelParams::isotropic(T::of(init.kernel_variance), T::of(init.lengthscale), d_in)?;
            if spec.decoupled_w2_lengthscales && kinds[l] == KernelKind::Hybrid {
                kernel = kernel.with_decoupled_w2();
            }
            let mut layer = VariationalLayer::new(
                inducing,
                d_out,
                kernel,
                kinds[l],
                MeanFunctionSpec::zero(),
                T::of(init.q_sqrt_scale),
            )?;
            layer.whiten = spec.whiten;
            let r = init.q_mu_range;
            layer.q_mu = rng::uniform(&mut rng, m, d_out, -r, r);
            layers.push(layer);
        }
        let likelihood = match spec.n_classes {
            None => Likelihood::gaussian(T::of(init.noise_variance))?,
            Some(c) => Likelihood::Softmax { n_classes: c },
        };
        let mut model = Self::from_layers(layers, likelihood, spec.architecture)?;
        if spec.pca_mean {
            model.init_pca_mean(x_train)?;
        }
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Argument("a model needs at least one layer".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if l > 0 && layer.d_in() != self.layers[l - 1].d_out() {
                return Err(Error::Shape(format!("layer {l} input width does not match layer {}", l - 1)));
            }
            let expect = match (self.architecture, l) {
                (Architecture::Ddgp, l) if l > 0 => KernelKind::Hybrid,
                _ => KernelKind::Se,
            };
            if layer.kernel_kind != expect {
                return Err(Error::Argument(format!(
                    "layer {l} of a {:?} must use a {expect:?} kernel",
                    self.architecture
                )));
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("validated").d_out()
    }

    /// Sets PCA mean functions on every hidden layer; the output layer keeps a zero mean.
    ///
    /// Layer `l` maps its input through the top right singular vectors of the
    /// training inputs projected through the preceding layers' maps. Layers
    /// wider than their input are padded with zero columns.
    pub fn init_pca_mean(&mut self, x_train: &Matrix<T>) -> Result<()> {
        let mut projected = x_train.clone();
        let last = self.layers.len() - 1;
        for layer in &mut self.layers[..last] {
            let w = pca_weight(&projected, layer.d_out())?;
            projected = projected.matmul(&w)?;
            layer.mean_fn = MeanFunctionSpec::linear(MeanKind::PcaLinear, w);
        }
        Ok(())
    }

    /// Parameters in canonical order, with names and groups.
    pub fn params(&self) -> Vec<(ParamInfo, Matrix<T>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer_params(layer, &format!("layer{}.", l + 1)));
        }
        if let Likelihood::Gaussian { log_variance } = self.likelihood {
            let info = ParamInfo {
                name: "likelihood.log_variance".into(),
                group: ParamGroup::Likelihood,
                shape: (1, 1),
            };
            out.push((info, Matrix::scalar(log_variance)));
        }
        out
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        self.params().into_iter().map(|(i, _)| i).collect()
    }

    pub fn param_values(&self) -> Vec<Matrix<T>> {
        self.params().into_iter().map(|(_, v)| v).collect()
    }

    /// Replaces all parameters; `values` must follow [`Self::params`] order.
    pub fn set_param_values(&mut self, values: Vec<Matrix<T>>) -> Result<()> {
        let expected = self.params().len();
        if values.len() != expected {
            return Err(Error::Argument(format!("{} parameter values, expected {expected}", values.len())));
        }
        let mut it = values.into_iter();
        for layer in &mut self.layers {
            set_layer_params(layer, &mut it)?;
        }
        if let Likelihood::Gaussian { log_variance } = &mut self.likelihood {
            *log_variance = it.next().expect("counted").item();
        }
        Ok(())
    }

    fn bind_with(&self, tape: &Tape<T>, make: impl Fn(&Tape<T>, Matrix<T>) -> Var) -> (Vec<Var>, BoundModel) {
        let leaves: Vec<Var> = self.params().into_iter().map(|(_, v)| make(tape, v)).collect();
        let mut it = leaves.clone().into_iter();
        let layers = self.layers.iter().map(|l| bound_from_leaves(l, &mut it)).collect();
        let lik_log_variance = match self.likelihood {
            Likelihood::Gaussian { .. } => it.next(),
            Likelihood::Softmax { .. } => None,
        };
        (leaves, BoundModel { layers, lik_log_variance })
    }

    pub(crate) fn bind(&self, tape: &Tape<T>) -> (Vec<Var>, BoundModel) {
        self.bind_with(tape, |t, v| t.leaf(v))
    }

    /// Standard-normal draws for one forward pass over `n` points.
    pub fn draw_noise(&self, n: usize, out_rng: &mut ChaCha8Rng, z_rng: &mut ChaCha8Rng) -> Vec<LayerNoise<T>> {
        self.layers
            .iter()
            .map(|layer| LayerNoise {
                output: rng::standard_normal(out_rng, n, layer.d_out()),
                inducing: match layer.inducing {
                    InducingInputs::Euclidean(_) => None,
                    InducingInputs::Distributional { .. } => {
                        Some(rng::standard_normal(z_rng, layer.n_inducing(), layer.d_in()))
                    }
                },
            })
            .collect()
    }

    /// Noise for pass `index` of the run seeded with `seed`.
    pub fn noise_for(&self, n: usize, seed: u64, index: u64) -> Vec<LayerNoise<T>> {
        let mut out_rng = rng::stream(seed, index, Purpose::LayerNoise);
        let mut z_rng = rng::stream(seed, index, Purpose::InducingNoise);
        self.draw_noise(n, &mut out_rng, &mut z_rng)
    }

    fn check_noise(&self, n: usize, noise: &[LayerNoise<T>]) -> Result<()> {
        if noise.len() != self.layers.len() {
            return Err(Error::Argument(format!(
                "{} noise blocks for {} layers",
                noise.len(),
                self.layers.len()
            )));
        }
        if noise.iter().any(|nz| nz.output.rows() != n) {
            return Err(Error::Shape(format!("noise rows do not match {n} points")));
        }
        Ok(())
    }

    pub(crate) fn forward_graph(
        &self,
        tape: &Tape<T>,
        bound: &BoundModel,
        x: &Matrix<T>,
        noise: &[LayerNoise<T>],
    ) -> Result<Vec<LayerNodes>> {
        self.check_noise(x.rows(), noise)?;
        let mut input = GraphInput {
            samples: tape.constant(x.clone()),
            dist: None,
        };
        let mut nodes = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let out = layer_graph(tape, layer, &bound.layers[l], &input, &noise[l], self.jitter)?;
            input = out.graph_output();
            nodes.push(out);
        }
        Ok(nodes)
    }

    pub(crate) fn elbo_graph(
        &self,
        tape: &Tape<T>,
        x: &Matrix<T>,
        y: &Targets<T>,
        n_total: usize,
        noise: &[LayerNoise<T>],
    ) -> Result<ElboGraph> {
        if y.len() != x.rows() || x.rows() == 0 {
            return Err(Error::Shape(format!("{} targets for {} inputs", y.len(), x.rows())));
        }
        let (leaves, bound) = self.bind(tape);
        let layers = self.forward_graph(tape, &bound, x, noise)?;
        let last = layers.last().expect("at least one layer");
        let ell = self.likelihood.expected_log_lik_graph(
            tape,
            bound.lik_log_variance,
            last.mean,
            last.total_var,
            last.samples,
            y,
        )?;
        let scale = T::of_usize(n_total) / T::of_usize(x.rows());
        let mut elbo = tape.scale(ell, scale);
        for nodes in &layers {
            elbo = tape.sub(elbo, nodes.kl)?;
        }
        Ok(ElboGraph { elbo, leaves })
    }

    /// Doubly-stochastic ELBO estimate for one batch and one noise draw.
    pub fn elbo(&self, x: &Matrix<T>, y: &Targets<T>, n_total: usize, noise: &[LayerNoise<T>]) -> Result<T> {
        let tape = Tape::new();
        let g = self.elbo_graph(&tape, x, y, n_total, noise)?;
        Ok(tape.scalar_value(g.elbo))
    }

    /// ELBO estimate and its gradient with respect to every parameter, in [`Self::params`] order.
    pub fn elbo_and_gradient(
        &self,
        x: &Matrix<T>,
        y: &Targets<T>,
        n_total: usize,
        noise: &[LayerNoise<T>],
    ) -> Result<(T, Vec<Matrix<T>>)> {
        let tape = Tape::new();
        let g = self.elbo_graph(&tape, x, y, n_total, noise)?;
        let value = tape.scalar_value(g.elbo);
        let grads = tape.gradient(g.elbo)?;
        let out = g
            .leaves
            .iter()
            .map(|&v| grads.get_or_zeros(v, tape.shape(v)))
            .collect();
        Ok((value, out))
    }

    /// Per-layer KL terms at the inducing draws in `noise`.
    pub fn kl_terms(&self, noise: &[LayerNoise<T>]) -> Result<Vec<T>> {
        self.layers
            .iter()
            .zip(noise)
            .map(|(layer, nz)| crate::svgp::kl_divergence(layer, nz))
            .collect()
    }

    /// One forward pass with explicit noise; returns every layer's output.
    pub fn forward_with_noise(&self, x: &Matrix<T>, noise: &[LayerNoise<T>]) -> Result<Vec<LayerOutput<T>>> {
        self.check_noise(x.rows(), noise)?;
        let mut parts: Vec<Vec<LayerOutput<T>>> = Vec::new();
        let mut start = 0;
        while start < x.rows() {
            let end = (start + CHUNK).min(x.rows());
            let idx: Vec<usize> = (start..end).collect();
            let chunk_noise: Vec<LayerNoise<T>> = noise
                .iter()
                .map(|nz| LayerNoise {
                    output: nz.output.select_rows(&idx),
                    inducing: nz.inducing.clone(),
                })
                .collect();
            let tape = Tape::new();
            let (_, bound) = self.bind_with(&tape, |t, v| t.constant(v));
            let nodes = self.forward_graph(&tape, &bound, &x.select_rows(&idx), &chunk_noise)?;
            parts.push(nodes.iter().map(|n| n.output(&tape)).collect());
            start = end;
        }
        if parts.len() == 1 {
            return Ok(parts.pop().expect("one chunk"));
        }
        let cat = |f: &dyn Fn(&LayerOutput<T>) -> &Matrix<T>, l: usize| -> Result<Matrix<T>> {
            let refs: Vec<&Matrix<T>> = parts.iter().map(|p| f(&p[l])).collect();
            Matrix::vcat(&refs)
        };
        (0..self.layers.len())
            .map(|l| {
                Ok(LayerOutput {
                    mean: cat(&|o| &o.mean, l)?,
                    var_parametric: cat(&|o| &o.var_parametric, l)?,
                    var_nonparametric: cat(&|o| &o.var_nonparametric, l)?,
                    samples: cat(&|o| &o.samples, l)?,
                    clamped: parts.iter().map(|p| p[l].clamped).sum(),
                })
            })
            .collect()
    }

    /// `n_samples` independent forward passes; indexed `[sample][layer]`.
    pub fn forward(&self, x: &Matrix<T>, n_samples: usize, seed: u64) -> Result<Vec<Vec<LayerOutput<T>>>> {
        if n_samples == 0 {
            return Err(Error::Argument("n_samples must be at least 1".into()));
        }
        (0..n_samples)
            .map(|s| {
                let noise = self.noise_for(x.rows(), seed, s as u64);
                self.forward_with_noise(x, &noise)
            })
            .collect()
    }
}

/// Top right singular vectors of `x` as columns, zero-padded to `width`.
///
/// Signs are fixed so the largest-magnitude entry of each column is positive.
pub fn pca_weight<T: Scalar>(x: &Matrix<T>, width: usize) -> Result<Matrix<T>> {
    let d = x.cols();
    let (_, vecs) = sym_eigen(&x.t_matmul(x)?)?;
    let mut w = Matrix::zeros(d, width);
    for j in 0..width.min(d) {
        let col = vecs.col(j);
        let pivot = col.iter().fold(T::zero(), |m, &v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < T::zero() { -T::one() } else { T::one() };
        for i in 0..d {
            w[(i, j)] = sign * col[i];
        }
    }
    Ok(w)
}

/// Lloyd's k-means with k-means++ seeding. Returns `k × D` centroids.
pub fn kmeans<T: Scalar>(x: &Matrix<T>, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Result<Matrix<T>> {
    let n = x.rows();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("cannot pick {k} centroids from {n} points")));
    }
    if k == n {
        return Ok(x.clone());
    }
    let dist2 = |a: &[T], b: &[T]| -> T { a.iter().zip(b).map(|(&p, &q)| (p - q) * (p - q)).sum() };
    let mut centres: Vec<Vec<T>> = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut best: Vec<T> = (0..n).map(|i| dist2(x.row(i), &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = best.iter().map(|d| d.as_f64()).sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, d) in best.iter().enumerate() {
                u -= d.as_f64();
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(dist2(x.row(i), &c));
        }
        centres.push(c);
    }
    let d = x.cols();
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let mut bi = 0;
            let mut bd = T::infinity();
            for (j, c) in centres.iter().enumerate() {
                let dd = dist2(x.row(i), c);
                if dd < bd {
                    bd = dd;
                    bi = j;
                }
            }
            if *a != bi {
                *a = bi;
                changed = true;
            }
        }
        let mut sums = vec![vec![T::zero(); d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(x.row(i)) {
                *s = *s + v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let c = T::of_usize(counts[j]);
                centres[j] = sums[j].iter().map(|&s| s / c).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Matrix::from_rows(&centres)
}
