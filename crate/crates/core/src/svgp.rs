//! Sparse variational GP layers.
//!
//! A [`VariationalLayer`] holds inducing inputs, the Gaussian posterior over
//! inducing outputs and kernel hyperparameters. Its predictive moments and KL
//! term are built on an autodiff [`Tape`] so the same code serves prediction
//! and training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::deep::{Architecture, DeepModel};
use crate::error::{Error, Result};
use crate::gaussmath::{GaussianVector, DEFAULT_JITTER, MAX_JITTER_ATTEMPTS};
use crate::kernels::{self, KernelKind, KernelParams};
use crate::likelihood::{Likelihood, Targets};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Floor under which variances are treated as zero when differentiating square roots.
pub(crate) const SQRT_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InducingInputs<T> {
    Euclidean(Matrix<T>),
    /// Gaussian locations `N(means, exp(log_variances))`, one per inducing point and dimension.
    Distributional {
        means: Matrix<T>,
        log_variances: Matrix<T>,
    },
}

impl<T: Scalar> InducingInputs<T> {
    pub fn count(&self) -> usize {
        match self {
            InducingInputs::Euclidean(z) => z.rows(),
            InducingInputs::Distributional { means, .. } => means.rows(),
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            InducingInputs::Euclidean(z) => z.cols(),
            InducingInputs::Distributional { means, .. } => means.cols(),
        }
    }

    /// Location means (the inputs themselves when Euclidean).
    pub fn means(&self) -> &Matrix<T> {
        match self {
            InducingInputs::Euclidean(z) => z,
            InducingInputs::Distributional { means, .. } => means,
        }
    }

    pub fn variances(&self) -> Option<Matrix<T>> {
        match self {
            InducingInputs::Euclidean(_) => None,
            InducingInputs::Distributional { log_variances, .. } => Some(log_variances.map(|v| v.exp())),
        }
    }

    /// Location draw `M_Z + √Σ_Z·ε` for a given standard-normal `eps`.
    pub fn draw(&self, eps: Option<&Matrix<T>>) -> Result<Matrix<T>> {
        match (self, eps) {
            (InducingInputs::Euclidean(z), _) => Ok(z.clone()),
            (InducingInputs::Distributional { means, log_variances }, Some(e)) => {
                let sd = log_variances.map(|v| (T::half() * v).exp());
                means.add(&sd.hadamard(e)?)
            }
            (InducingInputs::Distributional { means, .. }, None) => Ok(means.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanKind {
    Zero,
    Identity,
    PcaLinear,
}

/// Mean function `m(F) = F·W` with a fixed weight, or zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFunctionSpec<T> {
    pub kind: MeanKind,
    pub weight: Option<Matrix<T>>,
}

impl<T: Scalar> MeanFunctionSpec<T> {
    pub fn zero() -> Self {
        MeanFunctionSpec {
            kind: MeanKind::Zero,
            weight: None,
        }
    }

    /// Identity map, truncated or zero-padded when widths differ.
    pub fn identity(d_in: usize, d_out: usize) -> Self {
        let w = Matrix::from_fn(d_in, d_out, |i, j| if i == j { T::one() } else { T::zero() });
        MeanFunctionSpec {
            kind: MeanKind::Identity,
            weight: Some(w),
        }
    }

    pub fn linear(kind: MeanKind, weight: Matrix<T>) -> Self {
        MeanFunctionSpec {
            kind,
            weight: Some(weight),
        }
    }

    pub fn apply(&self, f: &Matrix<T>) -> Result<Option<Matrix<T>>> {
        self.weight.as_ref().map(|w| f.matmul(w)).transpose()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalLayer<T> {
    pub inducing: InducingInputs<T>,
    /// Inducing output means, `M × D_out`.
    pub q_mu: Matrix<T>,
    /// One `M × M` lower-triangular factor of the inducing covariance per output.
    /// Only the lower triangle is read; the diagonal sign is irrelevant.
    pub q_sqrt: Vec<Matrix<T>>,
    pub kernel: KernelParams<T>,
    pub kernel_kind: KernelKind,
    pub mean_fn: MeanFunctionSpec<T>,
    #[serde(default)]
    pub whiten: bool,
}

impl<T: Scalar> VariationalLayer<T> {
    /// Layer with `q_mu = 0` and `q_sqrt = scale·I`.
    pub fn new(
        inducing: InducingInputs<T>,
        d_out: usize,
        kernel: KernelParams<T>,
        kernel_kind: KernelKind,
        mean_fn: MeanFunctionSpec<T>,
        q_sqrt_scale: T,
    ) -> Result<Self> {
        let m = inducing.count();
        let layer = VariationalLayer {
            q_mu: Matrix::zeros(m, d_out),
            q_sqrt: vec![Matrix::identity(m).scale(q_sqrt_scale); d_out],
            inducing,
            kernel,
            kernel_kind,
            mean_fn,
            whiten: false,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing.count()
    }

    pub fn d_in(&self) -> usize {
        self.inducing.dims()
    }

    pub fn d_out(&self) -> usize {
        self.q_mu.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, d_in, d_out) = (self.n_inducing(), self.d_in(), self.d_out());
        if self.q_mu.rows() != m || self.q_sqrt.len() != d_out {
            return Err(Error::Shape("q_mu/q_sqrt do not match the inducing set".into()));
        }
        if self.q_sqrt.iter().any(|l| l.shape() != (m, m)) {
            return Err(Error::Shape("q_sqrt blocks must be M x M".into()));
        }
        if self.kernel.dims() != d_in {
            return Err(Error::Shape(format!(
                "kernel has {} lengthscales for {d_in} inputs",
                self.kernel.dims()
            )));
        }
        if let Some(w) = &self.mean_fn.weight {
            if w.shape() != (d_in, d_out) {
                return Err(Error::Shape(format!("mean weight {:?} for {d_in}->{d_out}", w.shape())));
            }
        }
        match (&self.inducing, self.kernel_kind) {
            (InducingInputs::Euclidean(_), KernelKind::Hybrid) => Err(Error::Argument(
                "hybrid kernels need distributional inducing inputs".into(),
            )),
            (InducingInputs::Distributional { means, log_variances }, _)
                if means.shape() != log_variances.shape() =>
            {
                Err(Error::Shape("inducing means and variances differ in shape".into()))
            }
            _ => Ok(()),
        }
    }

    /// Inducing covariance `L Lᵀ` for output `d`.
    pub fn q_cov(&self, d: usize) -> Result<Matrix<T>> {
        let l = self.q_sqrt[d].tril();
        l.matmul_t(&l)
    }

    /// Predictive moments and one sample per point.
    pub fn predict(&self, inputs: &LayerInputs<T>, noise: &LayerNoise<T>) -> Result<LayerOutput<T>> {
        self.predict_with_jitter(inputs, noise, T::of(DEFAULT_JITTER))
    }

    /// [`Self::predict`] with an explicit base jitter; zero tries a plain factorization first.
    pub fn predict_with_jitter(
        &self,
        inputs: &LayerInputs<T>,
        noise: &LayerNoise<T>,
        jitter: T,
    ) -> Result<LayerOutput<T>> {
        let tape = Tape::new();
        let bound = bind_layer_const(&tape, self);
        let graph_in = GraphInput::constant(&tape, inputs);
        let nodes = layer_graph(&tape, self, &bound, &graph_in, noise, jitter)?;
        Ok(nodes.output(&tape))
    }

    /// Gram blocks `(K_uu, K_uf)` at a given inducing draw, evaluated without the tape.
    pub fn gram_blocks(&self, inputs: &LayerInputs<T>, z: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        match self.kernel_kind {
            KernelKind::Se => Ok((
                kernels::se_ard(z, z, &self.kernel)?,
                kernels::se_ard(z, &inputs.samples, &self.kernel)?,
            )),
            KernelKind::Hybrid => {
                let zd = GaussianVector::new(
                    self.inducing.means().clone(),
                    self.inducing.variances().expect("validated distributional"),
                )?;
                let fd = inputs
                    .dist
                    .as_ref()
                    .ok_or_else(|| Error::Argument("hybrid layer needs input distributions".into()))?;
                Ok((
                    kernels::hybrid(z, z, &zd, &zd, &self.kernel)?,
                    kernels::hybrid(z, &inputs.samples, &zd, fd, &self.kernel)?,
                ))
            }
        }
    }
}

/// What a layer consumes: samples always, marginals for hybrid layers.
#[derive(Clone, Debug)]
pub struct LayerInputs<T> {
    pub samples: Matrix<T>,
    pub dist: Option<GaussianVector<T>>,
}

impl<T: Scalar> LayerInputs<T> {
    pub fn euclidean(x: Matrix<T>) -> Self {
        LayerInputs { samples: x, dist: None }
    }

    pub fn n_points(&self) -> usize {
        self.samples.rows()
    }
}

/// Standard-normal draws consumed by one forward pass through one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNoise<T> {
    /// `n × D_out`, reparameterizes the output samples.
    pub output: Matrix<T>,
    /// `M × D_in`, reparameterizes distributional inducing locations.
    pub inducing: Option<Matrix<T>>,
}

impl<T: Scalar> LayerNoise<T> {
    pub fn zeros(n: usize, layer: &VariationalLayer<T>) -> Self {
        let inducing = match layer.inducing {
            InducingInputs::Euclidean(_) => None,
            InducingInputs::Distributional { .. } => Some(Matrix::zeros(layer.n_inducing(), layer.d_in())),
        };
        LayerNoise {
            output: Matrix::zeros(n, layer.d_out()),
            inducing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOutput<T> {
    pub mean: Matrix<T>,
    pub var_parametric: Matrix<T>,
    pub var_nonparametric: Matrix<T>,
    pub samples: Matrix<T>,
    /// Points whose non-parametric variance came out negative and was clamped to 0.
    pub clamped: usize,
}

impl<T: Scalar> LayerOutput<T> {
    pub fn total_variance(&self) -> Matrix<T> {
        self.var_parametric.add(&self.var_nonparametric).expect("same shapes")
    }

    /// Marginals handed to a following hybrid layer.
    pub fn marginals(&self) -> GaussianVector<T> {
        GaussianVector {
            means: self.mean.clone(),
            variances: self.total_variance(),
        }
    }
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Debug)]
pub(crate) struct BoundLayer {
    pub inducing_mean: Var,
    pub inducing_log_var: Option<Var>,
    pub q_mu: Var,
    pub q_sqrt: Vec<Var>,
    pub log_variance: Var,
    pub log_lengthscales: Var,
    pub log_w2_lengthscales: Option<Var>,
}

/// Binds a layer's parameters as constants (prediction without gradients).
pub(crate) fn bind_layer_const<T: Scalar>(tape: &Tape<T>, layer: &VariationalLayer<T>) -> BoundLayer {
    let mut leaves = Vec::new();
    for (_, value) in layer_params(layer, "") {
        leaves.push(tape.constant(value));
    }
    bound_from_leaves(layer, &mut leaves.into_iter())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Inducing output means and covariance factors.
    Variational,
    /// Inducing locations (Euclidean or distributional).
    Inducing,
    /// Kernel signal variance and lengthscales.
    Hyper,
    Likelihood,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    pub shape: (usize, usize),
}

/// Parameters of a layer in canonical order.
pub(crate) fn layer_params<T: Scalar>(layer: &VariationalLayer<T>, prefix: &str) -> Vec<(ParamInfo, Matrix<T>)> {
    let info = |name: &str, group, m: &Matrix<T>| ParamInfo {
        name: format!("{prefix}{name}"),
        group,
        shape: m.shape(),
    };
    let mut out = Vec::new();
    match &layer.inducing {
        InducingInputs::Euclidean(z) => out.push((info("z", ParamGroup::Inducing, z), z.clone())),
        InducingInputs::Distributional { means, log_variances } => {
            out.push((info("z_mean", ParamGroup::Inducing, means), means.clone()));
            out.push((info("z_log_var", ParamGroup::Inducing, log_variances), log_variances.clone()));
        }
    }
    out.push((info("q_mu", ParamGroup::Variational, &layer.q_mu), layer.q_mu.clone()));
    for (d, l) in layer.q_sqrt.iter().enumerate() {
        out.push((info(&format!("q_sqrt_{d}"), ParamGroup::Variational, l), l.clone()));
    }
    let lv = Matrix::scalar(layer.kernel.log_variance);
    out.push((info("log_variance", ParamGroup::Hyper, &lv), lv));
    let ls = Matrix::row_vector(&layer.kernel.log_lengthscales);
    out.push((info("log_lengthscales", ParamGroup::Hyper, &ls), ls));
    if let Some(w) = &layer.kernel.log_w2_lengthscales {
        let w = Matrix::row_vector(w);
        out.push((info("log_w2_lengthscales", ParamGroup::Hyper, &w), w));
    }
    out
}

/// Writes values back in the order produced by [`layer_params`].
pub(crate) fn set_layer_params<T: Scalar>(
    layer: &mut VariationalLayer<T>,
    values: &mut impl Iterator<Item = Matrix<T>>,
) -> Result<()> {
    let mut next = |shape: (usize, usize)| -> Result<Matrix<T>> {
        let v = values
            .next()
            .ok_or_else(|| Error::Argument("too few parameter values".into()))?;
        if v.shape() != shape {
            return Err(Error::Shape(format!("parameter {:?} vs expected {shape:?}", v.shape())));
        }
        Ok(v)
    };
    match &mut layer.inducing {
        InducingInputs::Euclidean(z) => *z = next(z.shape())?,
        InducingInputs::Distributional { means, log_variances } => {
            *means = next(means.shape())?;
            *log_variances = next(log_variances.shape())?;
        }
    }
    layer.q_mu = next(layer.q_mu.shape())?;
    for d in 0..layer.q_sqrt.len() {
        layer.q_sqrt[d] = next(layer.q_sqrt[d].shape())?;
    }
    layer.kernel.log_variance = next((1, 1))?.item();
    let d = layer.kernel.dims();
    layer.kernel.log_lengthscales = next((1, d))?.into_vec();
    if layer.kernel.log_w2_lengthscales.is_some() {
        layer.kernel.log_w2_lengthscales = Some(next((1, d))?.into_vec());
    }
    Ok(())
}

pub(crate) fn bound_from_leaves<T: Scalar>(
    layer: &VariationalLayer<T>,
    leaves: &mut impl Iterator<Item = Var>,
) -> BoundLayer {
    let mut next = || leaves.next().expect("leaf count matches layer_params");
    let (inducing_mean, inducing_log_var) = match layer.inducing {
        InducingInputs::Euclidean(_) => (next(), None),
        InducingInputs::Distributional { .. } => (next(), Some(next())),
    };
    let q_mu = next();
    let q_sqrt = (0..layer.d_out()).map(|_| next()).collect();
    let log_variance = next();
    let log_lengthscales = next();
    let log_w2_lengthscales = layer.kernel.log_w2_lengthscales.as_ref().map(|_| next());
    BoundLayer {
        inducing_mean,
        inducing_log_var,
        q_mu,
        q_sqrt,
        log_variance,
        log_lengthscales,
        log_w2_lengthscales,
    }
}

/// Layer inputs as tape nodes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GraphInput {
    pub samples: Var,
    /// `(means, variances)` of the previous layer's marginals.
    pub dist: Option<(Var, Var)>,
}

impl GraphInput {
    pub fn constant<T: Scalar>(tape: &Tape<T>, inputs: &LayerInputs<T>) -> Self {
        GraphInput {
            samples: tape.constant(inputs.samples.clone()),
            dist: inputs
                .dist
                .as_ref()
                .map(|d| (tape.constant(d.means.clone()), tape.constant(d.variances.clone()))),
        }
    }
}

/// Tape nodes produced by one layer.
#[derive(Clone, Debug)]
pub(crate) struct LayerNodes {
    pub mean: Var,
    pub var_p: Var,
    pub var_np: Var,
    pub total_var: Var,
    pub samples: Var,
    pub kl: Var,
    pub clamped: usize,
}

impl LayerNodes {
    pub fn output<T: Scalar>(&self, tape: &Tape<T>) -> LayerOutput<T> {
        LayerOutput {
            mean: (*tape.value(self.mean)).clone(),
            var_parametric: (*tape.value(self.var_p)).clone(),
            var_nonparametric: (*tape.value(self.var_np)).clone(),
            samples: (*tape.value(self.samples)).clone(),
            clamped: self.clamped,
        }
    }

    pub fn graph_output(&self) -> GraphInput {
        GraphInput {
            samples: self.samples,
            dist: Some((self.mean, self.total_var)),
        }
    }
}

/// Kernel matrix between two point sets on the tape.
///
/// `da`/`db` carry `(means, variances)` for the Wasserstein factor of hybrid kernels.
pub(crate) fn kernel_graph<T: Scalar>(
    tape: &Tape<T>,
    kind: KernelKind,
    bound: &BoundLayer,
    xa: Var,
    xb: Var,
    da: Option<(Var, Var)>,
    db: Option<(Var, Var)>,
) -> Result<Var> {
    let ls = tape.exp(bound.log_lengthscales);
    let mut d2 = tape.sq_dist(tape.div_row(xa, ls)?, tape.div_row(xb, ls)?)?;
    if kind == KernelKind::Hybrid {
        let ((ma, va), (mb, vb)) = match (da, db) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Argument("hybrid kernel needs input distributions".into())),
        };
        let wls = match bound.log_w2_lengthscales {
            Some(w) => tape.exp(w),
            None => ls,
        };
        let floor = T::of(SQRT_FLOOR);
        let dm = tape.sq_dist(tape.div_row(ma, wls)?, tape.div_row(mb, wls)?)?;
        let sa = tape.div_row(tape.sqrt(va, floor), wls)?;
        let sb = tape.div_row(tape.sqrt(vb, floor), wls)?;
        let ds = tape.sq_dist(sa, sb)?;
        d2 = tape.add(tape.add(d2, dm)?, ds)?;
    }
    tape.scale_by(tape.exp(tape.neg(d2)), tape.exp(bound.log_variance))
}

/// Cholesky of `K + jI`, escalating `j` ×10 on failure.
pub(crate) fn jittered_cholesky<T: Scalar>(tape: &Tape<T>, k: Var, base: T) -> Result<Var> {
    let mut jitter = base;
    for _ in 0..MAX_JITTER_ATTEMPTS {
        if let Ok(l) = tape.cholesky(tape.add_diag(k, jitter)) {
            return Ok(l);
        }
        jitter = if jitter > T::zero() { jitter * T::of(10.0) } else { T::of(DEFAULT_JITTER) };
    }
    Err(Error::Cholesky {
        attempts: MAX_JITTER_ATTEMPTS,
        jitter: (jitter / T::of(10.0)).as_f64(),
    })
}

fn replicate_cols<T: Scalar>(tape: &Tape<T>, col: Var, times: usize) -> Result<Var> {
    if times == 1 {
        return Ok(col);
    }
    tape.hcat(&vec![col; times])
}

/// Builds predictive moments, samples and `KL[q(U) ‖ p(U)]` for one layer.
pub(crate) fn layer_graph<T: Scalar>(
    tape: &Tape<T>,
    layer: &VariationalLayer<T>,
    bound: &BoundLayer,
    input: &GraphInput,
    noise: &LayerNoise<T>,
    jitter: T,
) -> Result<LayerNodes> {
    let m = layer.n_inducing();
    let d_out = layer.d_out();
    let n = tape.shape(input.samples).0;
    if tape.shape(input.samples).1 != layer.d_in() {
        return Err(Error::Shape(format!(
            "layer expects {} inputs, got {:?}",
            layer.d_in(),
            tape.shape(input.samples)
        )));
    }
    if noise.output.shape() != (n, d_out) {
        return Err(Error::Shape(format!("output noise {:?} for {n} x {d_out}", noise.output.shape())));
    }

    // Inducing locations: fixed, or one reparameterized draw per pass.
    let (z, z_dist) = match (bound.inducing_log_var, &noise.inducing) {
        (None, _) => (bound.inducing_mean, None),
        (Some(log_var), eps) => {
            let z = match eps {
                Some(e) => {
                    let sd = tape.exp(tape.scale(log_var, T::half()));
                    tape.add(bound.inducing_mean, tape.mul(sd, tape.constant(e.clone()))?)?
                }
                None => bound.inducing_mean,
            };
            (z, Some((bound.inducing_mean, tape.exp(log_var))))
        }
    };

    let kind = layer.kernel_kind;
    let kuu = kernel_graph(tape, kind, bound, z, z, z_dist, z_dist)?;
    let kuf = kernel_graph(tape, kind, bound, z, input.samples, z_dist, input.dist)?;
    let lk = jittered_cholesky(tape, kuu, jitter)?;
    let a = tape.solve_lower(lk, kuf)?; // M x n

    // Non-parametric variance: σ² − diag(K_fu K_uu⁻¹ K_uf), clamped at 0.
    let kdiag = tape.scale_by(tape.constant(Matrix::filled(1, n, T::one())), tape.exp(bound.log_variance))?;
    let raw_np = tape.sub(kdiag, tape.sum_cols(tape.square(a)))?;
    let clamped = tape.value(raw_np).as_slice().iter().filter(|v| **v < T::zero()).count();
    let var_np_col = tape.transpose(tape.clamp_min0(raw_np));
    let var_np = replicate_cols(tape, var_np_col, d_out)?;

    let mean_in = match &layer.mean_fn.weight {
        Some(w) => {
            let w = tape.constant(w.clone());
            Some((tape.matmul(input.samples, w)?, tape.matmul(z, w)?))
        }
        None => None,
    };

    let factors: Vec<Var> = bound.q_sqrt.iter().map(|&l| tape.tril(l)).collect();
    let proj = if layer.whiten { a } else { tape.solve_lower_t(lk, a)? };
    let centred_mu = match (&mean_in, layer.whiten) {
        (Some((_, mz)), false) => tape.sub(bound.q_mu, *mz)?,
        _ => bound.q_mu,
    };
    let mut mean = tape.matmul(tape.transpose(proj), centred_mu)?;
    if let Some((mf, _)) = mean_in {
        mean = tape.add(mean, mf)?;
    }

    let mut cols = Vec::with_capacity(d_out);
    for &l in &factors {
        let c = tape.matmul(tape.transpose(l), proj)?;
        cols.push(tape.transpose(tape.sum_cols(tape.square(c))));
    }
    let var_p = if d_out == 1 { cols[0] } else { tape.hcat(&cols)? };

    // KL[q(U) ‖ p(U)]
    let md = T::of_usize(m * d_out);
    let mut log_det_s = tape.sum_log_abs_diag(factors[0]);
    for &l in &factors[1..] {
        log_det_s = tape.add(log_det_s, tape.sum_log_abs_diag(l))?;
    }
    let stacked = if d_out == 1 { factors[0] } else { tape.hcat(&factors)? };
    let (trace, maha, log_det_k) = if layer.whiten {
        (tape.sum(tape.square(stacked)), tape.sum(tape.square(bound.q_mu)), None)
    } else {
        let trace = tape.sum(tape.square(tape.solve_lower(lk, stacked)?));
        let maha = tape.sum(tape.square(tape.solve_lower(lk, centred_mu)?));
        let ld = tape.scale(tape.sum_log_abs_diag(lk), T::two() * T::of_usize(d_out));
        (trace, maha, Some(ld))
    };
    let mut kl = tape.add(trace, maha)?;
    kl = tape.add_const(kl, -md);
    if let Some(ld) = log_det_k {
        kl = tape.add(kl, ld)?;
    }
    kl = tape.sub(kl, tape.scale(log_det_s, T::two()))?;
    let kl = tape.scale(kl, T::half());

    let total_var = tape.add(var_p, var_np)?;
    let sd = tape.sqrt(total_var, T::of(SQRT_FLOOR));
    let samples = tape.add(mean, tape.mul(sd, tape.constant(noise.output.clone()))?)?;

    Ok(LayerNodes {
        mean,
        var_p,
        var_np,
        total_var,
        samples,
        kl,
        clamped,
    })
}

/// Single-layer ELBO: `(n_total/B)·Σ E_q[log p(y|f)] − KL[q(U) ‖ p(U)]`.
pub fn elbo<T: Scalar>(
    layer: &VariationalLayer<T>,
    x: &Matrix<T>,
    y: &Targets<T>,
    likelihood: &Likelihood<T>,
    n_total: usize,
    noise: &LayerNoise<T>,
) -> Result<T> {
    let model = DeepModel::from_layers(vec![layer.clone()], likelihood.clone(), Architecture::Dgp)?;
    model.elbo(x, y, n_total, std::slice::from_ref(noise))
}

/// `KL[q(U) ‖ p(U)]` of a layer at a given inducing draw, without the tape.
pub fn kl_divergence<T: Scalar>(layer: &VariationalLayer<T>, noise: &LayerNoise<T>) -> Result<T> {
    let tape = Tape::new();
    let bound = bind_layer_const(&tape, layer);
    let dummy = LayerInputs::euclidean(Matrix::zeros(1, layer.d_in()));
    let mut dummy_in = GraphInput::constant(&tape, &dummy);
    if layer.kernel_kind == KernelKind::Hybrid {
        dummy_in.dist = Some((
            tape.constant(Matrix::zeros(1, layer.d_in())),
            tape.constant(Matrix::zeros(1, layer.d_in())),
        ));
    }
    let noise = LayerNoise {
        output: Matrix::zeros(1, layer.d_out()),
        inducing: noise.inducing.clone(),
    };
    let nodes = layer_graph(&tape, layer, &bound, &dummy_in, &noise, T::of(DEFAULT_JITTER))?;
    Ok(tape.scalar_value(nodes.kl))
}

/// Closed-form optimal `q(U)` for a Gaussian likelihood with noise `noise_var`
/// (the collapsed-bound optimum), written into `layer` for every output.
///
/// Only valid for Euclidean SE layers without a mean function.
pub fn set_optimal_gaussian_q<T: Scalar>(
    layer: &mut VariationalLayer<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
    noise_var: T,
) -> Result<()> {
    if layer.kernel_kind != KernelKind::Se || layer.mean_fn.weight.is_some() {
        return Err(Error::Unsupported("optimal q needs a zero-mean SE layer".into()));
    }
    let z = layer.inducing.means().clone();
    let kuu = kernels::se_ard(&z, &z, &layer.kernel)?;
    let kuf = kernels::se_ard(&z, x, &layer.kernel)?;
    // Σ = K_uu + σ⁻² K_uf K_fu ; S = K_uu Σ⁻¹ K_uu ; m = σ⁻² K_uu Σ⁻¹ K_uf y
    let sigma = kuu.add(&kuf.matmul_t(&kuf)?.scale(noise_var.recip()))?;
    let ls = sigma.cholesky()?;
    let s_inv_kuu = ls.cholesky_solve(&kuu)?;
    let s = kuu.matmul(&s_inv_kuu)?;
    let s = s.add(&s.transpose())?.scale(T::half());
    let m = kuu.matmul(&ls.cholesky_solve(&kuf.matmul(y)?)?)?.scale(noise_var.recip());
    let (l_s, _) = crate::gaussmath::robust_cholesky(&s)?;
    let (l_k, _) = crate::gaussmath::robust_cholesky(&kuu)?;
    for d in 0..layer.d_out() {
        let col = Matrix::column_vector(&m.col(d.min(m.cols() - 1)));
        if layer.whiten {
            let v = l_k.solve_lower(&col)?;
            for i in 0..layer.n_inducing() {
                layer.q_mu[(i, d)] = v[(i, 0)];
            }
            layer.q_sqrt[d] = l_k.solve_lower(&l_s)?;
        } else {
            for i in 0..layer.n_inducing() {
                layer.q_mu[(i, d)] = col[(i, 0)];
            }
            layer.q_sqrt[d] = l_s.clone();
        }
    }
    Ok(())
}
