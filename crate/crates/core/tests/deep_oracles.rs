use ddgp::data::{self, make_banana, make_toy_1d};
use ddgp::deep::{Architecture, DeepModel, InitSpec, ModelSpec};
use ddgp::eval;
use ddgp::kernels::KernelKind;
use ddgp::likelihood::Targets;
use ddgp::linalg::Matrix;
use ddgp::svgp::{InducingInputs, LayerNoise};
use ddgp::train::{self, CheckpointPlan, TrainConfig};

fn spec(architecture: Architecture, input_dim: usize, widths: Vec<usize>, m: usize) -> ModelSpec {
    let layers = widths.len() + 1;
    ModelSpec {
        architecture,
        input_dim,
        hidden_widths: widths,
        output_dim: 1,
        inducing: vec![m; layers],
        pca_mean: false,
        whiten: false,
        decoupled_w2_lengthscales: true,
        n_classes: None,
        init: InitSpec {
            q_sqrt_scale: 0.3,
            ..InitSpec::default()
        },
    }
}

/// A DDGP whose inducing locations are point masses and whose Wasserstein factor is flat,
/// paired with the DGP obtained by dropping the distributional parts.
fn degenerate_pair() -> (DeepModel<f64>, DeepModel<f64>) {
    let ds = make_toy_1d::<f64>(40, 3).unwrap();
    let mut ddgp = DeepModel::build(&spec(Architecture::Ddgp, 1, vec![2, 2], 6), &ds.x, 7).unwrap();
    for layer in ddgp.layers.iter_mut().skip(1) {
        if let InducingInputs::Distributional { log_variances, .. } = &mut layer.inducing {
            *log_variances = log_variances.map(|_| -80.0);
        }
        let d = layer.kernel.dims();
        layer.kernel.log_w2_lengthscales = Some(vec![1e6f64.ln(); d]);
    }
    let mut dgp = ddgp.clone();
    dgp.architecture = Architecture::Dgp;
    for layer in dgp.layers.iter_mut().skip(1) {
        layer.inducing = InducingInputs::Euclidean(layer.inducing.means().clone());
        layer.kernel.log_w2_lengthscales = None;
        layer.kernel_kind = KernelKind::Se;
    }
    dgp.validate().unwrap();
    (ddgp, dgp)
}

fn strip_inducing_noise(noise: &[LayerNoise<f64>]) -> Vec<LayerNoise<f64>> {
    noise
        .iter()
        .map(|nz| LayerNoise {
            output: nz.output.clone(),
            inducing: None,
        })
        .collect()
}

fn max_abs_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn point_mass_ddgp_reduces_to_dgp() {
    let (ddgp, dgp) = degenerate_pair();
    let ds = make_toy_1d::<f64>(40, 3).unwrap();
    for pass in 0..3 {
        let noise = ddgp.noise_for(ds.len(), 11, pass);
        let plain = strip_inducing_noise(&noise);
        let a = ddgp.elbo(&ds.x, &ds.y, ds.len(), &noise).unwrap();
        let b = dgp.elbo(&ds.x, &ds.y, ds.len(), &plain).unwrap();
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "elbo {a} vs {b}");
        let fa = ddgp.forward_with_noise(&ds.x, &noise).unwrap();
        let fb = dgp.forward_with_noise(&ds.x, &plain).unwrap();
        for (oa, ob) in fa.iter().zip(&fb) {
            assert!(max_abs_diff(&oa.mean, &ob.mean) < 1e-10);
            assert!(max_abs_diff(&oa.samples, &ob.samples) < 1e-10);
            assert!(max_abs_diff(&oa.var_nonparametric, &ob.var_nonparametric) < 1e-10);
        }
    }
}

/// Abramowitz and Stegun 7.1.26; absolute error below 1.5e-7.
fn normal_cdf(z: f64) -> f64 {
    let x = z.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let erf = 1.0 - poly * (-x * x).exp();
    0.5 * (1.0 + erf.copysign(z))
}

fn ks_statistic(mut z: Vec<f64>) -> f64 {
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    z.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = normal_cdf(v);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn first_layer_samples_follow_their_marginals() {
    let ds = make_toy_1d::<f64>(40, 3).unwrap();
    let model = DeepModel::build(&spec(Architecture::Ddgp, 1, vec![1], 6), &ds.x, 5).unwrap();
    let n = 4000;
    for &x0 in &[-1.3, 0.2, 2.0] {
        let x = Matrix::filled(n, 1, x0);
        let out = model.forward_with_noise(&x, &model.noise_for(n, 9, 0)).unwrap();
        let first = &out[0];
        let var = first.total_variance();
        let z: Vec<f64> = (0..n)
            .map(|i| (first.samples[(i, 0)] - first.mean[(i, 0)]) / var[(i, 0)].sqrt())
            .collect();
        let d = ks_statistic(z);
        // 1% critical value of the one-sample test.
        assert!(d < 1.63 / (n as f64).sqrt(), "x = {x0}: D = {d}");
    }
}

#[test]
fn two_layer_dgp_separates_the_banana_classes() {
    let ds = make_banana::<f64>(400, 0).unwrap();
    let prepared = data::prepare(&ds, 0.25, 0).unwrap();
    let mut s = spec(Architecture::Dgp, 2, vec![2], 20);
    s.n_classes = Some(2);
    s.whiten = true;
    s.init.q_sqrt_scale = 1e-5;
    let mut model = DeepModel::build(&s, &prepared.train.x, 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        batch_size: 64,
        max_iters: 3000,
        convergence_window: 0,
        ..TrainConfig::default()
    };
    train::fit(&mut model, &prepared.train, &cfg, &CheckpointPlan { dir: None }).unwrap();
    let acc = eval::accuracy(&model, &prepared.test, 20, 0).unwrap();
    assert!(acc > 0.95, "accuracy {acc}");
    assert!(matches!(prepared.test.y, Targets::Classes(_)));
}
