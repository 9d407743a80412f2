mod common;

use multijm::autodiff::{value_and_gradient, Tape};
use multijm::inference::{nuts_sample, ChainConfig, FnTarget, GradientTarget, PosteriorDraws};
use multijm::model::JointModel;
use multijm::simulation::simulate_dataset;
use multijm::{Error, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use common::{ks_pvalue, ks_statistic, lesion_design, random_point};

fn quadratic(d: usize) -> FnTarget<impl Fn(&[f64]) -> (f64, Vec<f64>) + Sync> {
    FnTarget::new(d, |x: &[f64]| {
        value_and_gradient(x, |v| {
            let sq: Vec<_> = v.iter().map(|a| a.square()).collect();
            Real::sum(&sq).scale(-0.5)
        })
    })
}

fn correlated(rho: f64) -> FnTarget<impl Fn(&[f64]) -> (f64, Vec<f64>) + Sync> {
    let k = 1.0 / (1.0 - rho * rho);
    FnTarget::new(2, move |x: &[f64]| {
        let (a, b) = (x[0], x[1]);
        let v = -0.5 * k * (a * a - 2.0 * rho * a * b + b * b);
        (v, vec![-k * (a - rho * b), -k * (b - rho * a)])
    })
}

fn moments(draws: &PosteriorDraws, k: usize) -> (f64, f64) {
    let x = draws.column(k);
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn small_model() -> JointModel {
    let design = lesion_design(10, [0.01, 0.4]);
    let (data, _) = simulate_dataset(&design, 12).unwrap();
    JointModel::compile(data, design.model.clone()).unwrap()
}

#[test]
fn quadratic_gradient_is_minus_the_point() {
    let t = quadratic(4);
    let x = [0.3, -1.2, 2.5, 0.0];
    let mut g = vec![0.0; 4];
    let v = t.log_density_gradient(&x, &mut g).unwrap();
    assert_eq!(g, vec![-0.3, 1.2, -2.5, -0.0]);
    assert!((v + 0.5 * (0.09 + 1.44 + 6.25)).abs() < 1e-15);
}

#[test]
fn tape_value_matches_plain_evaluation_and_replays() {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let theta = random_point(&mut rng, model.dim(), 1.0);
        let (v, _) = model.grad_log_posterior(&theta).unwrap();
        let plain = model.log_density(&theta).unwrap().total;
        assert!((v - plain).abs() <= 1e-12 * plain.abs().max(1.0), "{v} vs {plain}");

        let tape = Tape::new();
        let inputs = tape.inputs(&theta);
        let lp = model.log_density(&inputs).unwrap().total;
        let replayed = tape.replay(&theta);
        let node = lp.index().unwrap();
        assert!((replayed[node] - plain).abs() <= 1e-12 * plain.abs().max(1.0));
    }
}

#[test]
fn model_gradient_matches_finite_differences() {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut points = 0;
    while points < 20 {
        let theta = random_point(&mut rng, model.dim(), 1.0);
        let sig = model.branch_signature(&theta).unwrap();
        let (_, g) = model.grad_log_posterior(&theta).unwrap();
        let mut smooth = true;
        let mut fd = vec![0.0; theta.len()];
        for k in 0..theta.len() {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[k] += h;
            down[k] -= h;
            if model.branch_signature(&up).unwrap() != sig || model.branch_signature(&down).unwrap() != sig {
                smooth = false;
                break;
            }
            fd[k] = (model.log_density(&up).unwrap().total - model.log_density(&down).unwrap().total) / (2.0 * h);
        }
        if !smooth {
            continue;
        }
        for k in 0..theta.len() {
            assert!((g[k] - fd[k]).abs() <= 1e-6 * g[k].abs().max(1.0), "coordinate {k}: {} vs {}", g[k], fd[k]);
        }
        points += 1;
    }
}

#[test]
fn standard_normal_target_is_recovered() {
    let cfg = ChainConfig { chains: 4, warmup: 1000, samples: 1000, seed: 11, ..Default::default() };
    let draws = nuts_sample(&quadratic(1), &cfg).unwrap();
    assert_eq!(draws.n_draws(), 4000);
    let (m, v) = moments(&draws, 0);
    assert!(m.abs() < 0.1, "mean {m}");
    assert!((v - 1.0).abs() < 0.15, "variance {v}");
}

#[test]
fn correlated_target_is_recovered() {
    let cfg = ChainConfig { chains: 4, warmup: 1000, samples: 1000, seed: 12, ..Default::default() };
    let draws = nuts_sample(&correlated(0.9), &cfg).unwrap();
    let (x, y) = (draws.column(0), draws.column(1));
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
    let (vx, vy) = (moments(&draws, 0).1, moments(&draws, 1).1);
    let rho = cov / (vx * vy).sqrt();
    assert!((rho - 0.9).abs() < 0.05, "correlation {rho}");
    assert!(mx.abs() < 0.1 && my.abs() < 0.1);
}

#[test]
fn draws_pass_a_kolmogorov_smirnov_test() {
    // One-dimensional NUTS has lag-1 autocorrelation near 0.45, so every
    // fifth draw is kept to make the independence-based p-value meaningful.
    let normal = Normal::standard();
    let mut passes = 0;
    for seed in 0..10 {
        let cfg = ChainConfig { chains: 1, warmup: 500, samples: 5000, seed, ..Default::default() };
        let draws = nuts_sample(&quadratic(1), &cfg).unwrap();
        let x: Vec<f64> = draws.column(0).into_iter().step_by(5).collect();
        let d = ks_statistic(&x, |v| normal.cdf(v));
        if ks_pvalue(d, x.len()) > 0.01 {
            passes += 1;
        }
    }
    assert!(passes >= 9, "{passes} of 10 seeds passed");
}

#[test]
fn sampling_is_reproducible_and_valid() {
    let model = small_model();
    let cfg = ChainConfig { chains: 2, warmup: 40, samples: 20, seed: 2, ..Default::default() };
    let a = nuts_sample(&model, &cfg).unwrap();
    let b = nuts_sample(&model, &cfg).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(a.log_posterior, b.log_posterior);
    assert_eq!(a.n_draws(), 40);
    let layout = model.layout();
    for r in 0..a.n_draws() {
        let p = layout.from_constrained(a.row(r)).unwrap();
        assert!(p.sigma > 0.0);
        for blk in &p.blocks {
            assert!(blk.sd.iter().all(|&s| s > 0.0));
            let d = blk.dim();
            let corr = nalgebra::DMatrix::from_row_slice(d, d, &blk.covariance());
            assert!(corr.cholesky().is_some());
        }
    }
}

#[test]
fn config_and_initialization_errors() {
    assert!(ChainConfig::default().validate().is_ok());
    assert!(matches!(
        ChainConfig { samples: 0, ..Default::default() }.validate(),
        Err(Error::Spec(_))
    ));
    assert!(ChainConfig { target_accept: 0.0, ..Default::default() }.validate().is_err());
    let bad = FnTarget::new(1, |_: &[f64]| (f64::NEG_INFINITY, vec![0.0]));
    let r = nuts_sample(&bad, &ChainConfig { chains: 1, warmup: 5, samples: 5, ..Default::default() });
    assert!(matches!(r, Err(Error::Initialization { .. })));
}

#[test]
fn draws_round_trip_through_csv() {
    let cfg = ChainConfig { chains: 2, warmup: 50, samples: 30, seed: 4, ..Default::default() };
    let draws = nuts_sample(&correlated(0.5), &cfg).unwrap();
    let mut buf = Vec::new();
    draws.write_csv(&mut buf).unwrap();
    let back = PosteriorDraws::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.names, draws.names);
    assert_eq!(back.values, draws.values);
    assert_eq!(back.chain, draws.chain);
}
