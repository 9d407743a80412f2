//! Log posterior of the raw-polynomial lesion model written out directly,
//! sharing no evaluation code with the library.

use std::collections::HashMap;

use multijm::model::JointModel;
use multijm::quadrature::QuadratureRule;
use nalgebra::{DMatrix, DVector};

use super::de_boor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn normal(x: f64, sd: f64) -> f64 {
    -0.5 * LN_2PI - sd.ln() - 0.5 * (x / sd).powi(2)
}

fn cauchy(x: f64, scale: f64) -> f64 {
    -(std::f64::consts::PI * scale * (1.0 + (x / scale).powi(2))).ln()
}

/// Cholesky factor of a 3×3 correlation from canonical partial
/// correlations `tanh(raw)` for the pairs (1,0), (2,0), (2,1).
fn cpc_factor(raw: &[f64]) -> DMatrix<f64> {
    let z: Vec<f64> = raw.iter().map(|r| r.tanh()).collect();
    let mut l = DMatrix::zeros(3, 3);
    l[(0, 0)] = 1.0;
    l[(1, 0)] = z[0];
    l[(1, 1)] = (1.0 - z[0] * z[0]).sqrt();
    l[(2, 0)] = z[1];
    l[(2, 1)] = z[2] * (1.0 - z[1] * z[1]).sqrt();
    l[(2, 2)] = (1.0 - z[1] * z[1] - l[(2, 1)] * l[(2, 1)]).sqrt();
    l
}

/// `log |det ∂(L10, L20, L21)/∂raw|` by central differences.
fn cpc_log_jacobian(raw: &[f64]) -> f64 {
    let free = |r: &[f64]| {
        let l = cpc_factor(r);
        [l[(1, 0)], l[(2, 0)], l[(2, 1)]]
    };
    let h = 1e-5;
    let mut jac = DMatrix::zeros(3, 3);
    for c in 0..3 {
        let mut up = raw.to_vec();
        let mut down = raw.to_vec();
        up[c] += h;
        down[c] -= h;
        let (a, b) = (free(&up), free(&down));
        for r in 0..3 {
            jac[(r, c)] = (a[r] - b[r]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

fn mvn(x: &[f64], cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let x = DVector::from_column_slice(x);
    let sol = chol.solve(&x);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * x.dot(&sol) - 0.5 * log_det - 0.5 * x.len() as f64 * LN_2PI
}

/// Components `[longitudinal, event, random effects, prior]` at the
/// unconstrained point `theta` of a below-patient model with fixed and
/// cluster columns `(1, t, t²)`, a patient intercept, one event covariate,
/// a max value + max slope association and no standardization.
pub fn lesion_log_posterior(model: &JointModel, theta: &[f64]) -> [f64; 4] {
    let names = model.layout().unconstrained_names();
    let mut by_prefix: HashMap<String, Vec<f64>> = HashMap::new();
    let mut by_name: HashMap<&str, f64> = HashMap::new();
    for (n, &v) in names.iter().zip(theta) {
        let prefix = n.split('[').next().unwrap().to_string();
        by_prefix.entry(prefix).or_default().push(v);
        by_name.insert(n.as_str(), v);
    }
    let get = |k: &str| by_prefix.get(k).cloned().unwrap_or_default();
    let (beta, gamma, alpha, lambda) = (get("beta"), get("gamma"), get("alpha"), get("lambda"));
    assert_eq!((beta.len(), gamma.len(), alpha.len()), (3, 1, 2));
    let log_sigma = by_name["log_sigma"];
    let sigma = log_sigma.exp();
    let log_sd_b = get("log_sd_patient");
    let log_sd_u = get("log_sd_cluster");
    let corr_raw = get("corr_raw_cluster");
    assert_eq!((log_sd_b.len(), log_sd_u.len(), corr_raw.len()), (1, 3, 3));
    let sd_b = log_sd_b[0].exp();
    let sd_u: Vec<f64> = log_sd_u.iter().map(|v| v.exp()).collect();
    let l = cpc_factor(&corr_raw);
    let d = DMatrix::from_diagonal(&DVector::from_vec(sd_u.clone()));
    let cov_u = &d * &l * l.transpose() * &d;
    let b_label = &model.layout().block(multijm::spec::Level::Patient).unwrap().labels[0];
    let u_labels = model.layout().block(multijm::spec::Level::Cluster).unwrap().labels.clone();

    let basis = &model.bases().baseline;
    let spline = |t: f64| -> f64 {
        (0..basis.df())
            .map(|k| de_boor(basis.knots(), basis.degree(), k, t) * lambda[k])
            .sum()
    };
    let data = model.dataset();
    let mut long = 0.0;
    let mut event = 0.0;
    let mut effects = 0.0;
    for pt in data.patients() {
        let b = by_name[format!("b[{}:{b_label}]", pt.id).as_str()];
        effects += normal(b, sd_b);
        let u: Vec<[f64; 3]> = pt
            .clusters
            .iter()
            .map(|c| {
                let v: Vec<f64> = u_labels
                    .iter()
                    .map(|lab| by_name[format!("u[{}/{}:{lab}]", pt.id, c.id).as_str()])
                    .collect();
                [v[0], v[1], v[2]]
            })
            .collect();
        for uj in &u {
            effects += mvn(uj, &cov_u);
        }
        let mu = |j: usize, t: f64| {
            (beta[0] + u[j][0] + b) + (beta[1] + u[j][1]) * t + (beta[2] + u[j][2]) * t * t
        };
        let slope = |j: usize, t: f64| (beta[1] + u[j][1]) + 2.0 * (beta[2] + u[j][2]) * t;
        for (j, c) in pt.clusters.iter().enumerate() {
            for o in &c.observations {
                long += normal(o.value - mu(j, o.time), sigma);
            }
        }
        let log_h = |t: f64| {
            let max_value = (0..u.len()).map(|j| mu(j, t)).fold(f64::NEG_INFINITY, f64::max);
            let max_slope = (0..u.len()).map(|j| slope(j, t)).fold(f64::NEG_INFINITY, f64::max);
            spline(t) + gamma[0] * pt.covariates[0] + alpha[0] * max_value + alpha[1] * max_slope
        };
        let (nodes, weights) = QuadratureRule::gauss_kronrod15().mapped(0.0, pt.event_time);
        let cum: f64 = nodes.iter().zip(&weights).map(|(&t, w)| w * log_h(t).exp()).sum();
        if pt.status {
            event += log_h(pt.event_time);
        }
        event -= cum;
    }

    let mut prior = 0.0;
    for x in beta.iter().chain(&gamma).chain(&alpha) {
        prior += normal(*x, 2.5);
    }
    for x in &lambda {
        prior += cauchy(*x, 5.0);
    }
    for s in std::iter::once(sigma).chain(std::iter::once(sd_b)).chain(sd_u.iter().copied()) {
        prior += cauchy(s, 5.0) + std::f64::consts::LN_2;
    }
    // LKJ(1) on a 3×3 Cholesky factor: (K - k - 1) log L_kk for k = 1, 2.
    prior += l[(1, 1)].ln();
    prior += log_sigma + log_sd_b[0] + log_sd_u.iter().sum::<f64>() + cpc_log_jacobian(&corr_raw);
    [long, event, effects, prior]
}
