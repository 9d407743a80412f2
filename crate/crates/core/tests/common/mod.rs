//! Shared fixtures for integration tests.
#![allow(dead_code)]

pub mod oracle;

use multijm::dataset::HierarchyMode;
use multijm::simulation::{BaselineHazard, CovariateGenerator, RandomTruth, SimulationDesign, TrueParameters};
use multijm::spec::{Functional, ModelSpec, Summary};

pub const QUADRATIC: &str =
    "value ~ poly(time, 2, raw = TRUE) + (poly(time, 2, raw = TRUE) | cluster) + (1 | id)";

pub fn max_value_slope() -> Vec<(Functional, Option<Summary>)> {
    vec![(Functional::Value, Some(Summary::Max)), (Functional::Slope, Some(Summary::Max))]
}

/// Lesion-style cohort: quadratic cluster trajectories, a patient intercept,
/// one binary treatment covariate and a max value+slope association.
pub fn lesion_design(n: usize, alpha: [f64; 2]) -> SimulationDesign {
    let spec = ModelSpec::new(HierarchyMode::ClusterBelowPatient, QUADRATIC, "~ trt").with_association(&max_value_slope());
    SimulationDesign {
        n_patients: n,
        cluster_probs: vec![0.32, 0.23, 0.17, 0.28],
        n_groups: 1,
        visit_interval: 1.5,
        visit_jitter: 0.0,
        t_max: 15.0,
        covariates: vec![CovariateGenerator::Bernoulli { name: "trt".into(), p: 0.5 }],
        model: spec,
        truth: TrueParameters {
            beta: vec![25.0, 1.0, -0.05],
            sigma: 2.0,
            patient: Some(RandomTruth { sd: vec![4.0], corr: None }),
            cluster: Some(RandomTruth {
                sd: vec![5.0, 0.5, 0.03],
                corr: Some(vec![vec![1.0, 0.3, 0.0], vec![0.3, 1.0, -0.3], vec![0.0, -0.3, 1.0]]),
            }),
            group: None,
            gamma: vec![-0.5],
            alpha: alpha.to_vec(),
            baseline: BaselineHazard::Constant { rate: 0.04 },
            frailty_sd: 0.0,
        },
    }
}

/// Same cohort with no association and a fit spec without one.
pub fn null_design(n: usize) -> SimulationDesign {
    let mut d = lesion_design(n, [0.0, 0.0]);
    d.model.association.clear();
    d.truth.alpha.clear();
    d.truth.baseline = BaselineHazard::Constant { rate: 0.1 };
    d
}

/// Clinic-clustered cohort for the shared-frailty configuration.
pub fn frailty_design(n: usize, n_groups: usize, frailty_sd: f64) -> SimulationDesign {
    let mut spec = ModelSpec::new(
        HierarchyMode::ClusterAbovePatient,
        "value ~ time + (time | id)",
        "~ trt",
    )
    .with_association(&[(Functional::Value, None)]);
    spec.frailty = true;
    SimulationDesign {
        n_patients: n,
        cluster_probs: vec![1.0],
        n_groups,
        visit_interval: 1.5,
        visit_jitter: 0.0,
        t_max: 15.0,
        covariates: vec![CovariateGenerator::Bernoulli { name: "trt".into(), p: 0.5 }],
        model: spec,
        truth: TrueParameters {
            beta: vec![10.0, 0.5],
            sigma: 1.0,
            patient: Some(RandomTruth {
                sd: vec![2.0, 0.2],
                corr: None,
            }),
            cluster: None,
            group: None,
            gamma: vec![-0.5],
            alpha: vec![0.1],
            baseline: BaselineHazard::Constant { rate: 0.03 },
            frailty_sd,
        },
    }
}

/// One hand-written patient: `(id, event time, status, clusters)` where each
/// cluster is `(cluster id, [(time, value)])`.
pub type PatientRows<'a> = (&'a str, f64, bool, Vec<(&'a str, Vec<(f64, f64)>)>);

/// Build a dataset without covariates from hand-written rows.
pub fn tiny_dataset(mode: HierarchyMode, patients: &[PatientRows]) -> multijm::dataset::Dataset {
    use multijm::dataset::*;
    let mut long = LongitudinalTable::default();
    let mut event = EventTable::default();
    for (id, t, d, clusters) in patients {
        for (cid, obs) in clusters {
            for &(time, value) in obs {
                long.records.push(LongitudinalRecord {
                    patient_id: id.to_string(),
                    cluster_id: (mode == HierarchyMode::ClusterBelowPatient).then(|| cid.to_string()),
                    time,
                    value,
                    covariates: Vec::new(),
                });
            }
        }
        event.records.push(EventRecord {
            patient_id: id.to_string(),
            event_time: *t,
            status: *d,
            covariates: Vec::new(),
            group_id: None,
        });
    }
    build_dataset(&long, &event, mode, WindowPolicy::Reject).unwrap()
}

/// Rebuild `data` from tables listing patients in `patient_order` and, for
/// patient `i`, clusters in the order `cluster_order(i, J_i)`.
pub fn rebuild(
    data: &multijm::dataset::Dataset,
    patient_order: &[usize],
    cluster_order: impl Fn(usize, usize) -> Vec<usize>,
) -> multijm::dataset::Dataset {
    use multijm::dataset::*;
    let mode = data.mode();
    let mut long = LongitudinalTable {
        covariate_names: data.long_covariates().to_vec(),
        records: Vec::new(),
    };
    let mut event = EventTable {
        covariate_names: data.event_covariates().to_vec(),
        records: Vec::new(),
    };
    for &i in patient_order {
        let pt = &data.patients()[i];
        for j in cluster_order(i, pt.clusters.len()) {
            let cl = &pt.clusters[j];
            for o in &cl.observations {
                long.records.push(LongitudinalRecord {
                    patient_id: pt.id.clone(),
                    cluster_id: (mode == HierarchyMode::ClusterBelowPatient).then(|| cl.id.clone()),
                    time: o.time,
                    value: o.value,
                    covariates: o.covariates.clone(),
                });
            }
        }
        event.records.push(EventRecord {
            patient_id: pt.id.clone(),
            event_time: pt.event_time,
            status: pt.status,
            covariates: pt.covariates.clone(),
            group_id: pt.group.map(|g| data.groups()[g].clone()),
        });
    }
    build_dataset(&long, &event, mode, WindowPolicy::Reject).unwrap()
}

/// Constrained parameter row with every coordinate set by exact name or by
/// the name's prefix before `[`; unset coordinates are 0.
pub fn point(model: &multijm::model::JointModel, set: &[(&str, f64)]) -> Vec<f64> {
    let values: std::collections::HashMap<&str, f64> = set.iter().copied().collect();
    model
        .layout()
        .constrained_names()
        .iter()
        .map(|n| {
            let key = n.split('[').next().unwrap();
            *values.get(n.as_str()).or_else(|| values.get(key)).unwrap_or(&0.0)
        })
        .collect()
}

pub fn params(model: &multijm::model::JointModel, set: &[(&str, f64)]) -> multijm::Parameters {
    model.layout().from_constrained(&point(model, set)).unwrap()
}

/// Carry an unconstrained point of `from` over to `to` by coordinate name.
pub fn remap(theta: &[f64], from: &multijm::model::JointModel, to: &multijm::model::JointModel) -> Vec<f64> {
    let names = from.layout().unconstrained_names();
    let lookup: std::collections::HashMap<&str, f64> = names.iter().map(String::as_str).zip(theta.iter().copied()).collect();
    to.layout()
        .unconstrained_names()
        .iter()
        .map(|n| lookup[n.as_str()])
        .collect()
}

/// Uniform draw in `[-scale, scale]^dim`.
pub fn random_point(rng: &mut impl rand::Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..=scale)).collect()
}

/// Textbook Cox–de Boor recursion on the full knot vector, with the right
/// endpoint assigned to the last function.
pub fn de_boor(knots: &[f64], degree: usize, i: usize, t: f64) -> f64 {
    let upper = *knots.last().unwrap();
    if degree == 0 {
        let (a, b) = (knots[i], knots[i + 1]);
        if t == upper {
            return f64::from(b == upper && a < b);
        }
        return f64::from(a <= t && t < b);
    }
    let mut out = 0.0;
    let d1 = knots[i + degree] - knots[i];
    if d1 > 0.0 {
        out += (t - knots[i]) / d1 * de_boor(knots, degree - 1, i, t);
    }
    let d2 = knots[i + degree + 1] - knots[i + 1];
    if d2 > 0.0 {
        out += (knots[i + degree + 1] - t) / d2 * de_boor(knots, degree - 1, i + 1, t);
    }
    out
}

/// One-sample Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = cdf(x);
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov p-value `P(K > sqrt(n) d)` with the small-sample
/// correction of Stephens.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let x = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * x * x).exp();
    }
    p.clamp(0.0, 1.0)
}
