mod common;

use multijm::dataset::HierarchyMode;
use multijm::model::{summarize, JointModel};
use multijm::quadrature::QuadratureRule;
use multijm::simulation::simulate_dataset;
use multijm::spec::{Functional, Link, ModelSpec, Summary};
use multijm::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{lesion_design, params, random_point, rebuild, tiny_dataset};

fn lesion_model(n: usize, seed: u64, summary: Summary, standardize: bool) -> JointModel {
    let mut design = lesion_design(n, [0.01, 0.4]);
    design.cluster_probs = vec![0.0, 0.3, 0.3, 0.4];
    let (data, _) = simulate_dataset(&design, seed).unwrap();
    let spec = ModelSpec {
        standardize,
        ..design
            .model
            .clone()
            .with_association(&[(Functional::Value, Some(summary)), (Functional::Slope, Some(summary))])
    };
    JointModel::compile(data, spec).unwrap()
}

#[test]
fn eta_examples() {
    let model = lesion_model(5, 1, Summary::Max, false);
    let zero = params(&model, &[("sigma", 1.0), ("sd_patient", 1.0), ("sd_cluster", 1.0)]);
    for i in 0..5 {
        for j in 0..model.dataset().patients()[i].clusters.len() {
            assert_eq!(model.eta(i, j, 2.5, &zero).unwrap(), 0.0);
        }
    }
    assert!(matches!(model.eta(7, 0, 1.0, &zero), Err(Error::Index(_))));
    assert!(matches!(model.eta(0, 9, 1.0, &zero), Err(Error::Index(_))));
    assert!(matches!(model.eta(0, 0, -1.0, &zero), Err(Error::Domain(_))));

    let data = tiny_dataset(
        HierarchyMode::ClusterBelowPatient,
        &[("A", 5.0, false, vec![("1", vec![(0.0, 1.0)]), ("2", vec![(1.0, 2.0)])])],
    );
    let mut spec = ModelSpec::new(HierarchyMode::ClusterBelowPatient, "value ~ 1 + (1 | id) + (1 | cluster)", "");
    spec.standardize = false;
    let model = JointModel::compile(data, spec).unwrap();
    let p = params(
        &model,
        &[("beta", 2.0), ("b", 1.0), ("u", 0.5), ("sigma", 1.0), ("sd_patient", 1.0), ("sd_cluster", 1.0)],
    );
    assert_eq!(model.eta(0, 1, 3.0, &p).unwrap(), 3.5);
    assert_eq!(model.mu(0, 1, 3.0, &p).unwrap(), 3.5);
    assert_eq!(model.mu_slope(0, 1, 3.0, &p).unwrap(), 0.0);
    assert_eq!(Link::Log.inverse(0.0), 1.0);
}

#[test]
fn eta_matches_dense_design_product() {
    let model = lesion_model(12, 2, Summary::Max, false);
    let data = model.dataset();
    let names = model.layout().constrained_names();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = random_point(&mut rng, model.dim(), 1.0);
    let p = model.layout().constrain(&theta).unwrap();
    let values = p.constrained_flat();
    let col = |name: &str| names.iter().position(|n| n == name).unwrap();
    let beta_cols: Vec<usize> = names.iter().enumerate().filter(|(_, n)| n.starts_with("beta[")).map(|(k, _)| k).collect();
    let u_labels = &model.layout().block(multijm::spec::Level::Cluster).unwrap().labels;
    let b_label = &model.layout().block(multijm::spec::Level::Patient).unwrap().labels[0];

    let times = [0.0, 1.3, 4.0, 9.9];
    let mut rows = Vec::new();
    for (i, pt) in data.patients().iter().enumerate() {
        for (j, c) in pt.clusters.iter().enumerate() {
            for &t in &times {
                let mut row = vec![0.0; names.len()];
                let x = [1.0, t, t * t];
                for (k, &bc) in beta_cols.iter().enumerate() {
                    row[bc] = x[k];
                }
                row[col(&format!("b[{}:{b_label}]", pt.id))] = 1.0;
                for (k, lab) in u_labels.iter().enumerate() {
                    row[col(&format!("u[{}/{}:{lab}]", pt.id, c.id))] = x[k];
                }
                rows.push(((i, j, t), row));
            }
        }
    }
    let design = DMatrix::from_row_iterator(rows.len(), names.len(), rows.iter().flat_map(|(_, r)| r.iter().copied()));
    let oracle = design * DVector::from_vec(values);
    for (k, ((i, j, t), _)) in rows.iter().enumerate() {
        let got = model.eta(*i, *j, *t, &p).unwrap();
        assert!((got - oracle[k]).abs() <= 1e-12 * oracle[k].abs().max(1.0), "{got} vs {}", oracle[k]);
    }
}

#[test]
fn slope_matches_finite_differences_and_integrates_back() {
    let model = lesion_model(6, 3, Summary::Max, true);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let theta = random_point(&mut rng, model.dim(), 1.0);
    let p = model.layout().constrain(&theta).unwrap();
    let rule = QuadratureRule::default();
    let h = 1e-5;
    for i in 0..6 {
        for j in 0..model.dataset().patients()[i].clusters.len() {
            for t in [0.5, 3.0, 7.5, 11.0] {
                let d = model.mu_slope(i, j, t, &p).unwrap();
                let fd = (model.mu(i, j, t + h, &p).unwrap() - model.mu(i, j, t - h, &p).unwrap()) / (2.0 * h);
                assert!((d - fd).abs() <= 1e-6 * d.abs().max(1.0), "{d} vs {fd}");
                let integral = rule.integrate(0.0, t, |s| model.mu_slope(i, j, s, &p).unwrap());
                let change = model.mu(i, j, t, &p).unwrap() - model.mu(i, j, 0.0, &p).unwrap();
                assert!((integral - change).abs() <= 1e-8 * change.abs().max(1.0));
            }
        }
    }
}

#[test]
fn linear_slope_adds_fixed_and_random_parts() {
    let data = tiny_dataset(HierarchyMode::PatientOnly, &[("A", 5.0, false, vec![("", vec![(0.0, 1.0), (2.0, 4.0)])])]);
    let mut spec = ModelSpec::new(HierarchyMode::PatientOnly, "value ~ time + (time | id)", "");
    spec.standardize = false;
    let model = JointModel::compile(data, spec).unwrap();
    let p = params(&model, &[("beta[time]", 1.5), ("b[A:time]", 0.5), ("sigma", 1.0), ("sd_patient", 1.0)]);
    for t in [0.0, 1.0, 4.5] {
        assert_eq!(model.mu_slope(0, 0, t, &p).unwrap(), 2.0);
    }
}

#[test]
fn summary_examples() {
    let v = [3.0f64, 5.0, 2.0];
    assert_eq!(summarize(&v, Summary::Max).unwrap(), 5.0);
    assert_eq!(summarize(&v, Summary::Min).unwrap(), 2.0);
    assert_eq!(summarize(&v, Summary::Sum).unwrap(), 10.0);
    assert!((summarize(&v, Summary::Average).unwrap() - 10.0 / 3.0).abs() < 1e-15);
    for s in [Summary::Sum, Summary::Average, Summary::Max, Summary::Min] {
        assert_eq!(summarize(&[4.25], s).unwrap(), 4.25);
        assert!(matches!(summarize::<f64>(&[], s), Err(Error::Domain(_))));
    }
}

#[test]
fn association_term_examples() {
    let data = tiny_dataset(
        HierarchyMode::ClusterBelowPatient,
        &[("A", 5.0, false, vec![("1", vec![(0.0, 3.0)]), ("2", vec![(0.0, 5.0)])])],
    );
    let mut spec = ModelSpec::new(HierarchyMode::ClusterBelowPatient, "value ~ time + (time | cluster)", "")
        .with_association(&[(Functional::Value, Some(Summary::Max)), (Functional::Slope, Some(Summary::Max))]);
    spec.standardize = false;
    let model = JointModel::compile(data, spec).unwrap();
    // Cluster values (3, 5) and slopes (-1, 2) at t = 0.
    let p = params(
        &model,
        &[
            ("alpha[value:max]", 0.5),
            ("alpha[slope:max]", 1.0),
            ("u[A/1:(Intercept)]", 3.0),
            ("u[A/2:(Intercept)]", 5.0),
            ("u[A/1:time]", -1.0),
            ("u[A/2:time]", 2.0),
            ("sigma", 1.0),
            ("sd_cluster", 1.0),
        ],
    );
    assert!((model.association_term(0, 0.0, &p).unwrap() - 4.5).abs() < 1e-12);
    let zero = params(&model, &[("u", 3.0), ("sigma", 1.0), ("sd_cluster", 1.0)]);
    assert_eq!(model.association_term(0, 2.0, &zero).unwrap(), 0.0);

    let data = tiny_dataset(HierarchyMode::PatientOnly, &[("A", 5.0, false, vec![("", vec![(0.0, 2.0)])])]);
    let mut spec = ModelSpec::new(HierarchyMode::PatientOnly, "value ~ 1 + (1 | id)", "")
        .with_association(&[(Functional::Auc, None)]);
    spec.standardize = false;
    let model = JointModel::compile(data, spec).unwrap();
    let p = params(&model, &[("beta", 2.0), ("alpha", 1.0), ("sigma", 1.0), ("sd_patient", 1.0)]);
    assert!((model.association_term(0, 3.0, &p).unwrap() - 6.0).abs() < 1e-10);
}

#[test]
fn association_is_linear_in_alpha() {
    let model = lesion_model(6, 4, Summary::Average, true);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let theta = random_point(&mut rng, model.dim(), 1.0);
    let p = model.layout().constrain(&theta).unwrap();
    let mut doubled = p.clone();
    doubled.alpha.iter_mut().for_each(|a| *a *= 2.0);
    for i in 0..6 {
        let a = model.association_term(i, 4.0, &p).unwrap();
        let b = model.association_term(i, 4.0, &doubled).unwrap();
        assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

/// Clusters of every patient in reverse order, plus the same point carried
/// over by name.
fn reversed(model: &JointModel) -> JointModel {
    let n = model.dataset().n_patients();
    let order: Vec<usize> = (0..n).collect();
    JointModel::compile_with(
        rebuild(model.dataset(), &order, |_, j| (0..j).rev().collect()),
        model.spec().clone(),
        model.bases().clone(),
    )
    .unwrap()
}

#[test]
fn permuting_clusters_preserves_the_log_posterior() {
    for summary in [Summary::Sum, Summary::Average, Summary::Max, Summary::Min] {
        let model = lesion_model(10, 6, summary, true);
        let other = reversed(&model);
        assert_ne!(
            model.dataset().patients()[0].clusters[0].id,
            other.dataset().patients()[0].clusters[0].id
        );
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..10 {
            let theta = random_point(&mut rng, model.dim(), 1.0);
            let a = model.log_density(&theta).unwrap();
            let b = other.log_density(&common::remap(&theta, &model, &other)).unwrap();
            assert_eq!(a.total.to_bits(), b.total.to_bits(), "{summary:?}: {} vs {}", a.total, b.total);
            let pa = model.layout().constrain(&theta).unwrap();
            let pb = other.layout().constrain(&common::remap(&theta, &model, &other)).unwrap();
            for i in 0..model.dataset().n_patients() {
                let x = model.association_term(i, 2.0, &pa).unwrap();
                let y = other.association_term(i, 2.0, &pb).unwrap();
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

proptest! {
    #[test]
    fn summaries_are_ordered(values in prop::collection::vec(-1e3f64..1e3, 1..8)) {
        let (lo, avg, hi) = (
            summarize(&values, Summary::Min).unwrap(),
            summarize(&values, Summary::Average).unwrap(),
            summarize(&values, Summary::Max).unwrap(),
        );
        prop_assert!(lo <= avg && avg <= hi);
        let sum = summarize(&values, Summary::Sum).unwrap();
        prop_assert_eq!(avg, sum / values.len() as f64);
    }

    #[test]
    fn summaries_ignore_order(mut values in prop::collection::vec(-1e3f64..1e3, 1..8), seed in 0u64..100) {
        let before: Vec<f64> = [Summary::Sum, Summary::Average, Summary::Max, Summary::Min]
            .iter()
            .map(|&s| summarize(&values, s).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::seq::SliceRandom;
        values.shuffle(&mut rng);
        let after: Vec<f64> = [Summary::Sum, Summary::Average, Summary::Max, Summary::Min]
            .iter()
            .map(|&s| summarize(&values, s).unwrap())
            .collect();
        prop_assert_eq!(before, after);
    }
}
