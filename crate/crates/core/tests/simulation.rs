mod common;

use multijm::dataset::{EventColumns, LongitudinalColumns};
use multijm::simulation::{
    invert_cumulative_hazard, kaplan_meier, simulate_dataset, simulate_event_time, BaselineHazard, SimulationDesign,
};
use multijm::Error;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{ks_pvalue, ks_statistic, lesion_design, null_design};

/// Cohort whose event times follow `baseline` exactly: no association and a
/// zero treatment effect.
fn closed_form_design(n: usize, baseline: BaselineHazard, t_max: f64) -> SimulationDesign {
    let mut d = null_design(n);
    d.truth.gamma = vec![0.0];
    d.truth.baseline = baseline;
    d.t_max = t_max;
    d
}

#[test]
fn inversion_of_closed_form_hazards() {
    let target = -(-1.0f64).exp().ln();
    let (t, observed) = invert_cumulative_hazard(|t| 2.0 * t, target, 10.0).unwrap();
    assert!(observed && (t - 0.5).abs() < 1e-8);
    let (t, observed) = invert_cumulative_hazard(|t| t.powi(3), target, 10.0).unwrap();
    assert!(observed && (t - 1.0).abs() < 1e-8);
    let (t, observed) = invert_cumulative_hazard(|t| 2.0 * t, 1e-15, 10.0).unwrap();
    assert!(observed && t > 0.0 && t < 1e-7);
    assert_eq!(invert_cumulative_hazard(|t| 0.01 * t, 1.0, 10.0).unwrap(), (10.0, false));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (t, observed) = simulate_event_time(|t| 2.0 * t, 50.0, &mut rng).unwrap();
        assert!(observed && t > 0.0);
    }
}

#[test]
fn noiseless_values_equal_the_trajectory() {
    let mut design = lesion_design(30, [0.01, 0.4]);
    design.truth.sigma = 0.0;
    let (data, truth) = simulate_dataset(&design, 7).unwrap();
    let beta = &design.truth.beta;
    for (pt, tr) in data.patients().iter().zip(&truth.patients) {
        assert_eq!(pt.id, tr.id);
        assert_eq!(pt.event_time, tr.event_time);
        for (cl, (cid, u)) in pt.clusters.iter().zip(&tr.clusters) {
            assert_eq!(&cl.id, cid);
            for o in &cl.observations {
                let t = o.time;
                let mu = (beta[0] + u[0] + tr.b[0]) + (beta[1] + u[1]) * t + (beta[2] + u[2]) * t * t;
                assert!((o.value - mu).abs() <= 1e-12 * mu.abs().max(1.0), "{} vs {mu}", o.value);
            }
        }
    }
}

#[test]
fn same_seed_gives_identical_csv_files() {
    let design = lesion_design(25, [0.01, 0.4]);
    let dir = tempfile::tempdir().unwrap();
    let (lc, ec) = (LongitudinalColumns::default(), EventColumns::default());
    let mut files = Vec::new();
    for (k, seed) in [3, 3, 4].into_iter().enumerate() {
        let (data, _) = simulate_dataset(&design, seed).unwrap();
        let long = dir.path().join(format!("long{k}.csv"));
        let event = dir.path().join(format!("event{k}.csv"));
        data.export_csv(&long, &event, &lc, &ec).unwrap();
        files.push((std::fs::read(long).unwrap(), std::fs::read(event).unwrap()));
    }
    assert_eq!(files[0], files[1]);
    assert_ne!(files[0], files[2]);
}

#[test]
fn simulated_datasets_satisfy_dataset_invariants() {
    for seed in 0..5 {
        let design = lesion_design(60, [0.01, 0.4]);
        let (data, truth) = simulate_dataset(&design, seed).unwrap();
        assert_eq!(data.n_patients(), 60);
        assert_eq!(truth.patients.len(), 60);
        for pt in data.patients() {
            assert!(pt.event_time > 0.0 && pt.event_time <= design.t_max);
            assert!(!pt.clusters.is_empty() && pt.clusters.len() <= 4);
            for cl in &pt.clusters {
                assert!(!cl.observations.is_empty());
                assert_eq!(cl.observations[0].time, 0.0);
                assert!(cl.observations.windows(2).all(|w| w[0].time < w[1].time));
                assert!(cl.observations.iter().all(|o| o.time <= pt.event_time));
            }
            if !pt.status {
                assert_eq!(pt.event_time, design.t_max);
            }
        }
    }
}

#[test]
fn invalid_designs_are_rejected() {
    let mut d = lesion_design(0, [0.0, 0.0]);
    assert!(matches!(simulate_dataset(&d, 1), Err(Error::Design(_))));
    d.n_patients = 5;
    d.truth.beta.pop();
    assert!(matches!(simulate_dataset(&d, 1), Err(Error::Design(_))));
    let mut d = lesion_design(5, [0.0, 0.0]);
    d.model.longitudinal = "value ~ poly(time, 2) + (poly(time, 2) | cluster) + (1 | id)".into();
    assert!(matches!(simulate_dataset(&d, 1), Err(Error::Design(_))));
    let mut d = lesion_design(5, [0.0, 0.0]);
    d.truth.baseline = BaselineHazard::Constant { rate: -1.0 };
    assert!(matches!(simulate_dataset(&d, 1), Err(Error::Design(_))));
}

#[test]
fn kaplan_meier_stays_in_the_dkw_band() {
    let rate = 0.1;
    let design = closed_form_design(2000, BaselineHazard::Constant { rate }, 15.0);
    let (data, _) = simulate_dataset(&design, 21).unwrap();
    let times: Vec<f64> = data.patients().iter().map(|p| p.event_time).collect();
    let status: Vec<bool> = data.patients().iter().map(|p| p.status).collect();
    // Censoring is administrative only, so before t_max the estimate is an
    // empirical CDF and the DKW band is a simultaneous 95% band.
    let eps = ((2.0f64 / 0.05).ln() / (2.0 * 2000.0)).sqrt();
    let mut prev = 1.0;
    for (t, s) in kaplan_meier(&times, &status) {
        let truth = (-rate * t).exp();
        // Check both sides of the jump.
        assert!((prev - truth).abs() < eps && (s - truth).abs() < eps, "t = {t}: {s} vs {truth}");
        prev = s;
    }
}

#[test]
fn event_times_pass_kolmogorov_smirnov_tests() {
    let cases = [
        BaselineHazard::Constant { rate: 0.1 },
        BaselineHazard::Weibull { shape: 1.5, scale: 8.0 },
    ];
    for baseline in cases {
        let mut passes = 0;
        for seed in 0..10 {
            let design = closed_form_design(400, baseline, 400.0);
            let (data, _) = simulate_dataset(&design, seed).unwrap();
            assert!(data.patients().iter().all(|p| p.status));
            let times: Vec<f64> = data.patients().iter().map(|p| p.event_time).collect();
            let d = ks_statistic(&times, |t| 1.0 - (-baseline.cumulative(t)).exp());
            if ks_pvalue(d, times.len()) > 0.01 {
                passes += 1;
            }
        }
        assert!(passes >= 9, "{baseline:?}: {passes} of 10");
    }
}

#[test]
fn random_effect_covariance_converges() {
    let design = null_design(5000);
    let (_, truth) = simulate_dataset(&design, 99).unwrap();
    let rt = design.truth.cluster.as_ref().unwrap();
    let d = rt.sd.len();
    let corr = rt.corr.as_ref().unwrap();
    let target = DMatrix::from_fn(d, d, |r, c| corr[r][c] * rt.sd[r] * rt.sd[c]);
    let effects: Vec<&Vec<f64>> = truth.patients.iter().flat_map(|p| p.clusters.iter().map(|(_, u)| u)).collect();
    let n = effects.len() as f64;
    let emp = DMatrix::from_fn(d, d, |r, c| effects.iter().map(|u| u[r] * u[c]).sum::<f64>() / n);
    let rel = (&emp - &target).norm() / target.norm();
    assert!(rel < 0.1, "cluster covariance error {rel}");

    let sd_b = design.truth.patient.as_ref().unwrap().sd[0];
    let var_b = truth.patients.iter().map(|p| p.b[0] * p.b[0]).sum::<f64>() / 5000.0;
    assert!((var_b - sd_b * sd_b).abs() / (sd_b * sd_b) < 0.1, "patient variance {var_b}");
}
