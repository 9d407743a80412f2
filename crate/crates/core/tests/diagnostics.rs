use multijm::diagnostics::{diagnostics, effective_sample_size, split_rhat, summarize_column, summarize_draws};
use multijm::inference::PosteriorDraws;
use multijm::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_chains(seed: u64, m: usize, n: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}

fn ar1(seed: u64, phi: f64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (1.0 - phi * phi).sqrt();
    let mut x: f64 = StandardNormal.sample(&mut rng);
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x = phi * x + scale * e;
            x
        })
        .collect()
}

#[test]
fn constant_chains_are_flagged_degenerate() {
    let chains = vec![vec![2.0; 100]; 4];
    assert_eq!(split_rhat(&chains).unwrap(), None);
    assert_eq!(effective_sample_size(&chains), None);
}

#[test]
fn independent_draws_mix_perfectly() {
    let chains = normal_chains(1, 4, 1000);
    let rhat = split_rhat(&chains).unwrap().unwrap();
    let ess = effective_sample_size(&chains).unwrap();
    assert!(rhat < 1.01, "R-hat {rhat}");
    assert!(ess > 3000.0, "ESS {ess}");
}

#[test]
fn ar1_ess_matches_its_analytic_value() {
    let phi = 0.9;
    let want = (1.0 - phi) / (1.0 + phi);
    let n = 20_000;
    for seed in 0..3 {
        let chains: Vec<Vec<f64>> = (0..4).map(|c| ar1(10 * seed + c, phi, n)).collect();
        let ratio = effective_sample_size(&chains).unwrap() / (4 * n) as f64;
        assert!(ratio > want / 2.0 && ratio < want * 2.0, "ESS/N {ratio} vs {want}");
    }
}

#[test]
fn shifted_chain_inflates_rhat() {
    let mut chains = normal_chains(2, 4, 500);
    chains[3].iter_mut().for_each(|x| *x += 3.0);
    assert!(split_rhat(&chains).unwrap().unwrap() > 1.1);
}

#[test]
fn single_chain_has_no_rhat() {
    let chains = normal_chains(3, 1, 200);
    assert!(matches!(split_rhat(&chains), Err(Error::RhatUnavailable(_))));
    assert!(effective_sample_size(&chains).is_some());
    assert!(matches!(split_rhat(&normal_chains(3, 2, 3)), Err(Error::RhatUnavailable(_))));

    let rows: Vec<Vec<f64>> = chains[0].iter().map(|&x| vec![x]).collect();
    let draws = PosteriorDraws::from_rows(vec!["beta[x]".into()], &rows).unwrap();
    let d = diagnostics(&draws, 10);
    assert_eq!(d.chains, 1);
    assert_eq!(d.parameters[0].rhat, None);
    assert!(d.parameters[0].ess.is_some());
    assert!(!d.warnings.is_empty());
}

#[test]
fn quantiles_follow_a_sort_based_oracle() {
    let values: Vec<f64> = (1..=100).rev().map(f64::from).collect();
    let row = summarize_column("beta[x]", &values);
    assert!((row.lower - 3.475).abs() < 1e-12);
    assert!((row.upper - 97.525).abs() < 1e-12);
    assert!((row.mean - 50.5).abs() < 1e-12);
    assert!(row.hazard_ratio.is_none());

    let mut s = values.clone();
    s.sort_by(|a, b| a.total_cmp(b));
    let oracle = |p: f64| {
        let h = 99.0 * p;
        s[h as usize] + h.fract() * (s[h as usize + 1] - s[h as usize])
    };
    assert_eq!(row.lower, oracle(0.025));
    assert_eq!(row.upper, oracle(0.975));
}

#[test]
fn constant_draws_and_hazard_ratios() {
    let row = summarize_column("sigma", &[3.0; 50]);
    assert_eq!((row.mean, row.lower, row.upper, row.sd), (3.0, 3.0, 3.0, 0.0));

    let rows = vec![vec![0.0, 1.0]; 10];
    let draws = PosteriorDraws::from_rows(vec!["alpha[value:max]".into(), "beta[time]".into()], &rows).unwrap();
    let table = summarize_draws(&draws);
    assert_eq!(table[0].hazard_ratio, Some((1.0, 1.0, 1.0)));
    assert_eq!(table[1].hazard_ratio, None);
}
