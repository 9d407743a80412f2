//! Convergence diagnostics and posterior summaries.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::inference::{fmt, PosteriorDraws};
use crate::model::JointModel;

/// Linearly interpolated sample quantile of sorted data (R type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Split every chain into halves, dropping the middle draw of odd chains.
fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..n].to_vec()])
        .collect()
}

/// Replace values by normal scores of their pooled ranks, averaging ties.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let flat: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = flat.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]));
    let mut rank = vec![0.0; s];
    let mut k = 0;
    while k < s {
        let mut e = k;
        while e + 1 < s && flat[order[e + 1]] == flat[order[k]] {
            e += 1;
        }
        let r = 0.5 * ((k + 1) + (e + 1)) as f64;
        for &o in &order[k..=e] {
            rank[o] = r;
        }
        k = e + 1;
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out = Vec::with_capacity(chains.len());
    let mut pos = 0;
    for c in chains {
        out.push(
            (0..c.len())
                .map(|j| normal.inverse_cdf((rank[pos + j] - 0.375) / (s as f64 + 0.25)))
                .collect(),
        );
        pos += c.len();
    }
    out
}

fn rhat_basic(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| variance(c)).collect::<Vec<_>>());
    let b = n * variance(&means);
    if !(w > 0.0) {
        return None;
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Some((var_plus / w).sqrt())
}

/// Rank-normalized split R-hat: the larger of the bulk and folded values.
/// `Ok(None)` flags constant draws, for which R-hat is undefined.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<Option<f64>> {
    if chains.len() < 2 {
        return Err(Error::RhatUnavailable(format!("{} chain(s); at least 2 are needed", chains.len())));
    }
    if chains.iter().any(|c| c.len() < 4) {
        return Err(Error::RhatUnavailable("at least 4 draws per chain are needed".into()));
    }
    let halves = split(chains);
    let bulk = rhat_basic(&rank_normalize(&halves));
    let all = sorted(&halves.concat());
    let median = quantile_sorted(&all, 0.5);
    let folded: Vec<Vec<f64>> = halves
        .iter()
        .map(|c| c.iter().map(|x| (x - median).abs()).collect())
        .collect();
    let tail = rhat_basic(&rank_normalize(&folded));
    Ok(match (bulk, tail) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    })
}

/// Biased autocovariance at every lag via zero-padded FFT.
fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - m, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    (0..n).map(|k| buf[k].re / (size as f64 * n as f64)).collect()
}

/// Multi-chain effective sample size of split chains with Geyer's initial
/// monotone sequence truncation. `None` flags constant draws.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Option<f64> {
    let chains = if chains.len() == 1 || chains.iter().all(|c| c.len() >= 4) {
        split(chains)
    } else {
        chains.to_vec()
    };
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min()?;
    if n < 4 {
        return None;
    }
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(&c[..n])).collect();
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let mean_var = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += variance(&means);
    }
    if !(var_plus > 0.0) || !(mean_var > 1e-300) {
        return None;
    }
    let lag = |t: usize| acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = 1.0 - (mean_var - lag(1)) / var_plus;
    rho[1] = odd;
    let mut t = 1;
    while t + 2 < n.saturating_sub(3) && even + odd > 0.0 {
        even = 1.0 - (mean_var - lag(t + 1)) / var_plus;
        odd = 1.0 - (mean_var - lag(t + 2)) / var_plus;
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 && max_t + 1 < n {
        rho[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = 0.5 * (rho[t - 1] + rho[t]);
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tail = if max_t + 1 < n { rho[max_t + 1] } else { 0.0 };
    let tau = (-1.0 + 2.0 * rho[..=max_t].iter().sum::<f64>() + tail).max(1.0 / total.log10());
    Some(total / tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// `None` when undefined (constant draws or a single chain).
    pub rhat: Option<f64>,
    /// `None` when degenerate.
    pub ess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub chains: usize,
    pub draws: usize,
    pub divergences: usize,
    pub divergence_rate: f64,
    pub max_depth_hits: usize,
    pub mean_step_size: Vec<f64>,
    pub warmup_seconds: Vec<f64>,
    pub sampling_seconds: Vec<f64>,
    pub warnings: Vec<String>,
    pub parameters: Vec<ParameterDiagnostics>,
}

impl Diagnostics {
    pub fn parameter(&self, name: &str) -> Option<&ParameterDiagnostics> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// R-hat and ESS for every stored column. R-hat is reported as undefined
/// with a single chain.
pub fn diagnostics(draws: &PosteriorDraws, max_depth: usize) -> Diagnostics {
    let chains = draws.n_chains();
    let mut warnings = Vec::new();
    let mut parameters = Vec::with_capacity(draws.n_params());
    for (k, name) in draws.names.iter().enumerate() {
        let per_chain = draws.chains_of(k);
        let all = per_chain.concat();
        let rhat = match split_rhat(&per_chain) {
            Ok(r) => r,
            Err(e) => {
                if warnings.is_empty() {
                    warnings.push(e.to_string());
                }
                None
            }
        };
        parameters.push(ParameterDiagnostics {
            name: name.clone(),
            mean: mean(&all),
            sd: if all.len() > 1 { variance(&all).sqrt() } else { 0.0 },
            rhat,
            ess: effective_sample_size(&per_chain),
        });
    }
    let divergences = draws.divergences();
    let rate = divergences as f64 / draws.n_draws().max(1) as f64;
    if rate > 0.2 {
        warnings.push(format!("{:.1}% of transitions diverged", 100.0 * rate));
    }
    let max_depth_hits = draws.tree_depth.iter().filter(|&&d| d >= max_depth).count();
    let mut mean_step_size = vec![0.0; chains];
    let mut counts = vec![0usize; chains];
    for (r, &s) in draws.step_size.iter().enumerate() {
        mean_step_size[draws.chain[r]] += s;
        counts[draws.chain[r]] += 1;
    }
    for (s, c) in mean_step_size.iter_mut().zip(&counts) {
        *s /= (*c).max(1) as f64;
    }
    Diagnostics {
        chains,
        draws: draws.n_draws(),
        divergences,
        divergence_rate: rate,
        max_depth_hits,
        mean_step_size,
        warmup_seconds: draws.warmup_seconds.clone(),
        sampling_seconds: draws.sampling_seconds.clone(),
        warnings,
        parameters,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    /// `(mean, lower, upper)` of `exp(draw)` for event-submodel coefficients.
    pub hazard_ratio: Option<(f64, f64, f64)>,
}

fn is_event_coefficient(name: &str) -> bool {
    name.starts_with("gamma[") || name.starts_with("alpha[")
}

/// Posterior mean, SD and central 95% interval of one column.
pub fn summarize_column(name: &str, values: &[f64]) -> SummaryRow {
    let s = sorted(values);
    let m = mean(values);
    let hazard_ratio = is_event_coefficient(name).then(|| {
        let e: Vec<f64> = values.iter().map(|v| v.exp()).collect();
        (mean(&e), quantile_sorted(&s, 0.025).exp(), quantile_sorted(&s, 0.975).exp())
    });
    SummaryRow {
        parameter: name.to_string(),
        mean: m,
        sd: if values.len() > 1 { variance(values).sqrt() } else { 0.0 },
        lower: quantile_sorted(&s, 0.025),
        upper: quantile_sorted(&s, 0.975),
        hazard_ratio,
    }
}

/// Summaries of the stored columns as they are.
pub fn summarize_draws(draws: &PosteriorDraws) -> Vec<SummaryRow> {
    (0..draws.n_params())
        .map(|k| summarize_column(&draws.names[k], &draws.column(k)))
        .collect()
}

/// Population parameters of every draw in data units, one row per draw.
pub fn original_draws(draws: &PosteriorDraws, model: &JointModel) -> Result<Vec<Vec<f64>>> {
    if draws.names != model.layout().constrained_names() {
        return Err(Error::Spec("draws do not match the model's parameter layout".into()));
    }
    (0..draws.n_draws())
        .map(|r| Ok(model.to_original(&model.layout().from_constrained(draws.row(r))?)))
        .collect()
}

/// Summary table of the population parameters in data units, with event
/// coefficients also reported as hazard ratios.
pub fn summarize_fit(draws: &PosteriorDraws, model: &JointModel) -> Result<Vec<SummaryRow>> {
    if draws.n_draws() == 0 {
        return Err(Error::EmptyInput("no draws to summarize".into()));
    }
    let rows = original_draws(draws, model)?;
    Ok(model
        .original_names()
        .iter()
        .enumerate()
        .map(|(k, name)| summarize_column(name, &rows.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect())
}

/// `parameter, estimate, sd, lower, upper, hr, hr_lower, hr_upper`.
pub fn write_summary_csv<W: std::io::Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["parameter", "estimate", "sd", "lower", "upper", "hr", "hr_lower", "hr_upper"])?;
    for r in rows {
        let (h, hl, hu) = r
            .hazard_ratio
            .map_or((String::new(), String::new(), String::new()), |(a, b, c)| (fmt(a), fmt(b), fmt(c)));
        w.write_record([
            r.parameter.clone(),
            fmt(r.mean),
            fmt(r.sd),
            fmt(r.lower),
            fmt(r.upper),
            h,
            hl,
            hu,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn type7_quantiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile_sorted(&v, 0.025) - 3.475).abs() < 1e-12);
        assert!((quantile_sorted(&v, 0.975) - 97.525).abs() < 1e-12);
    }

    #[test]
    fn constant_chains_are_flagged() {
        let c = vec![vec![3.0; 100]; 4];
        assert_eq!(split_rhat(&c).unwrap(), None);
        assert_eq!(effective_sample_size(&c), None);
        assert!(matches!(split_rhat(&c[..1]), Err(Error::RhatUnavailable(_))));
    }

    #[test]
    fn iid_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        assert!(split_rhat(&c).unwrap().unwrap() < 1.01);
        assert!(effective_sample_size(&c).unwrap() > 3000.0);
    }

    #[test]
    fn fft_autocovariance_matches_direct_sum() {
        let x = [1.0, 3.0, -2.0, 0.5, 4.0, 2.0, -1.0];
        let m = mean(&x);
        let a = autocovariance(&x);
        for (k, ak) in a.iter().enumerate() {
            let direct: f64 = (0..x.len() - k).map(|t| (x[t] - m) * (x[t + k] - m)).sum::<f64>() / x.len() as f64;
            assert!((ak - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_summary_and_hazard_ratio() {
        let r = summarize_column("beta[x]", &[3.0; 10]);
        assert_eq!((r.mean, r.lower, r.upper), (3.0, 3.0, 3.0));
        assert!(r.hazard_ratio.is_none());
        let r = summarize_column("gamma[x]", &[0.0; 10]);
        assert_eq!(r.hazard_ratio, Some((1.0, 1.0, 1.0)));
    }
}
