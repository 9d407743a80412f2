//! Synthetic cohorts drawn from a known joint model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_dataset, Dataset, EventRecord, EventTable, HierarchyMode, LongitudinalRecord, LongitudinalTable,
    WindowPolicy,
};
use crate::design::DesignBlock;
use crate::error::{Error, Result};
use crate::formula::TimeFactor;
use crate::quadrature::QuadratureRule;
use crate::spec::{Functional, Level, Link, ModelSpec, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BaselineHazard {
    Constant { rate: f64 },
    /// `h(t) = (shape / scale) (t / scale)^(shape - 1)`.
    Weibull { shape: f64, scale: f64 },
}

impl BaselineHazard {
    pub fn hazard(&self, t: f64) -> f64 {
        match *self {
            BaselineHazard::Constant { rate } => rate,
            BaselineHazard::Weibull { shape, scale } => shape / scale * (t / scale).powf(shape - 1.0),
        }
    }

    pub fn cumulative(&self, t: f64) -> f64 {
        match *self {
            BaselineHazard::Constant { rate } => rate * t,
            BaselineHazard::Weibull { shape, scale } => (t / scale).powf(shape),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            BaselineHazard::Constant { rate } => rate > 0.0 && rate.is_finite(),
            BaselineHazard::Weibull { shape, scale } => shape > 0.0 && scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Design("baseline hazard parameters must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateGenerator {
    Bernoulli { name: String, p: f64 },
    Normal { name: String, mean: f64, sd: f64 },
    /// Levels `1..=probs.len()`, written as dummy columns `name2, name3, …`.
    Categorical { name: String, probs: Vec<f64> },
}

impl CovariateGenerator {
    fn columns(&self) -> Vec<String> {
        match self {
            Self::Bernoulli { name, .. } | Self::Normal { name, .. } => vec![name.clone()],
            Self::Categorical { name, probs } => (2..=probs.len()).map(|k| format!("{name}{k}")).collect(),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        match self {
            Self::Bernoulli { p, .. } => out.push(f64::from(u8::from(rng.random::<f64>() < *p))),
            Self::Normal { mean, sd, .. } => {
                let z: f64 = StandardNormal.sample(rng);
                out.push(mean + sd * z);
            }
            Self::Categorical { probs, .. } => {
                let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
                let mut acc = 0.0;
                let mut level = probs.len() - 1;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        level = k;
                        break;
                    }
                }
                out.extend((1..probs.len()).map(|k| f64::from(u8::from(k == level))));
            }
        }
    }
}

/// Covariance of one random-effect level in outcome units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomTruth {
    pub sd: Vec<f64>,
    /// Full correlation matrix; identity when absent.
    #[serde(default)]
    pub corr: Option<Vec<Vec<f64>>>,
}

impl RandomTruth {
    fn cholesky(&self) -> Result<Vec<f64>> {
        let d = self.sd.len();
        let mut cov = nalgebra::DMatrix::<f64>::identity(d, d);
        if let Some(c) = &self.corr {
            if c.len() != d || c.iter().any(|r| r.len() != d) {
                return Err(Error::Design("correlation matrix has the wrong shape".into()));
            }
            for r in 0..d {
                for k in 0..d {
                    cov[(r, k)] = c[r][k];
                }
            }
        }
        for r in 0..d {
            for k in 0..d {
                cov[(r, k)] *= self.sd[r] * self.sd[k];
            }
        }
        if d == 0 {
            return Ok(Vec::new());
        }
        let l = cov
            .cholesky()
            .ok_or_else(|| Error::Design("random-effect covariance is not positive definite".into()))?
            .l();
        Ok((0..d * d).map(|k| l[(k / d, k % d)]).collect())
    }

    fn draw(&self, chol: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = self.sd.len();
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        (0..d).map(|r| (0..=r).map(|k| chol[r * d + k] * z[k]).sum()).collect()
    }
}

/// True parameter values, all in data units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParameters {
    pub beta: Vec<f64>,
    pub sigma: f64,
    #[serde(default)]
    pub patient: Option<RandomTruth>,
    #[serde(default)]
    pub cluster: Option<RandomTruth>,
    #[serde(default)]
    pub group: Option<RandomTruth>,
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    pub baseline: BaselineHazard,
    #[serde(default)]
    pub frailty_sd: f64,
}

fn default_cluster_probs() -> Vec<f64> {
    vec![0.32, 0.23, 0.17, 0.28]
}

fn default_interval() -> f64 {
    1.5
}

fn default_groups() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub n_patients: usize,
    /// `P(J_i = k + 1)` for cluster-below-patient mode.
    #[serde(default = "default_cluster_probs")]
    pub cluster_probs: Vec<f64>,
    /// Number of groups in cluster-above-patient mode.
    #[serde(default = "default_groups")]
    pub n_groups: usize,
    #[serde(default = "default_interval")]
    pub visit_interval: f64,
    /// Half-width of uniform jitter added to every visit after baseline.
    #[serde(default)]
    pub visit_jitter: f64,
    /// Administrative censoring time.
    pub t_max: f64,
    #[serde(default)]
    pub covariates: Vec<CovariateGenerator>,
    /// Formulas and association structure of the generating model. Time
    /// terms must be raw powers.
    pub model: ModelSpec,
    pub truth: TrueParameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub id: String,
    pub group: Option<String>,
    pub covariates: Vec<f64>,
    pub b: Vec<f64>,
    pub clusters: Vec<(String, Vec<f64>)>,
    pub event_time: f64,
    pub status: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTruth {
    pub id: String,
    pub c: Vec<f64>,
    pub delta: f64,
}

/// Everything a recovery test needs to compare a fit against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub seed: u64,
    pub design: SimulationDesign,
    pub covariate_names: Vec<String>,
    pub groups: Vec<GroupTruth>,
    pub patients: Vec<PatientTruth>,
}

/// Solve `H(T) = target` for `T` by bisection on `[0, t_max]` to absolute
/// tolerance 1e-8. Returns `(t_max, false)` when `H(t_max) < target`.
pub fn invert_cumulative_hazard(cum: impl Fn(f64) -> f64, target: f64, t_max: f64) -> Result<(f64, bool)> {
    let h_max = cum(t_max);
    if !h_max.is_finite() || h_max < 0.0 {
        return Err(Error::Integrity(format!("cumulative hazard at t_max is {h_max}")));
    }
    if h_max < target {
        return Ok((t_max, false));
    }
    let (mut lo, mut hi) = (0.0, t_max);
    let (mut h_lo, mut h_hi) = (0.0, h_max);
    let slack = 1e-10 * h_max.max(1.0);
    while hi - lo > 1e-8 {
        let mid = 0.5 * (lo + hi);
        let h = cum(mid);
        if !h.is_finite() || h < h_lo - slack || h > h_hi + slack {
            return Err(Error::Integrity(format!(
                "cumulative hazard is not monotone near t = {mid} ({h_lo} ≤ {h} ≤ {h_hi} violated)"
            )));
        }
        if h < target {
            lo = mid;
            h_lo = h;
        } else {
            hi = mid;
            h_hi = h;
        }
    }
    Ok((0.5 * (lo + hi), true))
}

/// Draw `u ~ U(0, 1)` and invert `H(T) = −log u`.
pub fn simulate_event_time(cum: impl Fn(f64) -> f64, t_max: f64, rng: &mut impl Rng) -> Result<(f64, bool)> {
    let u: f64 = loop {
        let u = rng.random::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    invert_cumulative_hazard(cum, -u.ln(), t_max)
}

/// Kaplan–Meier estimate: `(time, survival)` at each distinct event time.
pub fn kaplan_meier(times: &[f64], status: &[bool]) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len() as f64;
    let mut surv = 1.0;
    let mut out = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut deaths = 0.0;
        let mut leaving = 0.0;
        while k < order.len() && times[order[k]] == t {
            if status[order[k]] {
                deaths += 1.0;
            }
            leaving += 1.0;
            k += 1;
        }
        if deaths > 0.0 {
            surv *= 1.0 - deaths / at_risk;
            out.push((t, surv));
        }
        at_risk -= leaving;
    }
    out
}

struct Generator<'a> {
    design: &'a SimulationDesign,
    fixed: DesignBlock,
    random: Vec<(Level, DesignBlock)>,
    event_cols: Vec<Vec<usize>>,
    rule: QuadratureRule,
    panels: QuadratureRule,
}

struct PatientState<'a> {
    covariates: &'a [f64],
    b: &'a [f64],
    clusters: &'a [Vec<f64>],
    c: &'a [f64],
    delta: f64,
}

impl Generator<'_> {
    fn block(&self, level: Level) -> Option<&DesignBlock> {
        self.random.iter().find(|(l, _)| *l == level).map(|(_, b)| b)
    }

    /// `(η, dη/dt)` of one cluster.
    fn eta(&self, st: &PatientState, j: usize, t: f64) -> (f64, f64) {
        let truth = &self.design.truth;
        let mut eta = 0.0;
        let mut d_eta = 0.0;
        let mut add = |blk: &DesignBlock, coef: &[f64]| {
            let mut v = vec![0.0; blk.width()];
            let mut d = vec![0.0; blk.width()];
            blk.fill(st.covariates, t, None, &mut v, Some(&mut d));
            for k in 0..v.len() {
                eta += v[k] * coef[k];
                d_eta += d[k] * coef[k];
            }
        };
        add(&self.fixed, &truth.beta);
        if let Some(blk) = self.block(Level::Patient) {
            add(blk, st.b);
        }
        if let Some(blk) = self.block(Level::Cluster) {
            add(blk, &st.clusters[j]);
        }
        if let Some(blk) = self.block(Level::Group) {
            add(blk, st.c);
        }
        (eta, d_eta)
    }

    fn mu(&self, st: &PatientState, j: usize, t: f64) -> (f64, f64) {
        let (eta, d) = self.eta(st, j, t);
        match self.design.model.link {
            Link::Identity => (eta, d),
            Link::Log => (eta.exp(), eta.exp() * d),
        }
    }

    fn log_hazard(&self, st: &PatientState, t: f64) -> f64 {
        let m = &self.design.model;
        let truth = &self.design.truth;
        let mut lh = truth.baseline.hazard(t).ln() + st.delta;
        for (k, idx) in self.event_cols.iter().enumerate() {
            lh += truth.gamma[k] * idx.iter().map(|&c| st.covariates[c]).product::<f64>();
        }
        for (q, a) in m.association.iter().enumerate() {
            let vals: Vec<f64> = (0..st.clusters.len().max(1))
                .map(|j| match a.functional {
                    Functional::Value => self.mu(st, j, t).0,
                    Functional::Slope => self.mu(st, j, t).1,
                    Functional::Auc => self.rule.integrate(0.0, t, |s| self.mu(st, j, s).0),
                })
                .collect();
            let f = match a.summary {
                None | Some(Summary::Sum) => vals.iter().sum(),
                Some(Summary::Average) => vals.iter().sum::<f64>() / vals.len() as f64,
                Some(Summary::Max) => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Some(Summary::Min) => vals.iter().copied().fold(f64::INFINITY, f64::min),
            };
            lh += truth.alpha[q] * f;
        }
        if m.shared_re_association {
            lh += truth.alpha[m.association.len()] * st.c[0];
        }
        lh
    }

    fn cum_hazard(&self, st: &PatientState, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        self.panels.integrate(0.0, t, |s| self.log_hazard(st, s).exp())
    }
}

fn check_raw_time(model: &ModelSpec) -> Result<crate::spec::ParsedSpec> {
    let parsed = model.parse()?;
    let f = &parsed.longitudinal;
    let ortho = f
        .fixed
        .iter()
        .chain(f.random.iter().flat_map(|r| &r.columns))
        .any(|c| matches!(c.time, TimeFactor::Ortho(_)));
    if ortho {
        return Err(Error::Design(
            "simulation needs raw time terms, e.g. poly(time, 2, raw = TRUE)".into(),
        ));
    }
    Ok(parsed)
}

/// Simulate a cohort. The same seed always yields the same dataset.
pub fn simulate_dataset(design: &SimulationDesign, seed: u64) -> Result<(Dataset, TruthRecord)> {
    if design.n_patients == 0 {
        return Err(Error::Design("n_patients must be at least 1".into()));
    }
    if !(design.t_max > 0.0 && design.t_max.is_finite()) {
        return Err(Error::Design("t_max must be positive".into()));
    }
    if !(design.visit_interval > 0.0) || design.visit_jitter < 0.0 || design.visit_jitter >= design.visit_interval {
        return Err(Error::Design("visit interval must be positive and exceed the jitter".into()));
    }
    let truth = &design.truth;
    truth.baseline.validate()?;
    if !(truth.sigma >= 0.0) || !(truth.frailty_sd >= 0.0) {
        return Err(Error::Design("sigma and frailty_sd must be nonnegative".into()));
    }
    let model = &design.model;
    let mode = model.mode;
    let parsed = check_raw_time(model)?;
    let covariate_names: Vec<String> = design.covariates.iter().flat_map(|g| g.columns()).collect();
    let fixed = DesignBlock::compile(&parsed.longitudinal.fixed, &covariate_names)
        .map_err(|e| Error::Design(e.to_string()))?;
    if fixed.width() != truth.beta.len() {
        return Err(Error::Design(format!(
            "beta has {} values but the fixed design has {} columns",
            truth.beta.len(),
            fixed.width()
        )));
    }
    let mut random = Vec::new();
    for &(level, k) in &parsed.levels {
        let blk = DesignBlock::compile(&parsed.longitudinal.random[k].columns, &covariate_names)
            .map_err(|e| Error::Design(e.to_string()))?;
        let rt = match level {
            Level::Patient => &truth.patient,
            Level::Cluster => &truth.cluster,
            Level::Group => &truth.group,
        };
        match rt {
            Some(r) if r.sd.len() == blk.width() => {}
            _ => {
                return Err(Error::Design(format!(
                    "truth for the {} random effects must give {} SDs",
                    level.as_str(),
                    blk.width()
                )))
            }
        }
        random.push((level, blk));
    }
    let event_cols = parsed
        .event
        .columns
        .iter()
        .map(|c| {
            c.covariates
                .iter()
                .map(|n| {
                    covariate_names
                        .iter()
                        .position(|m| m == n)
                        .ok_or_else(|| Error::Design(format!("event covariate `{n}` is not generated")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if truth.gamma.len() != event_cols.len() || truth.alpha.len() != model.n_alpha() {
        return Err(Error::Design("gamma/alpha lengths do not match the model".into()));
    }
    if mode == HierarchyMode::ClusterBelowPatient
        && (design.cluster_probs.is_empty() || design.cluster_probs.iter().any(|p| !(*p >= 0.0)))
    {
        return Err(Error::Design("cluster_probs must be nonnegative and nonempty".into()));
    }
    let above = mode == HierarchyMode::ClusterAbovePatient;
    if above && design.n_groups == 0 {
        return Err(Error::Design("n_groups must be at least 1".into()));
    }

    let chol = |r: &Option<RandomTruth>| r.as_ref().map(|r| r.cholesky()).transpose();
    let chol_b = chol(&truth.patient)?;
    let chol_u = chol(&truth.cluster)?;
    let chol_c = chol(&truth.group)?;

    let gen = Generator {
        design,
        fixed,
        random,
        event_cols,
        rule: QuadratureRule::gauss_kronrod15(),
        panels: QuadratureRule::gauss_kronrod15().composite(8),
    };

    let mut group_rng = ChaCha8Rng::seed_from_u64(seed);
    let n_groups = if above { design.n_groups } else { 0 };
    let groups: Vec<GroupTruth> = (0..n_groups)
        .map(|g| {
            let c = match (&truth.group, &chol_c) {
                (Some(r), Some(l)) => r.draw(l, &mut group_rng),
                _ => Vec::new(),
            };
            let z: f64 = StandardNormal.sample(&mut group_rng);
            GroupTruth {
                id: format!("g{}", g + 1),
                c,
                delta: if model.frailty { truth.frailty_sd * z } else { 0.0 },
            }
        })
        .collect();

    let width = (design.n_patients as f64).log10().floor() as usize + 1;
    let mut long = LongitudinalTable {
        covariate_names: covariate_names.clone(),
        records: Vec::new(),
    };
    let mut event = EventTable {
        covariate_names: covariate_names.clone(),
        records: Vec::new(),
    };
    let mut patients = Vec::with_capacity(design.n_patients);
    for i in 0..design.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let id = format!("p{:0width$}", i + 1);
        let mut covs = Vec::with_capacity(covariate_names.len());
        for g in &design.covariates {
            g.draw(&mut rng, &mut covs);
        }
        let n_clusters = match mode {
            HierarchyMode::ClusterBelowPatient => {
                let total: f64 = design.cluster_probs.iter().sum();
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut k = design.cluster_probs.len();
                for (m, p) in design.cluster_probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        k = m + 1;
                        break;
                    }
                }
                k
            }
            _ => 1,
        };
        let b = match (&truth.patient, &chol_b) {
            (Some(r), Some(l)) if gen.block(Level::Patient).is_some() => r.draw(l, &mut rng),
            _ => Vec::new(),
        };
        let clusters: Vec<Vec<f64>> = (0..n_clusters)
            .map(|_| match (&truth.cluster, &chol_u) {
                (Some(r), Some(l)) if gen.block(Level::Cluster).is_some() => r.draw(l, &mut rng),
                _ => Vec::new(),
            })
            .collect();
        let group = above.then(|| i % n_groups);
        let (c, delta) = match group {
            Some(g) => (groups[g].c.as_slice(), groups[g].delta),
            None => (&[][..], 0.0),
        };
        let st = PatientState {
            covariates: &covs,
            b: &b,
            clusters: &clusters,
            c,
            delta,
        };
        let (event_time, status) = simulate_event_time(|t| gen.cum_hazard(&st, t), design.t_max, &mut rng)?;
        let mut visits = vec![0.0];
        let mut k = 1;
        loop {
            let mut t = k as f64 * design.visit_interval;
            if design.visit_jitter > 0.0 {
                t += design.visit_jitter * (2.0 * rng.random::<f64>() - 1.0);
            }
            if t > event_time {
                break;
            }
            visits.push(t);
            k += 1;
        }
        let cluster_ids: Vec<String> = (0..n_clusters)
            .map(|j| match mode {
                HierarchyMode::ClusterBelowPatient => format!("{id}-{}", j + 1),
                _ => String::new(),
            })
            .collect();
        for (j, cid) in cluster_ids.iter().enumerate() {
            for &t in &visits {
                let noise: f64 = StandardNormal.sample(&mut rng);
                long.records.push(LongitudinalRecord {
                    patient_id: id.clone(),
                    cluster_id: (mode == HierarchyMode::ClusterBelowPatient).then(|| cid.clone()),
                    time: t,
                    value: gen.mu(&st, j, t).0 + truth.sigma * noise,
                    covariates: covs.clone(),
                });
            }
        }
        event.records.push(EventRecord {
            patient_id: id.clone(),
            event_time,
            status,
            covariates: covs.clone(),
            group_id: group.map(|g| groups[g].id.clone()),
        });
        patients.push(PatientTruth {
            id,
            group: group.map(|g| groups[g].id.clone()),
            covariates: covs,
            b,
            clusters: cluster_ids.into_iter().zip(clusters).collect(),
            event_time,
            status,
        });
    }
    let data = build_dataset(&long, &event, mode, WindowPolicy::Reject)?;
    Ok((
        data,
        TruthRecord {
            seed,
            design: design.clone(),
            covariate_names,
            groups,
            patients,
        },
    ))
}
