//! The compiled joint model: design rows, bases and standardization bound to
//! a dataset, plus evaluation of the longitudinal trajectory and the
//! association terms that feed the hazard.

use serde::{Deserialize, Serialize};

use crate::basis::{BSplineBasis, OrthoPolyBasis};
use crate::dataset::{Cluster, Dataset, HierarchyMode};
use crate::design::{mean_sd, ortho_at, ColumnScaling, DesignBlock, Standardization};
use crate::error::{Error, Result};
use crate::params::{ParameterLayout, ParameterVector};
use crate::quadrature::QuadratureRule;
use crate::scalar::Real;
use crate::spec::{Functional, Level, Link, ModelSpec, ParsedSpec, Summary};

mod fused;

/// Everything fitted from the training data that prediction must reuse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBases {
    pub time_basis: Option<OrthoPolyBasis>,
    pub baseline: BSplineBasis,
    pub standardization: Standardization,
    pub groups: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum AssocKind {
    Trajectory(Functional, Option<Summary>),
    SharedIntercept,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Assoc {
    pub kind: AssocKind,
    pub center: f64,
    pub scale: f64,
}

/// One patient's random effects, borrowed from a parameter point.
#[derive(Debug, Clone, Copy)]
pub struct PatientEffects<'a, T> {
    pub b: &'a [T],
    /// Cluster effects of this patient, cluster-major.
    pub u: &'a [T],
    pub c: &'a [T],
    pub delta: Option<T>,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Needs {
    value: bool,
    slope: bool,
    auc: bool,
}

/// Design rows at one hazard evaluation time.
#[derive(Debug, Clone)]
pub(crate) struct Slot {
    pub time: f64,
    pub spline: Vec<f64>,
    /// `clusters × width` rows at `time`.
    value: Vec<f64>,
    /// Time derivatives of `value`.
    slope: Vec<f64>,
    /// `clusters × auc_weights.len() × width` rows on `[0, time]`.
    auc: Vec<f64>,
    auc_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct HazardCache {
    pub weights: Vec<f64>,
    pub slots: Vec<Slot>,
    pub event: Option<Slot>,
}

/// Precomputed rows for one patient's likelihood contribution.
#[derive(Debug, Clone)]
pub(crate) struct PatientCache {
    pub patient: usize,
    pub clusters: usize,
    pub obs_cluster: Vec<usize>,
    pub obs_y: Vec<f64>,
    pub obs_rows: Vec<f64>,
    pub hazard: Option<HazardCache>,
}

/// A joint model bound to its data.
#[derive(Debug, Clone)]
pub struct JointModel {
    spec: ModelSpec,
    parsed: ParsedSpec,
    data: Dataset,
    bases: ModelBases,
    fixed: DesignBlock,
    random: Vec<(Level, DesignBlock)>,
    /// Row offsets of the fixed, patient, cluster and group blocks.
    offsets: [usize; 5],
    event_rows: Vec<Vec<f64>>,
    patient_group: Vec<Option<usize>>,
    layout: ParameterLayout,
    rule: QuadratureRule,
    pub(crate) assoc: Vec<Assoc>,
    needs: Needs,
    time_varying: bool,
    pub(crate) caches: Vec<PatientCache>,
}

fn covariates_at(cluster: &Cluster, t: f64) -> &[f64] {
    let obs = &cluster.observations;
    let k = obs.partition_point(|o| o.time <= t);
    &obs[k.saturating_sub(1)].covariates
}

fn level_slot(level: Level) -> usize {
    match level {
        Level::Patient => 1,
        Level::Cluster => 2,
        Level::Group => 3,
    }
}

impl JointModel {
    /// Fit bases and standardization from `data` and bind the model.
    pub fn compile(data: Dataset, spec: ModelSpec) -> Result<Self> {
        Self::build(data, spec, None, QuadratureRule::gauss_kronrod15())
    }

    /// Bind the model reusing bases and standardization from an earlier fit.
    pub fn compile_with(data: Dataset, spec: ModelSpec, bases: ModelBases) -> Result<Self> {
        Self::build(data, spec, Some(bases), QuadratureRule::gauss_kronrod15())
    }

    /// Same model evaluated with a different cumulative-hazard rule.
    pub fn with_rule(&self, rule: QuadratureRule) -> Result<Self> {
        Self::build(self.data.clone(), self.spec.clone(), Some(self.bases.clone()), rule)
    }

    fn build(data: Dataset, spec: ModelSpec, frozen: Option<ModelBases>, rule: QuadratureRule) -> Result<Self> {
        let parsed = spec.parse()?;
        if data.mode() != spec.mode {
            return Err(Error::Spec(format!(
                "dataset was built in `{}` mode but the model asks for `{}`",
                data.mode().as_str(),
                spec.mode.as_str()
            )));
        }
        let long_names = data.long_covariates().to_vec();
        let mut fixed = DesignBlock::compile(&parsed.longitudinal.fixed, &long_names)?;
        let mut random = Vec::new();
        for &(level, k) in &parsed.levels {
            random.push((level, DesignBlock::compile(&parsed.longitudinal.random[k].columns, &long_names)?));
        }
        let event_cols = &parsed.event.columns;
        let event_idx: Vec<Vec<usize>> = event_cols
            .iter()
            .map(|c| {
                c.covariates
                    .iter()
                    .map(|n| {
                        data.event_covariates()
                            .iter()
                            .position(|m| m == n)
                            .ok_or_else(|| Error::Formula(format!("event covariate `{n}` is not a data column")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let raw_event: Vec<Vec<f64>> = data
            .patients()
            .iter()
            .map(|p| {
                event_idx
                    .iter()
                    .map(|idx| idx.iter().map(|&k| p.covariates[k]).product())
                    .collect()
            })
            .collect();

        let bases = match frozen {
            Some(b) => {
                if let Some(tb) = &b.time_basis {
                    if (tb.degree() as u32) < parsed.longitudinal.ortho_degree() {
                        return Err(Error::Spec("stored polynomial basis has too low a degree".into()));
                    }
                }
                b
            }
            None => {
                let degree = parsed.longitudinal.ortho_degree() as usize;
                let time_basis = if degree > 0 {
                    let mut times = data.pooled_times();
                    times.sort_by(|a, b| a.total_cmp(b));
                    Some(OrthoPolyBasis::fit(&times, degree)?)
                } else {
                    None
                };
                let times: Vec<f64> = data.patients().iter().map(|p| p.event_time).collect();
                let observed: Vec<bool> = data.patients().iter().map(|p| p.status).collect();
                let baseline = BSplineBasis::from_event_times(
                    &times,
                    &observed,
                    spec.baseline.df,
                    spec.baseline.degree,
                    data.max_event_time(),
                )?;
                let standardization =
                    standardize(&data, &spec, &parsed, time_basis.as_ref(), &fixed, &random, &raw_event);
                ModelBases {
                    time_basis,
                    baseline,
                    standardization,
                    groups: data.groups().to_vec(),
                }
            }
        };
        let st = &bases.standardization;
        if st.fixed.center.len() != fixed.width() || st.event.center.len() != event_cols.len() {
            return Err(Error::Spec("stored standardization does not match the formulas".into()));
        }
        fixed.set_scaling(&st.fixed);
        for (level, blk) in random.iter_mut() {
            let s = st
                .random(*level)
                .ok_or_else(|| Error::Spec("stored standardization lacks a random-effect level".into()))?;
            if s.center.len() != blk.width() {
                return Err(Error::Spec("stored standardization does not match the formulas".into()));
            }
            blk.set_scaling(s);
        }
        let event_rows = raw_event
            .iter()
            .map(|v| {
                v.iter()
                    .enumerate()
                    .map(|(k, x)| (x - st.event.center[k]) / st.event.scale[k])
                    .collect()
            })
            .collect();

        let mut offsets = [0usize; 5];
        let mut widths = [fixed.width(), 0, 0, 0];
        for (level, blk) in &random {
            widths[level_slot(*level)] = blk.width();
        }
        for k in 0..4 {
            offsets[k + 1] = offsets[k] + widths[k];
        }

        let patient_group = data
            .patients()
            .iter()
            .map(|p| {
                p.group
                    .map(|g| {
                        let id = &data.groups()[g];
                        bases
                            .groups
                            .iter()
                            .position(|x| x == id)
                            .ok_or_else(|| Error::Index(format!("group `{id}` was not seen when the model was fitted")))
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;

        let mut assoc: Vec<Assoc> = spec
            .association
            .iter()
            .zip(&st.association)
            .map(|(a, &(center, scale))| Assoc {
                kind: AssocKind::Trajectory(a.functional, a.summary),
                center,
                scale,
            })
            .collect();
        if spec.shared_re_association {
            let &(center, scale) = st
                .association
                .last()
                .ok_or_else(|| Error::Spec("stored standardization lacks association constants".into()))?;
            assoc.push(Assoc {
                kind: AssocKind::SharedIntercept,
                center,
                scale,
            });
        }
        if assoc.len() != st.association.len() {
            return Err(Error::Spec("stored standardization does not match the association".into()));
        }
        let mut needs = Needs::default();
        for a in &assoc {
            if let AssocKind::Trajectory(f, _) = a.kind {
                match f {
                    Functional::Value => needs.value = true,
                    Functional::Slope => {
                        needs.slope = true;
                        if spec.link != Link::Identity {
                            needs.value = true;
                        }
                    }
                    Functional::Auc => needs.auc = true,
                }
            }
        }

        let used: Vec<usize> = fixed
            .covariate_indices()
            .chain(random.iter().flat_map(|(_, b)| b.covariate_indices()))
            .collect();
        let time_varying = data.patients().iter().flat_map(|p| &p.clusters).any(|c| {
            let first = &c.observations[0].covariates;
            c.observations
                .iter()
                .any(|o| used.iter().any(|&k| o.covariates[k] != first[k]))
        });
        if needs.slope && time_varying {
            return Err(Error::Unsupported(
                "slope association with a time-varying covariate in the longitudinal design".into(),
            ));
        }

        let layout = build_layout(&data, &spec, &parsed, &bases, &random, event_cols);
        let mut model = JointModel {
            spec,
            parsed,
            data,
            bases,
            fixed,
            random,
            offsets,
            event_rows,
            patient_group,
            layout,
            rule,
            assoc,
            needs,
            time_varying,
            caches: Vec::new(),
        };
        let caches = (0..model.data.n_patients())
            .map(|i| {
                let p = &model.data.patients()[i];
                model.build_cache(i, f64::INFINITY, Some((0.0, p.event_time, p.status)), &model.rule)
            })
            .collect::<Result<Vec<_>>>()?;
        model.caches = caches;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn parsed(&self) -> &ParsedSpec {
        &self.parsed
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn bases(&self) -> &ModelBases {
        &self.bases
    }

    pub fn standardization(&self) -> &Standardization {
        &self.bases.standardization
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    /// Number of unconstrained parameters.
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn t_max(&self) -> f64 {
        self.bases.baseline.upper()
    }

    /// Index into the fitted group list for patient `i`.
    pub fn group_of(&self, i: usize) -> Option<usize> {
        self.patient_group.get(i).copied().flatten()
    }

    pub(crate) fn width(&self) -> usize {
        self.offsets[4]
    }

    /// Random effects of patient `i` within a full parameter point.
    pub fn patient_effects<'a, T: Real>(&self, p: &'a ParameterVector<T>, i: usize) -> PatientEffects<'a, T> {
        let b = p.block(Level::Patient).map_or(&[][..], |blk| blk.unit(i));
        let u = p.block(Level::Cluster).map_or(&[][..], |blk| {
            let dw = blk.dim();
            let off = self.data.cluster_index(i, 0);
            let j = self.data.patients()[i].clusters.len();
            &blk.effects[off * dw..(off + j) * dw]
        });
        let g = self.group_of(i);
        let c = match (p.block(Level::Group), g) {
            (Some(blk), Some(g)) => blk.unit(g),
            _ => &[][..],
        };
        let delta = match (&p.frailty, g) {
            (Some(f), Some(g)) => Some(f.delta[g]),
            _ => None,
        };
        PatientEffects { b, u, c, delta }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t.is_finite() && t >= 0.0 && t <= self.t_max()) {
            return Err(Error::Domain(format!(
                "time {t} is outside the model domain [0, {}]",
                self.t_max()
            )));
        }
        Ok(())
    }

    fn check_index(&self, i: usize, j: usize) -> Result<()> {
        self.data.cluster(i, j).map(|_| ())
    }

    /// Standardized design row for cluster `(i, j)` at time `t`.
    pub(crate) fn fill_row(&self, t: f64, covs: &[f64], val: &mut [f64], mut der: Option<&mut [f64]>) {
        let ortho = ortho_at(self.bases.time_basis.as_ref(), t);
        let o = self.offsets;
        self.fixed.fill(covs, t, ortho.as_ref(), &mut val[o[0]..o[1]], der.as_deref_mut().map(|d| &mut d[o[0]..o[1]]));
        for (level, blk) in &self.random {
            let s = level_slot(*level);
            let (a, b) = (o[s], o[s + 1]);
            blk.fill(covs, t, ortho.as_ref(), &mut val[a..b], der.as_deref_mut().map(|d| &mut d[a..b]));
        }
    }

    fn cluster_rows(&self, i: usize, t: f64, value: &mut Vec<f64>, slope: Option<&mut Vec<f64>>) {
        let w = self.width();
        let clusters = &self.data.patients()[i].clusters;
        let start = value.len();
        value.resize(start + clusters.len() * w, 0.0);
        let mut slope = slope;
        let sstart = slope.as_ref().map_or(0, |s| s.len());
        if let Some(s) = slope.as_deref_mut() {
            s.resize(sstart + clusters.len() * w, 0.0);
        }
        for (j, c) in clusters.iter().enumerate() {
            let covs = covariates_at(c, t);
            let val = &mut value[start + j * w..start + (j + 1) * w];
            let der = slope.as_deref_mut().map(|s| &mut s[sstart + j * w..sstart + (j + 1) * w]);
            self.fill_row(t, covs, val, der);
        }
    }

    fn build_slot(&self, i: usize, t: f64, needs: Needs) -> Result<Slot> {
        let spline = self.bases.baseline.eval::<f64>(t)?;
        let mut value = Vec::new();
        let mut slope = Vec::new();
        if needs.value || needs.slope {
            self.cluster_rows(i, t, &mut value, needs.slope.then_some(&mut slope));
        }
        let mut auc = Vec::new();
        let mut auc_weights = Vec::new();
        if needs.auc {
            let (nodes, weights) = self.rule.mapped(0.0, t);
            let w = self.width();
            let clusters = self.data.patients()[i].clusters.len();
            let mut rows = Vec::with_capacity(nodes.len() * clusters * w);
            for &s in &nodes {
                self.cluster_rows(i, s, &mut rows, None);
            }
            // rows are node-major; reorder to cluster-major
            let reorder = |rows: &[f64], m_count: usize| {
                let mut out = vec![0.0; rows.len()];
                for m in 0..m_count {
                    for j in 0..clusters {
                        let src = (m * clusters + j) * w;
                        let dst = (j * m_count + m) * w;
                        out[dst..dst + w].copy_from_slice(&rows[src..src + w]);
                    }
                }
                out
            };
            if self.spec.link == Link::Identity {
                // the integral of a linear predictor is the predictor of the integrated row
                let mut integrated = vec![0.0; clusters * w];
                for (m, wm) in weights.iter().enumerate() {
                    for j in 0..clusters {
                        let src = (m * clusters + j) * w;
                        for k in 0..w {
                            integrated[j * w + k] += wm * rows[src + k];
                        }
                    }
                }
                auc = integrated;
                auc_weights = vec![1.0];
            } else {
                auc = reorder(&rows, nodes.len());
                auc_weights = weights;
            }
        }
        Ok(Slot {
            time: t,
            spline,
            value,
            slope,
            auc,
            auc_weights,
        })
    }

    /// Rows for patient `i`: observations up to `obs_upto` and, when
    /// `hazard = Some((a, b, event))`, the hazard on `[a, b]` with an event
    /// contribution at `b`.
    pub(crate) fn build_cache(
        &self,
        i: usize,
        obs_upto: f64,
        hazard: Option<(f64, f64, bool)>,
        rule: &QuadratureRule,
    ) -> Result<PatientCache> {
        let patient = self.data.patient(i)?;
        let st = &self.bases.standardization;
        let w = self.width();
        let mut obs_cluster = Vec::new();
        let mut obs_y = Vec::new();
        let mut obs_rows = Vec::new();
        for (j, c) in patient.clusters.iter().enumerate() {
            for o in c.observations.iter().filter(|o| o.time <= obs_upto) {
                obs_cluster.push(j);
                obs_y.push((o.value - st.outcome_center) / st.outcome_scale);
                let start = obs_rows.len();
                obs_rows.resize(start + w, 0.0);
                self.fill_row(o.time, &o.covariates, &mut obs_rows[start..], None);
            }
        }
        let hazard = match hazard {
            None => None,
            Some((a, b, event)) => {
                if !(a >= 0.0 && b >= a) {
                    return Err(Error::Domain(format!("invalid hazard interval [{a}, {b}]")));
                }
                self.check_time(b)?;
                let (nodes, weights) = if b > a { rule.mapped(a, b) } else { (Vec::new(), Vec::new()) };
                let slots = nodes
                    .iter()
                    .map(|&t| self.build_slot(i, t, self.needs))
                    .collect::<Result<Vec<_>>>()?;
                let event = if event { Some(self.build_slot(i, b, self.needs)?) } else { None };
                Some(HazardCache { weights, slots, event })
            }
        };
        Ok(PatientCache {
            patient: i,
            clusters: patient.clusters.len(),
            obs_cluster,
            obs_y,
            obs_rows,
            hazard,
        })
    }

    fn eta_row<T: Real>(&self, row: &[f64], p: &ParameterVector<T>, eff: &PatientEffects<T>, j: usize) -> T {
        let o = self.offsets;
        let dw = o[3] - o[2];
        T::dot_blocks(&[
            (&row[o[0]..o[1]], &p.beta),
            (&row[o[1]..o[2]], eff.b),
            (&row[o[2]..o[3]], &eff.u[j * dw..(j + 1) * dw]),
            (&row[o[3]..o[4]], eff.c),
        ])
    }

    /// Per-cluster functional values in outcome units.
    fn functional_values<T: Real>(
        &self,
        slot: &Slot,
        f: Functional,
        clusters: usize,
        p: &ParameterVector<T>,
        eff: &PatientEffects<T>,
    ) -> Vec<T> {
        let st = &self.bases.standardization;
        let w = self.width();
        let link = self.spec.link;
        (0..clusters)
            .map(|j| match f {
                Functional::Value => {
                    let eta = self.eta_row(&slot.value[j * w..(j + 1) * w], p, eff, j);
                    link.inverse(eta).scale(st.outcome_scale).offset(st.outcome_center)
                }
                Functional::Slope => {
                    let d = self.eta_row(&slot.slope[j * w..(j + 1) * w], p, eff, j);
                    let d = match link {
                        Link::Identity => d,
                        Link::Log => self.eta_row(&slot.value[j * w..(j + 1) * w], p, eff, j).exp() * d,
                    };
                    d.scale(st.outcome_scale)
                }
                Functional::Auc => {
                    let m_count = slot.auc_weights.len();
                    let integral = if link == Link::Identity {
                        self.eta_row(&slot.auc[j * w..(j + 1) * w], p, eff, j)
                    } else {
                        let vals: Vec<T> = (0..m_count)
                            .map(|m| {
                                let r = (j * m_count + m) * w;
                                link.inverse(self.eta_row(&slot.auc[r..r + w], p, eff, j))
                            })
                            .collect();
                        T::dot(&slot.auc_weights, &vals)
                    };
                    integral.scale(st.outcome_scale).offset(st.outcome_center * slot.time)
                }
            })
            .collect()
    }

    /// `Σ_q α_q f_q` at a slot, on the internal scale.
    fn association_at<T: Real>(
        &self,
        slot: &Slot,
        clusters: usize,
        p: &ParameterVector<T>,
        eff: &PatientEffects<T>,
        trace: &mut Option<&mut Vec<u32>>,
    ) -> Vec<T> {
        self.assoc
            .iter()
            .enumerate()
            .map(|(q, a)| {
                let raw = match a.kind {
                    AssocKind::Trajectory(f, summary) => {
                        let mut vals = self.functional_values(slot, f, clusters, p, eff);
                        summarize_traced(&mut vals, summary, trace)
                    }
                    AssocKind::SharedIntercept => eff.c[0].scale(self.bases.standardization.outcome_scale),
                };
                p.alpha[q] * raw.offset(-a.center).scale(1.0 / a.scale)
            })
            .collect()
    }

    pub(crate) fn slot_log_hazard<T: Real>(
        &self,
        slot: &Slot,
        clusters: usize,
        base: T,
        p: &ParameterVector<T>,
        eff: &PatientEffects<T>,
        trace: &mut Option<&mut Vec<u32>>,
    ) -> T {
        let mut terms = self.association_at(slot, clusters, p, eff, trace);
        terms.push(T::dot(&slot.spline, &p.lambda));
        terms.push(base);
        T::sum(&terms)
    }

    /// `v_i'γ + δ_l`, the part of the log hazard that does not vary in time.
    pub(crate) fn hazard_offset<T: Real>(&self, i: usize, p: &ParameterVector<T>, eff: &PatientEffects<T>) -> T {
        let lin = T::dot(&self.event_rows[i], &p.gamma);
        match eff.delta {
            Some(d) => lin + d,
            None => lin,
        }
    }

    /// `(longitudinal log likelihood, event log likelihood)` of one cached
    /// patient.
    pub(crate) fn patient_terms<T: Real>(
        &self,
        cache: &PatientCache,
        p: &ParameterVector<T>,
        eff: &PatientEffects<T>,
        trace: Option<&mut Vec<u32>>,
    ) -> (T, T) {
        (self.patient_long(cache, p, eff), self.patient_event(cache, p, eff, trace))
    }

    /// Reference evaluation of [`JointModel::patient_terms`] built from
    /// elementary operations only.
    pub(crate) fn patient_terms_elementary<T: Real>(
        &self,
        cache: &PatientCache,
        p: &ParameterVector<T>,
        eff: &PatientEffects<T>,
    ) -> (T, T) {
        (
            self.patient_long_elementary(cache, p, eff),
            self.patient_event_elementary(cache, p, eff, None),
        )
    }

    fn patient_long_elementary<T: Real>(&self, cache: &PatientCache, p: &ParameterVector<T>, eff: &PatientEffects<T>) -> T {
        let w = self.width();
        let k_obs = cache.obs_y.len();
        if k_obs == 0 {
            return T::zero();
        }
        let mut sq: Vec<T> = (0..k_obs)
            .map(|k| {
                let j = cache.obs_cluster[k];
                let eta = self.eta_row(&cache.obs_rows[k * w..(k + 1) * w], p, eff, j);
                let mu = self.spec.link.inverse(eta);
                (mu.offset(-cache.obs_y[k])).square()
            })
            .collect();
        let rss = canonical_sum(&mut sq);
        let k = k_obs as f64;
        -(rss / p.sigma.square()).scale(0.5) - p.sigma.ln().scale(k) - T::cst(0.5 * k * (2.0 * std::f64::consts::PI).ln())
    }

    fn patient_event_elementary<T: Real>(
        &self,
        cache: &PatientCache,
        p: &ParameterVector<T>,
        eff: &PatientEffects<T>,
        mut trace: Option<&mut Vec<u32>>,
    ) -> T {
        let Some(h) = &cache.hazard else {
            return T::zero();
        };
        let base = self.hazard_offset(cache.patient, p, eff);
        let hs: Vec<T> = h
            .slots
            .iter()
            .map(|s| self.slot_log_hazard(s, cache.clusters, base, p, eff, &mut trace).exp())
            .collect();
        let cum = T::dot(&h.weights, &hs);
        match &h.event {
            Some(s) => self.slot_log_hazard(s, cache.clusters, base, p, eff, &mut trace) - cum,
            None => -cum,
        }
    }

    /// Linear predictor of cluster `j` of patient `i` at time `t`.
    pub fn eta<T: Real>(&self, i: usize, j: usize, t: f64, p: &ParameterVector<T>) -> Result<T> {
        self.check_index(i, j)?;
        self.check_time(t)?;
        let mut row = vec![0.0; self.width()];
        let covs = covariates_at(self.data.cluster(i, j)?, t);
        self.fill_row(t, covs, &mut row, None);
        Ok(self.eta_row(&row, p, &self.patient_effects(p, i), j))
    }

    /// Expected marker value on the internal scale.
    pub fn mu<T: Real>(&self, i: usize, j: usize, t: f64, p: &ParameterVector<T>) -> Result<T> {
        Ok(self.spec.link.inverse(self.eta(i, j, t, p)?))
    }

    /// `dμ/dt` on the internal scale.
    pub fn mu_slope<T: Real>(&self, i: usize, j: usize, t: f64, p: &ParameterVector<T>) -> Result<T> {
        self.check_index(i, j)?;
        self.check_time(t)?;
        if self.time_varying {
            return Err(Error::Unsupported(
                "slope of a trajectory whose design uses a time-varying covariate".into(),
            ));
        }
        let w = self.width();
        let mut row = vec![0.0; w];
        let mut der = vec![0.0; w];
        let covs = covariates_at(self.data.cluster(i, j)?, t);
        self.fill_row(t, covs, &mut row, Some(&mut der));
        let eff = self.patient_effects(p, i);
        let d = self.eta_row(&der, p, &eff, j);
        Ok(match self.spec.link {
            Link::Identity => d,
            Link::Log => self.eta_row(&row, p, &eff, j).exp() * d,
        })
    }

    /// Association contribution `Σ_q α_q f_q` to the log hazard of patient
    /// `i` at time `t`.
    pub fn association_term<T: Real>(&self, i: usize, t: f64, p: &ParameterVector<T>) -> Result<T> {
        self.data.patient(i)?;
        self.check_time(t)?;
        let slot = self.build_slot(i, t, self.needs)?;
        let eff = self.patient_effects(p, i);
        let terms = self.association_at(&slot, self.data.patients()[i].clusters.len(), p, &eff, &mut None);
        Ok(T::sum(&terms))
    }

    pub(crate) fn slot_for(&self, i: usize, t: f64) -> Result<Slot> {
        self.data.patient(i)?;
        self.check_time(t)?;
        self.build_slot(i, t, self.needs)
    }

    /// Indices chosen by every max/min summary over the full likelihood at
    /// `theta`. Two points with equal signatures lie on the same smooth
    /// piece of the log posterior.
    pub fn branch_signature(&self, theta: &[f64]) -> Result<Vec<u32>> {
        let p = self.layout.constrain(theta)?;
        let mut sig = Vec::new();
        for cache in &self.caches {
            let eff = self.patient_effects(&p, cache.patient);
            self.patient_terms(cache, &p, &eff, Some(&mut sig));
        }
        Ok(sig)
    }
}

impl JointModel {
    /// Names of the population parameters reported in data units, aligned
    /// with [`JointModel::to_original`].
    pub fn original_names(&self) -> Vec<String> {
        let lay = &self.layout;
        let mut names: Vec<String> = lay.beta.iter().map(|l| format!("beta[{l}]")).collect();
        names.push("sigma".into());
        for b in &lay.blocks {
            let lv = b.level.as_str();
            names.extend(b.labels.iter().map(|l| format!("sd_{lv}[{l}]")));
            for r in 0..b.dim() {
                for c in 0..r {
                    names.push(format!("corr_{lv}[{},{}]", b.labels[r], b.labels[c]));
                }
            }
        }
        names.extend(lay.gamma.iter().map(|l| format!("gamma[{l}]")));
        names.extend(lay.alpha.iter().map(|l| format!("alpha[{l}]")));
        names.extend((1..=lay.n_lambda).map(|k| format!("lambda[{k}]")));
        if lay.frailty.is_some() {
            names.push("sigma_delta".into());
        }
        names
    }

    /// Undo the internal standardization of the population parameters.
    pub fn to_original(&self, p: &ParameterVector<f64>) -> Vec<f64> {
        let st = &self.bases.standardization;
        let (yc, ys) = (st.outcome_center, st.outcome_scale);
        let fixed = &self.parsed.longitudinal.fixed;
        let mut out = Vec::new();
        let mut shift = 0.0;
        for (k, col) in fixed.iter().enumerate() {
            if !col.is_intercept() {
                shift += p.beta[k] * st.fixed.center[k] / st.fixed.scale[k];
            }
        }
        for (k, col) in fixed.iter().enumerate() {
            out.push(if col.is_intercept() {
                yc + ys * (p.beta[k] - shift)
            } else {
                ys * p.beta[k] / st.fixed.scale[k]
            });
        }
        out.push(ys * p.sigma);
        for blk in &p.blocks {
            let sc = st.random(blk.level).expect("standardization covers every level");
            out.extend(blk.sd.iter().zip(&sc.scale).map(|(s, d)| ys * s / d));
            let d = blk.dim();
            let corr = blk.correlation();
            for r in 0..d {
                for c in 0..r {
                    out.push(corr[r * d + c]);
                }
            }
        }
        let mut offset = 0.0;
        for (k, g) in p.gamma.iter().enumerate() {
            out.push(g / st.event.scale[k]);
            offset += g * st.event.center[k] / st.event.scale[k];
        }
        for (a, &(m, s)) in p.alpha.iter().zip(&st.association) {
            out.push(a / s);
            offset += a * m / s;
        }
        out.extend(p.lambda.iter().map(|l| l - offset));
        if let Some(f) = &p.frailty {
            out.push(f.sd);
        }
        out
    }
}

/// Sum whose result does not depend on the order of `xs`.
pub(crate) fn canonical_sum<T: Real>(xs: &mut [T]) -> T {
    xs.sort_by(|a, b| a.value().total_cmp(&b.value()));
    T::sum(xs)
}

fn summarize_traced<T: Real>(values: &mut [T], summary: Option<Summary>, trace: &mut Option<&mut Vec<u32>>) -> T {
    let pick = |values: &[T], better: fn(f64, f64) -> bool| {
        let mut best = 0;
        for (k, v) in values.iter().enumerate().skip(1) {
            if better(v.value(), values[best].value()) {
                best = k;
            }
        }
        best
    };
    match summary {
        None | Some(Summary::Sum) => canonical_sum(values),
        Some(Summary::Average) => {
            let n = values.len() as f64;
            canonical_sum(values) / T::cst(n)
        }
        Some(Summary::Max) | Some(Summary::Min) => {
            let better: fn(f64, f64) -> bool = if summary == Some(Summary::Max) {
                |a, b| a > b
            } else {
                |a, b| a < b
            };
            let k = pick(values, better);
            if let Some(t) = trace.as_deref_mut() {
                t.push(k as u32);
            }
            values[k].select()
        }
    }
}

/// Reduce per-cluster values to one patient-level value. Ties in max/min
/// select the lowest index.
pub fn summarize<T: Real>(values: &[T], summary: Summary) -> Result<T> {
    if values.is_empty() {
        return Err(Error::Domain("cannot summarize an empty set of clusters".into()));
    }
    let mut v = values.to_vec();
    Ok(summarize_traced(&mut v, Some(summary), &mut None))
}

fn standardize(
    data: &Dataset,
    spec: &ModelSpec,
    parsed: &ParsedSpec,
    time_basis: Option<&OrthoPolyBasis>,
    fixed: &DesignBlock,
    random: &[(Level, DesignBlock)],
    raw_event: &[Vec<f64>],
) -> Standardization {
    let n_alpha = spec.n_alpha();
    let obs: Vec<(&Cluster, usize)> = data
        .patients()
        .iter()
        .flat_map(|p| p.clusters.iter().flat_map(|c| (0..c.observations.len()).map(move |k| (c, k))))
        .collect();
    let column_stats = |blk: &DesignBlock, center: bool, intercepts: Vec<bool>| {
        let mut sc = ColumnScaling::identity(blk.width());
        if !spec.standardize {
            return sc;
        }
        for k in 0..blk.width() {
            if intercepts[k] {
                continue;
            }
            let vals: Vec<f64> = obs
                .iter()
                .map(|(c, m)| {
                    let o = &c.observations[*m];
                    let ortho = time_basis.map(|b| b.eval_both(o.time).0);
                    blk.raw(k, &o.covariates, o.time, ortho.as_deref())
                })
                .collect();
            let (mean, sd) = mean_sd(&vals);
            if center {
                sc.center[k] = mean;
            }
            sc.scale[k] = sd;
        }
        sc
    };
    let fixed_sc = column_stats(fixed, true, parsed.longitudinal.fixed.iter().map(|c| c.is_intercept()).collect());
    let random_sc = random
        .iter()
        .map(|(level, blk)| {
            let cols = &parsed.block(*level).expect("level parsed").columns;
            (*level, column_stats(blk, false, cols.iter().map(|c| c.is_intercept()).collect()))
        })
        .collect();
    let n_event = parsed.event.columns.len();
    let mut event = ColumnScaling::identity(n_event);
    if spec.standardize {
        for k in 0..n_event {
            let vals: Vec<f64> = raw_event.iter().map(|v| v[k]).collect();
            let (m, s) = mean_sd(&vals);
            event.center[k] = m;
            event.scale[k] = s;
        }
    }
    let values: Vec<f64> = obs.iter().map(|(c, m)| c.observations[*m].value).collect();
    let (y_mean, y_sd) = mean_sd(&values);
    let (_, t_sd) = mean_sd(&data.pooled_times());
    let mean_clusters = data.n_clusters() as f64 / data.n_patients() as f64;
    let outcome = spec.standardize && spec.link == Link::Identity;
    let (yc, ys) = if outcome { (y_mean, y_sd) } else { (0.0, 1.0) };
    let mut association = Vec::with_capacity(n_alpha);
    for a in &spec.association {
        if !spec.standardize {
            association.push((0.0, 1.0));
            continue;
        }
        let j = if a.summary == Some(Summary::Sum) { mean_clusters } else { 1.0 };
        let (m, s) = match a.functional {
            Functional::Value => (y_mean, y_sd),
            Functional::Slope => (0.0, y_sd / t_sd),
            Functional::Auc => (0.0, y_sd * t_sd),
        };
        association.push((m * j, s * j));
    }
    if spec.shared_re_association {
        association.push((0.0, if spec.standardize { y_sd } else { 1.0 }));
    }
    Standardization {
        outcome_center: yc,
        outcome_scale: ys,
        time_scale: t_sd,
        mean_clusters,
        fixed: fixed_sc,
        random: random_sc,
        event,
        association,
    }
}

fn build_layout(
    data: &Dataset,
    spec: &ModelSpec,
    parsed: &ParsedSpec,
    bases: &ModelBases,
    random: &[(Level, DesignBlock)],
    event_cols: &[crate::formula::Column],
) -> ParameterLayout {
    let labels = |cols: &[crate::formula::Column]| cols.iter().map(|c| c.label.clone()).collect::<Vec<_>>();
    let mut alpha: Vec<String> = spec.association.iter().map(|a| a.label()).collect();
    if spec.shared_re_association {
        alpha.push("shared:(Intercept)".into());
    }
    let blocks = random
        .iter()
        .map(|(level, _)| {
            let cols = labels(&parsed.block(*level).expect("level parsed").columns);
            let units: Vec<String> = match level {
                Level::Patient => data.patients().iter().map(|p| p.id.clone()).collect(),
                Level::Cluster => data
                    .patients()
                    .iter()
                    .flat_map(|p| p.clusters.iter().map(move |c| format!("{}/{}", p.id, c.id)))
                    .collect(),
                Level::Group => bases.groups.clone(),
            };
            (*level, cols, units, *level == Level::Group)
        })
        .collect();
    let frailty = (spec.frailty && spec.mode == HierarchyMode::ClusterAbovePatient).then(|| bases.groups.clone());
    ParameterLayout::new(
        labels(&parsed.longitudinal.fixed),
        labels(event_cols),
        alpha,
        bases.baseline.df(),
        blocks,
        frailty,
    )
}
