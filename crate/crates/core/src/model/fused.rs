//! Per-patient likelihood terms evaluated in plain floating point and
//! recorded as one node each, with partial derivatives computed by hand.
//! The elementary-operation versions in the parent module are the reference.

use super::{AssocKind, JointModel, PatientCache, PatientEffects, Slot};
use crate::params::ParameterVector;
use crate::scalar::Real;
use crate::spec::{Functional, Link, Summary};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// The coefficients one patient's design rows multiply, laid out as
/// `[β | b | u_1 … u_J | c]`.
struct Coefs<T> {
    vars: Vec<T>,
    vals: Vec<f64>,
    /// Start of `b`, of `u_1` and of `c` in `vals`.
    b: usize,
    u: usize,
    c: usize,
    /// Width of one cluster's `u`.
    du: usize,
}

impl JointModel {
    fn coefs<T: Real>(&self, p: &ParameterVector<T>, eff: &PatientEffects<T>) -> Coefs<T> {
        let mut vars = Vec::with_capacity(p.beta.len() + eff.b.len() + eff.u.len() + eff.c.len());
        vars.extend_from_slice(&p.beta);
        let b = vars.len();
        vars.extend_from_slice(eff.b);
        let u = vars.len();
        vars.extend_from_slice(eff.u);
        let c = vars.len();
        vars.extend_from_slice(eff.c);
        let vals = vars.iter().map(|v| v.value()).collect();
        Coefs {
            vars,
            vals,
            b,
            u,
            c,
            du: self.offsets[3] - self.offsets[2],
        }
    }

    /// `(row range, coefficient start)` of each block for cluster `j`.
    fn segments<T>(&self, cf: &Coefs<T>, j: usize) -> [(usize, usize, usize); 4] {
        let o = self.offsets;
        [
            (o[0], o[1], 0),
            (o[1], o[2], cf.b),
            (o[2], o[3], cf.u + j * cf.du),
            (o[3], o[4], cf.c),
        ]
    }

    fn eta_of<T>(&self, cf: &Coefs<T>, row: &[f64], j: usize) -> f64 {
        let mut acc = 0.0;
        for (a, b, start) in self.segments(cf, j) {
            for k in a..b {
                acc += row[k] * cf.vals[start + k - a];
            }
        }
        acc
    }

    fn add_row<T>(&self, cf: &Coefs<T>, row: &[f64], j: usize, factor: f64, g: &mut [f64]) {
        for (a, b, start) in self.segments(cf, j) {
            for k in a..b {
                g[start + k - a] += factor * row[k];
            }
        }
    }

    /// Gaussian log likelihood of one patient's observations.
    pub(crate) fn patient_long<T: Real>(&self, cache: &PatientCache, p: &ParameterVector<T>, eff: &PatientEffects<T>) -> T {
        let w = self.width();
        let k_obs = cache.obs_y.len();
        if k_obs == 0 {
            return T::zero();
        }
        let cf = self.coefs(p, eff);
        let sigma = p.sigma.value();
        let s2 = sigma * sigma;
        let mut g = vec![0.0; cf.vals.len()];
        let mut sq = Vec::with_capacity(k_obs);
        for k in 0..k_obs {
            let j = cache.obs_cluster[k];
            let row = &cache.obs_rows[k * w..(k + 1) * w];
            let eta = self.eta_of(&cf, row, j);
            let (mu, dmu) = match self.spec.link {
                Link::Identity => (eta, 1.0),
                Link::Log => {
                    let e = eta.exp();
                    (e, e)
                }
            };
            let r = mu - cache.obs_y[k];
            sq.push(r * r);
            self.add_row(&cf, row, j, -r * dmu / s2, &mut g);
        }
        sq.sort_by(|a, b| a.total_cmp(b));
        let rss: f64 = sq.iter().sum();
        let kf = k_obs as f64;
        let value = -0.5 * rss / s2 - kf * sigma.ln() - 0.5 * kf * LN_2PI;
        let mut parents: Vec<(T, f64)> = cf.vars.iter().copied().zip(g).collect();
        parents.push((p.sigma, rss / (s2 * sigma) - kf / sigma));
        T::precomputed(value, &parents)
    }

    /// `d log h(b) − ∫ₐᵇ h` for the cached hazard interval `[a, b]`.
    pub(crate) fn patient_event<T: Real>(
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
        let cf = self.coefs(p, eff);
        let ctx = SlotContext {
            nc: cf.vals.len(),
            alpha: p.alpha.iter().map(|a| a.value()).collect(),
            lambda: p.lambda.iter().map(|l| l.value()).collect(),
            base: base.value(),
            clusters: cache.clusters,
        };
        let n = ctx.nc + ctx.alpha.len() + ctx.lambda.len() + 1;
        let mut total = vec![0.0; n];
        let mut g = vec![0.0; n];
        let mut vals = Vec::with_capacity(cache.clusters);
        let mut cum = 0.0;
        for (s, w) in h.slots.iter().zip(&h.weights) {
            let lh = self.fused_log_hazard(s, &ctx, &cf, &mut g, &mut vals, &mut trace);
            let hz = w * lh.exp();
            cum += hz;
            for k in 0..n {
                total[k] -= hz * g[k];
            }
        }
        let mut value = -cum;
        if let Some(s) = &h.event {
            let lh = self.fused_log_hazard(s, &ctx, &cf, &mut g, &mut vals, &mut trace);
            value = lh - cum;
            for k in 0..n {
                total[k] += g[k];
            }
        }
        let mut parents: Vec<(T, f64)> = Vec::with_capacity(n);
        parents.extend(cf.vars.iter().copied().zip(total[..ctx.nc].iter().copied()));
        let mut k = ctx.nc;
        for a in &p.alpha {
            parents.push((*a, total[k]));
            k += 1;
        }
        for l in &p.lambda {
            parents.push((*l, total[k]));
            k += 1;
        }
        parents.push((base, total[k]));
        T::precomputed(value, &parents)
    }

    /// Per-cluster functional value in outcome units.
    fn functional_value<T>(&self, slot: &Slot, f: Functional, cf: &Coefs<T>, j: usize) -> f64 {
        let st = &self.bases.standardization;
        let (yc, ys) = (st.outcome_center, st.outcome_scale);
        let w = self.width();
        let r = j * w..(j + 1) * w;
        match (f, self.spec.link) {
            (Functional::Value, Link::Identity) => yc + ys * self.eta_of(cf, &slot.value[r.clone()], j),
            (Functional::Value, Link::Log) => yc + ys * self.eta_of(cf, &slot.value[r.clone()], j).exp(),
            (Functional::Slope, Link::Identity) => ys * self.eta_of(cf, &slot.slope[r.clone()], j),
            (Functional::Slope, Link::Log) => {
                let e = self.eta_of(cf, &slot.value[r.clone()], j).exp();
                ys * e * self.eta_of(cf, &slot.slope[r.clone()], j)
            }
            (Functional::Auc, Link::Identity) => yc * slot.time + ys * self.eta_of(cf, &slot.auc[r.clone()], j),
            (Functional::Auc, Link::Log) => {
                let m_count = slot.auc_weights.len();
                let mut acc = 0.0;
                for m in 0..m_count {
                    let r = (j * m_count + m) * w;
                    acc += slot.auc_weights[m] * self.eta_of(cf, &slot.auc[r..r + w], j).exp();
                }
                yc * slot.time + ys * acc
            }
        }
    }

    /// Add `factor * ∂F_j/∂coefficients` into `g`.
    fn add_functional_gradient<T>(&self, slot: &Slot, f: Functional, cf: &Coefs<T>, j: usize, factor: f64, g: &mut [f64]) {
        let ys = self.bases.standardization.outcome_scale;
        let w = self.width();
        let r = j * w..(j + 1) * w;
        match (f, self.spec.link) {
            (Functional::Value, Link::Identity) => self.add_row(cf, &slot.value[r], j, factor * ys, g),
            (Functional::Value, Link::Log) => {
                let e = self.eta_of(cf, &slot.value[r.clone()], j).exp();
                self.add_row(cf, &slot.value[r], j, factor * ys * e, g);
            }
            (Functional::Slope, Link::Identity) => self.add_row(cf, &slot.slope[r], j, factor * ys, g),
            (Functional::Slope, Link::Log) => {
                let e = self.eta_of(cf, &slot.value[r.clone()], j).exp();
                let d = self.eta_of(cf, &slot.slope[r.clone()], j);
                self.add_row(cf, &slot.value[r.clone()], j, factor * ys * e * d, g);
                self.add_row(cf, &slot.slope[r], j, factor * ys * e, g);
            }
            (Functional::Auc, Link::Identity) => self.add_row(cf, &slot.auc[r], j, factor * ys, g),
            (Functional::Auc, Link::Log) => {
                let m_count = slot.auc_weights.len();
                for m in 0..m_count {
                    let r = (j * m_count + m) * w;
                    let e = self.eta_of(cf, &slot.auc[r..r + w], j).exp();
                    self.add_row(cf, &slot.auc[r..r + w], j, factor * ys * slot.auc_weights[m] * e, g);
                }
            }
        }
    }

    /// Log hazard at one slot; `g` receives its gradient with respect to
    /// `[coefficients | α | λ | offset]`.
    fn fused_log_hazard<T>(
        &self,
        slot: &Slot,
        ctx: &SlotContext,
        cf: &Coefs<T>,
        g: &mut [f64],
        vals: &mut Vec<f64>,
        trace: &mut Option<&mut Vec<u32>>,
    ) -> f64 {
        g.fill(0.0);
        let q_count = ctx.alpha.len();
        let mut lh = 0.0;
        for (q, a) in self.assoc.iter().enumerate() {
            let (s, coef_factor) = match a.kind {
                AssocKind::Trajectory(f, summary) => {
                    vals.clear();
                    vals.extend((0..ctx.clusters).map(|j| self.functional_value(slot, f, cf, j)));
                    let scale = ctx.alpha[q] / a.scale;
                    match summary {
                        None | Some(Summary::Sum) | Some(Summary::Average) => {
                            let div = if summary == Some(Summary::Average) {
                                ctx.clusters as f64
                            } else {
                                1.0
                            };
                            vals.sort_by(|x, y| x.total_cmp(y));
                            let total: f64 = vals.iter().sum();
                            for j in 0..ctx.clusters {
                                self.add_functional_gradient(slot, f, cf, j, scale / div, g);
                            }
                            (if div == 1.0 { total } else { total / div }, None)
                        }
                        Some(Summary::Max) | Some(Summary::Min) => {
                            let max = summary == Some(Summary::Max);
                            let mut best = 0;
                            for j in 1..vals.len() {
                                if (max && vals[j] > vals[best]) || (!max && vals[j] < vals[best]) {
                                    best = j;
                                }
                            }
                            if let Some(t) = trace.as_deref_mut() {
                                t.push(best as u32);
                            }
                            self.add_functional_gradient(slot, f, cf, best, scale, g);
                            (vals[best], None)
                        }
                    }
                }
                AssocKind::SharedIntercept => {
                    let ys = self.bases.standardization.outcome_scale;
                    (ys * cf.vals[cf.c], Some(ctx.alpha[q] / a.scale * ys))
                }
            };
            if let Some(d) = coef_factor {
                g[cf.c] += d;
            }
            let f = (s - a.center) / a.scale;
            lh += ctx.alpha[q] * f;
            g[ctx.nc + q] = f;
        }
        let mut spline = 0.0;
        for (k, (b, l)) in slot.spline.iter().zip(&ctx.lambda).enumerate() {
            spline += b * l;
            g[ctx.nc + q_count + k] = *b;
        }
        lh += spline;
        lh += ctx.base;
        let last = g.len() - 1;
        g[last] = 1.0;
        lh
    }
}

struct SlotContext {
    nc: usize,
    alpha: Vec<f64>,
    lambda: Vec<f64>,
    base: f64,
    clusters: usize,
}
