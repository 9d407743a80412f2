//! Event submodel, likelihood, priors and the log posterior.

use crate::error::{Error, Result};
use crate::model::JointModel;
use crate::params::ParameterVector;
use crate::quadrature::QuadratureRule;
use crate::scalar::{cauchy_lpdf, half_cauchy_lpdf, Real};
use crate::spec::Level;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log posterior with its additive components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPosteriorValue<T> {
    pub total: T,
    pub longitudinal: T,
    pub event: T,
    pub random_effects: T,
    pub prior: T,
}

impl<T: Real> LogPosteriorValue<T> {
    pub fn components(&self) -> [(&'static str, f64); 4] {
        [
            ("longitudinal", self.longitudinal.value()),
            ("event", self.event.value()),
            ("random_effects", self.random_effects.value()),
            ("prior", self.prior.value()),
        ]
    }

    /// Error naming the first non-finite component, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.components() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    component: name.into(),
                    value: v,
                });
            }
        }
        Ok(())
    }
}

fn normal_sum<T: Real>(xs: &[T], scale: f64) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let sq: Vec<T> = xs.iter().map(|x| x.square()).collect();
    T::sum(&sq).scale(-0.5 / (scale * scale)) - T::cst(xs.len() as f64 * (scale.ln() + 0.5 * LN_2PI))
}

impl JointModel {
    /// Log hazard of patient `i` at time `t`.
    pub fn log_hazard<T: Real>(&self, i: usize, t: f64, p: &ParameterVector<T>) -> Result<T> {
        let slot = self.slot_for(i, t)?;
        let eff = self.patient_effects(p, i);
        let base = self.hazard_offset(i, p, &eff);
        let clusters = self.dataset().patients()[i].clusters.len();
        Ok(self.slot_log_hazard(&slot, clusters, base, p, &eff, &mut None))
    }

    /// `∫₀ᵀ h_i(u) du` by the given rule.
    pub fn cum_hazard<T: Real>(&self, i: usize, t: f64, p: &ParameterVector<T>, rule: &QuadratureRule) -> Result<T> {
        self.cum_hazard_between(i, 0.0, t, p, rule)
    }

    /// `∫ₐᵇ h_i(u) du` by the given rule.
    pub fn cum_hazard_between<T: Real>(
        &self,
        i: usize,
        a: f64,
        b: f64,
        p: &ParameterVector<T>,
        rule: &QuadratureRule,
    ) -> Result<T> {
        if !(b > 0.0) {
            return Err(Error::Domain(format!("cumulative hazard needs a positive horizon, got {b}")));
        }
        let cache = self.build_cache(i, f64::NEG_INFINITY, Some((a, b, false)), rule)?;
        let eff = self.patient_effects(p, i);
        Ok(-self.patient_event(&cache, p, &eff, None))
    }

    /// `Σ log N(y | μ, σ²)` over every observation, on the internal scale.
    pub fn longitudinal_loglik<T: Real>(&self, p: &ParameterVector<T>) -> Result<T> {
        if !(p.sigma.value() > 0.0) {
            return Err(Error::Domain("residual SD must be positive".into()));
        }
        let terms: Vec<T> = self
            .caches
            .iter()
            .map(|c| self.patient_long(c, p, &self.patient_effects(p, c.patient)))
            .collect();
        Ok(T::sum(&terms))
    }

    /// `Σ_i d_i log h_i(T_i) − H_i(T_i)`.
    pub fn event_loglik<T: Real>(&self, p: &ParameterVector<T>, rule: &QuadratureRule) -> Result<T> {
        let mut terms = Vec::with_capacity(self.caches.len());
        for c in &self.caches {
            let eff = self.patient_effects(p, c.patient);
            if rule == self.rule() {
                terms.push(self.patient_event(c, p, &eff, None));
            } else {
                let pt = &self.dataset().patients()[c.patient];
                let cache = self.build_cache(c.patient, f64::NEG_INFINITY, Some((0.0, pt.event_time, pt.status)), rule)?;
                terms.push(self.patient_event(&cache, p, &eff, None));
            }
        }
        Ok(T::sum(&terms))
    }

    /// Log density of all random effects and frailties under their
    /// population distributions.
    pub fn random_effects_log_density<T: Real>(&self, p: &ParameterVector<T>) -> T {
        let mut total = Vec::new();
        for blk in &p.blocks {
            let d = blk.dim();
            match (&blk.raw, blk.level) {
                (Some(raw), _) => total.push(normal_sum(raw, 1.0)),
                (None, Level::Cluster) => {
                    for (i, pt) in self.dataset().patients().iter().enumerate() {
                        let off = self.dataset().cluster_index(i, 0);
                        let mut dens: Vec<T> = (0..pt.clusters.len())
                            .map(|j| blk.log_density(&blk.effects[(off + j) * d..(off + j + 1) * d]))
                            .collect();
                        total.push(crate::model::canonical_sum(&mut dens));
                    }
                }
                (None, _) => {
                    for k in 0..blk.effects.len() / d.max(1) {
                        total.push(blk.log_density(blk.unit(k)));
                    }
                }
            }
        }
        if let Some(f) = &p.frailty {
            total.push(normal_sum(&f.raw, 1.0));
        }
        T::sum(&total)
    }

    /// Log prior density including the log-Jacobian of the transform from the
    /// unconstrained space.
    pub fn log_prior<T: Real>(&self, p: &ParameterVector<T>) -> T {
        let pr = &self.spec().priors;
        let mut terms = vec![
            normal_sum(&p.beta, pr.coefficient_scale),
            normal_sum(&p.gamma, pr.coefficient_scale),
            normal_sum(&p.alpha, pr.coefficient_scale),
            half_cauchy_lpdf(p.sigma, pr.scale_scale),
            p.log_jacobian,
        ];
        terms.extend(p.lambda.iter().map(|&l| cauchy_lpdf(l, pr.spline_scale)));
        for blk in &p.blocks {
            terms.extend(blk.sd.iter().map(|&s| half_cauchy_lpdf(s, pr.scale_scale)));
            let d = blk.dim();
            for r in 1..d {
                let power = (d - r - 1) as f64 + 2.0 * (pr.lkj_shape - 1.0);
                if power != 0.0 {
                    terms.push(blk.chol[r * d + r].ln().scale(power));
                }
            }
        }
        if let Some(f) = &p.frailty {
            terms.push(half_cauchy_lpdf(f.sd, pr.scale_scale));
        }
        T::sum(&terms)
    }

    /// Log posterior at a constrained point, by component.
    pub fn log_posterior<T: Real>(&self, p: &ParameterVector<T>) -> LogPosteriorValue<T> {
        let mut long = Vec::with_capacity(self.caches.len());
        let mut event = Vec::with_capacity(self.caches.len());
        for c in &self.caches {
            let eff = self.patient_effects(p, c.patient);
            let (l, e) = self.patient_terms(c, p, &eff, None);
            long.push(l);
            event.push(e);
        }
        let longitudinal = T::sum(&long);
        let event = T::sum(&event);
        let random_effects = self.random_effects_log_density(p);
        let prior = self.log_prior(p);
        LogPosteriorValue {
            total: T::sum(&[longitudinal, event, random_effects, prior]),
            longitudinal,
            event,
            random_effects,
            prior,
        }
    }

    /// [`JointModel::log_posterior`] evaluated by elementary operations
    /// alone, without the fused per-patient terms. Slower; a reference for
    /// checking the fast path.
    pub fn log_posterior_elementary<T: Real>(&self, p: &ParameterVector<T>) -> LogPosteriorValue<T> {
        let mut long = Vec::with_capacity(self.caches.len());
        let mut event = Vec::with_capacity(self.caches.len());
        for c in &self.caches {
            let eff = self.patient_effects(p, c.patient);
            let (l, e) = self.patient_terms_elementary(c, p, &eff);
            long.push(l);
            event.push(e);
        }
        let longitudinal = T::sum(&long);
        let event = T::sum(&event);
        let random_effects = self.random_effects_log_density(p);
        let prior = self.log_prior(p);
        LogPosteriorValue {
            total: T::sum(&[longitudinal, event, random_effects, prior]),
            longitudinal,
            event,
            random_effects,
            prior,
        }
    }

    /// Log posterior at an unconstrained point.
    pub fn log_density<T: Real>(&self, theta: &[T]) -> Result<LogPosteriorValue<T>> {
        let p = self.layout().constrain(theta)?;
        Ok(self.log_posterior(&p))
    }
}
