//! Dynamic prediction from a fitted model: survival to a horizon given
//! survival to a landmark and the marker history up to it, and the
//! time-dependent AUC of those predictions.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::diagnostics::quantile_sorted;
use crate::error::{Error, Result};
use crate::inference::{fmt, PosteriorDraws};
use crate::model::{JointModel, PatientCache, PatientEffects};
use crate::params::ParameterVector;
use crate::scalar::Real;
use crate::spec::Level;

const MAX_ITERATIONS: usize = 200;

/// Landmark `t_L`, horizon `t_L + Δt` and an optional patient subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkQuery {
    pub landmark: f64,
    pub horizon: f64,
    #[serde(default)]
    pub patients: Option<Vec<String>>,
}

impl LandmarkQuery {
    pub fn new(landmark: f64, horizon: f64) -> Self {
        LandmarkQuery {
            landmark,
            horizon,
            patients: None,
        }
    }

    pub fn validate(&self, t_max: f64) -> Result<()> {
        let ok = self.landmark.is_finite() && self.horizon.is_finite() && self.landmark >= 0.0;
        if !ok || self.landmark >= self.horizon {
            return Err(Error::Domain(format!(
                "landmark {} must be non-negative and before the horizon {}",
                self.landmark, self.horizon
            )));
        }
        if self.horizon > t_max {
            return Err(Error::Domain(format!(
                "horizon {} is beyond the last follow-up time {t_max}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Laplace approximation to one patient's random effects given their
/// history, and a draw from it. Vectors are `[b_i | u_i1 … u_iJ]` on the
/// internal scale.
#[derive(Debug, Clone)]
pub struct ConditionalEffects {
    pub mode: Vec<f64>,
    /// Row-major covariance of the approximation.
    pub covariance: Vec<f64>,
    pub draw: Vec<f64>,
    /// Log conditional density at the mode, up to a constant.
    pub objective: f64,
    pub iterations: usize,
}

/// Posterior summary of one patient's conditional survival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub probability: f64,
    pub lower: f64,
    pub upper: f64,
    /// Per-draw conditional survival probabilities.
    pub draws: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub landmark: f64,
    pub horizon: f64,
    pub patients: Vec<PatientPrediction>,
}

impl PredictionResult {
    /// `patient_id, landmark, horizon, probability, lower, upper, draws`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["patient_id", "landmark", "horizon", "probability", "lower", "upper", "draws"])?;
        for p in &self.patients {
            w.write_record([
                p.patient_id.clone(),
                fmt(self.landmark),
                fmt(self.horizon),
                fmt(p.probability),
                fmt(p.lower),
                fmt(p.upper),
                p.draws.len().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `1 − probability` per patient.
    pub fn risks(&self) -> Vec<(String, f64)> {
        self.patients.iter().map(|p| (p.patient_id.clone(), 1.0 - p.probability)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionOptions {
    /// Use at most this many posterior draws, evenly spaced.
    pub max_draws: Option<usize>,
    pub seed: u64,
}

impl Default for PredictionOptions {
    fn default() -> Self {
        PredictionOptions {
            max_draws: None,
            seed: 1,
        }
    }
}

/// The conditional log density of one patient's random effects.
struct Conditional<'a> {
    model: &'a JointModel,
    cache: PatientCache,
    p: &'a ParameterVector<f64>,
    patient: usize,
    db: usize,
    du: usize,
    clusters: usize,
}

thread_local! {
    static TAPE: Tape = Tape::new();
}

impl<'a> Conditional<'a> {
    fn new(model: &'a JointModel, patient: usize, landmark: f64, p: &'a ParameterVector<f64>) -> Result<Self> {
        let pt = model.dataset().patient(patient)?;
        let seen = pt
            .clusters
            .iter()
            .flat_map(|c| &c.observations)
            .any(|o| o.time <= landmark);
        if !seen {
            return Err(Error::Domain(format!(
                "patient `{}` has no observation at or before the landmark {landmark}",
                pt.id
            )));
        }
        let cache = model.build_cache(patient, landmark, Some((0.0, landmark, false)), model.rule())?;
        let dim = |lv| p.block(lv).map_or(0, |b| b.dim());
        Ok(Conditional {
            model,
            cache,
            p,
            patient,
            db: dim(Level::Patient),
            du: dim(Level::Cluster),
            clusters: pt.clusters.len(),
        })
    }

    fn dim(&self) -> usize {
        self.db + self.du * self.clusters
    }

    fn evaluate<T: Real>(&self, x: &[T], p: &ParameterVector<T>, c: &[T], delta: Option<T>) -> T {
        let eff = PatientEffects {
            b: &x[..self.db],
            u: &x[self.db..],
            c,
            delta,
        };
        let mut terms = vec![
            self.model.patient_long(&self.cache, p, &eff),
            self.model.patient_event(&self.cache, p, &eff, None),
        ];
        if let Some(blk) = p.block(Level::Patient) {
            terms.push(blk.log_density(eff.b));
        }
        if let Some(blk) = p.block(Level::Cluster) {
            terms.extend(eff.u.chunks(self.du).map(|u| blk.log_density(u)));
        }
        T::sum(&terms)
    }

    fn group_terms(&self) -> (Vec<f64>, Option<f64>) {
        let eff = self.model.patient_effects(self.p, self.patient);
        (eff.c.to_vec(), eff.delta)
    }

    /// Log density and gradient at `x`.
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (c, delta) = self.group_terms();
        TAPE.with(|tape| {
            tape.clear();
            let xs = tape.inputs(x);
            let p = self.p.lift(false);
            let c: Vec<_> = c.iter().map(|&v| Real::cst(v)).collect();
            let f = self.evaluate(&xs, &p, &c, delta.map(Real::cst));
            (f.value(), tape.gradient(f, &xs))
        })
    }
}

/// Maximize `f` by BFGS with a backtracking line search.
fn maximize<F>(mut f: F, x0: Vec<f64>) -> Result<(Vec<f64>, f64, usize)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() {
        return Err(Error::NonFinite {
            component: "conditional random-effect density".into(),
            value: fx,
        });
    }
    // Inverse Hessian of −f.
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    for it in 0..MAX_ITERATIONS {
        let gmax = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if gmax <= 1e-9 * fx.abs().max(1.0) {
            return Ok((x, fx, it));
        }
        let gv = DVector::from_column_slice(&g);
        let mut dir = &h * &gv;
        if dir.dot(&gv) <= 0.0 {
            h = DMatrix::identity(n, n);
            dir = gv.clone();
        }
        let slope = dir.dot(&gv);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + step * d).collect();
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ >= fx + 1e-4 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            // No ascent left along the quasi-Newton direction: accept the
            // point if the gradient is already negligible.
            if gmax <= 1e-6 * fx.abs().max(1.0) {
                return Ok((x, fx, it));
            }
            return Err(Error::Convergence {
                iterations: it,
                last_objective: fx,
            });
        };
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        // Gradient change of −f.
        let y = DVector::from_iterator(n, g.iter().zip(&gn).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let small = (fn_ - fx).abs() <= 1e-15 * fx.abs().max(1.0) && s.amax() <= 1e-12;
        x = xn;
        fx = fn_;
        g = gn;
        if small {
            return Ok((x, fx, it + 1));
        }
    }
    Err(Error::Convergence {
        iterations: MAX_ITERATIONS,
        last_objective: fx,
    })
}

/// Negative Hessian at `x` by central differences of the exact gradient,
/// symmetrized.
fn precision<F>(f: &mut F, x: &[f64]) -> DMatrix<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut xp = x.to_vec();
    for k in 0..n {
        let h = 1e-5 * x[k].abs().max(1.0);
        xp[k] = x[k] + h;
        let (_, gp) = f(&xp);
        xp[k] = x[k] - h;
        let (_, gm) = f(&xp);
        xp[k] = x[k];
        for r in 0..n {
            m[(r, k)] = -(gp[r] - gm[r]) / (2.0 * h);
        }
    }
    (&m + m.transpose()) * 0.5
}

/// Cholesky factor of `a`, adding the smallest diagonal jitter that makes
/// it positive definite.
fn robust_cholesky(a: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = a.clone().cholesky() {
        return Ok(c);
    }
    let n = a.nrows();
    let scale = (0..n).map(|k| a[(k, k)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut jitter = 1e-10 * scale;
    for _ in 0..20 {
        let m = a + DMatrix::identity(n, n) * jitter;
        if let Some(c) = m.cholesky() {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::NonFinite {
        component: "conditional random-effect precision".into(),
        value: f64::NAN,
    })
}

fn laplace<R: Rng>(cond: &Conditional, start: Vec<f64>, rng: &mut R) -> Result<ConditionalEffects> {
    let n = cond.dim();
    let mut f = |x: &[f64]| cond.value_grad(x);
    let (mode, objective, iterations) = maximize(&mut f, start)?;
    if n == 0 {
        return Ok(ConditionalEffects {
            mode,
            covariance: Vec::new(),
            draw: Vec::new(),
            objective,
            iterations,
        });
    }
    let chol = robust_cholesky(&precision(&mut f, &mode))?;
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let offset = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .expect("Cholesky factor has a positive diagonal");
    let draw = mode.iter().zip(offset.iter()).map(|(m, o)| m + o).collect();
    let cov = chol.inverse();
    Ok(ConditionalEffects {
        mode,
        covariance: cov.transpose().as_slice().to_vec(),
        draw,
        objective,
        iterations,
    })
}

/// Random effects of patient `i` conditional on their observations up to
/// `landmark`, their survival to it, and the population parameters `p`.
pub fn conditional_random_effects<R: Rng>(
    model: &JointModel,
    i: usize,
    landmark: f64,
    p: &ParameterVector<f64>,
    rng: &mut R,
) -> Result<ConditionalEffects> {
    let cond = Conditional::new(model, i, landmark, p)?;
    let start = vec![0.0; cond.dim()];
    laplace(&cond, start, rng)
}

/// Map a row of posterior draws onto the parameter layout of `model`.
/// Patient and cluster effects absent from the draws are set to zero; every
/// other coordinate must be present.
fn population_point(
    model: &JointModel,
    names: &[String],
    lookup: &HashMap<&str, usize>,
    row: &[f64],
) -> Result<ParameterVector<f64>> {
    let values = names
        .iter()
        .map(|n| match lookup.get(n.as_str()) {
            Some(&k) => Ok(row[k]),
            None if n.starts_with("b[") || n.starts_with("u[") => Ok(0.0),
            None => Err(Error::Schema(n.clone())),
        })
        .collect::<Result<Vec<f64>>>()?;
    model.layout().from_constrained(&values)
}

fn draw_subset(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|k| k * n / m).collect(),
        _ => (0..n).collect(),
    }
}

fn at_risk(model: &JointModel, query: &LandmarkQuery) -> Result<Vec<usize>> {
    let data = model.dataset();
    match &query.patients {
        None => Ok((0..data.n_patients())
            .filter(|&i| data.patients()[i].event_time > query.landmark)
            .collect()),
        Some(ids) => ids
            .iter()
            .map(|id| {
                let i = data
                    .patient_index(id)
                    .ok_or_else(|| Error::Index(format!("unknown patient `{id}`")))?;
                if data.patients()[i].event_time <= query.landmark {
                    return Err(Error::AtRisk(id.clone()));
                }
                Ok(i)
            })
            .collect(),
    }
}

/// Conditional survival `P(T > horizon | T > landmark, history)` for every
/// queried patient. Without an explicit subset, all patients still under
/// follow-up at the landmark are scored.
pub fn conditional_survival(
    model: &JointModel,
    query: &LandmarkQuery,
    draws: &PosteriorDraws,
    options: &PredictionOptions,
) -> Result<PredictionResult> {
    query.validate(model.t_max())?;
    if draws.n_draws() == 0 {
        return Err(Error::EmptyInput("posterior draws".into()));
    }
    let patients = at_risk(model, query)?;
    let names = model.layout().constrained_names();
    let lookup: HashMap<&str, usize> = draws.names.iter().enumerate().map(|(k, n)| (n.as_str(), k)).collect();
    let points = draw_subset(draws.n_draws(), options.max_draws)
        .into_iter()
        .map(|r| population_point(model, &names, &lookup, draws.row(r)))
        .collect::<Result<Vec<_>>>()?;
    let results = patients
        .par_iter()
        .map(|&i| predict_patient(model, i, query, &points, options.seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionResult {
        landmark: query.landmark,
        horizon: query.horizon,
        patients: results,
    })
}

fn predict_patient(
    model: &JointModel,
    i: usize,
    query: &LandmarkQuery,
    points: &[ParameterVector<f64>],
    seed: u64,
) -> Result<PatientPrediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let window = model.build_cache(i, f64::NEG_INFINITY, Some((query.landmark, query.horizon, false)), model.rule())?;
    let mut start: Option<Vec<f64>> = None;
    let mut probs = Vec::with_capacity(points.len());
    for p in points {
        let cond = Conditional::new(model, i, query.landmark, p)?;
        let x0 = start.take().unwrap_or_else(|| vec![0.0; cond.dim()]);
        let fx = laplace(&cond, x0, &mut rng)?;
        let (c, delta) = cond.group_terms();
        let eff = PatientEffects {
            b: &fx.draw[..cond.db],
            u: &fx.draw[cond.db..],
            c: &c,
            delta,
        };
        let log_s = model.patient_event(&window, p, &eff, None);
        probs.push(log_s.exp().clamp(0.0, 1.0));
        start = Some(fx.mode);
    }
    let mean = probs.iter().sum::<f64>() / probs.len() as f64;
    let mut sorted = probs.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(PatientPrediction {
        patient_id: model.dataset().patients()[i].id.clone(),
        probability: mean,
        lower: quantile_sorted(&sorted, 0.025).min(mean),
        upper: quantile_sorted(&sorted, 0.975).max(mean),
        draws: probs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub landmark: f64,
    pub horizon: f64,
    pub auc: f64,
    pub cases: usize,
    pub controls: usize,
    /// Patients censored inside the window.
    pub excluded: usize,
}

/// Probability that a case outranks a control, ties counting one half.
pub fn auc_from_scores(cases: &[f64], controls: &[f64]) -> Result<f64> {
    if cases.is_empty() || controls.is_empty() {
        return Err(Error::UndefinedAuc {
            cases: cases.len(),
            controls: controls.len(),
        });
    }
    let mut sorted = controls.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut wins = 0.0;
    for &c in cases {
        let below = sorted.partition_point(|&x| x < c);
        let tied = sorted.partition_point(|&x| x <= c) - below;
        wins += below as f64 + 0.5 * tied as f64;
    }
    Ok(wins / (cases.len() * controls.len()) as f64)
}

/// Time-dependent AUC of `predictions` against observed outcomes. Cases
/// have an event in `(landmark, horizon]`, controls are still event-free at
/// the horizon, and patients censored inside the window are left out.
pub fn time_dependent_auc(
    predictions: &PredictionResult,
    events: &[(String, f64, bool)],
    query: &LandmarkQuery,
) -> Result<AucResult> {
    let outcome: HashMap<&str, (f64, bool)> = events.iter().map(|(id, t, d)| (id.as_str(), (*t, *d))).collect();
    let (mut cases, mut controls, mut excluded) = (Vec::new(), Vec::new(), 0);
    for (id, risk) in predictions.risks() {
        let &(t, d) = outcome
            .get(id.as_str())
            .ok_or_else(|| Error::Orphan(format!("no event record for predicted patient `{id}`")))?;
        if t <= query.landmark {
            return Err(Error::AtRisk(id));
        }
        if t > query.horizon {
            controls.push(risk);
        } else if d {
            cases.push(risk);
        } else {
            excluded += 1;
        }
    }
    Ok(AucResult {
        landmark: query.landmark,
        horizon: query.horizon,
        auc: auc_from_scores(&cases, &controls)?,
        cases: cases.len(),
        controls: controls.len(),
        excluded,
    })
}

/// Observed outcomes of every patient in `model`'s dataset, in the form
/// [`time_dependent_auc`] expects.
pub fn outcomes(model: &JointModel) -> Vec<(String, f64, bool)> {
    model
        .dataset()
        .patients()
        .iter()
        .map(|p| (p.id.clone(), p.event_time, p.status))
        .collect()
}
