//! Parameter layout and the unconstrained ↔ constrained transforms.
//!
//! The unconstrained vector is ordered
//! `beta, gamma, alpha, lambda, log_sigma`, then for each random-effect level
//! (patient, cluster, group) `log_sd[dim], corr_raw[dim(dim-1)/2],
//! effects[count * dim]`, then for a shared frailty `log_sigma_delta, z[L]`.
//! Scales use a log transform and correlation Cholesky factors the
//! tanh/partial-correlation transform; group-level effects and frailties are
//! stored as standard-normal innovations.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spec::Level;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub level: Level,
    pub labels: Vec<String>,
    /// Unit identifiers (patient ids, `patient/cluster` ids or group ids).
    pub units: Vec<String>,
    /// Effects are stored as standard-normal innovations.
    pub noncentered: bool,
    pub offset: usize,
}

impl BlockLayout {
    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn count(&self) -> usize {
        self.units.len()
    }

    pub fn n_corr(&self) -> usize {
        let d = self.dim();
        d * d.saturating_sub(1) / 2
    }

    pub fn len(&self) -> usize {
        self.dim() + self.n_corr() + self.count() * self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn symbol(&self) -> &'static str {
        match self.level {
            Level::Patient => "b",
            Level::Cluster => "u",
            Level::Group => "c",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub beta: Vec<String>,
    pub gamma: Vec<String>,
    pub alpha: Vec<String>,
    pub n_lambda: usize,
    pub blocks: Vec<BlockLayout>,
    /// Group ids carrying a shared frailty.
    pub frailty: Option<Vec<String>>,
}

impl ParameterLayout {
    pub fn new(
        beta: Vec<String>,
        gamma: Vec<String>,
        alpha: Vec<String>,
        n_lambda: usize,
        blocks: Vec<(Level, Vec<String>, Vec<String>, bool)>,
        frailty: Option<Vec<String>>,
    ) -> Self {
        let mut offset = beta.len() + gamma.len() + alpha.len() + n_lambda + 1;
        let blocks = blocks
            .into_iter()
            .map(|(level, labels, units, noncentered)| {
                let b = BlockLayout {
                    level,
                    labels,
                    units,
                    noncentered,
                    offset,
                };
                offset += b.len();
                b
            })
            .collect();
        ParameterLayout {
            beta,
            gamma,
            alpha,
            n_lambda,
            blocks,
            frailty,
        }
    }

    fn sigma_offset(&self) -> usize {
        self.beta.len() + self.gamma.len() + self.alpha.len() + self.n_lambda
    }

    fn frailty_offset(&self) -> usize {
        self.blocks
            .last()
            .map(|b| b.offset + b.len())
            .unwrap_or(self.sigma_offset() + 1)
    }

    /// Length of the unconstrained vector.
    pub fn dim(&self) -> usize {
        self.frailty_offset() + self.frailty.as_ref().map_or(0, |g| 1 + g.len())
    }

    pub fn block(&self, level: Level) -> Option<&BlockLayout> {
        self.blocks.iter().find(|b| b.level == level)
    }

    /// Names of the unconstrained coordinates.
    pub fn unconstrained_names(&self) -> Vec<String> {
        let mut names = self.common_names();
        names.push("log_sigma".into());
        for b in &self.blocks {
            let lv = b.level.as_str();
            names.extend(b.labels.iter().map(|l| format!("log_sd_{lv}[{l}]")));
            names.extend(corr_pairs(&b.labels).map(|(r, c)| format!("corr_raw_{lv}[{r},{c}]")));
            let sym = if b.noncentered {
                format!("z_{}", b.symbol())
            } else {
                b.symbol().to_string()
            };
            for unit in &b.units {
                names.extend(b.labels.iter().map(|l| format!("{sym}[{unit}:{l}]")));
            }
        }
        if let Some(groups) = &self.frailty {
            names.push("log_sigma_delta".into());
            names.extend(groups.iter().map(|g| format!("z_delta[{g}]")));
        }
        names
    }

    /// Names of the constrained coordinates; the columns of the draws table.
    pub fn constrained_names(&self) -> Vec<String> {
        let mut names = self.common_names();
        names.push("sigma".into());
        for b in &self.blocks {
            let lv = b.level.as_str();
            names.extend(b.labels.iter().map(|l| format!("sd_{lv}[{l}]")));
            names.extend(corr_pairs(&b.labels).map(|(r, c)| format!("corr_{lv}[{r},{c}]")));
            for unit in &b.units {
                names.extend(b.labels.iter().map(|l| format!("{}[{unit}:{l}]", b.symbol())));
            }
        }
        if let Some(groups) = &self.frailty {
            names.push("sigma_delta".into());
            names.extend(groups.iter().map(|g| format!("delta[{g}]")));
        }
        names
    }

    fn common_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        names.extend(self.beta.iter().map(|l| format!("beta[{l}]")));
        names.extend(self.gamma.iter().map(|l| format!("gamma[{l}]")));
        names.extend(self.alpha.iter().map(|l| format!("alpha[{l}]")));
        names.extend((1..=self.n_lambda).map(|k| format!("lambda[{k}]")));
        names
    }

    /// Map an unconstrained point to parameters, accumulating the
    /// log-Jacobian of the transform.
    pub fn constrain<T: Real>(&self, theta: &[T]) -> Result<ParameterVector<T>> {
        if theta.len() != self.dim() {
            return Err(Error::Index(format!(
                "parameter vector has length {}, layout expects {}",
                theta.len(),
                self.dim()
            )));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &theta[at..at + n];
            at += n;
            s
        };
        let beta = take(self.beta.len()).to_vec();
        let gamma = take(self.gamma.len()).to_vec();
        let alpha = take(self.alpha.len()).to_vec();
        let lambda = take(self.n_lambda).to_vec();
        let log_sigma = take(1)[0];
        let mut log_jacobian = log_sigma;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let d = b.dim();
            let log_sd = take(d);
            let sd: Vec<T> = log_sd.iter().map(|v| v.exp()).collect();
            log_jacobian += T::sum(log_sd);
            let (chol, jac) = corr_cholesky(take(b.n_corr()), d);
            log_jacobian += jac;
            let stored = take(b.count() * d).to_vec();
            let (effects, raw) = if b.noncentered {
                let effects = stored
                    .chunks(d.max(1))
                    .flat_map(|z| scale_correlate(&sd, &chol, z))
                    .collect();
                (effects, Some(stored))
            } else {
                (stored, None)
            };
            blocks.push(ReBlock {
                level: b.level,
                sd,
                chol,
                effects,
                raw,
            });
        }
        let frailty = self.frailty.as_ref().map(|groups| {
            let log_sd = take(1)[0];
            log_jacobian += log_sd;
            let sd = log_sd.exp();
            let raw = take(groups.len()).to_vec();
            let delta = raw.iter().map(|&z| sd * z).collect();
            Frailty { sd, delta, raw }
        });
        Ok(ParameterVector {
            beta,
            gamma,
            alpha,
            lambda,
            sigma: log_sigma.exp(),
            blocks,
            frailty,
            log_jacobian,
        })
    }

    /// Inverse of [`ParameterLayout::constrain`] for plain values.
    pub fn unconstrain(&self, p: &ParameterVector<f64>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend(&p.beta);
        out.extend(&p.gamma);
        out.extend(&p.alpha);
        out.extend(&p.lambda);
        out.push(p.sigma.ln());
        for (b, blk) in self.blocks.iter().zip(&p.blocks) {
            let d = b.dim();
            out.extend(blk.sd.iter().map(|s| s.ln()));
            out.extend(corr_unconstrain(&blk.chol, d)?);
            if b.noncentered {
                out.extend(blk.innovations());
            } else {
                out.extend(&blk.effects);
            }
        }
        if let Some(f) = &p.frailty {
            out.push(f.sd.ln());
            out.extend(&f.raw);
        }
        if out.len() != self.dim() {
            return Err(Error::Index("parameter vector does not match layout".into()));
        }
        Ok(out)
    }

    /// Rebuild parameters from a row of constrained values ordered as
    /// [`ParameterLayout::constrained_names`].
    pub fn from_constrained(&self, values: &[f64]) -> Result<ParameterVector<f64>> {
        let expected = self.constrained_names().len();
        if values.len() != expected {
            return Err(Error::Index(format!(
                "constrained row has length {}, layout expects {expected}",
                values.len()
            )));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &values[at..at + n];
            at += n;
            s
        };
        let beta = take(self.beta.len()).to_vec();
        let gamma = take(self.gamma.len()).to_vec();
        let alpha = take(self.alpha.len()).to_vec();
        let lambda = take(self.n_lambda).to_vec();
        let sigma = take(1)[0];
        let mut log_jacobian = sigma.ln();
        let mut blocks = Vec::new();
        for b in &self.blocks {
            let d = b.dim();
            let sd = take(d).to_vec();
            let corr_vals = take(b.n_corr());
            let mut corr = DMatrix::<f64>::identity(d, d);
            for (k, (r, c)) in corr_index_pairs(d).enumerate() {
                corr[(r, c)] = corr_vals[k];
                corr[(c, r)] = corr_vals[k];
            }
            let chol = corr
                .cholesky()
                .ok_or_else(|| Error::Integrity(format!("{} correlation is not positive definite", b.level.as_str())))?
                .l();
            let chol: Vec<f64> = (0..d * d).map(|k| chol[(k / d, k % d)]).collect();
            log_jacobian += sd.iter().map(|s| s.ln()).sum::<f64>();
            log_jacobian += corr_cholesky(&corr_unconstrain(&chol, d)?, d).1;
            let effects = take(b.count() * d).to_vec();
            let mut blk = ReBlock {
                level: b.level,
                sd,
                chol,
                effects,
                raw: None,
            };
            if b.noncentered {
                blk.raw = Some(blk.innovations());
            }
            blocks.push(blk);
        }
        let frailty = self.frailty.as_ref().map(|groups| {
            let sd = take(1)[0];
            log_jacobian += sd.ln();
            let delta = take(groups.len()).to_vec();
            let raw = delta.iter().map(|d| d / sd).collect();
            Frailty { sd, delta, raw }
        });
        Ok(ParameterVector {
            beta,
            gamma,
            alpha,
            lambda,
            sigma,
            blocks,
            frailty,
            log_jacobian,
        })
    }
}

fn corr_index_pairs(d: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..d).flat_map(|r| (0..r).map(move |c| (r, c)))
}

fn corr_pairs(labels: &[String]) -> impl Iterator<Item = (&str, &str)> + '_ {
    corr_index_pairs(labels.len()).map(|(r, c)| (labels[r].as_str(), labels[c].as_str()))
}

/// Cholesky factor of a correlation matrix from `d(d-1)/2` unconstrained
/// values, returned row-major with the log-Jacobian of the transform.
pub fn corr_cholesky<T: Real>(raw: &[T], d: usize) -> (Vec<T>, T) {
    let mut l = vec![T::zero(); d * d];
    let mut jac = T::zero();
    if d == 0 {
        return (l, jac);
    }
    l[0] = T::one();
    let mut k = 0;
    for r in 1..d {
        let mut sum_sqs = T::zero();
        for c in 0..r {
            let z = raw[k].tanh();
            k += 1;
            jac += (T::one() - z * z).ln();
            if c == 0 {
                l[r * d] = z;
                sum_sqs = z * z;
            } else {
                let rem = T::one() - sum_sqs;
                jac += rem.ln().scale(0.5);
                let v = z * rem.sqrt();
                l[r * d + c] = v;
                sum_sqs += v * v;
            }
        }
        l[r * d + r] = (T::one() - sum_sqs).sqrt();
    }
    (l, jac)
}

/// Unconstrained values reproducing a given correlation Cholesky factor.
pub fn corr_unconstrain(chol: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(d * d.saturating_sub(1) / 2);
    for r in 1..d {
        let mut sum_sqs = 0.0;
        for c in 0..r {
            let v = chol[r * d + c];
            let z = if c == 0 { v } else { v / (1.0 - sum_sqs).sqrt() };
            if !(z.abs() < 1.0) {
                return Err(Error::Integrity("correlation factor on the boundary".into()));
            }
            out.push(z.atanh());
            sum_sqs += v * v;
        }
    }
    Ok(out)
}

/// `diag(sd) · L · z` for one unit.
fn scale_correlate<T: Real>(sd: &[T], chol: &[T], z: &[T]) -> Vec<T> {
    let d = sd.len();
    (0..d)
        .map(|r| {
            let mut acc = T::zero();
            for c in 0..=r {
                acc += chol[r * d + c] * z[c];
            }
            sd[r] * acc
        })
        .collect()
}

/// One random-effect level: covariance as `(sd, correlation Cholesky)` and
/// the effects themselves (unit-major, `count × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReBlock<T> {
    pub level: Level,
    pub sd: Vec<T>,
    /// Lower-triangular, row-major, rows of unit length.
    pub chol: Vec<T>,
    pub effects: Vec<T>,
    /// Standard-normal innovations for non-centered levels.
    pub raw: Option<Vec<T>>,
}

impl<T: Real> ReBlock<T> {
    pub fn dim(&self) -> usize {
        self.sd.len()
    }

    pub fn unit(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.effects[k * d..(k + 1) * d]
    }

    /// `log N(x | 0, Σ)` for one effect vector, with `Σ = D L Lᵀ D`.
    pub fn log_density(&self, x: &[T]) -> T {
        let d = self.dim();
        let mut w = vec![T::zero(); d];
        let mut quad = Vec::with_capacity(d);
        let mut log_det = T::zero();
        for r in 0..d {
            let mut acc = x[r] / self.sd[r];
            for c in 0..r {
                acc = acc - self.chol[r * d + c] * w[c];
            }
            w[r] = acc / self.chol[r * d + r];
            quad.push(w[r].square());
            log_det += self.sd[r].ln() + self.chol[r * d + r].ln();
        }
        T::sum(&quad).scale(-0.5) - log_det - T::cst(0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Correlation matrix `L Lᵀ`, row-major.
    pub fn correlation(&self) -> Vec<T> {
        let d = self.dim();
        let mut out = vec![T::zero(); d * d];
        for r in 0..d {
            for c in 0..d {
                let mut acc = T::zero();
                for k in 0..=r.min(c) {
                    acc += self.chol[r * d + k] * self.chol[c * d + k];
                }
                out[r * d + c] = acc;
            }
        }
        out
    }

    /// Covariance matrix, row-major.
    pub fn covariance(&self) -> Vec<T> {
        let d = self.dim();
        let mut out = self.correlation();
        for r in 0..d {
            for c in 0..d {
                out[r * d + c] = out[r * d + c] * self.sd[r] * self.sd[c];
            }
        }
        out
    }

    fn innovations(&self) -> Vec<T> {
        let d = self.dim();
        let mut out = Vec::with_capacity(self.effects.len());
        for x in self.effects.chunks(d.max(1)) {
            let mut z = vec![T::zero(); d];
            for r in 0..d {
                let mut acc = x[r] / self.sd[r];
                for c in 0..r {
                    acc = acc - self.chol[r * d + c] * z[c];
                }
                z[r] = acc / self.chol[r * d + r];
            }
            out.extend(z);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frailty<T> {
    pub sd: T,
    pub delta: Vec<T>,
    pub raw: Vec<T>,
}

/// A point in parameter space on the constrained (internal, standardized)
/// scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector<T> {
    pub beta: Vec<T>,
    pub gamma: Vec<T>,
    pub alpha: Vec<T>,
    pub lambda: Vec<T>,
    pub sigma: T,
    /// Random-effect levels in layout order.
    pub blocks: Vec<ReBlock<T>>,
    pub frailty: Option<Frailty<T>>,
    /// Log-Jacobian of the map from the unconstrained vector.
    pub log_jacobian: T,
}

impl<T: Real> ParameterVector<T> {
    pub fn block(&self, level: Level) -> Option<&ReBlock<T>> {
        self.blocks.iter().find(|b| b.level == level)
    }

    pub fn block_mut(&mut self, level: Level) -> Option<&mut ReBlock<T>> {
        self.blocks.iter_mut().find(|b| b.level == level)
    }

    /// Flatten in the order of [`ParameterLayout::constrained_names`].
    pub fn constrained_flat(&self) -> Vec<f64> {
        let v = |x: &T| x.value();
        let mut out: Vec<f64> = Vec::new();
        out.extend(self.beta.iter().map(v));
        out.extend(self.gamma.iter().map(v));
        out.extend(self.alpha.iter().map(v));
        out.extend(self.lambda.iter().map(v));
        out.push(self.sigma.value());
        for b in &self.blocks {
            let d = b.dim();
            out.extend(b.sd.iter().map(v));
            let corr = b.correlation();
            out.extend(corr_index_pairs(d).map(|(r, c)| corr[r * d + c].value()));
            out.extend(b.effects.iter().map(v));
        }
        if let Some(f) = &self.frailty {
            out.push(f.sd.value());
            out.extend(f.delta.iter().map(v));
        }
        out
    }
}

impl ParameterVector<f64> {
    /// Copy into another scalar type. Effects are dropped unless requested,
    /// which keeps per-patient evaluations cheap.
    pub fn lift<T: Real>(&self, with_effects: bool) -> ParameterVector<T> {
        let l = |xs: &[f64]| xs.iter().map(|&x| T::cst(x)).collect::<Vec<T>>();
        ParameterVector {
            beta: l(&self.beta),
            gamma: l(&self.gamma),
            alpha: l(&self.alpha),
            lambda: l(&self.lambda),
            sigma: T::cst(self.sigma),
            blocks: self
                .blocks
                .iter()
                .map(|b| ReBlock {
                    level: b.level,
                    sd: l(&b.sd),
                    chol: l(&b.chol),
                    effects: if with_effects { l(&b.effects) } else { Vec::new() },
                    raw: if with_effects { b.raw.as_deref().map(l) } else { None },
                })
                .collect(),
            frailty: self.frailty.as_ref().map(|f| Frailty {
                sd: T::cst(f.sd),
                delta: l(&f.delta),
                raw: l(&f.raw),
            }),
            log_jacobian: T::cst(self.log_jacobian),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ParameterLayout {
        ParameterLayout::new(
            vec!["(Intercept)".into(), "time".into()],
            vec!["x".into()],
            vec!["value:max".into()],
            4,
            vec![
                (Level::Patient, vec!["(Intercept)".into()], vec!["A".into(), "B".into()], false),
                (
                    Level::Cluster,
                    vec!["(Intercept)".into(), "time".into(), "time2".into()],
                    vec!["A/1".into(), "A/2".into(), "B/3".into()],
                    false,
                ),
            ],
            None,
        )
    }

    #[test]
    fn dimensions_and_names() {
        let lay = layout();
        // 2 + 1 + 1 + 4 + 1 + (1 + 0 + 2) + (3 + 3 + 9)
        assert_eq!(lay.dim(), 27);
        assert_eq!(lay.unconstrained_names().len(), 27);
        assert_eq!(lay.constrained_names().len(), 27);
        assert_eq!(lay.constrained_names()[9], "sd_patient[(Intercept)]");
        assert!(lay.constrained_names().contains(&"corr_cluster[time2,time]".to_string()));
        assert!(lay.constrained_names().contains(&"u[B/3:time2]".to_string()));
    }

    #[test]
    fn correlation_factor_has_unit_rows() {
        let raw = [0.3, -1.2, 2.0, 0.1, -0.4, 0.9];
        let (l, _) = corr_cholesky(&raw, 4);
        for r in 0..4 {
            let n: f64 = (0..4).map(|c| l[r * 4 + c] * l[r * 4 + c]).sum();
            assert!((n - 1.0).abs() < 1e-14);
            for c in r + 1..4 {
                assert_eq!(l[r * 4 + c], 0.0);
            }
        }
        let back = corr_unconstrain(&l, 4).unwrap();
        for (a, b) in raw.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn round_trips() {
        let lay = layout();
        let theta: Vec<f64> = (0..lay.dim()).map(|k| ((k * 7 % 11) as f64 - 5.0) / 6.0).collect();
        let p = lay.constrain(&theta).unwrap();
        assert_eq!(lay.unconstrain(&p).unwrap().len(), theta.len());
        for (a, b) in theta.iter().zip(lay.unconstrain(&p).unwrap()) {
            assert!((a - b).abs() < 1e-10);
        }
        let q = lay.from_constrained(&p.constrained_flat()).unwrap();
        assert!((q.log_jacobian - p.log_jacobian).abs() < 1e-10);
        for (a, b) in q.blocks[1].chol.iter().zip(&p.blocks[1].chol) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noncentered_effects() {
        let lay = ParameterLayout::new(
            vec![],
            vec![],
            vec![],
            1,
            vec![(Level::Group, vec!["(Intercept)".into(), "t".into()], vec!["g1".into()], true)],
            Some(vec!["g1".into()]),
        );
        let theta = vec![0.0, 0.0, 2f64.ln(), 0.5f64.ln(), 0.0, 1.0, 1.0, 3f64.ln(), -1.0];
        let p = lay.constrain(&theta).unwrap();
        let c = &p.blocks[0];
        assert!((c.effects[0] - 2.0).abs() < 1e-14);
        assert!((c.effects[1] - 0.5).abs() < 1e-14);
        assert!((p.frailty.as_ref().unwrap().delta[0] + 3.0).abs() < 1e-14);
        let back = lay.unconstrain(&p).unwrap();
        for (a, b) in theta.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_density_matches_dense_formula() {
        let (chol, _) = corr_cholesky(&[0.4f64], 2);
        let b = ReBlock {
            level: Level::Cluster,
            sd: vec![2.0, 0.5],
            chol,
            effects: vec![],
            raw: None,
        };
        let cov = DMatrix::from_row_slice(2, 2, &b.covariance());
        let x = nalgebra::DVector::from_vec(vec![0.7, -0.3]);
        let inv = cov.clone().try_inverse().unwrap();
        let expect = -(2.0 * std::f64::consts::PI).ln() - 0.5 * cov.determinant().ln()
            - 0.5 * (x.transpose() * inv * &x)[(0, 0)];
        assert!((b.log_density(&[0.7, -0.3]) - expect).abs() < 1e-12);
    }
}
