//! Design-matrix columns and the internal standardization of predictors and
//! outcome.

use serde::{Deserialize, Serialize};

use crate::basis::OrthoPolyBasis;
use crate::error::{Error, Result};
use crate::formula::{Column, TimeFactor};
use crate::spec::Level;

/// Per-column affine map `(raw - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ColumnScaling {
    pub fn identity(n: usize) -> Self {
        ColumnScaling {
            center: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }
}

/// Constants linking the internal (standardized) scale to data units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub outcome_center: f64,
    pub outcome_scale: f64,
    /// SD of the pooled observation times.
    pub time_scale: f64,
    pub mean_clusters: f64,
    pub fixed: ColumnScaling,
    pub random: Vec<(Level, ColumnScaling)>,
    pub event: ColumnScaling,
    /// `(center, scale)` of each association functional, in alpha order.
    pub association: Vec<(f64, f64)>,
}

impl Standardization {
    pub fn random(&self, level: Level) -> Option<&ColumnScaling> {
        self.random.iter().find(|(l, _)| *l == level).map(|(_, s)| s)
    }
}

/// Sample mean and SD, computed on sorted values so the result does not
/// depend on input order. A zero or undefined SD is reported as 1.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 1.0);
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(|a, b| a.total_cmp(b));
    let var = if v.len() > 1 { dev.iter().sum::<f64>() / (n - 1.0) } else { 0.0 };
    let sd = var.sqrt();
    (mean, if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 })
}

#[derive(Debug, Clone)]
struct DesignColumn {
    covariates: Vec<usize>,
    time: TimeFactor,
    center: f64,
    scale: f64,
}

/// Columns of one design block compiled against a covariate list.
#[derive(Debug, Clone)]
pub(crate) struct DesignBlock {
    columns: Vec<DesignColumn>,
}

impl DesignBlock {
    pub fn compile(columns: &[Column], covariate_names: &[String]) -> Result<Self> {
        let columns = columns
            .iter()
            .map(|c| {
                let covariates = c
                    .covariates
                    .iter()
                    .map(|name| {
                        covariate_names.iter().position(|n| n == name).ok_or_else(|| {
                            Error::Formula(format!("covariate `{name}` is not a data column"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DesignColumn {
                    covariates,
                    time: c.time,
                    center: 0.0,
                    scale: 1.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DesignBlock { columns })
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn covariate_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.columns.iter().flat_map(|c| c.covariates.iter().copied())
    }

    pub fn set_scaling(&mut self, scaling: &ColumnScaling) {
        for (k, c) in self.columns.iter_mut().enumerate() {
            c.center = scaling.center[k];
            c.scale = scaling.scale[k];
        }
    }

    /// Unstandardized value of column `k`.
    pub fn raw(&self, k: usize, covariates: &[f64], t: f64, ortho: Option<&[f64]>) -> f64 {
        let c = &self.columns[k];
        let base: f64 = c.covariates.iter().map(|&i| covariates[i]).product();
        base * match c.time {
            TimeFactor::Constant => 1.0,
            TimeFactor::Raw(p) => t.powi(p as i32),
            TimeFactor::Ortho(j) => ortho.map_or(f64::NAN, |o| o[j as usize]),
        }
    }

    /// Standardized column values and, optionally, their time derivatives.
    pub fn fill(
        &self,
        covariates: &[f64],
        t: f64,
        ortho: Option<&(Vec<f64>, Vec<f64>)>,
        val: &mut [f64],
        der: Option<&mut [f64]>,
    ) {
        for (k, c) in self.columns.iter().enumerate() {
            let base: f64 = c.covariates.iter().map(|&i| covariates[i]).product();
            let tv = match c.time {
                TimeFactor::Constant => 1.0,
                TimeFactor::Raw(p) => t.powi(p as i32),
                TimeFactor::Ortho(j) => ortho.map_or(f64::NAN, |o| o.0[j as usize]),
            };
            val[k] = (base * tv - c.center) / c.scale;
        }
        if let Some(der) = der {
            for (k, c) in self.columns.iter().enumerate() {
                let base: f64 = c.covariates.iter().map(|&i| covariates[i]).product();
                let dt = match c.time {
                    TimeFactor::Constant => 0.0,
                    TimeFactor::Raw(0) => 0.0,
                    TimeFactor::Raw(p) => p as f64 * t.powi(p as i32 - 1),
                    TimeFactor::Ortho(j) => ortho.map_or(f64::NAN, |o| o.1[j as usize]),
                };
                der[k] = base * dt / c.scale;
            }
        }
    }
}

/// Orthogonal polynomial values and derivatives at `t`, if a basis is in use.
pub(crate) fn ortho_at(basis: Option<&OrthoPolyBasis>, t: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    basis.map(|b| b.eval_both(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd_is_order_free() {
        let a = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.6];
        let mut b = a;
        b.reverse();
        assert_eq!(mean_sd(&a), mean_sd(&b));
        assert_eq!(mean_sd(&[2.0, 2.0]).1, 1.0);
    }

    #[test]
    fn raw_powers_and_derivatives() {
        let cols = vec![
            Column::intercept(),
            Column {
                label: "x:time".into(),
                covariates: vec!["x".into()],
                time: TimeFactor::Raw(2),
            },
        ];
        let mut blk = DesignBlock::compile(&cols, &["x".to_string()]).unwrap();
        blk.set_scaling(&ColumnScaling {
            center: vec![0.0, 1.0],
            scale: vec![1.0, 2.0],
        });
        let mut v = [0.0; 2];
        let mut d = [0.0; 2];
        blk.fill(&[3.0], 2.0, None, &mut v, Some(&mut d));
        assert_eq!(v, [1.0, (12.0 - 1.0) / 2.0]);
        assert_eq!(d, [0.0, 3.0 * 4.0 / 2.0]);
        assert!(DesignBlock::compile(&cols, &[]).is_err());
    }
}
