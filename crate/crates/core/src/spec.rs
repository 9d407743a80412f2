//! Declarative model description, as read from the JSON fit configuration.

use serde::{Deserialize, Serialize};

use crate::dataset::{EventColumns, HierarchyMode, LongitudinalColumns, WindowPolicy};
use crate::error::{Error, Result};
use crate::formula::{self, EventFormula, LongitudinalFormula, TimeFactor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Identity,
    Log,
}

impl Link {
    pub fn inverse<T: crate::Real>(self, eta: T) -> T {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Functional {
    /// Expected marker value μ(t).
    Value,
    /// Rate of change dμ(t)/dt.
    Slope,
    /// Area under the trajectory ∫₀ᵗ μ(u) du.
    Auc,
}

impl Functional {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "value" | "etavalue" => Ok(Self::Value),
            "slope" | "etaslope" => Ok(Self::Slope),
            "auc" | "etaauc" => Ok(Self::Auc),
            other => Err(Error::Spec(format!("unknown association functional `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Value => "value",
            Self::Slope => "slope",
            Self::Auc => "auc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Summary {
    Sum,
    #[serde(alias = "mean")]
    Average,
    Max,
    Min,
}

impl Summary {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sum" => Ok(Self::Sum),
            "average" | "mean" => Ok(Self::Average),
            "max" => Ok(Self::Max),
            "min" => Ok(Self::Min),
            other => Err(Error::Spec(format!("unknown cluster summary `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::Average => "average",
            Self::Max => "max",
            Self::Min => "min",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssociationTerm {
    pub functional: Functional,
    #[serde(default)]
    pub summary: Option<Summary>,
}

impl AssociationTerm {
    pub fn label(&self) -> String {
        match self.summary {
            Some(s) => format!("{}:{}", self.functional.as_str(), s.as_str()),
            None => self.functional.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    #[serde(default = "default_df")]
    pub df: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
}

fn default_df() -> usize {
    6
}

fn default_degree() -> usize {
    3
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self { df: 6, degree: 3 }
    }
}

/// Prior scales, on the standardized scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    /// Normal(0, s²) on fixed effects, event coefficients and association parameters.
    pub coefficient_scale: f64,
    /// Cauchy(0, s) on baseline-hazard spline coefficients.
    pub spline_scale: f64,
    /// Half-Cauchy(0, s) on the residual SD and every random-effect SD.
    pub scale_scale: f64,
    /// LKJ shape on correlation Cholesky factors.
    pub lkj_shape: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            coefficient_scale: 2.5,
            spline_scale: 5.0,
            scale_scale: 5.0,
            lkj_shape: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnSpec {
    pub longitudinal: LongitudinalColumns,
    pub event: EventColumns,
}

fn default_mode() -> HierarchyMode {
    HierarchyMode::ClusterBelowPatient
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "default_mode")]
    pub mode: HierarchyMode,
    #[serde(default)]
    pub family: Family,
    #[serde(default)]
    pub link: Link,
    /// Longitudinal formula, e.g. `value ~ poly(time, 2) + (poly(time, 2) | cluster) + (1 | id)`.
    pub longitudinal: String,
    /// Event formula, e.g. `~ whostat2 + whostat3`.
    #[serde(default)]
    pub event: String,
    #[serde(default)]
    pub association: Vec<AssociationTerm>,
    #[serde(default)]
    pub frailty: bool,
    #[serde(default)]
    pub shared_re_association: bool,
    #[serde(default)]
    pub baseline: BaselineSpec,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub columns: ColumnSpec,
    #[serde(default)]
    pub window_policy: WindowPolicy,
}

/// Which random-effect block a formula level refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Patient,
    Cluster,
    Group,
}

impl Level {
    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Patient => "patient",
            Level::Cluster => "cluster",
            Level::Group => "group",
        }
    }
}

/// Formulas parsed and levels resolved against the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSpec {
    pub longitudinal: LongitudinalFormula,
    pub event: EventFormula,
    pub levels: Vec<(Level, usize)>,
}

impl ParsedSpec {
    pub fn block(&self, level: Level) -> Option<&formula::RandomTerm> {
        self.levels
            .iter()
            .find(|(l, _)| *l == level)
            .map(|(_, k)| &self.longitudinal.random[*k])
    }
}

impl ModelSpec {
    pub fn new(mode: HierarchyMode, longitudinal: &str, event: &str) -> Self {
        Self {
            mode,
            family: Family::Normal,
            link: Link::Identity,
            longitudinal: longitudinal.into(),
            event: event.into(),
            association: Vec::new(),
            frailty: false,
            shared_re_association: false,
            baseline: BaselineSpec::default(),
            priors: PriorSpec::default(),
            standardize: true,
            columns: ColumnSpec::default(),
            window_policy: WindowPolicy::Reject,
        }
    }

    pub fn with_association(mut self, terms: &[(Functional, Option<Summary>)]) -> Self {
        self.association = terms
            .iter()
            .map(|&(functional, summary)| AssociationTerm { functional, summary })
            .collect();
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn time_names(&self) -> Vec<&str> {
        let mut names = vec!["time"];
        let col = self.columns.longitudinal.time.as_str();
        if col != "time" {
            names.push(col);
        }
        names
    }

    fn resolve_level(&self, name: &str) -> Result<Level> {
        let lc = &self.columns.longitudinal;
        let ec = &self.columns.event;
        let level = if name == "patient" || name == lc.id || name == ec.id {
            Level::Patient
        } else if name == "cluster" || name == lc.cluster {
            Level::Cluster
        } else if name == "group" || name == ec.group {
            Level::Group
        } else {
            return Err(Error::Spec(format!("unknown random-effect level `{name}`")));
        };
        let allowed = match self.mode {
            HierarchyMode::ClusterBelowPatient => matches!(level, Level::Patient | Level::Cluster),
            HierarchyMode::PatientOnly => level == Level::Patient,
            HierarchyMode::ClusterAbovePatient => matches!(level, Level::Patient | Level::Group),
        };
        if !allowed {
            return Err(Error::Spec(format!(
                "random-effect level `{name}` is not available in `{}` mode",
                self.mode.as_str()
            )));
        }
        Ok(level)
    }

    /// Parse formulas and check internal consistency.
    pub fn parse(&self) -> Result<ParsedSpec> {
        let longitudinal = formula::parse_longitudinal(&self.longitudinal, &self.time_names())?;
        let event = formula::parse_event(&self.event)?;
        if event.columns.iter().any(|c| c.time != TimeFactor::Constant) {
            return Err(Error::Unsupported("time-varying terms in the event formula".into()));
        }
        let mut levels = Vec::new();
        for (k, r) in longitudinal.random.iter().enumerate() {
            let level = self.resolve_level(&r.level)?;
            if levels.iter().any(|(l, _)| *l == level) {
                return Err(Error::Spec(format!("two random-effect blocks at level `{}`", level.as_str())));
            }
            levels.push((level, k));
        }
        levels.sort_by_key(|(l, _)| match l {
            Level::Patient => 0,
            Level::Cluster => 1,
            Level::Group => 2,
        });
        let parsed = ParsedSpec {
            longitudinal,
            event,
            levels,
        };
        self.validate(&parsed)?;
        Ok(parsed)
    }

    fn validate(&self, parsed: &ParsedSpec) -> Result<()> {
        let above = self.mode == HierarchyMode::ClusterAbovePatient;
        for term in &self.association {
            match (self.mode, term.summary) {
                (HierarchyMode::ClusterAbovePatient, Some(_)) => {
                    return Err(Error::Spec(
                        "cluster summaries are not allowed when clustering is above the patient".into(),
                    ))
                }
                (HierarchyMode::ClusterBelowPatient, None) => {
                    return Err(Error::Spec(format!(
                        "association `{}` needs a cluster summary (sum, average, max or min)",
                        term.functional.as_str()
                    )))
                }
                _ => {}
            }
        }
        if (self.frailty || self.shared_re_association) && !above {
            return Err(Error::Spec(
                "frailty and shared random-effect association require cluster-above-patient mode".into(),
            ));
        }
        if self.shared_re_association {
            if !self.association.is_empty() {
                return Err(Error::Spec(
                    "shared random-effect association replaces the trajectory association; leave `association` empty"
                        .into(),
                ));
            }
            let group = parsed
                .block(Level::Group)
                .ok_or_else(|| Error::Spec("shared random-effect association needs a group-level random effect".into()))?;
            if !group.columns.first().is_some_and(|c| c.is_intercept()) {
                return Err(Error::Spec(
                    "shared random-effect association needs a group-level random intercept".into(),
                ));
            }
        }
        if self.baseline.df < self.baseline.degree + 1 {
            return Err(Error::Spec(format!(
                "baseline df {} is smaller than degree + 1",
                self.baseline.df
            )));
        }
        let p = &self.priors;
        if !(p.coefficient_scale > 0.0 && p.spline_scale > 0.0 && p.scale_scale > 0.0 && p.lkj_shape > 0.0) {
            return Err(Error::Spec("prior scales must be positive".into()));
        }
        Ok(())
    }

    /// Number of association parameters.
    pub fn n_alpha(&self) -> usize {
        self.association.len() + usize::from(self.shared_re_association)
    }

    pub fn needs_slope(&self) -> bool {
        self.association.iter().any(|a| a.functional == Functional::Slope)
    }

    pub fn needs_auc(&self) -> bool {
        self.association.iter().any(|a| a.functional == Functional::Auc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LONG: &str = "value ~ poly(time, 2) + (poly(time, 2) | cluster) + (1 | id)";

    #[test]
    fn parses_application_spec() {
        let spec = ModelSpec::new(HierarchyMode::ClusterBelowPatient, LONG, "~ pf")
            .with_association(&[(Functional::Value, Some(Summary::Max)), (Functional::Slope, Some(Summary::Max))]);
        let parsed = spec.parse().unwrap();
        assert_eq!(parsed.levels[0].0, Level::Patient);
        assert_eq!(parsed.levels[1].0, Level::Cluster);
        assert_eq!(parsed.block(Level::Cluster).unwrap().columns.len(), 3);
        assert_eq!(spec.n_alpha(), 2);
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let text = r#"{"longitudinal": "value ~ time + (1 | id)", "mode": "none",
                       "association": [{"functional": "value"}]}"#;
        let spec = ModelSpec::from_json(text).unwrap();
        assert_eq!(spec.baseline.df, 6);
        assert_eq!(spec.priors.coefficient_scale, 2.5);
        assert!(spec.standardize);
        let back = ModelSpec::from_json(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn mode_rules() {
        let s = ModelSpec::new(HierarchyMode::ClusterAbovePatient, "value ~ time + (1 | id) + (1 | group)", "")
            .with_association(&[(Functional::Value, Some(Summary::Max))]);
        assert!(matches!(s.parse(), Err(Error::Spec(_))));

        let s = ModelSpec::new(HierarchyMode::ClusterBelowPatient, LONG, "")
            .with_association(&[(Functional::Value, None)]);
        assert!(s.parse().is_err());

        let mut s = ModelSpec::new(HierarchyMode::ClusterBelowPatient, LONG, "");
        s.frailty = true;
        assert!(s.parse().is_err());

        let s = ModelSpec::new(HierarchyMode::PatientOnly, LONG, "");
        assert!(s.parse().is_err(), "cluster level not available without clusters");
    }

    #[test]
    fn shared_re_rules() {
        let mut s = ModelSpec::new(HierarchyMode::ClusterAbovePatient, "value ~ time + (1 | id) + (1 | group)", "");
        s.shared_re_association = true;
        assert!(s.parse().is_ok());
        assert_eq!(s.n_alpha(), 1);
        s.association = vec![AssociationTerm {
            functional: Functional::Value,
            summary: None,
        }];
        assert!(s.parse().is_err());
        let mut s = ModelSpec::new(HierarchyMode::ClusterAbovePatient, "value ~ time + (1 | id)", "");
        s.shared_re_association = true;
        assert!(s.parse().is_err());
    }
}
