//! Minimal model-formula grammar.
//!
//! ```text
//! value ~ grp2 * poly(time, 2) + (poly(time, 2) | cluster) + (1 | id)
//! ~ whostat2 + whostat3
//! ```
//!
//! Terms are joined by `+`. Factors inside a term are joined by `:`
//! (product only) or `*` (all main effects and interactions). Random-effect
//! blocks `(terms | level)` include an intercept unless they start with `0`.
//! `poly(time, d)` expands to `d` orthogonal polynomial columns and
//! `poly(time, d, raw = TRUE)` to raw powers; a bare time identifier is the
//! raw linear term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeFactor {
    Constant,
    /// `t^power`.
    Raw(u32),
    /// Column `k` of the orthogonal polynomial basis.
    Ortho(u32),
}

/// One design column: a product of covariates times at most one time factor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub label: String,
    pub covariates: Vec<String>,
    pub time: TimeFactor,
}

impl Column {
    pub fn intercept() -> Self {
        Column {
            label: "(Intercept)".into(),
            covariates: Vec::new(),
            time: TimeFactor::Constant,
        }
    }

    pub fn is_intercept(&self) -> bool {
        self.covariates.is_empty() && self.time == TimeFactor::Constant
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomTerm {
    pub level: String,
    pub columns: Vec<Column>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalFormula {
    pub response: Option<String>,
    pub fixed: Vec<Column>,
    pub random: Vec<RandomTerm>,
}

impl LongitudinalFormula {
    /// Highest orthogonal polynomial column referenced anywhere.
    pub fn ortho_degree(&self) -> u32 {
        self.fixed
            .iter()
            .chain(self.random.iter().flat_map(|r| &r.columns))
            .filter_map(|c| match c.time {
                TimeFactor::Ortho(k) => Some(k),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in self
            .fixed
            .iter()
            .chain(self.random.iter().flat_map(|r| &r.columns))
        {
            for v in &c.covariates {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFormula {
    pub columns: Vec<Column>,
}

/// A parsed factor before expansion.
#[derive(Debug, Clone)]
enum Factor {
    One,
    Zero,
    /// Alternative columns produced by one factor (a poly call yields several).
    Columns(Vec<(String, Vec<String>, TimeFactor)>),
}

fn split_top_level(s: &str, seps: &[char]) -> Result<Vec<(Option<char>, String)>> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    let mut last_sep = None;
    for ch in s.chars() {
        match ch {
            '(' => {
                depth += 1;
                cur.push(ch);
            }
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::Formula(format!("unbalanced `)` in `{s}`")));
                }
                cur.push(ch);
            }
            c if depth == 0 && seps.contains(&c) => {
                out.push((last_sep, cur.trim().to_string()));
                cur.clear();
                last_sep = Some(c);
            }
            c => cur.push(c),
        }
    }
    if depth != 0 {
        return Err(Error::Formula(format!("unbalanced `(` in `{s}`")));
    }
    out.push((last_sep, cur.trim().to_string()));
    Ok(out)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_factor(s: &str, time_names: &[&str]) -> Result<Factor> {
    let s = s.trim();
    if s == "1" {
        return Ok(Factor::One);
    }
    if s == "0" || s == "-1" {
        return Ok(Factor::Zero);
    }
    if let Some(rest) = s.strip_prefix("poly") {
        let rest = rest.trim();
        let inner = rest
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::Formula(format!("malformed call `{s}`")))?;
        let args: Vec<String> = inner.split(',').map(|a| a.trim().to_string()).collect();
        if args.len() < 2 || args.len() > 3 {
            return Err(Error::Formula(format!(
                "`{s}`: poly takes (time, degree) or (time, degree, raw = TRUE)"
            )));
        }
        if !time_names.contains(&args[0].as_str()) {
            return Err(Error::Formula(format!(
                "`{s}`: poly must be applied to the time variable ({})",
                time_names.join(" or ")
            )));
        }
        let degree: u32 = args[1]
            .parse()
            .ok()
            .filter(|d| *d >= 1)
            .ok_or_else(|| Error::Formula(format!("`{s}`: degree must be a positive integer")))?;
        let raw = match args.get(2) {
            None => false,
            Some(a) => {
                let compact: String = a.chars().filter(|c| !c.is_whitespace()).collect();
                match compact.to_ascii_lowercase().as_str() {
                    "raw=true" | "raw=t" | "raw" => true,
                    "raw=false" | "raw=f" => false,
                    _ => return Err(Error::Formula(format!("`{s}`: unrecognised argument `{a}`"))),
                }
            }
        };
        let name = if raw {
            format!("poly({},{},raw)", args[0], degree)
        } else {
            format!("poly({},{})", args[0], degree)
        };
        let cols = (1..=degree)
            .map(|k| {
                let tf = if raw { TimeFactor::Raw(k) } else { TimeFactor::Ortho(k) };
                (format!("{name}{k}"), Vec::new(), tf)
            })
            .collect();
        return Ok(Factor::Columns(cols));
    }
    if !is_identifier(s) {
        return Err(Error::Formula(format!("cannot parse term `{s}`")));
    }
    if time_names.contains(&s) {
        return Ok(Factor::Columns(vec![(s.to_string(), Vec::new(), TimeFactor::Raw(1))]));
    }
    Ok(Factor::Columns(vec![(
        s.to_string(),
        vec![s.to_string()],
        TimeFactor::Constant,
    )]))
}

fn multiply(
    a: &(String, Vec<String>, TimeFactor),
    b: &(String, Vec<String>, TimeFactor),
) -> Result<(String, Vec<String>, TimeFactor)> {
    let time = match (a.2, b.2) {
        (TimeFactor::Constant, t) | (t, TimeFactor::Constant) => t,
        _ => {
            return Err(Error::Unsupported(format!(
                "interaction of two time terms `{}:{}`",
                a.0, b.0
            )))
        }
    };
    let mut covs = a.1.clone();
    covs.extend(b.1.iter().cloned());
    Ok((format!("{}:{}", a.0, b.0), covs, time))
}

/// Columns of a product of factors joined by `:`.
fn interaction(factors: &[Vec<(String, Vec<String>, TimeFactor)>]) -> Result<Vec<(String, Vec<String>, TimeFactor)>> {
    let mut acc: Vec<(String, Vec<String>, TimeFactor)> = Vec::new();
    for (k, f) in factors.iter().enumerate() {
        if k == 0 {
            acc = f.clone();
            continue;
        }
        let mut next = Vec::new();
        for a in &acc {
            for b in f {
                next.push(multiply(a, b)?);
            }
        }
        acc = next;
    }
    Ok(acc)
}

/// Expand a `+`-separated list of terms. Returns (intercept flag, columns).
fn expand_terms(rhs: &str, time_names: &[&str], default_intercept: bool) -> Result<(bool, Vec<Column>)> {
    let mut intercept = default_intercept;
    let mut columns: Vec<Column> = Vec::new();
    if rhs.trim().is_empty() {
        return Ok((intercept, columns));
    }
    for (_, term) in split_top_level(rhs, &['+'])? {
        if term.is_empty() {
            return Err(Error::Formula(format!("empty term in `{rhs}`")));
        }
        // groups joined by `*`, each group a `:` product
        let mut groups: Vec<Vec<(String, Vec<String>, TimeFactor)>> = Vec::new();
        let mut only_constant = None;
        for (_, group) in split_top_level(&term, &['*'])? {
            let mut factors = Vec::new();
            for (_, f) in split_top_level(&group, &[':'])? {
                match parse_factor(&f, time_names)? {
                    Factor::One => only_constant = Some(true),
                    Factor::Zero => only_constant = Some(false),
                    Factor::Columns(c) => factors.push(c),
                }
            }
            if !factors.is_empty() {
                groups.push(interaction(&factors)?);
            }
        }
        if let Some(flag) = only_constant {
            if !groups.is_empty() {
                return Err(Error::Formula(format!("cannot combine `1`/`0` with other factors in `{term}`")));
            }
            intercept = flag;
            continue;
        }
        // every non-empty subset of groups, in order of subset size
        let n = groups.len();
        let mut subsets: Vec<Vec<usize>> = (1u32..(1 << n))
            .map(|mask| (0..n).filter(|k| mask & (1 << k) != 0).collect())
            .collect();
        subsets.sort_by_key(|s| s.len());
        for subset in subsets {
            let parts: Vec<_> = subset.iter().map(|&k| groups[k].clone()).collect();
            for (label, covs, time) in interaction(&parts)? {
                if columns.iter().any(|c| c.label == label) {
                    continue;
                }
                columns.push(Column {
                    label,
                    covariates: covs,
                    time,
                });
            }
        }
    }
    Ok((intercept, columns))
}

pub fn parse_longitudinal(formula: &str, time_names: &[&str]) -> Result<LongitudinalFormula> {
    let (lhs, rhs) = match formula.split_once('~') {
        Some((l, r)) => (l.trim(), r),
        None => ("", formula),
    };
    let response = if lhs.is_empty() {
        None
    } else if is_identifier(lhs) {
        Some(lhs.to_string())
    } else {
        return Err(Error::Formula(format!("response `{lhs}` must be a column name")));
    };

    let mut fixed_parts = Vec::new();
    let mut random = Vec::new();
    for (_, term) in split_top_level(rhs, &['+'])? {
        let is_random = term.starts_with('(')
            && term.ends_with(')')
            && split_top_level(&term[1..term.len() - 1], &['|'])?.len() == 2;
        if is_random {
            let inner = &term[1..term.len() - 1];
            let parts = split_top_level(inner, &['|'])?;
            let level = parts[1].1.trim().to_string();
            if !is_identifier(&level) {
                return Err(Error::Formula(format!("bad grouping level `{level}`")));
            }
            let (icpt, cols) = expand_terms(&parts[0].1, time_names, true)?;
            let mut columns = Vec::new();
            if icpt {
                columns.push(Column::intercept());
            }
            columns.extend(cols);
            if columns.is_empty() {
                return Err(Error::Formula(format!("random-effect block `{term}` has no columns")));
            }
            if random.iter().any(|r: &RandomTerm| r.level == level) {
                return Err(Error::Formula(format!("level `{level}` has two random-effect blocks")));
            }
            random.push(RandomTerm { level, columns });
        } else {
            fixed_parts.push(term);
        }
    }
    let (icpt, cols) = expand_terms(&fixed_parts.join(" + "), time_names, true)?;
    let mut fixed = Vec::new();
    if icpt {
        fixed.push(Column::intercept());
    }
    fixed.extend(cols);
    Ok(LongitudinalFormula {
        response,
        fixed,
        random,
    })
}

/// Event formula: `[Surv(...)] ~ covariates`. The event submodel has no
/// intercept and only baseline covariates.
pub fn parse_event(formula: &str) -> Result<EventFormula> {
    let rhs = match formula.split_once('~') {
        Some((_, r)) => r,
        None => formula,
    };
    let (_, columns) = expand_terms(rhs, &[], false)?;
    Ok(EventFormula { columns })
}
