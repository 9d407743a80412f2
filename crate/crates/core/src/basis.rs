//! Deterministic function bases: clamped B-splines for the log baseline
//! hazard and orthogonal polynomials for longitudinal time effects.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::diagnostics::quantile_sorted;
use crate::error::{Error, Result};

/// Clamped B-spline basis on `[0, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StoredBSpline")]
pub struct BSplineBasis {
    degree: usize,
    interior_knots: Vec<f64>,
    upper: f64,
    #[serde(skip)]
    knots: Vec<f64>,
}

/// Serialized form; the knot vector is rebuilt and checked on load.
#[derive(Deserialize)]
struct StoredBSpline {
    degree: usize,
    interior_knots: Vec<f64>,
    upper: f64,
}

impl TryFrom<StoredBSpline> for BSplineBasis {
    type Error = Error;

    fn try_from(s: StoredBSpline) -> Result<Self> {
        BSplineBasis::new(s.degree, s.interior_knots, s.upper)
    }
}

impl BSplineBasis {
    pub fn new(degree: usize, interior_knots: Vec<f64>, upper: f64) -> Result<Self> {
        if !(upper.is_finite() && upper > 0.0) {
            return Err(Error::Domain(format!(
                "spline upper boundary must be positive and finite, got {upper}"
            )));
        }
        let mut prev = 0.0;
        for &k in &interior_knots {
            if !(k > prev && k < upper) {
                return Err(Error::Domain(format!(
                    "interior knots must be strictly increasing inside (0, {upper}); got {interior_knots:?}"
                )));
            }
            prev = k;
        }
        let mut basis = BSplineBasis {
            degree,
            interior_knots,
            upper,
            knots: Vec::new(),
        };
        basis.rebuild_knots();
        Ok(basis)
    }

    /// Basis with `df` functions whose interior knots sit at empirical
    /// quantiles of the observed event times. Uncensored times are used when
    /// they give distinct knots, then all times, then an even grid.
    pub fn from_event_times(
        times: &[f64],
        observed: &[bool],
        df: usize,
        degree: usize,
        upper: f64,
    ) -> Result<Self> {
        if df < degree + 1 {
            return Err(Error::Spec(format!(
                "spline df ({df}) must be at least degree + 1 ({})",
                degree + 1
            )));
        }
        let n_interior = df - degree - 1;
        let uncensored: Vec<f64> = times
            .iter()
            .zip(observed)
            .filter(|(_, &d)| d)
            .map(|(&t, _)| t)
            .collect();
        let candidates = [uncensored, times.to_vec()];
        for sample in candidates.iter() {
            if let Some(knots) = quantile_knots(sample, n_interior, upper) {
                return Self::new(degree, knots, upper);
            }
        }
        let even = (1..=n_interior)
            .map(|k| upper * k as f64 / (n_interior + 1) as f64)
            .collect();
        Self::new(degree, even, upper)
    }

    fn rebuild_knots(&mut self) {
        let p = self.degree;
        let mut knots = vec![0.0; p + 1];
        knots.extend_from_slice(&self.interior_knots);
        knots.extend(std::iter::repeat_n(self.upper, p + 1));
        self.knots = knots;
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn df(&self) -> usize {
        self.interior_knots.len() + self.degree + 1
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    /// Full clamped knot vector.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn check(&self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t <= self.upper) {
            return Err(Error::Domain(format!(
                "time {t} outside spline domain [0, {}]",
                self.upper
            )));
        }
        Ok(())
    }

    fn span(&self, t: f64) -> usize {
        let n = self.df();
        if t >= self.upper {
            return n - 1;
        }
        // first knot index k in [p, n-1] with knots[k] <= t < knots[k+1]
        let p = self.degree;
        let upper_idx = self.knots[p + 1..n + 1].partition_point(|&k| k <= t);
        p + upper_idx
    }

    /// Values of all `df` basis functions at `t`.
    pub fn eval<F: Float>(&self, t: F) -> Result<Vec<F>> {
        let tf = t.to_f64().unwrap_or(f64::NAN);
        self.check(tf)?;
        let mut out = vec![F::zero(); self.df()];
        let (first, local) = self.nonzero(t);
        for (r, v) in local.into_iter().enumerate() {
            out[first + r] = v;
        }
        Ok(out)
    }

    /// Writes the basis row at `t` into `out` (length `df`).
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        self.check(t)?;
        out.iter_mut().for_each(|v| *v = 0.0);
        let (first, local) = self.nonzero(t);
        for (r, v) in local.into_iter().enumerate() {
            out[first + r] = v;
        }
        Ok(())
    }

    /// Index of the first nonzero function and the `degree + 1` local values.
    fn nonzero<F: Float>(&self, t: F) -> (usize, Vec<F>) {
        let p = self.degree;
        let k = self.span(t.to_f64().unwrap_or(0.0));
        let knot = |i: usize| F::from(self.knots[i]).unwrap();
        let mut values = vec![F::zero(); p + 1];
        let mut left = vec![F::zero(); p + 1];
        let mut right = vec![F::zero(); p + 1];
        values[0] = F::one();
        for j in 1..=p {
            left[j] = t - knot(k + 1 - j);
            right[j] = knot(k + j) - t;
            let mut saved = F::zero();
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        (k - p, values)
    }
}

/// Interior knots at evenly spaced quantiles (type-7 interpolation), or
/// `None` if they are not strictly increasing inside `(0, upper)`.
fn quantile_knots(sample: &[f64], n_interior: usize, upper: f64) -> Option<Vec<f64>> {
    if n_interior == 0 {
        return Some(Vec::new());
    }
    if sample.len() < 2 {
        return None;
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let knots: Vec<f64> = (1..=n_interior)
        .map(|k| quantile_sorted(&sorted, k as f64 / (n_interior + 1) as f64))
        .collect();
    let mut prev = 0.0;
    for &k in &knots {
        if !(k > prev && k < upper) {
            return None;
        }
        prev = k;
    }
    Some(knots)
}

/// Orthogonal polynomial basis fitted to a vector of times by the
/// three-term (Stieltjes) recurrence. Column 0 is the normalised constant,
/// column `k` the degree-`k` trend; all columns are orthonormal over the
/// construction times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoPolyBasis {
    degree: usize,
    /// Recurrence centres `a_k`, one per degree step.
    centers: Vec<f64>,
    /// Squared norms `n_k = Σ P_k(t)²`, k = 0..=degree.
    norms: Vec<f64>,
}

impl OrthoPolyBasis {
    pub fn fit(times: &[f64], degree: usize) -> Result<Self> {
        let mut distinct = times.to_vec();
        distinct.sort_by(|a, b| a.total_cmp(b));
        distinct.dedup();
        if distinct.len() < degree + 1 {
            return Err(Error::Rank(format!(
                "orthogonal polynomial of degree {degree} needs at least {} distinct times, got {}",
                degree + 1,
                distinct.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Domain("non-finite time in polynomial basis".into()));
        }
        let n = times.len();
        let mut prev = vec![0.0; n];
        let mut cur = vec![1.0; n];
        let mut centers = Vec::with_capacity(degree);
        let mut norms = Vec::with_capacity(degree + 1);
        norms.push(n as f64);
        for k in 0..degree {
            let nk = norms[k];
            let a = times
                .iter()
                .zip(&cur)
                .map(|(t, p)| t * p * p)
                .sum::<f64>()
                / nk;
            let b = if k == 0 { 0.0 } else { nk / norms[k - 1] };
            let next: Vec<f64> = (0..n)
                .map(|i| (times[i] - a) * cur[i] - b * prev[i])
                .collect();
            let nn = next.iter().map(|v| v * v).sum::<f64>();
            if !(nn > 0.0) {
                return Err(Error::Rank(format!(
                    "degenerate polynomial column of degree {}",
                    k + 1
                )));
            }
            centers.push(a);
            norms.push(nn);
            prev = cur;
            cur = next;
        }
        Ok(OrthoPolyBasis {
            degree,
            centers,
            norms,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Columns `0..=degree` at `t` (order 0) or their time derivatives
    /// (order 1).
    pub fn eval<F: Float>(&self, t: F, derivative_order: u32) -> Result<Vec<F>> {
        let (vals, ders) = self.eval_both(t);
        match derivative_order {
            0 => Ok(vals),
            1 => Ok(ders),
            d => Err(Error::Unsupported(format!(
                "derivative order {d} of polynomial basis"
            ))),
        }
    }

    /// Column values and first derivatives at `t`.
    pub fn eval_both<F: Float>(&self, t: F) -> (Vec<F>, Vec<F>) {
        let d = self.degree;
        let f = |x: f64| F::from(x).unwrap();
        let mut p = vec![F::zero(); d + 1];
        let mut dp = vec![F::zero(); d + 1];
        p[0] = F::one();
        for k in 0..d {
            let a = f(self.centers[k]);
            let (pm, dpm) = if k == 0 {
                (F::zero(), F::zero())
            } else {
                (p[k - 1], dp[k - 1])
            };
            let b = if k == 0 {
                F::zero()
            } else {
                f(self.norms[k] / self.norms[k - 1])
            };
            p[k + 1] = (t - a) * p[k] - b * pm;
            dp[k + 1] = p[k] + (t - a) * dp[k] - b * dpm;
        }
        for k in 0..=d {
            let s = f(self.norms[k].sqrt());
            p[k] = p[k] / s;
            dp[k] = dp[k] / s;
        }
        (p, dp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn left_boundary_is_first_function() {
        let b = BSplineBasis::new(3, vec![4.0, 8.0], 12.0).unwrap();
        assert_eq!(b.df(), 6);
        assert_eq!(b.eval(0.0).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.eval(12.0).unwrap(), vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn outside_domain_is_an_error() {
        let b = BSplineBasis::new(3, vec![4.0, 8.0], 12.0).unwrap();
        assert!(matches!(b.eval(12.5), Err(Error::Domain(_))));
        assert!(matches!(b.eval(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn bad_knots_rejected() {
        assert!(BSplineBasis::new(3, vec![0.0, 8.0], 12.0).is_err());
        assert!(BSplineBasis::new(3, vec![8.0, 4.0], 12.0).is_err());
        assert!(BSplineBasis::new(3, vec![4.0, 12.0], 12.0).is_err());
    }

    #[test]
    fn quantile_knots_from_events() {
        let times: Vec<f64> = (1..=30).map(|k| k as f64).collect();
        let obs = vec![true; 30];
        let b = BSplineBasis::from_event_times(&times, &obs, 6, 3, 30.0).unwrap();
        assert_eq!(b.interior_knots().len(), 2);
        assert!((b.interior_knots()[0] - 10.666666666666666).abs() < 1e-12);
        assert!((b.interior_knots()[1] - 20.333333333333332).abs() < 1e-12);
    }

    #[test]
    fn tied_event_times_fall_back() {
        let times = vec![5.0; 10];
        let obs = vec![true; 10];
        let b = BSplineBasis::from_event_times(&times, &obs, 6, 3, 10.0).unwrap();
        assert_eq!(b.interior_knots(), &[10.0 / 3.0, 20.0 / 3.0]);
    }

    #[test]
    fn f32_evaluation_agrees() {
        let b = BSplineBasis::new(3, vec![4.0, 8.0], 12.0).unwrap();
        let a64 = b.eval(5.3_f64).unwrap();
        let a32 = b.eval(5.3_f32).unwrap();
        for (x, y) in a64.iter().zip(&a32) {
            assert!((x - *y as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn orthopoly_three_points() {
        let b = OrthoPolyBasis::fit(&[0.0, 1.0, 2.0], 2).unwrap();
        let cols: Vec<Vec<f64>> = [0.0, 1.0, 2.0].iter().map(|&t| b.eval(t, 0).unwrap()).collect();
        for a in 0..3 {
            for c in 0..3 {
                let dot: f64 = cols.iter().map(|r| r[a] * r[c]).sum();
                let target = if a == c { 1.0 } else { 0.0 };
                assert!((dot - target).abs() < 1e-12, "({a},{c}) = {dot}");
            }
        }
    }

    #[test]
    fn orthopoly_rank_error() {
        assert!(matches!(OrthoPolyBasis::fit(&[2.0, 2.0, 2.0], 2), Err(Error::Rank(_))));
        assert!(matches!(OrthoPolyBasis::fit(&[1.0, 2.0], 2), Err(Error::Rank(_))));
    }

    #[test]
    fn orthopoly_derivative_rules() {
        let b = OrthoPolyBasis::fit(&[0.0, 1.0, 2.0, 3.5], 2).unwrap();
        let d = b.eval(1.7, 1).unwrap();
        assert_eq!(d[0], 0.0);
        assert!(matches!(b.eval(1.7, 2), Err(Error::Unsupported(_))));
        // linear column has constant derivative
        let d2 = b.eval(9.0, 1).unwrap();
        assert!((d[1] - d2[1]).abs() < 1e-14);
    }

    #[test]
    fn bspline_survives_serialization() {
        let b = BSplineBasis::new(3, vec![2.0, 4.5], 9.0).unwrap();
        let back: BSplineBasis = serde_json::from_str(&serde_json::to_string(&b).unwrap()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.eval(3.3).unwrap(), b.eval(3.3).unwrap());
        let bad = r#"{"degree":3,"interior_knots":[12.0],"upper":9.0}"#;
        assert!(serde_json::from_str::<BSplineBasis>(bad).is_err());
    }
}
