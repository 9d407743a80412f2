//! Gradient targets and the No-U-Turn sampler.
//!
//! The sampler follows the multinomial variant with the generalized
//! no-U-turn criterion checked across merged subtrees, dual-averaging step
//! size adaptation and a windowed diagonal metric.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::JointModel;
use crate::scalar::{log_sum_exp, Real};

/// A log density with its gradient on an unconstrained space.
pub trait GradientTarget: Sync {
    fn dim(&self) -> usize;

    /// Write the gradient into `grad` and return the log density.
    fn log_density_gradient(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Column names of stored draws.
    fn names(&self) -> Vec<String> {
        (0..self.dim()).map(|k| format!("theta[{k}]")).collect()
    }

    /// The stored representation of one unconstrained point.
    fn constrain(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(theta.to_vec())
    }
}

/// A target built from a closure returning `(log density, gradient)`.
pub struct FnTarget<F> {
    dim: usize,
    f: F,
}

impl<F> FnTarget<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnTarget { dim, f }
    }
}

impl<F> GradientTarget for FnTarget<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_gradient(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        let (v, g) = (self.f)(theta);
        grad.copy_from_slice(&g);
        Ok(v)
    }
}

thread_local! {
    static TAPE: Tape = Tape::new();
}

impl JointModel {
    /// Log posterior and its gradient at an unconstrained point.
    pub fn grad_log_posterior(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; theta.len()];
        let v = self.log_density_gradient(theta, &mut grad)?;
        Ok((v, grad))
    }
}

impl GradientTarget for JointModel {
    fn dim(&self) -> usize {
        JointModel::dim(self)
    }

    fn log_density_gradient(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        TAPE.with(|tape| {
            tape.clear();
            let inputs = tape.inputs(theta);
            let lp = self.log_density(&inputs)?;
            lp.check_finite()?;
            let g = tape.gradient(lp.total, &inputs);
            if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    component: format!("gradient[{}]", self.layout().unconstrained_names()[k]),
                    value: g[k],
                });
            }
            grad.copy_from_slice(&g);
            Ok(lp.total.value())
        })
    }

    fn names(&self) -> Vec<String> {
        self.layout().constrained_names()
    }

    fn constrain(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.layout().constrain(theta)?.constrained_flat())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_depth: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            chains: 4,
            warmup: 1000,
            samples: 1000,
            seed: 1,
            target_accept: 0.8,
            max_depth: 10,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.samples == 0 || self.max_depth == 0 {
            return Err(Error::Spec("chains, samples and max tree depth must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Spec(format!(
                "target acceptance must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        Ok(())
    }
}

/// Retained draws of all chains, chain-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    /// `rows × names.len()` values, row-major.
    pub values: Vec<f64>,
    pub chain: Vec<usize>,
    pub log_posterior: Vec<f64>,
    pub divergent: Vec<bool>,
    pub tree_depth: Vec<usize>,
    pub step_size: Vec<f64>,
    pub n_leapfrog: Vec<usize>,
    pub accept_stat: Vec<f64>,
    pub warmup_seconds: Vec<f64>,
    pub sampling_seconds: Vec<f64>,
}

impl PosteriorDraws {
    fn empty(names: Vec<String>) -> Self {
        PosteriorDraws {
            names,
            values: Vec::new(),
            chain: Vec::new(),
            log_posterior: Vec::new(),
            divergent: Vec::new(),
            tree_depth: Vec::new(),
            step_size: Vec::new(),
            n_leapfrog: Vec::new(),
            accept_stat: Vec::new(),
            warmup_seconds: Vec::new(),
            sampling_seconds: Vec::new(),
        }
    }

    /// Draws assembled from plain rows, all labelled chain 0 and without
    /// sampler statistics.
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let mut out = PosteriorDraws::empty(names);
        for row in rows {
            if row.len() != out.names.len() {
                return Err(Error::Index(format!(
                    "draw has {} values for {} parameters",
                    row.len(),
                    out.names.len()
                )));
            }
            out.values.extend_from_slice(row);
            out.chain.push(0);
            out.log_posterior.push(f64::NAN);
        }
        Ok(out)
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_draws(&self) -> usize {
        self.chain.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chain.iter().max().map_or(0, |c| c + 1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.n_params();
        &self.values[r * n..(r + 1) * n]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|r| self.row(r)[k]).collect()
    }

    /// Draws of parameter `k` split by chain.
    pub fn chains_of(&self, k: usize) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.n_chains()];
        for r in 0..self.n_draws() {
            out[self.chain[r]].push(self.row(r)[k]);
        }
        out
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn divergences(&self) -> usize {
        self.divergent.iter().filter(|&&d| d).count()
    }

    /// Draws as CSV: `chain, draw, lp__, …parameters`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["chain".to_string(), "draw".to_string(), "lp__".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        let mut within = vec![0usize; self.n_chains()];
        for r in 0..self.n_draws() {
            let c = self.chain[r];
            within[c] += 1;
            let mut rec = vec![(c + 1).to_string(), within[c].to_string(), fmt(self.log_posterior[r])];
            rec.extend(self.row(r).iter().map(|&v| fmt(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read draws written by [`PosteriorDraws::write_csv`]. Sampler
    /// statistics are not stored in the CSV and come back empty.
    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "chain" || &header[2] != "lp__" {
            return Err(Error::Schema("chain, draw, lp__".into()));
        }
        let names: Vec<String> = header.iter().skip(3).map(String::from).collect();
        let mut out = PosteriorDraws::empty(names);
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .parse::<f64>()
                    .map_err(|_| Error::Parse {
                        row: line + 2,
                        column: header[k].to_string(),
                        message: format!("`{}` is not a number", &rec[k]),
                    })
            };
            let chain = num(0)? as usize;
            if chain == 0 {
                return Err(Error::Parse {
                    row: line + 2,
                    column: "chain".into(),
                    message: "chains are numbered from 1".into(),
                });
            }
            out.chain.push(chain - 1);
            out.log_posterior.push(num(2)?);
            for k in 3..rec.len() {
                out.values.push(num(k)?);
            }
        }
        if out.chain.is_empty() {
            return Err(Error::EmptyInput("draws file has no rows".into()));
        }
        Ok(out)
    }
}

/// Shortest representation that reads back to the same `f64`.
pub(crate) fn fmt(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    lp: f64,
}

struct Sampler<'a, G: GradientTarget> {
    target: &'a G,
    inv_metric: Vec<f64>,
    step: f64,
    max_depth: usize,
    rng: ChaCha8Rng,
    n_leapfrog: usize,
    divergent: bool,
    sum_metro: f64,
}

struct Transition {
    point: Point,
    depth: usize,
    accept_stat: f64,
}

const MAX_DELTA_H: f64 = 1000.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<G: GradientTarget> Sampler<'_, G> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(x, m)| x * x * m).sum::<f64>()
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        -z.lp + self.kinetic(&z.p)
    }

    fn sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(x, m)| x * m).collect()
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) -> bool {
        for k in 0..z.q.len() {
            z.p[k] += 0.5 * eps * z.grad[k];
            z.q[k] += eps * self.inv_metric[k] * z.p[k];
        }
        match self.target.log_density_gradient(&z.q, &mut z.grad) {
            Ok(lp) if lp.is_finite() => {
                z.lp = lp;
                for k in 0..z.q.len() {
                    z.p[k] += 0.5 * eps * z.grad[k];
                }
                true
            }
            _ => {
                z.lp = f64::NEG_INFINITY;
                false
            }
        }
    }

    fn draw_momentum(&mut self, z: &mut Point) {
        for k in 0..z.p.len() {
            let n: f64 = StandardNormal.sample(&mut self.rng);
            z.p[k] = n / self.inv_metric[k].sqrt();
        }
    }

    fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Heuristic step-size search: double or halve until the one-step
    /// acceptance crosses 0.8.
    fn init_step_size(&mut self, z0: &Point) {
        let mut z = z0.clone();
        self.draw_momentum(&mut z);
        let h0 = self.hamiltonian(&z);
        let start = z.clone();
        let mut direction = 0.0;
        for _ in 0..100 {
            let mut trial = start.clone();
            let ok = self.leapfrog(&mut trial, self.step);
            let h = if ok { self.hamiltonian(&trial) } else { f64::INFINITY };
            let delta = h0 - h;
            let d = if delta > 0.8f64.ln() { 1.0 } else { -1.0 };
            if direction == 0.0 {
                direction = d;
            }
            if d != direction {
                break;
            }
            self.step *= 2f64.powf(direction);
            if self.step > 1e7 || self.step < 1e-12 {
                break;
            }
        }
        self.step = self.step.clamp(1e-12, 1e7);
    }

    fn transition(&mut self, z0: &Point) -> Transition {
        let mut z = z0.clone();
        self.draw_momentum(&mut z);
        let h0 = self.hamiltonian(&z);
        let n = z.q.len();
        self.n_leapfrog = 0;
        self.divergent = false;
        self.sum_metro = 0.0;

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let mut p_fwd_fwd = z.p.clone();
        let mut p_sharp_fwd_fwd = self.sharp(&z.p);
        let mut p_fwd_bck = z.p.clone();
        let mut p_sharp_fwd_bck = p_sharp_fwd_fwd.clone();
        let mut p_bck_fwd = z.p.clone();
        let mut p_sharp_bck_fwd = p_sharp_fwd_fwd.clone();
        let mut p_bck_bck = z.p.clone();
        let mut p_sharp_bck_bck = p_sharp_fwd_fwd.clone();

        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let mut depth = 0;

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; n];
            let mut rho_bck = vec![0.0; n];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid;
            if self.uniform() > 0.5 {
                rho_bck.copy_from_slice(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                let mut cur = z_fwd.clone();
                valid = self.build_tree(
                    depth,
                    &mut cur,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut lsw_subtree,
                );
                z_fwd = cur;
            } else {
                rho_fwd.copy_from_slice(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                let mut cur = z_bck.clone();
                valid = self.build_tree(
                    depth,
                    &mut cur,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut lsw_subtree,
                );
                z_bck = cur;
            }
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else {
                let accept = (lsw_subtree - log_sum_weight).exp();
                if self.uniform() < accept {
                    z_sample.clone_from(&z_propose);
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
            for k in 0..n {
                rho[k] = rho_bck[k] + rho_fwd[k];
            }
            let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let ext: Vec<f64> = (0..n).map(|k| rho_bck[k] + p_fwd_bck[k]).collect();
            persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &ext);
            let ext: Vec<f64> = (0..n).map(|k| rho_fwd[k] + p_bck_fwd[k]).collect();
            persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &ext);
            if !persist {
                break;
            }
        }
        let accept_stat = if self.n_leapfrog > 0 {
            self.sum_metro / self.n_leapfrog as f64
        } else {
            0.0
        };
        Transition {
            point: z_sample,
            depth,
            accept_stat,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        log_sum_weight: &mut f64,
    ) -> bool {
        let n = z.q.len();
        if depth == 0 {
            let ok = self.leapfrog(z, sign * self.step);
            self.n_leapfrog += 1;
            let mut h = if ok { self.hamiltonian(z) } else { f64::INFINITY };
            if h.is_nan() {
                h = f64::INFINITY;
            }
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            self.sum_metro += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            for k in 0..n {
                rho[k] += z.p[k];
            }
            p_beg.clone_from(&z.p);
            p_end.clone_from(p_beg);
            return !self.divergent;
        }

        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; n];
        let mut p_sharp_init_end = vec![0.0; n];
        let mut rho_init = vec![0.0; n];
        let valid_init = self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            &mut lsw_init,
        );
        if !valid_init {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; n];
        let mut p_sharp_final_beg = vec![0.0; n];
        let mut rho_final = vec![0.0; n];
        let valid_final = self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            &mut lsw_final,
        );
        if !valid_final {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.uniform() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree: Vec<f64> = (0..n).map(|k| rho_init[k] + rho_final[k]).collect();
        for k in 0..n {
            rho[k] += rho_subtree[k];
        }
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let ext: Vec<f64> = (0..n).map(|k| rho_init[k] + p_final_beg[k]).collect();
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &ext);
        let ext: Vec<f64> = (0..n).map(|k| rho_final[k] + p_init_end[k]).collect();
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &ext);
        persist
    }
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// Dual-averaging step-size adaptation.
struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(step: f64, delta: f64) -> Self {
        DualAveraging {
            mu: (10.0 * step).ln(),
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
            delta,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup windows for the diagonal metric: a fast initial buffer, slow
/// windows doubling in length, and a fast terminal buffer.
struct Windows {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    next_end: usize,
    window: usize,
}

impl Windows {
    fn new(warmup: usize) -> Option<Self> {
        if warmup < 20 {
            return None;
        }
        let (mut init, mut term, mut base) = (75, 50, 25);
        if init + term + base > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - init - term;
        }
        let mut w = Windows {
            warmup,
            init_buffer: init,
            term_buffer: term,
            next_end: init + base,
            window: base,
        };
        w.stretch();
        Some(w)
    }

    fn stretch(&mut self) {
        let limit = self.warmup - self.term_buffer;
        if self.next_end + 2 * self.window > limit {
            self.next_end = limit;
        }
    }

    fn collecting(&self, iter: usize) -> bool {
        iter >= self.init_buffer && iter < self.warmup - self.term_buffer
    }

    /// True at the last iteration of a slow window; advances the schedule.
    fn window_ends(&mut self, iter: usize) -> bool {
        if iter + 1 != self.next_end || !self.collecting(iter) {
            return false;
        }
        self.window *= 2;
        self.next_end = iter + 1 + self.window;
        self.stretch();
        true
    }
}

#[derive(Default)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn add(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1.0;
        for k in 0..x.len() {
            let d = x[k] - self.mean[k];
            self.mean[k] += d / self.n;
            self.m2[k] += d * (x[k] - self.mean[k]);
        }
    }

    /// Variance shrunk towards 1e-3.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|m| {
                let var = m / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

struct ChainOutput {
    values: Vec<f64>,
    lp: Vec<f64>,
    divergent: Vec<bool>,
    depth: Vec<usize>,
    step: Vec<f64>,
    n_leapfrog: Vec<usize>,
    accept: Vec<f64>,
    warmup_seconds: f64,
    sampling_seconds: f64,
}

/// Draw an initial point uniformly in `[-1, 1]^d`, retrying up to 100 times
/// until the log density and gradient are finite.
fn initialize<G: GradientTarget>(target: &G, rng: &mut ChaCha8Rng) -> Result<Point> {
    let d = target.dim();
    let mut last = String::new();
    for _ in 0..100 {
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let mut grad = vec![0.0; d];
        match target.log_density_gradient(&q, &mut grad) {
            Ok(lp) if lp.is_finite() => {
                return Ok(Point {
                    q,
                    p: vec![0.0; d],
                    grad,
                    lp,
                })
            }
            Ok(lp) => last = format!("log density {lp}"),
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::Initialization {
        attempts: 100,
        message: last,
    })
}

fn run_chain<G: GradientTarget>(target: &G, config: &ChainConfig, chain: usize) -> Result<ChainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64);
    let mut z = initialize(target, &mut rng)?;
    let d = target.dim();
    let mut s = Sampler {
        target,
        inv_metric: vec![1.0; d],
        step: 1.0,
        max_depth: config.max_depth,
        rng,
        n_leapfrog: 0,
        divergent: false,
        sum_metro: 0.0,
    };
    let start = Instant::now();
    s.init_step_size(&z);
    let mut da = DualAveraging::new(s.step, config.target_accept);
    let mut windows = Windows::new(config.warmup);
    let mut welford = Welford::default();
    for iter in 0..config.warmup {
        let t = s.transition(&z);
        z = t.point;
        s.step = da.update(t.accept_stat);
        if let Some(w) = windows.as_mut() {
            if w.collecting(iter) {
                welford.add(&z.q);
            }
            if w.window_ends(iter) {
                s.inv_metric = welford.regularized();
                welford = Welford::default();
                s.init_step_size(&z);
                da = DualAveraging::new(s.step, config.target_accept);
            }
        }
    }
    if config.warmup > 0 {
        s.step = da.final_step();
    }
    let warmup_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();

    let n = config.samples;
    let mut out = ChainOutput {
        values: Vec::with_capacity(n * d),
        lp: Vec::with_capacity(n),
        divergent: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        step: Vec::with_capacity(n),
        n_leapfrog: Vec::with_capacity(n),
        accept: Vec::with_capacity(n),
        warmup_seconds,
        sampling_seconds: 0.0,
    };
    for _ in 0..n {
        let t = s.transition(&z);
        z = t.point;
        out.values.extend(target.constrain(&z.q)?);
        out.lp.push(z.lp);
        out.divergent.push(s.divergent);
        out.depth.push(t.depth);
        out.step.push(s.step);
        out.n_leapfrog.push(s.n_leapfrog);
        out.accept.push(t.accept_stat);
    }
    out.sampling_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Run `config.chains` independent chains in parallel. Results do not
/// depend on scheduling: each chain owns the RNG stream `(seed, chain)`.
pub fn nuts_sample<G: GradientTarget>(target: &G, config: &ChainConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    let outputs: Vec<Result<ChainOutput>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, config, c))
        .collect();
    let mut draws = PosteriorDraws {
        names: target.names(),
        values: Vec::new(),
        chain: Vec::new(),
        log_posterior: Vec::new(),
        divergent: Vec::new(),
        tree_depth: Vec::new(),
        step_size: Vec::new(),
        n_leapfrog: Vec::new(),
        accept_stat: Vec::new(),
        warmup_seconds: Vec::new(),
        sampling_seconds: Vec::new(),
    };
    for (c, out) in outputs.into_iter().enumerate() {
        let out = out?;
        draws.chain.extend(std::iter::repeat_n(c, out.lp.len()));
        draws.values.extend(out.values);
        draws.log_posterior.extend(out.lp);
        draws.divergent.extend(out.divergent);
        draws.tree_depth.extend(out.depth);
        draws.step_size.extend(out.step);
        draws.n_leapfrog.extend(out.n_leapfrog);
        draws.accept_stat.extend(out.accept);
        draws.warmup_seconds.push(out.warmup_seconds);
        draws.sampling_seconds.push(out.sampling_seconds);
    }
    Ok(draws)
}
