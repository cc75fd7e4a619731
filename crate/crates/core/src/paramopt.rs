//! Per-node Bayesian optimization of gait parameters and the interpolated
//! parameter grid built from the node optima.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::episode::{InitialCondition, ObjectiveWeights, Simulator};
use crate::error::{Error, Result};
use crate::model::TerminationKind;
use crate::traj::{GaitBounds, GaitParams};

pub const DIM: usize = 4;
pub type UnitPoint = [f64; DIM];

const LENGTHSCALES: [f64; 4] = [0.1, 0.2, 0.5, 1.0];
const NOISES: [f64; 2] = [1e-4, 1e-2];
const N_CANDIDATES: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoBudget {
    pub n_random: usize,
    pub n_bayes: usize,
    pub seed: u64,
}

impl Default for BoBudget {
    fn default() -> Self {
        Self {
            n_random: 100,
            n_bayes: 70,
            seed: 0,
        }
    }
}

impl BoBudget {
    pub fn validate(&self) -> Result<()> {
        if self.n_random == 0 {
            return Err(Error::Parameter("the random phase needs at least one sample".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_random + self.n_bayes
    }
}

/// Exact GP regression with a squared-exponential kernel on the unit cube.
///
/// Targets are standardized before fitting; predictions are returned in the
/// original units.
#[derive(Debug, Clone)]
pub struct GpModel {
    x: Vec<UnitPoint>,
    lengthscales: [f64; DIM],
    /// Noise variance in standardized units.
    noise: f64,
    y_mean: f64,
    y_scale: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    log_marginal: f64,
}

fn se_kernel(a: &UnitPoint, b: &UnitPoint, ls: &[f64; DIM]) -> f64 {
    let r2: f64 = (0..DIM).map(|i| ((a[i] - b[i]) / ls[i]).powi(2)).sum();
    (-0.5 * r2).exp()
}

struct Fit {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    lml: f64,
}

fn fit_once(x: &[UnitPoint], y: &DVector<f64>, ls: &[f64; DIM], noise: f64) -> Option<Fit> {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| se_kernel(&x[i], &x[j], ls));
    let chol = [noise, 10.0 * noise]
        .into_iter()
        .find_map(|jitter| Cholesky::new(&k + DMatrix::identity(n, n) * jitter))?;
    let alpha = chol.solve(y);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    Some(Fit { chol, alpha, lml })
}

/// Fits a GP, choosing an isotropic lengthscale and the noise level by log
/// marginal likelihood over a fixed grid.
pub fn gp_fit(observations: &[(UnitPoint, f64)]) -> Result<GpModel> {
    if observations.is_empty() {
        return Err(Error::Contract("GP fit needs at least one observation".into()));
    }
    if observations
        .iter()
        .any(|(p, j)| !j.is_finite() || p.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Contract("non-finite GP observation".into()));
    }
    let n = observations.len() as f64;
    let x: Vec<UnitPoint> = observations.iter().map(|(p, _)| *p).collect();
    let y_mean = observations.iter().map(|(_, j)| j).sum::<f64>() / n;
    let var = observations.iter().map(|(_, j)| (j - y_mean).powi(2)).sum::<f64>() / n;
    let y_scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
    let y = DVector::from_iterator(
        observations.len(),
        observations.iter().map(|(_, j)| (j - y_mean) / y_scale),
    );

    let mut best: Option<(Fit, [f64; DIM], f64)> = None;
    for &l in &LENGTHSCALES {
        for &noise in &NOISES {
            let ls = [l; DIM];
            if let Some(fit) = fit_once(&x, &y, &ls, noise) {
                if best.as_ref().is_none_or(|(b, _, _)| fit.lml > b.lml) {
                    best = Some((fit, ls, noise));
                }
            }
        }
    }
    let (fit, lengthscales, noise) =
        best.ok_or_else(|| Error::Numerical("kernel matrix is not positive definite".into()))?;
    Ok(GpModel {
        x,
        lengthscales,
        noise,
        y_mean,
        y_scale,
        chol: fit.chol,
        alpha: fit.alpha,
        log_marginal: fit.lml,
    })
}

impl GpModel {
    /// Fits with fixed hyperparameters (no grid search).
    pub fn with_hyperparameters(
        observations: &[(UnitPoint, f64)],
        lengthscales: [f64; DIM],
        noise: f64,
    ) -> Result<Self> {
        if observations.is_empty() || !(noise > 0.0) || lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Contract("bad GP inputs".into()));
        }
        let n = observations.len() as f64;
        let x: Vec<UnitPoint> = observations.iter().map(|(p, _)| *p).collect();
        let y_mean = observations.iter().map(|(_, j)| j).sum::<f64>() / n;
        let var = observations.iter().map(|(_, j)| (j - y_mean).powi(2)).sum::<f64>() / n;
        let y_scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
        let y = DVector::from_iterator(
            observations.len(),
            observations.iter().map(|(_, j)| (j - y_mean) / y_scale),
        );
        let fit = fit_once(&x, &y, &lengthscales, noise)
            .ok_or_else(|| Error::Numerical("kernel matrix is not positive definite".into()))?;
        Ok(Self {
            x,
            lengthscales,
            noise,
            y_mean,
            y_scale,
            chol: fit.chol,
            alpha: fit.alpha,
            log_marginal: fit.lml,
        })
    }

    pub fn lengthscales(&self) -> [f64; DIM] {
        self.lengthscales
    }

    /// Observation noise variance in the original units.
    pub fn noise_variance(&self) -> f64 {
        self.noise * self.y_scale * self.y_scale
    }

    pub fn prior_mean(&self) -> f64 {
        self.y_mean
    }

    pub fn prior_variance(&self) -> f64 {
        self.y_scale * self.y_scale
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal
    }

    /// Predictive mean and latent variance at `p`.
    pub fn predict(&self, p: &UnitPoint) -> (f64, f64) {
        let k = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|xi| se_kernel(xi, p, &self.lengthscales)),
        );
        let mean = k.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k)
            .unwrap_or_else(|| DVector::zeros(self.x.len()));
        let var = (1.0 - v.norm_squared()).max(0.0);
        (self.y_mean + self.y_scale * mean, var * self.y_scale * self.y_scale)
    }
}

/// Expected improvement over `best` for a maximization problem.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    let gain = mean - best;
    if sigma < 1e-12 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    let n = Normal::standard();
    (gain * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

/// Halton sequence in the first four prime bases with a random
/// Cranley–Patterson shift.
#[derive(Debug, Clone)]
pub struct Halton {
    index: u64,
    shift: UnitPoint,
}

const PRIMES: [u64; DIM] = [2, 3, 5, 7];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let b = base as f64;
    while i > 0 {
        f /= b;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

impl Halton {
    pub fn new(rng: &mut impl Rng) -> Self {
        Self {
            index: 1,
            shift: std::array::from_fn(|_| rng.random::<f64>()),
        }
    }

    pub fn unshifted() -> Self {
        Self {
            index: 1,
            shift: [0.0; DIM],
        }
    }
}

impl Iterator for Halton {
    type Item = UnitPoint;

    fn next(&mut self) -> Option<UnitPoint> {
        let i = self.index;
        self.index += 1;
        Some(std::array::from_fn(|d| {
            (radical_inverse(i, PRIMES[d]) + self.shift[d]).fract()
        }))
    }
}

/// One evaluation in a BO run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub random_phase: bool,
    pub params: GaitParams,
    pub j: f64,
    pub best_j: f64,
    pub status: Option<TerminationKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoResult {
    pub params: GaitParams,
    pub j: f64,
    pub trace: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "iteration,phase,t_min,s_max,t_swing_start,s_speed,status,j,best_j";

impl BoResult {
    pub fn trace_csv(&self) -> String {
        let mut out = format!("{TRACE_HEADER}\n");
        for r in &self.trace {
            let p = r.params;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.iteration,
                if r.random_phase { "random" } else { "bayes" },
                p.t_min,
                p.s_max,
                p.t_swing_start,
                p.s_speed,
                r.status.map_or("", |s| s.as_str()),
                r.j,
                r.best_j
            ));
        }
        out
    }
}

fn maximize_ei(gp: &GpModel, best: f64, incumbent: &UnitPoint, rng: &mut ChaCha8Rng) -> UnitPoint {
    let score = |u: &UnitPoint| {
        let (m, v) = gp.predict(u);
        expected_improvement(m, v, best)
    };
    let mut scored: Vec<(f64, UnitPoint)> = (0..N_CANDIDATES)
        .map(|_| {
            let u: UnitPoint = std::array::from_fn(|_| rng.random::<f64>());
            (score(&u), u)
        })
        .collect();
    scored.push((score(incumbent), *incumbent));
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(5);

    // Shrinking random local search around the leading starts.
    let mut top = scored[0];
    for (mut s, mut u) in scored {
        let mut radius = 0.1;
        for _ in 0..4 {
            for _ in 0..16 {
                let c: UnitPoint =
                    std::array::from_fn(|i| (u[i] + radius * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, 1.0));
                let sc = score(&c);
                if sc > s {
                    s = sc;
                    u = c;
                }
            }
            radius *= 0.3;
        }
        if s > top.0 {
            top = (s, u);
        }
    }
    top.1
}

/// Runs BO over an arbitrary objective; `f` returns the score (larger is
/// better) and optionally the episode status for the trace.
pub fn optimize_with<F>(bounds: &GaitBounds, budget: &BoBudget, stream: u64, mut f: F) -> Result<BoResult>
where
    F: FnMut(&GaitParams) -> Result<(f64, Option<TerminationKind>)>,
{
    budget.validate()?;
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    rng.set_stream(stream);
    let halton = Halton::new(&mut rng);

    let mut obs: Vec<(UnitPoint, f64)> = Vec::with_capacity(budget.total());
    let mut trace = Vec::with_capacity(budget.total());
    let mut record = |u: UnitPoint, random: bool, obs: &mut Vec<(UnitPoint, f64)>| -> Result<()> {
        let p = bounds.denormalize(&u);
        let (j, status) = f(&p)?;
        if !j.is_finite() {
            return Err(Error::Numerical(format!("objective is {j} at {p:?}")));
        }
        obs.push((u, j));
        trace.push(TraceRow {
            iteration: obs.len() - 1,
            random_phase: random,
            params: p,
            j,
            best_j: obs[incumbent(obs)].1,
            status,
        });
        Ok(())
    };

    for u in halton.take(budget.n_random) {
        record(u, true, &mut obs)?;
    }
    for _ in 0..budget.n_bayes {
        let gp = gp_fit(&obs)?;
        let (u_best, j_best) = obs[incumbent(&obs)];
        let u = maximize_ei(&gp, j_best, &u_best, &mut rng);
        record(u, false, &mut obs)?;
    }
    let (u_best, j_best) = obs[incumbent(&obs)];
    Ok(BoResult {
        params: bounds.denormalize(&u_best),
        j: j_best,
        trace,
    })
}

/// Index of the first observation with the largest score.
fn incumbent(obs: &[(UnitPoint, f64)]) -> usize {
    let mut best = 0;
    for (i, (_, j)) in obs.iter().enumerate() {
        if *j > obs[best].1 {
            best = i;
        }
    }
    best
}

/// Optimizes the gait parameters of one initial condition.
pub fn optimize_pair(
    sim: &Simulator,
    weights: &ObjectiveWeights,
    ic: &InitialCondition,
    budget: &BoBudget,
    stream: u64,
) -> Result<BoResult> {
    optimize_with(sim.bounds(), budget, stream, |p| {
        let (j, o) = sim.evaluate(ic, p, weights)?;
        Ok((j, Some(o.status)))
    })
}

fn check_axis(name: &str, axis: &[f64]) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::Parameter(format!("{name} axis is empty")));
    }
    if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(format!("{name} axis must be strictly increasing")));
    }
    Ok(())
}

/// `n` evenly spaced values over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Optimized parameters on a velocity × position grid, stored velocity-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrid {
    velocities: Vec<f64>,
    positions: Vec<f64>,
    params: Vec<GaitParams>,
    best_j: Vec<f64>,
}

pub const GRID_HEADER: &str = "x0_dot,s_des,t_min,s_max,t_swing_start,s_speed,j_best";

impl ParamGrid {
    pub fn new(velocities: Vec<f64>, positions: Vec<f64>, params: Vec<GaitParams>, best_j: Vec<f64>) -> Result<Self> {
        check_axis("velocity", &velocities)?;
        check_axis("position", &positions)?;
        let n = velocities.len() * positions.len();
        if params.len() != n || best_j.len() != n {
            return Err(Error::Contract(format!(
                "grid needs {n} nodes, got {} parameter sets",
                params.len()
            )));
        }
        Ok(Self {
            velocities,
            positions,
            params,
            best_j,
        })
    }

    pub fn velocities(&self) -> &[f64] {
        &self.velocities
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn node(&self, iv: usize, ip: usize) -> (GaitParams, f64) {
        let k = iv * self.positions.len() + ip;
        (self.params[k], self.best_j[k])
    }

    pub fn contains(&self, ic: &InitialCondition) -> bool {
        let (v, p) = (&self.velocities, &self.positions);
        ic.x0_dot >= v[0] && ic.x0_dot <= v[v.len() - 1] && ic.s_des >= p[0] && ic.s_des <= p[p.len() - 1]
    }

    fn out_of_range(&self, ic: &InitialCondition) -> Error {
        Error::OutOfRange {
            velocity: ic.x0_dot,
            position: ic.s_des,
            v_lo: self.velocities[0],
            v_hi: *self.velocities.last().unwrap(),
            p_lo: self.positions[0],
            p_hi: *self.positions.last().unwrap(),
        }
    }

    /// Bilinear interpolation of the node parameters; no extrapolation.
    pub fn query(&self, ic: &InitialCondition) -> Result<GaitParams> {
        if !self.contains(ic) {
            return Err(self.out_of_range(ic));
        }
        let cell = |axis: &[f64], x: f64| {
            axis.partition_point(|&a| a <= x)
                .saturating_sub(1)
                .min(axis.len().saturating_sub(2))
        };
        self.query_in_cell(cell(&self.velocities, ic.x0_dot), cell(&self.positions, ic.s_des), ic)
    }

    /// Interpolates with the cell whose lower corner is `(iv, ip)`.
    pub fn query_in_cell(&self, iv: usize, ip: usize, ic: &InitialCondition) -> Result<GaitParams> {
        if !self.contains(ic) {
            return Err(self.out_of_range(ic));
        }
        let frac = |axis: &[f64], i: usize, x: f64| -> (usize, f64) {
            if axis.len() == 1 {
                (0, 0.0)
            } else {
                (i + 1, (x - axis[i]) / (axis[i + 1] - axis[i]))
            }
        };
        let (iv1, a) = frac(&self.velocities, iv, ic.x0_dot);
        let (ip1, b) = frac(&self.positions, ip, ic.s_des);
        let c = [
            self.node(iv, ip).0.to_array(),
            self.node(iv, ip1).0.to_array(),
            self.node(iv1, ip).0.to_array(),
            self.node(iv1, ip1).0.to_array(),
        ];
        // The clamp to the corner range only removes rounding; it keeps
        // interpolated values inside any box that contains the nodes.
        Ok(GaitParams::from_array(std::array::from_fn(|k| {
            let lo = c.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
            let hi = c.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
            ((1.0 - a) * ((1.0 - b) * c[0][k] + b * c[1][k]) + a * ((1.0 - b) * c[2][k] + b * c[3][k])).clamp(lo, hi)
        })))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{GRID_HEADER}\n");
        for (iv, v) in self.velocities.iter().enumerate() {
            for (ip, s) in self.positions.iter().enumerate() {
                let (p, j) = self.node(iv, ip);
                out.push_str(&format!(
                    "{v},{s},{},{},{},{},{j}\n",
                    p.t_min, p.s_max, p.t_swing_start, p.s_speed
                ));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(GRID_HEADER) {
            return Err(Error::Format(format!("grid CSV must start with '{GRID_HEADER}'")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("grid row {}: {e}", n + 2)))?;
            if vals.len() != 7 {
                return Err(Error::Format(format!("grid row {} has {} fields", n + 2, vals.len())));
            }
            rows.push(vals);
        }
        let mut velocities: Vec<f64> = Vec::new();
        let mut positions: Vec<f64> = Vec::new();
        for r in &rows {
            if !velocities.contains(&r[0]) {
                velocities.push(r[0]);
            }
            if !positions.contains(&r[1]) {
                positions.push(r[1]);
            }
        }
        if rows.len() != velocities.len() * positions.len() {
            return Err(Error::Format("grid CSV is not a complete grid".into()));
        }
        for (k, r) in rows.iter().enumerate() {
            if r[0] != velocities[k / positions.len()] || r[1] != positions[k % positions.len()] {
                return Err(Error::Format("grid CSV rows are not in velocity-major order".into()));
            }
        }
        let params = rows
            .iter()
            .map(|r| GaitParams::from_array([r[2], r[3], r[4], r[5]]))
            .collect();
        let best_j = rows.iter().map(|r| r[6]).collect();
        Self::new(velocities, positions, params, best_j)
    }
}

/// Outcome of one grid node.
#[derive(Debug, Clone)]
pub struct NodeRun {
    pub velocity_index: usize,
    pub position_index: usize,
    pub ic: InitialCondition,
    pub result: Result<BoResult>,
    pub seconds: f64,
}

pub(crate) fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::Parameter("worker count must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Parameter(format!("worker pool: {e}")))
}

/// Optimizes every node of the grid; node `k` (velocity-major) uses RNG
/// stream `k`, so the result does not depend on scheduling.
pub fn run_grid_nodes(
    sim: &Simulator,
    weights: &ObjectiveWeights,
    velocities: &[f64],
    positions: &[f64],
    budget: &BoBudget,
    workers: usize,
) -> Result<Vec<NodeRun>> {
    check_axis("velocity", velocities)?;
    check_axis("position", positions)?;
    budget.validate()?;
    weights.validate()?;
    let pool = worker_pool(workers)?;
    let np = positions.len();
    let jobs: Vec<usize> = (0..velocities.len() * np).collect();
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|&k| {
                let ic = InitialCondition::new(velocities[k / np], positions[k % np]);
                let start = Instant::now();
                let result = optimize_pair(sim, weights, &ic, budget, k as u64);
                NodeRun {
                    velocity_index: k / np,
                    position_index: k % np,
                    ic,
                    result,
                    seconds: start.elapsed().as_secs_f64(),
                }
            })
            .collect()
    }))
}

/// Assembles a grid from node runs, failing on the first failed node.
pub fn grid_from_runs(velocities: &[f64], positions: &[f64], runs: &[NodeRun]) -> Result<ParamGrid> {
    let mut params = Vec::with_capacity(runs.len());
    let mut best_j = Vec::with_capacity(runs.len());
    for run in runs {
        match &run.result {
            Ok(r) => {
                params.push(r.params);
                best_j.push(r.j);
            }
            Err(e) => {
                return Err(Error::Node {
                    velocity: run.ic.x0_dot,
                    position: run.ic.s_des,
                    source: Box::new(e.clone()),
                })
            }
        }
    }
    ParamGrid::new(velocities.to_vec(), positions.to_vec(), params, best_j)
}

pub fn build_param_grid(
    sim: &Simulator,
    weights: &ObjectiveWeights,
    velocities: &[f64],
    positions: &[f64],
    budget: &BoBudget,
    workers: usize,
) -> Result<ParamGrid> {
    let runs = run_grid_nodes(sim, weights, velocities, positions, budget, workers)?;
    grid_from_runs(velocities, positions, &runs)
}
