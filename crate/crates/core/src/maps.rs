//! Dense reachability and torque maps, the SVM safe region, the quartic
//! step selector and the LIPM baseline comparison.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{InitialCondition, Simulator};
use crate::error::{Error, Result};
use crate::model::TerminationKind;
use crate::paramopt::{worker_pool, ParamGrid};
use crate::traj::GaitParams;

fn check_axis(name: &str, axis: &[f64]) -> Result<()> {
    if axis.is_empty() || axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(format!(
            "{name} axis must be non-empty and strictly increasing"
        )));
    }
    Ok(())
}

/// Velocity × position grid of per-cell values, stored velocity-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGrid<T> {
    pub velocities: Vec<f64>,
    pub positions: Vec<f64>,
    pub cells: Vec<T>,
}

impl<T: Clone> CellGrid<T> {
    pub fn new(velocities: Vec<f64>, positions: Vec<f64>, cells: Vec<T>) -> Result<Self> {
        check_axis("velocity", &velocities)?;
        check_axis("position", &positions)?;
        if cells.len() != velocities.len() * positions.len() {
            return Err(Error::Contract(format!(
                "{} cells for a {}x{} map",
                cells.len(),
                velocities.len(),
                positions.len()
            )));
        }
        Ok(Self {
            velocities,
            positions,
            cells,
        })
    }

    pub fn get(&self, iv: usize, ip: usize) -> &T {
        &self.cells[iv * self.positions.len() + ip]
    }

    pub fn column(&self, iv: usize) -> &[T] {
        let np = self.positions.len();
        &self.cells[iv * np..(iv + 1) * np]
    }

    pub fn same_axes<U>(&self, other: &CellGrid<U>) -> bool {
        self.velocities == other.velocities && self.positions == other.positions
    }
}

/// Per-cell success of the interpolated parameters.
pub type ReachMap = CellGrid<bool>;
/// Per-cell swing-phase torque integral, present only for successful cells.
pub type TorqueMap = CellGrid<Option<f64>>;

pub const MAP_HEADER: &str = "x0_dot,s_des,reachable,j_tau";

/// Both maps as one CSV table; `j_tau` is empty for unreachable cells.
pub fn maps_to_csv(reach: &ReachMap, torque: &TorqueMap) -> Result<String> {
    if !reach.same_axes(torque) {
        return Err(Error::Contract("reach and torque maps have different axes".into()));
    }
    let mut out = format!("{MAP_HEADER}\n");
    for (iv, v) in reach.velocities.iter().enumerate() {
        for (ip, s) in reach.positions.iter().enumerate() {
            let j = torque.get(iv, ip).map_or(String::new(), |j| j.to_string());
            out.push_str(&format!("{v},{s},{},{j}\n", u8::from(*reach.get(iv, ip))));
        }
    }
    Ok(out)
}

pub fn maps_from_csv(text: &str) -> Result<(ReachMap, TorqueMap)> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MAP_HEADER) {
        return Err(Error::Format(format!("map CSV must start with '{MAP_HEADER}'")));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::Format(format!("map row {}: {what}", n + 2));
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let v: f64 = f[0].parse().map_err(|_| bad("velocity"))?;
        let s: f64 = f[1].parse().map_err(|_| bad("position"))?;
        let reach = match f[2] {
            "1" => true,
            "0" => false,
            _ => return Err(bad("reachable must be 0 or 1")),
        };
        let j = if f[3].is_empty() {
            None
        } else {
            Some(f[3].parse::<f64>().map_err(|_| bad("j_tau"))?)
        };
        if reach != j.is_some() {
            return Err(bad("j_tau must be present exactly for reachable cells"));
        }
        rows.push((v, s, reach, j));
    }
    let mut velocities: Vec<f64> = Vec::new();
    let mut positions: Vec<f64> = Vec::new();
    for r in &rows {
        if !velocities.contains(&r.0) {
            velocities.push(r.0);
        }
        if !positions.contains(&r.1) {
            positions.push(r.1);
        }
    }
    let np = positions.len();
    if rows.len() != velocities.len() * np
        || rows
            .iter()
            .enumerate()
            .any(|(k, r)| r.0 != velocities[k / np] || r.1 != positions[k % np])
    {
        return Err(Error::Format("map CSV is not a complete velocity-major grid".into()));
    }
    Ok((
        CellGrid::new(
            velocities.clone(),
            positions.clone(),
            rows.iter().map(|r| r.2).collect(),
        )?,
        CellGrid::new(velocities, positions, rows.iter().map(|r| r.3).collect())?,
    ))
}

/// Per-cell episode record of a dense map build.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub ic: InitialCondition,
    pub params: GaitParams,
    pub status: TerminationKind,
    pub j_tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMaps {
    pub reach: ReachMap,
    pub torque: TorqueMap,
    pub outcomes: Vec<CellOutcome>,
}

/// Runs one episode per dense cell with parameters interpolated from `grid`.
pub fn build_dense_maps(
    sim: &Simulator,
    grid: &ParamGrid,
    velocities: &[f64],
    positions: &[f64],
    workers: usize,
) -> Result<DenseMaps> {
    check_axis("velocity", velocities)?;
    check_axis("position", positions)?;
    for (&v, &s) in [
        (velocities.first().unwrap(), positions.first().unwrap()),
        (velocities.last().unwrap(), positions.last().unwrap()),
    ] {
        let ic = InitialCondition::new(v, s);
        if !grid.contains(&ic) {
            grid.query(&ic)?;
        }
    }
    let np = positions.len();
    let pool = worker_pool(workers)?;
    let cells: Vec<usize> = (0..velocities.len() * np).collect();
    let outcomes = pool.install(|| {
        cells
            .par_iter()
            .map(|&k| {
                let ic = InitialCondition::new(velocities[k / np], positions[k % np]);
                let params = grid.query(&ic)?;
                let o = sim.run_episode(&ic, &params, false)?;
                Ok(CellOutcome {
                    ic,
                    params,
                    status: o.status,
                    j_tau: o.j_tau,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let reach = outcomes.iter().map(|o| o.status == TerminationKind::Success).collect();
    let torque = outcomes
        .iter()
        .map(|o| (o.status == TerminationKind::Success).then_some(o.j_tau))
        .collect();
    Ok(DenseMaps {
        reach: CellGrid::new(velocities.to_vec(), positions.to_vec(), reach)?,
        torque: CellGrid::new(velocities.to_vec(), positions.to_vec(), torque)?,
        outcomes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    /// Base soft-margin penalty.
    pub c: f64,
    /// Penalty multipliers for the reachable and unreachable class.
    pub class_weights: [f64; 2],
    /// RBF width on standardized inputs; `None` selects
    /// `median_multiplier` times the median heuristic.
    pub gamma: Option<f64>,
    pub median_multiplier: f64,
    /// KKT tolerance of the SMO stopping rule.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 10.0,
            class_weights: [1.0, 14.0],
            gamma: None,
            median_multiplier: 5.0,
            tolerance: 1e-3,
            max_iterations: 1_000_000,
        }
    }
}

/// Trained RBF soft-margin SVM over (velocity, position).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeRegionModel {
    pub input_mean: [f64; 2],
    pub input_scale: [f64; 2],
    pub gamma: f64,
    pub params: SvmParams,
    /// Standardized support vectors.
    pub support_vectors: Vec<[f64; 2]>,
    /// `alpha_i * y_i` per support vector.
    pub dual_coef: Vec<f64>,
    pub bias: f64,
    pub dual_objective: f64,
    /// Final maximal KKT violation of the SMO solution.
    pub kkt_violation: f64,
    pub iterations: usize,
    pub velocity_range: [f64; 2],
    pub position_range: [f64; 2],
}

fn rbf(a: &[f64; 2], b: &[f64; 2], gamma: f64) -> f64 {
    (-gamma * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))).exp()
}

/// `1 / median(‖xᵢ − xⱼ‖²)` over distinct pairs.
pub fn median_heuristic_gamma(x: &[[f64; 2]]) -> f64 {
    let mut d2: Vec<f64> = Vec::with_capacity(x.len() * x.len().saturating_sub(1) / 2);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            d2.push((x[i][0] - x[j][0]).powi(2) + (x[i][1] - x[j][1]).powi(2));
        }
    }
    if d2.is_empty() {
        return 1.0;
    }
    d2.sort_by(f64::total_cmp);
    let m = d2.len();
    let med = if m % 2 == 1 {
        d2[m / 2]
    } else {
        0.5 * (d2[m / 2 - 1] + d2[m / 2])
    };
    if med > 0.0 {
        1.0 / med
    } else {
        1.0
    }
}

/// Raw solution of the SVM dual `min ½αᵀQα − Σα`, `0 ≤ αᵢ ≤ Cᵢ`, `yᵀα = 0`.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub objective: f64,
    pub kkt_violation: f64,
    pub iterations: usize,
}

/// Sequential minimal optimization with second-order working-set selection.
pub fn smo_solve(
    kernel: &DMatrix<f64>,
    y: &[f64],
    c: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<DualSolution> {
    const TAU: f64 = 1e-12;
    let n = y.len();
    if kernel.nrows() != n || kernel.ncols() != n || c.len() != n {
        return Err(Error::Contract("SVM dual dimensions disagree".into()));
    }
    let q = |i: usize, j: usize| y[i] * y[j] * kernel[(i, j)];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut iterations = 0;
    let mut violation;
    loop {
        // i maximizes -y G over the "up" set.
        let mut g_max = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let up = if y[t] > 0.0 { alpha[t] < c[t] } else { alpha[t] > 0.0 };
            if up && -y[t] * grad[t] >= g_max {
                g_max = -y[t] * grad[t];
                i_sel = Some(t);
            }
        }
        let mut g_max2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best_obj = f64::INFINITY;
        if let Some(i) = i_sel {
            for t in 0..n {
                let low = if y[t] > 0.0 { alpha[t] > 0.0 } else { alpha[t] < c[t] };
                if !low {
                    continue;
                }
                let yg = y[t] * grad[t];
                g_max2 = g_max2.max(yg);
                let diff = g_max + yg;
                if diff > 0.0 {
                    let quad = kernel[(i, i)] + kernel[(t, t)] - 2.0 * kernel[(i, t)];
                    let quad = if quad > 0.0 { quad } else { TAU };
                    let obj = -diff * diff / quad;
                    if obj <= best_obj {
                        best_obj = obj;
                        j_sel = Some(t);
                    }
                }
            }
        }
        violation = if i_sel.is_some() { g_max + g_max2 } else { 0.0 };
        let (Some(i), Some(j)) = (i_sel, j_sel) else { break };
        if violation < tolerance {
            break;
        }
        if iterations >= max_iterations {
            return Err(Error::Training(format!(
                "SMO did not converge in {max_iterations} iterations (violation {violation})"
            )));
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (ci, cj) = (c[i], c[j]);
        if y[i] != y[j] {
            let quad = q(i, i) + q(j, j) + 2.0 * q(i, j);
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let quad = q(i, i) + q(j, j) - 2.0 * q(i, j);
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for (t, g) in grad.iter_mut().enumerate() {
            *g += q(t, i) * di + q(t, j) * dj;
        }
    }

    // Offset from the free vectors, or the midpoint of the feasible interval.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c[t] {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        0.5 * (ub + lb)
    };
    let objective = 0.5 * alpha.iter().zip(&grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>();
    Ok(DualSolution {
        alpha,
        bias: -rho,
        objective,
        kkt_violation: violation.max(0.0),
        iterations,
    })
}

/// SVM dual objective `½αᵀQα − Σα` for given multipliers.
pub fn dual_objective(kernel: &DMatrix<f64>, y: &[f64], alpha: &[f64]) -> f64 {
    let n = y.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * kernel[(i, j)];
        }
    }
    0.5 * quad - alpha.iter().sum::<f64>()
}

/// Trains a weighted RBF SVM on labelled points; `true` is the reachable class.
pub fn train_svm(points: &[[f64; 2]], labels: &[bool], params: &SvmParams) -> Result<SafeRegionModel> {
    if points.len() != labels.len() {
        return Err(Error::Contract("points and labels differ in length".into()));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::Training("training data must contain both classes".into()));
    }
    if !(params.c > 0.0) || params.class_weights.iter().any(|w| !(*w > 0.0)) || !(params.tolerance > 0.0) {
        return Err(Error::Parameter("SVM penalties and tolerance must be positive".into()));
    }
    let n = points.len() as f64;
    let mut mean = [0.0; 2];
    let mut scale = [0.0; 2];
    for d in 0..2 {
        mean[d] = points.iter().map(|p| p[d]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n;
        scale[d] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let x: Vec<[f64; 2]> = points
        .iter()
        .map(|p| [(p[0] - mean[0]) / scale[0], (p[1] - mean[1]) / scale[1]])
        .collect();
    let gamma = match params.gamma {
        Some(g) if g > 0.0 => g,
        Some(g) => return Err(Error::Parameter(format!("gamma must be positive, got {g}"))),
        None if params.median_multiplier > 0.0 => params.median_multiplier * median_heuristic_gamma(&x),
        None => return Err(Error::Parameter("median multiplier must be positive".into())),
    };
    let kernel = DMatrix::from_fn(x.len(), x.len(), |i, j| rbf(&x[i], &x[j], gamma));
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let c: Vec<f64> = labels
        .iter()
        .map(|&l| params.c * params.class_weights[usize::from(!l)])
        .collect();
    let sol = smo_solve(&kernel, &y, &c, params.tolerance, params.max_iterations)?;
    let (mut support_vectors, mut dual_coef) = (Vec::new(), Vec::new());
    for (t, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            support_vectors.push(x[t]);
            dual_coef.push(a * y[t]);
        }
    }
    let range = |d: usize| {
        let lo = points.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
        [lo, hi]
    };
    Ok(SafeRegionModel {
        input_mean: mean,
        input_scale: scale,
        gamma,
        params: *params,
        support_vectors,
        dual_coef,
        bias: sol.bias,
        dual_objective: sol.objective,
        kkt_violation: sol.kkt_violation,
        iterations: sol.iterations,
        velocity_range: range(0),
        position_range: range(1),
    })
}

/// Trains the safe region on every cell of a reach map.
pub fn train_safe_region(reach: &ReachMap, params: &SvmParams) -> Result<SafeRegionModel> {
    let mut points = Vec::with_capacity(reach.cells.len());
    for v in &reach.velocities {
        for s in &reach.positions {
            points.push([*v, *s]);
        }
    }
    train_svm(&points, &reach.cells, params)
}

impl SafeRegionModel {
    pub fn decision(&self, ic: &InitialCondition) -> f64 {
        let x = [
            (ic.x0_dot - self.input_mean[0]) / self.input_scale[0],
            (ic.s_des - self.input_mean[1]) / self.input_scale[1],
        ];
        self.support_vectors
            .iter()
            .zip(&self.dual_coef)
            .map(|(sv, a)| a * rbf(sv, &x, self.gamma))
            .sum::<f64>()
            + self.bias
    }

    /// Whether the step is in the safe region (positive decision value).
    pub fn classify(&self, ic: &InitialCondition) -> bool {
        self.decision(ic) > 0.0
    }

    /// Classifies a grid at `factor` times the map resolution.
    pub fn classify_fine(&self, velocities: &[f64], positions: &[f64], factor: usize) -> CellGrid<bool> {
        let refine = |axis: &[f64]| -> Vec<f64> {
            let n = (axis.len() - 1) * factor.max(1) + 1;
            crate::paramopt::linspace(axis[0], axis[axis.len() - 1], n)
        };
        let (fv, fp) = (refine(velocities), refine(positions));
        let cells = fv
            .iter()
            .flat_map(|v| fp.iter().map(move |s| (*v, *s)))
            .map(|(v, s)| self.classify(&InitialCondition::new(v, s)))
            .collect();
        CellGrid {
            velocities: fv,
            positions: fp,
            cells,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Recall of the reachable class on a reach map.
pub fn reachable_recall(model: &SafeRegionModel, reach: &ReachMap) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (iv, v) in reach.velocities.iter().enumerate() {
        for (ip, s) in reach.positions.iter().enumerate() {
            if *reach.get(iv, ip) {
                total += 1;
                hit += usize::from(model.classify(&InitialCondition::new(*v, *s)));
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// Drops torque entries outside the safe region.
pub fn trim_torque_map(tmap: &TorqueMap, model: &SafeRegionModel) -> TorqueMap {
    let mut out = tmap.clone();
    for (iv, v) in tmap.velocities.iter().enumerate() {
        for (ip, s) in tmap.positions.iter().enumerate() {
            if !model.classify(&InitialCondition::new(*v, *s)) {
                out.cells[iv * tmap.positions.len() + ip] = None;
            }
        }
    }
    out
}

/// Mean, population standard deviation and range of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                count: 0,
                mean: f64::NAN,
                std: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            count: values.len(),
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Index of the smallest torque in a column; ties go to the shortest step.
pub fn column_argmin(column: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, j) in column.iter().enumerate() {
        if let Some(j) = j {
            if best.is_none_or(|(_, b)| *j < b) {
                best = Some((i, *j));
            }
        }
    }
    best.map(|b| b.0)
}

/// Energy-optimal step position as a quartic in the initial velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSelector {
    /// Coefficients in the scaled velocity `u = (v - center) / half_width`,
    /// lowest order first.
    pub coefficients: [f64; 5],
    pub center: f64,
    pub half_width: f64,
    pub velocity_range: [f64; 2],
    pub position_range: [f64; 2],
    /// Per-velocity extracted optima `(velocity, position)`.
    pub samples: Vec<[f64; 2]>,
    /// Absolute fit residuals at the samples (m).
    pub residuals: Summary,
}

/// Extracts per-velocity optima and fits the quartic selector.
pub fn fit_step_selector(tmap: &TorqueMap) -> Result<StepSelector> {
    let mut samples = Vec::with_capacity(tmap.velocities.len());
    for (iv, v) in tmap.velocities.iter().enumerate() {
        let i = column_argmin(tmap.column(iv))
            .ok_or_else(|| Error::Fit(format!("velocity column {v} has no reachable cell")))?;
        samples.push([*v, tmap.positions[i]]);
    }
    let (v_lo, v_hi) = (tmap.velocities[0], *tmap.velocities.last().unwrap());
    let center = 0.5 * (v_lo + v_hi);
    let half_width = if v_hi > v_lo { 0.5 * (v_hi - v_lo) } else { 1.0 };
    let a = DMatrix::from_fn(samples.len(), 5, |r, k| {
        ((samples[r][0] - center) / half_width).powi(k as i32)
    });
    let b = DVector::from_iterator(samples.len(), samples.iter().map(|s| s[1]));
    let coef = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Fit(format!("least squares: {e}")))?;
    let mut sel = StepSelector {
        coefficients: std::array::from_fn(|k| coef[k]),
        center,
        half_width,
        velocity_range: [v_lo, v_hi],
        position_range: [tmap.positions[0], *tmap.positions.last().unwrap()],
        samples,
        residuals: Summary::of(&[]),
    };
    let res: Vec<f64> = sel
        .samples
        .iter()
        .map(|s| (sel.polynomial(s[0]) - s[1]).abs())
        .collect();
    sel.residuals = Summary::of(&res);
    Ok(sel)
}

impl StepSelector {
    /// Unclamped quartic value.
    pub fn polynomial(&self, v: f64) -> f64 {
        let u = (v - self.center) / self.half_width;
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * u + c)
    }

    /// Energy-optimal step for velocity `v`, clamped to the map's positions.
    pub fn select_step(&self, v: f64) -> Result<f64> {
        let [lo, hi] = self.velocity_range;
        if !(v >= lo && v <= hi) {
            return Err(Error::Parameter(format!(
                "velocity {v} outside the selector range [{lo}, {hi}]"
            )));
        }
        Ok(self.polynomial(v).clamp(self.position_range[0], self.position_range[1]))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Cells within `(1 + delta)` of their column's minimum torque.
pub fn near_optimal_regions(tmap: &TorqueMap, delta: f64) -> Result<CellGrid<bool>> {
    if delta.is_nan() || delta < 0.0 {
        return Err(Error::Parameter(format!("delta must be non-negative, got {delta}")));
    }
    let mut cells = Vec::with_capacity(tmap.cells.len());
    for iv in 0..tmap.velocities.len() {
        let col = tmap.column(iv);
        let min = column_argmin(col).and_then(|i| col[i]);
        cells.extend(col.iter().map(|j| match (j, min) {
            (Some(j), Some(m)) => delta.is_infinite() || *j <= (1.0 + delta) * m,
            _ => false,
        }));
    }
    CellGrid::new(tmap.velocities.clone(), tmap.positions.clone(), cells)
}

/// Instantaneous capture point after a LIPM rollout of `t_sw` from the
/// origin with velocity `x0_dot`.
pub fn lipm_predict_step(x0_dot: f64, z_nom: f64, gravity: f64, t_sw: f64) -> Result<f64> {
    if !(t_sw >= 0.0) || !(z_nom > 0.0) || !(gravity > 0.0) {
        return Err(Error::Parameter("LIPM prediction needs t_sw >= 0, z > 0, g > 0".into()));
    }
    let w = (gravity / z_nom).sqrt();
    let x = x0_dot / w * (w * t_sw).sinh();
    let xd = x0_dot * (w * t_sw).cosh();
    Ok(x + xd / w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LipmStatus {
    Compared,
    /// The prediction falls outside the map's position axis.
    OutsideAxis,
    /// The prediction lands on an unreachable cell.
    BeyondReachable,
    /// The column has no reachable cell.
    NoOptimum,
}

impl LipmStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Compared => "compared",
            Self::OutsideAxis => "outside-axis",
            Self::BeyondReachable => "beyond-reachable",
            Self::NoOptimum => "no-optimum",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipmRow {
    pub velocity: f64,
    pub selector_step: Option<f64>,
    pub optimal_step: Option<f64>,
    pub optimal_j_tau: Option<f64>,
    pub swing_time: Option<f64>,
    pub lipm_step: Option<f64>,
    pub lipm_j_tau: Option<f64>,
    pub error: Option<f64>,
    pub status: LipmStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipmReport {
    pub rows: Vec<LipmRow>,
    pub outside_axis: usize,
    pub beyond_reachable: usize,
    /// Root-squared torque-integral error over the compared velocities.
    pub error: Summary,
}

pub const LIPM_HEADER: &str =
    "x0_dot,selector_step,optimal_step,optimal_j_tau,swing_time,lipm_step,lipm_j_tau,error,status";

impl LipmReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut out = format!("{LIPM_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.velocity,
                opt(r.selector_step),
                opt(r.optimal_step),
                opt(r.optimal_j_tau),
                opt(r.swing_time),
                opt(r.lipm_step),
                opt(r.lipm_j_tau),
                opt(r.error),
                r.status.as_str()
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let s = &self.error;
        format!(
            "compared,outside_axis,beyond_reachable,mean,std,min,max\n{},{},{},{},{},{},{}\n",
            s.count, self.outside_axis, self.beyond_reachable, s.mean, s.std, s.min, s.max
        )
    }
}

fn nearest_index(axis: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, a) in axis.iter().enumerate() {
        if (a - x).abs() < (axis[best] - x).abs() {
            best = i;
        }
    }
    best
}

/// Compares the torque at LIPM-predicted steps with the map optimum per
/// velocity column.
pub fn compare_lipm(
    tmap: &TorqueMap,
    sel: Option<&StepSelector>,
    grid: &ParamGrid,
    z_nom: f64,
    gravity: f64,
) -> Result<LipmReport> {
    let (p_lo, p_hi) = (tmap.positions[0], *tmap.positions.last().unwrap());
    let (g_lo, g_hi) = (grid.positions()[0], *grid.positions().last().unwrap());
    let mut rows = Vec::with_capacity(tmap.velocities.len());
    for (iv, &v) in tmap.velocities.iter().enumerate() {
        let col = tmap.column(iv);
        let selector_step = sel.and_then(|s| s.select_step(v).ok());
        let mut row = LipmRow {
            velocity: v,
            selector_step,
            optimal_step: None,
            optimal_j_tau: None,
            swing_time: None,
            lipm_step: None,
            lipm_j_tau: None,
            error: None,
            status: LipmStatus::NoOptimum,
        };
        let Some(i_opt) = column_argmin(col) else {
            rows.push(row);
            continue;
        };
        let s_opt = tmap.positions[i_opt];
        let j_opt = col[i_opt].expect("argmin cell is reachable");
        row.optimal_step = Some(s_opt);
        row.optimal_j_tau = Some(j_opt);

        // Swing time implied by the queried parameters, iterated twice from
        // the optimal step.
        let swing_time = |s: f64| -> Result<f64> {
            let p = grid.query(&InitialCondition::new(v, s.clamp(g_lo, g_hi)))?;
            Ok(p.swing_time(s))
        };
        let mut t_sw = swing_time(s_opt)?;
        let mut s_pred = lipm_predict_step(v, z_nom, gravity, t_sw)?;
        for _ in 0..2 {
            t_sw = swing_time(s_pred.max(0.0))?;
            s_pred = lipm_predict_step(v, z_nom, gravity, t_sw)?;
        }
        row.swing_time = Some(t_sw);
        row.lipm_step = Some(s_pred);
        if s_pred < p_lo || s_pred > p_hi {
            row.status = LipmStatus::OutsideAxis;
        } else {
            match col[nearest_index(&tmap.positions, s_pred)] {
                None => row.status = LipmStatus::BeyondReachable,
                Some(j) => {
                    row.status = LipmStatus::Compared;
                    row.lipm_j_tau = Some(j);
                    row.error = Some(((j - j_opt) * (j - j_opt)).sqrt());
                }
            }
        }
        rows.push(row);
    }
    let errors: Vec<f64> = rows.iter().filter_map(|r| r.error).collect();
    Ok(LipmReport {
        outside_axis: rows.iter().filter(|r| r.status == LipmStatus::OutsideAxis).count(),
        beyond_reachable: rows.iter().filter(|r| r.status == LipmStatus::BeyondReachable).count(),
        error: Summary::of(&errors),
        rows,
    })
}

/// Swing durations `t_swing_start + s / s_speed` over the parameter grid and
/// along the energy-optimal steps of a torque map.
#[derive(Debug, Clone, PartialEq)]
pub struct SwingTimeReport {
    /// `(velocity, position, swing time)` per grid node.
    pub nodes: Vec<[f64; 3]>,
    /// `(velocity, optimal position, swing time)` per torque-map column.
    pub optimal: Vec<[f64; 3]>,
}

pub fn swing_time_report(grid: &ParamGrid, tmap: Option<&TorqueMap>) -> Result<SwingTimeReport> {
    let mut nodes = Vec::new();
    for (iv, &v) in grid.velocities().iter().enumerate() {
        for (ip, &s) in grid.positions().iter().enumerate() {
            nodes.push([v, s, grid.node(iv, ip).0.swing_time(s)]);
        }
    }
    let mut optimal = Vec::new();
    if let Some(tmap) = tmap {
        for (iv, &v) in tmap.velocities.iter().enumerate() {
            if let Some(i) = column_argmin(tmap.column(iv)) {
                let s = tmap.positions[i];
                optimal.push([v, s, grid.query(&InitialCondition::new(v, s))?.swing_time(s)]);
            }
        }
    }
    Ok(SwingTimeReport { nodes, optimal })
}

impl SwingTimeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,x0_dot,s_des,swing_time\n");
        for (kind, rows) in [("node", &self.nodes), ("optimal", &self.optimal)] {
            for r in rows {
                out.push_str(&format!("{kind},{},{},{}\n", r[0], r[1], r[2]));
            }
        }
        out
    }
}
