//! One stepping episode: trajectories, controller and simulation wired
//! together, plus the scalar objective and the swing-phase torque integral.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::controller::{ControllerGains, TaskController};
use crate::error::{Error, Result};
use crate::model::{Biped, BipedConfig, ContactMode, TerminationKind, TrackedPoint, NJ};
use crate::traj::{gen_com_traj, gen_swing_traj, GaitBounds, GaitParams, SwingTrajConfig, TrajSample};

/// Initial CoM velocity and desired step position of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialCondition {
    /// Initial forward CoM velocity (m/s).
    pub x0_dot: f64,
    /// Desired step position relative to the stance ankle (m).
    pub s_des: f64,
}

impl InitialCondition {
    pub fn new(x0_dot: f64, s_des: f64) -> Self {
        Self { x0_dot, s_des }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveWeights {
    pub w_f: f64,
    pub w_swing: f64,
    pub w_x_mid: f64,
    pub w_z: f64,
    pub w_tau: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            w_f: 0.001,
            w_swing: 50.0,
            w_x_mid: 1.0,
            w_z: 1.0,
            w_tau: 0.0002,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_f, self.w_swing, self.w_x_mid, self.w_z, self.w_tau];
        if w.iter().all(|v| *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Parameter("objective weights must be non-negative".into()))
        }
    }
}

/// One row of the optional full episode log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub q: [f64; NJ],
    pub qd: [f64; NJ],
    pub tau: [f64; NJ],
    pub com: [f64; 2],
    pub foot: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub status: TerminationKind,
    pub t_term: f64,
    /// Swing start (s).
    pub t_lo: f64,
    /// Touchdown time, if the swing foot landed.
    pub t_td: Option<f64>,
    /// Touchdown x, or the swing-foot x at termination when it never landed.
    pub s_td: f64,
    pub s_stance: f64,
    /// Target for the final CoM: midway between the two feet.
    pub s_mid: f64,
    pub x_f: f64,
    pub z_f: f64,
    /// Swing-phase torque integral (N²·m²·s).
    pub j_tau: f64,
    /// Applied torques per tick over the whole episode; ticks after an early
    /// termination hold the joint torque limits.
    pub torque_log: Vec<[f64; NJ]>,
    pub log: Option<Vec<LogRow>>,
}

impl EpisodeOutcome {
    pub fn success(&self) -> bool {
        self.status == TerminationKind::Success
    }
}

/// Midpoint between the stance foot and the touchdown point.
pub fn step_midpoint(s_stance: f64, s_td: f64) -> f64 {
    s_stance + 0.5 * (s_td - s_stance)
}

/// Left Riemann sum of Σᵢ τᵢ² over the ticks starting in `[t_lo, t_td)`.
pub fn torque_integral(log: &[[f64; NJ]], t_lo: f64, t_td: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) || !(t_lo <= t_td) || t_lo < 0.0 {
        return Err(Error::Contract(format!(
            "torque integral over [{t_lo}, {t_td}] with dt = {dt}"
        )));
    }
    let first = tick_at(t_lo, dt);
    let end = tick_at(t_td, dt);
    if end > log.len() {
        return Err(Error::Contract(format!(
            "interval [{t_lo}, {t_td}] exceeds the {} s log",
            log.len() as f64 * dt
        )));
    }
    Ok(log[first..end]
        .iter()
        .map(|row| row.iter().map(|t| t * t).sum::<f64>())
        .sum::<f64>()
        * dt)
}

/// Index of the first tick whose start time is at or after `t`.
fn tick_at(t: f64, dt: f64) -> usize {
    (t / dt - 1e-9).ceil().max(0.0) as usize
}

/// Episode objective; larger is better and zero is a perfect, free step.
pub fn objective(
    outcome: &EpisodeOutcome,
    ic: &InitialCondition,
    w: &ObjectiveWeights,
    t_total: f64,
    z_nom: f64,
) -> f64 {
    -(w.w_f * (t_total - outcome.t_term)
        + w.w_swing * (ic.s_des - outcome.s_td).powi(2)
        + w.w_x_mid * (outcome.x_f - outcome.s_mid).powi(2)
        + w.w_z * (z_nom - outcome.z_f)
        + w.w_tau * outcome.j_tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub biped: BipedConfig,
    pub gains: ControllerGains,
    pub swing: SwingTrajConfig,
    pub bounds: GaitBounds,
    /// Descent speed of the swing-foot reference once the planned swing has
    /// ended without contact (m/s).
    pub ground_search_speed: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            biped: BipedConfig::default(),
            gains: ControllerGains::default(),
            swing: SwingTrajConfig::default(),
            bounds: GaitBounds::default(),
            ground_search_speed: 0.1,
        }
    }
}

/// Everything needed to run episodes; cheap to clone and `Send`.
#[derive(Debug, Clone)]
pub struct Simulator {
    biped: Biped,
    controller: TaskController,
    swing: SwingTrajConfig,
    bounds: GaitBounds,
    ground_search_speed: f64,
}

impl Simulator {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.bounds.validate()?;
        if !(cfg.ground_search_speed > 0.0) {
            return Err(Error::Parameter("ground search speed must be positive".into()));
        }
        Ok(Self {
            biped: Biped::new(cfg.biped.clone())?,
            controller: TaskController::new(cfg.gains.clone())?,
            swing: cfg.swing,
            bounds: cfg.bounds,
            ground_search_speed: cfg.ground_search_speed,
        })
    }

    pub fn biped(&self) -> &Biped {
        &self.biped
    }

    pub fn controller(&self) -> &TaskController {
        &self.controller
    }

    pub fn bounds(&self) -> &GaitBounds {
        &self.bounds
    }

    /// Runs one episode. Falling is an outcome, not an error; errors are
    /// reserved for invalid inputs and model configuration.
    pub fn run_episode(&self, ic: &InitialCondition, p: &GaitParams, record_log: bool) -> Result<EpisodeOutcome> {
        self.bounds.check(p)?;
        if !(ic.x0_dot >= 0.0 && ic.s_des > 0.0) {
            return Err(Error::Parameter(format!("invalid initial condition {ic:?}")));
        }
        let cfg = self.biped.config();
        let (dt, t_total) = (cfg.dt, cfg.t_total);
        let n = cfg.steps();

        let mut state = self.biped.init_standing(ic.x0_dot)?;
        let foot0 = self.biped.point(&state, TrackedPoint::SwingFoot).pos;
        let com_traj = gen_com_traj(ic.x0_dot, p, ic.s_des, cfg.z_nom, cfg.gravity, dt, t_total)?;
        let swing_traj = gen_swing_traj(ic.s_des, p, &self.swing, [foot0.x, 0.0, foot0.y], dt, t_total)?;
        let swing_end = p.t_swing_start + ic.s_des / p.s_speed;

        let mut torque_log = Vec::with_capacity(n);
        let mut log = record_log.then(|| Vec::with_capacity(n));
        let mut status = None;
        for k in 0..n {
            let t = k as f64 * dt;
            let com_ref = com_traj.sample_index(k);
            let mut swing_ref = swing_traj.sample_index(k);
            if state.contact == ContactMode::SwingAirborne && t > swing_end {
                swing_ref = self.ground_search(swing_ref, t - swing_end);
            }
            let tau = self.controller.solve_torques(&self.biped, &com_ref, &swing_ref, &state);
            let next = self.biped.step(&state, &tau);
            if let Some(log) = log.as_mut() {
                let terms = self.biped.terms(&state);
                log.push(LogRow {
                    t,
                    q: state.q.into(),
                    qd: state.qd.into(),
                    tau: tau_clamped(&self.biped, &tau),
                    com: terms.com.pos.into(),
                    foot: terms.foot.pos.into(),
                });
            }
            torque_log.push(tau_clamped(&self.biped, &tau));
            match next {
                Ok(s) => state = s,
                Err(_) => {
                    // Non-physical configuration: the velocity test would
                    // fire on the blown-up state.
                    status = Some((TerminationKind::FellVelocity, (k + 1) as f64 * dt));
                    break;
                }
            }
            let check = self
                .biped
                .check_termination(&state, (k + 1) as f64 * dt, Some(ic.s_des));
            if check.kind != TerminationKind::Running {
                status = Some((check.kind, check.t_term));
                break;
            }
        }
        let (status, t_term) = status.unwrap_or((TerminationKind::TimeoutUnsettled, t_total));
        let limits = cfg.torque_limits;
        torque_log.resize(n, limits);

        let (com, _) = self.biped.com_state(&state);
        let foot = self.biped.point(&state, TrackedPoint::SwingFoot).pos;
        let s_stance = state.stance_anchor.x;
        let (t_td, s_td) = match state.touchdown {
            Some(td) => (Some(td.time), td.x),
            None => (None, if foot.x.is_finite() { foot.x } else { 0.0 }),
        };
        let t_lo = match t_td {
            Some(td) => p.t_swing_start.min(td),
            None => p.t_swing_start,
        };
        // An early termination voids the touchdown for energy accounting: the
        // integral then runs into the filled ticks up to t_total.
        let fell = t_term + 0.5 * dt < t_total;
        let t_end = match t_td {
            Some(td) if !fell => td,
            _ => t_total,
        };
        let j_tau = torque_integral(&torque_log, t_lo, t_end, dt)?;
        let finite = |v: f64, fallback: f64| if v.is_finite() { v } else { fallback };
        Ok(EpisodeOutcome {
            status,
            t_term,
            t_lo,
            t_td,
            s_td,
            s_stance,
            s_mid: step_midpoint(s_stance, s_td),
            x_f: finite(com.x, 0.0),
            z_f: finite(com.y, 0.0),
            j_tau,
            torque_log,
            log,
        })
    }

    fn ground_search(&self, mut r: TrajSample, elapsed: f64) -> TrajSample {
        r.pos.z -= self.ground_search_speed * elapsed;
        r.vel = Vector3::new(0.0, 0.0, -self.ground_search_speed);
        r.acc = Vector3::zeros();
        r
    }

    /// Runs an episode and scores it.
    pub fn evaluate(
        &self,
        ic: &InitialCondition,
        p: &GaitParams,
        w: &ObjectiveWeights,
    ) -> Result<(f64, EpisodeOutcome)> {
        let outcome = self.run_episode(ic, p, false)?;
        let cfg = self.biped.config();
        Ok((objective(&outcome, ic, w, cfg.t_total, cfg.z_nom), outcome))
    }
}

fn tau_clamped(biped: &Biped, tau: &crate::model::JointVector) -> [f64; NJ] {
    let l = biped.config().torque_limits;
    std::array::from_fn(|i| tau[i].clamp(-l[i], l[i]))
}

/// Header of [`outcome_row`].
pub const OUTCOME_HEADER: &str = "x0_dot,s_des,t_min,s_max,t_swing_start,s_speed,status,t_term,s_td,x_f,z_f,j_tau,j";

/// Single CSV row summarising an episode.
pub fn outcome_row(ic: &InitialCondition, p: &GaitParams, o: &EpisodeOutcome, j: f64) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        ic.x0_dot,
        ic.s_des,
        p.t_min,
        p.s_max,
        p.t_swing_start,
        p.s_speed,
        o.status.as_str(),
        o.t_term,
        o.s_td,
        o.x_f,
        o.z_f,
        o.j_tau,
        j
    )
}

/// Full per-tick log as CSV.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("t");
    for group in ["q", "qd", "tau"] {
        for i in 0..NJ {
            out.push_str(&format!(",{group}{i}"));
        }
    }
    out.push_str(",com_x,com_z,foot_x,foot_z\n");
    for r in rows {
        out.push_str(&r.t.to_string());
        for v in r.q.iter().chain(&r.qd).chain(&r.tau).chain(&r.com).chain(&r.foot) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}
