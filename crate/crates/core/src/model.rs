//! Planar five-link biped: stance shank, stance thigh, torso, swing thigh and
//! swing shank. The stance foot is welded to the ground, so the model is a
//! fixed-base tree whose swing-foot tip becomes a pinned point contact after
//! touchdown.
//!
//! Absolute link angles are measured from the upward vertical, with the link
//! direction `u(φ) = (sin φ, cos φ)` in the sagittal (x, z) plane. Stance-leg
//! links and the torso point up their chain; swing-leg links point down, so
//! all joint angles are zero for a straight, upright standing pose.

use nalgebra::{Cholesky, Matrix2, SMatrix, Vector2, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Number of actuated joints.
pub const NJ: usize = 5;

pub type JointVector = Vector5<f64>;
pub type PointJacobian = SMatrix<f64, 2, NJ>;
pub type MassMatrix = SMatrix<f64, NJ, NJ>;

/// Joint index of the stance ankle.
pub const STANCE_ANKLE: usize = 0;
/// Joint index of the stance knee.
pub const STANCE_KNEE: usize = 1;
/// Joint index of the stance hip (stance thigh to torso).
pub const STANCE_HIP: usize = 2;
/// Joint index of the swing hip (torso to swing thigh).
pub const SWING_HIP: usize = 3;
/// Joint index of the swing knee.
pub const SWING_KNEE: usize = 4;

/// Physical parameters of one rigid link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    /// Joint-to-joint length (m).
    pub length: f64,
    /// Mass (kg).
    pub mass: f64,
    /// Rotational inertia about the link CoM (kg·m²).
    pub inertia: f64,
    /// Distance of the link CoM from its upper joint (m). For the torso this
    /// is the height of its CoM above the hip.
    pub com_offset: f64,
}

impl LinkParams {
    fn rod(length: f64, mass: f64, com_offset: f64) -> Self {
        Self {
            length,
            mass,
            inertia: mass * length * length / 12.0,
            com_offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BipedConfig {
    pub torso: LinkParams,
    pub thigh: LinkParams,
    pub shank: LinkParams,
    /// Joint torque limits (N·m), indexed like [`RobotState::q`].
    pub torque_limits: [f64; NJ],
    /// Joint velocity limits (rad/s); the initial velocity induction must
    /// respect them.
    pub velocity_limits: [f64; NJ],
    /// Nominal CoM height (m).
    pub z_nom: f64,
    /// Gravitational acceleration (m/s²).
    pub gravity: f64,
    /// Integration step (s).
    pub dt: f64,
    /// Episode length (s).
    pub t_total: f64,
    /// Joint-velocity norm above which the robot is considered fallen (rad/s).
    pub velocity_threshold: f64,
    /// CoM height below which the robot is considered fallen (m).
    pub fall_height: f64,
    /// Joint-velocity norm below which the robot counts as settled (rad/s).
    pub settle_threshold: f64,
    /// Allowed touchdown error |s_td - s_des| for a successful step (m),
    /// capped at half the commanded step.
    pub step_tolerance: f64,
    /// Half foot length: the final CoM must lie within the support interval
    /// widened by this margin (m).
    pub foot_half_length: f64,
    /// Initial swing-foot clearance (m).
    pub swing_clearance: f64,
    /// Baumgarte rate for the swing-foot contact constraint (1/s).
    pub contact_stabilization: f64,
    /// Smallest knee flexion before the passive knee stop engages (rad).
    pub knee_min_flexion: f64,
    /// Knee stop stiffness (N·m/rad) and damping (N·m·s/rad).
    pub knee_stop_stiffness: f64,
    pub knee_stop_damping: f64,
}

impl Default for BipedConfig {
    fn default() -> Self {
        Self {
            torso: LinkParams::rod(0.6, 50.0, 0.3),
            thigh: LinkParams::rod(0.48, 12.0, 0.2),
            shank: LinkParams::rod(0.48, 8.0, 0.2),
            torque_limits: [120.0, 500.0, 400.0, 400.0, 300.0],
            velocity_limits: [10.0; NJ],
            z_nom: 0.925,
            gravity: 9.81,
            dt: 1e-3,
            t_total: 7.0,
            velocity_threshold: 1e6,
            fall_height: 0.4,
            settle_threshold: 0.5,
            step_tolerance: 0.1,
            foot_half_length: 0.1,
            swing_clearance: 0.01,
            contact_stabilization: 20.0,
            knee_min_flexion: 0.02,
            knee_stop_stiffness: 3000.0,
            knee_stop_damping: 60.0,
        }
    }
}

impl BipedConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, link) in [("torso", &self.torso), ("thigh", &self.thigh), ("shank", &self.shank)] {
            if !(link.length > 0.0 && link.mass > 0.0 && link.inertia > 0.0) {
                return Err(ModelError::Config(format!(
                    "{name}: length, mass and inertia must be positive"
                )));
            }
            if !(link.com_offset >= 0.0 && link.com_offset.is_finite()) {
                return Err(ModelError::Config(format!("{name}: com offset must be non-negative")));
            }
        }
        if self.torque_limits.iter().any(|&l| !(l > 0.0)) {
            return Err(ModelError::Config("torque limits must be positive".into()));
        }
        if self.velocity_limits.iter().any(|&l| !(l > 0.0)) {
            return Err(ModelError::Config("velocity limits must be positive".into()));
        }
        if !(self.dt > 0.0) || !(self.t_total >= self.dt) {
            return Err(ModelError::Config("need dt > 0 and t_total >= dt".into()));
        }
        if !(self.z_nom > 0.0 && self.z_nom < self.thigh.length + self.shank.length) {
            return Err(ModelError::Config(format!(
                "z_nom = {} is not reachable by the stance leg",
                self.z_nom
            )));
        }
        if !(self.knee_stop_stiffness >= 0.0 && self.knee_stop_damping >= 0.0) {
            return Err(ModelError::Config("knee stop gains must be non-negative".into()));
        }
        if !(self.gravity > 0.0) {
            return Err(ModelError::Config("gravity must be positive".into()));
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.torso.mass + 2.0 * (self.thigh.mass + self.shank.mass)
    }

    /// Number of integration steps in a full episode.
    pub fn steps(&self) -> usize {
        (self.t_total / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactMode {
    SwingAirborne,
    DoubleSupport,
}

/// Touchdown event of the swing foot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Touchdown {
    /// Interpolated crossing time (s).
    pub time: f64,
    /// World x of the swing foot at the crossing (m).
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    /// Simulation time (s).
    pub t: f64,
    pub q: JointVector,
    pub qd: JointVector,
    /// Last computed accelerations.
    pub qdd: JointVector,
    /// Last applied (clamped) torques.
    pub tau: JointVector,
    pub contact: ContactMode,
    /// World position of the welded stance ankle.
    pub stance_anchor: Vector2<f64>,
    pub touchdown: Option<Touchdown>,
}

impl RobotState {
    /// World anchor of the landed swing foot, if any.
    pub fn swing_anchor(&self) -> Option<Vector2<f64>> {
        self.touchdown.map(|td| Vector2::new(td.x, 0.0))
    }
}

/// Points whose kinematics the controller and the pipeline ask for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackedPoint {
    Com,
    SwingFoot,
}

/// World position, velocity, Jacobian and bias acceleration `J̇ q̇` of a point.
#[derive(Debug, Clone)]
pub struct PointKinematics {
    pub pos: Vector2<f64>,
    pub vel: Vector2<f64>,
    pub jac: PointJacobian,
    pub bias: Vector2<f64>,
}

/// Everything the controller and integrator need at one configuration.
#[derive(Debug, Clone)]
pub struct Terms {
    pub mass: MassMatrix,
    /// Coriolis, centrifugal and gravity forces.
    pub h: JointVector,
    /// Passive knee-stop torques.
    pub passive: JointVector,
    pub com: PointKinematics,
    pub foot: PointKinematics,
    /// Absolute torso angle (rad) and its rate.
    pub torso_angle: f64,
    pub torso_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationKind {
    Running,
    Success,
    FellVelocity,
    FellHeight,
    TimeoutUnsettled,
}

impl TerminationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Running => "running",
            Self::Success => "success",
            Self::FellVelocity => "fell-velocity",
            Self::FellHeight => "fell-height",
            Self::TimeoutUnsettled => "timeout-unsettled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "running" => Self::Running,
            "success" => Self::Success,
            "fell-velocity" => Self::FellVelocity,
            "fell-height" => Self::FellHeight,
            "timeout-unsettled" => Self::TimeoutUnsettled,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminationStatus {
    pub kind: TerminationKind,
    /// Termination time (s); the current time while running.
    pub t_term: f64,
}

// Link indices in the body table; they coincide with the joint that rotates
// each link relative to its parent.
const LINKS: usize = 5;
const ANGLE_MASK: [[f64; NJ]; LINKS] = [
    [1.0, 0.0, 0.0, 0.0, 0.0],
    [1.0, 1.0, 0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0, 0.0, 0.0],
    [1.0, 1.0, 1.0, 1.0, 0.0],
    [1.0, 1.0, 1.0, 1.0, 1.0],
];

/// A world point written as anchor + Σ coef_k u(φ_k).
#[derive(Debug, Clone, Copy)]
struct Chain {
    terms: [(usize, f64); 4],
    len: usize,
}

#[derive(Clone, Copy)]
struct LinkAngles {
    phi: [f64; LINKS],
    rate: [f64; LINKS],
    sin: [f64; LINKS],
    cos: [f64; LINKS],
}

impl LinkAngles {
    fn new(q: &JointVector, qd: &JointVector) -> Self {
        let mut phi = [0.0; LINKS];
        let mut rate = [0.0; LINKS];
        let mut acc = 0.0;
        let mut acc_rate = 0.0;
        for k in 0..LINKS {
            acc += q[k];
            acc_rate += qd[k];
            phi[k] = acc;
            rate[k] = acc_rate;
        }
        Self {
            phi,
            rate,
            sin: phi.map(f64::sin),
            cos: phi.map(f64::cos),
        }
    }
}

impl Chain {
    fn new(terms: &[(usize, f64)]) -> Self {
        let mut out = [(0, 0.0); 4];
        out[..terms.len()].copy_from_slice(terms);
        Self {
            terms: out,
            len: terms.len(),
        }
    }

    fn eval(&self, angles: &LinkAngles, anchor: &Vector2<f64>, qd: &JointVector) -> PointKinematics {
        let mut pos = *anchor;
        let mut jac = PointJacobian::zeros();
        let mut bias = Vector2::zeros();
        for &(k, c) in &self.terms[..self.len] {
            let (s, co) = (angles.sin[k], angles.cos[k]);
            pos.x += c * s;
            pos.y += c * co;
            // d/dφ (sin φ, cos φ) = (cos φ, -sin φ); every joint up to k turns link k.
            for j in 0..=k {
                jac[(0, j)] += c * co;
                jac[(1, j)] -= c * s;
            }
            let w2 = angles.rate[k] * angles.rate[k];
            bias.x -= c * s * w2;
            bias.y -= c * co * w2;
        }
        let vel = jac * qd;
        PointKinematics { pos, vel, jac, bias }
    }
}

/// The planar biped: link geometry plus the termination protocol.
#[derive(Debug, Clone)]
pub struct Biped {
    cfg: BipedConfig,
    // Per-link data in body-table order.
    masses: [f64; LINKS],
    inertias: [f64; LINKS],
    com_chains: [Chain; LINKS],
    foot_chain: Chain,
}

impl Biped {
    pub fn new(cfg: BipedConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let masses = [
            cfg.shank.mass,
            cfg.thigh.mass,
            cfg.torso.mass,
            cfg.thigh.mass,
            cfg.shank.mass,
        ];
        let inertias = [
            cfg.shank.inertia,
            cfg.thigh.inertia,
            cfg.torso.inertia,
            cfg.thigh.inertia,
            cfg.shank.inertia,
        ];
        let (ls, lt) = (cfg.shank.length, cfg.thigh.length);
        let com_chains = [
            Chain::new(&[(0, ls - cfg.shank.com_offset)]),
            Chain::new(&[(0, ls), (1, lt - cfg.thigh.com_offset)]),
            Chain::new(&[(0, ls), (1, lt), (2, cfg.torso.com_offset)]),
            Chain::new(&[(0, ls), (1, lt), (3, -cfg.thigh.com_offset)]),
            Chain::new(&[(0, ls), (1, lt), (3, -lt), (4, -cfg.shank.com_offset)]),
        ];
        let foot_chain = Chain::new(&[(0, ls), (1, lt), (3, -lt), (4, -ls)]);
        Ok(Self {
            cfg,
            masses,
            inertias,
            com_chains,
            foot_chain,
        })
    }

    pub fn config(&self) -> &BipedConfig {
        &self.cfg
    }

    /// Mass matrix, bias forces and task-point kinematics in one pass.
    pub fn terms(&self, state: &RobotState) -> Terms {
        let angles = LinkAngles::new(&state.q, &state.qd);
        let anchor = state.stance_anchor;
        let g = self.cfg.gravity;
        let total = self.cfg.total_mass();

        let mut mass = MassMatrix::zeros();
        let mut h = JointVector::zeros();
        let mut com_pos = Vector2::zeros();
        let mut com_jac = PointJacobian::zeros();
        let mut com_bias = Vector2::zeros();
        for (b, chain) in self.com_chains.iter().enumerate() {
            let pk = chain.eval(&angles, &anchor, &state.qd);
            let m = self.masses[b];
            let a = Vector5::from_row_slice(&ANGLE_MASK[b]);
            mass += m * pk.jac.transpose() * pk.jac + self.inertias[b] * a * a.transpose();
            h += m * pk.jac.transpose() * (pk.bias + Vector2::new(0.0, g));
            com_pos += m * pk.pos;
            com_jac += m * pk.jac;
            com_bias += m * pk.bias;
        }
        let passive = self.knee_stop_torques(&state.q, &state.qd);
        let com_jac = com_jac / total;
        let com = PointKinematics {
            pos: com_pos / total,
            vel: com_jac * state.qd,
            jac: com_jac,
            bias: com_bias / total,
        };
        let foot = self.foot_chain.eval(&angles, &anchor, &state.qd);
        Terms {
            mass,
            h,
            passive,
            com,
            foot,
            torso_angle: angles.phi[2],
            torso_rate: angles.rate[2],
        }
    }

    /// Passive torques of the knee stops. The stance knee flexes negative and
    /// the swing knee positive; each stop pushes back once the knee comes
    /// within `knee_min_flexion` of straight.
    pub fn knee_stop_torques(&self, q: &JointVector, qd: &JointVector) -> JointVector {
        let cfg = &self.cfg;
        let mut tau = JointVector::zeros();
        for (joint, sign) in [(STANCE_KNEE, -1.0), (SWING_KNEE, 1.0)] {
            let flexion = sign * q[joint];
            let pen = cfg.knee_min_flexion - flexion;
            if pen > 0.0 {
                let rate = sign * qd[joint];
                let push = (cfg.knee_stop_stiffness * pen - cfg.knee_stop_damping * rate).max(0.0);
                tau[joint] = sign * push;
            }
        }
        tau
    }

    pub fn point(&self, state: &RobotState, point: TrackedPoint) -> PointKinematics {
        match point {
            TrackedPoint::Com => self.terms(state).com,
            TrackedPoint::SwingFoot => {
                let angles = LinkAngles::new(&state.q, &state.qd);
                self.foot_chain.eval(&angles, &state.stance_anchor, &state.qd)
            }
        }
    }

    /// CoM world position and velocity.
    pub fn com_state(&self, state: &RobotState) -> (Vector2<f64>, Vector2<f64>) {
        let com = self.point(state, TrackedPoint::Com);
        (com.pos, com.vel)
    }

    /// ∂(world position)/∂q of the requested point.
    pub fn point_jacobian(&self, state: &RobotState, point: TrackedPoint) -> PointJacobian {
        self.point(state, point).jac
    }

    /// Kinetic plus potential energy (J), ground level as zero potential.
    pub fn energy(&self, state: &RobotState) -> f64 {
        let angles = LinkAngles::new(&state.q, &state.qd);
        let terms = self.terms(state);
        let kinetic = 0.5 * state.qd.dot(&(terms.mass * state.qd));
        let potential: f64 = self
            .com_chains
            .iter()
            .enumerate()
            .map(|(b, chain)| {
                let pk = chain.eval(&angles, &state.stance_anchor, &state.qd);
                self.masses[b] * self.cfg.gravity * pk.pos.y
            })
            .sum();
        kinetic + potential
    }

    /// Torques that produce `qdd` at the given state. In double support the
    /// contact force is chosen to minimise the limit-normalised torque norm.
    pub fn inverse_dynamics(&self, state: &RobotState, qdd: &JointVector) -> JointVector {
        let terms = self.terms(state);
        self.inverse_dynamics_with(state, &terms, qdd, true)
    }

    pub(crate) fn inverse_dynamics_with(
        &self,
        state: &RobotState,
        terms: &Terms,
        qdd: &JointVector,
        with_passive: bool,
    ) -> JointVector {
        let mut free = terms.mass * qdd + terms.h;
        if with_passive {
            free -= terms.passive;
        }
        match state.contact {
            ContactMode::SwingAirborne => free,
            ContactMode::DoubleSupport => {
                let w2 = JointVector::from_fn(|i, _| {
                    let l = self.cfg.torque_limits[i];
                    1.0 / (l * l)
                });
                let jw = terms.foot.jac * SMatrix::<f64, NJ, NJ>::from_diagonal(&w2);
                let a: Matrix2<f64> = jw * terms.foot.jac.transpose();
                match a.try_inverse() {
                    Some(inv) => {
                        let lambda = inv * (jw * free);
                        free - terms.foot.jac.transpose() * lambda
                    }
                    None => free,
                }
            }
        }
    }

    /// Joint accelerations for applied torques `tau`, honouring the active
    /// contact constraint.
    pub fn forward_dynamics(&self, state: &RobotState, tau: &JointVector) -> Result<JointVector, ModelError> {
        let terms = self.terms(state);
        self.forward_dynamics_with(state, &terms, tau)
    }

    pub(crate) fn forward_dynamics_with(
        &self,
        state: &RobotState,
        terms: &Terms,
        tau: &JointVector,
    ) -> Result<JointVector, ModelError> {
        let chol = Cholesky::new(terms.mass).ok_or(ModelError::SingularMassMatrix)?;
        let rhs = tau + terms.passive - terms.h;
        let free = chol.solve(&rhs);
        match (state.contact, state.swing_anchor()) {
            (ContactMode::DoubleSupport, Some(anchor)) => {
                let jac = &terms.foot.jac;
                let minv_jt = chol.solve(&jac.transpose());
                let a: Matrix2<f64> = jac * minv_jt;
                let alpha = self.cfg.contact_stabilization;
                let target =
                    -terms.foot.bias - 2.0 * alpha * terms.foot.vel - alpha * alpha * (terms.foot.pos - anchor);
                let inv = a.try_inverse().ok_or(ModelError::SingularContact)?;
                let lambda = inv * (target - jac * free);
                Ok(free + minv_jt * lambda)
            }
            _ => Ok(free),
        }
    }

    fn clamp_torques(&self, tau: &JointVector) -> JointVector {
        JointVector::from_fn(|i, _| {
            let l = self.cfg.torque_limits[i];
            tau[i].clamp(-l, l)
        })
    }

    /// Semi-implicit Euler step with torque clamping and touchdown detection.
    pub fn step(&self, state: &RobotState, tau: &JointVector) -> Result<RobotState, ModelError> {
        let dt = self.cfg.dt;
        let tau = self.clamp_torques(tau);
        let terms = self.terms(state);
        let qdd = self.forward_dynamics_with(state, &terms, &tau)?;
        let mut next = state.clone();
        next.qd += qdd * dt;
        next.q += next.qd * dt;
        next.qdd = qdd;
        next.tau = tau;
        next.t = state.t + dt;

        if state.contact == ContactMode::SwingAirborne {
            let before = terms.foot.pos;
            let after = self.point(&next, TrackedPoint::SwingFoot);
            if after.pos.y <= 0.0 && after.vel.y < 0.0 {
                let frac = if before.y > after.pos.y {
                    (before.y / (before.y - after.pos.y)).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                next.touchdown = Some(Touchdown {
                    time: state.t + frac * dt,
                    x: before.x + frac * (after.pos.x - before.x),
                });
                next.contact = ContactMode::DoubleSupport;
                next.qd = self.plastic_impact(&next, &after.jac)?;
            }
        }
        Ok(next)
    }

    /// Velocity after a perfectly inelastic impact at the swing foot.
    fn plastic_impact(&self, state: &RobotState, jac: &PointJacobian) -> Result<JointVector, ModelError> {
        let mass = self.terms(state).mass;
        let chol = Cholesky::new(mass).ok_or(ModelError::SingularMassMatrix)?;
        let minv_jt = chol.solve(&jac.transpose());
        let a: Matrix2<f64> = jac * minv_jt;
        let inv = a.try_inverse().ok_or(ModelError::SingularContact)?;
        Ok(state.qd - minv_jt * (inv * (jac * state.qd)))
    }

    /// Standing pose with the CoM above the stance ankle at `z_nom`, an
    /// upright torso and the swing foot hovering above the ankle; joint
    /// velocities are the minimum-norm solution of `J_com q̇ = (ẋ₀, 0)`.
    pub fn init_standing(&self, com_velocity: f64) -> Result<RobotState, ModelError> {
        let cfg = &self.cfg;
        let mut state = RobotState {
            t: 0.0,
            q: JointVector::from([0.15, -0.3, 0.15, -0.15, 0.3]),
            qd: JointVector::zeros(),
            qdd: JointVector::zeros(),
            tau: JointVector::zeros(),
            contact: ContactMode::SwingAirborne,
            stance_anchor: Vector2::zeros(),
            touchdown: None,
        };
        let target = nalgebra::Vector5::new(0.0, cfg.z_nom, 0.0, cfg.swing_clearance, 0.0);
        let torso_row = Vector5::from_row_slice(&ANGLE_MASK[2]).transpose();
        let mut converged = false;
        for _ in 0..100 {
            let t = self.terms(&state);
            let value = Vector5::new(t.com.pos.x, t.com.pos.y, t.foot.pos.x, t.foot.pos.y, t.torso_angle);
            let err = target - value;
            if err.amax() < 1e-13 {
                converged = true;
                break;
            }
            let mut jac = MassMatrix::zeros();
            jac.fixed_view_mut::<2, NJ>(0, 0).copy_from(&t.com.jac);
            jac.fixed_view_mut::<2, NJ>(2, 0).copy_from(&t.foot.jac);
            jac.fixed_view_mut::<1, NJ>(4, 0).copy_from(&torso_row);
            let dq = jac
                .lu()
                .solve(&err)
                .ok_or_else(|| ModelError::Kinematics("singular standing-pose Jacobian".into()))?;
            state.q += dq;
        }
        if !converged || state.q.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Kinematics(format!(
                "no standing pose reaches CoM height {}",
                cfg.z_nom
            )));
        }
        if state.q[STANCE_KNEE] >= 0.0 {
            return Err(ModelError::Kinematics(
                "standing pose converged to a hyper-extended stance knee".into(),
            ));
        }

        let jac = self.point_jacobian(&state, TrackedPoint::Com);
        let jjt: Matrix2<f64> = jac * jac.transpose();
        let inv = jjt
            .try_inverse()
            .ok_or_else(|| ModelError::Kinematics("singular CoM Jacobian".into()))?;
        state.qd = jac.transpose() * (inv * Vector2::new(com_velocity, 0.0));
        for i in 0..NJ {
            if state.qd[i].abs() > cfg.velocity_limits[i] {
                return Err(ModelError::Kinematics(format!(
                    "initial velocity {com_velocity} m/s needs {:.3} rad/s on joint {i}, above its limit",
                    state.qd[i]
                )));
            }
        }
        Ok(state)
    }

    /// Termination protocol. `step_target` is the commanded step position;
    /// when given, success additionally requires a touchdown within
    /// `min(step_tolerance, target / 2)` of it and a final CoM over the
    /// support interval.
    pub fn check_termination(&self, state: &RobotState, t: f64, step_target: Option<f64>) -> TerminationStatus {
        let cfg = &self.cfg;
        let speed = state.qd.norm();
        let running = |kind| TerminationStatus { kind, t_term: t };
        if !(speed <= cfg.velocity_threshold) {
            return running(TerminationKind::FellVelocity);
        }
        let (com, _) = self.com_state(state);
        if com.y < cfg.fall_height {
            return running(TerminationKind::FellHeight);
        }
        if t + 0.5 * cfg.dt < cfg.t_total {
            return running(TerminationKind::Running);
        }
        let settled = state.contact == ContactMode::DoubleSupport && speed < cfg.settle_threshold;
        let on_target = match (step_target, state.touchdown) {
            (None, _) => true,
            (Some(target), Some(td)) => {
                let back = state.stance_anchor.x.min(td.x) - cfg.foot_half_length;
                let front = state.stance_anchor.x.max(td.x) + cfg.foot_half_length;
                let tol = cfg.step_tolerance.min(0.5 * target.abs());
                (td.x - target).abs() <= tol && com.x >= back && com.x <= front
            }
            (Some(_), None) => false,
        };
        TerminationStatus {
            kind: if settled && on_target {
                TerminationKind::Success
            } else {
                TerminationKind::TimeoutUnsettled
            },
            t_term: cfg.t_total,
        }
    }
}
