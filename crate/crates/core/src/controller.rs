//! Strict-priority task-space inverse dynamics.
//!
//! Each control tick turns task-space PD targets into joint accelerations by
//! lexicographic least squares: every priority level is solved in the
//! nullspace left by the levels above it. Torques follow from inverse
//! dynamics with the active contact and are clamped to the joint limits.

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Biped, ContactMode, JointVector, RobotState, Terms, TrackedPoint, NJ};
use crate::traj::TrajSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SwingFoot,
    Com,
    Posture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerGains {
    pub swing_kp: f64,
    pub swing_kd: f64,
    pub com_kp: f64,
    pub com_kd: f64,
    /// Torso-uprightness regularization gains.
    pub posture_kp: f64,
    pub posture_kd: f64,
    /// Damped pseudoinverse damping factor.
    pub damping: f64,
    /// Priority levels, highest first; tasks within a level share priority.
    pub priority: Vec<Vec<Task>>,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            swing_kp: 400.0,
            swing_kd: 40.0,
            com_kp: 100.0,
            com_kd: 20.0,
            posture_kp: 100.0,
            posture_kd: 20.0,
            damping: 0.1,
            priority: vec![vec![Task::SwingFoot], vec![Task::Com], vec![Task::Posture]],
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<()> {
        let level_of = |task| self.priority.iter().position(|lvl| lvl.contains(&task));
        for task in [Task::SwingFoot, Task::Com, Task::Posture] {
            if self.priority.iter().flatten().filter(|&&t| t == task).count() != 1 {
                return Err(Error::Parameter(format!(
                    "task {task:?} must appear exactly once in the priority list"
                )));
            }
        }
        if level_of(Task::Com) < level_of(Task::SwingFoot) {
            return Err(Error::Parameter(
                "the CoM task may not outrank the swing-foot task".into(),
            ));
        }
        for (name, v) in [
            ("swing_kp", self.swing_kp),
            ("swing_kd", self.swing_kd),
            ("com_kp", self.com_kp),
            ("com_kd", self.com_kd),
            ("posture_kp", self.posture_kp),
            ("posture_kd", self.posture_kd),
        ] {
            if !(v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if !(self.damping >= 0.0) {
            return Err(Error::Parameter("damping must be non-negative".into()));
        }
        Ok(())
    }
}

/// World-frame position and velocity error (reference minus actual) of a
/// task point.
pub fn task_error(
    biped: &Biped,
    x_ref: &Vector2<f64>,
    v_ref: &Vector2<f64>,
    state: &RobotState,
    task: TrackedPoint,
) -> (Vector2<f64>, Vector2<f64>) {
    let p = biped.point(state, task);
    (x_ref - p.pos, v_ref - p.vel)
}

/// Damped pseudoinverse `Aᵀ (A Aᵀ + λ² I)⁻¹`, with numerically null
/// directions dropped.
fn damped_pinv(a: &DMatrix<f64>, damping: f64) -> DMatrix<f64> {
    let gram = a * a.transpose();
    let eig = SymmetricEigen::new(gram);
    let scale = eig.eigenvalues.amax().max(1.0);
    let inv_diag = eig.eigenvalues.map(|s2| {
        if s2 <= 1e-13 * scale {
            0.0
        } else {
            1.0 / (s2 + damping * damping)
        }
    });
    let inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_diag) * eig.eigenvectors.transpose();
    a.transpose() * inv
}

fn sample_xz(v: &nalgebra::Vector3<f64>) -> Vector2<f64> {
    Vector2::new(v.x, v.z)
}

/// Stateless task-priority controller.
#[derive(Debug, Clone)]
pub struct TaskController {
    gains: ControllerGains,
}

impl TaskController {
    pub fn new(gains: ControllerGains) -> Result<Self> {
        gains.validate()?;
        Ok(Self { gains })
    }

    pub fn gains(&self) -> &ControllerGains {
        &self.gains
    }

    /// Rows `J q̈ = rhs` of one task at the current state.
    fn task_rows(
        &self,
        task: Task,
        terms: &Terms,
        com_ref: &TrajSample,
        swing_ref: &TrajSample,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let g = &self.gains;
        match task {
            Task::SwingFoot | Task::Com => {
                let (kin, r, kp, kd) = if task == Task::SwingFoot {
                    (&terms.foot, swing_ref, g.swing_kp, g.swing_kd)
                } else {
                    (&terms.com, com_ref, g.com_kp, g.com_kd)
                };
                let target =
                    sample_xz(&r.acc) + kd * (sample_xz(&r.vel) - kin.vel) + kp * (sample_xz(&r.pos) - kin.pos);
                (
                    DMatrix::from_iterator(2, NJ, kin.jac.iter().copied()),
                    DVector::from_column_slice((target - kin.bias).as_slice()),
                )
            }
            Task::Posture => {
                let target = -g.posture_kp * terms.torso_angle - g.posture_kd * terms.torso_rate;
                (
                    DMatrix::from_row_slice(1, NJ, &[1.0, 1.0, 1.0, 0.0, 0.0]),
                    DVector::from_element(1, target),
                )
            }
        }
    }

    fn accelerations_with(
        &self,
        biped: &Biped,
        terms: &Terms,
        state: &RobotState,
        com_ref: &TrajSample,
        swing_ref: &TrajSample,
    ) -> JointVector {
        let mut qdd = DVector::<f64>::zeros(NJ);
        let mut null = DMatrix::<f64>::identity(NJ, NJ);
        // Damping regularizes the solve only; the nullspace uses the exact
        // pseudoinverse so lower levels cannot leak into higher ones.
        let solve_level = |jac: DMatrix<f64>, rhs: DVector<f64>, qdd: &mut DVector<f64>, null: &mut DMatrix<f64>| {
            let projected = &jac * &*null;
            let pinv = damped_pinv(&projected, self.gains.damping);
            let residual = rhs - &jac * &*qdd;
            *qdd += &pinv * residual;
            *null -= damped_pinv(&projected, 0.0) * projected;
        };

        let in_contact = state.contact == ContactMode::DoubleSupport;
        if let (true, Some(anchor)) = (in_contact, state.swing_anchor()) {
            let alpha = biped.config().contact_stabilization;
            let target = -2.0 * alpha * terms.foot.vel - alpha * alpha * (terms.foot.pos - anchor);
            solve_level(
                DMatrix::from_iterator(2, NJ, terms.foot.jac.iter().copied()),
                DVector::from_column_slice((target - terms.foot.bias).as_slice()),
                &mut qdd,
                &mut null,
            );
        }
        for level in &self.gains.priority {
            let mut rows: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(level.len());
            for &task in level {
                if in_contact && task == Task::SwingFoot {
                    continue;
                }
                rows.push(self.task_rows(task, terms, com_ref, swing_ref));
            }
            if rows.is_empty() {
                continue;
            }
            let n_rows: usize = rows.iter().map(|(j, _)| j.nrows()).sum();
            let mut jac = DMatrix::zeros(n_rows, NJ);
            let mut rhs = DVector::zeros(n_rows);
            let mut r0 = 0;
            for (j, r) in rows {
                let n = j.nrows();
                jac.rows_mut(r0, n).copy_from(&j);
                rhs.rows_mut(r0, n).copy_from(&r);
                r0 += n;
            }
            solve_level(jac, rhs, &mut qdd, &mut null);
        }
        JointVector::from_iterator(qdd.iter().copied())
    }

    /// Joint accelerations demanded by the task hierarchy.
    pub fn solve_accelerations(
        &self,
        biped: &Biped,
        com_ref: &TrajSample,
        swing_ref: &TrajSample,
        state: &RobotState,
    ) -> JointVector {
        let terms = biped.terms(state);
        self.accelerations_with(biped, &terms, state, com_ref, swing_ref)
    }

    /// Clamped joint torques for one control tick.
    pub fn solve_torques(
        &self,
        biped: &Biped,
        com_ref: &TrajSample,
        swing_ref: &TrajSample,
        state: &RobotState,
    ) -> JointVector {
        let terms = biped.terms(state);
        let qdd = self.accelerations_with(biped, &terms, state, com_ref, swing_ref);
        // The knee stops are treated as unmodelled hardware: the controller
        // does not cancel them.
        let tau = biped.inverse_dynamics_with(state, &terms, &qdd, false);
        let limits = &biped.config().torque_limits;
        JointVector::from_fn(|i, _| {
            let t = if tau[i].is_finite() { tau[i] } else { 0.0 };
            t.clamp(-limits[i], limits[i])
        })
    }
}
