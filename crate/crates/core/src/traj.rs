//! CoM and swing-foot reference trajectories.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four open gait parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    /// Minimum step time (s); earliest CoM pivot switch.
    pub t_min: f64,
    /// Maximum step length (m); caps the CoM landing pivot.
    pub s_max: f64,
    /// Swing-foot start time (s).
    pub t_swing_start: f64,
    /// Swing-foot speed (m/s).
    pub s_speed: f64,
}

impl GaitParams {
    pub fn to_array(&self) -> [f64; 4] {
        [self.t_min, self.s_max, self.t_swing_start, self.s_speed]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            t_min: v[0],
            s_max: v[1],
            t_swing_start: v[2],
            s_speed: v[3],
        }
    }

    /// Swing duration `t_swing_start + s / s_speed` for a step of length `s`.
    pub fn swing_time(&self, s: f64) -> f64 {
        self.t_swing_start + s / self.s_speed
    }
}

/// Closed box bounds on [`GaitParams`], one `[lo, hi]` pair per field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitBounds {
    pub t_min: [f64; 2],
    pub s_max: [f64; 2],
    pub t_swing_start: [f64; 2],
    pub s_speed: [f64; 2],
}

impl Default for GaitBounds {
    fn default() -> Self {
        Self {
            t_min: [0.01, 0.99],
            s_max: [0.01, 0.99],
            t_swing_start: [0.01, 0.08],
            s_speed: [0.2, 3.0],
        }
    }
}

impl GaitBounds {
    pub fn as_array(&self) -> [[f64; 2]; 4] {
        [self.t_min, self.s_max, self.t_swing_start, self.s_speed]
    }

    pub fn validate(&self) -> Result<()> {
        for [lo, hi] in self.as_array() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Parameter(format!("bad bound [{lo}, {hi}]")));
            }
        }
        if self.s_speed[0] <= 0.0 {
            return Err(Error::Parameter("swing speed bound must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, p: &GaitParams) -> bool {
        self.as_array()
            .iter()
            .zip(p.to_array())
            .all(|([lo, hi], v)| v >= *lo && v <= *hi)
    }

    pub fn check(&self, p: &GaitParams) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::Parameter(format!("{p:?} outside bounds {self:?}")))
        }
    }

    /// Map a point of the unit cube onto the box.
    pub fn denormalize(&self, u: &[f64; 4]) -> GaitParams {
        let b = self.as_array();
        GaitParams::from_array(std::array::from_fn(|i| {
            (b[i][0] + u[i].clamp(0.0, 1.0) * (b[i][1] - b[i][0])).clamp(b[i][0], b[i][1])
        }))
    }

    pub fn normalize(&self, p: &GaitParams) -> [f64; 4] {
        let b = self.as_array();
        let v = p.to_array();
        std::array::from_fn(|i| (v[i] - b[i][0]) / (b[i][1] - b[i][0]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwingTrajConfig {
    /// Apex height of the swing foot (m).
    pub z_max: f64,
}

impl Default for SwingTrajConfig {
    fn default() -> Self {
        Self { z_max: 0.08 }
    }
}

/// Position, velocity and acceleration of a quintic minimum-jerk blend from
/// `s0` to `s1` over `duration`, evaluated at `t ∈ [0, duration]`.
pub fn min_jerk(s0: f64, s1: f64, duration: f64, t: f64) -> Result<(f64, f64, f64)> {
    if !(duration > 0.0) {
        return Err(Error::Parameter(format!(
            "min-jerk duration must be positive, got {duration}"
        )));
    }
    let u = (t / duration).clamp(0.0, 1.0);
    let d = s1 - s0;
    let (u2, u3) = (u * u, u * u * u);
    let pos = s0 + d * u3 * (10.0 - 15.0 * u + 6.0 * u2);
    let vel = d * 30.0 * u2 * (1.0 - u) * (1.0 - u) / duration;
    let acc = d * 60.0 * u * (1.0 - 3.0 * u + 2.0 * u2) / (duration * duration);
    Ok((pos, vel, acc))
}

/// A reference sampled uniformly at the simulation period.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub period: f64,
    pub start_time: f64,
    pub samples: Vec<[f64; 3]>,
}

/// Reference position, velocity and acceleration at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajSample {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub acc: Vector3<f64>,
}

impl Trajectory {
    fn from_fn(period: f64, duration: f64, f: impl Fn(f64) -> [f64; 3]) -> Self {
        let n = (duration / period).round() as usize + 1;
        Self {
            period,
            start_time: 0.0,
            samples: (0..n).map(|k| f(k as f64 * period)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + (self.samples.len().saturating_sub(1)) as f64 * self.period
    }

    fn at(&self, k: usize) -> Vector3<f64> {
        Vector3::from(self.samples[k])
    }

    /// Derivatives at sample `k` by central differences (one-sided at the
    /// first sample, zero at the last where the reference holds).
    fn derivatives(&self, k: usize) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.samples.len();
        let h = self.period;
        if n < 2 || k + 1 >= n {
            return (Vector3::zeros(), Vector3::zeros());
        }
        if k == 0 {
            return ((self.at(1) - self.at(0)) / h, Vector3::zeros());
        }
        let (prev, cur, next) = (self.at(k - 1), self.at(k), self.at(k + 1));
        ((next - prev) / (2.0 * h), (next - 2.0 * cur + prev) / (h * h))
    }

    /// Sample at index `k`, holding the final value beyond the end.
    pub fn sample_index(&self, k: usize) -> TrajSample {
        let last = self.samples.len() - 1;
        if k >= last {
            return TrajSample {
                pos: self.at(last),
                vel: Vector3::zeros(),
                acc: Vector3::zeros(),
            };
        }
        let (vel, acc) = self.derivatives(k);
        TrajSample {
            pos: self.at(k),
            vel,
            acc,
        }
    }

    /// Linear interpolation between samples; derivatives interpolate the
    /// nodal finite differences.
    pub fn sample(&self, t: f64) -> TrajSample {
        let s = ((t - self.start_time) / self.period).max(0.0);
        let k = s.floor() as usize;
        let last = self.samples.len() - 1;
        if k >= last {
            return self.sample_index(last);
        }
        let frac = s - k as f64;
        if frac == 0.0 {
            return self.sample_index(k);
        }
        let a = self.sample_index(k);
        let b = self.sample_index(k + 1);
        TrajSample {
            pos: a.pos.lerp(&b.pos, frac),
            vel: a.vel.lerp(&b.vel, frac),
            acc: a.acc.lerp(&b.acc, frac),
        }
    }

    /// CSV with header `t,x,y,z`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,z\n");
        for (k, s) in self.samples.iter().enumerate() {
            let t = self.start_time + k as f64 * self.period;
            out.push_str(&format!("{t},{},{},{}\n", s[0], s[1], s[2]));
        }
        out
    }
}

/// Swing-foot reference: hold the start pose until `t_swing_start`, then a
/// min-jerk sweep in x from the start to `s_des` over `s_des / s_speed`
/// while z rises to the apex and descends to the ground in two min-jerk
/// halves; hold the landing pose afterwards.
pub fn gen_swing_traj(
    s_des: f64,
    p: &GaitParams,
    cfg: &SwingTrajConfig,
    start: [f64; 3],
    period: f64,
    duration: f64,
) -> Result<Trajectory> {
    if !(s_des > 0.0) {
        return Err(Error::Parameter(format!("step position must be positive, got {s_des}")));
    }
    if !(p.s_speed > 0.0) || !(p.t_swing_start >= 0.0) {
        return Err(Error::Parameter(format!("invalid swing parameters {p:?}")));
    }
    if !(cfg.z_max > 0.0) {
        return Err(Error::Parameter("apex height must be positive".into()));
    }
    if !(period > 0.0) {
        return Err(Error::Parameter("sample period must be positive".into()));
    }
    let sweep = s_des / p.s_speed;
    let half = 0.5 * sweep;
    Ok(Trajectory::from_fn(period, duration, |t| {
        let tau = t - p.t_swing_start;
        if tau <= 0.0 {
            return start;
        }
        let tau = tau.min(sweep);
        let x = min_jerk(start[0], s_des, sweep, tau).map(|v| v.0).unwrap_or(s_des);
        let z = if tau <= half {
            min_jerk(start[2], cfg.z_max, half, tau)
        } else {
            min_jerk(cfg.z_max, 0.0, half, tau - half)
        }
        .map(|v| v.0)
        .unwrap_or(0.0);
        [x, start[1], z]
    }))
}

/// Piecewise inverted-pendulum CoM plan: the pivot sits at the stance ankle
/// until the switch time, then moves to the landing pivot; the plan freezes
/// once its velocity first reaches zero after the switch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipmPlan {
    pub omega: f64,
    pub x0_dot: f64,
    pub t_switch: f64,
    pub landing_pivot: f64,
    pub switch_pos: f64,
    pub switch_vel: f64,
    /// Time at which the plan stops; `None` if it never decelerates to rest.
    pub t_freeze: Option<f64>,
}

impl LipmPlan {
    pub fn new(x0_dot: f64, p: &GaitParams, s_des: f64, z_nom: f64, gravity: f64) -> Self {
        let omega = (gravity / z_nom).sqrt();
        let t_switch = p.t_min.max(s_des / p.s_speed + p.t_swing_start);
        let landing_pivot = s_des.min(p.s_max);
        let (sh, ch) = ((omega * t_switch).sinh(), (omega * t_switch).cosh());
        let switch_pos = x0_dot / omega * sh;
        let switch_vel = x0_dot * ch;
        // v(τ) = ω d sinh(ωτ) + v_s cosh(ωτ) with d = x_s - pivot; zero at
        // tanh(ωτ) = -v_s / (ω d) when that ratio lies in (0, 1).
        let d = switch_pos - landing_pivot;
        let t_freeze = if switch_vel <= 0.0 {
            Some(t_switch)
        } else if d < 0.0 {
            let r = -switch_vel / (omega * d);
            (r < 1.0).then(|| t_switch + r.atanh() / omega)
        } else {
            None
        };
        Self {
            omega,
            x0_dot,
            t_switch,
            landing_pivot,
            switch_pos,
            switch_vel,
            t_freeze,
        }
    }

    /// Pivot active at time `t`.
    pub fn pivot(&self, t: f64) -> f64 {
        if t < self.t_switch {
            0.0
        } else {
            self.landing_pivot
        }
    }

    /// Plan position and velocity at time `t`.
    pub fn state(&self, t: f64) -> (f64, f64) {
        let w = self.omega;
        let t = match self.t_freeze {
            Some(tf) if t > tf => {
                let (x, _) = self.state(tf);
                return (x, 0.0);
            }
            _ => t,
        };
        if t < self.t_switch {
            let (sh, ch) = ((w * t).sinh(), (w * t).cosh());
            (self.x0_dot / w * sh, self.x0_dot * ch)
        } else {
            let tau = t - self.t_switch;
            let d = self.switch_pos - self.landing_pivot;
            let (sh, ch) = ((w * tau).sinh(), (w * tau).cosh());
            (
                self.landing_pivot + d * ch + self.switch_vel / w * sh,
                w * d * sh + self.switch_vel * ch,
            )
        }
    }
}

/// CoM reference at constant height `z_nom` following [`LipmPlan`].
pub fn gen_com_traj(
    x0_dot: f64,
    p: &GaitParams,
    s_des: f64,
    z_nom: f64,
    gravity: f64,
    period: f64,
    duration: f64,
) -> Result<Trajectory> {
    if !(x0_dot >= 0.0) {
        return Err(Error::Parameter(format!(
            "initial CoM velocity must be non-negative, got {x0_dot}"
        )));
    }
    if !(z_nom > 0.0) || !(period > 0.0) {
        return Err(Error::Parameter("need z_nom > 0 and period > 0".into()));
    }
    let plan = LipmPlan::new(x0_dot, p, s_des, z_nom, gravity);
    Ok(Trajectory::from_fn(period, duration, |t| [plan.state(t).0, 0.0, z_nom]))
}
