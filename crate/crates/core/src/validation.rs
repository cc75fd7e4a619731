//! Closed-loop validation of the fitted maps: random initial conditions
//! inside the safe region (reach mode) and selector-chosen steps over the
//! safe velocity range (step-select mode).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{InitialCondition, Simulator};
use crate::error::{Error, Result};
use crate::maps::{SafeRegionModel, StepSelector};
use crate::model::TerminationKind;
use crate::paramopt::{worker_pool, ParamGrid};
use crate::traj::GaitParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationMode {
    Reach,
    StepSelect,
}

impl ValidationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ValidationMode::Reach => "reach",
            ValidationMode::StepSelect => "step-select",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub ic: InitialCondition,
    pub params: GaitParams,
    pub status: TerminationKind,
    pub s_td: f64,
    pub j_tau: f64,
}

impl Trial {
    pub fn success(&self) -> bool {
        self.status == TerminationKind::Success
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub mode: ValidationMode,
    pub seed: u64,
    pub trials: Vec<Trial>,
    /// Draws discarded for falling outside the safe region.
    pub rejected: usize,
}

pub const TRIAL_HEADER: &str = "trial,x0_dot,s_des,t_min,s_max,t_swing_start,s_speed,status,s_td,j_tau";

impl ValidationReport {
    pub fn successes(&self) -> usize {
        self.trials.iter().filter(|t| t.success()).count()
    }

    pub fn success_fraction(&self) -> f64 {
        if self.trials.is_empty() {
            return 0.0;
        }
        self.successes() as f64 / self.trials.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRIAL_HEADER}\n");
        for (k, t) in self.trials.iter().enumerate() {
            let p = &t.params;
            out.push_str(&format!(
                "{k},{},{},{},{},{},{},{},{},{}\n",
                t.ic.x0_dot,
                t.ic.s_des,
                p.t_min,
                p.s_max,
                p.t_swing_start,
                p.s_speed,
                t.status.as_str(),
                t.s_td,
                t.j_tau
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "mode={} seed={} trials={} successes={} fraction={:.4} rejected={}",
            self.mode.as_str(),
            self.seed,
            self.trials.len(),
            self.successes(),
            self.success_fraction(),
            self.rejected
        )
    }
}

/// Draws before giving up on finding `n` safe samples.
const MAX_DRAWS_PER_TRIAL: usize = 1000;

fn draw_safe<F>(n: usize, seed: u64, mut draw: F) -> Result<(Vec<InitialCondition>, usize)>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<Option<InitialCondition>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ics = Vec::with_capacity(n);
    let mut rejected = 0;
    while ics.len() < n {
        match draw(&mut rng)? {
            Some(ic) => ics.push(ic),
            None => {
                rejected += 1;
                if rejected > MAX_DRAWS_PER_TRIAL * n.max(1) {
                    return Err(Error::Contract("safe region is empty or vanishingly small".into()));
                }
            }
        }
    }
    Ok((ics, rejected))
}

fn simulate(sim: &Simulator, grid: &ParamGrid, ics: &[InitialCondition], workers: usize) -> Result<Vec<Trial>> {
    let pool = worker_pool(workers)?;
    pool.install(|| {
        ics.par_iter()
            .map(|ic| {
                let params = grid.query(ic)?;
                let o = sim.run_episode(ic, &params, false)?;
                Ok(Trial {
                    ic: *ic,
                    params,
                    status: o.status,
                    s_td: o.s_td,
                    j_tau: o.j_tau,
                })
            })
            .collect()
    })
}

fn check_ranges(model: &SafeRegionModel, grid: &ParamGrid) -> Result<()> {
    let (vs, ps) = (grid.velocities(), grid.positions());
    let inside = |r: [f64; 2], axis: &[f64]| r[0] >= axis[0] && r[1] <= axis[axis.len() - 1];
    if !inside(model.velocity_range, vs) || !inside(model.position_range, ps) {
        return Err(Error::Contract("safe region extends beyond the parameter grid".into()));
    }
    Ok(())
}

/// `n` uniform initial conditions inside the safe region, each simulated
/// with interpolated parameters.
pub fn validate_reach(
    sim: &Simulator,
    grid: &ParamGrid,
    model: &SafeRegionModel,
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<ValidationReport> {
    check_ranges(model, grid)?;
    let ([v_lo, v_hi], [p_lo, p_hi]) = (model.velocity_range, model.position_range);
    let (ics, rejected) = draw_safe(n, seed, |rng| {
        let ic = InitialCondition::new(rng.random_range(v_lo..=v_hi), rng.random_range(p_lo..=p_hi));
        Ok(model.classify(&ic).then_some(ic))
    })?;
    Ok(ValidationReport {
        mode: ValidationMode::Reach,
        seed,
        trials: simulate(sim, grid, &ics, workers)?,
        rejected,
    })
}

/// `n` velocities from the safe velocity range (those whose selected step
/// the SVM accepts), each simulated at the selected step.
pub fn validate_step_select(
    sim: &Simulator,
    grid: &ParamGrid,
    model: &SafeRegionModel,
    selector: &StepSelector,
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<ValidationReport> {
    check_ranges(model, grid)?;
    let [v_lo, v_hi] = selector.velocity_range;
    let (ics, rejected) = draw_safe(n, seed, |rng| {
        let v = rng.random_range(v_lo..=v_hi);
        let ic = InitialCondition::new(v, selector.select_step(v)?);
        Ok(model.classify(&ic).then_some(ic))
    })?;
    Ok(ValidationReport {
        mode: ValidationMode::StepSelect,
        seed,
        trials: simulate(sim, grid, &ics, workers)?,
        rejected,
    })
}
