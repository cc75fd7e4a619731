//! The pipeline subcommands. Each reads its inputs from the output directory
//! (verifying them against the manifest first), writes its artifacts there
//! and records their hashes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use stepmap_core::episode::InitialCondition;
use stepmap_core::maps::{
    build_dense_maps, compare_lipm, fit_step_selector, maps_from_csv, maps_to_csv, reachable_recall, swing_time_report,
    train_safe_region, trim_torque_map, LipmReport, ReachMap, SafeRegionModel, StepSelector, TorqueMap,
};
use stepmap_core::model::TerminationKind;
use stepmap_core::paramopt::{grid_from_runs, run_grid_nodes, ParamGrid, TRACE_HEADER};
use stepmap_core::traj::GaitParams;
use stepmap_core::validation::{validate_reach, validate_step_select, ValidationMode, ValidationReport};

use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};
use crate::manifest::{timing_csv, NodeTiming, RunManifest};
use crate::render::{
    near_optimal_heatmap, reach_heatmap, safe_region_heatmap, swing_time_heatmap, torque_heatmap, Heatmap,
};

pub const GRID_FILE: &str = "grid.csv";
pub const TRACES_FILE: &str = "traces.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const MAPS_FILE: &str = "maps.csv";
pub const CELLS_FILE: &str = "cells.csv";
pub const SAFE_REGION_FILE: &str = "safe_region.json";
pub const SELECTOR_FILE: &str = "selector.json";
pub const FIT_REPORT_FILE: &str = "fit_report.csv";
pub const CELLS_HEADER: &str = "x0_dot,s_des,t_min,s_max,t_swing_start,s_speed,status,j_tau";
pub const LIPM_FILE: &str = "lipm.csv";
pub const LIPM_SUMMARY_FILE: &str = "lipm_summary.csv";

/// Output directory plus its manifest.
struct Workspace {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Workspace {
    fn open(cfg: &PipelineConfig) -> Result<Self> {
        let dir = cfg.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let mut manifest = RunManifest::load(&dir)?;
        let hash = cfg.hash()?;
        if !manifest.config_hash.is_empty() && manifest.config_hash != hash {
            eprintln!("warning: configuration differs from the one recorded in the manifest");
        }
        manifest.config_hash = hash;
        manifest.seeds.insert("master".into(), cfg.seed);
        Ok(Self { dir, manifest })
    }

    fn read(&self, name: &str) -> Result<String> {
        self.manifest.read_verified(&self.dir, name)
    }

    fn write(&mut self, name: &str, bytes: &[u8], command: &str) -> Result<PathBuf> {
        self.manifest.write(&self.dir, name, bytes, command)
    }

    fn save(&self) -> Result<()> {
        self.manifest.save(&self.dir)
    }

    fn grid(&self) -> Result<ParamGrid> {
        Ok(ParamGrid::from_csv(&self.read(GRID_FILE)?)?)
    }

    fn maps(&self) -> Result<(ReachMap, TorqueMap)> {
        Ok(maps_from_csv(&self.read(MAPS_FILE)?)?)
    }

    fn safe_region(&self) -> Result<SafeRegionModel> {
        Ok(SafeRegionModel::from_json(&self.read(SAFE_REGION_FILE)?)?)
    }

    fn selector(&self) -> Result<StepSelector> {
        Ok(StepSelector::from_json(&self.read(SELECTOR_FILE)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeOutput {
    pub grid: Option<ParamGrid>,
    pub timings: Vec<NodeTiming>,
    pub failed: usize,
}

fn early(status: Option<TerminationKind>) -> bool {
    matches!(
        status,
        Some(TerminationKind::FellVelocity | TerminationKind::FellHeight)
    )
}

/// Phase one: Bayesian optimization at every node of the phase-one axes.
/// Writes the grid, per-evaluation traces and the timing export. Failed
/// nodes are recorded in the manifest and no grid is written.
pub fn optimize(cfg: &PipelineConfig) -> Result<OptimizeOutput> {
    let mut ws = Workspace::open(cfg)?;
    let sim = cfg.simulator()?;
    let (vs, ps) = (cfg.phase1.velocities(), cfg.phase1.positions());
    let runs = run_grid_nodes(&sim, &cfg.weights, &vs, &ps, &cfg.bo_budget(), cfg.workers)?;

    let mut traces = format!("x0_dot,s_des,{TRACE_HEADER}\n");
    let mut timings = Vec::with_capacity(runs.len());
    let mut failed_nodes = Vec::new();
    for run in &runs {
        let (evaluations, early_terminations) = match &run.result {
            Ok(r) => {
                for line in r.trace_csv().lines().skip(1) {
                    traces.push_str(&format!("{},{},{line}\n", run.ic.x0_dot, run.ic.s_des));
                }
                (r.trace.len(), r.trace.iter().filter(|t| early(t.status)).count())
            }
            Err(e) => {
                eprintln!("node ({}, {}) failed: {e}", run.ic.x0_dot, run.ic.s_des);
                failed_nodes.push([run.ic.x0_dot, run.ic.s_des]);
                (0, 0)
            }
        };
        timings.push(NodeTiming {
            x0_dot: run.ic.x0_dot,
            s_des: run.ic.s_des,
            seconds: run.seconds,
            evaluations,
            early_terminations,
            failed: run.result.is_err(),
        });
    }
    ws.write(TRACES_FILE, traces.as_bytes(), "optimize")?;
    ws.write(TIMING_FILE, timing_csv(&timings).as_bytes(), "optimize")?;
    ws.manifest.timings = timings.clone();
    ws.manifest.failed_nodes = failed_nodes.clone();

    if !failed_nodes.is_empty() {
        if ws.manifest.files.remove(GRID_FILE).is_some() {
            let _ = std::fs::remove_file(ws.dir.join(GRID_FILE));
        }
        ws.save()?;
        return Err(PipelineError::PartialFailure {
            failed: failed_nodes.len(),
            total: runs.len(),
        });
    }
    let grid = grid_from_runs(&vs, &ps, &runs)?;
    ws.write(GRID_FILE, grid.to_csv().as_bytes(), "optimize")?;
    ws.save()?;
    Ok(OptimizeOutput {
        grid: Some(grid),
        timings,
        failed: 0,
    })
}

#[derive(Debug, Clone)]
pub struct MapOutput {
    pub reach: ReachMap,
    pub torque: TorqueMap,
}

/// Phase two: one episode per dense cell with interpolated parameters.
pub fn map(cfg: &PipelineConfig) -> Result<MapOutput> {
    let mut ws = Workspace::open(cfg)?;
    let grid = ws.grid()?;
    if grid.velocities() != cfg.phase1.velocities().as_slice() || grid.positions() != cfg.phase1.positions().as_slice()
    {
        return Err(PipelineError::Core(stepmap_core::Error::Contract(
            "grid axes do not match the configured phase-one axes".into(),
        )));
    }
    let sim = cfg.simulator()?;
    let dense = build_dense_maps(
        &sim,
        &grid,
        &cfg.phase2.velocities(),
        &cfg.phase2.positions(),
        cfg.workers,
    )?;
    let mut cells = format!("{CELLS_HEADER}\n");
    for c in &dense.outcomes {
        let p = &c.params;
        cells.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.ic.x0_dot,
            c.ic.s_des,
            p.t_min,
            p.s_max,
            p.t_swing_start,
            p.s_speed,
            c.status.as_str(),
            c.j_tau
        ));
    }
    ws.write(MAPS_FILE, maps_to_csv(&dense.reach, &dense.torque)?.as_bytes(), "map")?;
    ws.write(CELLS_FILE, cells.as_bytes(), "map")?;
    ws.save()?;
    Ok(MapOutput {
        reach: dense.reach,
        torque: dense.torque,
    })
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: SafeRegionModel,
    pub selector: StepSelector,
    pub recall: f64,
    /// Unreachable training cells the model calls safe.
    pub unsafe_accepted: usize,
    pub report: String,
}

/// Trains the safe region on the reachability map, trims the torque map with
/// it and fits the step selector to the trimmed map.
pub fn fit_models(reach: &ReachMap, torque: &TorqueMap, cfg: &PipelineConfig) -> Result<FitOutput> {
    let model = train_safe_region(reach, &cfg.svm)?;
    let recall = reachable_recall(&model, reach);
    let mut unsafe_accepted = 0;
    for (iv, &v) in reach.velocities.iter().enumerate() {
        for (ip, &s) in reach.positions.iter().enumerate() {
            if !reach.get(iv, ip) && model.classify(&InitialCondition::new(v, s)) {
                unsafe_accepted += 1;
            }
        }
    }
    let selector = fit_step_selector(&trim_torque_map(torque, &model))?;
    let r = &selector.residuals;
    let report = format!(
        "key,value\nsupport_vectors,{}\ngamma,{}\nbias,{}\ndual_objective,{}\nkkt_violation,{}\nsmo_iterations,{}\n\
         reachable_recall,{}\nunreachable_classified_safe,{}\nselector_residual_count,{}\nselector_residual_mean,{}\n\
         selector_residual_std,{}\nselector_residual_min,{}\nselector_residual_max,{}\n",
        model.support_vectors.len(),
        model.gamma,
        model.bias,
        model.dual_objective,
        model.kkt_violation,
        model.iterations,
        recall,
        unsafe_accepted,
        r.count,
        r.mean,
        r.std,
        r.min,
        r.max
    );
    Ok(FitOutput {
        model,
        selector,
        recall,
        unsafe_accepted,
        report,
    })
}

pub fn fit(cfg: &PipelineConfig) -> Result<FitOutput> {
    let mut ws = Workspace::open(cfg)?;
    let (reach, torque) = ws.maps()?;
    let out = fit_models(&reach, &torque, cfg)?;
    ws.write(SAFE_REGION_FILE, out.model.to_json()?.as_bytes(), "fit")?;
    ws.write(SELECTOR_FILE, out.selector.to_json()?.as_bytes(), "fit")?;
    ws.write(FIT_REPORT_FILE, out.report.as_bytes(), "fit")?;
    ws.save()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub x0_dot: f64,
    pub s_des: f64,
    pub params: GaitParams,
    /// Time spent in the selector and grid lookup.
    pub micros: f64,
}

pub fn query_models(selector: &StepSelector, grid: &ParamGrid, x0_dot: f64) -> Result<QueryOutput> {
    let start = Instant::now();
    let s_des = selector.select_step(x0_dot)?;
    let params = grid.query(&InitialCondition::new(x0_dot, s_des))?;
    Ok(QueryOutput {
        x0_dot,
        s_des,
        params,
        micros: start.elapsed().as_secs_f64() * 1e6,
    })
}

pub fn query(cfg: &PipelineConfig, x0_dot: f64) -> Result<QueryOutput> {
    let ws = Workspace::open(cfg)?;
    query_models(&ws.selector()?, &ws.grid()?, x0_dot)
}

pub fn validation_file(mode: ValidationMode) -> String {
    format!("validate_{}.csv", mode.as_str().replace('-', "_"))
}

pub fn validate(cfg: &PipelineConfig, mode: ValidationMode, n: usize, seed: u64) -> Result<ValidationReport> {
    let mut ws = Workspace::open(cfg)?;
    let sim = cfg.simulator()?;
    let grid = ws.grid()?;
    let model = ws.safe_region()?;
    let report = match mode {
        ValidationMode::Reach => validate_reach(&sim, &grid, &model, n, seed, cfg.workers)?,
        ValidationMode::StepSelect => validate_step_select(&sim, &grid, &model, &ws.selector()?, n, seed, cfg.workers)?,
    };
    let name = validation_file(mode);
    ws.write(&name, report.to_csv().as_bytes(), "validate")?;
    ws.write(
        &name.replace(".csv", "_summary.txt"),
        format!("{}\n", report.summary()).as_bytes(),
        "validate",
    )?;
    ws.manifest.seeds.insert(format!("validate-{}", mode.as_str()), seed);
    ws.save()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RenderWhat {
    Reach,
    Torque,
    NearOptimal(f64),
    SafeRegion,
    SwingTime,
}

impl RenderWhat {
    pub fn parse(what: &str, delta: f64) -> Result<Self> {
        Ok(match what {
            "reach" => Self::Reach,
            "torque" => Self::Torque,
            "near-opt" => Self::NearOptimal(delta),
            "safe-region" => Self::SafeRegion,
            "swing-time" => Self::SwingTime,
            other => {
                return Err(PipelineError::Usage(format!(
                    "unknown rendering '{other}' (expected reach, torque, near-opt, safe-region or swing-time)"
                )))
            }
        })
    }

    fn stem(&self) -> String {
        match self {
            Self::Reach => "reach".into(),
            Self::Torque => "torque".into(),
            Self::NearOptimal(d) => format!("near_opt_{d}"),
            Self::SafeRegion => "safe_region".into(),
            Self::SwingTime => "swing_time".into(),
        }
    }
}

/// Builds the requested heatmap. Torque and near-optimal renderings use the
/// torque map trimmed by the safe region when `trim` is set.
pub fn render_heatmap(cfg: &PipelineConfig, what: RenderWhat, trim: bool) -> Result<(Heatmap, Option<String>)> {
    let ws = Workspace::open(cfg)?;
    let torque = |ws: &Workspace| -> Result<TorqueMap> {
        let (_, t) = ws.maps()?;
        Ok(if trim {
            trim_torque_map(&t, &ws.safe_region()?)
        } else {
            t
        })
    };
    Ok(match what {
        RenderWhat::Reach => (reach_heatmap(&ws.maps()?.0), None),
        RenderWhat::Torque => (torque_heatmap(&torque(&ws)?), None),
        RenderWhat::NearOptimal(delta) => (near_optimal_heatmap(&torque(&ws)?, delta)?, None),
        RenderWhat::SafeRegion => {
            let (reach, _) = ws.maps()?;
            let h = safe_region_heatmap(
                &ws.safe_region()?,
                &reach.velocities,
                &reach.positions,
                cfg.render.fine_factor,
            );
            (h, None)
        }
        RenderWhat::SwingTime => {
            let grid = ws.grid()?;
            let tmap = match ws.manifest.files.contains_key(MAPS_FILE) {
                true => Some(torque(&ws)?),
                false => None,
            };
            let report = swing_time_report(&grid, tmap.as_ref())?;
            (swing_time_heatmap(&report, &grid)?, Some(report.to_csv()))
        }
    })
}

pub fn render(cfg: &PipelineConfig, what: RenderWhat, trim: bool) -> Result<Vec<PathBuf>> {
    let (heatmap, table) = render_heatmap(cfg, what, trim)?;
    let mut ws = Workspace::open(cfg)?;
    let stem = format!("render/{}", what.stem());
    // The safe region is drawn on a finer grid; keep the image size.
    let cell = match what {
        RenderWhat::SafeRegion => (cfg.render.cell_pixels / cfg.render.fine_factor).max(1),
        _ => cfg.render.cell_pixels,
    };
    let mut paths = vec![
        ws.write(&format!("{stem}.svg"), heatmap.to_svg(cell).as_bytes(), "render")?,
        ws.write(&format!("{stem}.ppm"), &heatmap.to_ppm(cell), "render")?,
    ];
    if let Some(table) = table {
        paths.push(ws.write(&format!("{stem}.csv"), table.as_bytes(), "render")?);
    }
    ws.save()?;
    Ok(paths)
}

/// LIPM capture-point steps versus the map optimum, on the trimmed map.
pub fn lipm_compare(cfg: &PipelineConfig) -> Result<LipmReport> {
    let mut ws = Workspace::open(cfg)?;
    let grid = ws.grid()?;
    let (_, torque) = ws.maps()?;
    let model = ws.safe_region()?;
    let selector = ws.selector()?;
    let tmap = trim_torque_map(&torque, &model);
    let b = &cfg.sim.biped;
    let report = compare_lipm(&tmap, Some(&selector), &grid, b.z_nom, b.gravity)?;
    ws.write(LIPM_FILE, report.to_csv().as_bytes(), "lipm-compare")?;
    ws.write(LIPM_SUMMARY_FILE, report.summary_csv().as_bytes(), "lipm-compare")?;
    ws.save()?;
    Ok(report)
}

/// Verifies every artifact recorded in the manifest of `dir`.
pub fn check_manifest(dir: &Path) -> Result<usize> {
    let m = RunManifest::load(dir)?;
    m.verify_all(dir)?;
    Ok(m.files.len())
}

/// Outcome of the early-termination timing check.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingCheck {
    pub overall_mean: f64,
    pub quartile_mean: f64,
    /// Fraction of evaluations in the quartile that ended in a fall.
    pub quartile_early_fraction: f64,
    /// The property only constrains quartiles dominated by falls.
    pub applicable: bool,
    pub holds: bool,
}

/// Compares the mean node time of the high-velocity, long-step quartile
/// (both coordinates at or above their axis median) with the overall mean.
pub fn timing_check(timings: &[NodeTiming]) -> Option<TimingCheck> {
    let ok: Vec<&NodeTiming> = timings.iter().filter(|t| !t.failed).collect();
    if ok.is_empty() {
        return None;
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.dedup();
        v[v.len() / 2]
    };
    let v_med = median(ok.iter().map(|t| t.x0_dot).collect());
    let s_med = median(ok.iter().map(|t| t.s_des).collect());
    let quartile: Vec<&&NodeTiming> = ok.iter().filter(|t| t.x0_dot >= v_med && t.s_des >= s_med).collect();
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        sum / n as f64
    };
    let overall_mean = mean(&mut ok.iter().map(|t| t.seconds));
    let quartile_mean = mean(&mut quartile.iter().map(|t| t.seconds));
    let evals: usize = quartile.iter().map(|t| t.evaluations).sum();
    let falls: usize = quartile.iter().map(|t| t.early_terminations).sum();
    let quartile_early_fraction = if evals > 0 { falls as f64 / evals as f64 } else { 0.0 };
    let applicable = quartile_early_fraction > 0.5;
    Some(TimingCheck {
        overall_mean,
        quartile_mean,
        quartile_early_fraction,
        applicable,
        holds: !applicable || quartile_mean <= 1.2 * overall_mean,
    })
}
