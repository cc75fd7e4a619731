use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use stepmap_core::validation::ValidationMode;
use stepmap_pipeline::commands::{self, RenderWhat};
use stepmap_pipeline::{PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(
    name = "stepmap",
    version,
    about = "Energy-optimal single-step recovery maps for a planar biped"
)]
struct Cli {
    /// TOML configuration file; defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Reach,
    StepSelect,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Phase one: optimize gait parameters at every grid node.
    Optimize,
    /// Phase two: dense reachability and torque maps.
    Map,
    /// Train the safe region and fit the step selector.
    Fit,
    /// Energy-optimal step and gait parameters for one velocity.
    Query {
        #[arg(long = "vel")]
        velocity: f64,
    },
    /// Closed-loop validation of the fitted maps.
    Validate {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Number of trials; defaults to the configured count for the mode.
        #[arg(long)]
        n: Option<usize>,
        /// Exit with status 2 when the success fraction falls below this.
        #[arg(long)]
        min_success: Option<f64>,
    },
    /// Write SVG and PPM heatmaps.
    Render {
        /// reach, torque, near-opt, safe-region or swing-time
        #[arg(long)]
        what: String,
        /// Torque margin of the near-optimal overlay.
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Drop cells outside the safe region from torque renderings.
        #[arg(long)]
        trim: bool,
    },
    /// Compare LIPM capture-point steps with the map optimum.
    LipmCompare,
    /// Verify every artifact hash recorded in the manifest.
    Check,
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Config => print!("{}", cfg.to_toml()?),
        Command::Optimize => {
            let out = commands::optimize(&cfg)?;
            let n = out.timings.len();
            let secs: f64 = out.timings.iter().map(|t| t.seconds).sum();
            println!(
                "optimized {n} nodes ({secs:.1} node-seconds) into {}",
                cfg.out_dir.display()
            );
            if let Some(check) = commands::timing_check(&out.timings) {
                println!(
                    "timing: overall mean {:.2} s, high-velocity/long-step quartile {:.2} s, quartile falls {:.0}%",
                    check.overall_mean,
                    check.quartile_mean,
                    100.0 * check.quartile_early_fraction
                );
            }
        }
        Command::Map => {
            let out = commands::map(&cfg)?;
            let reachable = out.reach.cells.iter().filter(|r| **r).count();
            println!("{} cells, {reachable} reachable", out.reach.cells.len());
        }
        Command::Fit => {
            let out = commands::fit(&cfg)?;
            let r = &out.selector.residuals;
            println!(
                "safe region: {} support vectors, reachable recall {:.3}, unreachable cells classified safe {}",
                out.model.support_vectors.len(),
                out.recall,
                out.unsafe_accepted
            );
            println!(
                "selector residual (m): mean {:.4} (StD {:.4}, min {:.4}, max {:.4})",
                r.mean, r.std, r.min, r.max
            );
        }
        Command::Query { velocity } => {
            let q = commands::query(&cfg, *velocity)?;
            let p = q.params;
            println!("x0_dot {} s_des* {:.6}", q.x0_dot, q.s_des);
            println!(
                "t_min {:.6} s_max {:.6} t_swing_start {:.6} s_speed {:.6}",
                p.t_min, p.s_max, p.t_swing_start, p.s_speed
            );
            println!("query time {:.1} us", q.micros);
        }
        Command::Validate { mode, n, min_success } => {
            let mode = match mode {
                Mode::Reach => ValidationMode::Reach,
                Mode::StepSelect => ValidationMode::StepSelect,
            };
            let n = n.unwrap_or(match mode {
                ValidationMode::Reach => cfg.validation.reach_samples,
                ValidationMode::StepSelect => cfg.validation.step_samples,
            });
            let report = commands::validate(&cfg, mode, n, cfg.seed)?;
            println!("{}", report.summary());
            if let Some(min) = min_success {
                if report.success_fraction() < *min {
                    return Err(PipelineError::Threshold(format!(
                        "success fraction {:.4} below {min}",
                        report.success_fraction()
                    ))
                    .into());
                }
            }
        }
        Command::Render { what, delta, trim } => {
            let what = RenderWhat::parse(what, *delta)?;
            for path in commands::render(&cfg, what, *trim)? {
                println!("{}", path.display());
            }
        }
        Command::LipmCompare => {
            let report = commands::lipm_compare(&cfg)?;
            let e = &report.error;
            println!(
                "compared {} velocities ({} outside the axis, {} beyond the reachable area)",
                e.count, report.outside_axis, report.beyond_reachable
            );
            if e.count > 0 {
                println!(
                    "torque error: mean {:.4e} (StD {:.4e}, min {:.4e}, max {:.4e})",
                    e.mean, e.std, e.min, e.max
                );
            }
        }
        Command::Check => {
            let n = commands::check_manifest(&cfg.out_dir)?;
            println!("{n} artifacts verified");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(2, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
