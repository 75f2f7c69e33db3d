use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctslam::config::PipelineConfig;
use ctslam::deformation::{apply_deformation, optimize_graph, ConstraintSet, DeformationProblem};
use ctslam::io::{self, PlyFormat};
use ctslam::pipeline::{self, RunReport};
use ctslam::sim::{self, Preset};
use ctslam::trajectory::{ContinuousTrajectory, TimedPose};

#[derive(Parser, Debug)]
#[command(
    name = "ctslam",
    version,
    about = "Continuous-time surfel SLAM with elastic loop closure"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON pipeline config; without it the named preset is used.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// RNG seed (overrides `seed`).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Preset used when no config is given.
    #[arg(long, global = true, default_value = "corridor-loop")]
    preset: String,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate sweeps and write them as a dataset directory.
    Simulate,
    /// Run the full pipeline, simulating or loading sweeps.
    Run {
        /// Dataset directory written by `simulate` (overrides `input.sweeps`).
        #[arg(long, value_name = "DIR")]
        input: Option<PathBuf>,
    },
    /// Optimize a serialized deformation graph and its constraints.
    Deform {
        problem: PathBuf,
        /// Surfel map to deform with the optimized graph.
        #[arg(long, value_name = "PLY")]
        map: Option<PathBuf>,
        /// Trajectory to deform with the optimized graph.
        #[arg(long, value_name = "TUM")]
        trajectory: Option<PathBuf>,
    },
    /// Score a trajectory and map against ground truth and the configured world.
    Eval {
        #[arg(long, value_name = "TUM")]
        estimate: PathBuf,
        #[arg(long, value_name = "TUM")]
        ground_truth: PathBuf,
        #[arg(long, value_name = "PLY")]
        map: PathBuf,
    },
    /// Convert between file encodings.
    Export {
        input: PathBuf,
        output: PathBuf,
        /// PLY encoding for PLY output.
        #[arg(long, value_enum, default_value = "ascii")]
        encoding: Encoding,
        /// Resample a TUM trajectory at this rate (Hz) instead of copying controls.
        #[arg(long, value_name = "HZ")]
        rate: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Encoding {
    Ascii,
    Binary,
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut config = match &g.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => PipelineConfig::preset(Preset::from_name(&g.preset)?),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(out) = &g.out {
        config.output.dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulate(config: &PipelineConfig, verbose: bool) -> Result<()> {
    let data = pipeline::simulate_dataset(config)?;
    let dir = &config.output.dir;
    ensure_dir(dir)?;
    pipeline::write_dataset(&data, dir)?;
    let points: usize = data.sweeps.iter().map(|s| s.samples().len()).sum();
    println!("{} sweeps, {points} points -> {}", data.sweeps.len(), dir.display());
    if verbose {
        eprintln!("{}", config.to_json());
    }
    Ok(())
}

fn print_report(r: &RunReport) {
    println!(
        "sweeps {}  surfels {}  loops {}  nodes {}  constraints {}",
        r.counts.sweeps, r.counts.surfels, r.counts.loops, r.counts.nodes, r.counts.constraints
    );
    println!(
        "before: ATE {:.4} m  map RMS {:.4} m",
        r.before.ate_rmse, r.before.map_rms
    );
    if let Some(a) = &r.after {
        println!("after:  ATE {:.4} m  map RMS {:.4} m", a.ate_rmse, a.map_rms);
    }
    println!("total {:.0} ms", r.timings.total_ms);
}

fn run(mut config: PipelineConfig, input: Option<PathBuf>, verbose: bool) -> Result<()> {
    if input.is_some() {
        config.input.sweeps = input;
    }
    let report = pipeline::run_pipeline(&config)?;
    print_report(&report);
    if verbose {
        for l in &report.loops {
            let verdict = match &l.rejected {
                Some(reason) => format!("rejected ({reason:?})"),
                None => "accepted".into(),
            };
            eprintln!("loop {:.1} s <-> {:.1} s: {verdict}", l.time_a, l.time_b);
        }
    }
    println!("outputs in {}", config.output.dir.display());
    Ok(())
}

const DEFORMED_PROBLEM: &str = "deformation_solved.json";
const ENERGY_LOG: &str = "energy_log.json";

fn deform(
    config: &PipelineConfig,
    problem: &Path,
    map: Option<PathBuf>,
    trajectory: Option<PathBuf>,
    verbose: bool,
) -> Result<()> {
    let text = std::fs::read_to_string(problem).with_context(|| format!("reading {}", problem.display()))?;
    let problem = DeformationProblem::from_json(&text)?;
    let graph = problem.graph()?;
    let constraints = problem.constraints()?;
    let cs = ConstraintSet::bind(&graph, &constraints, problem.time_window())?;
    let (solved, log) = optimize_graph(&graph, &cs, &config.solver_params())?;
    if verbose {
        for l in &log {
            eprintln!(
                "iter {:>3}  E {:.6e}  lambda {:.1e}  {}",
                l.iteration,
                l.energy.total,
                l.damping,
                if l.accepted { "accepted" } else { "rejected" }
            );
        }
    }
    let (first, last) = (
        log.first().expect("log has the start"),
        log.iter().rev().find(|l| l.accepted).expect("start is accepted"),
    );
    println!(
        "{} nodes, {} constraints: energy {:.6e} -> {:.6e} in {} iterations",
        solved.len(),
        constraints.len(),
        first.energy.total,
        last.energy.total,
        log.last().map_or(0, |l| l.iteration)
    );

    let dir = &config.output.dir;
    ensure_dir(dir)?;
    let out = DeformationProblem::new(&solved, &constraints, problem.time_window());
    write_text(&dir.join(DEFORMED_PROBLEM), &out.to_json())?;
    write_text(&dir.join(ENERGY_LOG), &serde_json::to_string_pretty(&log)?)?;

    if map.is_none() && trajectory.is_none() {
        return Ok(());
    }
    let map = match &map {
        Some(p) => io::read_surfel_map(p, config.surfel.voxel)?,
        None => ctslam::SurfelMap::new(config.surfel.voxel),
    };
    let traj = match &trajectory {
        Some(p) => io::read_trajectory_tum(p)?,
        None => ContinuousTrajectory::new(),
    };
    let (map_after, traj_after) = apply_deformation(&map, &traj, &solved, problem.time_window())?;
    if !map.is_empty() {
        io::write_surfel_map(&dir.join(pipeline::MAP_PLY), &map_after)?;
    }
    if !traj.is_empty() {
        io::write_trajectory_tum(&traj_after, &dir.join(pipeline::TRAJECTORY_TUM))?;
    }
    Ok(())
}

const METRICS_JSON: &str = "metrics.json";

fn eval(config: &PipelineConfig, estimate: &Path, ground_truth: &Path, map: &Path, write: bool) -> Result<()> {
    let est = io::read_trajectory_tum(estimate)?;
    let gt = io::read_trajectory_tum(ground_truth)?;
    let map = io::read_surfel_map(map, config.surfel.voxel)?;
    let world = config.world()?;
    let metrics = sim::evaluate(&est, &gt, &map, &world)?;
    let text = serde_json::to_string_pretty(&metrics)?;
    println!("{text}");
    if write {
        ensure_dir(&config.output.dir)?;
        write_text(&config.output.dir.join(METRICS_JSON), &text)?;
    }
    Ok(())
}

fn extension(p: &Path) -> String {
    p.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

fn resample(traj: &ContinuousTrajectory, rate: f64) -> Result<ContinuousTrajectory> {
    if !(rate > 0.0 && rate.is_finite()) {
        bail!("--rate must be a positive number, got {rate}");
    }
    let (t0, t1) = traj.time_range().context("trajectory is empty")?;
    let n = ((t1 - t0) * rate).floor() as usize;
    let mut controls = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = t0 + i as f64 / rate;
        controls.push(TimedPose::new(t, traj.sample_pose(t)?));
    }
    Ok(ContinuousTrajectory::from_controls(controls)?)
}

fn export(input: &Path, output: &Path, encoding: Encoding, rate: Option<f64>) -> Result<()> {
    match (extension(input).as_str(), extension(output).as_str()) {
        ("ply", "ply") => {
            let table = io::read_table(input)?;
            let format = match encoding {
                Encoding::Ascii => PlyFormat::Ascii,
                Encoding::Binary => PlyFormat::BinaryLittleEndian,
            };
            io::write_table(output, &table, format)?;
            println!("{} vertices, {} properties", table.rows.len(), table.names.len());
        }
        ("ply", "csv") => {
            let table = io::read_table(input)?;
            let mut text = table.names.join(",");
            text.push('\n');
            for row in &table.rows {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                text.push_str(&cells.join(","));
                text.push('\n');
            }
            write_text(output, &text)?;
            println!("{} rows", table.rows.len());
        }
        ("tum", "tum") | ("txt", "tum") | ("tum", "txt") => {
            let mut traj = io::read_trajectory_tum(input)?;
            if let Some(rate) = rate {
                traj = resample(&traj, rate)?;
            }
            io::write_trajectory_tum(&traj, output)?;
            println!("{} poses", traj.len());
        }
        ("tum", "csv") | ("txt", "csv") => {
            let mut traj = io::read_trajectory_tum(input)?;
            if let Some(rate) = rate {
                traj = resample(&traj, rate)?;
            }
            let mut text = String::from("timestamp,tx,ty,tz,qx,qy,qz,qw\n");
            for c in traj.controls() {
                text.push_str(&io::format_tum_line(c).split_whitespace().collect::<Vec<_>>().join(","));
                text.push('\n');
            }
            write_text(output, &text)?;
            println!("{} poses", traj.len());
        }
        (a, b) => bail!("no conversion from .{a} to .{b} (supported: ply->ply, ply->csv, tum->tum, tum->csv)"),
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let verbose = cli.global.verbose;
    match cli.command {
        Command::Export {
            input,
            output,
            encoding,
            rate,
        } => export(&input, &output, encoding, rate),
        command => {
            let config = load_config(&cli.global)?;
            match command {
                Command::Simulate => simulate(&config, verbose),
                Command::Run { input } => run(config, input, verbose),
                Command::Deform {
                    problem,
                    map,
                    trajectory,
                } => deform(&config, &problem, map, trajectory, verbose),
                Command::Eval {
                    estimate,
                    ground_truth,
                    map,
                } => eval(&config, &estimate, &ground_truth, &map, cli.global.out.is_some()),
                Command::Export { .. } => unreachable!("handled above"),
            }
        }
    }
}
