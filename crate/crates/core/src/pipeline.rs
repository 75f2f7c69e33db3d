//! End-to-end driver: simulate (or load) sweeps, run the continuous-time
//! front end with surfel fusion, close loops by deforming map and trajectory
//! together, evaluate and write the outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::deformation::{
    apply_deformation, build_graph, optimize_graph, ConstraintSet, DeformationError, DeformationGraph,
    DeformationProblem, IterationLog, LoopConstraint,
};
use crate::io::{self, IoError};
use crate::loop_closure::{build_constraints, detect_candidates, verify_candidate, LoopError, RejectReason};
use crate::odometry::{register_sweep, OdometryError, Sweep};
use crate::sim::{self, ground_truth, inject_drift, preset_path, Metrics, Preset, SimError, WorldSpec};
use crate::surfel::{extract_surfels_traced, PointSample, SurfelError, SurfelMap};
use crate::trajectory::{ContinuousTrajectory, TimedPose, TrajectoryError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("simulation: {0}")]
    Simulation(#[source] SimError),
    #[error("input: {0}")]
    Input(String),
    #[error("odometry (sweep {sweep}): {source}")]
    Odometry {
        sweep: usize,
        #[source]
        source: OdometryError,
    },
    #[error("surfel extraction (sweep {sweep}): {source}")]
    Surfel {
        sweep: usize,
        #[source]
        source: SurfelError,
    },
    #[error("trajectory: {0}")]
    Trajectory(#[from] TrajectoryError),
    #[error("loop closure: {0}")]
    Loop(#[source] LoopError),
    #[error("deformation: {0}")]
    Deformation(#[source] DeformationError),
    #[error("evaluation: {0}")]
    Evaluation(#[source] SimError),
    #[error("output: {0}")]
    Io(#[from] IoError),
}

/// Sweeps plus the trajectories that come with them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ground_truth: ContinuousTrajectory,
    pub odometry: ContinuousTrajectory,
    pub sweeps: Vec<Sweep>,
    /// Noise-free sensor-frame point behind every sample, when known.
    pub clean: Option<Vec<Vec<Vector3<f64>>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepEntry {
    file: String,
    t_begin: f64,
    t_end: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepIndex {
    sweeps: Vec<SweepEntry>,
}

pub const SWEEP_INDEX: &str = "sweeps.json";
pub const GROUND_TRUTH_TUM: &str = "ground_truth.tum";
pub const ODOMETRY_TUM: &str = "odometry.tum";

/// Simulates the configured world and path.
pub fn simulate_dataset(config: &PipelineConfig) -> Result<Dataset, PipelineError> {
    let world = config.world().map_err(PipelineError::Simulation)?;
    let path = match (&config.sim.waypoints, &config.world.preset) {
        (Some(wp), _) => sim::Path::polyline(wp.iter().map(|p| Vector3::from(*p)).collect(), false)
            .map_err(PipelineError::Simulation)?,
        (None, Some(name)) => preset_path(Preset::from_name(name).map_err(PipelineError::Simulation)?),
        (None, None) => {
            return Err(PipelineError::Input(
                "no path: set world.preset or sim.waypoints".into(),
            ))
        }
    };
    let gt = ground_truth(&path, &config.path_params()).map_err(PipelineError::Simulation)?;
    let odometry = inject_drift(&gt, config.drift.rate, config.drift.yaw_rate).map_err(PipelineError::Simulation)?;
    let traced =
        sim::simulate_traced(&world, &gt, &config.scanner_spec(), config.seed).map_err(PipelineError::Simulation)?;
    let mut sweeps = Vec::with_capacity(traced.len());
    let mut clean = Vec::with_capacity(traced.len());
    for (sweep, hits) in traced {
        clean.push(
            hits.iter()
                .map(|h| {
                    let pose = gt.sample_pose(h.sample.time).expect("nonempty");
                    pose.inverse().transform_point(&h.world)
                })
                .collect(),
        );
        sweeps.push(sweep);
    }
    Ok(Dataset {
        ground_truth: gt,
        odometry,
        sweeps,
        clean: Some(clean),
    })
}

/// Writes sweeps (sensor-frame PLY), their index and both trajectories.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<(), PipelineError> {
    let sweep_dir = dir.join("sweeps");
    std::fs::create_dir_all(&sweep_dir).map_err(|e| IoError::io(&sweep_dir, e))?;
    let mut index = SweepIndex { sweeps: Vec::new() };
    for (k, s) in data.sweeps.iter().enumerate() {
        let file = format!("sweeps/sweep_{k:05}.ply");
        io::write_points(&dir.join(&file), s.samples())?;
        index.sweeps.push(SweepEntry {
            file,
            t_begin: s.t_begin(),
            t_end: s.t_end(),
        });
    }
    write_text(
        &dir.join(SWEEP_INDEX),
        &serde_json::to_string_pretty(&index).expect("serializable"),
    )?;
    io::write_trajectory_tum(&data.ground_truth, &dir.join(GROUND_TRUTH_TUM))?;
    io::write_trajectory_tum(&data.odometry, &dir.join(ODOMETRY_TUM))?;
    Ok(())
}

/// Reads a directory produced by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, PipelineError> {
    let index_path = dir.join(SWEEP_INDEX);
    let text = std::fs::read_to_string(&index_path).map_err(|e| IoError::io(&index_path, e))?;
    let index: SweepIndex =
        serde_json::from_str(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", index_path.display())))?;
    let mut sweeps = Vec::with_capacity(index.sweeps.len());
    for (k, e) in index.sweeps.iter().enumerate() {
        let samples = io::read_points(&dir.join(&e.file))?;
        sweeps.push(
            Sweep::new(samples, e.t_begin, e.t_end).map_err(|source| PipelineError::Odometry { sweep: k, source })?,
        );
    }
    if sweeps.is_empty() {
        return Err(PipelineError::Input("dataset has no sweeps".into()));
    }
    Ok(Dataset {
        ground_truth: io::read_trajectory_tum(&dir.join(GROUND_TRUTH_TUM))?,
        odometry: io::read_trajectory_tum(&dir.join(ODOMETRY_TUM))?,
        sweeps,
        clean: None,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|e| IoError::io(path, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub input_ms: f64,
    pub odometry_ms: f64,
    pub loop_closure_ms: f64,
    pub deformation_ms: f64,
    pub evaluation_ms: f64,
    pub output_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub sweeps: usize,
    pub samples: usize,
    pub surfels: usize,
    pub registration_fallbacks: usize,
    pub nodes: usize,
    pub edges: usize,
    pub constraints: usize,
    pub loop_candidates: usize,
    pub loops: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopSummary {
    pub time_a: f64,
    pub time_b: f64,
    pub separation: f64,
    /// `None` for accepted loops.
    pub rejected: Option<RejectReason>,
    pub fitness: Option<f64>,
    pub inlier_fraction: Option<f64>,
    /// Size of the verified correction: translation (m) and rotation (deg).
    pub correction: Option<(f64, f64)>,
}

/// RMS distance between each surfel and its generating point placed through
/// the trajectory at the point's time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub before_rms: f64,
    pub after_rms: f64,
    pub surfels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub timings: Timings,
    pub counts: Counts,
    pub before: Metrics,
    /// Present iff at least one loop was verified.
    pub after: Option<Metrics>,
    pub consistency: Option<Consistency>,
    pub loops: Vec<LoopSummary>,
    pub energy_log: Vec<IterationLog>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// The report with wall-clock timings zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: Timings::default(),
            ..self.clone()
        }
    }
}

/// The point that generated a map surfel: its sensor-frame position and time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Generator {
    pub local: Vector3<f64>,
    pub time: f64,
}

/// Everything a run produces, in memory.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub report: RunReport,
    pub world: WorldSpec,
    pub dataset: Dataset,
    pub map_before: SurfelMap,
    pub trajectory_before: ContinuousTrajectory,
    /// One entry per surfel of `map_before` (and of `map_after`, same order).
    pub generators: Vec<Generator>,
    pub map_after: Option<SurfelMap>,
    pub trajectory_after: Option<ContinuousTrajectory>,
    pub graph: Option<DeformationGraph>,
    pub constraints: Vec<LoopConstraint>,
}

impl PipelineOutput {
    pub fn final_map(&self) -> &SurfelMap {
        self.map_after.as_ref().unwrap_or(&self.map_before)
    }

    pub fn final_trajectory(&self) -> &ContinuousTrajectory {
        self.trajectory_after.as_ref().unwrap_or(&self.trajectory_before)
    }
}

struct FrontEnd {
    map: SurfelMap,
    trajectory: ContinuousTrajectory,
    generators: Vec<Generator>,
    fallbacks: usize,
}

/// Registers every sweep against the recently active map, starting from the
/// odometry increment, and fuses its surfels.
fn front_end(config: &PipelineConfig, data: &Dataset) -> Result<FrontEnd, PipelineError> {
    let sp = config.surfel_params();
    let rp = config.registration_params();
    let active = config.surfel.active_window;
    let odom = &data.odometry;
    let first = &data.sweeps[0];
    let start = odom.sample_pose(first.t_begin())?;

    let mut map = SurfelMap::new(sp.voxel);
    let mut trajectory = ContinuousTrajectory::from_controls(vec![TimedPose::new(first.t_begin(), start)])?;
    let mut generators = Vec::new();
    let mut fallbacks = 0;

    for (k, sweep) in data.sweeps.iter().enumerate() {
        let a = *trajectory.last().expect("nonempty");
        if (a.time - sweep.t_begin()).abs() > 1e-9 * (1.0 + a.time.abs()) {
            return Err(PipelineError::Input(format!(
                "sweep {k} does not start where the previous one ended"
            )));
        }
        let increment = odom
            .sample_pose(sweep.t_begin())?
            .inverse()
            .compose(&odom.sample_pose(sweep.t_end())?);
        let prior = TimedPose::new(sweep.t_end(), a.pose.compose(&increment));
        let t_min = sweep.t_begin() - active;
        let b = if map.is_empty() {
            prior.pose
        } else {
            let local = map.filter(|s| s.time >= t_min);
            match register_sweep(&local, sweep, &a, &prior, &rp) {
                Ok(r) => r.end.pose,
                Err(OdometryError::NoCorrespondences { .. } | OdometryError::EmptyMap) => {
                    fallbacks += 1;
                    prior.pose
                }
                Err(source) => return Err(PipelineError::Odometry { sweep: k, source }),
            }
        };
        let points = sweep.deskew(&a.pose, &b);
        let origin = se3_mid(&a.pose, &b);
        let traced = extract_surfels_traced(&points, &sp, &origin)
            .map_err(|source| PipelineError::Surfel { sweep: k, source })?;
        let incoming: Vec<_> = traced.iter().map(|t| t.surfel).collect();
        let report = map.fuse_where(&incoming, sp.merge_radius, sp.max_normal_angle_deg, |s| s.time >= t_min);
        for &i in &report.inserted {
            let rep = traced[i].representative;
            let sample: &PointSample = &sweep.samples()[rep];
            let local = match &data.clean {
                Some(clean) => clean[k][rep],
                None => sample.position,
            };
            generators.push(Generator {
                local,
                time: sample.time,
            });
        }
        trajectory.push(TimedPose::new(sweep.t_end(), b))?;
    }
    Ok(FrontEnd {
        map,
        trajectory,
        generators,
        fallbacks,
    })
}

fn se3_mid(a: &crate::Pose, b: &crate::Pose) -> Vector3<f64> {
    crate::se3_interpolate(a, b, 0.5).translation
}

/// RMS of `|T(t)·local − surfel|` over the map.
pub fn consistency_rms(map: &SurfelMap, traj: &ContinuousTrajectory, generators: &[Generator]) -> f64 {
    if map.is_empty() {
        return 0.0;
    }
    let d2 = crate::parallel::map_range(map.len(), |i| {
        let g = &generators[i];
        let pose = traj.sample_pose(g.time).expect("nonempty");
        (pose.transform_point(&g.local) - map.surfels()[i].position).norm_squared()
    });
    (d2.iter().sum::<f64>() / d2.len() as f64).sqrt()
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Runs every stage in memory. Nothing is written.
pub fn execute(config: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    with_threads(config.geometry.threads, || execute_inner(config))
}

#[cfg(feature = "parallel")]
fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T: Send>(_threads: usize, f: impl FnOnce() -> T + Send) -> T {
    f()
}

fn execute_inner(config: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let total = Instant::now();
    let mut timings = Timings::default();

    let clock = Instant::now();
    let world = config.world().map_err(PipelineError::Simulation)?;
    let dataset = match &config.input.sweeps {
        Some(dir) => load_dataset(dir)?,
        None => simulate_dataset(config)?,
    };
    timings.input_ms = ms(clock);

    let clock = Instant::now();
    let fe = front_end(config, &dataset)?;
    timings.odometry_ms = ms(clock);

    let clock = Instant::now();
    let lp = config.loop_params();
    let candidates = detect_candidates(&fe.trajectory, lp.min_time_gap, lp.max_detect_dist);
    let outcomes: Vec<_> = candidates.iter().map(|c| verify_candidate(&fe.map, c, &lp)).collect();
    let mut loops = Vec::with_capacity(candidates.len());
    let mut verified = Vec::new();
    for (c, o) in candidates.iter().zip(outcomes) {
        match o {
            Ok(v) => {
                loops.push(LoopSummary {
                    time_a: c.time_a,
                    time_b: c.time_b,
                    separation: c.separation,
                    rejected: None,
                    fitness: Some(v.fitness),
                    inlier_fraction: Some(v.inlier_fraction),
                    correction: Some((v.relative.translation.norm(), v.relative.rotation.angle().to_degrees())),
                });
                verified.push(v);
            }
            Err(LoopError::Rejected(reason)) => loops.push(LoopSummary {
                time_a: c.time_a,
                time_b: c.time_b,
                separation: c.separation,
                rejected: Some(reason),
                fitness: None,
                inlier_fraction: None,
                correction: None,
            }),
        }
    }
    timings.loop_closure_ms = ms(clock);

    let clock = Instant::now();
    let mut counts = Counts {
        sweeps: dataset.sweeps.len(),
        samples: dataset.sweeps.iter().map(|s| s.samples().len()).sum(),
        surfels: fe.map.len(),
        registration_fallbacks: fe.fallbacks,
        loop_candidates: candidates.len(),
        loops: verified.len(),
        ..Counts::default()
    };
    let mut energy_log = Vec::new();
    let (mut map_after, mut trajectory_after, mut graph_out) = (None, None, None);
    let mut constraints = Vec::new();
    if !verified.is_empty() {
        let d = &config.deformation;
        let graph = build_graph(&fe.trajectory, d.node_spacing, d.k_edge)
            .map_err(PipelineError::Deformation)?
            .with_k_bind(d.k_bind)
            .with_weights(config.energy_weights());
        for v in &verified {
            constraints.extend(build_constraints(v, &fe.map, &graph, &lp).map_err(PipelineError::Loop)?);
        }
        let cs = ConstraintSet::bind(&graph, &constraints, d.time_window).map_err(PipelineError::Deformation)?;
        let (optimized, log) =
            optimize_graph(&graph, &cs, &config.solver_params()).map_err(PipelineError::Deformation)?;
        let (m, t) = apply_deformation(&fe.map, &fe.trajectory, &optimized, d.time_window)
            .map_err(PipelineError::Deformation)?;
        counts.nodes = optimized.len();
        counts.edges = optimized.edges.len();
        counts.constraints = constraints.len();
        energy_log = log;
        map_after = Some(m);
        trajectory_after = Some(t);
        graph_out = Some(optimized);
    }
    timings.deformation_ms = ms(clock);

    let clock = Instant::now();
    let gt = &dataset.ground_truth;
    let before = sim::evaluate(&fe.trajectory, gt, &fe.map, &world).map_err(PipelineError::Evaluation)?;
    let after = match (&trajectory_after, &map_after) {
        (Some(t), Some(m)) => Some(sim::evaluate(t, gt, m, &world).map_err(PipelineError::Evaluation)?),
        _ => None,
    };
    let consistency = match (&trajectory_after, &map_after) {
        (Some(t), Some(m)) => Some(Consistency {
            before_rms: consistency_rms(&fe.map, &fe.trajectory, &fe.generators),
            after_rms: consistency_rms(m, t, &fe.generators),
            surfels: m.len(),
        }),
        _ => None,
    };
    timings.evaluation_ms = ms(clock);
    timings.total_ms = ms(total);

    Ok(PipelineOutput {
        report: RunReport {
            seed: config.seed,
            timings,
            counts,
            before,
            after,
            consistency,
            loops,
            energy_log,
        },
        world,
        dataset,
        map_before: fe.map,
        trajectory_before: fe.trajectory,
        generators: fe.generators,
        map_after,
        trajectory_after,
        graph: graph_out,
        constraints,
    })
}

pub const MAP_PLY: &str = "map.ply";
pub const MAP_BEFORE_PLY: &str = "map_before.ply";
pub const TRAJECTORY_TUM: &str = "trajectory.tum";
pub const TRAJECTORY_BEFORE_TUM: &str = "trajectory_before.tum";
pub const REPORT_JSON: &str = "report.json";
pub const DEFORMATION_JSON: &str = "deformation.json";

/// Writes the final and pre-deformation map and trajectory, ground truth,
/// the deformation problem (when loops were closed) and the report.
pub fn write_outputs(out: &mut PipelineOutput, dir: &Path, time_window: f64) -> Result<Vec<PathBuf>, PipelineError> {
    let clock = Instant::now();
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let mut written = Vec::new();
    let mut record = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    io::write_surfel_map(&record(MAP_PLY), out.final_map())?;
    io::write_trajectory_tum(out.final_trajectory(), &record(TRAJECTORY_TUM))?;
    io::write_surfel_map(&record(MAP_BEFORE_PLY), &out.map_before)?;
    io::write_trajectory_tum(&out.trajectory_before, &record(TRAJECTORY_BEFORE_TUM))?;
    io::write_trajectory_tum(&out.dataset.ground_truth, &record(GROUND_TRUTH_TUM))?;
    if let Some(graph) = &out.graph {
        // the unoptimized graph, so the problem can be re-solved standalone
        let mut initial = graph.clone();
        initial.reset();
        let problem = DeformationProblem::new(&initial, &out.constraints, time_window);
        write_text(&record(DEFORMATION_JSON), &problem.to_json())?;
    }
    out.report.timings.output_ms = ms(clock);
    out.report.timings.total_ms += out.report.timings.output_ms;
    write_text(&record(REPORT_JSON), &out.report.to_json())?;
    Ok(written)
}

/// [`execute`] followed by [`write_outputs`] into `config.output.dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let mut out = execute(config)?;
    write_outputs(&mut out, &config.output.dir, config.deformation.time_window)?;
    Ok(out.report)
}
