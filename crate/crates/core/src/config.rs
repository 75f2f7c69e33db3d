//! JSON pipeline configuration. Every section is optional and falls back to
//! the module defaults; unknown keys are rejected and values are
//! range-checked with the offending key named in the error.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deformation::{EnergyWeights, SolverParams};
use crate::loop_closure::LoopParams;
use crate::odometry::RegistrationParams;
use crate::sim::{Patch, PathParams, Preset, ScannerSpec, WorldSpec};
use crate::surfel::SurfelParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config value `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub corner: [f64; 3],
    pub edge_u: [f64; 3],
    pub edge_v: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub preset: Option<String>,
    pub patches: Option<Vec<PatchConfig>>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            preset: Some("corridor-loop".into()),
            patches: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScannerConfig {
    pub rays: usize,
    pub duration: f64,
    pub max_range: f64,
    pub noise_sigma: f64,
    pub beams: usize,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
}

impl Default for ScannerConfig {
    fn default() -> Self {
        let s = ScannerSpec::default();
        Self {
            rays: s.rays,
            duration: s.duration,
            max_range: s.max_range,
            noise_sigma: s.noise_sigma,
            beams: s.beams,
            min_elevation_deg: s.min_elevation_deg,
            max_elevation_deg: s.max_elevation_deg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftConfig {
    /// Scale error, fraction per meter.
    pub rate: f64,
    /// Heading error, degrees per meter.
    pub yaw_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    /// Worker threads for data-parallel stages; 0 uses every core.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfelConfig {
    pub voxel: f64,
    pub min_points: usize,
    pub planarity_eps: f64,
    pub merge_radius: f64,
    pub max_normal_angle: f64,
    /// Surfels created within this many seconds of a sweep take part in its
    /// registration and fusion.
    pub active_window: f64,
}

impl Default for SurfelConfig {
    fn default() -> Self {
        let s = SurfelParams::default();
        Self {
            voxel: s.voxel,
            min_points: s.min_points,
            planarity_eps: s.planarity_eps,
            merge_radius: s.merge_radius,
            max_normal_angle: s.max_normal_angle_deg,
            active_window: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdometryConfig {
    pub max_corr_dist: f64,
    pub huber_delta: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub min_matches: usize,
    pub prior_weight: f64,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        let p = RegistrationParams::default();
        Self {
            max_corr_dist: p.max_corr_dist,
            huber_delta: p.huber_delta,
            tol: p.tol,
            max_iters: p.max_iters,
            min_matches: p.min_matches,
            prior_weight: p.prior_weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformationConfig {
    pub node_spacing: f64,
    pub k_edge: usize,
    pub k_bind: usize,
    pub time_window: f64,
    pub w_rot: f64,
    pub w_reg: f64,
    pub w_con: f64,
    pub w_pin: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub initial_damping: f64,
    pub min_damping: f64,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        let w = EnergyWeights::default();
        let s = SolverParams::default();
        Self {
            node_spacing: 1.0,
            k_edge: 2,
            k_bind: 4,
            time_window: 30.0,
            w_rot: w.w_rot,
            w_reg: w.w_reg,
            w_con: w.w_con,
            w_pin: w.w_pin,
            max_iters: s.max_iters,
            rel_tol: s.rel_tol,
            initial_damping: s.initial_damping,
            min_damping: s.min_damping,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub min_time_gap: f64,
    pub max_detect_dist: f64,
    pub submap_halfwidth: f64,
    pub max_fitness: f64,
    pub min_inliers: f64,
    pub n_samples: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        let p = LoopParams::default();
        Self {
            min_time_gap: p.min_time_gap,
            max_detect_dist: p.max_detect_dist,
            submap_halfwidth: p.submap_halfwidth,
            max_fitness: p.max_fitness,
            min_inliers: p.min_inliers,
            n_samples: p.n_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub speed: f64,
    pub extra_distance: f64,
    pub control_dt: f64,
    /// Open polyline path used instead of the preset's own path.
    pub waypoints: Option<Vec<[f64; 3]>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        let p = PathParams::default();
        Self {
            speed: p.speed,
            extra_distance: p.extra_distance,
            control_dt: p.control_dt,
            waypoints: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    /// Directory written by `simulate` (sweeps plus trajectories); when set
    /// the pipeline loads it instead of simulating.
    pub sweeps: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub scanner: ScannerConfig,
    pub drift: DriftConfig,
    pub geometry: GeometryConfig,
    pub surfel: SurfelConfig,
    pub odometry: OdometryConfig,
    pub deformation: DeformationConfig,
    #[serde(rename = "loop")]
    pub loop_closure: LoopConfig,
    pub sim: SimConfig,
    pub input: InputConfig,
    pub output: OutputConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            world: WorldConfig::default(),
            scanner: ScannerConfig::default(),
            drift: DriftConfig::default(),
            geometry: GeometryConfig::default(),
            surfel: SurfelConfig::default(),
            odometry: OdometryConfig::default(),
            deformation: DeformationConfig::default(),
            loop_closure: LoopConfig::default(),
            sim: SimConfig::default(),
            input: InputConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("must be a finite number > 0, got {v}")))
    }
}

fn non_negative(key: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && !v.is_nan() {
        Ok(())
    } else {
        Err(invalid(key, format!("must be >= 0, got {v}")))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<(), ConfigError> {
    if v >= min {
        Ok(())
    } else {
        Err(invalid(key, format!("must be >= {min}, got {v}")))
    }
}

fn fraction(key: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(key, format!("must lie in [0, 1], got {v}")))
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Scenario config for a named world: a stricter planarity test so corner
    /// voxels are skipped, a registration prior to hold the estimate along
    /// corridor axes, and a stiffer deformation graph.
    /// `corridor-loop` also gets the 1%/m + 0.5°/m odometry drift.
    pub fn preset(preset: Preset) -> Self {
        let drift = match preset {
            Preset::CorridorLoop => DriftConfig {
                rate: 0.01,
                yaw_rate: 0.5,
            },
            _ => DriftConfig::default(),
        };
        Self {
            world: WorldConfig {
                preset: Some(preset.name().into()),
                patches: None,
            },
            drift,
            surfel: SurfelConfig {
                planarity_eps: 0.01,
                ..SurfelConfig::default()
            },
            odometry: OdometryConfig {
                max_corr_dist: 0.3,
                prior_weight: 100.0,
                ..OdometryConfig::default()
            },
            deformation: DeformationConfig {
                // nodes on a straight run leave roll about the run unconstrained
                w_rot: 1000.0,
                min_damping: 1.0,
                // shorter than the loop gap, so the old pass never binds to new nodes
                time_window: 10.0,
                ..DeformationConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let w = &self.world;
        match (&w.preset, &w.patches) {
            (Some(_), Some(_)) => return Err(invalid("world", "set either `preset` or `patches`, not both")),
            (None, None) => return Err(invalid("world", "one of `preset` or `patches` is required")),
            (Some(name), None) => {
                Preset::from_name(name).map_err(|e| invalid("world.preset", e.to_string()))?;
            }
            (None, Some(_)) => {
                if self.sim.waypoints.is_none() {
                    return Err(invalid("sim.waypoints", "required with custom world.patches"));
                }
            }
        }
        self.world().map_err(|e| invalid("world.patches", e.to_string()))?;

        let s = &self.scanner;
        at_least("scanner.rays", s.rays, 1)?;
        at_least("scanner.beams", s.beams, 1)?;
        positive("scanner.duration", s.duration)?;
        positive("scanner.max_range", s.max_range)?;
        non_negative("scanner.noise_sigma", s.noise_sigma)?;
        self.scanner_spec()
            .validate()
            .map_err(|e| invalid("scanner.min_elevation_deg", e.to_string()))?;

        non_negative("drift.rate", self.drift.rate)?;
        non_negative("drift.yaw_rate", self.drift.yaw_rate)?;

        let su = &self.surfel;
        positive("surfel.voxel", su.voxel)?;
        at_least("surfel.min_points", su.min_points, 3)?;
        non_negative("surfel.planarity_eps", su.planarity_eps)?;
        positive("surfel.merge_radius", su.merge_radius)?;
        if !(su.max_normal_angle > 0.0 && su.max_normal_angle <= 180.0) {
            return Err(invalid("surfel.max_normal_angle", "must lie in (0, 180]"));
        }
        positive("surfel.active_window", su.active_window)?;

        let o = &self.odometry;
        positive("odometry.max_corr_dist", o.max_corr_dist)?;
        positive("odometry.huber_delta", o.huber_delta)?;
        positive("odometry.tol", o.tol)?;
        at_least("odometry.max_iters", o.max_iters, 1)?;
        at_least("odometry.min_matches", o.min_matches, 1)?;
        non_negative("odometry.prior_weight", o.prior_weight)?;

        let d = &self.deformation;
        positive("deformation.node_spacing", d.node_spacing)?;
        at_least("deformation.k_edge", d.k_edge, 1)?;
        at_least("deformation.k_bind", d.k_bind, 1)?;
        if !(d.time_window > 0.0) {
            return Err(invalid("deformation.time_window", "must be > 0"));
        }
        non_negative("deformation.w_rot", d.w_rot)?;
        non_negative("deformation.w_reg", d.w_reg)?;
        non_negative("deformation.w_con", d.w_con)?;
        non_negative("deformation.w_pin", d.w_pin)?;
        at_least("deformation.max_iters", d.max_iters, 1)?;
        non_negative("deformation.rel_tol", d.rel_tol)?;
        positive("deformation.initial_damping", d.initial_damping)?;
        positive("deformation.min_damping", d.min_damping)?;

        let l = &self.loop_closure;
        positive("loop.min_time_gap", l.min_time_gap)?;
        positive("loop.max_detect_dist", l.max_detect_dist)?;
        positive("loop.submap_halfwidth", l.submap_halfwidth)?;
        positive("loop.max_fitness", l.max_fitness)?;
        fraction("loop.min_inliers", l.min_inliers)?;
        at_least("loop.n_samples", l.n_samples, 1)?;

        let sim = &self.sim;
        positive("sim.speed", sim.speed)?;
        non_negative("sim.extra_distance", sim.extra_distance)?;
        positive("sim.control_dt", sim.control_dt)?;
        if let Some(wp) = &sim.waypoints {
            if wp.len() < 2 {
                return Err(invalid("sim.waypoints", "needs at least two points"));
            }
            if wp.iter().flatten().any(|v| !v.is_finite()) {
                return Err(invalid("sim.waypoints", "coordinates must be finite"));
            }
        }
        Ok(())
    }

    pub fn world(&self) -> Result<WorldSpec, crate::sim::SimError> {
        match (&self.world.preset, &self.world.patches) {
            (_, Some(patches)) => WorldSpec::new(
                patches
                    .iter()
                    .map(|p| Patch {
                        corner: Vector3::from(p.corner),
                        edge_u: Vector3::from(p.edge_u),
                        edge_v: Vector3::from(p.edge_v),
                    })
                    .collect(),
            ),
            (Some(name), None) => Ok(WorldSpec::preset(Preset::from_name(name)?)),
            (None, None) => Err(crate::sim::SimError::InvalidParams("no world".into())),
        }
    }

    pub fn scanner_spec(&self) -> ScannerSpec {
        let s = &self.scanner;
        ScannerSpec {
            rays: s.rays,
            duration: s.duration,
            max_range: s.max_range,
            noise_sigma: s.noise_sigma,
            beams: s.beams,
            min_elevation_deg: s.min_elevation_deg,
            max_elevation_deg: s.max_elevation_deg,
        }
    }

    pub fn path_params(&self) -> PathParams {
        PathParams {
            speed: self.sim.speed,
            extra_distance: self.sim.extra_distance,
            control_dt: self.sim.control_dt,
        }
    }

    pub fn surfel_params(&self) -> SurfelParams {
        let s = &self.surfel;
        SurfelParams {
            voxel: s.voxel,
            min_points: s.min_points,
            planarity_eps: s.planarity_eps,
            merge_radius: s.merge_radius,
            max_normal_angle_deg: s.max_normal_angle,
        }
    }

    pub fn registration_params(&self) -> RegistrationParams {
        let o = &self.odometry;
        RegistrationParams {
            max_corr_dist: o.max_corr_dist,
            huber_delta: o.huber_delta,
            tol: o.tol,
            max_iters: o.max_iters,
            min_matches: o.min_matches,
            prior_weight: o.prior_weight,
        }
    }

    pub fn energy_weights(&self) -> EnergyWeights {
        let d = &self.deformation;
        EnergyWeights {
            w_rot: d.w_rot,
            w_reg: d.w_reg,
            w_con: d.w_con,
            w_pin: d.w_pin,
        }
    }

    pub fn solver_params(&self) -> SolverParams {
        let d = &self.deformation;
        SolverParams {
            max_iters: d.max_iters,
            rel_tol: d.rel_tol,
            initial_damping: d.initial_damping,
            min_damping: d.min_damping,
            ..SolverParams::default()
        }
    }

    pub fn loop_params(&self) -> LoopParams {
        let l = &self.loop_closure;
        LoopParams {
            min_time_gap: l.min_time_gap,
            max_detect_dist: l.max_detect_dist,
            submap_halfwidth: l.submap_halfwidth,
            max_fitness: l.max_fitness,
            min_inliers: l.min_inliers,
            n_samples: l.n_samples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.surfel.merge_radius, 0.25);
        assert_eq!(cfg.deformation.time_window, 30.0);
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            PipelineConfig::from_json(r#"{"bogus": 1}"#),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            PipelineConfig::from_json(r#"{"surfel": {"voxels": 1}}"#),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn range_errors_name_the_key() {
        let err = PipelineConfig::from_json(r#"{"surfel": {"voxel": -0.5}}"#).unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "surfel.voxel"));
        assert!(err.to_string().contains("surfel.voxel"));
        let err = PipelineConfig::from_json(r#"{"loop": {"min_inliers": 2}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { key, .. } if key == "loop.min_inliers"));
        let err = PipelineConfig::from_json(r#"{"world": {"preset": "moon"}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { key, .. } if key == "world.preset"));
    }

    #[test]
    fn custom_world_needs_waypoints() {
        let text =
            r#"{"world": {"preset": null, "patches": [{"corner": [0,0,0], "edge_u": [1,0,0], "edge_v": [0,1,0]}]}}"#;
        let err = PipelineConfig::from_json(text).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { key, .. } if key == "sim.waypoints"));
        let ok = r#"{"world": {"preset": null, "patches": [{"corner": [0,0,0], "edge_u": [1,0,0], "edge_v": [0,1,0]}]}, "sim": {"waypoints": [[0,0,0.5],[1,0,0.5]]}}"#;
        assert_eq!(PipelineConfig::from_json(ok).unwrap().world().unwrap().patches.len(), 1);
    }
}
