//! Run configuration as flat `section.key = value` text.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    = blank | comment | entry
//! comment = "#" any*
//! entry   = key ws* "=" ws* value
//! key     = section "." name ("." name)*
//! ```
//!
//! Keys not mentioned keep their defaults; unknown keys are errors. Booleans
//! are `true`/`false`, lists are whitespace separated. [`RunConfig::to_text`]
//! writes every key in a fixed order, so parsing its output reproduces the
//! same config and the same text.

use std::fmt::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::geometry::{GaussianSet, Vec3};
use crate::guidance::{ExternalOracle, GuidanceOracle, GuidanceSchedule, MockOracle};
use crate::losses::LossWeights;
use crate::optim::{LearningRates, StageConfig};
use crate::synth::{ObjectShape, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    None,
    Mock,
    External,
}

impl OracleKind {
    fn as_str(self) -> &'static str {
        match self {
            OracleKind::None => "none",
            OracleKind::Mock => "mock",
            OracleKind::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub oracle: OracleKind,
    /// Residual noise of the mock oracle.
    pub noise: f64,
    pub address: String,
    pub timeout_ms: u64,
    pub t_min: u32,
    pub t_max: u32,
    pub scale: f64,
    pub samples: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            oracle: OracleKind::Mock,
            noise: 0.0,
            address: "127.0.0.1:7878".into(),
            timeout_ms: 30_000,
            t_min: 20,
            t_max: 980,
            scale: 1.0,
            samples: 1,
        }
    }
}

impl GuidanceConfig {
    pub fn schedule(&self) -> Result<GuidanceSchedule> {
        GuidanceSchedule::linear(self.t_min, self.t_max, self.scale, self.samples)
    }

    /// The configured oracle; the mock needs the reference object it
    /// compares against.
    pub fn oracle(&self, reference: Option<&GaussianSet>) -> Result<Option<Box<dyn GuidanceOracle>>> {
        Ok(match self.oracle {
            OracleKind::None => None,
            OracleKind::Mock => {
                let r = reference.ok_or_else(|| Error::Config("mock guidance needs a reference object".into()))?;
                Some(Box::new(MockOracle::new(r.clone(), self.noise)))
            }
            OracleKind::External => Some(Box::new(ExternalOracle {
                address: self.address.clone(),
                timeout: Duration::from_millis(self.timeout_ms),
            })),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene_dir: PathBuf,
    pub output_dir: PathBuf,
    pub synth: SceneSpec,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub loss: LossWeights,
    pub guidance: GuidanceConfig,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene_dir: "scene".into(),
            output_dir: "out".into(),
            synth: SceneSpec::default(),
            stage1: StageConfig::single_subject(),
            stage2: StageConfig::interacting(),
            loss: LossWeights::default(),
            guidance: GuidanceConfig::default(),
            deterministic: false,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, found `{v}`")),
    }
}

fn parse_shape(v: &str) -> std::result::Result<ObjectShape, String> {
    let words: Vec<&str> = v.split_whitespace().collect();
    let nums = |w: &[&str]| w.iter().map(|x| parse::<f64>(x)).collect::<std::result::Result<Vec<f64>, String>>();
    match words.split_first() {
        Some((&"sphere", rest)) if rest.len() == 1 => Ok(ObjectShape::Sphere { radius: nums(rest)?[0] }),
        Some((&kind @ ("box" | "composite"), rest)) if rest.len() == 3 => {
            let n = nums(rest)?;
            let half = Vec3::new(n[0], n[1], n[2]);
            Ok(if kind == "box" { ObjectShape::Box { half } } else { ObjectShape::Composite { half } })
        }
        _ => Err(format!("expected `sphere r`, `box hx hy hz` or `composite hx hy hz`, found `{v}`")),
    }
}

fn shape_text(s: &ObjectShape) -> String {
    match s {
        ObjectShape::Sphere { radius } => format!("sphere {radius}"),
        ObjectShape::Box { half } => format!("box {} {} {}", half.x, half.y, half.z),
        ObjectShape::Composite { half } => format!("composite {} {} {}", half.x, half.y, half.z),
    }
}

fn stage_entries(prefix: &str, c: &StageConfig, out: &mut Vec<(String, String)>) {
    let mut put = |k: &str, v: String| out.push((format!("{prefix}.{k}"), v));
    put("iterations", c.iterations.to_string());
    put("batch", c.batch.to_string());
    put("warmup", c.warmup.to_string());
    put("hand", c.hand.to_string());
    put("object", c.object.to_string());
    put("smoothness", c.smoothness.to_string());
    put("sds_every", c.sds_every.to_string());
    put("sds_size", c.sds_size.to_string());
    put("lr.centers", c.lr.centers.to_string());
    put("lr.planes", c.lr.planes.to_string());
    put("lr.heads", c.lr.heads.to_string());
    put("lr.pose", c.lr.pose.to_string());
    put("lr.rotation", c.lr.rotation.to_string());
    put("lr.translation", c.lr.translation.to_string());
    put("checkpoint_every", c.checkpoint_every.to_string());
    put("divergence_factor", c.divergence_factor.to_string());
    put("divergence_patience", c.divergence_patience.to_string());
}

fn set_stage(c: &mut StageConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let lr: &mut LearningRates = &mut c.lr;
    match key {
        "iterations" => c.iterations = parse(v)?,
        "batch" => c.batch = parse(v)?,
        "warmup" => c.warmup = parse(v)?,
        "hand" => c.hand = parse_bool(v)?,
        "object" => c.object = parse_bool(v)?,
        "smoothness" => c.smoothness = parse_bool(v)?,
        "sds_every" => c.sds_every = parse(v)?,
        "sds_size" => c.sds_size = parse(v)?,
        "lr.centers" => lr.centers = parse(v)?,
        "lr.planes" => lr.planes = parse(v)?,
        "lr.heads" => lr.heads = parse(v)?,
        "lr.pose" => lr.pose = parse(v)?,
        "lr.rotation" => lr.rotation = parse(v)?,
        "lr.translation" => lr.translation = parse(v)?,
        "checkpoint_every" => c.checkpoint_every = parse(v)?,
        "divergence_factor" => c.divergence_factor = parse(v)?,
        "divergence_patience" => c.divergence_patience = parse(v)?,
        _ => return Err(format!("unknown stage key `{key}`")),
    }
    Ok(())
}

impl RunConfig {
    /// Every key with its normalized value, in serialization order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("run.seed", self.seed.to_string());
        put("run.deterministic", self.deterministic.to_string());
        put("paths.scene_dir", self.scene_dir.display().to_string());
        put("paths.output_dir", self.output_dir.display().to_string());
        let s = &self.synth;
        put("synth.seed", s.seed.to_string());
        put("synth.frames", s.frames.to_string());
        put("synth.width", s.width.to_string());
        put("synth.height", s.height.to_string());
        put("synth.focal_factor", s.focal_factor.to_string());
        put("synth.object", shape_text(&s.object));
        put("synth.object_points", s.object_points.to_string());
        put("synth.hand_points", s.hand_points.to_string());
        put("synth.field_resolution", s.field_resolution.to_string());
        put("synth.field_width", s.field_width.to_string());
        put("synth.head_hidden", s.head_hidden.to_string());
        put("synth.orbit_radius", s.orbit_radius.to_string());
        put("synth.orbit_sweep", s.orbit_sweep.to_string());
        put("synth.orbit_elevation", s.orbit_elevation.to_string());
        put("synth.grip_amplitude", s.grip_amplitude.to_string());
        put("synth.grip_cycles", s.grip_cycles.to_string());
        put("synth.object_yaw_sweep", s.object_yaw_sweep.to_string());
        put("synth.pose_noise", s.pose_noise.to_string());
        put("synth.rotation_noise", s.rotation_noise.to_string());
        put("synth.translation_noise", s.translation_noise.to_string());
        put("synth.dropout", s.dropout.to_string());
        put("synth.view_retention", s.view_retention.to_string());
        let l = &self.loss;
        put("loss.ssim", l.ssim.to_string());
        put("loss.perceptual", l.perceptual.to_string());
        put("loss.color", l.color.to_string());
        put("loss.scale", l.scale.to_string());
        put("loss.mask", l.mask.to_string());
        put("loss.lbs", l.lbs.to_string());
        put("loss.contact", l.contact.to_string());
        let g = &self.guidance;
        put("guidance.oracle", g.oracle.as_str().to_string());
        put("guidance.noise", g.noise.to_string());
        put("guidance.address", g.address.clone());
        put("guidance.timeout_ms", g.timeout_ms.to_string());
        put("guidance.t_min", g.t_min.to_string());
        put("guidance.t_max", g.t_max.to_string());
        put("guidance.scale", g.scale.to_string());
        put("guidance.samples", g.samples.to_string());
        stage_entries("stage1", &self.stage1, &mut out);
        stage_entries("stage2", &self.stage2, &mut out);
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let s = &mut self.synth;
        let l = &mut self.loss;
        let g = &mut self.guidance;
        match key {
            "run.seed" => self.seed = parse(v)?,
            "run.deterministic" => self.deterministic = parse_bool(v)?,
            "paths.scene_dir" => self.scene_dir = v.into(),
            "paths.output_dir" => self.output_dir = v.into(),
            "synth.seed" => s.seed = parse(v)?,
            "synth.frames" => s.frames = parse(v)?,
            "synth.width" => s.width = parse(v)?,
            "synth.height" => s.height = parse(v)?,
            "synth.focal_factor" => s.focal_factor = parse(v)?,
            "synth.object" => s.object = parse_shape(v)?,
            "synth.object_points" => s.object_points = parse(v)?,
            "synth.hand_points" => s.hand_points = parse(v)?,
            "synth.field_resolution" => s.field_resolution = parse(v)?,
            "synth.field_width" => s.field_width = parse(v)?,
            "synth.head_hidden" => s.head_hidden = parse(v)?,
            "synth.orbit_radius" => s.orbit_radius = parse(v)?,
            "synth.orbit_sweep" => s.orbit_sweep = parse(v)?,
            "synth.orbit_elevation" => s.orbit_elevation = parse(v)?,
            "synth.grip_amplitude" => s.grip_amplitude = parse(v)?,
            "synth.grip_cycles" => s.grip_cycles = parse(v)?,
            "synth.object_yaw_sweep" => s.object_yaw_sweep = parse(v)?,
            "synth.pose_noise" => s.pose_noise = parse(v)?,
            "synth.rotation_noise" => s.rotation_noise = parse(v)?,
            "synth.translation_noise" => s.translation_noise = parse(v)?,
            "synth.dropout" => s.dropout = parse(v)?,
            "synth.view_retention" => s.view_retention = parse(v)?,
            "loss.ssim" => l.ssim = parse(v)?,
            "loss.perceptual" => l.perceptual = parse(v)?,
            "loss.color" => l.color = parse(v)?,
            "loss.scale" => l.scale = parse(v)?,
            "loss.mask" => l.mask = parse(v)?,
            "loss.lbs" => l.lbs = parse(v)?,
            "loss.contact" => l.contact = parse(v)?,
            "guidance.oracle" => {
                g.oracle = match v {
                    "none" => OracleKind::None,
                    "mock" => OracleKind::Mock,
                    "external" => OracleKind::External,
                    _ => return Err(format!("unknown oracle `{v}`")),
                }
            }
            "guidance.noise" => g.noise = parse(v)?,
            "guidance.address" => g.address = v.to_string(),
            "guidance.timeout_ms" => g.timeout_ms = parse(v)?,
            "guidance.t_min" => g.t_min = parse(v)?,
            "guidance.t_max" => g.t_max = parse(v)?,
            "guidance.scale" => g.scale = parse(v)?,
            "guidance.samples" => g.samples = parse(v)?,
            _ => {
                if let Some(rest) = key.strip_prefix("stage1.") {
                    set_stage(&mut self.stage1, rest, v)?
                } else if let Some(rest) = key.strip_prefix("stage2.") {
                    set_stage(&mut self.stage2, rest, v)?
                } else {
                    return Err(format!("unknown key `{key}`"));
                }
            }
        }
        Ok(())
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: "expected `key = value`".into() })?;
            c.set(k.trim(), v.trim()).map_err(|msg| Error::Parse { line: i + 1, msg })?;
        }
        c.sync_seeds();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&crate::io::read_to_string(path)?)
    }

    /// Stage seeds follow the run seed.
    pub fn sync_seeds(&mut self) {
        self.stage1.seed = self.seed;
        self.stage2.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.loss.validate()?;
        self.guidance.schedule()?;
        Ok(())
    }

    /// SHA-256 of the normalized text, hex encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
