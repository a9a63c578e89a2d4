//! Command-line entry points.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, Camera, GaussianSet, Subject, Vec3};
use crate::model::{names, ModelSpec, Part};
use crate::optim::{self, FitData, Guidance};
use crate::params::ParamStore;
use crate::{hull, io, metrics, ply, raster, synth};

/// Environment variable holding the worker thread count.
pub const WORKERS_ENV: &str = "HANDSPLAT_WORKERS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "handsplat", version, about = "Gaussian splatting reconstruction of two hands and an object")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Run configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `paths.scene_dir`.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Overrides `paths.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic sequence into the scene directory.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Run both optimization stages on the scene directory.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Omit wall-clock fields so repeated runs produce identical files.
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render fitted Gaussians for every frame.
    Render {
        #[command(flatten)]
        common: Common,
        /// Parameters to render; defaults to the fitted checkpoint.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Take hand and object tracks from this checkpoint (novel poses).
        #[arg(long)]
        poses: Option<PathBuf>,
        /// Orbit every camera about the vertical axis, e.g. `180deg` or `0.5rad`.
        #[arg(long, default_value = "0deg")]
        flip_view: String,
    },
    /// Compare fitted parameters with the scene's ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Write posed Gaussians of one frame as PLY and the object hull as OBJ.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        frame: usize,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_workers();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn configure_workers() {
    if let Some(n) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &common.scene {
        cfg.scene_dir = s.clone();
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

/// Parses an angle such as `180deg`, `0.5rad` or a bare number of degrees.
pub fn parse_angle(text: &str) -> Result<f64> {
    let t = text.trim();
    let (num, radians) = if let Some(n) = t.strip_suffix("deg") {
        (n, false)
    } else if let Some(n) = t.strip_suffix("rad") {
        (n, true)
    } else {
        (t, false)
    };
    let v: f64 = num.trim().parse().map_err(|_| Error::Usage(format!("bad angle `{text}`")))?;
    Ok(if radians { v } else { v.to_radians() })
}

/// The camera moved along a circle about the world vertical axis through
/// the origin, still looking the same way relative to the scene.
pub fn orbit_about_up(cam: &Camera, angle: f64) -> Camera {
    let r = exp_so3(&(Vec3::y() * angle));
    Camera {
        rotation: cam.rotation * r.transpose(),
        ..cam.clone()
    }
}

fn scene_cameras(cfg: &RunConfig) -> Result<Vec<Camera>> {
    let text = io::read_to_string(&cfg.scene_dir.join("cameras.txt"))?;
    io::parse_cameras(&text, cfg.synth.width, cfg.synth.height, 0.01)
}

fn fitted_path(cfg: &RunConfig, params: &Option<PathBuf>) -> PathBuf {
    params.clone().unwrap_or_else(|| cfg.output_dir.join("fitted.ckpt"))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            let seq = synth::generate(&cfg.synth)?;
            synth::write_dir(&seq, &cfg.scene_dir)?;
            io::write_atomic(&cfg.scene_dir.join("config.txt"), cfg.to_text().as_bytes())?;
            log::info!("wrote {} frames to {}", seq.model.frames, cfg.scene_dir.display());
            Ok(())
        }
        Command::Fit { common, deterministic, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.deterministic |= deterministic;
            cfg.sync_seeds();
            cfg.validate()?;
            fit(&cfg)
        }
        Command::Render { common, params, poses, flip_view } => {
            let cfg = load_config(&common)?;
            let angle = parse_angle(&flip_view)?;
            let model = synth::model_for(&cfg.synth)?;
            let mut store = ParamStore::load(&fitted_path(&cfg, &params))?;
            if let Some(p) = poses {
                let source = ParamStore::load(&p)?;
                for name in names::tracks() {
                    store.insert(name, source.get(name)?.clone());
                }
            }
            model.check_store(&store)?;
            let cams = scene_cameras(&cfg)?;
            let dir = cfg.output_dir.join("render");
            for (t, img) in render_frames(&model, &store, &cams, angle)?.iter().enumerate() {
                img.save_png(&dir.join(format!("{t:04}.png")), false)?;
            }
            Ok(())
        }
        Command::Eval { common, params } => {
            let cfg = load_config(&common)?;
            let model = synth::model_for(&cfg.synth)?;
            let gt = ParamStore::load(&cfg.scene_dir.join("gt_params.ckpt"))?;
            let pred = ParamStore::load(&fitted_path(&cfg, &params))?;
            let report = metrics::evaluate(&model, &gt, &pred, &scene_cameras(&cfg)?)?;
            io::write_atomic(&cfg.output_dir.join("report.txt"), report.to_kv().as_bytes())?;
            println!("{}", report.to_table());
            Ok(())
        }
        Command::Export { common, params, frame } => {
            let cfg = load_config(&common)?;
            let model = synth::model_for(&cfg.synth)?;
            let store = ParamStore::load(&fitted_path(&cfg, &params))?;
            export(&model, &store, frame, &cfg.output_dir.join("export"))
        }
    }
}

/// Renders `store` from every camera, optionally orbited about the vertical
/// axis.
pub fn render_frames(model: &ModelSpec, store: &ParamStore, cams: &[Camera], angle: f64) -> Result<Vec<crate::image::Image>> {
    if cams.len() != model.frames {
        return Err(Error::Shape(format!("{} cameras for {} frames", cams.len(), model.frames)));
    }
    let hand = model.canonical(store, Part::Hand)?;
    let object = model.canonical(store, Part::Object)?;
    (0..model.frames)
        .map(|t| {
            let scene = model.frame(store, &hand, &object, t)?;
            Ok(raster::render(&scene.merged, &orbit_about_up(&cams[t], angle))?.image)
        })
        .collect()
}

/// Writes `left.ply`, `right.ply`, `object.ply` (world space at `frame`)
/// and `object_hull.obj`.
pub fn export(model: &ModelSpec, store: &ParamStore, frame: usize, dir: &Path) -> Result<()> {
    if frame >= model.frames {
        return Err(Error::Usage(format!("frame {frame} out of range (0..{})", model.frames)));
    }
    let hand = model.canonical(store, Part::Hand)?;
    let object = model.canonical(store, Part::Object)?;
    let scene = model.frame(store, &hand, &object, frame)?;
    let [nl, nr, _] = scene.counts;
    let g = &scene.merged.gaussians;
    let parts = [
        (Subject::LeftHand, &g[..nl]),
        (Subject::RightHand, &g[nl..nl + nr]),
        (Subject::Object, &g[nl + nr..]),
    ];
    for (subject, gs) in parts {
        let set = GaussianSet::new(subject, gs.to_vec());
        ply::export_ply(&set, &dir.join(format!("{}.ply", subject.as_str())))?;
    }
    let centers: Vec<Vec3> = g[nl + nr..].iter().map(|g| g.center).collect();
    let mesh = hull::convex_hull(&centers)?;
    io::write_atomic(&dir.join("object_hull.obj"), mesh.to_obj().as_bytes())
}

fn fit(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let model = synth::model_for(&cfg.synth)?;
    let observations = synth::read_observations(&cfg.scene_dir, cfg.synth.width, cfg.synth.height)?;
    let init = ParamStore::load(&cfg.scene_dir.join("init_params.ckpt"))?;
    let data = FitData { model: &model, observations: &observations };
    let out = &cfg.output_dir;
    let ckpt_dir = out.join("checkpoints");
    let stage_cfg = |c: &optim::StageConfig| optim::StageConfig {
        checkpoint_dir: (c.checkpoint_every > 0).then(|| ckpt_dir.clone()),
        ..c.clone()
    };

    let reference = if cfg.stage1.sds_every > 0 && cfg.guidance.oracle == crate::config::OracleKind::Mock {
        let gt = ParamStore::load(&cfg.scene_dir.join("gt_params.ckpt"))?;
        Some(model.canonical(&gt, Part::Object)?.set)
    } else {
        None
    };
    let oracle = if cfg.stage1.sds_every > 0 { cfg.guidance.oracle(reference.as_ref())? } else { None };
    let guidance = match &oracle {
        Some(o) => Some(Guidance {
            oracle: o.as_ref(),
            schedule: cfg.guidance.schedule()?,
        }),
        None => None,
    };

    let s1 = handle_divergence(optim::stage_single_subject(data, init, &stage_cfg(&cfg.stage1), &cfg.loss, guidance.as_ref()), out)?;
    s1.store.save(&out.join("stage1.ckpt"))?;
    let s2 = handle_divergence(optim::stage_interacting(data, s1.store.clone(), &stage_cfg(&cfg.stage2), &cfg.loss), out)?;
    s2.store.save(&out.join("fitted.ckpt"))?;

    let mut manifest = optim::manifest(&cfg.hash(), cfg.seed, &[("stage1", &s1), ("stage2", &s2)]);
    if !cfg.deterministic {
        manifest.push_str(&format!("wall_seconds = {:.3}\n", start.elapsed().as_secs_f64()));
    }
    io::write_atomic(&out.join("config.txt"), cfg.to_text().as_bytes())?;
    io::write_atomic(&out.join("manifest.txt"), manifest.as_bytes())
}

/// Saves the last good parameters of a diverged stage before passing the
/// error on.
fn handle_divergence(r: Result<optim::StageResult>, out: &Path) -> Result<optim::StageResult> {
    match r {
        Err(Error::Diverged { iteration, loss, initial, checkpoint }) => {
            checkpoint.save(&out.join("diverged.ckpt"))?;
            Err(Error::Diverged { iteration, loss, initial, checkpoint })
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angles() {
        assert!((parse_angle("180deg").unwrap() - std::f64::consts::PI).abs() < 1e-15);
        assert_eq!(parse_angle("0.5rad").unwrap(), 0.5);
        assert!((parse_angle("90").unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!(parse_angle("left").is_err());
    }

    #[test]
    fn orbit_keeps_distance_to_origin() {
        let cam = Camera::look_at(&Vec3::new(0.1, 0.2, -0.5), &Vec3::zeros(), &Vec3::y(), 100.0, 64, 64);
        let moved = orbit_about_up(&cam, 1.0);
        let center = |c: &Camera| -(c.rotation.transpose() * c.translation);
        assert!((center(&moved).norm() - center(&cam).norm()).abs() < 1e-12);
        assert!((center(&moved).y - center(&cam).y).abs() < 1e-12);
        // the origin stays at the same pixel
        let o = |c: &Camera| c.rotation * Vec3::zeros() + c.translation;
        assert!((o(&moved) - o(&cam)).norm() < 1e-12);
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["handsplat", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["handsplat", "--help"]), EXIT_OK);
    }
}
