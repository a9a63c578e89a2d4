use std::path::Path;
use std::process::Command;

use handsplat::config::RunConfig;
use handsplat::image::Image;

const TINY: &str = "\
synth.frames = 4
synth.width = 40
synth.height = 40
synth.object_points = 150
synth.hand_points = 150
synth.field_resolution = 16
synth.field_width = 20
synth.head_hidden = 40
stage1.iterations = 6
stage1.batch = 2
stage1.warmup = 2
stage1.sds_every = 2
stage1.sds_size = 24
stage2.iterations = 3
stage2.batch = 2
stage2.warmup = 1
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_handsplat"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    let text = format!(
        "{TINY}paths.scene_dir = {}\npaths.output_dir = {}\n{extra}",
        dir.join("scene").display(),
        dir.join("out").display()
    );
    std::fs::write(&p, text).unwrap();
    p
}

fn code(cmd: &mut Command) -> i32 {
    cmd.status().unwrap().code().unwrap()
}

#[test]
fn pipeline_synth_fit_eval_render_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    assert_eq!(code(bin().args(["synth", "--config", c])), 0);
    assert!(dir.path().join("scene/frames/0003.png").exists());
    assert_eq!(code(bin().args(["fit", "--config", c])), 0);
    assert_eq!(code(bin().args(["eval", "--config", c])), 0);
    let report = std::fs::read_to_string(dir.path().join("out/report.txt")).unwrap();
    for key in ["mpjpe_l_mm", "mpjpe_r_mm", "cd_o_cm2", "cd_l_cm2", "cd_r_cm2", "f10_percent", "psnr_db", "ssim"] {
        let line = report.lines().find(|l| l.starts_with(&format!("{key} = "))).unwrap_or_else(|| panic!("{key} missing"));
        let v: f64 = line.split(" = ").nth(1).unwrap().parse().unwrap();
        assert!(v.is_finite(), "{key} = {v}");
    }

    assert_eq!(code(bin().args(["render", "--config", c, "--flip-view", "180deg"])), 0);
    let img = Image::load_png(&dir.path().join("out/render/0000.png"), 3).unwrap();
    assert_eq!((img.width, img.height), (40, 40));
    let gt = dir.path().join("scene/gt_params.ckpt");
    assert_eq!(code(bin().args(["render", "--config", c, "--poses", gt.to_str().unwrap()])), 0);

    assert_eq!(code(bin().args(["export", "--config", c, "--frame", "1"])), 0);
    for f in ["left.ply", "right.ply", "object.ply", "object_hull.obj"] {
        assert!(dir.path().join("out/export").join(f).exists(), "{f}");
    }
    let obj = handsplat::ply::import_ply(&dir.path().join("out/export/object.ply")).unwrap();
    assert_eq!(obj.len(), 150);
    assert_eq!(code(bin().args(["export", "--config", c, "--frame", "9"])), 1);
}

#[test]
fn deterministic_fits_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    assert_eq!(code(bin().args(["synth", "--config", c])), 0);
    let mut runs = Vec::new();
    // The config hash covers the output path, so both runs write to the same place.
    let out = dir.path().join("out");
    for workers in ["1", "3"] {
        let status = code(bin().env("HANDSPLAT_WORKERS", workers).args([
            "fit",
            "--config",
            c,
            "--deterministic",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(status, 0);
        runs.push((
            std::fs::read(out.join("manifest.txt")).unwrap(),
            std::fs::read(out.join("fitted.ckpt")).unwrap(),
        ));
        std::fs::remove_dir_all(&out).unwrap();
    }
    assert_eq!(runs[0], runs[1]);
    let manifest = String::from_utf8(runs[0].0.clone()).unwrap();
    assert!(manifest.contains("seed = 7"));
    assert!(!manifest.contains("wall_seconds"));
}

#[test]
fn exit_codes() {
    assert_eq!(code(bin().arg("frobnicate")), 1);
    assert_eq!(code(bin().args(["fit", "--bogus-flag"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "stage1.iterations = many\n").unwrap();
    assert_eq!(code(bin().args(["fit", "--config", bad.to_str().unwrap()])), 2);
    // missing scene directory is a runtime failure
    let cfg = write_config(dir.path(), "");
    assert_eq!(code(bin().args(["fit", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn written_config_reparses_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.seed = 3\n");
    let c = RunConfig::load(&cfg).unwrap();
    let again = RunConfig::parse(&c.to_text()).unwrap();
    assert_eq!(again, c);
    assert_eq!(again.hash(), c.hash());
}
