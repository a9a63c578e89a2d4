//! Evaluation metrics: joint error, Chamfer distance (object and
//! hand-relative), F-score, PSNR and SSIM.

use std::fmt::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Mat3, Vec3};
use crate::hand::Side;
use crate::image::Image;
use crate::model::{ModelSpec, Part};
use crate::params::ParamStore;
use crate::raster;

/// F-score threshold, meters.
pub const F_SCORE_TAU: f64 = 0.010;
pub const PSNR_CAP: f64 = 100.0;

pub use crate::geometry::PointGrid;

fn nearest_all(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    let grid = PointGrid::new(to);
    from.par_iter().map(|p| grid.nearest_sq(p)).collect()
}

/// Symmetric mean of squared nearest-neighbor distances, inputs in meters,
/// result in cm^2.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ab = nearest_all(a, b).iter().sum::<f64>() / a.len() as f64;
    let ba = nearest_all(b, a).iter().sum::<f64>() / b.len() as f64;
    Ok((ab + ba) * 1e4)
}

/// F-score at threshold `tau` (meters), in percent.
pub fn f_score(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let t2 = tau * tau;
    let precision = nearest_all(a, b).iter().filter(|d| **d <= t2).count() as f64 / a.len() as f64;
    let recall = nearest_all(b, a).iter().filter(|d| **d <= t2).count() as f64 / b.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(200.0 * precision * recall / (precision + recall))
}

/// Root-aligned joint error in millimeters: each predicted skeleton is
/// translated so its root matches the ground-truth root, and the error is
/// averaged over the non-root joints of every frame.
pub fn mpjpe(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predicted frames vs {} ground-truth frames", pred.len(), gt.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() || p.len() < 2 {
            return Err(Error::Shape(format!("{} predicted joints vs {} ground-truth joints", p.len(), g.len())));
        }
        let shift = g[0] - p[0];
        for (a, b) in p.iter().zip(g).skip(1) {
            sum += (a + shift - b).norm();
            count += 1;
        }
    }
    Ok(1e3 * sum / count as f64)
}

/// Hand-relative Chamfer distance: each frame's object clouds are expressed
/// in the respective hand root frame, then compared; averaged over frames.
pub fn hand_relative_chamfer(
    object_pred: &[Vec<Vec3>],
    object_gt: &[Vec<Vec3>],
    hand_pred: &[(Mat3, Vec3)],
    hand_gt: &[(Mat3, Vec3)],
) -> Result<f64> {
    let n = object_pred.len();
    if object_gt.len() != n || hand_pred.len() != n || hand_gt.len() != n || n == 0 {
        return Err(Error::Shape("hand-relative chamfer needs matching per-frame inputs".into()));
    }
    let local = |cloud: &[Vec3], (r, t): &(Mat3, Vec3)| cloud.iter().map(|p| r.transpose() * (p - t)).collect::<Vec<_>>();
    let mut total = 0.0;
    for f in 0..n {
        total += chamfer(&local(&object_pred[f], &hand_pred[f]), &local(&object_gt[f], &hand_gt[f]))?;
    }
    Ok(total / n as f64)
}

/// PSNR in dB for images in [0, 1], capped for near-identical inputs.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    pred.check_shape(gt, "psnr")?;
    let mse = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub use crate::losses::ssim;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub mpjpe_l: f64,
    pub mpjpe_r: f64,
    pub cd_o: f64,
    pub cd_l: f64,
    pub cd_r: f64,
    pub f10: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// mm
    pub mpjpe_l: f64,
    pub mpjpe_r: f64,
    /// cm^2
    pub cd_o: f64,
    pub cd_l: f64,
    pub cd_r: f64,
    /// percent
    pub f10: f64,
    /// dB
    pub psnr: f64,
    pub ssim: f64,
    pub frames: Vec<FrameMetrics>,
}

impl MetricReport {
    pub fn summary(&self) -> [(&'static str, f64); 8] {
        [
            ("mpjpe_l_mm", self.mpjpe_l),
            ("mpjpe_r_mm", self.mpjpe_r),
            ("cd_o_cm2", self.cd_o),
            ("cd_l_cm2", self.cd_l),
            ("cd_r_cm2", self.cd_r),
            ("f10_percent", self.f10),
            ("psnr_db", self.psnr),
            ("ssim", self.ssim),
        ]
    }

    /// Machine-readable `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.summary() {
            writeln!(s, "{k} = {v:.9e}").unwrap();
        }
        for f in &self.frames {
            let t = f.frame;
            for (k, v) in [
                ("mpjpe_l_mm", f.mpjpe_l),
                ("mpjpe_r_mm", f.mpjpe_r),
                ("cd_o_cm2", f.cd_o),
                ("cd_l_cm2", f.cd_l),
                ("cd_r_cm2", f.cd_r),
                ("f10_percent", f.f10),
                ("psnr_db", f.psnr),
                ("ssim", f.ssim),
            ] {
                writeln!(s, "frame.{t:04}.{k} = {v:.9e}").unwrap();
            }
        }
        s
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8} {:>7}",
            "frame", "MPJPE_l", "MPJPE_r", "CD_o", "CD_l", "CD_r", "F10", "PSNR", "SSIM"
        )
        .unwrap();
        let row = |s: &mut String, label: &str, v: [f64; 8]| {
            writeln!(
                s,
                "{label:>6} {:>9.3} {:>9.3} {:>9.4} {:>9.4} {:>9.4} {:>8.2} {:>8.2} {:>7.4}",
                v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]
            )
            .unwrap();
        };
        for f in &self.frames {
            row(&mut s, &f.frame.to_string(), [f.mpjpe_l, f.mpjpe_r, f.cd_o, f.cd_l, f.cd_r, f.f10, f.psnr, f.ssim]);
        }
        row(&mut s, "mean", self.summary().map(|(_, v)| v));
        s.push_str("units: MPJPE mm (root-aligned), CD cm^2, F10 % at 10 mm, PSNR dB\n");
        s
    }
}

/// Compares a fitted store against ground truth. `views` lists, per frame,
/// the camera used for the image metrics (training or held-out views); both
/// stores are rendered from it.
pub fn evaluate(model: &ModelSpec, gt: &ParamStore, pred: &ParamStore, views: &[Camera]) -> Result<MetricReport> {
    let n = model.frames;
    if views.len() != n {
        return Err(Error::Shape(format!("{} views for {n} frames", views.len())));
    }
    let gt_hand = model.canonical(gt, Part::Hand)?;
    let gt_obj = model.canonical(gt, Part::Object)?;
    let pr_hand = model.canonical(pred, Part::Hand)?;
    let pr_obj = model.canonical(pred, Part::Object)?;
    let frames: Vec<FrameMetrics> = (0..n)
        .into_par_iter()
        .map(|t| {
            let mut m = FrameMetrics {
                frame: t,
                mpjpe_l: 0.0,
                mpjpe_r: 0.0,
                cd_o: 0.0,
                cd_l: 0.0,
                cd_r: 0.0,
                f10: 0.0,
                psnr: 0.0,
                ssim: 0.0,
            };
            let obj_gt = model.object_points(gt, &gt_obj, t)?;
            let obj_pr = model.object_points(pred, &pr_obj, t)?;
            m.cd_o = chamfer(&obj_pr, &obj_gt)?;
            m.f10 = f_score(&obj_pr, &obj_gt, F_SCORE_TAU)?;
            for side in [Side::Left, Side::Right] {
                let err = mpjpe(&[model.keypoints(pred, t, side)?], &[model.keypoints(gt, t, side)?])?;
                let pp = model.pose(pred, t, side)?;
                let pg = model.pose(gt, t, side)?;
                let cd = hand_relative_chamfer(
                    std::slice::from_ref(&obj_pr),
                    std::slice::from_ref(&obj_gt),
                    &[(pp.rotation, pp.translation)],
                    &[(pg.rotation, pg.translation)],
                )?;
                match side {
                    Side::Left => (m.mpjpe_l, m.cd_l) = (err, cd),
                    Side::Right => (m.mpjpe_r, m.cd_r) = (err, cd),
                }
            }
            let cam = &views[t];
            let a = raster::render(&model.frame(pred, &pr_hand, &pr_obj, t)?.merged, cam)?.image;
            let b = raster::render(&model.frame(gt, &gt_hand, &gt_obj, t)?.merged, cam)?.image;
            m.psnr = psnr(&a, &b)?;
            m.ssim = ssim(&a, &b)?;
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let mean = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n as f64;
    Ok(MetricReport {
        mpjpe_l: mean(|f| f.mpjpe_l),
        mpjpe_r: mean(|f| f.mpjpe_r),
        cd_o: mean(|f| f.cd_o),
        cd_l: mean(|f| f.cd_l),
        cd_r: mean(|f| f.cd_r),
        f10: mean(|f| f.f10),
        psnr: mean(|f| f.psnr),
        ssim: mean(|f| f.ssim),
        frames,
    })
}
