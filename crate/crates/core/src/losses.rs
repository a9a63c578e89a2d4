//! Training objectives with analytic gradients.
//!
//! The pretrained perceptual network of the original objective is replaced by
//! an edge proxy: L1 between Sobel responses of the two images at three
//! dyadic scales.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Camera, PointGrid, Vec3};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const EDGE_SCALES: usize = 3;
/// Neighbors per Gaussian in the color regularizer graph.
pub const COLOR_NEIGHBORS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ssim: f64,
    pub perceptual: f64,
    pub color: f64,
    pub scale: f64,
    pub mask: f64,
    pub lbs: f64,
    pub contact: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ssim: 0.2,
            perceptual: 1.0,
            color: 0.1,
            scale: 100.0,
            mask: 10.0,
            lbs: 1e3,
            contact: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.ssim,
            self.perceptual,
            self.color,
            self.scale,
            self.mask,
            self.lbs,
            self.contact,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// One observed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub frame: usize,
    pub image: Image,
    /// Left hand, right hand, object; single channel, values in {0, 1}.
    pub masks: [Image; 3],
    pub combined: Image,
    pub camera: Camera,
}

impl FrameObservation {
    pub fn new(frame: usize, image: Image, masks: [Image; 3], camera: Camera) -> Result<Self> {
        for m in &masks {
            if m.width != image.width || m.height != image.height || m.channels != 1 {
                return Err(Error::Shape("mask does not match frame".into()));
            }
            if m.data.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::Shape("mask values must be 0 or 1".into()));
            }
        }
        let combined = Image::from_fn(image.width, image.height, 1, |x, y, _| {
            masks.iter().map(|m| m.get(x, y, 0)).fold(0.0, f64::max)
        });
        Ok(FrameObservation {
            frame,
            image,
            masks,
            combined,
            camera,
        })
    }
}

/// Unweighted image terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ImageTerms {
    pub l1: f64,
    /// `1 - SSIM`.
    pub ssim: f64,
    pub perceptual: f64,
    pub mask: f64,
}

impl ImageTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.l1 + w.ssim * self.ssim + w.perceptual * self.perceptual + w.mask * self.mask
    }
}

/// Masked image consistency against `gt` under the subject mask, plus the
/// outlier mask term under the combined mask. Returns the weighted gradient
/// with respect to `pred`.
pub fn image_loss(
    pred: &Image,
    gt: &Image,
    subject_mask: &Image,
    combined_mask: &Image,
    w: &LossWeights,
) -> Result<(ImageTerms, Image)> {
    pred.check_shape(gt, "image loss")?;
    if subject_mask.width != pred.width || subject_mask.height != pred.height || subject_mask.channels != 1 {
        return Err(Error::Shape("subject mask does not match image".into()));
    }
    if !combined_mask.same_shape(subject_mask) {
        return Err(Error::Shape("combined mask does not match image".into()));
    }
    let ch = pred.channels;
    let mut grad = Image::zeros(pred.width, pred.height, ch);
    let mut terms = ImageTerms::default();

    let masked_px: f64 = subject_mask.data.iter().sum();
    if masked_px > 0.0 {
        let norm = masked_px * ch as f64;
        for p in 0..pred.pixel_count() {
            let m = subject_mask.data[p];
            if m == 0.0 {
                continue;
            }
            for c in 0..ch {
                let i = p * ch + c;
                let d = m * (pred.data[i] - gt.data[i]);
                terms.l1 += d.abs() / norm;
                grad.data[i] += m * sign(d) / norm;
            }
        }

        let xp = pred.masked(subject_mask);
        let xg = gt.masked(subject_mask);
        if let Some(region) = ssim_region(subject_mask) {
            let (s, g) = ssim_region_grad(&xp, &xg, region, w.ssim != 0.0);
            terms.ssim = 1.0 - s;
            if let Some(g) = g {
                for p in 0..pred.pixel_count() {
                    for c in 0..ch {
                        let i = p * ch + c;
                        grad.data[i] -= w.ssim * subject_mask.data[p] * g.data[i];
                    }
                }
            }
        }

        let (e, g) = edge_loss(&xp, &xg, w.perceptual != 0.0);
        terms.perceptual = e;
        if let Some(g) = g {
            for p in 0..pred.pixel_count() {
                for c in 0..ch {
                    let i = p * ch + c;
                    grad.data[i] += w.perceptual * subject_mask.data[p] * g.data[i];
                }
            }
        }
    }

    let n = pred.data.len() as f64;
    for p in 0..pred.pixel_count() {
        let outside = 1.0 - combined_mask.data[p];
        for c in 0..ch {
            let i = p * ch + c;
            terms.mask += outside * pred.data[i] / n;
            grad.data[i] += w.mask * outside / n;
        }
    }
    Ok((terms, grad))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
pub type Region = (usize, usize, usize, usize);

/// Bounding box of the nonzero mask pixels grown to at least one SSIM
/// window per side; `None` for an empty mask or an image smaller than the
/// window.
pub fn ssim_region(mask: &Image) -> Option<Region> {
    if mask.width < SSIM_WINDOW || mask.height < SSIM_WINDOW {
        return None;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y, 0) > 0.0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    let grow = |lo: usize, hi: usize, n: usize| {
        if hi - lo >= SSIM_WINDOW {
            return (lo, hi);
        }
        let need = SSIM_WINDOW - (hi - lo);
        let lo = lo - lo.min(need / 2);
        if lo + SSIM_WINDOW > n {
            (n - SSIM_WINDOW, n)
        } else {
            (lo, lo + SSIM_WINDOW)
        }
    };
    let (x0, x1) = grow(x0, x1, mask.width);
    let (y0, y1) = grow(y0, y1, mask.height);
    Some((x0, x1, y0, y1))
}

pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filtering of a `w x h` map.
fn filter_valid(map: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * map[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(g: &[f64], ow: usize, oh: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (w, h) = (ow + n - 1, oh + n - 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for i in 0..n {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..n {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

/// Mean SSIM over every valid 11x11 window inside `region` and over
/// channels, and optionally its gradient with respect to `x`.
pub fn ssim_region_grad(x: &Image, y: &Image, region: Region, want_grad: bool) -> (f64, Option<Image>) {
    let (x0, x1, y0, y1) = region;
    let (w, h) = (x1 - x0, y1 - y0);
    let k = ssim_kernel();
    let ch = x.channels;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::zeros(x.width, x.height, ch));
    let mut count = 0usize;
    for c in 0..ch {
        let crop = |img: &Image| -> Vec<f64> {
            let mut v = Vec::with_capacity(w * h);
            for yy in y0..y1 {
                for xx in x0..x1 {
                    v.push(img.get(xx, yy, c));
                }
            }
            v
        };
        let a = crop(x);
        let b = crop(y);
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
        let (mu_a, ow, oh) = filter_valid(&a, w, h, &k);
        let (mu_b, _, _) = filter_valid(&b, w, h, &k);
        let (e_aa, _, _) = filter_valid(&aa, w, h, &k);
        let (e_bb, _, _) = filter_valid(&bb, w, h, &k);
        let (e_ab, _, _) = filter_valid(&ab, w, h, &k);
        let nwin = ow * oh;
        count += nwin;
        // Gradient terms are arranged so every one vanishes exactly when the
        // two windows are bitwise equal.
        let mut g_mu = vec![0.0; nwin];
        let mut g_e = vec![0.0; nwin];
        let mut g_mae = vec![0.0; nwin];
        let mut g_cov = vec![0.0; nwin];
        for i in 0..nwin {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let a1 = 2.0 * ma * mb + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = ma * ma + mb * mb + SSIM_C1;
            let b2 = va + vb + SSIM_C2;
            let (r1, r2) = (a1 / b1, a2 / b2);
            total += r1 * r2;
            if want_grad {
                let d_mu = 2.0 * r2 / b1 * (mb - ma * r1);
                let d_cov = 2.0 * r1 / b2;
                // 2 dS/dvar + dS/dcov
                let e = d_cov * (1.0 - r2);
                g_mu[i] = d_mu - d_cov * (mb - ma);
                g_e[i] = e;
                g_mae[i] = ma * e;
                g_cov[i] = d_cov;
            }
        }
        if let Some(g) = grad.as_mut() {
            let t_mu = filter_valid_adjoint(&g_mu, ow, oh, &k);
            let t_e = filter_valid_adjoint(&g_e, ow, oh, &k);
            let t_mae = filter_valid_adjoint(&g_mae, ow, oh, &k);
            let t_cov = filter_valid_adjoint(&g_cov, ow, oh, &k);
            for yy in 0..h {
                for xx in 0..w {
                    let i = yy * w + xx;
                    let v = t_mu[i] + a[i] * t_e[i] - t_mae[i] + (b[i] - a[i]) * t_cov[i];
                    let idx = g.idx(x0 + xx, y0 + yy, c);
                    g.data[idx] = v;
                }
            }
        }
    }
    let n = count as f64;
    if let Some(g) = grad.as_mut() {
        for v in g.data.iter_mut() {
            *v /= n;
        }
    }
    (total / n, grad)
}

/// Mean SSIM over the whole image.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    x.check_shape(y, "ssim")?;
    if x.width < SSIM_WINDOW || x.height < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    Ok(ssim_region_grad(x, y, (0, x.width, 0, x.height), false).0)
}

fn downsample(map: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w / 2, h / 2);
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] =
                0.25 * (map[2 * y * w + 2 * x] + map[2 * y * w + 2 * x + 1] + map[(2 * y + 1) * w + 2 * x] + map[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, ow, oh)
}

fn downsample_adjoint(g: &[f64], ow: usize, oh: usize, w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = 0.25 * g[y * ow + x];
            out[2 * y * w + 2 * x] += v;
            out[2 * y * w + 2 * x + 1] += v;
            out[(2 * y + 1) * w + 2 * x] += v;
            out[(2 * y + 1) * w + 2 * x + 1] += v;
        }
    }
    out
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn sobel(map: &[f64], w: usize, h: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let (ow, oh) = (w - 2, h - 2);
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (dy, row) in k.iter().enumerate() {
                for (dx, kv) in row.iter().enumerate() {
                    s += kv * map[(y + dy) * w + x + dx];
                }
            }
            out[y * ow + x] = s;
        }
    }
    out
}

fn sobel_adjoint(g: &[f64], w: usize, h: usize, k: &[[f64; 3]; 3], out: &mut [f64]) {
    let (ow, oh) = (w - 2, h - 2);
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            if v == 0.0 {
                continue;
            }
            for (dy, row) in k.iter().enumerate() {
                for (dx, kv) in row.iter().enumerate() {
                    out[(y + dy) * w + x + dx] += kv * v;
                }
            }
        }
    }
}

/// Multi-scale edge proxy: mean |Sobel(x) - Sobel(y)| per scale, averaged
/// over the scales that are at least 3x3.
pub fn edge_loss(x: &Image, y: &Image, want_grad: bool) -> (f64, Option<Image>) {
    let ch = x.channels;
    let mut grad = want_grad.then(|| Image::zeros(x.width, x.height, ch));
    let mut per_scale = [0.0; EDGE_SCALES];
    let mut used = 0;
    for s in 0..EDGE_SCALES {
        let (mut w, mut h) = (x.width, x.height);
        for _ in 0..s {
            w /= 2;
            h /= 2;
        }
        if w >= 3 && h >= 3 {
            used += 1;
        }
    }
    if used == 0 {
        return (0.0, grad);
    }
    for c in 0..ch {
        let plane = |img: &Image| -> Vec<f64> { (0..img.pixel_count()).map(|p| img.data[p * ch + c]).collect() };
        let mut a = plane(x);
        let mut b = plane(y);
        let (mut w, mut h) = (x.width, x.height);
        let mut dims = vec![(w, h)];
        let mut grads_at_scale: Vec<Vec<f64>> = Vec::new();
        for s in 0..used {
            if s > 0 {
                let (a2, w2, h2) = downsample(&a, w, h);
                let (b2, _, _) = downsample(&b, w, h);
                a = a2;
                b = b2;
                w = w2;
                h = h2;
                dims.push((w, h));
            }
            let n = ((w - 2) * (h - 2) * 2 * ch) as f64;
            let mut g = vec![0.0; w * h];
            for k in [&SOBEL_X, &SOBEL_Y] {
                let ea = sobel(&a, w, h, k);
                let eb = sobel(&b, w, h, k);
                let d: Vec<f64> = ea.iter().zip(&eb).map(|(p, q)| p - q).collect();
                per_scale[s] += d.iter().map(|v| v.abs()).sum::<f64>() / n;
                if want_grad {
                    let sg: Vec<f64> = d.iter().map(|v| sign(*v) / (n * used as f64)).collect();
                    sobel_adjoint(&sg, w, h, k, &mut g);
                }
            }
            grads_at_scale.push(g);
        }
        if let Some(out) = grad.as_mut() {
            let mut acc = grads_at_scale.pop().unwrap();
            for s in (0..grads_at_scale.len()).rev() {
                let (w_hi, h_hi) = dims[s];
                let (w_lo, h_lo) = dims[s + 1];
                let up = downsample_adjoint(&acc, w_lo, h_lo, w_hi, h_hi);
                acc = grads_at_scale[s].iter().zip(&up).map(|(p, q)| p + q).collect();
            }
            for (p, v) in acc.iter().enumerate() {
                out.data[p * ch + c] = *v;
            }
        }
    }
    let total = per_scale.iter().sum::<f64>() / used as f64;
    (total, grad)
}

/// Per-Gaussian neighbor lists (k nearest by Euclidean distance, ties by
/// index).
pub fn knn_graph(points: &[Vec3], k: usize) -> Vec<Vec<usize>> {
    let k = k.min(points.len().saturating_sub(1));
    let grid = PointGrid::new(points);
    points.par_iter().enumerate().map(|(i, p)| grid.k_nearest(p, k, Some(i))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerOutput {
    pub color: f64,
    pub scale: f64,
    pub d_color: Vec<Vec3>,
    pub d_scale: Vec<Vec3>,
}

/// Color smoothness over the neighbor graph (mean squared channel difference
/// over directed pairs) and a hinge on the largest scale above `tau`.
pub fn color_scale_regularizers(colors: &[Vec3], scales: &[Vec3], graph: &[Vec<usize>], tau: f64) -> RegularizerOutput {
    let n = colors.len();
    let pairs: usize = graph.iter().map(|g| g.len()).sum();
    let mut out = RegularizerOutput {
        color: 0.0,
        scale: 0.0,
        d_color: vec![Vec3::zeros(); n],
        d_scale: vec![Vec3::zeros(); n],
    };
    if pairs > 0 {
        let norm = 3.0 * pairs as f64;
        for (i, nb) in graph.iter().enumerate() {
            for &j in nb {
                let d = colors[i] - colors[j];
                out.color += d.norm_squared() / norm;
                out.d_color[i] += d * (2.0 / norm);
                out.d_color[j] -= d * (2.0 / norm);
            }
        }
    }
    if n > 0 {
        for (i, s) in scales.iter().enumerate() {
            let k = s.imax();
            let excess = s[k] - tau;
            if excess > 0.0 {
                out.scale += excess * excess / n as f64;
                out.d_scale[i][k] = 2.0 * excess / n as f64;
            }
        }
    }
    out
}

/// `||cur - prev||^2` with gradients for both sides.
pub fn smoothness(prev: &[f64], cur: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let d: Vec<f64> = cur.iter().zip(prev).map(|(c, p)| c - p).collect();
    let v = d.iter().map(|x| x * x).sum();
    let d_cur: Vec<f64> = d.iter().map(|x| 2.0 * x).collect();
    let d_prev = d_cur.iter().map(|x| -x).collect();
    (v, d_prev, d_cur)
}

/// `lambda * ||W - W_hat||_F^2` and its gradient with respect to `W`.
pub fn lbs_term(w: &[Vec<f64>], w_hat: &[Vec<f64>], lambda: f64) -> (f64, Vec<Vec<f64>>) {
    let mut v = 0.0;
    let grads = w
        .iter()
        .zip(w_hat)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = x - y;
                    v += d * d;
                    2.0 * lambda * d
                })
                .collect()
        })
        .collect();
    (lambda * v, grads)
}

/// Pose track of both hands at one frame, stacked as
/// `[theta_l, theta_r]` and `[gamma_l, gamma_r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HandTrackFrame {
    pub theta: Vec<f64>,
    pub translation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandLoss {
    pub smoothness: f64,
    pub lbs: f64,
    pub d_theta: Vec<f64>,
    pub d_translation: Vec<f64>,
    pub d_theta_prev: Vec<f64>,
    pub d_translation_prev: Vec<f64>,
    pub d_weights: Vec<Vec<f64>>,
}

impl HandLoss {
    pub fn value(&self) -> f64 {
        self.smoothness + self.lbs
    }
}

/// Smoothness between consecutive frames (skipped when `prev` is `None`)
/// plus the weighted skinning regularizer.
pub fn hand_loss(
    cur: &HandTrackFrame,
    prev: Option<&HandTrackFrame>,
    weights: &[Vec<f64>],
    pseudo: &[Vec<f64>],
    lambda_lbs: f64,
) -> HandLoss {
    let (lbs, d_weights) = lbs_term(weights, pseudo, lambda_lbs);
    let zeros = |n: usize| vec![0.0; n];
    let mut out = HandLoss {
        smoothness: 0.0,
        lbs,
        d_theta: zeros(cur.theta.len()),
        d_translation: zeros(cur.translation.len()),
        d_theta_prev: zeros(cur.theta.len()),
        d_translation_prev: zeros(cur.translation.len()),
        d_weights,
    };
    if let Some(p) = prev {
        let (a, dp, dc) = smoothness(&p.theta, &cur.theta);
        let (b, dpt, dct) = smoothness(&p.translation, &cur.translation);
        out.smoothness = a + b;
        out.d_theta = dc;
        out.d_theta_prev = dp;
        out.d_translation = dct;
        out.d_translation_prev = dpt;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactLoss {
    pub value: f64,
    pub d_object: Vec3,
    /// Gradient for each hand translation, in input order.
    pub d_hands: Vec<Vec3>,
}

/// `lambda * sum_H ||gamma_o - gamma_h||`; a coincident pair contributes a
/// zero gradient.
pub fn contact_loss(object: &Vec3, hands: &[Vec3], lambda: f64) -> ContactLoss {
    let mut out = ContactLoss {
        value: 0.0,
        d_object: Vec3::zeros(),
        d_hands: vec![Vec3::zeros(); hands.len()],
    };
    for (k, h) in hands.iter().enumerate() {
        let d = object - h;
        let n = d.norm();
        out.value += lambda * n;
        if n > 0.0 {
            let u = d * (lambda / n);
            out.d_object += u;
            out.d_hands[k] = -u;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(w: usize, h: usize) -> Image {
        Image::filled(w, h, 1, 1.0)
    }

    #[test]
    fn defaults_match_published_weights() {
        let w = LossWeights::default();
        assert_eq!((w.ssim, w.perceptual, w.color, w.scale, w.mask), (0.2, 1.0, 0.1, 100.0, 10.0));
        assert_eq!((w.lbs, w.contact), (1e3, 1.0));
    }

    #[test]
    fn identical_images_cost_nothing() {
        let gt = Image::from_fn(24, 20, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f64 / 11.0);
        let mut mask = Image::zeros(24, 20, 1);
        for y in 4..16 {
            for x in 3..20 {
                mask.set(x, y, 0, 1.0);
            }
        }
        let pred = gt.masked(&mask);
        let (t, _) = image_loss(&pred, &gt, &mask, &mask, &LossWeights::default()).unwrap();
        assert_eq!(t.l1, 0.0);
        assert!(t.ssim.abs() < 1e-12);
        assert_eq!(t.perceptual, 0.0);
        assert_eq!(t.mask, 0.0);
    }

    #[test]
    fn constant_offset_l1() {
        let gt = Image::filled(16, 16, 3, 0.3);
        let pred = Image::filled(16, 16, 3, 0.4);
        let m = full(16, 16);
        let (t, _) = image_loss(&pred, &gt, &m, &m, &LossWeights::default()).unwrap();
        assert!((t.l1 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ssim_region_is_at_least_one_window() {
        let mut m = Image::zeros(32, 32, 1);
        m.set(0, 5, 0, 1.0);
        let (x0, x1, y0, y1) = ssim_region(&m).unwrap();
        assert!(x1 - x0 >= SSIM_WINDOW && y1 - y0 >= SSIM_WINDOW);
        assert!(x0 == 0 && (y0..y1).contains(&5));
        m.set(31, 31, 0, 1.0);
        assert_eq!(ssim_region(&m).unwrap(), (0, 32, 5, 32));
        assert!(ssim_region(&Image::zeros(32, 32, 1)).is_none());
    }

    #[test]
    fn regularizer_examples() {
        let graph = knn_graph(&[Vec3::zeros(), Vec3::x()], COLOR_NEIGHBORS);
        let r = color_scale_regularizers(&[Vec3::zeros(), Vec3::repeat(1.0)], &[Vec3::repeat(0.01); 2], &graph, 0.02);
        assert!((r.color - 1.0).abs() < 1e-15);
        assert_eq!(r.scale, 0.0);
        let same = color_scale_regularizers(&[Vec3::repeat(0.3); 2], &[Vec3::new(0.05, 0.01, 0.01); 2], &graph, 0.02);
        assert_eq!(same.color, 0.0);
        assert!((same.scale - 0.03f64.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn hand_loss_examples() {
        let cur = HandTrackFrame {
            theta: vec![1.0, 0.0],
            translation: vec![0.0; 6],
        };
        let prev = HandTrackFrame {
            theta: vec![0.0, 0.0],
            translation: vec![0.0; 6],
        };
        let w = vec![vec![0.5, 0.5]];
        assert_eq!(hand_loss(&prev, Some(&prev), &w, &w, 1e3).value(), 0.0);
        assert_eq!(hand_loss(&cur, Some(&prev), &w, &w, 1e3).smoothness, 1.0);
        let off = vec![vec![0.6, 0.5]];
        assert!((hand_loss(&cur, None, &off, &w, 1e3).value() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn contact_examples() {
        let o = Vec3::new(3.0, 4.0, 0.0);
        assert_eq!(contact_loss(&o, &[o, o], 1.0).value, 0.0);
        assert_eq!(contact_loss(&o, &[o, o], 1.0).d_hands, vec![Vec3::zeros(); 2]);
        let c = contact_loss(&o, &[Vec3::zeros(), o], 1.0);
        assert_eq!(c.value, 5.0);
        assert!((c.d_hands[0] - Vec3::new(-0.6, -0.8, 0.0)).norm() < 1e-15);
    }
}
