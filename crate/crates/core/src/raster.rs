//! Tile-based splatting renderer with an analytic backward pass.
//!
//! Splats are sorted once per frame by `(depth, source index)` and binned into
//! 16x16 pixel tiles by the bounding box of their 3-sigma ellipse. A splat
//! contributes to a pixel only inside that ellipse (`d^2 <= 9`), so binning is
//! purely an acceleration. Tiles are processed in parallel with private
//! buffers and merged in tile order.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{quat_matrix_backward, Camera, GaussianSet, Mat3, Vec3};
use crate::image::Image;

pub const TILE_SIZE: usize = 16;
/// Isotropic low-pass added to every projected covariance, in px^2.
pub const LOW_PASS: f64 = 0.3;
/// Compositing stops once transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const OPACITY_CLAMP: (f64, f64) = (1e-4, 1.0 - 1e-4);
/// Squared Mahalanobis cutoff (3 sigma).
pub const CUTOFF_D2: f64 = 9.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean: [f64; 2],
    /// Upper triangle `(xx, xy, yy)` of the 2x2 covariance, low-pass included.
    pub cov: [f64; 3],
    /// Upper triangle of the inverse covariance.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: Vec3,
    pub source: usize,
    /// Inclusive pixel ranges covered by the 3-sigma box.
    pub x_range: (usize, usize),
    pub y_range: (usize, usize),
}

struct Projected {
    splat: Splat2D,
    cam_point: Vec3,
    jw: Matrix2x3<f64>,
    cov3: Mat3,
    rot: Mat3,
}

fn project_full(set: &GaussianSet, index: usize, cam: &Camera) -> Option<Projected> {
    let g = &set.gaussians[index];
    let p = cam.to_camera(&g.center);
    if p.z <= cam.near {
        return None;
    }
    let rot = g.rotation.to_matrix();
    let cov3 = crate::geometry::covariance_from_rotation(&g.scale, &rot);
    let (x, y, z) = (p.x, p.y, p.z);
    let j = Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z));
    let jw = j * cam.rotation;
    let c2 = jw * cov3 * jw.transpose();
    let (a, b, c) = (c2[(0, 0)] + LOW_PASS, c2[(0, 1)], c2[(1, 1)] + LOW_PASS);
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let u = cam.fx * x / z + cam.cx;
    let v = cam.fy * y / z + cam.cy;
    let (rx, ry) = (3.0 * a.sqrt(), 3.0 * c.sqrt());
    let range = |center: f64, r: f64, n: usize| -> Option<(usize, usize)> {
        // pixel i samples i + 0.5
        let lo = (center - r - 0.5).ceil().max(0.0);
        let hi = (center + r - 0.5).floor().min(n as f64 - 1.0);
        if lo > hi {
            None
        } else {
            Some((lo as usize, hi as usize))
        }
    };
    let x_range = range(u, rx, cam.width)?;
    let y_range = range(v, ry, cam.height)?;
    Some(Projected {
        splat: Splat2D {
            mean: [u, v],
            cov: [a, b, c],
            conic,
            depth: z,
            opacity: g.opacity,
            color: g.color,
            source: index,
            x_range,
            y_range,
        },
        cam_point: p,
        jw,
        cov3,
        rot,
    })
}

/// Projects one Gaussian; `None` when it is behind the near plane or its
/// 3-sigma footprint misses every pixel.
pub fn project_gaussian(set: &GaussianSet, index: usize, cam: &Camera) -> Option<Splat2D> {
    project_full(set, index, cam).map(|p| p.splat)
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    pub alpha: Image,
    /// Number of splats composited at each pixel.
    pub count: Vec<u32>,
}

/// Per-Gaussian partial derivatives, indexed like the input set.
#[derive(Debug, Clone)]
pub struct RenderGradients {
    pub center: Vec<Vec3>,
    pub scale: Vec<Vec3>,
    /// With respect to the raw stored quaternion (w, x, y, z).
    pub rotation: Vec<[f64; 4]>,
    /// With respect to the rotation matrix built from the quaternion.
    pub rotation_matrix: Vec<Mat3>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vec3>,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        RenderGradients {
            center: vec![Vec3::zeros(); n],
            scale: vec![Vec3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            rotation_matrix: vec![Mat3::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.center.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotation.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity.iter().all(|x| x.is_finite())
            && self.color.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

struct Binned {
    splats: Vec<Projected>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    tiles_y: usize,
}

fn bin(set: &GaussianSet, cam: &Camera) -> Binned {
    let mut splats: Vec<Projected> = (0..set.len())
        .into_par_iter()
        .filter_map(|i| project_full(set, i, cam))
        .collect();
    splats.sort_by(|a, b| {
        a.splat
            .depth
            .total_cmp(&b.splat.depth)
            .then(a.splat.source.cmp(&b.splat.source))
    });
    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, p) in splats.iter().enumerate() {
        let s = &p.splat;
        for ty in s.y_range.0 / TILE_SIZE..=s.y_range.1 / TILE_SIZE {
            for tx in s.x_range.0 / TILE_SIZE..=s.x_range.1 / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    Binned {
        splats,
        tiles,
        tiles_x,
        tiles_y,
    }
}

#[derive(Clone, Copy)]
struct Contribution {
    slot: usize,
    alpha: f64,
    weight: f64,
    delta: [f64; 2],
    transmittance: f64,
}

/// Front-to-back compositing of one pixel; `visit` sees each contributor.
#[inline]
fn composite(
    splats: &[Projected],
    list: &[u32],
    px: usize,
    py: usize,
    mut visit: impl FnMut(Contribution),
) -> (Vec3, f64, u32) {
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    let mut t = 1.0;
    let mut color = Vec3::zeros();
    let mut count = 0;
    for (slot, &k) in list.iter().enumerate() {
        let s = &splats[k as usize].splat;
        let d = [x - s.mean[0], y - s.mean[1]];
        let d2 = s.conic[0] * d[0] * d[0] + 2.0 * s.conic[1] * d[0] * d[1] + s.conic[2] * d[1] * d[1];
        if d2 > CUTOFF_D2 {
            continue;
        }
        let weight = (-0.5 * d2).exp();
        let alpha = s.opacity.clamp(OPACITY_CLAMP.0, OPACITY_CLAMP.1) * weight;
        visit(Contribution {
            slot,
            alpha,
            weight,
            delta: d,
            transmittance: t,
        });
        color += s.color * (alpha * t);
        t *= 1.0 - alpha;
        count += 1;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    (color, t, count)
}

fn tile_pixels(b: &Binned, tile: usize, cam: &Camera) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % b.tiles_x, tile / b.tiles_x);
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    let x1 = (x0 + TILE_SIZE).min(cam.width);
    let y1 = (y0 + TILE_SIZE).min(cam.height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Renders the set with front-to-back alpha compositing over a black,
/// fully transparent background.
pub fn render(set: &GaussianSet, cam: &Camera) -> Result<RenderOutput> {
    if set.is_empty() {
        return Err(Error::EmptyScene);
    }
    let b = bin(set, cam);
    let per_tile: Vec<Vec<(usize, Vec3, f64, u32)>> = (0..b.tiles_x * b.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let list = &b.tiles[tile];
            tile_pixels(&b, tile, cam)
                .map(|(x, y)| {
                    let (c, t, n) = composite(&b.splats, list, x, y, |_| {});
                    (y * cam.width + x, c, 1.0 - t, n)
                })
                .collect()
        })
        .collect();
    let mut image = Image::zeros(cam.width, cam.height, 3);
    let mut alpha = Image::zeros(cam.width, cam.height, 1);
    let mut count = vec![0; cam.width * cam.height];
    for (p, c, a, n) in per_tile.into_iter().flatten() {
        image.data[3 * p..3 * p + 3].copy_from_slice(c.as_slice());
        alpha.data[p] = a;
        count[p] = n;
    }
    Ok(RenderOutput { image, alpha, count })
}

/// Source indices composited at every pixel, in compositing order.
/// Exposes the discrete structure of a render (culling, sort order, cutoffs,
/// early termination) so finite-difference checks can detect when a
/// perturbation crosses a non-differentiable boundary.
pub fn contributor_lists(set: &GaussianSet, cam: &Camera) -> Vec<Vec<usize>> {
    let b = bin(set, cam);
    let mut out = vec![Vec::new(); cam.width * cam.height];
    for tile in 0..b.tiles_x * b.tiles_y {
        let list = &b.tiles[tile];
        for (x, y) in tile_pixels(&b, tile, cam) {
            let mut v = Vec::new();
            composite(&b.splats, list, x, y, |c| v.push(b.splats[list[c.slot] as usize].splat.source));
            out[y * cam.width + x] = v;
        }
    }
    out
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
    }
}

/// Gradients of a scalar loss with respect to every Gaussian parameter,
/// given the loss gradient with respect to the rendered RGB image.
pub fn render_backward(set: &GaussianSet, cam: &Camera, d_image: &Image) -> Result<RenderGradients> {
    if d_image.width != cam.width || d_image.height != cam.height || d_image.channels != 3 {
        return Err(Error::Shape(format!(
            "pixel gradient is {}x{}x{}, camera renders {}x{}x3",
            d_image.width, d_image.height, d_image.channels, cam.width, cam.height
        )));
    }
    if set.is_empty() {
        return Err(Error::EmptyScene);
    }
    let b = bin(set, cam);

    let per_tile: Vec<Vec<SplatGrad>> = (0..b.tiles_x * b.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let list = &b.tiles[tile];
            let mut acc = vec![SplatGrad::default(); list.len()];
            let mut contribs: Vec<Contribution> = Vec::new();
            for (x, y) in tile_pixels(&b, tile, cam) {
                let p = y * cam.width + x;
                let dc = Vec3::new(d_image.data[3 * p], d_image.data[3 * p + 1], d_image.data[3 * p + 2]);
                if dc == Vec3::zeros() {
                    continue;
                }
                contribs.clear();
                composite(&b.splats, list, x, y, |c| contribs.push(c));
                let mut suffix = Vec3::zeros();
                for c in contribs.iter().rev() {
                    let s = &b.splats[list[c.slot] as usize].splat;
                    let g = &mut acc[c.slot];
                    let w = c.alpha * c.transmittance;
                    for k in 0..3 {
                        g.color[k] += w * dc[k];
                    }
                    let d_alpha = dc.dot(&(s.color * c.transmittance - suffix / (1.0 - c.alpha)));
                    suffix += s.color * w;

                    let o = s.opacity;
                    let o_clamped = o.clamp(OPACITY_CLAMP.0, OPACITY_CLAMP.1);
                    if o == o_clamped {
                        g.opacity += c.weight * d_alpha;
                    }
                    let d_weight = o_clamped * d_alpha;
                    let d_d2 = -0.5 * c.weight * d_weight;
                    let [dx, dy] = c.delta;
                    let [ca, cb, cc] = s.conic;
                    // d2 = a dx^2 + 2 b dx dy + c dy^2, delta = pixel - mean
                    g.mean[0] -= d_d2 * 2.0 * (ca * dx + cb * dy);
                    g.mean[1] -= d_d2 * 2.0 * (cb * dx + cc * dy);
                    g.conic[0] += d_d2 * dx * dx;
                    g.conic[1] += d_d2 * 2.0 * dx * dy;
                    g.conic[2] += d_d2 * dy * dy;
                }
            }
            acc
        })
        .collect();

    let mut splat_grads = vec![SplatGrad::default(); b.splats.len()];
    for (tile, acc) in per_tile.iter().enumerate() {
        for (slot, g) in acc.iter().enumerate() {
            splat_grads[b.tiles[tile][slot] as usize].add(g);
        }
    }

    let per_splat: Vec<(usize, Vec3, Vec3, Mat3, f64, Vec3)> = b
        .splats
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(p, g)| {
            let (d_center, d_scale, d_rot) = project_backward(p, g, cam, &set.gaussians[p.splat.source].scale);
            (
                p.splat.source,
                d_center,
                d_scale,
                d_rot,
                g.opacity,
                Vec3::new(g.color[0], g.color[1], g.color[2]),
            )
        })
        .collect();

    let mut out = RenderGradients::zeros(set.len());
    for (i, dc, ds, dr, dop, dcol) in per_splat {
        out.center[i] = dc;
        out.scale[i] = ds;
        out.rotation_matrix[i] = dr;
        out.rotation[i] = quat_matrix_backward(set.gaussians[i].rotation, &dr);
        out.opacity[i] = dop;
        out.color[i] = dcol;
    }
    Ok(out)
}

/// Chains splat-space gradients back to center, scale and rotation matrix.
fn project_backward(p: &Projected, g: &SplatGrad, cam: &Camera, scale: &Vec3) -> (Vec3, Vec3, Mat3) {
    let [a, b, c] = p.splat.cov;
    let det = a * c - b * b;
    let det2 = det * det;
    let [ga, gb, gc] = g.conic;
    // conic = (c, -b, a) / det
    let d_a = ga * (-c * c / det2) + gb * (b * c / det2) + gc * (-b * b / det2);
    let d_b = ga * (2.0 * b * c / det2) + gb * (-1.0 / det - 2.0 * b * b / det2) + gc * (2.0 * a * b / det2);
    let d_c = ga * (-b * b / det2) + gb * (a * b / det2) + gc * (-a * a / det2);
    let g2 = Matrix2::new(d_a, 0.5 * d_b, 0.5 * d_b, d_c);

    let jw = &p.jw;
    let d_cov3 = jw.transpose() * g2 * jw;
    let d_jw = 2.0 * g2 * jw * p.cov3;
    let d_j = d_jw * cam.rotation.transpose();

    let (x, y, z) = (p.cam_point.x, p.cam_point.y, p.cam_point.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let (z2, z3) = (z * z, z * z * z);
    let dm = Vector2::new(g.mean[0], g.mean[1]);
    let mut dp = Vec3::zeros();
    dp.x += dm.x * fx / z + d_j[(0, 2)] * (-fx / z2);
    dp.y += dm.y * fy / z + d_j[(1, 2)] * (-fy / z2);
    dp.z += -dm.x * fx * x / z2 - dm.y * fy * y / z2
        + d_j[(0, 0)] * (-fx / z2)
        + d_j[(0, 2)] * (2.0 * fx * x / z3)
        + d_j[(1, 1)] * (-fy / z2)
        + d_j[(1, 2)] * (2.0 * fy * y / z3);
    let d_center = cam.rotation.transpose() * dp;

    let m = p.rot * Mat3::from_diagonal(scale);
    let d_m = 2.0 * d_cov3 * m;
    let mut d_rot = Mat3::zeros();
    let mut d_scale = Vec3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            d_rot[(i, j)] = d_m[(i, j)] * scale[j];
            d_scale[j] += d_m[(i, j)] * p.rot[(i, j)];
        }
    }
    (d_center, d_scale, d_rot)
}
