//! Shared test oracles: random scene builders and central finite differences.
#![allow(dead_code)]

use handsplat::geometry::{Camera, Gaussian3D, GaussianSet, Mat3, Quat, Subject, Vec3};
use handsplat::image::Image;
use handsplat::raster;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_camera(size: usize) -> Camera {
    let f = size as f64;
    Camera::new(f, f, f / 2.0, f / 2.0, Mat3::identity(), Vec3::zeros(), size, size, 0.01).unwrap()
}

pub fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian3D {
    let z = rng.random_range(1.5..3.0);
    let center = Vec3::new(rng.random_range(-0.3..0.3) * z, rng.random_range(-0.3..0.3) * z, z);
    let scale = Vec3::new(
        rng.random_range(0.03..0.15),
        rng.random_range(0.03..0.15),
        rng.random_range(0.03..0.15),
    );
    let rotation = Quat::new(
        rng.random_range(0.2..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
    .normalized();
    Gaussian3D {
        center,
        scale,
        rotation,
        opacity: rng.random_range(0.1..0.95),
        color: Vec3::new(rng.random(), rng.random(), rng.random()),
    }
}

pub fn random_scene(rng: &mut ChaCha8Rng, max_n: usize) -> GaussianSet {
    let n = rng.random_range(1..=max_n);
    GaussianSet::new(Subject::Object, (0..n).map(|_| random_gaussian(rng)).collect())
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize, lo: f64, hi: f64) -> Image {
    let mut img = Image::zeros(w, h, c);
    for v in img.data.iter_mut() {
        *v = rng.random_range(lo..hi);
    }
    img
}

pub fn weighted_sum(img: &Image, w: &Image) -> f64 {
    img.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
}

/// Central difference of `f` along a single coordinate.
pub fn central_diff(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Relative error between two gradient vectors.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(
        analytic.iter().map(|a| a * a).sum::<f64>().sqrt(),
    );
    if norm == 0.0 {
        0.0
    } else {
        diff / norm
    }
}

/// True when the render's discrete structure is identical for both sets.
pub fn same_structure(a: &GaussianSet, b: &GaussianSet, cam: &Camera) -> bool {
    raster::contributor_lists(a, cam) == raster::contributor_lists(b, cam)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamClass {
    Center,
    Scale,
    Rotation,
    Opacity,
    Color,
}

pub const PARAM_CLASSES: [ParamClass; 5] = [
    ParamClass::Center,
    ParamClass::Scale,
    ParamClass::Rotation,
    ParamClass::Opacity,
    ParamClass::Color,
];

pub fn param_len(class: ParamClass) -> usize {
    match class {
        ParamClass::Rotation => 4,
        ParamClass::Opacity => 1,
        _ => 3,
    }
}

pub fn nudge(set: &GaussianSet, i: usize, class: ParamClass, k: usize, h: f64) -> GaussianSet {
    let mut s = set.clone();
    let g = &mut s.gaussians[i];
    match class {
        ParamClass::Center => g.center[k] += h,
        ParamClass::Scale => g.scale[k] += h,
        ParamClass::Rotation => {
            let mut a = g.rotation.to_array();
            a[k] += h;
            g.rotation = Quat::from_array(a);
        }
        ParamClass::Opacity => g.opacity += h,
        ParamClass::Color => g.color[k] += h,
    }
    s
}

pub fn analytic_of(g: &raster::RenderGradients, i: usize, class: ParamClass) -> Vec<f64> {
    match class {
        ParamClass::Center => g.center[i].iter().copied().collect(),
        ParamClass::Scale => g.scale[i].iter().copied().collect(),
        ParamClass::Rotation => g.rotation[i].to_vec(),
        ParamClass::Opacity => vec![g.opacity[i]],
        ParamClass::Color => g.color[i].iter().copied().collect(),
    }
}

/// One randomized rasterizer gradient check. Returns `None` when the
/// perturbation crosses a non-differentiable boundary of the render
/// (culling, sort order, 3-sigma cutoff, early termination).
pub fn raster_gradient_instance(rng: &mut ChaCha8Rng, class: ParamClass) -> Option<f64> {
    let cam = small_camera(32);
    let set = random_scene(rng, 10);
    let weights = random_image(rng, 32, 32, 3, -1.0, 1.0);
    let i = rng.random_range(0..set.len());
    if class == ParamClass::Opacity && set.gaussians[i].opacity > 0.94 {
        return None;
    }
    let h = 1e-4;
    let grads = raster::render_backward(&set, &cam, &weights).unwrap();
    let analytic = analytic_of(&grads, i, class);
    let mut numeric = Vec::new();
    for k in 0..param_len(class) {
        let plus = nudge(&set, i, class, k, h);
        let minus = nudge(&set, i, class, k, -h);
        if !same_structure(&plus, &set, &cam) || !same_structure(&minus, &set, &cam) {
            return None;
        }
        let fp = weighted_sum(&raster::render(&plus, &cam).unwrap().image, &weights);
        let fm = weighted_sum(&raster::render(&minus, &cam).unwrap().image, &weights);
        numeric.push((fp - fm) / (2.0 * h));
    }
    if numeric.iter().all(|v| v.abs() < 1e-9) && analytic.iter().all(|v| v.abs() < 1e-9) {
        // Gaussian culled or fully occluded: nothing to compare.
        return None;
    }
    Some(rel_err(&analytic, &numeric))
}

pub mod pose {
    use super::*;
    use handsplat::geometry::exp_so3;
    use handsplat::hand::{self, HandPose, HandTemplate, Side, SkinWeights, Skeleton, POSE_DIM};

    pub struct PoseCase {
        pub skel: Skeleton,
        pub set: GaussianSet,
        pub weights: Vec<SkinWeights>,
        pub pose: HandPose,
        pub a: Vec<Vec3>,
        pub b: Vec<Mat3>,
    }

    pub fn random_case(rng: &mut ChaCha8Rng) -> PoseCase {
        let skel = Skeleton::standard();
        let n = rng.random_range(1..=10);
        let template = HandTemplate::sample(&skel, n, 0.012, rng).unwrap();
        let set = GaussianSet::new(
            Subject::RightHand,
            template
                .points
                .iter()
                .map(|p| Gaussian3D {
                    center: *p,
                    scale: Vec3::repeat(0.004),
                    rotation: Quat::new(1.0, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.2).normalized(),
                    opacity: 0.7,
                    color: Vec3::repeat(0.5),
                })
                .collect(),
        );
        let side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
        let pose = HandPose {
            theta: (0..POSE_DIM).map(|_| rng.random_range(-0.6..0.6)).collect(),
            rotation: exp_so3(&Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))),
            translation: Vec3::new(rng.random_range(-0.1..0.1), 0.05, 0.4),
            side,
        };
        let a = (0..n).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let b = (0..n).map(|_| Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        PoseCase { skel, set, weights: template.weights, pose, a, b }
    }

    pub fn objective(c: &PoseCase, set: &GaussianSet, weights: &[SkinWeights], pose: &HandPose) -> f64 {
        let posed = hand::pose_hand(set, weights, &c.skel, pose).unwrap();
        posed
            .set
            .gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| c.a[i].dot(&g.center) + c.b[i].component_mul(&g.rotation.to_matrix()).sum())
            .sum()
    }

    /// Worst relative error over theta, global increment, translation,
    /// canonical centers and weights for one random case.
    pub fn instance(rng: &mut ChaCha8Rng) -> f64 {
        let c = random_case(rng);
        let posed = hand::pose_hand(&c.set, &c.weights, &c.skel, &c.pose).unwrap();
        let back = hand::pose_hand_backward(&posed, &c.weights, &c.skel, &c.pose, &c.a, &c.b);
        let h = 1e-6;
        let f = |set: &GaussianSet, w: &[SkinWeights], p: &HandPose| objective(&c, set, w, p);
        let mut worst: f64 = 0.0;

        let num: Vec<f64> = (0..POSE_DIM)
            .map(|k| {
                central_diff(h, |d| {
                    let mut p = c.pose.clone();
                    p.theta[k] += d;
                    f(&c.set, &c.weights, &p)
                })
            })
            .collect();
        worst = worst.max(rel_err(&back.pose.theta, &num));

        let num: Vec<f64> = (0..3)
            .map(|k| {
                central_diff(h, |d| {
                    let mut p = c.pose.clone();
                    let mut e = Vec3::zeros();
                    e[k] = d;
                    p.rotation = exp_so3(&e) * p.rotation;
                    f(&c.set, &c.weights, &p)
                })
            })
            .collect();
        worst = worst.max(rel_err(back.pose.rotation.as_slice(), &num));

        let num: Vec<f64> = (0..3)
            .map(|k| {
                central_diff(h, |d| {
                    let mut p = c.pose.clone();
                    p.translation[k] += d;
                    f(&c.set, &c.weights, &p)
                })
            })
            .collect();
        worst = worst.max(rel_err(back.pose.translation.as_slice(), &num));

        for i in 0..c.set.len() {
            let num: Vec<f64> = (0..3)
                .map(|k| {
                    central_diff(h, |d| {
                        let mut s = c.set.clone();
                        s.gaussians[i].center[k] += d;
                        f(&s, &c.weights, &c.pose)
                    })
                })
                .collect();
            worst = worst.max(rel_err(back.center[i].as_slice(), &num));
            // weights enter linearly; perturb without renormalizing
            let num: Vec<f64> = (0..c.weights[i].0.len())
                .map(|k| {
                    central_diff(h, |d| {
                        let mut w = c.weights.clone();
                        w[i].0[k] += d;
                        let posed = hand::pose_hand(&c.set, &c.weights, &c.skel, &c.pose).unwrap();
                        let p = posed.transforms.iter().zip(&w[i].0).map(|(t, wk)| t.apply(&posed.canonical[i]) * *wk).sum::<Vec3>();
                        c.a[i].dot(&p)
                    })
                })
                .collect();
            worst = worst.max(rel_err(&back.weights[i], &num));
        }
        worst
    }
}

pub mod field {
    use super::*;
    use handsplat::field::{HeadKind, MlpHead, TriplaneField};

    pub fn random_kind(rng: &mut ChaCha8Rng) -> HeadKind {
        match rng.random_range(0..3) {
            0 => HeadKind::Appearance,
            1 => HeadKind::Geometry {
                delta_max: 0.05,
                log_scale_base: -4.0,
                log_scale_range: 1.2,
            },
            _ => HeadKind::Deformation { joints: 6 },
        }
    }

    fn loss(field: &TriplaneField, head: &MlpHead, mu: &Vec3, up: &[f64]) -> f64 {
        let t = field.interp(mu);
        let (out, _) = head.forward(&t).unwrap();
        out.0.iter().zip(up).map(|(a, b)| a * b).sum()
    }

    /// Full plane -> head chain at one query; checks 5 random plane entries,
    /// 5 random head parameters and the query position.
    pub fn instance(rng: &mut ChaCha8Rng) -> f64 {
        let r = rng.random_range(2..=8);
        let d = rng.random_range(1..=8);
        let field = TriplaneField::random(r, d, Vec3::repeat(-1.0), Vec3::repeat(1.0), 1.0, rng).unwrap();
        let kind = random_kind(rng);
        let mut head = MlpHead::init(kind, d, &[8, 8], rng);
        for v in head.params.iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
        let mu = Vec3::new(rng.random_range(-0.95..0.95), rng.random_range(-0.95..0.95), rng.random_range(-0.95..0.95));
        let up: Vec<f64> = (0..kind.outputs()).map(|_| rng.random_range(-1.0..1.0)).collect();

        let stencil = field.stencil(&mu);
        let t = field.interp_stencil(&stencil);
        let (_, cache) = head.forward(&t).unwrap();
        let mut d_head = vec![0.0; head.params.len()];
        let d_t = head.backward(&cache, &up, &mut d_head);
        let mut d_planes = vec![0.0; field.data.len()];
        let d_mu = field.interp_backward(&stencil, &d_t, &mut d_planes);

        let h = 1e-6;
        let mut an = Vec::new();
        let mut nu = Vec::new();
        for _ in 0..5 {
            // bias towards entries the query touches
            let k = if rng.random_bool(0.8) {
                let (off, _) = stencil.corners[rng.random_range(0..3)][rng.random_range(0..4)];
                off + rng.random_range(0..d)
            } else {
                rng.random_range(0..field.data.len())
            };
            an.push(d_planes[k]);
            nu.push(central_diff(h, |e| {
                let mut f = field.clone();
                f.data[k] += e;
                loss(&f, &head, &mu, &up)
            }));
        }
        for _ in 0..5 {
            let k = rng.random_range(0..head.params.len());
            an.push(d_head[k]);
            nu.push(central_diff(h, |e| {
                let mut hd = head.clone();
                hd.params[k] += e;
                loss(&field, &hd, &mu, &up)
            }));
        }
        let mut worst = rel_err(&an, &nu);
        let num_mu: Vec<f64> = (0..3)
            .map(|k| {
                central_diff(h, |e| {
                    let mut m = mu;
                    m[k] += e;
                    loss(&field, &head, &m, &up)
                })
            })
            .collect();
        worst = worst.max(rel_err(d_mu.as_slice(), &num_mu));
        worst
    }
}

pub mod loss {
    use super::*;
    use handsplat::losses::{self, LossWeights};

    /// Direct sliding-window SSIM: explicit 11x11 Gaussian window sums at
    /// every valid position, averaged over windows and channels.
    pub fn ssim_oracle(x: &Image, y: &Image) -> f64 {
        let n = 11usize;
        let sigma: f64 = 1.5;
        let mut g = vec![vec![0.0; n]; n];
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                g[i][j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
                s += g[i][j];
            }
        }
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut count = 0.0;
        for c in 0..x.channels {
            for y0 in 0..=(x.height - n) {
                for x0 in 0..=(x.width - n) {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..n {
                        for j in 0..n {
                            let w = g[i][j] / s;
                            let a = x.get(x0 + j, y0 + i, c);
                            let b = y.get(x0 + j, y0 + i, c);
                            mx += w * a;
                            my += w * b;
                            sxx += w * a * a;
                            syy += w * b * b;
                            sxy += w * a * b;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cov = sxy - mx * my;
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1.0;
                }
            }
        }
        total / count
    }

    pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        let x0 = rng.random_range(0..w / 2);
        let y0 = rng.random_range(0..h / 2);
        let x1 = rng.random_range(x0 + 2..=w);
        let y1 = rng.random_range(y0 + 2..=h);
        Image::from_fn(w, h, 1, |x, y, _| if (x0..x1).contains(&x) && (y0..y1).contains(&y) { 1.0 } else { 0.0 })
    }

    /// Image loss gradient at 8 random pixels of a random 32x32 instance.
    pub fn image_instance(rng: &mut ChaCha8Rng) -> f64 {
        let (w, h) = (32, 32);
        let pred = random_image(rng, w, h, 3, 0.0, 1.0);
        let gt = random_image(rng, w, h, 3, 0.0, 1.0);
        let m = random_mask(rng, w, h);
        let extra = random_mask(rng, w, h);
        let comb = Image::from_fn(w, h, 1, |x, y, _| m.get(x, y, 0).max(extra.get(x, y, 0)));
        let weights = LossWeights::default();
        let (_, grad) = losses::image_loss(&pred, &gt, &m, &comb, &weights).unwrap();
        let f = |p: &Image| {
            let (t, _) = losses::image_loss(p, &gt, &m, &comb, &weights).unwrap();
            t.total(&weights)
        };
        let h_step = 1e-7;
        let mut an = Vec::new();
        let mut nu = Vec::new();
        for _ in 0..8 {
            let i = rng.random_range(0..pred.data.len());
            an.push(grad.data[i]);
            nu.push(central_diff(h_step, |d| {
                let mut p = pred.clone();
                p.data[i] += d;
                f(&p)
            }));
        }
        rel_err(&an, &nu)
    }

    pub fn regularizer_instance(rng: &mut ChaCha8Rng) -> f64 {
        let n = rng.random_range(2..=10);
        let pts: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let colors: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let scales: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.random_range(0.0..0.05), rng.random_range(0.0..0.05), rng.random_range(0.0..0.05))).collect();
        let graph = losses::knn_graph(&pts, losses::COLOR_NEIGHBORS);
        let tau = 0.02;
        let r = losses::color_scale_regularizers(&colors, &scales, &graph, tau);
        let h = 1e-7;
        let mut an = Vec::new();
        let mut nu = Vec::new();
        for i in 0..n {
            for k in 0..3 {
                an.push(r.d_color[i][k]);
                nu.push(central_diff(h, |d| {
                    let mut c = colors.clone();
                    c[i][k] += d;
                    losses::color_scale_regularizers(&c, &scales, &graph, tau).color
                }));
                an.push(r.d_scale[i][k]);
                nu.push(central_diff(h, |d| {
                    let mut s = scales.clone();
                    s[i][k] += d;
                    losses::color_scale_regularizers(&colors, &s, &graph, tau).scale
                }));
            }
        }
        rel_err(&an, &nu)
    }

    pub fn hand_instance(rng: &mut ChaCha8Rng) -> f64 {
        let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let cur = losses::HandTrackFrame { theta: mk(rng, 90), translation: mk(rng, 6) };
        let prev = losses::HandTrackFrame { theta: mk(rng, 90), translation: mk(rng, 6) };
        let w: Vec<Vec<f64>> = (0..4).map(|_| mk(rng, 16)).collect();
        let wh: Vec<Vec<f64>> = (0..4).map(|_| mk(rng, 16)).collect();
        let l = losses::hand_loss(&cur, Some(&prev), &w, &wh, 1e3);
        let h = 1e-6;
        let mut an = Vec::new();
        let mut nu = Vec::new();
        for k in [0, 17, 89] {
            an.push(l.d_theta[k]);
            nu.push(central_diff(h, |d| {
                let mut c = cur.clone();
                c.theta[k] += d;
                losses::hand_loss(&c, Some(&prev), &w, &wh, 1e3).value()
            }));
            an.push(l.d_theta_prev[k]);
            nu.push(central_diff(h, |d| {
                let mut p = prev.clone();
                p.theta[k] += d;
                losses::hand_loss(&cur, Some(&p), &w, &wh, 1e3).value()
            }));
        }
        for k in 0..6 {
            an.push(l.d_translation[k]);
            nu.push(central_diff(h, |d| {
                let mut c = cur.clone();
                c.translation[k] += d;
                losses::hand_loss(&c, Some(&prev), &w, &wh, 1e3).value()
            }));
        }
        for (i, k) in [(0, 3), (3, 15)] {
            an.push(l.d_weights[i][k]);
            nu.push(central_diff(h, |d| {
                let mut ww = w.clone();
                ww[i][k] += d;
                losses::hand_loss(&cur, Some(&prev), &ww, &wh, 1e3).value()
            }));
        }
        rel_err(&an, &nu)
    }

    pub fn contact_instance(rng: &mut ChaCha8Rng) -> f64 {
        let v = |rng: &mut ChaCha8Rng| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let o = v(rng);
        let hands = [v(rng), v(rng)];
        let lam = rng.random_range(0.1..2.0);
        let c = losses::contact_loss(&o, &hands, lam);
        let h = 1e-6;
        let mut an = Vec::new();
        let mut nu = Vec::new();
        for k in 0..3 {
            an.push(c.d_object[k]);
            nu.push(central_diff(h, |d| {
                let mut oo = o;
                oo[k] += d;
                losses::contact_loss(&oo, &hands, lam).value
            }));
            for j in 0..2 {
                an.push(c.d_hands[j][k]);
                nu.push(central_diff(h, |d| {
                    let mut hh = hands;
                    hh[j][k] += d;
                    losses::contact_loss(&o, &hh, lam).value
                }));
            }
        }
        rel_err(&an, &nu)
    }
}
