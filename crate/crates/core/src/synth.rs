//! Synthetic bimanual grasp sequences with exact ground truth.
//!
//! The ground-truth store is expressed in the same parameterization the fit
//! uses: triplane fields hold the pre-squash head outputs as features and the
//! heads are ReLU passthroughs, so ground-truth frames are rendered through
//! the very code path being fitted.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{HeadKind, MlpHead};
use crate::geometry::{exp_so3, Camera, Gaussian3D, GaussianSet, Mat3, Subject, Vec3};
use crate::hand::{HandPose, HandTemplate, Side, SkinWeights, Skeleton, NUM_JOINTS, POSE_DIM};
use crate::image::Image;
use crate::losses::FrameObservation;
use crate::model::{names, FieldLayout, HeadLayout, ModelSpec, Part};
use crate::params::{Group, ParamStore};
use crate::raster;

/// Hand feature channels of the ground-truth field.
pub const HAND_COLOR_CHANNELS: std::ops::Range<usize> = 0..4;
pub const HAND_SKIN_CHANNELS: std::ops::Range<usize> = 4..4 + NUM_JOINTS;
/// Width of the bone-distance softmax used for skinning, in meters.
pub const SKIN_SIGMA: f64 = 0.012;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectShape {
    Sphere { radius: f64 },
    Box { half: Vec3 },
    /// A box with a sphere of the same half width on top.
    Composite { half: Vec3 },
}

impl ObjectShape {
    pub fn bounding_radius(&self) -> f64 {
        match self {
            ObjectShape::Sphere { radius } => *radius,
            ObjectShape::Box { half } => half.norm(),
            ObjectShape::Composite { half } => (half.y + half.x).max(half.norm()),
        }
    }

    /// Height of the top of the object above its center.
    pub fn top(&self) -> f64 {
        match self {
            ObjectShape::Sphere { radius } => *radius,
            ObjectShape::Box { half } => half.y,
            ObjectShape::Composite { half } => half.y + half.x,
        }
    }

    /// Distance from the center to the surface along +x, where the palms sit.
    pub fn side_extent(&self) -> f64 {
        match self {
            ObjectShape::Sphere { radius } => *radius,
            ObjectShape::Box { half } | ObjectShape::Composite { half } => half.x,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            ObjectShape::Sphere { radius } => *radius > 0.0,
            ObjectShape::Box { half } | ObjectShape::Composite { half } => half.iter().all(|h| *h > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Spec("object has zero extent".into()))
        }
    }

    /// Unsigned distance from `p` to the surface (approximate for the
    /// composite).
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        match self {
            ObjectShape::Sphere { radius } => (p.norm() - radius).abs(),
            ObjectShape::Box { half } => box_distance(p, half),
            ObjectShape::Composite { half } => {
                let top = Vec3::new(0.0, half.y, 0.0);
                box_distance(p, half).min(((p - top).norm() - half.x).abs())
            }
        }
    }

    /// Area-uniform surface samples.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        let mut pts = Vec::with_capacity(n);
        match self {
            ObjectShape::Sphere { radius } => {
                while pts.len() < n {
                    pts.push(random_unit(rng) * *radius);
                }
            }
            ObjectShape::Box { half } => {
                while pts.len() < n {
                    pts.push(sample_box(half, rng));
                }
            }
            ObjectShape::Composite { half } => {
                let r = half.x;
                let top = Vec3::new(0.0, half.y, 0.0);
                let box_area = 8.0 * (half.x * half.y + half.y * half.z + half.x * half.z);
                let sphere_area = 4.0 * PI * r * r;
                while pts.len() < n {
                    if rng.random_range(0.0..box_area + sphere_area) < box_area {
                        let p = sample_box(half, rng);
                        if (p - top).norm() >= r {
                            pts.push(p);
                        }
                    } else {
                        let p = top + random_unit(rng) * r;
                        if !inside_box(&p, half) {
                            pts.push(p);
                        }
                    }
                }
            }
        }
        pts
    }
}

fn box_distance(p: &Vec3, half: &Vec3) -> f64 {
    let q = p.abs() - half;
    let outside = q.sup(&Vec3::zeros()).norm();
    let inside = q.max().min(0.0);
    (outside + inside).abs()
}

fn inside_box(p: &Vec3, half: &Vec3) -> bool {
    (0..3).all(|k| p[k].abs() < half[k])
}

fn sample_box(half: &Vec3, rng: &mut impl Rng) -> Vec3 {
    let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
    let total: f64 = areas.iter().sum();
    let mut r = rng.random_range(0.0..total);
    let mut axis = 0;
    while axis < 2 && r >= areas[axis] {
        r -= areas[axis];
        axis += 1;
    }
    let mut p = Vec3::new(
        rng.random_range(-half.x..half.x),
        rng.random_range(-half.y..half.y),
        rng.random_range(-half.z..half.z),
    );
    p[axis] = if rng.random_bool(0.5) { half[axis] } else { -half[axis] };
    p
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub object: ObjectShape,
    pub object_points: usize,
    pub hand_points: usize,
    pub field_resolution: usize,
    pub field_width: usize,
    pub head_hidden: usize,
    /// Camera orbit around the object: distance, azimuth sweep (radians,
    /// centered on the front view) and elevation.
    pub orbit_radius: f64,
    pub orbit_sweep: f64,
    pub orbit_elevation: f64,
    /// Grasp script: finger flexion oscillation amplitude and number of
    /// cycles over the sequence, and object yaw sweep.
    pub grip_amplitude: f64,
    pub grip_cycles: f64,
    pub object_yaw_sweep: f64,
    /// Standard deviation of the articulation noise, radians.
    pub pose_noise: f64,
    /// Standard deviation of global orientation noise, radians.
    pub rotation_noise: f64,
    /// Standard deviation of translation noise per axis, meters.
    pub translation_noise: f64,
    /// Fraction of object points removed as one contiguous azimuth sector.
    pub dropout: f64,
    /// Fraction of frames kept (uniform stride).
    pub view_retention: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            frames: 30,
            width: 128,
            height: 128,
            focal_factor: 1.6,
            object: ObjectShape::Box {
                half: Vec3::new(0.05, 0.06, 0.055),
            },
            object_points: 2500,
            hand_points: 900,
            field_resolution: 64,
            field_width: 32,
            head_hidden: 64,
            orbit_radius: 0.5,
            orbit_sweep: 100f64.to_radians(),
            orbit_elevation: 20f64.to_radians(),
            grip_amplitude: 0.04,
            grip_cycles: 1.5,
            object_yaw_sweep: 40f64.to_radians(),
            pose_noise: 0.05,
            rotation_noise: 0.0,
            translation_noise: 0.01,
            dropout: 0.0,
            view_retention: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.object.validate()?;
        if self.frames < 2 {
            return Err(Error::Spec("need at least 2 frames".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::Spec("images must be at least 16x16".into()));
        }
        if !(self.view_retention > 0.0 && self.view_retention <= 1.0) {
            return Err(Error::Spec(format!("view retention {} outside (0, 1]", self.view_retention)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Spec(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.object_points < 8 || self.hand_points < 8 {
            return Err(Error::Spec("too few points".into()));
        }
        if self.field_width < HAND_SKIN_CHANNELS.end {
            return Err(Error::Spec(format!("feature width must be at least {}", HAND_SKIN_CHANNELS.end)));
        }
        for v in [self.pose_noise, self.rotation_noise, self.translation_noise] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Spec("noise magnitudes must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Indices of the frames kept by the view-retention stride.
    pub fn retained_frames(&self) -> Vec<usize> {
        let stride = (1.0 / self.view_retention).round().max(1.0) as usize;
        (0..self.frames).step_by(stride).collect()
    }

    pub fn focal(&self) -> f64 {
        self.focal_factor * self.width as f64
    }
}

/// A generated sequence.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub spec: SceneSpec,
    pub model: ModelSpec,
    pub gt: ParamStore,
    pub init: ParamStore,
    /// Retained frames, re-indexed from zero.
    pub observations: Vec<FrameObservation>,
    /// Original index of each retained frame.
    pub frame_ids: Vec<usize>,
    /// Ground-truth canonical object (before any dropout).
    pub reference_object: GaussianSet,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Ground-truth hand field: color and opacity logits and bone-distance skin
/// logits, all on the XY plane (the rest hand is nearly planar).
fn hand_field(layout: &FieldLayout, skel: &Skeleton) -> Vec<f64> {
    let f = layout.view(&[]);
    let r = layout.resolution;
    let mut data = vec![0.0; layout.param_count()];
    let base = [logit(0.82), logit(0.6), logit(0.48)];
    for j in 0..r {
        for i in 0..r {
            let x = layout.bbox_min.x + (layout.bbox_max.x - layout.bbox_min.x) * i as f64 / (r - 1) as f64;
            let y = layout.bbox_min.y + (layout.bbox_max.y - layout.bbox_min.y) * j as f64 / (r - 1) as f64;
            let stripe = (TAU * y / 0.028).sin();
            let cross = (TAU * x / 0.022).cos();
            let col = [
                base[0] + 0.9 * stripe,
                base[1] + 0.7 * cross,
                base[2] - 0.8 * stripe * cross,
            ];
            for c in 0..3 {
                data[f.node(0, i, j, c)] = col[c];
            }
            data[f.node(0, i, j, 3)] = logit(0.95);
            let logits = skel.bone_logits(&Vec3::new(x, y, 0.0), SKIN_SIGMA);
            for (k, l) in logits.iter().enumerate() {
                data[f.node(0, i, j, HAND_SKIN_CHANNELS.start + k)] = *l;
            }
        }
    }
    data
}

/// Ground-truth object field: sum-separable sinusoidal color logits across
/// the three planes and a constant opacity logit.
fn object_field(layout: &FieldLayout, rng: &mut impl Rng) -> Vec<f64> {
    let f = layout.view(&[]);
    let r = layout.resolution;
    let mut data = vec![0.0; layout.param_count()];
    let base = [logit(0.35), logit(0.55), logit(0.75)];
    let freq: Vec<[f64; 2]> = (0..3).map(|_| [rng.random_range(15.0..40.0), rng.random_range(15.0..40.0)]).collect();
    let phase: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..TAU)).collect();
    let coord = |axis: usize, n: usize| layout.bbox_min[axis] + (layout.bbox_max[axis] - layout.bbox_min[axis]) * n as f64 / (r - 1) as f64;
    for (p, (a, b)) in crate::field::PLANE_AXES.iter().enumerate() {
        for j in 0..r {
            for i in 0..r {
                let (u, v) = (coord(*a, i), coord(*b, j));
                for c in 0..3 {
                    let wave = (freq[p][0] * u + phase[3 * p + c]).sin() * (freq[p][1] * v + phase[3 * p + (c + 1) % 3]).cos();
                    let mut val = 0.8 * wave;
                    if p == 0 {
                        val += base[c];
                    }
                    data[f.node(p, i, j, c)] = val;
                }
                if p == 0 {
                    data[f.node(p, i, j, 3)] = logit(0.95);
                }
            }
        }
    }
    data
}

/// Scale threshold as a fraction of the subject's bounding-box diagonal.
pub const SCALE_TAU_FRACTION: f64 = 0.02;
/// Ground-truth Gaussian scale as a fraction of the scale threshold, so the
/// scale hinge is inactive at ground truth.
pub const GT_SCALE_FRACTION: f64 = 0.8;

fn bbox_diagonal(points: &[Vec3]) -> f64 {
    let lo = points.iter().fold(Vec3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi = points.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    (hi - lo).norm()
}

fn geometry_kind(layout: &FieldLayout, scale: f64) -> HeadKind {
    HeadKind::Geometry {
        delta_max: 0.05 * layout.diagonal(),
        log_scale_base: scale.ln(),
        log_scale_range: 1.0,
    }
}

/// Builds the model spec, ground-truth canonical groups and the reference
/// object for a spec.
fn build_canonical(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<(ModelSpec, ParamStore)> {
    let skel = Skeleton::standard();
    let mut template = HandTemplate::sample(&skel, spec.hand_points, SKIN_SIGMA, rng)?;
    let hand_layout = FieldLayout::around(&template.points, 0.1, spec.field_resolution, spec.field_width)?;
    let object_points = spec.object.sample_surface(spec.object_points, rng);
    let object_layout = FieldLayout::around(&object_points, 0.15, spec.field_resolution, spec.field_width)?;
    let tau = [SCALE_TAU_FRACTION * bbox_diagonal(&template.points), SCALE_TAU_FRACTION * bbox_diagonal(&object_points)];
    let d = spec.field_width;
    let hidden = [spec.head_hidden, spec.head_hidden];
    let model = ModelSpec {
        frames: 0,
        hand_appearance: HeadLayout::new(HeadKind::Appearance, d, &hidden),
        hand_geometry: HeadLayout::new(geometry_kind(&hand_layout, GT_SCALE_FRACTION * tau[0]), d, &hidden),
        hand_deformation: HeadLayout::new(HeadKind::Deformation { joints: NUM_JOINTS }, d, &hidden),
        object_appearance: HeadLayout::new(HeadKind::Appearance, d, &hidden),
        object_geometry: HeadLayout::new(geometry_kind(&object_layout, GT_SCALE_FRACTION * tau[1]), d, &hidden),
        scale_tau: tau,
        hand_field: hand_layout,
        object_field: object_layout,
        skeleton: skel,
        template: template.clone(),
    };
    let mut store = ParamStore::new();
    let hand_planes = hand_field(&model.hand_field, &model.skeleton);
    let obj_planes = object_field(&model.object_field, rng);
    let lr = crate::optim::DEFAULT_LR;
    let eu = |data: Vec<f64>, shape: Vec<usize>, lr: f64| Group::euclidean(shape, data, lr);
    let head = |kind: HeadKind, select: Option<std::ops::Range<usize>>| MlpHead::passthrough(kind, d, select).params;
    let (r, w) = (spec.field_resolution, d);
    store.insert(names::HAND_PLANES, eu(hand_planes, vec![3, r, r, w], lr.planes)?);
    store.insert(names::OBJECT_PLANES, eu(obj_planes, vec![3, r, r, w], lr.planes)?);
    for (name, layout, select) in [
        (names::HAND_APPEARANCE, &model.hand_appearance, Some(HAND_COLOR_CHANNELS)),
        (names::HAND_GEOMETRY, &model.hand_geometry, None),
        (names::HAND_DEFORMATION, &model.hand_deformation, Some(HAND_SKIN_CHANNELS)),
        (names::OBJECT_APPEARANCE, &model.object_appearance, Some(HAND_COLOR_CHANNELS)),
        (names::OBJECT_GEOMETRY, &model.object_geometry, None),
    ] {
        if spec.head_hidden != 2 * d {
            return Err(Error::Spec(format!("ground-truth heads need hidden width {}", 2 * d)));
        }
        let p = head(layout.kind, select);
        let n = p.len();
        store.insert(name, eu(p, vec![n], lr.heads)?);
    }
    let anchors: Vec<f64> = template.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    store.insert(names::HAND_ANCHORS, eu(anchors, vec![template.points.len(), 3], lr.centers)?);
    let anchors: Vec<f64> = object_points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    store.insert(names::OBJECT_ANCHORS, eu(anchors, vec![object_points.len(), 3], lr.centers)?);

    // The pseudo ground-truth skinning weights are the ground-truth
    // deformation output at the template points, so the skinning
    // regularizer vanishes at ground truth.
    let mut m = model;
    m.frames = 0;
    let canon = canonical_only(&m, &store, Part::Hand)?;
    template.weights = canon.weights.clone();
    for w in &template.weights {
        SkinWeights::new(w.0.clone())?;
    }
    m.template = template;
    Ok((m, store))
}

fn canonical_only(model: &ModelSpec, store: &ParamStore, part: Part) -> Result<crate::model::Canonical> {
    model.canonical(store, part)
}

/// Ground-truth per-frame tracks following the grasp script.
struct Tracks {
    left: Vec<HandPose>,
    right: Vec<HandPose>,
    object: Vec<(Mat3, Vec3)>,
    cameras: Vec<Camera>,
}

/// Right-hand rest orientation holding the object's +x face: palm normal
/// towards -x, fingers up.
fn grasp_orientation() -> Mat3 {
    Mat3::new(0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0)
}

/// Grasp articulation per finger (thumb first): axis-angle of the three
/// joints. Fingers run up the side face and curl over the top edge; the
/// thumb is opposed across the front face.
const GRASP: [[[f64; 3]; 3]; 5] = [
    [[0.3, 0.0, 0.5], [0.35, 0.0, 0.0], [0.3, 0.0, 0.0]],
    [[0.0, 0.0, -0.08], [1.45, 0.0, 0.0], [0.2, 0.0, 0.0]],
    [[0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [0.2, 0.0, 0.0]],
    [[0.0, 0.0, 0.08], [1.45, 0.0, 0.0], [0.2, 0.0, 0.0]],
    [[0.0, 0.0, 0.16], [0.05, 0.0, 0.0], [1.4, 0.0, 0.0]],
];

fn finger_theta(t: f64, spec: &SceneSpec, phase: f64) -> Vec<f64> {
    let mut theta = vec![0.0; POSE_DIM];
    for (f, joints) in GRASP.iter().enumerate() {
        let osc = spec.grip_amplitude * (TAU * spec.grip_cycles * t + phase + 0.7 * f as f64).sin();
        for (k, base) in joints.iter().enumerate() {
            let j = 3 * f + k;
            theta[3 * j] = base[0] + osc * if k == 0 { 0.5 } else { 1.0 };
            theta[3 * j + 1] = base[1] + 0.1 * osc;
            theta[3 * j + 2] = base[2] + if k == 0 { 0.3 * osc } else { 0.0 };
        }
    }
    theta
}

fn tracks(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Tracks {
    let n = spec.frames;
    let palm_offset = spec.object.side_extent() + 0.008;
    // middle-finger PIP just above the top face
    let palm_height = spec.object.top() + 0.009 - 0.094;
    let phase_l = rng.random_range(0.0..TAU);
    let phase_r = rng.random_range(0.0..TAU);
    let yaw0 = rng.random_range(-0.2..0.2);
    let mut out = Tracks {
        left: Vec::with_capacity(n),
        right: Vec::with_capacity(n),
        object: Vec::with_capacity(n),
        cameras: Vec::with_capacity(n),
    };
    for f in 0..n {
        let t = f as f64 / (n - 1) as f64;
        let yaw = yaw0 + spec.object_yaw_sweep * (t - 0.5);
        let tilt = 0.15 * (TAU * t).sin();
        let ro = exp_so3(&Vec3::new(tilt, yaw, 0.05 * (PI * t).cos()));
        let to = Vec3::new(0.02 * (TAU * t).sin(), 0.015 * (PI * t).cos(), 0.01 * t);
        let right_local = HandPose {
            theta: finger_theta(t, spec, phase_r),
            rotation: grasp_orientation(),
            translation: Vec3::new(palm_offset, palm_height, 0.0),
            side: Side::Right,
        };
        let mut left_local = right_local.mirrored();
        let lt = finger_theta(t, spec, phase_l);
        left_local.theta = lt.chunks(3).flat_map(|w| [w[0], -w[1], -w[2]]).collect();
        let place = |p: &HandPose| HandPose {
            rotation: ro * p.rotation,
            translation: ro * p.translation + to,
            ..p.clone()
        };
        out.left.push(place(&left_local));
        out.right.push(place(&right_local));
        out.object.push((ro, to));
        out.cameras.push(orbit_camera(spec, t));
    }
    out
}

/// Orbit camera at sequence phase `t` in [0, 1].
pub fn orbit_camera(spec: &SceneSpec, t: f64) -> Camera {
    let az = spec.orbit_sweep * (t - 0.5);
    let el = spec.orbit_elevation;
    let eye = Vec3::new(el.cos() * az.sin(), el.sin(), -el.cos() * az.cos()) * spec.orbit_radius;
    Camera::look_at(&eye, &Vec3::zeros(), &Vec3::y(), spec.focal(), spec.width, spec.height)
}

/// Views never used for training: for each retained frame, the orbit camera
/// half a frame step further along the sweep.
pub fn held_out_cameras(seq: &SyntheticSequence) -> Vec<Camera> {
    let n = seq.spec.frames;
    seq.frame_ids
        .iter()
        .map(|&f| orbit_camera(&seq.spec, (f as f64 + 0.5) / (n - 1) as f64))
        .collect()
}

fn insert_tracks(store: &mut ParamStore, left: &[HandPose], right: &[HandPose], object: &[(Mat3, Vec3)]) -> Result<()> {
    let lr = crate::optim::DEFAULT_LR;
    let n = object.len();
    for (side, poses) in [(Side::Left, left), (Side::Right, right)] {
        let theta: Vec<f64> = poses.iter().flat_map(|p| p.theta.iter().copied()).collect();
        store.insert(names::theta(side), Group::euclidean(vec![n, POSE_DIM], theta, lr.pose)?);
        let rots: Vec<Mat3> = poses.iter().map(|p| p.rotation).collect();
        store.insert(names::rotation(side), Group::rotations(&rots, lr.rotation));
        let tr: Vec<f64> = poses.iter().flat_map(|p| [p.translation.x, p.translation.y, p.translation.z]).collect();
        store.insert(names::translation(side), Group::euclidean(vec![n, 3], tr, lr.translation)?);
    }
    let rots: Vec<Mat3> = object.iter().map(|o| o.0).collect();
    store.insert(names::OBJECT_ROTATION, Group::rotations(&rots, lr.rotation));
    let tr: Vec<f64> = object.iter().flat_map(|o| [o.1.x, o.1.y, o.1.z]).collect();
    store.insert(names::OBJECT_TRANSLATION, Group::euclidean(vec![n, 3], tr, lr.translation)?);
    Ok(())
}

/// Renders the ground-truth store and thresholds per-subject coverage.
pub fn observe(model: &ModelSpec, store: &ParamStore, cameras: &[Camera]) -> Result<Vec<FrameObservation>> {
    let hand = model.canonical(store, Part::Hand)?;
    let object = model.canonical(store, Part::Object)?;
    (0..cameras.len())
        .into_par_iter()
        .map(|t| {
            let scene = model.frame(store, &hand, &object, t)?;
            let cam = &cameras[t];
            let img = raster::render(&scene.merged, cam)?.image;
            let ind = raster::render(&scene.indicator_set(), cam)?.image;
            let masks = [0, 1, 2].map(|c| Image::from_fn(cam.width, cam.height, 1, |x, y, _| if ind.get(x, y, c) > 0.5 { 1.0 } else { 0.0 }));
            FrameObservation::new(t, img, masks, cam.clone())
        })
        .collect()
}

struct Scaffold {
    model: ModelSpec,
    gt: ParamStore,
    cameras: Vec<Camera>,
    keep: Vec<usize>,
}

fn scaffold(spec: &SceneSpec) -> Result<Scaffold> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut model, mut gt) = build_canonical(spec, &mut rng)?;
    let tr = tracks(spec, &mut rng);
    let keep = spec.retained_frames();
    let pick = |v: &[HandPose]| keep.iter().map(|&f| v[f].clone()).collect::<Vec<_>>();
    let object: Vec<(Mat3, Vec3)> = keep.iter().map(|&f| tr.object[f]).collect();
    let cameras: Vec<Camera> = keep.iter().map(|&f| tr.cameras[f].clone()).collect();
    insert_tracks(&mut gt, &pick(&tr.left), &pick(&tr.right), &object)?;
    model.frames = keep.len();
    model.check_store(&gt)?;
    Ok(Scaffold { model, gt, cameras, keep })
}

/// The model a spec generates, without rendering anything.
pub fn model_for(spec: &SceneSpec) -> Result<ModelSpec> {
    Ok(scaffold(spec)?.model)
}

pub fn generate(spec: &SceneSpec) -> Result<SyntheticSequence> {
    let Scaffold { model, gt, cameras, keep } = scaffold(spec)?;
    let observations = observe(&model, &gt, &cameras)?;
    let reference_object = model.canonical(&gt, Part::Object)?.set;
    let init = perturb(&gt, spec, &model, spec.seed ^ 0x5eed)?;
    Ok(SyntheticSequence {
        spec: spec.clone(),
        model,
        gt,
        init,
        observations,
        frame_ids: keep,
        reference_object,
    })
}

/// Noisy initialization: Gaussian noise on articulation, global orientation
/// and translations (independent per frame), and a contiguous azimuth sector
/// of object anchors removed.
pub fn perturb(gt: &ParamStore, spec: &SceneSpec, model: &ModelSpec, seed: u64) -> Result<ParamStore> {
    let mut store = gt.clone();
    let frames = model.frames;
    let normal = |s: f64| Normal::new(0.0, s.max(0.0)).expect("finite std");
    for t in 0..frames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64 + 1);
        for side in [Side::Left, Side::Right] {
            if spec.pose_noise > 0.0 {
                let g = store.get_mut(names::theta(side))?;
                for k in 0..POSE_DIM {
                    g.values[t * POSE_DIM + k] += normal(spec.pose_noise).sample(&mut rng);
                }
            }
            if spec.rotation_noise > 0.0 {
                let g = store.get_mut(names::rotation(side))?;
                let d = Vec3::from_fn(|_, _| normal(spec.rotation_noise).sample(&mut rng));
                let r = exp_so3(&d) * g.rotation(t);
                g.set_rotation(t, &r);
            }
            if spec.translation_noise > 0.0 {
                let g = store.get_mut(names::translation(side))?;
                for k in 0..3 {
                    g.values[3 * t + k] += normal(spec.translation_noise).sample(&mut rng);
                }
            }
        }
        if spec.rotation_noise > 0.0 {
            let g = store.get_mut(names::OBJECT_ROTATION)?;
            let d = Vec3::from_fn(|_, _| normal(spec.rotation_noise).sample(&mut rng));
            let r = exp_so3(&d) * g.rotation(t);
            g.set_rotation(t, &r);
        }
        if spec.translation_noise > 0.0 {
            let g = store.get_mut(names::OBJECT_TRANSLATION)?;
            for k in 0..3 {
                g.values[3 * t + k] += normal(spec.translation_noise).sample(&mut rng);
            }
        }
    }
    if spec.dropout > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // the removed sector faces away from the front of the orbit, where
        // few views reach, jittered by the seed
        let center = PI / 2.0 + rng.random_range(-0.5..0.5);
        let g = store.get_mut(names::OBJECT_ANCHORS)?;
        let pts: Vec<Vec3> = (0..g.values.len() / 3).map(|i| g.vec3(i)).collect();
        let kept = sector_dropout(&pts, spec.dropout, center);
        let values: Vec<f64> = kept.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        g.shape = vec![kept.len(), 3];
        g.values = values;
    }
    Ok(store)
}

/// Keeps `floor(N (1 - fraction))` points, dropping those whose azimuth
/// about +y is closest to `center`.
pub fn sector_dropout(points: &[Vec3], fraction: f64, center: f64) -> Vec<Vec3> {
    let keep = ((points.len() as f64) * (1.0 - fraction)).floor() as usize;
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let az = p.z.atan2(p.x);
            let mut d = (az - center).rem_euclid(TAU);
            if d > PI {
                d = TAU - d;
            }
            (d, i)
        })
        .collect();
    order.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut idx: Vec<usize> = order.into_iter().take(keep).map(|(_, i)| i).collect();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

/// Ground-truth hand and object Gaussians for every retained frame, in world
/// space.
pub fn gt_sets(seq: &SyntheticSequence) -> Result<Vec<GaussianSet>> {
    let hand = seq.model.canonical(&seq.gt, Part::Hand)?;
    let object = seq.model.canonical(&seq.gt, Part::Object)?;
    (0..seq.model.frames)
        .map(|t| Ok(seq.model.frame(&seq.gt, &hand, &object, t)?.merged))
        .collect()
}

/// Writes the documented scene directory layout.
pub fn write_dir(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    for (t, obs) in seq.observations.iter().enumerate() {
        obs.image.save_png(&dir.join(format!("frames/{t:04}.png")), false)?;
        for (k, tag) in ["l", "r", "o"].iter().enumerate() {
            obs.masks[k].save_png(&dir.join(format!("masks/{tag}/{t:04}.png")), false)?;
        }
    }
    let cams: Vec<Camera> = seq.observations.iter().map(|o| o.camera.clone()).collect();
    crate::io::write_atomic(&dir.join("cameras.txt"), crate::io::format_cameras(&cams).as_bytes())?;
    seq.gt.save(&dir.join("gt_params.ckpt"))?;
    seq.init.save(&dir.join("init_params.ckpt"))?;
    crate::io::write_atomic(&dir.join("rig.txt"), seq.model.skeleton.to_table().as_bytes())?;
    let template = GaussianSet::new(
        Subject::RightHand,
        seq.model
            .template
            .points
            .iter()
            .map(|p| Gaussian3D::isotropic(*p, GT_SCALE_FRACTION * seq.model.scale_tau[0], 0.99, Vec3::repeat(1.0)))
            .collect(),
    );
    crate::ply::export_ply(&template, &dir.join("template.ply"))?;
    Ok(())
}

/// Reads frames, masks and cameras written by [`write_dir`].
pub fn read_observations(dir: &Path, width: usize, height: usize) -> Result<Vec<FrameObservation>> {
    let text = crate::io::read_to_string(&dir.join("cameras.txt"))?;
    let cams = crate::io::parse_cameras(&text, width, height, 0.01)?;
    cams.into_iter()
        .enumerate()
        .map(|(t, cam)| {
            let image = Image::load_png(&dir.join(format!("frames/{t:04}.png")), 3)?;
            let masks = ["l", "r", "o"]
                .map(|tag| Image::load_png(&dir.join(format!("masks/{tag}/{t:04}.png")), 1))
                .into_iter()
                .map(|m| m.map(|m| Image { data: m.data.iter().map(|v| v.round()).collect(), ..m }))
                .collect::<Result<Vec<_>>>()?;
            let [l, r, o]: [Image; 3] = masks.try_into().expect("three masks");
            FrameObservation::new(t, image, [l, r, o], cam)
        })
        .collect()
}

/// Ground-truth fingertip distance to the object surface, per frame and
/// fingertip, for both hands.
pub fn fingertip_gaps(seq: &SyntheticSequence) -> Result<Vec<f64>> {
    let mut gaps = Vec::new();
    for t in 0..seq.model.frames {
        let (ro, to) = seq.model.object_pose(&seq.gt, t)?;
        for side in [Side::Left, Side::Right] {
            let kp = seq.model.keypoints(&seq.gt, t, side)?;
            for tip in &kp[NUM_JOINTS..] {
                let local = ro.transpose() * (tip - to);
                gaps.push(seq.spec.object.surface_distance(&local));
            }
        }
    }
    Ok(gaps)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_spec() -> SceneSpec {
        SceneSpec {
            frames: 4,
            width: 48,
            height: 48,
            object_points: 120,
            hand_points: 150,
            field_resolution: 16,
            field_width: 20,
            head_hidden: 40,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn retention_stride() {
        let mut s = SceneSpec {
            frames: 30,
            ..SceneSpec::default()
        };
        assert_eq!(s.retained_frames().len(), 30);
        s.view_retention = 0.25;
        assert_eq!(s.retained_frames().len(), 8);
        assert_eq!(s.retained_frames()[1], 4);
    }

    #[test]
    fn zero_extent_object_is_rejected() {
        let s = SceneSpec {
            object: ObjectShape::Sphere { radius: 0.0 },
            ..tiny_spec()
        };
        assert!(matches!(generate(&s), Err(Error::Spec(_))));
    }

    #[test]
    fn sector_dropout_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<Vec3> = (0..101).map(|_| random_unit(&mut rng)).collect();
        assert_eq!(sector_dropout(&pts, 0.5, 0.3).len(), 50);
        assert_eq!(sector_dropout(&pts, 0.0, 0.3).len(), 101);
    }

    #[test]
    fn deterministic_and_masks_nonempty() {
        let s = tiny_spec();
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a.gt.to_bytes(), b.gt.to_bytes());
        assert_eq!(a.init.to_bytes(), b.init.to_bytes());
        for (x, y) in a.observations.iter().zip(&b.observations) {
            assert_eq!(x.image, y.image);
            for m in &x.masks {
                assert!(m.data.iter().sum::<f64>() > 0.0);
            }
        }
    }

    #[test]
    fn template_weights_match_ground_truth_head() {
        let seq = generate(&tiny_spec()).unwrap();
        let canon = seq.model.canonical(&seq.gt, Part::Hand).unwrap();
        for (w, p) in canon.weights.iter().zip(&canon.set.gaussians) {
            assert_eq!(&crate::hand::pseudo_lbs(&p.center, &seq.model.template), w);
        }
    }
}
