//! Procedural 16-joint hand rig, forward kinematics and linear blend skinning.
//!
//! Canonical space is the right hand at rest, in meters: the palm center is
//! the origin, fingers point along +y, the palm normal is +z and flexion is a
//! rotation about +x. Joint 0 is the wrist; finger `f` (thumb first) owns
//! joints `1 + 3f ..= 3 + 3f`, ordered from the knuckle outwards. Each
//! articulated joint carries one axis-angle vector of the 45-dim pose, given
//! in the rest-aligned canonical frame.
//!
//! The left hand lives in x-mirrored space: its rest joints are `M j_k` with
//! `M = diag(-1, 1, 1)` and its canonical Gaussians are the flipped right-hand
//! ones. A left pose built with [`HandPose::mirrored`] reproduces the right
//! hand exactly mirrored.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    exp_so3, exp_so3_jacobian, mirror_x, rotation_increment_grad, Gaussian3D, GaussianSet, Mat3, Quat, Subject, Vec3,
};

pub const NUM_JOINTS: usize = 16;
pub const NUM_FINGERS: usize = 5;
pub const POSE_DIM: usize = 45;
/// Joints plus fingertips.
pub const NUM_KEYPOINTS: usize = NUM_JOINTS + NUM_FINGERS;
/// Neighbors averaged by [`pseudo_lbs`].
pub const PSEUDO_LBS_K: usize = 6;
/// Logit floor for the bone-distance weights.
const LOGIT_FLOOR: f64 = -30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn subject(self) -> Subject {
        match self {
            Side::Left => Subject::LeftHand,
            Side::Right => Subject::RightHand,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "l",
            Side::Right => "r",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub parents: Vec<Option<usize>>,
    /// Rest joint positions in canonical right-hand space.
    pub rest: Vec<Vec3>,
    /// Rest fingertip positions, one per finger.
    pub tips: Vec<Vec3>,
}

impl Skeleton {
    /// The default adult-sized right hand.
    pub fn standard() -> Self {
        let mut parents = vec![None];
        let mut rest = vec![Vec3::new(0.0, -0.045, 0.0)];
        let mut tips = Vec::with_capacity(NUM_FINGERS);
        let thumb_dir = Vec3::new(1.0, 1.0, 0.35).normalize();
        let fingers: [(Vec3, Vec3, [f64; 3]); NUM_FINGERS] = [
            (Vec3::new(0.03, -0.025, 0.008), thumb_dir, [0.035, 0.03, 0.026]),
            (Vec3::new(0.026, 0.045, 0.0), Vec3::y(), [0.04, 0.025, 0.021]),
            (Vec3::new(0.008, 0.049, 0.0), Vec3::y(), [0.045, 0.028, 0.022]),
            (Vec3::new(-0.01, 0.046, 0.0), Vec3::y(), [0.042, 0.026, 0.021]),
            (Vec3::new(-0.027, 0.04, 0.0), Vec3::y(), [0.032, 0.021, 0.019]),
        ];
        for (base, dir, lengths) in fingers {
            let mut p = base;
            let mut parent = 0;
            for len in lengths {
                parents.push(Some(parent));
                rest.push(p);
                parent = rest.len() - 1;
                p += dir * len;
            }
            tips.push(p);
        }
        Skeleton { parents, rest, tips }
    }

    pub fn len(&self) -> usize {
        self.rest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rest.is_empty()
    }

    /// Rest joints for one side.
    pub fn rest_for(&self, side: Side) -> Vec<Vec3> {
        side_points(&self.rest, side)
    }

    pub fn tips_for(&self, side: Side) -> Vec<Vec3> {
        side_points(&self.tips, side)
    }

    /// Last joint of each finger, which carries the fingertip.
    pub fn tip_joint(finger: usize) -> usize {
        3 + 3 * finger
    }

    /// Bone segments owned by each joint. The wrist owns the palm fan to
    /// every knuckle; a finger joint owns the segment to its child.
    fn bones(&self) -> Vec<Vec<(Vec3, Vec3)>> {
        let mut bones = vec![Vec::new(); self.len()];
        for f in 0..NUM_FINGERS {
            let j0 = 1 + 3 * f;
            bones[0].push((self.rest[0], self.rest[j0]));
            for k in 0..3 {
                let j = j0 + k;
                let end = if k < 2 { self.rest[j + 1] } else { self.tips[f] };
                bones[j].push((self.rest[j], end));
            }
        }
        bones
    }

    /// Bone-distance skinning logits `-d^2 / (2 sigma^2)`, floored.
    pub fn bone_logits(&self, p: &Vec3, sigma: f64) -> Vec<f64> {
        self.bones()
            .iter()
            .map(|segs| {
                let d2 = segs
                    .iter()
                    .map(|(a, b)| segment_dist2(p, a, b))
                    .fold(f64::INFINITY, f64::min);
                (-d2 / (2.0 * sigma * sigma)).max(LOGIT_FLOOR)
            })
            .collect()
    }

    /// Plain-text rig table: `joint parent ox oy oz`, offsets relative to the
    /// parent (absolute for the root), parent `-1` for the root.
    pub fn to_table(&self) -> String {
        let mut s = String::from("# joint parent offset_x offset_y offset_z\n");
        for (k, p) in self.parents.iter().enumerate() {
            let off = match p {
                Some(p) => self.rest[k] - self.rest[*p],
                None => self.rest[k],
            };
            let parent = p.map(|p| p as i64).unwrap_or(-1);
            writeln!(s, "{k} {parent} {} {} {}", off.x, off.y, off.z).unwrap();
        }
        for (f, tip) in self.tips.iter().enumerate() {
            let j = Skeleton::tip_joint(f);
            let off = tip - self.rest[j];
            writeln!(s, "tip{f} {j} {} {} {}", off.x, off.y, off.z).unwrap();
        }
        s
    }
}

fn side_points(points: &[Vec3], side: Side) -> Vec<Vec3> {
    match side {
        Side::Right => points.to_vec(),
        Side::Left => points.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect(),
    }
}

fn segment_dist2(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm_squared()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandPose {
    pub theta: Vec<f64>,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub side: Side,
}

impl HandPose {
    pub fn rest(side: Side) -> Self {
        HandPose {
            theta: vec![0.0; POSE_DIM],
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            side,
        }
    }

    pub fn joint_axis_angle(&self, joint: usize) -> Vec3 {
        let i = 3 * (joint - 1);
        Vec3::new(self.theta[i], self.theta[i + 1], self.theta[i + 2])
    }

    /// The opposite hand at the mirror-image pose.
    pub fn mirrored(&self) -> HandPose {
        let m = mirror_x();
        let theta = self
            .theta
            .chunks(3)
            .flat_map(|w| [w[0], -w[1], -w[2]])
            .collect();
        HandPose {
            theta,
            rotation: m * self.rotation * m,
            translation: m * self.translation,
            side: match self.side {
                Side::Left => Side::Right,
                Side::Right => Side::Left,
            },
        }
    }
}

/// Rigid map `x -> rotation * x + translation` relative to the rest pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl JointTransform {
    pub const IDENTITY: JointTransform = JointTransform {
        rotation: Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        translation: Vec3::new(0.0, 0.0, 0.0),
    };

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// Per-joint transforms including the global rigid placement: the root maps
/// to `(rotation, translation)` of the pose and each child rotates about its
/// own rest position.
pub fn forward_kinematics(skel: &Skeleton, pose: &HandPose) -> Result<Vec<JointTransform>> {
    if pose.theta.len() != 3 * (skel.len() - 1) {
        return Err(Error::Shape(format!(
            "pose has {} values, skeleton needs {}",
            pose.theta.len(),
            3 * (skel.len() - 1)
        )));
    }
    let rest = skel.rest_for(pose.side);
    let mut out = Vec::with_capacity(skel.len());
    for (k, parent) in skel.parents.iter().enumerate() {
        let t = match parent {
            None => JointTransform {
                rotation: pose.rotation,
                translation: pose.translation,
            },
            Some(p) => {
                let pt: JointTransform = out[*p];
                let r = exp_so3(&pose.joint_axis_angle(k));
                JointTransform {
                    rotation: pt.rotation * r,
                    translation: pt.rotation * (rest[k] - r * rest[k]) + pt.translation,
                }
            }
        };
        out.push(t);
    }
    Ok(out)
}

/// Gradient with respect to a [`HandPose`]; `rotation` is the gradient of a
/// left-multiplied increment `R <- exp(delta) R`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGrad {
    pub theta: Vec<f64>,
    pub rotation: Vec3,
    pub translation: Vec3,
}

/// Pulls per-joint transform gradients back to the pose parameters.
pub fn forward_kinematics_backward(
    skel: &Skeleton,
    pose: &HandPose,
    transforms: &[JointTransform],
    d_rot: &[Mat3],
    d_trans: &[Vec3],
) -> PoseGrad {
    let rest = skel.rest_for(pose.side);
    let mut d_rot = d_rot.to_vec();
    let mut d_trans = d_trans.to_vec();
    let mut theta = vec![0.0; pose.theta.len()];
    for k in (1..skel.len()).rev() {
        let p = skel.parents[k].expect("non-root joint has a parent");
        let w = pose.joint_axis_angle(k);
        let r = exp_so3(&w);
        let phi_p = transforms[p].rotation;
        let lever = rest[k] - r * rest[k];
        let d_r = phi_p.transpose() * (d_rot[k] - d_trans[k] * rest[k].transpose());
        let dp_rot = d_rot[k] * r.transpose() + d_trans[k] * lever.transpose();
        let dp_trans = d_trans[k];
        d_rot[p] += dp_rot;
        d_trans[p] += dp_trans;
        let jac = exp_so3_jacobian(&w);
        for a in 0..3 {
            theta[3 * (k - 1) + a] = d_r.component_mul(&jac[a]).sum();
        }
    }
    PoseGrad {
        theta,
        rotation: rotation_increment_grad(&transforms[0].rotation, &d_rot[0]),
        translation: d_trans[0],
    }
}

/// The 16 joints followed by the 5 fingertips, posed.
pub fn keypoints(skel: &Skeleton, side: Side, transforms: &[JointTransform]) -> Vec<Vec3> {
    let rest = skel.rest_for(side);
    let tips = skel.tips_for(side);
    let mut out: Vec<Vec3> = rest.iter().zip(transforms).map(|(j, t)| t.apply(j)).collect();
    for (f, tip) in tips.iter().enumerate() {
        out.push(transforms[Skeleton::tip_joint(f)].apply(tip));
    }
    out
}

/// Nonnegative per-joint weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeights(pub Vec<f64>);

impl SkinWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-3 || w.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(Error::InvalidWeights { sum });
        }
        Ok(SkinWeights(w))
    }

    pub fn softmax(logits: &[f64]) -> Self {
        SkinWeights(softmax(logits))
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(w: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in w.iter().enumerate() {
        if *v > w[best] {
            best = k;
        }
    }
    best
}

/// Blended posed position `sum_k w_k (R_k x + t_k)`.
pub fn lbs_pose(mu: &Vec3, w: &[f64], transforms: &[JointTransform]) -> Result<Vec3> {
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidWeights { sum });
    }
    if w.len() != transforms.len() {
        return Err(Error::Shape(format!("{} weights for {} joints", w.len(), transforms.len())));
    }
    Ok(lbs_unchecked(mu, w, transforms))
}

fn lbs_unchecked(mu: &Vec3, w: &[f64], transforms: &[JointTransform]) -> Vec3 {
    let mut p = Vec3::zeros();
    for (wk, t) in w.iter().zip(transforms) {
        if *wk != 0.0 {
            p += t.apply(mu) * *wk;
        }
    }
    p
}

/// Mirrors a canonical set through the x = 0 plane.
pub fn flip_x(set: &GaussianSet) -> GaussianSet {
    let m = mirror_x();
    let gaussians = set
        .gaussians
        .iter()
        .map(|g| Gaussian3D {
            center: Vec3::new(-g.center.x, g.center.y, g.center.z),
            rotation: Quat::from_matrix(&(m * g.rotation.to_matrix() * m)),
            ..*g
        })
        .collect();
    let subject = match set.subject {
        Subject::LeftHand => Subject::RightHand,
        Subject::RightHand => Subject::LeftHand,
        s => s,
    };
    GaussianSet { subject, gaussians }
}

/// Rest template: surface samples with their pseudo ground-truth weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HandTemplate {
    pub points: Vec<Vec3>,
    pub weights: Vec<SkinWeights>,
    /// Frozen shape coefficients (identity shape).
    pub beta: [f64; 10],
}

impl HandTemplate {
    pub fn new(points: Vec<Vec3>, weights: Vec<SkinWeights>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.len() != weights.len() {
            return Err(Error::Shape(format!("{} points, {} weight rows", points.len(), weights.len())));
        }
        for w in &weights {
            SkinWeights::new(w.0.clone())?;
        }
        Ok(HandTemplate {
            points,
            weights,
            beta: [0.0; 10],
        })
    }

    /// Samples `n` points on capsules around the finger bones and on a
    /// flattened palm ellipsoid, weighted by bone-distance softmax.
    pub fn sample(skel: &Skeleton, n: usize, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        let points = sample_hand_surface(skel, n, rng);
        let weights = points
            .iter()
            .map(|p| SkinWeights::softmax(&skel.bone_logits(p, sigma)))
            .collect();
        HandTemplate::new(points, weights)
    }
}

const FINGER_RADIUS: f64 = 0.0085;
const PALM_HALF: [f64; 3] = [0.046, 0.05, 0.013];

fn sample_hand_surface(skel: &Skeleton, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let mut segments = Vec::new();
    for f in 0..NUM_FINGERS {
        for k in 0..3 {
            let j = 1 + 3 * f + k;
            let end = if k < 2 { skel.rest[j + 1] } else { skel.tips[f] };
            segments.push((skel.rest[j], end));
        }
    }
    let finger_area: f64 = segments.iter().map(|(a, b)| (b - a).norm()).sum::<f64>() * 2.0 * std::f64::consts::PI * FINGER_RADIUS;
    let [a, b, c] = PALM_HALF;
    let palm_area = 4.0 * std::f64::consts::PI * ((a * b).powf(1.6) + (a * c).powf(1.6) + (b * c).powf(1.6)).powf(1.0 / 1.6) / 3f64.powf(1.0 / 1.6);
    let n_palm = ((n as f64) * palm_area / (palm_area + finger_area)).round() as usize;
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n_palm.min(n) {
        let d = random_unit(rng);
        pts.push(Vec3::new(d.x * a, d.y * b, d.z * c));
    }
    let lengths: Vec<f64> = segments.iter().map(|(a, b)| (b - a).norm()).collect();
    let total: f64 = lengths.iter().sum();
    while pts.len() < n {
        let mut r = rng.random_range(0.0..total);
        let mut s = 0;
        while s + 1 < segments.len() && r > lengths[s] {
            r -= lengths[s];
            s += 1;
        }
        let (a, b) = segments[s];
        let axis = (b - a).normalize();
        let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
        let u = axis.cross(&helper).normalize();
        let v = axis.cross(&u);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let t = (r / lengths[s]).clamp(0.0, 1.0);
        pts.push(a + (b - a) * t + (u * phi.cos() + v * phi.sin()) * FINGER_RADIUS);
    }
    pts
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

/// Inverse-distance average of the weights of the 6 nearest template points.
pub fn pseudo_lbs(query: &Vec3, template: &HandTemplate) -> SkinWeights {
    let mut near: Vec<(f64, usize)> = Vec::with_capacity(PSEUDO_LBS_K + 1);
    for (i, p) in template.points.iter().enumerate() {
        let d = (p - query).norm();
        if d == 0.0 {
            return template.weights[i].clone();
        }
        if near.len() < PSEUDO_LBS_K || d < near[near.len() - 1].0 {
            let pos = near.partition_point(|(e, j)| (*e, *j) < (d, i));
            near.insert(pos, (d, i));
            near.truncate(PSEUDO_LBS_K);
        }
    }
    let k = template.weights[0].0.len();
    let mut w = vec![0.0; k];
    let mut total = 0.0;
    for (d, i) in near {
        let inv = 1.0 / d;
        total += inv;
        for (acc, v) in w.iter_mut().zip(&template.weights[i].0) {
            *acc += inv * v;
        }
    }
    SkinWeights(w.into_iter().map(|v| v / total).collect())
}

/// A hand set placed in the world, with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct PosedHand {
    pub set: GaussianSet,
    /// Canonical centers after the side flip.
    pub canonical: Vec<Vec3>,
    /// Canonical rotation matrices after the side flip.
    pub canonical_rot: Vec<Mat3>,
    pub transforms: Vec<JointTransform>,
    /// Joint whose rotation orients each Gaussian.
    pub lead_joint: Vec<usize>,
}

/// Poses right-hand canonical Gaussians: flip for the left side, blend the
/// joint transforms at each center, and orient by the max-weight joint.
pub fn pose_hand(canonical: &GaussianSet, weights: &[SkinWeights], skel: &Skeleton, pose: &HandPose) -> Result<PosedHand> {
    if weights.len() != canonical.len() {
        return Err(Error::Shape(format!(
            "{} weight rows for {} Gaussians",
            weights.len(),
            canonical.len()
        )));
    }
    let transforms = forward_kinematics(skel, pose)?;
    let src = match pose.side {
        Side::Right => canonical.clone(),
        Side::Left => flip_x(canonical),
    };
    let mut gaussians = Vec::with_capacity(src.len());
    let mut canon = Vec::with_capacity(src.len());
    let mut canon_rot = Vec::with_capacity(src.len());
    let mut lead = Vec::with_capacity(src.len());
    for (g, w) in src.gaussians.iter().zip(weights) {
        let center = lbs_pose(&g.center, &w.0, &transforms)?;
        let k = w.argmax();
        let rc = g.rotation.to_matrix();
        let rot = transforms[k].rotation * rc;
        gaussians.push(Gaussian3D {
            center,
            rotation: Quat::from_matrix(&rot),
            ..*g
        });
        canon.push(g.center);
        canon_rot.push(rc);
        lead.push(k);
    }
    Ok(PosedHand {
        set: GaussianSet::new(pose.side.subject(), gaussians),
        canonical: canon,
        canonical_rot: canon_rot,
        transforms,
        lead_joint: lead,
    })
}

#[derive(Debug, Clone)]
pub struct HandBackward {
    /// With respect to the right-hand (pre-flip) canonical centers.
    pub center: Vec<Vec3>,
    /// With respect to the right-hand (pre-flip) canonical rotation matrices.
    pub rotation_matrix: Vec<Mat3>,
    pub weights: Vec<Vec<f64>>,
    pub pose: PoseGrad,
}

/// Reverse pass of [`pose_hand`] given gradients of the posed centers and
/// posed rotation matrices.
pub fn pose_hand_backward(
    posed: &PosedHand,
    weights: &[SkinWeights],
    skel: &Skeleton,
    pose: &HandPose,
    d_center: &[Vec3],
    d_rot: &[Mat3],
) -> HandBackward {
    let nj = posed.transforms.len();
    let mut dj_rot = vec![Mat3::zeros(); nj];
    let mut dj_trans = vec![Vec3::zeros(); nj];
    let mut d_mu = Vec::with_capacity(d_center.len());
    let mut d_rc = Vec::with_capacity(d_center.len());
    let mut d_w = Vec::with_capacity(d_center.len());
    let m = mirror_x();
    for i in 0..d_center.len() {
        let mu = posed.canonical[i];
        let g = d_center[i];
        let w = &weights[i].0;
        let mut dmu = Vec3::zeros();
        let mut dw = vec![0.0; nj];
        for (k, t) in posed.transforms.iter().enumerate() {
            dw[k] = g.dot(&t.apply(&mu));
            if w[k] != 0.0 {
                dmu += t.rotation.transpose() * g * w[k];
                dj_rot[k] += g * mu.transpose() * w[k];
                dj_trans[k] += g * w[k];
            }
        }
        let k = posed.lead_joint[i];
        let mut drc = posed.transforms[k].rotation.transpose() * d_rot[i];
        dj_rot[k] += d_rot[i] * posed.canonical_rot[i].transpose();
        if pose.side == Side::Left {
            dmu = m * dmu;
            drc = m * drc * m;
        }
        d_mu.push(dmu);
        d_rc.push(drc);
        d_w.push(dw);
    }
    HandBackward {
        center: d_mu,
        rotation_matrix: d_rc,
        weights: d_w,
        pose: forward_kinematics_backward(skel, pose, &posed.transforms, &dj_rot, &dj_trans),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, side: Side) -> HandPose {
        HandPose {
            theta: (0..POSE_DIM).map(|_| rng.random_range(-0.5..0.5)).collect(),
            rotation: exp_so3(&Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3)),
            translation: Vec3::new(0.1, -0.2, 0.5),
            side,
        }
    }

    #[test]
    fn rest_pose_is_identity() {
        let skel = Skeleton::standard();
        for t in forward_kinematics(&skel, &HandPose::rest(Side::Right)).unwrap() {
            assert!((t.rotation - Mat3::identity()).norm() < 1e-15);
            assert!(t.translation.norm() < 1e-15);
        }
    }

    #[test]
    fn root_rotation_propagates() {
        let skel = Skeleton::standard();
        let r = exp_so3(&Vec3::new(0.3, -0.2, 0.9));
        let pose = HandPose {
            rotation: r,
            ..HandPose::rest(Side::Right)
        };
        for t in forward_kinematics(&skel, &pose).unwrap() {
            assert!((t.rotation - r).norm() < 1e-12);
        }
    }

    #[test]
    fn mid_chain_rotation_pivots_about_joint() {
        let skel = Skeleton::standard();
        let mut pose = HandPose::rest(Side::Right);
        // index PIP (joint 5) flexed 90 degrees about x
        pose.theta[3 * 4] = std::f64::consts::FRAC_PI_2;
        let tf = forward_kinematics(&skel, &pose).unwrap();
        let pip = skel.rest[5];
        let dip = skel.rest[6];
        let moved = tf[6].apply(&dip);
        // two-link oracle: (0, l, 0) rotated 90 deg about x becomes (0, 0, l)
        let l = (dip - pip).norm();
        assert!((moved - (pip + Vec3::new(0.0, 0.0, l))).norm() < 1e-12);
        assert!((tf[5].apply(&pip) - pip).norm() < 1e-12);
        assert!((tf[4].apply(&skel.rest[4]) - skel.rest[4]).norm() < 1e-15);
    }

    #[test]
    fn fk_commutes_with_rigid_motion() {
        let skel = Skeleton::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pose = random_pose(&mut rng, Side::Right);
        let (r, t) = (pose.rotation, pose.translation);
        let posed = forward_kinematics(&skel, &pose).unwrap();
        pose.rotation = Mat3::identity();
        pose.translation = Vec3::zeros();
        let local = forward_kinematics(&skel, &pose).unwrap();
        for (a, b) in posed.iter().zip(&local) {
            assert!((a.rotation - r * b.rotation).norm() < 1e-9);
            assert!((a.translation - (r * b.translation + t)).norm() < 1e-9);
        }
    }

    #[test]
    fn lbs_examples() {
        let mu = Vec3::new(0.1, 0.2, 0.3);
        let id = JointTransform::IDENTITY;
        assert_eq!(lbs_pose(&mu, &[1.0, 0.0], &[id, id]).unwrap(), mu);
        let t1 = JointTransform {
            translation: Vec3::new(1.0, 0.0, 0.0),
            ..id
        };
        let t2 = JointTransform {
            translation: Vec3::new(0.0, 2.0, 0.0),
            ..id
        };
        assert_eq!(lbs_pose(&mu, &[0.0, 1.0], &[id, t1]).unwrap(), mu + t1.translation);
        let p = lbs_pose(&mu, &[0.5, 0.5], &[t1, t2]).unwrap();
        assert!((p - (mu + Vec3::new(0.5, 1.0, 0.0))).norm() < 1e-15);
        assert!(matches!(lbs_pose(&mu, &[0.5, 0.4], &[t1, t2]), Err(Error::InvalidWeights { .. })));
    }

    #[test]
    fn flip_examples() {
        let g = Gaussian3D {
            center: Vec3::new(1.0, 2.0, 3.0),
            scale: Vec3::new(0.1, 0.2, 0.3),
            rotation: Quat::from_axis_angle(&Vec3::new(0.0, 0.0, 0.7)),
            opacity: 0.4,
            color: Vec3::new(0.1, 0.5, 0.9),
        };
        let set = GaussianSet::new(Subject::RightHand, vec![g]);
        let f = flip_x(&set);
        assert_eq!(f.gaussians[0].center, Vec3::new(-1.0, 2.0, 3.0));
        let expected = Quat::from_axis_angle(&Vec3::new(0.0, 0.0, -0.7)).to_matrix();
        assert!((f.gaussians[0].rotation.to_matrix() - expected).norm() < 1e-12);
        let ff = flip_x(&f);
        assert_eq!(ff.gaussians[0].center, g.center);
        assert!((ff.gaussians[0].rotation.to_matrix() - g.rotation.to_matrix()).norm() < 1e-12);
        assert_eq!(ff.subject, Subject::RightHand);
    }

    fn small_hand(rng: &mut ChaCha8Rng) -> (Skeleton, HandTemplate, GaussianSet) {
        let skel = Skeleton::standard();
        let template = HandTemplate::sample(&skel, 60, 0.01, rng).unwrap();
        let gs = template
            .points
            .iter()
            .map(|p| Gaussian3D {
                rotation: Quat::new(0.9, 0.1, -0.2, 0.3).normalized(),
                ..Gaussian3D::isotropic(*p, 0.004, 0.8, Vec3::new(0.5, 0.4, 0.3))
            })
            .collect();
        (skel, template, GaussianSet::new(Subject::RightHand, gs))
    }

    #[test]
    fn pose_hand_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (skel, template, set) = small_hand(&mut rng);
        let rest = pose_hand(&set, &template.weights, &skel, &HandPose::rest(Side::Right)).unwrap();
        for (a, b) in rest.set.gaussians.iter().zip(&set.gaussians) {
            assert!((a.center - b.center).norm() < 1e-15);
        }
        let shifted = HandPose {
            translation: Vec3::new(0.0, 0.0, 1.0),
            ..HandPose::rest(Side::Right)
        };
        let s = pose_hand(&set, &template.weights, &skel, &shifted).unwrap();
        for (a, b) in s.set.gaussians.iter().zip(&set.gaussians) {
            assert!((a.center - b.center - Vec3::z()).norm() < 1e-12);
        }
        let left = pose_hand(&set, &template.weights, &skel, &HandPose::rest(Side::Left)).unwrap();
        let flipped = flip_x(&set);
        for (a, b) in left.set.gaussians.iter().zip(&flipped.gaussians) {
            assert!((a.center - b.center).norm() < 1e-15);
            assert!((a.rotation.to_matrix() - b.rotation.to_matrix()).norm() < 1e-12);
        }
    }

    #[test]
    fn left_pose_mirrors_right() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (skel, template, set) = small_hand(&mut rng);
        let right = random_pose(&mut rng, Side::Right);
        let r = pose_hand(&set, &template.weights, &skel, &right).unwrap();
        let l = pose_hand(&set, &template.weights, &skel, &right.mirrored()).unwrap();
        let m = mirror_x();
        for (a, b) in r.set.gaussians.iter().zip(&l.set.gaussians) {
            assert!((m * a.center - b.center).norm() < 1e-12);
            assert!((m * a.rotation.to_matrix() * m - b.rotation.to_matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn pseudo_lbs_examples() {
        let pts = vec![
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-3.0, 0.0, 0.0),
            Vec3::new(3.0, 0.0, 0.0),
            Vec3::new(-4.0, 1.0, 0.0),
            Vec3::new(4.0, 1.0, 0.0),
            Vec3::new(0.0, 9.0, 0.0),
        ];
        let a = SkinWeights(vec![1.0, 0.0, 0.0]);
        let b = SkinWeights(vec![0.0, 1.0, 0.0]);
        let c = SkinWeights(vec![0.0, 0.0, 1.0]);
        let weights = vec![a.clone(), b.clone(), a.clone(), b.clone(), a.clone(), b.clone(), c];
        let t = HandTemplate::new(pts, weights).unwrap();
        assert_eq!(pseudo_lbs(&Vec3::new(1.0, 0.0, 0.0), &t), b);
        let w = pseudo_lbs(&Vec3::zeros(), &t);
        assert!((w.0[0] - 0.5).abs() < 1e-15 && (w.0[1] - 0.5).abs() < 1e-15 && w.0[2] == 0.0);
        let w = pseudo_lbs(&Vec3::new(0.3, 0.7, -0.2), &t);
        assert!((w.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn template_weights_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let skel = Skeleton::standard();
        let t = HandTemplate::sample(&skel, 300, 0.01, &mut rng).unwrap();
        assert_eq!(t.points.len(), 300);
        // fingertip-side samples lean on finger joints, palm samples on the wrist
        let tip = pseudo_lbs(&skel.tips[2], &t);
        assert!(tip.argmax() == 9);
        assert!(pseudo_lbs(&Vec3::new(0.0, -0.01, 0.013), &t).argmax() == 0);
    }

    #[test]
    fn rig_table_lists_every_joint() {
        let s = Skeleton::standard().to_table();
        assert_eq!(s.lines().filter(|l| !l.starts_with('#')).count(), NUM_KEYPOINTS);
    }
}
