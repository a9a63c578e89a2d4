//! Assembles renderable Gaussians from a [`ParamStore`] and pulls render
//! gradients back into every parameter group.
//!
//! One canonical hand (right-handed) is shared by both hands; the object has
//! its own canonical set. Each frame poses the hand twice (left flipped) and
//! places the object rigidly, then renders the three sets merged in the order
//! left, right, object.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{HeadCache, HeadKind, HeadOutput, MlpHead, Stencil, TriplaneField};
use crate::geometry::{quat_matrix_backward, Gaussian3D, GaussianSet, Mat3, Quat, Subject, Vec3};
use crate::hand::{self, HandPose, HandTemplate, PosedHand, Side, SkinWeights, Skeleton, NUM_JOINTS, POSE_DIM};
use crate::params::{GradStore, ParamStore};
use crate::raster::RenderGradients;

/// Parameter group names.
pub mod names {
    pub const HAND_PLANES: &str = "hand.planes";
    pub const HAND_APPEARANCE: &str = "hand.appearance";
    pub const HAND_GEOMETRY: &str = "hand.geometry";
    pub const HAND_DEFORMATION: &str = "hand.deformation";
    pub const HAND_ANCHORS: &str = "hand.anchors";
    pub const OBJECT_PLANES: &str = "object.planes";
    pub const OBJECT_APPEARANCE: &str = "object.appearance";
    pub const OBJECT_GEOMETRY: &str = "object.geometry";
    pub const OBJECT_ANCHORS: &str = "object.anchors";
    pub const OBJECT_ROTATION: &str = "object.rotation";
    pub const OBJECT_TRANSLATION: &str = "object.translation";

    pub fn theta(side: crate::hand::Side) -> &'static str {
        match side {
            crate::hand::Side::Left => "left.theta",
            crate::hand::Side::Right => "right.theta",
        }
    }

    pub fn rotation(side: crate::hand::Side) -> &'static str {
        match side {
            crate::hand::Side::Left => "left.rotation",
            crate::hand::Side::Right => "right.rotation",
        }
    }

    pub fn translation(side: crate::hand::Side) -> &'static str {
        match side {
            crate::hand::Side::Left => "left.translation",
            crate::hand::Side::Right => "right.translation",
        }
    }

    /// Per-frame pose and placement groups of all three subjects.
    pub fn tracks() -> [&'static str; 8] {
        use crate::hand::Side::{Left, Right};
        [
            theta(Left),
            rotation(Left),
            translation(Left),
            theta(Right),
            rotation(Right),
            translation(Right),
            OBJECT_ROTATION,
            OBJECT_TRANSLATION,
        ]
    }

    /// Groups shared by the hand (canonical field, heads and anchors).
    pub fn is_hand_canonical(name: &str) -> bool {
        name.starts_with("hand.")
    }

    pub fn is_hand(name: &str) -> bool {
        name.starts_with("hand.") || name.starts_with("left.") || name.starts_with("right.")
    }

    pub fn is_object(name: &str) -> bool {
        name.starts_with("object.")
    }

    pub fn is_object_canonical(name: &str) -> bool {
        name.starts_with("object.") && name != OBJECT_ROTATION && name != OBJECT_TRANSLATION
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Hand,
    Object,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldLayout {
    pub resolution: usize,
    pub width: usize,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
}

impl FieldLayout {
    /// Box around `points` padded by `margin` of its extent on each side.
    pub fn around(points: &[Vec3], margin: f64, resolution: usize, width: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let pad = (hi - lo) * margin + Vec3::repeat(1e-3);
        Ok(FieldLayout {
            resolution,
            width,
            bbox_min: lo - pad,
            bbox_max: hi + pad,
        })
    }

    pub fn view<'a>(&self, data: &'a [f64]) -> TriplaneField<&'a [f64]> {
        TriplaneField {
            resolution: self.resolution,
            width: self.width,
            bbox_min: self.bbox_min,
            bbox_max: self.bbox_max,
            data,
        }
    }

    pub fn param_count(&self) -> usize {
        3 * self.resolution * self.resolution * self.width
    }

    pub fn diagonal(&self) -> f64 {
        (self.bbox_max - self.bbox_min).norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayout {
    pub kind: HeadKind,
    pub widths: Vec<usize>,
}

impl HeadLayout {
    pub fn new(kind: HeadKind, input: usize, hidden: &[usize]) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(kind.outputs());
        HeadLayout { kind, widths }
    }

    pub fn view<'a>(&self, params: &'a [f64]) -> MlpHead<&'a [f64]> {
        MlpHead {
            kind: self.kind,
            widths: self.widths.clone(),
            params,
        }
    }

    pub fn param_count(&self) -> usize {
        MlpHead::<Vec<f64>>::param_count(&self.widths)
    }
}

/// Everything needed to interpret a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub frames: usize,
    pub hand_field: FieldLayout,
    pub object_field: FieldLayout,
    pub hand_appearance: HeadLayout,
    pub hand_geometry: HeadLayout,
    pub hand_deformation: HeadLayout,
    pub object_appearance: HeadLayout,
    pub object_geometry: HeadLayout,
    pub skeleton: Skeleton,
    pub template: HandTemplate,
    /// Scale hinge thresholds, hand and object.
    pub scale_tau: [f64; 2],
}

impl ModelSpec {
    /// Checks that every group the model reads exists with the right size.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        use names::*;
        let expect = |name: &str, n: usize| -> Result<()> {
            let g = store.get(name)?;
            if g.values.len() != n {
                return Err(Error::Shape(format!("group `{name}` has {} values, expected {n}", g.values.len())));
            }
            Ok(())
        };
        expect(HAND_PLANES, self.hand_field.param_count())?;
        expect(OBJECT_PLANES, self.object_field.param_count())?;
        expect(HAND_APPEARANCE, self.hand_appearance.param_count())?;
        expect(HAND_GEOMETRY, self.hand_geometry.param_count())?;
        expect(HAND_DEFORMATION, self.hand_deformation.param_count())?;
        expect(OBJECT_APPEARANCE, self.object_appearance.param_count())?;
        expect(OBJECT_GEOMETRY, self.object_geometry.param_count())?;
        let t = self.frames;
        for side in [Side::Left, Side::Right] {
            expect(theta(side), t * POSE_DIM)?;
            expect(rotation(side), t * 9)?;
            expect(translation(side), t * 3)?;
        }
        expect(OBJECT_ROTATION, t * 9)?;
        expect(OBJECT_TRANSLATION, t * 3)?;
        if store.get(HAND_ANCHORS)?.values.len() % 3 != 0 || store.get(OBJECT_ANCHORS)?.values.len() % 3 != 0 {
            return Err(Error::Shape("anchor groups must hold 3-vectors".into()));
        }
        Ok(())
    }

    fn layouts(&self, part: Part) -> (&FieldLayout, Vec<(&'static str, &HeadLayout)>, &'static str, &'static str) {
        use names::*;
        match part {
            Part::Hand => (
                &self.hand_field,
                vec![
                    (HAND_APPEARANCE, &self.hand_appearance),
                    (HAND_GEOMETRY, &self.hand_geometry),
                    (HAND_DEFORMATION, &self.hand_deformation),
                ],
                HAND_PLANES,
                HAND_ANCHORS,
            ),
            Part::Object => (
                &self.object_field,
                vec![
                    (OBJECT_APPEARANCE, &self.object_appearance),
                    (OBJECT_GEOMETRY, &self.object_geometry),
                ],
                OBJECT_PLANES,
                OBJECT_ANCHORS,
            ),
        }
    }

    pub fn pose(&self, store: &ParamStore, t: usize, side: Side) -> Result<HandPose> {
        Ok(HandPose {
            theta: store.get(names::theta(side))?.row(t).to_vec(),
            rotation: store.get(names::rotation(side))?.rotation(t),
            translation: store.get(names::translation(side))?.vec3(t),
            side,
        })
    }

    pub fn object_pose(&self, store: &ParamStore, t: usize) -> Result<(Mat3, Vec3)> {
        Ok((
            store.get(names::OBJECT_ROTATION)?.rotation(t),
            store.get(names::OBJECT_TRANSLATION)?.vec3(t),
        ))
    }

    /// Evaluates the field and heads at every anchor of `part`.
    pub fn canonical(&self, store: &ParamStore, part: Part) -> Result<Canonical> {
        let (field_layout, heads, planes, anchors) = self.layouts(part);
        let field = field_layout.view(store.values(planes)?);
        let head_views: Vec<MlpHead<&[f64]>> = heads
            .iter()
            .map(|(name, l)| Ok(l.view(store.values(name)?)))
            .collect::<Result<_>>()?;
        let anchor_vals = store.values(anchors)?;
        let n = anchor_vals.len() / 3;
        let per: Vec<(Gaussian3D, Option<SkinWeights>, Stencil, Vec<HeadCache>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let a = Vec3::new(anchor_vals[3 * i], anchor_vals[3 * i + 1], anchor_vals[3 * i + 2]);
                let stencil = field.stencil(&a);
                let t = field.interp_stencil(&stencil);
                let mut outs: Vec<HeadOutput> = Vec::with_capacity(3);
                let mut caches = Vec::with_capacity(3);
                for h in &head_views {
                    let (o, c) = h.forward(&t)?;
                    outs.push(o);
                    caches.push(c);
                }
                let (app, geo) = (&outs[0], &outs[1]);
                let g = Gaussian3D {
                    center: a + geo.offset(),
                    scale: geo.scale(),
                    rotation: geo.rotation(),
                    opacity: app.opacity(),
                    color: app.color(),
                };
                let w = outs.get(2).map(|o| SkinWeights(o.0.clone()));
                Ok((g, w, stencil, caches))
            })
            .collect::<Result<_>>()?;
        let subject = match part {
            Part::Hand => Subject::RightHand,
            Part::Object => Subject::Object,
        };
        let mut out = Canonical {
            part,
            set: GaussianSet::new(subject, Vec::with_capacity(n)),
            weights: Vec::new(),
            anchors: Vec::with_capacity(n),
            stencils: Vec::with_capacity(n),
            caches: Vec::with_capacity(n),
        };
        for (i, (g, w, s, c)) in per.into_iter().enumerate() {
            out.anchors.push(Vec3::new(anchor_vals[3 * i], anchor_vals[3 * i + 1], anchor_vals[3 * i + 2]));
            out.set.gaussians.push(g);
            if let Some(w) = w {
                out.weights.push(w);
            }
            out.stencils.push(s);
            out.caches.push(c);
        }
        Ok(out)
    }

    /// Pulls canonical Gaussian gradients back through heads, field and
    /// anchors. Work is split into fixed chunks whose private buffers are
    /// merged in chunk order.
    pub fn canonical_backward(&self, store: &ParamStore, canon: &Canonical, grad: &CanonicalGrad, out: &mut GradStore) -> Result<()> {
        const CHUNK: usize = 64;
        let (field_layout, heads, planes, anchors) = self.layouts(canon.part);
        let field = field_layout.view(store.values(planes)?);
        let head_views: Vec<MlpHead<&[f64]>> = heads
            .iter()
            .map(|(name, l)| Ok(l.view(store.values(name)?)))
            .collect::<Result<_>>()?;
        let n = canon.set.len();
        let n_chunks = n.div_ceil(CHUNK);
        struct Partial {
            planes: Vec<f64>,
            heads: Vec<Vec<f64>>,
            anchors: Vec<Vec3>,
        }
        let partials: Vec<Partial> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut p = Partial {
                    planes: vec![0.0; field_layout.param_count()],
                    heads: heads.iter().map(|(_, l)| vec![0.0; l.param_count()]).collect(),
                    anchors: Vec::with_capacity(CHUNK),
                };
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let g = &canon.set.gaussians[i];
                    let q = g.rotation;
                    let dq = quat_matrix_backward(q, &grad.rotation_matrix[i]);
                    let mut d_geo = vec![0.0; 10];
                    d_geo[0..3].copy_from_slice(grad.center[i].as_slice());
                    d_geo[3..7].copy_from_slice(&dq);
                    d_geo[7..10].copy_from_slice(grad.scale[i].as_slice());
                    let dc = grad.color[i];
                    let d_app = [dc.x, dc.y, dc.z, grad.opacity[i]];
                    let mut d_t = head_views[0].backward(&canon.caches[i][0], &d_app, &mut p.heads[0]);
                    let dt_geo = head_views[1].backward(&canon.caches[i][1], &d_geo, &mut p.heads[1]);
                    for (a, b) in d_t.iter_mut().zip(&dt_geo) {
                        *a += b;
                    }
                    if head_views.len() > 2 {
                        let dt_def = head_views[2].backward(&canon.caches[i][2], &grad.weights[i], &mut p.heads[2]);
                        for (a, b) in d_t.iter_mut().zip(&dt_def) {
                            *a += b;
                        }
                    }
                    let d_anchor_field = field.interp_backward(&canon.stencils[i], &d_t, &mut p.planes);
                    p.anchors.push(grad.center[i] + d_anchor_field);
                }
                p
            })
            .collect();
        for (c, p) in partials.into_iter().enumerate() {
            for (a, b) in out.get_mut(planes).iter_mut().zip(&p.planes) {
                *a += b;
            }
            for ((name, _), hg) in heads.iter().zip(&p.heads) {
                for (a, b) in out.get_mut(name).iter_mut().zip(hg) {
                    *a += b;
                }
            }
            for (k, d) in p.anchors.iter().enumerate() {
                out.add_vec3(anchors, c * CHUNK + k, d);
            }
        }
        Ok(())
    }

    /// Poses both hands and the object for frame `t`.
    pub fn frame(&self, store: &ParamStore, hand: &Canonical, object: &Canonical, t: usize) -> Result<FrameScene> {
        let left_pose = self.pose(store, t, Side::Left)?;
        let right_pose = self.pose(store, t, Side::Right)?;
        let left = hand::pose_hand(&hand.set, &hand.weights, &self.skeleton, &left_pose)?;
        let right = hand::pose_hand(&hand.set, &hand.weights, &self.skeleton, &right_pose)?;
        let (rot, trans) = self.object_pose(store, t)?;
        let obj = place_object(&object.set, &rot, &trans);
        let merged = GaussianSet::merged(&[&left.set, &right.set, &obj]);
        Ok(FrameScene {
            frame: t,
            merged,
            left,
            right,
            left_pose,
            right_pose,
            object_rotation: rot,
            object_translation: trans,
            counts: [hand.set.len(), hand.set.len(), object.set.len()],
        })
    }

    /// Accumulates per-frame gradients: pose groups directly into `out`,
    /// canonical Gaussian gradients into `hand_grad` and `object_grad`.
    pub fn frame_backward(
        &self,
        hand: &Canonical,
        object: &Canonical,
        scene: &FrameScene,
        rg: &RenderGradients,
        hand_grad: &mut CanonicalGrad,
        object_grad: &mut CanonicalGrad,
        out: &mut GradStore,
    ) {
        let t = scene.frame;
        let [nl, nr, no] = scene.counts;
        let ranges = [0..nl, nl..nl + nr, nl + nr..nl + nr + no];
        for (side, posed, pose, range) in [
            (Side::Left, &scene.left, &scene.left_pose, ranges[0].clone()),
            (Side::Right, &scene.right, &scene.right_pose, ranges[1].clone()),
        ] {
            let back = hand::pose_hand_backward(
                posed,
                &hand.weights,
                &self.skeleton,
                pose,
                &rg.center[range.clone()],
                &rg.rotation_matrix[range.clone()],
            );
            for (i, gi) in range.enumerate() {
                hand_grad.center[i] += back.center[i];
                hand_grad.rotation_matrix[i] += back.rotation_matrix[i];
                hand_grad.scale[i] += rg.scale[gi];
                hand_grad.opacity[i] += rg.opacity[gi];
                hand_grad.color[i] += rg.color[gi];
                for (a, b) in hand_grad.weights[i].iter_mut().zip(&back.weights[i]) {
                    *a += b;
                }
            }
            let th = out.get_mut(names::theta(side));
            for (k, v) in back.pose.theta.iter().enumerate() {
                th[t * POSE_DIM + k] += v;
            }
            out.add_vec3(names::rotation(side), t, &back.pose.rotation);
            out.add_vec3(names::translation(side), t, &back.pose.translation);
        }
        let rot = scene.object_rotation;
        let mut d_rot = Mat3::zeros();
        let mut d_trans = Vec3::zeros();
        for (i, gi) in ranges[2].clone().enumerate() {
            let g = &object.set.gaussians[i];
            let dc = rg.center[gi];
            d_trans += dc;
            d_rot += dc * g.center.transpose();
            let rc = g.rotation.to_matrix();
            d_rot += rg.rotation_matrix[gi] * rc.transpose();
            object_grad.center[i] += rot.transpose() * dc;
            object_grad.rotation_matrix[i] += rot.transpose() * rg.rotation_matrix[gi];
            object_grad.scale[i] += rg.scale[gi];
            object_grad.opacity[i] += rg.opacity[gi];
            object_grad.color[i] += rg.color[gi];
        }
        out.add_vec3(names::OBJECT_ROTATION, t, &crate::geometry::rotation_increment_grad(&rot, &d_rot));
        out.add_vec3(names::OBJECT_TRANSLATION, t, &d_trans);
    }

    /// The 21 hand keypoints of one side at frame `t`.
    pub fn keypoints(&self, store: &ParamStore, t: usize, side: Side) -> Result<Vec<Vec3>> {
        let pose = self.pose(store, t, side)?;
        let tf = hand::forward_kinematics(&self.skeleton, &pose)?;
        Ok(hand::keypoints(&self.skeleton, side, &tf))
    }

    /// Canonical object centers placed at frame `t`.
    pub fn object_points(&self, store: &ParamStore, object: &Canonical, t: usize) -> Result<Vec<Vec3>> {
        let (r, tr) = self.object_pose(store, t)?;
        Ok(object.set.gaussians.iter().map(|g| r * g.center + tr).collect())
    }
}

pub fn place_object(set: &GaussianSet, rot: &Mat3, trans: &Vec3) -> GaussianSet {
    GaussianSet::new(
        Subject::Object,
        set.gaussians
            .iter()
            .map(|g| Gaussian3D {
                center: rot * g.center + trans,
                rotation: Quat::from_matrix(&(rot * g.rotation.to_matrix())),
                ..*g
            })
            .collect(),
    )
}

/// Canonical Gaussians of one part with the activations needed for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct Canonical {
    pub part: Part,
    pub set: GaussianSet,
    /// Skinning weights (hand only).
    pub weights: Vec<SkinWeights>,
    pub anchors: Vec<Vec3>,
    stencils: Vec<Stencil>,
    caches: Vec<Vec<HeadCache>>,
}

/// Gradients with respect to canonical Gaussian parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalGrad {
    pub center: Vec<Vec3>,
    pub rotation_matrix: Vec<Mat3>,
    pub scale: Vec<Vec3>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vec3>,
    pub weights: Vec<Vec<f64>>,
}

impl CanonicalGrad {
    pub fn zeros(canon: &Canonical) -> Self {
        let n = canon.set.len();
        let joints = if canon.part == Part::Hand { NUM_JOINTS } else { 0 };
        CanonicalGrad {
            center: vec![Vec3::zeros(); n],
            rotation_matrix: vec![Mat3::zeros(); n],
            scale: vec![Vec3::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
            weights: vec![vec![0.0; joints]; n],
        }
    }

    pub fn add_assign(&mut self, o: &CanonicalGrad) {
        for i in 0..self.center.len() {
            self.center[i] += o.center[i];
            self.rotation_matrix[i] += o.rotation_matrix[i];
            self.scale[i] += o.scale[i];
            self.opacity[i] += o.opacity[i];
            self.color[i] += o.color[i];
            for (a, b) in self.weights[i].iter_mut().zip(&o.weights[i]) {
                *a += b;
            }
        }
    }

    /// Adds render gradients of a set rendered in canonical space.
    pub fn add_render(&mut self, rg: &RenderGradients) {
        for i in 0..self.center.len() {
            self.center[i] += rg.center[i];
            self.rotation_matrix[i] += rg.rotation_matrix[i];
            self.scale[i] += rg.scale[i];
            self.opacity[i] += rg.opacity[i];
            self.color[i] += rg.color[i];
        }
    }
}

/// One posed frame.
#[derive(Debug, Clone)]
pub struct FrameScene {
    pub frame: usize,
    /// Left hand, right hand, object.
    pub merged: GaussianSet,
    pub left: PosedHand,
    pub right: PosedHand,
    pub left_pose: HandPose,
    pub right_pose: HandPose,
    pub object_rotation: Mat3,
    pub object_translation: Vec3,
    pub counts: [usize; 3],
}

impl FrameScene {
    /// Merged set with colors replaced by one-hot subject indicators
    /// (left = red, right = green, object = blue).
    pub fn indicator_set(&self) -> GaussianSet {
        let mut s = self.merged.clone();
        let [nl, nr, _] = self.counts;
        for (i, g) in s.gaussians.iter_mut().enumerate() {
            let k = if i < nl {
                0
            } else if i < nl + nr {
                1
            } else {
                2
            };
            let mut c = Vec3::zeros();
            c[k] = 1.0;
            g.color = c;
        }
        s
    }
}
