//! Adam and the two fitting stages.
//!
//! Stage one alternates a hand pass (image terms under the hand masks,
//! skinning and smoothness terms; only hand groups move) and an object pass
//! (image terms under the object mask, optional guidance; only object groups
//! move). Stage two freezes everything but the hand translations and refines
//! them against the whole image, the outlier mask and the contact term.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::guidance::{self, GuidanceOracle, GuidanceSchedule};
use crate::hand::{self, Side, POSE_DIM};
use crate::image::Image;
use crate::losses::{self, FrameObservation, ImageTerms, LossWeights};
use crate::model::{names, Canonical, CanonicalGrad, ModelSpec, Part};
use crate::params::{GradStore, GroupKind, ParamStore};
use crate::raster;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub centers: f64,
    pub planes: f64,
    pub heads: f64,
    /// Articulation.
    pub pose: f64,
    /// Global orientation of hands and object.
    pub rotation: f64,
    pub translation: f64,
}

/// Nominal rates stored with freshly created groups.
pub const DEFAULT_LR: LearningRates = LearningRates {
    centers: 1.6e-4,
    planes: 1e-3,
    heads: 1e-3,
    pose: 1e-4,
    rotation: 1e-4,
    translation: 1e-4,
};

impl LearningRates {
    pub fn for_group(&self, name: &str) -> f64 {
        if name.ends_with(".planes") {
            self.planes
        } else if name.ends_with(".anchors") {
            self.centers
        } else if name.ends_with(".translation") {
            self.translation
        } else if name.ends_with(".rotation") {
            self.rotation
        } else if name.ends_with(".theta") {
            self.pose
        } else {
            self.heads
        }
    }

    fn validate(&self) -> Result<()> {
        for v in [self.centers, self.planes, self.heads, self.pose, self.rotation, self.translation] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config("learning rates must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with per-group moments. Elements whose gradient is exactly zero are
/// not moved, but their moments still decay.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    state: BTreeMap<String, (Vec<f64>, Vec<f64>, u64)>,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    /// Updates every group accepted by `active` using `lr(name)`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradStore,
        lr: impl Fn(&str) -> f64,
        active: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, g) in &grads.groups {
            if !active(name) {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGradient { group: name.clone() });
            }
        }
        for (name, group) in store.iter_mut() {
            if !active(name) {
                continue;
            }
            let Some(g) = grads.groups.get(name) else { continue };
            if g.len() != group.grad_len() {
                return Err(Error::Shape(format!("gradient for `{name}` has {} entries, expected {}", g.len(), group.grad_len())));
            }
            let (m, v, t) = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()], 0));
            *t += 1;
            let bc1 = 1.0 - BETA1.powi(*t as i32);
            let bc2 = 1.0 - BETA2.powi(*t as i32);
            let rate = lr(name);
            let mut step = vec![0.0; g.len()];
            for i in 0..g.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                if g[i] != 0.0 {
                    step[i] = -rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                }
            }
            if group.kind == GroupKind::Rotation || step.iter().any(|s| *s != 0.0) {
                group.apply_step(&step);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub iterations: usize,
    /// Frames per iteration, drawn from shuffled epochs.
    pub batch: usize,
    /// Linear learning-rate warmup length.
    pub warmup: usize,
    /// Loss gates: run hand passes, object passes.
    pub hand: bool,
    pub object: bool,
    /// Temporal smoothness on the hand tracks.
    pub smoothness: bool,
    /// Guidance every `sds_every`-th object pass; 0 disables it.
    pub sds_every: usize,
    pub sds_size: usize,
    pub lr: LearningRates,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl StageConfig {
    pub fn single_subject() -> Self {
        StageConfig {
            iterations: 300,
            batch: 30,
            warmup: 100,
            hand: true,
            object: true,
            smoothness: true,
            sds_every: 5,
            sds_size: 64,
            lr: LearningRates {
                centers: 1.6e-4,
                planes: 1e-3,
                heads: 1e-3,
                pose: 2e-3,
                rotation: 1e-4,
                translation: 1e-3,
            },
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            divergence_factor: 10.0,
            divergence_patience: 100,
        }
    }

    pub fn interacting() -> Self {
        StageConfig {
            iterations: 150,
            batch: 6,
            sds_every: 0,
            lr: LearningRates {
                translation: 1e-4,
                ..DEFAULT_LR
            },
            ..Self::single_subject()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.sds_every > 0 && self.sds_size < 16 {
            return Err(Error::Config("guidance renders need at least 16 pixels".into()));
        }
        self.lr.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Hand,
    Object,
    Interacting,
}

impl Pass {
    pub fn as_str(self) -> &'static str {
        match self {
            Pass::Hand => "hand",
            Pass::Object => "object",
            Pass::Interacting => "interacting",
        }
    }

    /// Groups updated by this pass.
    pub fn updates(self, name: &str) -> bool {
        match self {
            Pass::Hand => names::is_hand(name),
            Pass::Object => names::is_object(name),
            Pass::Interacting => name == names::translation(Side::Left) || name == names::translation(Side::Right),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub pass: Pass,
    pub loss: f64,
    pub image: ImageTerms,
    pub color: f64,
    pub scale: f64,
    pub smoothness: f64,
    pub lbs: f64,
    pub contact: f64,
    pub sds_residual: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub store: ParamStore,
    pub history: Vec<IterationRecord>,
}

/// Observations and model shared by both stages.
#[derive(Clone, Copy)]
pub struct FitData<'a> {
    pub model: &'a ModelSpec,
    pub observations: &'a [FrameObservation],
}

pub struct Guidance<'a> {
    pub oracle: &'a dyn GuidanceOracle,
    pub schedule: GuidanceSchedule,
}

fn union(a: &Image, b: &Image) -> Image {
    Image {
        data: a.data.iter().zip(&b.data).map(|(x, y)| x.max(*y)).collect(),
        ..a.clone()
    }
}

fn pose_grads(store: &ParamStore) -> GradStore {
    let mut g = GradStore::default();
    for name in store.names() {
        if name.ends_with(".theta") || name.ends_with(".rotation") || name.ends_with(".translation") {
            g.groups.insert(name.to_string(), vec![0.0; store.get(name).map(|x| x.grad_len()).unwrap_or(0)]);
        }
    }
    g
}

struct FrameResult {
    terms: ImageTerms,
    loss: f64,
    hand: CanonicalGrad,
    object: CanonicalGrad,
    poses: GradStore,
}

fn frame_gradients(
    data: FitData,
    store: &ParamStore,
    hand: &Canonical,
    object: &Canonical,
    t: usize,
    subject: &Image,
    w: &LossWeights,
) -> Result<FrameResult> {
    let obs = &data.observations[t];
    let scene = data.model.frame(store, hand, object, t)?;
    let pred = raster::render(&scene.merged, &obs.camera)?.image;
    let (terms, d_img) = losses::image_loss(&pred, &obs.image, subject, &obs.combined, w)?;
    let rg = raster::render_backward(&scene.merged, &obs.camera, &d_img)?;
    let mut out = FrameResult {
        loss: terms.total(w),
        terms,
        hand: CanonicalGrad::zeros(hand),
        object: CanonicalGrad::zeros(object),
        poses: pose_grads(store),
    };
    data.model.frame_backward(hand, object, &scene, &rg, &mut out.hand, &mut out.object, &mut out.poses);
    Ok(out)
}

/// Shuffled epochs over frame indices.
struct FrameSampler {
    order: Vec<usize>,
    pos: usize,
}

impl FrameSampler {
    fn new(n: usize) -> Self {
        FrameSampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let f = self.order[self.pos];
            self.pos += 1;
            if !out.contains(&f) {
                out.push(f);
            }
        }
        out.sort_unstable();
        out
    }
}

struct DivergenceGuard {
    factor: f64,
    patience: usize,
    initial: BTreeMap<&'static str, f64>,
    streak: usize,
    good: Option<ParamStore>,
}

impl DivergenceGuard {
    fn check(&mut self, pass: Pass, iteration: usize, loss: f64, store: &ParamStore) -> Result<()> {
        let initial = *self.initial.entry(pass.as_str()).or_insert(loss);
        if loss > self.factor * initial {
            self.streak += 1;
            if self.streak >= self.patience {
                return Err(Error::Diverged {
                    iteration,
                    loss,
                    initial,
                    checkpoint: Box::new(self.good.take().unwrap_or_else(|| store.clone())),
                });
            }
        } else {
            self.streak = 0;
            self.good = Some(store.clone());
        }
        Ok(())
    }
}

fn warmup_factor(config: &StageConfig, it: usize) -> f64 {
    if config.warmup == 0 {
        1.0
    } else {
        ((it + 1) as f64 / config.warmup as f64).min(1.0)
    }
}

fn maybe_checkpoint(config: &StageConfig, stage: &str, it: usize, store: &ParamStore) -> Result<()> {
    if let Some(dir) = &config.checkpoint_dir {
        if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 {
            store.save(&dir.join(format!("{stage}_{:06}.ckpt", it + 1)))?;
        }
    }
    Ok(())
}

fn check_data(data: FitData, store: &ParamStore) -> Result<()> {
    data.model.check_store(store)?;
    if data.observations.len() != data.model.frames {
        return Err(Error::Shape(format!(
            "{} observations for {} frames",
            data.observations.len(),
            data.model.frames
        )));
    }
    Ok(())
}

/// Single-subject optimization of fields, heads, anchors and per-frame
/// poses.
pub fn stage_single_subject(
    data: FitData,
    init: ParamStore,
    config: &StageConfig,
    w: &LossWeights,
    guidance: Option<&Guidance>,
) -> Result<StageResult> {
    config.validate()?;
    w.validate()?;
    check_data(data, &init)?;
    if !config.hand && !config.object {
        return Err(Error::Config("both passes are disabled".into()));
    }
    let model = data.model;
    let mut store = init;
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sampler = FrameSampler::new(model.frames);
    let mut guard = DivergenceGuard {
        factor: config.divergence_factor,
        patience: config.divergence_patience,
        initial: BTreeMap::new(),
        streak: 0,
        good: None,
    };
    let mut history = Vec::with_capacity(config.iterations);
    let mut object_passes = 0usize;
    let subject_masks: Vec<[Image; 2]> = data
        .observations
        .iter()
        .map(|o| [union(&o.masks[0], &o.masks[1]), o.masks[2].clone()])
        .collect();

    for it in 0..config.iterations {
        let pass = match (config.hand, config.object) {
            (true, true) if it % 2 == 0 => Pass::Hand,
            (true, true) => Pass::Object,
            (true, false) => Pass::Hand,
            _ => Pass::Object,
        };
        let frames = sampler.next_batch(config.batch, &mut rng);
        let inv_b = 1.0 / frames.len() as f64;
        let hand = model.canonical(&store, Part::Hand)?;
        let object = model.canonical(&store, Part::Object)?;
        let mask_idx = if pass == Pass::Hand { 0 } else { 1 };
        let per: Vec<FrameResult> = frames
            .par_iter()
            .map(|&t| frame_gradients(data, &store, &hand, &object, t, &subject_masks[t][mask_idx], w))
            .collect::<Result<_>>()?;

        let mut grads = GradStore::zeros_like(&store);
        let mut rec = IterationRecord {
            iteration: it,
            pass,
            loss: 0.0,
            image: ImageTerms::default(),
            color: 0.0,
            scale: 0.0,
            smoothness: 0.0,
            lbs: 0.0,
            contact: 0.0,
            sds_residual: None,
        };
        let canon = if pass == Pass::Hand { &hand } else { &object };
        let mut cg = CanonicalGrad::zeros(canon);
        for r in &per {
            rec.loss += r.loss * inv_b;
            rec.image.l1 += r.terms.l1 * inv_b;
            rec.image.ssim += r.terms.ssim * inv_b;
            rec.image.perceptual += r.terms.perceptual * inv_b;
            rec.image.mask += r.terms.mask * inv_b;
            cg.add_assign(if pass == Pass::Hand { &r.hand } else { &r.object });
            grads.add_assign(&r.poses);
        }
        for v in cg.center.iter_mut().chain(cg.scale.iter_mut()).chain(cg.color.iter_mut()) {
            *v *= inv_b;
        }
        for m in cg.rotation_matrix.iter_mut() {
            *m *= inv_b;
        }
        for o in cg.opacity.iter_mut() {
            *o *= inv_b;
        }
        for wv in cg.weights.iter_mut() {
            wv.iter_mut().for_each(|x| *x *= inv_b);
        }
        grads.scale(inv_b);

        // color and scale regularizers over the active subject's Gaussians
        let tau = model.scale_tau[if pass == Pass::Hand { 0 } else { 1 }];
        let centers: Vec<_> = canon.set.gaussians.iter().map(|g| g.center).collect();
        let colors: Vec<_> = canon.set.gaussians.iter().map(|g| g.color).collect();
        let scales: Vec<_> = canon.set.gaussians.iter().map(|g| g.scale).collect();
        let graph = losses::knn_graph(&centers, losses::COLOR_NEIGHBORS);
        let reg = losses::color_scale_regularizers(&colors, &scales, &graph, tau);
        rec.color = reg.color;
        rec.scale = reg.scale;
        rec.loss += w.color * reg.color + w.scale * reg.scale;
        for i in 0..cg.center.len() {
            cg.color[i] += w.color * reg.d_color[i];
            cg.scale[i] += w.scale * reg.d_scale[i];
        }

        if pass == Pass::Hand {
            let pseudo: Vec<Vec<f64>> = centers.par_iter().map(|c| hand::pseudo_lbs(c, &model.template).0).collect();
            let weights: Vec<Vec<f64>> = hand.weights.iter().map(|w| w.0.clone()).collect();
            let (lbs, d_w) = losses::lbs_term(&weights, &pseudo, w.lbs);
            rec.lbs = lbs;
            rec.loss += lbs;
            for (a, b) in cg.weights.iter_mut().zip(&d_w) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            if config.smoothness {
                let mut pairs = 0usize;
                let mut smt = GradStore::default();
                for name in [
                    names::theta(Side::Left),
                    names::theta(Side::Right),
                    names::translation(Side::Left),
                    names::translation(Side::Right),
                ] {
                    smt.groups.insert(name.to_string(), vec![0.0; store.get(name)?.values.len()]);
                }
                for &t in frames.iter().filter(|t| **t > 0) {
                    pairs += 1;
                    for (name, width) in [
                        (names::theta(Side::Left), POSE_DIM),
                        (names::theta(Side::Right), POSE_DIM),
                        (names::translation(Side::Left), 3),
                        (names::translation(Side::Right), 3),
                    ] {
                        let vals = store.values(name)?;
                        let (v, dp, dc) = losses::smoothness(&vals[(t - 1) * width..t * width], &vals[t * width..(t + 1) * width]);
                        rec.smoothness += v * inv_b;
                        let g = smt.get_mut(name);
                        for k in 0..width {
                            g[(t - 1) * width + k] += dp[k] * inv_b;
                            g[t * width + k] += dc[k] * inv_b;
                        }
                    }
                }
                if pairs > 0 {
                    rec.loss += rec.smoothness;
                    grads.add_assign(&smt);
                }
            }
        }
        model.canonical_backward(&store, canon, &cg, &mut grads)?;

        if pass == Pass::Object {
            if let Some(g) = guidance {
                if config.sds_every > 0 && object_passes % config.sds_every == 0 {
                    let mut sds = GradStore::zeros_like(&store);
                    match guidance::sds_step(model, &store, &object, g.oracle, &g.schedule, config.sds_size, &mut rng, &mut sds) {
                        Ok(samples) => {
                            rec.sds_residual = Some(samples.iter().map(|s| s.residual).sum::<f64>() / samples.len() as f64);
                            grads.add_assign(&sds);
                        }
                        Err(Error::GuidanceUnavailable(msg)) => log::warn!("iteration {it}: guidance skipped: {msg}"),
                        Err(e) => return Err(e),
                    }
                }
            }
            object_passes += 1;
        }

        grads.retain(|n| pass.updates(n));
        if let Some(bad) = grads.first_non_finite() {
            return Err(Error::NanGradient { group: bad.to_string() });
        }
        guard.check(pass, it, rec.loss, &store)?;
        let f = warmup_factor(config, it);
        adam.step(&mut store, &grads, |n| f * config.lr.for_group(n), |n| pass.updates(n))?;
        if it % 50 == 0 || it + 1 == config.iterations {
            log::info!(
                "stage1 it {it} {} loss {:.6} l1 {:.5} ssim {:.5} edge {:.5} mask {:.6} smt {:.6} lbs {:.3e}",
                pass.as_str(),
                rec.loss,
                rec.image.l1,
                rec.image.ssim,
                rec.image.perceptual,
                rec.image.mask,
                rec.smoothness,
                rec.lbs
            );
        }
        history.push(rec);
        maybe_checkpoint(config, "stage1", it, &store)?;
    }
    Ok(StageResult { store, history })
}

/// Interacting-subjects refinement: only the hand translations move.
pub fn stage_interacting(data: FitData, init: ParamStore, config: &StageConfig, w: &LossWeights) -> Result<StageResult> {
    config.validate()?;
    w.validate()?;
    check_data(data, &init)?;
    let model = data.model;
    let mut store = init;
    // canonical Gaussians are frozen in this stage
    let hand = model.canonical(&store, Part::Hand)?;
    let object = model.canonical(&store, Part::Object)?;
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sampler = FrameSampler::new(model.frames);
    let mut guard = DivergenceGuard {
        factor: config.divergence_factor,
        patience: config.divergence_patience,
        initial: BTreeMap::new(),
        streak: 0,
        good: None,
    };
    let pass = Pass::Interacting;
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let frames = sampler.next_batch(config.batch, &mut rng);
        let inv_b = 1.0 / frames.len() as f64;
        let per: Vec<FrameResult> = frames
            .par_iter()
            .map(|&t| frame_gradients(data, &store, &hand, &object, t, &data.observations[t].combined, w))
            .collect::<Result<_>>()?;
        let mut grads = pose_grads(&store);
        let mut rec = IterationRecord {
            iteration: it,
            pass,
            loss: 0.0,
            image: ImageTerms::default(),
            color: 0.0,
            scale: 0.0,
            smoothness: 0.0,
            lbs: 0.0,
            contact: 0.0,
            sds_residual: None,
        };
        for (r, &t) in per.iter().zip(&frames) {
            rec.loss += r.loss * inv_b;
            rec.image.l1 += r.terms.l1 * inv_b;
            rec.image.ssim += r.terms.ssim * inv_b;
            rec.image.perceptual += r.terms.perceptual * inv_b;
            rec.image.mask += r.terms.mask * inv_b;
            grads.add_assign(&r.poses);
            let (_, gamma_o) = model.object_pose(&store, t)?;
            let hands = [
                store.get(names::translation(Side::Left))?.vec3(t),
                store.get(names::translation(Side::Right))?.vec3(t),
            ];
            let c = losses::contact_loss(&gamma_o, &hands, w.contact);
            rec.contact += c.value * inv_b;
            grads.add_vec3(names::translation(Side::Left), t, &(c.d_hands[0]));
            grads.add_vec3(names::translation(Side::Right), t, &(c.d_hands[1]));
        }
        // image gradients were summed per frame; contact gradients too
        grads.scale(inv_b);
        rec.loss += rec.contact;
        grads.retain(|n| pass.updates(n));
        if let Some(bad) = grads.first_non_finite() {
            return Err(Error::NanGradient { group: bad.to_string() });
        }
        guard.check(pass, it, rec.loss, &store)?;
        let f = warmup_factor(config, it);
        adam.step(&mut store, &grads, |n| f * config.lr.for_group(n), |n| pass.updates(n))?;
        if it % 50 == 0 || it + 1 == config.iterations {
            log::info!("stage2 it {it} loss {:.6} contact {:.5}", rec.loss, rec.contact);
        }
        history.push(rec);
        maybe_checkpoint(config, "stage2", it, &store)?;
    }
    Ok(StageResult { store, history })
}

/// Moving average of the loss history per pass.
pub fn smoothed_loss(history: &[IterationRecord], pass: Pass, window: usize) -> Vec<f64> {
    let vals: Vec<f64> = history.iter().filter(|r| r.pass == pass).map(|r| r.loss).collect();
    if vals.len() < window || window == 0 {
        return vals;
    }
    vals.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// Run manifest: config hash, seed, iteration count and per-iteration loss
/// values.
pub fn manifest(config_hash: &str, seed: u64, stages: &[(&str, &StageResult)]) -> String {
    let mut s = String::new();
    writeln!(s, "config_sha256 = {config_hash}").unwrap();
    writeln!(s, "seed = {seed}").unwrap();
    for (name, r) in stages {
        writeln!(s, "{name}.iterations = {}", r.history.len()).unwrap();
        if let Some(last) = r.history.last() {
            writeln!(s, "{name}.final_loss = {:.12e}", last.loss).unwrap();
        }
        for h in &r.history {
            writeln!(
                s,
                "{name}.loss.{:06} = {} {:.12e} l1={:.9e} ssim={:.9e} edge={:.9e} mask={:.9e} color={:.9e} scale={:.9e} smt={:.9e} lbs={:.9e} contact={:.9e}",
                h.iteration,
                h.pass.as_str(),
                h.loss,
                h.image.l1,
                h.image.ssim,
                h.image.perceptual,
                h.image.mask,
                h.color,
                h.scale,
                h.smoothness,
                h.lbs,
                h.contact
            )
            .unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    fn scalar(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Group::euclidean(vec![1], vec![v], 0.1).unwrap());
        s
    }

    fn grad(g: f64) -> GradStore {
        let mut gs = GradStore::default();
        gs.groups.insert("x".into(), vec![g]);
        gs
    }

    #[test]
    fn first_step_is_unit_direction() {
        let mut s = scalar(0.0);
        let mut adam = Adam::new();
        adam.step(&mut s, &grad(1.0), |_| 0.1, |_| true).unwrap();
        // m_hat = 1, v_hat = 1 -> -0.1 / (1 + eps)
        let want = -0.1 / (1.0 + ADAM_EPS);
        assert!((s.values("x").unwrap()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = scalar(1.0);
        let mut adam = Adam::new();
        adam.step(&mut s, &grad(1.0), |_| 0.1, |_| true).unwrap();
        let before = s.values("x").unwrap()[0];
        adam.step(&mut s, &grad(0.0), |_| 0.1, |_| true).unwrap();
        assert_eq!(s.values("x").unwrap()[0], before);
        let (m, v, _) = &adam.state["x"];
        assert!((m[0] - 0.1 * 0.9).abs() < 1e-15);
        assert!((v[0] - 0.001 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = scalar(0.0);
        let mut adam = Adam::new();
        for _ in 0..500 {
            let x = s.values("x").unwrap()[0];
            adam.step(&mut s, &grad(2.0 * (x - 3.0)), |_| 0.1, |_| true).unwrap();
        }
        assert!((s.values("x").unwrap()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn nan_gradient_names_group() {
        let mut s = scalar(0.0);
        let err = Adam::new().step(&mut s, &grad(f64::NAN), |_| 0.1, |_| true).unwrap_err();
        assert!(matches!(err, Error::NanGradient { group } if group == "x"));
    }

    #[test]
    fn sampler_covers_epochs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = FrameSampler::new(7);
        let mut seen = vec![0; 7];
        for _ in 0..7 {
            for f in s.next_batch(3, &mut rng) {
                seen[f] += 1;
            }
        }
        assert!(seen.iter().all(|c| *c >= 2));
    }
}
