use handsplat::guidance::{sds_step, GuidanceSchedule, MockOracle};
use handsplat::model::{names, Part};
use handsplat::params::{GradStore, ParamStore};
use handsplat::raster;
use handsplat::synth::{self, SceneSpec, SyntheticSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> SyntheticSequence {
    synth::generate(&SceneSpec {
        frames: 2,
        width: 32,
        height: 32,
        object_points: 120,
        hand_points: 120,
        field_resolution: 16,
        field_width: 20,
        head_hidden: 40,
        ..SceneSpec::default()
    })
    .unwrap()
}

/// Ground truth with the object anchors pushed outwards.
fn inflated(seq: &SyntheticSequence) -> ParamStore {
    let mut store = seq.gt.clone();
    let g = store.get_mut(names::OBJECT_ANCHORS).unwrap();
    for v in &mut g.values {
        *v *= 1.15;
    }
    store
}

fn sds_grads(seq: &SyntheticSequence, store: &ParamStore, oracle: &MockOracle, schedule: &GuidanceSchedule, seed: u64) -> GradStore {
    let object = seq.model.canonical(store, Part::Object).unwrap();
    let mut out = GradStore::zeros_like(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sds_step(&seq.model, store, &object, oracle, schedule, 32, &mut rng, &mut out).unwrap();
    out
}

fn flat(g: &GradStore) -> Vec<f64> {
    g.groups.values().flatten().copied().collect()
}

#[test]
fn matching_target_gives_zero_gradient() {
    let seq = tiny();
    let current = inflated(&seq);
    let reference = seq.model.canonical(&current, Part::Object).unwrap().set;
    let oracle = MockOracle::new(reference, 0.0);
    let s = GuidanceSchedule::linear(20, 980, 1.0, 2).unwrap();
    let g = sds_grads(&seq, &current, &oracle, &s, 1);
    assert!(flat(&g).iter().all(|v| *v == 0.0));
}

#[test]
fn doubling_the_weight_doubles_the_gradient_exactly() {
    let seq = tiny();
    let current = inflated(&seq);
    let oracle = MockOracle::new(seq.reference_object.clone(), 0.0);
    let one = sds_grads(&seq, &current, &oracle, &GuidanceSchedule::linear(20, 980, 1.0, 1).unwrap(), 5);
    let two = sds_grads(&seq, &current, &oracle, &GuidanceSchedule::linear(20, 980, 2.0, 1).unwrap(), 5);
    let (a, b) = (flat(&one), flat(&two));
    assert!(a.iter().any(|v| *v != 0.0));
    assert!(a.iter().zip(&b).all(|(x, y)| 2.0 * x == *y));
}

#[test]
fn small_step_along_the_gradient_reduces_the_residual() {
    let seq = tiny();
    let current = inflated(&seq);
    let oracle = MockOracle::new(seq.reference_object.clone(), 0.0);
    let schedule = GuidanceSchedule::linear(20, 980, 1.0, 1).unwrap();
    for seed in 0..5 {
        let object = seq.model.canonical(&current, Part::Object).unwrap();
        let mut grads = GradStore::zeros_like(&current);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = sds_step(&seq.model, &current, &object, &oracle, &schedule, 32, &mut rng, &mut grads).unwrap();
        let cam = &samples[0].camera;
        let residual = |store: &ParamStore| {
            let set = seq.model.canonical(store, Part::Object).unwrap().set;
            let img = raster::render(&set, cam).unwrap().image;
            let target = raster::render(&oracle.reference, cam).unwrap().image;
            img.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let g = grads.get(names::OBJECT_ANCHORS).to_vec();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0);
        let mut stepped = current.clone();
        let anchors = stepped.get_mut(names::OBJECT_ANCHORS).unwrap();
        for (v, d) in anchors.values.iter_mut().zip(&g) {
            *v -= 1e-4 * d / norm;
        }
        assert!(residual(&stepped) < residual(&current), "seed {seed}");
    }
}

#[test]
fn averaging_samples_reduces_variance() {
    let seq = tiny();
    let current = inflated(&seq);
    let oracle = MockOracle::new(seq.reference_object.clone(), 0.0);
    let variance = |n: usize| {
        let s = GuidanceSchedule::linear(20, 980, 1.0, n).unwrap();
        let runs: Vec<Vec<f64>> = (0..40).map(|k| flat(&sds_grads(&seq, &current, &oracle, &s, 1000 + k))).collect();
        let dim = runs[0].len();
        let mean: Vec<f64> = (0..dim).map(|i| runs.iter().map(|r| r[i]).sum::<f64>() / runs.len() as f64).collect();
        runs.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>()).sum::<f64>()
            / (runs.len() - 1) as f64
    };
    let v1 = variance(1);
    for n in [4usize, 16] {
        let ratio = variance(n) / v1;
        let want = 1.0 / n as f64;
        assert!(ratio > 0.5 * want && ratio < 2.0 * want, "N = {n}: ratio {ratio}, expected about {want}");
    }
}

#[test]
fn translation_noise_has_the_requested_spread() {
    let seq = tiny();
    let sigma = 0.01;
    let spec = SceneSpec { pose_noise: 0.0, translation_noise: sigma, ..seq.spec.clone() };
    let tracks = [
        names::translation(handsplat::hand::Side::Left),
        names::translation(handsplat::hand::Side::Right),
        names::OBJECT_TRANSLATION,
    ];
    let mut offsets = Vec::new();
    let mut seed = 0;
    while offsets.len() < 1000 {
        let p = synth::perturb(&seq.gt, &spec, &seq.model, seed).unwrap();
        for name in tracks {
            let (a, b) = (&seq.gt.get(name).unwrap().values, &p.get(name).unwrap().values);
            offsets.extend(a.iter().zip(b).map(|(x, y)| y - x));
        }
        seed += 1;
    }
    let mean = offsets.iter().sum::<f64>() / offsets.len() as f64;
    let std = (offsets.iter().map(|o| (o - mean) * (o - mean)).sum::<f64>() / (offsets.len() - 1) as f64).sqrt();
    assert!((std - sigma).abs() < 0.2 * sigma, "std {std}");
}
