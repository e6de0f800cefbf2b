//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs everything by default; pass criterion numbers to run a subset, e.g.
//! `cargo test --test acceptance -- 1 4 9`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svcn_core::adversarial::{loss_adv, loss_d, DiscriminatorSet};
use svcn_core::data::{virtual_frame, FrameSpec};
use svcn_core::grid::{coarsen_coords, dense_upsample_coords, set_union};
use svcn_core::io::{read_pcxl, write_pcxl};
use svcn_core::lidar::{
    angular_distance, augment_pattern, occlusion_filter, resample, theta_bin, theta_range, to_polar, KeepFraction, OcclusionConfig, PolarPattern,
    DEFAULT_CUTOFF_DEG,
};
use svcn_core::metrics::{chamfer, iou_sets, voxel_iou};
use svcn_core::pipeline::{run_completion, run_demo, AdaptationExperiment, CompletionExperiment};
use svcn_core::scene::{gen_scene, SENSOR_HEIGHT};
use svcn_core::segmenter::{AlignMode, SegConfig};
use svcn_core::svcn::{GenerationNet, Mode, RefinementNet};
use svcn_core::tensor::gradcheck::{check_inputs, check_params, GradReport};
use svcn_core::tensor::{Checkpoint, NetworkParams, RngState, Tape, Var, ZERO_ROW};
use svcn_core::trainer::{loss_gen, loss_refine, refine_inputs, refined_set, AdvTerm, Balance, RefineSample, TrainConfig};
use svcn_core::unet::LEVELS;
use svcn_core::{CoordSet, KernelMap, Matrix, PointCloud, SparseGrid, VoxelCoord, UNLABELED};

use common::{mutate, small_samples, small_scene, tiny_levels, tiny_svcn};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 9] = [
    (1, "gradient checks", gradients),
    (2, "structural invariants", structure),
    (3, "confidence-aware identity", identity),
    (4, "metric oracles", metric_oracles),
    (5, "virtual lidar", virtual_lidar),
    (6, "toy completion trend", completion_trend),
    (7, "toy adaptation trend", adaptation_trend),
    (8, "end-to-end determinism", determinism),
    (9, "format round-trips", format_roundtrips),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(run).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} {verdict}: {name}: {} [{:.1}s]", result.detail, start.elapsed().as_secs_f64());
        if !result.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1. Gradients

const GRAD_TOL: f64 = 1e-4;
const INSTANCES: usize = 5;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Values bounded away from zero, so ReLU kinks and max-pool ties stay out of the finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(0.05..1.0) * if rng.gen() { 1.0 } else { -1.0 }).collect())
}

fn random_coords(rng: &mut ChaCha8Rng, n: usize, extent: i32) -> CoordSet {
    let mut s = CoordSet::new();
    while s.len() < n {
        s.insert(VoxelCoord::new(rng.gen_range(0..extent), rng.gen_range(0..extent), rng.gen_range(0..extent)));
    }
    s
}

/// A fixed random readout turning an `rows × cols` output into a scalar loss.
struct Head {
    w: Matrix,
    targets: Rc<[f64]>,
}

impl Head {
    fn new(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Self {
        Self { w: random(rng, cols, 1), targets: (0..rows).map(|_| f64::from(rng.gen_range(0..2u8))).collect() }
    }

    fn apply(&self, t: &mut Tape<'_>, y: Var) -> svcn_core::Result<Var> {
        let w = t.constant(self.w.clone());
        let col = t.linear(y, w, None)?;
        t.bce_with_logits(col, Rc::clone(&self.targets), None)
    }
}

#[derive(Default)]
struct GradTally {
    worst: Vec<(&'static str, f64, usize)>,
    checked: usize,
    skipped: usize,
}

impl GradTally {
    fn record(&mut self, op: &'static str, r: GradReport) {
        self.checked += r.checked;
        self.skipped += r.skipped;
        match self.worst.iter_mut().find(|(o, _, _)| *o == op) {
            Some(e) => {
                e.1 = e.1.max(r.max_rel_error);
                e.2 += 1;
            }
            None => self.worst.push((op, r.max_rel_error, 1)),
        }
    }
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut tally = GradTally::default();
    for _ in 0..INSTANCES {
        op_gradients(&mut rng, &mut tally).expect("op gradient check");
    }
    assembled_gradients(&mut rng, &mut tally).expect("assembled loss gradient check");
    let bad: Vec<_> = tally.worst.iter().filter(|(_, e, n)| *e > GRAD_TOL || *n < INSTANCES).collect();
    let worst = tally.worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = format!(
        "{} ops x >= {INSTANCES} instances, {} entries, worst relative error {worst:.2e}, {} kinked entries resampled",
        tally.worst.len(),
        tally.checked,
        tally.skipped
    );
    if bad.is_empty() && tally.skipped * 4 <= tally.checked {
        outcome(true, detail)
    } else {
        outcome(false, format!("{detail}; failing: {bad:?}"))
    }
}

fn op_gradients(rng: &mut ChaCha8Rng, tally: &mut GradTally) -> svcn_core::Result<()> {
    let set = random_coords(rng, 14, 3);
    let coarse = coarsen_coords(&set);
    let sub = Rc::new(KernelMap::submanifold(&set, 3));
    let strided = Rc::new(KernelMap::build(&set, &coarse, 3, 2));
    let (n, m) = (set.len(), coarse.len());

    let x = random(rng, n, 2);
    let w = random(rng, 54, 3);
    let b = random(rng, 1, 3);
    let head = Head::new(rng, n, 3);
    tally.record("sparse conv", check_inputs(&[x.clone(), w.clone(), b.clone()], |t, v| {
        let y = t.sparse_conv(v[0], v[1], Some(v[2]), &sub)?;
        head.apply(t, y)
    })?);

    let head = Head::new(rng, m, 3);
    tally.record("strided conv", check_inputs(&[x.clone(), w.clone(), b.clone()], |t, v| {
        let y = t.sparse_conv(v[0], v[1], Some(v[2]), &strided)?;
        head.apply(t, y)
    })?);

    let conf = Matrix::column((0..n).map(|_| rng.gen_range(0.0..1.0)).collect());
    tally.record("confidence conv", check_inputs(&[x.clone(), conf, w.clone(), b.clone()], |t, v| {
        let y = t.confidence_conv(v[0], v[1], v[2], Some(v[3]), &strided)?;
        head.apply(t, y)
    })?);

    let parents: Vec<u32> = set.iter().map(|c| coarse.row_of(c.parent()).unwrap() as u32).collect();
    let distinct = Matrix::from_vec(n, 2, {
        let mut v: Vec<f64> = (0..2 * n).map(|i| i as f64 * 0.1).collect();
        for i in (1..v.len()).rev() {
            v.swap(i, rng.gen_range(0..=i));
        }
        v
    });
    let head2 = Head::new(rng, m, 2);
    tally.record("max pool", check_inputs(&[distinct], |t, v| {
        let y = t.max_pool(v[0], &parents, m);
        head2.apply(t, y)
    })?);

    let fine = dense_upsample_coords(&coarse);
    let dense_index: Rc<[u32]> = fine.iter().map(|c| coarse.row_of(c.parent()).unwrap() as u32).collect();
    let xc = random(rng, m, 2);
    let head_fine = Head::new(rng, fine.len(), 2);
    tally.record("dense upsample", check_inputs(&[xc.clone()], |t, v| {
        let y = t.gather_rows(v[0], Rc::clone(&dense_index));
        head_fine.apply(t, y)
    })?);

    // Sparse upsampling onto the encoder voxels; rows without a parent stay zero.
    let sparse_index: Rc<[u32]> = set.iter().enumerate().map(|(i, c)| if i % 5 == 4 { ZERO_ROW } else { coarse.row_of(c.parent()).unwrap() as u32 }).collect();
    let head_n2 = Head::new(rng, n, 2);
    tally.record("sparse upsample", check_inputs(&[xc], |t, v| {
        let y = t.gather_rows(v[0], Rc::clone(&sparse_index));
        head_n2.apply(t, y)
    })?);

    let head_n3 = Head::new(rng, n, 3);
    tally.record("linear", check_inputs(&[x.clone(), random(rng, 2, 3), b.clone()], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        head_n3.apply(t, y)
    })?);
    tally.record("relu", check_inputs(&[away_from_zero(rng, n, 2)], |t, v| {
        let y = t.relu(v[0]);
        head_n2.apply(t, y)
    })?);
    tally.record("sigmoid", check_inputs(&[x.clone()], |t, v| {
        let y = t.sigmoid(v[0]);
        head_n2.apply(t, y)
    })?);
    tally.record("sharpened sigmoid", check_inputs(&[x.clone()], |t, v| {
        let y = t.sharpened_sigmoid(v[0], 3.0);
        head_n2.apply(t, y)
    })?);
    tally.record("batch norm", check_inputs(&[x.clone(), random(rng, 1, 2), random(rng, 1, 2)], |t, v| {
        let y = t.batch_norm(v[0], v[1], v[2])?;
        head_n2.apply(t, y)
    })?);
    let head_cat = Head::new(rng, n, 4);
    tally.record("concat", check_inputs(&[x.clone(), random(rng, n, 2)], |t, v| {
        let y = t.concat_cols(v[0], v[1])?;
        head_cat.apply(t, y)
    })?);

    let probs = Matrix::column((0..n).map(|_| rng.gen_range(0.05..0.95)).collect());
    let targets: Rc<[f64]> = (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
    let weights: Rc<[f64]> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
    tally.record("bce", check_inputs(&[probs], |t, v| t.bce(v[0], Rc::clone(&targets), Some(Rc::clone(&weights))))?);
    let logits = random(rng, n, 1).data().iter().map(|z| z * 3.0).collect();
    tally.record("bce with logits", check_inputs(&[Matrix::column(logits)], |t, v| t.bce_with_logits(v[0], Rc::clone(&targets), Some(Rc::clone(&weights))))?);
    let labels: Rc<[u32]> = (0..n).map(|i| if i % 4 == 0 { UNLABELED } else { rng.gen_range(0..3) }).collect();
    tally.record("cross entropy", check_inputs(&[random(rng, n, 3)], |t, v| t.masked_cross_entropy(v[0], Rc::clone(&labels)))?);

    let f = Matrix::column((0..6).map(|_| rng.gen_range(-3.0..3.0)).collect());
    let r = Matrix::column((0..4).map(|_| rng.gen_range(-3.0..3.0)).collect());
    tally.record("L_d", check_inputs(&[f.clone(), r], |t, v| loss_d(t, v[0], v[1]))?);
    tally.record("L_adv", check_inputs(&[f], |t, v| loss_adv(t, v[0]))?);

    let discs = DiscriminatorSet::register("t", &[0], rng)?;
    let disc = discs.get(0).unwrap();
    let dset = random_coords(rng, 40, 6);
    let dl = Matrix::column((0..dset.len()).map(|_| rng.gen_range(-0.3..0.3)).collect());
    tally.record("discriminator", check_inputs(&[dl], |t, v| {
        let s = t.sharpened_sigmoid(v[0], 2.0);
        let out = disc.forward(t, &discs.params, &dset, s)?;
        loss_adv(t, out.logits)
    })?);
    Ok(())
}

fn assembled_gradients(rng: &mut ChaCha8Rng, tally: &mut GradTally) -> svcn_core::Result<()> {
    let cfg = tiny_svcn();
    let samples = small_samples(INSTANCES as u64, 1, 17);
    for s in samples.iter().take(INSTANCES) {
        let s = cropped(s, 2);
        let mut params = NetworkParams::new();
        let gen = GenerationNet::register(&mut params, &cfg, rng)?;
        jitter_biases(&mut params, rng);
        // The checker's loss is generic over the tape lifetime, so the discriminators must outlive every tape.
        let discs: &'static DiscriminatorSet = Box::leak(Box::new(jittered(DiscriminatorSet::register("gen", &[0, 1, 2], rng)?, rng)));
        let adv = AdvTerm { discs, lambda: 0.3, k: 2.0 };
        tally.record("L_gen", check_params(&params, 1, rng, |t, p| {
            let out = gen.forward(t, p, &s.input, Mode::Train(&s.gt))?;
            Ok(loss_gen(t, &out, Balance::PerLevel, Some(adv))?.total)
        })?);

        // An untrained generator keeps most children, so the refinement input is
        // built directly: the input and ground-truth voxels with random probabilities.
        let coords = set_union(&s.input.coords, &s.gt.levels[0]);
        let probs: Vec<f64> = (0..coords.len()).map(|_| rng.gen_range(0.02..0.98)).collect();
        let targets: Rc<[f64]> = coords.iter().map(|c| if s.gt.levels[0].contains(c) { 1.0 } else { 0.0 }).collect();
        let r = RefineSample { id: s.id, coords: coords.clone(), probs, targets, real: s.gt.levels[0].clone(), gt: s.gt.levels[0].clone() };
        let mut rparams = NetworkParams::new();
        let rnet = RefinementNet::register(&mut rparams, &cfg, rng)?;
        jitter_biases(&mut rparams, rng);
        let rdiscs: &'static DiscriminatorSet = Box::leak(Box::new(jittered(DiscriminatorSet::register("refine", &[0], rng)?, rng)));
        let radv = AdvTerm { discs: rdiscs, lambda: 0.3, k: 2.0 };
        tally.record("L_refine", check_params(&rparams, 1, rng, |t, p| {
            let logits = rnet.forward(t, p, &r.coords, &r.probs)?;
            Ok(loss_refine(t, &r.coords, logits, Rc::clone(&r.targets), Some(radv))?.total)
        })?);
    }
    Ok(())
}

/// Zero-initialized biases put every voxel without active inputs exactly on a
/// ReLU kink, where a central difference is meaningless; check at a generic point instead.
fn jitter_biases(params: &mut NetworkParams, rng: &mut ChaCha8Rng) {
    for t in params.tensors_mut().iter_mut().filter(|t| t.name.ends_with(".b")) {
        t.values.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
}

fn jittered(mut discs: DiscriminatorSet, rng: &mut ChaCha8Rng) -> DiscriminatorSet {
    jitter_biases(&mut discs.params, rng);
    discs
}

/// The part of a sample under `keep` of its level-6 footprint cells, to keep finite differences cheap.
fn cropped(s: &svcn_core::data::Sample, keep: usize) -> svcn_core::data::Sample {
    let shift = (LEVELS - 1) as i32;
    let top = |c: VoxelCoord| VoxelCoord::new(c.x >> shift, c.y >> shift, c.z >> shift);
    let cells: CoordSet = s.input.coords.iter().map(top).collect::<CoordSet>().iter().take(keep).collect();
    let input: CoordSet = s.input.coords.iter().filter(|c| cells.contains(top(*c))).collect();
    let input = SparseGrid::occupancy(0, s.input.voxel_size, s.input.origin, input);
    svcn_core::data::Sample { id: s.id, input, gt: s.gt.crop_to(&cells) }
}

// ---------------------------------------------------------------------------
// 2. Structure

fn structure() -> Outcome {
    let cfg = tiny_svcn();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut params = NetworkParams::new();
    let gen = GenerationNet::register(&mut params, &cfg, &mut rng).unwrap();
    let mut rparams = NetworkParams::new();
    let rnet = RefinementNet::register(&mut rparams, &cfg, &mut rng).unwrap();
    let samples = small_samples(25, 4, 202);
    let (mut frames, mut violations) = (0, Vec::new());
    for s in samples.iter().take(100) {
        frames += 1;
        let mut tape = Tape::new();
        let out = gen.forward(&mut tape, &params, &s.input, Mode::Train(&s.gt)).unwrap();
        let gt = out.gt.as_ref().unwrap();
        let mut enc = s.input.coords.clone();
        for l in 0..LEVELS {
            if l > 0 {
                enc = coarsen_coords(&enc);
            }
            if !out.levels[l].retained.set_eq(&set_union(&gt.levels[l], &enc)) || !out.levels[l].intersection.set_eq(&enc) {
                violations.push(format!("frame {} level {l}: retained set", s.id));
            }
        }
        let r = refine_inputs(&gen, &params, std::slice::from_ref(s)).unwrap().remove(0);
        if !s.input.coords.iter().all(|c| r.coords.contains(c)) {
            violations.push(format!("frame {}: input voxel dropped", s.id));
        }
        let refined = refined_set(&rnet, &rparams, cfg.threshold, &r).unwrap();
        if !refined.iter().all(|c| r.coords.contains(c)) {
            violations.push(format!("frame {}: refinement added a voxel", s.id));
        }
    }
    let pass = frames >= 100 && violations.is_empty();
    outcome(pass, format!("{frames} frames, {} violations {:?}", violations.len(), violations.iter().take(3).collect::<Vec<_>>()))
}

// ---------------------------------------------------------------------------
// 3. Identity

fn identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_score, mut worst_grad) = (0.0f64, 0.0f64);
    let instances = 20;
    for i in 0..instances {
        let discs = DiscriminatorSet::register("gen", &[0], &mut rng).unwrap();
        let disc = discs.get(0).unwrap();
        let real = random_coords(&mut rng, 30 + 10 * i, 12);
        let k = rng.gen_range(1.0..12.0);
        let logits: Vec<f64> = (0..real.len()).map(|_| rng.gen_range(40.0..80.0)).collect();
        let mut tape = Tape::new();
        let z = tape.input(Matrix::column(logits));
        let v = tape.sharpened_sigmoid(z, k);
        let fake = disc.forward(&mut tape, &discs.params, &real, v).unwrap();
        let loss = loss_adv(&mut tape, fake.logits).unwrap();
        let grad = tape.backward(loss).get(z).map_or(0.0, |g| g.norm());
        let ones = tape.constant(Matrix::filled(real.len(), 1, 1.0));
        let truth = disc.forward(&mut tape, &discs.params, &real, ones).unwrap();
        assert!(truth.sites.set_eq(&fake.sites));
        for (a, b) in tape.value(fake.logits).data().iter().zip(tape.value(truth.logits).data()) {
            worst_score = worst_score.max((a - b).abs());
        }
        worst_grad = worst_grad.max(grad);
    }
    outcome(worst_score <= 1e-12 && worst_grad <= 1e-10, format!("{instances} sets, max score gap {worst_score:.1e}, max gradient norm {worst_grad:.1e}"))
}

// ---------------------------------------------------------------------------
// 4. Metrics

fn brute_chamfer(a: &CoordSet, b: &CoordSet, d: f64, origin: [f64; 3]) -> f64 {
    let pa: Vec<_> = a.iter().map(|c| c.center(d, origin)).collect();
    let pb: Vec<_> = b.iter().map(|c| c.center(d, origin)).collect();
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        from.iter()
            .map(|p| to.iter().map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    directed(&pa, &pb) + directed(&pb, &pa)
}

fn oracle_iou(a: &CoordSet, b: &CoordSet) -> f64 {
    let sa: std::collections::BTreeSet<_> = a.iter().collect();
    let sb: std::collections::BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        1.0
    } else {
        sa.intersection(&sb).count() as f64 / union as f64
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut cd_err, mut iou_mismatch, mut self_fail) = (0.0f64, 0, 0);
    let pairs = 20;
    for _ in 0..pairs {
        let d = rng.gen_range(0.05..0.5);
        let origin = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let a = random_coords(&mut rng, 500, 20);
        let b = random_coords(&mut rng, 500, 20);
        cd_err = cd_err.max((chamfer(&a, &b, d, origin).unwrap() - brute_chamfer(&a, &b, d, origin)).abs());
        let ga = SparseGrid::occupancy(0, d, origin, a.clone());
        let gb = SparseGrid::occupancy(0, d, origin, b.clone());
        if voxel_iou(&ga, &gb).unwrap() != oracle_iou(&a, &b) || iou_sets(&a, &b) != oracle_iou(&a, &b) {
            iou_mismatch += 1;
        }
        if chamfer(&a, &a, d, origin).unwrap() != 0.0 || voxel_iou(&ga, &ga).unwrap() != 1.0 {
            self_fail += 1;
        }
    }
    let pass = cd_err <= 1e-9 && iou_mismatch == 0 && self_fail == 0;
    outcome(pass, format!("{pairs} pairs x 500 voxels, chamfer error {cd_err:.1e}, IoU mismatches {iou_mismatch}, self-metric failures {self_fail}"))
}

// ---------------------------------------------------------------------------
// 5. Virtual LiDAR

fn virtual_lidar() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut failures = Vec::new();

    let sensor = [0.3, -0.7, 1.1];
    let points: Vec<[f64; 3]> = (0..2000).map(|_| [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-5.0..5.0)]).collect();
    let polar = to_polar(&points, sensor).unwrap();
    let roundtrip = points
        .iter()
        .zip(&polar)
        .map(|(p, q)| {
            let c = q.to_cartesian();
            (0..3).map(|i| (c[i] + sensor[i] - p[i]).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    if roundtrip > 1e-9 {
        failures.push(format!("polar round-trip error {roundtrip:.1e}"));
    }

    // Self-pattern resampling of a virtual frame.
    let scene = gen_scene(&small_scene(505)).unwrap();
    let eye = [0.2, 0.1, SENSOR_HEIGHT];
    let frame = virtual_frame(&scene.cloud, &PolarPattern::ring32(), eye, &FrameSpec::default()).unwrap();
    let own = PolarPattern::from_frame(&frame, eye, "self").unwrap();
    let again = resample(&frame, &own, eye, DEFAULT_CUTOFF_DEG).unwrap();
    let again_dirs = to_polar(&again.points, eye).unwrap();
    let angular = own.directions.iter().zip(&again_dirs).map(|(d, p)| angular_distance(*d, (p.theta, p.phi))).fold(0.0, f64::max);
    if again.len() != frame.len() || angular != 0.0 || again.points != frame.points {
        failures.push(format!("self-pattern: {} of {} points, max angular error {angular:.1e}", again.len(), frame.len()));
    }

    // Augmentation audit.
    let mut audits = 0;
    for base in [PolarPattern::ring32(), PolarPattern::ring64()] {
        for _ in 0..10 {
            let bins = rng.gen_range(2..16);
            let keep = if rng.gen() { KeepFraction::Fixed(rng.gen_range(0.0..=1.0)) } else { KeepFraction::Uniform(0.3, 0.7) };
            let aug = augment_pattern(&base, bins, keep, &mut rng).unwrap();
            let bounds = theta_range(&base);
            let kept: std::collections::BTreeSet<usize> = aug.directions.iter().map(|d| theta_bin(d.0, bounds, bins)).collect();
            let expect: Vec<_> = base.directions.iter().copied().filter(|d| kept.contains(&theta_bin(d.0, bounds, bins))).collect();
            let count_ok = match keep {
                KeepFraction::Fixed(f) => kept.len() == (f * bins as f64).round() as usize || aug.is_empty(),
                KeepFraction::Uniform(lo, hi) => kept.len() >= (lo * bins as f64).round() as usize && kept.len() <= (hi * bins as f64).round() as usize,
            };
            if aug.directions != expect || !count_ok {
                failures.push(format!("augmentation audit: {bins} bins, {keep:?}, {} bins kept", kept.len()));
            }
            audits += 1;
        }
    }

    // A point hidden behind a wall is removed; the wall and a point beside it stay.
    let mut wall: Vec<[f64; 3]> = Vec::new();
    for i in -40..=40 {
        for j in -40..=40 {
            wall.push([5.0, i as f64 * 0.05, j as f64 * 0.05]);
        }
    }
    let behind = wall.len();
    wall.push([8.0, 0.01, 0.02]);
    wall.push([3.0, -3.0, 0.03]);
    let cloud = PointCloud::new(wall.clone());
    let kept = occlusion_filter(&cloud, [0.0; 3], &OcclusionConfig::default()).unwrap();
    let has = |p: [f64; 3]| kept.points.contains(&p);
    if has(wall[behind]) || !has(wall[behind + 1]) || kept.len() != wall.len() - 1 {
        failures.push(format!("occlusion: kept {} of {} points", kept.len(), wall.len()));
    }

    let detail = format!("round-trip {roundtrip:.1e}, self-pattern {} points, {audits} augmentation audits, occlusion wall", frame.len());
    if failures.is_empty() {
        outcome(true, detail)
    } else {
        outcome(false, format!("{detail}; {failures:?}"))
    }
}

// ---------------------------------------------------------------------------
// 6. Completion trend

fn completion_trend() -> Outcome {
    let cfg = CompletionExperiment::default();
    let steps = cfg.generation.max_steps + cfg.refinement.max_steps + 2 * cfg.adversarial.max_steps;
    let start = Instant::now();
    let (r, _) = run_completion(&cfg).expect("completion experiment");
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let a = r.generation.iou >= r.input.iou + 0.10;
    let b = r.refinement.iou >= r.generation.iou;
    let delta = r.adversarial.iou - r.refinement.iou;
    let c = (-0.01..=0.05).contains(&delta) && r.adversarial.cd <= r.refinement.cd * 1.05;
    let pass = a && b && c && minutes <= 30.0 && steps <= 5000 && cfg.train_scenes + cfg.val_scenes == 50;
    outcome(
        pass,
        format!(
            "{} scenes, IoU input {:.4} / gen {:.4} / refine {:.4} / adv {:.4}, CD refine {:.4} / adv {:.4}, {steps} steps, {minutes:.1} min (a {a}, b {b}, c {c})",
            cfg.train_scenes + cfg.val_scenes,
            r.input.iou,
            r.generation.iou,
            r.refinement.iou,
            r.adversarial.iou,
            r.refinement.cd,
            r.adversarial.cd
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Adaptation trend

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn adaptation_trend() -> Outcome {
    let path = workspace_root().join("demo/config.json");
    let cfg: AdaptationExperiment = serde_json::from_slice(&std::fs::read(&path).expect("demo config")).expect("demo config parses");
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let r = run_demo(&cfg, dir.path()).expect("adaptation experiment");
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let m = |mode| r.miou(mode).expect("mode was run");
    let (none, b1, b2, svcn) = (m(AlignMode::None), m(AlignMode::B1), m(AlignMode::B2), m(AlignMode::Svcn));
    let pass = svcn >= none + 0.05 && b1 <= svcn && b2 <= svcn && minutes <= 45.0;
    outcome(pass, format!("mIoU none {none:.4} / b1 {b1:.4} / b2 {b2:.4} / svcn {svcn:.4}, {minutes:.1} min"))
}

// ---------------------------------------------------------------------------
// 8. Determinism

fn reduced_demo() -> AdaptationExperiment {
    let stage = |steps| TrainConfig { max_steps: steps, validate_every: 0, ..Default::default() };
    let mut cfg = AdaptationExperiment {
        seed: 8,
        scene: small_scene(0),
        source_scenes: 2,
        target_scenes: 2,
        svcn: tiny_svcn(),
        generation: stage(6),
        refinement: stage(3),
        ..Default::default()
    };
    cfg.source_frames.frames_per_scene = 1;
    cfg.completion_frames.frames_per_scene = 1;
    cfg.adapt.seg = SegConfig { levels: tiny_levels(), ..Default::default() };
    cfg.adapt.train = stage(4);
    cfg
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let cfg = reduced_demo();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_demo(&cfg, a.path()).expect("first demo run");
    run_demo(&cfg, b.path()).expect("second demo run");
    let (fa, fb) = (files(a.path()), files(b.path()));
    let rel = |fs: &[PathBuf], root: &Path| fs.iter().map(|f| f.strip_prefix(root).unwrap().to_path_buf()).collect::<Vec<_>>();
    let same_names = rel(&fa, a.path()) == rel(&fb, b.path());
    let differing: Vec<_> = fa.iter().zip(&fb).filter(|(x, y)| std::fs::read(x).unwrap() != std::fs::read(y).unwrap()).map(|(x, _)| x.clone()).collect();
    let kinds = |ext: &str| fa.iter().filter(|f| f.extension().is_some_and(|e| e == ext)).count();
    let pass = same_names && differing.is_empty() && kinds("svck") > 0 && kinds("svgr") > 0 && kinds("json") > 0;
    outcome(
        pass,
        format!("{} files ({} checkpoints, {} grids, {} JSON), {} differ", fa.len(), kinds("svck"), kinds("svgr"), kinds("json"), differing.len()),
    )
}

// ---------------------------------------------------------------------------
// 9. Formats

const FUZZ_CASES: usize = 1000;

fn f32_value(rng: &mut ChaCha8Rng, scale: f32) -> f64 {
    f64::from(rng.gen_range(-scale..scale))
}

fn random_cloud(rng: &mut ChaCha8Rng) -> PointCloud {
    let n = rng.gen_range(0..60);
    let points = (0..n).map(|_| [f32_value(rng, 1e4), f32_value(rng, 1e4), f32_value(rng, 1e4)]).collect();
    if rng.gen() {
        PointCloud::labeled(points, (0..n).map(|_| if rng.gen_bool(0.1) { UNLABELED } else { rng.gen_range(0..10) }).collect()).unwrap()
    } else {
        PointCloud::new(points)
    }
}

fn random_grid(rng: &mut ChaCha8Rng) -> SparseGrid {
    let n = rng.gen_range(0..60);
    let mut coords = CoordSet::new();
    while coords.len() < n {
        coords.insert(VoxelCoord::new(rng.gen_range(-5000..5000), rng.gen_range(-5000..5000), rng.gen_range(-5000..5000)));
    }
    let ch = rng.gen_range(0..4);
    let data = (0..n * ch).map(|_| f32_value(rng, 1e3)).collect();
    let origin = [f32_value(rng, 10.0), f32_value(rng, 10.0), f32_value(rng, 10.0)];
    SparseGrid { level: rng.gen_range(0..7), voxel_size: rng.gen_range(0.01..2.0), origin, coords, features: Matrix::from_vec(n, ch, data) }
}

fn random_pattern(rng: &mut ChaCha8Rng) -> PolarPattern {
    let pi = std::f64::consts::PI;
    let n = rng.gen_range(0..80);
    PolarPattern::new((0..n).map(|_| (rng.gen_range(0.0..=pi), rng.gen_range(-pi..pi).max(-pi + 1e-12))).collect(), "file")
}

fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let mut params = NetworkParams::new();
    params.step = rng.gen();
    for i in 0..rng.gen_range(0..5) {
        let shape: Vec<usize> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(1..5)).collect();
        let fan_in = shape.iter().product::<usize>();
        let id = params.insert_uniform(format!("net.t{i}"), shape, fan_in, rng).unwrap();
        let t = params.get_mut(id);
        for v in t.adam_m.data_mut().iter_mut().chain(t.adam_v.data_mut()) {
            *v = rng.gen();
        }
    }
    let meta: String = (0..rng.gen_range(0..20)).map(|_| rng.gen_range('a'..='z')).collect();
    Checkpoint { meta, params, rng: RngState { seed: rng.gen(), stream: rng.gen(), word_pos: rng.gen::<u128>() >> 60 } }
}

/// Round-trips `FUZZ_CASES` instances bitwise and feeds corrupted copies to the reader.
fn fuzz_format<T>(
    rng: &mut ChaCha8Rng,
    make: impl Fn(&mut ChaCha8Rng) -> T,
    write: impl Fn(&T) -> Vec<u8>,
    read: impl Fn(&[u8]) -> svcn_core::Result<T>,
    same: impl Fn(&T, &T) -> bool,
) -> (usize, usize) {
    let (mut ok, mut corrupt) = (0, 0);
    for _ in 0..FUZZ_CASES {
        let value = make(rng);
        let bytes = write(&value);
        if let Ok(back) = read(&bytes) {
            if same(&back, &value) && write(&back) == bytes {
                ok += 1;
            }
        }
        for _ in 0..3 {
            let bad = mutate(&bytes, rng);
            if catch_unwind(AssertUnwindSafe(|| {
                let _ = read(&bad);
            }))
            .is_ok()
            {
                corrupt += 1;
            }
        }
    }
    (ok, corrupt)
}

fn format_roundtrips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let results = [
        (
            "PCXL",
            fuzz_format(
                &mut rng,
                random_cloud,
                |c| {
                    let mut b = Vec::new();
                    write_pcxl(&mut b, c).unwrap();
                    b
                },
                |b| read_pcxl(&mut &b[..]),
                |a, b| a == b,
            ),
        ),
        (
            "SVGR",
            fuzz_format(
                &mut rng,
                random_grid,
                |g| {
                    let mut b = Vec::new();
                    g.write_to(&mut b).unwrap();
                    b
                },
                |b| SparseGrid::read_from(&mut &b[..]),
                |a, b| a == b,
            ),
        ),
        (
            "PATT",
            fuzz_format(
                &mut rng,
                random_pattern,
                |p| {
                    let mut b = Vec::new();
                    p.write_to(&mut b).unwrap();
                    b
                },
                |b| PolarPattern::read_from(&mut &b[..]),
                |a, b| a.directions == b.directions,
            ),
        ),
        (
            "checkpoint",
            fuzz_format(
                &mut rng,
                random_checkpoint,
                |c| {
                    let mut b = Vec::new();
                    c.write_to(&mut b).unwrap();
                    b
                },
                |b| Checkpoint::read_from(&mut &b[..]),
                |a, b| a.meta == b.meta && a.rng == b.rng && a.params.step == b.params.step && a.params.len() == b.params.len(),
            ),
        ),
    ];
    let pass = results.iter().all(|(_, (ok, corrupt))| *ok == FUZZ_CASES && *corrupt == 3 * FUZZ_CASES);
    let detail = results.iter().map(|(name, (ok, c))| format!("{name} {ok}/{FUZZ_CASES} round-trips, {c} corrupt inputs rejected cleanly")).collect::<Vec<_>>().join("; ");
    outcome(pass, detail)
}
