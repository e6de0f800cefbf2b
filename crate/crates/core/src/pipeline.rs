//! End-to-end experiments on synthetic sensor domains: the completion trend
//! (generation, refinement, adversarial fine-tuning) and the adaptation trend
//! (no adaptation, B1, B2 and complete-and-label), plus the demo runner that
//! writes every artifact of an adaptation run to disk.
//!
//! Every random draw derives from the experiment seed, so two runs with the
//! same configuration produce identical checkpoints, grids and reports.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::data::{make_pairs, samples, virtual_frame, FrameSpec, Pair, Sample};
use crate::error::{Error, Result};
use crate::grid::CoordSet;
use crate::io::save_with;
use crate::lidar::PolarPattern;
use crate::metrics::{chamfer, iou_sets};
use crate::scene::{gen_scene, place_sensor, SceneSpec};
use crate::segmenter::{adapt_pipeline, AdaptConfig, AdaptReport, Aligner, AlignMode, KIND_SEG};
use crate::svcn::{Completer, GenerationNet, RefinementNet, SvcnConfig};
use crate::tensor::{NetworkParams, RngState};
use crate::trainer::{refine_inputs, refined_set, train_generation, train_refinement, ModelMeta, Recorder, RefineSample, TrainConfig, Trained, KIND_GEN, KIND_REFINE};

/// Named toy sensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sensor {
    Ring64,
    Ring32,
}

impl Sensor {
    pub fn pattern(self) -> PolarPattern {
        match self {
            Sensor::Ring64 => PolarPattern::ring64(),
            Sensor::Ring32 => PolarPattern::ring32(),
        }
    }
}

impl std::str::FromStr for Sensor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring64" => Ok(Self::Ring64),
            "ring32" => Ok(Self::Ring32),
            _ => Err(Error::Config(format!("unknown sensor {s:?} (expected ring64 or ring32)"))),
        }
    }
}

// Independent seed streams of one experiment.
const STREAM_SCENE: u64 = 1;
const STREAM_FRAMES: u64 = 2;
const STREAM_TRAIN: u64 = 3;

/// The `index`-th seed of `stream` under the experiment seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

/// Seed of the `index`-th scene of an experiment.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    derive_seed(seed, STREAM_SCENE, index)
}

/// Seed of the frame draws (sensor poses, pattern augmentation) on the `index`-th scene.
pub fn frame_seed(seed: u64, index: u64) -> u64 {
    derive_seed(seed, STREAM_FRAMES, index)
}

fn scene_cloud(template: &SceneSpec, seed: u64, index: u64) -> Result<PointCloud> {
    Ok(gen_scene(&SceneSpec { seed: scene_seed(seed, index), ..template.clone() })?.cloud)
}

/// Training pairs of scenes `range` under `pattern`; `tag` separates the
/// frame draws of different sensors on the same scenes.
fn scene_pairs(template: &SceneSpec, seed: u64, range: std::ops::Range<u64>, pattern: &PolarPattern, frames: &FrameSpec, tag: u64) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for i in range {
        let cloud = scene_cloud(template, seed, i)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_FRAMES + (tag << 8), i));
        pairs.extend(make_pairs(&cloud, pattern, frames, &mut rng)?);
    }
    Ok(pairs)
}

fn train_seed(seed: u64, stage: u64) -> u64 {
    derive_seed(seed, STREAM_TRAIN, stage)
}

/// Mean IoU and chamfer distance of predicted level-0 sets against the full ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou: f64,
    pub cd: f64,
}

pub fn score_sets(pred: &[CoordSet], gt: &[Sample], voxel_size: f64) -> Result<Scores> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Config(format!("{} predictions for {} samples", pred.len(), gt.len())));
    }
    let (mut iou, mut cd) = (0.0, 0.0);
    for (p, s) in pred.iter().zip(gt) {
        iou += iou_sets(p, &s.gt.levels[0]);
        cd += chamfer(p, &s.gt.levels[0], voxel_size, [0.0; 3])?;
    }
    let n = pred.len() as f64;
    Ok(Scores { iou: iou / n, cd: cd / n })
}

/// Completion trend on one synthetic sensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionExperiment {
    pub seed: u64,
    pub scene: SceneSpec,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub sensor: Sensor,
    pub frames: FrameSpec,
    pub svcn: SvcnConfig,
    pub generation: TrainConfig,
    pub refinement: TrainConfig,
    /// Fine-tuning of both stages with the adversarial term, at a tenth of the pretraining rate.
    pub adversarial: TrainConfig,
}

impl Default for CompletionExperiment {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSpec::default(),
            train_scenes: 40,
            val_scenes: 10,
            sensor: Sensor::Ring32,
            frames: FrameSpec::default(),
            svcn: SvcnConfig::default(),
            generation: TrainConfig { max_steps: 600, validate_every: 100, ..Default::default() },
            refinement: TrainConfig { max_steps: 300, validate_every: 100, ..Default::default() },
            adversarial: TrainConfig { max_steps: 150, validate_every: 50, lr_gen: 1e-4, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionReport {
    pub train_samples: usize,
    pub val_samples: usize,
    /// The input occupancy taken as the prediction.
    pub input: Scores,
    pub generation: Scores,
    pub refinement: Scores,
    /// Adversarially fine-tuned generation followed by adversarially fine-tuned refinement.
    pub adversarial: Scores,
}

/// Selected parameters of every stage of a completion experiment.
#[derive(Debug)]
pub struct CompletionModels {
    pub generation: NetworkParams,
    pub refinement: NetworkParams,
    pub adv_generation: NetworkParams,
    pub adv_refinement: NetworkParams,
}

pub fn run_completion(cfg: &CompletionExperiment) -> Result<(CompletionReport, CompletionModels)> {
    if cfg.train_scenes == 0 || cfg.val_scenes == 0 {
        return Err(Error::Config("completion experiment needs training and validation scenes".into()));
    }
    let pattern = cfg.sensor.pattern();
    let n = (cfg.train_scenes + cfg.val_scenes) as u64;
    let train_pairs = scene_pairs(&cfg.scene, cfg.seed, 0..cfg.train_scenes as u64, &pattern, &cfg.frames, 0)?;
    let val_pairs = scene_pairs(&cfg.scene, cfg.seed, cfg.train_scenes as u64..n, &pattern, &cfg.frames, 0)?;
    let d = cfg.svcn.voxel_size;
    let (train, val) = (samples(&train_pairs, d)?, samples(&val_pairs, d)?);
    let input = score_sets(&val.iter().map(|s| s.input.coords.clone()).collect::<Vec<_>>(), &val, d)?;
    log::info!("completion: {} train / {} val samples, input IoU {:.4}", train.len(), val.len(), input.iou);

    let stage = |c: &TrainConfig, k: u64| TrainConfig { seed: train_seed(cfg.seed, k), ..c.clone() };
    let gen = train_generation(&train, &val, &cfg.svcn, &stage(&cfg.generation, 0), None, false, &mut Recorder::new())?;
    let gen_net = GenerationNet::bind(gen.selected(), &cfg.svcn)?;
    let (rtrain, rval) = (refine_inputs(&gen_net, gen.selected(), &train)?, refine_inputs(&gen_net, gen.selected(), &val)?);
    let generation = score_sets(&rval.iter().map(|r| r.coords.clone()).collect::<Vec<_>>(), &val, d)?;
    log::info!("generation IoU {:.4}", generation.iou);

    let refine = train_refinement(&rtrain, &rval, &cfg.svcn, &stage(&cfg.refinement, 1), None, false, &mut Recorder::new())?;
    let refinement = score_sets(&refined(&cfg.svcn, refine.selected(), &rval)?, &val, d)?;
    log::info!("refinement IoU {:.4}", refinement.iou);

    let adv_gen = train_generation(&train, &val, &cfg.svcn, &stage(&cfg.adversarial, 2), Some(gen.selected().clone()), true, &mut Recorder::new())?;
    let adv_net = GenerationNet::bind(adv_gen.selected(), &cfg.svcn)?;
    let (artrain, arval) = (refine_inputs(&adv_net, adv_gen.selected(), &train)?, refine_inputs(&adv_net, adv_gen.selected(), &val)?);
    let adv_refine = train_refinement(&artrain, &arval, &cfg.svcn, &stage(&cfg.adversarial, 3), Some(refine.selected().clone()), true, &mut Recorder::new())?;
    let adversarial = score_sets(&refined(&cfg.svcn, adv_refine.selected(), &arval)?, &val, d)?;
    log::info!("adversarial IoU {:.4}", adversarial.iou);

    let report = CompletionReport { train_samples: train.len(), val_samples: val.len(), input, generation, refinement, adversarial };
    let models = CompletionModels {
        generation: gen.selected().clone(),
        refinement: refine.selected().clone(),
        adv_generation: adv_gen.selected().clone(),
        adv_refinement: adv_refine.selected().clone(),
    };
    Ok((report, models))
}

fn refined(svcn: &SvcnConfig, params: &NetworkParams, inputs: &[RefineSample]) -> Result<Vec<CoordSet>> {
    let net = RefinementNet::bind(params, svcn)?;
    inputs.iter().map(|r| refined_set(&net, params, svcn.threshold, r)).collect()
}

/// Adaptation trend between two synthetic sensor domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationExperiment {
    pub seed: u64,
    pub scene: SceneSpec,
    /// Scenes with complete labeled geometry; the source frames and all SVCN training pairs come from them.
    pub source_scenes: usize,
    /// Unseen scenes whose target-sensor frames are labeled and scored.
    pub target_scenes: usize,
    pub source: Sensor,
    pub target: Sensor,
    /// Frames per source scene the segmenter trains on.
    pub source_frames: FrameSpec,
    /// Frames per source scene each SVCN trains on.
    pub completion_frames: FrameSpec,
    pub svcn: SvcnConfig,
    pub generation: TrainConfig,
    pub refinement: TrainConfig,
    pub adapt: AdaptConfig,
    pub modes: Vec<AlignMode>,
}

impl Default for AdaptationExperiment {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSpec::default(),
            source_scenes: 80,
            target_scenes: 100,
            source: Sensor::Ring64,
            target: Sensor::Ring32,
            source_frames: FrameSpec { frames_per_scene: 3, ..Default::default() },
            completion_frames: FrameSpec { frames_per_scene: 3, ..Default::default() },
            svcn: SvcnConfig::default(),
            generation: TrainConfig { max_steps: 1200, validate_every: 0, ..Default::default() },
            refinement: TrainConfig { max_steps: 400, validate_every: 0, ..Default::default() },
            adapt: AdaptConfig { train: TrainConfig { max_steps: 1200, validate_every: 0, ..Default::default() }, ..Default::default() },
            modes: vec![AlignMode::None, AlignMode::B1, AlignMode::B2, AlignMode::Svcn],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub source_frames: usize,
    pub target_frames: usize,
    /// Completion scores of each domain's SVCN on the target scenes, seen through that domain's sensor.
    pub source_completion: Option<Scores>,
    pub target_completion: Option<Scores>,
    pub runs: Vec<AdaptReport>,
}

impl AdaptationReport {
    pub fn miou(&self, mode: AlignMode) -> Option<f64> {
        self.runs.iter().find(|r| r.mode == mode).map(|r| r.miou)
    }
}

/// A trained completer with the checkpoints that reproduce it.
struct Domain {
    completer: Completer,
    gen: Trained,
    refine: Trained,
}

fn train_completer(svcn: &SvcnConfig, pairs: &[Pair], gen_cfg: &TrainConfig, refine_cfg: &TrainConfig) -> Result<Domain> {
    let train = samples(pairs, svcn.voxel_size)?;
    let gen = train_generation(&train, &[], svcn, gen_cfg, None, false, &mut Recorder::new())?;
    let net = GenerationNet::bind(gen.selected(), svcn)?;
    let rin = refine_inputs(&net, gen.selected(), &train)?;
    let refine = train_refinement(&rin, &[], svcn, refine_cfg, None, false, &mut Recorder::new())?;
    let completer = Completer::new(svcn.clone(), gen.selected().clone(), Some(refine.selected().clone()))?;
    Ok(Domain { completer, gen, refine })
}

/// Everything an adaptation run produced, for the demo writer.
struct AdaptationRun {
    report: AdaptationReport,
    domains: Option<(Domain, Domain)>,
    segmenters: Vec<(AlignMode, Trained)>,
    target_grids: Vec<crate::grid::SparseGrid>,
}

fn adaptation(cfg: &AdaptationExperiment) -> Result<AdaptationRun> {
    if cfg.source_scenes == 0 || cfg.target_scenes == 0 || cfg.modes.is_empty() {
        return Err(Error::Config("adaptation experiment needs source scenes, target scenes and at least one mode".into()));
    }
    let (sp, tp) = (cfg.source.pattern(), cfg.target.pattern());
    let ns = cfg.source_scenes as u64;
    let source: Vec<PointCloud> = scene_pairs(&cfg.scene, cfg.seed, 0..ns, &sp, &cfg.source_frames, 0)?.into_iter().map(|p| p.input).collect();

    // Target frames and their source-sensor twins from the same poses.
    let (mut target, mut twins, mut complete) = (Vec::new(), Vec::new(), Vec::new());
    for i in ns..ns + cfg.target_scenes as u64 {
        let cloud = scene_cloud(&cfg.scene, cfg.seed, i)?;
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(cfg.seed, i));
        let sensor = place_sensor(&cloud, cfg.source_frames.clearance, &mut rng)?;
        let frame = virtual_frame(&cloud, &tp, sensor, &cfg.source_frames)?;
        if frame.is_empty() {
            log::warn!("target frame of scene {i} is empty; skipped");
            continue;
        }
        target.push(frame);
        twins.push(virtual_frame(&cloud, &sp, sensor, &cfg.source_frames)?);
        complete.push(cloud.relative_to(sensor));
    }
    log::info!("adaptation: {} source frames, {} target frames", source.len(), target.len());

    let domains = if cfg.modes.contains(&AlignMode::Svcn) {
        let stage = |c: &TrainConfig, k: u64| TrainConfig { seed: train_seed(cfg.seed, k), ..c.clone() };
        let src_pairs = scene_pairs(&cfg.scene, cfg.seed, 0..ns, &sp, &cfg.completion_frames, 1)?;
        let tgt_pairs = scene_pairs(&cfg.scene, cfg.seed, 0..ns, &tp, &cfg.completion_frames, 2)?;
        let s = train_completer(&cfg.svcn, &src_pairs, &stage(&cfg.generation, 10), &stage(&cfg.refinement, 11))?;
        log::info!("source completer trained on {} pairs", src_pairs.len());
        let t = train_completer(&cfg.svcn, &tgt_pairs, &stage(&cfg.generation, 12), &stage(&cfg.refinement, 13))?;
        log::info!("target completer trained on {} pairs", tgt_pairs.len());
        Some((s, t))
    } else {
        None
    };

    let (mut source_completion, mut target_completion, mut target_grids) = (None, None, Vec::new());
    if let Some((s, t)) = &domains {
        let d = cfg.svcn.voxel_size;
        let gt: Vec<Sample> = twins.iter().zip(&complete).enumerate().map(|(i, (f, c))| Sample::from_pair(i, &Pair { input: f.clone(), complete: c.clone() }, d)).collect::<Result<_>>()?;
        let sc: Vec<CoordSet> = twins.iter().map(|f| Ok(s.completer.complete(f, [0.0; 3])?.coords)).collect::<Result<_>>()?;
        target_grids = target.iter().map(|f| t.completer.complete(f, [0.0; 3])).collect::<Result<_>>()?;
        source_completion = Some(score_sets(&sc, &gt, d)?);
        target_completion = Some(score_sets(&target_grids.iter().map(|g| g.coords.clone()).collect::<Vec<_>>(), &gt, d)?);
    }

    let mut runs = Vec::new();
    let mut segmenters = Vec::new();
    for (k, &mode) in cfg.modes.iter().enumerate() {
        let aligner = Aligner {
            mode,
            source_pattern: &sp,
            target_pattern: &tp,
            source_completer: domains.as_ref().map(|(s, _)| &s.completer),
            target_completer: domains.as_ref().map(|(_, t)| &t.completer),
        };
        let adapt = AdaptConfig { train: TrainConfig { seed: train_seed(cfg.seed, 20 + k as u64), ..cfg.adapt.train.clone() }, ..cfg.adapt.clone() };
        let (report, trained, _) = adapt_pipeline(&source, &target, &aligner, &adapt, &mut Recorder::new())?;
        log::info!("mode {mode:?}: mIoU {:.4}", report.miou);
        runs.push(report);
        segmenters.push((mode, trained));
    }
    let report = AdaptationReport { source_frames: source.len(), target_frames: target.len(), source_completion, target_completion, runs };
    Ok(AdaptationRun { report, domains, segmenters, target_grids })
}

pub fn run_adaptation(cfg: &AdaptationExperiment) -> Result<AdaptationReport> {
    Ok(adaptation(cfg)?.report)
}

fn save_checkpoint(path: &Path, kind: &str, model: &impl Serialize, train: &TrainConfig, params: &NetworkParams, rng: &RngState) -> Result<()> {
    ModelMeta::new(kind, model, Some(train))?.checkpoint(params.clone(), *rng)?.save(path)
}

/// Runs the adaptation experiment and writes it under `out`:
/// `checkpoints/{source,target}_{generation,refinement}.svck`,
/// `checkpoints/segmenter_{mode}.svck`, `grids/target_NNN.svgr` (completed
/// target frames) and `report.json`. The files carry no timestamps.
pub fn run_demo(cfg: &AdaptationExperiment, out: impl AsRef<Path>) -> Result<AdaptationReport> {
    let out = out.as_ref();
    let run = adaptation(cfg)?;
    let ckpt = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt)?;
    if let Some((s, t)) = &run.domains {
        for (name, d) in [("source", s), ("target", t)] {
            save_checkpoint(&ckpt.join(format!("{name}_generation.svck")), KIND_GEN, &cfg.svcn, &cfg.generation, d.gen.selected(), &d.gen.rng)?;
            save_checkpoint(&ckpt.join(format!("{name}_refinement.svck")), KIND_REFINE, &cfg.svcn, &cfg.refinement, d.refine.selected(), &d.refine.rng)?;
        }
    }
    for (mode, trained) in &run.segmenters {
        let name = serde_json::to_value(mode)?.as_str().unwrap_or("mode").to_string();
        save_checkpoint(&ckpt.join(format!("segmenter_{name}.svck")), KIND_SEG, &cfg.adapt.seg, &cfg.adapt.train, trained.selected(), &trained.rng)?;
    }
    if !run.target_grids.is_empty() {
        let grids = out.join("grids");
        std::fs::create_dir_all(&grids)?;
        for (i, g) in run.target_grids.iter().enumerate() {
            save_with(grids.join(format!("target_{i:03}.svgr")), g, |g, w| g.write_to(w))?;
        }
    }
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&run.report)? + "\n")?;
    Ok(run.report)
}
