use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use svcn_core::data::{load_pairs, make_pairs, samples, save_pairs, FrameSpec, Sample};
use svcn_core::grid::voxelize;
use svcn_core::io::{load_pcxl, load_with, save_pcxl, save_with};
use svcn_core::lidar::{augment_pattern, occlusion_filter, resample, KeepFraction, OcclusionConfig, PolarPattern, DEFAULT_CUTOFF_DEG};
use svcn_core::metrics::{chamfer, iou_sets, labeled_voxels, prop_labels, LabeledVoxelSet};
use svcn_core::pipeline::{frame_seed, run_demo, scene_seed, AdaptationExperiment, Sensor};
use svcn_core::scene::{gen_scene, SceneSpec};
use svcn_core::segmenter::{adapt_pipeline, seg_train, AdaptConfig, Aligner, AlignMode, SegConfig, KIND_SEG};
use svcn_core::svcn::{Completer, GenerationNet, SvcnConfig};
use svcn_core::tensor::Checkpoint;
use svcn_core::trainer::{refine_inputs, train_generation, train_refinement, ModelMeta, Recorder, TrainConfig, Trained, KIND_DISC_GEN, KIND_DISC_REFINE, KIND_GEN, KIND_REFINE};
use svcn_core::{Error, PointCloud, SparseGrid};

use crate::{AugmentArgs, Command};

/// Bad flags, environment or configuration files.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                Error::NonFinite { .. } => 4,
                _ => 3,
            };
        }
    }
    3
}

/// `SVCN_SEED` when set, else `fallback`.
fn seed_or(fallback: u64) -> Result<u64> {
    match std::env::var("SVCN_SEED") {
        Ok(s) => s.trim().parse().map_err(|_| usage(format!("SVCN_SEED must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(fallback),
    }
}

fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `f(0..n)` on up to `jobs` threads, results in index order.
fn par_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs).map(|j| {
            let f = &f;
            s.spawn(move || (j..n).step_by(jobs).map(|i| (i, f(i))).collect::<Vec<_>>())
        }).collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every index visited")).collect()
}

/// `*.pcxl` files of `dir` in name order.
fn pcxl_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "pcxl"));
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty(format!("no .pcxl files in {}", dir.display())).into());
    }
    Ok(files)
}

fn load_labeled_frames(dir: &Path) -> Result<Vec<PointCloud>> {
    pcxl_files(dir)?
        .iter()
        .map(|p| {
            let f = load_pcxl(p).with_context(|| format!("loading {}", p.display()))?;
            if f.labels.is_none() {
                return Err(Error::Format(format!("{} carries no labels", p.display())).into());
            }
            Ok(f)
        })
        .collect()
}

fn parse_keep(s: &str) -> Result<KeepFraction> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| usage(format!("invalid keep fraction {s:?}")));
    Ok(match s.split_once(':') {
        Some((lo, hi)) => KeepFraction::Uniform(num(lo)?, num(hi)?),
        None => KeepFraction::Fixed(num(s)?),
    })
}

fn augmentation(args: &AugmentArgs) -> Result<Option<(usize, KeepFraction)>> {
    Ok(if args.augment { Some((args.bins, parse_keep(&args.keep)?)) } else { None })
}

fn load_pattern(path: &Path) -> Result<PolarPattern> {
    load_with(path, |r| PolarPattern::read_from(r)).with_context(|| format!("loading pattern {}", path.display()))
}

/// A preset sensor name or a PATT file.
fn pattern_arg(spec: &str) -> Result<PolarPattern> {
    match spec.parse::<Sensor>() {
        Ok(s) => Ok(s.pattern()),
        Err(_) => load_pattern(Path::new(spec)),
    }
}

fn load_checkpoint(path: &Path, kind: &str) -> Result<(Checkpoint, ModelMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta = ModelMeta::expect(&ck, kind).with_context(|| format!("checkpoint {}", path.display()))?;
    Ok((ck, meta))
}

fn completer(gen: &Path, refine: Option<&Path>) -> Result<Completer> {
    let (g, meta) = load_checkpoint(gen, KIND_GEN)?;
    let svcn: SvcnConfig = meta.model()?;
    let r = refine.map(|p| load_checkpoint(p, KIND_REFINE)).transpose()?;
    Ok(Completer::new(svcn, g.params, r.map(|(c, _)| c.params))?)
}

/// Settings of `train-gen` and `train-refine`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct StageConfig {
    svcn: SvcnConfig,
    train: TrainConfig,
    /// Trailing pairs held out for validation.
    val_pairs: usize,
}

/// Settings of `train-seg`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct SegStageConfig {
    seg: SegConfig,
    train: TrainConfig,
    /// Trailing frames held out for validation.
    val_frames: usize,
}

fn split_val<T>(items: &[T], n_val: usize) -> Result<(&[T], &[T])> {
    if n_val >= items.len() {
        return Err(usage(format!("cannot hold out {n_val} of {} items for validation", items.len())));
    }
    Ok(items.split_at(items.len() - n_val))
}

/// Runs a training closure with the log written to `out/log.jsonl`.
fn with_log(out: &Path, f: impl FnOnce(&mut Recorder<'_>) -> svcn_core::Result<Trained>) -> Result<Trained> {
    std::fs::create_dir_all(out)?;
    let mut log = BufWriter::new(File::create(out.join("log.jsonl"))?);
    let trained = {
        let mut rec = Recorder::new().with_sink(&mut log).with_checkpoints(out);
        f(&mut rec)?
    };
    std::io::Write::flush(&mut log)?;
    Ok(trained)
}

fn save_trained(out: &Path, kind: &str, model: &impl Serialize, train: &TrainConfig, t: &Trained) -> Result<PathBuf> {
    let path = out.join(format!("{kind}.svck"));
    ModelMeta::new(kind, model, Some(train))?.checkpoint(t.selected().clone(), t.rng)?.save(&path)?;
    if let Some(b) = &t.best {
        log::info!("selected step {} with validation IoU {:.4}", b.step, b.iou);
    }
    log::info!("wrote {}", path.display());
    Ok(path)
}

fn save_discs(out: &Path, kind: &str, train: &TrainConfig, t: &Trained) -> Result<()> {
    if let Some(d) = &t.discs {
        let levels: Vec<usize> = d.levels();
        ModelMeta::new(kind, &levels, Some(train))?.checkpoint(d.params.clone(), t.rng)?.save(out.join(format!("{kind}.svck")))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CompletionScores {
    iou: f64,
    cd: f64,
    pred_voxels: usize,
    gt_voxels: usize,
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenScenes { spec, out, count, seed, jobs } => {
            let spec: SceneSpec = load_json(spec.as_deref())?;
            spec.validate()?;
            let seed = seed_or(seed)?;
            std::fs::create_dir_all(&out)?;
            par_map(count, jobs, |i| {
                let scene = gen_scene(&SceneSpec { seed: scene_seed(seed, i as u64), ..spec.clone() })?;
                save_pcxl(out.join(format!("scene_{i:05}.pcxl")), &scene.cloud)?;
                Ok(())
            })?;
            log::info!("wrote {count} scenes to {}", out.display());
        }
        Command::Pattern { preset, from_frame, sensor, out } => {
            let pattern = match (preset, from_frame) {
                (Some(name), _) => name.parse::<Sensor>()?.pattern(),
                (None, Some(frame)) => PolarPattern::from_frame(&load_pcxl(&frame)?, sensor, "file")?,
                (None, None) => return Err(usage("give --preset or --from-frame")),
            };
            save_with(&out, &pattern, |p, w| p.write_to(w))?;
            log::info!("wrote {} directions to {}", pattern.len(), out.display());
        }
        Command::Sample { scene, pattern, sensor, out, augment, visible, relative } => {
            let cloud = load_pcxl(&scene)?;
            let mut pattern = load_pattern(&pattern)?;
            if let Some((bins, keep)) = augmentation(&augment)? {
                let mut rng = ChaCha8Rng::seed_from_u64(seed_or(augment.seed)?);
                pattern = augment_pattern(&pattern, bins, keep, &mut rng)?;
            }
            let seen = if visible { cloud } else { occlusion_filter(&cloud, sensor, &OcclusionConfig::default())? };
            let mut frame = resample(&seen, &pattern, sensor, DEFAULT_CUTOFF_DEG)?;
            if relative {
                frame = frame.relative_to(sensor);
            }
            save_pcxl(&out, &frame)?;
            log::info!("wrote {} points to {}", frame.len(), out.display());
        }
        Command::MakePairs { scenes, pattern, out, frames_per_scene, augment, jobs } => {
            let files = pcxl_files(&scenes)?;
            let pattern = load_pattern(&pattern)?;
            let spec = FrameSpec { frames_per_scene, augment: augmentation(&augment)?, ..Default::default() };
            let seed = seed_or(augment.seed)?;
            let per_scene = par_map(files.len(), jobs, |i| {
                let cloud = load_pcxl(&files[i]).with_context(|| format!("loading {}", files[i].display()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(seed, i as u64));
                Ok(make_pairs(&cloud, &pattern, &spec, &mut rng)?)
            })?;
            let pairs: Vec<_> = per_scene.into_iter().flatten().collect();
            save_pairs(&out, &pairs)?;
            log::info!("wrote {} pairs to {}", pairs.len(), out.display());
        }
        Command::TrainGen { train, init, adversarial } => {
            let mut cfg: StageConfig = load_json(train.config.as_deref())?;
            cfg.train.seed = seed_or(cfg.train.seed)?;
            let init = init.map(|p| load_checkpoint(&p, KIND_GEN)).transpose()?;
            if let Some((_, meta)) = &init {
                cfg.svcn = meta.model()?;
            }
            let all = samples(&load_pairs(&train.data)?, cfg.svcn.voxel_size)?;
            let (tr, val) = split_val(&all, cfg.val_pairs)?;
            let t = with_log(&train.out, |rec| train_generation(tr, val, &cfg.svcn, &cfg.train, init.map(|(c, _)| c.params), adversarial, rec))?;
            save_trained(&train.out, KIND_GEN, &cfg.svcn, &cfg.train, &t)?;
            save_discs(&train.out, KIND_DISC_GEN, &cfg.train, &t)?;
        }
        Command::TrainRefine { train, gen, init, adversarial } => {
            let mut cfg: StageConfig = load_json(train.config.as_deref())?;
            cfg.train.seed = seed_or(cfg.train.seed)?;
            let (g, meta) = load_checkpoint(&gen, KIND_GEN)?;
            cfg.svcn = meta.model()?;
            let init = init.map(|p| load_checkpoint(&p, KIND_REFINE)).transpose()?;
            let all: Vec<Sample> = samples(&load_pairs(&train.data)?, cfg.svcn.voxel_size)?;
            let net = GenerationNet::bind(&g.params, &cfg.svcn)?;
            let inputs = refine_inputs(&net, &g.params, &all)?;
            let (tr, val) = split_val(&inputs, cfg.val_pairs)?;
            let t = with_log(&train.out, |rec| train_refinement(tr, val, &cfg.svcn, &cfg.train, init.map(|(c, _)| c.params), adversarial, rec))?;
            save_trained(&train.out, KIND_REFINE, &cfg.svcn, &cfg.train, &t)?;
            save_discs(&train.out, KIND_DISC_REFINE, &cfg.train, &t)?;
        }
        Command::TrainSeg { train, gen, refine } => {
            let mut cfg: SegStageConfig = load_json(train.config.as_deref())?;
            cfg.train.seed = seed_or(cfg.train.seed)?;
            let frames = load_labeled_frames(&train.data)?;
            let d = cfg.seg.voxel_size;
            let sets: Vec<LabeledVoxelSet> = match gen {
                Some(g) => {
                    let c = completer(&g, refine.as_deref())?;
                    frames.iter().map(|f| Ok(prop_labels(&labeled_voxels(f, d, [0.0; 3])?, &c.complete(f, [0.0; 3])?)?)).collect::<Result<_>>()?
                }
                None => frames.iter().map(|f| labeled_voxels(f, d, [0.0; 3])).collect::<svcn_core::Result<_>>()?,
            };
            let (tr, val) = split_val(&sets, cfg.val_frames)?;
            let t = with_log(&train.out, |rec| seg_train(tr, val, &cfg.seg, &cfg.train, rec))?;
            save_trained(&train.out, KIND_SEG, &cfg.seg, &cfg.train, &t)?;
        }
        Command::Complete { input, gen, refine, sensor, out } => {
            let c = completer(&gen, refine.as_deref())?;
            let grid = c.complete(&load_pcxl(&input)?, sensor)?;
            save_with(&out, &grid, |g, w| g.write_to(w))?;
            log::info!("wrote {} voxels to {}", grid.len(), out.display());
        }
        Command::EvalCompletion { pred, gt, report } => {
            let pred = load_with(&pred, |r| SparseGrid::read_from(r)).with_context(|| format!("loading {}", pred.display()))?;
            let (gt, _) = voxelize(&load_pcxl(&gt)?, pred.voxel_size, pred.origin)?;
            let scores = CompletionScores {
                iou: iou_sets(&pred.coords, &gt.coords),
                cd: chamfer(&pred.coords, &gt.coords, pred.voxel_size, pred.origin)?,
                pred_voxels: pred.len(),
                gt_voxels: gt.len(),
            };
            write_json(&report, &scores)?;
            println!("iou {:.6} cd {:.6}", scores.iou, scores.cd);
        }
        Command::Adapt { source_dir, target_dir, ckpts, report, mode, config, source_pattern, target_pattern, seg_out } => {
            let mut cfg: AdaptConfig = load_json(config.as_deref())?;
            cfg.train.seed = seed_or(cfg.train.seed)?;
            let (source, target) = (load_labeled_frames(&source_dir)?, load_labeled_frames(&target_dir)?);
            let (sp, tp) = (pattern_arg(&source_pattern)?, pattern_arg(&target_pattern)?);
            let completers = match (mode, &ckpts) {
                (AlignMode::Svcn, None) => return Err(usage("--mode svcn needs --ckpts")),
                (AlignMode::Svcn, Some(dir)) => {
                    let c = |side: &str| completer(&dir.join(format!("{side}_generation.svck")), Some(&dir.join(format!("{side}_refinement.svck"))));
                    Some((c("source")?, c("target")?))
                }
                _ => None,
            };
            let aligner = Aligner {
                mode,
                source_pattern: &sp,
                target_pattern: &tp,
                source_completer: completers.as_ref().map(|c| &c.0),
                target_completer: completers.as_ref().map(|c| &c.1),
            };
            let (r, trained, _) = adapt_pipeline(&source, &target, &aligner, &cfg, &mut Recorder::new())?;
            write_json(&report, &r)?;
            if let Some(path) = seg_out {
                ModelMeta::new(KIND_SEG, &cfg.seg, Some(&cfg.train))?.checkpoint(trained.selected().clone(), trained.rng)?.save(&path)?;
            }
            println!("{mode:?} miou {:.6}", r.miou);
        }
        Command::Demo { config, out } => {
            let mut cfg: AdaptationExperiment = load_json(Some(&config))?;
            cfg.seed = seed_or(cfg.seed)?;
            let report = run_demo(&cfg, &out)?;
            for r in &report.runs {
                println!("{:?} miou {:.6}", r.mode, r.miou);
            }
            if let (Some(s), Some(t)) = (report.source_completion, report.target_completion) {
                println!("completion iou source {:.4} target {:.4}", s.iou, t.iou);
            }
        }
    }
    Ok(())
}
