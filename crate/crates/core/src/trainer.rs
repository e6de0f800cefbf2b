//! Two-stage completion training: the generation net first, then the
//! refinement net on the frozen generator's inference output, either stage
//! optionally fine-tuned against local discriminators.

use std::io::Write;
use std::path::PathBuf;
use std::rc::Rc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{AdvSample, DiscriminatorSet};
use crate::data::{BatchSampler, Sample};
use crate::error::{Error, Result};
use crate::grid::{coarsen_coords, CoordSet};
use crate::metrics::iou_sets;
use crate::tensor::{sharpened_sigmoid, Adam, Checkpoint, NetworkParams, RngState, Tape, Var};
use crate::svcn::{GenerationNet, GenerationOutput, Mode, RefinementNet, SvcnConfig};
use crate::unet::LEVELS;

/// How the per-level existence losses are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Balance {
    /// Each level's mean BCE counts once.
    #[default]
    PerLevel,
    /// Every supervised voxel counts once, whatever its level.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    /// Weight of the adversarial terms.
    pub lambda: f64,
    /// Sharpening factor applied to generator probabilities before a discriminator.
    pub sharpen_k: f64,
    /// Generation levels judged by a discriminator.
    pub adv_levels: Vec<usize>,
    pub seed: u64,
    pub max_steps: u64,
    pub balance: Balance,
    /// Validation cadence in steps; 0 disables validation.
    pub validate_every: u64,
    /// Checkpoint cadence in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults; see [`TrainConfig::full_scale`] for the long schedule.
    fn default() -> Self {
        Self {
            batch_size: 2,
            lr_gen: 1e-3,
            lr_disc: 1e-4,
            decay_factor: 0.7,
            decay_every: 2000,
            lambda: 0.1,
            sharpen_k: 10.0,
            adv_levels: vec![0, 1, 2],
            seed: 0,
            max_steps: 1000,
            balance: Balance::PerLevel,
            validate_every: 500,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Decay every 200000 steps, for runs on real data.
    pub fn full_scale() -> Self {
        Self { decay_every: 200_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr_gen > 0.0 && self.lr_disc > 0.0) {
            return bad(format!("learning rates must be positive (gen {}, disc {})", self.lr_gen, self.lr_disc));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_every == 0 {
            return bad(format!("invalid decay schedule: factor {} every {}", self.decay_factor, self.decay_every));
        }
        if !(self.lambda >= 0.0) || !(self.sharpen_k >= 1.0) {
            return bad(format!("need lambda >= 0 and sharpening k >= 1, got {} and {}", self.lambda, self.sharpen_k));
        }
        let mut levels = self.adv_levels.clone();
        levels.sort_unstable();
        levels.dedup();
        if levels.len() != self.adv_levels.len() || levels.iter().any(|&l| l >= LEVELS) {
            return bad(format!("adversarial levels {:?} must be distinct and below {LEVELS}", self.adv_levels));
        }
        Ok(())
    }
}

/// Step-decayed learning rate: `base · factor^⌊step / every⌋`.
pub fn lr_schedule(step: u64, base: f64, factor: f64, every: u64) -> f64 {
    base * factor.powi((step / every.max(1)) as i32)
}

/// A loss with its logged components.
pub struct LossParts {
    pub total: Var,
    pub bce: Vec<Var>,
    pub adv: Vec<Var>,
}

/// Discriminators taking part in a generator loss.
#[derive(Clone, Copy)]
pub struct AdvTerm<'a> {
    pub discs: &'a DiscriminatorSet,
    pub lambda: f64,
    pub k: f64,
}

/// Per-level existence BCE over the candidates of a train-mode generation
/// pass, plus `λ Σ L_adv` over the levels the discriminators judge.
pub fn loss_gen<'a>(tape: &mut Tape<'a>, out: &GenerationOutput, balance: Balance, adv: Option<AdvTerm<'a>>) -> Result<LossParts> {
    let total_voxels: usize = out.levels.iter().map(|l| l.candidates.len()).sum();
    let mut terms = Vec::new();
    let mut bce = Vec::new();
    for level in &out.levels {
        let targets = level.targets.clone().ok_or_else(|| Error::Config("generation loss needs a train-mode pass".into()))?;
        let b = tape.bce_with_logits(level.logits, targets, None)?;
        let w = match balance {
            Balance::PerLevel => 1.0,
            Balance::Pooled => level.candidates.len() as f64 / total_voxels.max(1) as f64,
        };
        terms.push((b, w));
        bce.push(b);
    }
    let mut advs = Vec::new();
    if let Some(a) = adv {
        for l in a.discs.levels() {
            let level = &out.levels[l];
            let t = a.discs.adv_term(tape, &a.discs.params, l, &level.candidates, level.logits, a.k)?;
            terms.push((t, a.lambda));
            advs.push(t);
        }
    }
    Ok(LossParts { total: tape.weighted_sum(&terms), bce, adv: advs })
}

/// Level-0 BCE of the refinement logits plus `λ L_adv` at level 0.
pub fn loss_refine<'a>(tape: &mut Tape<'a>, coords: &CoordSet, logits: Var, targets: Rc<[f64]>, adv: Option<AdvTerm<'a>>) -> Result<LossParts> {
    let b = tape.bce_with_logits(logits, targets, None)?;
    let mut terms = vec![(b, 1.0)];
    let mut advs = Vec::new();
    if let Some(a) = adv {
        let t = a.discs.adv_term(tape, &a.discs.params, 0, coords, logits, a.k)?;
        terms.push((t, a.lambda));
        advs.push(t);
    }
    Ok(LossParts { total: tape.weighted_sum(&terms), bce: vec![b], adv: advs })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Updates applied before this batch.
    pub step: u64,
    pub lr: f64,
    /// Batch-mean total loss.
    pub loss: f64,
    pub bce: Vec<f64>,
    pub adv: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc: Option<f64>,
    pub batch: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_iou: Option<f64>,
    pub wall_s: f64,
}

/// Destination of log lines and periodic checkpoints.
pub struct Recorder<'w> {
    sink: Option<&'w mut dyn Write>,
    checkpoint_dir: Option<PathBuf>,
    pub records: Vec<LogRecord>,
    start: Instant,
}

impl Default for Recorder<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'w> Recorder<'w> {
    pub fn new() -> Self {
        Self { sink: None, checkpoint_dir: None, records: Vec::new(), start: Instant::now() }
    }

    pub fn with_sink(mut self, sink: &'w mut dyn Write) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    fn record(&mut self, mut rec: LogRecord) -> Result<()> {
        rec.wall_s = self.start.elapsed().as_secs_f64();
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        self.records.push(rec);
        Ok(())
    }
}

/// Checkpoint metadata: what the tensors are and how they were trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub model: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

impl ModelMeta {
    pub fn new(kind: &str, model: &impl Serialize, train: Option<&TrainConfig>) -> Result<Self> {
        Ok(Self { kind: kind.into(), model: serde_json::to_value(model)?, train: train.cloned() })
    }

    pub fn parse(checkpoint: &Checkpoint) -> Result<Self> {
        Ok(serde_json::from_str(&checkpoint.meta)?)
    }

    /// Fails unless the checkpoint holds a model of `kind`.
    pub fn expect(checkpoint: &Checkpoint, kind: &str) -> Result<Self> {
        let meta = Self::parse(checkpoint)?;
        if meta.kind != kind {
            return Err(Error::Config(format!("expected a {kind} checkpoint, found {}", meta.kind)));
        }
        Ok(meta)
    }

    pub fn model<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.model.clone())?)
    }

    pub fn checkpoint(&self, params: NetworkParams, rng: RngState) -> Result<Checkpoint> {
        Ok(Checkpoint { meta: serde_json::to_string(self)?, params, rng })
    }
}

pub const KIND_GEN: &str = "generation";
pub const KIND_REFINE: &str = "refinement";
pub const KIND_DISC_GEN: &str = "disc-generation";
pub const KIND_DISC_REFINE: &str = "disc-refinement";

/// Parameters with the best validation IoU seen during training.
#[derive(Debug)]
pub struct Best {
    pub step: u64,
    pub iou: f64,
    pub params: NetworkParams,
}

/// Result of a training run.
#[derive(Debug)]
pub struct Trained {
    pub params: NetworkParams,
    pub best: Option<Best>,
    pub discs: Option<DiscriminatorSet>,
    pub rng: RngState,
}

impl Trained {
    /// The best-validation parameters when validation ran, else the final ones.
    pub fn selected(&self) -> &NetworkParams {
        self.best.as_ref().map_or(&self.params, |b| &b.params)
    }
}

pub(crate) struct LoopSpec<'s> {
    pub cfg: &'s TrainConfig,
    pub kind: &'s str,
    pub meta: ModelMeta,
    pub n_samples: usize,
}

/// The shared step loop: optional discriminator step, generator step, logging,
/// validation and checkpointing.
pub(crate) fn run_loop(
    spec: LoopSpec<'_>,
    mut params: NetworkParams,
    mut discs: Option<DiscriminatorSet>,
    mut rng: ChaCha8Rng,
    rec: &mut Recorder<'_>,
    adv_sample: impl Fn(&NetworkParams, usize) -> Result<Vec<AdvSample>>,
    loss: impl for<'a> Fn(&mut Tape<'a>, &'a NetworkParams, Option<&'a DiscriminatorSet>, usize) -> Result<LossParts>,
    validate: impl Fn(&NetworkParams) -> Result<Option<f64>>,
) -> Result<Trained> {
    let cfg = spec.cfg;
    let adam = Adam::default();
    let mut sampler = BatchSampler::new(spec.n_samples, cfg.batch_size)?;
    let mut best: Option<Best> = None;
    for step in 0..cfg.max_steps {
        let batch = sampler.next_batch(&mut rng);
        let lr = lr_schedule(step, cfg.lr_gen, cfg.decay_factor, cfg.decay_every);
        let mut disc_loss = None;
        if let Some(d) = discs.as_mut() {
            let adv_batch = batch.iter().map(|&i| adv_sample(&params, i)).collect::<Result<Vec<_>>>()?;
            let l = d.step(&adv_batch, lr_schedule(step, cfg.lr_disc, cfg.decay_factor, cfg.decay_every), &adam)?;
            if !l.is_finite() {
                return Err(Error::NonFinite { step, batch });
            }
            disc_loss = Some(l);
        }

        params.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let (mut total, mut bce, mut advs) = (0.0, Vec::new(), Vec::new());
        for &i in &batch {
            let grads = {
                let mut tape = Tape::new();
                let parts = loss(&mut tape, &params, discs.as_ref(), i)?;
                total += scale * tape.value(parts.total).item();
                accumulate_mean(&mut bce, parts.bce.iter().map(|&v| tape.value(v).item()), scale);
                accumulate_mean(&mut advs, parts.adv.iter().map(|&v| tape.value(v).item()), scale);
                tape.backward(parts.total)
            };
            grads.accumulate_into(&mut params);
        }
        if !total.is_finite() || !params.grad_norm().is_finite() {
            log::error!("non-finite loss {total} at step {step} on batch {batch:?}");
            return Err(Error::NonFinite { step, batch });
        }
        params.scale_grads(scale);
        adam.step(&mut params, lr);

        let done = step + 1;
        let mut val_iou = None;
        if cfg.validate_every > 0 && (done % cfg.validate_every == 0 || done == cfg.max_steps) {
            val_iou = validate(&params)?;
            if let Some(iou) = val_iou {
                log::info!("{} step {done}: validation IoU {iou:.4}", spec.kind);
                if best.as_ref().is_none_or(|b| iou > b.iou) {
                    best = Some(Best { step: done, iou, params: params.clone() });
                }
            }
        }
        rec.record(LogRecord { step, lr, loss: total, bce, adv: advs, disc: disc_loss, batch, val_iou, wall_s: 0.0 })?;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            if let Some(dir) = &rec.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                let ck = spec.meta.checkpoint(params.clone(), RngState::capture(&rng))?;
                ck.save(dir.join(format!("{}_{done:06}.svck", spec.kind)))?;
            }
        }
    }
    Ok(Trained { params, best, discs, rng: RngState::capture(&rng) })
}

fn accumulate_mean(acc: &mut Vec<f64>, values: impl Iterator<Item = f64>, scale: f64) {
    for (i, v) in values.enumerate() {
        if acc.len() <= i {
            acc.push(0.0);
        }
        acc[i] += scale * v;
    }
}

fn adv_term<'a>(discs: Option<&'a DiscriminatorSet>, cfg: &TrainConfig) -> Option<AdvTerm<'a>> {
    discs.map(|d| AdvTerm { discs: d, lambda: cfg.lambda, k: cfg.sharpen_k })
}

fn sharpened(values: &[f64], k: f64) -> Vec<f64> {
    values.iter().map(|&z| sharpened_sigmoid(z, k)).collect()
}

/// Batch-mean generation loss, as logged by [`train_generation`].
pub fn gen_batch_loss(
    gen: &GenerationNet,
    params: &NetworkParams,
    discs: Option<&DiscriminatorSet>,
    cfg: &TrainConfig,
    samples: &[Sample],
    batch: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for &i in batch {
        let mut tape = Tape::new();
        let out = gen.forward(&mut tape, params, &samples[i].input, Mode::Train(&samples[i].gt))?;
        let parts = loss_gen(&mut tape, &out, cfg.balance, adv_term(discs, cfg))?;
        total += tape.value(parts.total).item() / batch.len() as f64;
    }
    Ok(total)
}

/// Mean level-0 IoU of generation-only completions against the full ground truth.
pub fn eval_generation(gen: &GenerationNet, params: &NetworkParams, samples: &[Sample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let (coords, _) = gen.infer(params, &s.input)?;
        sum += iou_sets(&coords, &s.gt.levels[0]);
    }
    Ok(sum / samples.len().max(1) as f64)
}

/// Trains (or, from `init`, fine-tunes) the generation net. With
/// `adversarial` and a positive λ, discriminators on `cfg.adv_levels` are
/// trained alongside.
pub fn train_generation(
    samples: &[Sample],
    val: &[Sample],
    svcn: &SvcnConfig,
    cfg: &TrainConfig,
    init: Option<NetworkParams>,
    adversarial: bool,
    rec: &mut Recorder<'_>,
) -> Result<Trained> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (gen, params) = match init {
        Some(p) => (GenerationNet::bind(&p, svcn)?, p),
        None => {
            let mut p = NetworkParams::new();
            (GenerationNet::register(&mut p, svcn, &mut rng)?, p)
        }
    };
    let discs = if adversarial && cfg.lambda > 0.0 { Some(DiscriminatorSet::register("gen", &cfg.adv_levels, &mut rng)?) } else { None };
    let spec = LoopSpec { cfg, kind: KIND_GEN, meta: ModelMeta::new(KIND_GEN, svcn, Some(cfg))?, n_samples: samples.len() };
    let adv_sample = |p: &NetworkParams, i: usize| -> Result<Vec<AdvSample>> {
        let s = &samples[i];
        let mut tape = Tape::new();
        let out = gen.forward(&mut tape, p, &s.input, Mode::Train(&s.gt))?;
        let gt = out.gt.as_ref().expect("train mode keeps the cropped pyramid");
        Ok(cfg
            .adv_levels
            .iter()
            .map(|&l| {
                let level = &out.levels[l];
                AdvSample { level: l, fake: level.candidates.clone(), fake_values: sharpened(tape.value(level.logits).data(), cfg.sharpen_k), real: gt.levels[l].clone() }
            })
            .collect())
    };
    run_loop(
        spec,
        params,
        discs,
        rng,
        rec,
        adv_sample,
        |tape, p, d, i| {
            let s = &samples[i];
            let out = gen.forward(tape, p, &s.input, Mode::Train(&s.gt))?;
            loss_gen(tape, &out, cfg.balance, adv_term(d, cfg))
        },
        |p| if val.is_empty() { Ok(None) } else { eval_generation(&gen, p, val).map(Some) },
    )
}

/// Frozen-generator output for one sample, the input of refinement training.
#[derive(Clone, Debug)]
pub struct RefineSample {
    pub id: usize,
    pub coords: CoordSet,
    pub probs: Vec<f64>,
    /// 1 where the voxel is in the ground-truth level-0 set.
    pub targets: Rc<[f64]>,
    /// Ground-truth level-0 voxels under the input's coarsest footprint.
    pub real: CoordSet,
    pub gt: CoordSet,
}

/// Runs the generation net in inference mode on every sample.
pub fn refine_inputs(gen: &GenerationNet, gen_params: &NetworkParams, samples: &[Sample]) -> Result<Vec<RefineSample>> {
    samples
        .iter()
        .map(|s| {
            let (coords, probs) = gen.infer(gen_params, &s.input)?;
            let gt = &s.gt.levels[0];
            let targets = coords.iter().map(|c| if gt.contains(c) { 1.0 } else { 0.0 }).collect();
            let mut footprint = s.input.coords.clone();
            for _ in 1..LEVELS {
                footprint = coarsen_coords(&footprint);
            }
            let real = s.gt.crop_to(&footprint).levels.swap_remove(0);
            Ok(RefineSample { id: s.id, coords, probs, targets, real, gt: gt.clone() })
        })
        .collect()
}

/// Mean level-0 IoU of refined completions.
pub fn eval_refinement(net: &RefinementNet, params: &NetworkParams, threshold: f64, samples: &[RefineSample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let kept = refined_set(net, params, threshold, s)?;
        sum += iou_sets(&kept, &s.gt);
    }
    Ok(sum / samples.len().max(1) as f64)
}

/// Generated voxels whose refined probability reaches `threshold`.
pub fn refined_set(net: &RefinementNet, params: &NetworkParams, threshold: f64, s: &RefineSample) -> Result<CoordSet> {
    let probs = net.infer(params, &s.coords, &s.probs)?;
    Ok(s.coords.iter().zip(&probs).filter(|&(_, &p)| p >= threshold).map(|(c, _)| c).collect())
}

/// Batch-mean refinement loss, as logged by [`train_refinement`].
pub fn refine_batch_loss(
    net: &RefinementNet,
    params: &NetworkParams,
    discs: Option<&DiscriminatorSet>,
    cfg: &TrainConfig,
    samples: &[RefineSample],
    batch: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for &i in batch {
        let s = &samples[i];
        let mut tape = Tape::new();
        let logits = net.forward(&mut tape, params, &s.coords, &s.probs)?;
        let parts = loss_refine(&mut tape, &s.coords, logits, Rc::clone(&s.targets), adv_term(discs, cfg))?;
        total += tape.value(parts.total).item() / batch.len() as f64;
    }
    Ok(total)
}

/// Trains the refinement net on frozen generator outputs; with
/// `adversarial` and a positive λ, a level-0 discriminator is trained alongside.
pub fn train_refinement(
    samples: &[RefineSample],
    val: &[RefineSample],
    svcn: &SvcnConfig,
    cfg: &TrainConfig,
    init: Option<NetworkParams>,
    adversarial: bool,
    rec: &mut Recorder<'_>,
) -> Result<Trained> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (net, params) = match init {
        Some(p) => (RefinementNet::bind(&p, svcn)?, p),
        None => {
            let mut p = NetworkParams::new();
            (RefinementNet::register(&mut p, svcn, &mut rng)?, p)
        }
    };
    let discs = if adversarial && cfg.lambda > 0.0 { Some(DiscriminatorSet::register("refine", &[0], &mut rng)?) } else { None };
    let spec = LoopSpec { cfg, kind: KIND_REFINE, meta: ModelMeta::new(KIND_REFINE, svcn, Some(cfg))?, n_samples: samples.len() };
    run_loop(
        spec,
        params,
        discs,
        rng,
        rec,
        |p, i| {
            let s = &samples[i];
            let mut tape = Tape::new();
            let logits = net.forward(&mut tape, p, &s.coords, &s.probs)?;
            Ok(vec![AdvSample { level: 0, fake: s.coords.clone(), fake_values: sharpened(tape.value(logits).data(), cfg.sharpen_k), real: s.real.clone() }])
        },
        |tape, p, d, i| {
            let s = &samples[i];
            let logits = net.forward(tape, p, &s.coords, &s.probs)?;
            loss_refine(tape, &s.coords, logits, Rc::clone(&s.targets), adv_term(d, cfg))
        },
        |p| if val.is_empty() { Ok(None) } else { eval_refinement(&net, p, svcn.threshold, val).map(Some) },
    )
}
