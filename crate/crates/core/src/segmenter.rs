//! Sparse U-Net segmentation in the canonical domain and the complete-and-label
//! adaptation pipeline with its no-adaptation and handcrafted baselines.

use std::cell::Cell;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud, UNLABELED};
use crate::error::{Error, Result};
use crate::grid::{CoordSet, SparseGrid};
use crate::kdtree::KdTree;
use crate::lidar::{beam_resample_b1, linear_interp_b2, range_project, BeamMode, PolarPattern, DEFAULT_WIDTH};
use crate::matrix::Matrix;
use crate::metrics::{labeled_voxels, prop_labels, proj_labels, seg_miou, LabeledVoxelSet, MiouReport};
use crate::scene::Palette;
use crate::svcn::{Completer, VOXEL_SIZE};
use crate::tensor::{NetworkParams, Tape, Var};
use crate::trainer::{run_loop, LossParts, LoopSpec, ModelMeta, Recorder, TrainConfig, Trained};
use crate::unet::{FixedUNet, LevelSpec, Norm};

pub const SEG_PREFIX: &str = "seg";
pub const KIND_SEG: &str = "segmenter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub levels: LevelSpec,
    pub norm: Norm,
    pub palette: Palette,
    pub voxel_size: f64,
    /// Random z-rotation and x/y flips of every training sample.
    pub augment: bool,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self { levels: LevelSpec::default(), norm: Norm::None, palette: Palette::TwoClass, voxel_size: VOXEL_SIZE, augment: true }
    }
}

/// Voxel segmenter: fixed-topology U-Net with a per-voxel linear classifier.
#[derive(Clone, Debug)]
pub struct SegNet {
    cfg: SegConfig,
    net: FixedUNet,
}

impl SegNet {
    pub fn register(params: &mut NetworkParams, cfg: &SegConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.levels.validate()?;
        let net = FixedUNet::register(params, SEG_PREFIX, &cfg.levels, 1, cfg.palette.num_classes(), cfg.norm, rng)?;
        Ok(Self { cfg: cfg.clone(), net })
    }

    pub fn bind(params: &NetworkParams, cfg: &SegConfig) -> Result<Self> {
        cfg.levels.validate()?;
        let net = FixedUNet::bind(params, SEG_PREFIX, &cfg.levels, 1, cfg.palette.num_classes(), cfg.norm)?;
        Ok(Self { cfg: cfg.clone(), net })
    }

    pub fn config(&self) -> &SegConfig {
        &self.cfg
    }

    /// Class logits, one row per voxel of `coords`.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, params: &'a NetworkParams, coords: &CoordSet) -> Result<Var> {
        if coords.is_empty() {
            return Err(Error::Empty("segmentation input has no voxels".into()));
        }
        let x = tape.constant(Matrix::filled(coords.len(), 1, 1.0));
        self.net.forward(tape, params, coords.clone(), x)
    }

    pub fn logits(&self, params: &NetworkParams, coords: &CoordSet) -> Result<Matrix> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, params, coords)?;
        Ok(tape.value(v).clone())
    }

    /// Argmax label of every voxel of `grid`.
    pub fn predict(&self, params: &NetworkParams, grid: &SparseGrid) -> Result<LabeledVoxelSet> {
        let labels = argmax_rows(&self.logits(params, &grid.coords)?);
        LabeledVoxelSet::new(grid.clone(), labels)
    }
}

/// Row-wise argmax; the smallest class wins ties.
pub fn argmax_rows(m: &Matrix) -> Vec<u32> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

/// Rotates a cloud by `angle` about z, then mirrors x and/or y.
pub fn augment_cloud(cloud: &PointCloud, angle: f64, flip_x: bool, flip_y: bool) -> PointCloud {
    let (s, c) = angle.sin_cos();
    let points = cloud
        .points
        .iter()
        .map(|&[x, y, z]| {
            let (mut u, mut v) = (c * x - s * y, s * x + c * y);
            if flip_x {
                u = -u;
            }
            if flip_y {
                v = -v;
            }
            [u, v, z]
        })
        .collect();
    PointCloud { points, labels: cloud.labels.clone() }
}

/// Voxel centers carrying the voxel labels, the form augmentation works on.
pub fn voxels_as_cloud(set: &LabeledVoxelSet) -> PointCloud {
    PointCloud { points: set.grid.centers(), labels: Some(set.labels.clone()) }
}

/// One augmented draw of a training sample, re-voxelized with majority labels.
fn augmented(set: &LabeledVoxelSet, rng: &mut ChaCha8Rng) -> Result<LabeledVoxelSet> {
    let angle = rng.gen_range(0.0..2.0 * PI);
    let (fx, fy) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
    let cloud = augment_cloud(&voxels_as_cloud(set), angle, fx, fy);
    labeled_voxels(&cloud, set.grid.voxel_size, set.grid.origin)
}

/// Voxel-level mIoU of predictions on labeled voxel sets.
pub fn eval_voxels(net: &SegNet, params: &NetworkParams, sets: &[LabeledVoxelSet]) -> Result<MiouReport> {
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for s in sets {
        pred.extend(net.predict(params, &s.grid)?.labels);
        gt.extend_from_slice(&s.labels);
    }
    seg_miou(&pred, &gt, &net.cfg.palette.eval_classes())
}

/// Trains the segmenter with masked cross-entropy on labeled voxel sets.
pub fn seg_train(samples: &[LabeledVoxelSet], val: &[LabeledVoxelSet], cfg: &SegConfig, train: &TrainConfig, rec: &mut Recorder<'_>) -> Result<Trained> {
    train.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("no segmentation training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut params = NetworkParams::new();
    let net = SegNet::register(&mut params, cfg, &mut rng)?;
    let spec = LoopSpec { cfg: train, kind: KIND_SEG, meta: ModelMeta::new(KIND_SEG, cfg, Some(train))?, n_samples: samples.len() };
    // Augmentation draws come from their own stream so that a run without
    // augmentation consumes exactly the same batch order.
    let draws = Cell::new(0u64);
    let aug_seed = train.seed ^ 0x5E6_A06;
    run_loop(
        spec,
        params,
        None,
        rng,
        rec,
        |_, _| Ok(Vec::new()),
        |tape, p, _, i| {
            let owned;
            let set = if cfg.augment {
                let mut r = ChaCha8Rng::seed_from_u64(aug_seed);
                r.set_stream(draws.get());
                draws.set(draws.get() + 1);
                owned = augmented(&samples[i], &mut r)?;
                &owned
            } else {
                &samples[i]
            };
            if set.labels.iter().all(|&l| l == UNLABELED) {
                log::warn!("segmentation sample {i} has no labeled voxels; skipped");
            }
            let logits = net.forward(tape, p, &set.grid.coords)?;
            let ce = tape.masked_cross_entropy(logits, set.labels.clone().into())?;
            Ok(LossParts { total: ce, bce: vec![ce], adv: Vec::new() })
        },
        |p| if val.is_empty() { Ok(None) } else { eval_voxels(&net, p, val).map(|r| Some(r.miou)) },
    )
}

/// How source and target frames are brought together before segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Plain voxelization of both domains.
    None,
    /// Source beams halved or doubled towards the target beam count.
    B1,
    /// Both domains densified by interpolation along adjacent beams.
    B2,
    /// Both domains completed into the canonical domain.
    Svcn,
}

impl std::str::FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "b1" => Ok(Self::B1),
            "b2" => Ok(Self::B2),
            "svcn" => Ok(Self::Svcn),
            _ => Err(Error::Config(format!("unknown alignment mode {s:?} (expected none, b1, b2 or svcn)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub seg: SegConfig,
    pub train: TrainConfig,
    /// Point spacing of the interpolation baseline, meters.
    pub b2_delta: f64,
    pub range_width: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { seg: SegConfig::default(), train: TrainConfig::default(), b2_delta: 0.1, range_width: DEFAULT_WIDTH }
    }
}

/// Everything an alignment mode may need besides the frames.
pub struct Aligner<'a> {
    pub mode: AlignMode,
    pub source_pattern: &'a PolarPattern,
    pub target_pattern: &'a PolarPattern,
    pub source_completer: Option<&'a Completer>,
    pub target_completer: Option<&'a Completer>,
}

impl Aligner<'_> {
    fn completer(&self, source: bool) -> Result<&Completer> {
        let c = if source { self.source_completer } else { self.target_completer };
        c.ok_or_else(|| Error::Config(format!("svcn alignment needs a {} completion checkpoint", if source { "source" } else { "target" })))
    }

    /// Source frame (sensor-relative, labeled) to a labeled training voxel set.
    pub fn source_set(&self, frame: &PointCloud, cfg: &AdaptConfig) -> Result<LabeledVoxelSet> {
        let d = cfg.seg.voxel_size;
        let labeled = labeled_voxels(frame, d, [0.0; 3])?;
        match self.mode {
            AlignMode::None => Ok(labeled),
            AlignMode::B1 => {
                let (src, tgt) = (self.source_pattern.beam_thetas(), self.target_pattern.beam_thetas());
                let mode = if src.len() > tgt.len() { BeamMode::Down } else { BeamMode::Up };
                let img = range_project(&frame.points, &src, cfg.range_width, [0.0; 3])?;
                labeled_voxels(&label_by_nearest(beam_resample_b1(&img, mode), frame)?, d, [0.0; 3])
            }
            AlignMode::B2 => {
                let img = range_project(&frame.points, &self.source_pattern.beam_thetas(), cfg.range_width, [0.0; 3])?;
                let mut dense = label_by_nearest(linear_interp_b2(&img, cfg.b2_delta)?, frame)?;
                dense.append(frame);
                labeled_voxels(&dense, d, [0.0; 3])
            }
            AlignMode::Svcn => {
                let completed = self.completer(true)?.complete(frame, [0.0; 3])?;
                prop_labels(&labeled, &completed)
            }
        }
    }

    /// Target frame (sensor-relative) to the voxel grid the segmenter labels.
    pub fn target_grid(&self, frame: &PointCloud, cfg: &AdaptConfig) -> Result<SparseGrid> {
        let d = cfg.seg.voxel_size;
        let points = match self.mode {
            AlignMode::None | AlignMode::B1 => frame.clone(),
            AlignMode::B2 => {
                let img = range_project(&frame.points, &self.target_pattern.beam_thetas(), cfg.range_width, [0.0; 3])?;
                let mut dense = PointCloud::new(linear_interp_b2(&img, cfg.b2_delta)?);
                dense.append(&PointCloud::new(frame.points.clone()));
                dense
            }
            AlignMode::Svcn => return self.completer(false)?.complete(frame, [0.0; 3]),
        };
        Ok(crate::grid::voxelize(&points, d, [0.0; 3])?.0)
    }
}

/// Gives each point the label of the nearest point of `reference`.
fn label_by_nearest(points: Vec<Point3>, reference: &PointCloud) -> Result<PointCloud> {
    if reference.is_empty() {
        return Err(Error::Empty("no reference points to copy labels from".into()));
    }
    let tree = KdTree::new(reference.points.clone());
    let labels = points.iter().map(|&p| reference.label(tree.nearest(p).expect("nonempty").0)).collect();
    PointCloud::labeled(points, labels)
}

/// Result of one adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub mode: AlignMode,
    pub miou: f64,
    pub per_class_iou: std::collections::BTreeMap<u32, f64>,
    pub target_frames: usize,
    pub target_points: usize,
}

/// Per-point labels of a target frame from a trained segmenter.
pub fn label_target(aligner: &Aligner<'_>, net: &SegNet, params: &NetworkParams, frame: &PointCloud, cfg: &AdaptConfig) -> Result<Vec<u32>> {
    let grid = aligner.target_grid(frame, cfg)?;
    let pred = net.predict(params, &grid)?;
    proj_labels(&pred, frame)
}

/// Scores per-point predictions of the target frames against their labels.
pub fn evaluate_target(predictions: &[Vec<u32>], frames: &[PointCloud], palette: Palette) -> Result<MiouReport> {
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for (p, f) in predictions.iter().zip(frames) {
        pred.extend_from_slice(p);
        gt.extend((0..f.len()).map(|i| f.label(i)));
    }
    seg_miou(&pred, &gt, &palette.eval_classes())
}

/// Trains a segmenter on aligned source frames, labels the aligned target
/// frames, and scores the projected per-point labels.
pub fn adapt_pipeline(
    source: &[PointCloud],
    target: &[PointCloud],
    aligner: &Aligner<'_>,
    cfg: &AdaptConfig,
    rec: &mut Recorder<'_>,
) -> Result<(AdaptReport, Trained, Vec<Vec<u32>>)> {
    if target.iter().any(|f| f.labels.is_none()) {
        return Err(Error::Config("target evaluation frames need ground-truth labels".into()));
    }
    let sets = source.iter().map(|f| aligner.source_set(f, cfg)).collect::<Result<Vec<_>>>()?;
    let trained = seg_train(&sets, &[], &cfg.seg, &cfg.train, rec)?;
    let net = SegNet::bind(trained.selected(), &cfg.seg)?;
    let predictions = target.iter().map(|f| label_target(aligner, &net, trained.selected(), f, cfg)).collect::<Result<Vec<_>>>()?;
    let m = evaluate_target(&predictions, target, cfg.seg.palette)?;
    let report = AdaptReport {
        mode: aligner.mode,
        miou: m.miou,
        per_class_iou: m.per_class,
        target_frames: target.len(),
        target_points: target.iter().map(PointCloud::len).sum(),
    };
    Ok((report, trained, predictions))
}
