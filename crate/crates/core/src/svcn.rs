//! Sparse voxel completion network: structure generation with dense
//! upsampling and pruning, followed by fixed-topology refinement.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::grid::{coarsen_coords, dense_upsample_coords, voxelize, CoordSet, KernelMap, SparseGrid, VoxelCoord};
use crate::matrix::Matrix;
use crate::tensor::{NetworkParams, Tape, Var, ZERO_ROW};
use crate::unet::{parent_rows, Conv, Encoder, FixedUNet, LevelSpec, Linear, Norm, LEVELS};

/// Base voxel size in meters.
pub const VOXEL_SIZE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvcnConfig {
    pub levels: LevelSpec,
    pub norm: Norm,
    pub threshold: f64,
    pub voxel_size: f64,
}

impl Default for SvcnConfig {
    fn default() -> Self {
        Self { levels: LevelSpec::default(), norm: Norm::None, threshold: 0.5, voxel_size: VOXEL_SIZE }
    }
}

impl SvcnConfig {
    pub fn validate(&self) -> Result<()> {
        self.levels.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("pruning threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config(format!("voxel size must be positive, got {}", self.voxel_size)));
        }
        Ok(())
    }
}

/// Ground-truth occupancy at levels 0..=6.
#[derive(Clone, Debug, PartialEq)]
pub struct GtPyramid {
    pub levels: Vec<CoordSet>,
}

impl GtPyramid {
    /// Coarsens a level-0 set six times.
    pub fn from_level0(level0: CoordSet) -> Self {
        let mut levels = vec![level0];
        for l in 1..LEVELS {
            let next = coarsen_coords(&levels[l - 1]);
            levels.push(next);
        }
        Self { levels }
    }

    /// Keeps only level-0 voxels whose level-6 ancestor is in `footprint`.
    pub fn crop_to(&self, footprint: &CoordSet) -> Self {
        let shift = (LEVELS - 1) as i32;
        let keep = self.levels[0].iter().filter(|c| footprint.contains(VoxelCoord::new(c.x >> shift, c.y >> shift, c.z >> shift)));
        Self::from_level0(keep.collect())
    }
}

/// Voxelizes the complete cloud at `d`, then coarsens.
pub fn gt_pyramid(complete: &PointCloud, d: f64, origin: Point3) -> Result<GtPyramid> {
    let (grid, _) = voxelize(complete, d, origin)?;
    Ok(GtPyramid::from_level0(grid.coords))
}

pub enum Mode<'g> {
    Train(&'g GtPyramid),
    Infer,
}

/// One decoder level of the generation net (level 6 is the bottleneck head).
pub struct LevelOutput {
    pub candidates: CoordSet,
    pub logits: Var,
    pub probs: Vec<f64>,
    /// Existence targets on the candidates (train mode only).
    pub targets: Option<Rc<[f64]>>,
    /// Candidates that coincide with encoder voxels.
    pub intersection: CoordSet,
    pub retained: CoordSet,
}

pub struct GenerationOutput {
    /// Indexed by level 0..=6.
    pub levels: Vec<LevelOutput>,
    /// The cropped pyramid used as supervision in train mode.
    pub gt: Option<GtPyramid>,
}

impl GenerationOutput {
    /// Retained level-0 voxels and their existence probabilities.
    pub fn final_voxels(&self) -> (CoordSet, Vec<f64>) {
        let l0 = &self.levels[0];
        let probs = l0.retained.iter().map(|c| l0.probs[l0.candidates.row_of(c).expect("retained voxel is a candidate")]).collect();
        (l0.retained.clone(), probs)
    }
}

/// Structure generation network.
#[derive(Clone, Debug)]
pub struct GenerationNet {
    cfg: SvcnConfig,
    encoder: Encoder,
    decoder: Vec<[Conv; 2]>,
    heads: Vec<Linear>,
}

pub const GEN_PREFIX: &str = "gen";
pub const REFINE_PREFIX: &str = "refine";

impl GenerationNet {
    fn decoder_widths(spec: &LevelSpec) -> Vec<[usize; 3]> {
        (0..LEVELS - 1)
            .map(|l| {
                let [a, b] = spec.decoder_at(l);
                [spec.decoder_out(l + 1) + spec.encoder_out(l), a, b]
            })
            .collect()
    }

    pub fn register(params: &mut NetworkParams, cfg: &SvcnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let spec = &cfg.levels;
        let encoder = Encoder::register(params, GEN_PREFIX, spec, 1, cfg.norm, rng)?;
        let mut decoder = Vec::new();
        for (l, [a, b, c]) in Self::decoder_widths(spec).into_iter().enumerate() {
            decoder.push([
                Conv::register(params, &format!("{GEN_PREFIX}.dec{l}.conv1"), a, b, true, cfg.norm, rng)?,
                Conv::register(params, &format!("{GEN_PREFIX}.dec{l}.conv2"), b, c, true, cfg.norm, rng)?,
            ]);
        }
        let heads = (0..LEVELS)
            .map(|l| Linear::register(params, &format!("{GEN_PREFIX}.head{l}"), spec.decoder_out(l), 1, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), encoder, decoder, heads })
    }

    pub fn bind(params: &NetworkParams, cfg: &SvcnConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = &cfg.levels;
        let encoder = Encoder::bind(params, GEN_PREFIX, spec, 1, cfg.norm)?;
        let mut decoder = Vec::new();
        for (l, [a, b, c]) in Self::decoder_widths(spec).into_iter().enumerate() {
            decoder.push([
                Conv::bind(params, &format!("{GEN_PREFIX}.dec{l}.conv1"), a, b, true, cfg.norm)?,
                Conv::bind(params, &format!("{GEN_PREFIX}.dec{l}.conv2"), b, c, true, cfg.norm)?,
            ]);
        }
        let heads = (0..LEVELS).map(|l| Linear::bind(params, &format!("{GEN_PREFIX}.head{l}"), spec.decoder_out(l), 1)).collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), encoder, decoder, heads })
    }

    pub fn config(&self) -> &SvcnConfig {
        &self.cfg
    }

    /// Runs the generation net on a level-0 occupancy grid.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, params: &'a NetworkParams, input: &SparseGrid, mode: Mode<'_>) -> Result<GenerationOutput> {
        if input.is_empty() {
            return Err(Error::Empty("generation input grid has no voxels".into()));
        }
        let x0 = tape.constant(Matrix::filled(input.len(), 1, 1.0));
        let enc = self.encoder.forward(tape, params, input.coords.clone(), x0)?;
        let gt = match mode {
            Mode::Train(gt) => Some(gt.crop_to(&enc.coords[LEVELS - 1])),
            Mode::Infer => None,
        };
        let mut levels: Vec<Option<LevelOutput>> = (0..LEVELS).map(|_| None).collect();

        // Bottleneck head: candidates are the encoder's level-6 voxels.
        let top = LEVELS - 1;
        let mut feats = enc.feats[top];
        let mut level = self.head(tape, params, top, enc.coords[top].clone(), feats, &enc.coords[top], gt.as_ref())?;
        let mut keep = retained_rows(&level);
        feats = tape.gather_rows(feats, keep);
        levels[top] = Some(level);

        for l in (0..top).rev() {
            let prev = levels[l + 1].as_ref().expect("coarser level decoded");
            let candidates = dense_upsample_coords(&prev.retained);
            if candidates.is_empty() {
                log::warn!("generation pruned every voxel above level {l}");
            }
            let up_rows = parent_rows(&candidates, &prev.retained)?;
            let up = tape.gather_rows(feats, up_rows);
            let skip_rows: Rc<[u32]> = candidates.iter().map(|c| enc.coords[l].row_of(c).map_or(ZERO_ROW, |r| r as u32)).collect();
            let skip = tape.gather_rows(enc.feats[l], skip_rows);
            let cat = tape.concat_cols(up, skip)?;
            let kmap = Rc::new(KernelMap::submanifold(&candidates, 3));
            let [c1, c2] = &self.decoder[l];
            let h = c1.forward(tape, params, cat, &kmap)?;
            let h = c2.forward(tape, params, h, &kmap)?;
            level = self.head(tape, params, l, candidates, h, &enc.coords[l], gt.as_ref())?;
            keep = retained_rows(&level);
            feats = tape.gather_rows(h, keep);
            levels[l] = Some(level);
        }
        Ok(GenerationOutput { levels: levels.into_iter().map(|l| l.expect("every level decoded")).collect(), gt })
    }

    #[allow(clippy::too_many_arguments)]
    fn head<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &'a NetworkParams,
        l: usize,
        candidates: CoordSet,
        h: Var,
        encoder_coords: &CoordSet,
        gt: Option<&GtPyramid>,
    ) -> Result<LevelOutput> {
        let logits = self.heads[l].forward(tape, params, h)?;
        let probs: Vec<f64> = tape.value(logits).data().iter().map(|&z| crate::tensor::sharpened_sigmoid(z, 1.0)).collect();
        let intersection: CoordSet = candidates.iter().filter(|c| encoder_coords.contains(*c)).collect();
        let (targets, retained) = match gt {
            Some(gt) => {
                let g = &gt.levels[l];
                let targets: Rc<[f64]> = candidates.iter().map(|c| if g.contains(c) { 1.0 } else { 0.0 }).collect();
                let retained = candidates.iter().filter(|&c| g.contains(c) || encoder_coords.contains(c)).collect();
                (Some(targets), retained)
            }
            None => {
                let retained = candidates
                    .iter()
                    .zip(&probs)
                    .filter(|&(c, &p)| p >= self.cfg.threshold || encoder_coords.contains(c))
                    .map(|(c, _)| c)
                    .collect();
                (None, retained)
            }
        };
        Ok(LevelOutput { candidates, logits, probs, targets, intersection, retained })
    }

    /// Inference-mode level-0 voxels and probabilities, without gradients.
    pub fn infer(&self, params: &NetworkParams, input: &SparseGrid) -> Result<(CoordSet, Vec<f64>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, params, input, Mode::Infer)?;
        Ok(out.final_voxels())
    }
}

fn retained_rows(level: &LevelOutput) -> Rc<[u32]> {
    level.retained.iter().map(|c| level.candidates.row_of(c).expect("retained voxel is a candidate") as u32).collect()
}

/// Structure refinement network: re-scores a fixed voxel set.
#[derive(Clone, Debug)]
pub struct RefinementNet {
    net: FixedUNet,
}

impl RefinementNet {
    pub fn register(params: &mut NetworkParams, cfg: &SvcnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { net: FixedUNet::register(params, REFINE_PREFIX, &cfg.levels, 1, 1, cfg.norm, rng)? })
    }

    pub fn bind(params: &NetworkParams, cfg: &SvcnConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { net: FixedUNet::bind(params, REFINE_PREFIX, &cfg.levels, 1, 1, cfg.norm)? })
    }

    /// Existence logits for every voxel of `coords`, in row order; `probs` are the generation probabilities.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, params: &'a NetworkParams, coords: &CoordSet, probs: &[f64]) -> Result<Var> {
        if coords.is_empty() {
            return Err(Error::Empty("refinement input has no voxels".into()));
        }
        let x = tape.constant(Matrix::column(probs.to_vec()));
        self.net.forward(tape, params, coords.clone(), x)
    }

    pub fn infer(&self, params: &NetworkParams, coords: &CoordSet, probs: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, params, coords, probs)?;
        Ok(tape.value(logits).data().iter().map(|&z| crate::tensor::sharpened_sigmoid(z, 1.0)).collect())
    }
}

/// A trained completion model for one sensor domain.
#[derive(Clone, Debug)]
pub struct Completer {
    pub cfg: SvcnConfig,
    pub gen: GenerationNet,
    pub gen_params: NetworkParams,
    pub refine: Option<(RefinementNet, NetworkParams)>,
}

impl Completer {
    pub fn new(cfg: SvcnConfig, gen_params: NetworkParams, refine_params: Option<NetworkParams>) -> Result<Self> {
        let gen = GenerationNet::bind(&gen_params, &cfg)?;
        let refine = match refine_params {
            Some(p) => Some((RefinementNet::bind(&p, &cfg)?, p)),
            None => None,
        };
        Ok(Self { cfg, gen, gen_params, refine })
    }

    /// Completes a sensor-relative frame on the lattice anchored at `origin`.
    pub fn complete_grid(&self, input: &SparseGrid) -> Result<CoordSet> {
        let (coords, probs) = self.gen.infer(&self.gen_params, input)?;
        match &self.refine {
            None => Ok(coords),
            Some(_) if coords.is_empty() => Ok(coords),
            Some((net, params)) => {
                let refined = net.infer(params, &coords, &probs)?;
                Ok(coords.iter().zip(&refined).filter(|&(_, &p)| p >= self.cfg.threshold).map(|(c, _)| c).collect())
            }
        }
    }

    pub fn complete(&self, input: &PointCloud, origin: Point3) -> Result<SparseGrid> {
        let (grid, _) = voxelize(input, self.cfg.voxel_size, origin)?;
        if grid.is_empty() {
            return Err(Error::Empty("input cloud has no points".into()));
        }
        let coords = self.complete_grid(&grid)?;
        Ok(SparseGrid::occupancy(0, self.cfg.voxel_size, origin, coords))
    }
}
