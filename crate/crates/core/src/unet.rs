//! Building blocks shared by the completion, refinement and segmentation networks.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{coarsen_coords, CoordSet, KernelMap};
use crate::matrix::Matrix;
use crate::tensor::{NetworkParams, ParamId, Tape, Var};

pub const LEVELS: usize = 7;
const KERNEL: usize = 3;
const KERNEL_VOLUME: usize = KERNEL * KERNEL * KERNEL;

/// Filter counts of the two convolutions at each encoder level (0..=6) and
/// each decoder level (5 down to 0).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub encoder: Vec<[usize; 2]>,
    pub decoder: Vec<[usize; 2]>,
}

impl Default for LevelSpec {
    fn default() -> Self {
        Self {
            encoder: vec![[24, 24], [24, 32], [32, 48], [48, 64], [64, 80], [80, 96], [96, 112]],
            decoder: vec![[112, 96], [80, 80], [64, 64], [48, 48], [32, 32], [16, 16]],
        }
    }
}

impl LevelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.len() != LEVELS || self.decoder.len() != LEVELS - 1 {
            return Err(Error::Config(format!(
                "level spec needs {LEVELS} encoder and {} decoder pairs, got {} and {}",
                LEVELS - 1,
                self.encoder.len(),
                self.decoder.len()
            )));
        }
        if self.encoder.iter().chain(&self.decoder).flatten().any(|&c| c == 0) {
            return Err(Error::Config("filter counts must be positive".into()));
        }
        Ok(())
    }

    /// Output width of the encoder at `level`.
    pub fn encoder_out(&self, level: usize) -> usize {
        self.encoder[level][1]
    }

    /// Filter pair of decoder `level` (0..=5).
    pub fn decoder_at(&self, level: usize) -> [usize; 2] {
        self.decoder[LEVELS - 2 - level]
    }

    /// Width of the features leaving decoder `level`; level 6 is the encoder bottleneck.
    pub fn decoder_out(&self, level: usize) -> usize {
        if level == LEVELS - 1 {
            self.encoder_out(level)
        } else {
            self.decoder_at(level)[1]
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    None,
    Batch,
}

/// Submanifold or strided convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub norm: Option<(ParamId, ParamId)>,
}

impl Conv {
    pub fn register(params: &mut NetworkParams, name: &str, cin: usize, cout: usize, bias: bool, norm: Norm, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = params.insert_uniform(format!("{name}.w"), vec![KERNEL_VOLUME, cin, cout], KERNEL_VOLUME * cin, rng)?;
        let b = if bias { Some(params.insert_zeros(format!("{name}.b"), vec![cout])?) } else { None };
        let norm = match norm {
            Norm::None => None,
            Norm::Batch => {
                let g = params.insert(format!("{name}.gamma"), vec![cout], Matrix::filled(1, cout, 1.0))?;
                Some((g, params.insert_zeros(format!("{name}.beta"), vec![cout])?))
            }
        };
        Ok(Self { w, b, norm })
    }

    pub fn bind(params: &NetworkParams, name: &str, cin: usize, cout: usize, bias: bool, norm: Norm) -> Result<Self> {
        let w = bind_shaped(params, &format!("{name}.w"), &[KERNEL_VOLUME, cin, cout])?;
        let b = if bias { Some(bind_shaped(params, &format!("{name}.b"), &[cout])?) } else { None };
        let norm = match norm {
            Norm::None => None,
            Norm::Batch => Some((bind_shaped(params, &format!("{name}.gamma"), &[cout])?, bind_shaped(params, &format!("{name}.beta"), &[cout])?)),
        };
        Ok(Self { w, b, norm })
    }

    /// Convolution, optional normalization, then ReLU.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, params: &'a NetworkParams, x: Var, kmap: &Rc<KernelMap>) -> Result<Var> {
        let y = self.linear_part(tape, params, x, None, kmap)?;
        Ok(tape.relu(y))
    }

    /// Convolution (confidence-scaled when `conf` is given) and normalization, without activation.
    pub fn linear_part<'a>(&self, tape: &mut Tape<'a>, params: &'a NetworkParams, x: Var, conf: Option<Var>, kmap: &Rc<KernelMap>) -> Result<Var> {
        let w = tape.param(params, self.w);
        let b = self.b.map(|b| tape.param(params, b));
        let mut y = match conf {
            Some(c) => tape.confidence_conv(x, c, w, b, kmap)?,
            None => tape.sparse_conv(x, w, b, kmap)?,
        };
        if let Some((g, be)) = self.norm {
            let (g, be) = (tape.param(params, g), tape.param(params, be));
            y = tape.batch_norm(y, g, be)?;
        }
        Ok(y)
    }
}

/// Per-voxel affine map.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register(params: &mut NetworkParams, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = params.insert_uniform(format!("{name}.w"), vec![cin, cout], cin, rng)?;
        let b = params.insert_zeros(format!("{name}.b"), vec![cout])?;
        Ok(Self { w, b })
    }

    pub fn bind(params: &NetworkParams, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self { w: bind_shaped(params, &format!("{name}.w"), &[cin, cout])?, b: bind_shaped(params, &format!("{name}.b"), &[cout])? })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, params: &'a NetworkParams, x: Var) -> Result<Var> {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        tape.linear(x, w, Some(b))
    }
}

fn bind_shaped(params: &NetworkParams, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = params.require(name)?;
    if params.get(id).shape != shape {
        return Err(Error::Config(format!("parameter {name} has shape {:?}, expected {shape:?}", params.get(id).shape)));
    }
    Ok(id)
}

/// Seven-level encoder: two submanifold convolutions per level, max pooling between levels.
#[derive(Clone, Debug)]
pub struct Encoder {
    convs: Vec<[Conv; 2]>,
}

/// Encoder activations and the coordinate hierarchy they live on.
pub struct Encoded {
    pub coords: Vec<CoordSet>,
    pub feats: Vec<Var>,
    pub maps: Vec<Rc<KernelMap>>,
    /// `parents[l][r]` is the level-`l+1` row of the parent of level-`l` row `r`.
    pub parents: Vec<Rc<[u32]>>,
}

impl Encoder {
    fn widths(spec: &LevelSpec, in_channels: usize) -> Vec<[usize; 3]> {
        (0..LEVELS)
            .map(|l| {
                let cin = if l == 0 { in_channels } else { spec.encoder_out(l - 1) };
                [cin, spec.encoder[l][0], spec.encoder[l][1]]
            })
            .collect()
    }

    pub fn register(params: &mut NetworkParams, prefix: &str, spec: &LevelSpec, in_channels: usize, norm: Norm, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut convs = Vec::with_capacity(LEVELS);
        for (l, [a, b, c]) in Self::widths(spec, in_channels).into_iter().enumerate() {
            convs.push([
                Conv::register(params, &format!("{prefix}.enc{l}.conv1"), a, b, true, norm, rng)?,
                Conv::register(params, &format!("{prefix}.enc{l}.conv2"), b, c, true, norm, rng)?,
            ]);
        }
        Ok(Self { convs })
    }

    pub fn bind(params: &NetworkParams, prefix: &str, spec: &LevelSpec, in_channels: usize, norm: Norm) -> Result<Self> {
        let mut convs = Vec::with_capacity(LEVELS);
        for (l, [a, b, c]) in Self::widths(spec, in_channels).into_iter().enumerate() {
            convs.push([
                Conv::bind(params, &format!("{prefix}.enc{l}.conv1"), a, b, true, norm)?,
                Conv::bind(params, &format!("{prefix}.enc{l}.conv2"), b, c, true, norm)?,
            ]);
        }
        Ok(Self { convs })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, params: &'a NetworkParams, coords: CoordSet, x: Var) -> Result<Encoded> {
        if coords.is_empty() {
            return Err(Error::Empty("encoder input has no voxels".into()));
        }
        let mut out = Encoded { coords: Vec::new(), feats: Vec::new(), maps: Vec::new(), parents: Vec::new() };
        let mut coords = coords;
        let mut x = x;
        for (l, [c1, c2]) in self.convs.iter().enumerate() {
            let kmap = Rc::new(KernelMap::submanifold(&coords, KERNEL));
            let h = c1.forward(tape, params, x, &kmap)?;
            let h = c2.forward(tape, params, h, &kmap)?;
            out.maps.push(kmap);
            out.feats.push(h);
            if l + 1 < LEVELS {
                let coarse = coarsen_coords(&coords);
                let parents = parent_rows(&coords, &coarse)?;
                x = tape.max_pool(h, &parents, coarse.len());
                out.parents.push(parents);
                out.coords.push(std::mem::replace(&mut coords, coarse));
            }
        }
        out.coords.push(coords);
        Ok(out)
    }
}

/// Row in `coarse` of each element's parent; fails on an orphan.
pub fn parent_rows(fine: &CoordSet, coarse: &CoordSet) -> Result<Rc<[u32]>> {
    fine.iter()
        .map(|c| {
            coarse
                .row_of(c.parent())
                .map(|r| r as u32)
                .ok_or_else(|| Error::Structure(format!("voxel ({}, {}, {}) has no parent in the coarser grid", c.x, c.y, c.z)))
        })
        .collect()
}

/// Decoder over the encoder's own coordinate sets: sparse unpooling, skip
/// concatenation and two convolutions per level, then a per-voxel linear map.
#[derive(Clone, Debug)]
pub struct FixedDecoder {
    convs: Vec<[Conv; 2]>,
    out: Linear,
}

impl FixedDecoder {
    fn widths(spec: &LevelSpec) -> Vec<[usize; 3]> {
        (0..LEVELS - 1)
            .map(|l| {
                let [a, b] = spec.decoder_at(l);
                [spec.decoder_out(l + 1) + spec.encoder_out(l), a, b]
            })
            .collect()
    }

    pub fn register(params: &mut NetworkParams, prefix: &str, spec: &LevelSpec, out_channels: usize, norm: Norm, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut convs = Vec::new();
        for (l, [a, b, c]) in Self::widths(spec).into_iter().enumerate() {
            convs.push([
                Conv::register(params, &format!("{prefix}.dec{l}.conv1"), a, b, true, norm, rng)?,
                Conv::register(params, &format!("{prefix}.dec{l}.conv2"), b, c, true, norm, rng)?,
            ]);
        }
        let out = Linear::register(params, &format!("{prefix}.out"), spec.decoder_out(0), out_channels, rng)?;
        Ok(Self { convs, out })
    }

    pub fn bind(params: &NetworkParams, prefix: &str, spec: &LevelSpec, out_channels: usize, norm: Norm) -> Result<Self> {
        let mut convs = Vec::new();
        for (l, [a, b, c]) in Self::widths(spec).into_iter().enumerate() {
            convs.push([
                Conv::bind(params, &format!("{prefix}.dec{l}.conv1"), a, b, true, norm)?,
                Conv::bind(params, &format!("{prefix}.dec{l}.conv2"), b, c, true, norm)?,
            ]);
        }
        let out = Linear::bind(params, &format!("{prefix}.out"), spec.decoder_out(0), out_channels)?;
        Ok(Self { convs, out })
    }

    /// Per-voxel outputs on the level-0 encoder coordinates, in their row order.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, params: &'a NetworkParams, enc: &Encoded) -> Result<Var> {
        let mut x = enc.feats[LEVELS - 1];
        for l in (0..LEVELS - 1).rev() {
            let up = tape.gather_rows(x, Rc::clone(&enc.parents[l]));
            let cat = tape.concat_cols(up, enc.feats[l])?;
            let [c1, c2] = &self.convs[l];
            let h = c1.forward(tape, params, cat, &enc.maps[l])?;
            x = c2.forward(tape, params, h, &enc.maps[l])?;
        }
        self.out.forward(tape, params, x)
    }
}

/// Encoder plus fixed-topology decoder.
#[derive(Clone, Debug)]
pub struct FixedUNet {
    pub encoder: Encoder,
    pub decoder: FixedDecoder,
}

impl FixedUNet {
    pub fn register(params: &mut NetworkParams, prefix: &str, spec: &LevelSpec, in_channels: usize, out_channels: usize, norm: Norm, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            encoder: Encoder::register(params, prefix, spec, in_channels, norm, rng)?,
            decoder: FixedDecoder::register(params, prefix, spec, out_channels, norm, rng)?,
        })
    }

    pub fn bind(params: &NetworkParams, prefix: &str, spec: &LevelSpec, in_channels: usize, out_channels: usize, norm: Norm) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            encoder: Encoder::bind(params, prefix, spec, in_channels, norm)?,
            decoder: FixedDecoder::bind(params, prefix, spec, out_channels, norm)?,
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, params: &'a NetworkParams, coords: CoordSet, x: Var) -> Result<Var> {
        let enc = self.encoder.forward(tape, params, coords, x)?;
        self.decoder.forward(tape, params, &enc)
    }
}

/// Parameter count implied by a level spec for an encoder plus fixed decoder.
pub fn fixed_unet_param_count(spec: &LevelSpec, in_channels: usize, out_channels: usize, norm: Norm) -> usize {
    let conv = |a: usize, b: usize| KERNEL_VOLUME * a * b + b + if norm == Norm::Batch { 2 * b } else { 0 };
    let enc: usize = Encoder::widths(spec, in_channels).iter().map(|&[a, b, c]| conv(a, b) + conv(b, c)).sum();
    let dec: usize = FixedDecoder::widths(spec).iter().map(|&[a, b, c]| conv(a, b) + conv(b, c)).sum();
    enc + dec + spec.decoder_out(0) * out_channels + out_channels
}
