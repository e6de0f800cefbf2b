//! Local discriminators over sparse existence fields and the adversarial loss terms.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{coarsen_coords, CoordSet, KernelMap};
use crate::matrix::Matrix;
use crate::tensor::{Adam, NetworkParams, Tape, Var};
use crate::unet::{Conv, Linear, Norm};

/// Channel widths from the existence input through the four strided layers.
pub const DISC_CHANNELS: [usize; 5] = [1, 32, 64, 64, 128];

/// Name prefix of every discriminator tensor.
pub const DISC_PREFIX: &str = "disc:";

/// Fully convolutional discriminator: four confidence-aware stride-2
/// convolutions and a per-site linear score.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv>,
    out: Linear,
}

pub struct DiscOutput {
    /// Output sites, four coarsenings above the input.
    pub sites: CoordSet,
    /// One logit per site.
    pub logits: Var,
}

impl Discriminator {
    pub fn register(params: &mut NetworkParams, name: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut convs = Vec::new();
        for i in 0..4 {
            convs.push(Conv::register(params, &format!("{DISC_PREFIX}{name}.conv{i}"), DISC_CHANNELS[i], DISC_CHANNELS[i + 1], false, Norm::None, rng)?);
        }
        let out = Linear::register(params, &format!("{DISC_PREFIX}{name}.out"), DISC_CHANNELS[4], 1, rng)?;
        Ok(Self { convs, out })
    }

    pub fn bind(params: &NetworkParams, name: &str) -> Result<Self> {
        let mut convs = Vec::new();
        for i in 0..4 {
            convs.push(Conv::bind(params, &format!("{DISC_PREFIX}{name}.conv{i}"), DISC_CHANNELS[i], DISC_CHANNELS[i + 1], false, Norm::None)?);
        }
        let out = Linear::bind(params, &format!("{DISC_PREFIX}{name}.out"), DISC_CHANNELS[4], 1)?;
        Ok(Self { convs, out })
    }

    /// Scalar parameter count of one discriminator.
    pub fn param_count() -> usize {
        let convs: usize = DISC_CHANNELS.windows(2).map(|w| 27 * w[0] * w[1]).sum();
        convs + DISC_CHANNELS[4] + 1
    }

    /// Scores the existence field `v` (one column, values in [0, 1]) on `coords`.
    ///
    /// `v` is both the input feature and the confidence of the first layer.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, params: &'a NetworkParams, coords: &CoordSet, v: Var) -> Result<DiscOutput> {
        if coords.is_empty() {
            return Err(Error::Empty("discriminator input has no voxels".into()));
        }
        if tape.value(v).shape() != (coords.len(), 1) {
            return Err(Error::Config(format!("existence field shape {:?} for {} voxels", tape.value(v).shape(), coords.len())));
        }
        let mut coords = coords.clone();
        let mut x = v;
        for (i, conv) in self.convs.iter().enumerate() {
            let coarse = coarsen_coords(&coords);
            let kmap = Rc::new(KernelMap::build(&coords, &coarse, 3, 2));
            let y = conv.linear_part(tape, params, x, (i == 0).then_some(v), &kmap)?;
            x = tape.relu(y);
            coords = coarse;
        }
        let logits = self.out.forward(tape, params, x)?;
        Ok(DiscOutput { sites: coords, logits })
    }

    /// Per-site probabilities of being real.
    pub fn scores(&self, params: &NetworkParams, coords: &CoordSet, v: &[f64]) -> Result<(CoordSet, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::column(v.to_vec()));
        let out = self.forward(&mut tape, params, coords, x)?;
        let scores = tape.value(out.logits).data().iter().map(|&z| crate::tensor::sharpened_sigmoid(z, 1.0)).collect();
        Ok((out.sites, scores))
    }
}

/// Discriminator loss: mean `-log(1 - D)` over fake sites plus mean `-log D` over real sites.
pub fn loss_d(tape: &mut Tape<'_>, fake_logits: Var, real_logits: Var) -> Result<Var> {
    let nf = tape.value(fake_logits).rows();
    let nr = tape.value(real_logits).rows();
    let fake = tape.bce_with_logits(fake_logits, vec![0.0; nf].into(), None)?;
    let real = tape.bce_with_logits(real_logits, vec![1.0; nr].into(), None)?;
    Ok(tape.weighted_sum(&[(fake, 1.0), (real, 1.0)]))
}

/// Generator-side loss: mean `-log D` over fake sites.
pub fn loss_adv(tape: &mut Tape<'_>, fake_logits: Var) -> Result<Var> {
    let n = tape.value(fake_logits).rows();
    tape.bce_with_logits(fake_logits, vec![1.0; n].into(), None)
}

/// Discriminators keyed by the level they judge, sharing one parameter store.
#[derive(Debug)]
pub struct DiscriminatorSet {
    pub params: NetworkParams,
    nets: Vec<(usize, Discriminator)>,
}

impl DiscriminatorSet {
    fn name(stage: &str, level: usize) -> String {
        format!("{stage}.l{level}")
    }

    pub fn register(stage: &str, levels: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = NetworkParams::new();
        let mut nets = Vec::new();
        for &l in levels {
            nets.push((l, Discriminator::register(&mut params, &Self::name(stage, l), rng)?));
        }
        Ok(Self { params, nets })
    }

    pub fn bind(params: NetworkParams, stage: &str, levels: &[usize]) -> Result<Self> {
        let nets = levels.iter().map(|&l| Ok((l, Discriminator::bind(&params, &Self::name(stage, l))?))).collect::<Result<_>>()?;
        Ok(Self { params, nets })
    }

    pub fn levels(&self) -> Vec<usize> {
        self.nets.iter().map(|(l, _)| *l).collect()
    }

    pub fn get(&self, level: usize) -> Option<&Discriminator> {
        self.nets.iter().find(|(l, _)| *l == level).map(|(_, d)| d)
    }

    /// One discriminator update on a batch; each sample lists, per level,
    /// the fake voxels with their (sharpened) existence values and the real voxels.
    /// Returns the batch-mean loss before the update.
    pub fn step(&mut self, batch: &[Vec<AdvSample>], lr: f64, adam: &Adam) -> Result<f64> {
        self.params.zero_grads();
        let mut total = 0.0;
        for sample in batch {
            let grads = {
                let mut tape = Tape::new();
                let mut terms = Vec::new();
                for s in sample {
                    let disc = self.get(s.level).ok_or_else(|| Error::Config(format!("no discriminator for level {}", s.level)))?;
                    let fv = tape.constant(Matrix::column(s.fake_values.clone()));
                    let fake = disc.forward(&mut tape, &self.params, &s.fake, fv)?;
                    let rv = tape.constant(Matrix::filled(s.real.len(), 1, 1.0));
                    let real = disc.forward(&mut tape, &self.params, &s.real, rv)?;
                    terms.push((loss_d(&mut tape, fake.logits, real.logits)?, 1.0));
                }
                if terms.is_empty() {
                    continue;
                }
                let loss = tape.weighted_sum(&terms);
                total += tape.value(loss).item();
                tape.backward(loss)
            };
            grads.accumulate_into(&mut self.params);
        }
        self.params.scale_grads(1.0 / batch.len().max(1) as f64);
        adam.step(&mut self.params, lr);
        Ok(total / batch.len().max(1) as f64)
    }

    /// Loss of the discriminators on a batch without updating them.
    pub fn evaluate(&self, batch: &[Vec<AdvSample>]) -> Result<f64> {
        let mut total = 0.0;
        for sample in batch {
            let mut tape = Tape::new();
            for s in sample {
                let disc = self.get(s.level).ok_or_else(|| Error::Config(format!("no discriminator for level {}", s.level)))?;
                let fv = tape.constant(Matrix::column(s.fake_values.clone()));
                let fake = disc.forward(&mut tape, &self.params, &s.fake, fv)?;
                let rv = tape.constant(Matrix::filled(s.real.len(), 1, 1.0));
                let real = disc.forward(&mut tape, &self.params, &s.real, rv)?;
                let l = loss_d(&mut tape, fake.logits, real.logits)?;
                total += tape.value(l).item();
            }
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Adds `L_adv` for one level to a generator tape; `logits` are the
    /// generator's existence logits on `coords`, sharpened with `k`.
    pub fn adv_term<'a>(&self, tape: &mut Tape<'a>, params: &'a NetworkParams, level: usize, coords: &CoordSet, logits: Var, k: f64) -> Result<Var> {
        let disc = self.get(level).ok_or_else(|| Error::Config(format!("no discriminator for level {level}")))?;
        let v = tape.sharpened_sigmoid(logits, k);
        let out = disc.forward(tape, params, coords, v)?;
        loss_adv(tape, out.logits)
    }
}

/// One level of a discriminator training sample.
#[derive(Clone, Debug)]
pub struct AdvSample {
    pub level: usize,
    pub fake: CoordSet,
    pub fake_values: Vec<f64>,
    pub real: CoordSet,
}
