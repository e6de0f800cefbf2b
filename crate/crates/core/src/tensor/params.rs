//! Named parameter stores, Adam and the SVCK checkpoint format.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::io::{expect_eof, read_bytes, read_f64, read_u128, read_u16, read_u32, read_u64};
use crate::matrix::Matrix;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A parameter with its gradient buffer and Adam moments, all of one shape.
#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Matrix,
    pub grads: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
}

impl ParamTensor {
    fn new(name: String, shape: Vec<usize>, values: Matrix) -> Self {
        let (r, c) = values.shape();
        Self { name, shape, values, grads: Matrix::zeros(r, c), adam_m: Matrix::zeros(r, c), adam_v: Matrix::zeros(r, c) }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Matrix layout for a shape: the last axis is the column count.
fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [rest @ .., last] => (rest.iter().product(), *last),
    }
}

/// Parameter store with unique names, owned by one training loop at a time.
#[derive(Debug)]
pub struct NetworkParams {
    uid: u64,
    tensors: Vec<ParamTensor>,
    by_name: FxHashMap<String, ParamId>,
    /// Adam steps taken so far.
    pub step: u64,
}

impl Default for NetworkParams {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for NetworkParams {
    /// Clones get a fresh identity so tapes never confuse the two stores.
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            tensors: self.tensors.clone(),
            by_name: self.by_name.clone(),
            step: self.step,
        }
    }
}

impl NetworkParams {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            tensors: Vec::new(),
            by_name: FxHashMap::default(),
            step: 0,
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        if matrix_dims(&shape) != values.shape() {
            return Err(Error::Config(format!("parameter {name}: shape {shape:?} does not match {:?}", values.shape())));
        }
        let id = ParamId(self.tensors.len());
        self.tensors.push(ParamTensor::new(name.clone(), shape, values));
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Uniform initialization in `±sqrt(6 / fan_in)`.
    pub fn insert_uniform(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Result<ParamId> {
        let (r, c) = matrix_dims(&shape);
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, shape, Matrix::from_vec(r, c, data))
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        let (r, c) = matrix_dims(&shape);
        self.insert(name, shape, Matrix::zeros(r, c))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(ParamTensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grads.fill(0.0);
        }
    }

    /// Multiplies every gradient by `s` (averaging over a batch).
    pub fn scale_grads(&mut self, s: f64) {
        for t in &mut self.tensors {
            for g in t.grads.data_mut() {
                *g *= s;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.grads.data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// Sets every value to zero (used to probe degenerate networks).
    pub fn zero_values(&mut self) {
        for t in &mut self.tensors {
            t.values.fill(0.0);
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn same_values(&self, other: &NetworkParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.values.data().iter().zip(b.values.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Matrix) {
        self.tensors[id.0].grads.add_assign(g);
    }
}

/// Adam hyperparameters; momentum terms default to 0.9 and 0.99.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

impl Adam {
    /// One bias-corrected Adam update at step `params.step + 1`; gradients are zeroed afterwards.
    pub fn step(&self, params: &mut NetworkParams, lr: f64) {
        params.step += 1;
        let t = params.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in &mut params.tensors {
            let ParamTensor { values, grads, adam_m, adam_v, .. } = p;
            let (w, g, m, v) = (values.data_mut(), grads.data_mut(), adam_m.data_mut(), adam_v.data_mut());
            for i in 0..w.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + self.eps);
                g[i] = 0.0;
            }
        }
    }
}

/// Snapshot of a seeded ChaCha8 generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// A parameter store plus training state, serialized as an SVCK file.
///
/// Layout (little-endian): magic `SVCK`, version `u16`, global step `u64`,
/// RNG seed (32 bytes), stream `u64`, word position `u128`, metadata length
/// `u32` and UTF-8 JSON, tensor count `u32`, then per tensor its name, rank,
/// dims (`u64` each), values, Adam first and second moments (all `f64`).
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: String,
    pub params: NetworkParams,
    pub rng: RngState,
}

const CHECKPOINT_VERSION: u16 = 1;

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"SVCK")?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.params.step.to_le_bytes())?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        write_str(w, &self.meta)?;
        w.write_all(&(self.params.tensors.len() as u32).to_le_bytes())?;
        for t in &self.params.tensors {
            write_str(w, &t.name)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for d in &t.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.values.data().len() * 24);
            for m in [&t.values, &t.adam_m, &t.adam_v] {
                for v in m.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        if &read_bytes::<4, _>(r)? != b"SVCK" {
            return Err(Error::Format("not an SVCK checkpoint".into()));
        }
        let version = read_u16(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let step = read_u64(r)?;
        let seed = read_bytes::<32, _>(r)?;
        let stream = read_u64(r)?;
        let word_pos = read_u128(r)?;
        let meta = read_str(r)?;
        let count = read_u32(r)? as usize;
        let mut params = NetworkParams::new();
        params.step = step;
        for _ in 0..count {
            let name = read_str(r)?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor {name} has implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).is_none() {
                return Err(Error::Format(format!("tensor {name} has an implausible shape {shape:?}")));
            }
            let (rows, cols) = matrix_dims(&shape);
            let read_matrix = |r: &mut R| -> Result<Matrix> {
                let data = (0..rows * cols).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
                Ok(Matrix::from_vec(rows, cols, data))
            };
            let values = read_matrix(r)?;
            let adam_m = read_matrix(r)?;
            let adam_v = read_matrix(r)?;
            let id = params.insert(name, shape, values).map_err(|e| Error::Format(e.to_string()))?;
            let t = params.get_mut(id);
            t.adam_m = adam_m;
            t.adam_v = adam_v;
        }
        expect_eof(r)?;
        Ok(Self { meta, params, rng: RngState { seed, stream, word_pos } })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::save_with(path, self, |c, w| c.write_to(w))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format("truncated string".into()));
    }
    String::from_utf8(buf).map_err(|_| Error::Format("string is not UTF-8".into()))
}
