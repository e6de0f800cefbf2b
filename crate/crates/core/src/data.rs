//! Training data: virtual frames sampled from synthetic scenes, paired with
//! the complete scene, and their voxelized form.
//!
//! Frames and pairs are stored sensor-relative, so the voxel lattice of a
//! sample is always anchored at the sensor.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::grid::{voxelize, SparseGrid};
use crate::io::{load_pcxl, save_pcxl};
use crate::lidar::{augment_pattern, occlusion_filter, resample, KeepFraction, OcclusionConfig, PolarPattern, DEFAULT_CUTOFF_DEG};
use crate::scene::place_sensor;
use crate::svcn::{gt_pyramid, GtPyramid};

/// How virtual frames are taken from a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameSpec {
    pub frames_per_scene: usize,
    /// Minimum horizontal distance from the sensor to any raised point.
    pub clearance: f64,
    pub cutoff_deg: f64,
    pub theta_res_deg: f64,
    pub phi_res_deg: f64,
    pub tau: f64,
    pub splat_radius: f64,
    /// θ-bin dropping applied to the pattern of every frame, as `(bins, keep fraction)`.
    pub augment: Option<(usize, KeepFraction)>,
}

impl Default for FrameSpec {
    fn default() -> Self {
        let occ = OcclusionConfig::default();
        Self {
            frames_per_scene: 1,
            clearance: 1.0,
            cutoff_deg: DEFAULT_CUTOFF_DEG,
            theta_res_deg: occ.theta_res_deg,
            phi_res_deg: occ.phi_res_deg,
            tau: occ.tau,
            splat_radius: occ.splat_radius,
            augment: None,
        }
    }
}

impl FrameSpec {
    pub fn occlusion(&self) -> OcclusionConfig {
        OcclusionConfig { theta_res_deg: self.theta_res_deg, phi_res_deg: self.phi_res_deg, tau: self.tau, splat_radius: self.splat_radius }
    }
}

/// Virtual scan of `scene` from `sensor`, returned sensor-relative.
pub fn virtual_frame(scene: &PointCloud, pattern: &PolarPattern, sensor: Point3, spec: &FrameSpec) -> Result<PointCloud> {
    let visible = occlusion_filter(scene, sensor, &spec.occlusion())?;
    Ok(resample(&visible, pattern, sensor, spec.cutoff_deg)?.relative_to(sensor))
}

/// An incomplete frame and the complete scene it was sampled from, both sensor-relative.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub input: PointCloud,
    pub complete: PointCloud,
}

/// Samples `spec.frames_per_scene` frames of one scene at random sensor positions.
pub fn make_pairs(scene: &PointCloud, pattern: &PolarPattern, spec: &FrameSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Pair>> {
    let mut pairs = Vec::with_capacity(spec.frames_per_scene);
    for _ in 0..spec.frames_per_scene {
        let sensor = place_sensor(scene, spec.clearance, rng)?;
        let pattern = match spec.augment {
            Some((bins, keep)) => augment_pattern(pattern, bins, keep, rng)?,
            None => pattern.clone(),
        };
        let input = virtual_frame(scene, &pattern, sensor, spec)?;
        if input.is_empty() {
            log::warn!("virtual frame at {sensor:?} is empty; skipped");
            continue;
        }
        pairs.push(Pair { input, complete: scene.relative_to(sensor) });
    }
    Ok(pairs)
}

fn pair_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("pair_{index:05}_in.pcxl")), dir.join(format!("pair_{index:05}_gt.pcxl")))
}

pub fn save_pairs(dir: impl AsRef<Path>, pairs: &[Pair]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, p) in pairs.iter().enumerate() {
        let (a, b) = pair_paths(dir, i);
        save_pcxl(a, &p.input)?;
        save_pcxl(b, &p.complete)?;
    }
    Ok(())
}

/// Loads `pair_NNNNN_{in,gt}.pcxl` files in index order.
pub fn load_pairs(dir: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let dir = dir.as_ref();
    let mut pairs = Vec::new();
    loop {
        let (a, b) = pair_paths(dir, pairs.len());
        if !a.exists() {
            break;
        }
        pairs.push(Pair { input: load_pcxl(a)?, complete: load_pcxl(b)? });
    }
    if pairs.is_empty() {
        return Err(Error::Empty(format!("no training pairs in {}", dir.display())));
    }
    Ok(pairs)
}

/// A voxelized pair: the level-0 input occupancy and the ground-truth pyramid.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub input: SparseGrid,
    pub gt: GtPyramid,
}

impl Sample {
    pub fn from_pair(id: usize, pair: &Pair, voxel_size: f64) -> Result<Self> {
        let (input, _) = voxelize(&pair.input, voxel_size, [0.0; 3])?;
        if input.is_empty() {
            return Err(Error::Empty(format!("pair {id} has an empty input frame")));
        }
        Ok(Self { id, input, gt: gt_pyramid(&pair.complete, voxel_size, [0.0; 3])? })
    }
}

pub fn samples(pairs: &[Pair], voxel_size: f64) -> Result<Vec<Sample>> {
    pairs.iter().enumerate().map(|(i, p)| Sample::from_pair(i, p, voxel_size)).collect()
}

/// Shuffled epochs of fixed-size batches, reproducible from the generator state.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(Error::Config(format!("cannot batch {n} samples in groups of {batch}")));
        }
        Ok(Self { n, batch, order: Vec::new(), cursor: 0 })
    }

    /// Next batch of sample indices; a new epoch reshuffles with `rng`.
    pub fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.order.len() {
                self.order = (0..self.n).collect();
                for i in (1..self.n).rev() {
                    let j = rng.gen_range(0..=i);
                    self.order.swap(i, j);
                }
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_scene, SceneSpec};
    use rand::SeedableRng;

    #[test]
    fn pairs_are_sensor_relative() {
        let scene = gen_scene(&SceneSpec { extent: 6.0, density: 100.0, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pattern = PolarPattern::rings(16, 0.0, -40.0, 360, 0.0, "t");
        let pairs = make_pairs(&scene.cloud, &pattern, &FrameSpec { frames_per_scene: 2, ..Default::default() }, &mut rng).unwrap();
        assert_eq!(pairs.len(), 2);
        for p in &pairs {
            assert!(!p.input.is_empty() && p.input.len() < p.complete.len());
            assert!(p.input.labels.is_some());
            // The ground sits 1.8 m below the sensor.
            let lowest = p.complete.points.iter().map(|q| q[2]).fold(f64::INFINITY, f64::min);
            assert!((lowest + crate::scene::SENSOR_HEIGHT).abs() < 1e-9);
            let s = Sample::from_pair(0, p, 0.2).unwrap();
            assert!(s.gt.levels[0].len() > s.input.len());
        }
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = BatchSampler::new(5, 2).unwrap();
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(&mut rng)).collect();
        seen.truncate(5);
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }
}
