//! Completion metrics and nearest-neighbor label transfer between voxel sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud, UNLABELED};
use crate::error::{Error, Result};
use crate::grid::{voxel_centers, voxelize, CoordSet, SparseGrid};
use crate::kdtree::KdTree;

/// `|a ∩ b| / |a ∪ b|`, defined as 1 when both are empty.
pub fn iou_sets(a: &CoordSet, b: &CoordSet) -> f64 {
    let inter = a.iter().filter(|c| b.contains(*c)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Voxel IoU of two grids on the same lattice.
pub fn voxel_iou(pred: &SparseGrid, gt: &SparseGrid) -> Result<f64> {
    if !pred.same_lattice(gt) {
        return Err(Error::LevelMismatch(format!(
            "prediction (level {}, size {}, origin {:?}) and ground truth (level {}, size {}, origin {:?}) differ",
            pred.level, pred.voxel_size, pred.origin, gt.level, gt.voxel_size, gt.origin
        )));
    }
    Ok(iou_sets(&pred.coords, &gt.coords))
}

/// Sum of the two directed mean nearest-neighbor distances between voxel centers.
pub fn chamfer(pred: &CoordSet, gt: &CoordSet, voxel_size: f64, origin: Point3) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Empty("chamfer distance needs two nonempty sets".into()));
    }
    let p = voxel_centers(pred, voxel_size, origin);
    let g = voxel_centers(gt, voxel_size, origin);
    Ok(directed_mean(&p, &KdTree::new(g.clone())) + directed_mean(&g, &KdTree::new(p)))
}

fn directed_mean(from: &[Point3], to: &KdTree) -> f64 {
    from.iter().map(|&q| to.nearest(q).expect("nonempty").1.sqrt()).sum::<f64>() / from.len() as f64
}

/// Voxel set with one class per voxel (`UNLABELED` where unknown).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVoxelSet {
    pub grid: SparseGrid,
    pub labels: Vec<u32>,
}

impl LabeledVoxelSet {
    pub fn new(grid: SparseGrid, labels: Vec<u32>) -> Result<Self> {
        if grid.len() != labels.len() {
            return Err(Error::Config(format!("{} labels for {} voxels", labels.len(), grid.len())));
        }
        Ok(Self { grid, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Most frequent label, smallest id on ties; `UNLABELED` for no votes.
fn plurality(votes: &BTreeMap<u32, usize>) -> u32 {
    let mut best = (UNLABELED, 0);
    for (&label, &n) in votes {
        if n > best.1 {
            best = (label, n);
        }
    }
    best.0
}

/// Per-voxel majority of the labeled points that fell into it.
pub fn majority_vote_labels(cloud: &PointCloud, grid: &SparseGrid, point_to_voxel: &[usize]) -> Result<LabeledVoxelSet> {
    if point_to_voxel.len() != cloud.len() {
        return Err(Error::Config(format!("{} voxel rows for {} points", point_to_voxel.len(), cloud.len())));
    }
    let mut votes = vec![BTreeMap::new(); grid.len()];
    for (i, &v) in point_to_voxel.iter().enumerate() {
        let l = cloud.label(i);
        if l != UNLABELED {
            *votes[v].entry(l).or_insert(0) += 1;
        }
    }
    LabeledVoxelSet::new(grid.clone(), votes.iter().map(plurality).collect())
}

/// Voxelizes a labeled cloud and majority-votes its labels.
pub fn labeled_voxels(cloud: &PointCloud, voxel_size: f64, origin: Point3) -> Result<LabeledVoxelSet> {
    let (grid, p2v) = voxelize(cloud, voxel_size, origin)?;
    majority_vote_labels(cloud, &grid, &p2v)
}

/// Sends each labeled source voxel's label to its nearest canonical voxel;
/// canonical voxels that receive several labels take the majority.
pub fn prop_labels(source: &LabeledVoxelSet, canonical: &SparseGrid) -> Result<LabeledVoxelSet> {
    if canonical.is_empty() {
        return Err(Error::Empty("no canonical voxels to propagate labels into".into()));
    }
    if !source.grid.same_lattice(canonical) {
        return Err(Error::LevelMismatch("source and canonical voxels live on different lattices".into()));
    }
    let tree = KdTree::new(canonical.centers());
    let mut votes = vec![BTreeMap::new(); canonical.len()];
    for (c, &l) in source.grid.coords.iter().zip(&source.labels) {
        if l == UNLABELED {
            continue;
        }
        let (target, _) = tree.nearest(c.center(source.grid.voxel_size, source.grid.origin)).expect("nonempty");
        *votes[target].entry(l).or_insert(0) += 1;
    }
    LabeledVoxelSet::new(canonical.clone(), votes.iter().map(plurality).collect())
}

/// Labels every target point with the prediction of the predicted voxel
/// nearest to the point's voxel.
pub fn proj_labels(pred: &LabeledVoxelSet, target: &PointCloud) -> Result<Vec<u32>> {
    let labeled: Vec<usize> = (0..pred.len()).filter(|&i| pred.labels[i] != UNLABELED).collect();
    if labeled.is_empty() {
        return Err(Error::Empty("no labeled predictions to project".into()));
    }
    let centers = pred.grid.centers();
    let tree = KdTree::new(labeled.iter().map(|&i| centers[i]).collect());
    let (grid, p2v) = voxelize(target, pred.grid.voxel_size, pred.grid.origin)?;
    let voxel_labels: Vec<u32> = grid
        .centers()
        .into_iter()
        .map(|c| pred.labels[labeled[tree.nearest(c).expect("nonempty").0]])
        .collect();
    Ok(p2v.into_iter().map(|v| voxel_labels[v]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// IoU of every evaluated class present in the ground truth.
    pub per_class: BTreeMap<u32, f64>,
    pub miou: f64,
}

/// Point-level IoU per class over points with a ground-truth label, averaged over
/// the classes of `classes` that occur in the ground truth.
pub fn seg_miou(pred: &[u32], gt: &[u32], classes: &[u32]) -> Result<MiouReport> {
    if pred.len() != gt.len() {
        return Err(Error::Config(format!("{} predictions for {} ground-truth points", pred.len(), gt.len())));
    }
    let mut per_class = BTreeMap::new();
    for &c in classes {
        let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == UNLABELED {
                continue;
            }
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
        if tp + fne > 0 {
            per_class.insert(c, tp as f64 / (tp + fp + fne) as f64);
        }
    }
    if per_class.is_empty() {
        return Err(Error::Empty("none of the evaluated classes occurs in the ground truth".into()));
    }
    let miou = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MiouReport { per_class, miou })
}

/// One line of a metric report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class_iou: Option<BTreeMap<u32, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}
