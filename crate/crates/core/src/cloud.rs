//! Point clouds and rigid transforms.

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Label value of a point or voxel that carries no class.
pub const UNLABELED: u32 = u32::MAX;

/// A set of 3D points with optional per-point class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points, labels: None }
    }

    pub fn labeled(points: Vec<Point3>, labels: Vec<u32>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::Structure(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        Ok(Self { points, labels: Some(labels) })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels.as_ref().map_or(UNLABELED, |l| l[i])
    }

    /// Keeps the points whose index passes `keep`, carrying labels along.
    pub fn filter_indices(&self, keep: impl Iterator<Item = usize>) -> PointCloud {
        let idx: Vec<usize> = keep.collect();
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Translates every point by `-origin`.
    pub fn relative_to(&self, origin: Point3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| sub(*p, origin)).collect(),
            labels: self.labels.clone(),
        }
    }

    pub fn append(&mut self, other: &PointCloud) {
        let had = self.len();
        self.points.extend_from_slice(&other.points);
        match (&mut self.labels, &other.labels) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (Some(a), None) => a.extend(std::iter::repeat(UNLABELED).take(other.len())),
            (None, Some(b)) => {
                let mut l = vec![UNLABELED; had];
                l.extend_from_slice(b);
                self.labels = Some(l);
            }
            (None, None) => {}
        }
    }
}

/// Rotation plus translation: `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    };

    pub fn from_yaw(yaw: f64, translation: Point3) -> Self {
        let (s, c) = yaw.sin_cos();
        Self { rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], translation }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    /// Checks orthonormality and a positive determinant to `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > tol {
                    return Err(Error::Config("pose rotation is not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > tol {
            return Err(Error::Config("pose rotation is a reflection".into()));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("pose translation is not finite".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}
