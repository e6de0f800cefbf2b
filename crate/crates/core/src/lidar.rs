//! Virtual LiDAR: polar coordinates, occlusion removal, sampling-pattern
//! transfer and augmentation, and the range-image baselines.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{add, norm, scale, sub, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::io::{expect_eof, read_bytes, read_f32, read_f64, read_u16, read_u32, read_u64};
use crate::kdtree::KdTree;

/// `(r, θ, φ)` with θ measured from +z and φ = atan2(y, x).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Polar {
    pub r: f64,
    pub theta: f64,
    pub phi: f64,
}

impl Polar {
    pub fn to_cartesian(self) -> Point3 {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [self.r * st * cp, self.r * st * sp, self.r * ct]
    }
}

/// Unit vector of direction `(θ, φ)`.
pub fn direction(theta: f64, phi: f64) -> Point3 {
    Polar { r: 1.0, theta, phi }.to_cartesian()
}

/// Polar coordinates of each point relative to `sensor`.
pub fn to_polar(points: &[Point3], sensor: Point3) -> Result<Vec<Polar>> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let [x, y, z] = sub(*p, sensor);
            let r = (x * x + y * y + z * z).sqrt();
            if r == 0.0 {
                return Err(Error::ZeroRadius { index });
            }
            let mut phi = y.atan2(x);
            if phi == -PI {
                phi = PI;
            }
            Ok(Polar { r, theta: (x * x + y * y).sqrt().atan2(z), phi })
        })
        .collect()
}

/// A sensor's sampling pattern as a set of `(θ, φ)` directions.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarPattern {
    pub directions: Vec<(f64, f64)>,
    pub source: String,
}

impl PolarPattern {
    pub fn new(directions: Vec<(f64, f64)>, source: impl Into<String>) -> Self {
        Self { directions, source: source.into() }
    }

    /// Directions of every point of a reference frame.
    pub fn from_frame(frame: &PointCloud, sensor: Point3, source: impl Into<String>) -> Result<Self> {
        let polar = to_polar(&frame.points, sensor)?;
        Ok(Self::new(polar.iter().map(|p| (p.theta, p.phi)).collect(), source))
    }

    /// Regular ring pattern: `rings` elevations evenly spaced between `top_deg`
    /// and `bottom_deg` (degrees above the horizon), `columns` azimuths per ring.
    pub fn rings(rings: usize, top_deg: f64, bottom_deg: f64, columns: usize, phase_deg: f64, source: impl Into<String>) -> Self {
        let mut directions = Vec::with_capacity(rings * columns);
        for i in 0..rings {
            let t = if rings == 1 { 0.0 } else { i as f64 / (rings - 1) as f64 };
            let elevation = (top_deg + t * (bottom_deg - top_deg)).to_radians();
            let theta = PI / 2.0 - elevation;
            for j in 0..columns {
                let mut phi = -PI + (j as f64 + 0.5) * 2.0 * PI / columns as f64 + phase_deg.to_radians();
                if phi > PI {
                    phi -= 2.0 * PI;
                }
                directions.push((theta, phi));
            }
        }
        Self::new(directions, source)
    }

    /// The 64-beam reference sensor of the source domain: 0.6° between beams, 2048 columns.
    ///
    /// Beam spacings are several times those of road-scale sensors so that
    /// desk-scale scenes a few meters across show the sampling gaps such
    /// sensors produce at tens of meters.
    pub fn ring64() -> Self {
        Self::rings(64, 4.0, -33.8, 2048, 0.0, "ring64")
    }

    /// The 32-beam reference sensor of the target domain: 3° between beams, 720 columns.
    pub fn ring32() -> Self {
        Self::rings(32, 8.0, -85.0, 720, 0.1, "ring32")
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Distinct θ values in increasing order (the beam elevations of a ring pattern).
    pub fn beam_thetas(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.directions.iter().map(|d| d.0).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"PATT")?;
        w.write_all(&(self.directions.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.directions.len() * 16);
        for (t, p) in &self.directions {
            buf.extend_from_slice(&t.to_le_bytes());
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        if &read_bytes::<4, _>(r)? != b"PATT" {
            return Err(Error::Format("not a PATT pattern file".into()));
        }
        let n = read_u64(r)?;
        let mut directions = Vec::with_capacity(n.min(1 << 24) as usize);
        for _ in 0..n {
            let t = read_f64(r)?;
            let p = read_f64(r)?;
            if !((0.0..=PI).contains(&t) && p > -PI && p <= PI) {
                return Err(Error::Format(format!("pattern direction ({t}, {p}) out of range")));
            }
            directions.push((t, p));
        }
        expect_eof(r)?;
        Ok(Self::new(directions, "file"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionConfig {
    /// Depth-buffer cell size in θ, degrees.
    pub theta_res_deg: f64,
    /// Depth-buffer cell size in φ, degrees.
    pub phi_res_deg: f64,
    /// Depth tolerance in meters.
    pub tau: f64,
    /// Radius in meters of the disc each point covers in the depth buffer.
    pub splat_radius: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self { theta_res_deg: 0.2, phi_res_deg: 0.1, tau: 0.3, splat_radius: 0.05 }
    }
}

struct DepthBuffer {
    rows: usize,
    cols: usize,
    dt: f64,
    dp: f64,
    depth: Vec<f64>,
}

impl DepthBuffer {
    fn new(cfg: &OcclusionConfig) -> Self {
        let dt = cfg.theta_res_deg.to_radians();
        let dp = cfg.phi_res_deg.to_radians();
        let rows = (PI / dt).ceil() as usize;
        let cols = (2.0 * PI / dp).ceil() as usize;
        Self { rows, cols, dt, dp, depth: vec![f64::INFINITY; rows * cols] }
    }

    fn row(&self, theta: f64) -> usize {
        ((theta / self.dt) as usize).min(self.rows - 1)
    }

    fn col(&self, phi: f64) -> usize {
        (((phi + PI) / self.dp).floor() as i64).rem_euclid(self.cols as i64) as usize
    }

    fn cell(&self, p: &Polar) -> usize {
        self.row(p.theta) * self.cols + self.col(p.phi)
    }

    /// Lowers the depth of every cell within the point's angular splat disc.
    fn splat(&mut self, p: &Polar, radius: f64) {
        let ang = (radius / p.r).atan();
        let r0 = self.row((p.theta - ang).max(0.0));
        let r1 = self.row((p.theta + ang).min(PI));
        let sin_t = p.theta.sin().max(1e-6);
        let phi_ang = (ang / sin_t).min(PI);
        let span = (phi_ang / self.dp).ceil() as i64;
        let c = self.col(p.phi) as i64;
        let cols = if 2 * span + 1 >= self.cols as i64 { 0..self.cols as i64 } else { c - span..c + span + 1 };
        for row in r0..=r1 {
            for col in cols.clone() {
                let idx = row * self.cols + col.rem_euclid(self.cols as i64) as usize;
                if p.r < self.depth[idx] {
                    self.depth[idx] = p.r;
                }
            }
        }
    }
}

/// Keeps points no farther than the nearest surface in their depth-buffer cell plus `tau`.
pub fn occlusion_filter(cloud: &PointCloud, sensor: Point3, cfg: &OcclusionConfig) -> Result<PointCloud> {
    let polar = to_polar(&cloud.points, sensor)?;
    let mut buf = DepthBuffer::new(cfg);
    for p in &polar {
        buf.splat(p, cfg.splat_radius);
    }
    let keep = polar.iter().enumerate().filter(|(_, p)| p.r <= buf.depth[buf.cell(p)] + cfg.tau).map(|(i, _)| i);
    Ok(cloud.filter_indices(keep))
}

/// Angular cutoff of nearest-direction matching, degrees.
pub const DEFAULT_CUTOFF_DEG: f64 = 0.5;

/// For every pattern direction, picks the visible point with the nearest
/// direction on the unit sphere; matches beyond `cutoff_deg` are dropped and
/// repeated selections collapse to the first. Points are returned in scene coordinates.
pub fn resample(visible: &PointCloud, pattern: &PolarPattern, sensor: Point3, cutoff_deg: f64) -> Result<PointCloud> {
    if visible.is_empty() {
        log::warn!("resampling an empty visible set");
        return Ok(PointCloud { points: vec![], labels: visible.labels.as_ref().map(|_| vec![]) });
    }
    let polar = to_polar(&visible.points, sensor)?;
    let tree = KdTree::new(polar.iter().map(|p| direction(p.theta, p.phi)).collect());
    // Chord length of the cutoff angle: great-circle order equals chord order.
    let max_chord = 2.0 * (cutoff_deg.to_radians() / 2.0).sin();
    let mut taken = vec![false; visible.len()];
    let mut picked = Vec::new();
    for &(t, p) in &pattern.directions {
        let (i, d2) = tree.nearest(direction(t, p)).expect("tree is nonempty");
        if d2.sqrt() <= max_chord && !taken[i] {
            taken[i] = true;
            picked.push(i);
        }
    }
    Ok(visible.filter_indices(picked.into_iter()))
}

/// Great-circle angle between two directions.
pub fn angular_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (u, v) = (direction(a.0, a.1), direction(b.0, b.1));
    let chord = norm(sub(u, v));
    2.0 * (chord / 2.0).min(1.0).asin()
}

/// How many θ bins survive pattern augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeepFraction {
    Fixed(f64),
    Uniform(f64, f64),
}

impl Default for KeepFraction {
    fn default() -> Self {
        Self::Uniform(0.3, 0.7)
    }
}

/// Splits `[θ_min, θ_max]` into `bins` equal bins and keeps the directions of a random subset of them.
pub fn augment_pattern<R: Rng>(pattern: &PolarPattern, bins: usize, keep: KeepFraction, rng: &mut R) -> Result<PolarPattern> {
    if bins == 0 {
        return Err(Error::Config("augmentation needs at least one bin".into()));
    }
    let frac = match keep {
        KeepFraction::Fixed(f) => f,
        KeepFraction::Uniform(lo, hi) => rng.gen_range(lo..=hi),
    };
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::Config(format!("keep fraction {frac} outside [0, 1]")));
    }
    let kept = (frac * bins as f64).round() as usize;
    let mut retained = vec![false; bins];
    for b in sample(rng, bins, kept) {
        retained[b] = true;
    }
    let bounds = theta_range(pattern);
    let directions = pattern.directions.iter().copied().filter(|d| retained[theta_bin(d.0, bounds, bins)]).collect();
    Ok(PolarPattern::new(directions, format!("{}+aug", pattern.source)))
}

/// `[θ_min, θ_max]` of a pattern.
pub fn theta_range(pattern: &PolarPattern) -> (f64, f64) {
    pattern.directions.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d.0), hi.max(d.0)))
}

/// Bin of `theta` among `bins` equal bins spanning `(lo, hi)`; the upper edge joins the last bin.
pub fn theta_bin(theta: f64, (lo, hi): (f64, f64), bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((theta - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

/// Per-beam range image; empty cells hold `+inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    pub sensor: Point3,
    /// θ of each row, increasing.
    pub beams: Vec<f64>,
    pub width: usize,
    pub ranges: Vec<f32>,
}

pub const DEFAULT_WIDTH: usize = 2048;

impl RangeImage {
    pub fn height(&self) -> usize {
        self.beams.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.ranges[row * self.width + col]
    }

    fn column_phi(&self, col: usize) -> f64 {
        -PI + (col as f64 + 0.5) * 2.0 * PI / self.width as f64
    }

    /// Scene-coordinate point of a non-empty cell, placed on the row's beam and the column's center azimuth.
    pub fn point(&self, row: usize, col: usize) -> Option<Point3> {
        let r = self.get(row, col);
        r.is_finite().then(|| add(self.sensor, Polar { r: r as f64, theta: self.beams[row], phi: self.column_phi(col) }.to_cartesian()))
    }

    fn points_of_rows(&self, rows: impl Iterator<Item = usize>) -> Vec<Point3> {
        let mut out = Vec::new();
        for row in rows {
            for col in 0..self.width {
                if let Some(p) = self.point(row, col) {
                    out.push(p);
                }
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"RIMG")?;
        w.write_all(&RIMG_VERSION.to_le_bytes())?;
        w.write_all(&(self.height() as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        for v in self.sensor.iter().chain(&self.beams) {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.ranges.len() * 4);
        for r in &self.ranges {
            buf.extend_from_slice(&r.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        if &read_bytes::<4, _>(r)? != b"RIMG" {
            return Err(Error::Format("not a RIMG range image".into()));
        }
        let version = read_u16(r)?;
        if version != RIMG_VERSION {
            return Err(Error::Format(format!("unsupported RIMG version {version}")));
        }
        let h = read_u32(r)? as usize;
        let width = read_u32(r)? as usize;
        if h == 0 || width == 0 {
            return Err(Error::Format("range image must have positive size".into()));
        }
        let sensor = [read_f64(r)?, read_f64(r)?, read_f64(r)?];
        let beams = (0..h).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        let ranges = (0..h * width).map(|_| read_f32(r)).collect::<Result<Vec<_>>>()?;
        expect_eof(r)?;
        Ok(Self { sensor, beams, width, ranges })
    }
}

const RIMG_VERSION: u16 = 1;

/// Projects points onto the rows of `beams` (nearest θ) and `width` azimuth
/// columns, keeping the nearest range per cell.
pub fn range_project(points: &[Point3], beams: &[f64], width: usize, sensor: Point3) -> Result<RangeImage> {
    if beams.is_empty() || width == 0 {
        return Err(Error::Config("range image needs at least one beam and one column".into()));
    }
    if beams.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("beam angles must be strictly increasing".into()));
    }
    let mut img = RangeImage { sensor, beams: beams.to_vec(), width, ranges: vec![f32::INFINITY; beams.len() * width] };
    for p in to_polar(points, sensor)? {
        let row = nearest_beam(beams, p.theta);
        let col = (((p.phi + PI) / (2.0 * PI) * width as f64).floor() as i64).rem_euclid(width as i64) as usize;
        let cell = &mut img.ranges[row * width + col];
        *cell = cell.min(p.r as f32);
    }
    Ok(img)
}

fn nearest_beam(beams: &[f64], theta: f64) -> usize {
    let i = beams.partition_point(|&b| b < theta);
    if i == 0 {
        0
    } else if i == beams.len() || theta - beams[i - 1] <= beams[i] - theta {
        i - 1
    } else {
        i
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BeamMode {
    Down,
    Up,
}

/// Handcrafted beam resampling: `Down` keeps every other row (rows 0, 2, 4, ...);
/// `Up` keeps all points and adds the midpoint of every vertically adjacent pair.
pub fn beam_resample_b1(img: &RangeImage, mode: BeamMode) -> Vec<Point3> {
    match mode {
        BeamMode::Down => img.points_of_rows((0..img.height()).step_by(2)),
        BeamMode::Up => {
            let mut out = img.points_of_rows(0..img.height());
            for row in 0..img.height().saturating_sub(1) {
                for col in 0..img.width {
                    if let (Some(p), Some(q)) = (img.point(row, col), img.point(row + 1, col)) {
                        out.push(scale(add(p, q), 0.5));
                    }
                }
            }
            out
        }
    }
}

/// Keeps all points and fills each vertically adjacent pair's segment with
/// evenly spaced interior points no farther than `delta` apart.
pub fn linear_interp_b2(img: &RangeImage, delta: f64) -> Result<Vec<Point3>> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("interpolation spacing must be positive, got {delta}")));
    }
    let mut out = img.points_of_rows(0..img.height());
    for row in 0..img.height().saturating_sub(1) {
        for col in 0..img.width {
            if let (Some(p), Some(q)) = (img.point(row, col), img.point(row + 1, col)) {
                out.extend(segment_fill(p, q, delta));
            }
        }
    }
    Ok(out)
}

/// Interior points splitting `pq` into `ceil(|pq| / delta)` equal pieces.
pub fn segment_fill(p: Point3, q: Point3, delta: f64) -> impl Iterator<Item = Point3> {
    let len = norm(sub(q, p));
    let n = ((len / delta) - 1e-9).ceil().max(1.0) as usize;
    (1..n).map(move |i| add(p, scale(sub(q, p), i as f64 / n as f64)))
}
