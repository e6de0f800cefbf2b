//! Procedural dense labeled scenes standing in for reconstructed multi-frame aggregates.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::grid::quantize;

/// Class palettes. `TwoClass` uses ids {0 background, 1 vehicle, 2 pedestrian};
/// `TenClass` uses the ids of [`TEN_CLASS_NAMES`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    #[default]
    TwoClass,
    TenClass,
}

pub const TWO_CLASS_NAMES: [&str; 3] = ["background", "vehicle", "pedestrian"];
pub const TEN_CLASS_NAMES: [&str; 10] = ["car", "bicycle", "motorcycle", "truck", "other-vehicle", "pedestrian", "drivable", "sidewalk", "terrain", "vegetation"];

/// Semantic role of a primitive before palette mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Car,
    Bicycle,
    Motorcycle,
    Truck,
    OtherVehicle,
    Pedestrian,
    Drivable,
    Sidewalk,
    Terrain,
    Vegetation,
}

impl Palette {
    pub fn num_classes(self) -> usize {
        match self {
            Palette::TwoClass => 3,
            Palette::TenClass => 10,
        }
    }

    /// Classes that count towards mIoU.
    pub fn eval_classes(self) -> Vec<u32> {
        match self {
            Palette::TwoClass => vec![1, 2],
            Palette::TenClass => (0..10).collect(),
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        match self {
            Palette::TwoClass => &TWO_CLASS_NAMES,
            Palette::TenClass => &TEN_CLASS_NAMES,
        }
    }

    pub fn label(self, kind: Kind) -> u32 {
        match self {
            Palette::TwoClass => match kind {
                Kind::Car | Kind::Bicycle | Kind::Motorcycle | Kind::Truck | Kind::OtherVehicle => 1,
                Kind::Pedestrian => 2,
                _ => 0,
            },
            Palette::TenClass => kind as u32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Side length of the square ground plane, meters.
    pub extent: f64,
    pub vehicles: usize,
    pub pedestrians: usize,
    /// Raised strips along the ±y borders (0, 1 or 2).
    pub sidewalks: usize,
    pub slabs: usize,
    /// Points per square meter of surface.
    pub density: f64,
    /// Half width of the drivable band around y = 0; ground beyond it is terrain.
    pub road_half_width: f64,
    pub palette: Palette,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { extent: 8.0, vehicles: 2, pedestrians: 2, sidewalks: 1, slabs: 1, density: 400.0, road_half_width: 2.5, palette: Palette::TwoClass, seed: 0 }
    }
}

const SIDEWALK_WIDTH: f64 = 1.2;
const SIDEWALK_HEIGHT: f64 = 0.15;
const PEDESTRIAN_RADIUS: f64 = 0.25;
const PEDESTRIAN_HEIGHT: f64 = 1.7;
const PLACEMENT_TRIES: usize = 200;
/// Sensor height above the ground.
pub const SENSOR_HEIGHT: f64 = 1.8;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0 && self.density > 0.0) {
            return Err(Error::Config("scene extent and density must be positive".into()));
        }
        if self.density < 1.0 / (0.2 * 0.2) {
            return Err(Error::Config(format!("density {} too low: point spacing must stay below the 0.2 m voxel size", self.density)));
        }
        if self.sidewalks > 2 {
            return Err(Error::Config("at most two sidewalks".into()));
        }
        Ok(())
    }
}

/// Placed object footprint used for non-overlap tests.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    center: [f64; 2],
    radius: f64,
}

/// Oriented box resting on `base_z`.
#[derive(Clone, Copy, Debug)]
pub struct BoxPrim {
    pub center: [f64; 2],
    pub yaw: f64,
    pub size: [f64; 3],
    pub base_z: f64,
    pub kind: Kind,
    /// Whether the bottom face is sampled (never for objects resting on the ground).
    pub bottom: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct CylinderPrim {
    pub center: [f64; 2],
    pub radius: f64,
    pub height: f64,
    pub kind: Kind,
}

/// A generated scene: labeled points plus the primitives they were sampled from.
#[derive(Clone, Debug)]
pub struct Scene {
    pub cloud: PointCloud,
    pub boxes: Vec<BoxPrim>,
    pub cylinders: Vec<CylinderPrim>,
    pub extent: f64,
}

/// Number of samples on a surface of `area`: `floor(area·density)` plus a Bernoulli remainder.
fn sample_count(area: f64, density: f64, rng: &mut ChaCha8Rng) -> usize {
    let m = area * density;
    let base = m.floor();
    base as usize + usize::from(rng.gen_bool((m - base).clamp(0.0, 1.0)))
}

fn vehicle_kind(rng: &mut ChaCha8Rng) -> (Kind, [f64; 3]) {
    match rng.gen_range(0..10) {
        0..=4 => (Kind::Car, [4.2, 1.8, 1.5]),
        5 => (Kind::Bicycle, [1.7, 0.5, 1.1]),
        6 => (Kind::Motorcycle, [2.1, 0.8, 1.2]),
        7 => (Kind::Truck, [5.5, 2.3, 2.8]),
        _ => (Kind::OtherVehicle, [3.2, 1.9, 2.2]),
    }
}

/// Generates a scene with the ground at z = 0, centered on the origin.
pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half = spec.extent / 2.0;
    let mut boxes = Vec::new();
    let mut cylinders = Vec::new();
    let mut footprints: Vec<Footprint> = Vec::new();

    for s in 0..spec.sidewalks {
        let sign = if s == 0 { 1.0 } else { -1.0 };
        boxes.push(BoxPrim {
            center: [0.0, sign * (half - SIDEWALK_WIDTH / 2.0)],
            yaw: 0.0,
            size: [spec.extent, SIDEWALK_WIDTH, SIDEWALK_HEIGHT],
            base_z: 0.0,
            kind: Kind::Sidewalk,
            bottom: false,
        });
    }
    // Objects stand on the road area between the sidewalks.
    let y_hi = half - if spec.sidewalks >= 1 { SIDEWALK_WIDTH } else { 0.0 };
    let y_lo = -half + if spec.sidewalks >= 2 { SIDEWALK_WIDTH } else { 0.0 };
    let place = |radius: f64, rng: &mut ChaCha8Rng, footprints: &mut Vec<Footprint>| -> Option<[f64; 2]> {
        let (x_in, y0, y1) = (half - radius, y_lo + radius, y_hi - radius);
        if x_in <= 0.0 || y1 <= y0 {
            return None;
        }
        for _ in 0..PLACEMENT_TRIES {
            let c = [rng.gen_range(-x_in..x_in), rng.gen_range(y0..y1)];
            let clear = footprints.iter().all(|f| (f.center[0] - c[0]).hypot(f.center[1] - c[1]) > f.radius + radius + 0.3);
            if clear {
                footprints.push(Footprint { center: c, radius });
                return Some(c);
            }
        }
        None
    };
    let mut failed = 0;
    for _ in 0..spec.slabs {
        let size: [f64; 3] = [rng.gen_range(2.0..3.5), rng.gen_range(0.3..0.6), rng.gen_range(1.8..3.0)];
        let radius = 0.5 * size[0].hypot(size[1]);
        match place(radius, &mut rng, &mut footprints) {
            Some(center) => boxes.push(BoxPrim { center, yaw: rng.gen_range(0.0..PI), size, base_z: 0.0, kind: Kind::Vegetation, bottom: false }),
            None => failed += 1,
        }
    }
    for _ in 0..spec.vehicles {
        let (kind, size) = vehicle_kind(&mut rng);
        let radius = 0.5 * size[0].hypot(size[1]);
        match place(radius, &mut rng, &mut footprints) {
            Some(center) => boxes.push(BoxPrim { center, yaw: rng.gen_range(0.0..PI), size, base_z: 0.0, kind, bottom: false }),
            None => failed += 1,
        }
    }
    for _ in 0..spec.pedestrians {
        match place(PEDESTRIAN_RADIUS, &mut rng, &mut footprints) {
            Some(center) => cylinders.push(CylinderPrim { center, radius: PEDESTRIAN_RADIUS, height: PEDESTRIAN_HEIGHT, kind: Kind::Pedestrian }),
            None => failed += 1,
        }
    }
    if failed > 0 {
        log::warn!("scene {}: {failed} primitives could not be placed", spec.seed);
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut push = |p: Point3, kind: Kind| {
        points.push(p);
        labels.push(spec.palette.label(kind));
    };
    // Ground plane, skipping everything under a footprint.
    let n = sample_count(spec.extent * spec.extent, spec.density, &mut rng);
    for _ in 0..n {
        let p = [rng.gen_range(-half..half), rng.gen_range(-half..half), 0.0];
        if boxes.iter().any(|b| b.covers(p)) || cylinders.iter().any(|c| c.covers(p)) {
            continue;
        }
        let kind = if p[1].abs() <= spec.road_half_width { Kind::Drivable } else { Kind::Terrain };
        push(p, kind);
    }
    for b in &boxes {
        for (p, _) in b.sample(spec.density, &mut rng) {
            push(p, b.kind);
        }
    }
    for c in &cylinders {
        for p in c.sample(spec.density, &mut rng) {
            push(p, c.kind);
        }
    }
    Ok(Scene { cloud: PointCloud::labeled(points, labels)?, boxes, cylinders, extent: spec.extent })
}

impl BoxPrim {
    fn to_local(&self, p: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.base_z]
    }

    fn to_world(&self, l: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [self.center[0] + c * l[0] - s * l[1], self.center[1] + s * l[0] + c * l[1], self.base_z + l[2]]
    }

    /// Whether the footprint contains the horizontal position of `p`.
    pub fn covers(&self, p: Point3) -> bool {
        let l = self.to_local(p);
        l[0].abs() < self.size[0] / 2.0 && l[1].abs() < self.size[1] / 2.0
    }

    /// Distance from `p` to the box's sampled surface.
    pub fn surface_distance(&self, p: Point3) -> f64 {
        let l = self.to_local(p);
        let h = [self.size[0] / 2.0, self.size[1] / 2.0];
        let inside_xy = l[0].abs() <= h[0] && l[1].abs() <= h[1];
        let mut best = f64::INFINITY;
        if inside_xy {
            best = best.min((l[2] - self.size[2]).abs());
            if self.bottom {
                best = best.min(l[2].abs());
            }
        }
        if (0.0..=self.size[2]).contains(&l[2]) {
            if l[1].abs() <= h[1] {
                best = best.min((l[0].abs() - h[0]).abs());
            }
            if l[0].abs() <= h[0] {
                best = best.min((l[1].abs() - h[1]).abs());
            }
        }
        best
    }

    /// Area-proportional samples on the top, side and (optionally) bottom faces.
    pub fn sample(&self, density: f64, rng: &mut ChaCha8Rng) -> Vec<(Point3, usize)> {
        let [a, b, h] = self.size;
        let mut faces: Vec<(f64, Box<dyn Fn(f64, f64) -> Point3>)> = vec![
            (a * b, Box::new(move |u, v| [(u - 0.5) * a, (v - 0.5) * b, h])),
            (a * h, Box::new(move |u, v| [(u - 0.5) * a, b / 2.0, v * h])),
            (a * h, Box::new(move |u, v| [(u - 0.5) * a, -b / 2.0, v * h])),
            (b * h, Box::new(move |u, v| [a / 2.0, (u - 0.5) * b, v * h])),
            (b * h, Box::new(move |u, v| [-a / 2.0, (u - 0.5) * b, v * h])),
        ];
        if self.bottom {
            faces.push((a * b, Box::new(move |u, v| [(u - 0.5) * a, (v - 0.5) * b, 0.0])));
        }
        let mut out = Vec::new();
        for (face, (area, at)) in faces.iter().enumerate() {
            for _ in 0..sample_count(*area, density, rng) {
                let (u, v) = (rng.gen::<f64>(), rng.gen::<f64>());
                out.push((self.to_world(at(u, v)), face));
            }
        }
        out
    }
}

impl CylinderPrim {
    pub fn covers(&self, p: Point3) -> bool {
        (p[0] - self.center[0]).hypot(p[1] - self.center[1]) < self.radius
    }

    pub fn surface_distance(&self, p: Point3) -> f64 {
        let rho = (p[0] - self.center[0]).hypot(p[1] - self.center[1]);
        let z = p[2];
        let mut best = f64::INFINITY;
        if (0.0..=self.height).contains(&z) {
            best = best.min((rho - self.radius).abs());
        }
        if rho <= self.radius {
            best = best.min((z - self.height).abs());
        }
        best
    }

    fn sample(&self, density: f64, rng: &mut ChaCha8Rng) -> Vec<Point3> {
        let mut out = Vec::new();
        for _ in 0..sample_count(2.0 * PI * self.radius * self.height, density, rng) {
            let a = rng.gen_range(0.0..2.0 * PI);
            let z = rng.gen_range(0.0..self.height);
            out.push([self.center[0] + self.radius * a.cos(), self.center[1] + self.radius * a.sin(), z]);
        }
        for _ in 0..sample_count(PI * self.radius * self.radius, density, rng) {
            let a = rng.gen_range(0.0..2.0 * PI);
            let r = self.radius * rng.gen::<f64>().sqrt();
            out.push([self.center[0] + r * a.cos(), self.center[1] + r * a.sin(), self.height]);
        }
        out
    }
}

/// Picks a sensor position `SENSOR_HEIGHT` above a random ground point that
/// has no elevated structure within `clearance` meters horizontally.
pub fn place_sensor(cloud: &PointCloud, clearance: f64, rng: &mut ChaCha8Rng) -> Result<Point3> {
    let cell = clearance.max(0.1);
    let mut elevated: FxHashMap<(i64, i64), Vec<[f64; 2]>> = FxHashMap::default();
    for p in cloud.points.iter().filter(|p| p[2] > 0.05) {
        let k = ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
        elevated.entry(k).or_default().push([p[0], p[1]]);
    }
    let ground: Vec<Point3> = cloud.points.iter().copied().filter(|p| p[2].abs() < 1e-9).collect();
    if ground.is_empty() {
        return Err(Error::Empty("scene has no ground points for the sensor".into()));
    }
    for _ in 0..1000 {
        let g = ground[rng.gen_range(0..ground.len())];
        let k = ((g[0] / cell).floor() as i64, (g[1] / cell).floor() as i64);
        let clear = (-1..=1).all(|dx| {
            (-1..=1).all(|dy| elevated.get(&(k.0 + dx, k.1 + dy)).map_or(true, |v| v.iter().all(|q| (q[0] - g[0]).hypot(q[1] - g[1]) > clearance)))
        });
        if clear {
            return Ok([g[0], g[1], SENSOR_HEIGHT]);
        }
    }
    Err(Error::Empty("no free ground location for the sensor".into()))
}

/// Union of pose-transformed frames, deduplicated on a grid of cell size `cell`
/// (first point per cell wins).
pub fn aggregate_frames(frames: &[PointCloud], poses: &[RigidTransform], cell: f64) -> Result<PointCloud> {
    if frames.len() != poses.len() {
        return Err(Error::Config(format!("{} frames but {} poses", frames.len(), poses.len())));
    }
    if !(cell > 0.0) {
        return Err(Error::Config("deduplication cell must be positive".into()));
    }
    let labeled = frames.iter().all(|f| f.labels.is_some());
    let mut seen = rustc_hash::FxHashSet::default();
    let mut out = PointCloud { points: Vec::new(), labels: labeled.then(Vec::new) };
    for (frame, pose) in frames.iter().zip(poses) {
        pose.validate(1e-9)?;
        for (i, p) in frame.points.iter().enumerate() {
            let q = pose.apply(*p);
            let key = quantize(q, cell, [0.0; 3]).ok_or(Error::CoordinateOutOfRange { index: i, x: q[0], y: q[1], z: q[2] })?;
            if seen.insert(key.pack()) {
                out.points.push(q);
                if let Some(l) = &mut out.labels {
                    l.push(frame.label(i));
                }
            }
        }
    }
    Ok(out)
}
