//! Hash-indexed sparse voxel grids.
//!
//! A [`CoordSet`] is an insertion-ordered set of integer voxel coordinates with
//! an O(1) coordinate-to-row index. Every network tensor in the crate is a
//! feature [`Matrix`] whose rows are aligned with one of these sets, and every
//! convolution is driven by a precomputed [`KernelMap`] between two sets.

use std::io::{Read, Write};

use rustc_hash::FxHashMap;

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::io::{read_bytes, read_f32, read_f64, read_i32, read_u16, read_u32, read_u64, read_u8};
use crate::matrix::Matrix;

/// Components of a [`VoxelCoord`] must satisfy `|v| < COORD_LIMIT`.
pub const COORD_LIMIT: i32 = 1 << 20;
const COORD_BITS: u32 = 21;
const COORD_MASK: u64 = (1 << COORD_BITS) - 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelCoord {
    #[inline]
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn in_range(self) -> bool {
        [self.x, self.y, self.z].iter().all(|v| v.abs() < COORD_LIMIT)
    }

    /// Offset-binary packing of the three 21-bit components into one key.
    #[inline]
    pub fn pack(self) -> u64 {
        debug_assert!(self.in_range(), "{self:?} outside the packable range");
        let enc = |v: i32| ((v + COORD_LIMIT) as u64) & COORD_MASK;
        (enc(self.x) << (2 * COORD_BITS)) | (enc(self.y) << COORD_BITS) | enc(self.z)
    }

    #[inline]
    pub fn unpack(key: u64) -> Self {
        let dec = |k: u64| (k & COORD_MASK) as i32 - COORD_LIMIT;
        Self::new(dec(key >> (2 * COORD_BITS)), dec(key >> COORD_BITS), dec(key))
    }

    /// Cell containing this voxel one level coarser (floor division by two).
    #[inline]
    pub fn parent(self) -> Self {
        Self::new(self.x.div_euclid(2), self.y.div_euclid(2), self.z.div_euclid(2))
    }

    /// The eight cells one level finer, in `(dx, dy, dz)` lexicographic order.
    pub fn children(self) -> impl Iterator<Item = VoxelCoord> {
        (0..8).map(move |i| {
            Self::new(2 * self.x + (i >> 2), 2 * self.y + ((i >> 1) & 1), 2 * self.z + (i & 1))
        })
    }

    #[inline]
    pub fn offset(self, d: [i32; 3]) -> Self {
        Self::new(self.x + d[0], self.y + d[1], self.z + d[2])
    }

    #[inline]
    pub fn scaled(self, s: i32) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    /// Center of the cell in world coordinates.
    #[inline]
    pub fn center(self, voxel_size: f64, origin: Point3) -> Point3 {
        [
            origin[0] + (self.x as f64 + 0.5) * voxel_size,
            origin[1] + (self.y as f64 + 0.5) * voxel_size,
            origin[2] + (self.z as f64 + 0.5) * voxel_size,
        ]
    }
}

/// Insertion-ordered set of voxel coordinates.
#[derive(Clone, Debug, Default)]
pub struct CoordSet {
    coords: Vec<VoxelCoord>,
    index: FxHashMap<u64, u32>,
}

impl CoordSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            coords: Vec::with_capacity(n),
            index: FxHashMap::with_capacity_and_hasher(n, Default::default()),
        }
    }

    /// Inserts `c` if absent; returns its row and whether it was new.
    pub fn insert(&mut self, c: VoxelCoord) -> (usize, bool) {
        let next = self.coords.len() as u32;
        match self.index.entry(c.pack()) {
            std::collections::hash_map::Entry::Occupied(e) => (*e.get() as usize, false),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(next);
                self.coords.push(c);
                (next as usize, true)
            }
        }
    }

    #[inline]
    pub fn row_of(&self, c: VoxelCoord) -> Option<usize> {
        if !c.in_range() {
            return None;
        }
        self.index.get(&c.pack()).map(|&r| r as usize)
    }

    #[inline]
    pub fn contains(&self, c: VoxelCoord) -> bool {
        self.row_of(c).is_some()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize) -> VoxelCoord {
        self.coords[row]
    }

    pub fn as_slice(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn iter(&self) -> std::iter::Copied<std::slice::Iter<'_, VoxelCoord>> {
        self.coords.iter().copied()
    }

    /// Set equality, ignoring order.
    pub fn set_eq(&self, other: &CoordSet) -> bool {
        self.len() == other.len() && self.iter().all(|c| other.contains(c))
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> CoordSet {
        rows.iter().map(|&r| self.coords[r]).collect()
    }

    /// Coordinates in ascending `(x, y, z)` order.
    pub fn sorted(&self) -> Vec<VoxelCoord> {
        let mut v = self.coords.clone();
        v.sort_unstable();
        v
    }
}

impl FromIterator<VoxelCoord> for CoordSet {
    fn from_iter<I: IntoIterator<Item = VoxelCoord>>(iter: I) -> Self {
        let iter = iter.into_iter();
        let mut set = CoordSet::with_capacity(iter.size_hint().0);
        for c in iter {
            set.insert(c);
        }
        set
    }
}

impl PartialEq for CoordSet {
    /// Ordered equality; use [`CoordSet::set_eq`] for set semantics.
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
    }
}

/// Level-tagged voxel set with one feature row per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrid {
    pub level: u8,
    pub voxel_size: f64,
    pub origin: Point3,
    pub coords: CoordSet,
    pub features: Matrix,
}

impl SparseGrid {
    /// A grid whose features are the constant single channel `1.0`.
    pub fn occupancy(level: u8, voxel_size: f64, origin: Point3, coords: CoordSet) -> Self {
        let n = coords.len();
        Self { level, voxel_size, origin, coords, features: Matrix::filled(n, 1, 1.0) }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    /// Whether `other` lives on the same lattice (level, voxel size and origin).
    pub fn same_lattice(&self, other: &SparseGrid) -> bool {
        self.level == other.level && self.voxel_size == other.voxel_size && self.origin == other.origin
    }

    pub fn centers(&self) -> Vec<Point3> {
        voxel_centers(&self.coords, self.voxel_size, self.origin)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"SVGR")?;
        w.write_all(&GRID_VERSION.to_le_bytes())?;
        w.write_all(&[self.level])?;
        w.write_all(&self.voxel_size.to_le_bytes())?;
        for o in self.origin {
            w.write_all(&o.to_le_bytes())?;
        }
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.channels() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.len() * 12);
        for c in self.coords.iter() {
            buf.extend_from_slice(&c.x.to_le_bytes());
            buf.extend_from_slice(&c.y.to_le_bytes());
            buf.extend_from_slice(&c.z.to_le_bytes());
        }
        w.write_all(&buf)?;
        let mut buf = Vec::with_capacity(self.features.data().len() * 4);
        for v in self.features.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let magic = read_bytes::<4, _>(r)?;
        if &magic != b"SVGR" {
            return Err(Error::Format("not an SVGR grid file".into()));
        }
        let version = read_u16(r)?;
        if version != GRID_VERSION {
            return Err(Error::Format(format!("unsupported SVGR version {version}")));
        }
        let level = read_u8(r)?;
        let voxel_size = read_f64(r)?;
        let origin = [read_f64(r)?, read_f64(r)?, read_f64(r)?];
        if !(voxel_size > 0.0 && voxel_size.is_finite() && origin.iter().all(|o| o.is_finite())) {
            return Err(Error::Format(format!("invalid lattice: voxel size {voxel_size}, origin {origin:?}")));
        }
        let n = read_u64(r)? as usize;
        let channels = read_u32(r)? as usize;
        let mut coords = CoordSet::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let c = VoxelCoord::new(read_i32(r)?, read_i32(r)?, read_i32(r)?);
            if !c.in_range() {
                return Err(Error::Format(format!("voxel {c:?} outside the coordinate range")));
            }
            if !coords.insert(c).1 {
                return Err(Error::Format(format!("duplicate voxel {c:?}")));
            }
        }
        let len = n.checked_mul(channels).ok_or_else(|| Error::Format(format!("{n} voxels x {channels} channels is implausible")))?;
        let mut data = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            data.push(read_f32(r)? as f64);
        }
        Ok(Self { level, voxel_size, origin, coords, features: Matrix::from_vec(n, channels, data) })
    }
}

const GRID_VERSION: u16 = 1;

/// Quantizes points into half-open cells `[k s, (k+1) s)` relative to `origin`.
///
/// Returns the occupancy grid (level 0, constant `1.0` feature) and the row of
/// the voxel that received each input point.
pub fn voxelize(points: &PointCloud, voxel_size: f64, origin: Point3) -> Result<(SparseGrid, Vec<usize>)> {
    voxelize_points(&points.points, voxel_size, origin)
}

pub fn voxelize_points(points: &[Point3], voxel_size: f64, origin: Point3) -> Result<(SparseGrid, Vec<usize>)> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::Config(format!("voxel size must be positive, got {voxel_size}")));
    }
    let mut coords = CoordSet::with_capacity(points.len() / 4);
    let mut point_to_voxel = Vec::with_capacity(points.len());
    for (index, p) in points.iter().enumerate() {
        let c = quantize(*p, voxel_size, origin)
            .ok_or(Error::CoordinateOutOfRange { index, x: p[0], y: p[1], z: p[2] })?;
        point_to_voxel.push(coords.insert(c).0);
    }
    Ok((SparseGrid::occupancy(0, voxel_size, origin, coords), point_to_voxel))
}

/// Cell index of `p`, or `None` if it is not finite or exceeds the coordinate budget.
#[inline]
pub fn quantize(p: Point3, voxel_size: f64, origin: Point3) -> Option<VoxelCoord> {
    let mut c = [0i32; 3];
    for a in 0..3 {
        let q = ((p[a] - origin[a]) / voxel_size).floor();
        if !(q.abs() < COORD_LIMIT as f64) {
            return None;
        }
        c[a] = q as i32;
    }
    Some(VoxelCoord::new(c[0], c[1], c[2]))
}

/// Parents of every coordinate (floor division by two), deduplicated in first-seen order.
pub fn coarsen_coords(coords: &CoordSet) -> CoordSet {
    coords.iter().map(VoxelCoord::parent).collect()
}

/// All eight children of every coordinate.
pub fn dense_upsample_coords(coords: &CoordSet) -> CoordSet {
    let mut out = CoordSet::with_capacity(coords.len() * 8);
    for c in coords.iter() {
        for ch in c.children() {
            out.insert(ch);
        }
    }
    out
}

/// Elements of `a` that are also in `b`, in the order of `a`.
pub fn set_intersect(a: &CoordSet, b: &CoordSet) -> CoordSet {
    a.iter().filter(|c| b.contains(*c)).collect()
}

/// Elements of `a` that are not in `b`, in the order of `a`.
pub fn set_diff(a: &CoordSet, b: &CoordSet) -> CoordSet {
    a.iter().filter(|c| !b.contains(*c)).collect()
}

/// Elements of `a` followed by the elements of `b` not in `a`.
pub fn set_union(a: &CoordSet, b: &CoordSet) -> CoordSet {
    let mut out = a.clone();
    for c in b.iter() {
        out.insert(c);
    }
    out
}

pub fn voxel_centers(coords: &CoordSet, voxel_size: f64, origin: Point3) -> Vec<Point3> {
    coords.iter().map(|c| c.center(voxel_size, origin)).collect()
}

/// Kernel offsets for an odd `kernel_size`, the zero offset first and the rest
/// in `(dx, dy, dz)` lexicographic order.
pub fn kernel_offsets(kernel_size: usize) -> Vec<[i32; 3]> {
    assert!(kernel_size % 2 == 1, "kernel size must be odd");
    let r = (kernel_size / 2) as i32;
    let mut out = vec![[0, 0, 0]];
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                if [dx, dy, dz] != [0, 0, 0] {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// One term of a sparse convolution: input row, output row, kernel offset index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelEntry {
    pub input: u32,
    pub output: u32,
    pub offset: u16,
}

/// Compressed row lists over kernel-map entries.
#[derive(Clone, Debug, Default)]
struct Csr {
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl Csr {
    fn build(n: usize, keys: impl Iterator<Item = u32> + Clone) -> Self {
        let mut starts = vec![0u32; n + 1];
        for k in keys.clone() {
            starts[k as usize + 1] += 1;
        }
        for i in 0..n {
            starts[i + 1] += starts[i];
        }
        let mut fill = starts.clone();
        let mut items = vec![0u32; starts[n] as usize];
        for (e, k) in keys.enumerate() {
            items[fill[k as usize] as usize] = e as u32;
            fill[k as usize] += 1;
        }
        Self { starts, items }
    }

    #[inline]
    fn get(&self, i: usize) -> &[u32] {
        &self.items[self.starts[i] as usize..self.starts[i + 1] as usize]
    }
}

/// Precomputed neighbor pairs for a sparse convolution.
///
/// Entry `(i, o, k)` exists iff `in[i] == stride * out[o] + offset[k]`.
/// Entries are sorted by `(offset, output)`; the per-output and per-input
/// views list entries in that same order so every accumulation is performed in
/// a fixed sequence.
#[derive(Clone, Debug)]
pub struct KernelMap {
    pub kernel_size: usize,
    pub stride: usize,
    pub n_in: usize,
    pub n_out: usize,
    entries: Vec<KernelEntry>,
    offset_starts: Vec<usize>,
    by_output: Csr,
    by_input: Csr,
}

impl KernelMap {
    pub fn build(input: &CoordSet, output: &CoordSet, kernel_size: usize, stride: usize) -> Self {
        assert!(kernel_size % 2 == 1, "kernel size must be odd");
        assert!(stride >= 1, "stride must be positive");
        let offsets = kernel_offsets(kernel_size);
        let mut entries = Vec::new();
        let mut offset_starts = Vec::with_capacity(offsets.len() + 1);
        for (k, d) in offsets.iter().enumerate() {
            offset_starts.push(entries.len());
            for (o, oc) in output.iter().enumerate() {
                if let Some(i) = input.row_of(oc.scaled(stride as i32).offset(*d)) {
                    entries.push(KernelEntry { input: i as u32, output: o as u32, offset: k as u16 });
                }
            }
        }
        offset_starts.push(entries.len());
        let by_output = Csr::build(output.len(), entries.iter().map(|e| e.output));
        let by_input = Csr::build(input.len(), entries.iter().map(|e| e.input));
        Self {
            kernel_size,
            stride,
            n_in: input.len(),
            n_out: output.len(),
            entries,
            offset_starts,
            by_output,
            by_input,
        }
    }

    /// Submanifold map: stride 1 with output set equal to the input set.
    pub fn submanifold(coords: &CoordSet, kernel_size: usize) -> Self {
        Self::build(coords, coords, kernel_size, 1)
    }

    pub fn volume(&self) -> usize {
        self.kernel_size.pow(3)
    }

    pub fn entries(&self) -> &[KernelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries_for_offset(&self, k: usize) -> &[KernelEntry] {
        &self.entries[self.offset_starts[k]..self.offset_starts[k + 1]]
    }

    /// Entry indices that write output row `o`, in offset order.
    pub fn entries_for_output(&self, o: usize) -> impl Iterator<Item = &KernelEntry> {
        self.by_output.get(o).iter().map(move |&e| &self.entries[e as usize])
    }

    /// Entry indices that read input row `i`, in offset order.
    pub fn entries_for_input(&self, i: usize) -> impl Iterator<Item = &KernelEntry> {
        self.by_input.get(i).iter().map(move |&e| &self.entries[e as usize])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeSet, HashSet};

    fn set(v: &[(i32, i32, i32)]) -> CoordSet {
        v.iter().map(|&(x, y, z)| VoxelCoord::new(x, y, z)).collect()
    }

    #[test]
    fn voxelize_single_point() {
        let pc = PointCloud::new(vec![[0.05, 0.05, 0.05]]);
        let (g, p2v) = voxelize(&pc, 0.2, [0.0; 3]).unwrap();
        assert_eq!(g.coords.as_slice(), &[VoxelCoord::new(0, 0, 0)]);
        assert_eq!(p2v, vec![0]);
        assert_eq!(g.features.data(), &[1.0]);
    }

    #[test]
    fn voxelize_three_points_on_a_line() {
        let pc = PointCloud::new(vec![[0.05, 0.0, 0.0], [0.15, 0.0, 0.0], [0.25, 0.0, 0.0]]);
        let (g, p2v) = voxelize(&pc, 0.2, [0.0; 3]).unwrap();
        assert_eq!(g.coords.as_slice(), &[VoxelCoord::new(0, 0, 0), VoxelCoord::new(1, 0, 0)]);
        assert_eq!(p2v, vec![0, 0, 1]);
    }

    #[test]
    fn voxelize_boundary_goes_to_upper_cell() {
        let pc = PointCloud::new(vec![[0.5, 0.0, -0.5]]);
        let (g, _) = voxelize(&pc, 0.25, [0.0; 3]).unwrap();
        assert_eq!(g.coords.get(0), VoxelCoord::new(2, 0, -2));
    }

    #[test]
    fn voxelize_matches_brute_force_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point3> =
            (0..10_000).map(|_| [rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)]).collect();
        let (g, p2v) = voxelize_points(&pts, 0.2, [0.0; 3]).unwrap();
        let oracle: HashSet<(i64, i64, i64)> = pts
            .iter()
            .map(|p| ((p[0] / 0.2).floor() as i64, (p[1] / 0.2).floor() as i64, (p[2] / 0.2).floor() as i64))
            .collect();
        assert_eq!(g.len(), oracle.len());
        for (p, &row) in pts.iter().zip(&p2v) {
            let c = g.coords.get(row);
            assert_eq!(
                (c.x as i64, c.y as i64, c.z as i64),
                ((p[0] / 0.2).floor() as i64, (p[1] / 0.2).floor() as i64, (p[2] / 0.2).floor() as i64)
            );
        }
    }

    #[test]
    fn voxelize_rejects_overflow() {
        let pc = PointCloud::new(vec![[0.0; 3], [1.0e6, 0.0, 0.0]]);
        match voxelize(&pc, 0.2, [0.0; 3]) {
            Err(Error::CoordinateOutOfRange { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected out-of-range, got {other:?}"),
        }
        assert!(voxelize(&PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]), 0.2, [0.0; 3]).is_err());
    }

    #[test]
    fn coarsen_examples() {
        assert!(coarsen_coords(&set(&[(0, 0, 0)])).set_eq(&set(&[(0, 0, 0)])));
        assert!(coarsen_coords(&set(&[(0, 0, 0), (1, 1, 1), (2, 0, 0)])).set_eq(&set(&[(0, 0, 0), (1, 0, 0)])));
        assert!(coarsen_coords(&set(&[(-1, -1, -1)])).set_eq(&set(&[(-1, -1, -1)])));
    }

    #[test]
    fn dense_upsample_examples() {
        let up = dense_upsample_coords(&set(&[(0, 0, 0)]));
        assert_eq!(up.len(), 8);
        let up = dense_upsample_coords(&set(&[(1, 2, 3)]));
        let want: CoordSet = (2..4)
            .flat_map(|x| (4..6).flat_map(move |y| (6..8).map(move |z| VoxelCoord::new(x, y, z))))
            .collect();
        assert!(up.set_eq(&want));
        assert_eq!(dense_upsample_coords(&set(&[(0, 0, 0), (1, 0, 0)])).len(), 16);
    }

    #[test]
    fn kernel_map_single_voxel() {
        let s = set(&[(0, 0, 0)]);
        let km = KernelMap::submanifold(&s, 3);
        assert_eq!(km.entries(), &[KernelEntry { input: 0, output: 0, offset: 0 }]);
    }

    #[test]
    fn kernel_map_two_adjacent() {
        let s = set(&[(0, 0, 0), (1, 0, 0)]);
        let km = KernelMap::submanifold(&s, 3);
        assert_eq!(km.len(), 4);
        let offs = kernel_offsets(3);
        for e in km.entries() {
            let i = s.get(e.input as usize);
            let o = s.get(e.output as usize);
            assert_eq!(i, o.offset(offs[e.offset as usize]));
        }
    }

    #[test]
    fn kernel_map_plate_in_degree() {
        let s: CoordSet = (0..5).flat_map(|x| (0..5).map(move |y| VoxelCoord::new(x, y, 0))).collect();
        let km = KernelMap::submanifold(&s, 3);
        for (o, c) in s.iter().enumerate() {
            let brute = s.iter().filter(|n| (n.x - c.x).abs() <= 1 && (n.y - c.y).abs() <= 1 && (n.z - c.z).abs() <= 1).count();
            assert_eq!(km.entries_for_output(o).count(), brute);
        }
    }

    #[test]
    fn kernel_map_entries_sorted() {
        let s: CoordSet = (0..4).flat_map(|x| (0..3).map(move |y| VoxelCoord::new(x, y, x % 2))).collect();
        let km = KernelMap::submanifold(&s, 3);
        let keys: Vec<(u16, u32)> = km.entries().iter().map(|e| (e.offset, e.output)).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
        for o in 0..s.len() {
            let ks: Vec<u16> = km.entries_for_output(o).map(|e| e.offset).collect();
            assert!(ks.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn strided_kernel_map_covers_children() {
        let fine: CoordSet = (-2..2).flat_map(|x| (-2..2).map(move |y| VoxelCoord::new(x, y, 0))).collect();
        let coarse = coarsen_coords(&fine);
        let km = KernelMap::build(&fine, &coarse, 3, 2);
        for e in km.entries() {
            let i = fine.get(e.input as usize);
            let o = coarse.get(e.output as usize);
            let d = [i.x - 2 * o.x, i.y - 2 * o.y, i.z - 2 * o.z];
            assert!(d.iter().all(|v| v.abs() <= 1));
        }
        // Every input reaches its parent through offset 0 or +1.
        for i in 0..fine.len() {
            assert!(km.entries_for_input(i).any(|e| coarse.get(e.output as usize) == fine.get(i).parent()));
        }
    }

    #[test]
    fn intersect_and_diff() {
        let a = set(&[(0, 0, 0), (1, 0, 0)]);
        let b = set(&[(1, 0, 0), (2, 0, 0)]);
        assert!(set_intersect(&a, &a).set_eq(&a));
        assert_eq!(set_intersect(&a, &b), set(&[(1, 0, 0)]));
        assert_eq!(set_diff(&a, &b), set(&[(0, 0, 0)]));
    }

    #[test]
    fn intersect_matches_sorted_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gen = || -> CoordSet {
            (0..1000).map(|_| VoxelCoord::new(rng.gen_range(-8..8), rng.gen_range(-8..8), rng.gen_range(-4..4))).collect()
        };
        let a = gen();
        let b = gen();
        let (sa, sb) = (a.sorted(), b.sorted());
        let (mut i, mut j, mut merged) = (0, 0, Vec::new());
        while i < sa.len() && j < sb.len() {
            match sa[i].cmp(&sb[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    merged.push(sa[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        let inter = set_intersect(&a, &b);
        assert_eq!(inter.sorted(), merged);
        let diff: BTreeSet<_> = set_diff(&a, &b).iter().collect();
        let want: BTreeSet<_> = sa.iter().copied().filter(|c| !merged.contains(c)).collect();
        assert_eq!(diff, want);
    }

    #[test]
    fn centers() {
        let c = VoxelCoord::new(0, 0, 0).center(0.2, [0.0; 3]);
        assert!(c.iter().all(|v| (v - 0.1).abs() < 1e-12));
        let c = VoxelCoord::new(-1, 0, 2).center(0.2, [0.0; 3]);
        assert!((c[0] + 0.1).abs() < 1e-12 && (c[1] - 0.1).abs() < 1e-12 && (c[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pack_roundtrip_million() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = HashSet::new();
        for _ in 0..1_000_000 {
            let c = VoxelCoord::new(
                rng.gen_range(-COORD_LIMIT + 1..COORD_LIMIT),
                rng.gen_range(-COORD_LIMIT + 1..COORD_LIMIT),
                rng.gen_range(-COORD_LIMIT + 1..COORD_LIMIT),
            );
            assert_eq!(VoxelCoord::unpack(c.pack()), c);
            seen.insert((c, c.pack()));
        }
        let keys: HashSet<u64> = seen.iter().map(|(_, k)| *k).collect();
        assert_eq!(keys.len(), seen.len());
    }

    #[test]
    fn determinism_of_coordinate_ops() {
        let s: CoordSet = (0..50).map(|i| VoxelCoord::new(i * 7 % 13, i % 5, -(i % 3))).collect();
        assert_eq!(dense_upsample_coords(&s), dense_upsample_coords(&s));
        assert_eq!(coarsen_coords(&s), coarsen_coords(&s));
        assert_eq!(KernelMap::submanifold(&s, 3).entries(), KernelMap::submanifold(&s, 3).entries());
    }

    #[test]
    fn grid_file_roundtrip() {
        let s = set(&[(0, 1, 2), (-3, 4, -5)]);
        let mut g = SparseGrid::occupancy(2, 0.8, [1.0, -2.0, 0.5], s);
        g.features = Matrix::from_vec(2, 2, vec![0.5, 1.0, -2.0, 3.25]);
        let mut bytes = Vec::new();
        g.write_to(&mut bytes).unwrap();
        let back = SparseGrid::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.coords, g.coords);
        assert_eq!(back.features, g.features);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    proptest! {
        #[test]
        fn center_lies_in_source_cell(x in -50.0f64..50.0, y in -50.0f64..50.0, z in -50.0f64..50.0) {
            let (g, _) = voxelize_points(&[[x, y, z]], 0.2, [0.0; 3]).unwrap();
            let c = g.centers()[0];
            for (p, q) in [x, y, z].iter().zip(c) {
                prop_assert!((p - q).abs() <= 0.1 + 1e-9);
            }
        }

        #[test]
        fn coarsen_inverts_dense_upsample(v in proptest::collection::vec((-100i32..100, -100i32..100, -100i32..100), 1..40)) {
            let s: CoordSet = v.into_iter().map(|(x, y, z)| VoxelCoord::new(x, y, z)).collect();
            let up = dense_upsample_coords(&s);
            prop_assert_eq!(up.len(), 8 * s.len());
            prop_assert!(coarsen_coords(&up).set_eq(&s));
        }

        #[test]
        fn submanifold_map_has_identity(v in proptest::collection::vec((-6i32..6, -6i32..6, -6i32..6), 1..60)) {
            let s: CoordSet = v.into_iter().map(|(x, y, z)| VoxelCoord::new(x, y, z)).collect();
            let km = KernelMap::submanifold(&s, 3);
            let centers: Vec<_> = km.entries_for_offset(0).to_vec();
            prop_assert_eq!(centers.len(), s.len());
            prop_assert!(centers.iter().all(|e| e.input == e.output));
        }
    }
}
