//! Point clouds, the voxel grid, and sparse voxel sets.
//!
//! Voxel coordinates hash to a 64-bit key by offsetting each axis by 2^20 and
//! packing 21 bits per axis, `x` in the high bits. The packing preserves the
//! lexicographic `(x, y, z)` order, which is the canonical voxel order used
//! throughout.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HASH_BITS: u32 = 21;
pub const HASH_OFFSET: i64 = 1 << 20;
const HASH_MASK: u64 = (1 << HASH_BITS) - 1;
/// Key of the origin voxel; subtracting it from a key removes the packing offset.
pub const ORIGIN_KEY: u64 = ((HASH_OFFSET as u64) << 42) | ((HASH_OFFSET as u64) << 21) | HASH_OFFSET as u64;

/// Width of the raw per-voxel encoding: mean offset (3), mean intensity, log(1 + count).
pub const RAW_FEATURES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelCoord {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl VoxelCoord {
    pub const fn new(ix: i32, iy: i32, iz: i32) -> Self {
        Self { ix, iy, iz }
    }

    pub fn axes(&self) -> [i32; 3] {
        [self.ix, self.iy, self.iz]
    }

    pub fn offset(&self, dx: i32, dy: i32, dz: i32) -> Self {
        Self::new(self.ix + dx, self.iy + dy, self.iz + dz)
    }
}

/// Injective key for coordinates in `[−2^20, 2^20)` on every axis.
pub fn hash_coord(c: VoxelCoord) -> Result<u64> {
    let mut key = 0u64;
    for (axis, v) in c.axes().into_iter().enumerate() {
        let shifted = v as i64 + HASH_OFFSET;
        if !(0..(1 << HASH_BITS)).contains(&shifted) {
            return Err(Error::Range {
                axis,
                value: v as i64,
            });
        }
        key = (key << HASH_BITS) | shifted as u64;
    }
    Ok(key)
}

pub fn unhash_coord(key: u64) -> VoxelCoord {
    let axis = |shift: u32| (((key >> shift) & HASH_MASK) as i64 - HASH_OFFSET) as i32;
    VoxelCoord::new(axis(42), axis(21), axis(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Voxel edge lengths in meters.
    pub voxel_size: [f64; 3],
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            voxel_size: [0.5, 0.5, 0.5],
            range_min: [0.0, 0.0, 0.0],
            range_max: [24.0, 24.0, 4.0],
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if !(self.voxel_size[i] > 0.0 && self.voxel_size[i].is_finite()) {
                return Err(Error::Config(format!("voxel size on axis {i} must be positive")));
            }
            if self.range_min[i].partial_cmp(&self.range_max[i]) != Some(std::cmp::Ordering::Less) {
                return Err(Error::Config(format!("range on axis {i} is not well ordered")));
            }
        }
        Ok(())
    }

    /// Voxel containing `p`, or `None` outside `[range_min, range_max)`.
    pub fn coord_of(&self, p: [f64; 3]) -> Option<VoxelCoord> {
        let mut idx = [0i32; 3];
        for i in 0..3 {
            if !(p[i] >= self.range_min[i] && p[i] < self.range_max[i]) {
                return None;
            }
            idx[i] = ((p[i] - self.range_min[i]) / self.voxel_size[i]).floor() as i32;
        }
        Some(VoxelCoord::new(idx[0], idx[1], idx[2]))
    }

    pub fn center(&self, c: VoxelCoord) -> [f64; 3] {
        let a = c.axes();
        std::array::from_fn(|i| self.range_min[i] + (a[i] as f64 + 0.5) * self.voxel_size[i])
    }

    /// Number of cells per axis.
    pub fn extent(&self) -> [i32; 3] {
        std::array::from_fn(|i| ((self.range_max[i] - self.range_min[i]) / self.voxel_size[i]).ceil() as i32)
    }

    pub fn in_range(&self, c: VoxelCoord) -> bool {
        let e = self.extent();
        c.axes().iter().zip(e).all(|(&v, e)| v >= 0 && v < e)
    }
}

/// Occupied voxels with one feature row each, in canonical (hash) order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelSet {
    coords: Vec<VoxelCoord>,
    features: Tensor,
    grid: GridConfig,
}

impl SparseVoxelSet {
    pub fn new(coords: Vec<VoxelCoord>, features: Tensor, grid: GridConfig) -> Result<Self> {
        let dims = features.dims();
        if dims.len() != 2 || dims[0] != coords.len() {
            return Err(Error::Dimension {
                op: "sparse voxel set",
                lhs: vec![coords.len()],
                rhs: dims.to_vec(),
            });
        }
        let mut seen = HashMap::with_capacity(coords.len());
        for (i, &c) in coords.iter().enumerate() {
            if seen.insert(hash_coord(c)?, i).is_some() {
                return Err(Error::Contract(format!("duplicate voxel {c:?}")));
            }
        }
        Ok(Self { coords, features, grid })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn width(&self) -> usize {
        self.features.dims()[1]
    }

    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        Self::new(self.coords.clone(), features, self.grid.clone())
    }

    /// Map from hash key to row index.
    pub fn index(&self) -> HashMap<u64, usize> {
        index_of(&self.coords)
    }
}

pub fn index_of(coords: &[VoxelCoord]) -> HashMap<u64, usize> {
    coords
        .iter()
        .enumerate()
        .map(|(i, &c)| (hash_coord(c).expect("coords validated on construction"), i))
        .collect()
}

/// Dynamic voxel feature encoding: one voxel per occupied cell holding the mean
/// point offset from the voxel center (meters), the mean intensity, and
/// `ln(1 + point count)`. Points outside the range are dropped.
pub fn voxelize(cloud: &PointCloud, grid: &GridConfig) -> Result<SparseVoxelSet> {
    grid.validate()?;
    let mut cells: BTreeMap<u64, Vec<Point>> = BTreeMap::new();
    for p in &cloud.points {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite()) {
            return Err(Error::Contract("point cloud contains a non-finite value".into()));
        }
        if let Some(c) = grid.coord_of(p.xyz()) {
            cells.entry(hash_coord(c)?).or_default().push(*p);
        }
    }
    let mut coords = Vec::with_capacity(cells.len());
    let mut data = Vec::with_capacity(cells.len() * RAW_FEATURES);
    for (key, mut pts) in cells {
        // Sorting fixes the summation order, so the result ignores input order.
        pts.sort_by(|a, b| {
            let ka = [a.x, a.y, a.z, a.intensity].map(f64::to_bits);
            let kb = [b.x, b.y, b.z, b.intensity].map(f64::to_bits);
            ka.cmp(&kb)
        });
        let c = unhash_coord(key);
        let center = grid.center(c);
        let n = pts.len() as f64;
        let mut sums = [0.0; 4];
        for p in &pts {
            sums[0] += p.x - center[0];
            sums[1] += p.y - center[1];
            sums[2] += p.z - center[2];
            sums[3] += p.intensity;
        }
        data.extend(sums.iter().map(|s| s / n));
        data.push(n.ln_1p());
        coords.push(c);
    }
    let features = Tensor::new(&[coords.len(), RAW_FEATURES], data)?;
    SparseVoxelSet::new(coords, features, grid.clone())
}

/// Coordinates present in both sets, sorted by hash key.
pub fn intersect_coords(a: &SparseVoxelSet, b: &SparseVoxelSet) -> Result<Vec<VoxelCoord>> {
    if a.grid != b.grid {
        return Err(Error::Config("cannot intersect voxel sets on different grids".into()));
    }
    Ok(intersect_coord_lists(a.coords(), b.coords()))
}

pub fn intersect_coord_lists(a: &[VoxelCoord], b: &[VoxelCoord]) -> Vec<VoxelCoord> {
    let other = index_of(b);
    let mut keys: Vec<u64> = a
        .iter()
        .map(|&c| hash_coord(c).expect("validated coords"))
        .filter(|k| other.contains_key(k))
        .collect();
    keys.sort_unstable();
    keys.into_iter().map(unhash_coord).collect()
}

/// Reads `x,y,z,intensity` CSV with a header row.
pub fn read_csv(r: impl Read) -> Result<PointCloud> {
    let mut reader = csv::Reader::from_reader(r);
    let headers = reader.headers()?.clone();
    let expected = ["x", "y", "z", "intensity"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
        return Err(Error::Config(format!("unexpected point cloud header {headers:?}")));
    }
    let mut points = Vec::new();
    for record in reader.deserialize() {
        let (x, y, z, intensity): (f64, f64, f64, f64) = record?;
        points.push(Point::new(x, y, z, intensity));
    }
    Ok(PointCloud { points })
}

pub fn write_csv(cloud: &PointCloud, w: impl Write) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(["x", "y", "z", "intensity"])?;
    for p in &cloud.points {
        writer.serialize((p.x, p.y, p.z, p.intensity))?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads packed little-endian `f32` quadruples.
pub fn read_bin(mut r: impl Read) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Config(format!("binary cloud length {} is not a multiple of 16", bytes.len())));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().expect("4 bytes")) as f64;
            Point::new(f(0), f(1), f(2), f(3))
        })
        .collect();
    Ok(PointCloud { points })
}

pub fn write_bin(cloud: &PointCloud, mut w: impl Write) -> Result<()> {
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads a cloud, choosing the format from the extension (`.csv` or `.bin`).
pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => read_bin(std::io::BufReader::new(file)),
        _ => read_csv(std::io::BufReader::new(file)),
    }
}
