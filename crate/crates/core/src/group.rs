//! Dynamic voxel grouping: window bucketing, Z-order serialization, padding and
//! the inverse scatter.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::voxel::{GridConfig, SparseVoxelSet, VoxelCoord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    /// Window edge in voxels along every axis.
    pub window: u32,
    /// Sequence length L.
    pub max_len: usize,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self { window: 8, max_len: 64 }
    }
}

impl GroupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.max_len == 0 {
            return Err(Error::Config("group window and length must be at least 1".into()));
        }
        if self.window > 1 << 21 {
            return Err(Error::Config("group window exceeds the coordinate range".into()));
        }
        Ok(())
    }
}

fn spread_bits(v: u64) -> u64 {
    let mut out = 0;
    for bit in 0..21 {
        out |= ((v >> bit) & 1) << (3 * bit);
    }
    out
}

/// Z-order code of non-negative local coordinates (x takes the most significant slot of each triple).
pub fn morton_code(x: u32, y: u32, z: u32) -> u64 {
    (spread_bits(x as u64) << 2) | (spread_bits(y as u64) << 1) | spread_bits(z as u64)
}

/// Slot assignment for a fixed voxel coordinate list; independent of features.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupLayout {
    groups: usize,
    len: usize,
    window: u32,
    sources: usize,
    mask: Vec<bool>,
    origin: Vec<Option<usize>>,
    slot_coords: Vec<Option<VoxelCoord>>,
}

impl GroupLayout {
    pub fn build(coords: &[VoxelCoord], cfg: GroupConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.window as i32;
        let mut buckets: BTreeMap<[i32; 3], Vec<(u64, usize)>> = BTreeMap::new();
        for (i, c) in coords.iter().enumerate() {
            let a = c.axes();
            let key = a.map(|v| v.div_euclid(w));
            let local = a.map(|v| v.rem_euclid(w) as u32);
            buckets
                .entry(key)
                .or_default()
                .push((morton_code(local[0], local[1], local[2]), i));
        }
        let l = cfg.max_len;
        let mut mask = Vec::new();
        let mut origin = Vec::new();
        let mut slot_coords = Vec::new();
        let mut groups = 0;
        for (_, mut members) in buckets {
            members.sort_unstable();
            for chunk in members.chunks(l) {
                groups += 1;
                for slot in 0..l {
                    let src = chunk.get(slot).map(|&(_, i)| i);
                    mask.push(src.is_some());
                    origin.push(src);
                    slot_coords.push(src.map(|i| coords[i]));
                }
            }
        }
        Ok(Self {
            groups,
            len: l,
            window: cfg.window,
            sources: coords.len(),
            mask,
            origin,
            slot_coords,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.groups == 0
    }

    pub fn window(&self) -> u32 {
        self.window
    }

    /// Number of voxels in the source set.
    pub fn sources(&self) -> usize {
        self.sources
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn origin(&self) -> &[Option<usize>] {
        &self.origin
    }

    pub fn slot_coords(&self) -> &[Option<VoxelCoord>] {
        &self.slot_coords
    }

    /// Slot of every source voxel, indexed by source row.
    pub fn slot_of_source(&self) -> Vec<usize> {
        let mut slots = vec![usize::MAX; self.sources];
        for (s, o) in self.origin.iter().enumerate() {
            if let Some(i) = o {
                slots[*i] = s;
            }
        }
        slots
    }

    /// Euclidean distances between slot coordinates in voxel-index units, `[G, L, L]`.
    /// Pairs involving a padded slot are 0 and must be masked downstream.
    pub fn distances(&self) -> Tensor {
        let l = self.len;
        let mut d = vec![0.0; self.groups * l * l];
        for g in 0..self.groups {
            for i in 0..l {
                let Some(a) = self.slot_coords[g * l + i] else { continue };
                for j in (i + 1)..l {
                    let Some(b) = self.slot_coords[g * l + j] else { continue };
                    let dist = a
                        .axes()
                        .iter()
                        .zip(b.axes())
                        .map(|(&p, q)| ((p - q) as f64).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    d[(g * l + i) * l + j] = dist;
                    d[(g * l + j) * l + i] = dist;
                }
            }
        }
        Tensor::new(&[self.groups, l, l], d).expect("finite distances")
    }

    /// Position inside the window scaled to `[0, 1)`, `[G, L, 3]`; zero on padded slots.
    pub fn local_coords(&self) -> Tensor {
        let w = self.window as i32;
        let data = self
            .slot_coords
            .iter()
            .flat_map(|c| match c {
                Some(c) => c.axes().map(|v| v.rem_euclid(w) as f64 / w as f64),
                None => [0.0; 3],
            })
            .collect();
        Tensor::new(&[self.groups, self.len, 3], data).expect("finite coords")
    }
}

/// Grouped, padded feature sequences `[G, L, D]` with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGroupBatch {
    pub layout: GroupLayout,
    pub sequences: Tensor,
    pub coords: Vec<VoxelCoord>,
    pub grid: GridConfig,
}

impl VoxelGroupBatch {
    pub fn groups(&self) -> usize {
        self.layout.groups()
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn width(&self) -> usize {
        self.sequences.dims()[2]
    }
}

pub fn group_voxels(set: &SparseVoxelSet, cfg: GroupConfig) -> Result<VoxelGroupBatch> {
    let layout = GroupLayout::build(set.coords(), cfg)?;
    let d = set.width();
    let feats = set.features();
    let mut data = vec![0.0; layout.groups() * layout.len() * d];
    for (s, o) in layout.origin().iter().enumerate() {
        if let Some(i) = o {
            data[s * d..(s + 1) * d].copy_from_slice(feats.row(*i));
        }
    }
    let sequences = Tensor::new(&[layout.groups(), layout.len(), d], data)?;
    Ok(VoxelGroupBatch {
        layout,
        sequences,
        coords: set.coords().to_vec(),
        grid: set.grid().clone(),
    })
}

pub fn scatter_back(batch: &VoxelGroupBatch, updated: &Tensor) -> Result<SparseVoxelSet> {
    let dims = updated.dims();
    if dims.len() != 3 || dims[0] != batch.groups() || dims[1] != batch.len() {
        return Err(Error::Contract(format!(
            "updated sequences {dims:?} do not match the batch layout [{}, {}, D]",
            batch.groups(),
            batch.len()
        )));
    }
    let d = dims[2];
    let mut data = vec![0.0; batch.coords.len() * d];
    for (s, o) in batch.layout.origin().iter().enumerate() {
        if let Some(i) = o {
            data[i * d..(i + 1) * d].copy_from_slice(&updated.data()[s * d..(s + 1) * d]);
        }
    }
    let features = Tensor::new(&[batch.coords.len(), d], data)?;
    SparseVoxelSet::new(batch.coords.clone(), features, batch.grid.clone())
}

pub fn pairwise_distances(batch: &VoxelGroupBatch) -> Tensor {
    batch.layout.distances()
}
