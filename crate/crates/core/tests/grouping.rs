use std::collections::BTreeMap;

use fasd::group::*;
use fasd::voxel::{GridConfig, SparseVoxelSet, VoxelCoord};
use fasd::Tensor;
use proptest::prelude::*;

fn set(coords: &[(i32, i32, i32)], width: usize) -> SparseVoxelSet {
    let coords: Vec<VoxelCoord> = coords.iter().map(|&(x, y, z)| VoxelCoord::new(x, y, z)).collect();
    let n = coords.len();
    let feats = Tensor::from_fn(&[n, width], |i| i as f64 * 0.5 - 1.0).unwrap();
    SparseVoxelSet::new(coords, feats, GridConfig::default()).unwrap()
}

fn cfg(window: u32, max_len: usize) -> GroupConfig {
    GroupConfig { window, max_len }
}

#[test]
fn single_voxel_group() {
    let b = group_voxels(&set(&[(3, 4, 1)], 2), cfg(8, 4)).unwrap();
    assert_eq!(b.groups(), 1);
    assert_eq!(b.layout.mask(), &[true, false, false, false]);
    assert_eq!(&b.sequences.data()[2..], &[0.0; 6]);
}

#[test]
fn hand_bucketing() {
    let coords = [(0, 0, 0), (1, 1, 0), (5, 5, 0)];
    let b = group_voxels(&set(&coords, 1), cfg(2, 4)).unwrap();
    // floor-division oracle: (0,0,0) and (1,1,0) share window (0,0,0); (5,5,0) is in (2,2,0)
    let mut buckets: BTreeMap<[i32; 3], Vec<usize>> = BTreeMap::new();
    for (i, c) in coords.iter().enumerate() {
        buckets.entry([c.0.div_euclid(2), c.1.div_euclid(2), c.2.div_euclid(2)]).or_default().push(i);
    }
    assert_eq!(buckets.len(), 2);
    assert_eq!(b.groups(), 2);
    assert_eq!(&b.layout.origin()[..4], &[Some(0), Some(1), None, None]);
    assert_eq!(&b.layout.origin()[4..], &[Some(2), None, None, None]);
}

#[test]
fn overfull_bucket_splits() {
    let coords: Vec<_> = (0..5).map(|i| (i, 0, 0)).collect();
    let b = group_voxels(&set(&coords, 1), cfg(8, 2)).unwrap();
    assert_eq!(b.groups(), 3);
    assert_eq!(b.layout.mask().iter().filter(|&&m| m).count(), 5);
}

#[test]
fn distances_examples() {
    let b = group_voxels(&set(&[(0, 0, 0), (3, 4, 0)], 1), cfg(8, 3)).unwrap();
    let d = pairwise_distances(&b);
    let slots = b.layout.slot_of_source();
    assert_eq!(d.data()[slots[0] * 3 + slots[1]], 5.0);
    for i in 0..3 {
        assert_eq!(d.data()[i * 3 + i], 0.0);
    }
}

#[test]
fn distances_match_double_loop() {
    let coords = [(0, 1, 2), (3, 1, 0), (2, 2, 2), (1, 0, 3), (3, 3, 3), (0, 3, 1)];
    let b = group_voxels(&set(&coords, 1), cfg(4, 6)).unwrap();
    assert_eq!(b.groups(), 1);
    let d = pairwise_distances(&b);
    let sc = b.layout.slot_coords();
    for i in 0..6 {
        for j in 0..6 {
            let (p, q) = (sc[i].unwrap(), sc[j].unwrap());
            let dx = (p.ix - q.ix) as f64;
            let dy = (p.iy - q.iy) as f64;
            let dz = (p.iz - q.iz) as f64;
            assert_eq!(d.data()[i * 6 + j], (dx * dx + dy * dy + dz * dz).sqrt());
        }
    }
    for i in 0..6 {
        for j in 0..6 {
            for k in 0..6 {
                assert!(d.data()[i * 6 + k] <= d.data()[i * 6 + j] + d.data()[j * 6 + k] + 1e-12);
            }
        }
    }
}

#[test]
fn scatter_shape_mismatch_is_error() {
    let b = group_voxels(&set(&[(0, 0, 0)], 2), cfg(8, 4)).unwrap();
    assert!(scatter_back(&b, &Tensor::zeros(&[1, 3, 2]).unwrap()).is_err());
}

#[test]
fn zeroing_a_slot_zeroes_one_voxel() {
    let s = set(&[(0, 0, 0), (1, 0, 0), (9, 0, 0)], 2);
    let b = group_voxels(&s, cfg(8, 4)).unwrap();
    let slot = b.layout.slot_of_source()[1];
    let mut seq = b.sequences.clone();
    seq.data_mut()[slot * 2..slot * 2 + 2].fill(0.0);
    let back = scatter_back(&b, &seq).unwrap();
    for r in 0..3 {
        if r == 1 {
            assert_eq!(back.features().row(r), &[0.0, 0.0]);
        } else {
            assert_eq!(back.features().row(r), s.features().row(r));
        }
    }
}

#[test]
fn morton_interleaves_bits() {
    assert_eq!(morton_code(0, 0, 0), 0);
    assert_eq!(morton_code(0, 0, 1), 1);
    assert_eq!(morton_code(0, 1, 0), 2);
    assert_eq!(morton_code(1, 0, 0), 4);
    assert_eq!(morton_code(1, 1, 1), 7);
    assert_eq!(morton_code(2, 0, 0), 32);
}

fn coords_strategy() -> impl Strategy<Value = Vec<(i32, i32, i32)>> {
    prop::collection::hash_set((-10i32..10, -10i32..10, -3i32..3), 0..60).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #[test]
    fn conservation_and_bijection(coords in coords_strategy(), window in 1u32..6, len in 1usize..9) {
        let s = set(&coords, 2);
        let b = group_voxels(&s, cfg(window, len)).unwrap();
        prop_assert_eq!(b.layout.mask().iter().filter(|&&m| m).count(), coords.len());
        let mut hit = vec![0; coords.len()];
        for (slot, o) in b.layout.origin().iter().enumerate() {
            match o {
                Some(i) => hit[*i] += 1,
                None => prop_assert!(b.sequences.data()[slot * 2..slot * 2 + 2].iter().all(|&v| v == 0.0)),
            }
        }
        prop_assert!(hit.iter().all(|&h| h == 1));
    }

    #[test]
    fn round_trip_identity(coords in coords_strategy(), window in 1u32..6, len in 1usize..9) {
        let s = set(&coords, 3);
        let b = group_voxels(&s, cfg(window, len)).unwrap();
        prop_assert_eq!(scatter_back(&b, &b.sequences).unwrap(), s);
    }

    #[test]
    fn groups_stay_in_one_window(coords in coords_strategy(), window in 1u32..6, len in 1usize..9) {
        let b = group_voxels(&set(&coords, 1), cfg(window, len)).unwrap();
        let w = window as i32;
        for g in 0..b.groups() {
            let keys: std::collections::HashSet<_> = b.layout.slot_coords()[g * len..(g + 1) * len]
                .iter()
                .flatten()
                .map(|c| c.axes().map(|v| v.div_euclid(w)))
                .collect();
            prop_assert!(keys.len() <= 1);
        }
    }

    #[test]
    fn multiset_preserved_under_reordering(coords in coords_strategy(), seed in any::<u64>(), window in 1u32..6) {
        // reorder the source set so window assignment and slot order change
        let mut shuffled = coords.clone();
        let mut state = seed;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        let s = set(&shuffled, 2);
        let b = group_voxels(&s, cfg(window, 4)).unwrap();
        let back = scatter_back(&b, &b.sequences).unwrap();
        let key = |t: &Tensor| {
            let mut rows: Vec<Vec<u64>> = (0..t.dims()[0]).map(|r| t.row(r).iter().map(|v| v.to_bits()).collect()).collect();
            rows.sort();
            rows
        };
        prop_assert_eq!(key(back.features()), key(s.features()));
    }

    #[test]
    fn grouping_deterministic(coords in coords_strategy(), window in 1u32..6) {
        let s = set(&coords, 2);
        prop_assert_eq!(group_voxels(&s, cfg(window, 5)).unwrap(), group_voxels(&s, cfg(window, 5)).unwrap());
    }
}

#[test]
fn invalid_config_rejected() {
    assert!(group_voxels(&set(&[(0, 0, 0)], 1), cfg(0, 4)).is_err());
    assert!(group_voxels(&set(&[(0, 0, 0)], 1), cfg(2, 0)).is_err());
}
