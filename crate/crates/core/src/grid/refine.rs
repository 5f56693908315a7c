//! Structural grid edits used by per-scene fine-tuning (prune and subdivide)
//! and by fusion (overlap bookkeeping between a local and the global volume).

use crate::autodiff::{Real, Tensor};

use super::{GridError, SparseVoxelGrid, VoxelSet};

/// Outcome of a prune: which old rows survived (in their original order,
/// which is also the new row order) and which coordinates were removed.
#[derive(Debug, Clone)]
pub struct PruneReport {
    pub kept_rows: Vec<u32>,
    pub removed: Vec<[i32; 3]>,
}

/// Remove voxels whose densest interior probe is still transparent.
///
/// `probe_sigma` holds one density per probe point, aligned with
/// `interior_probe_points` order: row `v` occupies `probe_sigma[v*8..v*8+8]`.
/// A voxel is removed when `min_i exp(-sigma_i) > gamma`, i.e. when even its
/// most opaque probe point keeps more than `gamma` transparency over a unit
/// step.
pub fn prune_grid<T: Real>(
    grid: &SparseVoxelGrid<T>,
    probe_sigma: &[f64],
    gamma: f64,
) -> Result<(SparseVoxelGrid<T>, PruneReport), GridError> {
    let v = grid.len();
    if probe_sigma.len() != v * 8 {
        return Err(GridError::FeatureShape {
            got: vec![probe_sigma.len()],
            want: v,
            channels: 8,
        });
    }
    assert!((0.0..1.0).contains(&gamma) || gamma == 1.0, "gamma must be in [0,1], got {gamma}");
    let mut kept_rows = Vec::new();
    let mut removed = Vec::new();
    let mut kept_coords = Vec::new();
    for row in 0..v {
        let probes = &probe_sigma[row * 8..row * 8 + 8];
        let max_sigma = probes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // min_i exp(-s_i) == exp(-max_i s_i)
        if (-max_sigma).exp() > gamma {
            removed.push(grid.set().coords()[row]);
        } else {
            kept_rows.push(row as u32);
            kept_coords.push(grid.set().coords()[row]);
        }
    }
    let mut features = Tensor::zeros(&[kept_rows.len(), grid.spec().channels]);
    for (i, &row) in kept_rows.iter().enumerate() {
        features.row_mut(i).copy_from_slice(grid.features().row(row as usize));
    }
    // Kept coords preserve sorted order, so the set constructor cannot fail.
    let set = VoxelSet::from_coords(kept_coords)?;
    let pruned = SparseVoxelGrid::new(*grid.spec(), set, features)?;
    Ok((pruned, PruneReport { kept_rows, removed }))
}

/// Split every voxel into its eight children at half the voxel size, child
/// features inherited from the parent (nearest-neighbor). Returns the new
/// grid and, aligned with its row order, the parent row of each child — the
/// map optimizer moments follow.
pub fn subdivide_grid<T: Real>(
    grid: &SparseVoxelGrid<T>,
) -> Result<(SparseVoxelGrid<T>, Vec<u32>), GridError> {
    let spec = grid.spec().subdivided();
    let mut children: Vec<([i32; 3], u32)> = Vec::with_capacity(grid.len() * 8);
    for (row, &c) in grid.set().coords().iter().enumerate() {
        for d in 0..8 {
            let child = [
                c[0] * 2 + (d & 1) as i32,
                c[1] * 2 + ((d >> 1) & 1) as i32,
                c[2] * 2 + ((d >> 2) & 1) as i32,
            ];
            children.push((child, row as u32));
        }
    }
    children.sort_by_key(|&(c, _)| (c[0], c[1], c[2]));
    let coords: Vec<[i32; 3]> = children.iter().map(|&(c, _)| c).collect();
    let parents: Vec<u32> = children.iter().map(|&(_, p)| p).collect();
    let set = VoxelSet::from_coords(coords)?;
    let mut features = Tensor::zeros(&[set.len(), spec.channels]);
    for (i, &p) in parents.iter().enumerate() {
        features.row_mut(i).copy_from_slice(grid.features().row(p as usize));
    }
    Ok((SparseVoxelGrid::new(spec, set, features)?, parents))
}

/// Row-level correspondence between a global grid and a local active set on
/// the same lattice.
#[derive(Debug, Clone, Default)]
pub struct OverlapSplit {
    /// Coordinates active in both, with (global_row, local_row).
    pub overlap: Vec<([i32; 3], u32, u32)>,
    /// Rows of the local set absent from the global grid.
    pub local_only: Vec<([i32; 3], u32)>,
    /// Rows of the global grid untouched by the local set.
    pub global_only: Vec<([i32; 3], u32)>,
}

/// Classify every voxel of `global` and `local` by membership. Specs must
/// match exactly — fusing volumes from different lattices is a logic error
/// upstream, not something to paper over here.
pub fn overlap_split<T: Real>(
    global: &SparseVoxelGrid<T>,
    local: &SparseVoxelGrid<T>,
) -> Result<OverlapSplit, GridError> {
    global.spec().check_compatible(local.spec())?;
    Ok(split_sets(global.set(), local.set()))
}

/// Membership classification on bare voxel sets (same lattice assumed).
pub fn split_sets(global: &VoxelSet, local: &VoxelSet) -> OverlapSplit {
    let mut out = OverlapSplit::default();
    // Merge-walk both sorted coordinate lists.
    let g = global.coords();
    let l = local.coords();
    let (mut i, mut j) = (0usize, 0usize);
    while i < g.len() || j < l.len() {
        let take_g = j >= l.len() || (i < g.len() && g[i] <= l[j]);
        let take_l = i >= g.len() || (j < l.len() && l[j] <= g[i]);
        match (take_g, take_l) {
            (true, true) => {
                out.overlap.push((g[i], i as u32, j as u32));
                i += 1;
                j += 1;
            }
            (true, false) => {
                out.global_only.push((g[i], i as u32));
                i += 1;
            }
            (false, true) => {
                out.local_only.push((l[j], j as u32));
                j += 1;
            }
            (false, false) => unreachable!(),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn grid_of(coords: &[[i32; 3]], size: f64) -> SparseVoxelGrid<f64> {
        let spec = GridSpec::new(Vector3::zeros(), size, 2).unwrap();
        SparseVoxelGrid::from_entries(
            spec,
            coords.iter().map(|&c| (c, vec![c[0] as f64, c[1] as f64])).collect(),
        )
        .unwrap()
    }

    #[test]
    fn prune_keeps_voxels_with_any_opaque_probe() {
        let grid = grid_of(&[[0, 0, 0], [1, 0, 0], [2, 0, 0]], 0.1);
        // gamma 0.6 => removal needs exp(-max_sigma) > 0.6, i.e. max < 0.5108.
        let mut sigma = vec![0.0; 24];
        sigma[8..16].copy_from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0]); // one hot probe
        sigma[16..24].fill(0.4); // all transparent
        let (pruned, report) = prune_grid(&grid, &sigma, 0.6).unwrap();
        assert_eq!(pruned.set().coords(), &[[1, 0, 0]]);
        assert_eq!(report.removed, vec![[0, 0, 0], [2, 0, 0]]);
        assert_eq!(report.kept_rows, vec![1]);
        // Features followed the surviving row.
        assert_eq!(pruned.features().row(0), &[1.0, 0.0]);
    }

    #[test]
    fn prune_boundary_is_strict_greater_than_gamma() {
        let grid = grid_of(&[[0, 0, 0]], 0.1);
        // exp(-sigma) == gamma exactly: NOT removed (condition is strict >).
        let gamma: f64 = 0.6;
        let sigma = vec![-gamma.ln(); 8];
        let (pruned, report) = prune_grid(&grid, &sigma, gamma).unwrap();
        assert_eq!(pruned.len(), 1);
        assert!(report.removed.is_empty());
    }

    #[test]
    fn subdivide_produces_eight_children_on_the_half_lattice() {
        let grid = grid_of(&[[0, 0, 0], [2, 1, -1]], 0.2);
        let (fine, parents) = subdivide_grid(&grid).unwrap();
        assert_eq!(fine.len(), 16);
        assert_eq!(fine.spec().voxel_size, 0.1);
        assert_eq!(parents.len(), 16);
        // Children of [2,1,-1] occupy [4..6, 2..4, -2..0).
        assert!(fine.set().contains([4, 2, -2]));
        assert!(fine.set().contains([5, 3, -1]));
        assert!(!fine.set().contains([4, 2, 0]));
        // Every child inherits its parent's feature row.
        for (i, &p) in parents.iter().enumerate() {
            assert_eq!(fine.features().row(i), grid.features().row(p as usize));
        }
        // Child centers fall inside their parent's volume.
        for (i, &p) in parents.iter().enumerate() {
            let child_center = fine.spec().voxel_center(fine.set().coords()[i]);
            let parent_coord = grid.set().coords()[p as usize];
            assert_eq!(grid.spec().world_to_voxel(&child_center), parent_coord);
        }
    }

    #[test]
    fn overlap_split_classifies_and_indexes_correctly() {
        let global = grid_of(&[[0, 0, 0], [1, 0, 0], [5, 5, 5]], 0.1);
        let local = grid_of(&[[1, 0, 0], [2, 0, 0]], 0.1);
        let split = overlap_split(&global, &local).unwrap();
        assert_eq!(split.overlap, vec![([1, 0, 0], 1, 0)]);
        assert_eq!(split.local_only, vec![([2, 0, 0], 1)]);
        assert_eq!(split.global_only, vec![([0, 0, 0], 0), ([5, 5, 5], 2)]);
    }

    #[test]
    fn overlap_split_rejects_mismatched_lattices() {
        let a = grid_of(&[[0, 0, 0]], 0.1);
        let b = grid_of(&[[0, 0, 0]], 0.2);
        assert!(matches!(overlap_split(&a, &b), Err(GridError::SpecMismatch(_))));
    }

    proptest! {
        #[test]
        fn prune_partitions_the_voxel_set(
            coords in proptest::collection::btree_set((-5i32..5, -5i32..5, -5i32..5), 1..40),
            seed in 0u64..1000,
        ) {
            let coords: Vec<[i32;3]> = coords.into_iter().map(|(x,y,z)| [x,y,z]).collect();
            let grid = grid_of(&coords, 0.1);
            let mut state = seed;
            let sigma: Vec<f64> = (0..coords.len()*8).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (state >> 60) as f64 * 0.1
            }).collect();
            let (pruned, report) = prune_grid(&grid, &sigma, 0.6).unwrap();
            prop_assert_eq!(pruned.len() + report.removed.len(), coords.len());
            for c in report.removed {
                prop_assert!(!pruned.set().contains(c));
                prop_assert!(grid.set().contains(c));
            }
            for &k in &report.kept_rows {
                prop_assert!(pruned.set().contains(grid.set().coords()[k as usize]));
            }
        }

        #[test]
        fn overlap_split_is_a_partition_of_the_union(
            ga in proptest::collection::btree_set((-4i32..4, -4i32..4, -4i32..4), 0..30),
            la in proptest::collection::btree_set((-4i32..4, -4i32..4, -4i32..4), 0..30),
        ) {
            let g: Vec<[i32;3]> = ga.into_iter().map(|(x,y,z)| [x,y,z]).collect();
            let l: Vec<[i32;3]> = la.into_iter().map(|(x,y,z)| [x,y,z]).collect();
            let global = grid_of(&g, 0.1);
            let local = grid_of(&l, 0.1);
            let split = overlap_split(&global, &local).unwrap();
            prop_assert_eq!(split.overlap.len() + split.global_only.len(), g.len());
            prop_assert_eq!(split.overlap.len() + split.local_only.len(), l.len());
            for (c, gi, li) in split.overlap {
                prop_assert_eq!(global.set().coords()[gi as usize], c);
                prop_assert_eq!(local.set().coords()[li as usize], c);
            }
        }
    }
}
