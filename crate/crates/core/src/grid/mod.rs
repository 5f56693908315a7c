//! Sparse voxel grids: an axis-aligned lattice with a sorted set of active
//! cells and one feature row per cell. Coordinate order is lexicographic
//! `(x,y,z)` everywhere, which keeps every row-indexed structure (features,
//! neighbor tables, optimizer moments) deterministic.

mod refine;
mod trilinear;

pub use refine::{overlap_split, prune_grid, split_sets, subdivide_grid, OverlapSplit, PruneReport};
pub use trilinear::{interior_probe_points, trilinear_sample, trilinear_taps, TrilinearTaps};

use std::collections::HashMap;

use nalgebra::Vector3;
use thiserror::Error;

use crate::autodiff::{NeighborTable, Real, Tensor};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("duplicate voxel coordinate {0:?}")]
    DuplicateVoxel([i32; 3]),
    #[error("feature tensor shape {got:?} does not match {want} voxels x {channels} channels")]
    FeatureShape { got: Vec<usize>, want: usize, channels: usize },
    #[error("grid specs are incompatible: {0}")]
    SpecMismatch(String),
}

/// Lattice geometry plus feature width. Two grids are compatible when their
/// lattices coincide exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub channels: usize,
}

impl GridSpec {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, channels: usize) -> Result<Self, GridError> {
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(GridError::InvalidSpec(format!("voxel_size {voxel_size}")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(GridError::InvalidSpec("non-finite origin".into()));
        }
        if channels == 0 {
            return Err(GridError::InvalidSpec("channels must be >= 1".into()));
        }
        Ok(Self { origin, voxel_size, channels })
    }

    /// Integer cell containing a world point (half-open cells: a point on a
    /// face belongs to the higher cell).
    pub fn world_to_voxel(&self, p: &Vector3<f64>) -> [i32; 3] {
        let g = (p - self.origin) / self.voxel_size;
        [g.x.floor() as i32, g.y.floor() as i32, g.z.floor() as i32]
    }

    pub fn voxel_center(&self, c: [i32; 3]) -> Vector3<f64> {
        self.origin
            + Vector3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5)
                * self.voxel_size
    }

    pub fn voxel_min(&self, c: [i32; 3]) -> Vector3<f64> {
        self.origin + Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64) * self.voxel_size
    }

    /// Spec of the half-resolution lattice produced by subdivision.
    pub fn subdivided(&self) -> GridSpec {
        GridSpec { origin: self.origin, voxel_size: self.voxel_size * 0.5, channels: self.channels }
    }

    pub fn check_compatible(&self, other: &GridSpec) -> Result<(), GridError> {
        if self.origin != other.origin
            || self.voxel_size != other.voxel_size
            || self.channels != other.channels
        {
            return Err(GridError::SpecMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

fn coord_key(c: [i32; 3]) -> (i32, i32, i32) {
    (c[0], c[1], c[2])
}

/// Sorted, de-duplicated set of active voxel coordinates with O(1) row lookup.
#[derive(Debug, Clone, Default)]
pub struct VoxelSet {
    coords: Vec<[i32; 3]>,
    index: HashMap<[i32; 3], u32>,
}

impl VoxelSet {
    /// Sorts the coordinates lexicographically; duplicates are an error.
    pub fn from_coords(mut coords: Vec<[i32; 3]>) -> Result<Self, GridError> {
        coords.sort_by_key(|&c| coord_key(c));
        for w in coords.windows(2) {
            if w[0] == w[1] {
                return Err(GridError::DuplicateVoxel(w[0]));
            }
        }
        let index = coords.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
        Ok(Self { coords, index })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Coordinates in lexicographic order; the row index of a voxel is its
    /// position here.
    pub fn coords(&self) -> &[[i32; 3]] {
        &self.coords
    }

    pub fn row_of(&self, c: [i32; 3]) -> Option<usize> {
        self.index.get(&c).map(|&i| i as usize)
    }

    pub fn contains(&self, c: [i32; 3]) -> bool {
        self.index.contains_key(&c)
    }

    /// Inclusive voxel-coordinate bounding box.
    pub fn bounds(&self) -> Option<([i32; 3], [i32; 3])> {
        if self.coords.is_empty() {
            return None;
        }
        let mut lo = self.coords[0];
        let mut hi = self.coords[0];
        for c in &self.coords {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        Some((lo, hi))
    }

    /// Neighbor table for a sparse convolution with the given odd kernel size.
    pub fn neighbor_table(&self, kernel: usize) -> NeighborTable {
        let offsets = NeighborTable::offsets(kernel);
        let mut taps = Vec::with_capacity(self.coords.len() * offsets.len());
        for &c in &self.coords {
            for off in &offsets {
                let n = [c[0] + off[0], c[1] + off[1], c[2] + off[2]];
                taps.push(self.index.get(&n).copied().unwrap_or(NeighborTable::ABSENT));
            }
        }
        NeighborTable::from_taps(kernel, self.coords.len(), taps)
    }
}

/// Active voxels plus a `[V, C]` feature tensor aligned with the set's row
/// order.
#[derive(Debug, Clone)]
pub struct SparseVoxelGrid<T: Real> {
    spec: GridSpec,
    set: VoxelSet,
    features: Tensor<T>,
}

impl<T: Real> SparseVoxelGrid<T> {
    pub fn new(spec: GridSpec, set: VoxelSet, features: Tensor<T>) -> Result<Self, GridError> {
        if features.shape() != [set.len(), spec.channels] {
            return Err(GridError::FeatureShape {
                got: features.shape().to_vec(),
                want: set.len(),
                channels: spec.channels,
            });
        }
        Ok(Self { spec, set, features })
    }

    pub fn empty(spec: GridSpec) -> Self {
        Self { set: VoxelSet::default(), features: Tensor::zeros(&[0, spec.channels]), spec }
    }

    /// Build from unordered `(coordinate, feature)` entries.
    pub fn from_entries(
        spec: GridSpec,
        entries: Vec<([i32; 3], Vec<T>)>,
    ) -> Result<Self, GridError> {
        for (_, f) in &entries {
            if f.len() != spec.channels {
                return Err(GridError::FeatureShape {
                    got: vec![f.len()],
                    want: entries.len(),
                    channels: spec.channels,
                });
            }
        }
        let set = VoxelSet::from_coords(entries.iter().map(|&(c, _)| c).collect())?;
        let mut features = Tensor::zeros(&[set.len(), spec.channels]);
        for (c, f) in entries {
            let row = set.row_of(c).expect("coordinate came from this set");
            features.row_mut(row).copy_from_slice(&f);
        }
        Ok(Self { spec, set, features })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn set(&self) -> &VoxelSet {
        &self.set
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut Tensor<T> {
        &mut self.features
    }

    /// Replace the feature tensor (shape must still match the set).
    pub fn set_features(&mut self, features: Tensor<T>) -> Result<(), GridError> {
        if features.shape() != [self.set.len(), self.spec.channels] {
            return Err(GridError::FeatureShape {
                got: features.shape().to_vec(),
                want: self.set.len(),
                channels: self.spec.channels,
            });
        }
        self.features = features;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn feature(&self, c: [i32; 3]) -> Option<&[T]> {
        self.set.row_of(c).map(|r| self.features.row(r))
    }

    pub fn into_parts(self) -> (GridSpec, VoxelSet, Tensor<T>) {
        (self.spec, self.set, self.features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spec_rejects_bad_sizes() {
        assert!(GridSpec::new(Vector3::zeros(), 0.0, 4).is_err());
        assert!(GridSpec::new(Vector3::zeros(), -1.0, 4).is_err());
        assert!(GridSpec::new(Vector3::zeros(), f64::NAN, 4).is_err());
        assert!(GridSpec::new(Vector3::zeros(), 0.1, 0).is_err());
        assert!(GridSpec::new(Vector3::new(f64::INFINITY, 0.0, 0.0), 0.1, 4).is_err());
    }

    #[test]
    fn face_points_belong_to_the_higher_cell() {
        let spec = GridSpec::new(Vector3::zeros(), 0.5, 1).unwrap();
        assert_eq!(spec.world_to_voxel(&Vector3::new(0.5, 0.0, -0.5)), [1, 0, -1]);
    }

    #[test]
    fn voxel_set_sorts_and_rejects_duplicates() {
        let set = VoxelSet::from_coords(vec![[1, 0, 0], [0, 0, 0], [0, 0, 1]]).unwrap();
        assert_eq!(set.coords(), &[[0, 0, 0], [0, 0, 1], [1, 0, 0]]);
        assert_eq!(set.row_of([0, 0, 1]), Some(1));
        assert!(matches!(
            VoxelSet::from_coords(vec![[1, 2, 3], [1, 2, 3]]),
            Err(GridError::DuplicateVoxel([1, 2, 3]))
        ));
    }

    #[test]
    fn neighbor_table_center_tap_is_self() {
        let set = VoxelSet::from_coords(vec![[0, 0, 0], [0, 0, 1], [5, 5, 5]]).unwrap();
        let t = set.neighbor_table(3);
        assert_eq!(t.rows(), 3);
        // Row 2 ([5,5,5]) is isolated: only its center tap resolves.
        let offs = crate::autodiff::NeighborTable::offsets(3);
        let center = offs.iter().position(|&o| o == [0, 0, 0]).unwrap();
        assert_eq!(center, 13);
    }

    #[test]
    fn grid_feature_lookup_by_coordinate() {
        let spec = GridSpec::new(Vector3::zeros(), 0.1, 2).unwrap();
        let grid = SparseVoxelGrid::from_entries(
            spec,
            vec![([2, 0, 0], vec![3.0, 4.0]), ([0, 0, 0], vec![1.0, 2.0])],
        )
        .unwrap();
        assert_eq!(grid.feature([0, 0, 0]), Some(&[1.0, 2.0][..]));
        assert_eq!(grid.feature([2, 0, 0]), Some(&[3.0, 4.0][..]));
        assert_eq!(grid.feature([1, 1, 1]), None);
    }

    #[test]
    fn grid_rejects_mismatched_feature_tensor() {
        let spec = GridSpec::new(Vector3::zeros(), 0.1, 2).unwrap();
        let set = VoxelSet::from_coords(vec![[0, 0, 0]]).unwrap();
        assert!(matches!(
            SparseVoxelGrid::new(spec, set, Tensor::<f64>::zeros(&[2, 2])),
            Err(GridError::FeatureShape { .. })
        ));
    }

    proptest! {
        #[test]
        fn world_to_voxel_inverts_voxel_center(
            cx in -1000i32..1000, cy in -1000i32..1000, cz in -1000i32..1000,
            size in 0.01f64..10.0,
            ox in -5.0f64..5.0, oy in -5.0f64..5.0, oz in -5.0f64..5.0,
        ) {
            let spec = GridSpec::new(Vector3::new(ox, oy, oz), size, 1).unwrap();
            let c = [cx, cy, cz];
            prop_assert_eq!(spec.world_to_voxel(&spec.voxel_center(c)), c);
        }

        #[test]
        fn voxel_set_order_is_input_order_independent(
            mut coords in proptest::collection::vec((-20i32..20, -20i32..20, -20i32..20), 1..60)
        ) {
            coords.sort_unstable();
            coords.dedup();
            let coords: Vec<[i32;3]> = coords.into_iter().map(|(x,y,z)| [x,y,z]).collect();
            let a = VoxelSet::from_coords(coords.clone()).unwrap();
            let mut rev = coords.clone();
            rev.reverse();
            let b = VoxelSet::from_coords(rev).unwrap();
            prop_assert_eq!(a.coords(), b.coords());
            for (i, c) in a.coords().iter().enumerate() {
                prop_assert_eq!(a.row_of(*c), Some(i));
            }
        }
    }
}
