//! Trilinear interpolation over sparse voxel features.
//!
//! Features live at voxel centers. A query point interpolates over the eight
//! surrounding centers; corners whose voxel is absent contribute zero feature
//! and the remaining weights are *not* renormalized. That choice makes a
//! voxel holding an all-zero feature row bit-identical to an absent voxel,
//! which is exactly the invariant pruning relies on.

use nalgebra::Vector3;

use crate::autodiff::Real;

use super::{GridSpec, SparseVoxelGrid, VoxelSet};

/// Interpolation stencil for one query point: present corners with their
/// weights (zero-weight corners are dropped).
#[derive(Debug, Clone)]
pub struct TrilinearTaps {
    pub taps: Vec<(u32, f64)>,
    /// True when none of the eight surrounding voxel centers is active.
    pub all_absent: bool,
}

/// Compute the stencil for a world-space point.
pub fn trilinear_taps(spec: &GridSpec, set: &VoxelSet, p: &Vector3<f64>) -> TrilinearTaps {
    // Center-based lattice coordinates: integer values sit exactly on voxel
    // centers.
    let g = (p - spec.origin) / spec.voxel_size - Vector3::new(0.5, 0.5, 0.5);
    let base = [g.x.floor(), g.y.floor(), g.z.floor()];
    let frac = [g.x - base[0], g.y - base[1], g.z - base[2]];
    let base = [base[0] as i32, base[1] as i32, base[2] as i32];

    let mut taps = Vec::with_capacity(8);
    let mut any_present = false;
    for corner in 0..8u32 {
        let d = [(corner & 1) as i32, ((corner >> 1) & 1) as i32, ((corner >> 2) & 1) as i32];
        let coord = [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
        let mut w = 1.0;
        for a in 0..3 {
            w *= if d[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if let Some(row) = set.row_of(coord) {
            any_present = true;
            if w != 0.0 {
                taps.push((row as u32, w));
            }
        }
    }
    TrilinearTaps { taps, all_absent: !any_present }
}

/// Interpolate a feature vector at a world point. Returns the feature and a
/// coverage flag (false means the point saw no active voxel at all and the
/// feature is exactly zero).
pub fn trilinear_sample<T: Real>(grid: &SparseVoxelGrid<T>, p: &Vector3<f64>) -> (Vec<T>, bool) {
    let stencil = trilinear_taps(grid.spec(), grid.set(), p);
    let mut out = vec![T::zero(); grid.spec().channels];
    for &(row, w) in &stencil.taps {
        let wt = T::from_f64(w);
        for (o, &f) in out.iter_mut().zip(grid.features().row(row as usize)) {
            *o += wt * f;
        }
    }
    (out, !stencil.all_absent)
}

/// Stratified 2x2x2 interior probe lattice of a voxel: the eight points at
/// fractional offsets 1/4 and 3/4 along each axis. Used by density probing
/// during pruning.
pub fn interior_probe_points(spec: &GridSpec, coord: [i32; 3]) -> [Vector3<f64>; 8] {
    let min = spec.voxel_min(coord);
    let s = spec.voxel_size;
    let mut out = [Vector3::zeros(); 8];
    for (i, out_p) in out.iter_mut().enumerate() {
        let d = [
            if i & 1 == 1 { 0.75 } else { 0.25 },
            if (i >> 1) & 1 == 1 { 0.75 } else { 0.25 },
            if (i >> 2) & 1 == 1 { 0.75 } else { 0.25 },
        ];
        *out_p = min + Vector3::new(d[0], d[1], d[2]) * s;
    }
    out
}
