//! Walking rays across the sparse voxel lattice. Only voxels in the active
//! set produce samples, so empty space costs nothing beyond the lattice
//! steps themselves.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::RaySpan;
use crate::geometry::Ray;
use crate::grid::{GridSpec, VoxelSet};

use super::RenderConfig;

/// Intervals shorter than this along a ray carry no sample.
const MIN_SEGMENT: f64 = 1e-12;

/// Active-voxel segments `(row, t_enter, t_exit)` a ray crosses between
/// `t_near` and `t_far`, ordered by increasing distance. Uses incremental
/// lattice stepping: one step per crossed cell, membership checked against
/// the sorted voxel set.
pub fn ray_active_segments(
    spec: &GridSpec,
    set: &VoxelSet,
    ray: &Ray,
    t_near: f64,
    t_far: f64,
) -> Vec<(u32, f64, f64)> {
    let Some((min_c, max_c)) = set.bounds() else {
        return Vec::new();
    };

    // Clip [t_near, t_far] against the active set's bounding box (slab test).
    let mut t0 = t_near;
    let mut t1 = t_far;
    for a in 0..3 {
        let lo = spec.origin[a] + min_c[a] as f64 * spec.voxel_size;
        let hi = spec.origin[a] + (max_c[a] + 1) as f64 * spec.voxel_size;
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d.abs() < 1e-15 {
            if o < lo || o >= hi {
                return Vec::new();
            }
            continue;
        }
        let (ta, tb) = ((lo - o) / d, (hi - o) / d);
        let (ta, tb) = if ta <= tb { (ta, tb) } else { (tb, ta) };
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    if t0 >= t1 {
        return Vec::new();
    }

    // Start just inside the clipped range so the entry cell is unambiguous.
    let eps = (t1 - t0) * 1e-9;
    let start = ray.at(t0 + eps);
    let mut cell = spec.world_to_voxel(&start);

    // Per-axis stepping state: distance to the next lattice plane and the
    // distance between consecutive planes.
    let mut step = [0i32; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let d = ray.direction[a];
        if d.abs() < 1e-15 {
            continue;
        }
        step[a] = if d > 0.0 { 1 } else { -1 };
        let plane_idx = if d > 0.0 { cell[a] + 1 } else { cell[a] };
        let plane = spec.origin[a] + plane_idx as f64 * spec.voxel_size;
        t_next[a] = (plane - ray.origin[a]) / d;
        t_delta[a] = spec.voxel_size / d.abs();
    }

    let mut out = Vec::new();
    let mut t_cur = t0;
    loop {
        let axis = (0..3).min_by(|&a, &b| t_next[a].total_cmp(&t_next[b])).expect("3 axes");
        let t_exit = t_next[axis].min(t1);
        let in_box = (0..3).all(|a| cell[a] >= min_c[a] && cell[a] <= max_c[a]);
        if in_box && t_exit - t_cur > MIN_SEGMENT {
            if let Some(row) = set.row_of(cell) {
                out.push((row as u32, t_cur, t_exit));
            }
        }
        if t_next[axis] >= t1 {
            break;
        }
        t_cur = t_next[axis];
        t_next[axis] += t_delta[axis];
        cell[axis] += step[axis];
        // Once the walk leaves the bounding box heading away from it, it can
        // never re-enter (the box is convex).
        if (step[axis] > 0 && cell[axis] > max_c[axis])
            || (step[axis] < 0 && cell[axis] < min_c[axis])
        {
            break;
        }
    }
    out
}

/// Sample positions for a batch of rays, ready to feed the decoder and
/// compositor: flattened sample depths/steps with per-ray spans, plus the
/// world positions and unit view directions at every sample.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub spans: Vec<RaySpan>,
    pub ts: Vec<f64>,
    pub deltas: Vec<f64>,
    pub positions: Vec<Vector3<f64>>,
    pub directions: Vec<Vector3<f64>>,
}

impl SamplePlan {
    pub fn samples(&self) -> usize {
        self.ts.len()
    }
}

/// Place `cfg.samples_per_voxel` samples inside every active voxel each ray
/// crosses. With `jitter`, sample positions are drawn stratified-uniformly
/// inside their sub-intervals (training); without, they sit at the midpoints
/// (deterministic evaluation).
pub fn build_sample_plan(
    spec: &GridSpec,
    set: &VoxelSet,
    rays: &[Ray],
    cfg: &RenderConfig,
    mut jitter: Option<&mut ChaCha8Rng>,
) -> SamplePlan {
    let mut spans = Vec::with_capacity(rays.len());
    let mut ts = Vec::new();
    let mut deltas = Vec::new();
    let mut positions = Vec::new();
    let mut directions = Vec::new();

    for ray in rays {
        let start = ts.len() as u32;
        for (_, a, b) in ray_active_segments(spec, set, ray, cfg.near, cfg.far) {
            let n = cfg.samples_per_voxel;
            let delta = (b - a) / n as f64;
            if delta <= MIN_SEGMENT {
                continue;
            }
            for i in 0..n {
                let u = match jitter.as_deref_mut() {
                    Some(rng) => rng.gen::<f64>(),
                    None => 0.5,
                };
                let t = a + (i as f64 + u) * delta;
                ts.push(t);
                deltas.push(delta);
                positions.push(ray.at(t));
                directions.push(ray.direction);
            }
        }
        spans.push(RaySpan { start, len: ts.len() as u32 - start });
    }

    SamplePlan { spans, ts, deltas, positions, directions }
}
