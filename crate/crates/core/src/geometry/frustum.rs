//! View-frustum rasterization onto the sparse voxel lattice: which voxels
//! does a camera see within its working depth range?

use nalgebra::Vector3;

use super::camera::CameraView;
use crate::grid::GridSpec;

/// Voxel coordinates whose centers fall inside the camera frustum truncated
/// at `max_depth`, sorted lexicographically. A voxel qualifies when its
/// center projects in-frame with camera depth in `(0, max_depth]`. When
/// `clip` is given, candidates are additionally restricted to that
/// world-space axis-aligned box (inclusive bounds).
pub fn frustum_voxels(
    view: &CameraView,
    spec: &GridSpec,
    max_depth: f64,
    clip: Option<(Vector3<f64>, Vector3<f64>)>,
) -> Vec<[i32; 3]> {
    assert!(max_depth > 0.0 && max_depth.is_finite(), "max_depth must be positive");

    // Conservative AABB over the truncated frustum: the camera center plus
    // the four image-corner rays pushed out to where they reach camera depth
    // max_depth. A corner ray with direction d (camera z-component d_cam_z)
    // reaches that depth at parameter t = max_depth / d_cam_z.
    let k = &view.intrinsics;
    let mut lo = view.pose.camera_center();
    let mut hi = lo;
    let corners = [
        [0.0, 0.0],
        [k.width as f64, 0.0],
        [0.0, k.height as f64],
        [k.width as f64, k.height as f64],
    ];
    for c in corners {
        let ray = view.ray_through(c);
        // Camera-frame z-component of the direction; positive for any pixel.
        let dz = view.pose.rotation().transpose() * ray.direction;
        let t = max_depth / dz.z;
        let p = ray.at(t);
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    if let Some((clo, chi)) = clip {
        lo = lo.sup(&clo);
        hi = hi.inf(&chi);
    }

    // Voxel index range covering the AABB, then the exact per-center test.
    let min_c = spec.world_to_voxel(&lo);
    let max_c = spec.world_to_voxel(&hi);
    let mut out = Vec::new();
    for x in min_c[0]..=max_c[0] {
        for y in min_c[1]..=max_c[1] {
            for z in min_c[2]..=max_c[2] {
                let coord = [x, y, z];
                let center = spec.voxel_center(coord);
                if let Some((clo, chi)) = clip {
                    if center.x < clo.x
                        || center.y < clo.y
                        || center.z < clo.z
                        || center.x > chi.x
                        || center.y > chi.y
                        || center.z > chi.z
                    {
                        continue;
                    }
                }
                let proj = view.project(center);
                if !proj.behind && proj.in_frame && proj.depth <= max_depth {
                    out.push(coord);
                }
            }
        }
    }
    // The scan order above is already lexicographic; keep the contract
    // explicit regardless.
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};

    fn axis_view() -> CameraView {
        let k = CameraIntrinsics::from_fov(32, 32, 0.9).unwrap();
        let pose = CameraPose::look_at(
            Vector3::new(0.05, 0.05, 0.05),
            Vector3::new(0.05, 0.05, 5.0),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        CameraView::new(k, pose)
    }

    #[test]
    fn every_listed_voxel_center_projects_in_frame_within_depth() {
        let view = axis_view();
        let spec = GridSpec::new(Vector3::new(-1.0, -1.0, -1.0), 0.1, 16).unwrap();
        let voxels = frustum_voxels(&view, &spec, 1.5, None);
        assert!(!voxels.is_empty());
        for &c in &voxels {
            let proj = view.project(spec.voxel_center(c));
            assert!(!proj.behind && proj.in_frame && proj.depth <= 1.5);
        }
    }

    #[test]
    fn voxels_behind_camera_are_excluded() {
        let view = axis_view();
        let spec = GridSpec::new(Vector3::new(-1.0, -1.0, -1.0), 0.1, 16).unwrap();
        let voxels = frustum_voxels(&view, &spec, 2.0, None);
        // The camera sits at z = 0.05 looking toward +z; nothing at z well
        // behind it can appear.
        assert!(voxels.iter().all(|c| spec.voxel_center(*c).z > 0.0));
    }

    #[test]
    fn output_is_sorted_and_duplicate_free() {
        let view = axis_view();
        let spec = GridSpec::new(Vector3::new(-1.0, -1.0, -1.0), 0.1, 16).unwrap();
        let voxels = frustum_voxels(&view, &spec, 1.5, None);
        for w in voxels.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn clip_box_restricts_output() {
        let view = axis_view();
        let spec = GridSpec::new(Vector3::new(-1.0, -1.0, -1.0), 0.1, 16).unwrap();
        let clip = (Vector3::new(0.0, 0.0, 0.3), Vector3::new(0.2, 0.2, 0.6));
        let clipped = frustum_voxels(&view, &spec, 1.5, Some(clip));
        let full = frustum_voxels(&view, &spec, 1.5, None);
        assert!(!clipped.is_empty());
        assert!(clipped.len() < full.len());
        for &c in &clipped {
            let p = spec.voxel_center(c);
            assert!(p.x >= 0.0 && p.x <= 0.2);
            assert!(p.y >= 0.0 && p.y <= 0.2);
            assert!(p.z >= 0.3 && p.z <= 0.6);
        }
        // Clipping must not invent voxels.
        for &c in &clipped {
            assert!(full.binary_search(&c).is_ok());
        }
    }

    #[test]
    fn larger_depth_range_sees_at_least_as_much() {
        let view = axis_view();
        let spec = GridSpec::new(Vector3::new(-1.0, -1.0, -1.0), 0.1, 16).unwrap();
        let near = frustum_voxels(&view, &spec, 0.5, None);
        let far = frustum_voxels(&view, &spec, 1.5, None);
        assert!(near.len() < far.len());
        for &c in &near {
            assert!(far.binary_search(&c).is_ok());
        }
    }
}
