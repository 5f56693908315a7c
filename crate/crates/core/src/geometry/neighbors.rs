//! Selecting which views feed the multi-view feature volume for a target
//! frame: nearest frames in capture order for streaming, or nearest camera
//! poses for unordered collections.

use super::camera::CameraPose;
use super::GeometryError;

/// How candidate views are ranked relative to the target view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborOrder {
    /// Nearest frame indices first (streaming capture). Ties between the
    /// earlier and later frame at the same distance break toward the earlier
    /// frame.
    Temporal,
    /// Nearest camera poses first, ranked by center distance plus a small
    /// penalty on viewing-direction divergence.
    Spatial,
}

/// Weight on angular divergence (radians) relative to camera-center distance
/// (meters) in spatial ranking: one radian counts like 0.2 m.
const ANGLE_WEIGHT: f64 = 0.2;

/// Pick the `count` views used to build the feature volume for view
/// `target`, always starting with `target` itself, followed by its nearest
/// neighbors in the requested order. Returns fewer than `count` indices when
/// there are not enough views. The result is deterministic: all ties break
/// toward the lower frame index.
pub fn select_neighbor_views(
    poses: &[CameraPose],
    target: usize,
    count: usize,
    order: NeighborOrder,
) -> Result<Vec<usize>, GeometryError> {
    if poses.is_empty() {
        return Err(GeometryError::NoViews);
    }
    if target >= poses.len() {
        return Err(GeometryError::ViewIndexOutOfRange { index: target, count: poses.len() });
    }

    let mut ranked: Vec<usize> = (0..poses.len()).filter(|&i| i != target).collect();
    match order {
        NeighborOrder::Temporal => {
            ranked.sort_by_key(|&i| (i.abs_diff(target), i));
        }
        NeighborOrder::Spatial => {
            let ct = poses[target].camera_center();
            let ft = poses[target].forward_axis();
            let score = |i: usize| {
                let d = (poses[i].camera_center() - ct).norm();
                let cosang = poses[i].forward_axis().dot(&ft).clamp(-1.0, 1.0);
                d + ANGLE_WEIGHT * cosang.acos()
            };
            ranked.sort_by(|&a, &b| {
                score(a).partial_cmp(&score(b)).expect("scores are finite").then(a.cmp(&b))
            });
        }
    }

    let mut out = Vec::with_capacity(count.min(poses.len()));
    out.push(target);
    out.extend(ranked.into_iter().take(count.saturating_sub(1)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn line_of_poses(n: usize) -> Vec<CameraPose> {
        (0..n)
            .map(|i| {
                CameraPose::look_at(
                    Vector3::new(i as f64, 0.0, 0.0),
                    Vector3::new(i as f64, 0.0, 10.0),
                    Vector3::new(0.0, -1.0, 0.0),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn temporal_neighbors_bracket_the_target() {
        let poses = line_of_poses(10);
        let sel = select_neighbor_views(&poses, 5, 3, NeighborOrder::Temporal).unwrap();
        // Target first, then the two nearest frames; the tie at distance 1
        // breaks toward the earlier frame.
        assert_eq!(sel, vec![5, 4, 6]);
    }

    #[test]
    fn temporal_selection_at_sequence_edges() {
        let poses = line_of_poses(10);
        assert_eq!(
            select_neighbor_views(&poses, 0, 3, NeighborOrder::Temporal).unwrap(),
            vec![0, 1, 2]
        );
        assert_eq!(
            select_neighbor_views(&poses, 9, 3, NeighborOrder::Temporal).unwrap(),
            vec![9, 8, 7]
        );
    }

    #[test]
    fn spatial_selection_prefers_near_cameras() {
        // Cameras at x = 0, 1, 2, 10; target at x = 1 should pick 0 and 2,
        // never 10, regardless of frame order.
        let centers = [0.0, 10.0, 1.0, 2.0];
        let poses: Vec<CameraPose> = centers
            .iter()
            .map(|&x| {
                CameraPose::look_at(
                    Vector3::new(x, 0.0, 0.0),
                    Vector3::new(x, 0.0, 10.0),
                    Vector3::new(0.0, -1.0, 0.0),
                )
                .unwrap()
            })
            .collect();
        let sel = select_neighbor_views(&poses, 2, 3, NeighborOrder::Spatial).unwrap();
        assert_eq!(sel[0], 2);
        assert_eq!({ let mut rest = sel[1..].to_vec(); rest.sort_unstable(); rest }, vec![0, 3]);
    }

    #[test]
    fn spatial_angle_penalty_breaks_distance_ties() {
        // Two candidates at the same distance; the one looking the same way
        // as the target wins.
        let target = CameraPose::look_at(
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 10.0),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        let aligned = CameraPose::look_at(
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 10.0),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        let crossed = CameraPose::look_at(
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(-11.0, 0.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        let poses = vec![crossed, target, aligned];
        let sel = select_neighbor_views(&poses, 1, 2, NeighborOrder::Spatial).unwrap();
        assert_eq!(sel, vec![1, 2]);
    }

    #[test]
    fn requesting_more_views_than_exist_returns_all() {
        let poses = line_of_poses(3);
        let sel = select_neighbor_views(&poses, 1, 8, NeighborOrder::Temporal).unwrap();
        assert_eq!(sel.len(), 3);
        assert_eq!(sel[0], 1);
    }

    #[test]
    fn errors_on_empty_or_out_of_range() {
        assert!(matches!(
            select_neighbor_views(&[], 0, 3, NeighborOrder::Temporal),
            Err(GeometryError::NoViews)
        ));
        let poses = line_of_poses(2);
        assert!(matches!(
            select_neighbor_views(&poses, 2, 1, NeighborOrder::Temporal),
            Err(GeometryError::ViewIndexOutOfRange { .. })
        ));
    }
}
