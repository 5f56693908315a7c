//! Supervision batches (random pixels with their ground-truth colors) and
//! the rendering loss recorded on the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Real, Tensor};
use crate::geometry::{CameraView, Ray};
use crate::nn::Graph;

use super::TrainError;

/// A batch of supervision rays with their target colors, `[R, 3]`.
#[derive(Debug, Clone)]
pub struct PixelBatch<T: Real> {
    pub rays: Vec<Ray>,
    pub rgb: Tensor<T>,
}

/// Draw `count` random pixels (uniform, with replacement) from one view.
/// The view must carry an image. Consumes exactly `2 * count` draws.
pub fn sample_pixel_batch<T: Real>(
    view: &CameraView,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PixelBatch<T>, TrainError> {
    sample_pixel_batch_multi(&[view], count, rng)
}

/// Draw `count` random pixels across several views: for each ray a view is
/// picked uniformly, then a pixel within it. With one view no view draw is
/// consumed. Every view must carry an image.
pub fn sample_pixel_batch_multi<T: Real>(
    views: &[&CameraView],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PixelBatch<T>, TrainError> {
    if views.is_empty() {
        return Err(TrainError::BadConfig("pixel batch needs at least one view".into()));
    }
    let mut rays = Vec::with_capacity(count);
    let mut rgb = Tensor::zeros(&[count, 3]);
    for r in 0..count {
        let view = if views.len() == 1 { views[0] } else { views[rng.gen_range(0..views.len())] };
        let image = view
            .image
            .as_ref()
            .ok_or_else(|| TrainError::BadConfig("supervision view carries no image".into()))?;
        let x = rng.gen_range(0..view.intrinsics.width);
        let y = rng.gen_range(0..view.intrinsics.height);
        rays.push(view.ray_for_pixel(x, y)?);
        for (c, &v) in image.get(x, y).iter().enumerate() {
            rgb.set(r, c, T::from_f64(v));
        }
    }
    Ok(PixelBatch { rays, rgb })
}

/// Mean squared error between the RGB columns of a rendered `[R, 5]` batch
/// and `[R, 3]` target colors, recorded on the tape as a scalar node.
pub fn rendered_rgb_loss<T: Real>(
    g: &mut Graph<'_, T>,
    rendered: NodeId,
    target: &Tensor<T>,
) -> Result<NodeId, TrainError> {
    let got = g.tape.value(rendered).shape().to_vec();
    if got.len() != 2 || got[1] != 5 || got[0] != target.rows() || target.cols() != 3 {
        return Err(TrainError::BadConfig(format!(
            "loss expects rendered [R,5] against target [R,3], got {got:?} vs {:?}",
            target.shape()
        )));
    }
    let rgb = g.tape.column_slice(rendered, 0, 3)?;
    let t = g.tape.constant(target.clone());
    let diff = g.tape.sub(rgb, t)?;
    let sq = g.tape.square(diff);
    Ok(g.tape.mean_all(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use crate::img::ImageF;
    use crate::nn::ParameterStore;
    use nalgebra::Vector3;
    use rand::SeedableRng;

    fn view_with_gradient_image() -> CameraView {
        let k = CameraIntrinsics::from_fov(8, 6, 1.0).unwrap();
        let pose = CameraPose::look_at(
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        let mut view = CameraView::new(k, pose);
        let mut img = ImageF::new(8, 6).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                img.set(x, y, [x as f64 / 7.0, y as f64 / 5.0, 0.25]);
            }
        }
        view.image = Some(img);
        view
    }

    #[test]
    fn batch_rays_match_their_target_pixels() {
        let view = view_with_gradient_image();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = sample_pixel_batch::<f64>(&view, 40, &mut rng).unwrap();
        assert_eq!(batch.rays.len(), 40);
        assert_eq!(batch.rgb.shape(), [40, 3]);
        let image = view.image.as_ref().unwrap();
        for (r, ray) in batch.rays.iter().enumerate() {
            // Recover the pixel from the ray by projecting a point along it.
            let p = view.project(ray.at(0.5));
            let (x, y) = (p.pixel[0].floor() as usize, p.pixel[1].floor() as usize);
            let want = image.get(x, y);
            for c in 0..3 {
                assert!((batch.rgb.at(r, c) - want[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_in_the_seed() {
        let view = view_with_gradient_image();
        let a = sample_pixel_batch::<f64>(&view, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_pixel_batch::<f64>(&view, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (ra, rb) in a.rays.iter().zip(&b.rays) {
            assert_eq!(ra.origin, rb.origin);
            assert_eq!(ra.direction, rb.direction);
        }
        assert_eq!(a.rgb, b.rgb);
    }

    #[test]
    fn loss_is_zero_on_perfect_match_and_positive_otherwise() {
        let store = ParameterStore::<f64>::new();
        let mut g = Graph::new(&store);
        let rendered = g.tape.input(Tensor::from_vec(
            &[2, 5],
            vec![0.2, 0.4, 0.6, 1.0, 0.0, 0.8, 0.1, 0.3, 2.0, 0.5],
        ));
        let perfect =
            Tensor::from_vec(&[2, 3], vec![0.2, 0.4, 0.6, 0.8, 0.1, 0.3]);
        let zero = rendered_rgb_loss(&mut g, rendered, &perfect).unwrap();
        assert_eq!(g.tape.value(zero).item(), 0.0);

        let off = Tensor::from_vec(&[2, 3], vec![0.2, 0.4, 0.6, 0.8, 0.1, 0.9]);
        let pos = rendered_rgb_loss(&mut g, rendered, &off).unwrap();
        // One channel off by 0.6 over 6 entries: mse = 0.36 / 6.
        assert!((g.tape.value(pos).item() - 0.06).abs() < 1e-12);

        let bad = Tensor::zeros(&[3, 3]);
        assert!(rendered_rgb_loss(&mut g, rendered, &bad).is_err());
    }
}
