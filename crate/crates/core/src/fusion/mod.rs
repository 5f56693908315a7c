//! Recurrent fusion of per-frame local volumes into one global volume.
//!
//! Each frame, the voxels covered by the frame's local volume are passed
//! through a gated recurrent update: sparse-convolutional gates read the
//! concatenation of the previous global features and the new local features
//! and blend the two. Voxels outside the frame's coverage are carried over
//! bit-for-bit — frames only ever touch what they observed.

use std::collections::HashMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GatherPlan, NeighborTable, NodeId, Real, TapeError, Tensor};
use crate::grid::{split_sets, GridError, VoxelSet};
use crate::nn::{Activation, Graph, NnError, ParameterStore, SparseStackSpec};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fusion spec invalid: {0}")]
    BadSpec(String),
    #[error("feature node is {got:?}, expected [{rows}, {channels}]")]
    FeatureShape { got: Vec<usize>, rows: usize, channels: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Architecture of the recurrent update. All three gates share the same
/// stack shape: input `[2C]` (previous state and local features,
/// concatenated), hidden widths `gate_channels`, output `C`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionSpec {
    /// Feature width of both the local and the global volume.
    pub channels: usize,
    /// Hidden widths of each gate's sparse stack (output `C` is appended).
    pub gate_channels: Vec<usize>,
    /// Kernel sizes of each gate layer; one more than `gate_channels`.
    pub gate_kernels: Vec<usize>,
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self { channels: 16, gate_channels: vec![16, 16], gate_kernels: vec![1, 3, 1] }
    }
}

impl FusionSpec {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.channels == 0 {
            return Err(FusionError::BadSpec("channels must be >= 1".into()));
        }
        if self.gate_kernels.len() != self.gate_channels.len() + 1 {
            return Err(FusionError::BadSpec(format!(
                "{} kernels for {} hidden widths (need one more kernel than widths)",
                self.gate_kernels.len(),
                self.gate_channels.len()
            )));
        }
        Ok(())
    }

    fn gate_spec(&self, name: &str, output: Activation) -> SparseStackSpec {
        let mut channels = vec![2 * self.channels];
        channels.extend_from_slice(&self.gate_channels);
        channels.push(self.channels);
        SparseStackSpec::new(format!("gru.{name}"), channels, self.gate_kernels.clone())
            .with_output(output)
    }

    pub fn register<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), FusionError> {
        self.validate()?;
        self.gate_spec("update", Activation::Sigmoid).register(store, rng)?;
        self.gate_spec("reset", Activation::Sigmoid).register(store, rng)?;
        self.gate_spec("cand", Activation::Tanh).register(store, rng)?;
        Ok(())
    }
}

/// A global volume living on a tape: its voxel set and `[V, C]` feature node.
///
/// The gate nodes (`[L, C]` over the local set) are kept for inspection and
/// are `None` when the step had no local voxels to update.
#[derive(Debug)]
pub struct FusedVolume {
    pub set: VoxelSet,
    pub features: NodeId,
    pub update_gate: Option<NodeId>,
    pub reset_gate: Option<NodeId>,
}

/// Record one fusion step on the graph's tape.
///
/// `global` is the running volume (pass `None` on the first frame), `local`
/// the freshly built frame volume on the same lattice. The result covers the
/// union of both sets: voxels in the local set get the gated update (with a
/// zero previous state where the global volume had no entry), voxels only in
/// the global set are copied through untouched, bit for bit.
pub fn fuse_step<T: Real>(
    g: &mut Graph<'_, T>,
    spec: &FusionSpec,
    global: Option<(&VoxelSet, NodeId)>,
    local: (&VoxelSet, NodeId),
) -> Result<FusedVolume, FusionError> {
    spec.validate()?;
    let (lset, lfeat) = local;
    check_feature_shape(g, lfeat, lset.len(), spec.channels)?;

    let empty = VoxelSet::from_coords(Vec::new())?;
    let (gset, gfeat) = match global {
        Some((s, f)) => {
            check_feature_shape(g, f, s.len(), spec.channels)?;
            (s, Some(f))
        }
        None => (&empty, None),
    };

    // Nothing new this frame: the global volume passes through unchanged
    // (same node, not even a copy).
    if lset.is_empty() {
        let features = match gfeat {
            Some(f) => f,
            None => g.tape.constant(Tensor::zeros(&[0, spec.channels])),
        };
        return Ok(FusedVolume {
            set: gset.clone(),
            features,
            update_gate: None,
            reset_gate: None,
        });
    }

    let split = split_sets(gset, lset);

    // Previous state over the local domain: gathered from the global volume
    // where it exists, zero elsewhere.
    let mut prev_rows: Vec<Vec<(u32, T)>> = vec![Vec::new(); lset.len()];
    for &(_, grow, lrow) in &split.overlap {
        prev_rows[lrow as usize] = vec![(grow, T::one())];
    }
    let prev = match gfeat {
        Some(f) if !split.overlap.is_empty() => {
            g.tape.gather(f, Arc::new(GatherPlan::new(prev_rows)))?
        }
        _ => g.tape.constant(Tensor::zeros(&[lset.len(), spec.channels])),
    };

    // Gated update over the local voxel set.
    let mut table_cache: HashMap<usize, Arc<NeighborTable>> = HashMap::new();
    let mut tables = |k: usize| {
        table_cache.entry(k).or_insert_with(|| Arc::new(lset.neighbor_table(k))).clone()
    };
    let both = g.tape.concat_cols(&[prev, lfeat])?;
    let z = spec.gate_spec("update", Activation::Sigmoid).forward(g, both, &mut tables)?;
    let r = spec.gate_spec("reset", Activation::Sigmoid).forward(g, both, &mut tables)?;
    let gated_prev = g.tape.mul(r, prev)?;
    let cand_in = g.tape.concat_cols(&[gated_prev, lfeat])?;
    let cand = spec.gate_spec("cand", Activation::Tanh).forward(g, cand_in, &mut tables)?;
    // out = (1 - z) * prev + z * cand
    let one_minus_z = g.tape.affine(z, -1.0, 1.0);
    let keep = g.tape.mul(one_minus_z, prev)?;
    let take = g.tape.mul(z, cand)?;
    let updated = g.tape.add(keep, take)?;

    // Assemble the union volume: updated rows for the local set, pure copies
    // for everything only the global volume held.
    let mut union_coords = Vec::with_capacity(gset.len() + lset.len());
    union_coords.extend_from_slice(lset.coords());
    union_coords.extend(split.global_only.iter().map(|&(c, _)| c));
    let union = VoxelSet::from_coords(union_coords)?;

    let local_placement: Vec<u32> = lset
        .coords()
        .iter()
        .map(|&c| union.row_of(c).expect("local voxel in union") as u32)
        .collect();

    let features = if split.global_only.is_empty() {
        g.tape.stack_rows(vec![(updated, Arc::new(local_placement))])?
    } else {
        let gfeat = gfeat.expect("global rows exist");
        let keep_rows: Vec<u32> = split.global_only.iter().map(|&(_, r)| r).collect();
        let kept = g.tape.select_rows(gfeat, Arc::new(keep_rows))?;
        let keep_placement: Vec<u32> = split
            .global_only
            .iter()
            .map(|&(c, _)| union.row_of(c).expect("global voxel in union") as u32)
            .collect();
        g.tape.stack_rows(vec![
            (updated, Arc::new(local_placement)),
            (kept, Arc::new(keep_placement)),
        ])?
    };

    Ok(FusedVolume { set: union, features, update_gate: Some(z), reset_gate: Some(r) })
}

fn check_feature_shape<T: Real>(
    g: &Graph<'_, T>,
    node: NodeId,
    rows: usize,
    channels: usize,
) -> Result<(), FusionError> {
    let shape = g.tape.value(node).shape();
    if shape != [rows, channels] {
        return Err(FusionError::FeatureShape { got: shape.to_vec(), rows, channels });
    }
    Ok(())
}

/// One fusion step without keeping a tape: plain grids in, plain grid out.
/// Used at inference time and for the truncated-gradient warm-up prefix
/// during end-to-end training.
pub fn fuse_values<T: Real>(
    store: &ParameterStore<T>,
    spec: &FusionSpec,
    global: Option<&crate::grid::SparseVoxelGrid<T>>,
    local: &crate::grid::SparseVoxelGrid<T>,
) -> Result<crate::grid::SparseVoxelGrid<T>, FusionError> {
    if let Some(g) = global {
        g.spec().check_compatible(local.spec())?;
    }
    let mut g = Graph::new(store);
    let lfeat = g.tape.input(local.features().clone());
    let gfeat = global.map(|gg| g.tape.input(gg.features().clone()));
    let gpair = global.zip(gfeat).map(|(gg, f)| (gg.set(), f));
    let fused = fuse_step(&mut g, spec, gpair, (local.set(), lfeat))?;
    let features = g.tape.value(fused.features).clone();
    Ok(crate::grid::SparseVoxelGrid::new(*local.spec(), fused.set, features)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn spec() -> FusionSpec {
        FusionSpec { channels: 3, gate_channels: vec![4], gate_kernels: vec![1, 3] }
    }

    fn store_for(spec: &FusionSpec, seed: u64) -> ParameterStore<f64> {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        spec.register(&mut store, &mut rng).unwrap();
        store
    }

    fn random_features(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[rows, cols], data)
    }

    #[test]
    fn first_frame_initializes_global_to_local_set() {
        let spec = spec();
        let store = store_for(&spec, 1);
        let lset = VoxelSet::from_coords(vec![[0, 0, 0], [1, 0, 0], [0, 1, 0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new(&store);
        let lfeat = g.tape.input(random_features(&mut rng, 3, 3));
        let fused = fuse_step(&mut g, &spec, None, (&lset, lfeat)).unwrap();
        assert_eq!(fused.set.coords(), lset.coords());
        let v = g.tape.value(fused.features);
        assert_eq!(v.shape(), [3, 3]);
        // From a zero previous state the update is z * cand with |cand| < 1.
        for &x in v.data() {
            assert!(x.abs() < 1.0);
        }
    }

    #[test]
    fn voxels_outside_local_coverage_are_byte_identical() {
        let spec = spec();
        let store = store_for(&spec, 3);
        let gset =
            VoxelSet::from_coords(vec![[0, 0, 0], [1, 0, 0], [5, 5, 5], [6, 5, 5]]).unwrap();
        let lset = VoxelSet::from_coords(vec![[1, 0, 0], [2, 0, 0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gfeat_t = random_features(&mut rng, 4, 3);
        // Plant a negative zero to catch any arithmetic sneaking into the
        // carry-over path.
        gfeat_t.data_mut()[2 * 3] = -0.0;

        let mut g = Graph::new(&store);
        let gfeat = g.tape.input(gfeat_t.clone());
        let lfeat = g.tape.input(random_features(&mut rng, 2, 3));
        let fused = fuse_step(&mut g, &spec, Some((&gset, gfeat)), (&lset, lfeat)).unwrap();

        // Union holds all six voxels.
        assert_eq!(fused.set.len(), 5);
        let out = g.tape.value(fused.features);
        for &c in &[[0, 0, 0], [5, 5, 5], [6, 5, 5]] {
            let grow = gset.row_of(c).unwrap();
            let urow = fused.set.row_of(c).unwrap();
            for k in 0..3 {
                assert_eq!(
                    out.row(urow)[k].to_bits(),
                    gfeat_t.row(grow)[k].to_bits(),
                    "voxel {c:?} channel {k} must carry over bit-for-bit"
                );
            }
        }
        // Updated voxels generally differ from their previous state.
        let urow = fused.set.row_of([1, 0, 0]).unwrap();
        let grow = gset.row_of([1, 0, 0]).unwrap();
        assert!((0..3).any(|k| out.row(urow)[k] != gfeat_t.row(grow)[k]));
    }

    #[test]
    fn empty_local_volume_passes_global_through() {
        let spec = spec();
        let store = store_for(&spec, 5);
        let gset = VoxelSet::from_coords(vec![[0, 0, 0], [3, 1, 2]]).unwrap();
        let lset = VoxelSet::from_coords(vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new(&store);
        let gfeat = g.tape.input(random_features(&mut rng, 2, 3));
        let lfeat = g.tape.input(Tensor::zeros(&[0, 3]));
        let fused = fuse_step(&mut g, &spec, Some((&gset, gfeat)), (&lset, lfeat)).unwrap();
        assert_eq!(fused.set.coords(), gset.coords());
        assert_eq!(fused.features, gfeat);
    }

    #[test]
    fn gradients_flow_through_two_chained_fusion_steps() {
        let spec = spec();
        let store = store_for(&spec, 7);
        let set_a = VoxelSet::from_coords(vec![[0, 0, 0], [1, 0, 0]]).unwrap();
        let set_b = VoxelSet::from_coords(vec![[1, 0, 0], [2, 0, 0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let feat_a = random_features(&mut rng, 2, 3);
        let feat_b = random_features(&mut rng, 2, 3);

        let loss_value = |store: &ParameterStore<f64>, fa: &Tensor<f64>| -> f64 {
            let mut g = Graph::new(store);
            let na = g.tape.input(fa.clone());
            let nb = g.tape.input(feat_b.clone());
            let f1 = fuse_step(&mut g, &spec, None, (&set_a, na)).unwrap();
            let f2 =
                fuse_step(&mut g, &spec, Some((&f1.set, f1.features)), (&set_b, nb)).unwrap();
            let l = g.tape.mean_all(f2.features);
            g.tape.value(l).item()
        };

        let mut g = Graph::new(&store);
        let na = g.variable("local_a", feat_a.clone()).unwrap();
        let nb = g.tape.input(feat_b.clone());
        let f1 = fuse_step(&mut g, &spec, None, (&set_a, na)).unwrap();
        let f2 = fuse_step(&mut g, &spec, Some((&f1.set, f1.features)), (&set_b, nb)).unwrap();
        let l = g.tape.mean_all(f2.features);
        let grads = g.backward(l).unwrap();

        // Numeric check w.r.t. the first frame's local features (they reach
        // the loss only through the recurrent state) and one gate weight.
        let fd_a = crate::autodiff::fd_gradient(
            |fa| loss_value(&store, fa),
            &feat_a,
            1e-6,
        );
        crate::autodiff::assert_grads_close(grads.get("local_a").unwrap(), &fd_a, 1e-6);

        for name in ["gru.update.0.w", "gru.reset.1.w", "gru.cand.0.b"] {
            let fd = crate::autodiff::fd_gradient(
                |w| {
                    let mut s2 = store.clone();
                    s2.set(name, w.clone()).unwrap();
                    loss_value(&s2, &feat_a)
                },
                store.get(name).unwrap(),
                1e-6,
            );
            crate::autodiff::assert_grads_close(grads.get(name).unwrap(), &fd, 1e-6);
        }
    }

    #[test]
    fn mismatched_feature_shape_is_rejected() {
        let spec = spec();
        let store = store_for(&spec, 9);
        let lset = VoxelSet::from_coords(vec![[0, 0, 0]]).unwrap();
        let mut g = Graph::new(&store);
        let bad = g.tape.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            fuse_step(&mut g, &spec, None, (&lset, bad)),
            Err(FusionError::FeatureShape { .. })
        ));
    }

    #[test]
    fn untaped_fusion_matches_taped_step_bitwise() {
        use crate::grid::{GridSpec, SparseVoxelGrid};
        use nalgebra::Vector3;

        let spec = spec();
        let store = store_for(&spec, 11);
        let gspec = GridSpec::new(Vector3::new(0.0, 0.0, 0.0), 0.5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gset = VoxelSet::from_coords(vec![[0, 0, 0], [1, 0, 0], [3, 3, 3]]).unwrap();
        let lset = VoxelSet::from_coords(vec![[1, 0, 0], [2, 0, 0]]).unwrap();
        let gfeat = random_features(&mut rng, 3, 3);
        let lfeat = random_features(&mut rng, 2, 3);
        let global = SparseVoxelGrid::new(gspec, gset.clone(), gfeat.clone()).unwrap();
        let local = SparseVoxelGrid::new(gspec, lset.clone(), lfeat.clone()).unwrap();

        let fused = fuse_values(&store, &spec, Some(&global), &local).unwrap();

        let mut g = Graph::new(&store);
        let gnode = g.tape.input(gfeat);
        let lnode = g.tape.input(lfeat);
        let taped = fuse_step(&mut g, &spec, Some((&gset, gnode)), (&lset, lnode)).unwrap();
        assert_eq!(fused.set().coords(), taped.set.coords());
        let want = g.tape.value(taped.features);
        for (a, b) in fused.features().data().iter().zip(want.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
