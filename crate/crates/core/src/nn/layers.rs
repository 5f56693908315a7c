//! Declarative layer stacks. A spec names its parameters deterministically
//! (`{prefix}.{index}.w` / `.b`), registers them into a store, and replays
//! the same structure as tape ops at forward time.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NeighborTable, NodeId, Real};

use super::{Graph, NnError, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        match self {
            Activation::None => x,
            Activation::Relu => g.tape.relu(x),
            Activation::Sigmoid => g.tape.sigmoid(x),
            Activation::Tanh => g.tape.tanh(x),
            Activation::Softplus => g.tape.softplus(x),
        }
    }
}

/// Fully connected stack: `widths = [in, h1, ..., out]`.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub prefix: String,
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>) -> Self {
        assert!(widths.len() >= 2, "MLP needs at least input and output widths");
        Self { prefix: prefix.into(), widths, hidden: Activation::Relu, output: Activation::None }
    }

    pub fn with_output(mut self, act: Activation) -> Self {
        self.output = act;
        self
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn register<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), NnError> {
        for i in 0..self.layers() {
            store.init_linear(
                rng,
                &format!("{}.{}", self.prefix, i),
                self.widths[i],
                self.widths[i + 1],
            )?;
        }
        Ok(())
    }

    /// `[n, widths[0]] -> [n, widths.last()]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: NodeId) -> Result<NodeId, NnError> {
        for i in 0..self.layers() {
            let w = g.param(&format!("{}.{}.w", self.prefix, i))?;
            let b = g.param(&format!("{}.{}.b", self.prefix, i))?;
            x = g.tape.matmul(x, w)?;
            x = g.tape.add_bias(x, b)?;
            let act = if i + 1 == self.layers() { self.output } else { self.hidden };
            x = act.apply(g, x);
        }
        Ok(x)
    }
}

/// Strided 2D convolution stack for the image encoder. ReLU between layers,
/// linear output (the last layer produces features, not activations).
#[derive(Debug, Clone)]
pub struct ConvStackSpec {
    pub prefix: String,
    /// `[in, c1, ..., cn]` channel counts.
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl ConvStackSpec {
    pub fn layers(&self) -> usize {
        self.channels.len() - 1
    }

    /// Total spatial downsampling factor.
    pub fn downsample_factor(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn register<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), NnError> {
        assert_eq!(self.kernels.len(), self.layers());
        assert_eq!(self.strides.len(), self.layers());
        for i in 0..self.layers() {
            store.init_conv2d(
                rng,
                &format!("{}.{}", self.prefix, i),
                self.channels[i],
                self.channels[i + 1],
                self.kernels[i],
            )?;
        }
        Ok(())
    }

    /// `[channels[0], H, W] -> [channels.last(), H/f, W/f]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: NodeId) -> Result<NodeId, NnError> {
        for i in 0..self.layers() {
            let w = g.param(&format!("{}.{}.w", self.prefix, i))?;
            let b = g.param(&format!("{}.{}.b", self.prefix, i))?;
            x = g.tape.conv2d(x, w, b, self.strides[i])?;
            if i + 1 != self.layers() {
                x = g.tape.relu(x);
            }
        }
        Ok(x)
    }
}

/// Sparse 3D convolution stack over a voxel set. Neighbor tables are supplied
/// per kernel size by the caller (they depend on the active voxel set, not on
/// the network).
#[derive(Debug, Clone)]
pub struct SparseStackSpec {
    pub prefix: String,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl SparseStackSpec {
    pub fn new(prefix: impl Into<String>, channels: Vec<usize>, kernels: Vec<usize>) -> Self {
        assert_eq!(kernels.len() + 1, channels.len(), "one kernel per layer");
        Self {
            prefix: prefix.into(),
            channels,
            kernels,
            hidden: Activation::Relu,
            output: Activation::None,
        }
    }

    pub fn with_output(mut self, act: Activation) -> Self {
        self.output = act;
        self
    }

    pub fn layers(&self) -> usize {
        self.kernels.len()
    }

    pub fn register<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), NnError> {
        for i in 0..self.layers() {
            store.init_sparse_conv3d(
                rng,
                &format!("{}.{}", self.prefix, i),
                self.kernels[i],
                self.channels[i],
                self.channels[i + 1],
            )?;
        }
        Ok(())
    }

    /// `[V, channels[0]] -> [V, channels.last()]`; `tables` maps a kernel size
    /// to the neighbor table of the active voxel set.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        mut x: NodeId,
        tables: &mut impl FnMut(usize) -> Arc<NeighborTable>,
    ) -> Result<NodeId, NnError> {
        for i in 0..self.layers() {
            let w = g.param(&format!("{}.{}.w", self.prefix, i))?;
            let b = g.param(&format!("{}.{}.b", self.prefix, i))?;
            x = g.tape.sparse_conv3d(x, w, b, tables(self.kernels[i]))?;
            let act = if i + 1 == self.layers() { self.output } else { self.hidden };
            x = act.apply(g, x);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{assert_grads_close, fd_gradient, Tensor};
    use rand::SeedableRng;

    #[test]
    fn mlp_shapes_and_param_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::<f64>::new();
        let spec = MlpSpec::new("head", vec![4, 8, 3]).with_output(Activation::Sigmoid);
        spec.register(&mut store, &mut rng).unwrap();
        assert!(store.contains("head.0.w"));
        assert!(store.contains("head.1.b"));
        assert_eq!(store.get("head.0.w").unwrap().shape(), &[4, 8]);

        let mut g = Graph::new(&store);
        let x = g.tape.constant(Tensor::zeros(&[5, 4]));
        let y = spec.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.value(y).shape(), &[5, 3]);
        // Sigmoid output stays in (0,1).
        assert!(g.tape.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn mlp_gradcheck_through_two_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::<f64>::new();
        let spec = MlpSpec::new("m", vec![3, 6, 2]).with_output(Activation::Tanh);
        spec.register(&mut store, &mut rng).unwrap();
        let x0 = Tensor::from_vec(&[2, 3], vec![0.3, -0.7, 0.2, 0.9, 0.1, -0.4]);

        let eval = |store: &ParameterStore<f64>, x: &Tensor<f64>| {
            let mut g = Graph::new(store);
            let xn = g.tape.input(x.clone());
            let y = spec.forward(&mut g, xn).unwrap();
            let sq = g.tape.square(y);
            let loss = g.tape.mean_all(sq);
            g.tape.value(loss).item()
        };

        let mut g = Graph::new(&store);
        let xn = g.tape.input(x0.clone());
        let y = spec.forward(&mut g, xn).unwrap();
        let sq = g.tape.square(y);
        let loss = g.tape.mean_all(sq);
        let grads = g.backward(loss).unwrap();

        for name in ["m.0.w", "m.0.b", "m.1.w", "m.1.b"] {
            let numeric = fd_gradient(
                |p: &Tensor<f64>| {
                    let mut s2 = store.clone();
                    *s2.get_mut(name).unwrap() = p.clone();
                    eval(&s2, &x0)
                },
                store.get(name).unwrap(),
                1e-6,
            );
            assert_grads_close(grads.get(name).unwrap(), &numeric, 1e-6);
        }
    }

    #[test]
    fn conv_stack_downsamples_to_quarter_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::<f64>::new();
        let spec = ConvStackSpec {
            prefix: "enc".into(),
            channels: vec![3, 4, 6, 8],
            kernels: vec![3, 3, 3],
            strides: vec![2, 2, 1],
        };
        spec.register(&mut store, &mut rng).unwrap();
        assert_eq!(spec.downsample_factor(), 4);

        let mut g = Graph::new(&store);
        let x = g.tape.constant(Tensor::full(&[3, 16, 16], 0.5));
        let y = spec.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.value(y).shape(), &[8, 4, 4]);
    }
}
