//! Named parameter storage. A `BTreeMap` keeps iteration order deterministic,
//! which matters everywhere: optimizer sweeps, checkpoint layout, and the
//! reproducibility guarantees the trainer makes.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tensor};

use super::NnError;

/// All trainable tensors of a model, keyed by dotted names
/// (e.g. `enc.0.w`, `gru.z.1.b`).
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T: Real> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Register a new parameter. Duplicate names and non-finite values are
    /// rejected — both are symptoms of a broken builder or a corrupt load.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<(), NnError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        if !value.all_finite() {
            return Err(NnError::NonFiniteParam(name));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, NnError> {
        self.params.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    /// Replace an existing parameter's value. The parameter must already be
    /// registered with the same shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), NnError> {
        let current = self.get(name)?;
        if current.shape() != value.shape() {
            return Err(NnError::ParamShape {
                name: name.to_string(),
                got: value.shape().to_vec(),
                want: current.shape().to_vec(),
            });
        }
        if !value.all_finite() {
            return Err(NnError::NonFiniteParam(name.to_string()));
        }
        *self.params.get_mut(name).expect("checked above") = value;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, NnError> {
        self.params.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Uniform init in `[-s, s)` with `s = 1/sqrt(fan_in)`, the scaling that
    /// keeps pre-activation variance roughly unit through ReLU stacks.
    fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * s)).collect();
        Tensor::from_vec(shape, data)
    }

    /// Register `{prefix}.w` `[fan_in,fan_out]` and `{prefix}.b` `[fan_out]`
    /// (bias zeroed).
    pub fn init_linear(
        &mut self,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<(), NnError> {
        self.insert(format!("{prefix}.w"), Self::uniform(rng, &[fan_in, fan_out], fan_in))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
    }

    /// Register `{prefix}.w` `[cout,cin,k,k]` and `{prefix}.b` `[cout]`.
    pub fn init_conv2d(
        &mut self,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Result<(), NnError> {
        let fan_in = cin * k * k;
        self.insert(format!("{prefix}.w"), Self::uniform(rng, &[cout, cin, k, k], fan_in))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]))
    }

    /// Register `{prefix}.w` `[k^3,cin,cout]` and `{prefix}.b` `[cout]`.
    pub fn init_sparse_conv3d(
        &mut self,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
    ) -> Result<(), NnError> {
        let k3 = kernel * kernel * kernel;
        let fan_in = cin * k3;
        self.insert(format!("{prefix}.w"), Self::uniform(rng, &[k3, cin, cout], fan_in))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn insert_rejects_duplicates_and_non_finite() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("a.w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            store.insert("a.w", Tensor::zeros(&[2, 2])),
            Err(NnError::DuplicateParam(_))
        ));
        assert!(matches!(
            store.insert("b.w", Tensor::from_vec(&[1], vec![f64::NAN])),
            Err(NnError::NonFiniteParam(_))
        ));
    }

    #[test]
    fn init_is_reproducible_for_equal_seeds() {
        let build = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParameterStore::<f64>::new();
            store.init_linear(&mut rng, "fc", 8, 4).unwrap();
            store.init_conv2d(&mut rng, "conv", 3, 8, 3).unwrap();
            store
        };
        let a = build(42);
        let b = build(42);
        let c = build(43);
        assert_eq!(a.get("fc.w").unwrap(), b.get("fc.w").unwrap());
        assert_eq!(a.get("conv.w").unwrap(), b.get("conv.w").unwrap());
        assert_ne!(a.get("fc.w").unwrap(), c.get("fc.w").unwrap());
    }

    #[test]
    fn init_scale_respects_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParameterStore::<f64>::new();
        store.init_linear(&mut rng, "fc", 100, 50).unwrap();
        let bound = 1.0 / 10.0;
        let w = store.get("fc.w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        // Not degenerate: values actually spread out.
        assert!(w.data().iter().any(|v| v.abs() > bound * 0.5));
        assert!(store.get("fc.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn names_iterate_sorted() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("z", Tensor::zeros(&[1])).unwrap();
        store.insert("a", Tensor::zeros(&[1])).unwrap();
        store.insert("m", Tensor::zeros(&[1])).unwrap();
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, vec!["a", "m", "z"]);
    }
}
