//! Adam with bias correction. Moment buffers are keyed by parameter name and
//! survive structural edits to row-indexed tensors (pruning, subdivision)
//! via [`Adam::remap_rows`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};

use super::NnError;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state. One instance drives any number of named parameters;
/// moments appear lazily the first time a parameter is updated.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Change the step size mid-run (stage switches); moments are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter; call once per optimizer iteration,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// One Adam update for one parameter. Rejects non-finite gradients with
    /// the parameter name in the error, and shape drift against stored
    /// moments. A zero gradient on fresh state leaves the parameter unchanged.
    pub fn update(
        &mut self,
        name: &str,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<(), NnError> {
        if grad.shape() != param.shape() {
            return Err(NnError::GradShape {
                name: name.to_string(),
                got: grad.shape().to_vec(),
                want: param.shape().to_vec(),
            });
        }
        if !grad.all_finite() {
            return Err(NnError::NonFiniteGrad(name.to_string()));
        }
        let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(param.shape()));
        if m.shape() != param.shape() {
            return Err(NnError::MomentShape {
                name: name.to_string(),
                got: m.shape().to_vec(),
                want: param.shape().to_vec(),
            });
        }
        let t = self.step.max(1);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let bc1 = one - T::from_f64(self.cfg.beta1.powi(t as i32));
        let bc2 = one - T::from_f64(self.cfg.beta2.powi(t as i32));
        for i in 0..param.len() {
            let g = grad.data()[i];
            let mi = b1 * m.data()[i] + (one - b1) * g;
            let vi = b2 * v.data()[i] + (one - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            param.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }

    /// Rebuild the moment rows of a `[rows, C]` parameter: new row `i` takes
    /// the moments of old row `src[i]`. Used when voxels are pruned (subset
    /// map) or subdivided (parent-per-child map) so optimizer memory follows
    /// the surviving features.
    pub fn remap_rows(&mut self, name: &str, src: &[u32]) {
        for buf in [&mut self.m, &mut self.v] {
            if let Some(old) = buf.get(name) {
                let c = old.cols();
                let mut next = Tensor::zeros(&[src.len(), c]);
                for (i, &s) in src.iter().enumerate() {
                    next.row_mut(i).copy_from_slice(old.row(s as usize));
                }
                buf.insert(name.to_string(), next);
            }
        }
    }

    /// Drop moments for a parameter entirely (fresh state on next update).
    pub fn reset_param(&mut self, name: &str) {
        self.m.remove(name);
        self.v.remove(name);
    }

    // -- checkpoint plumbing --

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.m.iter().map(|(k, m)| (k.as_str(), m, &self.v[k]))
    }

    pub fn from_parts(
        cfg: AdamConfig,
        step: u64,
        moments: Vec<(String, Tensor<T>, Tensor<T>)>,
    ) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, mi, vi) in moments {
            m.insert(name.clone(), mi);
            v.insert(name, vi);
        }
        Self { cfg, step, m, v }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_on_fresh_state_leaves_parameter_unchanged() {
        let mut opt = Adam::<f64>::new(AdamConfig::default());
        let mut p = Tensor::from_vec(&[1, 2], vec![1.0, -2.0]);
        let before = p.clone();
        opt.begin_step();
        opt.update("p", &mut p, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_parameter_by_lr_against_gradient_sign() {
        // With bias correction, step one moves by exactly lr * sign(g)
        // (up to eps): mhat = g, vhat = g^2.
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut opt = Adam::<f64>::new(cfg);
        let mut p = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        let g = Tensor::from_vec(&[1, 2], vec![3.0, -0.5]);
        opt.begin_step();
        opt.update("p", &mut p, &g).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-6);
        assert!((p.data()[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_name() {
        let mut opt = Adam::<f64>::new(AdamConfig::default());
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::from_vec(&[2], vec![1.0, f64::INFINITY]);
        opt.begin_step();
        let err = opt.update("layer.w", &mut p, &g).unwrap_err();
        assert!(err.to_string().contains("layer.w"));
        // Moments must not have been corrupted by the failed update.
        assert_eq!(opt.moments().count(), 0);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut opt = Adam::<f64>::new(cfg);
        let mut p = Tensor::from_vec(&[1, 1], vec![5.0]);
        for _ in 0..500 {
            let g = Tensor::from_vec(&[1, 1], vec![2.0 * (p.item() - 1.5)]);
            opt.begin_step();
            opt.update("x", &mut p, &g).unwrap();
        }
        assert!((p.item() - 1.5).abs() < 1e-3, "got {}", p.item());
    }

    #[test]
    fn remap_rows_moves_moments_with_surviving_rows() {
        let mut opt = Adam::<f64>::new(AdamConfig::default());
        let mut p = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]);
        let g = Tensor::from_vec(&[3, 1], vec![0.1, 0.2, 0.3]);
        opt.begin_step();
        opt.update("grid", &mut p, &g).unwrap();
        let (_, m_before, _) = opt.moments().next().unwrap();
        let kept = m_before.at(2, 0);

        // Keep row 2, duplicate it twice (a 1-parent subdivision pattern).
        opt.remap_rows("grid", &[2, 2]);
        let (_, m, v) = opt.moments().next().unwrap();
        assert_eq!(m.shape(), &[2, 1]);
        assert_eq!(m.at(0, 0), kept);
        assert_eq!(m.at(1, 0), kept);
        assert_eq!(v.shape(), &[2, 1]);
    }
}
