//! Adam with bias correction over a fixed-order list of layers.

use alloc::vec::Vec;

use super::{LayerParams, NdArray};
use crate::error::{Error, Result};
use crate::fmath;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// First/second moment estimates for every parameter tensor, in layer
/// order (w then b per layer), plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    m: Vec<NdArray>,
    v: Vec<NdArray>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, layers: &[&LayerParams]) -> Self {
        let mut m = Vec::with_capacity(layers.len() * 2);
        for layer in layers {
            m.push(NdArray::zeros(layer.w.shape()));
            m.push(NdArray::zeros(layer.b.shape()));
        }
        let v = m.clone();
        AdamState {
            cfg,
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in each layer and
    /// zeroes them. Layer order must match `new`. A non-finite gradient
    /// aborts with an error.
    pub fn step(&mut self, layers: &mut [&mut LayerParams]) -> Result<()> {
        assert_eq!(layers.len() * 2, self.m.len(), "layer list changed size");
        self.step += 1;
        self.beta1_pow *= self.cfg.beta1;
        self.beta2_pow *= self.cfg.beta2;
        let inv_bc1 = 1.0 / (1.0 - self.beta1_pow);
        let inv_bc2 = 1.0 / (1.0 - self.beta2_pow);
        for (i, layer) in layers.iter_mut().enumerate() {
            update_tensor(
                &self.cfg,
                inv_bc1,
                inv_bc2,
                &mut layer.w,
                &mut layer.gw,
                &mut self.m[2 * i],
                &mut self.v[2 * i],
            )?;
            update_tensor(
                &self.cfg,
                inv_bc1,
                inv_bc2,
                &mut layer.b,
                &mut layer.gb,
                &mut self.m[2 * i + 1],
                &mut self.v[2 * i + 1],
            )?;
        }
        Ok(())
    }
}

fn update_tensor(
    cfg: &AdamConfig,
    inv_bc1: f64,
    inv_bc2: f64,
    p: &mut NdArray,
    g: &mut NdArray,
    m: &mut NdArray,
    v: &mut NdArray,
) -> Result<()> {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let lr = cfg.learning_rate;
    let eps = cfg.epsilon;
    for (((pv, gv), mv), vv) in p
        .data_mut()
        .iter_mut()
        .zip(g.data_mut().iter_mut())
        .zip(m.data_mut().iter_mut())
        .zip(v.data_mut().iter_mut())
    {
        let grad = *gv;
        if !grad.is_finite() {
            return Err(Error::NonFinite { what: "gradient" });
        }
        *mv = b1 * *mv + (1.0 - b1) * grad;
        *vv = b2 * *vv + (1.0 - b2) * grad * grad;
        let mhat = *mv * inv_bc1;
        let vhat = *vv * inv_bc2;
        *pv -= lr * mhat / (fmath::sqrt(vhat) + eps);
        *gv = 0.0;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamKind};

    fn layer(seed: u64) -> LayerParams {
        let mut rng = stream(seed, StreamKind::WeightInit, 0);
        LayerParams::new_dense(4, 3, &mut rng)
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut l = layer(1);
        let before = l.w.clone();
        let mut state = AdamState::new(AdamConfig::default(), &[&l]);
        for _ in 0..5 {
            state.step(&mut [&mut l]).unwrap();
        }
        assert_eq!(l.w, before);
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn first_step_magnitude_is_the_learning_rate() {
        let mut l = layer(2);
        let before = l.w.clone();
        l.gw.fill(0.5);
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(cfg, &[&l]);
        state.step(&mut [&mut l]).unwrap();
        // t=1: mhat = g, vhat = g^2, so the update is lr*g/(|g|+eps).
        for (after, orig) in l.w.data().iter().zip(before.data()) {
            let delta = orig - after;
            assert!((delta - cfg.learning_rate).abs() < 1e-10, "delta {delta}");
        }
        assert!(l.gw.data().iter().all(|&g| g == 0.0), "grads zeroed");
    }

    #[test]
    fn identical_runs_give_identical_parameters() {
        let run = || {
            let mut l = layer(3);
            let mut state = AdamState::new(AdamConfig::default(), &[&l]);
            for step in 0..20 {
                for (i, g) in l.gw.data_mut().iter_mut().enumerate() {
                    *g = ((step * 7 + i) % 13) as f64 * 0.01 - 0.06;
                }
                state.step(&mut [&mut l]).unwrap();
            }
            l.w
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut l = layer(4);
        l.gw.data_mut()[2] = f64::NAN;
        let mut state = AdamState::new(AdamConfig::default(), &[&l]);
        assert!(matches!(
            state.step(&mut [&mut l]),
            Err(Error::NonFinite { .. })
        ));
    }
}
