//! Minimal layer library with hand-written backward passes.
//!
//! Every layer has two forward paths: [`Layer::infer`] takes `&self` and keeps
//! no state, so frozen networks can be shared across threads; [`Layer::forward`]
//! caches whatever [`Layer::backward`] needs. Parameter gradients accumulate
//! until [`zero_grads`] is called. All normalization is per sample, so running
//! several sub-batches through one concatenated forward is exact.

mod layers;
mod optim;
mod resblock;

pub use layers::{
    Act, ActLayer, BatchNorm, Conv2d, GlobalAvgPool, GroupNorm, Linear, MinibatchStd, Reshape, Upsample2x,
};
pub use optim::{Adam, Sgd};
pub use resblock::ResBlock;

use crate::tensor::Tensor;

/// A trainable buffer and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Layers skip gradient accumulation for parameters that are not trainable.
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub trait Layer: Send + Sync {
    fn infer(&self, x: &Tensor) -> Tensor;
    fn forward(&mut self, x: &Tensor) -> Tensor;
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
}

/// Anything that owns parameters in a stable order.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn checksum(&self) -> String {
        crate::tensor::checksum(self.params().into_iter().map(|p| p.value.as_slice()))
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.trainable = trainable;
        }
    }

    fn flat_weights(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in self.params() {
            out.extend_from_slice(&p.value);
        }
        out
    }

    /// Overwrites parameters from a flat buffer; returns `false` on size mismatch.
    fn load_flat_weights(&mut self, flat: &[f32]) -> bool {
        if flat.len() != self.num_params() {
            return false;
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        true
    }
}

pub fn zero_grads<M: Module + ?Sized>(m: &mut M) {
    for p in m.params_mut() {
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, layer: impl Layer + 'static) -> Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h);
        }
        h
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Finite-difference checks for layers, run in `f32` with loose tolerances.
    use super::*;

    /// Loss used for checks: `sum(y * r)` for a fixed random `r`.
    pub fn check_layer(layer: &mut dyn Layer, x: &Tensor, tol: f32) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let y = layer.forward(x);
        let r = Tensor::randn(y.shape(), 1.0, &mut rng);
        let loss = |l: &dyn Layer, x: &Tensor| -> f64 {
            let y = l.infer(x);
            y.data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        for p in layer.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        let dx = layer.backward(&r);
        let h = 1e-2f32;
        // input gradient
        for i in (0..x.len()).step_by((x.len() / 17).max(1)) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(layer, &xp) - loss(layer, &xm)) / (2.0 * h as f64);
            let ana = dx.data()[i] as f64;
            assert!(
                (num - ana).abs() <= tol as f64 * (1.0 + num.abs().max(ana.abs())),
                "input grad {i}: numeric {num} analytic {ana}"
            );
        }
        // parameter gradients
        let n_params = layer.params().len();
        for pi in 0..n_params {
            let len = layer.params()[pi].len();
            for j in (0..len).step_by((len / 7).max(1)) {
                let ana = layer.params()[pi].grad[j] as f64;
                layer.params_mut()[pi].value[j] += h;
                let lp = loss(layer, x);
                layer.params_mut()[pi].value[j] -= 2.0 * h;
                let lm = loss(layer, x);
                layer.params_mut()[pi].value[j] += h;
                let num = (lp - lm) / (2.0 * h as f64);
                assert!(
                    (num - ana).abs() <= tol as f64 * (1.0 + num.abs().max(ana.abs())),
                    "param {pi}[{j}]: numeric {num} analytic {ana}"
                );
            }
        }
    }
}
