use graft::{ParamStore, Real, Tensor};

use crate::config::{OptimConfig, OptimKind};

/// AdamW with decoupled weight decay, or SGD with L2 decay. Decay applies
/// only to tensors of rank two or more; biases and norm affine terms are
/// left alone.
pub struct Optimizer<T> {
    cfg: OptimConfig,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    decay: Vec<bool>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: &OptimConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect::<Vec<_>>();
        let (m, v) = match cfg.kind {
            OptimKind::AdamW => (zeros(), zeros()),
            OptimKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self { cfg: cfg.clone(), t: 0, m, v, decay: store.ids().map(|id| store.get(id).rank() >= 2).collect() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Applies one update; `grads` are in store order.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.t += 1;
        let lr = T::lit(self.cfg.lr);
        let wd = T::lit(self.cfg.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        match self.cfg.kind {
            OptimKind::Sgd => {
                for (k, id) in ids.into_iter().enumerate() {
                    let decay = if self.decay[k] { wd } else { T::zero() };
                    let p = store.get_mut(id).data_mut();
                    for (w, &g) in p.iter_mut().zip(grads[k].data()) {
                        *w -= lr * (g + decay * *w);
                    }
                }
            }
            OptimKind::AdamW => {
                let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
                let eps = T::lit(self.cfg.eps);
                let c1 = T::one() - b1.powi(self.t);
                let c2 = T::one() - b2.powi(self.t);
                for (k, id) in ids.into_iter().enumerate() {
                    let decay = if self.decay[k] { wd } else { T::zero() };
                    let p = store.get_mut(id).data_mut();
                    let m = self.m[k].data_mut();
                    let v = self.v[k].data_mut();
                    for (((w, &g), mi), vi) in p.iter_mut().zip(grads[k].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                        *w -= lr * (update + decay * *w);
                    }
                }
            }
        }
    }
}
