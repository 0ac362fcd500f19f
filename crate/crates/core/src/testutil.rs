use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Adds U(-scale, scale) noise to every parameter.
pub fn perturb(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let cur = store.get(id);
        let data = cur.data().iter().map(|v| v + rng.random_range(-scale..scale)).collect();
        let t = Tensor::from_vec(cur.shape().to_vec(), data).unwrap();
        store.set(id, t).unwrap();
    }
}

pub fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}
