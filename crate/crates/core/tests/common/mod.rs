#![allow(dead_code)]

use graft::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Adds uniform noise to every parameter so that zero-initialised biases
/// and embeddings take part in comparisons. Norm gains stay near one.
pub fn randomize(store: &mut graft::ParamStore<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let current = store.get(id).clone();
        let noise = uniform(&mut r, current.shape(), scale);
        let data = current.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        store.set(id, Tensor::from_vec(current.shape().to_vec(), data).unwrap()).unwrap();
    }
}
