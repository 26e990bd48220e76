//! Seeded fixtures shared by the benchmarks.

use nabla_core::{AttentionInputs, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0)).expect("valid shape")
}

pub fn random_inputs(seed: u64, heads: usize, seq: usize, dim: usize) -> AttentionInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [heads, seq, dim];
    let q = random_tensor(&mut rng, &shape);
    let k = random_tensor(&mut rng, &shape);
    let v = random_tensor(&mut rng, &shape);
    AttentionInputs::new(q, k, v).expect("consistent shapes")
}
