//! Input builders shared by the criterion benchmarks.

use memapo_core::index::{Embedding, VectorIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vector(rng: &mut impl Rng, dim: usize) -> Embedding {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    v[0] += 2.0;
    Embedding::new(v).expect("finite, non-empty")
}

/// `n` random vectors of `dim` under ids `t-1..t-n`, plus one query.
pub fn random_index(n: usize, dim: usize, seed: u64) -> (VectorIndex, Embedding) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut index = VectorIndex::new();
    for i in 1..=n {
        index
            .upsert(format!("t-{i}"), random_vector(&mut rng, dim))
            .expect("uniform dimension");
    }
    let q = random_vector(&mut rng, dim);
    (index, q)
}
