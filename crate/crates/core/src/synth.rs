//! Random instance generators for property tests and benchmarks.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::mem::Lifetime;

/// Between 1 and `max_tensors` lifetimes over at most 12 steps, sizes in
/// multiples of 16 up to 1 KiB.
pub fn random_lifetimes<R: Rng>(rng: &mut R, max_tensors: usize) -> Vec<Lifetime> {
    let n = rng.gen_range(1..=max_tensors.max(1));
    let steps = rng.gen_range(1..=12usize);
    (0..n)
        .map(|i| {
            let birth = rng.gen_range(0..steps);
            let span = rng.gen_range(0..=(steps - birth).min(5) - 1);
            let size = 16 * rng.gen_range(1..=64u64);
            Lifetime::new(format!("t{i}"), size, birth, birth + span)
        })
        .collect()
}

/// Lifetimes whose live-size profile rises to one peak and then falls.
pub fn random_unimodal_lifetimes<R: Rng>(rng: &mut R, max_tensors: usize) -> Vec<Lifetime> {
    loop {
        let l = random_lifetimes(rng, max_tensors);
        if crate::mem::is_unimodal(&l) {
            return l;
        }
    }
}

pub fn shuffled<T: Clone, R: Rng>(rng: &mut R, items: &[T]) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v
}
