//! Example access: draws (X, F(X)) pairs with X uniform on the cube.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::attention::{forward_matrix, AttentionLayer};
use crate::boolean_model::{sample_uniform, BooleanSequence};
use crate::rng::{Rng, SeedTree};

/// One labelled example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: BooleanSequence,
    pub y: DMatrix<f64>,
}

/// Source of labelled examples. Implementations count every draw.
pub trait ExampleOracle: Sync {
    fn k(&self) -> usize;
    fn d(&self) -> usize;
    fn draw(&self, rng: &mut Rng) -> Example;
    /// Total draws served so far.
    fn draws(&self) -> u64;
}

/// Oracle backed by a ground-truth layer.
#[derive(Debug)]
pub struct LayerOracle {
    layer: AttentionLayer,
    k: usize,
    counter: AtomicU64,
}

impl LayerOracle {
    pub fn new(layer: AttentionLayer, k: usize) -> Self {
        Self { layer, k, counter: AtomicU64::new(0) }
    }

    pub fn layer(&self) -> &AttentionLayer {
        &self.layer
    }

    /// Labels a given sequence without counting it as a draw.
    pub fn label(&self, x: &BooleanSequence) -> DMatrix<f64> {
        forward_matrix(&self.layer, x.matrix())
    }
}

impl ExampleOracle for LayerOracle {
    fn k(&self) -> usize {
        self.k
    }

    fn d(&self) -> usize {
        self.layer.d()
    }

    fn draw(&self, rng: &mut Rng) -> Example {
        self.counter.fetch_add(1, Ordering::Relaxed);
        let x = sample_uniform(self.k, self.layer.d(), rng);
        let y = forward_matrix(&self.layer, x.matrix());
        Example { x, y }
    }

    fn draws(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }
}

/// Default number of examples handled by one worker stream.
pub const BLOCK: usize = 4096;

/// Runs `f` over `n` items split into fixed blocks, each with its own stream
/// `(name, block index)`. Results come back in block order, so the outcome does
/// not depend on the number of threads.
pub fn map_blocks<T, F>(seeds: &SeedTree, name: &str, n: usize, block: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut Rng, usize) -> T + Sync,
{
    let block = block.max(1);
    let nblocks = n.div_ceil(block);
    (0..nblocks)
        .into_par_iter()
        .map(|b| {
            let len = block.min(n - b * block);
            let mut rng = seeds.substream(name, b as u64);
            f(&mut rng, len)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::generate_instance;
    use crate::rng::seeded;

    #[test]
    fn counts_draws() {
        let o = LayerOracle::new(generate_instance(1, 4, 1.0, &mut seeded(0)), 3);
        let mut rng = seeded(1);
        for _ in 0..5 {
            o.draw(&mut rng);
        }
        assert_eq!(o.draws(), 5);
    }

    #[test]
    fn blocks_are_ordered_and_sized() {
        let t = SeedTree::new(3);
        let sizes = map_blocks(&t, "x", 10, 4, |_, len| len);
        assert_eq!(sizes, vec![4, 4, 2]);
        let a = map_blocks(&t, "x", 10, 4, |rng, _| rand::Rng::random::<u32>(rng));
        let b = map_blocks(&t, "x", 10, 4, |rng, _| rand::Rng::random::<u32>(rng));
        assert_eq!(a, b);
    }
}
