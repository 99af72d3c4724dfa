//! Parallel gradient evaluation with serial-identical results. Batches are
//! split into the same fixed-size chunks the serial evaluator folds over;
//! workers reduce each chunk into its own fresh sink, and the chunk sums are
//! combined in chunk order. Addition order is therefore independent of
//! scheduling, making results bitwise equal to the serial path at any worker
//! count.

use anyhow::{Context, Result};
use poke_core::model::{LossWeights, ModelGrads, ModelParams};
use poke_core::sim::{ArenaParams, Interaction};
use poke_core::train::{chunk_grads, reduce_chunks, BatchEvaluator, GRAD_CHUNK};
use rayon::prelude::*;

pub struct ParallelEvaluator {
    pool: rayon::ThreadPool,
}

impl ParallelEvaluator {
    pub fn new(jobs: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .context("building worker pool")?;
        Ok(ParallelEvaluator { pool })
    }
}

impl BatchEvaluator for ParallelEvaluator {
    fn batch_grads(
        &self,
        batch: &[Interaction],
        params: &ModelParams,
        arena: &ArenaParams,
        weights: &LossWeights,
    ) -> poke_core::Result<(ModelGrads, f64)> {
        let chunks: poke_core::Result<Vec<_>> = self.pool.install(|| {
            batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| chunk_grads(chunk, params, arena, weights))
                .collect()
        });
        Ok(reduce_chunks(chunks?, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use poke_core::sim::generate_interactions;
    use poke_core::train::SerialEvaluator;

    #[test]
    fn parallel_matches_serial_bitwise() {
        let arena = ArenaParams::default();
        let batch = generate_interactions(50, 9, &arena).unwrap();
        let params = ModelParams::init(arena.arena_size, 9).unwrap();
        let weights = LossWeights::joint(0.1);

        let (sg, sl) = SerialEvaluator
            .batch_grads(&batch, &params, &arena, &weights)
            .unwrap();
        for jobs in [1, 2, 3] {
            let eval = ParallelEvaluator::new(jobs).unwrap();
            let (pg, pl) = eval.batch_grads(&batch, &params, &arena, &weights).unwrap();
            assert_eq!(pl.to_bits(), sl.to_bits(), "loss differs at jobs={jobs}");
            for (a, b) in pg.pairs().iter().zip(sg.pairs()) {
                assert_eq!(a.w.data(), b.w.data(), "weight grads differ at jobs={jobs}");
                assert_eq!(a.b.data(), b.b.data(), "bias grads differ at jobs={jobs}");
            }
        }
    }
}
