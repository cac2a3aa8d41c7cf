use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState};
use crate::par::Execution;
use crate::pool::DataPool;

use super::model::loss_batch_with;
use super::{EdgeAdjacency, GnnParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Minibatch Adam over shuffled epochs.
///
/// The result depends only on the initial weights, the pool and the config;
/// gradient chunks are summed in a fixed order whatever the worker count.
pub fn train(
    params: &mut GnnParams,
    adj: &EdgeAdjacency,
    pool: &DataPool,
    config: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if pool.is_empty() {
        return Err(Error::Empty("pool"));
    }
    if pool.grid_id != params.grid_id {
        return Err(Error::GridMismatch {
            expected: params.grid_id.clone(),
            found: pool.grid_id.clone(),
        });
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    params.check_adjacency(adj)?;
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(
        shapes,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<_> = idx.iter().map(|&i| &pool.samples[i]).collect();
            let (loss, grads) = loss_batch_with(params, adj, &batch, exec)?;
            let grad_tensors = grads.tensors();
            adam.step(&mut params.tensors_mut(), &grad_tensors).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        on_epoch(epoch, mean);
        report.loss_curve.push(mean);
    }
    Ok(report)
}
