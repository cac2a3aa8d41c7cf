//! Flow-free edge-level graph neural network.
//!
//! Stages, per sample:
//!
//! 1. every bus injection goes through `h_initial` (shared across buses);
//! 2. each active branch `(u, v)` starts from the difference of its endpoint
//!    features;
//! 3. two attention networks read the contingency vector and emit one
//!    coefficient per ordered neighbor pair and two per branch (one per
//!    endpoint);
//! 4. `K` averaging steps mix neighbor features (weighted by the edge-to-edge
//!    coefficients and `1/sqrt(deg(e) deg(d))`) and endpoint features
//!    (weighted by the node-to-edge coefficients);
//! 5. `h_final` maps each branch feature to `T + 1` logits, where class `t < T`
//!    means "fails at step t" and class `T` means "survives".

mod adjacency;
mod checkpoint;
mod model;
mod train;

pub use adjacency::{build_adjacency, EdgeAdjacency, NeighborRule};
pub use checkpoint::GNN_SCHEMA;
pub use model::{
    class_target, forward_gnn, loss_batch, loss_batch_with, predict_batch, predict_batch_with,
    predict_failure_steps, ForwardTrace, SampleRef,
};
pub use train::{train, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{Activation, DenseNet};

/// How `|N_e|` is counted in the averaging step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegreeCount {
    /// Over the full branch set, independent of the contingency.
    #[default]
    Full,
    /// Over the branches still active after the contingency.
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    /// Hidden feature width `L`.
    pub hidden: usize,
    /// Number of averaging steps `K`.
    pub steps: usize,
    /// Cascade horizon `T`; the model emits `T + 1` classes.
    pub horizon: u32,
    pub neighbor_rule: NeighborRule,
    pub degree_count: DegreeCount,
    /// Multiplier applied to MW injections before `h_initial`.
    pub input_scale: f64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            hidden: 32,
            steps: 10,
            horizon: 1,
            neighbor_rule: NeighborRule::Literal,
            degree_count: DegreeCount::Full,
            input_scale: 1.0,
        }
    }
}

impl GnnConfig {
    pub fn classes(&self) -> usize {
        self.horizon as usize + 1
    }
}

/// Trainable weights for one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub grid_id: String,
    pub config: GnnConfig,
    pub num_buses: usize,
    pub num_edges: usize,
    pub h_initial: DenseNet,
    pub attn_edge_edge: DenseNet,
    pub attn_node_edge: DenseNet,
    pub h_edge_edge: Vec<DenseNet>,
    pub h_node_edge: Vec<DenseNet>,
    pub h_final: DenseNet,
}

impl GnnParams {
    pub fn new(grid: &Grid, adj: &EdgeAdjacency, config: GnnConfig, seed: u64) -> Result<Self> {
        if config.steps == 0 || config.horizon == 0 || config.hidden == 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden width, averaging steps and horizon must be positive (L={}, K={}, T={})",
                config.hidden, config.steps, config.horizon
            )));
        }
        if !(config.input_scale.is_finite() && config.input_scale > 0.0) {
            return Err(Error::InvalidArgument(format!("input scale {} must be positive", config.input_scale)));
        }
        if adj.num_edges() != grid.num_branches() {
            return Err(Error::Shape("adjacency was built for another grid".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = config.hidden;
        let ne = grid.num_branches();
        let relu = Activation::Relu;
        let h_initial = DenseNet::new(&[1, l, l], relu, &mut rng);
        let attn_edge_edge = DenseNet::new(&[ne, 2 * ne, adj.coeff_len()], relu, &mut rng);
        let attn_node_edge = DenseNet::new(&[ne, 2 * ne, 2 * ne], relu, &mut rng);
        let mut h_edge_edge = Vec::with_capacity(config.steps);
        let mut h_node_edge = Vec::with_capacity(config.steps);
        for _ in 0..config.steps {
            h_edge_edge.push(DenseNet::new(&[l, l, l], relu, &mut rng));
            h_node_edge.push(DenseNet::new(&[l, l, l], relu, &mut rng));
        }
        let h_final = DenseNet::new(&[l, l, config.classes()], relu, &mut rng);
        Ok(GnnParams {
            grid_id: grid.id().to_string(),
            config,
            num_buses: grid.num_buses(),
            num_edges: ne,
            h_initial,
            attn_edge_edge,
            attn_node_edge,
            h_edge_edge,
            h_node_edge,
            h_final,
        })
    }

    pub fn zeros_like(&self) -> Self {
        GnnParams {
            grid_id: self.grid_id.clone(),
            config: self.config,
            num_buses: self.num_buses,
            num_edges: self.num_edges,
            h_initial: self.h_initial.zeros_like(),
            attn_edge_edge: self.attn_edge_edge.zeros_like(),
            attn_node_edge: self.attn_node_edge.zeros_like(),
            h_edge_edge: self.h_edge_edge.iter().map(DenseNet::zeros_like).collect(),
            h_node_edge: self.h_node_edge.iter().map(DenseNet::zeros_like).collect(),
            h_final: self.h_final.zeros_like(),
        }
    }

    /// Networks in checkpoint order with their names.
    pub fn nets(&self) -> Vec<(String, &DenseNet)> {
        let mut out = vec![
            ("h_initial".to_string(), &self.h_initial),
            ("attn_edge_edge".to_string(), &self.attn_edge_edge),
            ("attn_node_edge".to_string(), &self.attn_node_edge),
        ];
        for (k, (ee, ne)) in self.h_edge_edge.iter().zip(&self.h_node_edge).enumerate() {
            out.push((format!("h_edge_edge.{}", k + 1), ee));
            out.push((format!("h_node_edge.{}", k + 1), ne));
        }
        out.push(("h_final".to_string(), &self.h_final));
        out
    }

    fn nets_mut(&mut self) -> Vec<&mut DenseNet> {
        let mut out = vec![&mut self.h_initial, &mut self.attn_edge_edge, &mut self.attn_node_edge];
        for (ee, ne) in self.h_edge_edge.iter_mut().zip(self.h_node_edge.iter_mut()) {
            out.push(ee);
            out.push(ne);
        }
        out.push(&mut self.h_final);
        out
    }

    /// Every weight and bias tensor, named `<net>.<layer>.weight|bias`.
    pub fn named_tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (name, net) in self.nets() {
            for (i, layer) in net.layers().iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), &layer.weight));
                out.push((format!("{name}.{i}.bias"), &layer.bias));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        self.nets().into_iter().flat_map(|(_, n)| n.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.nets_mut().into_iter().flat_map(DenseNet::tensors_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in tensor order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        let mut k = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[k..k + n]);
            k += n;
        }
        Ok(())
    }

    pub fn accumulate(&mut self, other: &GnnParams) {
        for (a, b) in self.nets_mut().into_iter().zip(other.nets()) {
            a.accumulate(b.1);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Checks that these weights fit `grid` and `adj`.
    pub fn check_compatible(&self, grid: &Grid, adj: &EdgeAdjacency) -> Result<()> {
        if self.grid_id != grid.id() {
            return Err(Error::GridMismatch {
                expected: grid.id().to_string(),
                found: self.grid_id.clone(),
            });
        }
        self.check_adjacency(adj)?;
        if self.num_buses != grid.num_buses() {
            return Err(Error::Shape(format!(
                "model has {} buses, grid has {}",
                self.num_buses,
                grid.num_buses()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_adjacency(&self, adj: &EdgeAdjacency) -> Result<()> {
        if adj.num_edges() != self.num_edges
            || adj.coeff_len() != self.attn_edge_edge.output_width()
            || adj.rule() != self.config.neighbor_rule
        {
            return Err(Error::Shape(format!(
                "adjacency ({} edges, {} coefficients, {:?}) does not match the model ({} edges, {} coefficients, {:?})",
                adj.num_edges(),
                adj.coeff_len(),
                adj.rule(),
                self.num_edges,
                self.attn_edge_edge.output_width(),
                self.config.neighbor_rule
            )));
        }
        Ok(())
    }
}
