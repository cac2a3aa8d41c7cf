//! Power-grid failure cascade prediction.
//!
//! The crate bundles the whole pipeline:
//!
//! * [`grid`] and [`matpower`]: grid descriptions (native JSON and a MATPOWER
//!   case subset) and branch capacity defaults.
//! * [`powerflow`]: a DC power-flow solver for one island.
//! * [`cascade`]: the deterministic cascading-failure simulator (islanding,
//!   rebalancing, DC re-solve, overload tripping).
//! * [`pool`]: reproducible cascade datasets, splits and JSONL persistence.
//! * [`nn`]: a small dense-network kernel with hand-derived gradients and Adam.
//! * [`gnn`]: the flow-free edge-level graph neural network, its training loop
//!   and checkpoints.
//! * [`influence`]: a reconstructed pairwise influence-model baseline.
//! * [`metrics`]: graph-level and branch-level error metrics.
//!
//! Data-parallel loops (pool generation, per-chunk gradients, batched
//! inference) run on rayon when the `parallel` feature is enabled and fall back
//! to plain iterators otherwise. Results are identical either way.

pub mod cascade;
pub mod error;
pub mod gnn;
pub mod grid;
pub mod influence;
mod linalg;
pub mod matpower;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pool;
pub mod powerflow;

pub use cascade::{simulate_cascade, CascadeResult, SimOptions, SlackPolicy};
pub use error::{Error, Result};
pub use grid::{Branch, Bus, Grid};
pub use pool::{CascadeSample, DataPool};
pub use powerflow::{solve_dc, ActiveSet, FlowSolution};
