//! Deterministic cascading-failure simulation.
//!
//! Each round restricts the grid to its active branches, splits it into
//! islands, balances and solves every island, and trips all branches whose
//! flow magnitude strictly exceeds capacity. The run stops at the first round
//! that trips nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::powerflow::{solve_dc, ActiveSet};

/// Relative tolerance under which an island already counts as balanced.
const BALANCE_TOL: f64 = 1e-12;

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Connected components of the active-branch graph, as dense bus positions.
///
/// Members are sorted by bus id and islands by their smallest bus id.
pub fn find_islands(grid: &Grid, active: &ActiveSet) -> Vec<Vec<usize>> {
    let n = grid.num_buses();
    let mut dsu = DisjointSet::new(n);
    for e in 0..grid.num_branches() {
        if active.is_active(e) {
            let (u, v) = grid.branch_ends(e);
            dsu.union(u, v);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&m| grid.buses()[m].id);
    let mut slot = vec![usize::MAX; n];
    let mut islands: Vec<Vec<usize>> = Vec::new();
    for m in order {
        let root = dsu.find(m);
        if slot[root] == usize::MAX {
            slot[root] = islands.len();
            islands.push(Vec::new());
        }
        islands[slot[root]].push(m);
    }
    islands
}

/// Balances an island by proportional scaling.
///
/// A generation surplus scales every positive injection down; a deficit
/// scales every negative injection down. An island that cannot be balanced
/// that way (no load, or no generation) is blacked out.
pub fn rebalance_island(members: &[usize], injections: &[f64]) -> Vec<f64> {
    let mut out = injections.to_vec();
    rebalance_in_place(members, &mut out);
    out
}

pub(crate) fn rebalance_in_place(members: &[usize], p: &mut [f64]) {
    let (mut pos, mut neg, mut scale) = (0.0, 0.0, 0.0_f64);
    for &m in members {
        let x = p[m];
        if x > 0.0 {
            pos += x;
        } else {
            neg += x;
        }
        scale = scale.max(x.abs());
    }
    let net = pos + neg;
    if net.abs() <= BALANCE_TOL * scale {
        return;
    }
    let factor = if net > 0.0 {
        (pos - net) / pos
    } else {
        (neg - net) / neg
    };
    if !(factor > 0.0) {
        for &m in members {
            p[m] = 0.0;
        }
        return;
    }
    for &m in members {
        if (net > 0.0 && p[m] > 0.0) || (net < 0.0 && p[m] < 0.0) {
            p[m] *= factor;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlackPolicy {
    /// Bus with the largest positive injection; ties go to the smallest id.
    #[default]
    LargestInjection,
    /// Bus with the smallest id.
    LowestId,
}

impl SlackPolicy {
    pub fn pick(self, grid: &Grid, members: &[usize], injections: &[f64]) -> usize {
        let id = |m: usize| grid.buses()[m].id;
        let lowest = *members.iter().min_by_key(|&&m| id(m)).expect("island has members");
        match self {
            SlackPolicy::LowestId => lowest,
            SlackPolicy::LargestInjection => members
                .iter()
                .copied()
                .filter(|&m| injections[m] > 0.0)
                .max_by(|&a, &b| {
                    injections[a]
                        .total_cmp(&injections[b])
                        .then_with(|| id(b).cmp(&id(a)))
                })
                .unwrap_or(lowest),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    pub slack_policy: SlackPolicy,
    pub keep_states: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeResult {
    /// Number of steps each branch stayed active; equals `length` for
    /// branches that never fail.
    #[serde(rename = "f")]
    pub failure_step: Vec<u32>,
    /// Number of distinct network states.
    #[serde(rename = "T")]
    pub length: u32,
    #[serde(skip)]
    pub states: Option<Vec<ActiveSet>>,
}

/// Runs the cascade from contingency `s0` at the given per-bus injections.
pub fn simulate_cascade(
    grid: &Grid,
    s0: &ActiveSet,
    injections: &[f64],
    options: SimOptions,
) -> Result<CascadeResult> {
    let ne = grid.num_branches();
    if s0.len() != ne {
        return Err(Error::Shape(format!("contingency has {} entries for {ne} branches", s0.len())));
    }
    if injections.len() != grid.num_buses() {
        return Err(Error::Shape(format!(
            "{} injections for {} buses",
            injections.len(),
            grid.num_buses()
        )));
    }
    if let Some(b) = grid.branches().iter().find(|b| !b.has_capacity()) {
        return Err(Error::InvalidGrid(format!("branch {} has no capacity set", b.index)));
    }

    let mut current = s0.clone();
    let mut failure_step = vec![0u32; ne];
    let mut states = options.keep_states.then(Vec::new);
    let mut p = vec![0.0; grid.num_buses()];
    let mut length = 0u32;
    loop {
        length += 1;
        assert!(
            length as usize <= ne + 1,
            "cascade exceeded {} states without converging",
            ne + 1
        );
        for (e, f) in failure_step.iter_mut().enumerate() {
            if current.is_active(e) {
                *f += 1;
            }
        }
        let next = next_state(grid, &current, injections, options.slack_policy, &mut p)?;
        if let Some(states) = states.as_mut() {
            states.push(current.clone());
        }
        if next == current {
            break;
        }
        current = next;
    }
    Ok(CascadeResult {
        failure_step,
        length,
        states,
    })
}

fn next_state(
    grid: &Grid,
    current: &ActiveSet,
    injections: &[f64],
    slack_policy: SlackPolicy,
    p: &mut [f64],
) -> Result<ActiveSet> {
    p.copy_from_slice(injections);
    let mut next = current.clone();
    for island in find_islands(grid, current) {
        if island.len() == 1 {
            continue;
        }
        rebalance_in_place(&island, p);
        if island.iter().all(|&m| p[m] == 0.0) {
            continue;
        }
        let slack = slack_policy.pick(grid, &island, p);
        let sol = solve_dc(grid, current, p, slack, &island)?;
        for e in 0..grid.num_branches() {
            if sol.solved_set.is_active(e) && sol.flow[e].abs() > grid.branches()[e].capacity {
                next.set(e, false);
            }
        }
    }
    Ok(next)
}

/// Expands failure steps into the per-step network states `s[0..length]`.
pub fn states_from_steps(failure_step: &[u32], length: u32) -> Result<Vec<ActiveSet>> {
    if let Some((e, &f)) = failure_step.iter().enumerate().find(|(_, &f)| f > length) {
        return Err(Error::InvalidArgument(format!(
            "failure step {f} of branch {e} exceeds cascade length {length}"
        )));
    }
    Ok((0..length)
        .map(|t| ActiveSet::from_mask(failure_step.iter().map(|&f| t < f).collect()))
        .collect())
}
