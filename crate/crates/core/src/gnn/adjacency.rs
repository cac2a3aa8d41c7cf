use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::powerflow::ActiveSet;

/// Which branches count as neighbors of a directed branch `(u, v)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborRule {
    /// Branches leaving `u` or entering `v`.
    #[default]
    Literal,
    /// Branches sharing any endpoint with `(u, v)`.
    Undirected,
}

/// Edge-to-edge adjacency over the full branch set.
///
/// Every branch is its own neighbor. The edge-to-edge attention vector is laid
/// out flat: branch `e` owns the slots `offset(e) .. offset(e) + degree(e) - 1`,
/// one per neighbor other than itself, in neighbor order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeAdjacency {
    rule: NeighborRule,
    neighbors: Vec<Vec<usize>>,
    ends: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    coeff_len: usize,
}

impl EdgeAdjacency {
    pub fn rule(&self) -> NeighborRule {
        self.rule
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.len()
    }

    /// Neighbors of `e` including `e`, ascending by index.
    pub fn neighbors(&self, e: usize) -> &[usize] {
        &self.neighbors[e]
    }

    /// Dense (source, destination) bus positions of `e`.
    pub fn ends(&self, e: usize) -> (usize, usize) {
        self.ends[e]
    }

    pub fn degree(&self, e: usize) -> usize {
        self.neighbors[e].len()
    }

    /// Neighbors other than `e` paired with their attention slot.
    pub fn others(&self, e: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors[e]
            .iter()
            .copied()
            .filter(move |&d| d != e)
            .enumerate()
            .map(move |(j, d)| (d, self.offsets[e] + j))
    }

    pub fn offset(&self, e: usize) -> usize {
        self.offsets[e]
    }

    /// Total number of edge-to-edge attention coefficients.
    pub fn coeff_len(&self) -> usize {
        self.coeff_len
    }

    /// Number of neighbors of `e` that are active, `e` included.
    pub fn active_degree(&self, e: usize, active: &ActiveSet) -> usize {
        self.neighbors[e].iter().filter(|&&d| active.is_active(d)).count()
    }
}

pub fn build_adjacency(grid: &Grid, rule: NeighborRule) -> EdgeAdjacency {
    let ne = grid.num_branches();
    let ends: Vec<(usize, usize)> = (0..ne).map(|e| grid.branch_ends(e)).collect();
    let neighbors: Vec<Vec<usize>> = ends
        .iter()
        .map(|&(u, v)| {
            (0..ne)
                .filter(|&d| {
                    let (x, y) = ends[d];
                    match rule {
                        NeighborRule::Literal => x == u || y == v,
                        NeighborRule::Undirected => x == u || x == v || y == u || y == v,
                    }
                })
                .collect()
        })
        .collect();
    let mut offsets = Vec::with_capacity(ne);
    let mut acc = 0;
    for n in &neighbors {
        offsets.push(acc);
        acc += n.len() - 1;
    }
    EdgeAdjacency {
        rule,
        neighbors,
        ends,
        offsets,
        coeff_len: acc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::fixtures::tri3;
    use crate::grid::{Branch, Bus};

    #[test]
    fn tri3_literal_neighbors() {
        let adj = build_adjacency(&tri3([1.0; 3]), NeighborRule::Literal);
        assert_eq!(adj.neighbors(0), &[0, 1]);
        assert_eq!(adj.neighbors(1), &[0, 1, 2]);
        assert_eq!(adj.neighbors(2), &[1, 2]);
        assert_eq!(adj.coeff_len(), 1 + 2 + 1);
        let slots: Vec<_> = adj.others(1).collect();
        assert_eq!(slots, vec![(0, 1), (2, 2)]);
    }

    #[test]
    fn tri3_undirected_neighbors() {
        let adj = build_adjacency(&tri3([1.0; 3]), NeighborRule::Undirected);
        for e in 0..3 {
            assert_eq!(adj.neighbors(e), &[0, 1, 2]);
        }
    }

    #[test]
    fn single_edge_grid() {
        let buses = vec![
            Bus { id: 1, injection_default: 1.0, is_generator: true },
            Bus { id: 2, injection_default: -1.0, is_generator: false },
        ];
        let branches = vec![Branch { index: 0, from_bus: 1, to_bus: 2, reactance: 1.0, capacity: 1.0 }];
        let grid = Grid::new("two", 1.0, buses, branches).unwrap();
        let adj = build_adjacency(&grid, NeighborRule::Literal);
        assert_eq!(adj.neighbors(0), &[0]);
        assert_eq!(adj.coeff_len(), 0);
    }
}
