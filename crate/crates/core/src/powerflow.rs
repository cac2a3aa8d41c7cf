//! DC power flow on one island.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::{cholesky, cholesky_solve};

/// Relative tolerance shared by the balance checks.
pub const DEFAULT_REL_TOL: f64 = 1e-9;

/// Relative pivot below which the reduced nodal matrix is declared singular.
const PIVOT_TOL: f64 = 1e-13;

/// Operational state per branch: `true` = in service.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActiveSet(Vec<bool>);

impl ActiveSet {
    pub fn all(n: usize) -> Self {
        ActiveSet(vec![true; n])
    }

    pub fn none(n: usize) -> Self {
        ActiveSet(vec![false; n])
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        ActiveSet(mask)
    }

    /// All branches active except the listed ones.
    pub fn without(n: usize, failed: &[usize]) -> Result<Self> {
        let mut mask = vec![true; n];
        for &e in failed {
            if e >= n {
                return Err(Error::InvalidArgument(format!("branch index {e} out of range (0..{n})")));
            }
            mask[e] = false;
        }
        Ok(ActiveSet(mask))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, e: usize) -> bool {
        self.0[e]
    }

    pub fn set(&mut self, e: usize, active: bool) {
        self.0[e] = active;
    }

    pub fn mask(&self) -> &[bool] {
        &self.0
    }

    pub fn count_active(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }

    pub fn inactive(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &a)| !a).map(|(e, _)| e)
    }

    /// True if every branch active here is also active in `other`.
    pub fn is_subset_of(&self, other: &ActiveSet) -> bool {
        self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSolution {
    /// Bus voltage angles in radians; zero outside the solved island.
    pub theta: Vec<f64>,
    /// Branch flows in MW, positive from source to destination bus.
    pub flow: Vec<f64>,
    /// Branches that were energized inside the island.
    pub solved_set: ActiveSet,
}

/// Solves the DC power flow of one island.
///
/// `members` are dense bus positions forming one connected component of the
/// active-branch graph, `slack` is one of them and `injections` holds MW per
/// bus for the whole grid (entries outside `members` are ignored). The
/// member injections must already sum to zero.
pub fn solve_dc(
    grid: &Grid,
    active: &ActiveSet,
    injections: &[f64],
    slack: usize,
    members: &[usize],
) -> Result<FlowSolution> {
    let nb = grid.num_buses();
    let ne = grid.num_branches();
    if active.len() != ne || injections.len() != nb {
        return Err(Error::Shape(format!(
            "active set {} / injections {} for a grid with {ne} branches and {nb} buses",
            active.len(),
            injections.len()
        )));
    }
    let mut local = vec![usize::MAX; nb];
    for (i, &m) in members.iter().enumerate() {
        local[m] = i;
    }
    if local[slack] == usize::MAX {
        return Err(Error::InvalidArgument("slack bus is not an island member".into()));
    }
    let scale = members
        .iter()
        .map(|&m| injections[m].abs())
        .fold(1.0_f64, f64::max);
    let net: f64 = members.iter().map(|&m| injections[m]).sum();
    if net.abs() > DEFAULT_REL_TOL * scale {
        return Err(Error::Unbalanced { net });
    }

    let mut theta = vec![0.0; nb];
    let mut flow = vec![0.0; ne];
    let mut solved = ActiveSet::none(ne);

    // Reduced index: members without the slack.
    let slack_local = local[slack];
    let reduced = |m: usize| -> Option<usize> {
        let l = local[m];
        if l == usize::MAX || l == slack_local {
            None
        } else if l > slack_local {
            Some(l - 1)
        } else {
            Some(l)
        }
    };
    let n = members.len() - 1;
    let mut island_branches = Vec::new();
    for e in 0..ne {
        if !active.is_active(e) {
            continue;
        }
        let (u, v) = grid.branch_ends(e);
        match (local[u] != usize::MAX, local[v] != usize::MAX) {
            (true, true) => island_branches.push(e),
            (false, false) => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "active branch {e} leaves the island"
                )))
            }
        }
    }
    if n > 0 {
        let mut b = vec![0.0; n * n];
        for &e in &island_branches {
            let (u, v) = grid.branch_ends(e);
            let y = 1.0 / grid.branches()[e].reactance;
            let (ru, rv) = (reduced(u), reduced(v));
            if let Some(i) = ru {
                b[i * n + i] += y;
            }
            if let Some(j) = rv {
                b[j * n + j] += y;
            }
            if let (Some(i), Some(j)) = (ru, rv) {
                b[i * n + j] -= y;
                b[j * n + i] -= y;
            }
        }
        cholesky(&mut b, n, PIVOT_TOL)
            .ok_or_else(|| Error::Singular(format!("island of {} buses", members.len())))?;
        let base = grid.base_mva();
        let mut rhs = vec![0.0; n];
        for &m in members {
            if let Some(i) = reduced(m) {
                rhs[i] = injections[m] / base;
            }
        }
        cholesky_solve(&b, n, &mut rhs);
        for &m in members {
            if let Some(i) = reduced(m) {
                theta[m] = rhs[i];
            }
        }
        for &e in &island_branches {
            let (u, v) = grid.branch_ends(e);
            flow[e] = base * (theta[u] - theta[v]) / grid.branches()[e].reactance;
        }
    }
    for &e in &island_branches {
        solved.set(e, true);
    }
    Ok(FlowSolution {
        theta,
        flow,
        solved_set: solved,
    })
}

/// Net outflow minus injection at each bus; zero for a correct solution.
pub fn balance_residuals(grid: &Grid, sol: &FlowSolution, injections: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.num_buses()];
    for (e, &g) in sol.flow.iter().enumerate() {
        let (u, v) = grid.branch_ends(e);
        out[u] += g;
        out[v] -= g;
    }
    for (m, r) in out.iter_mut().enumerate() {
        *r -= injections[m];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::fixtures::tri3;
    use approx::assert_abs_diff_eq;

    fn flows(grid: &Grid, active: &ActiveSet, p: &[f64]) -> Vec<f64> {
        let members: Vec<usize> = (0..grid.num_buses()).collect();
        solve_dc(grid, active, p, 0, &members).unwrap().flow
    }

    #[test]
    fn tri3_symmetric_flows() {
        let grid = tri3([1.0; 3]);
        let f = flows(&grid, &ActiveSet::all(3), &[1.0, -0.5, -0.5]);
        assert_abs_diff_eq!(f[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f[1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn tri3_chain_after_outage() {
        // 1 -> 3 -> 2 once (1,2) is out: 1.0 on (1,3), 0.5 from 3 to 2 on (2,3).
        let grid = tri3([1.0; 3]);
        let active = ActiveSet::without(3, &[0]).unwrap();
        let sol = solve_dc(&grid, &active, &[1.0, -0.5, -0.5], 0, &[0, 1, 2]).unwrap();
        assert_eq!(sol.flow[0], 0.0);
        assert_abs_diff_eq!(sol.flow[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.flow[2], -0.5, epsilon = 1e-12);
        assert!(!sol.solved_set.is_active(0));
        for r in balance_residuals(&grid, &sol, &[1.0, -0.5, -0.5]) {
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn single_bus_island_is_trivial() {
        let grid = tri3([1.0; 3]);
        let sol = solve_dc(&grid, &ActiveSet::none(3), &[0.0; 3], 1, &[1]).unwrap();
        assert!(sol.flow.iter().all(|&g| g == 0.0));
        assert!(sol.theta.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn rejects_unbalanced_island() {
        let grid = tri3([1.0; 3]);
        let err = solve_dc(&grid, &ActiveSet::all(3), &[1.0, -0.5, 0.0], 0, &[0, 1, 2]).unwrap_err();
        assert!(matches!(err, Error::Unbalanced { .. }));
    }

    #[test]
    fn disconnected_members_are_singular() {
        let grid = tri3([1.0; 3]);
        let active = ActiveSet::from_mask(vec![true, false, false]);
        // bus 3 is isolated but listed as a member
        let err = solve_dc(&grid, &active, &[0.5, -0.5, 0.0], 0, &[0, 1, 2]).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn linear_in_injections() {
        let grid = tri3([1.0; 3]);
        let active = ActiveSet::all(3);
        let p = [0.7, -0.2, -0.5];
        let a = flows(&grid, &active, &p);
        let scaled: Vec<f64> = p.iter().map(|x| 1.7 * x).collect();
        let b = flows(&grid, &active, &scaled);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(1.7 * x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn removing_zero_flow_branch_changes_nothing() {
        let grid = tri3([1.0; 3]);
        let p = [1.0, -0.5, -0.5];
        let full = flows(&grid, &ActiveSet::all(3), &p);
        let cut = flows(&grid, &ActiveSet::without(3, &[2]).unwrap(), &p);
        assert_abs_diff_eq!(full[0], cut[0], epsilon = 1e-12);
        assert_abs_diff_eq!(full[1], cut[1], epsilon = 1e-12);
    }
}
