//! Grid topology and electrical parameters.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::{rebalance_in_place, SlackPolicy};
use crate::error::{Error, Result};
use crate::powerflow::{solve_dc, ActiveSet};

pub const GRID_SCHEMA: &str = "gridcascade.grid";
pub const GRID_SCHEMA_VERSION: u32 = 1;

/// Fraction of the median nonzero capacity given to branches that carry no
/// flow at default injections.
pub const CAPACITY_FLOOR_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    /// Net default injection in MW, positive for net generation.
    pub injection_default: f64,
    pub is_generator: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub index: usize,
    pub from_bus: u32,
    pub to_bus: u32,
    /// Series reactance in p.u.
    pub reactance: f64,
    /// Thermal limit in MW; `0.0` means the capacity has not been set yet.
    pub capacity: f64,
}

impl Branch {
    pub fn has_capacity(&self) -> bool {
        self.capacity > 0.0
    }
}

/// An immutable, validated power grid.
///
/// Buses are addressed by their external id in the public data and by a dense
/// position (`0..num_buses()`) everywhere else in the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    id: String,
    base_mva: f64,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    bus_pos: HashMap<u32, usize>,
    ends: Vec<(usize, usize)>,
}

impl Grid {
    /// Validates and builds a grid. Branch indices are reassigned densely in
    /// the given order.
    pub fn new(
        id: impl Into<String>,
        base_mva: f64,
        buses: Vec<Bus>,
        mut branches: Vec<Branch>,
    ) -> Result<Self> {
        if !(base_mva.is_finite() && base_mva > 0.0) {
            return Err(Error::InvalidGrid(format!("base_mva must be positive, got {base_mva}")));
        }
        if buses.is_empty() {
            return Err(Error::InvalidGrid("grid has no buses".into()));
        }
        let mut bus_pos = HashMap::with_capacity(buses.len());
        for (pos, bus) in buses.iter().enumerate() {
            if bus_pos.insert(bus.id, pos).is_some() {
                return Err(Error::InvalidGrid(format!("duplicate bus id {}", bus.id)));
            }
            if !bus.injection_default.is_finite() {
                return Err(Error::InvalidGrid(format!("bus {} has a non-finite injection", bus.id)));
            }
        }
        if !buses.iter().any(|b| b.is_generator) {
            return Err(Error::InvalidGrid("no bus can generate power".into()));
        }
        let mut ends = Vec::with_capacity(branches.len());
        for (index, br) in branches.iter_mut().enumerate() {
            br.index = index;
            let from = *bus_pos.get(&br.from_bus).ok_or(Error::UnknownBus {
                bus: br.from_bus,
                branch: index,
            })?;
            let to = *bus_pos.get(&br.to_bus).ok_or(Error::UnknownBus {
                bus: br.to_bus,
                branch: index,
            })?;
            if from == to {
                return Err(Error::InvalidGrid(format!("branch {index} is a self-loop on bus {}", br.from_bus)));
            }
            if !(br.reactance.is_finite() && br.reactance > 0.0) {
                return Err(Error::InvalidGrid(format!(
                    "branch {index} has non-positive reactance {}",
                    br.reactance
                )));
            }
            if !(br.capacity.is_finite() && br.capacity >= 0.0) {
                return Err(Error::InvalidGrid(format!(
                    "branch {index} has invalid capacity {}",
                    br.capacity
                )));
            }
            ends.push((from, to));
        }
        let grid = Grid {
            id: id.into(),
            base_mva,
            buses,
            branches,
            bus_pos,
            ends,
        };
        let all = ActiveSet::all(grid.num_branches());
        if crate::cascade::find_islands(&grid, &all).len() != 1 {
            return Err(Error::InvalidGrid("grid is not connected".into()));
        }
        Ok(grid)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    /// Dense position of a bus id.
    pub fn bus_position(&self, id: u32) -> Option<usize> {
        self.bus_pos.get(&id).copied()
    }

    /// Dense (from, to) bus positions of a branch.
    pub fn branch_ends(&self, branch: usize) -> (usize, usize) {
        self.ends[branch]
    }

    pub fn default_injections(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.injection_default).collect()
    }

    pub fn capacities(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.capacity).collect()
    }

    pub fn capacities_complete(&self) -> bool {
        self.branches.iter().all(Branch::has_capacity)
    }

    /// Returns a copy with a new id.
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub(crate) fn with_capacities(mut self, caps: &[f64]) -> Self {
        for (br, &c) in self.branches.iter_mut().zip(caps) {
            br.capacity = c;
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = GridDoc {
            schema: format!("{GRID_SCHEMA}/{GRID_SCHEMA_VERSION}"),
            id: self.id.clone(),
            base_mva: self.base_mva,
            buses: self
                .buses
                .iter()
                .map(|b| BusDoc {
                    id: b.id,
                    p_default: b.injection_default,
                    is_gen: b.is_generator,
                })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|b| BranchDoc {
                    from: b.from_bus,
                    to: b.to_bus,
                    x: b.reactance,
                    cap: b.capacity,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("malformed grid JSON: {e}")))?;
        let schema = value
            .get("schema")
            .and_then(|s| s.as_str())
            .ok_or_else(|| Error::Schema("missing \"schema\" key".into()))?;
        check_schema(schema, GRID_SCHEMA, GRID_SCHEMA_VERSION)?;
        let doc: GridDoc = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
        let buses = doc
            .buses
            .into_iter()
            .map(|b| Bus {
                id: b.id,
                injection_default: b.p_default,
                is_generator: b.is_gen,
            })
            .collect();
        let branches = doc
            .branches
            .into_iter()
            .enumerate()
            .map(|(index, b)| Branch {
                index,
                from_bus: b.from,
                to_bus: b.to,
                reactance: b.x,
                capacity: b.cap,
            })
            .collect();
        Grid::new(doc.id, doc.base_mva, buses, branches)
    }

    /// Loads a grid from a native JSON file or a MATPOWER `.m` case.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|ext| ext == "m") {
            crate::matpower::parse_matpower_case(&text)
        } else {
            Grid::from_json(&text)
        }
    }
}

/// Checks a `name/version` schema tag.
pub(crate) fn check_schema(found: &str, name: &str, version: u32) -> Result<()> {
    let (prefix, ver) = found
        .rsplit_once('/')
        .ok_or_else(|| Error::Schema(format!("malformed schema tag {found:?}")))?;
    if prefix != name {
        return Err(Error::Schema(format!("expected schema {name:?}, found {prefix:?}")));
    }
    if ver != version.to_string() {
        return Err(Error::Version {
            found: ver.to_string(),
            expected: version.to_string(),
        });
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GridDoc {
    schema: String,
    id: String,
    base_mva: f64,
    buses: Vec<BusDoc>,
    branches: Vec<BranchDoc>,
}

#[derive(Serialize, Deserialize)]
struct BusDoc {
    id: u32,
    p_default: f64,
    is_gen: bool,
}

#[derive(Serialize, Deserialize)]
struct BranchDoc {
    from: u32,
    to: u32,
    x: f64,
    cap: f64,
}

/// Flows below this fraction of the largest flow count as zero.
const ZERO_FLOW_REL_TOL: f64 = 1e-9;

/// Fills every unset capacity with twice the magnitude of its flow at the
/// given base injections.
///
/// The base injections are first balanced across the (connected) grid with
/// the same rule the cascade simulator applies to islands. Branches that
/// carry no flow get `CAPACITY_FLOOR_FRACTION` times the median nonzero
/// capacity. Capacities that are already set are left untouched.
pub fn default_capacities(grid: &Grid, base_injections: &[f64]) -> Result<Grid> {
    if grid.capacities_complete() {
        return Ok(grid.clone());
    }
    if base_injections.len() != grid.num_buses() {
        return Err(Error::Shape(format!(
            "{} injections for {} buses",
            base_injections.len(),
            grid.num_buses()
        )));
    }
    let members: Vec<usize> = (0..grid.num_buses()).collect();
    let mut p = base_injections.to_vec();
    rebalance_in_place(&members, &mut p);
    let slack = SlackPolicy::default().pick(grid, &members, &p);
    let active = ActiveSet::all(grid.num_branches());
    let sol = solve_dc(grid, &active, &p, slack, &members)?;

    let flow_scale = sol.flow.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut caps = grid.capacities();
    let mut zero_flow = Vec::new();
    for (e, cap) in caps.iter_mut().enumerate() {
        if *cap > 0.0 {
            continue;
        }
        let g = sol.flow[e].abs();
        if g > ZERO_FLOW_REL_TOL * flow_scale {
            *cap = 2.0 * g;
        } else {
            zero_flow.push(e);
        }
    }
    if !zero_flow.is_empty() {
        let mut nonzero: Vec<f64> = caps.iter().copied().filter(|&c| c > 0.0).collect();
        if nonzero.is_empty() {
            return Err(Error::InvalidGrid(
                "no branch carries flow at base injections; cannot derive capacities".into(),
            ));
        }
        nonzero.sort_by(f64::total_cmp);
        let n = nonzero.len();
        let median = if n % 2 == 1 {
            nonzero[n / 2]
        } else {
            0.5 * (nonzero[n / 2 - 1] + nonzero[n / 2])
        };
        for e in zero_flow {
            caps[e] = CAPACITY_FLOOR_FRACTION * median;
        }
    }
    Ok(grid.clone().with_capacities(&caps))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Three buses, one generator, unit reactances on (1,2), (1,3), (2,3).
    pub fn tri3(caps: [f64; 3]) -> Grid {
        let buses = vec![
            Bus { id: 1, injection_default: 1.0, is_generator: true },
            Bus { id: 2, injection_default: -0.5, is_generator: false },
            Bus { id: 3, injection_default: -0.5, is_generator: false },
        ];
        let pairs = [(1, 2), (1, 3), (2, 3)];
        let branches = pairs
            .iter()
            .zip(caps)
            .map(|(&(f, t), c)| Branch { index: 0, from_bus: f, to_bus: t, reactance: 1.0, capacity: c })
            .collect();
        Grid::new("tri3", 1.0, buses, branches).unwrap()
    }
}
