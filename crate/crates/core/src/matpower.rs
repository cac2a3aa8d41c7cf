//! Reader for the DC-relevant subset of MATPOWER case files.
//!
//! Only `mpc.baseMVA`, `mpc.bus` (id, type, Pd), `mpc.branch` (from, to, x,
//! rateA, status) and `mpc.gen` (bus, Pg, status) are interpreted; every other
//! block and column is skipped.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{Branch, Bus, Grid};

const BUS_I: usize = 0;
const PD: usize = 2;
const F_BUS: usize = 0;
const T_BUS: usize = 1;
const BR_X: usize = 3;
const RATE_A: usize = 5;
const BR_STATUS: usize = 10;
const GEN_BUS: usize = 0;
const PG: usize = 1;
const GEN_STATUS: usize = 7;

struct Row {
    line: usize,
    values: Vec<f64>,
}

impl Row {
    fn get(&self, col: usize, block: &str) -> Result<f64> {
        self.values.get(col).copied().ok_or_else(|| Error::Syntax {
            line: self.line,
            message: format!("{block} row has {} columns, need at least {}", self.values.len(), col + 1),
        })
    }

    fn get_or(&self, col: usize, default: f64) -> f64 {
        self.values.get(col).copied().unwrap_or(default)
    }

    fn id(&self, col: usize, block: &str) -> Result<u32> {
        let v = self.get(col, block)?;
        if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
            return Err(Error::Syntax {
                line: self.line,
                message: format!("invalid bus number {v}"),
            });
        }
        Ok(v as u32)
    }
}

/// Parses MATPOWER case text into a grid.
///
/// Net injection per bus is the in-service generation minus the demand.
/// Branches with `rateA = 0` (or no rateA column) get capacity `0.0`, which
/// must be filled by [`crate::grid::default_capacities`] before simulating.
pub fn parse_matpower_case(text: &str) -> Result<Grid> {
    let mut name = None;
    let mut base_mva = 100.0;
    let mut blocks: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    let mut open: Option<(String, Vec<Row>, usize)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('%').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some((_, rows, _)) = open.as_mut() {
            let (body, closes) = match line.find(']') {
                Some(pos) => (&line[..pos], true),
                None => (line, false),
            };
            for segment in body.split(';') {
                let values = parse_numbers(segment, line_no)?;
                if !values.is_empty() {
                    rows.push(Row { line: line_no, values });
                }
            }
            if closes {
                let (block, rows, _) = open.take().expect("open block");
                blocks.insert(block, rows);
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("function") {
            if let Some((_, fname)) = rest.split_once('=') {
                name = Some(fname.trim().trim_end_matches(';').to_string());
            }
            continue;
        }
        let Some(rest) = line.strip_prefix("mpc.") else {
            continue;
        };
        let Some((key, value)) = rest.split_once('=') else {
            return Err(Error::Syntax { line: line_no, message: "expected assignment".into() });
        };
        let key = key.trim();
        let value = value.trim();
        if key == "baseMVA" {
            let v = value.trim_end_matches(';').trim();
            base_mva = v.parse().map_err(|_| Error::Syntax {
                line: line_no,
                message: format!("invalid baseMVA {v:?}"),
            })?;
        } else if let Some(body) = value.strip_prefix('[') {
            let mut rows = Vec::new();
            let (body, closes) = match body.find(']') {
                Some(pos) => (&body[..pos], true),
                None => (body, false),
            };
            for segment in body.split(';') {
                let values = parse_numbers(segment, line_no)?;
                if !values.is_empty() {
                    rows.push(Row { line: line_no, values });
                }
            }
            if closes {
                blocks.insert(key.to_string(), rows);
            } else {
                open = Some((key.to_string(), rows, line_no));
            }
        }
    }
    if let Some((block, _, line)) = open {
        return Err(Error::Syntax { line, message: format!("unterminated matrix mpc.{block}") });
    }
    let take = |key: &str| -> Result<&Vec<Row>> {
        blocks
            .get(key)
            .ok_or_else(|| Error::Syntax { line: 0, message: format!("missing mpc.{key} block") })
    };
    let bus_rows = take("bus")?;
    let branch_rows = take("branch")?;
    let gen_rows = take("gen")?;

    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut position = BTreeMap::new();
    for row in bus_rows {
        let id = row.id(BUS_I, "bus")?;
        position.insert(id, buses.len());
        buses.push(Bus {
            id,
            injection_default: -row.get(PD, "bus")?,
            is_generator: false,
        });
    }
    for row in gen_rows {
        let bus = row.id(GEN_BUS, "gen")?;
        if row.get_or(GEN_STATUS, 1.0) <= 0.0 {
            continue;
        }
        let &pos = position.get(&bus).ok_or(Error::Syntax {
            line: row.line,
            message: format!("generator at unknown bus {bus}"),
        })?;
        buses[pos].injection_default += row.get(PG, "gen")?;
        buses[pos].is_generator = true;
    }
    let mut branches = Vec::with_capacity(branch_rows.len());
    for row in branch_rows {
        if row.get_or(BR_STATUS, 1.0) <= 0.0 {
            continue;
        }
        let from_bus = row.id(F_BUS, "branch")?;
        let to_bus = row.id(T_BUS, "branch")?;
        for bus in [from_bus, to_bus] {
            if !position.contains_key(&bus) {
                return Err(Error::Syntax { line: row.line, message: format!("unknown bus {bus}") });
            }
        }
        let reactance = row.get(BR_X, "branch")?;
        if !(reactance > 0.0) {
            return Err(Error::Syntax {
                line: row.line,
                message: format!("non-positive reactance {reactance}"),
            });
        }
        branches.push(Branch {
            index: branches.len(),
            from_bus,
            to_bus,
            reactance,
            capacity: row.get_or(RATE_A, 0.0).max(0.0),
        });
    }
    Grid::new(name.unwrap_or_else(|| "matpower".into()), base_mva, buses, branches)
}

fn parse_numbers(segment: &str, line: usize) -> Result<Vec<f64>> {
    segment
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|tok| match tok {
            "Inf" | "inf" => Ok(f64::INFINITY),
            "-Inf" | "-inf" => Ok(f64::NEG_INFINITY),
            _ => tok.parse::<f64>().map_err(|_| Error::Syntax {
                line,
                message: format!("invalid number {tok:?}"),
            }),
        })
        .collect()
}
