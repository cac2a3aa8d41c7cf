#![allow(dead_code)]

use std::path::PathBuf;

use gridcascade::grid::default_capacities;
use gridcascade::{Branch, Bus, Grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Triangle grid: bus 1 generates 1.0, buses 2 and 3 consume 0.5 each;
/// branches (1,2), (1,3), (2,3) with unit reactance and capacities 1, 1, 0.1.
pub fn tri3() -> Grid {
    Grid::load(fixture("tri3.json")).unwrap()
}

/// A MATPOWER fixture with capacities filled from the default injections.
pub fn matpower(name: &str) -> Grid {
    let g = Grid::load(fixture(name)).unwrap();
    default_capacities(&g, &g.default_injections()).unwrap()
}

fn branch(from: u32, to: u32, x: f64) -> Branch {
    Branch { index: 0, from_bus: from, to_bus: to, reactance: x, capacity: 0.0 }
}

/// Random connected grid: a random spanning tree plus extra chords, random
/// reactances and injections that balance exactly.
pub fn random_grid(rng: &mut ChaCha8Rng, n: usize, extra: usize) -> Grid {
    let mut branches = Vec::new();
    for v in 2..=n as u32 {
        let u = rng.random_range(1..v);
        branches.push(branch(u, v, rng.random_range(0.05..2.0)));
    }
    for _ in 0..extra {
        let u = rng.random_range(1..=n as u32);
        let v = rng.random_range(1..=n as u32);
        if u != v {
            branches.push(branch(u, v, rng.random_range(0.05..2.0)));
        }
    }
    let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
    let net: f64 = p.iter().sum();
    p[0] -= net;
    let buses = p
        .iter()
        .enumerate()
        .map(|(i, &x)| Bus { id: i as u32 + 1, injection_default: x, is_generator: x > 0.0 || i == 0 })
        .collect();
    let base = if rng.random_bool(0.5) { 100.0 } else { 1.0 };
    Grid::new(format!("rand{n}"), base, buses, branches).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// TRI3 with explicit branch capacities.
pub fn tri3_caps(caps: [f64; 3]) -> Grid {
    let g = tri3();
    let branches = g.branches().iter().zip(caps).map(|(b, c)| Branch { capacity: c, ..b.clone() }).collect();
    Grid::new("tri3", g.base_mva(), g.buses().to_vec(), branches).unwrap()
}
