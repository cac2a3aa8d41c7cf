mod common;

use gridcascade::cascade::states_from_steps;
use gridcascade::pool::random_contingency;
use gridcascade::{simulate_cascade, ActiveSet, SimOptions};
use proptest::prelude::*;
use rand::Rng;

fn run(fail: &[usize], alpha: f64) -> (Vec<u32>, u32) {
    let g = common::tri3_caps([0.6, 0.6, 0.3]);
    let p: Vec<f64> = g.default_injections().iter().map(|x| x * alpha).collect();
    let r = simulate_cascade(&g, &ActiveSet::without(3, fail).unwrap(), &p, SimOptions::default()).unwrap();
    (r.failure_step, r.length)
}

#[test]
fn tri3_golden_cascades() {
    // losing (1,2) leaves the chain 1-3-2 carrying 1.0 and -0.5: both trip
    assert_eq!(run(&[0], 1.0), (vec![0, 1, 1], 2));
    // losing the idle branch (2,3) changes nothing
    assert_eq!(run(&[2], 1.0), (vec![1, 1, 0], 1));
    let g = common::tri3();
    let r = simulate_cascade(&g, &ActiveSet::all(3), &g.default_injections(), SimOptions::default()).unwrap();
    assert_eq!((r.failure_step, r.length), (vec![1, 1, 1], 1));
}

fn check_random_simulations(grid: &gridcascade::Grid, runs: usize, seed: u64) {
    let mut rng = common::rng(seed);
    let ne = grid.num_branches();
    let base = grid.default_injections();
    for _ in 0..runs {
        let k = rng.random_range(0..=2.min(ne - 1));
        let s0 = random_contingency(&mut rng, ne, k).unwrap();
        let alpha = rng.random_range(1.0..=2.0);
        let p: Vec<f64> = base.iter().map(|x| x * alpha).collect();
        let opts = SimOptions { keep_states: true, ..SimOptions::default() };
        let r = simulate_cascade(grid, &s0, &p, opts).unwrap();
        assert!(r.length as usize <= ne + 1);
        let states = r.states.unwrap();
        assert_eq!(states[0], s0);
        for w in states.windows(2) {
            assert!(w[1].is_subset_of(&w[0]) && w[1] != w[0]);
        }
        assert_eq!(states_from_steps(&r.failure_step, r.length).unwrap(), states);
        for e in 0..ne {
            assert_eq!(r.failure_step[e] == 0, !s0.is_active(e));
        }
    }
}

#[test]
fn monotone_and_bounded_on_case30() {
    check_random_simulations(&common::matpower("case30.m"), 2000, 1);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]
    #[test]
    fn monotone_and_bounded_on_random_grids(seed in any::<u64>(), n in 2usize..20, extra in 0usize..15) {
        let g = common::random_grid(&mut common::rng(seed), n, extra);
        let g = gridcascade::grid::default_capacities(&g, &g.default_injections()).unwrap();
        check_random_simulations(&g, 20, seed);
    }
}
