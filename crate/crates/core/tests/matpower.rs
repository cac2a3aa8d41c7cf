mod common;

use gridcascade::Grid;

#[test]
fn reads_the_five_bus_case() {
    let g = Grid::load(common::fixture("case5.m")).unwrap();
    assert_eq!(g.id(), "case5");
    assert_eq!((g.num_buses(), g.num_branches()), (5, 6));
    assert_eq!(g.base_mva(), 100.0);
    let p = g.default_injections();
    let expected = [210.0, -300.0, 23.49, -400.0, 466.51];
    for (a, b) in p.iter().zip(expected) {
        assert!((a - b).abs() < 1e-9, "{p:?}");
    }
    assert!(p.iter().sum::<f64>().abs() < 1e-9);
    let caps = g.capacities();
    assert_eq!((caps[0], caps[5]), (400.0, 240.0));
    assert!(caps[1..5].iter().all(|&c| c == 0.0));

    let filled = common::matpower("case5.m");
    let caps = filled.capacities();
    assert_eq!((caps[0], caps[5]), (400.0, 240.0));
    assert!(filled.capacities_complete());
}

#[test]
fn reads_the_thirty_bus_case() {
    let g = common::matpower("case30.m");
    assert_eq!((g.num_buses(), g.num_branches()), (30, 41));
    // 300.2 MW of dispatch against 283.4 MW of load
    assert!((g.default_injections().iter().sum::<f64>() - 16.8).abs() < 1e-9);
    let json = g.to_json().unwrap();
    assert_eq!(Grid::from_json(&json).unwrap(), g);
}
