mod common;

use gridcascade::gnn::{build_adjacency, predict_batch, train, GnnConfig, GnnParams, NeighborRule, SampleRef, TrainConfig};
use gridcascade::par::Execution;
use gridcascade::pool::{generate_pool, PoolConfig};
use gridcascade::{DataPool, Error, Grid};

fn setup(m: usize) -> (Grid, DataPool, GnnParams, gridcascade::gnn::EdgeAdjacency) {
    let grid = common::matpower("case5.m");
    let pool = generate_pool(&grid, m, 2, PoolConfig::default()).unwrap();
    let adj = build_adjacency(&grid, NeighborRule::Literal);
    let cfg = GnnConfig { hidden: 8, steps: 2, horizon: pool.max_length(), input_scale: 0.01, ..GnnConfig::default() };
    let params = GnnParams::new(&grid, &adj, cfg, 5).unwrap();
    (grid, pool, params, adj)
}

#[test]
fn training_is_deterministic_across_strategies() {
    let (_, pool, params, adj) = setup(60);
    let cfg = TrainConfig { epochs: 3, batch_size: 20, lr: 1e-2, seed: 1 };
    let mut a = params.clone();
    let mut b = params.clone();
    let mut c = params.clone();
    let ra = train(&mut a, &adj, &pool, &cfg, Execution::Sequential, |_, _| {}).unwrap();
    let rb = train(&mut b, &adj, &pool, &cfg, Execution::Sequential, |_, _| {}).unwrap();
    let rc = train(&mut c, &adj, &pool, &cfg, Execution::Parallel, |_, _| {}).unwrap();
    assert_eq!(ra.loss_curve, rb.loss_curve);
    assert_eq!(ra.loss_curve, rc.loss_curve);
    assert_eq!(a.to_flat(), b.to_flat());
    assert_eq!(a.to_flat(), c.to_flat());
}

#[test]
fn loss_decreases_early() {
    let (_, pool, params, adj) = setup(200);
    for seed in [1, 2] {
        let mut p = params.clone();
        let cfg = TrainConfig { epochs: 10, batch_size: 32, lr: 3e-3, seed };
        let r = train(&mut p, &adj, &pool, &cfg, Execution::default(), |_, _| {}).unwrap();
        for w in r.loss_curve.windows(2) {
            assert!(w[1] <= 1.05 * w[0], "{:?}", r.loss_curve);
        }
        assert!(r.loss_curve[9] < r.loss_curve[0]);
    }
}

#[test]
fn overfits_a_small_pool() {
    let (_, pool, mut params, adj) = setup(100);
    let cfg = TrainConfig { epochs: 300, batch_size: 25, lr: 1e-2, seed: 3 };
    train(&mut params, &adj, &pool, &cfg, Execution::default(), |_, _| {}).unwrap();
    let refs: Vec<SampleRef<'_>> = pool.samples.iter().map(SampleRef::from).collect();
    let preds = predict_batch(&params, &adj, &refs).unwrap();
    let (mut hit, mut total) = (0, 0);
    for (s, p) in pool.samples.iter().zip(&preds) {
        for e in 0..s.failure_step.len() {
            if s.contingency.is_active(e) {
                total += 1;
                let truth = if s.failure_step[e] >= s.length { params.config.horizon } else { s.failure_step[e] };
                hit += (p[e] == truth) as usize;
            }
        }
    }
    assert!(hit as f64 >= 0.99 * total as f64, "{hit}/{total}");
}

#[test]
fn rejects_empty_and_foreign_pools() {
    let (_, pool, mut params, adj) = setup(10);
    let cfg = TrainConfig::default();
    let empty = DataPool { samples: vec![], ..pool.clone() };
    let err = train(&mut params, &adj, &empty, &cfg, Execution::Sequential, |_, _| {}).unwrap_err();
    assert_eq!(err.to_string(), "empty pool");
    let foreign = DataPool { grid_id: "other".into(), ..pool };
    assert!(matches!(
        train(&mut params, &adj, &foreign, &cfg, Execution::Sequential, |_, _| {}),
        Err(Error::GridMismatch { .. })
    ));
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let (grid, pool, params, adj) = setup(20);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    params.save(&path).unwrap();
    let (back, back_adj) = GnnParams::load(&path, &grid).unwrap();
    assert_eq!(back.to_flat(), params.to_flat());
    assert_eq!(back.config, params.config);
    let refs: Vec<SampleRef<'_>> = pool.samples.iter().map(SampleRef::from).collect();
    assert_eq!(predict_batch(&back, &back_adj, &refs).unwrap(), predict_batch(&params, &adj, &refs).unwrap());

    let text = std::fs::read_to_string(&path).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["schema"], "gridcascade.gnn/1");
    for key in ["grid_id", "L", "K", "T"] {
        assert!(header.get(key).is_some());
    }

    let other = common::tri3();
    assert!(matches!(GnnParams::load(&path, &other), Err(Error::GridMismatch { .. })));

    let kept: Vec<&str> = text.lines().take(4).collect();
    let truncated = dir.path().join("cut.ckpt");
    std::fs::write(&truncated, kept.join("\n")).unwrap();
    let msg = GnnParams::load(&truncated, &grid).unwrap_err().to_string();
    let missing = &params.named_tensors()[3].0;
    assert!(msg.contains(missing.as_str()), "{msg}");

    let future = text.replacen("gridcascade.gnn/1", "gridcascade.gnn/9", 1);
    let vpath = dir.path().join("v9.ckpt");
    std::fs::write(&vpath, future).unwrap();
    assert!(matches!(GnnParams::load(&vpath, &grid), Err(Error::Version { .. })));
}
