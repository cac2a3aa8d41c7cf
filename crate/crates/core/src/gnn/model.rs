//! Batched forward and reverse passes.
//!
//! A batch is flattened into rows, one per (sample, active branch), so that
//! each per-edge network runs once per batch.

use crate::error::{Error, Result};
use crate::nn::{softmax, softmax_xent, NetTrace};
use crate::par::Execution;
use crate::pool::CascadeSample;
use crate::powerflow::ActiveSet;

use super::{DegreeCount, EdgeAdjacency, GnnParams};

/// Samples per gradient / inference chunk. Fixed so that results do not
/// depend on the number of workers.
const CHUNK: usize = 16;

const NO_ROW: usize = usize::MAX;

/// Model input for one cascade.
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub contingency: &'a ActiveSet,
    pub injections: &'a [f64],
}

impl<'a> From<&'a CascadeSample> for SampleRef<'a> {
    fn from(s: &'a CascadeSample) -> Self {
        SampleRef {
            contingency: &s.contingency,
            injections: &s.injections,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Neighbor {
    row: usize,
    slot: usize,
    scale: f64,
}

pub(crate) struct BatchTrace {
    samples: usize,
    num_buses: usize,
    /// (sample, edge) per row.
    rows: Vec<(usize, usize)>,
    inv_degree: Vec<f64>,
    nb_start: Vec<usize>,
    nb: Vec<Neighbor>,
    node: NetTrace,
    attn_a: NetTrace,
    attn_b: NetTrace,
    hidden: Vec<Vec<f64>>,
    msg: Vec<NetTrace>,
    node_msg: Vec<NetTrace>,
    fin: NetTrace,
}

impl BatchTrace {
    pub(crate) fn logits(&self) -> &[f64] {
        self.fin.output()
    }
}

fn check_finite(values: &[f64], stage: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(stage.to_string()))
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn forward_batch(params: &GnnParams, adj: &EdgeAdjacency, batch: &[SampleRef<'_>]) -> Result<BatchTrace> {
    params.check_adjacency(adj)?;
    let nb = params.num_buses;
    let ne = params.num_edges;
    let l = params.config.hidden;
    let n_coeff = adj.coeff_len();
    let b = batch.len();
    for s in batch {
        if s.contingency.len() != ne || s.injections.len() != nb {
            return Err(Error::Shape(format!(
                "sample with {} branches / {} buses for a model of {ne} / {nb}",
                s.contingency.len(),
                s.injections.len()
            )));
        }
    }

    let scale = params.config.input_scale;
    let node_in: Vec<f64> = batch.iter().flat_map(|s| s.injections.iter().map(move |p| p * scale)).collect();
    let node = params.h_initial.forward_batch(&node_in, b * nb)?;
    check_finite(node.output(), "initial node transform")?;
    let pt = node.output();

    let s_in: Vec<f64> = batch
        .iter()
        .flat_map(|s| s.contingency.mask().iter().map(|&a| if a { 1.0 } else { 0.0 }))
        .collect();
    let attn_a = params.attn_edge_edge.forward_batch(&s_in, b)?;
    let attn_b = params.attn_node_edge.forward_batch(&s_in, b)?;
    check_finite(attn_a.output(), "edge-to-edge attention")?;
    check_finite(attn_b.output(), "node-to-edge attention")?;

    let mut rows = Vec::new();
    let mut row_of = vec![NO_ROW; b * ne];
    for (i, s) in batch.iter().enumerate() {
        for e in 0..ne {
            if s.contingency.is_active(e) {
                row_of[i * ne + e] = rows.len();
                rows.push((i, e));
            }
        }
    }
    let r = rows.len();
    let degree = |i: usize, e: usize| -> f64 {
        match params.config.degree_count {
            DegreeCount::Full => adj.degree(e) as f64,
            DegreeCount::Active => adj.active_degree(e, batch[i].contingency) as f64,
        }
    };
    let inv_degree: Vec<f64> = rows.iter().map(|&(i, e)| 1.0 / degree(i, e)).collect();
    let mut nb_start = Vec::with_capacity(r + 1);
    let mut nbrs = Vec::new();
    for &(i, e) in &rows {
        nb_start.push(nbrs.len());
        let de = degree(i, e);
        for (d, slot) in adj.others(e) {
            let row = row_of[i * ne + d];
            if row != NO_ROW {
                nbrs.push(Neighbor {
                    row,
                    slot: i * n_coeff + slot,
                    scale: 1.0 / (de * degree(i, d)).sqrt(),
                });
            }
        }
    }
    nb_start.push(nbrs.len());

    let bcoef = attn_b.output();
    let mut h0 = vec![0.0; r * l];
    let mut q = vec![0.0; r * l];
    for (row, &(i, e)) in rows.iter().enumerate() {
        let (u, v) = adj.ends(e);
        let pu = &pt[(i * nb + u) * l..(i * nb + u + 1) * l];
        let pv = &pt[(i * nb + v) * l..(i * nb + v + 1) * l];
        let bu = bcoef[i * 2 * ne + 2 * e];
        let bv = bcoef[i * 2 * ne + 2 * e + 1];
        let h = &mut h0[row * l..(row + 1) * l];
        let qq = &mut q[row * l..(row + 1) * l];
        for j in 0..l {
            h[j] = pu[j] - pv[j];
            qq[j] = 0.5 * (bu * pu[j] + bv * pv[j]);
        }
    }

    let a = attn_a.output();
    let mut hidden = Vec::with_capacity(params.config.steps + 1);
    hidden.push(h0);
    let mut msg = Vec::with_capacity(params.config.steps);
    let mut node_msg = Vec::with_capacity(params.config.steps);
    for k in 0..params.config.steps {
        let prev = &hidden[k];
        let mut m = vec![0.0; r * l];
        for row in 0..r {
            let out = &mut m[row * l..(row + 1) * l];
            for n in &nbrs[nb_start[row]..nb_start[row + 1]] {
                add_scaled(out, &prev[n.row * l..(n.row + 1) * l], a[n.slot] * n.scale);
            }
        }
        let tm = params.h_edge_edge[k].forward_batch(&m, r)?;
        let tq = params.h_node_edge[k].forward_batch(&q, r)?;
        let mut next = vec![0.0; r * l];
        for row in 0..r {
            let w = inv_degree[row];
            for j in row * l..(row + 1) * l {
                next[j] = prev[j] * w + tm.output()[j] + tq.output()[j];
            }
        }
        check_finite(&next, &format!("averaging step {}", k + 1))?;
        hidden.push(next);
        msg.push(tm);
        node_msg.push(tq);
    }
    let fin = params.h_final.forward_batch(hidden.last().expect("h0"), r)?;
    check_finite(fin.output(), "final stage")?;
    Ok(BatchTrace {
        samples: b,
        num_buses: nb,
        rows,
        inv_degree,
        nb_start,
        nb: nbrs,
        node,
        attn_a,
        attn_b,
        hidden,
        msg,
        node_msg,
        fin,
    })
}

/// Reverse pass for `d_logits` (row-major `rows x classes`), accumulating
/// into `grads`.
pub(crate) fn backward_batch(
    params: &GnnParams,
    adj: &EdgeAdjacency,
    trace: &BatchTrace,
    d_logits: &[f64],
    grads: &mut GnnParams,
) -> Result<()> {
    let l = params.config.hidden;
    let ne = params.num_edges;
    let nb = trace.num_buses;
    let r = trace.rows.len();
    let mut dh = params.h_final.backward(&trace.fin, d_logits, &mut grads.h_final, true)?;
    let a = trace.attn_a.output();
    let mut d_a = vec![0.0; a.len()];
    let mut dq = vec![0.0; r * l];
    for k in (0..params.config.steps).rev() {
        let dm = params.h_edge_edge[k].backward(&trace.msg[k], &dh, &mut grads.h_edge_edge[k], true)?;
        let dqk = params.h_node_edge[k].backward(&trace.node_msg[k], &dh, &mut grads.h_node_edge[k], true)?;
        add_scaled(&mut dq, &dqk, 1.0);
        let prev = &trace.hidden[k];
        let mut d_prev = dh;
        for row in 0..r {
            let w = trace.inv_degree[row];
            d_prev[row * l..(row + 1) * l].iter_mut().for_each(|x| *x *= w);
        }
        for row in 0..r {
            let dmr = &dm[row * l..(row + 1) * l];
            for n in &trace.nb[trace.nb_start[row]..trace.nb_start[row + 1]] {
                let hd = &prev[n.row * l..(n.row + 1) * l];
                d_a[n.slot] += n.scale * dot(dmr, hd);
                add_scaled(&mut d_prev[n.row * l..(n.row + 1) * l], dmr, a[n.slot] * n.scale);
            }
        }
        dh = d_prev;
    }

    let pt = trace.node.output();
    let bcoef = trace.attn_b.output();
    let mut d_pt = vec![0.0; trace.samples * nb * l];
    let mut d_b = vec![0.0; bcoef.len()];
    for (row, &(i, e)) in trace.rows.iter().enumerate() {
        let (u, v) = adj.ends(e);
        let (ou, ov) = ((i * nb + u) * l, (i * nb + v) * l);
        let dh0 = &dh[row * l..(row + 1) * l];
        let dqr = &dq[row * l..(row + 1) * l];
        let bu = bcoef[i * 2 * ne + 2 * e];
        let bv = bcoef[i * 2 * ne + 2 * e + 1];
        d_b[i * 2 * ne + 2 * e] += 0.5 * dot(dqr, &pt[ou..ou + l]);
        d_b[i * 2 * ne + 2 * e + 1] += 0.5 * dot(dqr, &pt[ov..ov + l]);
        for j in 0..l {
            d_pt[ou + j] += dh0[j] + 0.5 * bu * dqr[j];
            d_pt[ov + j] += -dh0[j] + 0.5 * bv * dqr[j];
        }
    }
    params.h_initial.backward(&trace.node, &d_pt, &mut grads.h_initial, false)?;
    params.attn_edge_edge.backward(&trace.attn_a, &d_a, &mut grads.attn_edge_edge, false)?;
    params.attn_node_edge.backward(&trace.attn_b, &d_b, &mut grads.attn_node_edge, false)?;
    Ok(())
}

/// Training class for a branch: its failure step, with survivors (and any
/// step beyond the model horizon) mapped to the survival class `horizon`.
pub fn class_target(failure_step: u32, cascade_length: u32, horizon: u32) -> usize {
    if failure_step >= cascade_length {
        horizon as usize
    } else {
        failure_step.min(horizon) as usize
    }
}

/// Summed cross-entropy of one chunk and its gradient, with every row
/// weighted by `weight`.
fn chunk_loss(
    params: &GnnParams,
    adj: &EdgeAdjacency,
    chunk: &[&CascadeSample],
    weight: f64,
) -> Result<(f64, GnnParams)> {
    let refs: Vec<SampleRef<'_>> = chunk.iter().map(|s| SampleRef::from(*s)).collect();
    let trace = forward_batch(params, adj, &refs)?;
    let c = params.config.classes();
    let logits = trace.logits();
    let mut d_logits = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (row, &(i, e)) in trace.rows.iter().enumerate() {
        let s = chunk[i];
        let target = class_target(s.failure_step[e], s.length, params.config.horizon);
        let (li, gi) = softmax_xent(&logits[row * c..(row + 1) * c], target)?;
        loss += li;
        for (d, g) in d_logits[row * c..(row + 1) * c].iter_mut().zip(gi) {
            *d = g * weight;
        }
    }
    let mut grads = params.zeros_like();
    backward_batch(params, adj, &trace, &d_logits, &mut grads)?;
    Ok((loss * weight, grads))
}

/// Mean cross-entropy over all (sample, non-contingency branch) pairs of the
/// batch and its gradient with respect to every parameter.
pub fn loss_batch(params: &GnnParams, adj: &EdgeAdjacency, batch: &[&CascadeSample]) -> Result<(f64, GnnParams)> {
    loss_batch_with(params, adj, batch, Execution::default())
}

pub fn loss_batch_with(
    params: &GnnParams,
    adj: &EdgeAdjacency,
    batch: &[&CascadeSample],
    exec: Execution,
) -> Result<(f64, GnnParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let total_rows: usize = batch.iter().map(|s| s.contingency.count_active()).sum();
    if total_rows == 0 {
        return Err(Error::InvalidArgument("batch has no active branches".into()));
    }
    let weight = 1.0 / total_rows as f64;
    let parts = exec.map_chunks(batch, CHUNK, |chunk| chunk_loss(params, adj, chunk, weight));
    let mut loss = 0.0;
    let mut grads = params.zeros_like();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.accumulate(&g);
    }
    Ok((loss, grads))
}

/// Per-sample intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Transformed node features, one `L`-vector per bus.
    pub node_features: Vec<Vec<f64>>,
    /// Edge features per averaging step `0..=K`; `None` for contingency
    /// branches.
    pub edge_features: Vec<Vec<Option<Vec<f64>>>>,
    /// Edge-to-edge coefficients in the adjacency's flat layout.
    pub edge_attention: Vec<f64>,
    /// Node-to-edge coefficients, `(b_eu, b_ev)` per branch.
    pub node_attention: Vec<f64>,
    /// Class probabilities per branch; `None` for contingency branches.
    pub probabilities: Vec<Option<Vec<f64>>>,
}

pub fn forward_gnn(
    params: &GnnParams,
    adj: &EdgeAdjacency,
    contingency: &ActiveSet,
    injections: &[f64],
) -> Result<ForwardTrace> {
    let trace = forward_batch(params, adj, &[SampleRef { contingency, injections }])?;
    let l = params.config.hidden;
    let c = params.config.classes();
    let ne = params.num_edges;
    let node_features = trace.node.output().chunks(l).map(<[f64]>::to_vec).collect();
    let mut edge_features = vec![vec![None; ne]; trace.hidden.len()];
    let mut probabilities = vec![None; ne];
    for (row, &(_, e)) in trace.rows.iter().enumerate() {
        for (k, h) in trace.hidden.iter().enumerate() {
            edge_features[k][e] = Some(h[row * l..(row + 1) * l].to_vec());
        }
        probabilities[e] = Some(softmax(&trace.logits()[row * c..(row + 1) * c]));
    }
    Ok(ForwardTrace {
        node_features,
        edge_features,
        edge_attention: trace.attn_a.output().to_vec(),
        node_attention: trace.attn_b.output().to_vec(),
        probabilities,
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Most probable class per branch (ties to the earlier step); contingency
/// branches get 0.
pub fn predict_failure_steps(trace: &ForwardTrace, contingency: &ActiveSet, horizon: u32) -> Vec<u32> {
    (0..contingency.len())
        .map(|e| match (&trace.probabilities[e], contingency.is_active(e)) {
            (Some(p), true) => (argmax(p) as u32).min(horizon),
            _ => 0,
        })
        .collect()
}

pub fn predict_batch(params: &GnnParams, adj: &EdgeAdjacency, batch: &[SampleRef<'_>]) -> Result<Vec<Vec<u32>>> {
    predict_batch_with(params, adj, batch, Execution::default())
}

/// Failure-step predictions for many samples; survivors get the model
/// horizon.
pub fn predict_batch_with(
    params: &GnnParams,
    adj: &EdgeAdjacency,
    batch: &[SampleRef<'_>],
    exec: Execution,
) -> Result<Vec<Vec<u32>>> {
    let ne = params.num_edges;
    let c = params.config.classes();
    let parts = exec.map_chunks(batch, CHUNK * 4, |chunk| -> Result<Vec<Vec<u32>>> {
        let trace = forward_batch(params, adj, chunk)?;
        let mut out = vec![vec![0u32; ne]; chunk.len()];
        let logits = trace.logits();
        for (row, &(i, e)) in trace.rows.iter().enumerate() {
            out[i][e] = argmax(&logits[row * c..(row + 1) * c]) as u32;
        }
        Ok(out)
    });
    let mut all = Vec::with_capacity(batch.len());
    for part in parts {
        all.extend(part?);
    }
    Ok(all)
}
