//! Pairwise influence-model baseline (reconstructed).
//!
//! The model sees branch states only. A ridge regression learns a linear map
//! `D` from the network state at one step to the next; each branch then gets
//! a threshold on `(D s)_e` that best separates "stays in service" from
//! "trips". Prediction iterates `s[t+1] = s[t] & (D s[t] >= tau)` to a fixed
//! point. One instance is fitted per load scaling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::states_from_steps;
use crate::error::{Error, Result};
use crate::grid::check_schema;
use crate::linalg::{cholesky, cholesky_solve};
use crate::pool::CascadeSample;
use crate::powerflow::ActiveSet;

pub const INFLUENCE_SCHEMA: &str = "gridcascade.influence";
const INFLUENCE_SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_RIDGE: f64 = 1e-3;

/// Threshold that keeps a branch in service whatever its score.
const ALWAYS_SURVIVE: f64 = f64::MIN;
/// Threshold that trips a branch whatever its score.
const ALWAYS_TRIP: f64 = f64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceParams {
    pub grid_id: String,
    /// Row-major `|E| x |E|`; row `e` scores branch `e`.
    pub influence: Vec<f64>,
    pub threshold: Vec<f64>,
    pub alpha_tag: f64,
    /// Longest cascade seen in training; caps prediction length.
    pub horizon: u32,
    pub ridge: f64,
}

#[derive(Serialize, Deserialize)]
struct InfluenceDoc {
    schema: String,
    #[serde(flatten)]
    params: InfluenceParams,
}

fn state_vec(s: &ActiveSet) -> Vec<f64> {
    s.mask().iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
}

/// One-step transitions of a sample, ending with the terminal fixed point.
fn transitions(sample: &CascadeSample) -> Result<Vec<(ActiveSet, ActiveSet)>> {
    let states = states_from_steps(&sample.failure_step, sample.length)?;
    let mut out = Vec::with_capacity(states.len());
    for t in 0..states.len() {
        let next = states.get(t + 1).unwrap_or(&states[t]);
        out.push((states[t].clone(), next.clone()));
    }
    Ok(out)
}

/// Fits one influence instance on samples that share a load scaling.
pub fn fit_influence(grid_id: &str, samples: &[CascadeSample], ridge: f64) -> Result<InfluenceParams> {
    let first = samples.first().ok_or(Error::Empty("pool"))?;
    let alpha = first.alpha;
    if let Some(s) = samples.iter().find(|s| s.alpha != alpha) {
        return Err(Error::InvalidArgument(format!(
            "influence model needs a single load scaling, found {} and {}",
            alpha, s.alpha
        )));
    }
    if !(ridge > 0.0) {
        return Err(Error::InvalidArgument(format!("ridge {ridge} must be positive")));
    }
    let ne = first.failure_step.len();
    let mut pairs = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        pairs.extend(transitions(s).map_err(|e| e.at_sample(i))?);
    }

    // Normal equations: (X^T X + ridge I) W = X^T Y with D = W^T.
    let mut gram = vec![0.0; ne * ne];
    let mut cross = vec![0.0; ne * ne];
    for (cur, next) in &pairs {
        let x = state_vec(cur);
        let y = state_vec(next);
        for i in 0..ne {
            if x[i] == 0.0 {
                continue;
            }
            for j in 0..ne {
                gram[i * ne + j] += x[j];
                cross[i * ne + j] += y[j];
            }
        }
    }
    for i in 0..ne {
        gram[i * ne + i] += ridge;
    }
    cholesky(&mut gram, ne, 1e-15).ok_or_else(|| Error::Singular("influence normal equations".into()))?;
    let mut influence = vec![0.0; ne * ne];
    let mut col = vec![0.0; ne];
    for e in 0..ne {
        for i in 0..ne {
            col[i] = cross[i * ne + e];
        }
        cholesky_solve(&gram, ne, &mut col);
        influence[e * ne..(e + 1) * ne].copy_from_slice(&col);
    }

    let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); ne];
    for (cur, next) in &pairs {
        let x = state_vec(cur);
        for e in 0..ne {
            if cur.is_active(e) {
                let z = dot(&influence[e * ne..(e + 1) * ne], &x);
                scored[e].push((z, next.is_active(e)));
            }
        }
    }
    let threshold = scored.into_iter().map(best_threshold).collect();
    Ok(InfluenceParams {
        grid_id: grid_id.to_string(),
        influence,
        threshold,
        alpha_tag: alpha,
        horizon: samples.iter().map(|s| s.length).max().unwrap_or(1),
        ridge,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Threshold maximizing balanced accuracy of `score >= tau` against
/// "survives"; ties go to the lowest threshold.
fn best_threshold(mut scored: Vec<(f64, bool)>) -> f64 {
    let n_pos = scored.iter().filter(|s| s.1).count();
    let n_neg = scored.len() - n_pos;
    if n_neg == 0 {
        return ALWAYS_SURVIVE;
    }
    if n_pos == 0 {
        return ALWAYS_TRIP;
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Candidate i predicts trip for scored[..i] and survive for scored[i..].
    let mut best = (f64::NEG_INFINITY, ALWAYS_SURVIVE);
    let (mut neg_below, mut pos_below) = (0usize, 0usize);
    for i in 0..=scored.len() {
        if i == 0 || i == scored.len() || scored[i].0 != scored[i - 1].0 {
            let tpr = (n_pos - pos_below) as f64 / n_pos as f64;
            let tnr = neg_below as f64 / n_neg as f64;
            let acc = 0.5 * (tpr + tnr);
            let tau = if i == 0 {
                ALWAYS_SURVIVE
            } else if i == scored.len() {
                ALWAYS_TRIP
            } else {
                0.5 * (scored[i - 1].0 + scored[i].0)
            };
            if acc > best.0 {
                best = (acc, tau);
            }
        }
        if i < scored.len() {
            if scored[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
        }
    }
    best.1
}

/// Predicted state sequence from `s0`, at most `horizon` states long.
pub fn predict_states(params: &InfluenceParams, s0: &ActiveSet) -> Result<Vec<ActiveSet>> {
    let ne = params.threshold.len();
    if s0.len() != ne {
        return Err(Error::Shape(format!("contingency has {} entries, model has {ne}", s0.len())));
    }
    let mut states = vec![s0.clone()];
    let mut x = state_vec(s0);
    while states.len() < params.horizon.max(1) as usize {
        let cur = states.last().expect("s0");
        let mut next = cur.clone();
        for e in 0..ne {
            if cur.is_active(e) && dot(&params.influence[e * ne..(e + 1) * ne], &x) < params.threshold[e] {
                next.set(e, false);
            }
        }
        if &next == cur {
            break;
        }
        x = state_vec(&next);
        states.push(next);
    }
    Ok(states)
}

/// Predicted failure steps and the predicted cascade length.
pub fn predict_influence(params: &InfluenceParams, s0: &ActiveSet) -> Result<(Vec<u32>, u32)> {
    let states = predict_states(params, s0)?;
    let mut steps = vec![0u32; s0.len()];
    for s in &states {
        for (e, f) in steps.iter_mut().enumerate() {
            if s.is_active(e) {
                *f += 1;
            }
        }
    }
    Ok((steps, states.len() as u32))
}

impl InfluenceParams {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&InfluenceDoc {
            schema: format!("{INFLUENCE_SCHEMA}/{INFLUENCE_SCHEMA_VERSION}"),
            params: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let schema = value
            .get("schema")
            .and_then(|s| s.as_str())
            .ok_or_else(|| Error::Schema("influence file lacks \"schema\"".into()))?;
        check_schema(schema, INFLUENCE_SCHEMA, INFLUENCE_SCHEMA_VERSION)?;
        let doc: InfluenceDoc = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
        let p = doc.params;
        let ne = p.threshold.len();
        if p.influence.len() != ne * ne {
            return Err(Error::Shape(format!("influence matrix has {} entries for {ne} branches", p.influence.len())));
        }
        if p.influence.iter().chain(&p.threshold).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("influence parameters".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(s0: &[usize], f: Vec<u32>, t: u32) -> CascadeSample {
        CascadeSample {
            contingency: ActiveSet::without(f.len(), s0).unwrap(),
            alpha: 1.5,
            injections: vec![0.0; 3],
            failure_step: f,
            length: t,
        }
    }

    #[test]
    fn learns_a_one_step_lag() {
        // 5 branches; whenever branch 0 is out, branch 4 trips one step later.
        let mut train = Vec::new();
        for other in 1..4 {
            train.push(sample(&[0, other], {
                let mut f = vec![3u32; 5];
                f[0] = 0;
                f[other] = 0;
                f[4] = 1;
                f.iter_mut().for_each(|x| *x = (*x).min(2));
                f
            }, 2));
        }
        for (a, b) in [(1, 2), (1, 3), (2, 3)] {
            let mut f = vec![1u32; 5];
            f[a] = 0;
            f[b] = 0;
            train.push(sample(&[a, b], f, 1));
        }
        let params = fit_influence("g", &train, DEFAULT_RIDGE).unwrap();
        // held-out contingency containing branch 0
        let s0 = ActiveSet::without(5, &[0, 4]).unwrap();
        let (f, t) = predict_influence(&params, &s0).unwrap();
        assert_eq!((f, t), (vec![0, 1, 1, 1, 0], 1));
        let s0 = ActiveSet::without(5, &[0, 1]).unwrap();
        let (f, t) = predict_influence(&params, &s0).unwrap();
        assert_eq!(t, 2);
        assert_eq!(f, vec![0, 0, 2, 2, 1]);
    }

    #[test]
    fn no_propagation_predicts_survival() {
        let train: Vec<_> = [(0, 1), (1, 2), (0, 2)]
            .iter()
            .map(|&(a, b)| {
                let mut f = vec![1u32; 3];
                f[a] = 0;
                f[b] = 0;
                sample(&[a, b], f, 1)
            })
            .collect();
        let params = fit_influence("g", &train, DEFAULT_RIDGE).unwrap();
        let (f, t) = predict_influence(&params, &ActiveSet::all(3)).unwrap();
        assert_eq!(t, 1);
        assert_eq!(f, vec![1, 1, 1]);
        assert_eq!(params, fit_influence("g", &train, DEFAULT_RIDGE).unwrap());
    }

    #[test]
    fn rejects_mixed_alpha_and_empty() {
        let mut a = sample(&[0], vec![0, 1, 1], 1);
        let b = a.clone();
        a.alpha = 1.4;
        assert!(fit_influence("g", &[a, b], DEFAULT_RIDGE).is_err());
        assert!(matches!(fit_influence("g", &[], DEFAULT_RIDGE), Err(Error::Empty(_))));
    }

    #[test]
    fn thresholds_balance_classes() {
        let tau = best_threshold(vec![(0.1, false), (0.2, false), (0.8, true), (0.9, true)]);
        assert!((tau - 0.5).abs() < 1e-12);
        assert_eq!(best_threshold(vec![(0.3, true)]), ALWAYS_SURVIVE);
        assert_eq!(best_threshold(vec![(0.3, false)]), ALWAYS_TRIP);
    }

    #[test]
    fn json_roundtrip() {
        let train = vec![sample(&[0], vec![0, 1, 1], 1)];
        let p = fit_influence("g", &train, DEFAULT_RIDGE).unwrap();
        assert_eq!(InfluenceParams::from_json(&p.to_json().unwrap()).unwrap(), p);
    }
}
