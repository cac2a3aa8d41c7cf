//! Graph-level and branch-level error metrics.
//!
//! Predictions and ground truth are both [`Outcome`]s: per-branch failure
//! steps plus the cascade horizon they are measured against. A branch has
//! failed by the end iff its step is below the horizon.
//!
//! When the two horizons differ, both sides are moved onto the larger one
//! before differencing; survivors sit at that common horizon.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pool::CascadeSample;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Outcome {
    pub steps: Vec<u32>,
    pub horizon: u32,
}

impl Outcome {
    pub fn new(steps: Vec<u32>, horizon: u32) -> Self {
        Self { steps, horizon }
    }

    pub fn from_sample(sample: &CascadeSample) -> Self {
        Self::new(sample.failure_step.clone(), sample.length)
    }

    pub fn failed(&self, e: usize) -> bool {
        self.steps[e] < self.horizon
    }

    pub fn failure_size(&self) -> usize {
        (0..self.steps.len()).filter(|&e| self.failed(e)).count()
    }

    fn lifted(&self, horizon: u32) -> impl Iterator<Item = u32> + '_ {
        let own = self.horizon;
        self.steps.iter().map(move |&f| if f >= own { horizon } else { f })
    }
}

fn check_pair(pred: &Outcome, truth: &Outcome) -> Result<()> {
    if pred.steps.len() != truth.steps.len() {
        return Err(Error::Shape(format!(
            "prediction has {} branches, ground truth {}",
            pred.steps.len(),
            truth.steps.len()
        )));
    }
    Ok(())
}

/// Both outcomes on the common horizon `max(T_pred, T_truth)`.
pub fn reconcile(pred: &Outcome, truth: &Outcome) -> Result<(Vec<u32>, Vec<u32>, u32)> {
    check_pair(pred, truth)?;
    let h = pred.horizon.max(truth.horizon);
    Ok((pred.lifted(h).collect(), truth.lifted(h).collect(), h))
}

/// `||E_failed| - |Ê_failed|| / |E_failed|` for one sample.
pub fn sample_size_error(pred: &Outcome, truth: &Outcome) -> Result<f64> {
    check_pair(pred, truth)?;
    let t = truth.failure_size();
    if t == 0 {
        return Err(Error::InvalidArgument("ground truth has no failed branch".into()));
    }
    Ok((t as f64 - pred.failure_size() as f64).abs() / t as f64)
}

/// Fraction of branches whose final state disagrees.
pub fn sample_state_error(pred: &Outcome, truth: &Outcome) -> Result<f64> {
    let (p, t, h) = reconcile(pred, truth)?;
    if p.is_empty() {
        return Ok(0.0);
    }
    let wrong = p.iter().zip(&t).filter(|(a, b)| (**a < h) != (**b < h)).count();
    Ok(wrong as f64 / p.len() as f64)
}

/// Mean absolute failure-step difference over all branches.
pub fn sample_step_error(pred: &Outcome, truth: &Outcome) -> Result<f64> {
    let (p, t, _) = reconcile(pred, truth)?;
    if p.is_empty() {
        return Ok(0.0);
    }
    let total: u64 = p.iter().zip(&t).map(|(a, b)| a.abs_diff(*b) as u64).sum();
    Ok(total as f64 / p.len() as f64)
}

/// How values are assigned to bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Binning {
    /// `bins` equal-width bins over `[lo, hi]`; the last bin is closed on the
    /// right. Values outside the range are dropped.
    EqualWidth { lo: f64, hi: f64, bins: usize },
    /// Bins centered at `lo, lo + step, ...`, `bins` of them; a value goes to
    /// the nearest center. Values more than half a step outside are dropped.
    Centered { lo: f64, step: f64, bins: usize },
}

impl Binning {
    pub fn alpha_default() -> Self {
        Binning::EqualWidth { lo: 1.0, hi: 2.0, bins: 21 }
    }

    pub fn frequency_default() -> Self {
        Binning::Centered { lo: 0.0, step: 0.1, bins: 11 }
    }

    pub fn len(&self) -> usize {
        match *self {
            Binning::EqualWidth { bins, .. } | Binning::Centered { bins, .. } => bins,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: f64) -> Option<usize> {
        if !x.is_finite() {
            return None;
        }
        match *self {
            Binning::EqualWidth { lo, hi, bins } => {
                if x < lo || x > hi || bins == 0 {
                    return None;
                }
                let i = ((x - lo) / (hi - lo) * bins as f64).floor() as usize;
                Some(i.min(bins - 1))
            }
            Binning::Centered { lo, step, bins } => {
                let i = ((x - lo) / step).round();
                (i >= 0.0 && (i as usize) < bins).then_some(i as usize)
            }
        }
    }

    /// Representative value of bin `i` (its center).
    pub fn center(&self, i: usize) -> f64 {
        match *self {
            Binning::EqualWidth { lo, hi, bins } => lo + (i as f64 + 0.5) * (hi - lo) / bins as f64,
            Binning::Centered { lo, step, .. } => lo + i as f64 * step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinRow {
    pub bin: f64,
    pub value: Option<f64>,
    pub count: usize,
}

/// Mean with a fixed summation order so results do not depend on input order.
fn stable_mean(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// Bin averages of `values` keyed by `keys`. Empty bins stay absent.
pub fn bin_report(values: &[f64], keys: &[f64], binning: &Binning) -> Vec<BinRow> {
    let mut buckets = vec![Vec::new(); binning.len()];
    for (&v, &k) in values.iter().zip(keys) {
        if let Some(i) = binning.index(k) {
            buckets[i].push(v);
        }
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(i, mut b)| BinRow { bin: binning.center(i), count: b.len(), value: stable_mean(&mut b) })
        .collect()
}

fn per_sample(
    preds: &[Outcome],
    truths: &[Outcome],
    f: impl Fn(&Outcome, &Outcome) -> Result<f64>,
) -> Result<Vec<f64>> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!("{} predictions for {} samples", preds.len(), truths.len())));
    }
    preds.iter().zip(truths).enumerate().map(|(i, (p, t))| f(p, t).map_err(|e| e.at_sample(i))).collect()
}

/// Failure-size error per α bin.
pub fn failure_size_error(preds: &[Outcome], truths: &[Outcome], alphas: &[f64], binning: &Binning) -> Result<Vec<BinRow>> {
    Ok(bin_report(&per_sample(preds, truths, sample_size_error)?, alphas, binning))
}

/// Final-state error per α bin.
pub fn final_state_error(preds: &[Outcome], truths: &[Outcome], alphas: &[f64], binning: &Binning) -> Result<Vec<BinRow>> {
    Ok(bin_report(&per_sample(preds, truths, sample_state_error)?, alphas, binning))
}

/// Failure-step error per α bin.
pub fn failure_step_error(preds: &[Outcome], truths: &[Outcome], alphas: &[f64], binning: &Binning) -> Result<Vec<BinRow>> {
    Ok(bin_report(&per_sample(preds, truths, sample_step_error)?, alphas, binning))
}

/// Fraction of training samples in which each branch failed in-cascade
/// (not as part of the initial contingency).
pub fn branch_failure_frequency(train: &[CascadeSample]) -> Result<Vec<f64>> {
    let first = train.first().ok_or(Error::Empty("pool"))?;
    let ne = first.failure_step.len();
    let mut counts = vec![0usize; ne];
    for s in train {
        for (e, c) in counts.iter_mut().enumerate() {
            if s.failed_in_cascade(e) {
                *c += 1;
            }
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / train.len() as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchRow {
    pub branch: usize,
    pub freq: f64,
    pub value: Option<f64>,
    pub count: usize,
}

fn check_test(preds: &[Outcome], test: &[CascadeSample], freq: &[f64]) -> Result<usize> {
    if preds.len() != test.len() {
        return Err(Error::Shape(format!("{} predictions for {} samples", preds.len(), test.len())));
    }
    let ne = freq.len();
    for (i, (p, s)) in preds.iter().zip(test).enumerate() {
        if p.steps.len() != ne || s.failure_step.len() != ne {
            return Err(Error::Shape(format!("expected {ne} branches")).at_sample(i));
        }
    }
    Ok(ne)
}

/// Per branch: wrong final states over the test samples that did not have
/// the branch in their contingency.
pub fn branch_final_state_error(preds: &[Outcome], test: &[CascadeSample], freq: &[f64]) -> Result<Vec<BranchRow>> {
    let ne = check_test(preds, test, freq)?;
    let mut wrong = vec![0usize; ne];
    let mut eligible = vec![0usize; ne];
    for (p, s) in preds.iter().zip(test) {
        let (ps, ts, h) = reconcile(p, &Outcome::from_sample(s))?;
        for e in 0..ne {
            if !s.contingency.is_active(e) {
                continue;
            }
            eligible[e] += 1;
            if (ps[e] < h) != (ts[e] < h) {
                wrong[e] += 1;
            }
        }
    }
    Ok((0..ne)
        .map(|e| BranchRow {
            branch: e,
            freq: freq[e],
            value: (eligible[e] > 0).then(|| wrong[e] as f64 / eligible[e] as f64),
            count: eligible[e],
        })
        .collect())
}

/// Per branch: mean absolute step error over the test samples in which the
/// branch failed in-cascade.
pub fn branch_failure_step_error(preds: &[Outcome], test: &[CascadeSample], freq: &[f64]) -> Result<Vec<BranchRow>> {
    let ne = check_test(preds, test, freq)?;
    let mut total = vec![0u64; ne];
    let mut count = vec![0usize; ne];
    for (p, s) in preds.iter().zip(test) {
        let (ps, ts, _) = reconcile(p, &Outcome::from_sample(s))?;
        for e in 0..ne {
            if s.failed_in_cascade(e) {
                count[e] += 1;
                total[e] += ps[e].abs_diff(ts[e]) as u64;
            }
        }
    }
    Ok((0..ne)
        .map(|e| BranchRow {
            branch: e,
            freq: freq[e],
            value: (count[e] > 0).then(|| total[e] as f64 / count[e] as f64),
            count: count[e],
        })
        .collect())
}

/// Averages per-branch values over branch-frequency bins, skipping absent
/// branches.
pub fn branches_by_frequency(rows: &[BranchRow], binning: &Binning) -> Vec<BinRow> {
    let (values, keys): (Vec<f64>, Vec<f64>) = rows.iter().filter_map(|r| r.value.map(|v| (v, r.freq))).unzip();
    bin_report(&values, &keys, binning)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Overall {
    pub size: Option<f64>,
    pub state: Option<f64>,
    pub step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub pool_id: String,
    pub overall: Overall,
    pub size_by_alpha: Vec<BinRow>,
    pub state_by_alpha: Vec<BinRow>,
    pub step_by_alpha: Vec<BinRow>,
    pub branch_frequency: Vec<f64>,
    pub branch_state: Vec<BranchRow>,
    pub branch_step: Vec<BranchRow>,
    pub state_by_frequency: Vec<BinRow>,
    pub step_by_frequency: Vec<BinRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsConfig {
    pub alpha_bins: Binning,
    pub frequency_bins: Binning,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { alpha_bins: Binning::alpha_default(), frequency_bins: Binning::frequency_default() }
    }
}

/// Full report for `preds` against the `test` samples. `freq` holds the
/// per-branch failure frequencies of the training pool.
pub fn evaluate(
    model_id: &str,
    pool_id: &str,
    preds: &[Outcome],
    test: &[CascadeSample],
    freq: &[f64],
    config: &MetricsConfig,
) -> Result<MetricsReport> {
    check_test(preds, test, freq)?;
    let truths: Vec<Outcome> = test.iter().map(Outcome::from_sample).collect();
    let alphas: Vec<f64> = test.iter().map(|s| s.alpha).collect();
    let mut size = per_sample(preds, &truths, sample_size_error)?;
    let mut state = per_sample(preds, &truths, sample_state_error)?;
    let mut step = per_sample(preds, &truths, sample_step_error)?;
    let branch_state = branch_final_state_error(preds, test, freq)?;
    let branch_step = branch_failure_step_error(preds, test, freq)?;
    Ok(MetricsReport {
        model_id: model_id.to_string(),
        pool_id: pool_id.to_string(),
        size_by_alpha: bin_report(&size, &alphas, &config.alpha_bins),
        state_by_alpha: bin_report(&state, &alphas, &config.alpha_bins),
        step_by_alpha: bin_report(&step, &alphas, &config.alpha_bins),
        overall: Overall { size: stable_mean(&mut size), state: stable_mean(&mut state), step: stable_mean(&mut step) },
        branch_frequency: freq.to_vec(),
        state_by_frequency: branches_by_frequency(&branch_state, &config.frequency_bins),
        step_by_frequency: branches_by_frequency(&branch_step, &config.frequency_bins),
        branch_state,
        branch_step,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_bin_csv<W: std::io::Write>(w: W, rows: &[BinRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin", "value", "count"])?;
    for r in rows {
        out.write_record([r.bin.to_string(), fmt_opt(r.value), r.count.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_branch_csv<W: std::io::Write>(w: W, rows: &[BranchRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["branch", "freq", "value", "count"])?;
    for r in rows {
        out.write_record([r.branch.to_string(), r.freq.to_string(), fmt_opt(r.value), r.count.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

impl MetricsReport {
    /// Every error table with its file stem. Branch frequencies are a
    /// property of the training data, not an error, and are not included.
    pub fn bin_tables(&self) -> [(&'static str, &[BinRow]); 5] {
        [
            ("size_by_alpha", &self.size_by_alpha),
            ("state_by_alpha", &self.state_by_alpha),
            ("step_by_alpha", &self.step_by_alpha),
            ("branch_state_by_freq", &self.state_by_frequency),
            ("branch_step_by_freq", &self.step_by_frequency),
        ]
    }

    pub fn branch_tables(&self) -> [(&'static str, &[BranchRow]); 2] {
        [("branch_state", &self.branch_state), ("branch_step", &self.branch_step)]
    }

    /// Writes one CSV per table into `dir` and returns the paths written.
    pub fn write_csvs(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, rows) in self.bin_tables() {
            let path = dir.join(format!("{name}.csv"));
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_bin_csv(file, rows)?;
            written.push(path);
        }
        for (name, rows) in self.branch_tables() {
            let path = dir.join(format!("{name}.csv"));
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_branch_csv(file, rows)?;
            written.push(path);
        }
        Ok(written)
    }

    /// True when every present cell of every error table is exactly zero.
    pub fn all_zero(&self) -> bool {
        let bins = self.bin_tables().into_iter().flat_map(|(_, r)| r.iter().map(|r| r.value));
        let branches = self.branch_tables().into_iter().flat_map(|(_, r)| r.iter().map(|r| r.value));
        let overall = [self.overall.size, self.overall.state, self.overall.step];
        bins.chain(branches).chain(overall).all(|v| v.is_none_or(|x| x == 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powerflow::ActiveSet;

    fn out(steps: &[u32], t: u32) -> Outcome {
        Outcome::new(steps.to_vec(), t)
    }

    fn sample(cont: &[usize], steps: &[u32], t: u32, alpha: f64) -> CascadeSample {
        CascadeSample {
            contingency: ActiveSet::without(steps.len(), cont).unwrap(),
            alpha,
            injections: vec![],
            failure_step: steps.to_vec(),
            length: t,
        }
    }

    #[test]
    fn size_error_examples() {
        let truth = out(&[0, 0, 1, 1, 3], 3);
        let pred = out(&[0, 0, 1, 3, 3], 3);
        assert_eq!(sample_size_error(&pred, &truth).unwrap(), 0.25);
        assert_eq!(sample_size_error(&truth, &truth).unwrap(), 0.0);
        assert!(sample_size_error(&out(&[2, 2], 2), &out(&[2, 2], 2)).is_err());
        let rows = bin_report(&[0.2, 0.4], &[1.5, 1.5], &Binning::alpha_default());
        let row = rows.iter().find(|r| r.count == 2).unwrap();
        assert!((row.value.unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn state_and_step_examples() {
        let truth = out(&[0, 1, 1], 2);
        assert_eq!(sample_state_error(&truth, &truth).unwrap(), 0.0);
        assert_eq!(sample_state_error(&out(&[0, 2, 1], 2), &truth).unwrap(), 1.0 / 3.0);
        assert_eq!(sample_state_error(&out(&[2, 2, 2], 2), &out(&[0, 0, 1], 2)).unwrap(), 1.0);
        let truth = out(&[0, 3, 3], 3);
        let pred = out(&[0, 1, 3], 3);
        assert_eq!(sample_step_error(&pred, &truth).unwrap(), 2.0 / 3.0);
        assert_eq!(sample_step_error(&truth, &pred).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn horizons_are_reconciled() {
        // prediction stops at T=2 with branch 2 surviving; truth runs to T=4
        let pred = out(&[0, 1, 2], 2);
        let truth = out(&[0, 1, 4], 4);
        let (p, t, h) = reconcile(&pred, &truth).unwrap();
        assert_eq!((p, t, h), (vec![0, 1, 4], vec![0, 1, 4], 4));
        assert_eq!(sample_step_error(&pred, &truth).unwrap(), 0.0);
        assert_eq!(sample_state_error(&pred, &truth).unwrap(), 0.0);
        assert!(reconcile(&out(&[0], 1), &truth).is_err());
    }

    #[test]
    fn branch_frequency_counts_in_cascade_failures() {
        let train = [sample(&[0, 1], &[0, 0, 1, 2], 2, 1.0), sample(&[2, 3], &[1, 2, 0, 0], 2, 1.0)];
        assert_eq!(branch_failure_frequency(&train).unwrap(), vec![0.5, 0.0, 0.5, 0.0]);
        assert!(branch_failure_frequency(&[]).is_err());
    }

    #[test]
    fn branch_state_excludes_contingency_samples() {
        // 100 samples, branch 0 in the contingency of 10; 5 of the rest wrong
        let mut test = Vec::new();
        let mut preds = Vec::new();
        for i in 0..100 {
            if i < 10 {
                test.push(sample(&[0, 1], &[0, 0, 1], 1, 1.0));
                preds.push(out(&[0, 0, 1], 1));
            } else {
                test.push(sample(&[1, 2], &[1, 0, 0], 1, 1.0));
                preds.push(out(&[if i < 15 { 0 } else { 1 }, 0, 0], 1));
            }
        }
        let rows = branch_final_state_error(&preds, &test, &[0.0; 3]).unwrap();
        assert_eq!(rows[0].value, Some(5.0 / 90.0));
        assert_eq!(rows[0].count, 90);
        assert_eq!(rows[1].value, None);
    }

    #[test]
    fn branch_step_error_is_mean_over_failures() {
        let test = [sample(&[1, 2], &[1, 0, 0], 4, 1.0), sample(&[1, 2], &[2, 0, 0], 4, 1.0)];
        let preds = [out(&[2, 0, 0], 4), out(&[5, 0, 0], 5)];
        let rows = branch_failure_step_error(&preds, &test, &[0.0; 3]).unwrap();
        assert_eq!(rows[0].value, Some(2.0));
        assert_eq!(rows[1].value, None);
        assert_eq!(rows[1].count, 0);
    }

    #[test]
    fn bin_edges() {
        let b = Binning::alpha_default();
        assert_eq!(b.index(1.0), Some(0));
        assert_eq!(b.index(2.0), Some(20));
        assert_eq!(b.index(2.0001), None);
        let f = Binning::frequency_default();
        assert_eq!(f.index(0.0), Some(0));
        assert_eq!(f.index(0.04), Some(0));
        assert_eq!(f.index(0.06), Some(1));
        assert_eq!(f.index(1.0), Some(10));
        let rows = bin_report(&[0.7], &[1.0], &b);
        assert_eq!(rows[0].value, Some(0.7));
        assert_eq!(rows[1].value, None);
        assert_eq!(rows[1].count, 0);
    }

    #[test]
    fn oracle_report_is_zero_and_csv_keeps_absent_cells() {
        let test = [sample(&[0, 1], &[0, 0, 1], 2, 1.2), sample(&[1, 2], &[2, 0, 0], 2, 1.7)];
        let preds: Vec<_> = test.iter().map(Outcome::from_sample).collect();
        let freq = branch_failure_frequency(&test).unwrap();
        let report = evaluate("oracle", "p", &preds, &test, &freq, &MetricsConfig::default()).unwrap();
        assert!(report.all_zero());
        let mut buf = Vec::new();
        write_bin_csv(&mut buf, &report.state_by_alpha).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bin,value,count\n"));
        assert!(text.lines().any(|l| l.ends_with(",,0")));
    }
}
