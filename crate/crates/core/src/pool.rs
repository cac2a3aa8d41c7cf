//! Cascade datasets: generation, splitting and JSONL persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{simulate_cascade, SimOptions};
use crate::error::{Error, Result};
use crate::grid::{check_schema, Grid};
use crate::par::Execution;
use crate::powerflow::ActiveSet;

pub const POOL_SCHEMA: &str = "gridcascade.pool";
pub const POOL_SCHEMA_VERSION: u32 = 1;

/// One simulated cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeSample {
    pub contingency: ActiveSet,
    pub alpha: f64,
    /// Scaled injections `alpha * P0` in MW.
    pub injections: Vec<f64>,
    pub failure_step: Vec<u32>,
    pub length: u32,
}

impl CascadeSample {
    /// True if branch `e` failed during the cascade, not as part of the
    /// initial contingency.
    pub fn failed_in_cascade(&self, e: usize) -> bool {
        self.failure_step[e] >= 1 && self.failure_step[e] < self.length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPool {
    pub grid_id: String,
    pub seed: u64,
    pub samples: Vec<CascadeSample>,
    pub split_tag: SplitTag,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolConfig {
    pub alpha_range: (f64, f64),
    /// Branches removed by each initial contingency.
    pub outages: usize,
    pub sim: SimOptions,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            alpha_range: (1.0, 2.0),
            outages: 2,
            sim: SimOptions::default(),
        }
    }
}

/// Draws `k` distinct branches uniformly without replacement and marks them
/// failed.
pub fn random_contingency<R: Rng + ?Sized>(rng: &mut R, num_branches: usize, k: usize) -> Result<ActiveSet> {
    if k >= num_branches {
        return Err(Error::InvalidArgument(format!(
            "cannot fail {k} of {num_branches} branches"
        )));
    }
    let failed = rand::seq::index::sample(rng, num_branches, k).into_vec();
    ActiveSet::without(num_branches, &failed)
}

/// Per-sample generator: stream `index` of the pool seed.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate_pool(grid: &Grid, m: usize, seed: u64, config: PoolConfig) -> Result<DataPool> {
    generate_pool_with(grid, m, seed, config, Execution::default())
}

/// Generates `m` samples; the result depends only on `seed`, never on the
/// execution strategy.
pub fn generate_pool_with(
    grid: &Grid,
    m: usize,
    seed: u64,
    config: PoolConfig,
    exec: Execution,
) -> Result<DataPool> {
    let (lo, hi) = config.alpha_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::InvalidArgument(format!("invalid alpha range [{lo}, {hi}]")));
    }
    if !grid.capacities_complete() {
        return Err(Error::InvalidGrid("grid capacities must be set before generating a pool".into()));
    }
    let base = grid.default_injections();
    let samples = exec.map_range(m, |i| {
        let mut rng = sample_rng(seed, i);
        let contingency = random_contingency(&mut rng, grid.num_branches(), config.outages)?;
        let alpha = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let injections: Vec<f64> = base.iter().map(|p| alpha * p).collect();
        let result = simulate_cascade(grid, &contingency, &injections, config.sim).map_err(|e| e.at_sample(i))?;
        Ok(CascadeSample {
            contingency,
            alpha,
            injections,
            failure_step: result.failure_step,
            length: result.length,
        })
    });
    Ok(DataPool {
        grid_id: grid.id().to_string(),
        seed,
        samples: samples.into_iter().collect::<Result<_>>()?,
        split_tag: SplitTag::All,
    })
}

/// Random disjoint split into `floor(fraction * M)` train samples and the rest.
pub fn split_pool(pool: &DataPool, train_fraction: f64, seed: u64) -> Result<(DataPool, DataPool)> {
    if pool.samples.is_empty() {
        return Err(Error::Empty("pool"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let m = pool.samples.len();
    let n_train = (train_fraction * m as f64).floor() as usize;
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train_idx, test_idx) = order.split_at(n_train);
    // keep the original relative order inside each part
    let pick = |idx: &[usize], tag| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        DataPool {
            grid_id: pool.grid_id.clone(),
            seed: pool.seed,
            samples: idx.iter().map(|&i| pool.samples[i].clone()).collect(),
            split_tag: tag,
        }
    };
    Ok((pick(train_idx, SplitTag::Train), pick(test_idx, SplitTag::Test)))
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    grid_id: String,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<SplitTag>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    i: usize,
    alpha: f64,
    s0: Vec<u8>,
    p: Vec<f64>,
    f: Vec<u32>,
    #[serde(rename = "T")]
    t: u32,
}

impl DataPool {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes the pool as JSON Lines, gzip-compressed when `compress` is set.
    pub fn write(&self, path: impl AsRef<Path>, compress: bool) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        if compress {
            let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
            self.write_to(&mut enc).map_err(|e| Error::io(path, e))?;
            enc.finish().and_then(|mut w| w.flush()).map_err(|e| Error::io(path, e))?;
        } else {
            let mut w = BufWriter::new(file);
            self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = Header {
            schema: format!("{POOL_SCHEMA}/{POOL_SCHEMA_VERSION}"),
            grid_id: self.grid_id.clone(),
            seed: self.seed,
            split: match self.split_tag {
                SplitTag::All => None,
                tag => Some(tag),
            },
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for (i, s) in self.samples.iter().enumerate() {
            let line = Line {
                i,
                alpha: s.alpha,
                s0: s.contingency.mask().iter().map(|&a| a as u8).collect(),
                p: s.injections.clone(),
                f: s.failure_step.clone(),
                t: s.length,
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a pool written by [`DataPool::write`]; gzip input is detected
    /// from its magic bytes.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 2];
        let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        if n == 2 && magic == [0x1f, 0x8b] {
            Self::read_from(BufReader::new(GzDecoder::new(file)))
        } else {
            Self::read_from(BufReader::new(file))
        }
        .map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header = loop {
            match lines.next() {
                None => {
                    log::warn!("pool file is empty");
                    return Ok(DataPool {
                        grid_id: String::new(),
                        seed: 0,
                        samples: Vec::new(),
                        split_tag: SplitTag::All,
                    });
                }
                Some((_, line)) => {
                    let line = line.map_err(|e| Error::io("<pool>", e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break line;
                }
            }
        };
        let header: Header = serde_json::from_str(&header)
            .map_err(|e| Error::Syntax { line: 1, message: format!("pool header: {e}") })?;
        check_schema(&header.schema, POOL_SCHEMA, POOL_SCHEMA_VERSION)?;
        let mut samples = Vec::new();
        let mut width: Option<(usize, usize)> = None;
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::io("<pool>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Line = serde_json::from_str(&line)
                .map_err(|e| Error::Syntax { line: line_no, message: e.to_string() })?;
            let bad = |message: String| Error::Syntax { line: line_no, message };
            if rec.s0.len() != rec.f.len() {
                return Err(bad(format!("{} contingency entries but {} failure steps", rec.s0.len(), rec.f.len())));
            }
            match width {
                None => width = Some((rec.f.len(), rec.p.len())),
                Some(w) if w != (rec.f.len(), rec.p.len()) => {
                    return Err(bad("sample dimensions differ from earlier samples".into()))
                }
                _ => {}
            }
            if rec.f.iter().any(|&f| f > rec.t) {
                return Err(bad(format!("failure step exceeds T = {}", rec.t)));
            }
            samples.push(CascadeSample {
                contingency: ActiveSet::from_mask(rec.s0.iter().map(|&b| b != 0).collect()),
                alpha: rec.alpha,
                injections: rec.p,
                failure_step: rec.f,
                length: rec.t,
            });
        }
        Ok(DataPool {
            grid_id: header.grid_id,
            seed: header.seed,
            samples,
            split_tag: header.split.unwrap_or(SplitTag::All),
        })
    }

    /// Samples whose load scaling lies in `[lo, hi]`.
    pub fn filter_alpha(&self, lo: f64, hi: f64) -> DataPool {
        DataPool {
            grid_id: self.grid_id.clone(),
            seed: self.seed,
            samples: self
                .samples
                .iter()
                .filter(|s| s.alpha >= lo && s.alpha <= hi)
                .cloned()
                .collect(),
            split_tag: self.split_tag,
        }
    }

    /// Longest cascade in the pool.
    pub fn max_length(&self) -> u32 {
        self.samples.iter().map(|s| s.length).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::fixtures::tri3;

    #[test]
    fn contingency_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_contingency(&mut rng, 3, 0).unwrap(), ActiveSet::all(3));
        assert!(random_contingency(&mut rng, 3, 3).is_err());
        let s = random_contingency(&mut rng, 10, 2).unwrap();
        assert_eq!(s.count_active(), 8);
    }

    #[test]
    fn contingency_is_uniform_over_pairs() {
        // chi-square against the uniform law over the 3 pairs, 2 dof;
        // 13.8 is the 0.999 quantile
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let s = random_contingency(&mut rng, 3, 2).unwrap();
            let survivor = (0..3).find(|&e| s.is_active(e)).unwrap();
            counts[survivor] += 1;
        }
        let expected = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 13.8, "chi2 = {chi2}, counts {counts:?}");
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn pool_is_deterministic_and_consistent() {
        let grid = tri3([0.6, 0.6, 0.3]);
        let a = generate_pool(&grid, 100, 7, PoolConfig::default()).unwrap();
        let b = generate_pool_with(&grid, 100, 7, PoolConfig::default(), Execution::Sequential).unwrap();
        assert_eq!(a, b);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.write_to(&mut buf_a).unwrap();
        b.write_to(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
        for s in &a.samples {
            assert!((1.0..=2.0).contains(&s.alpha));
            assert_eq!(s.contingency.count_active(), 1);
            for e in 0..3 {
                assert_eq!(s.failure_step[e] == 0, !s.contingency.is_active(e));
            }
            for (p, p0) in s.injections.iter().zip(grid.default_injections()) {
                assert_eq!(*p, s.alpha * p0);
            }
        }
    }

    #[test]
    fn fixed_alpha_pool() {
        let grid = tri3([0.6, 0.6, 0.3]);
        let cfg = PoolConfig { alpha_range: (1.5, 1.5), ..Default::default() };
        let pool = generate_pool(&grid, 20, 3, cfg).unwrap();
        assert!(pool.samples.iter().all(|s| s.alpha == 1.5));
    }

    #[test]
    fn split_sizes() {
        let grid = tri3([0.6, 0.6, 0.3]);
        let pool = generate_pool(&grid, 10, 1, PoolConfig::default()).unwrap();
        let (train, test) = split_pool(&pool, 0.9, 5).unwrap();
        assert_eq!((train.len(), test.len()), (9, 1));
        assert_eq!(train.split_tag, SplitTag::Train);
        let mut all: Vec<_> = train.samples.iter().chain(&test.samples).map(|s| s.alpha.to_bits()).collect();
        let mut orig: Vec<_> = pool.samples.iter().map(|s| s.alpha.to_bits()).collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
        let empty = DataPool { samples: vec![], ..pool.clone() };
        assert!(matches!(split_pool(&empty, 0.9, 1), Err(Error::Empty(_))));
        assert!(split_pool(&pool, 1.0, 1).is_err());
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let grid = tri3([0.6, 0.6, 0.3]);
        let pool = generate_pool(&grid, 100, 11, PoolConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for compress in [false, true] {
            let path = dir.path().join(format!("pool{compress}.jsonl"));
            pool.write(&path, compress).unwrap();
            assert_eq!(DataPool::read(&path).unwrap(), pool);
        }

        let mut buf = Vec::new();
        pool.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let idx = lines[2].find(",\"f\":").unwrap();
        let end = lines[2].find(",\"T\"").unwrap();
        lines[2].replace_range(idx..end, "");
        let broken = lines.join("\n");
        let err = DataPool::read_from(broken.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("`f`"), "{msg}");

        let truncated = &text[..text.len() - 10];
        assert!(DataPool::read_from(truncated.as_bytes()).is_err());

        let empty = DataPool::read_from("".as_bytes()).unwrap();
        assert!(empty.is_empty());
    }
}
