//! Wall-clock microbenchmark of the naive and fused indexed heads.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{indexed_logits_fused_batch, indexed_logits_naive_batch, IndexList, KernelStats};
use crate::tensor::{Matrix, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub vocab: usize,
    pub dim: usize,
    pub ks: Vec<usize>,
    pub batch: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Spread fused-kernel tiles over the rayon pool.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            vocab: 131_072,
            dim: 1024,
            ks: vec![512, 2048, 8192],
            batch: 16,
            repetitions: 11,
            warmup: 2,
            parallel: false,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be >= 1"));
        }
        if self.vocab == 0 || self.dim == 0 || self.batch == 0 {
            return Err(Error::config("vocab, dim and batch must be >= 1"));
        }
        if self.ks.is_empty() {
            return Err(Error::config("ks must list at least one k"));
        }
        if let Some(&k) = self.ks.iter().find(|&&k| k == 0 || k > self.vocab) {
            return Err(Error::config(format!("k = {k} is infeasible for vocabulary {}", self.vocab)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Naive,
    Fused,
}

/// One CSV row: timing percentiles and per-call stats for one kernel at one k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub vocab: usize,
    pub dim: usize,
    pub k: usize,
    pub batch: usize,
    pub kernel: KernelKind,
    pub median_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
    pub flops: u64,
    pub bytes_read: u64,
    pub alloc_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, k: usize, kernel: KernelKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.k == k && r.kernel == kernel)
    }

    /// Naive median over fused median at `k`.
    pub fn speedup(&self, k: usize) -> Option<f64> {
        let naive = self.row(k, KernelKind::Naive)?;
        let fused = self.row(k, KernelKind::Fused)?;
        (fused.median_ns > 0).then(|| naive.median_ns as f64 / fused.median_ns as f64)
    }

    /// CSV `vocab,dim,k,batch,kernel,median_ns,p10_ns,p90_ns,flops,bytes_read,alloc_bytes`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .map(|r| r.map_err(|e| Error::data(format!("bench report: {e}"))))
            .collect::<Result<_>>()?;
        Ok(BenchReport { rows })
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[u64], pct: f64) -> u64 {
    assert!(!sorted.is_empty());
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn time_runs(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<KernelStats>) -> Result<(Vec<u64>, KernelStats)> {
    let mut stats = KernelStats::default();
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        stats = f()?;
        samples.push(start.elapsed().as_nanos() as u64);
    }
    samples.sort_unstable();
    Ok((samples, stats))
}

/// Runs both kernels for every `k` in the config on a seeded random
/// embedding matrix. Rows are ordered by `k`, naive before fused.
pub fn bench_kernels(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rng = RngStream::with_stream(cfg.seed, 41);
    let u = Matrix::uniform(cfg.vocab, cfg.dim, 1.0, &mut rng);
    let h_batch = Matrix::uniform(cfg.batch, cfg.dim, 1.0, &mut rng);
    bench_on(&u, &h_batch, cfg, &mut rng)
}

/// Like [`bench_kernels`] with a caller-provided embedding and batch.
pub fn bench_on(u: &Matrix, h_batch: &Matrix, cfg: &BenchConfig, rng: &mut RngStream) -> Result<BenchReport> {
    cfg.validate()?;
    let mut report = BenchReport::default();
    for &k in &cfg.ks {
        let picked = rand::seq::index::sample(rng, u.rows(), k).into_vec();
        let idx = IndexList::new(picked, u.rows())?;
        let (naive, naive_stats) = time_runs(cfg.warmup, cfg.repetitions, || {
            Ok(std::hint::black_box(indexed_logits_naive_batch(u, &idx, h_batch)?).1)
        })?;
        let (fused, fused_stats) = time_runs(cfg.warmup, cfg.repetitions, || {
            Ok(std::hint::black_box(indexed_logits_fused_batch(u, &idx, h_batch, cfg.parallel)?).1)
        })?;
        for (kernel, samples, stats) in [
            (KernelKind::Naive, naive, naive_stats),
            (KernelKind::Fused, fused, fused_stats),
        ] {
            report.rows.push(BenchRow {
                vocab: u.rows(),
                dim: u.cols(),
                k,
                batch: h_batch.rows(),
                kernel,
                median_ns: percentile(&samples, 50.0),
                p10_ns: percentile(&samples, 10.0),
                p90_ns: percentile(&samples, 90.0),
                flops: stats.flops,
                bytes_read: stats.bytes_read,
                alloc_bytes: stats.intermediate_bytes_allocated,
            });
        }
    }
    Ok(report)
}
