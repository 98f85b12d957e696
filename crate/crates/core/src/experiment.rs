//! End-to-end pipeline: target synthesis, data generation, frequency
//! subsets, training, recall and decode evaluation, and parameter sweeps.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, StrategyKind, SubsetSource, SweepAxis};
use crate::corpus::{make_zipf_corpus, ordinary_tokens, Provenance, TokenSequence};
use crate::decode::{acceptance_length, decode_speculative, DecodeTrace};
use crate::error::{Error, Result};
use crate::freq::{build_freq_table, build_static_subset, FrequencyTable};
use crate::model::{synthesize_target, SampleMode, ToyLM};
use crate::strategy::{recall_at_k, strategy_recall, SpeculatorWeights, StaticSubset, VocabStrategy};
use crate::tensor::{Matrix, RngStream};
use crate::train::{hidden_states, split_positions, spread_positions, train, TrainOutcome};

const CORPUS_SEED_OFFSET: u64 = 0x5eed_0001;
const TRAIN_SEED_OFFSET: u64 = 0x5eed_0002;
const EVAL_STATES: usize = 2048;

/// Per-seed artifacts shared by every strategy: the target, its generated
/// text and an unrelated external corpus.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub target: ToyLM,
    pub data: TokenSequence,
    pub corpus: TokenSequence,
}

/// `tokens` tokens of target text, as back-to-back sampled continuations of
/// random one-token prompts.
pub fn generate_target_data(target: &ToyLM, tokens: usize, segment: usize, temperature: f32, seed: u64) -> Result<TokenSequence> {
    let mut rng = RngStream::with_stream(seed, 61);
    let mode = SampleMode::Sample { temperature };
    let ordinary = ordinary_tokens(target.vocab());
    let mut out = Vec::with_capacity(tokens + segment);
    while out.len() < tokens {
        let prompt = rng.below(ordinary);
        let cont = target.generate(&[prompt], segment.min(tokens - out.len()), mode, &mut rng)?;
        out.extend_from_slice(&cont.tokens);
    }
    out.truncate(tokens);
    TokenSequence::new(out, target.vocab(), Provenance::TargetGenerated)
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let m = &cfg.model;
    let target = synthesize_target(m.vocab, m.target_hidden, m.context, seed, m.structure)?;
    let data = generate_target_data(&target, cfg.data.tokens, cfg.data.segment, cfg.data.temperature, seed)?;
    let corpus = make_zipf_corpus(m.vocab, cfg.data.zipf_alpha, cfg.data.corpus_tokens, seed.wrapping_add(CORPUS_SEED_OFFSET))?;
    Ok(Prepared {
        seed,
        target,
        data,
        corpus,
    })
}

impl Prepared {
    pub fn frequencies(&self, source: SubsetSource) -> Result<FrequencyTable> {
        let seq = match source {
            SubsetSource::Corpus => &self.corpus,
            SubsetSource::Target => &self.data,
        };
        build_freq_table(seq.tokens.iter().copied(), seq.vocab)
    }

    pub fn subset(&self, source: SubsetSource, size: usize) -> Result<StaticSubset> {
        build_static_subset(&self.frequencies(source)?, size)
    }
}

/// Trains the draft and speculator for one seed.
pub fn train_point(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<TrainOutcome> {
    let tc = cfg.train_config(prepared.seed.wrapping_add(TRAIN_SEED_OFFSET));
    train(&prepared.target, &prepared.data, cfg.model.draft_hidden, &tc)
}

/// Draft hidden states at held-out positions of the generated data.
pub fn held_out_states(cfg: &ExperimentConfig, prepared: &Prepared, draft: &ToyLM) -> Result<Matrix> {
    let (train_range, held) = split_positions(&prepared.data, cfg.train_config(0).held_out_fraction);
    let range = if held.is_empty() { train_range } else { held };
    hidden_states(draft, &prepared.data, &spread_positions(range, EVAL_STATES))
}

/// The strategy described by `cfg.strategy`, using `speculator` for the
/// dynamic kind.
pub fn build_strategy(cfg: &ExperimentConfig, prepared: &Prepared, speculator: &SpeculatorWeights) -> Result<VocabStrategy> {
    let s = &cfg.strategy;
    Ok(match s.kind {
        StrategyKind::Full => VocabStrategy::Full,
        StrategyKind::Static => VocabStrategy::Static(prepared.subset(s.subset_source, s.subset_size)?),
        StrategyKind::Dynamic => VocabStrategy::Dynamic {
            weights: speculator.clone(),
            k: s.k,
        },
    })
}

/// Fraction of evaluation states whose draft argmax the strategy can propose.
pub fn strategy_recall_on(strategy: &VocabStrategy, draft: &ToyLM, states: &Matrix) -> Result<f64> {
    match strategy {
        VocabStrategy::Dynamic { weights, k } => recall_at_k(weights, &draft.head, states, *k),
        other => strategy_recall(other, &draft.head, states),
    }
}

/// Aggregate of several decode runs.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeEval {
    pub traces: Vec<DecodeTrace>,
}

impl DecodeEval {
    fn cycles(&self) -> impl Iterator<Item = &crate::decode::CycleRecord> {
        self.traces.iter().flat_map(|t| t.cycles.iter())
    }

    /// Acceptance length pooled over the cycles of every run.
    pub fn acceptance_length(&self) -> Result<f64> {
        let pooled = DecodeTrace {
            gamma: self.traces.first().map_or(0, |t| t.gamma),
            cycles: self.cycles().cloned().collect(),
            warmup_cycles: 0,
        };
        acceptance_length(&pooled)
    }

    pub fn tokens(&self) -> usize {
        self.traces.iter().map(|t| t.tokens()).sum()
    }

    pub fn tokens_per_gigaflop(&self) -> Option<f64> {
        let flops: u64 = self.traces.iter().map(|t| t.total_flops()).sum();
        (flops > 0).then(|| self.tokens() as f64 / (flops as f64 * 1e-9))
    }

    /// Tokens per second over the timed (post-warmup) cycles.
    pub fn tokens_per_sec(&self) -> Option<f64> {
        let mut tokens = 0usize;
        let mut ns = 0u64;
        for t in &self.traces {
            let skip = if t.cycles.len() > t.warmup_cycles { t.warmup_cycles } else { 0 };
            for c in &t.cycles[skip..] {
                tokens += c.emitted;
                ns += c.wall_ns;
            }
        }
        (ns > 0).then(|| tokens as f64 / (ns as f64 * 1e-9))
    }
}

/// Seeded prompts of ordinary tokens.
pub fn prompts(cfg: &ExperimentConfig, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = RngStream::with_stream(seed, 62);
    let ordinary = ordinary_tokens(cfg.model.vocab);
    (0..cfg.decode.prompts)
        .map(|_| (0..cfg.decode.prompt_len).map(|_| rng.below(ordinary)).collect())
        .collect()
}

/// Runs `cfg.decode.prompts` speculative decodes.
pub fn evaluate_decode(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    draft: &ToyLM,
    strategy: &VocabStrategy,
) -> Result<DecodeEval> {
    let mut traces = Vec::with_capacity(cfg.decode.prompts);
    for (i, prompt) in prompts(cfg, prepared.seed).iter().enumerate() {
        let dc = cfg.decode_config(prepared.seed.wrapping_mul(1000).wrapping_add(i as u64));
        let (_, trace) = decode_speculative(&prepared.target, draft, strategy, prompt, &dc)?;
        traces.push(trace);
    }
    Ok(DecodeEval { traces })
}

/// Metrics of one (strategy, axis value, seed) evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMetrics {
    pub acceptance_length: f64,
    pub tokens_per_gigaflop: Option<f64>,
    pub tokens_per_sec: Option<f64>,
    pub recall_at_k: f64,
}

pub fn measure(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    draft: &ToyLM,
    strategy: &VocabStrategy,
    states: &Matrix,
) -> Result<PointMetrics> {
    let eval = evaluate_decode(cfg, prepared, draft, strategy)?;
    Ok(PointMetrics {
        acceptance_length: eval.acceptance_length()?,
        tokens_per_gigaflop: eval.tokens_per_gigaflop(),
        tokens_per_sec: eval.tokens_per_sec(),
        recall_at_k: strategy_recall_on(strategy, draft, states)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Run,
    Mean,
}

/// One line of `sweep.csv`. Run rows carry a seed and no spread; mean rows
/// carry the across-seed mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: RowKind,
    pub strategy: String,
    pub axis: String,
    pub value: Option<f64>,
    pub seed: Option<u64>,
    pub acceptance_length: f64,
    pub acceptance_length_std: Option<f64>,
    pub tokens_per_gigaflop: Option<f64>,
    pub tokens_per_gigaflop_std: Option<f64>,
    pub recall_at_k: f64,
    pub recall_at_k_std: Option<f64>,
}

/// One line of `sweep_throughput.csv` (wall-clock, so not reproducible).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub kind: RowKind,
    pub strategy: String,
    pub axis: String,
    pub value: Option<f64>,
    pub seed: Option<u64>,
    pub tokens_per_sec: Option<f64>,
    pub tokens_per_sec_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub throughput: Vec<ThroughputRow>,
}

fn write_rows<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn read_rows<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::data(format!("{what}: {e}"))))
        .collect()
}

impl SweepReport {
    pub fn to_csv(&self) -> Result<String> {
        write_rows(&self.rows)
    }

    pub fn throughput_csv(&self) -> Result<String> {
        write_rows(&self.throughput)
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<SweepRow>> {
        read_rows(text, "sweep report")
    }

    pub fn throughput_from_csv(text: &str) -> Result<Vec<ThroughputRow>> {
        read_rows(text, "sweep throughput")
    }

    /// Mean rows of one strategy, in report order.
    pub fn means(&self, strategy: &str) -> Vec<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.kind == RowKind::Mean && r.strategy == strategy)
            .collect()
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn mean_std_opt(xs: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let vals: Option<Vec<f64>> = xs.iter().copied().collect();
    match vals {
        Some(v) if !v.is_empty() => {
            let (m, s) = mean_std(&v);
            (Some(m), Some(s))
        }
        _ => (None, None),
    }
}

/// Label and position of one group of rows in the report.
#[derive(Debug, Clone, PartialEq)]
struct Group {
    strategy: String,
    axis: String,
    value: Option<f64>,
}

fn push_group(report: &mut SweepReport, group: &Group, seeds: &[u64], metrics: &[PointMetrics]) {
    for (&seed, m) in seeds.iter().zip(metrics) {
        report.rows.push(SweepRow {
            kind: RowKind::Run,
            strategy: group.strategy.clone(),
            axis: group.axis.clone(),
            value: group.value,
            seed: Some(seed),
            acceptance_length: m.acceptance_length,
            acceptance_length_std: None,
            tokens_per_gigaflop: m.tokens_per_gigaflop,
            tokens_per_gigaflop_std: None,
            recall_at_k: m.recall_at_k,
            recall_at_k_std: None,
        });
        report.throughput.push(ThroughputRow {
            kind: RowKind::Run,
            strategy: group.strategy.clone(),
            axis: group.axis.clone(),
            value: group.value,
            seed: Some(seed),
            tokens_per_sec: m.tokens_per_sec,
            tokens_per_sec_std: None,
        });
    }
    let acc: Vec<f64> = metrics.iter().map(|m| m.acceptance_length).collect();
    let rec: Vec<f64> = metrics.iter().map(|m| m.recall_at_k).collect();
    let tpg: Vec<Option<f64>> = metrics.iter().map(|m| m.tokens_per_gigaflop).collect();
    let tps: Vec<Option<f64>> = metrics.iter().map(|m| m.tokens_per_sec).collect();
    let (acc_m, acc_s) = mean_std(&acc);
    let (rec_m, rec_s) = mean_std(&rec);
    let (tpg_m, tpg_s) = mean_std_opt(&tpg);
    let (tps_m, tps_s) = mean_std_opt(&tps);
    report.rows.push(SweepRow {
        kind: RowKind::Mean,
        strategy: group.strategy.clone(),
        axis: group.axis.clone(),
        value: group.value,
        seed: None,
        acceptance_length: acc_m,
        acceptance_length_std: Some(acc_s),
        tokens_per_gigaflop: tpg_m,
        tokens_per_gigaflop_std: tpg_s,
        recall_at_k: rec_m,
        recall_at_k_std: Some(rec_s),
    });
    report.throughput.push(ThroughputRow {
        kind: RowKind::Mean,
        strategy: group.strategy.clone(),
        axis: group.axis.clone(),
        value: group.value,
        seed: None,
        tokens_per_sec: tps_m,
        tokens_per_sec_std: tps_s,
    });
}

/// Name used in reports for the configured strategy.
pub fn strategy_label(cfg: &ExperimentConfig) -> String {
    match cfg.strategy.kind {
        StrategyKind::Full => "full".into(),
        StrategyKind::Dynamic => "dynamic".into(),
        StrategyKind::Static => match cfg.strategy.subset_source {
            SubsetSource::Corpus => "static-corpus".into(),
            SubsetSource::Target => "static-target".into(),
        },
    }
}

/// Everything one seed contributes to a sweep.
struct SeedResult {
    /// Metrics per axis value, in value order.
    axis: Vec<PointMetrics>,
    /// Metrics per baseline, in baseline order.
    baselines: Vec<PointMetrics>,
}

fn run_seed(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], baselines: bool, seed: u64) -> Result<SeedResult> {
    let prepared = prepare(cfg, seed)?;
    let mut axis_metrics = Vec::with_capacity(values.len());
    // Training depends only on the config minus k / subset_size, so one
    // trained draft serves every point of those axes.
    let mut shared: Option<(TrainOutcome, Matrix)> = None;
    for &v in values {
        let point = cfg.with_axis(axis, v)?;
        if axis.affects_training() || shared.is_none() {
            let outcome = train_point(&point, &prepared)?;
            let states = held_out_states(&point, &prepared, &outcome.draft)?;
            shared = Some((outcome, states));
        }
        let (outcome, states) = shared.as_ref().expect("trained above");
        let strategy = build_strategy(&point, &prepared, &outcome.speculator)?;
        axis_metrics.push(measure(&point, &prepared, &outcome.draft, &strategy, states)?);
    }
    let mut baseline_metrics = Vec::new();
    if baselines {
        let (outcome, states) = shared.as_ref().expect("at least one value");
        for strategy in baseline_strategies(cfg, &prepared)? {
            baseline_metrics.push(measure(cfg, &prepared, &outcome.draft, &strategy, states)?);
        }
    }
    Ok(SeedResult {
        axis: axis_metrics,
        baselines: baseline_metrics,
    })
}

pub const BASELINE_LABELS: [&str; 3] = ["full", "static-corpus", "static-target"];

/// Full vocabulary, corpus-frequency subset and target-frequency subset,
/// both subsets of `strategy.subset_size` tokens.
pub fn baseline_strategies(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<VocabStrategy>> {
    let size = cfg.strategy.subset_size;
    Ok(vec![
        VocabStrategy::Full,
        VocabStrategy::Static(prepared.subset(SubsetSource::Corpus, size)?),
        VocabStrategy::Static(prepared.subset(SubsetSource::Target, size)?),
    ])
}

/// Worker pool honouring `VOCAB_SPEC_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("VOCAB_SPEC_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("VOCAB_SPEC_THREADS must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// Runs the configured sweep. Seeds run in parallel; the report is
/// assembled in (axis value, seed) order regardless.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("config has no [sweep] section"))?;
    let mut base = cfg.clone();
    base.sweep = None;
    let pool = thread_pool()?;
    let results: Vec<SeedResult> = pool.install(|| {
        sweep
            .seeds
            .par_iter()
            .map(|&seed| run_seed(&base, sweep.axis, &sweep.values, sweep.baselines, seed))
            .collect::<Result<_>>()
    })?;

    let mut report = SweepReport::default();
    let label = strategy_label(cfg);
    for (i, &v) in sweep.values.iter().enumerate() {
        let metrics: Vec<PointMetrics> = results.iter().map(|r| r.axis[i].clone()).collect();
        let group = Group {
            strategy: label.clone(),
            axis: sweep.axis.name().into(),
            value: Some(v),
        };
        push_group(&mut report, &group, &sweep.seeds, &metrics);
    }
    if sweep.baselines {
        for (b, name) in BASELINE_LABELS.iter().enumerate() {
            let metrics: Vec<PointMetrics> = results.iter().map(|r| r.baselines[b].clone()).collect();
            let group = Group {
                strategy: (*name).into(),
                axis: String::new(),
                value: None,
            };
            push_group(&mut report, &group, &sweep.seeds, &metrics);
        }
    }
    Ok(report)
}

/// Summary of a single configured run (train, then decode with the
/// configured strategy).
#[derive(Debug, Clone)]
pub struct RunResult {
    pub prepared: Prepared,
    pub outcome: TrainOutcome,
    pub metrics: PointMetrics,
    pub eval: DecodeEval,
}

pub fn run_single(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let prepared = prepare(cfg, cfg.seed)?;
    let outcome = train_point(cfg, &prepared)?;
    let states = held_out_states(cfg, &prepared, &outcome.draft)?;
    let strategy = build_strategy(cfg, &prepared, &outcome.speculator)?;
    let eval = evaluate_decode(cfg, &prepared, &outcome.draft, &strategy)?;
    let metrics = PointMetrics {
        acceptance_length: eval.acceptance_length()?,
        tokens_per_gigaflop: eval.tokens_per_gigaflop(),
        tokens_per_sec: eval.tokens_per_sec(),
        recall_at_k: strategy_recall_on(&strategy, &outcome.draft, &states)?,
    };
    Ok(RunResult {
        prepared,
        outcome,
        metrics,
        eval,
    })
}

/// Per-axis-value mean acceptance lengths and pooled standard deviation
/// of a strategy's rows, keyed by value bits for exact lookup.
pub fn axis_summary(report: &SweepReport, strategy: &str) -> BTreeMap<u64, (f64, f64)> {
    report
        .means(strategy)
        .into_iter()
        .filter_map(|r| {
            r.value
                .map(|v| (v.to_bits(), (r.acceptance_length, r.acceptance_length_std.unwrap_or(0.0))))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SweepSection;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.vocab = 64;
        cfg.model.target_hidden = 16;
        cfg.model.draft_hidden = 8;
        cfg.model.context = 2;
        cfg.data.tokens = 2000;
        cfg.data.corpus_tokens = 2000;
        cfg.train.steps = 30;
        cfg.train.d_prime_ratio = 0.25;
        cfg.strategy.k = 8;
        cfg.strategy.subset_size = 16;
        cfg.decode.prompts = 2;
        cfg.decode.max_new_tokens = 16;
        cfg
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.290_994_448_735_805_6).abs() < 1e-12);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn generated_data_is_deterministic() {
        let target = synthesize_target(64, 8, 2, 1, 0.5).unwrap();
        let a = generate_target_data(&target, 500, 50, 1.0, 3).unwrap();
        let b = generate_target_data(&target, 500, 50, 1.0, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 500);
        assert_eq!(a.provenance, Provenance::TargetGenerated);
    }

    #[test]
    fn k_sweep_shape_and_determinism() {
        let mut cfg = tiny();
        cfg.sweep = Some(SweepSection {
            axis: SweepAxis::K,
            values: vec![1.0, 4.0, 16.0],
            seeds: vec![0, 1, 2, 3, 4],
            baselines: false,
        });
        let a = run_sweep(&cfg).unwrap();
        let b = run_sweep(&cfg).unwrap();
        assert_eq!(a.rows.len(), 18);
        assert_eq!(a.rows.iter().filter(|r| r.kind == RowKind::Mean).count(), 3);
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        let means = a.means("dynamic");
        for pair in means.windows(2) {
            assert!(pair[0].recall_at_k <= pair[1].recall_at_k);
        }
        let text = a.to_csv().unwrap();
        assert_eq!(SweepReport::rows_from_csv(&text).unwrap(), a.rows);
        let tp = a.throughput_csv().unwrap();
        assert_eq!(SweepReport::throughput_from_csv(&tp).unwrap(), a.throughput);
    }

    #[test]
    fn baselines_are_reported() {
        let mut cfg = tiny();
        cfg.sweep = Some(SweepSection {
            axis: SweepAxis::K,
            values: vec![4.0],
            seeds: vec![0, 1],
            baselines: true,
        });
        let r = run_sweep(&cfg).unwrap();
        for name in BASELINE_LABELS {
            assert_eq!(r.means(name).len(), 1, "{name}");
        }
        let full = r.means("full")[0];
        assert_eq!(full.recall_at_k, 1.0);
    }
}
