use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vocab_spec::bench::{bench_kernels, KernelKind};
use vocab_spec::config::{ExperimentConfig, StrategyKind, SubsetSource};
use vocab_spec::corpus::{make_zipf_corpus, read_corpus, write_corpus, Provenance};
use vocab_spec::decode::{decode_speculative, RunSummary};
use vocab_spec::experiment::{
    build_strategy, generate_target_data, held_out_states, prepare, prompts, run_sweep, strategy_label,
    strategy_recall_on, train_point,
};
use vocab_spec::freq::{build_freq_table, build_static_subset, FrequencyTable};
use vocab_spec::model::{synthesize_target, ToyLM};
use vocab_spec::train::save_outcome;
use vocab_spec::{Error, Result, SpeculatorWeights, StaticSubset, VocabStrategy};

#[derive(Parser)]
#[command(name = "vocab-spec", version, about = "Dynamic vocabulary speculation for speculative decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed (for `sweep`, replaces the seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Count token frequencies of a corpus file or of target-generated text.
    BuildFreq {
        #[command(flatten)]
        common: Common,
        /// Corpus file written by `gen-corpus`.
        #[arg(long, conflicts_with = "from_target", required_unless_present = "from_target")]
        corpus: Option<PathBuf>,
        /// Count tokens sampled from the target model instead.
        #[arg(long)]
        from_target: bool,
        /// Number of tokens to generate in `--from-target` mode.
        #[arg(long)]
        tokens: Option<usize>,
        /// Target checkpoint directory; synthesized from the config if absent.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Write a seeded Zipf corpus for `build-freq --corpus`.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Train the draft model and speculator; writes checkpoints and logs.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Speculative decoding with the configured strategy.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Output directory of a previous `train` run to reuse.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Naive vs fused indexed-head microbenchmark.
    BenchKernel {
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured parameter sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.bench.seed = seed;
        if let Some(sweep) = cfg.sweep.as_mut() {
            sweep.seeds = vec![seed];
        }
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg.output.dir.as_path();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn print_freq_summary(freq: &FrequencyTable) {
    let top: Vec<String> = freq
        .ranked()
        .into_iter()
        .take(10)
        .map(|t| format!("{t}:{}", freq.counts()[t]))
        .collect();
    println!("total tokens: {}", freq.total());
    println!("distinct tokens: {}", freq.distinct());
    println!("top-10: {}", top.join(" "));
}

fn build_freq(common: &Common, corpus: Option<&Path>, tokens: Option<usize>, target: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let seq = match corpus {
        Some(path) => read_corpus(path, Provenance::Corpus)?,
        None => {
            let model = match target {
                Some(dir) => ToyLM::load(dir)?,
                None => synthesize_target(
                    cfg.model.vocab,
                    cfg.model.target_hidden,
                    cfg.model.context,
                    cfg.seed,
                    cfg.model.structure,
                )?,
            };
            let n = tokens.unwrap_or(cfg.data.tokens);
            if n == 0 {
                return Err(Error::Config("--tokens must be >= 1".into()));
            }
            generate_target_data(&model, n, cfg.data.segment, cfg.data.temperature, cfg.seed)?
        }
    };
    let freq = build_freq_table(seq.tokens.iter().copied(), seq.vocab)?;
    let dir = out_dir(&cfg)?;
    freq.save(dir.join("freq.csv"))?;
    print_freq_summary(&freq);
    Ok(())
}

fn gen_corpus(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let seq = make_zipf_corpus(cfg.model.vocab, cfg.data.zipf_alpha, cfg.data.corpus_tokens, cfg.seed)?;
    let dir = out_dir(&cfg)?;
    write_corpus(dir.join("corpus.vsc"), &seq)?;
    println!("wrote {} tokens to {}", seq.len(), dir.join("corpus.vsc").display());
    Ok(())
}

fn train_cmd(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(&cfg)?.to_path_buf();
    let prepared = prepare(&cfg, cfg.seed)?;
    let outcome = train_point(&cfg, &prepared)?;
    prepared.target.save(dir.join("target"))?;
    save_outcome(&outcome, &dir)?;
    for (source, name) in [(SubsetSource::Corpus, "corpus"), (SubsetSource::Target, "target")] {
        let freq = prepared.frequencies(source)?;
        freq.save(dir.join(format!("freq_{name}.csv")))?;
        build_static_subset(&freq, cfg.strategy.subset_size)?.save(dir.join(format!("static_{name}.txt")))?;
    }
    let states = held_out_states(&cfg, &prepared, &outcome.draft)?;
    let recall = vocab_spec::strategy::recall_at_k(&outcome.speculator, &outcome.draft.head, &states, cfg.strategy.k)?;
    write(dir.join("config.toml"), cfg.to_toml())?;
    println!(
        "held-out draft loss {:.4} -> {:.4}, aux loss {:.4} -> {:.4}",
        outcome.held_out_initial.draft_loss,
        outcome.held_out_final.draft_loss,
        outcome.held_out_initial.aux_loss,
        outcome.held_out_final.aux_loss
    );
    println!("held-out recall@{}: {recall:.4}", cfg.strategy.k);
    if let Some(err) = outcome.grad_check_error {
        println!("gradient spot check max relative error: {err:.3e}");
    }
    Ok(())
}

fn decode_cmd(common: &Common, from: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(&cfg)?.to_path_buf();
    let (target, draft, strategy, recall) = match from {
        Some(src) => {
            let target = ToyLM::load(src.join("target"))?;
            let draft = ToyLM::load(src.join("draft"))?;
            let vocab = target.vocab();
            let strategy = match cfg.strategy.kind {
                StrategyKind::Full => VocabStrategy::Full,
                StrategyKind::Static => {
                    let name = match cfg.strategy.subset_source {
                        SubsetSource::Corpus => "corpus",
                        SubsetSource::Target => "target",
                    };
                    VocabStrategy::Static(StaticSubset::load(src.join(format!("static_{name}.txt")), vocab)?)
                }
                StrategyKind::Dynamic => VocabStrategy::Dynamic {
                    weights: SpeculatorWeights::load(src.join("speculator"))?,
                    k: cfg.strategy.k,
                },
            };
            (target, draft, strategy, None)
        }
        None => {
            let prepared = prepare(&cfg, cfg.seed)?;
            let outcome = train_point(&cfg, &prepared)?;
            let states = held_out_states(&cfg, &prepared, &outcome.draft)?;
            let strategy = build_strategy(&cfg, &prepared, &outcome.speculator)?;
            let recall = strategy_recall_on(&strategy, &outcome.draft, &states)?;
            (prepared.target, outcome.draft, strategy, Some(recall))
        }
    };
    let mut summaries = String::new();
    let mut outputs = String::new();
    for (i, prompt) in prompts(&cfg, cfg.seed).iter().enumerate() {
        let dc = cfg.decode_config(cfg.seed.wrapping_mul(1000).wrapping_add(i as u64));
        let (out, trace) = decode_speculative(&target, &draft, &strategy, prompt, &dc)?;
        write(dir.join(format!("trace_{i}.csv")), trace.to_csv()?)?;
        let config = serde_json::json!({
            "run": i,
            "strategy": strategy_label(&cfg),
            "k": cfg.strategy.k,
            "subset_size": cfg.strategy.subset_size,
            "decode": dc,
        });
        let summary = RunSummary::new(config, &trace)?;
        println!(
            "run {i}: {} tokens, acceptance length {:.3}",
            out.len(),
            summary.acceptance_length
        );
        summaries.push_str(&summary.to_json_line());
        summaries.push('\n');
        let line: Vec<String> = prompt.iter().chain(&out.tokens).map(|t| t.to_string()).collect();
        outputs.push_str(&line.join(" "));
        outputs.push('\n');
    }
    write(dir.join("summary.jsonl"), summaries)?;
    write(dir.join("outputs.txt"), outputs)?;
    if let Some(r) = recall {
        println!("held-out recall of the strategy: {r:.4}");
    }
    Ok(())
}

fn bench_cmd(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(&cfg)?.to_path_buf();
    let report = bench_kernels(&cfg.bench)?;
    write(dir.join("bench.csv"), report.to_csv()?)?;
    for &k in &cfg.bench.ks {
        let naive = report.row(k, KernelKind::Naive).expect("row per k");
        let fused = report.row(k, KernelKind::Fused).expect("row per k");
        println!(
            "k={k}: naive {} ns, fused {} ns, speedup {:.2}x",
            naive.median_ns,
            fused.median_ns,
            report.speedup(k).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn sweep_cmd(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(&cfg)?.to_path_buf();
    let report = run_sweep(&cfg)?;
    write(dir.join("sweep.csv"), report.to_csv()?)?;
    write(dir.join("sweep_throughput.csv"), report.throughput_csv()?)?;
    for row in report.rows.iter().filter(|r| r.seed.is_none()) {
        let value = row.value.map(|v| format!("{}={v}", row.axis)).unwrap_or_default();
        println!(
            "{} {value}: acceptance length {:.3} ± {:.3}, recall {:.4}",
            row.strategy,
            row.acceptance_length,
            row.acceptance_length_std.unwrap_or(0.0),
            row.recall_at_k
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::BuildFreq {
            common,
            corpus,
            tokens,
            target,
            ..
        } => build_freq(common, corpus.as_deref(), *tokens, target.as_deref()),
        Command::GenCorpus { common } => gen_corpus(common),
        Command::Train { common } => train_cmd(common),
        Command::Decode { common, from } => decode_cmd(common, from.as_deref()),
        Command::BenchKernel { common } => bench_cmd(common),
        Command::Sweep { common } => sweep_cmd(common),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
