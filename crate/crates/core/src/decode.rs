//! Chain speculative decoding against a target model, with per-cycle cost
//! and timing records.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Provenance, TokenSequence};
use crate::error::{Error, Result};
use crate::model::ToyLM;
use crate::strategy::VocabStrategy;
use crate::tensor::{argmax, sample_index, softmax_with_temperature, ProbDist, RngStream, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DecodeMode {
    Greedy,
    LosslessSampling { temperature: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Draft tokens proposed per cycle.
    pub gamma: usize,
    pub mode: DecodeMode,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            gamma: 4,
            mode: DecodeMode::Greedy,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::config("gamma must be >= 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be >= 1"));
        }
        if let DecodeMode::LosslessSampling { temperature } = self.mode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::config(format!("temperature must be positive, got {temperature}")));
            }
        }
        Ok(())
    }
}

/// One draft-then-verify cycle. Autoregressive decoding records one cycle
/// per token with nothing proposed.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub proposed: Vec<usize>,
    pub accepted: usize,
    /// Token the target contributes after the accepted prefix.
    pub bonus: usize,
    /// Tokens actually appended to the output (after EOS/length truncation).
    pub emitted: usize,
    pub draft_flops: u64,
    pub target_flops: u64,
    pub wall_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeTrace {
    pub gamma: usize,
    pub cycles: Vec<CycleRecord>,
    /// Leading cycles excluded from wall-time totals.
    pub warmup_cycles: usize,
}

impl DecodeTrace {
    pub fn tokens(&self) -> usize {
        self.cycles.iter().map(|c| c.emitted).sum()
    }

    pub fn draft_flops(&self) -> u64 {
        self.cycles.iter().map(|c| c.draft_flops).sum()
    }

    pub fn target_flops(&self) -> u64 {
        self.cycles.iter().map(|c| c.target_flops).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.draft_flops() + self.target_flops()
    }

    fn timed(&self) -> &[CycleRecord] {
        let skip = if self.cycles.len() > self.warmup_cycles { self.warmup_cycles } else { 0 };
        &self.cycles[skip..]
    }

    /// Wall time of the cycles after warmup.
    pub fn wall_ns(&self) -> u64 {
        self.timed().iter().map(|c| c.wall_ns).sum()
    }

    /// CSV `cycle,proposed,accepted,bonus,draft_flops,target_flops,wall_ns`;
    /// `proposed` is space-separated token ids.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (i, c) in self.cycles.iter().enumerate() {
            let proposed = c.proposed.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
            w.serialize(TraceRow {
                cycle: i,
                proposed,
                accepted: c.accepted,
                bonus: c.bonus,
                draft_flops: c.draft_flops,
                target_flops: c.target_flops,
                wall_ns: c.wall_ns,
            })
            .map_err(|e| Error::data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub cycle: usize,
    pub proposed: String,
    pub accepted: usize,
    pub bonus: usize,
    pub draft_flops: u64,
    pub target_flops: u64,
    pub wall_ns: u64,
}

pub fn trace_rows_from_csv(text: &str) -> Result<Vec<TraceRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::data(format!("decode trace: {e}"))))
        .collect()
}

/// Mean of `accepted + 1` over cycles.
pub fn acceptance_length(trace: &DecodeTrace) -> Result<f64> {
    if trace.cycles.is_empty() {
        return Err(Error::precondition("acceptance length of an empty trace"));
    }
    let sum: usize = trace.cycles.iter().map(|c| c.accepted + 1).sum();
    Ok(sum as f64 / trace.cycles.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub tokens_per_sec: Option<f64>,
    pub tokens_per_gigaflop: Option<f64>,
}

/// Emitted tokens per second (warmup excluded) and per billion counted flops.
pub fn throughput_proxy(trace: &DecodeTrace) -> Throughput {
    let timed_tokens: usize = trace.timed().iter().map(|c| c.emitted).sum();
    let wall = trace.wall_ns();
    let flops = trace.total_flops();
    Throughput {
        tokens_per_sec: (wall > 0).then(|| timed_tokens as f64 / (wall as f64 * 1e-9)),
        tokens_per_gigaflop: (flops > 0).then(|| trace.tokens() as f64 / (flops as f64 * 1e-9)),
    }
}

/// One JSON-lines record summarising a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: serde_json::Value,
    pub acceptance_length: f64,
    pub tokens_per_sec: Option<f64>,
    pub tokens_per_gigaflop: Option<f64>,
}

impl RunSummary {
    pub fn new(config: serde_json::Value, trace: &DecodeTrace) -> Result<Self> {
        let t = throughput_proxy(trace);
        Ok(RunSummary {
            config,
            acceptance_length: acceptance_length(trace)?,
            tokens_per_sec: t.tokens_per_sec,
            tokens_per_gigaflop: t.tokens_per_gigaflop,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("summary serializes")
    }
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos().min(u64::MAX as u128) as u64
}

fn check_prompt(model: &ToyLM, prompt: &[usize]) -> Result<()> {
    if let Some(&t) = prompt.iter().find(|&&t| t >= model.vocab()) {
        return Err(Error::data(format!(
            "prompt token {t} is outside vocabulary of size {}",
            model.vocab()
        )));
    }
    Ok(())
}

/// Appends `token` to `out` unless the run already ended; returns whether
/// decoding should continue afterwards.
fn push_token(out: &mut Vec<usize>, token: usize, eos: usize, max: usize) -> bool {
    out.push(token);
    token != eos && out.len() < max
}

/// Plain decoding with the target: one forward per emitted token.
pub fn decode_autoregressive(target: &ToyLM, prompt: &[usize], cfg: &DecodeConfig) -> Result<(TokenSequence, DecodeTrace)> {
    cfg.validate()?;
    check_prompt(target, prompt)?;
    let mut rng = RngStream::with_stream(cfg.seed, 31);
    let mut history = prompt.to_vec();
    let mut out = Vec::new();
    let mut trace = DecodeTrace {
        gamma: 0,
        cycles: Vec::new(),
        warmup_cycles: 1,
    };
    let forward_flops = target.forward_stats().flops;
    loop {
        let start = Instant::now();
        let logits = target.logits(&history)?;
        let token = match cfg.mode {
            DecodeMode::Greedy => argmax(logits.as_slice()),
            DecodeMode::LosslessSampling { temperature } => softmax_with_temperature(&logits, temperature)?.sample(&mut rng),
        };
        history.push(token);
        let go_on = push_token(&mut out, token, target.eos(), cfg.max_new_tokens);
        trace.cycles.push(CycleRecord {
            proposed: Vec::new(),
            accepted: 0,
            bonus: token,
            emitted: 1,
            draft_flops: 0,
            target_flops: forward_flops,
            wall_ns: elapsed_ns(start),
        });
        if !go_on {
            break;
        }
    }
    Ok((TokenSequence::new(out, target.vocab(), Provenance::TargetGenerated)?, trace))
}

/// Checks that the strategy was built for `vocab` tokens and `hidden` width.
fn check_strategy(strategy: &VocabStrategy, vocab: usize, hidden: usize) -> Result<()> {
    match strategy {
        VocabStrategy::Full => Ok(()),
        VocabStrategy::Static(subset) if subset.vocab() != vocab => Err(Error::config(format!(
            "static subset covers vocabulary {} but the models use {vocab}",
            subset.vocab()
        ))),
        VocabStrategy::Dynamic { weights, k } => {
            if weights.vocab() != vocab || weights.hidden() != hidden {
                Err(Error::config(format!(
                    "speculator is {}x{} (vocab x hidden) but the draft is {vocab}x{hidden}",
                    weights.vocab(),
                    weights.hidden()
                )))
            } else if *k == 0 || *k > vocab {
                Err(Error::config(format!("k must lie in [1, {vocab}], got {k}")))
            } else {
                Ok(())
            }
        }
        VocabStrategy::Static(_) => Ok(()),
    }
}

fn restricted(logits: &Vector, domain: &crate::kernels::IndexList, temperature: f32) -> Result<ProbDist> {
    softmax_with_temperature(logits, temperature)?.with_domain(domain.clone())
}

/// Draft-then-verify decoding. The draft proposes `gamma` tokens per cycle
/// through `strategy`; the target scores all `gamma + 1` positions and keeps
/// the prefix it agrees with plus one token of its own.
pub fn decode_speculative(
    target: &ToyLM,
    draft: &ToyLM,
    strategy: &VocabStrategy,
    prompt: &[usize],
    cfg: &DecodeConfig,
) -> Result<(TokenSequence, DecodeTrace)> {
    cfg.validate()?;
    if draft.vocab() != target.vocab() {
        return Err(Error::config(format!(
            "draft vocabulary {} differs from target vocabulary {}",
            draft.vocab(),
            target.vocab()
        )));
    }
    check_strategy(strategy, draft.vocab(), draft.hidden())?;
    check_prompt(target, prompt)?;
    let gamma = cfg.gamma;
    let mut rng = RngStream::with_stream(cfg.seed, 31);
    let mut history = prompt.to_vec();
    let mut out = Vec::new();
    let mut trace = DecodeTrace {
        gamma,
        cycles: Vec::new(),
        warmup_cycles: 1,
    };
    let target_forward = target.forward_stats().flops;
    let backbone = draft.backbone_stats().flops;
    let vocab = target.vocab();
    let mut residual = vec![0.0f32; vocab];

    loop {
        let start = Instant::now();
        // Draft phase.
        let mut proposed = Vec::with_capacity(gamma);
        let mut draft_dists = Vec::with_capacity(gamma);
        let mut draft_flops = 0u64;
        let mut ctx = history.clone();
        for _ in 0..gamma {
            let h = draft.hidden_state(&ctx)?;
            let sel = strategy.select(&draft.head, &h)?;
            draft_flops += backbone + sel.cost.flops;
            let token = match cfg.mode {
                DecodeMode::Greedy => sel.argmax_token(),
                DecodeMode::LosslessSampling { temperature } => {
                    let q = restricted(&sel.exact_logits, &sel.candidates, temperature)?;
                    let t = q.sample(&mut rng);
                    draft_dists.push(q);
                    t
                }
            };
            proposed.push(token);
            ctx.push(token);
        }

        // Verify phase: target logits after each proposed prefix.
        let mut target_logits = Vec::with_capacity(gamma + 1);
        for i in 0..=gamma {
            ctx.truncate(history.len() + i);
            ctx.extend_from_slice(&proposed[ctx.len() - history.len()..i]);
            target_logits.push(target.logits(&ctx)?);
        }

        let mut accepted = 0;
        let bonus = match cfg.mode {
            DecodeMode::Greedy => loop {
                let t = argmax(target_logits[accepted].as_slice());
                if accepted == gamma || proposed[accepted] != t {
                    break t;
                }
                accepted += 1;
            },
            DecodeMode::LosslessSampling { temperature } => loop {
                let p = softmax_with_temperature(&target_logits[accepted], temperature)?;
                if accepted == gamma {
                    break p.sample(&mut rng);
                }
                let x = proposed[accepted];
                let q = &draft_dists[accepted];
                let (px, qx) = (p.prob_of(x) as f64, q.prob_of(x) as f64);
                // Accept with probability min(1, p(x) / q(x)).
                if rng.next_f64() * qx < px {
                    accepted += 1;
                    continue;
                }
                let mut mass = 0.0f64;
                for (r, (tok, &pt)) in residual.iter_mut().zip(p.probs().as_slice().iter().enumerate()) {
                    *r = (pt - q.prob_of(tok)).max(0.0);
                    mass += *r as f64;
                }
                break if mass > 0.0 {
                    sample_index(&residual, &mut rng)
                } else {
                    p.sample(&mut rng)
                };
            },
        };

        let mut emitted = 0;
        let mut go_on = true;
        for &t in proposed[..accepted].iter().chain(std::iter::once(&bonus)) {
            emitted += 1;
            history.push(t);
            go_on = push_token(&mut out, t, target.eos(), cfg.max_new_tokens);
            if !go_on {
                break;
            }
        }
        trace.cycles.push(CycleRecord {
            proposed,
            accepted,
            bonus,
            emitted,
            draft_flops,
            target_flops: (gamma as u64 + 1) * target_forward,
            wall_ns: elapsed_ns(start),
        });
        if !go_on {
            break;
        }
    }
    Ok((TokenSequence::new(out, vocab, Provenance::TargetGenerated)?, trace))
}
