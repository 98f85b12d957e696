//! Distillation of the draft model and the vocabulary speculator from the
//! target model's full softmax.
//!
//! Per example, with `p` the target distribution, `z = U h` the draft logits
//! and `s = W_vocab W_down h` the speculator scores:
//!
//! ```text
//! draft_loss = CE(p, softmax(z))
//! aux_loss   = CE(p, softmax(s))
//! total      = draft_loss + lambda * aux_loss
//! ```
//!
//! Gradients are derived by hand. In [`AuxGradient::Joint`] mode the aux
//! branch flows through `h` into the backbone; `U` only ever sees the
//! draft-loss gradient since `s` does not depend on it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::ToyLM;
use crate::strategy::SpeculatorWeights;
use crate::tensor::{softmax_into, Matrix, ProbDist, RngStream, Vector};

/// How the speculator loss reaches the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxGradient {
    /// `lambda * aux_loss` is part of the objective for every parameter.
    Joint,
    /// The speculator trains on `aux_loss` against a stop-gradient copy of
    /// `h`; the backbone and `U` only see `draft_loss`. `lambda` is ignored.
    Detached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f32,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub d_prime: usize,
    /// Run a finite-difference spot check on the first batch.
    pub grad_check: bool,
    pub aux_gradient: AuxGradient,
    /// Fraction of steps with linear learning-rate warmup.
    pub warmup_fraction: f32,
    /// Trailing fraction of the data held out for evaluation.
    pub held_out_fraction: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            batch: 16,
            steps: 2000,
            seed: 0,
            d_prime: 4,
            grad_check: false,
            aux_gradient: AuxGradient::Joint,
            warmup_fraction: 0.015,
            held_out_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if self.steps == 0 || self.batch == 0 || self.d_prime == 0 {
            return bad("steps, batch and d_prime must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("held_out_fraction must lie in [0, 1) and warmup_fraction in [0, 1]".into());
        }
        Ok(())
    }

    /// Number of warmup steps (at least one).
    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction as f64 * self.steps as f64).ceil() as usize).max(1)
    }

    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f32 {
        let w = self.warmup_steps();
        self.lr * ((step + 1) as f32 / w as f32).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub draft_loss: f32,
    pub aux_loss: f32,
    pub total: f32,
}

/// `CE(p, softmax(z)) = logsumexp(z) - sum_i p_i z_i`, in f64.
fn cross_entropy(p: &[f32], z: &[f32]) -> f64 {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max + z.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
    let mut cross = 0.0f64;
    let mut mass = 0.0f64;
    for (&pi, &zi) in p.iter().zip(z) {
        cross += pi as f64 * zi as f64;
        mass += pi as f64;
    }
    mass * lse - cross
}

/// Joint loss for one position. All three inputs cover the full vocabulary.
pub fn joint_loss(p: &ProbDist, q_logits: &Vector, s_logits: &Vector, lambda: f32) -> Result<LossBreakdown> {
    if p.domain().is_some() {
        return Err(Error::precondition("target distribution must be over the full vocabulary"));
    }
    let n = p.probs().len();
    if q_logits.len() != n || s_logits.len() != n {
        return Err(Error::precondition(format!(
            "length mismatch: p has {n} entries, q logits {}, s logits {}",
            q_logits.len(),
            s_logits.len()
        )));
    }
    let draft = cross_entropy(p.probs().as_slice(), q_logits.as_slice());
    let aux = cross_entropy(p.probs().as_slice(), s_logits.as_slice());
    Ok(LossBreakdown {
        draft_loss: draft as f32,
        aux_loss: aux as f32,
        total: (draft + lambda as f64 * aux) as f32,
    })
}

/// One distillation example: a context and the target's next-token
/// distribution there.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub history: Vec<usize>,
    pub target: Vec<f32>,
}

impl Example {
    /// Labels `history` with the target model's softmax.
    pub fn from_target(target: &ToyLM, history: &[usize]) -> Result<Self> {
        let history = target.window(history);
        let logits = target.logits(&history)?;
        let mut p = vec![0.0; logits.len()];
        softmax_into(logits.as_slice(), &mut p);
        Ok(Example { history, target: p })
    }
}

/// Gradients of the mean total loss, one matrix per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embed: Matrix,
    pub mix: Matrix,
    pub head: Matrix,
    pub w_down: Matrix,
    pub w_vocab: Matrix,
}

impl Gradients {
    fn params(&self) -> [&Matrix; 5] {
        [&self.embed, &self.mix, &self.head, &self.w_down, &self.w_vocab]
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|m| m.is_finite())
    }
}

struct Accumulator {
    embed: Vec<f64>,
    mix: Vec<f64>,
    head: Vec<f64>,
    w_down: Vec<f64>,
    w_vocab: Vec<f64>,
}

fn to_matrix(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
    Matrix::new(rows, cols, data.into_iter().map(|x| x as f32).collect()).expect("shape")
}

/// `acc[i, :] += a[i] * b` for a row-major `a.len() x b.len()` buffer.
fn add_outer(acc: &mut [f64], a: &[f64], b: &[f64]) {
    for (row, &ai) in acc.chunks_exact_mut(b.len()).zip(a) {
        if ai == 0.0 {
            continue;
        }
        for (slot, &bj) in row.iter_mut().zip(b) {
            *slot += ai * bj;
        }
    }
}

/// `out = m^T a`.
fn transpose_mul(m: &Matrix, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; m.cols()];
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(m.row(i)) {
            *o += ai * w as f64;
        }
    }
    out
}

fn mul(m: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(x).map(|(&w, &xi)| w as f64 * xi).sum())
        .collect()
}

fn squash64(x: f64) -> f64 {
    if x.abs() >= 3.0 {
        x.signum()
    } else {
        let x2 = x * x;
        x * (27.0 + x2) / (27.0 + 9.0 * x2)
    }
}

fn squash_grad64(x: f64) -> f64 {
    if x.abs() >= 3.0 {
        0.0
    } else {
        let x2 = x * x;
        let den = 27.0 + 9.0 * x2;
        ((27.0 + 3.0 * x2) * den - (27.0 * x + x * x2) * 18.0 * x) / (den * den)
    }
}

/// `CE(p, softmax(z)) = logsumexp(z) - sum_i p_i z_i`, plus `softmax(z)`.
fn cross_entropy64(p: &[f32], z: &[f64]) -> (f64, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    let lse = max + sum.ln();
    let mut ce = 0.0f64;
    for (&pi, &zi) in p.iter().zip(z) {
        ce += pi as f64 * (lse - zi);
    }
    for x in &mut e {
        *x /= sum;
    }
    (ce, e)
}

/// Forward pass in f64 over the f32 parameters. Training works on this
/// path so the analytic gradients are exact up to f64 rounding.
struct Forward64 {
    window: Vec<usize>,
    input: Vec<f64>,
    pre: Vec<f64>,
    h: Vec<f64>,
    hp: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
}

fn forward64(draft: &ToyLM, spec: &SpeculatorWeights, history: &[usize]) -> Result<Forward64> {
    let window = draft.window(history);
    let mut input = Vec::with_capacity(window.len() * draft.hidden());
    for &t in &window {
        if t >= draft.vocab() {
            return Err(Error::data(format!(
                "token {t} is outside vocabulary of size {}",
                draft.vocab()
            )));
        }
        input.extend(draft.embed.row(t).iter().map(|&x| x as f64));
    }
    let pre = mul(&draft.mix, &input);
    let h: Vec<f64> = pre.iter().map(|&x| squash64(x)).collect();
    let hp = mul(&spec.w_down, &h);
    let z = mul(&draft.head, &h);
    let s = mul(&spec.w_vocab, &hp);
    Ok(Forward64 {
        window,
        input,
        pre,
        h,
        hp,
        z,
        s,
    })
}

fn check_shapes(draft: &ToyLM, spec: &SpeculatorWeights) -> Result<()> {
    if spec.vocab() != draft.vocab() || spec.hidden() != draft.hidden() {
        return Err(Error::precondition(format!(
            "speculator expects vocab {} / hidden {}, draft has {} / {}",
            spec.vocab(),
            spec.hidden(),
            draft.vocab(),
            draft.hidden()
        )));
    }
    Ok(())
}

fn check_example(ex: &Example, vocab: usize) -> Result<()> {
    if ex.target.len() != vocab {
        return Err(Error::precondition(format!(
            "target distribution has {} entries, vocabulary is {vocab}",
            ex.target.len()
        )));
    }
    Ok(())
}

/// Mean loss over `batch` without gradients.
pub fn evaluate(draft: &ToyLM, spec: &SpeculatorWeights, batch: &[Example], lambda: f32) -> Result<LossBreakdown> {
    let (d, a) = mean_losses(draft, spec, batch)?;
    Ok(LossBreakdown {
        draft_loss: d as f32,
        aux_loss: a as f32,
        total: (d + lambda as f64 * a) as f32,
    })
}

/// Mean draft and aux losses in f64.
pub fn mean_losses(draft: &ToyLM, spec: &SpeculatorWeights, batch: &[Example]) -> Result<(f64, f64)> {
    check_shapes(draft, spec)?;
    if batch.is_empty() {
        return Err(Error::precondition("empty batch"));
    }
    let (mut d, mut a) = (0.0f64, 0.0f64);
    for ex in batch {
        check_example(ex, draft.vocab())?;
        let f = forward64(draft, spec, &ex.history)?;
        d += cross_entropy64(&ex.target, &f.z).0;
        a += cross_entropy64(&ex.target, &f.s).0;
    }
    let n = batch.len() as f64;
    Ok((d / n, a / n))
}

/// Analytic gradients of the mean total loss over `batch`, plus the loss itself.
pub fn backward(
    draft: &ToyLM,
    spec: &SpeculatorWeights,
    batch: &[Example],
    lambda: f32,
    mode: AuxGradient,
) -> Result<(Gradients, LossBreakdown)> {
    check_shapes(draft, spec)?;
    if batch.is_empty() {
        return Err(Error::precondition("empty batch"));
    }
    let (vocab, hidden, reduced) = (draft.vocab(), draft.hidden(), spec.reduced());
    let mut acc = Accumulator {
        embed: vec![0.0; draft.embed.as_slice().len()],
        mix: vec![0.0; draft.mix.as_slice().len()],
        head: vec![0.0; draft.head.as_slice().len()],
        w_down: vec![0.0; spec.w_down.as_slice().len()],
        w_vocab: vec![0.0; spec.w_vocab.as_slice().len()],
    };
    let inv_n = 1.0 / batch.len() as f64;
    // Weight of the aux loss in the speculator's and the backbone's objective.
    let (spec_weight, backbone_weight) = match mode {
        AuxGradient::Joint => (lambda as f64, lambda as f64),
        AuxGradient::Detached => (1.0, 0.0),
    };
    let (mut draft_sum, mut aux_sum) = (0.0f64, 0.0f64);

    for ex in batch {
        check_example(ex, vocab)?;
        let f = forward64(draft, spec, &ex.history)?;
        let (draft_ce, q) = cross_entropy64(&ex.target, &f.z);
        let (aux_ce, q_aux) = cross_entropy64(&ex.target, &f.s);
        draft_sum += draft_ce;
        aux_sum += aux_ce;

        // dL/dz = (q - p) / n
        let dz: Vec<f64> = q
            .iter()
            .zip(&ex.target)
            .map(|(&qi, &pi)| (qi - pi as f64) * inv_n)
            .collect();
        add_outer(&mut acc.head, &dz, &f.h);
        let mut dh = transpose_mul(&draft.head, &dz);

        if spec_weight != 0.0 {
            let ds: Vec<f64> = q_aux
                .iter()
                .zip(&ex.target)
                .map(|(&qi, &pi)| (qi - pi as f64) * inv_n * spec_weight)
                .collect();
            add_outer(&mut acc.w_vocab, &ds, &f.hp);
            let dhp = transpose_mul(&spec.w_vocab, &ds);
            add_outer(&mut acc.w_down, &dhp, &f.h);
            if backbone_weight != 0.0 {
                // Joint mode uses the same weight on both sides, so dh' carries over.
                let dh_aux = transpose_mul(&spec.w_down, &dhp);
                for (a, b) in dh.iter_mut().zip(dh_aux) {
                    *a += b;
                }
            }
        }

        let dpre: Vec<f64> = dh.iter().zip(&f.pre).map(|(&g, &x)| g * squash_grad64(x)).collect();
        add_outer(&mut acc.mix, &dpre, &f.input);
        let dx = transpose_mul(&draft.mix, &dpre);
        for (slot, &tok) in f.window.iter().enumerate() {
            let src = &dx[slot * hidden..(slot + 1) * hidden];
            let dst = &mut acc.embed[tok * hidden..(tok + 1) * hidden];
            for (d, &g) in dst.iter_mut().zip(src) {
                *d += g;
            }
        }
    }

    let grads = Gradients {
        embed: to_matrix(vocab, hidden, acc.embed),
        mix: to_matrix(hidden, draft.context() * hidden, acc.mix),
        head: to_matrix(vocab, hidden, acc.head),
        w_down: to_matrix(reduced, hidden, acc.w_down),
        w_vocab: to_matrix(vocab, reduced, acc.w_vocab),
    };
    let n = batch.len() as f64;
    let loss = LossBreakdown {
        draft_loss: (draft_sum / n) as f32,
        aux_loss: (aux_sum / n) as f32,
        total: ((draft_sum + lambda as f64 * aux_sum) / n) as f32,
    };
    Ok((grads, loss))
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    fn new(cfg: &TrainConfig, sizes: &[usize]) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            moments: sizes.iter().map(|&n| (vec![0.0; n], vec![0.0; n])).collect(),
        }
    }

    fn step(&mut self, lr: f32, params: [&mut Matrix; 5], grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((param, grad), (m, v)) in params.into_iter().zip(grads.params()).zip(&mut self.moments) {
            for (((w, &g), mi), vi) in param
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub draft_loss: f32,
    pub aux_loss: f32,
    pub total: f32,
    pub lr: f32,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub draft: ToyLM,
    pub speculator: SpeculatorWeights,
    pub log: Vec<LogRow>,
    pub held_out_initial: LossBreakdown,
    pub held_out_final: LossBreakdown,
    /// Largest relative error of the finite-difference spot check, if run.
    pub grad_check_error: Option<f64>,
}

/// Positions of `data` usable as training and held-out contexts.
pub fn split_positions(data: &TokenSequence, held_out_fraction: f32) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let n = data.len();
    let held = ((n as f64) * held_out_fraction as f64).round() as usize;
    let held = held.min(n.saturating_sub(1));
    (0..n - held, n - held..n)
}

const HELD_OUT_EVAL: usize = 256;

/// Evenly spaced sample of at most `max` positions from `range`.
pub fn spread_positions(range: std::ops::Range<usize>, max: usize) -> Vec<usize> {
    let len = range.len();
    if len <= max {
        return range.collect();
    }
    (0..max).map(|i| range.start + i * len / max).collect()
}

/// Draft hidden states at the given positions of `data`, one per row.
pub fn hidden_states(draft: &ToyLM, data: &TokenSequence, positions: &[usize]) -> Result<Matrix> {
    let mut out = Matrix::zeros(positions.len(), draft.hidden());
    for (r, &p) in positions.iter().enumerate() {
        let h = draft.forward_cached(&data.tokens[..p])?.hidden;
        out.row_mut(r).copy_from_slice(&h);
    }
    Ok(out)
}

/// Fresh draft model and speculator for `train`.
pub fn init_draft(vocab: usize, hidden: usize, context: usize, d_prime: usize, seed: u64) -> Result<(ToyLM, SpeculatorWeights)> {
    let draft = ToyLM::random(vocab, hidden, context, seed)?;
    let spec = SpeculatorWeights::random(vocab, hidden, d_prime, seed)?;
    Ok((draft, spec))
}

/// Trains a `draft_hidden`-wide draft model and its speculator against
/// `target` on positions of `data`.
pub fn train(target: &ToyLM, data: &TokenSequence, draft_hidden: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.vocab != target.vocab() {
        return Err(Error::config(format!(
            "data vocabulary {} differs from target vocabulary {}",
            data.vocab,
            target.vocab()
        )));
    }
    if data.len() < target.context() {
        return Err(Error::config(format!(
            "need at least {} tokens of data, got {}",
            target.context(),
            data.len()
        )));
    }
    if cfg.d_prime > draft_hidden {
        return Err(Error::config(format!(
            "d_prime {} exceeds draft hidden size {draft_hidden}",
            cfg.d_prime
        )));
    }
    let (mut draft, mut spec) = init_draft(target.vocab(), draft_hidden, target.context(), cfg.d_prime, cfg.seed)?;
    let (train_range, held_range) = split_positions(data, cfg.held_out_fraction);
    let held_positions = if held_range.is_empty() {
        spread_positions(train_range.clone(), HELD_OUT_EVAL)
    } else {
        spread_positions(held_range, HELD_OUT_EVAL)
    };
    let held_out: Vec<Example> = held_positions
        .iter()
        .map(|&p| Example::from_target(target, &data.tokens[..p]))
        .collect::<Result<_>>()?;
    let held_out_initial = evaluate(&draft, &spec, &held_out, cfg.lambda)?;

    let sizes = [
        draft.embed.as_slice().len(),
        draft.mix.as_slice().len(),
        draft.head.as_slice().len(),
        spec.w_down.as_slice().len(),
        spec.w_vocab.as_slice().len(),
    ];
    let mut adam = Adam::new(cfg, &sizes);
    let mut rng = RngStream::with_stream(cfg.seed, 21);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut grad_check_error = None;

    for step in 0..cfg.steps {
        let batch: Vec<Example> = (0..cfg.batch)
            .map(|_| {
                let p = train_range.start + rng.below(train_range.len());
                Example::from_target(target, &data.tokens[..p])
            })
            .collect::<Result<_>>()?;
        let (grads, loss) = backward(&draft, &spec, &batch, cfg.lambda, cfg.aux_gradient)?;
        if !(loss.total.is_finite() && grads.is_finite()) {
            return Err(Error::Training {
                step,
                detail: format!("non-finite loss {:?}", loss),
            });
        }
        if cfg.grad_check && step == 0 {
            grad_check_error = Some(spot_check(&draft, &spec, &batch, cfg, &grads, &mut rng)?);
        }
        let lr = cfg.lr_at(step);
        log.push(LogRow {
            step,
            draft_loss: loss.draft_loss,
            aux_loss: loss.aux_loss,
            total: loss.total,
            lr,
        });
        let params = [
            &mut draft.embed,
            &mut draft.mix,
            &mut draft.head,
            &mut spec.w_down,
            &mut spec.w_vocab,
        ];
        adam.step(lr, params, &grads);
    }
    let held_out_final = evaluate(&draft, &spec, &held_out, cfg.lambda)?;
    if !held_out_final.total.is_finite() {
        return Err(Error::Training {
            step: cfg.steps,
            detail: "non-finite held-out loss".into(),
        });
    }
    Ok(TrainOutcome {
        draft,
        speculator: spec,
        log,
        held_out_initial,
        held_out_final,
        grad_check_error,
    })
}

/// Central-difference check of a few random gradient entries. Returns the
/// largest relative error `|a - n| / (|a| + |n|)`.
fn spot_check(
    draft: &ToyLM,
    spec: &SpeculatorWeights,
    batch: &[Example],
    cfg: &TrainConfig,
    grads: &Gradients,
    rng: &mut RngStream,
) -> Result<f64> {
    const STEP: f32 = 1e-3;
    const PROBES: usize = 8;
    let objective = |d: &ToyLM, s: &SpeculatorWeights| -> Result<f64> {
        let (draft_loss, aux_loss) = mean_losses(d, s, batch)?;
        Ok(match cfg.aux_gradient {
            AuxGradient::Joint => draft_loss + cfg.lambda as f64 * aux_loss,
            AuxGradient::Detached => draft_loss,
        })
    };
    let mut worst = 0.0f64;
    // Probe the backbone and the head; the speculator only under joint mode.
    let params = match cfg.aux_gradient {
        AuxGradient::Joint => 5,
        AuxGradient::Detached => 3,
    };
    for which in 0..params {
        for _ in 0..PROBES {
            let (mut d, mut s) = (draft.clone(), spec.clone());
            let len = grads.params()[which].as_slice().len();
            let i = rng.below(len);
            let analytic = grads.params()[which].as_slice()[i] as f64;
            let nudge = |d: &mut ToyLM, s: &mut SpeculatorWeights, delta: f32| {
                let m = match which {
                    0 => &mut d.embed,
                    1 => &mut d.mix,
                    2 => &mut d.head,
                    3 => &mut s.w_down,
                    _ => &mut s.w_vocab,
                };
                m.as_mut_slice()[i] += delta;
            };
            nudge(&mut d, &mut s, STEP);
            let up = objective(&d, &s)?;
            nudge(&mut d, &mut s, -2.0 * STEP);
            let down = objective(&d, &s)?;
            let numeric = (up - down) / (2.0 * STEP as f64);
            let denom = (analytic.abs() + numeric.abs()).max(1e-3);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// CSV `step,draft_loss,aux_loss,total,lr`.
pub fn log_to_csv(log: &[LogRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row).map_err(|e| Error::data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn log_from_csv(text: &str) -> Result<Vec<LogRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::data(format!("training log: {e}"))))
        .collect()
}

/// Saves the draft (`draft/`), the speculator (`speculator/`) and
/// `train_log.csv` under `dir`.
pub fn save_outcome(outcome: &TrainOutcome, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    outcome.draft.save(dir.join("draft"))?;
    outcome.speculator.save(dir.join("speculator"))?;
    let path = dir.join("train_log.csv");
    fs::write(&path, log_to_csv(&outcome.log)?).map_err(|e| Error::io(path, e))
}
