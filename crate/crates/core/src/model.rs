//! Desk-scale language models: an n-gram MLP over a shared vocabulary.
//!
//! ```text
//! x = concat(embed[c_1], ..., embed[c_n])   (n * hidden)
//! h = squash(mix x)                         (hidden)
//! z = head h                                (|V|)
//! ```
//!
//! The draft model uses the same architecture with a smaller hidden size;
//! its `head` is the output embedding matrix `U`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::corpus::{eos_token, ordinary_tokens, pad_token, Provenance, TokenSequence, MIN_VOCAB};
use crate::error::{Error, Result};
use crate::io::{read_matrix, write_matrix};
use crate::kernels::KernelStats;
use crate::tensor::{argmax, matvec_into, softmax_with_temperature, Matrix, RngStream, Vector};

/// Tanh-shaped squashing function with an exact piecewise-rational form:
/// `x (27 + x^2) / (27 + 9 x^2)` on `(-3, 3)`, saturating at `±1` outside.
/// Value and slope are continuous at `±3`.
#[inline]
pub fn squash(x: f32) -> f32 {
    if x >= 3.0 {
        1.0
    } else if x <= -3.0 {
        -1.0
    } else {
        let x2 = x * x;
        x * (27.0 + x2) / (27.0 + 9.0 * x2)
    }
}

/// Derivative of [`squash`].
#[inline]
pub fn squash_grad(x: f32) -> f32 {
    if x.abs() >= 3.0 {
        0.0
    } else {
        let x2 = x * x;
        let den = 27.0 + 9.0 * x2;
        // d/dx [(27x + x^3) / (27 + 9x^2)]
        ((27.0 + 3.0 * x2) * den - (27.0 * x + x * x2) * 18.0 * x) / (den * den)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleMode {
    Greedy,
    Sample { temperature: f32 },
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub window: Vec<usize>,
    pub input: Vec<f32>,
    pub pre: Vec<f32>,
    pub hidden: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLM {
    vocab: usize,
    hidden: usize,
    context: usize,
    seed: u64,
    pub embed: Matrix,
    pub mix: Matrix,
    pub head: Matrix,
}

impl ToyLM {
    pub fn from_parts(
        vocab: usize,
        hidden: usize,
        context: usize,
        seed: u64,
        embed: Matrix,
        mix: Matrix,
        head: Matrix,
    ) -> Result<Self> {
        if vocab < MIN_VOCAB || hidden == 0 || context == 0 {
            return Err(Error::config(format!(
                "model needs vocab >= {MIN_VOCAB}, hidden >= 1, context >= 1 \
                 (got {vocab}, {hidden}, {context})"
            )));
        }
        let shapes = [
            ("embed", &embed, vocab, hidden),
            ("mix", &mix, hidden, context * hidden),
            ("head", &head, vocab, hidden),
        ];
        for (name, m, rows, cols) in shapes {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::data(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::data(format!("{name} holds non-finite weights")));
            }
        }
        Ok(ToyLM {
            vocab,
            hidden,
            context,
            seed,
            embed,
            mix,
            head,
        })
    }

    /// Glorot-initialized model.
    pub fn random(vocab: usize, hidden: usize, context: usize, seed: u64) -> Result<Self> {
        let mut rng = RngStream::with_stream(seed, 0);
        let embed = Matrix::xavier(vocab, hidden, &mut rng);
        let mix = Matrix::xavier(hidden, context * hidden, &mut rng);
        let head = Matrix::xavier(vocab, hidden, &mut rng);
        ToyLM::from_parts(vocab, hidden, context, seed, embed, mix, head)
    }

    pub fn zeros(vocab: usize, hidden: usize, context: usize) -> Result<Self> {
        ToyLM::from_parts(
            vocab,
            hidden,
            context,
            0,
            Matrix::zeros(vocab, hidden),
            Matrix::zeros(hidden, context * hidden),
            Matrix::zeros(vocab, hidden),
        )
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pad(&self) -> usize {
        pad_token(self.vocab)
    }

    pub fn eos(&self) -> usize {
        eos_token(self.vocab)
    }

    /// Last `n` tokens of `history`, left-padded with the pad token.
    pub fn window(&self, history: &[usize]) -> Vec<usize> {
        let n = self.context;
        let mut w = vec![self.pad(); n.saturating_sub(history.len())];
        w.extend_from_slice(&history[history.len().saturating_sub(n)..]);
        w
    }

    /// Backbone pass up to the hidden state, keeping intermediates.
    pub fn forward_cached(&self, history: &[usize]) -> Result<ForwardCache> {
        let window = self.window(history);
        let mut input = Vec::with_capacity(self.context * self.hidden);
        for &t in &window {
            if t >= self.vocab {
                return Err(Error::data(format!(
                    "token {t} is outside vocabulary of size {}",
                    self.vocab
                )));
            }
            input.extend_from_slice(self.embed.row(t));
        }
        let mut pre = vec![0.0; self.hidden];
        matvec_into(&self.mix, &input, &mut pre);
        let hidden = pre.iter().map(|&x| squash(x)).collect();
        Ok(ForwardCache {
            window,
            input,
            pre,
            hidden,
        })
    }

    /// Final hidden state `h` for the context ending `history`.
    pub fn hidden_state(&self, history: &[usize]) -> Result<Vector> {
        Ok(Vector::from_raw(self.forward_cached(history)?.hidden))
    }

    /// Hidden state and full-vocabulary logits.
    pub fn forward(&self, history: &[usize]) -> Result<(Vector, Vector)> {
        let h = self.hidden_state(history)?;
        let mut logits = vec![0.0; self.vocab];
        matvec_into(&self.head, h.as_slice(), &mut logits);
        Ok((h, Vector::from_raw(logits)))
    }

    pub fn logits(&self, history: &[usize]) -> Result<Vector> {
        Ok(self.forward(history)?.1)
    }

    /// Cost of the backbone (context mixing) for one position.
    pub fn backbone_stats(&self) -> KernelStats {
        KernelStats::matvec(self.hidden, self.context * self.hidden)
    }

    /// Cost of one full forward pass: backbone plus full-vocabulary head.
    pub fn forward_stats(&self) -> KernelStats {
        self.backbone_stats() + KernelStats::matvec(self.vocab, self.hidden)
    }

    /// Next token under `mode`. Greedy ties resolve to the lowest id.
    pub fn next_token(&self, history: &[usize], mode: SampleMode, rng: &mut RngStream) -> Result<usize> {
        let logits = self.logits(history)?;
        match mode {
            SampleMode::Greedy => Ok(argmax(logits.as_slice())),
            SampleMode::Sample { temperature } => {
                Ok(softmax_with_temperature(&logits, temperature)?.sample(rng))
            }
        }
    }

    /// Appends up to `max_len` tokens to `prompt`, stopping after EOS.
    /// Returns only the continuation.
    pub fn generate(
        &self,
        prompt: &[usize],
        max_len: usize,
        mode: SampleMode,
        rng: &mut RngStream,
    ) -> Result<TokenSequence> {
        let mut history = prompt.to_vec();
        let start = history.len();
        for _ in 0..max_len {
            let t = self.next_token(&history, mode, rng)?;
            history.push(t);
            if t == self.eos() {
                break;
            }
        }
        TokenSequence::new(history.split_off(start), self.vocab, Provenance::TargetGenerated)
    }

    /// Writes `embed.vsp`, `mix.vsp`, `head.vsp` and `meta.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_matrix(dir.join("embed.vsp"), &self.embed)?;
        write_matrix(dir.join("mix.vsp"), &self.mix)?;
        write_matrix(dir.join("head.vsp"), &self.head)?;
        let meta = format!(
            "vocab={}\nhidden={}\nn={}\nseed={}\n",
            self.vocab, self.hidden, self.context, self.seed
        );
        let path = dir.join("meta.txt");
        fs::write(&path, meta).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("meta.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let field = |key: &str| -> Result<u64> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .ok_or_else(|| Error::data(format!("{}: missing `{key}`", path.display())))?
                .1
                .trim()
                .parse()
                .map_err(|_| Error::data(format!("{}: bad value for `{key}`", path.display())))
        };
        ToyLM::from_parts(
            field("vocab")? as usize,
            field("hidden")? as usize,
            field("n")? as usize,
            field("seed")?,
            read_matrix(dir.join("embed.vsp"))?,
            read_matrix(dir.join("mix.vsp"))?,
            read_matrix(dir.join("head.vsp"))?,
        )
    }
}

/// Planted successor map of a synthesized target: a seeded permutation of
/// the ordinary tokens. Reserved tokens map to themselves.
pub fn planted_successors(vocab: usize, seed: u64) -> Vec<usize> {
    let n = ordinary_tokens(vocab);
    let mut rng = RngStream::with_stream(seed, 7);
    let mut succ: Vec<usize> = (0..n).collect();
    succ.shuffle(&mut rng);
    succ.extend([eos_token(vocab), pad_token(vocab)]);
    succ
}

/// Gain applied to the last context slot by the planted mixing weights.
const PLANTED_GAIN: f32 = 1.5;
/// Logit of the planted successor when `structure == 1`.
const PLANTED_MARGIN: f32 = 8.0;

/// Target model blending seeded random weights with a planted successor
/// preference. Every weight matrix is `(1 - w) * random + w * planted`:
///
/// * planted embeddings are random sign vectors `s_t`;
/// * planted mixing copies the last context slot (scaled by a fixed gain);
/// * the planted head row of token `j` is `s_{pred(j)}`, scaled so the
///   successor of the last token gets logit `PLANTED_MARGIN` at `w = 1`.
///
/// At `w = 1` the next token is (almost always) `succ(last)`; at `w = 0` the
/// model is purely random.
pub fn synthesize_target(vocab: usize, hidden: usize, context: usize, seed: u64, structure: f32) -> Result<ToyLM> {
    if !(0.0..=1.0).contains(&structure) {
        return Err(Error::config(format!(
            "structure weight must lie in [0, 1], got {structure}"
        )));
    }
    if vocab < MIN_VOCAB || hidden == 0 || context == 0 {
        return Err(Error::config("target dimensions must be positive"));
    }
    let mut rng = RngStream::with_stream(seed, 0);
    let rand_embed = Matrix::uniform(vocab, hidden, 1.0, &mut rng);
    let rand_mix = Matrix::xavier(hidden, context * hidden, &mut rng);
    let rand_head = Matrix::uniform(vocab, hidden, 3.5 / (hidden as f32).sqrt(), &mut rng);

    let mut sign_rng = RngStream::with_stream(seed, 3);
    let signs = Matrix::from_fn(vocab, hidden, |_, _| {
        if sign_rng.next_u32() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    });
    let last = (context - 1) * hidden;
    let planted_mix = Matrix::from_fn(hidden, context * hidden, |i, j| {
        if j == last + i {
            PLANTED_GAIN
        } else {
            0.0
        }
    });
    let succ = planted_successors(vocab, seed);
    let mut pred = vec![None; vocab];
    for t in 0..ordinary_tokens(vocab) {
        pred[succ[t]] = Some(t);
    }
    let scale = PLANTED_MARGIN / (hidden as f32 * squash(PLANTED_GAIN));
    let planted_head = Matrix::from_fn(vocab, hidden, |j, c| match pred[j] {
        Some(p) => scale * signs.get(p, c),
        None => 0.0,
    });

    let w = structure;
    let blend = |r: &Matrix, p: &Matrix| {
        Matrix::from_fn(r.rows(), r.cols(), |i, j| (1.0 - w) * r.get(i, j) + w * p.get(i, j))
    };
    ToyLM::from_parts(
        vocab,
        hidden,
        context,
        seed,
        blend(&rand_embed, &signs),
        blend(&rand_mix, &planted_mix),
        blend(&rand_head, &planted_head),
    )
}
