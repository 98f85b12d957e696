//! Vocabulary-selection strategies for the draft LM head.
//!
//! * [`select_full`]: exact logits for every token, `2 |V| d` flops.
//! * [`select_static`]: exact logits for a fixed frequency-pruned subset
//!   `V'`, `2 |V'| d` flops. Tokens outside `V'` can never be proposed.
//! * [`select_dynamic`]: project `h` down to `d'` dims, score the whole
//!   vocabulary cheaply, keep the top `k` and compute exact logits for those
//!   only, `2 (d' d + |V| d' + k d)` flops.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_matrix, write_matrix};
use crate::kernels::{full_logits, indexed_logits_fused, IndexList, KernelStats};
use crate::tensor::{matvec, softmax, Matrix, ProbDist, RngStream, Vector};
use crate::topk::top_k;

/// Low-rank scorer `s = W_vocab (W_down h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeculatorWeights {
    pub w_down: Matrix,
    pub w_vocab: Matrix,
}

impl SpeculatorWeights {
    pub fn new(w_down: Matrix, w_vocab: Matrix) -> Result<Self> {
        if w_vocab.cols() != w_down.rows() {
            return Err(Error::precondition(format!(
                "W_vocab has {} cols but W_down has {} rows",
                w_vocab.cols(),
                w_down.rows()
            )));
        }
        if w_down.rows() > w_down.cols() {
            return Err(Error::precondition(format!(
                "reduced dimension {} exceeds hidden size {}",
                w_down.rows(),
                w_down.cols()
            )));
        }
        if w_down.rows() == 0 || w_vocab.rows() == 0 {
            return Err(Error::precondition("speculator weights must be non-empty"));
        }
        Ok(SpeculatorWeights { w_down, w_vocab })
    }

    /// Glorot-uniform initialization of both matrices.
    pub fn random(vocab: usize, hidden: usize, reduced: usize, seed: u64) -> Result<Self> {
        let mut rng = RngStream::with_stream(seed, 11);
        let w_down = Matrix::xavier(reduced, hidden, &mut rng);
        let w_vocab = Matrix::xavier(vocab, reduced, &mut rng);
        SpeculatorWeights::new(w_down, w_vocab)
    }

    /// `W_down = I`, `W_vocab = U`: approximate scores equal exact logits.
    pub fn lossless(u: &Matrix) -> Self {
        SpeculatorWeights {
            w_down: Matrix::identity(u.cols()),
            w_vocab: u.clone(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.w_vocab.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_down.cols()
    }

    pub fn reduced(&self) -> usize {
        self.w_down.rows()
    }

    /// Approximate scores over the full vocabulary, with their cost.
    pub fn scores(&self, h: &Vector) -> Result<(Vector, KernelStats)> {
        let reduced = matvec(&self.w_down, h)?;
        let s = matvec(&self.w_vocab, &reduced)?;
        let stats = KernelStats::matvec(self.w_down.rows(), self.w_down.cols())
            + KernelStats::matvec(self.w_vocab.rows(), self.w_vocab.cols());
        Ok((s, stats))
    }

    /// Writes `w_down.vsp` and `w_vocab.vsp` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_matrix(dir.join("w_down.vsp"), &self.w_down)?;
        write_matrix(dir.join("w_vocab.vsp"), &self.w_vocab)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        SpeculatorWeights::new(
            read_matrix(dir.join("w_down.vsp"))?,
            read_matrix(dir.join("w_vocab.vsp"))?,
        )
        .map_err(|e| Error::data(e.to_string()))
    }
}

/// Fixed reduced vocabulary `V'`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticSubset {
    kept: IndexList,
    reverse: Vec<Option<usize>>,
}

impl StaticSubset {
    /// Builds a subset from any collection of distinct tokens; they are
    /// stored sorted ascending.
    pub fn new(mut tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::config("static subset is empty"));
        }
        tokens.sort_unstable();
        let kept = IndexList::new(tokens, vocab)?;
        let mut reverse = vec![None; vocab];
        for (pos, &t) in kept.as_slice().iter().enumerate() {
            reverse[t] = Some(pos);
        }
        Ok(StaticSubset { kept, reverse })
    }

    pub fn kept(&self) -> &IndexList {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.reverse.len()
    }

    /// Position of `token` inside the subset, if kept.
    pub fn position(&self, token: usize) -> Option<usize> {
        self.reverse.get(token).copied().flatten()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.position(token).is_some()
    }

    /// Newline-delimited token ids.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in self.kept.as_slice() {
            s.push_str(&t.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, vocab: usize) -> Result<Self> {
        let mut tokens = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let t: usize = line
                .parse()
                .map_err(|_| Error::data(format!("line {}: `{line}` is not a token id", line_no + 1)))?;
            tokens.push(t);
        }
        StaticSubset::new(tokens, vocab).map_err(|e| Error::data(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, vocab: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        StaticSubset::from_text(&text, vocab)
    }
}

/// Output of one LM-head step under some strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSelection {
    pub candidates: IndexList,
    pub exact_logits: Vector,
    /// Softmax over `exact_logits`, with `candidates` as its domain.
    pub restricted_dist: ProbDist,
    pub cost: KernelStats,
}

impl StepSelection {
    fn build(candidates: IndexList, exact_logits: Vector, cost: KernelStats) -> Result<Self> {
        let restricted_dist = softmax(&exact_logits)?.with_domain(candidates.clone())?;
        Ok(StepSelection {
            candidates,
            exact_logits,
            restricted_dist,
            cost,
        })
    }

    /// Candidate with the highest exact logit; ties go to the lowest token id.
    pub fn argmax_token(&self) -> usize {
        let z = self.exact_logits.as_slice();
        let c = self.candidates.as_slice();
        let mut best = 0;
        for j in 1..z.len() {
            if z[j] > z[best] || (z[j] == z[best] && c[j] < c[best]) {
                best = j;
            }
        }
        c[best]
    }
}

pub fn select_full(u: &Matrix, h: &Vector) -> Result<StepSelection> {
    let (z, cost) = full_logits(u, h)?;
    StepSelection::build(IndexList::full(u.rows()), z, cost)
}

pub fn select_static(u: &Matrix, subset: &StaticSubset, h: &Vector) -> Result<StepSelection> {
    if subset.is_empty() {
        return Err(Error::config("static subset is empty"));
    }
    if subset.vocab() != u.rows() {
        return Err(Error::precondition(format!(
            "subset built for vocabulary {} but embedding matrix has {} rows",
            subset.vocab(),
            u.rows()
        )));
    }
    let (z, cost) = indexed_logits_fused(u, subset.kept(), h)?;
    StepSelection::build(subset.kept().clone(), z, cost)
}

pub fn select_dynamic(u: &Matrix, spec: &SpeculatorWeights, h: &Vector, k: usize) -> Result<StepSelection> {
    if spec.vocab() != u.rows() || spec.hidden() != u.cols() {
        return Err(Error::precondition(format!(
            "speculator is {}x{} (vocab x hidden) but embedding matrix is {}x{}",
            spec.vocab(),
            spec.hidden(),
            u.rows(),
            u.cols()
        )));
    }
    if k == 0 || k > u.rows() {
        return Err(Error::precondition(format!(
            "k must lie in [1, {}], got {k}",
            u.rows()
        )));
    }
    let (s, score_cost) = spec.scores(h)?;
    let candidates = top_k(&s, k)?.indices;
    let (z, exact_cost) = indexed_logits_fused(u, &candidates, h)?;
    StepSelection::build(candidates, z, score_cost + exact_cost)
}

/// A configured vocabulary strategy.
#[derive(Debug, Clone, PartialEq)]
pub enum VocabStrategy {
    Full,
    Static(StaticSubset),
    Dynamic { weights: SpeculatorWeights, k: usize },
}

impl VocabStrategy {
    pub fn select(&self, u: &Matrix, h: &Vector) -> Result<StepSelection> {
        match self {
            VocabStrategy::Full => select_full(u, h),
            VocabStrategy::Static(subset) => select_static(u, subset, h),
            VocabStrategy::Dynamic { weights, k } => select_dynamic(u, weights, h, *k),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VocabStrategy::Full => "full",
            VocabStrategy::Static(_) => "static",
            VocabStrategy::Dynamic { .. } => "dynamic",
        }
    }

    /// Closed-form head flops per step for a `vocab x hidden` embedding.
    pub fn head_flops(&self, vocab: usize, hidden: usize) -> u64 {
        let (v, d) = (vocab as u64, hidden as u64);
        match self {
            VocabStrategy::Full => 2 * v * d,
            VocabStrategy::Static(s) => 2 * s.len() as u64 * d,
            VocabStrategy::Dynamic { weights, k } => {
                let r = weights.reduced() as u64;
                2 * (r * d + v * r + *k as u64 * d)
            }
        }
    }
}

/// Fraction of hidden states (rows of `states`) whose full-vocabulary
/// argmax is among the strategy's candidates.
pub fn strategy_recall(strategy: &VocabStrategy, u: &Matrix, states: &Matrix) -> Result<f64> {
    if states.rows() == 0 {
        return Err(Error::precondition("no evaluation states"));
    }
    let mut hits = 0usize;
    for r in 0..states.rows() {
        let h = Vector::new(states.row(r).to_vec())?;
        let (z, _) = full_logits(u, &h)?;
        let target = z.argmax();
        let hit = match strategy {
            VocabStrategy::Full => true,
            VocabStrategy::Static(subset) => subset.contains(target),
            VocabStrategy::Dynamic { weights, k } => {
                let (s, _) = weights.scores(&h)?;
                top_k(&s, *k)?.indices.contains(target)
            }
        };
        hits += usize::from(hit);
    }
    Ok(hits as f64 / states.rows() as f64)
}

/// Recall of the speculator's top-`k` candidates against the exact argmax.
pub fn recall_at_k(spec: &SpeculatorWeights, u: &Matrix, eval_states: &Matrix, k: usize) -> Result<f64> {
    strategy_recall(
        &VocabStrategy::Dynamic {
            weights: spec.clone(),
            k,
        },
        u,
        eval_states,
    )
}

/// Recall for several `k` at once, sharing the scoring work. Entry `i`
/// corresponds to `ks[i]`.
pub fn recall_curve(spec: &SpeculatorWeights, u: &Matrix, eval_states: &Matrix, ks: &[usize]) -> Result<Vec<f64>> {
    if eval_states.rows() == 0 {
        return Err(Error::precondition("no evaluation states"));
    }
    let mut hits = vec![0usize; ks.len()];
    for r in 0..eval_states.rows() {
        let h = Vector::new(eval_states.row(r).to_vec())?;
        let target = full_logits(u, &h)?.0.argmax();
        let (s, _) = spec.scores(&h)?;
        // Rank of the target under the (score desc, index asc) order.
        let st = s[target];
        let rank = s
            .as_slice()
            .iter()
            .enumerate()
            .filter(|&(i, &x)| x > st || (x == st && i < target))
            .count();
        for (hit, &k) in hits.iter_mut().zip(ks) {
            *hit += usize::from(rank < k);
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| h as f64 / eval_states.rows() as f64)
        .collect())
}
