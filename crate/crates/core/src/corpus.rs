//! Token sequences, the synthetic Zipf corpus and the `VSC1` corpus file.
//!
//! Every vocabulary reserves its two highest ids: `pad = |V| - 1` fills
//! context windows that reach before the start of a sequence, and
//! `eos = |V| - 2` ends generation. Synthetic corpora only emit the
//! ordinary ids `[0, |V| - 2)`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Zipf};

use crate::error::{Error, Result};
use crate::tensor::RngStream;

pub const CORPUS_MAGIC: &[u8; 4] = b"VSC1";

/// Smallest vocabulary that leaves at least one ordinary token.
pub const MIN_VOCAB: usize = 3;

pub fn pad_token(vocab: usize) -> usize {
    vocab - 1
}

pub fn eos_token(vocab: usize) -> usize {
    vocab - 2
}

/// Number of ordinary (non-reserved) tokens.
pub fn ordinary_tokens(vocab: usize) -> usize {
    vocab - 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// External text, the corpus-frequency (FR-Spec style) source.
    Corpus,
    /// Sampled from the target model, the VocabTrim style source.
    TargetGenerated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub vocab: usize,
    pub provenance: Provenance,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab: usize, provenance: Provenance) -> Result<Self> {
        if let Some(pos) = tokens.iter().position(|&t| t >= vocab) {
            return Err(Error::data(format!(
                "token {} at position {pos} is outside vocabulary of size {vocab}",
                tokens[pos]
            )));
        }
        Ok(TokenSequence {
            tokens,
            vocab,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// I.i.d. draws with `P(rank r) ∝ r^-alpha` over the ordinary tokens. Ranks
/// are mapped to token ids through a seeded permutation, so the frequent
/// tokens are scattered over the id space.
///
/// Returns the sequence together with the rank-to-token permutation.
pub fn make_zipf_corpus_with_ranks(
    vocab: usize,
    alpha: f64,
    length: usize,
    seed: u64,
) -> Result<(TokenSequence, Vec<usize>)> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("zipf alpha must be positive, got {alpha}")));
    }
    if vocab < MIN_VOCAB {
        return Err(Error::config(format!("vocabulary must hold at least {MIN_VOCAB} tokens")));
    }
    let n = ordinary_tokens(vocab);
    let mut perm_rng = RngStream::with_stream(seed, 0);
    let mut rank_to_token: Vec<usize> = (0..n).collect();
    rank_to_token.shuffle(&mut perm_rng);

    let zipf = Zipf::new(n as f64, alpha).map_err(|e| Error::config(e.to_string()))?;
    let mut draw_rng = RngStream::with_stream(seed, 1);
    let tokens = (0..length)
        .map(|_| {
            let rank = zipf.sample(&mut draw_rng) as usize;
            rank_to_token[rank.clamp(1, n) - 1]
        })
        .collect();
    Ok((
        TokenSequence {
            tokens,
            vocab,
            provenance: Provenance::Corpus,
        },
        rank_to_token,
    ))
}

pub fn make_zipf_corpus(vocab: usize, alpha: f64, length: usize, seed: u64) -> Result<TokenSequence> {
    make_zipf_corpus_with_ranks(vocab, alpha, length, seed).map(|(seq, _)| seq)
}

/// `VSC1` layout, little-endian: magic, `vocab: u64`, `length: u64`, then
/// `length` u32 token ids.
pub fn encode_corpus(seq: &TokenSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * seq.len());
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&(seq.vocab as u64).to_le_bytes());
    out.extend_from_slice(&(seq.len() as u64).to_le_bytes());
    for &t in &seq.tokens {
        out.extend_from_slice(&(t as u32).to_le_bytes());
    }
    out
}

pub fn decode_corpus(bytes: &[u8], provenance: Provenance) -> Result<TokenSequence> {
    if bytes.len() < 20 || &bytes[..4] != CORPUS_MAGIC {
        return Err(Error::data("not a VSC1 corpus file"));
    }
    let vocab = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let length = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload = &bytes[20..];
    if Some(payload.len()) != length.checked_mul(4) {
        return Err(Error::data(format!(
            "corpus header declares {length} tokens but payload holds {} bytes",
            payload.len()
        )));
    }
    let tokens = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    TokenSequence::new(tokens, vocab, provenance)
}

pub fn write_corpus(path: impl AsRef<Path>, seq: &TokenSequence) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_corpus(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: impl AsRef<Path>, provenance: Provenance) -> Result<TokenSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_corpus() {
        assert!(make_zipf_corpus(64, 1.0, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn huge_alpha_is_constant() {
        let (seq, ranks) = make_zipf_corpus_with_ranks(64, 60.0, 2000, 3).unwrap();
        assert!(seq.tokens.iter().all(|&t| t == ranks[0]));
    }

    #[test]
    fn never_emits_reserved_tokens() {
        let seq = make_zipf_corpus(16, 0.3, 10_000, 4).unwrap();
        assert!(seq.tokens.iter().all(|&t| t < ordinary_tokens(16)));
    }

    #[test]
    fn rejects_bad_alpha() {
        assert!(make_zipf_corpus(16, 0.0, 10, 1).is_err());
        assert!(make_zipf_corpus(16, -1.0, 10, 1).is_err());
    }

    #[test]
    fn log_log_slope_is_minus_alpha() {
        let (seq, ranks) = make_zipf_corpus_with_ranks(512, 1.0, 1_000_000, 5).unwrap();
        let mut counts = vec![0u64; 512];
        for &t in &seq.tokens {
            counts[t] += 1;
        }
        // Least-squares slope of log(count) against log(rank), ranks 1..=50.
        let pts: Vec<(f64, f64)> = (1..=50)
            .map(|r| ((r as f64).ln(), (counts[ranks[r - 1]] as f64).ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((slope + 1.0).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn permutation_only_relabels_counts() {
        let (seq, ranks) = make_zipf_corpus_with_ranks(100, 1.1, 50_000, 9).unwrap();
        // Undo the permutation and redraw the ranks with the same stream.
        let zipf = Zipf::new(98.0, 1.1).unwrap();
        let mut rng = RngStream::with_stream(9, 1);
        let mut rank_counts = vec![0u64; 98];
        for _ in 0..50_000 {
            rank_counts[zipf.sample(&mut rng) as usize - 1] += 1;
        }
        let mut token_counts = vec![0u64; 100];
        for &t in &seq.tokens {
            token_counts[t] += 1;
        }
        for r in 0..98 {
            assert_eq!(rank_counts[r], token_counts[ranks[r]]);
        }
    }

    #[test]
    fn corpus_file_layout_and_validation() {
        let seq = TokenSequence::new(vec![1, 0, 5], 8, Provenance::Corpus).unwrap();
        let bytes = encode_corpus(&seq);
        assert_eq!(&bytes[..4], b"VSC1");
        assert_eq!(bytes.len(), 20 + 12);
        assert_eq!(decode_corpus(&bytes, Provenance::Corpus).unwrap(), seq);
        let mut bad = bytes.clone();
        bad[20..24].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode_corpus(&bad, Provenance::Corpus), Err(Error::Data(_))));
        assert!(decode_corpus(&bytes[..bytes.len() - 1], Provenance::Corpus).is_err());
    }
}
