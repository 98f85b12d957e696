//! Token frequency tables and the static subsets built from them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategy::StaticSubset;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: Vec<u64>,
    total: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FreqRow {
    token_id: usize,
    count: u64,
}

impl FrequencyTable {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        FrequencyTable { counts, total }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn vocab(&self) -> usize {
        self.counts.len()
    }

    pub fn distinct(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Tokens by descending count, ties by ascending id.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.counts.len()).collect();
        order.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        order
    }

    /// CSV with header `token_id,count`, one row per vocabulary entry.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (token_id, &count) in self.counts.iter().enumerate() {
            w.serialize(FreqRow { token_id, count })
                .map_err(|e| Error::data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut counts = Vec::new();
        for (i, row) in rdr.deserialize::<FreqRow>().enumerate() {
            let row = row.map_err(|e| Error::data(format!("frequency csv: {e}")))?;
            if row.token_id != i {
                return Err(Error::data(format!(
                    "frequency csv: row {i} has token_id {}",
                    row.token_id
                )));
            }
            counts.push(row.count);
        }
        Ok(FrequencyTable::from_counts(counts))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FrequencyTable::from_csv(&text)
    }
}

/// Counts every token of the stream. A token outside `[0, vocab)` is a data
/// error naming its position.
pub fn build_freq_table(tokens: impl IntoIterator<Item = usize>, vocab: usize) -> Result<FrequencyTable> {
    let mut counts = vec![0u64; vocab];
    for (pos, t) in tokens.into_iter().enumerate() {
        match counts.get_mut(t) {
            Some(c) => *c += 1,
            None => {
                return Err(Error::data(format!(
                    "token {t} at position {pos} is outside vocabulary of size {vocab}"
                )))
            }
        }
    }
    Ok(FrequencyTable::from_counts(counts))
}

/// The `size` most frequent tokens (ties by ascending id).
pub fn build_static_subset(freq: &FrequencyTable, size: usize) -> Result<StaticSubset> {
    if size == 0 || size > freq.vocab() {
        return Err(Error::config(format!(
            "subset size must lie in [1, {}], got {size}",
            freq.vocab()
        )));
    }
    let mut ranked = freq.ranked();
    ranked.truncate(size);
    StaticSubset::new(ranked, freq.vocab())
}

/// Spearman rank correlation between two tables' token rankings.
pub fn rank_correlation(a: &FrequencyTable, b: &FrequencyTable) -> Result<f64> {
    if a.vocab() != b.vocab() || a.vocab() < 2 {
        return Err(Error::precondition("tables must share a vocabulary of at least 2 tokens"));
    }
    let n = a.vocab();
    let rank_of = |t: &FrequencyTable| {
        let mut r = vec![0usize; n];
        for (pos, tok) in t.ranked().into_iter().enumerate() {
            r[tok] = pos;
        }
        r
    };
    let (ra, rb) = (rank_of(a), rank_of(b));
    let d2: f64 = ra
        .iter()
        .zip(&rb)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    let n = n as f64;
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}
