//! Exact top-k over approximate scores.
//!
//! Candidates are ordered by descending score with ties broken by ascending
//! vocabulary index. That order is total, so the selected set and its order
//! are fully determined by the input.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::kernels::IndexList;
use crate::tensor::Vector;

/// The `k` best-scoring vocabulary indices, best first, with their scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidates {
    pub indices: IndexList,
    pub scores: Vector,
}

#[inline]
fn rank_order(s: &[f32], a: usize, b: usize) -> Ordering {
    // Scores are finite, so partial_cmp never fails.
    s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b))
}

/// Partial selection: quickselect the k-th element under the rank order,
/// then sort only the `k` winners. `O(|V| + k log k)`.
pub fn top_k(s: &Vector, k: usize) -> Result<ScoredCandidates> {
    let n = s.len();
    if k == 0 || k > n {
        return Err(Error::precondition(format!(
            "top-k needs 1 <= k <= {n}, got k = {k}"
        )));
    }
    let scores = s.as_slice();
    let mut order: Vec<usize> = (0..n).collect();
    if k < n {
        order.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        order.truncate(k);
    }
    order.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    let picked: Vec<f32> = order.iter().map(|&i| scores[i]).collect();
    Ok(ScoredCandidates {
        indices: IndexList::from_trusted(order, n),
        scores: Vector::from_raw(picked),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{random_vector, RngStream};

    fn sort_oracle(s: &[f32], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        // Stable sort by descending score keeps ascending index on ties.
        idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
        idx.truncate(k);
        idx
    }

    #[test]
    fn hand_checked() {
        let s = Vector::new(vec![3.0, 1.0, 4.0, 1.0, 5.0]).unwrap();
        let c = top_k(&s, 2).unwrap();
        assert_eq!(c.indices.as_slice(), &[4, 2]);
        assert_eq!(c.scores.as_slice(), &[5.0, 4.0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = Vector::new(vec![2.0; 6]).unwrap();
        assert_eq!(top_k(&s, 3).unwrap().indices.as_slice(), &[0, 1, 2]);
    }

    #[test]
    fn k_out_of_range() {
        let s = Vector::new(vec![1.0, 2.0]).unwrap();
        assert!(top_k(&s, 0).is_err());
        assert!(top_k(&s, 3).is_err());
    }

    #[test]
    fn large_matches_full_sort() {
        let mut rng = RngStream::new(77);
        let s = random_vector(131_072, &mut rng);
        let c = top_k(&s, 2048).unwrap();
        assert_eq!(c.indices.as_slice(), sort_oracle(s.as_slice(), 2048).as_slice());
    }

    #[test]
    fn quantized_scores_with_many_ties() {
        let mut rng = RngStream::new(78);
        let s = Vector::new((0..5000).map(|_| rng.below(7) as f32).collect()).unwrap();
        for k in [1, 10, 999, 5000] {
            let c = top_k(&s, k).unwrap();
            assert_eq!(c.indices.as_slice(), sort_oracle(s.as_slice(), k).as_slice());
        }
    }
}
