//! LM-head kernels: the full-vocabulary head, the naive indexed head that
//! materializes `U[idx, :]` before multiplying, and the fused indexed head
//! that dots `h` against the selected rows of `U` in a single pass.
//!
//! The fused kernels tile over candidate rows and accumulate each row left
//! to right, so they agree bit-for-bit with the reference matvec while
//! keeping several independent accumulators in flight.

use std::ops::{Add, AddAssign};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{dot, dot_tile, matvec_into, Matrix, Vector, ROW_TILE};

const F32_BYTES: u64 = std::mem::size_of::<f32>() as u64;

/// Ordered, duplicate-free list of vocabulary indices, validated against a
/// vocabulary size at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexList {
    indices: Vec<usize>,
    vocab: usize,
}

impl IndexList {
    pub fn new(indices: Vec<usize>, vocab: usize) -> Result<Self> {
        let mut seen = vec![false; vocab];
        for (pos, &i) in indices.iter().enumerate() {
            if i >= vocab {
                return Err(Error::precondition(format!(
                    "index {i} at position {pos} is outside vocabulary of size {vocab}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::precondition(format!(
                    "duplicate index {i} at position {pos}"
                )));
            }
        }
        Ok(IndexList { indices, vocab })
    }

    /// `[0, 1, ..., vocab)`.
    pub fn full(vocab: usize) -> Self {
        IndexList {
            indices: (0..vocab).collect(),
            vocab,
        }
    }

    pub(crate) fn from_trusted(indices: Vec<usize>, vocab: usize) -> Self {
        debug_assert!(IndexList::new(indices.clone(), vocab).is_ok());
        IndexList { indices, vocab }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Vocabulary size the indices were validated against.
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.indices
    }

    pub fn contains(&self, token: usize) -> bool {
        self.indices.contains(&token)
    }
}

/// Work counters for one kernel invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KernelStats {
    /// Multiply-adds counted as two flops each.
    pub flops: u64,
    /// Weight bytes fetched from memory.
    pub bytes_read: u64,
    /// Bytes allocated for intermediate copies of embedding rows.
    pub intermediate_bytes_allocated: u64,
}

impl KernelStats {
    /// Stats of a dense `rows x cols` matvec.
    pub fn matvec(rows: usize, cols: usize) -> Self {
        KernelStats {
            flops: 2 * rows as u64 * cols as u64,
            bytes_read: rows as u64 * cols as u64 * F32_BYTES,
            intermediate_bytes_allocated: 0,
        }
    }
}

impl Add for KernelStats {
    type Output = KernelStats;

    fn add(self, rhs: KernelStats) -> KernelStats {
        KernelStats {
            flops: self.flops + rhs.flops,
            bytes_read: self.bytes_read + rhs.bytes_read,
            intermediate_bytes_allocated: self.intermediate_bytes_allocated
                + rhs.intermediate_bytes_allocated,
        }
    }
}

impl AddAssign for KernelStats {
    fn add_assign(&mut self, rhs: KernelStats) {
        *self = *self + rhs;
    }
}

fn check_hidden(u: &Matrix, hidden_len: usize) -> Result<()> {
    if u.cols() != hidden_len {
        return Err(Error::precondition(format!(
            "embedding matrix has {} cols but hidden state has {} entries",
            u.cols(),
            hidden_len
        )));
    }
    Ok(())
}

fn check_indices(u: &Matrix, idx: &IndexList) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::precondition("index list is empty"));
    }
    if idx.vocab() > u.rows() {
        if let Some(&bad) = idx.as_slice().iter().find(|&&i| i >= u.rows()) {
            return Err(Error::precondition(format!(
                "index {bad} out of range for embedding matrix with {} rows",
                u.rows()
            )));
        }
    }
    Ok(())
}

/// `z = U h` over the whole vocabulary.
pub fn full_logits(u: &Matrix, h: &Vector) -> Result<(Vector, KernelStats)> {
    check_hidden(u, h.len())?;
    let mut out = vec![0.0; u.rows()];
    matvec_into(u, h.as_slice(), &mut out);
    Ok((Vector::from_raw(out), KernelStats::matvec(u.rows(), u.cols())))
}

/// Materializes `U' = U[idx, :]` and then computes `U' h`.
pub fn indexed_logits_naive(
    u: &Matrix,
    idx: &IndexList,
    h: &Vector,
) -> Result<(Vector, KernelStats)> {
    check_hidden(u, h.len())?;
    check_indices(u, idx)?;
    let gathered = u.gather_rows(idx.as_slice());
    let mut out = vec![0.0; idx.len()];
    matvec_into(&gathered, h.as_slice(), &mut out);
    let stats = KernelStats {
        intermediate_bytes_allocated: gathered.byte_len(),
        ..KernelStats::matvec(idx.len(), u.cols())
    };
    Ok((Vector::from_raw(out), stats))
}

/// Fused indexed head writing into a caller-provided buffer. Performs no
/// heap allocation.
pub fn indexed_logits_fused_into(
    u: &Matrix,
    idx: &IndexList,
    h: &[f32],
    out: &mut [f32],
) -> Result<KernelStats> {
    check_hidden(u, h.len())?;
    check_indices(u, idx)?;
    if out.len() != idx.len() {
        return Err(Error::precondition(format!(
            "output buffer has {} slots for {} indices",
            out.len(),
            idx.len()
        )));
    }
    fused_rows(u, idx.as_slice(), h, out);
    Ok(KernelStats::matvec(idx.len(), u.cols()))
}

#[inline]
fn fused_rows(u: &Matrix, idx: &[usize], h: &[f32], out: &mut [f32]) {
    let mut tiles = idx.chunks_exact(ROW_TILE);
    let mut outs = out.chunks_exact_mut(ROW_TILE);
    for (tile, o) in (&mut tiles).zip(&mut outs) {
        let rows: [&[f32]; ROW_TILE] = std::array::from_fn(|t| u.row(tile[t]));
        o.copy_from_slice(&dot_tile(rows, h));
    }
    for (&i, o) in tiles.remainder().iter().zip(outs.into_remainder()) {
        *o = dot(u.row(i), h);
    }
}

/// `z' = U[idx, :] h` without materializing the gathered rows.
pub fn indexed_logits_fused(
    u: &Matrix,
    idx: &IndexList,
    h: &Vector,
) -> Result<(Vector, KernelStats)> {
    let mut out = vec![0.0; idx.len()];
    let stats = indexed_logits_fused_into(u, idx, h.as_slice(), &mut out)?;
    Ok((Vector::from_raw(out), stats))
}

fn check_batch(u: &Matrix, idx: &IndexList, h_batch: &Matrix) -> Result<()> {
    if h_batch.rows() == 0 {
        return Err(Error::precondition("hidden-state batch is empty"));
    }
    check_hidden(u, h_batch.cols())?;
    check_indices(u, idx)
}

/// Hidden states per SIMD group in the batched kernel.
const LANES: usize = 8;
/// Candidate rows sharing one pass over the transposed hidden states.
const ROW_GROUP: usize = 4;

/// `h_batch` transposed to `d x batch_padded`, zero-padded so the batch is
/// a multiple of `LANES`.
fn transpose_padded(h_batch: &Matrix) -> (Vec<f32>, usize) {
    let padded = h_batch.rows().div_ceil(LANES) * LANES;
    let mut ht = vec![0.0f32; h_batch.cols() * padded];
    for b in 0..h_batch.rows() {
        for (j, &x) in h_batch.row(b).iter().enumerate() {
            ht[j * padded + b] = x;
        }
    }
    (ht, padded)
}

/// Dots `R` rows against one `LANES`-wide group of hidden states. Each
/// accumulator still sums its products left to right, so every output
/// matches `dot` exactly.
#[inline(always)]
fn dot_lanes<const R: usize>(rows: [&[f32]; R], ht: &[f32], padded: usize, lane0: usize) -> [[f32; LANES]; R] {
    let mut acc = [[0.0f32; LANES]; R];
    for (j, h) in ht.chunks_exact(padded).enumerate() {
        let h: &[f32; LANES] = h[lane0..lane0 + LANES].try_into().unwrap();
        for r in 0..R {
            let x = rows[r][j];
            for l in 0..LANES {
                acc[r][l] += x * h[l];
            }
        }
    }
    acc
}

/// Computes one `ROW_TILE`-row block of the batched fused head. `block` is
/// the `batch x tile.len()` slab of the output, stored tile-major.
fn fused_batch_tile(u: &Matrix, tile: &[usize], ht: &[f32], padded: usize, batch: usize, block: &mut [f32]) {
    let w = tile.len();
    let mut store = |first: usize, lane0: usize, acc: &[[f32; LANES]]| {
        for (r, lanes) in acc.iter().enumerate() {
            for (l, &v) in lanes.iter().enumerate().take(batch.saturating_sub(lane0)) {
                block[(lane0 + l) * w + first + r] = v;
            }
        }
    };
    let groups = tile.chunks_exact(ROW_GROUP);
    let rest = groups.remainder();
    for lane0 in (0..padded).step_by(LANES) {
        for (g, group) in tile.chunks_exact(ROW_GROUP).enumerate() {
            let rows: [&[f32]; ROW_GROUP] = std::array::from_fn(|r| u.row(group[r]));
            store(g * ROW_GROUP, lane0, &dot_lanes(rows, ht, padded, lane0));
        }
        for (r, &i) in rest.iter().enumerate() {
            store(w - rest.len() + r, lane0, &dot_lanes([u.row(i)], ht, padded, lane0));
        }
    }
}

/// Batched fused head: row `b` of the result is the fused logits for
/// `h_batch.row(b)`. The hidden states are transposed once so the inner
/// loop runs across the batch; a tile of embedding rows stays cache-resident
/// while every hidden state consumes it.
///
/// With `parallel` the tiles are distributed over the rayon pool. The output
/// is identical either way.
pub fn indexed_logits_fused_batch(
    u: &Matrix,
    idx: &IndexList,
    h_batch: &Matrix,
    parallel: bool,
) -> Result<(Matrix, KernelStats)> {
    check_batch(u, idx, h_batch)?;
    let batch = h_batch.rows();
    let k = idx.len();
    let (ht, padded) = transpose_padded(h_batch);
    // Tile-major scratch: for every tile, a batch x tile_width block.
    let mut scratch = vec![0.0f32; batch * k];
    let tiles: Vec<(&[usize], &mut [f32])> = {
        let mut rest = scratch.as_mut_slice();
        let mut v = Vec::with_capacity(k.div_ceil(ROW_TILE));
        for tile in idx.as_slice().chunks(ROW_TILE) {
            let (block, tail) = rest.split_at_mut(batch * tile.len());
            v.push((tile, block));
            rest = tail;
        }
        v
    };
    if parallel {
        tiles
            .into_par_iter()
            .for_each(|(tile, block)| fused_batch_tile(u, tile, &ht, padded, batch, block));
    } else {
        for (tile, block) in tiles {
            fused_batch_tile(u, tile, &ht, padded, batch, block);
        }
    }
    let mut out = Matrix::zeros(batch, k);
    let mut offset = 0;
    for (t, tile) in idx.as_slice().chunks(ROW_TILE).enumerate() {
        let w = tile.len();
        let col = t * ROW_TILE;
        for b in 0..batch {
            out.row_mut(b)[col..col + w]
                .copy_from_slice(&scratch[offset + b * w..offset + (b + 1) * w]);
        }
        offset += batch * w;
    }
    let stats = KernelStats {
        flops: 2 * (batch * k * u.cols()) as u64,
        bytes_read: (k * u.cols()) as u64 * F32_BYTES,
        intermediate_bytes_allocated: 0,
    };
    Ok((out, stats))
}

/// Batched naive head: materializes `U[idx, :]` once, then one matvec per
/// hidden state.
pub fn indexed_logits_naive_batch(
    u: &Matrix,
    idx: &IndexList,
    h_batch: &Matrix,
) -> Result<(Matrix, KernelStats)> {
    check_batch(u, idx, h_batch)?;
    let gathered = u.gather_rows(idx.as_slice());
    let mut out = Matrix::zeros(h_batch.rows(), idx.len());
    for b in 0..h_batch.rows() {
        matvec_into(&gathered, h_batch.row(b), out.row_mut(b));
    }
    let stats = KernelStats {
        flops: 2 * (h_batch.rows() * idx.len() * u.cols()) as u64,
        bytes_read: gathered.byte_len(),
        intermediate_bytes_allocated: gathered.byte_len(),
    };
    Ok((out, stats))
}
