//! Tiled LM head fused with cross-entropy.
//!
//! For each row tile the logits are computed vocab tile by vocab tile while a
//! streaming logsumexp runs; the tile's logits are kept until its backward is
//! done and then overwritten in place by `softmax - onehot`. The only
//! auxiliary buffer is therefore one `B_s × v` logits tile. The running Lse
//! lives in the row's loss slot until the loss is finalized.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::numerics::{dot, logsumexp, lse_merge_scalar, Matrix, Vector};
use crate::oracle::check_targets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FusionConfig {
    /// Row tile `B_s`, tokens.
    pub block_rows: usize,
    /// Vocab tile `B_v`, vocabulary entries.
    pub block_vocab: usize,
}

impl FusionConfig {
    pub fn new(block_rows: usize, block_vocab: usize) -> Result<Self> {
        let cfg = Self {
            block_rows,
            block_vocab,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_rows == 0 {
            return Err(invalid("block_rows", "must be at least 1"));
        }
        if self.block_vocab == 0 {
            return Err(invalid("block_vocab", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedLossResult {
    pub loss: Vector,
    pub dh: Matrix,
    pub dw: Matrix,
    /// Largest auxiliary allocation alive at once, elements.
    pub peak_aux_elements: u64,
}

fn tiles(len: usize, block: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..len)
        .step_by(block)
        .map(move |s| (s, (s + block).min(len)))
}

pub fn fused_lmhead_loss(
    h: &Matrix,
    w_head: &Matrix,
    targets: &[usize],
    cfg: FusionConfig,
) -> Result<FusedLossResult> {
    fused_lmhead_loss_inspect(h, w_head, targets, cfg, |_, _| {})
}

/// As [`fused_lmhead_loss`], handing each finished `dLogits` row tile and its
/// first row index to `inspect` before the tile is dropped.
pub fn fused_lmhead_loss_inspect(
    h: &Matrix,
    w_head: &Matrix,
    targets: &[usize],
    cfg: FusionConfig,
    mut inspect: impl FnMut(usize, &Matrix),
) -> Result<FusedLossResult> {
    cfg.validate()?;
    if h.cols() != w_head.cols() {
        return Err(Error::ShapeMismatch {
            op: "fused_lmhead_loss",
            left: h.shape(),
            right: w_head.shape(),
        });
    }
    let (n, d) = h.shape();
    let vocab = w_head.rows();
    check_targets(n, vocab, targets)?;

    let mut loss = Vector::neg_infinity(n);
    let mut dh = Matrix::zeros(n, d);
    let mut dw = Matrix::zeros(vocab, d);
    let mut peak = 0u64;

    for (r0, r1) in tiles(n, cfg.block_rows) {
        let mut logits = Matrix::zeros(r1 - r0, vocab);
        peak = peak.max(logits.len() as u64);

        for (c0, c1) in tiles(vocab, cfg.block_vocab) {
            for r in r0..r1 {
                let row = logits.row_mut(r - r0);
                for c in c0..c1 {
                    row[c] = dot(h.row(r), w_head.row(c));
                }
                let tile_lse = logsumexp(&row[c0..c1]);
                let slot = &mut loss.as_mut_slice()[r];
                *slot = lse_merge_scalar(*slot, tile_lse);
            }
        }

        for (c0, c1) in tiles(vocab, cfg.block_vocab) {
            for r in r0..r1 {
                let lse = loss.get(r);
                let y = targets[r];
                let row = logits.row_mut(r - r0);
                for c in c0..c1 {
                    let mut g = (row[c] - lse).exp();
                    if c == y {
                        g -= 1.0;
                    }
                    for (acc, &wc) in dh.row_mut(r).iter_mut().zip(w_head.row(c)) {
                        *acc += g * wc;
                    }
                    for (acc, &hr) in dw.row_mut(c).iter_mut().zip(h.row(r)) {
                        *acc += g * hr;
                    }
                    // The target logit stays until the loss is final.
                    if c != y {
                        row[c] = g;
                    }
                }
            }
        }
        for r in r0..r1 {
            let lse = loss.get(r);
            let y = targets[r];
            let row = logits.row_mut(r - r0);
            loss.as_mut_slice()[r] = lse - row[y];
            row[y] = (row[y] - lse).exp() - 1.0;
        }
        inspect(r0, &logits);
    }

    Ok(FusedLossResult {
        loss,
        dh,
        dw,
        peak_aux_elements: peak,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Footprint {
    pub naive_elements: u64,
    pub fused_peak_elements: u64,
}

/// Logits storage: the full `N × v` matrix versus one `B_s × v` tile.
pub fn memory_footprint(n: u64, v: u64, _d: u64, cfg: FusionConfig) -> Footprint {
    Footprint {
        naive_elements: n * v,
        fused_peak_elements: (cfg.block_rows as u64).min(n) * v,
    }
}
