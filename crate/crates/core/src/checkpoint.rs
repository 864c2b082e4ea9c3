//! Storage and recomputation models for attention checkpointing, plus a toy
//! single-layer run that recomputes what a policy did not keep.
//!
//! Storage counts per layer: the layer input `X` (`N·d`) is always kept;
//! selective++ also keeps the attention output `O` (`N·d`); the sequence
//! policy keeps `O` only for the rows at or after the split `b = s·N`, and
//! recomputes the attention rows before it. Score matrices are never stored.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::numerics::{seeded_random_matrix, Matrix, Vector};
use crate::oracle::{
    attention_backward, attention_forward_rows, project_qkv, AttentionParams, MaskSpec,
};

pub const DEFAULT_SPLIT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointPolicy {
    FullRecompute,
    SelectivePp,
    SequenceSelective { split: f64 },
}

impl CheckpointPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            CheckpointPolicy::FullRecompute => "full_recompute",
            CheckpointPolicy::SelectivePp => "selective_pp",
            CheckpointPolicy::SequenceSelective { .. } => "sequence_selective",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let CheckpointPolicy::SequenceSelective { split } = *self {
            if !(split > 0.0 && split < 1.0) {
                return Err(invalid(
                    "split",
                    format!("must lie strictly between 0 and 1, got {split}"),
                ));
            }
        }
        Ok(())
    }

    /// First query row whose attention output is stored.
    pub fn boundary(&self, n: usize) -> Result<usize> {
        self.validate()?;
        match *self {
            CheckpointPolicy::FullRecompute => Ok(n),
            CheckpointPolicy::SelectivePp => Ok(0),
            CheckpointPolicy::SequenceSelective { split } => {
                let b = split * n as f64;
                let rounded = b.round();
                if (b - rounded).abs() > 1e-9 * n.max(1) as f64 {
                    return Err(invalid(
                        "split",
                        format!("split × seq_len = {b} is not a whole token boundary"),
                    ));
                }
                Ok(rounded as usize)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanReport {
    pub policy: CheckpointPolicy,
    pub stored_elements_per_layer: u64,
    /// Stored elements beyond the layer input.
    pub attention_extra_elements: u64,
    pub recompute_pairs: u64,
    pub total_pairs: u64,
    pub recompute_fraction: f64,
}

impl PlanReport {
    pub fn stored_elements(&self, layers: u64) -> u64 {
        self.stored_elements_per_layer * layers
    }
}

fn pairs_before(mask: &MaskSpec, n: usize, b: usize) -> u64 {
    let mut c = 0;
    for q in 0..b {
        for k in 0..n {
            c += mask.allows(q, k) as u64;
        }
    }
    c
}

pub fn plan(policy: CheckpointPolicy, n: usize, d: usize, mask: &MaskSpec) -> Result<PlanReport> {
    mask.validate(n)?;
    let b = policy.boundary(n)?;
    let nd = (n * d) as u64;
    let total_pairs = pairs_before(mask, n, n);
    let (extra, recompute_pairs) = match policy {
        CheckpointPolicy::FullRecompute => (0, total_pairs),
        CheckpointPolicy::SelectivePp => (nd, 0),
        CheckpointPolicy::SequenceSelective { .. } => {
            (((n - b) * d) as u64, pairs_before(mask, n, b))
        }
    };
    Ok(PlanReport {
        policy,
        stored_elements_per_layer: nd + extra,
        attention_extra_elements: extra,
        recompute_pairs,
        total_pairs,
        recompute_fraction: if total_pairs == 0 {
            0.0
        } else {
            recompute_pairs as f64 / total_pairs as f64
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub policy: CheckpointPolicy,
    pub seq_len: usize,
    pub dim: usize,
    pub seed: u64,
    pub stored_elements: u64,
    /// Attention forward calls issued during backward.
    pub recompute_events: u64,
    pub recomputed_pairs: u64,
    pub recompute_fraction: f64,
    /// Largest difference of dQ, dK, dV against the store-everything run.
    pub max_grad_diff: f64,
}

/// One attention layer on seeded inputs: forward keeps what `policy` allows,
/// backward recomputes the missing attention rows, and the gradients are
/// compared with a run that kept everything.
pub fn execute_toy(
    policy: CheckpointPolicy,
    n: usize,
    d: usize,
    mask: &MaskSpec,
    seed: u64,
) -> Result<ToyReport> {
    if n == 0 || n > 64 {
        return Err(invalid(
            "seq_len",
            format!("toy runs take 1..=64 tokens, got {n}"),
        ));
    }
    mask.validate(n)?;
    let b = policy.boundary(n)?;
    let x = seeded_random_matrix(n, d, seed);
    let params = AttentionParams::seeded(d, seed.wrapping_add(100));
    let d_o = seeded_random_matrix(n, d, seed.wrapping_add(200));

    let (q, k, v) = project_qkv(&x, &params)?;
    let (full, total_pairs) = attention_forward_rows(&q, &k, &v, mask, 0)?;
    let baseline = attention_backward(&q, &k, &v, &full.o, &full.lse, &d_o, mask)?;

    // What the policy keeps from the forward pass.
    let kept_o = full.o.row_block(b, n);
    let kept_lse = Vector::new(full.lse.as_slice()[b..].to_vec());
    drop(full);

    let (q, k, v) = project_qkv(&x, &params)?;
    let mut recompute_events = 0;
    let mut recomputed_pairs = 0;
    let mut o = Matrix::zeros(n, d);
    let mut lse = vec![0.0; n];
    if b > 0 {
        let (seg, pairs) = attention_forward_rows(&q.row_block(0, b), &k, &v, mask, 0)?;
        recompute_events += 1;
        recomputed_pairs += pairs;
        for r in 0..b {
            o.row_mut(r).copy_from_slice(seg.o.row(r));
            lse[r] = seg.lse.get(r);
        }
    }
    for r in b..n {
        o.row_mut(r).copy_from_slice(kept_o.row(r - b));
        lse[r] = kept_lse.get(r - b);
    }
    let grads = attention_backward(&q, &k, &v, &o, &Vector::new(lse), &d_o, mask)?;

    Ok(ToyReport {
        policy,
        seq_len: n,
        dim: d,
        seed,
        stored_elements: plan(policy, n, d, mask)?.stored_elements_per_layer,
        recompute_events,
        recomputed_pairs,
        recompute_fraction: if total_pairs == 0 {
            0.0
        } else {
            recomputed_pairs as f64 / total_pairs as f64
        },
        max_grad_diff: grads.max_abs_diff(&baseline)?,
    })
}

/// `(N/2)(N/2 + 1)/2 ÷ N(N + 1)/2`, the causal recompute fraction at `s = 0.5`.
pub fn causal_half_split_fraction(n: usize) -> f64 {
    let h = (n / 2) as f64;
    let n = n as f64;
    (h * (h + 1.0) / 2.0) / (n * (n + 1.0) / 2.0)
}
