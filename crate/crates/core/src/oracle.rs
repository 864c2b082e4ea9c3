//! Single-device, fully materialized references. Every distributed result in
//! the crate is compared against these.
//!
//! Scores are scaled by `1/√d` in the forward pass, and the same factor is
//! applied to `dQ` and `dK` in the backward pass.

use serde::Serialize;

use crate::dd::Dd;
use crate::error::{invalid, Error, Result};
use crate::numerics::{
    dot, logsumexp, matmul, matmul_nt, matmul_tn, rowsum_hadamard, seeded_random_matrix, Matrix,
    Vector,
};

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub d: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// Output projection; carried for completeness, unused by the ring passes.
    pub w_attn: Matrix,
}

impl AttentionParams {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, w_attn: Matrix) -> Result<Self> {
        let d = w_q.rows();
        for m in [&w_q, &w_k, &w_v, &w_attn] {
            if m.shape() != (d, d) {
                return Err(Error::ShapeMismatch {
                    op: "AttentionParams::new",
                    left: (d, d),
                    right: m.shape(),
                });
            }
        }
        Ok(Self {
            d,
            w_q,
            w_k,
            w_v,
            w_attn,
        })
    }

    pub fn identity(d: usize) -> Self {
        let i = Matrix::identity(d);
        Self {
            d,
            w_q: i.clone(),
            w_k: i.clone(),
            w_v: i.clone(),
            w_attn: i,
        }
    }

    pub fn seeded(d: usize, seed: u64) -> Self {
        use crate::numerics::seeded_random_matrix as r;
        Self {
            d,
            w_q: r(d, d, seed),
            w_k: r(d, d, seed.wrapping_add(1)),
            w_v: r(d, d, seed.wrapping_add(2)),
            w_attn: r(d, d, seed.wrapping_add(3)),
        }
    }
}

/// Which (query, key) pairs participate. Positions are 0-based row indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    Full,
    Causal,
    /// Causal band: query `q` sees keys `k` with `0 <= q - k < window`.
    SlidingWindow {
        window: usize,
    },
    /// `block_mask[bq][bk] == 1` lets every token of block `bq` see every token
    /// of block `bk`.
    BlockSparse {
        block_mask: Matrix,
        block_len: usize,
    },
}

impl MaskSpec {
    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        match self {
            MaskSpec::Full => true,
            MaskSpec::Causal => k <= q,
            MaskSpec::SlidingWindow { window } => k <= q && q - k < *window,
            MaskSpec::BlockSparse {
                block_mask,
                block_len,
            } => block_mask.get(q / block_len, k / block_len) != 0.0,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            MaskSpec::Full | MaskSpec::Causal => Ok(()),
            MaskSpec::SlidingWindow { window } => {
                if *window == 0 || *window > n {
                    Err(invalid(
                        "window",
                        format!("must be in [1, {n}], got {window}"),
                    ))
                } else {
                    Ok(())
                }
            }
            MaskSpec::BlockSparse {
                block_mask,
                block_len,
            } => {
                if *block_len == 0 || n % block_len != 0 {
                    return Err(Error::Divisibility {
                        what: "sequence length by block length",
                        value: n,
                        divisor: *block_len,
                    });
                }
                let side = n / block_len;
                if block_mask.shape() != (side, side) {
                    return Err(Error::ShapeMismatch {
                        op: "block mask",
                        left: (side, side),
                        right: block_mask.shape(),
                    });
                }
                if block_mask.data().iter().any(|&x| x != 0.0 && x != 1.0) {
                    return Err(invalid("block_mask", "entries must be 0 or 1"));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskSpec::Full => "full",
            MaskSpec::Causal => "causal",
            MaskSpec::SlidingWindow { .. } => "sliding_window",
            MaskSpec::BlockSparse { .. } => "block_sparse",
        }
    }

    /// Block-sparse mask with the diagonal blocks kept and each off-diagonal
    /// block kept with probability one half.
    pub fn seeded_block_sparse(n: usize, block_len: usize, seed: u64) -> Result<Self> {
        if block_len == 0 || n % block_len != 0 {
            return Err(Error::Divisibility {
                what: "sequence length by block length",
                value: n,
                divisor: block_len,
            });
        }
        let blocks = n / block_len;
        let r = seeded_random_matrix(blocks, blocks, seed);
        let mut block_mask = Matrix::zeros(blocks, blocks);
        for a in 0..blocks {
            for b in 0..blocks {
                block_mask.set(
                    a,
                    b,
                    if a == b || r.get(a, b) > 0.0 {
                        1.0
                    } else {
                        0.0
                    },
                );
            }
        }
        Ok(MaskSpec::BlockSparse {
            block_mask,
            block_len,
        })
    }

    /// Number of unmasked pairs over an `n × n` score matrix.
    pub fn pair_count(&self, n: usize) -> u64 {
        let mut c = 0;
        for q in 0..n {
            for k in 0..n {
                if self.allows(q, k) {
                    c += 1;
                }
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub o: Matrix,
    pub lse: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

impl AttentionGrads {
    pub fn max_abs_diff(&self, other: &AttentionGrads) -> Result<f64> {
        Ok(self
            .dq
            .max_abs_diff(&other.dq)?
            .max(self.dk.max_abs_diff(&other.dk)?)
            .max(self.dv.max_abs_diff(&other.dv)?))
    }
}

pub fn project_qkv(x: &Matrix, params: &AttentionParams) -> Result<(Matrix, Matrix, Matrix)> {
    if x.cols() != params.d {
        return Err(Error::ShapeMismatch {
            op: "project_qkv",
            left: x.shape(),
            right: (params.d, params.d),
        });
    }
    Ok((
        matmul(x, &params.w_q)?,
        matmul(x, &params.w_k)?,
        matmul(x, &params.w_v)?,
    ))
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() || k.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: q.shape(),
            right: k.shape(),
        });
    }
    Ok(())
}

/// Masked, scaled scores for a block of queries starting at global row
/// `first_query`. Masked entries are `-∞`.
pub(crate) fn masked_scores(
    q: &Matrix,
    k: &Matrix,
    mask: &MaskSpec,
    first_query: usize,
) -> Result<Matrix> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut s = matmul_nt(q, k)?;
    for i in 0..s.rows() {
        for j in 0..s.cols() {
            let x = if mask.allows(first_query + i, j) {
                s.get(i, j) * scale
            } else {
                f64::NEG_INFINITY
            };
            s.set(i, j, x);
        }
    }
    Ok(s)
}

/// Forward pass for the query rows `first_query..first_query + q.rows()`
/// against all keys. Rows are independent, so any row subset reproduces the
/// full pass bit for bit. Also returns the number of unmasked pairs touched.
pub fn attention_forward_rows(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &MaskSpec,
    first_query: usize,
) -> Result<(AttentionResult, u64)> {
    check_qkv(q, k, v)?;
    let s = masked_scores(q, k, mask, first_query)?;
    let mut o = Matrix::zeros(q.rows(), v.cols());
    let mut lse = Vec::with_capacity(q.rows());
    let mut pairs = 0u64;
    for i in 0..s.rows() {
        let l = logsumexp(s.row(i));
        if l == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow {
                row: first_query + i,
            });
        }
        lse.push(l);
        let out = o.row_mut(i);
        for (j, &x) in s.row(i).iter().enumerate() {
            if x == f64::NEG_INFINITY {
                continue;
            }
            pairs += 1;
            let p = (x - l).exp();
            for (o_c, &v_c) in out.iter_mut().zip(v.row(j)) {
                *o_c += p * v_c;
            }
        }
    }
    Ok((
        AttentionResult {
            o,
            lse: Vector::new(lse),
        },
        pairs,
    ))
}

pub fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &MaskSpec,
) -> Result<AttentionResult> {
    attention_forward_rows(q, k, v, mask, 0).map(|(r, _)| r)
}

/// Analytic gradients for a fixed output cotangent `d_o`:
/// `P = exp(S - Lse)`, `dV = Pᵀ dO`, `dP = dO Vᵀ`, `D = rowsum(dO ∘ O)`,
/// `dS = P ∘ (dP - D)`, `dQ = dS K / √d`, `dK = dSᵀ Q / √d`.
pub fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    o: &Matrix,
    lse: &Vector,
    d_o: &Matrix,
    mask: &MaskSpec,
) -> Result<AttentionGrads> {
    check_qkv(q, k, v)?;
    if o.shape() != (q.rows(), v.cols()) || d_o.shape() != o.shape() || lse.len() != q.rows() {
        return Err(Error::ShapeMismatch {
            op: "attention_backward",
            left: o.shape(),
            right: d_o.shape(),
        });
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let s = masked_scores(q, k, mask, 0)?;
    let mut p = Matrix::zeros(s.rows(), s.cols());
    for i in 0..s.rows() {
        let l = lse.get(i);
        for j in 0..s.cols() {
            let x = s.get(i, j);
            if x != f64::NEG_INFINITY {
                p.set(i, j, (x - l).exp());
            }
        }
    }
    let dv = matmul_tn(&p, d_o)?;
    let dp = matmul_nt(d_o, v)?;
    let dsum = rowsum_hadamard(d_o, o)?;
    let mut ds = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        for j in 0..p.cols() {
            ds.set(i, j, p.get(i, j) * (dp.get(i, j) - dsum.get(i)));
        }
    }
    let dq = matmul(&ds, k)?.scaled(scale);
    let dk = matmul_tn(&ds, q)?.scaled(scale);
    Ok(AttentionGrads { dq, dk, dv })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmHeadLoss {
    /// Per-token cross-entropy, nats.
    pub loss: Vector,
    pub dh: Matrix,
    pub dw: Matrix,
}

pub(crate) fn check_targets(n: usize, vocab: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            op: "targets",
            left: (n, 1),
            right: (targets.len(), 1),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= vocab) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: vocab,
        });
    }
    Ok(())
}

/// Full-logits LM head with cross-entropy; gradients are of `Σ loss`.
pub fn naive_lmhead_loss(h: &Matrix, w_head: &Matrix, targets: &[usize]) -> Result<LmHeadLoss> {
    if h.cols() != w_head.cols() {
        return Err(Error::ShapeMismatch {
            op: "naive_lmhead_loss",
            left: h.shape(),
            right: w_head.shape(),
        });
    }
    check_targets(h.rows(), w_head.rows(), targets)?;
    let logits = matmul_nt(h, w_head)?;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = Vec::with_capacity(h.rows());
    for (i, &y) in targets.iter().enumerate() {
        let l = logsumexp(logits.row(i));
        loss.push(l - logits.get(i, y));
        for (g, &x) in dlogits.row_mut(i).iter_mut().zip(logits.row(i)) {
            *g = (x - l).exp();
        }
        dlogits.set(i, y, dlogits.get(i, y) - 1.0);
    }
    Ok(LmHeadLoss {
        loss: Vector::new(loss),
        dh: matmul(&dlogits, w_head)?,
        dw: matmul_tn(&dlogits, h)?,
    })
}

/// Central-difference check. Returns the largest
/// `|numeric - analytic| / max(|analytic|, 1e-8)` over all entries.
pub fn finite_diff_check<F>(f: F, x: &Matrix, analytic: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&Matrix) -> f64,
{
    central_differences(|m| Dd::new(f(m)), x, analytic, h)
}

/// [`finite_diff_check`] for a function evaluated in double-double. The
/// difference `f(x + h) - f(x - h)` is formed before rounding, so the f64
/// cancellation floor (about `eps·|f| / h`) drops out of the comparison.
pub fn finite_diff_check_dd<F>(f: F, x: &Matrix, analytic: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&Matrix) -> Dd,
{
    central_differences(f, x, analytic, h)
}

fn central_differences<F>(f: F, x: &Matrix, analytic: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&Matrix) -> Dd,
{
    if !(h > 0.0) {
        return Err(invalid("h", "step must be positive"));
    }
    if x.shape() != analytic.shape() {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_check",
            left: x.shape(),
            right: analytic.shape(),
        });
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for idx in 0..x.len() {
        let orig = x.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[idx] = orig;
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(Error::NonFinite { value: value.hi });
            }
        }
        let numeric = (plus - minus).to_f64() / (2.0 * h);
        let a = analytic.data()[idx];
        worst = worst.max((numeric - a).abs() / a.abs().max(1e-8));
    }
    Ok(worst)
}

/// `Σ O ∘ dO` for the attention defined by `q, k, v`; the scalar whose
/// gradient `attention_backward` returns.
pub fn attention_scalar_loss(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    mask: &MaskSpec,
) -> f64 {
    match attention_forward(q, k, v, mask) {
        Ok(r) => dot(r.o.data(), d_o.data()),
        Err(_) => f64::NAN,
    }
}

/// [`attention_scalar_loss`] evaluated in double-double; NaN when a row is
/// fully masked.
pub fn attention_scalar_loss_dd(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    mask: &MaskSpec,
) -> Dd {
    let scale = Dd::ONE / Dd::new(q.cols() as f64).sqrt();
    let dot_dd = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .fold(Dd::ZERO, |acc, (&x, &y)| acc + Dd::prod(x, y))
    };
    let mut total = Dd::ZERO;
    let mut scores = Vec::with_capacity(k.rows());
    for r in 0..q.rows() {
        scores.clear();
        for j in 0..k.rows() {
            if mask.allows(r, j) {
                scores.push((j, dot_dd(q.row(r), k.row(j)) * scale));
            }
        }
        let Some(m) = scores.iter().map(|(_, s)| s.hi).reduce(f64::max) else {
            return Dd::NAN;
        };
        let (mut z, mut acc) = (Dd::ZERO, Dd::ZERO);
        for &(j, s) in &scores {
            let w = (s - Dd::new(m)).exp();
            z = z + w;
            acc = acc + w * dot_dd(v.row(j), d_o.row(r));
        }
        total = total + acc / z;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_random_matrix as rand_m;

    fn qkv(n: usize, d: usize, seed: u64) -> (Matrix, Matrix, Matrix) {
        (
            rand_m(n, d, seed),
            rand_m(n, d, seed + 1),
            rand_m(n, d, seed + 2),
        )
    }

    /// Per-pair enumeration with explicit softmax normalisation.
    fn pair_loop_forward(q: &Matrix, k: &Matrix, v: &Matrix, mask: &MaskSpec) -> Matrix {
        let n = q.rows();
        let d = q.cols();
        let mut o = Matrix::zeros(n, d);
        for i in 0..n {
            let mut weights = vec![0.0; n];
            let mut z = 0.0;
            for (j, w) in weights.iter_mut().enumerate() {
                if mask.allows(i, j) {
                    let s: f64 =
                        (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (d as f64).sqrt();
                    *w = s.exp();
                    z += *w;
                }
            }
            for (j, w) in weights.iter().enumerate() {
                for c in 0..d {
                    o.set(i, c, o.get(i, c) + w / z * v.get(j, c));
                }
            }
        }
        o
    }

    #[test]
    fn identity_projection() {
        let x = rand_m(5, 3, 1);
        let (q, k, v) = project_qkv(&x, &AttentionParams::identity(3)).unwrap();
        assert_eq!((q, k, v), (x.clone(), x.clone(), x));
        let (q, _, _) = project_qkv(&Matrix::zeros(4, 3), &AttentionParams::seeded(3, 4)).unwrap();
        assert_eq!(q, Matrix::zeros(4, 3));
        assert!(project_qkv(&Matrix::zeros(4, 2), &AttentionParams::identity(3)).is_err());
    }

    #[test]
    fn projection_matches_matmul() {
        let x = rand_m(6, 4, 2);
        let p = AttentionParams::seeded(4, 9);
        let (q, k, v) = project_qkv(&x, &p).unwrap();
        for (got, w) in [(q, &p.w_q), (k, &p.w_k), (v, &p.w_v)] {
            for i in 0..6 {
                for j in 0..4 {
                    let want: f64 = (0..4).map(|c| x.get(i, c) * w.get(c, j)).sum();
                    assert!((got.get(i, j) - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (q, k, v) = qkv(1, 3, 5);
        let r = attention_forward(&q, &k, &v, &MaskSpec::Full).unwrap();
        assert_eq!(r.o, v);
        let s = dot(q.row(0), k.row(0)) / 3f64.sqrt();
        assert!((r.lse.get(0) - s).abs() < 1e-15);
    }

    #[test]
    fn causal_first_row_copies_first_value() {
        let (q, k, v) = qkv(2, 3, 8);
        let r = attention_forward(&q, &k, &v, &MaskSpec::Causal).unwrap();
        assert_eq!(r.o.row(0), v.row(0));
    }

    #[test]
    fn sliding_window_matches_pair_loop() {
        let (q, k, v) = qkv(8, 4, 20);
        let mask = MaskSpec::SlidingWindow { window: 3 };
        let r = attention_forward(&q, &k, &v, &mask).unwrap();
        let want = pair_loop_forward(&q, &k, &v, &mask);
        assert!(r.o.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let (q, k, v) = qkv(4, 2, 1);
        let mut bm = Matrix::identity(2);
        bm.set(1, 1, 0.0);
        let mask = MaskSpec::BlockSparse {
            block_mask: bm,
            block_len: 2,
        };
        assert_eq!(
            attention_forward(&q, &k, &v, &mask),
            Err(Error::FullyMaskedRow { row: 2 })
        );
    }

    #[test]
    fn zero_cotangent_gives_zero_grads() {
        let (q, k, v) = qkv(5, 3, 3);
        let r = attention_forward(&q, &k, &v, &MaskSpec::Causal).unwrap();
        let g = attention_backward(
            &q,
            &k,
            &v,
            &r.o,
            &r.lse,
            &Matrix::zeros(5, 3),
            &MaskSpec::Causal,
        )
        .unwrap();
        assert_eq!(g.dq.max_abs(), 0.0);
        assert_eq!(g.dk.max_abs(), 0.0);
        assert_eq!(g.dv.max_abs(), 0.0);
    }

    #[test]
    fn single_token_grads() {
        let (q, k, v) = qkv(1, 3, 30);
        let d_o = rand_m(1, 3, 33);
        let r = attention_forward(&q, &k, &v, &MaskSpec::Full).unwrap();
        let g = attention_backward(&q, &k, &v, &r.o, &r.lse, &d_o, &MaskSpec::Full).unwrap();
        assert_eq!(g.dv, d_o);
        assert!(g.dq.max_abs() < 1e-15);
        assert!(g.dk.max_abs() < 1e-15);
    }

    #[test]
    fn causal_grads_match_finite_differences() {
        let (q, k, v) = qkv(6, 3, 40);
        let d_o = rand_m(6, 3, 43);
        let mask = MaskSpec::Causal;
        let r = attention_forward(&q, &k, &v, &mask).unwrap();
        let g = attention_backward(&q, &k, &v, &r.o, &r.lse, &d_o, &mask).unwrap();
        let eq = finite_diff_check(
            |x| attention_scalar_loss(x, &k, &v, &d_o, &mask),
            &q,
            &g.dq,
            1e-6,
        )
        .unwrap();
        let ek = finite_diff_check(
            |x| attention_scalar_loss(&q, x, &v, &d_o, &mask),
            &k,
            &g.dk,
            1e-6,
        )
        .unwrap();
        let ev = finite_diff_check(
            |x| attention_scalar_loss(&q, &k, x, &d_o, &mask),
            &v,
            &g.dv,
            1e-6,
        )
        .unwrap();
        assert!(eq < 1e-5 && ek < 1e-5 && ev < 1e-5, "{eq} {ek} {ev}");
    }

    #[test]
    fn zero_cotangent_rows_do_not_reach_dv() {
        let (q, k, v) = qkv(6, 3, 50);
        let mut d_o = rand_m(6, 3, 53);
        d_o.row_mut(4).fill(0.0);
        d_o.row_mut(5).fill(0.0);
        let mask = MaskSpec::Causal;
        let r = attention_forward(&q, &k, &v, &mask).unwrap();
        let g = attention_backward(&q, &k, &v, &r.o, &r.lse, &d_o, &mask).unwrap();
        // Keys 4 and 5 are only seen by queries 4 and 5.
        assert_eq!(g.dv.row(4), &[0.0; 3]);
        assert_eq!(g.dv.row(5), &[0.0; 3]);
    }

    #[test]
    fn lmhead_uniform_logits() {
        let h = Matrix::from_rows(&[&[0.0]]);
        let w = Matrix::from_rows(&[&[0.0], &[0.0]]);
        let r = naive_lmhead_loss(&h, &w, &[0]).unwrap();
        assert!((r.loss.get(0) - 2f64.ln()).abs() < 1e-15);
        assert!(naive_lmhead_loss(&h, &w, &[2]).is_err());
    }

    #[test]
    fn lmhead_saturates_towards_zero() {
        let w = Matrix::identity(4);
        let mut prev = f64::INFINITY;
        for scale in [1.0, 4.0, 16.0, 64.0] {
            let h = Matrix::from_rows(&[w.row(2)]).scaled(scale);
            let l = naive_lmhead_loss(&h, &w, &[2]).unwrap().loss.get(0);
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn lmhead_grads_match_finite_differences() {
        let h = rand_m(4, 3, 70);
        let w = rand_m(7, 3, 71);
        let y = [3, 0, 6, 3];
        let r = naive_lmhead_loss(&h, &w, &y).unwrap();
        let total = |h: &Matrix, w: &Matrix| -> f64 {
            naive_lmhead_loss(h, w, &y)
                .unwrap()
                .loss
                .as_slice()
                .iter()
                .sum()
        };
        assert!(finite_diff_check(|x| total(x, &w), &h, &r.dh, 1e-6).unwrap() < 1e-5);
        assert!(finite_diff_check(|x| total(&h, x), &w, &r.dw, 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn dlogits_rows_sum_to_zero() {
        // dH = dLogits·W; with W = ones column the product is the row sum.
        let h = rand_m(3, 1, 80);
        let w = Matrix::filled(6, 1, 1.0);
        let r = naive_lmhead_loss(&h, &w, &[0, 5, 2]).unwrap();
        assert!(r.dh.max_abs() < 1e-15);
    }

    #[test]
    fn dd_scalar_loss_agrees_with_f64() {
        for mask in [
            MaskSpec::Full,
            MaskSpec::Causal,
            MaskSpec::SlidingWindow { window: 3 },
        ] {
            let (q, k, v) = qkv(9, 5, 40);
            let d_o = rand_m(9, 5, 43);
            let f = attention_scalar_loss(&q, &k, &v, &d_o, &mask);
            let p = attention_scalar_loss_dd(&q, &k, &v, &d_o, &mask).to_f64();
            assert!((f - p).abs() <= 1e-14 * f.abs().max(1.0), "{f} vs {p}");
        }
        let (q, k, v) = qkv(4, 2, 1);
        let empty = MaskSpec::BlockSparse {
            block_mask: Matrix::zeros(2, 2),
            block_len: 2,
        };
        assert!(attention_scalar_loss_dd(&q, &k, &v, &q, &empty).hi.is_nan());
    }

    /// Small analytic entries sit below the f64 cancellation floor of a
    /// central difference at h = 1e-6; the double-double loss does not.
    #[test]
    fn dd_finite_differences_resolve_small_entries() {
        let mut worst_f64 = 0.0f64;
        let mut worst_dd = 0.0f64;
        for seed in 0..6 {
            let (q, k, v) = qkv(16, 4, 100 + 3 * seed);
            let d_o = rand_m(16, 4, 200 + seed);
            let mask = MaskSpec::Causal;
            let f = attention_forward(&q, &k, &v, &mask).unwrap();
            let g = attention_backward(&q, &k, &v, &f.o, &f.lse, &d_o, &mask).unwrap();
            worst_f64 = worst_f64.max(
                finite_diff_check(
                    |x| attention_scalar_loss(&q, x, &v, &d_o, &mask),
                    &k,
                    &g.dk,
                    1e-6,
                )
                .unwrap(),
            );
            worst_dd = worst_dd.max(
                finite_diff_check_dd(
                    |x| attention_scalar_loss_dd(&q, x, &v, &d_o, &mask),
                    &k,
                    &g.dk,
                    1e-6,
                )
                .unwrap(),
            );
        }
        assert!(worst_dd < 1e-5, "{worst_dd:e}");
        assert!(worst_dd < worst_f64, "{worst_dd:e} vs {worst_f64:e}");
    }

    #[test]
    fn finite_diff_trivial_functions() {
        let x = rand_m(3, 4, 90);
        let sum = |m: &Matrix| m.data().iter().sum::<f64>();
        assert!(finite_diff_check(sum, &x, &Matrix::filled(3, 4, 1.0), 0.25).unwrap() < 1e-10);
        let sq = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>();
        assert!(finite_diff_check(sq, &x, &x.scaled(2.0), 1e-6).unwrap() < 1e-6);
        assert!(finite_diff_check(sum, &x, &x, 0.0).is_err());
        let nan = |_: &Matrix| f64::NAN;
        assert!(matches!(
            finite_diff_check(nan, &x, &x, 1e-6),
            Err(Error::NonFinite { .. })
        ));
    }
}
