//! Token-to-device layouts and exact workload accounting for masked
//! attention.
//!
//! Devices and token ids are 1-based in the public types (`Shard::device`,
//! `Shard::token_ids`). Local pair coordinates returned by [`local_pair_set`]
//! are 0-based row offsets into the shard matrices.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::numerics::Matrix;
use crate::oracle::MaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayoutKind {
    Contiguous,
    /// Device `i` owns the `i`-th front chunk and the `i`-th chunk from the
    /// back, each of `N / 2G` tokens.
    Zigzag,
    /// Device `i` owns tokens `i, i + G, i + 2G, ...`.
    Striped,
    /// Tokens are striped across devices inside each block of `block_len`.
    BlockStriped {
        block_len: usize,
    },
}

impl LayoutKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayoutKind::Contiguous => "contiguous",
            LayoutKind::Zigzag => "zigzag",
            LayoutKind::Striped => "striped",
            LayoutKind::BlockStriped { .. } => "block_striped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Shard {
    pub device: usize,
    pub token_ids: Vec<usize>,
}

impl Shard {
    /// 0-based global row indices of the shard's tokens.
    pub fn rows(&self) -> Vec<usize> {
        self.token_ids.iter().map(|t| t - 1).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShardLayout {
    pub kind: LayoutKind,
    pub devices: usize,
    pub seq_len: usize,
    pub shards: Vec<Shard>,
}

impl ShardLayout {
    pub fn new(kind: LayoutKind, seq_len: usize, devices: usize) -> Result<Self> {
        let shards = make_layout(kind, seq_len, devices)?;
        Ok(Self {
            kind,
            devices,
            seq_len,
            shards,
        })
    }

    pub fn shard_len(&self) -> usize {
        self.seq_len / self.devices
    }

    /// Shard for 0-based device index `i`.
    pub fn shard(&self, i: usize) -> &Shard {
        &self.shards[i]
    }
}

fn require_divides(what: &'static str, value: usize, divisor: usize) -> Result<()> {
    if divisor == 0 || value % divisor != 0 {
        return Err(Error::Divisibility {
            what,
            value,
            divisor,
        });
    }
    Ok(())
}

pub fn make_layout(kind: LayoutKind, n: usize, g: usize) -> Result<Vec<Shard>> {
    if g == 0 {
        return Err(invalid("devices", "need at least one device"));
    }
    if n == 0 {
        return Err(invalid("seq_len", "need at least one token"));
    }
    let owner: Box<dyn Fn(usize) -> usize> = match kind {
        LayoutKind::Contiguous => {
            require_divides("sequence length by device count", n, g)?;
            let per = n / g;
            Box::new(move |t| (t - 1) / per + 1)
        }
        LayoutKind::Zigzag => {
            require_divides("sequence length by twice the device count", n, 2 * g)?;
            let p = n / (2 * g);
            Box::new(move |t| {
                let chunk = (t - 1) / p;
                if chunk < g {
                    chunk + 1
                } else {
                    2 * g - chunk
                }
            })
        }
        LayoutKind::Striped => {
            require_divides("sequence length by device count", n, g)?;
            Box::new(move |t| (t - 1) % g + 1)
        }
        LayoutKind::BlockStriped { block_len } => {
            require_divides("block length by device count", block_len, g)?;
            require_divides("sequence length by block length", n, block_len)?;
            Box::new(move |t| ((t - 1) % block_len) % g + 1)
        }
    };
    let mut shards: Vec<Shard> = (1..=g)
        .map(|device| Shard {
            device,
            token_ids: Vec::with_capacity(n / g),
        })
        .collect();
    for t in 1..=n {
        shards[owner(t) - 1].token_ids.push(t);
    }
    Ok(shards)
}

/// Dense allow-grid for one (query shard, key shard) pair in local
/// coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
    count: usize,
}

impl LocalMask {
    fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        let mut count = 0;
        for a in 0..rows {
            for b in 0..cols {
                let ok = f(a, b);
                count += ok as usize;
                allowed.push(ok);
            }
        }
        Self {
            rows,
            cols,
            allowed,
            count,
        }
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.count);
        for a in 0..self.rows {
            for b in 0..self.cols {
                if self.allows(a, b) {
                    out.push((a, b));
                }
            }
        }
        out
    }
}

/// Local mask from global token ids, for any layout and mask.
pub fn local_mask_by_enumeration(
    layout: &ShardLayout,
    mask: &MaskSpec,
    i: usize,
    j: usize,
) -> LocalMask {
    let q_rows = layout.shards[i].rows();
    let k_rows = layout.shards[j].rows();
    LocalMask::from_fn(q_rows.len(), k_rows.len(), |a, b| {
        mask.allows(q_rows[a], k_rows[b])
    })
}

/// Local mask for query device `i` and key device `j` (0-based).
///
/// Zigzag and striped layouts under a causal mask use their closed-form case
/// rules; every other combination evaluates the mask on global token ids.
pub fn local_mask(layout: &ShardLayout, mask: &MaskSpec, i: usize, j: usize) -> LocalMask {
    let len = layout.shard_len();
    match (layout.kind, mask) {
        (LayoutKind::Zigzag, MaskSpec::Causal) => {
            let p = len / 2;
            if i == j {
                // Front and back chunks are both in ascending global order.
                LocalMask::from_fn(len, len, |a, b| b <= a)
            } else if i < j {
                // Only the back query chunk sees anything, and it sees all of j.
                LocalMask::from_fn(len, len, |a, _| a >= p)
            } else {
                // All queries see j's front chunk only.
                LocalMask::from_fn(len, len, |_, b| b < p)
            }
        }
        (LayoutKind::Striped, MaskSpec::Causal) => {
            if i >= j {
                LocalMask::from_fn(len, len, |a, b| b <= a)
            } else {
                // Drop the first local query and the last local key, then run
                // a causal block on what remains: query a-1 against key b.
                LocalMask::from_fn(len, len, |a, b| a >= 1 && b < len - 1 && b <= a - 1)
            }
        }
        _ => local_mask_by_enumeration(layout, mask, i, j),
    }
}

/// Unmasked (local query, local key) pairs, 0-based, for query device `i`
/// and key device `j` (both 0-based).
pub fn local_pair_set(
    layout: &ShardLayout,
    mask: &MaskSpec,
    i: usize,
    j: usize,
) -> Vec<(usize, usize)> {
    local_mask(layout, mask, i, j).pairs()
}

/// Key shard visited by device `i` at ring step `s` on a plain ring.
#[inline]
pub fn ring_source(i: usize, step: usize, g: usize) -> usize {
    (i + g - step % g) % g
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkloadReport {
    pub per_device_pairs: Vec<u64>,
    /// `per_step_pairs[device][step]`.
    pub per_step_pairs: Vec<Vec<u64>>,
}

impl WorkloadReport {
    pub fn total(&self) -> u64 {
        self.per_device_pairs.iter().sum()
    }

    pub fn device_spread(&self) -> u64 {
        spread(self.per_device_pairs.iter().copied())
    }

    /// Largest spread across devices at any single ring step.
    pub fn step_spread(&self) -> u64 {
        let steps = self.per_step_pairs.first().map_or(0, |r| r.len());
        (0..steps)
            .map(|s| spread(self.per_step_pairs.iter().map(|row| row[s])))
            .max()
            .unwrap_or(0)
    }
}

fn spread(xs: impl Iterator<Item = u64>) -> u64 {
    let (lo, hi) = xs.fold((u64::MAX, 0), |(lo, hi), x| (lo.min(x), hi.max(x)));
    hi.saturating_sub(lo)
}

pub fn balance_report(layout: &ShardLayout, mask: &MaskSpec) -> WorkloadReport {
    let g = layout.devices;
    let mut per_step = vec![vec![0u64; g]; g];
    for (i, row) in per_step.iter_mut().enumerate() {
        for (s, cell) in row.iter_mut().enumerate() {
            *cell = local_mask(layout, mask, i, ring_source(i, s, g)).count() as u64;
        }
    }
    WorkloadReport {
        per_device_pairs: per_step.iter().map(|r| r.iter().sum()).collect(),
        per_step_pairs: per_step,
    }
}

/// Block-granular causal sliding window: block `bq` sees block `bk` iff
/// `0 <= bq - bk < window / block_len`.
pub fn block_mask_from_window(n: usize, block_len: usize, window: usize) -> Result<MaskSpec> {
    require_divides("sequence length by block length", n, block_len)?;
    require_divides("window by block length", window, block_len)?;
    if window == 0 || window > n {
        return Err(invalid(
            "window",
            format!("must be in [1, {n}], got {window}"),
        ));
    }
    let side = n / block_len;
    let band = window / block_len;
    let mut m = Matrix::zeros(side, side);
    for bq in 0..side {
        for bk in 0..=bq {
            if bq - bk < band {
                m.set(bq, bk, 1.0);
            }
        }
    }
    Ok(MaskSpec::BlockSparse {
        block_mask: m,
        block_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ids(layout: &ShardLayout, i: usize) -> Vec<usize> {
        layout.shards[i].token_ids.clone()
    }

    #[test]
    fn zigzag_and_striped_examples() {
        let z = ShardLayout::new(LayoutKind::Zigzag, 8, 2).unwrap();
        assert_eq!(ids(&z, 0), vec![1, 2, 7, 8]);
        assert_eq!(ids(&z, 1), vec![3, 4, 5, 6]);
        let s = ShardLayout::new(LayoutKind::Striped, 8, 2).unwrap();
        assert_eq!(ids(&s, 0), vec![1, 3, 5, 7]);
        assert_eq!(ids(&s, 1), vec![2, 4, 6, 8]);
    }

    #[test]
    fn single_device_owns_everything() {
        for kind in [
            LayoutKind::Contiguous,
            LayoutKind::Zigzag,
            LayoutKind::Striped,
            LayoutKind::BlockStriped { block_len: 4 },
        ] {
            let l = ShardLayout::new(kind, 8, 1).unwrap();
            assert_eq!(ids(&l, 0), (1..=8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn divisibility_errors() {
        assert!(matches!(
            make_layout(LayoutKind::Zigzag, 12, 4),
            Err(Error::Divisibility { .. })
        ));
        assert!(make_layout(LayoutKind::Contiguous, 10, 4).is_err());
        assert!(make_layout(LayoutKind::BlockStriped { block_len: 6 }, 24, 4).is_err());
        assert!(make_layout(LayoutKind::BlockStriped { block_len: 8 }, 20, 4).is_err());
        assert!(make_layout(LayoutKind::Striped, 8, 0).is_err());
    }

    #[test]
    fn contiguous_causal_upper_blocks_are_empty() {
        let l = ShardLayout::new(LayoutKind::Contiguous, 8, 2).unwrap();
        assert!(local_pair_set(&l, &MaskSpec::Causal, 0, 1).is_empty());
    }

    #[test]
    fn striped_causal_shifted_diagonal() {
        let l = ShardLayout::new(LayoutKind::Striped, 8, 2).unwrap();
        let got: Vec<_> = local_pair_set(&l, &MaskSpec::Causal, 0, 1)
            .into_iter()
            .map(|(a, b)| (a + 1, b + 1))
            .collect();
        assert_eq!(got, vec![(2, 1), (3, 1), (3, 2), (4, 1), (4, 2), (4, 3)]);
    }

    #[test]
    fn zigzag_causal_later_device_sees_front_chunk() {
        let l = ShardLayout::new(LayoutKind::Zigzag, 8, 2).unwrap();
        let got = local_pair_set(&l, &MaskSpec::Causal, 1, 0);
        // Queries {3,4,5,6} against keys {1,2}.
        let want: Vec<_> = (0..4).flat_map(|a| (0..2).map(move |b| (a, b))).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn balance_examples() {
        let c = balance_report(
            &ShardLayout::new(LayoutKind::Contiguous, 8, 2).unwrap(),
            &MaskSpec::Causal,
        );
        assert_eq!(c.per_device_pairs, vec![10, 26]);
        let z = balance_report(
            &ShardLayout::new(LayoutKind::Zigzag, 8, 2).unwrap(),
            &MaskSpec::Causal,
        );
        assert_eq!(z.per_device_pairs, vec![18, 18]);
        let s = balance_report(
            &ShardLayout::new(LayoutKind::Striped, 8, 2).unwrap(),
            &MaskSpec::Causal,
        );
        assert_eq!(s.per_device_pairs, vec![16, 20]);
        assert_eq!(z.total(), 36);
    }

    #[test]
    fn window_block_masks() {
        let m = block_mask_from_window(16, 4, 16).unwrap();
        let MaskSpec::BlockSparse { block_mask, .. } = &m else {
            unreachable!()
        };
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(block_mask.get(a, b) == 1.0, b <= a);
            }
        }
        let m = block_mask_from_window(16, 4, 4).unwrap();
        let MaskSpec::BlockSparse { block_mask, .. } = &m else {
            unreachable!()
        };
        assert_eq!(block_mask, &Matrix::identity(4));
        let m = block_mask_from_window(16, 4, 8).unwrap();
        let MaskSpec::BlockSparse { block_mask, .. } = &m else {
            unreachable!()
        };
        for a in 0..4usize {
            for b in 0..4usize {
                let want = b <= a && a - b < 2;
                assert_eq!(block_mask.get(a, b) == 1.0, want, "({a},{b})");
            }
        }
        assert!(block_mask_from_window(16, 4, 6).is_err());
        assert!(block_mask_from_window(18, 4, 8).is_err());
    }

    fn layout_strategy() -> impl Strategy<Value = (LayoutKind, usize, usize)> {
        (0usize..4, 1usize..5, 1usize..4).prop_map(|(k, g, m)| {
            let g = g.min(4);
            match k {
                0 => (LayoutKind::Contiguous, g * m * 2, g),
                1 => (LayoutKind::Zigzag, 2 * g * m, g),
                2 => (LayoutKind::Striped, g * m * 3, g),
                _ => (LayoutKind::BlockStriped { block_len: 2 * g }, 2 * g * m, g),
            }
        })
    }

    fn mask_strategy(n: usize) -> impl Strategy<Value = MaskSpec> {
        prop_oneof![
            Just(MaskSpec::Full),
            Just(MaskSpec::Causal),
            (1..=n).prop_map(|w| MaskSpec::SlidingWindow { window: w }),
        ]
    }

    proptest! {
        #[test]
        fn layouts_partition_tokens((kind, n, g) in layout_strategy()) {
            let l = ShardLayout::new(kind, n, g).unwrap();
            let mut seen = Vec::new();
            for s in &l.shards {
                prop_assert!(s.token_ids.windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(s.token_ids.len(), n / g);
                seen.extend_from_slice(&s.token_ids);
            }
            seen.sort_unstable();
            prop_assert_eq!(seen, (1..=n).collect::<Vec<_>>());
        }

        #[test]
        fn pair_sets_cover_global_pairs_exactly(
            ((kind, n, g), mask) in layout_strategy()
                .prop_flat_map(|t| (Just(t), mask_strategy(t.1)))
        ) {
            let l = ShardLayout::new(kind, n, g).unwrap();
            let mut got = BTreeSet::new();
            for i in 0..g {
                for j in 0..g {
                    let qr = l.shards[i].rows();
                    let kr = l.shards[j].rows();
                    for (a, b) in local_pair_set(&l, &mask, i, j) {
                        prop_assert!(got.insert((qr[a], kr[b])));
                    }
                    // Closed-form rules agree with global evaluation.
                    prop_assert_eq!(local_mask(&l, &mask, i, j), local_mask_by_enumeration(&l, &mask, i, j));
                }
            }
            let want: BTreeSet<_> = (0..n)
                .flat_map(|q| (0..n).map(move |k| (q, k)))
                .filter(|&(q, k)| mask.allows(q, k))
                .collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn zigzag_causal_is_balanced(g in 1usize..6, m in 1usize..4) {
            let n = 2 * g * m;
            let r = balance_report(&ShardLayout::new(LayoutKind::Zigzag, n, g).unwrap(), &MaskSpec::Causal);
            prop_assert_eq!(r.device_spread(), 0);
            prop_assert!(r.step_spread() <= (n / (2 * g)) as u64);
        }

        #[test]
        fn striped_causal_is_nearly_balanced(g in 1usize..6, m in 1usize..5) {
            let n = g * m;
            let p = (n / g) as u64;
            let r = balance_report(&ShardLayout::new(LayoutKind::Striped, n, g).unwrap(), &MaskSpec::Causal);
            prop_assert!(r.step_spread() <= p);
            prop_assert!(r.device_spread() <= (g as u64 - 1) * p);
        }

        #[test]
        fn block_striped_block_sparse_is_balanced(g in 1usize..5, mult in 1usize..3, blocks in 1usize..5, band in 1usize..5) {
            let block_len = g * mult;
            let n = block_len * blocks;
            let band = band.min(blocks);
            let mask = block_mask_from_window(n, block_len, band * block_len).unwrap();
            let l = ShardLayout::new(LayoutKind::BlockStriped { block_len }, n, g).unwrap();
            let r = balance_report(&l, &mask);
            prop_assert_eq!(r.device_spread(), 0);
            prop_assert_eq!(r.total(), mask.pair_count(n));
        }
    }
}
