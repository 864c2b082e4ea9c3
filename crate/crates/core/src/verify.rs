//! Seeded property suite. Every check is deterministic for a given seed and
//! the report holds no timings, so two runs print byte-identical text.

use std::fmt::Write as _;

use serde::Serialize;

use crate::attention::{run_with_schedule, DistributedAttention, Execution};
use crate::checkpoint::{
    causal_half_split_fraction, execute_toy, plan, CheckpointPolicy, DEFAULT_SPLIT,
};
use crate::error::Result;
use crate::fabric::{
    account_attention_comm, analytic_comm_time, analytic_comm_time_from_steps, build_double_ring,
    serial_time, simulate_ring, EventKind, OverlapKind, OverlapSchedule, Pass, RingPlan, Strategy,
    Topology,
};
use crate::lmhead::{fused_lmhead_loss, FusionConfig};
use crate::numerics::{lse_merge, seeded_random_matrix, Matrix, Vector};
use crate::oracle::{
    attention_backward, attention_forward, attention_scalar_loss_dd, finite_diff_check,
    finite_diff_check_dd, naive_lmhead_loss, MaskSpec,
};
use crate::partition::{
    balance_report, local_mask, local_mask_by_enumeration, LayoutKind, ShardLayout,
};

pub const FORWARD_TOL: f64 = 1e-10;
pub const BURST_VS_RING_TOL: f64 = 1e-10;
pub const GRAD_VS_ORACLE_TOL: f64 = 1e-9;
pub const FD_REL_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;
pub const SIM_REL_TOL: f64 = 1e-9;
pub const SCHEDULE_TOL: f64 = 1e-12;
pub const LMHEAD_TOL: f64 = 1e-10;
pub const CHECKPOINT_TOL: f64 = 1e-10;

pub const GRID_SEQ: [usize; 4] = [8, 16, 32, 64];
pub const GRID_DIM: [usize; 3] = [4, 8, 16];
pub const GRID_DEVICES: [usize; 4] = [1, 2, 4, 8];
pub const GRID_LAYOUTS: [LayoutKind; 3] = [
    LayoutKind::Contiguous,
    LayoutKind::Zigzag,
    LayoutKind::Striped,
];

/// The four mask families used on the test grid for sequence length `n`.
pub fn grid_masks(n: usize, seed: u64) -> Vec<MaskSpec> {
    vec![
        MaskSpec::Full,
        MaskSpec::Causal,
        MaskSpec::SlidingWindow { window: n / 4 + 1 },
        MaskSpec::seeded_block_sparse(n, (n / 8).max(1), seed).expect("n divisible by n/8"),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub seq_len: usize,
    pub dim: usize,
    pub devices: usize,
    pub layout: ShardLayout,
    pub mask: MaskSpec,
}

/// Valid `(N, d, G, layout, mask)` combinations; a layout whose divisibility
/// rule fails for `(N, G)` is left out.
pub fn grid(seed: u64) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for n in GRID_SEQ {
        for d in GRID_DIM {
            for g in GRID_DEVICES {
                for kind in GRID_LAYOUTS {
                    let Ok(layout) = ShardLayout::new(kind, n, g) else {
                        continue;
                    };
                    for mask in grid_masks(n, seed ^ n as u64) {
                        out.push(GridPoint {
                            seq_len: n,
                            dim: d,
                            devices: g,
                            layout: layout.clone(),
                            mask,
                        });
                    }
                }
            }
        }
    }
    out
}

/// `(Q, K, V, dO)` for a grid point.
pub fn grid_inputs(n: usize, d: usize, seed: u64) -> (Matrix, Matrix, Matrix, Matrix) {
    let base = seed
        .wrapping_mul(1_000_003)
        .wrapping_add((n * 131 + d) as u64 * 4);
    (
        seeded_random_matrix(n, d, base),
        seeded_random_matrix(n, d, base + 1),
        seeded_random_matrix(n, d, base + 2),
        seeded_random_matrix(n, d, base + 3),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("seed {}\n", self.seed);
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{} {} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            );
        }
        let _ = writeln!(
            s,
            "{} checks, {} failed",
            self.checks.len(),
            self.failures()
        );
        s
    }
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

pub fn run_suite(seed: u64) -> VerifyReport {
    let mut checks = vec![
        check("lse_merge_algebra", || lse_merge_algebra(seed)),
        check("partition_coverage", partition_coverage),
        check("double_ring_coverage", double_ring_coverage),
    ];
    checks.extend(attention_grid(seed));
    checks.push(check("finite_differences", || finite_differences(seed)));
    checks.push(check("comm_time_model", comm_time_model));
    checks.push(check("overlap_schedules", || overlap_schedules(seed)));
    checks.push(check("workload_balance", workload_balance));
    checks.push(check("lmhead_fusion", || lmhead_fusion(seed)));
    checks.push(check("checkpointing", || checkpointing(seed)));
    checks.push(check("thread_determinism", || thread_determinism(seed)));
    VerifyReport { seed, checks }
}

fn lse_merge_algebra(seed: u64) -> Result<(bool, String)> {
    let mut worst_assoc = 0.0f64;
    let mut worst_comm = 0.0f64;
    for t in 0..20 {
        let m = seeded_random_matrix(3, 16, seed.wrapping_add(t)).scaled(30.0);
        let [a, b, c] = [0, 1, 2].map(|r| Vector::new(m.row(r).to_vec()));
        let left = lse_merge(&lse_merge(&a, &b)?, &c)?;
        let right = lse_merge(&a, &lse_merge(&b, &c)?)?;
        worst_assoc = worst_assoc.max(left.max_abs_diff(&right)?);
        worst_comm = worst_comm.max(lse_merge(&a, &b)?.max_abs_diff(&lse_merge(&b, &a)?)?);
    }
    Ok((
        worst_assoc < 1e-10 && worst_comm < 1e-10,
        format!("assoc={worst_assoc:.3e} comm={worst_comm:.3e}"),
    ))
}

fn partition_coverage() -> Result<(bool, String)> {
    let mut layouts = 0;
    let mut ok = true;
    for n in GRID_SEQ {
        for g in GRID_DEVICES {
            for kind in GRID_LAYOUTS
                .into_iter()
                .chain([LayoutKind::BlockStriped { block_len: n / 2 }])
            {
                let Ok(layout) = ShardLayout::new(kind, n, g) else {
                    continue;
                };
                layouts += 1;
                let mut seen = vec![0u32; n];
                for s in &layout.shards {
                    for r in s.rows() {
                        seen[r] += 1;
                    }
                }
                ok &= seen.iter().all(|&c| c == 1);
                if matches!(kind, LayoutKind::Zigzag | LayoutKind::Striped) {
                    for i in 0..g {
                        for j in 0..g {
                            ok &= local_mask(&layout, &MaskSpec::Causal, i, j)
                                == local_mask_by_enumeration(&layout, &MaskSpec::Causal, i, j);
                        }
                    }
                }
            }
        }
    }
    Ok((ok, format!("layouts={layouts}")))
}

fn double_ring_coverage() -> Result<(bool, String)> {
    let mut ok = true;
    let mut shapes = 0;
    for nodes in 1..=4 {
        for gpus in 1..=4 {
            let t = Topology::new(nodes, gpus, 1.0, 1.0, 1.0, 1.0)?;
            ok &= RingPlan::double_ring(&t).check_coverage().is_ok();
            let r = build_double_ring(&t);
            ok &= r.sub_rings.len() == nodes && r.global_order.len() == nodes * gpus;
            shapes += 1;
        }
    }
    Ok((ok, format!("shapes={shapes}")))
}

/// Forward, backward and communication checks over the whole grid.
fn attention_grid(seed: u64) -> Vec<CheckResult> {
    let mut fwd_err = 0.0f64;
    let mut cross_err = 0.0f64;
    let mut oracle_err = 0.0f64;
    let mut comm_ok = true;
    let mut points = 0;
    let mut failure: Option<String> = None;
    for p in grid(seed) {
        let (q, k, v, d_o) = grid_inputs(p.seq_len, p.dim, seed);
        let mut run = || -> Result<()> {
            let want = attention_forward(&q, &k, &v, &p.mask)?;
            let want_g = attention_backward(&q, &k, &v, &want.o, &want.lse, &d_o, &p.mask)?;
            let mut e = DistributedAttention::new(
                &q,
                &k,
                &v,
                p.layout.clone(),
                &p.mask,
                RingPlan::flat(p.devices),
            )?;
            let f_log = e.forward(Execution::Barrier)?;
            let got = e.gather_forward();
            fwd_err = fwd_err
                .max(got.o.max_abs_diff(&want.o)?)
                .max(got.lse.max_abs_diff(&want.lse)?);
            let r_log = e.ring_backward(&d_o, Execution::Barrier)?;
            let ring = e.gather_grads();
            let b_log = e.burst_backward(&d_o, Execution::Barrier)?;
            let burst = e.gather_grads();
            cross_err = cross_err.max(ring.max_abs_diff(&burst)?);
            oracle_err = oracle_err
                .max(ring.max_abs_diff(&want_g)?)
                .max(burst.max_abs_diff(&want_g)?);
            let (n, d, g) = (p.seq_len, p.dim, p.devices);
            let expect = |pass| {
                if g == 1 {
                    Ok(0)
                } else {
                    account_attention_comm(pass, n, d, g)
                }
            };
            for (log, pass) in [
                (f_log, Pass::Forward),
                (r_log, Pass::RingBackward),
                (b_log, Pass::BurstBackward),
            ] {
                let want = expect(pass)?;
                comm_ok &= log.is_conserved() && (0..g).all(|i| log.sent_by(i) == want);
            }
            Ok(())
        };
        if let Err(e) = run() {
            failure.get_or_insert(format!(
                "error at N={} d={} G={}: {e}",
                p.seq_len, p.dim, p.devices
            ));
        }
        points += 1;
    }
    let ratio = Pass::BurstBackward.step_payload(128, 128) as f64
        / Pass::RingBackward.step_payload(128, 128) as f64;
    let suffix = failure.map(|f| format!(" {f}")).unwrap_or_default();
    let ok = suffix.is_empty();
    vec![
        CheckResult {
            name: "forward_oracle".into(),
            passed: ok && fwd_err <= FORWARD_TOL,
            detail: format!("points={points} max_err={fwd_err:.3e}{suffix}"),
        },
        CheckResult {
            name: "backward_equivalence".into(),
            passed: ok && cross_err <= BURST_VS_RING_TOL && oracle_err <= GRAD_VS_ORACLE_TOL,
            detail: format!("burst_vs_ring={cross_err:.3e} vs_oracle={oracle_err:.3e}{suffix}"),
        },
        CheckResult {
            name: "comm_accounting".into(),
            passed: ok && comm_ok && (ratio - 386.0 / 512.0).abs() < 1e-15,
            detail: format!("exact={comm_ok} d128_ratio={ratio:.6}{suffix}"),
        },
    ]
}

fn finite_differences(seed: u64) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in [8, 16] {
        for d in [4, 8] {
            for mask in grid_masks(n, seed ^ n as u64) {
                let (q, k, v, d_o) = grid_inputs(n, d, seed);
                let f = attention_forward(&q, &k, &v, &mask)?;
                let g = attention_backward(&q, &k, &v, &f.o, &f.lse, &d_o, &mask)?;
                worst = worst.max(finite_diff_check_dd(
                    |x| attention_scalar_loss_dd(x, &k, &v, &d_o, &mask),
                    &q,
                    &g.dq,
                    FD_STEP,
                )?);
                worst = worst.max(finite_diff_check_dd(
                    |x| attention_scalar_loss_dd(&q, x, &v, &d_o, &mask),
                    &k,
                    &g.dk,
                    FD_STEP,
                )?);
                worst = worst.max(finite_diff_check_dd(
                    |x| attention_scalar_loss_dd(&q, &k, x, &d_o, &mask),
                    &v,
                    &g.dv,
                    FD_STEP,
                )?);
                cases += 1;
            }
        }
    }
    Ok((
        worst <= FD_REL_TOL,
        format!("cases={cases} max_rel={worst:.3e}"),
    ))
}

fn comm_time_model() -> Result<(bool, String)> {
    let t = |s| analytic_comm_time_from_steps(s, 8.0, 2.0, 3.0, 5.0);
    let table = [
        t(Strategy::Ring),
        t(Strategy::DoubleRing),
        t(Strategy::Burst),
    ];
    let mut ok = table == [240.0, 128.0, 90.0];
    let mut worst_sim = 0.0f64;
    for (nodes, gpus) in [(1, 1), (1, 4), (2, 2), (2, 4), (4, 2), (3, 3)] {
        let topo = Topology::new(nodes, gpus, 2e-6, 9e-6, 1e10, 2e9)?;
        for c in [0.0, 1e-6, 5e-5] {
            let (_, tl) =
                simulate_ring(4096, &topo, &mut OverlapSchedule::new(OverlapKind::None), c)?;
            let want = serial_time(&topo, 4096.0, c);
            worst_sim = worst_sim.max((tl.makespan - want).abs() / want);
            ok &= tl.check_causality().is_ok();
        }
    }
    let mut ordered = 0;
    for i in 0..100usize {
        let nodes = 1 + i % 4;
        let gpus = 1 + (i / 4) % 5;
        let bw_inter = 1e9 * (1 + i % 7) as f64;
        let bw_intra = bw_inter * (1.0 + (i / 7 % 5) as f64);
        let topo = Topology::new(
            nodes,
            gpus,
            1e-6 * (1 + i % 3) as f64,
            1e-6 * (1 + i % 5) as f64,
            bw_intra,
            bw_inter,
        )?;
        let p = 1024.0 * (1 + i % 9) as f64;
        let [r, dr, b] = [Strategy::Ring, Strategy::DoubleRing, Strategy::Burst]
            .map(|s| analytic_comm_time(s, &topo, p));
        if b <= dr && dr <= r {
            ordered += 1;
        }
    }
    ok &= worst_sim <= SIM_REL_TOL && ordered == 100;
    Ok((
        ok,
        format!(
            "table={}/{}/{} none_vs_serial={worst_sim:.3e} ordered={ordered}/100",
            table[0], table[1], table[2]
        ),
    ))
}

fn overlap_schedules(seed: u64) -> Result<(bool, String)> {
    let mut ok = true;
    let mut worst = 0.0f64;
    for (nodes, gpus) in [(1, 4), (2, 2), (2, 4), (4, 2)] {
        let topo = Topology::new(nodes, gpus, 1e-6, 6e-6, 1e10, 1e9)?;
        // Timeline shape.
        let (_, tl) = simulate_ring(
            512,
            &topo,
            &mut OverlapSchedule::new(OverlapKind::Gradient),
            2e-6,
        )?;
        ok &= tl.check_causality().is_ok();
        for e in tl.of_kind(EventKind::SendIntra) {
            let first = tl
                .of_kind(EventKind::Compute)
                .filter(|c| c.device == e.device)
                .map(|c| c.end)
                .fold(f64::INFINITY, f64::min);
            ok &= e.start >= first;
        }
        for e in tl.of_kind(EventKind::SendInter) {
            let node = topo.node_of(e.device);
            let intra_done = tl
                .of_kind(EventKind::Recv)
                .filter(|r| r.round == e.round && topo.node_of(r.device) == node)
                .filter(|r| {
                    tl.events[r.matches.expect("recv has a send")].kind == EventKind::SendIntra
                })
                .map(|r| r.end)
                .fold(0.0, f64::max);
            ok &= e.start >= intra_done;
        }
        // Numerical neutrality.
        let g = topo.devices();
        let n = 4 * g;
        let (q, k, v, d_o) = grid_inputs(n, 4, seed);
        let layout = ShardLayout::new(LayoutKind::Zigzag, n, g)?;
        let mask = MaskSpec::Causal;
        let mut barrier = DistributedAttention::new(
            &q,
            &k,
            &v,
            layout.clone(),
            &mask,
            RingPlan::double_ring(&topo),
        )?;
        barrier.forward(Execution::Barrier)?;
        let want_f = barrier.gather_forward();
        barrier.ring_backward(&d_o, Execution::Barrier)?;
        let want_ring = barrier.gather_grads();
        barrier.burst_backward(&d_o, Execution::Barrier)?;
        let want_burst = barrier.gather_grads();
        for kind in [
            OverlapKind::None,
            OverlapKind::Activation,
            OverlapKind::Gradient,
        ] {
            let run = |pass| {
                run_with_schedule(
                    pass,
                    &q,
                    &k,
                    &v,
                    Some(&d_o),
                    &layout,
                    &mask,
                    &topo,
                    kind,
                    1e-6,
                )
            };
            let f = run(Pass::Forward)?;
            worst = worst.max(f.forward.o.max_abs_diff(&want_f.o)?);
            ok &= f.forward == want_f;
            let r = run(Pass::RingBackward)?;
            worst = worst.max(r.grads.as_ref().expect("grads").max_abs_diff(&want_ring)?);
            let b = run(Pass::BurstBackward)?;
            worst = worst.max(b.grads.as_ref().expect("grads").max_abs_diff(&want_burst)?);
        }
    }
    Ok((ok && worst <= SCHEDULE_TOL, format!("max_diff={worst:.3e}")))
}

fn workload_balance() -> Result<(bool, String)> {
    let mut ok = true;
    let mut worst_zig_step = 0.0f64;
    let mut worst_striped = 0.0f64;
    for n in GRID_SEQ {
        for g in GRID_DEVICES {
            if let Ok(l) = ShardLayout::new(LayoutKind::Zigzag, n, g) {
                let r = balance_report(&l, &MaskSpec::Causal);
                ok &= r.device_spread() == 0;
                let bound = (n / (2 * g)) as f64;
                ok &= r.step_spread() as f64 <= bound;
                worst_zig_step = worst_zig_step.max(r.step_spread() as f64 / bound);
            }
            if let Ok(l) = ShardLayout::new(LayoutKind::Striped, n, g) {
                let r = balance_report(&l, &MaskSpec::Causal);
                let bound = ((g - 1) * n / g) as f64;
                ok &= r.device_spread() as f64 <= bound;
                if bound > 0.0 {
                    worst_striped = worst_striped.max(r.device_spread() as f64 / bound);
                }
            }
            let bl = g * 2;
            if let Ok(l) = ShardLayout::new(LayoutKind::BlockStriped { block_len: bl }, n, g) {
                for s in 0..4 {
                    let mask = MaskSpec::seeded_block_sparse(n, bl, s)?;
                    ok &= balance_report(&l, &mask).device_spread() == 0;
                }
            }
            if g >= 2 {
                let l = ShardLayout::new(LayoutKind::Contiguous, n, g)?;
                let r = balance_report(&l, &MaskSpec::Causal);
                ok &= r.per_device_pairs[g - 1] >= 2 * r.per_device_pairs[0];
            }
        }
    }
    let zig = balance_report(
        &ShardLayout::new(LayoutKind::Zigzag, 8, 2)?,
        &MaskSpec::Causal,
    );
    ok &= zig.per_device_pairs == [18, 18];
    Ok((
        ok,
        format!(
            "zigzag_8x2={:?} zigzag_step_ratio={worst_zig_step:.3} striped_ratio={worst_striped:.3}",
            zig.per_device_pairs
        ),
    ))
}

fn lmhead_fusion(seed: u64) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut ok = true;
    for (i, (n, v, d, bs, bv)) in [
        (6, 11, 4, 2, 3),
        (16, 33, 8, 5, 7),
        (64, 257, 16, 64, 257),
        (64, 257, 16, 13, 31),
        (9, 10, 3, 100, 1),
    ]
    .into_iter()
    .enumerate()
    {
        let h = seeded_random_matrix(n, d, seed.wrapping_add(10 * i as u64));
        let w = seeded_random_matrix(v, d, seed.wrapping_add(10 * i as u64 + 1));
        let y: Vec<usize> = (0..n).map(|r| (r * 7 + i) % v).collect();
        let naive = naive_lmhead_loss(&h, &w, &y)?;
        let cfg = FusionConfig::new(bs, bv)?;
        let fused = fused_lmhead_loss(&h, &w, &y, cfg)?;
        worst = worst
            .max(fused.loss.max_abs_diff(&naive.loss)?)
            .max(fused.dh.max_abs_diff(&naive.dh)?)
            .max(fused.dw.max_abs_diff(&naive.dw)?);
        ok &= fused.peak_aux_elements <= (bs * v + bs * d + bv * d + bs) as u64;
        if bs < n {
            ok &= fused.peak_aux_elements < (n * v) as u64;
        }
    }
    let h = seeded_random_matrix(6, 4, seed);
    let w = seeded_random_matrix(11, 4, seed + 1);
    let y = [0, 3, 10, 5, 5, 7];
    let cfg = FusionConfig::new(2, 3)?;
    let fused = fused_lmhead_loss(&h, &w, &y, cfg)?;
    let total = |h: &Matrix, w: &Matrix| {
        fused_lmhead_loss(h, w, &y, cfg).map_or(f64::NAN, |r| r.loss.as_slice().iter().sum())
    };
    let fd = finite_diff_check(|x| total(x, &w), &h, &fused.dh, FD_STEP)?.max(finite_diff_check(
        |x| total(&h, x),
        &w,
        &fused.dw,
        FD_STEP,
    )?);
    Ok((
        ok && worst <= LMHEAD_TOL && fd <= FD_REL_TOL,
        format!("max_err={worst:.3e} fd_rel={fd:.3e}"),
    ))
}

fn checkpointing(seed: u64) -> Result<(bool, String)> {
    let half = CheckpointPolicy::SequenceSelective {
        split: DEFAULT_SPLIT,
    };
    let mut ok = true;
    let mut worst = 0.0f64;
    for n in [16, 32, 64] {
        for policy in [
            CheckpointPolicy::FullRecompute,
            CheckpointPolicy::SelectivePp,
            half,
        ] {
            let r = execute_toy(policy, n, 8, &MaskSpec::Causal, seed)?;
            worst = worst.max(r.max_grad_diff);
            if policy == half {
                ok &= r.recompute_fraction == causal_half_split_fraction(n);
            }
            if policy == CheckpointPolicy::SelectivePp {
                ok &= r.recompute_events == 0;
            }
        }
        let pp = plan(CheckpointPolicy::SelectivePp, n, 8, &MaskSpec::Causal)?;
        let seq = plan(half, n, 8, &MaskSpec::Causal)?;
        ok &= 2 * seq.attention_extra_elements == pp.attention_extra_elements;
    }
    Ok((
        ok && worst <= CHECKPOINT_TOL,
        format!(
            "max_grad_diff={worst:.3e} causal_half_fraction_64={:.6}",
            causal_half_split_fraction(64)
        ),
    ))
}

fn thread_determinism(seed: u64) -> Result<(bool, String)> {
    let (q, k, v, d_o) = grid_inputs(64, 8, seed);
    let layout = ShardLayout::new(LayoutKind::Zigzag, 64, 8)?;
    let run = |threads: usize| -> Result<(Matrix, Matrix, Matrix)> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| crate::error::invalid("threads", e.to_string()))?;
        pool.install(|| {
            let mut e = DistributedAttention::new(
                &q,
                &k,
                &v,
                layout.clone(),
                &MaskSpec::Causal,
                RingPlan::flat(8),
            )?;
            e.forward(Execution::Barrier)?;
            e.burst_backward(&d_o, Execution::Barrier)?;
            let g = e.gather_grads();
            Ok((e.gather_forward().o, g.dq, g.dk))
        })
    };
    let one = run(1)?;
    let four = run(4)?;
    Ok((one == four, "threads=1,4".into()))
}
