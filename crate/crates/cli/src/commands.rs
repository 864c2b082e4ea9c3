use burst_core::checkpoint::{execute_toy, plan};
use burst_core::cost::{compare, Scenario};
use burst_core::fabric::{
    account_attention_comm, analytic_comm_time, channel_lower_bound, serial_time, simulate_ring,
    OverlapSchedule, Pass, Strategy,
};
use burst_core::lmhead::{fused_lmhead_loss, memory_footprint};
use burst_core::numerics::seeded_random_matrix;
use burst_core::oracle::naive_lmhead_loss;
use burst_core::partition::{balance_report, ShardLayout};
use burst_core::verify::{run_suite, CHECKPOINT_TOL, LMHEAD_TOL};
use serde_json::json;

use crate::config::RunConfig;
use crate::report::Report;

/// Largest sequence the toy checkpoint run accepts.
const TOY_MAX_SEQ: usize = 64;

pub fn verify(cfg: &RunConfig) -> anyhow::Result<Report> {
    let suite = run_suite(cfg.seed);
    let mut r = Report::new("verify", cfg.seed, vec!["check", "passed", "detail"]);
    for c in &suite.checks {
        r.row(vec![json!(c.name), json!(c.passed), json!(c.detail)]);
    }
    r.summary.push(format!(
        "{} checks, {} failed",
        suite.checks.len(),
        suite.failures()
    ));
    r.failed = !suite.all_passed();
    Ok(r)
}

pub fn comm(cfg: &RunConfig) -> anyhow::Result<Report> {
    let (n, d, g) = (cfg.seq_len, cfg.dim, cfg.devices());
    let unit = (n / g * d) as f64;
    let fwd = account_attention_comm(Pass::Forward, n, d, g)?;
    let mut r = Report::new(
        "comm",
        cfg.seed,
        vec![
            "strategy",
            "forward_elements",
            "backward_elements",
            "total_elements",
            "analytic_seconds",
        ],
    );
    for s in Strategy::ALL {
        let pass = if s == Strategy::Burst {
            Pass::BurstBackward
        } else {
            Pass::RingBackward
        };
        let bwd = account_attention_comm(pass, n, d, g)?;
        r.row(vec![
            json!(s.name()),
            json!(fwd),
            json!(bwd),
            json!(fwd + bwd),
            json!(analytic_comm_time(s, &cfg.topology, unit)),
        ]);
    }
    r.summary.push(format!(
        "seq_len_tokens {n}, dim {d}, devices {g}, nodes {}, per-step unit {} elements",
        cfg.topology.num_nodes, unit
    ));
    let ratio = account_attention_comm(Pass::BurstBackward, n, d, g)? as f64
        / account_attention_comm(Pass::RingBackward, n, d, g)? as f64;
    r.summary
        .push(format!("burst/ring backward elements {ratio:.6}"));
    r.extra.insert("backward_ratio".into(), json!(ratio));
    r.extra
        .insert("unit_elements".into(), json!((n / g * d) as u64));
    Ok(r)
}

pub fn balance(cfg: &RunConfig) -> anyhow::Result<Report> {
    let layout = ShardLayout::new(cfg.layout, cfg.seq_len, cfg.devices())?;
    let w = balance_report(&layout, &cfg.mask);
    let g = cfg.devices();
    let mut columns = vec!["device".to_string(), "total_pairs".to_string()];
    columns.extend((0..g).map(|s| format!("step_{s}")));
    let mut r = Report::new("balance", cfg.seed, columns);
    for (i, steps) in w.per_step_pairs.iter().enumerate() {
        let mut row = vec![json!(i), json!(w.per_device_pairs[i])];
        row.extend(steps.iter().map(|&p| json!(p)));
        r.row(row);
    }
    r.summary.push(format!(
        "layout {}, mask {}, seq_len_tokens {}, devices {g}",
        cfg.layout.name(),
        cfg.mask.name(),
        cfg.seq_len
    ));
    r.summary.push(format!(
        "device spread {} pairs, worst per-step spread {} pairs, total {} pairs",
        w.device_spread(),
        w.step_spread(),
        w.total()
    ));
    r.extra.insert("layout".into(), json!(cfg.layout));
    r.extra.insert("mask".into(), json!(cfg.mask.name()));
    r.extra
        .insert("device_spread_pairs".into(), json!(w.device_spread()));
    r.extra
        .insert("step_spread_pairs".into(), json!(w.step_spread()));
    Ok(r)
}

pub fn timeline(cfg: &RunConfig) -> anyhow::Result<Report> {
    let g = cfg.devices();
    let payload = cfg
        .pass
        .step_payload((cfg.seq_len / g) as u64, cfg.dim as u64);
    let mut schedule = OverlapSchedule::new(cfg.overlap);
    let (log, tl) = simulate_ring(
        payload,
        &cfg.topology,
        &mut schedule,
        cfg.compute_seconds_per_step,
    )?;
    tl.check_causality()?;
    let mut r = Report::new(
        "timeline",
        cfg.seed,
        vec![
            "event",
            "device",
            "kind",
            "start_seconds",
            "end_seconds",
            "round",
            "step",
            "peer",
            "elements",
        ],
    );
    for (i, e) in tl.events.iter().enumerate() {
        r.row(vec![
            json!(i),
            json!(e.device),
            json!(e.kind),
            json!(e.start),
            json!(e.end),
            json!(e.round),
            json!(e.step),
            json!(e.peer),
            json!(e.elements),
        ]);
    }
    let serial = serial_time(&cfg.topology, payload as f64, cfg.compute_seconds_per_step);
    let lower = channel_lower_bound(&cfg.topology, payload as f64, cfg.compute_seconds_per_step);
    r.summary.push(format!(
        "pass {}, overlap {}, {} nodes x {} devices, {payload} elements per step",
        cfg.pass.name(),
        cfg.overlap.name(),
        cfg.topology.num_nodes,
        cfg.topology.gpus_per_node
    ));
    r.summary.push(format!(
        "makespan {:e} s, serial {serial:e} s, lower bound {lower:e} s",
        tl.makespan
    ));
    r.extra
        .insert("makespan_seconds".into(), json!(tl.makespan));
    r.extra.insert("serial_seconds".into(), json!(serial));
    r.extra.insert("lower_bound_seconds".into(), json!(lower));
    r.extra.insert("edges".into(), json!(tl.edges));
    r.extra.insert("traffic".into(), json!(log.devices));
    Ok(r)
}

pub fn lmhead(cfg: &RunConfig) -> anyhow::Result<Report> {
    let (n, d, v) = (cfg.seq_len, cfg.dim, cfg.vocab);
    let h = seeded_random_matrix(n, d, cfg.seed);
    let w = seeded_random_matrix(v, d, cfg.seed.wrapping_add(1));
    let targets: Vec<usize> = (0..n).map(|i| (i * 7919 + cfg.seed as usize) % v).collect();
    let naive = naive_lmhead_loss(&h, &w, &targets)?;
    let fused = fused_lmhead_loss(&h, &w, &targets, cfg.fusion)?;
    let loss_diff = fused.loss.max_abs_diff(&naive.loss)?;
    let dh_diff = fused.dh.max_abs_diff(&naive.dh)?;
    let dw_diff = fused.dw.max_abs_diff(&naive.dw)?;
    let fp = memory_footprint(n as u64, v as u64, d as u64, cfg.fusion);
    let mean_loss = fused.loss.as_slice().iter().sum::<f64>() / n as f64;
    let mut r = Report::new(
        "lmhead",
        cfg.seed,
        vec![
            "seq_len_tokens",
            "vocab_tokens",
            "dim",
            "block_rows_tokens",
            "block_vocab_tokens",
            "mean_loss",
            "max_loss_diff",
            "max_dh_diff",
            "max_dw_diff",
            "naive_logits_elements",
            "fused_logits_elements",
            "measured_peak_aux_elements",
        ],
    );
    r.row(vec![
        json!(n),
        json!(v),
        json!(d),
        json!(cfg.fusion.block_rows),
        json!(cfg.fusion.block_vocab),
        json!(mean_loss),
        json!(loss_diff),
        json!(dh_diff),
        json!(dw_diff),
        json!(fp.naive_elements),
        json!(fp.fused_peak_elements),
        json!(fused.peak_aux_elements),
    ]);
    let worst = loss_diff.max(dh_diff).max(dw_diff);
    r.failed = worst > LMHEAD_TOL;
    r.summary.push(format!(
        "fused vs naive max diff {worst:.3e} (tolerance {LMHEAD_TOL:e}): {}",
        if r.failed { "FAIL" } else { "ok" }
    ));
    Ok(r)
}

pub fn checkpoint(cfg: &RunConfig) -> anyhow::Result<Report> {
    let (n, d) = (cfg.seq_len, cfg.dim);
    let mut r = Report::new(
        "checkpoint",
        cfg.seed,
        vec![
            "policy",
            "stored_elements_per_layer",
            "attention_extra_elements",
            "recompute_pairs",
            "total_pairs",
            "recompute_fraction",
            "toy_recomputed_pairs",
            "toy_max_grad_diff",
        ],
    );
    let run_toy = n <= TOY_MAX_SEQ;
    for &policy in &cfg.policies {
        let p = plan(policy, n, d, &cfg.mask)?;
        let toy = if run_toy {
            Some(execute_toy(policy, n, d, &cfg.mask, cfg.seed)?)
        } else {
            None
        };
        if let Some(t) = &toy {
            r.failed |= t.max_grad_diff > CHECKPOINT_TOL;
        }
        r.row(vec![
            json!(policy.name()),
            json!(p.stored_elements_per_layer),
            json!(p.attention_extra_elements),
            json!(p.recompute_pairs),
            json!(p.total_pairs),
            json!(p.recompute_fraction),
            json!(toy.as_ref().map(|t| t.recomputed_pairs)),
            json!(toy.as_ref().map(|t| t.max_grad_diff)),
        ]);
    }
    r.summary.push(format!(
        "seq_len_tokens {n}, dim {d}, mask {}, split {}",
        cfg.mask.name(),
        match cfg.sequence_policy() {
            burst_core::checkpoint::CheckpointPolicy::SequenceSelective { split } => split,
            _ => unreachable!(),
        }
    ));
    if !run_toy {
        r.summary.push(format!(
            "toy run skipped: it takes at most {TOY_MAX_SEQ} tokens"
        ));
    } else if r.failed {
        r.summary.push(format!(
            "toy gradients differ from the baseline by more than {CHECKPOINT_TOL:e}"
        ));
    }
    Ok(r)
}

pub fn compare_strategies(cfg: &RunConfig) -> anyhow::Result<Report> {
    let scenario = Scenario {
        seq_len: cfg.seq_len,
        dim: cfg.dim,
        topology: cfg.topology,
        layout: cfg.layout,
        mask: cfg.mask.clone(),
        checkpoint: cfg.sequence_policy(),
        fusion: cfg.fusion,
        vocab: cfg.vocab,
        compute_time_per_step: cfg.compute_seconds_per_step,
    };
    let c = compare(&scenario)?;
    let mut r = Report::new(
        "compare",
        cfg.seed,
        vec![
            "strategy",
            "forward_elements",
            "backward_elements",
            "analytic_seconds",
            "simulated_seconds",
            "serial_seconds",
            "lower_bound_seconds",
            "comm_ratio_vs_ring",
            "time_ratio_vs_ring",
        ],
    );
    for row in &c.rows {
        r.row(vec![
            json!(row.strategy.name()),
            json!(row.forward_elements),
            json!(row.backward_elements),
            json!(row.analytic_seconds),
            json!(row.simulated_seconds),
            json!(row.serial_seconds),
            json!(row.lower_bound_seconds),
            json!(row.comm_ratio_vs_ring),
            json!(row.time_ratio_vs_ring),
        ]);
    }
    r.summary.push(format!(
        "seq_len_tokens {}, dim {}, {} nodes x {} devices, layout {}, mask {}",
        cfg.seq_len,
        cfg.dim,
        cfg.topology.num_nodes,
        cfg.topology.gpus_per_node,
        cfg.layout.name(),
        cfg.mask.name()
    ));
    r.summary.push(format!(
        "burst/ring backward elements {:.6}; checkpoint stores {} elements per layer, recomputes {:.4} of pairs",
        c.backward_comm_ratio, c.checkpoint_stored_elements, c.checkpoint_recompute_fraction
    ));
    r.summary.push(format!(
        "lm head logits: naive {} elements, fused {} elements",
        c.lmhead_naive_elements, c.lmhead_fused_elements
    ));
    r.extra
        .insert("unit_elements".into(), json!(c.unit_elements));
    r.extra
        .insert("backward_comm_ratio".into(), json!(c.backward_comm_ratio));
    r.extra.insert(
        "checkpoint_stored_elements".into(),
        json!(c.checkpoint_stored_elements),
    );
    r.extra.insert(
        "checkpoint_recompute_fraction".into(),
        json!(c.checkpoint_recompute_fraction),
    );
    r.extra.insert(
        "lmhead_naive_elements".into(),
        json!(c.lmhead_naive_elements),
    );
    r.extra.insert(
        "lmhead_fused_elements".into(),
        json!(c.lmhead_fused_elements),
    );
    Ok(r)
}
