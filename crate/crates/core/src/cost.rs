//! Strategy comparison: communication volume, closed-form and simulated
//! times, and memory-model figures for ring, double-ring and burst attention
//! on one scenario.
//!
//! A per-step unit is `(N/G)·d` elements. Each strategy is modelled as
//! timeline segments:
//!
//! | strategy    | forward              | backward                                   |
//! |-------------|----------------------|--------------------------------------------|
//! | ring        | 2 units, no overlap  | 4 units, no overlap                        |
//! | double_ring | 2 units, activation  | 2 units activation + 2 units no overlap    |
//! | burst       | 2 units, activation  | 3 units + `2N/G`, gradient overlap         |
//!
//! The flat ring runs every hop with the larger latency and the smaller
//! bandwidth of the two link types.

use serde::Serialize;

use crate::checkpoint::{plan, CheckpointPolicy};
use crate::error::{invalid, Result};
use crate::fabric::{
    account_attention_comm, analytic_comm_time, channel_lower_bound, serial_time, simulate_ring,
    OverlapKind, OverlapSchedule, Pass, Strategy, Topology,
};
use crate::lmhead::{memory_footprint, FusionConfig};
use crate::oracle::MaskSpec;
use crate::partition::{LayoutKind, ShardLayout};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub seq_len: usize,
    pub dim: usize,
    pub topology: Topology,
    pub layout: LayoutKind,
    pub mask: MaskSpec,
    pub checkpoint: CheckpointPolicy,
    pub fusion: FusionConfig,
    pub vocab: usize,
    /// Seconds of attention compute per ring step.
    pub compute_time_per_step: f64,
}

impl Scenario {
    pub fn devices(&self) -> usize {
        self.topology.devices()
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        ShardLayout::new(self.layout, self.seq_len, self.devices())?;
        self.mask.validate(self.seq_len)?;
        self.checkpoint.boundary(self.seq_len)?;
        self.fusion.validate()?;
        if self.dim == 0 {
            return Err(invalid("dim", "must be positive"));
        }
        if self.vocab == 0 {
            return Err(invalid("vocab", "must be positive"));
        }
        if !(self.compute_time_per_step >= 0.0 && self.compute_time_per_step.is_finite()) {
            return Err(invalid(
                "compute_time_per_step",
                "must be non-negative and finite",
            ));
        }
        Ok(())
    }

    fn unit(&self) -> u64 {
        (self.seq_len / self.devices() * self.dim) as u64
    }

    /// Segments of `(overlap, per-step elements, compute time per step)`.
    fn segments(&self, strategy: Strategy) -> Vec<(OverlapKind, u64, f64)> {
        let u = self.unit();
        let c = self.compute_time_per_step;
        let rows = (self.seq_len / self.devices()) as u64;
        match strategy {
            Strategy::Ring => vec![(OverlapKind::None, 2 * u, c), (OverlapKind::None, 4 * u, c)],
            Strategy::DoubleRing => vec![
                (OverlapKind::Activation, 2 * u, c),
                (OverlapKind::Activation, 2 * u, c),
                (OverlapKind::None, 2 * u, 0.0),
            ],
            Strategy::Burst => vec![
                (OverlapKind::Activation, 2 * u, c),
                (OverlapKind::Gradient, 3 * u + 2 * rows, c),
            ],
        }
    }

    fn topology_for(&self, strategy: Strategy) -> Topology {
        match strategy {
            Strategy::Ring => {
                let t = &self.topology;
                Topology::single_node(
                    t.devices(),
                    t.lat_intra.max(t.lat_inter),
                    t.bw_intra.min(t.bw_inter),
                )
            }
            _ => self.topology,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub forward_elements: u64,
    pub backward_elements: u64,
    pub analytic_seconds: f64,
    pub simulated_seconds: f64,
    pub serial_seconds: f64,
    pub lower_bound_seconds: f64,
    pub comm_ratio_vs_ring: f64,
    pub time_ratio_vs_ring: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub scenario: Scenario,
    pub unit_elements: u64,
    pub rows: Vec<StrategyRow>,
    /// `(3d + 2) / (4d)`.
    pub backward_comm_ratio: f64,
    pub checkpoint_stored_elements: u64,
    pub checkpoint_recompute_fraction: f64,
    pub lmhead_naive_elements: u64,
    pub lmhead_fused_elements: u64,
}

pub fn compare(scenario: &Scenario) -> Result<ComparisonReport> {
    scenario.validate()?;
    let (n, d, g) = (scenario.seq_len, scenario.dim, scenario.devices());
    let fwd = account_attention_comm(Pass::Forward, n, d, g)?;
    let ring_bwd = account_attention_comm(Pass::RingBackward, n, d, g)?;
    let burst_bwd = account_attention_comm(Pass::BurstBackward, n, d, g)?;

    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        let topo = scenario.topology_for(strategy);
        let (mut simulated, mut serial, mut lower) = (0.0, 0.0, 0.0);
        for (kind, payload, c) in scenario.segments(strategy) {
            let (_, tl) = simulate_ring(payload, &topo, &mut OverlapSchedule::new(kind), c)?;
            simulated += tl.makespan;
            serial += serial_time(&topo, payload as f64, c);
            lower += channel_lower_bound(&topo, payload as f64, c);
        }
        let bwd = if strategy == Strategy::Burst {
            burst_bwd
        } else {
            ring_bwd
        };
        rows.push(StrategyRow {
            strategy,
            forward_elements: fwd,
            backward_elements: bwd,
            analytic_seconds: analytic_comm_time(
                strategy,
                &scenario.topology,
                scenario.unit() as f64,
            ),
            simulated_seconds: simulated,
            serial_seconds: serial,
            lower_bound_seconds: lower,
            comm_ratio_vs_ring: 0.0,
            time_ratio_vs_ring: 0.0,
        });
    }
    let (ring_comm, ring_time) = (
        (rows[0].forward_elements + rows[0].backward_elements) as f64,
        rows[0].analytic_seconds,
    );
    for r in &mut rows {
        r.comm_ratio_vs_ring = (r.forward_elements + r.backward_elements) as f64 / ring_comm;
        r.time_ratio_vs_ring = r.analytic_seconds / ring_time;
    }
    let ck = plan(scenario.checkpoint, n, d, &scenario.mask)?;
    let lm = memory_footprint(n as u64, scenario.vocab as u64, d as u64, scenario.fusion);
    Ok(ComparisonReport {
        scenario: scenario.clone(),
        unit_elements: scenario.unit(),
        rows,
        backward_comm_ratio: burst_bwd as f64 / ring_bwd as f64,
        checkpoint_stored_elements: ck.stored_elements_per_layer,
        checkpoint_recompute_fraction: ck.recompute_fraction,
        lmhead_naive_elements: lm.naive_elements,
        lmhead_fused_elements: lm.fused_peak_elements,
    })
}
