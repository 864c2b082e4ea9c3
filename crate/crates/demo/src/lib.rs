//! Browser demo: workload heatmaps, ring timelines and communication time per
//! strategy. Each export returns a JSON string for `www/index.html` to draw.

use burst_core::fabric::{
    account_attention_comm, analytic_comm_time, simulate_ring, OverlapKind, OverlapSchedule, Pass,
    Strategy, Topology,
};
use burst_core::oracle::MaskSpec;
use burst_core::partition::{balance_report, LayoutKind, ShardLayout};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn layout_kind(name: &str, block: usize) -> Result<LayoutKind, String> {
    Ok(match name {
        "contiguous" => LayoutKind::Contiguous,
        "zigzag" => LayoutKind::Zigzag,
        "striped" => LayoutKind::Striped,
        "block_striped" => LayoutKind::BlockStriped { block_len: block },
        _ => return Err(format!("unknown layout {name}")),
    })
}

fn mask(name: &str, n: usize, block: usize) -> Result<MaskSpec, String> {
    let m = match name {
        "full" => MaskSpec::Full,
        "causal" => MaskSpec::Causal,
        "sliding_window" => MaskSpec::SlidingWindow { window: n / 4 + 1 },
        "block_sparse" => MaskSpec::seeded_block_sparse(n, block, 0).map_err(|e| e.to_string())?,
        _ => return Err(format!("unknown mask {name}")),
    };
    m.validate(n).map_err(|e| e.to_string())?;
    Ok(m)
}

fn overlap(name: &str) -> Result<OverlapKind, String> {
    Ok(match name {
        "none" => OverlapKind::None,
        "activation" => OverlapKind::Activation,
        "gradient" => OverlapKind::Gradient,
        _ => return Err(format!("unknown overlap {name}")),
    })
}

#[derive(Serialize)]
struct Heatmap {
    /// `pairs[device][step]`.
    pairs: Vec<Vec<u64>>,
    totals: Vec<u64>,
    device_spread: u64,
    step_spread: u64,
    /// Token ids held by each device.
    tokens: Vec<Vec<usize>>,
}

pub fn balance_json(
    layout: &str,
    mask_name: &str,
    seq: usize,
    gpus: usize,
    block: usize,
) -> Result<String, String> {
    let l = ShardLayout::new(layout_kind(layout, block)?, seq, gpus).map_err(|e| e.to_string())?;
    let m = mask(mask_name, seq, block)?;
    let w = balance_report(&l, &m);
    let h = Heatmap {
        device_spread: w.device_spread(),
        step_spread: w.step_spread(),
        totals: w.per_device_pairs,
        pairs: w.per_step_pairs,
        tokens: l.shards.iter().map(|s| s.token_ids.clone()).collect(),
    };
    serde_json::to_string(&h).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct TimelineView<'a> {
    devices: usize,
    makespan: f64,
    events: &'a [burst_core::fabric::Event],
}

pub fn timeline_json(
    nodes: usize,
    gpus_per_node: usize,
    overlap_name: &str,
    payload: u64,
    compute_seconds: f64,
) -> Result<String, String> {
    let topo = Topology::new(nodes, gpus_per_node, 2e-6, 1e-5, 1e11, 1.25e10)
        .map_err(|e| e.to_string())?;
    let mut schedule = OverlapSchedule::new(overlap(overlap_name)?);
    let (_, tl) =
        simulate_ring(payload, &topo, &mut schedule, compute_seconds).map_err(|e| e.to_string())?;
    serde_json::to_string(&TimelineView {
        devices: topo.devices(),
        makespan: tl.makespan,
        events: &tl.events,
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct CommRow {
    strategy: &'static str,
    forward_elements: u64,
    backward_elements: u64,
    seconds: f64,
}

/// Bandwidths in elements per second.
pub fn comm_json(
    seq: usize,
    dim: usize,
    nodes: usize,
    gpus_per_node: usize,
    bw_intra: f64,
    bw_inter: f64,
) -> Result<String, String> {
    let topo = Topology::new(nodes, gpus_per_node, 2e-6, 1e-5, bw_intra, bw_inter)
        .map_err(|e| e.to_string())?;
    let g = topo.devices();
    let err = |e: burst_core::Error| e.to_string();
    let fwd = account_attention_comm(Pass::Forward, seq, dim, g).map_err(err)?;
    let unit = (seq / g * dim) as f64;
    let mut rows = Vec::new();
    for s in Strategy::ALL {
        let pass = if s == Strategy::Burst {
            Pass::BurstBackward
        } else {
            Pass::RingBackward
        };
        rows.push(CommRow {
            strategy: s.name(),
            forward_elements: fwd,
            backward_elements: account_attention_comm(pass, seq, dim, g).map_err(err)?,
            seconds: analytic_comm_time(s, &topo, unit),
        });
    }
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn balance_heatmap(
    layout: &str,
    mask: &str,
    seq: usize,
    gpus: usize,
    block: usize,
) -> Result<String, JsError> {
    balance_json(layout, mask, seq, gpus, block).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn ring_timeline(
    nodes: usize,
    gpus_per_node: usize,
    overlap: &str,
    payload: u32,
    compute_seconds: f64,
) -> Result<String, JsError> {
    timeline_json(
        nodes,
        gpus_per_node,
        overlap,
        payload.into(),
        compute_seconds,
    )
    .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn comm_times(
    seq: usize,
    dim: usize,
    nodes: usize,
    gpus_per_node: usize,
    bw_intra: f64,
    bw_inter: f64,
) -> Result<String, JsError> {
    comm_json(seq, dim, nodes, gpus_per_node, bw_intra, bw_inter).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn heatmap_for_zigzag() {
        let v: Value =
            serde_json::from_str(&balance_json("zigzag", "causal", 8, 2, 1).unwrap()).unwrap();
        assert_eq!(v["totals"], serde_json::json!([18, 18]));
        assert_eq!(v["pairs"].as_array().unwrap().len(), 2);
        assert!(balance_json("zigzag", "causal", 6, 2, 1).is_err());
        assert!(balance_json("spiral", "causal", 8, 2, 1).is_err());
    }

    #[test]
    fn timeline_has_events() {
        let v: Value =
            serde_json::from_str(&timeline_json(2, 2, "gradient", 4096, 1e-5).unwrap()).unwrap();
        assert_eq!(v["devices"], 4);
        let events = v["events"].as_array().unwrap();
        assert!(!events.is_empty());
        assert!(events
            .iter()
            .all(|e| e["end"].as_f64().unwrap() <= v["makespan"].as_f64().unwrap()));
        assert!(timeline_json(2, 2, "eager", 4096, 1e-5).is_err());
    }

    #[test]
    fn comm_rows() {
        let v: Value = serde_json::from_str(&comm_json(8, 4, 1, 2, 1e11, 1e10).unwrap()).unwrap();
        assert_eq!(v[0]["backward_elements"], 128);
        assert_eq!(v[2]["backward_elements"], 112);
        assert!(v[2]["seconds"].as_f64().unwrap() <= v[0]["seconds"].as_f64().unwrap());
    }
}
