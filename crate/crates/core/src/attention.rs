//! Distributed attention over a ring of simulated devices: the online-softmax
//! forward, the RingAttention backward (K, V, dK, dV circulate) and the
//! BurstAttention backward (Q, dQ, dO, D, Lse circulate; K, V and their
//! gradients stay put).
//!
//! Per-step work is a pure function of one device's resident state and the
//! payload it currently holds. Gradients that travel with a payload are
//! reduced in ring-step order, so results do not depend on the order in which
//! device steps are executed or on the rayon thread count.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fabric::{
    simulate_ring, MessageLog, OverlapKind, OverlapSchedule, Pass, RingPlan, Timeline, Topology,
};
use crate::numerics::{
    logsumexp, lse_merge_scalar, matmul, matmul_nt, matmul_tn, rowsum_hadamard, Matrix, Vector,
};
use crate::oracle::{AttentionGrads, AttentionResult, MaskSpec};
use crate::partition::{local_mask, LocalMask, ShardLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub device: usize,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub o: Matrix,
    pub lse: Vector,
    /// `rowsum(dO ∘ O)`, set by the burst backward.
    pub d: Vector,
    pub d_o: Matrix,
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
    forward_done: bool,
}

impl DeviceState {
    fn new(device: usize, q: Matrix, k: Matrix, v: Matrix) -> Self {
        let (rows, d) = q.shape();
        Self {
            device,
            o: Matrix::zeros(rows, d),
            lse: Vector::neg_infinity(rows),
            d: Vector::zeros(rows),
            d_o: Matrix::zeros(rows, d),
            dq: Matrix::zeros(rows, d),
            dk: Matrix::zeros(rows, d),
            dv: Matrix::zeros(rows, d),
            q,
            k,
            v,
            forward_done: false,
        }
    }

    pub fn forward_done(&self) -> bool {
        self.forward_done
    }

    fn reset_grads(&mut self) {
        let (rows, d) = self.q.shape();
        self.dq = Matrix::zeros(rows, d);
        self.dk = Matrix::zeros(rows, d);
        self.dv = Matrix::zeros(rows, d);
    }
}

/// Ring payload of the forward pass and of the RingAttention backward.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPayload {
    pub shard: usize,
    pub k: Matrix,
    pub v: Matrix,
    /// `(dK, dV)` while running the ring backward.
    pub grads: Option<(Matrix, Matrix)>,
}

impl KvPayload {
    pub fn elements(&self) -> u64 {
        let base = self.k.len() + self.v.len();
        let grads = self.grads.as_ref().map_or(0, |(a, b)| a.len() + b.len());
        (base + grads) as u64
    }
}

/// Ring payload of the BurstAttention backward.
#[derive(Debug, Clone, PartialEq)]
pub struct QPayload {
    pub shard: usize,
    pub q: Matrix,
    pub dq: Matrix,
    pub d_o: Matrix,
    pub d: Vector,
    pub lse: Vector,
}

impl QPayload {
    pub fn elements(&self) -> u64 {
        (self.q.len() + self.dq.len() + self.d_o.len() + self.d.len() + self.lse.len()) as u64
    }
}

/// How device steps are sequenced.
#[derive(Debug, Clone, Copy)]
pub enum Execution<'a> {
    /// Step by step; devices within a step run in parallel.
    Barrier,
    /// `(step, device)` pairs in the given order, one at a time. Each device's
    /// own steps must appear in increasing order.
    Ordered(&'a [(usize, usize)]),
}

/// Sharded attention problem bound to a ring plan.
#[derive(Debug, Clone)]
pub struct DistributedAttention {
    layout: ShardLayout,
    plan: RingPlan,
    /// `masks[i][j]`: query device `i` against key device `j`.
    masks: Vec<Vec<LocalMask>>,
    pub devices: Vec<DeviceState>,
}

fn scores(q: &Matrix, k: &Matrix, mask: &LocalMask) -> Result<Matrix> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut s = matmul_nt(q, k)?;
    for a in 0..s.rows() {
        for b in 0..s.cols() {
            let x = if mask.allows(a, b) {
                s.get(a, b) * scale
            } else {
                f64::NEG_INFINITY
            };
            s.set(a, b, x);
        }
    }
    Ok(s)
}

/// `exp(S - Lse)` row-wise, zero where masked.
fn probabilities(s: &Matrix, lse: &Vector) -> Matrix {
    let mut p = Matrix::zeros(s.rows(), s.cols());
    for a in 0..s.rows() {
        let l = lse.get(a);
        for b in 0..s.cols() {
            let x = s.get(a, b);
            if x != f64::NEG_INFINITY {
                p.set(a, b, (x - l).exp());
            }
        }
    }
    p
}

struct ForwardUpdate {
    o_ij: Matrix,
    lse_cur: Vector,
}

fn forward_step(
    dev: &DeviceState,
    k: &Matrix,
    v: &Matrix,
    mask: &LocalMask,
) -> Result<Option<ForwardUpdate>> {
    if mask.is_empty() {
        return Ok(None);
    }
    let s = scores(&dev.q, k, mask)?;
    let lse_cur = Vector::new((0..s.rows()).map(|a| logsumexp(s.row(a))).collect());
    let p = probabilities(&s, &lse_cur);
    let o_ij = matmul(&p, v)?;
    Ok(Some(ForwardUpdate { o_ij, lse_cur }))
}

fn apply_forward(dev: &mut DeviceState, upd: ForwardUpdate) {
    for a in 0..dev.q.rows() {
        let cur = upd.lse_cur.get(a);
        let prev = dev.lse.get(a);
        let cor = lse_merge_scalar(prev, cur);
        if cor == f64::NEG_INFINITY {
            continue;
        }
        let w_cur = (cur - cor).exp();
        let w_prev = (prev - cor).exp();
        let o_ij = upd.o_ij.row(a);
        for (o, &x) in dev.o.row_mut(a).iter_mut().zip(o_ij) {
            *o = w_cur * x + w_prev * *o;
        }
        dev.lse.as_mut_slice()[a] = cor;
    }
}

/// Query-side backward step: returns `(dQ_i, dK_j, dV_j)` contributions.
fn ring_backward_step(
    dev: &DeviceState,
    k: &Matrix,
    v: &Matrix,
    mask: &LocalMask,
) -> Result<Option<(Matrix, Matrix, Matrix)>> {
    if mask.is_empty() {
        return Ok(None);
    }
    let scale = 1.0 / (dev.q.cols() as f64).sqrt();
    let d_i = rowsum_hadamard(&dev.d_o, &dev.o)?;
    let s = scores(&dev.q, k, mask)?;
    let p = probabilities(&s, &dev.lse);
    let dv = matmul_tn(&p, &dev.d_o)?;
    let dp = matmul_nt(&dev.d_o, v)?;
    let ds = grad_scores(&p, &dp, &d_i);
    let dk = matmul_tn(&ds, &dev.q)?.scaled(scale);
    let dq = matmul(&ds, k)?.scaled(scale);
    Ok(Some((dq, dk, dv)))
}

/// Key-side backward step: returns `(dQ_j, dK_i, dV_i)` contributions.
fn burst_backward_step(
    dev: &DeviceState,
    payload: &QView,
    mask: &LocalMask,
) -> Result<Option<(Matrix, Matrix, Matrix)>> {
    if mask.is_empty() {
        return Ok(None);
    }
    let scale = 1.0 / (dev.k.cols() as f64).sqrt();
    let s = scores(payload.q, &dev.k, mask)?;
    let p = probabilities(&s, payload.lse);
    let dv = matmul_tn(&p, payload.d_o)?;
    let dp = matmul_nt(payload.d_o, &dev.v)?;
    let ds = grad_scores(&p, &dp, payload.d);
    let dk = matmul_tn(&ds, payload.q)?.scaled(scale);
    let dq = matmul(&ds, &dev.k)?.scaled(scale);
    Ok(Some((dq, dk, dv)))
}

fn grad_scores(p: &Matrix, dp: &Matrix, d: &Vector) -> Matrix {
    let mut ds = Matrix::zeros(p.rows(), p.cols());
    for a in 0..p.rows() {
        for b in 0..p.cols() {
            ds.set(a, b, p.get(a, b) * (dp.get(a, b) - d.get(a)));
        }
    }
    ds
}

struct QView<'a> {
    q: &'a Matrix,
    d_o: &'a Matrix,
    d: &'a Vector,
    lse: &'a Vector,
}

impl<'a> From<&'a QPayload> for QView<'a> {
    fn from(p: &'a QPayload) -> Self {
        Self {
            q: &p.q,
            d_o: &p.d_o,
            d: &p.d,
            lse: &p.lse,
        }
    }
}

impl<'a> From<&'a DeviceState> for QView<'a> {
    fn from(dev: &'a DeviceState) -> Self {
        Self {
            q: &dev.q,
            d_o: &dev.d_o,
            d: &dev.d,
            lse: &dev.lse,
        }
    }
}

/// Adds per-step contributions in ring-step order, starting from zero.
fn reduce_in_step_order(parts: Vec<Option<Matrix>>, rows: usize, cols: usize) -> Result<Matrix> {
    let mut acc = Matrix::zeros(rows, cols);
    for part in parts.into_iter().flatten() {
        acc.add_assign(&part)?;
    }
    Ok(acc)
}

impl DistributedAttention {
    /// Shards the global `q`, `k`, `v` (`N × d`) by `layout` and binds them to
    /// `plan`.
    pub fn new(
        q: &Matrix,
        k: &Matrix,
        v: &Matrix,
        layout: ShardLayout,
        mask: &MaskSpec,
        plan: RingPlan,
    ) -> Result<Self> {
        let n = layout.seq_len;
        for m in [q, k, v] {
            if m.shape() != q.shape() || m.rows() != n {
                return Err(Error::ShapeMismatch {
                    op: "distributed attention inputs",
                    left: (n, q.cols()),
                    right: m.shape(),
                });
            }
        }
        mask.validate(n)?;
        if plan.devices() != layout.devices {
            return Err(invalid(
                "devices",
                format!(
                    "ring plan has {} devices, layout has {}",
                    plan.devices(),
                    layout.devices
                ),
            ));
        }
        let g = layout.devices;
        let masks = (0..g)
            .map(|i| (0..g).map(|j| local_mask(&layout, mask, i, j)).collect())
            .collect();
        let devices = (0..g)
            .map(|i| {
                let rows = layout.shard(i).rows();
                DeviceState::new(
                    i,
                    q.select_rows(&rows),
                    k.select_rows(&rows),
                    v.select_rows(&rows),
                )
            })
            .collect();
        Ok(Self {
            layout,
            plan,
            masks,
            devices,
        })
    }

    pub fn layout(&self) -> &ShardLayout {
        &self.layout
    }

    pub fn plan(&self) -> &RingPlan {
        &self.plan
    }

    fn g(&self) -> usize {
        self.layout.devices
    }

    fn check_order(&self, order: &[(usize, usize)]) -> Result<()> {
        let g = self.g();
        let mut next = vec![0usize; g];
        for &(s, i) in order {
            if i >= g || s != next[i] {
                return Err(invalid(
                    "execution order",
                    format!("step {s} of device {i} out of sequence"),
                ));
            }
            next[i] += 1;
        }
        if next.iter().any(|&c| c != g) {
            return Err(invalid(
                "execution order",
                "every device must run every step once",
            ));
        }
        Ok(())
    }

    fn move_payloads<P>(
        &self,
        s: usize,
        payloads: Vec<P>,
        elements: impl Fn(&P) -> u64,
        log: &mut MessageLog,
    ) -> Vec<P> {
        let mut slots: Vec<Option<P>> = (0..payloads.len()).map(|_| None).collect();
        for (i, p) in payloads.into_iter().enumerate() {
            let to = match self.plan.hop(s, i) {
                Some(h) => {
                    log.record(s, i, h.to, h.link, elements(&p));
                    h.to
                }
                None => i,
            };
            slots[to] = Some(p);
        }
        slots
            .into_iter()
            .map(|p| p.expect("ring hops form a permutation"))
            .collect()
    }

    /// Online-softmax forward. Clears any previous forward and backward state.
    pub fn forward(&mut self, exec: Execution) -> Result<MessageLog> {
        let g = self.g();
        for dev in &mut self.devices {
            let (rows, d) = dev.q.shape();
            dev.o = Matrix::zeros(rows, d);
            dev.lse = Vector::neg_infinity(rows);
            dev.forward_done = false;
            dev.reset_grads();
        }
        let mut log = MessageLog::new(g, g);
        match exec {
            Execution::Barrier => {
                let mut payloads: Vec<KvPayload> = (0..g)
                    .map(|i| {
                        let j = self.plan.source(0, i);
                        KvPayload {
                            shard: j,
                            k: self.devices[j].k.clone(),
                            v: self.devices[j].v.clone(),
                            grads: None,
                        }
                    })
                    .collect();
                for s in 0..g {
                    let updates: Vec<Result<Option<ForwardUpdate>>> = (0..g)
                        .into_par_iter()
                        .map(|i| {
                            let p = &payloads[i];
                            forward_step(&self.devices[i], &p.k, &p.v, &self.masks[i][p.shard])
                        })
                        .collect();
                    for (i, u) in updates.into_iter().enumerate() {
                        if let Some(u) = u? {
                            apply_forward(&mut self.devices[i], u);
                        }
                    }
                    payloads = self.move_payloads(s, payloads, KvPayload::elements, &mut log);
                }
            }
            Execution::Ordered(order) => {
                self.check_order(order)?;
                for &(s, i) in order {
                    let j = self.plan.source(s, i);
                    let dev = &self.devices[j];
                    if let Some(u) =
                        forward_step(&self.devices[i], &dev.k, &dev.v, &self.masks[i][j])?
                    {
                        apply_forward(&mut self.devices[i], u);
                    }
                }
                let per_step =
                    Pass::Forward.step_payload(self.layout.shard_len() as u64, self.d() as u64);
                log = MessageLog::from_plan(&self.plan, per_step);
            }
        }
        for dev in &mut self.devices {
            if let Some(a) = dev
                .lse
                .as_slice()
                .iter()
                .position(|&l| l == f64::NEG_INFINITY)
            {
                return Err(Error::FullyMaskedRow {
                    row: self.layout.shard(dev.device).rows()[a],
                });
            }
            dev.forward_done = true;
        }
        Ok(log)
    }

    fn d(&self) -> usize {
        self.devices[0].q.cols()
    }

    fn prepare_backward(&mut self, d_o: &Matrix) -> Result<()> {
        if d_o.shape() != (self.layout.seq_len, self.d()) {
            return Err(Error::ShapeMismatch {
                op: "backward dO",
                left: (self.layout.seq_len, self.d()),
                right: d_o.shape(),
            });
        }
        for dev in &mut self.devices {
            if !dev.forward_done {
                return Err(Error::BackwardBeforeForward { device: dev.device });
            }
            dev.d_o = d_o.select_rows(&self.layout.shard(dev.device).rows());
            dev.reset_grads();
        }
        Ok(())
    }

    /// RingAttention backward: K, V, dK, dV circulate; `D_i` is recomputed
    /// at every step.
    pub fn ring_backward(&mut self, d_o: &Matrix, exec: Execution) -> Result<MessageLog> {
        self.prepare_backward(d_o)?;
        let g = self.g();
        let (rows, d) = (self.layout.shard_len(), self.d());
        let mut log = MessageLog::new(g, g);
        match exec {
            Execution::Barrier => {
                let mut payloads: Vec<KvPayload> = (0..g)
                    .map(|i| {
                        let j = self.plan.source(0, i);
                        KvPayload {
                            shard: j,
                            k: self.devices[j].k.clone(),
                            v: self.devices[j].v.clone(),
                            grads: Some((Matrix::zeros(rows, d), Matrix::zeros(rows, d))),
                        }
                    })
                    .collect();
                for s in 0..g {
                    let parts: Vec<_> = (0..g)
                        .into_par_iter()
                        .map(|i| {
                            let p = &payloads[i];
                            ring_backward_step(
                                &self.devices[i],
                                &p.k,
                                &p.v,
                                &self.masks[i][p.shard],
                            )
                        })
                        .collect();
                    for (i, part) in parts.into_iter().enumerate() {
                        if let Some((dq, dk, dv)) = part? {
                            self.devices[i].dq.add_assign(&dq)?;
                            let (pk, pv) =
                                payloads[i].grads.as_mut().expect("ring backward payload");
                            pk.add_assign(&dk)?;
                            pv.add_assign(&dv)?;
                        }
                    }
                    payloads = self.move_payloads(s, payloads, KvPayload::elements, &mut log);
                }
                for p in payloads {
                    let (dk, dv) = p.grads.expect("ring backward payload");
                    let dev = &mut self.devices[p.shard];
                    dev.dk = dk;
                    dev.dv = dv;
                }
            }
            Execution::Ordered(order) => {
                self.check_order(order)?;
                let mut pending_dk: Vec<Vec<Option<Matrix>>> = vec![vec![None; g]; g];
                let mut pending_dv: Vec<Vec<Option<Matrix>>> = vec![vec![None; g]; g];
                for &(s, i) in order {
                    let j = self.plan.source(s, i);
                    let kv = &self.devices[j];
                    if let Some((dq, dk, dv)) =
                        ring_backward_step(&self.devices[i], &kv.k, &kv.v, &self.masks[i][j])?
                    {
                        self.devices[i].dq.add_assign(&dq)?;
                        pending_dk[j][s] = Some(dk);
                        pending_dv[j][s] = Some(dv);
                    }
                }
                for (j, (dk, dv)) in pending_dk.into_iter().zip(pending_dv).enumerate() {
                    self.devices[j].dk = reduce_in_step_order(dk, rows, d)?;
                    self.devices[j].dv = reduce_in_step_order(dv, rows, d)?;
                }
                log = MessageLog::from_plan(
                    &self.plan,
                    Pass::RingBackward.step_payload(rows as u64, d as u64),
                );
            }
        }
        Ok(log)
    }

    /// BurstAttention backward: `D` is computed once; Q, dQ, dO, D, Lse
    /// circulate and the key-side device accumulates dK, dV locally.
    pub fn burst_backward(&mut self, d_o: &Matrix, exec: Execution) -> Result<MessageLog> {
        self.prepare_backward(d_o)?;
        for dev in &mut self.devices {
            dev.d = rowsum_hadamard(&dev.d_o, &dev.o)?;
        }
        let g = self.g();
        let (rows, d) = (self.layout.shard_len(), self.d());
        let mut log = MessageLog::new(g, g);
        match exec {
            Execution::Barrier => {
                let mut payloads: Vec<QPayload> = (0..g)
                    .map(|i| {
                        let j = self.plan.source(0, i);
                        let dev = &self.devices[j];
                        QPayload {
                            shard: j,
                            q: dev.q.clone(),
                            dq: Matrix::zeros(rows, d),
                            d_o: dev.d_o.clone(),
                            d: dev.d.clone(),
                            lse: dev.lse.clone(),
                        }
                    })
                    .collect();
                for s in 0..g {
                    let parts: Vec<_> = (0..g)
                        .into_par_iter()
                        .map(|i| {
                            let p = &payloads[i];
                            burst_backward_step(
                                &self.devices[i],
                                &QView::from(p),
                                &self.masks[p.shard][i],
                            )
                        })
                        .collect();
                    for (i, part) in parts.into_iter().enumerate() {
                        if let Some((dq, dk, dv)) = part? {
                            payloads[i].dq.add_assign(&dq)?;
                            self.devices[i].dk.add_assign(&dk)?;
                            self.devices[i].dv.add_assign(&dv)?;
                        }
                    }
                    payloads = self.move_payloads(s, payloads, QPayload::elements, &mut log);
                }
                for p in payloads {
                    self.devices[p.shard].dq = p.dq;
                }
            }
            Execution::Ordered(order) => {
                self.check_order(order)?;
                let mut pending_dq: Vec<Vec<Option<Matrix>>> = vec![vec![None; g]; g];
                for &(s, i) in order {
                    let j = self.plan.source(s, i);
                    let view = QView::from(&self.devices[j]);
                    if let Some((dq, dk, dv)) =
                        burst_backward_step(&self.devices[i], &view, &self.masks[j][i])?
                    {
                        self.devices[i].dk.add_assign(&dk)?;
                        self.devices[i].dv.add_assign(&dv)?;
                        pending_dq[j][s] = Some(dq);
                    }
                }
                for (j, dq) in pending_dq.into_iter().enumerate() {
                    self.devices[j].dq = reduce_in_step_order(dq, rows, d)?;
                }
                log = MessageLog::from_plan(
                    &self.plan,
                    Pass::BurstBackward.step_payload(rows as u64, d as u64),
                );
            }
        }
        Ok(log)
    }

    fn gather(&self, pick: impl Fn(&DeviceState) -> &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.layout.seq_len, self.d());
        for dev in &self.devices {
            let m = pick(dev);
            for (a, row) in self.layout.shard(dev.device).rows().into_iter().enumerate() {
                out.row_mut(row).copy_from_slice(m.row(a));
            }
        }
        out
    }

    /// Output and Lse in global token order.
    pub fn gather_forward(&self) -> AttentionResult {
        let mut lse = vec![0.0; self.layout.seq_len];
        for dev in &self.devices {
            for (a, row) in self.layout.shard(dev.device).rows().into_iter().enumerate() {
                lse[row] = dev.lse.get(a);
            }
        }
        AttentionResult {
            o: self.gather(|d| &d.o),
            lse: Vector::new(lse),
        }
    }

    pub fn gather_grads(&self) -> AttentionGrads {
        AttentionGrads {
            dq: self.gather(|d| &d.dq),
            dk: self.gather(|d| &d.dk),
            dv: self.gather(|d| &d.dv),
        }
    }
}

/// Forward on a flat ring of `layout.devices` devices, gathered.
pub fn distributed_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: &ShardLayout,
    mask: &MaskSpec,
) -> Result<(AttentionResult, MessageLog, DistributedAttention)> {
    let mut engine = DistributedAttention::new(
        q,
        k,
        v,
        layout.clone(),
        mask,
        RingPlan::flat(layout.devices),
    )?;
    let log = engine.forward(Execution::Barrier)?;
    Ok((engine.gather_forward(), log, engine))
}

pub fn ring_backward(
    engine: &mut DistributedAttention,
    d_o: &Matrix,
) -> Result<(AttentionGrads, MessageLog)> {
    let log = engine.ring_backward(d_o, Execution::Barrier)?;
    Ok((engine.gather_grads(), log))
}

pub fn burst_backward(
    engine: &mut DistributedAttention,
    d_o: &Matrix,
) -> Result<(AttentionGrads, MessageLog)> {
    let log = engine.burst_backward(d_o, Execution::Barrier)?;
    Ok((engine.gather_grads(), log))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduledRun {
    #[serde(skip)]
    pub forward: AttentionResult,
    #[serde(skip)]
    pub grads: Option<AttentionGrads>,
    /// Element counts of the requested pass.
    pub log: MessageLog,
    /// Timeline of the requested pass.
    pub timeline: Timeline,
}

/// Runs `pass` on the double ring of `topo` with compute steps executed in the
/// order the overlap schedule's timeline dictates. Backward passes run a
/// barrier forward first. `d_o` is required for backward passes.
#[allow(clippy::too_many_arguments)]
pub fn run_with_schedule(
    pass: Pass,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: Option<&Matrix>,
    layout: &ShardLayout,
    mask: &MaskSpec,
    topo: &Topology,
    kind: OverlapKind,
    compute_time_per_step: f64,
) -> Result<ScheduledRun> {
    if topo.devices() != layout.devices {
        return Err(invalid(
            "devices",
            format!(
                "topology has {} devices, layout has {}",
                topo.devices(),
                layout.devices
            ),
        ));
    }
    let mut engine =
        DistributedAttention::new(q, k, v, layout.clone(), mask, RingPlan::double_ring(topo))?;
    let per_step = pass.step_payload(layout.shard_len() as u64, q.cols() as u64);
    let (_, timeline) = simulate_ring(
        per_step,
        topo,
        &mut OverlapSchedule::new(kind),
        compute_time_per_step,
    )?;
    let order = timeline.compute_order();
    let exec = Execution::Ordered(&order);
    let need_grad = || d_o.ok_or_else(|| invalid("d_o", "backward passes need an output gradient"));
    let (log, grads) = match pass {
        Pass::Forward => (engine.forward(exec)?, None),
        Pass::RingBackward => {
            engine.forward(Execution::Barrier)?;
            let log = engine.ring_backward(need_grad()?, exec)?;
            (log, Some(engine.gather_grads()))
        }
        Pass::BurstBackward => {
            engine.forward(Execution::Barrier)?;
            let log = engine.burst_backward(need_grad()?, exec)?;
            (log, Some(engine.gather_grads()))
        }
    };
    Ok(ScheduledRun {
        forward: engine.gather_forward(),
        grads,
        log,
        timeline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::account_attention_comm;
    use crate::numerics::seeded_random_matrix;
    use crate::oracle::{attention_backward, attention_forward};
    use crate::partition::LayoutKind;

    fn qkv(n: usize, d: usize, seed: u64) -> (Matrix, Matrix, Matrix) {
        (
            seeded_random_matrix(n, d, seed),
            seeded_random_matrix(n, d, seed + 1),
            seeded_random_matrix(n, d, seed + 2),
        )
    }

    fn layout(kind: LayoutKind, n: usize, g: usize) -> ShardLayout {
        ShardLayout::new(kind, n, g).unwrap()
    }

    #[test]
    fn single_device_matches_oracle() {
        let (q, k, v) = qkv(8, 4, 1);
        let want = attention_forward(&q, &k, &v, &MaskSpec::Causal).unwrap();
        let (got, log, _) = distributed_forward(
            &q,
            &k,
            &v,
            &layout(LayoutKind::Contiguous, 8, 1),
            &MaskSpec::Causal,
        )
        .unwrap();
        assert!(got.o.max_abs_diff(&want.o).unwrap() < 1e-12);
        assert!(got.lse.max_abs_diff(&want.lse).unwrap() < 1e-12);
        assert_eq!(log.sent_by(0), 0);
    }

    #[test]
    fn first_step_takes_local_output_exactly() {
        let (q, k, v) = qkv(4, 2, 5);
        let mut e = DistributedAttention::new(
            &q,
            &k,
            &v,
            layout(LayoutKind::Contiguous, 4, 2),
            &MaskSpec::Full,
            RingPlan::flat(2),
        )
        .unwrap();
        let mask = local_mask(e.layout(), &MaskSpec::Full, 0, 0);
        let upd = forward_step(
            &e.devices[0],
            &e.devices[0].k.clone(),
            &e.devices[0].v.clone(),
            &mask,
        )
        .unwrap()
        .unwrap();
        let want = upd.o_ij.clone();
        apply_forward(&mut e.devices[0], upd);
        assert_eq!(e.devices[0].o, want);
    }

    #[test]
    fn zigzag_causal_forward() {
        let (q, k, v) = qkv(16, 4, 11);
        let want = attention_forward(&q, &k, &v, &MaskSpec::Causal).unwrap();
        let (got, log, _) = distributed_forward(
            &q,
            &k,
            &v,
            &layout(LayoutKind::Zigzag, 16, 4),
            &MaskSpec::Causal,
        )
        .unwrap();
        assert!(got.o.max_abs_diff(&want.o).unwrap() < 1e-10);
        assert!(got.lse.max_abs_diff(&want.lse).unwrap() < 1e-10);
        assert_eq!(
            log.sent_by(2),
            account_attention_comm(Pass::Forward, 16, 4, 4).unwrap()
        );
    }

    #[test]
    fn backward_before_forward_is_rejected() {
        let (q, k, v) = qkv(8, 2, 3);
        let mut e = DistributedAttention::new(
            &q,
            &k,
            &v,
            layout(LayoutKind::Contiguous, 8, 2),
            &MaskSpec::Full,
            RingPlan::flat(2),
        )
        .unwrap();
        let d_o = Matrix::zeros(8, 2);
        assert!(matches!(
            e.ring_backward(&d_o, Execution::Barrier),
            Err(Error::BackwardBeforeForward { .. })
        ));
        assert!(matches!(
            e.burst_backward(&d_o, Execution::Barrier),
            Err(Error::BackwardBeforeForward { .. })
        ));
    }

    #[test]
    fn globally_masked_row_is_an_error() {
        let (q, k, v) = qkv(8, 2, 3);
        let mut bm = Matrix::filled(2, 2, 1.0);
        bm.row_mut(1).fill(0.0);
        let mask = MaskSpec::BlockSparse {
            block_mask: bm,
            block_len: 4,
        };
        let r = distributed_forward(&q, &k, &v, &layout(LayoutKind::Contiguous, 8, 2), &mask);
        assert!(matches!(r, Err(Error::FullyMaskedRow { row: 4 })));
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads_but_full_traffic() {
        let (q, k, v) = qkv(16, 4, 21);
        let (_, _, mut e) = distributed_forward(
            &q,
            &k,
            &v,
            &layout(LayoutKind::Contiguous, 16, 4),
            &MaskSpec::Full,
        )
        .unwrap();
        let d_o = Matrix::zeros(16, 4);
        let (g, log) = ring_backward(&mut e, &d_o).unwrap();
        assert_eq!(g.dq.max_abs() + g.dk.max_abs() + g.dv.max_abs(), 0.0);
        assert_eq!(log.sent_by(1), 256);
        let (g, log) = burst_backward(&mut e, &d_o).unwrap();
        assert_eq!(g.dq.max_abs() + g.dk.max_abs() + g.dv.max_abs(), 0.0);
        assert_eq!(log.sent_by(1), 224);
    }

    #[test]
    fn backward_matches_oracle_and_each_other() {
        for (g, mask) in [
            (1, MaskSpec::Full),
            (4, MaskSpec::Full),
            (2, MaskSpec::Causal),
            (4, MaskSpec::Causal),
            (2, MaskSpec::SlidingWindow { window: 5 }),
            (4, MaskSpec::SlidingWindow { window: 5 }),
        ] {
            let (q, k, v) = qkv(16, 4, 31);
            let d_o = seeded_random_matrix(16, 4, 99);
            let want_f = attention_forward(&q, &k, &v, &mask).unwrap();
            let want = attention_backward(&q, &k, &v, &want_f.o, &want_f.lse, &d_o, &mask).unwrap();
            let (_, _, mut e) =
                distributed_forward(&q, &k, &v, &layout(LayoutKind::Contiguous, 16, g), &mask)
                    .unwrap();
            let (ring, ring_log) = ring_backward(&mut e, &d_o).unwrap();
            let (burst, burst_log) = burst_backward(&mut e, &d_o).unwrap();
            assert!(ring.max_abs_diff(&burst).unwrap() < 1e-10);
            assert!(ring.max_abs_diff(&want).unwrap() < 1e-9);
            assert!(burst.max_abs_diff(&want).unwrap() < 1e-9);
            if g > 1 {
                assert_eq!(
                    ring_log.sent_by(0),
                    account_attention_comm(Pass::RingBackward, 16, 4, g).unwrap()
                );
                assert_eq!(
                    burst_log.sent_by(0),
                    account_attention_comm(Pass::BurstBackward, 16, 4, g).unwrap()
                );
            }
        }
    }

    #[test]
    fn visit_order_permutation_barely_moves_forward() {
        let (q, k, v) = qkv(32, 4, 41);
        let lay = layout(LayoutKind::Striped, 32, 4);
        let run = |plan: RingPlan| {
            let mut e = DistributedAttention::new(&q, &k, &v, lay.clone(), &MaskSpec::Causal, plan)
                .unwrap();
            e.forward(Execution::Barrier).unwrap();
            e.gather_forward()
        };
        let a = run(RingPlan::flat(4));
        let b = run(RingPlan::from_offsets(&[2, 0, 3, 1]).unwrap());
        assert!(a.o.max_abs_diff(&b.o).unwrap() < 1e-10);
    }

    #[test]
    fn schedules_do_not_change_values() {
        let (q, k, v) = qkv(16, 4, 51);
        let d_o = seeded_random_matrix(16, 4, 52);
        let lay = layout(LayoutKind::Zigzag, 16, 4);
        let topo = Topology::new(2, 2, 1e-6, 4e-6, 1e9, 2e8).unwrap();
        let run = |pass, kind| {
            run_with_schedule(
                pass,
                &q,
                &k,
                &v,
                Some(&d_o),
                &lay,
                &MaskSpec::Causal,
                &topo,
                kind,
                1e-6,
            )
            .unwrap()
        };
        let none = run(Pass::Forward, OverlapKind::None);
        let act = run(Pass::Forward, OverlapKind::Activation);
        assert_eq!(none.forward, act.forward);

        let mut barrier = DistributedAttention::new(
            &q,
            &k,
            &v,
            lay.clone(),
            &MaskSpec::Causal,
            RingPlan::double_ring(&topo),
        )
        .unwrap();
        barrier.forward(Execution::Barrier).unwrap();
        let b_log = barrier.burst_backward(&d_o, Execution::Barrier).unwrap();
        let want = barrier.gather_grads();
        let grad = run(Pass::BurstBackward, OverlapKind::Gradient);
        assert!(grad.grads.as_ref().unwrap().max_abs_diff(&want).unwrap() <= 1e-12);
        assert_eq!(grad.log, b_log);
        assert_eq!(grad.log.devices, grad_log_from_timeline(&grad.timeline, 4));
    }

    fn grad_log_from_timeline(t: &Timeline, g: usize) -> Vec<crate::fabric::DeviceTraffic> {
        let mut log = MessageLog::new(g, g);
        for e in &t.events {
            use crate::fabric::{EventKind, Link};
            let link = match e.kind {
                EventKind::SendIntra => Link::Intra,
                EventKind::SendInter => Link::Inter,
                _ => continue,
            };
            log.record(e.step, e.device, e.peer.unwrap(), link, e.elements);
        }
        log.devices
    }

    #[test]
    fn thread_count_does_not_change_values() {
        let (q, k, v) = qkv(32, 8, 61);
        let d_o = seeded_random_matrix(32, 8, 62);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    let (_, _, mut e) = distributed_forward(
                        &q,
                        &k,
                        &v,
                        &layout(LayoutKind::Zigzag, 32, 8),
                        &MaskSpec::Causal,
                    )
                    .unwrap();
                    burst_backward(&mut e, &d_o).unwrap().0
                })
        };
        assert_eq!(run(1), run(4));
    }
}
