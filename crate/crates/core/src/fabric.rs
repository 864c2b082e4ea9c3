//! Simulated communication fabric: flat rings and topology-aware double rings
//! over an explicit cluster shape, exact element accounting, and an event
//! timeline for the three overlap schedules.
//!
//! A pass over `G` devices has `G` steps. At every step each device holds one
//! shard payload, computes on it, and hands it to the next holder; the last
//! hop returns the payload to its owner. With `G = 1` nothing is sent.
//!
//! On a double ring, device `(node n, rank r)` holds shard `(n - o, r - j)`
//! at outer round `o`, intra step `j`. Each round therefore costs
//! `N_intra - 1` intra-node hops plus one inter-node hop, `G` hops in total.
//!
//! Timing model: a transfer of `P` elements occupies the sender's lane for
//! `lat + P / bw`. Each device has one compute lane, one intra lane and one
//! inter lane; lanes are independent and contention-free.

use serde::Serialize;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Topology {
    pub num_nodes: usize,
    pub gpus_per_node: usize,
    /// Seconds.
    pub lat_intra: f64,
    pub lat_inter: f64,
    /// Elements per second.
    pub bw_intra: f64,
    pub bw_inter: f64,
}

impl Topology {
    pub fn new(
        num_nodes: usize,
        gpus_per_node: usize,
        lat_intra: f64,
        lat_inter: f64,
        bw_intra: f64,
        bw_inter: f64,
    ) -> Result<Self> {
        let t = Self {
            num_nodes,
            gpus_per_node,
            lat_intra,
            lat_inter,
            bw_intra,
            bw_inter,
        };
        t.validate()?;
        Ok(t)
    }

    /// One node with identical intra and inter links.
    pub fn single_node(gpus: usize, lat: f64, bw: f64) -> Self {
        Self {
            num_nodes: 1,
            gpus_per_node: gpus,
            lat_intra: lat,
            lat_inter: lat,
            bw_intra: bw,
            bw_inter: bw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(invalid("num_nodes", "must be positive"));
        }
        if self.gpus_per_node == 0 {
            return Err(invalid("gpus_per_node", "must be positive"));
        }
        for (field, v) in [
            ("lat_intra", self.lat_intra),
            ("lat_inter", self.lat_inter),
            ("bw_intra", self.bw_intra),
            ("bw_inter", self.bw_inter),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(
                    field,
                    format!("must be positive and finite, got {v}"),
                ));
            }
        }
        Ok(())
    }

    pub fn devices(&self) -> usize {
        self.num_nodes * self.gpus_per_node
    }

    pub fn node_of(&self, device: usize) -> usize {
        device / self.gpus_per_node
    }

    pub fn rank_of(&self, device: usize) -> usize {
        device % self.gpus_per_node
    }

    /// Device index for `(node, rank)`, both taken modulo their extents.
    pub fn device(&self, node: isize, rank: isize) -> usize {
        let n = node.rem_euclid(self.num_nodes as isize) as usize;
        let r = rank.rem_euclid(self.gpus_per_node as isize) as usize;
        n * self.gpus_per_node + r
    }

    pub fn link_between(&self, a: usize, b: usize) -> Link {
        if self.node_of(a) == self.node_of(b) {
            Link::Intra
        } else {
            Link::Inter
        }
    }

    pub fn t_intra(&self, payload: f64) -> f64 {
        self.lat_intra + payload / self.bw_intra
    }

    pub fn t_inter(&self, payload: f64) -> f64 {
        self.lat_inter + payload / self.bw_inter
    }

    pub fn transfer_time(&self, link: Link, payload: f64) -> f64 {
        match link {
            Link::Intra => self.t_intra(payload),
            Link::Inter => self.t_inter(payload),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Intra,
    Inter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DoubleRing {
    /// Devices in global ring order, node by node.
    pub global_order: Vec<usize>,
    /// One intra-node ring per node.
    pub sub_rings: Vec<Vec<usize>>,
    /// Rank-0 device of every node; each rank owns an equivalent rail.
    pub representatives: Vec<usize>,
    pub intra_steps_per_round: usize,
    pub outer_rounds: usize,
}

impl DoubleRing {
    /// Number of inter-node hops per pass (zero on a single node).
    pub fn inter_steps(&self) -> usize {
        if self.outer_rounds > 1 {
            self.outer_rounds
        } else {
            0
        }
    }
}

pub fn build_double_ring(topo: &Topology) -> DoubleRing {
    let sub_rings: Vec<Vec<usize>> = (0..topo.num_nodes)
        .map(|n| {
            (0..topo.gpus_per_node)
                .map(|r| n * topo.gpus_per_node + r)
                .collect()
        })
        .collect();
    DoubleRing {
        global_order: (0..topo.devices()).collect(),
        representatives: sub_rings.iter().map(|r| r[0]).collect(),
        sub_rings,
        intra_steps_per_round: topo.gpus_per_node,
        outer_rounds: topo.num_nodes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Hop {
    pub to: usize,
    pub link: Link,
}

/// Which shard every device holds at every step, and where it goes next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingPlan {
    devices: usize,
    /// Steps per outer round (`N_intra` for double rings, `G` for flat ones).
    round_len: usize,
    source: Vec<Vec<usize>>,
    hops: Vec<Vec<Option<Hop>>>,
}

impl RingPlan {
    /// Flat ring on a single node: device `i` holds shard `i - s` at step `s`.
    pub fn flat(g: usize) -> Self {
        Self::from_holder(g, g, |i, s| (i + g - s % g) % g, |_, _| Link::Intra)
    }

    pub fn double_ring(topo: &Topology) -> Self {
        let ni = topo.gpus_per_node;
        let t = *topo;
        Self::from_holder(
            topo.devices(),
            ni,
            move |i, s| {
                let (o, j) = (s / ni, s % ni);
                t.device(
                    t.node_of(i) as isize - o as isize,
                    t.rank_of(i) as isize - j as isize,
                )
            },
            move |a, b| t.link_between(a, b),
        )
    }

    /// Flat single-node ring where device `i` holds shard `(i + offsets[s]) % g`
    /// at step `s`. `offsets` must be a permutation of `0..g`.
    pub fn from_offsets(offsets: &[usize]) -> Result<Self> {
        let g = offsets.len();
        let mut seen = vec![false; g];
        for &o in offsets {
            if o >= g || std::mem::replace(&mut seen[o], true) {
                return Err(invalid("offsets", "must be a permutation of 0..G"));
            }
        }
        let offsets = offsets.to_vec();
        Ok(Self::from_holder(
            g,
            g,
            move |i, s| (i + offsets[s]) % g,
            |_, _| Link::Intra,
        ))
    }

    fn from_holder(
        g: usize,
        round_len: usize,
        holder: impl Fn(usize, usize) -> usize,
        link: impl Fn(usize, usize) -> Link,
    ) -> Self {
        let source: Vec<Vec<usize>> = (0..g)
            .map(|s| (0..g).map(|i| holder(i, s)).collect())
            .collect();
        let mut hops = vec![vec![None; g]; g];
        for s in 0..g {
            let mut next_holder = vec![0; g];
            if s + 1 < g {
                for (i, &shard) in source[s + 1].iter().enumerate() {
                    next_holder[shard] = i;
                }
            } else {
                // Return hop: every payload goes home.
                for (shard, slot) in next_holder.iter_mut().enumerate() {
                    *slot = shard;
                }
            }
            for i in 0..g {
                let to = next_holder[source[s][i]];
                if to != i {
                    hops[s][i] = Some(Hop {
                        to,
                        link: link(i, to),
                    });
                }
            }
        }
        Self {
            devices: g,
            round_len,
            source,
            hops,
        }
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn steps(&self) -> usize {
        self.devices
    }

    pub fn round_len(&self) -> usize {
        self.round_len
    }

    /// Shard held by device `i` at step `s`.
    pub fn source(&self, s: usize, i: usize) -> usize {
        self.source[s][i]
    }

    /// Hop taken after step `s` by the payload device `i` holds.
    pub fn hop(&self, s: usize, i: usize) -> Option<Hop> {
        self.hops[s][i]
    }

    /// Every step is a permutation, every device sees every shard once, and
    /// every payload returns home after the last hop.
    pub fn check_coverage(&self) -> Result<()> {
        let g = self.devices;
        let mut seen = vec![vec![false; g]; g];
        for s in 0..g {
            let mut held = vec![false; g];
            for i in 0..g {
                let shard = self.source[s][i];
                if std::mem::replace(&mut held[shard], true) {
                    return Err(invalid(
                        "ring plan",
                        format!("shard {shard} held twice at step {s}"),
                    ));
                }
                if std::mem::replace(&mut seen[i][shard], true) {
                    return Err(invalid(
                        "ring plan",
                        format!("device {i} sees shard {shard} twice"),
                    ));
                }
            }
        }
        // Move payloads along the hops and check where they land.
        let mut at: Vec<usize> = (0..g).map(|i| self.source[0][i]).collect();
        for s in 0..g {
            let mut next = vec![usize::MAX; g];
            for i in 0..g {
                let to = self.hops[s][i].map_or(i, |h| h.to);
                next[to] = at[i];
            }
            at = next;
            let want: Vec<usize> = if s + 1 < g {
                self.source[s + 1].clone()
            } else {
                (0..g).collect()
            };
            if at != want {
                return Err(invalid(
                    "ring plan",
                    format!("hops after step {s} disagree with holders"),
                ));
            }
        }
        Ok(())
    }

    /// Hops per device per pass, split by link (device 0; plans are symmetric).
    pub fn hop_counts(&self) -> (usize, usize) {
        let mut intra = 0;
        let mut inter = 0;
        for s in 0..self.steps() {
            match self.hops[s][0].map(|h| h.link) {
                Some(Link::Intra) => intra += 1,
                Some(Link::Inter) => inter += 1,
                None => {}
            }
        }
        (intra, inter)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DeviceTraffic {
    pub sent_intra: u64,
    pub sent_inter: u64,
    pub received_intra: u64,
    pub received_inter: u64,
}

impl DeviceTraffic {
    pub fn sent(&self) -> u64 {
        self.sent_intra + self.sent_inter
    }

    pub fn received(&self) -> u64 {
        self.received_intra + self.received_inter
    }
}

/// Exact element counts per device and per step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MessageLog {
    pub devices: Vec<DeviceTraffic>,
    /// `per_step_sent[step][device]`.
    pub per_step_sent: Vec<Vec<u64>>,
}

impl MessageLog {
    pub fn new(devices: usize, steps: usize) -> Self {
        Self {
            devices: vec![DeviceTraffic::default(); devices],
            per_step_sent: vec![vec![0; devices]; steps],
        }
    }

    pub fn record(&mut self, step: usize, from: usize, to: usize, link: Link, elements: u64) {
        match link {
            Link::Intra => {
                self.devices[from].sent_intra += elements;
                self.devices[to].received_intra += elements;
            }
            Link::Inter => {
                self.devices[from].sent_inter += elements;
                self.devices[to].received_inter += elements;
            }
        }
        self.per_step_sent[step][from] += elements;
    }

    /// Records every hop of `plan` with a uniform per-step payload.
    pub fn from_plan(plan: &RingPlan, elements_per_step: u64) -> Self {
        let mut log = Self::new(plan.devices(), plan.steps());
        for s in 0..plan.steps() {
            for i in 0..plan.devices() {
                if let Some(h) = plan.hop(s, i) {
                    log.record(s, i, h.to, h.link, elements_per_step);
                }
            }
        }
        log
    }

    pub fn sent_by(&self, device: usize) -> u64 {
        self.devices[device].sent()
    }

    /// Global sent equals global received on each channel.
    pub fn is_conserved(&self) -> bool {
        let sum = |f: fn(&DeviceTraffic) -> u64| self.devices.iter().map(f).sum::<u64>();
        sum(|d| d.sent_intra) == sum(|d| d.received_intra)
            && sum(|d| d.sent_inter) == sum(|d| d.received_inter)
    }

    /// Every device sent and received the same amount.
    pub fn is_symmetric(&self) -> bool {
        self.devices
            .iter()
            .all(|d| d.sent() == self.devices[0].sent() && d.received() == d.sent())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapKind {
    /// Barrier-synchronous: compute, then send, then wait for the next payload.
    None,
    /// Read-only payloads are forwarded while the current one is computed on.
    Activation,
    /// Payloads carry accumulated gradients, so a payload leaves only after its
    /// compute finishes (one warm-up compute precedes the first send).
    Gradient,
}

impl OverlapKind {
    pub fn name(&self) -> &'static str {
        match self {
            OverlapKind::None => "none",
            OverlapKind::Activation => "activation",
            OverlapKind::Gradient => "gradient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferRole {
    IntraComm,
    InterComm,
    Compute,
}

/// Three per-device buffers; the roles are always a permutation of
/// `{IntraComm, InterComm, Compute}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BufferSet {
    roles: [BufferRole; 3],
}

impl Default for BufferSet {
    fn default() -> Self {
        Self {
            roles: [
                BufferRole::IntraComm,
                BufferRole::InterComm,
                BufferRole::Compute,
            ],
        }
    }
}

impl BufferSet {
    pub fn buffer_with(&self, role: BufferRole) -> usize {
        self.roles
            .iter()
            .position(|&r| r == role)
            .expect("every role is assigned")
    }

    pub fn role_of(&self, buffer: usize) -> BufferRole {
        self.roles[buffer]
    }

    /// Exchanges the buffers currently playing roles `a` and `b`.
    pub fn swap(&mut self, a: BufferRole, b: BufferRole) {
        let (x, y) = (self.buffer_with(a), self.buffer_with(b));
        self.roles.swap(x, y);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapSchedule {
    pub kind: OverlapKind,
    pub buffers: BufferSet,
}

impl OverlapSchedule {
    pub fn new(kind: OverlapKind) -> Self {
        Self {
            kind,
            buffers: BufferSet::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Compute,
    SendIntra,
    SendInter,
    Recv,
    BufferSwap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub device: usize,
    pub kind: EventKind,
    pub start: f64,
    pub end: f64,
    pub round: usize,
    pub step: usize,
    /// Receiver of a send, or sender of a recv.
    pub peer: Option<usize>,
    /// For a recv, the index of its send.
    pub matches: Option<usize>,
    pub elements: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timeline {
    pub events: Vec<Event>,
    /// `(before, after)` event indices: `after` may not start before `before`
    /// ends.
    pub edges: Vec<(usize, usize)>,
    pub makespan: f64,
}

impl Timeline {
    /// Structural checks: dependency edges respected, recvs after their sends,
    /// and no overlap on any device's compute, intra or inter lane.
    pub fn check_causality(&self) -> Result<()> {
        let tol = 1e-12 * self.makespan.max(1.0);
        for &(a, b) in &self.edges {
            if self.events[b].start + tol < self.events[a].end {
                return Err(invalid(
                    "timeline",
                    format!("event {b} starts before event {a} ends"),
                ));
            }
        }
        for e in &self.events {
            if let Some(m) = e.matches {
                if e.kind != EventKind::Recv || e.end + tol < self.events[m].end {
                    return Err(invalid("timeline", "recv completes before its send"));
                }
            }
        }
        for kind in [
            EventKind::Compute,
            EventKind::SendIntra,
            EventKind::SendInter,
        ] {
            let devices = self.events.iter().map(|e| e.device + 1).max().unwrap_or(0);
            for d in 0..devices {
                let mut spans: Vec<(f64, f64)> = self
                    .events
                    .iter()
                    .filter(|e| e.device == d && e.kind == kind)
                    .map(|e| (e.start, e.end))
                    .collect();
                spans.sort_by(|a, b| a.0.total_cmp(&b.0));
                if spans.windows(2).any(|w| w[1].0 + tol < w[0].1) {
                    return Err(invalid(
                        "timeline",
                        format!("{kind:?} lane overlaps on device {d}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Events sorted by `(start, device, kind, step)`.
    pub fn sorted(&self) -> Vec<&Event> {
        let mut v: Vec<&Event> = self.events.iter().collect();
        v.sort_by(|a, b| {
            a.start
                .total_cmp(&b.start)
                .then(a.device.cmp(&b.device))
                .then(a.kind.cmp(&b.kind))
                .then(a.step.cmp(&b.step))
        });
        v
    }

    /// `(step, device)` of every compute event in time order.
    pub fn compute_order(&self) -> Vec<(usize, usize)> {
        self.sorted()
            .into_iter()
            .filter(|e| e.kind == EventKind::Compute)
            .map(|e| (e.step, e.device))
            .collect()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }
}

#[derive(Clone, Copy)]
enum Lane {
    Compute = 0,
    Intra = 1,
    Inter = 2,
}

struct Scheduler {
    events: Vec<Event>,
    edges: Vec<(usize, usize)>,
    lane_free: Vec<[f64; 3]>,
    lane_last: Vec<[Option<usize>; 3]>,
}

impl Scheduler {
    fn new(devices: usize) -> Self {
        Self {
            events: Vec::new(),
            edges: Vec::new(),
            lane_free: vec![[0.0; 3]; devices],
            lane_last: vec![[None; 3]; devices],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn add(
        &mut self,
        device: usize,
        lane: Option<Lane>,
        kind: EventKind,
        duration: f64,
        deps: &[usize],
        (round, step): (usize, usize),
        peer: Option<usize>,
        elements: u64,
    ) -> usize {
        let mut start = deps.iter().map(|&d| self.events[d].end).fold(0.0, f64::max);
        let idx = self.events.len();
        if let Some(l) = lane {
            start = start.max(self.lane_free[device][l as usize]);
            if let Some(prev) = self.lane_last[device][l as usize] {
                self.edges.push((prev, idx));
            }
            self.lane_free[device][l as usize] = start + duration;
            self.lane_last[device][l as usize] = Some(idx);
        }
        self.edges.extend(deps.iter().map(|&d| (d, idx)));
        self.events.push(Event {
            device,
            kind,
            start,
            end: start + duration,
            round,
            step,
            peer,
            matches: None,
            elements,
        });
        idx
    }

    /// A send on `link` plus the matching recv at `to`; returns the recv index.
    fn transfer(
        &mut self,
        from: usize,
        to: usize,
        link: Link,
        topo: &Topology,
        elements: u64,
        deps: &[usize],
        at: (usize, usize),
        log: &mut MessageLog,
    ) -> usize {
        let (lane, kind) = match link {
            Link::Intra => (Lane::Intra, EventKind::SendIntra),
            Link::Inter => (Lane::Inter, EventKind::SendInter),
        };
        let dt = topo.transfer_time(link, elements as f64);
        let send = self.add(from, Some(lane), kind, dt, deps, at, Some(to), elements);
        let t = self.events[send].end;
        let recv = self.add(
            to,
            None,
            EventKind::Recv,
            0.0,
            &[send],
            at,
            Some(from),
            elements,
        );
        self.events[recv].start = t;
        self.events[recv].end = t;
        self.events[recv].matches = Some(send);
        log.record(at.1, from, to, link, elements);
        recv
    }

    fn swap(&mut self, device: usize, deps: &[usize], at: (usize, usize)) -> usize {
        self.add(device, None, EventKind::BufferSwap, 0.0, deps, at, None, 0)
    }

    fn finish(self) -> Timeline {
        let makespan = self.events.iter().map(|e| e.end).fold(0.0, f64::max);
        Timeline {
            events: self.events,
            edges: self.edges,
            makespan,
        }
    }
}

/// Simulates one pass of `G` ring steps on the double ring of `topo`, with a
/// uniform payload and compute time per step.
pub fn simulate_ring(
    payload_elements_per_step: u64,
    topo: &Topology,
    schedule: &mut OverlapSchedule,
    compute_time_per_step: f64,
) -> Result<(MessageLog, Timeline)> {
    topo.validate()?;
    if payload_elements_per_step == 0 {
        return Err(invalid("payload", "must be positive"));
    }
    if !(compute_time_per_step >= 0.0 && compute_time_per_step.is_finite()) {
        return Err(invalid("compute_time", "must be non-negative and finite"));
    }
    let plan = RingPlan::double_ring(topo);
    let g = plan.devices();
    let mut log = MessageLog::new(g, g);
    let mut sched = Scheduler::new(g);
    let p = payload_elements_per_step;
    let c = compute_time_per_step;
    let ni = topo.gpus_per_node;
    let nn = topo.num_nodes;
    // recv_at[s][i]: recv event delivering device i's payload for step s + 1.
    let mut recv_at: Vec<Vec<Option<usize>>> = vec![vec![None; g]; g];
    let mut compute_at: Vec<Vec<usize>> = vec![vec![0; g]; g];

    match schedule.kind {
        OverlapKind::None => {
            let mut last_send: Vec<Option<usize>> = vec![None; g];
            for s in 0..g {
                let at = (s / ni, s);
                for i in 0..g {
                    let mut deps = Vec::new();
                    if s > 0 {
                        deps.extend(recv_at[s - 1][i]);
                        deps.extend(last_send[i]);
                    }
                    let comp = sched.add(
                        i,
                        Some(Lane::Compute),
                        EventKind::Compute,
                        c,
                        &deps,
                        at,
                        None,
                        0,
                    );
                    compute_at[s][i] = comp;
                    if let Some(h) = plan.hop(s, i) {
                        let r = sched.transfer(i, h.to, h.link, topo, p, &[comp], at, &mut log);
                        last_send[i] = Some(sched.events[r].matches.unwrap());
                        recv_at[s][h.to] = Some(r);
                    }
                }
            }
        }
        OverlapKind::Activation => {
            // Round-origin copies travel on straight inter rails at round start.
            let mut inter_recv: Vec<Vec<Option<usize>>> = vec![vec![None; g]; nn];
            let mut step_start: Vec<Option<usize>> = vec![None; g];
            for s in 0..g {
                let (o, j) = (s / ni, s % ni);
                let at = (o, s);
                for i in 0..g {
                    if j == 0 {
                        let start = if o > 0 {
                            let deps: Vec<usize> = inter_recv[o - 1][i]
                                .into_iter()
                                .chain([compute_at[s - 1][i]])
                                .collect();
                            if i == 0 {
                                schedule
                                    .buffers
                                    .swap(BufferRole::InterComm, BufferRole::Compute);
                            }
                            Some(sched.swap(i, &deps, at))
                        } else {
                            None
                        };
                        step_start[i] = start;
                        if nn > 1 {
                            let to =
                                topo.device(topo.node_of(i) as isize + 1, topo.rank_of(i) as isize);
                            let deps: Vec<usize> = start.into_iter().collect();
                            let r =
                                sched.transfer(i, to, Link::Inter, topo, p, &deps, at, &mut log);
                            inter_recv[o][to] = Some(r);
                        }
                    } else {
                        let deps = [
                            recv_at[s - 1][i].expect("intra payload"),
                            compute_at[s - 1][i],
                        ];
                        if i == 0 {
                            schedule
                                .buffers
                                .swap(BufferRole::IntraComm, BufferRole::Compute);
                        }
                        step_start[i] = Some(sched.swap(i, &deps, at));
                    }
                    let deps: Vec<usize> = step_start[i].into_iter().collect();
                    if let Some(h) = plan.hop(s, i).filter(|h| h.link == Link::Intra) {
                        let r = sched.transfer(i, h.to, h.link, topo, p, &deps, at, &mut log);
                        recv_at[s][h.to] = Some(r);
                    }
                    compute_at[s][i] = sched.add(
                        i,
                        Some(Lane::Compute),
                        EventKind::Compute,
                        c,
                        &deps,
                        at,
                        None,
                        0,
                    );
                }
            }
        }
        OverlapKind::Gradient => {
            let mut intra_recvs_in_round: Vec<Vec<usize>> = vec![Vec::new(); nn];
            let mut closing_recv: Vec<Option<usize>> = vec![None; g];
            for s in 0..g {
                let (o, j) = (s / ni, s % ni);
                let at = (o, s);
                if j == 0 {
                    intra_recvs_in_round.iter_mut().for_each(Vec::clear);
                }
                for i in 0..g {
                    compute_at[s][i] = sched.add(
                        i,
                        Some(Lane::Compute),
                        EventKind::Compute,
                        c,
                        &[],
                        at,
                        None,
                        0,
                    );
                }
                let mut new_closing = Vec::new();
                for i in 0..g {
                    let Some(h) = plan.hop(s, i) else { continue };
                    let mut deps = vec![compute_at[s][i]];
                    if j > 0 {
                        deps.extend(recv_at[s - 1][i]);
                    }
                    let closes_round = j + 1 == ni;
                    if closes_round {
                        // Wait for the whole node's intra exchange and for the
                        // partial that arrived from the previous round.
                        deps.extend(intra_recvs_in_round[topo.node_of(i)].iter().copied());
                        deps.extend(closing_recv[i]);
                    }
                    if i == 0 {
                        schedule
                            .buffers
                            .swap(BufferRole::IntraComm, BufferRole::Compute);
                    }
                    let swap = sched.swap(i, &deps, at);
                    let r = sched.transfer(i, h.to, h.link, topo, p, &[swap], at, &mut log);
                    recv_at[s][h.to] = Some(r);
                    if closes_round {
                        new_closing.push((h.to, r));
                    } else {
                        intra_recvs_in_round[topo.node_of(h.to)].push(r);
                    }
                }
                for (to, r) in new_closing {
                    closing_recv[to] = Some(r);
                }
            }
        }
    }
    Ok((log, sched.finish()))
}

/// Per-pass serialized time on the double ring: every hop plus every compute,
/// nothing overlapped.
pub fn serial_time(topo: &Topology, payload: f64, compute_time_per_step: f64) -> f64 {
    let (intra, inter) = RingPlan::double_ring(topo).hop_counts();
    intra as f64 * topo.t_intra(payload)
        + inter as f64 * topo.t_inter(payload)
        + topo.devices() as f64 * compute_time_per_step
}

/// No schedule can beat the busiest single lane.
pub fn channel_lower_bound(topo: &Topology, payload: f64, compute_time_per_step: f64) -> f64 {
    let (intra, inter) = RingPlan::double_ring(topo).hop_counts();
    (topo.devices() as f64 * compute_time_per_step)
        .max(intra as f64 * topo.t_intra(payload))
        .max(inter as f64 * topo.t_inter(payload))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ring,
    DoubleRing,
    Burst,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Ring, Strategy::DoubleRing, Strategy::Burst];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Ring => "ring",
            Strategy::DoubleRing => "double_ring",
            Strategy::Burst => "burst",
        }
    }
}

/// Closed-form forward + backward communication time. `payload` is the
/// per-step transfer size `P`; the ring length is the total device count.
pub fn analytic_comm_time(strategy: Strategy, topo: &Topology, payload: f64) -> f64 {
    let g = topo.devices() as f64;
    let n_inter = topo.num_nodes as f64;
    let t_intra = topo.t_intra(payload);
    let t_inter = topo.t_inter(payload);
    analytic_comm_time_from_steps(strategy, g, n_inter, t_intra, t_inter)
}

/// Same formulas with the per-hop times given directly.
pub fn analytic_comm_time_from_steps(
    strategy: Strategy,
    g: f64,
    n_inter: f64,
    t_intra: f64,
    t_inter: f64,
) -> f64 {
    let intra = (g - n_inter) * t_intra;
    let inter = n_inter * t_inter;
    match strategy {
        Strategy::Ring => 6.0 * (g * t_intra).max(g * t_inter),
        Strategy::DoubleRing => 4.0 * intra.max(inter) + 2.0 * (intra + inter),
        Strategy::Burst => 5.0 * intra.max(inter),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Forward,
    RingBackward,
    BurstBackward,
}

impl Pass {
    pub fn name(&self) -> &'static str {
        match self {
            Pass::Forward => "forward",
            Pass::RingBackward => "ring_backward",
            Pass::BurstBackward => "burst_backward",
        }
    }

    /// Elements sent per device per ring step for a shard of `rows × d`.
    pub fn step_payload(&self, rows: u64, d: u64) -> u64 {
        match self {
            Pass::Forward => 2 * rows * d,
            Pass::RingBackward => 4 * rows * d,
            Pass::BurstBackward => 3 * rows * d + 2 * rows,
        }
    }
}

/// Elements each device sends over a whole pass: `G` steps of the per-step
/// payload.
pub fn account_attention_comm(pass: Pass, n: usize, d: usize, g: usize) -> Result<u64> {
    if g == 0 || n % g != 0 {
        return Err(Error::Divisibility {
            what: "sequence length by device count",
            value: n,
            divisor: g,
        });
    }
    Ok(g as u64 * pass.step_payload((n / g) as u64, d as u64))
}
