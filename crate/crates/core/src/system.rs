//! Executes a compiled program on the modeled machine: CU fetch, decode and
//! dispatch, the EPR generator, and each core's local control unit. Produces
//! a trace of every timed interval, tagged with its category.

use std::collections::VecDeque;
use std::fmt::{self, Write as _};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{CompileError, Instruction, Program};
use crate::engine::{sample_exponential, EngineError, EventQueue, RngStreams, SimTime, Stream};
use crate::isa::{bundle_bits, BitWidths, Packet, PacketKind};
use crate::mac::{Channel, CirculatingToken, CtService, Grant, IdleToken, MacError, TokenChain, TokenSegment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub epr_gen_mean: f64,
    pub epr_distribution: f64,
    pub preprocessing: f64,
    pub postprocessing: f64,
    /// Bits per ns (numerically equal to Gbps).
    pub winoc_bitrate: f64,
    pub token_pass: f64,
    /// Bits per ns.
    pub ram_bandwidth: f64,
    pub decode_per_instr: f64,
    pub gate_1q: f64,
    pub gate_2q: f64,
    pub qsf: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            epr_gen_mean: 1000.0,
            epr_distribution: 0.01,
            preprocessing: 390.0,
            postprocessing: 30.0,
            winoc_bitrate: 12.0,
            token_pass: 1.0,
            ram_bandwidth: 128.0,
            decode_per_instr: 10.0,
            gate_1q: 25.0,
            gate_2q: 100.0,
            qsf: 1.0,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("epr_gen_mean", self.epr_gen_mean),
            ("preprocessing", self.preprocessing),
            ("postprocessing", self.postprocessing),
            ("winoc_bitrate", self.winoc_bitrate),
            ("token_pass", self.token_pass),
            ("ram_bandwidth", self.ram_bandwidth),
            ("decode_per_instr", self.decode_per_instr),
            ("gate_1q", self.gate_1q),
            ("gate_2q", self.gate_2q),
            ("qsf", self.qsf),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.epr_distribution.is_finite() && self.epr_distribution >= 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "epr_distribution must be >= 0, got {}",
                self.epr_distribution
            )));
        }
        Ok(())
    }

    pub fn with_qsf(mut self, qsf: f64) -> Self {
        self.qsf = qsf;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EprModel {
    #[default]
    Exponential,
    /// Every generation takes exactly the mean.
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EprConfig {
    pub model: EprModel,
    /// Concurrent generations; `None` means unbounded.
    pub parallel_capacity: Option<usize>,
}

impl Default for EprConfig {
    fn default() -> Self {
        EprConfig {
            model: EprModel::Exponential,
            parallel_capacity: Some(1),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacConfig {
    pub ct_service: CtService,
    pub ct_idle: IdleToken,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub timing: TimingConfig,
    pub epr: EprConfig,
    pub mac: MacConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MacMode {
    Ct,
    Id,
}

impl MacMode {
    pub const BOTH: [MacMode; 2] = [MacMode::Ct, MacMode::Id];

    pub fn name(self) -> &'static str {
        match self {
            MacMode::Ct => "CT",
            MacMode::Id => "ID",
        }
    }
}

impl fmt::Display for MacMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    QuantumComm,
    QuantumComp,
    ClassicalComm,
    ClassicalComp,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::QuantumComm => "q_comm",
            Category::QuantumComp => "q_comp",
            Category::ClassicalComm => "c_comm",
            Category::ClassicalComp => "c_comp",
        }
    }

    pub fn is_quantum(self) -> bool {
        matches!(self, Category::QuantumComm | Category::QuantumComp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Cu,
    Qc(usize),
    Epr,
    /// The token ring as a whole (idle circulation).
    Ring,
}

impl Node {
    fn from_ring(idx: usize) -> Node {
        if idx == 0 {
            Node::Cu
        } else {
            Node::Qc(idx - 1)
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Cu => f.write_str("CU"),
            Node::Qc(i) => write!(f, "QC{i}"),
            Node::Epr => f.write_str("EPR"),
            Node::Ring => f.write_str("RING"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activity {
    Fetch,
    Decode,
    Transmit(PacketKind),
    TokenPass,
    Gate1q,
    Gate2q,
    EprGeneration,
    EprDistribution,
    Preprocess,
    Postprocess,
}

impl Activity {
    pub fn category(self) -> Category {
        match self {
            Activity::Fetch | Activity::Decode => Category::ClassicalComp,
            Activity::Transmit(_) | Activity::TokenPass => Category::ClassicalComm,
            Activity::Gate1q | Activity::Gate2q | Activity::Preprocess | Activity::Postprocess => Category::QuantumComp,
            Activity::EprGeneration | Activity::EprDistribution => Category::QuantumComm,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activity::Fetch => "fetch",
            Activity::Decode => "decode",
            Activity::Transmit(k) => match k {
                PacketKind::Lip => "tx_lip",
                PacketKind::Tpsip => "tx_tpsip",
                PacketKind::Tpdip => "tx_tpdip",
                PacketKind::Cbp => "tx_cbp",
                PacketKind::Tp => "tx_tp",
                PacketKind::Eoc => "tx_eoc",
            },
            Activity::TokenPass => "token_pass",
            Activity::Gate1q => "gate_1q",
            Activity::Gate2q => "gate_2q",
            Activity::EprGeneration => "epr_gen",
            Activity::EprDistribution => "epr_dist",
            Activity::Preprocess => "preprocess",
            Activity::Postprocess => "postprocess",
        }
    }
}

/// One timed interval of the trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub node: Node,
    pub activity: Activity,
    pub bundle: usize,
    /// Instruction index within the bundle. Teleport phases carry the index
    /// of their TPS; token packets carry their order.
    pub tag: Option<usize>,
    // kept separately: end - start loses low bits at large times
    dur: f64,
}

impl Interval {
    pub fn new(start: f64, dur: f64, node: Node, activity: Activity, bundle: usize, tag: Option<usize>) -> Self {
        Interval {
            start,
            end: start + dur,
            node,
            activity,
            bundle,
            tag,
            dur,
        }
    }

    pub fn duration(&self) -> f64 {
        self.dur
    }

    pub fn category(&self) -> Category {
        self.activity.category()
    }

    pub fn is_transmission(&self) -> bool {
        matches!(self.activity, Activity::Transmit(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub mode: MacMode,
    pub n_qc: usize,
    pub qsf: f64,
    pub seed: u64,
    pub intervals: Vec<Interval>,
    pub makespan: f64,
    /// Arrival time of the last EOC of each bundle.
    pub bundle_ends: Vec<f64>,
    /// Token orders carried by TP packets, per bundle (ID mode only).
    pub token_orders: Vec<Vec<usize>>,
}

impl Trace {
    pub fn transmissions(&self) -> impl Iterator<Item = &Interval> {
        self.intervals.iter().filter(|iv| iv.is_transmission())
    }

    /// CSV with columns `start_ns,end_ns,node,activity,category,bundle_idx`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("start_ns,end_ns,node,activity,category,bundle_idx\n");
        for iv in &self.intervals {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                iv.start,
                iv.end,
                iv.node,
                iv.activity.name(),
                iv.category().name(),
                iv.bundle
            );
        }
        out
    }

    /// Channel audit log: one row per transmission or token-circulation
    /// segment, sorted by start time.
    pub fn channel_csv(&self) -> String {
        let mut rows: Vec<&Interval> = self
            .intervals
            .iter()
            .filter(|iv| iv.is_transmission() || iv.activity == Activity::TokenPass)
            .collect();
        rows.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
        let mut out = String::from("start_ns,end_ns,node,packet,category\n");
        for iv in rows {
            let packet = match iv.activity {
                Activity::Transmit(k) => k.name(),
                _ => "token_pass",
            };
            let _ = writeln!(out, "{},{},{},{},{}", iv.start, iv.end, iv.node, packet, iv.category().name());
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed program: {0}")]
    Program(#[from] CompileError),
    #[error("bundle {bundle}: ID-MAC needs token orders on every TPS")]
    MissingTokenOrder { bundle: usize },
    #[error(transparent)]
    Mac(#[from] MacError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("deadlock at {time} ns in bundle {bundle}: {blocked}")]
    Deadlock { time: f64, bundle: usize, blocked: String },
}

/// Ordered EOC transmission plan for one bundle: `(core, token order)`.
/// Under ID-MAC the EOC slots extend the bundle's token chain past its TPS
/// orders in ascending core order; under CT-MAC the order is irrelevant and
/// `None` is returned for each core.
pub fn eoc_schedule(bundle: &crate::compiler::Bundle, mode: MacMode) -> Vec<(usize, Option<usize>)> {
    let k = bundle.tps_count();
    bundle
        .participating_cores()
        .into_iter()
        .enumerate()
        .map(|(pos, core)| {
            (
                core,
                match mode {
                    MacMode::Ct => None,
                    MacMode::Id => Some(k + pos),
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Purpose {
    Dispatch(usize),
    Cbp(usize),
    Eoc(usize),
    Token(usize),
}

#[derive(Debug, Clone, Copy)]
struct Outgoing {
    packet: Packet,
    purpose: Purpose,
}

#[derive(Debug, Clone, Copy)]
enum Event {
    DecodeDone,
    Delivered(Purpose),
    TokenArrival(Grant),
    TokenRelease { node: usize, served: usize },
    GateDone(usize),
    EprGenerated(usize),
    EprDelivered(usize),
    PreprocessDone(usize),
    PostprocessDone(usize),
}

#[derive(Debug, Clone, Copy)]
struct Durations {
    epr_gen_mean: f64,
    epr_distribution: f64,
    preprocessing: f64,
    postprocessing: f64,
    gate_1q: f64,
    gate_2q: f64,
}

impl Durations {
    fn from(t: &TimingConfig) -> Self {
        Durations {
            epr_gen_mean: t.epr_gen_mean * t.qsf,
            epr_distribution: t.epr_distribution * t.qsf,
            preprocessing: t.preprocessing * t.qsf,
            postprocessing: t.postprocessing * t.qsf,
            gate_1q: t.gate_1q * t.qsf,
            gate_2q: t.gate_2q * t.qsf,
        }
    }
}

/// Per-bundle bookkeeping.
#[derive(Debug, Default)]
struct BundleState {
    remaining: Vec<usize>,
    eoc_expected: usize,
    eoc_received: usize,
    received: Vec<bool>,
    done: Vec<bool>,
    epr_ready: Vec<Option<f64>>,
    cbp_arrived: Vec<bool>,
    post_started: Vec<bool>,
    tpd_of: Vec<Option<usize>>,
    tps_of: Vec<Option<usize>>,
    tps_by_order: Vec<usize>,
    /// Received TPS not yet started, sorted by token order.
    tpsb: Vec<Vec<usize>>,
    tps_active: Vec<bool>,
    eoc_order: Vec<Option<usize>>,
    chain: Option<TokenChain>,
}

struct Sim<'a> {
    program: &'a Program,
    widths: BitWidths,
    timing: TimingConfig,
    dur: Durations,
    epr: EprConfig,
    mode: MacMode,
    seed: u64,
    queue: EventQueue<Event>,
    rng: ChaCha8Rng,
    channel: Channel,
    intervals: Vec<Interval>,
    slot_free: Vec<Vec<f64>>,
    ltm_free: Vec<f64>,
    epr_busy: usize,
    epr_queue: VecDeque<usize>,
    token: Option<CirculatingToken>,
    outbox: Vec<VecDeque<Outgoing>>,
    b: usize,
    st: BundleState,
    bundle_ends: Vec<f64>,
    token_orders: Vec<Vec<usize>>,
}

/// Runs `program` to completion and returns its trace.
pub fn run_program(program: &Program, cfg: &SimConfig, mode: MacMode, seed: u64) -> Result<Trace, SimError> {
    cfg.timing.validate()?;
    if cfg.epr.parallel_capacity == Some(0) {
        return Err(SimError::InvalidConfig("epr.parallel_capacity must be >= 1".into()));
    }
    program.validate()?;
    let n_qc = program.n_qc();
    if mode == MacMode::Id {
        for (b, bundle) in program.bundles.iter().enumerate() {
            if bundle.instructions.iter().any(|i| i.is_tps() && i.token_order().is_none()) {
                return Err(SimError::MissingTokenOrder { bundle: b });
            }
        }
    }
    let token = (mode == MacMode::Ct)
        .then(|| CirculatingToken::new(n_qc + 1, cfg.timing.token_pass, cfg.mac.ct_service, cfg.mac.ct_idle));
    let sim = Sim {
        program,
        widths: program.widths,
        timing: cfg.timing,
        dur: Durations::from(&cfg.timing),
        epr: cfg.epr,
        mode,
        seed,
        queue: EventQueue::new(),
        rng: RngStreams::new(seed).stream(Stream::EprGen),
        channel: Channel::new(cfg.timing.winoc_bitrate),
        intervals: Vec::new(),
        slot_free: vec![Vec::new(); n_qc],
        ltm_free: vec![0.0; n_qc],
        epr_busy: 0,
        epr_queue: VecDeque::new(),
        token,
        outbox: vec![VecDeque::new(); n_qc + 1],
        b: 0,
        st: BundleState::default(),
        bundle_ends: Vec::new(),
        token_orders: Vec::new(),
    };
    sim.run()
}

impl<'a> Sim<'a> {
    fn run(mut self) -> Result<Trace, SimError> {
        self.start_bundle(0.0)?;
        while self.b < self.program.bundles.len() {
            let Some((t, ev)) = self.queue.pop_next() else {
                return Err(self.deadlock());
            };
            self.handle(t.ns(), ev)?;
        }
        let makespan = self.bundle_ends.last().copied().unwrap_or(0.0);
        // leftover events (token releases at the very end) carry no work
        while let Some((t, ev)) = self.queue.pop_next() {
            self.handle(t.ns(), ev)?;
        }
        if let Some(seg) = self.token.as_mut().and_then(|tok| tok.finish(makespan)) {
            let last = self.program.bundles.len().saturating_sub(1);
            self.push_segment(seg, last);
        }
        Ok(Trace {
            mode: self.mode,
            n_qc: self.program.n_qc(),
            qsf: self.timing.qsf,
            seed: self.seed,
            intervals: self.intervals,
            makespan,
            bundle_ends: self.bundle_ends,
            token_orders: self.token_orders,
        })
    }

    fn schedule(&mut self, at: f64, ev: Event) -> Result<(), SimError> {
        let at = SimTime::from_ns(at).max(self.queue.now());
        self.queue.schedule(at, ev)?;
        Ok(())
    }

    fn record(&mut self, start: f64, dur: f64, node: Node, activity: Activity, tag: Option<usize>) -> f64 {
        let iv = Interval::new(start, dur, node, activity, self.b, tag);
        self.intervals.push(iv);
        iv.end
    }

    fn push_segment(&mut self, seg: TokenSegment, bundle: usize) {
        let mut iv = Interval::new(seg.start, seg.end - seg.start, Node::Ring, Activity::TokenPass, bundle, None);
        iv.end = seg.end;
        self.intervals.push(iv);
    }

    fn instr(&self, i: usize) -> &'a Instruction {
        &self.program.bundles[self.b].instructions[i]
    }

    fn start_bundle(&mut self, now: f64) -> Result<(), SimError> {
        let Some(bundle) = self.program.bundles.get(self.b) else {
            return Ok(());
        };
        let n = bundle.instructions.len();
        let n_qc = self.program.n_qc();
        let fetch = bundle_bits(&bundle.instructions, &self.widths) as f64 / self.timing.ram_bandwidth;
        let decode = n as f64 * self.timing.decode_per_instr;
        let fetched = self.record(now, fetch, Node::Cu, Activity::Fetch, None);
        let decoded = self.record(fetched, decode, Node::Cu, Activity::Decode, None);

        let mut st = BundleState {
            remaining: vec![0; n_qc],
            received: vec![false; n],
            done: vec![false; n],
            epr_ready: vec![None; n],
            cbp_arrived: vec![false; n],
            post_started: vec![false; n],
            tpd_of: vec![None; n],
            tps_of: vec![None; n],
            tpsb: vec![Vec::new(); n_qc],
            tps_active: vec![false; n_qc],
            eoc_order: vec![None; n_qc],
            ..BundleState::default()
        };
        for instr in &bundle.instructions {
            st.remaining[instr.core()] += 1;
        }
        for (i, instr) in bundle.instructions.iter().enumerate() {
            if let Instruction::Tps { dst_qc, dst_slot, .. } = *instr {
                let j = bundle
                    .instructions
                    .iter()
                    .position(|x| matches!(*x, Instruction::Tpd { dst_qc: q, dst_slot: s } if q == dst_qc && s == dst_slot))
                    .expect("validated program pairs every TPS with a TPD");
                st.tpd_of[i] = Some(j);
                st.tps_of[j] = Some(i);
            }
        }
        let plan = eoc_schedule(bundle, self.mode);
        st.eoc_expected = plan.len();
        for &(core, order) in &plan {
            st.eoc_order[core] = order;
        }
        let mut tps: Vec<(u32, usize)> = bundle
            .instructions
            .iter()
            .enumerate()
            .filter(|(_, x)| x.is_tps())
            .map(|(i, x)| (x.token_order().unwrap_or(i as u32), i))
            .collect();
        tps.sort_unstable();
        st.tps_by_order = tps.into_iter().map(|(_, i)| i).collect();
        self.st = st;
        self.token_orders.push(Vec::new());
        self.schedule(decoded, Event::DecodeDone)
    }

    fn finish_bundle(&mut self, now: f64) -> Result<(), SimError> {
        if let Some(chain) = &self.st.chain {
            self.token_orders[self.b] = chain.observed().to_vec();
        }
        self.bundle_ends.push(now);
        self.b += 1;
        self.start_bundle(now)
    }

    fn handle(&mut self, now: f64, ev: Event) -> Result<(), SimError> {
        match ev {
            Event::DecodeDone => self.on_decode_done(now),
            Event::Delivered(p) => self.on_delivered(now, p),
            Event::TokenArrival(g) => self.on_token_arrival(now, g),
            Event::TokenRelease { node, served } => {
                let tok = self.token.as_mut().expect("CT mode");
                if let Some(g) = tok.release(node, served, now) {
                    self.schedule(g.at, Event::TokenArrival(g))?;
                }
                Ok(())
            }
            Event::GateDone(i) => self.instr_done(now, i),
            Event::EprGenerated(i) => self.on_epr_generated(now, i),
            Event::EprDelivered(i) => {
                self.st.epr_ready[i] = Some(now);
                let src = self.instr(i).core();
                self.try_preprocess(now, src)?;
                let j = self.st.tpd_of[i].expect("paired");
                self.try_postprocess(now, j)
            }
            Event::PreprocessDone(i) => {
                let core = self.instr(i).core();
                let Instruction::Tps { dst_qc, dst_slot, .. } = *self.instr(i) else {
                    unreachable!("preprocessing only runs for TPS");
                };
                let out = Outgoing {
                    packet: Packet::Cbp {
                        cb: 0,
                        dst_qc: dst_qc as u32,
                        dst_slot: dst_slot as u32,
                    },
                    purpose: Purpose::Cbp(i),
                };
                match self.mode {
                    MacMode::Ct => self.ct_enqueue(now, core + 1, out),
                    MacMode::Id => {
                        let order = self.instr(i).token_order().expect("checked") as usize;
                        self.id_ready(now, order, core + 1)
                    }
                }
            }
            Event::PostprocessDone(j) => self.instr_done(now, j),
        }
    }

    fn transmit(&mut self, node: usize, out: Outgoing, start: f64) -> Result<f64, SimError> {
        let dur = self.channel.duration(&out.packet, &self.widths);
        let end = self.channel.occupy(node, start, dur)?;
        let tag = match out.purpose {
            Purpose::Dispatch(i) | Purpose::Cbp(i) | Purpose::Token(i) => Some(i),
            Purpose::Eoc(_) => None,
        };
        self.record(start, dur, Node::from_ring(node), Activity::Transmit(out.packet.kind()), tag);
        self.schedule(end, Event::Delivered(out.purpose))?;
        Ok(end)
    }

    fn on_decode_done(&mut self, now: f64) -> Result<(), SimError> {
        let bundle = &self.program.bundles[self.b];
        if bundle.instructions.is_empty() {
            return self.finish_bundle(now);
        }
        let outs: Vec<Outgoing> = bundle
            .instructions
            .iter()
            .enumerate()
            .map(|(i, instr)| Outgoing {
                packet: Packet::for_instruction(instr),
                purpose: Purpose::Dispatch(i),
            })
            .collect();
        match self.mode {
            MacMode::Ct => {
                for out in outs {
                    self.ct_enqueue(now, 0, out)?;
                }
            }
            MacMode::Id => {
                let mut cursor = now.max(self.channel.busy_until());
                for out in outs {
                    cursor = self.transmit(0, out, cursor)?;
                }
                let k = self.st.tps_by_order.len();
                let mut holders = vec![0; k + self.st.eoc_expected];
                for (o, &i) in self.st.tps_by_order.iter().enumerate() {
                    holders[o] = bundle.instructions[i].core() + 1;
                }
                for (core, order) in self.st.eoc_order.iter().enumerate() {
                    if let Some(o) = *order {
                        holders[o] = core + 1;
                    }
                }
                self.st.chain = Some(TokenChain::new(holders, cursor));
            }
        }
        Ok(())
    }

    fn ct_enqueue(&mut self, now: f64, node: usize, out: Outgoing) -> Result<(), SimError> {
        self.outbox[node].push_back(out);
        let tok = self.token.as_mut().expect("CT mode");
        if let Some(g) = tok.request(node, now) {
            self.schedule(g.at, Event::TokenArrival(g))?;
        }
        Ok(())
    }

    fn on_token_arrival(&mut self, now: f64, g: Grant) -> Result<(), SimError> {
        let tok = self.token.as_mut().expect("CT mode");
        let Some((count, seg)) = tok.on_arrival(g, now) else {
            return Ok(());
        };
        if let Some(seg) = seg {
            self.push_segment(seg, self.b);
        }
        let mut cursor = now;
        for _ in 0..count {
            let out = self.outbox[g.node].pop_front().expect("pending count matches outbox");
            cursor = self.transmit(g.node, out, cursor)?;
        }
        self.schedule(cursor, Event::TokenRelease { node: g.node, served: count })
    }

    fn id_ready(&mut self, now: f64, order: usize, node: usize) -> Result<(), SimError> {
        let chain = self.st.chain.as_mut().expect("ID mode");
        if let Some((o, at)) = chain.mark_ready(order, node, now)? {
            self.id_transmit(o, at)?;
        }
        Ok(())
    }

    /// Order `o` holds the token: send its CBP or EOC, then pass TP{o+1}.
    fn id_transmit(&mut self, o: usize, at: f64) -> Result<(), SimError> {
        let k = self.st.tps_by_order.len();
        let (node, out) = if o < k {
            let i = self.st.tps_by_order[o];
            let Instruction::Tps { src_qc, dst_qc, dst_slot, .. } = *self.instr(i) else {
                unreachable!()
            };
            let packet = Packet::Cbp {
                cb: 0,
                dst_qc: dst_qc as u32,
                dst_slot: dst_slot as u32,
            };
            (src_qc + 1, Outgoing { packet, purpose: Purpose::Cbp(i) })
        } else {
            let core = self.st.eoc_order.iter().position(|&x| x == Some(o)).expect("EOC slot");
            let packet = Packet::Eoc { qc: core as u32 };
            (core + 1, Outgoing { packet, purpose: Purpose::Eoc(core) })
        };
        let end = self.transmit(node, out, at)?;
        if self.st.chain.as_ref().expect("ID mode").forwards(o) {
            let tp = Outgoing {
                packet: Packet::Tp { to: (o + 1) as u32 },
                purpose: Purpose::Token(o + 1),
            };
            self.transmit(node, tp, end)?;
        }
        Ok(())
    }

    fn on_delivered(&mut self, now: f64, p: Purpose) -> Result<(), SimError> {
        match p {
            Purpose::Dispatch(i) => {
                self.st.received[i] = true;
                match self.instr(i) {
                    Instruction::Local { qc, slots, .. } => {
                        let qc = *qc;
                        let free = &mut self.slot_free[qc];
                        let mut start = now;
                        for &s in slots {
                            if free.len() <= s {
                                free.resize(s + 1, 0.0);
                            }
                            start = start.max(free[s]);
                        }
                        let (dur, act) = if slots.len() == 2 {
                            (self.dur.gate_2q, Activity::Gate2q)
                        } else {
                            (self.dur.gate_1q, Activity::Gate1q)
                        };
                        let end = start + dur;
                        for &s in slots {
                            free[s] = end;
                        }
                        self.record(start, dur, Node::Qc(qc), act, Some(i));
                        self.schedule(end, Event::GateDone(i))
                    }
                    Instruction::Tps { src_qc, .. } => {
                        let core = *src_qc;
                        let instrs = &self.program.bundles[self.b].instructions;
                        let key = |x: usize| instrs[x].token_order().unwrap_or(x as u32);
                        let pos = self.st.tpsb[core].partition_point(|&x| key(x) < key(i));
                        self.st.tpsb[core].insert(pos, i);
                        self.epr_queue.push_back(i);
                        self.pump_epr(now)?;
                        self.try_preprocess(now, core)
                    }
                    Instruction::Tpd { .. } => self.try_postprocess(now, i),
                }
            }
            Purpose::Cbp(i) => {
                self.st.cbp_arrived[i] = true;
                let src = self.instr(i).core();
                self.st.tps_active[src] = false;
                self.instr_done(now, i)?;
                self.try_preprocess(now, src)?;
                let j = self.st.tpd_of[i].expect("paired");
                self.try_postprocess(now, j)
            }
            Purpose::Eoc(_) => {
                self.st.eoc_received += 1;
                if self.st.eoc_received == self.st.eoc_expected {
                    self.finish_bundle(now)?;
                }
                Ok(())
            }
            Purpose::Token(o) => {
                let chain = self.st.chain.as_mut().expect("ID mode");
                if let Some((o, at)) = chain.token_arrived(o, now)? {
                    self.id_transmit(o, at)?;
                }
                Ok(())
            }
        }
    }

    fn pump_epr(&mut self, now: f64) -> Result<(), SimError> {
        while self.epr.parallel_capacity.is_none_or(|c| self.epr_busy < c) {
            let Some(i) = self.epr_queue.pop_front() else { break };
            let d = match self.epr.model {
                EprModel::Exponential => sample_exponential(&mut self.rng, self.dur.epr_gen_mean),
                EprModel::Deterministic => self.dur.epr_gen_mean,
            };
            self.epr_busy += 1;
            let end = self.record(now, d, Node::Epr, Activity::EprGeneration, Some(i));
            self.schedule(end, Event::EprGenerated(i))?;
        }
        Ok(())
    }

    fn on_epr_generated(&mut self, now: f64, i: usize) -> Result<(), SimError> {
        self.epr_busy -= 1;
        let src = self.instr(i).core();
        let dst = self.instr(self.st.tpd_of[i].expect("paired")).core();
        let start = now.max(self.ltm_free[src]).max(self.ltm_free[dst]);
        let end = self.record(start, self.dur.epr_distribution, Node::Epr, Activity::EprDistribution, Some(i));
        self.ltm_free[src] = end;
        self.ltm_free[dst] = end;
        self.schedule(end, Event::EprDelivered(i))?;
        self.pump_epr(now)
    }

    fn try_preprocess(&mut self, now: f64, core: usize) -> Result<(), SimError> {
        if self.st.tps_active[core] {
            return Ok(());
        }
        let Some(&head) = self.st.tpsb[core].first() else {
            return Ok(());
        };
        if self.st.epr_ready[head].is_none() {
            return Ok(());
        }
        self.st.tpsb[core].remove(0);
        self.st.tps_active[core] = true;
        let end = self.record(now, self.dur.preprocessing, Node::Qc(core), Activity::Preprocess, Some(head));
        self.schedule(end, Event::PreprocessDone(head))
    }

    fn try_postprocess(&mut self, now: f64, j: usize) -> Result<(), SimError> {
        let i = self.st.tps_of[j].expect("paired");
        if !self.st.received[j] || !self.st.cbp_arrived[i] || self.st.epr_ready[i].is_none() || self.st.post_started[j] {
            return Ok(());
        }
        self.st.post_started[j] = true;
        let core = self.instr(j).core();
        let end = self.record(now, self.dur.postprocessing, Node::Qc(core), Activity::Postprocess, Some(i));
        self.schedule(end, Event::PostprocessDone(j))
    }

    fn instr_done(&mut self, now: f64, i: usize) -> Result<(), SimError> {
        debug_assert!(!self.st.done[i], "instruction completed twice");
        self.st.done[i] = true;
        let core = self.instr(i).core();
        self.st.remaining[core] -= 1;
        if self.st.remaining[core] > 0 {
            return Ok(());
        }
        match self.mode {
            MacMode::Ct => {
                let out = Outgoing {
                    packet: Packet::Eoc { qc: core as u32 },
                    purpose: Purpose::Eoc(core),
                };
                self.ct_enqueue(now, core + 1, out)
            }
            MacMode::Id => {
                let order = self.st.eoc_order[core].expect("participating core");
                self.id_ready(now, order, core + 1)
            }
        }
    }

    fn deadlock(&self) -> SimError {
        let mut blocked = Vec::new();
        for (i, instr) in self.program.bundles[self.b].instructions.iter().enumerate() {
            if self.st.done[i] {
                continue;
            }
            let why = if !self.st.received[i] {
                "awaiting dispatch"
            } else {
                match instr {
                    Instruction::Local { .. } => "gate pending",
                    Instruction::Tps { .. } if self.st.epr_ready[i].is_none() => "TPS awaiting EPR",
                    Instruction::Tps { .. } => "TPS awaiting token",
                    Instruction::Tpd { .. } => "TPD awaiting CBP",
                }
            };
            blocked.push(format!("QC{} instr {i}: {why}", instr.core()));
        }
        if blocked.is_empty() {
            blocked.push(format!(
                "all instructions done, {}/{} EOC received",
                self.st.eoc_received, self.st.eoc_expected
            ));
        }
        SimError::Deadlock {
            time: self.queue.now().ns(),
            bundle: self.b,
            blocked: blocked.join("; "),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{Gate, LogicalCircuit, Opcode};
    use crate::compiler::{build_program, Bundle, CompileOptions, Location, Placement};
    use approx::assert_abs_diff_eq;

    fn det() -> SimConfig {
        SimConfig {
            epr: EprConfig {
                model: EprModel::Deterministic,
                parallel_capacity: Some(1),
            },
            ..SimConfig::default()
        }
    }

    fn single_h() -> Program {
        Program {
            bundles: vec![Bundle {
                instructions: vec![Instruction::Local {
                    opcode: Opcode::H,
                    qc: 0,
                    slots: vec![0],
                }],
            }],
            initial_placement: Placement {
                n_qc: 2,
                slots_per_qc: 16,
                locations: vec![Location { qc: 0, slot: 0 }],
            },
            widths: BitWidths::new(2, 16, 8),
        }
    }

    #[test]
    fn single_local_gate_hand_trace() {
        // LIP = 3+1+4+8 = 16 bits, EOC = 3+1 = 4 bits, bundle = 16 + 13 bits
        let fetch = 29.0 / 128.0;
        let expect = fetch + 10.0 + 16.0 / 12.0 + 25.0 + 4.0 / 12.0;
        let tr = run_program(&single_h(), &det(), MacMode::Id, 1).unwrap();
        assert_abs_diff_eq!(tr.makespan, expect, epsilon = 1e-9);
        assert_eq!(tr.intervals.len(), 5);
        assert!(tr.token_orders[0].is_empty());
    }

    #[test]
    fn single_local_gate_under_ct() {
        // token at CU from t=0 but CU only becomes pending after decode:
        // it reaches CU again at the first multiple of 3 ns after that
        let fetch = 29.0 / 128.0;
        let decode_end: f64 = fetch + 10.0;
        let grant = (decode_end / 3.0).ceil() * 3.0;
        let lip_end = grant + 16.0 / 12.0;
        let gate_end = lip_end + 25.0;
        // QC0 is ring node 1; token left CU at lip_end
        let eoc_grant = crate::mac::ct_grant(3, 1.0, 1, lip_end + 1.0, 1, gate_end);
        let tr = run_program(&single_h(), &det(), MacMode::Ct, 1).unwrap();
        assert_abs_diff_eq!(tr.makespan, eoc_grant + 4.0 / 12.0, epsilon = 1e-9);
        let c_comm: f64 = tr
            .intervals
            .iter()
            .filter(|iv| iv.category() == Category::ClassicalComm)
            .map(Interval::duration)
            .sum();
        assert_abs_diff_eq!(c_comm, tr.makespan, epsilon = 1e-9);
    }

    #[test]
    fn zero_bundles() {
        let mut p = single_h();
        p.bundles.clear();
        for mode in MacMode::BOTH {
            let tr = run_program(&p, &det(), mode, 0).unwrap();
            assert_eq!(tr.makespan, 0.0);
            assert!(tr.intervals.is_empty());
        }
    }

    fn cross_cx() -> Program {
        let c = LogicalCircuit::new(2, vec![Gate::two(Opcode::Cx, 0, 1)]).unwrap();
        build_program(&c, 2, 1, &CompileOptions::default()).unwrap()
    }

    #[test]
    fn teleport_phases_in_causal_order() {
        for mode in MacMode::BOTH {
            let tr = run_program(&cross_cx(), &det(), mode, 3).unwrap();
            let first = |a: Activity| {
                tr.intervals
                    .iter()
                    .find(|iv| iv.activity == a && iv.bundle == 0)
                    .copied()
                    .unwrap_or_else(|| panic!("{mode}: no {}", a.name()))
            };
            let gen = first(Activity::EprGeneration);
            let dist = first(Activity::EprDistribution);
            let pre = first(Activity::Preprocess);
            let cbp = first(Activity::Transmit(PacketKind::Cbp));
            let post = first(Activity::Postprocess);
            assert_abs_diff_eq!(gen.duration(), 1000.0, epsilon = 1e-9);
            assert_abs_diff_eq!(pre.duration(), 390.0, epsilon = 1e-9);
            assert_abs_diff_eq!(post.duration(), 30.0, epsilon = 1e-9);
            assert!(gen.end <= dist.start);
            assert!(dist.end <= pre.start);
            assert!(pre.end <= cbp.start);
            assert!(cbp.end <= post.start);
            assert_eq!(tr.bundle_ends.len(), 2);
        }
    }

    #[test]
    fn qsf_scales_quantum_durations() {
        let p = cross_cx();
        let a = run_program(&p, &det(), MacMode::Id, 0).unwrap();
        let mut cfg = det();
        cfg.timing.qsf = 0.25;
        let b = run_program(&p, &cfg, MacMode::Id, 0).unwrap();
        let pre = |t: &Trace| t.intervals.iter().find(|iv| iv.activity == Activity::Preprocess).unwrap().duration();
        assert_abs_diff_eq!(pre(&b), 0.25 * pre(&a), epsilon = 1e-9);
    }

    #[test]
    fn eoc_schedule_extends_chain() {
        let bundle = Bundle {
            instructions: vec![
                Instruction::Local {
                    opcode: Opcode::X,
                    qc: 0,
                    slots: vec![0],
                },
                Instruction::Local {
                    opcode: Opcode::X,
                    qc: 2,
                    slots: vec![0],
                },
            ],
        };
        assert_eq!(eoc_schedule(&bundle, MacMode::Id), vec![(0, Some(0)), (2, Some(1))]);
        assert_eq!(eoc_schedule(&bundle, MacMode::Ct), vec![(0, None), (2, None)]);
    }

    #[test]
    fn id_mode_requires_token_orders() {
        let mut p = cross_cx();
        for b in &mut p.bundles {
            for i in &mut b.instructions {
                if let Instruction::Tps { token_order, .. } = i {
                    *token_order = None;
                }
            }
        }
        assert!(matches!(
            run_program(&p, &det(), MacMode::Id, 0),
            Err(SimError::MissingTokenOrder { bundle: 0 })
        ));
        assert!(run_program(&p, &det(), MacMode::Ct, 0).is_ok());
    }

    #[test]
    fn rejects_bad_timing() {
        let mut cfg = det();
        cfg.timing.qsf = 0.0;
        assert!(matches!(
            run_program(&single_h(), &cfg, MacMode::Id, 0),
            Err(SimError::InvalidConfig(_))
        ));
    }

    #[test]
    fn trace_csv_header_is_frozen() {
        let tr = run_program(&single_h(), &det(), MacMode::Id, 0).unwrap();
        let csv = tr.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("start_ns,end_ns,node,activity,category,bundle_idx"));
        assert_eq!(lines.next(), Some("0,0.2265625,CU,fetch,c_comp,0"));
        assert_eq!(csv.lines().count(), 6);
    }
}
