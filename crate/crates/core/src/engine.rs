//! Discrete-event engine: a virtual clock, a `(fire_at, seq)` event queue and
//! seeded lognormal stage times drive every pipeline stage.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assigner::{AssignError, AssignEvent, AssignerConfig, TxAssigner};
use crate::dependency::{analyze_dependency, classify_operand};
use crate::endorsement::{
    collect_endorsements, execute_speculatively, Endorsement, EndorsementOutcome, ExecError, ExecErrorKind,
    RejectReason,
};
use crate::ledger::{
    AccessType, Block, BlockTx, ChannelId, FailCause, ReadWriteSet, Tick, Transaction, TxId, TxStatus, TxType, Wallet,
    WalletAddress, WorldState,
};
use crate::ordering::{
    commit_block, BlockCutter, CommitError, CommitSerializer, CutAction, OrderingStrategy, Pop, SequencePolicy,
    Sequencer, TxOutcome,
};
use crate::scenario::{ConfigError, ScenarioConfig, StageTime};
use crate::workload::{generate_workload, ArrivalModel};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stalled at tick {tick} with {remaining} transactions still in flight")]
    StallDetected { tick: Tick, remaining: usize },
    #[error("invariant violated at tick {tick}: {message}")]
    Invariant { tick: Tick, message: String },
}

#[derive(Debug)]
struct Slot<E> {
    fire_at: Tick,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Slot<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.fire_at, self.seq) == (other.fire_at, other.seq)
    }
}

impl<E> Eq for Slot<E> {}

impl<E> PartialOrd for Slot<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Slot<E> {
    // Reversed so the max-heap pops the earliest (fire_at, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

/// Min-heap on `(fire_at, seq)`; equal fire times pop in schedule order.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Slot<E>>,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn schedule(&mut self, fire_at: Tick, event: E) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Slot { fire_at, seq, event });
        seq
    }

    pub fn next_event(&mut self) -> Option<(Tick, u64, E)> {
        self.heap.pop().map(|s| (s.fire_at, s.seq, s.event))
    }

    pub fn peek_time(&self) -> Option<Tick> {
        self.heap.peek().map(|s| s.fire_at)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VirtualClock {
    now: Tick,
}

impl VirtualClock {
    pub fn now(&self) -> Tick {
        self.now
    }

    /// Returns false, leaving the clock alone, if `t` lies in the past.
    pub fn advance_to(&mut self, t: Tick) -> bool {
        if t < self.now {
            return false;
        }
        self.now = t;
        true
    }
}

/// Seeded lognormal sampler for one stage.
#[derive(Debug, Clone)]
pub struct StageSampler {
    dist: LogNormal<f64>,
    rng: ChaCha8Rng,
}

impl StageSampler {
    pub fn new(time: StageTime, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            dist: LogNormal::new(time.median.ln(), time.sigma).expect("stage time validated"),
            rng,
        }
    }

    /// One draw scaled by `weight`, rounded to whole ticks, never below 1.
    pub fn sample(&mut self, weight: f64) -> Tick {
        (self.dist.sample(&mut self.rng) * weight).round().max(1.0) as Tick
    }
}

#[derive(Debug, Clone)]
pub struct ServiceTimeModel {
    pub endorse: StageSampler,
    pub analyze: StageSampler,
    pub order: StageSampler,
    pub validate: StageSampler,
}

impl ServiceTimeModel {
    pub fn new(cfg: &ScenarioConfig) -> Self {
        let st = &cfg.service_times;
        Self {
            endorse: StageSampler::new(st.endorse, cfg.seed, 1),
            analyze: StageSampler::new(st.analyze_time(), cfg.seed, 2),
            order: StageSampler::new(st.order, cfg.seed, 3),
            validate: StageSampler::new(st.validate, cfg.seed, 4),
        }
    }
}

/// Execution and ordering cost multiplier: writes are dearer than reads.
pub fn service_weight(tx: &Transaction) -> f64 {
    1.0 + 0.5 * tx.write_operand_count() as f64
}

/// One status transition. `from` is `None` on submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceRecord {
    pub tx_id: TxId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_type: Option<TxType>,
    pub from: Option<TxStatus>,
    pub to: TxStatus,
    pub tick: Tick,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_id: Option<ChannelId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<FailCause>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub records: Vec<TraceRecord>,
}

/// A committed block with per-transaction outcomes and the availability of
/// every wallet it wrote, as seen by the committer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CommittedBlock {
    #[serde(flatten)]
    pub block: Block,
    pub commit_time: Tick,
    pub outcomes: Vec<TxOutcome>,
    pub availability: BTreeMap<WalletAddress, bool>,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub strategy: OrderingStrategy,
    pub trace: SimulationTrace,
    pub transactions: Vec<Transaction>,
    pub blocks: Vec<CommittedBlock>,
    pub genesis: WorldState,
    pub final_state: WorldState,
    pub end_tick: Tick,
    pub assign_log: Vec<AssignEvent>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep the assigner's per-event log.
    pub assign_trace: bool,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Dispatch(usize),
    EndorseDone(usize),
    AnalyzeDone(usize),
    AssignTick,
    Wake(usize),
    OrderDone(usize, usize),
    BlockCut(usize, u64),
    CommitStart,
    CommitDone,
    Flap(bool),
}

struct Channel {
    seq: Sequencer,
    cutter: BlockCutter,
    busy: bool,
    wake_at: Option<Tick>,
}

type PreImages = Vec<(WalletAddress, Option<Wallet>)>;

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    clock: VirtualClock,
    events: EventQueue<Ev>,
    txs: Vec<Transaction>,
    rwsets: Vec<Option<ReadWriteSet>>,
    lags: Vec<Vec<u64>>,
    quorum: Vec<Vec<u32>>,
    state: WorldState,
    undo: VecDeque<(u64, PreImages)>,
    latches: Vec<HashMap<WalletAddress, Tick>>,
    dm_free: Vec<Tick>,
    dm_enabled: bool,
    assigner: Option<TxAssigner>,
    channels: Vec<Channel>,
    commit_queue: CommitSerializer,
    committing: Option<(Tick, ChannelId, Vec<TxId>)>,
    commit_start_pending: bool,
    assign_pending: bool,
    times: ServiceTimeModel,
    lag_rng: ChaCha8Rng,
    units: Vec<Vec<usize>>,
    unit_of: Vec<usize>,
    unit_open: Vec<usize>,
    next_unit: usize,
    closed_loop: bool,
    terminal: usize,
    trace: Vec<TraceRecord>,
    blocks: Vec<CommittedBlock>,
    d_wallets: Vec<WalletAddress>,
    external_credit: i128,
}

/// Generate the scenario's workload and simulate it.
pub fn run(cfg: &ScenarioConfig) -> Result<SimulationOutput, SimError> {
    cfg.validate()?;
    let txs = generate_workload(&cfg.workload).map_err(ConfigError::from)?;
    run_workload(cfg, txs, RunOptions::default())
}

/// Simulate an explicit transaction list, e.g. one imported from JSON Lines.
/// Ids must be `1..=n` in list order.
pub fn run_workload(
    cfg: &ScenarioConfig,
    txs: Vec<Transaction>,
    opts: RunOptions,
) -> Result<SimulationOutput, SimError> {
    cfg.validate()?;
    if let Some((i, tx)) = txs.iter().enumerate().find(|(i, t)| t.id.0 != *i as u64 + 1) {
        return Err(ConfigError::Invalid(format!(
            "workload id {} at position {}; ids must run 1..n",
            tx.id,
            i + 1
        ))
        .into());
    }
    let mut sim = Sim::new(cfg, txs, opts);
    sim.start();
    sim.run_loop()?;
    sim.finish()
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig, mut txs: Vec<Transaction>, opts: RunOptions) -> Self {
        for tx in &mut txs {
            tx.status = TxStatus::Pending;
            tx.read_wallets.clear();
            tx.write_wallets.clear();
            tx.channel_id = None;
        }
        let n = txs.len();
        let mut units: Vec<Vec<usize>> = Vec::new();
        let mut unit_of = vec![0; n];
        for i in 0..n {
            let joins_previous =
                i > 0 && txs[i].companion == Some(txs[i - 1].id) && txs[i - 1].companion == Some(txs[i].id);
            if !joins_previous {
                units.push(Vec::new());
            }
            units.last_mut().unwrap().push(i);
            unit_of[i] = units.len() - 1;
        }
        let unit_open = units.iter().map(Vec::len).collect();
        let channel_count = cfg.channel_count() as usize;
        let policy = match &cfg.strategy {
            OrderingStrategy::Timestamping => SequencePolicy::Timestamp,
            OrderingStrategy::Grouping { priority } => SequencePolicy::Priority(priority.clone()),
            _ => SequencePolicy::Fifo,
        };
        let channels = (0..channel_count)
            .map(|_| Channel {
                seq: Sequencer::new(policy.clone(), cfg.reorder_window()),
                cutter: BlockCutter::new(cfg.block_size, cfg.batch_timeout),
                busy: false,
                wake_at: None,
            })
            .collect();
        let assigner = match cfg.strategy {
            OrderingStrategy::ConChainParallel => Some(TxAssigner::new(AssignerConfig {
                channels: cfg.channels.count,
                queue_limit: cfg.channels.queue_limit,
                scan_window: cfg.flags.scan_window,
                exclusive_read_locks: cfg.flags.exclusive_read_locks,
                trace: opts.assign_trace,
            })),
            // Strict head-of-line blocking on a single lane.
            OrderingStrategy::NaiveLocking => Some(TxAssigner::new(AssignerConfig {
                channels: 1,
                queue_limit: cfg.channels.queue_limit,
                scan_window: 1,
                exclusive_read_locks: cfg.flags.exclusive_read_locks,
                trace: opts.assign_trace,
            })),
            _ => None,
        };
        let mut lag_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        lag_rng.set_stream(5);
        Sim {
            cfg,
            clock: VirtualClock::default(),
            events: EventQueue::default(),
            rwsets: vec![None; n],
            lags: vec![Vec::new(); n],
            quorum: vec![Vec::new(); n],
            state: cfg.workload.genesis(),
            undo: VecDeque::new(),
            latches: vec![HashMap::new(); cfg.policy.endorsers as usize],
            dm_free: vec![0; cfg.dm_workers() as usize],
            dm_enabled: cfg.dependency_manager(),
            assigner,
            channels,
            commit_queue: CommitSerializer::default(),
            committing: None,
            commit_start_pending: false,
            assign_pending: false,
            times: ServiceTimeModel::new(cfg),
            lag_rng,
            units,
            unit_of,
            unit_open,
            next_unit: 0,
            closed_loop: matches!(cfg.workload.arrival_model, ArrivalModel::ClosedLoop { .. }),
            terminal: 0,
            trace: Vec::with_capacity(n * 6),
            blocks: Vec::new(),
            d_wallets: cfg.workload.d_wallets(),
            external_credit: 0,
            txs,
        }
    }

    fn now(&self) -> Tick {
        self.clock.now()
    }

    fn violation(&self, message: impl Into<String>) -> SimError {
        SimError::Invariant {
            tick: self.now(),
            message: message.into(),
        }
    }

    /// Length of the unavailable part of each flap period.
    fn down_ticks(&self) -> Tick {
        let w = &self.cfg.workload;
        ((w.unavailable_fraction * w.flap_period as f64).round() as Tick).min(w.flap_period)
    }

    fn set_d_available(&mut self, available: bool) {
        for d in &self.d_wallets {
            let _ = self.state.set_available(d, available);
        }
    }

    fn start(&mut self) {
        if self.down_ticks() > 0 {
            self.set_d_available(false);
        }
        match self.cfg.workload.arrival_model {
            ArrivalModel::ClosedLoop { clients } => {
                let first = (clients as usize).min(self.units.len());
                for _ in 0..first {
                    self.events.schedule(0, Ev::Dispatch(self.next_unit));
                    self.next_unit += 1;
                }
            }
            ArrivalModel::OpenLoop { .. } => {
                for u in 0..self.units.len() {
                    let at = self.txs[self.units[u][0]].submit_time;
                    self.events.schedule(at, Ev::Dispatch(u));
                }
                self.next_unit = self.units.len();
            }
        }
        self.schedule_flap();
    }

    fn schedule_flap(&mut self) {
        let down = self.down_ticks();
        let period = self.cfg.workload.flap_period;
        // Flaps alone never make progress; stop so a stall can surface.
        if down == 0
            || down >= period
            || self.terminal == self.txs.len()
            || self.d_wallets.is_empty()
            || self.events.is_empty()
        {
            return;
        }
        let now = self.now();
        let phase = now % period;
        let (at, available) = if phase < down {
            (now - phase + down, true)
        } else {
            (now - phase + period, false)
        };
        self.events.schedule(at, Ev::Flap(available));
    }

    fn run_loop(&mut self) -> Result<(), SimError> {
        while let Some((at, _, ev)) = self.events.next_event() {
            if !self.clock.advance_to(at) {
                return Err(self.violation(format!("event scheduled for past tick {at}")));
            }
            match ev {
                Ev::Dispatch(u) => self.dispatch(u),
                Ev::EndorseDone(i) => self.endorse_done(i)?,
                Ev::AnalyzeDone(i) => self.analyze_done(i)?,
                Ev::AssignTick => self.assign_pass()?,
                Ev::Wake(c) => {
                    if self.channels[c].wake_at == Some(at) {
                        self.channels[c].wake_at = None;
                    }
                    self.try_start_channel(c);
                }
                Ev::OrderDone(c, i) => self.order_done(c, i),
                Ev::BlockCut(c, generation) => {
                    if let Some(batch) = self.channels[c].cutter.on_timer(generation) {
                        self.emit_block(c, batch);
                    }
                }
                Ev::CommitStart => self.commit_start(),
                Ev::CommitDone => self.commit_done()?,
                Ev::Flap(available) => {
                    self.set_d_available(available);
                    self.schedule_flap();
                }
            }
        }
        if self.terminal < self.txs.len() {
            return Err(SimError::StallDetected {
                tick: self.now(),
                remaining: self.txs.len() - self.terminal,
            });
        }
        Ok(())
    }

    fn record(&mut self, i: usize, to: TxStatus, cause: Option<FailCause>) -> Result<(), SimError> {
        let from = self.txs[i].status;
        if let Err(e) = self.txs[i].set_status(to) {
            return Err(self.violation(e.to_string()));
        }
        let tx = &self.txs[i];
        let channel_id = if to == TxStatus::Ordering || from == TxStatus::Ordering {
            tx.channel_id
        } else {
            None
        };
        self.trace.push(TraceRecord {
            tx_id: tx.id,
            tx_type: None,
            from: Some(from),
            to,
            tick: self.clock.now(),
            channel_id,
            cause,
        });
        if to.is_terminal() {
            self.on_terminal(i);
        }
        Ok(())
    }

    fn on_terminal(&mut self, i: usize) {
        self.terminal += 1;
        let u = self.unit_of[i];
        self.unit_open[u] -= 1;
        if self.unit_open[u] == 0 && self.closed_loop && self.next_unit < self.units.len() {
            let now = self.now();
            self.events.schedule(now, Ev::Dispatch(self.next_unit));
            self.next_unit += 1;
        }
    }

    fn dispatch(&mut self, u: usize) {
        let now = self.now();
        let start = if self.cfg.strategy == OrderingStrategy::Timestamping {
            now + self.cfg.sync_penalty
        } else {
            now
        };
        for idx in 0..self.units[u].len() {
            let i = self.units[u][idx];
            if self.closed_loop {
                self.txs[i].submit_time = now;
                self.txs[i].timestamp = now;
            }
            self.trace.push(TraceRecord {
                tx_id: self.txs[i].id,
                tx_type: Some(self.txs[i].tx_type),
                from: None,
                to: TxStatus::Pending,
                tick: now,
                channel_id: None,
                cause: None,
            });
            self.draw_lags(i);
            self.schedule_endorsement(i, start);
        }
    }

    fn draw_lags(&mut self, i: usize) {
        let max = if self.cfg.strategy == OrderingStrategy::Timestamping {
            0
        } else {
            self.cfg.endorser_lag.max_blocks as u64
        };
        let draws = if self.cfg.endorser_lag.per_endorser {
            self.cfg.policy.endorsers as usize
        } else {
            1
        };
        self.lags[i] = (0..draws).map(|_| self.lag_rng.random_range(0..=max)).collect();
    }

    fn lag_of(&self, i: usize, endorser: u32) -> u64 {
        let lags = &self.lags[i];
        lags[(endorser as usize).min(lags.len() - 1)]
    }

    /// Each endorser executes at most one transaction per wallet at a time.
    /// The quorum completes when the k-th fastest endorser finishes.
    fn schedule_endorsement(&mut self, i: usize, start: Tick) {
        let weight = service_weight(&self.txs[i]);
        let addrs: Vec<WalletAddress> = self.txs[i].addresses().into_iter().cloned().collect();
        let mut finishes: Vec<(Tick, u32)> = Vec::with_capacity(self.latches.len());
        for e in 0..self.latches.len() {
            let begin = addrs
                .iter()
                .filter_map(|a| self.latches[e].get(a).copied())
                .fold(start, Tick::max);
            let end = begin + self.times.endorse.sample(weight);
            for a in &addrs {
                self.latches[e].insert(a.clone(), end);
            }
            finishes.push((end, e as u32));
        }
        finishes.sort_unstable();
        let k = self.cfg.policy.required as usize;
        self.quorum[i] = finishes[..k].iter().map(|f| f.1).collect();
        self.events.schedule(finishes[k - 1].0, Ev::EndorseDone(i));
    }

    /// The wallets `tx` touches as of `height`, with current availability.
    fn view(&self, tx: &Transaction, height: u64) -> WorldState {
        let mut view = WorldState {
            height,
            wallets: BTreeMap::new(),
        };
        for addr in tx.addresses() {
            let mut w = self.state.wallet(addr).copied();
            for (h, pre) in self.undo.iter().rev() {
                if *h <= height {
                    break;
                }
                if let Some((_, old)) = pre.iter().find(|(a, _)| a == addr) {
                    w = *old;
                }
            }
            if let Some(mut w) = w {
                w.available = self.state.wallet(addr).is_none_or(|live| live.available);
                view.wallets.insert(addr.clone(), w);
            }
        }
        view
    }

    fn endorse_done(&mut self, i: usize) -> Result<(), SimError> {
        let frontier = self.state.height;
        let mut cache: Vec<(u64, Result<ReadWriteSet, ExecError>)> = Vec::new();
        let mut endorsements = Vec::with_capacity(self.quorum[i].len());
        for &e in &self.quorum[i] {
            let h = frontier.saturating_sub(self.lag_of(i, e));
            let result = match cache.iter().find(|(ch, _)| *ch == h) {
                Some((_, r)) => r.clone(),
                None => {
                    let r = execute_speculatively(&self.txs[i], &self.view(&self.txs[i], h));
                    cache.push((h, r.clone()));
                    r
                }
            };
            endorsements.push(Endorsement {
                endorser: e,
                tx: self.txs[i].id,
                snapshot_height: h,
                result,
                sim_time: self.now(),
            });
        }
        match collect_endorsements(&self.cfg.policy, &endorsements) {
            EndorsementOutcome::Rejected(reason) => {
                let cause = match reason {
                    RejectReason::Exec(e) => exec_cause(&e),
                    RejectReason::MismatchedRwSets | RejectReason::InsufficientEndorsements => FailCause::Rejected,
                };
                self.record(i, TxStatus::Failed, Some(cause))
            }
            EndorsementOutcome::Endorsed(rw) => {
                self.rwsets[i] = Some(rw);
                self.record(i, TxStatus::Endorsed, None)?;
                if self.dm_enabled {
                    let weight = service_weight(&self.txs[i]);
                    let worker = (0..self.dm_free.len())
                        .min_by_key(|w| (self.dm_free[*w], *w))
                        .expect("at least one worker");
                    let begin = self.dm_free[worker].max(self.now());
                    let end = begin + self.times.analyze.sample(weight);
                    self.dm_free[worker] = end;
                    self.events.schedule(end, Ev::AnalyzeDone(i));
                    Ok(())
                } else {
                    self.route_to_ordering(i)
                }
            }
        }
    }

    fn analyze_done(&mut self, i: usize) -> Result<(), SimError> {
        match analyze_dependency(&self.txs[i], &self.state) {
            Ok(annotated) => {
                self.txs[i].read_wallets = annotated.read_wallets;
                self.txs[i].write_wallets = annotated.write_wallets;
                self.record(i, TxStatus::Analyzed, None)?;
                self.route_to_ordering(i)
            }
            Err(_) => self.record(i, TxStatus::Discarded, Some(FailCause::Discarded)),
        }
    }

    fn route_to_ordering(&mut self, i: usize) -> Result<(), SimError> {
        if self.assigner.is_none() {
            self.txs[i].channel_id = Some(ChannelId(0));
            self.record(i, TxStatus::Ordering, None)?;
            let now = self.now();
            self.channels[0].seq.push(&self.txs[i], now);
            self.try_start_channel(0);
            return Ok(());
        }
        if self.txs[i].status == TxStatus::Endorsed {
            // No dependency manager: lock on the raw operand wallets.
            let (reads, writes) = raw_wallet_sets(&self.txs[i]);
            self.txs[i].read_wallets = reads;
            self.txs[i].write_wallets = writes;
        }
        let mut handoff = self.txs[i].clone();
        handoff.status = TxStatus::Analyzed;
        self.assigner
            .as_mut()
            .unwrap()
            .submit(handoff)
            .map_err(|e| self.violation(e.to_string()))?;
        self.record(i, TxStatus::Queued, None)?;
        self.request_assign();
        Ok(())
    }

    fn request_assign(&mut self) {
        if !self.assign_pending {
            self.assign_pending = true;
            let now = self.now();
            self.events.schedule(now, Ev::AssignTick);
        }
    }

    /// One drain of the pending queue. A transaction that wins its locks is
    /// re-executed right away: against the committed frontier under
    /// ConChainParallel, and against the transaction's lagging peer view
    /// under NaiveLocking. If that execution fails it is dropped unlocked.
    fn assign_pass(&mut self) -> Result<(), SimError> {
        self.assign_pending = false;
        let mut assigner = self.assigner.take().expect("assigner present");
        let frontier = self.state.height;
        let lagging = self.cfg.strategy == OrderingStrategy::NaiveLocking;
        let mut refreshed: HashMap<TxId, Result<ReadWriteSet, ExecError>> = HashMap::new();
        let drained = assigner.drain_queue_with(|tx| {
            let i = (tx.id.0 - 1) as usize;
            let h = if lagging {
                frontier.saturating_sub(self.lag_of(i, 0))
            } else {
                frontier
            };
            let r = execute_speculatively(tx, &self.view(tx, h));
            let ok = r.is_ok();
            refreshed.insert(tx.id, r);
            ok
        });
        let checked = if self.cfg.flags.check_invariants {
            assigner.verify()
        } else {
            Ok(())
        };
        self.assigner = Some(assigner);
        checked.map_err(|e| self.violation(e.to_string()))?;
        if !drained.assigned.is_empty() || !drained.rejected.is_empty() {
            self.request_assign();
        }

        for tx in drained.rejected {
            let i = (tx.id.0 - 1) as usize;
            let cause = match refreshed.remove(&tx.id) {
                Some(Err(e)) => exec_cause(&e),
                _ => FailCause::Rejected,
            };
            self.record(i, TxStatus::Failed, Some(cause))?;
        }
        for (channel, tx) in drained.assigned {
            let i = (tx.id.0 - 1) as usize;
            if let Some(Ok(rw)) = refreshed.remove(&tx.id) {
                self.rwsets[i] = Some(rw);
            }
            self.txs[i].channel_id = Some(channel);
            self.record(i, TxStatus::Ordering, None)?;
            let c = channel.0 as usize;
            let now = self.now();
            self.channels[c].seq.push(&self.txs[i], now);
            self.try_start_channel(c);
        }
        Ok(())
    }

    fn try_start_channel(&mut self, c: usize) {
        if self.channels[c].busy {
            return;
        }
        let now = self.now();
        match self.channels[c].seq.pop_ready(now) {
            Pop::Ready(id) => {
                let i = (id.0 - 1) as usize;
                self.channels[c].busy = true;
                let end = now + self.times.order.sample(service_weight(&self.txs[i]));
                self.events.schedule(end, Ev::OrderDone(c, i));
            }
            Pop::WaitUntil(t) => {
                if self.channels[c].wake_at != Some(t) {
                    self.channels[c].wake_at = Some(t);
                    self.events.schedule(t, Ev::Wake(c));
                }
            }
            Pop::Empty => {}
        }
    }

    fn order_done(&mut self, c: usize, i: usize) {
        self.channels[c].busy = false;
        let now = self.now();
        match self.channels[c].cutter.push(self.txs[i].id, now) {
            CutAction::Cut(batch) => self.emit_block(c, batch),
            CutAction::ArmTimer { at, generation } => {
                self.events.schedule(at, Ev::BlockCut(c, generation));
            }
            CutAction::None => {}
        }
        self.try_start_channel(c);
    }

    fn emit_block(&mut self, c: usize, batch: Vec<TxId>) {
        let now = self.now();
        self.commit_queue.push(now, ChannelId(c as u32), batch);
        self.request_commit();
    }

    fn request_commit(&mut self) {
        if !self.commit_start_pending && self.committing.is_none() {
            self.commit_start_pending = true;
            let now = self.now();
            self.events.schedule(now, Ev::CommitStart);
        }
    }

    fn commit_start(&mut self) {
        self.commit_start_pending = false;
        if self.committing.is_some() {
            return;
        }
        if let Some(next) = self.commit_queue.pop() {
            self.committing = Some(next);
            let end = self.now() + self.times.validate.sample(1.0);
            self.events.schedule(end, Ev::CommitDone);
        }
    }

    fn commit_done(&mut self) -> Result<(), SimError> {
        let (cut_time, channel, ids) = self.committing.take().expect("a block is being committed");
        let block = Block {
            height: self.state.height + 1,
            channel_id: channel,
            txs: ids
                .iter()
                .map(|id| {
                    let i = (id.0 - 1) as usize;
                    BlockTx {
                        tx: self.txs[i].clone(),
                        rwset: self.rwsets[i].clone().unwrap_or_default(),
                    }
                })
                .collect(),
            cut_time,
        };
        let mut pre: PreImages = Vec::new();
        for btx in &block.txs {
            for w in &btx.rwset.writes {
                if !pre.iter().any(|(a, _)| *a == w.addr) {
                    pre.push((w.addr.clone(), self.state.wallet(&w.addr).copied()));
                }
            }
        }
        let outcomes = commit_block(&block, &mut self.state).map_err(|e: CommitError| self.violation(e.to_string()))?;

        for (btx, outcome) in block.txs.iter().zip(&outcomes) {
            let i = (btx.tx.id.0 - 1) as usize;
            if let Some(assigner) = self.assigner.as_mut() {
                assigner
                    .release_locks(btx.tx.id)
                    .map_err(|e: AssignError| SimError::Invariant {
                        tick: self.clock.now(),
                        message: e.to_string(),
                    })?;
            }
            match outcome {
                TxOutcome::Committed => {
                    self.external_credit += btx.tx.operands.iter().map(|o| o.amount as i128).sum::<i128>();
                    self.record(i, TxStatus::Committed, None)?;
                }
                TxOutcome::Failed(cause) => self.record(i, TxStatus::Failed, Some(*cause))?,
            }
        }
        let availability = pre
            .iter()
            .filter_map(|(a, _)| self.state.wallet(a).map(|w| (a.clone(), w.available)))
            .collect();
        self.undo.push_back((block.height, pre));
        while self.undo.len() > self.cfg.endorser_lag.max_blocks as usize {
            self.undo.pop_front();
        }
        self.blocks.push(CommittedBlock {
            block,
            commit_time: self.now(),
            outcomes,
            availability,
        });
        if self.assigner.is_some() {
            if self.cfg.flags.check_invariants {
                self.assigner
                    .as_ref()
                    .unwrap()
                    .verify()
                    .map_err(|e| self.violation(e.to_string()))?;
            }
            self.request_assign();
        }
        if !self.commit_queue.is_empty() {
            self.request_commit();
        }
        Ok(())
    }

    fn finish(self) -> Result<SimulationOutput, SimError> {
        let genesis = {
            let mut g = self.cfg.workload.genesis();
            if self.down_ticks() > 0 {
                for d in &self.d_wallets {
                    let _ = g.set_available(d, false);
                }
            }
            g
        };
        let expected = genesis.total_balance() as i128 + self.external_credit;
        if self.state.total_balance() as i128 != expected {
            return Err(self.violation(format!(
                "balance total {} differs from genesis plus external credits {expected}",
                self.state.total_balance()
            )));
        }
        let assign_log = self.assigner.as_ref().map(|a| a.events().to_vec()).unwrap_or_default();
        Ok(SimulationOutput {
            strategy: self.cfg.strategy.clone(),
            trace: SimulationTrace { records: self.trace },
            transactions: self.txs,
            blocks: self.blocks,
            genesis,
            final_state: self.state,
            end_tick: self.clock.now(),
            assign_log,
        })
    }
}

fn exec_cause(e: &ExecError) -> FailCause {
    match e.kind() {
        ExecErrorKind::Overdraft => FailCause::Overdraft,
        ExecErrorKind::Unavailable => FailCause::Unavailable,
        ExecErrorKind::UnknownAddress => FailCause::UnknownAddress,
    }
}

/// Read and write wallet lists straight from the operands, no validation.
fn raw_wallet_sets(tx: &Transaction) -> (Vec<WalletAddress>, Vec<WalletAddress>) {
    let mut reads = Vec::new();
    let mut writes: Vec<WalletAddress> = Vec::new();
    for op in &tx.operands {
        if classify_operand(op) == AccessType::Write && !writes.contains(&op.addr) {
            writes.push(op.addr.clone());
        }
    }
    for op in &tx.operands {
        if !writes.contains(&op.addr) && !reads.contains(&op.addr) {
            reads.push(op.addr.clone());
        }
    }
    (reads, writes)
}
