//! Deterministic discrete-event simulation of a migration.
//!
//! The agents from [`crate::agents`] run over an event queue ordered by
//! `(time, sequence)`. Work items take the durations of the affine cost
//! model; checkpoint image sizes come from a Poisson page-dirtying process
//! that runs while the service is live (from the start of pre-copy round 0 to
//! the S1 freeze) and is reset at the start of every round.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{self, Write};
use std::net::{IpAddr, Ipv4Addr};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::agents::{
    self, step_spans, subscriptions, validate_task_id, Action, AgentState, Bus, BusMessage, ChannelTracker,
    ConnectionTuple, Endpoint, Event, FlowTable, ImageKind, Phase, ProtocolEvent, Role, TransportProtocol, WorkKind,
};
use crate::error::{ensure, Error, Result};
use crate::model::{Kpis, ModelParams, MsProfile, StepDurations, StepId, Strategy};
use crate::orchestrator::{MigrationConfig, MigrationTask};

/// Upper bound on processed events; a run that hits it is reported as failed.
const MAX_EVENTS: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Host {
    pub id: String,
    pub role: Role,
}

/// Undirected network link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub src: String,
    pub dst: String,
    /// Bytes per second.
    pub bandwidth: f64,
    pub latency_s: f64,
}

impl Link {
    pub fn connects(&self, a: &str, b: &str) -> bool {
        (self.src == a && self.dst == b) || (self.src == b && self.dst == a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub hosts: Vec<Host>,
    pub links: Vec<Link>,
    pub profile: MsProfile,
    /// Absolute rate of page-dirtying events while the service runs.
    pub dirty_rate_pages_per_s: f64,
    pub params: ModelParams,
    pub task: MigrationTask,
    pub seed: u64,
}

impl Scenario {
    /// Source `edge-1` and destination `edge-2` joined by one link; the
    /// orchestrator and client are co-located with no latency.
    pub fn two_hosts(profile: MsProfile, params: ModelParams, bandwidth: f64, latency_s: f64) -> Self {
        Self {
            hosts: vec![
                Host {
                    id: "edge-1".into(),
                    role: Role::Source,
                },
                Host {
                    id: "edge-2".into(),
                    role: Role::Destination,
                },
            ],
            links: vec![Link {
                src: "edge-1".into(),
                dst: "edge-2".into(),
                bandwidth,
                latency_s,
            }],
            profile,
            dirty_rate_pages_per_s: 0.0,
            params,
            task: MigrationTask::minimize_downtime("svc", "edge-1", "edge-2", 10.0),
            seed: 0,
        }
    }

    pub fn with_dirty_rate(mut self, pages_per_s: f64) -> Self {
        self.dirty_rate_pages_per_s = pages_per_s;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_task(mut self, task: MigrationTask) -> Self {
        self.task = task;
        self
    }

    pub fn link_between(&self, a: &str, b: &str) -> Option<&Link> {
        self.links.iter().find(|l| l.connects(a, b))
    }

    /// The link the migration runs over.
    pub fn migration_link(&self) -> Result<&Link> {
        self.link_between(&self.task.source_agent, &self.task.destination_agent)
            .ok_or_else(|| {
                Error::Scenario(format!(
                    "no link between {} and {}",
                    self.task.source_agent, self.task.destination_agent
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(m));
        for (i, h) in self.hosts.iter().enumerate() {
            if self.hosts[..i].iter().any(|o| o.id == h.id) {
                return bad(format!("duplicate host {}", h.id));
            }
        }
        for l in &self.links {
            for end in [&l.src, &l.dst] {
                if !self.hosts.iter().any(|h| &h.id == end) {
                    return bad(format!("link endpoint {end} is not a host"));
                }
            }
            if !(l.bandwidth > 0.0 && l.bandwidth.is_finite() && l.latency_s >= 0.0 && l.latency_s.is_finite()) {
                return bad(format!("link {}-{} needs positive bandwidth and nonnegative latency", l.src, l.dst));
            }
        }
        for agent in [&self.task.source_agent, &self.task.destination_agent] {
            if !self.hosts.iter().any(|h| &h.id == agent) {
                return bad(format!("task agent {agent} is not a host"));
            }
        }
        self.migration_link()?;
        validate_task_id(&self.task.container_id)?;
        self.task.validate()?;
        self.profile.validate()?;
        self.params.validate()?;
        if !(self.dirty_rate_pages_per_s >= 0.0 && self.dirty_rate_pages_per_s.is_finite()) {
            return bad(format!("dirty rate {} must be finite and nonnegative", self.dirty_rate_pages_per_s));
        }
        Ok(())
    }

    fn host_with_role(&self, role: Role) -> Option<&str> {
        self.hosts.iter().find(|h| h.role == role).map(|h| h.id.as_str())
    }
}

/// Pages dirtied by a Poisson stream of writes to uniformly random pages.
#[derive(Debug, Clone)]
pub struct DirtyProcess {
    pages: Vec<bool>,
    touched: Vec<usize>,
    rng: ChaCha8Rng,
    inter_arrival: Option<Exp<f64>>,
    next_arrival_s: f64,
}

impl DirtyProcess {
    pub fn new(rate_pages_per_s: f64, total_pages: u64, seed: u64) -> Self {
        let inter_arrival = (rate_pages_per_s > 0.0 && total_pages > 0)
            .then(|| Exp::new(rate_pages_per_s).expect("positive rate"));
        Self {
            pages: vec![false; total_pages as usize],
            touched: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            inter_arrival,
            next_arrival_s: f64::INFINITY,
        }
    }

    /// Starts the arrival stream at `time_s`.
    pub fn start(&mut self, time_s: f64) {
        self.next_arrival_s = match &self.inter_arrival {
            Some(exp) => time_s + exp.sample(&mut self.rng),
            None => f64::INFINITY,
        };
    }

    /// Applies every write that arrives up to and including `time_s`.
    pub fn advance_to(&mut self, time_s: f64) {
        let Some(exp) = self.inter_arrival else { return };
        while self.next_arrival_s <= time_s {
            let page = self.rng.random_range(0..self.pages.len());
            if !self.pages[page] {
                self.pages[page] = true;
                self.touched.push(page);
            }
            self.next_arrival_s += exp.sample(&mut self.rng);
        }
    }

    pub fn dirty_pages(&self) -> u64 {
        self.touched.len() as u64
    }

    /// Marks every page clean; writes keep arriving.
    pub fn clear(&mut self) {
        for p in self.touched.drain(..) {
            self.pages[p] = false;
        }
    }
}

/// Distinct pages dirtied after `elapsed_s` of writes at `rate_pages_per_s`.
pub fn dirty_set_size(rate_pages_per_s: f64, elapsed_s: f64, total_pages: u64, seed: u64) -> u64 {
    let mut p = DirtyProcess::new(rate_pages_per_s, total_pages, seed);
    p.start(0.0);
    p.advance_to(elapsed_s);
    p.dirty_pages()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Drop,
    Duplicate,
    /// Held back until the next delivery on the same channel has gone out.
    /// A held message that nothing overtakes is lost.
    Reorder,
}

/// Faults keyed by delivery index (0-based, in the order the bus routes
/// deliveries; one publish to two subscribers is two deliveries).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub faults: BTreeMap<u64, FaultKind>,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn single(delivery_index: u64, kind: FaultKind) -> Self {
        Self {
            faults: BTreeMap::from([(delivery_index, kind)]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationOutcome {
    pub status: RunStatus,
    /// Measured KPIs; present when the run completed.
    pub kpis: Option<Kpis>,
    pub event_log: Vec<ProtocolEvent>,
    pub dirty_pages_at_stopcopy: u64,
    /// Bytes of each pre-copy image, round 0 first.
    pub round_volumes: Vec<f64>,
    pub stop_copy_image_bytes: f64,
    /// Bus messages sent, counting a publish once regardless of subscribers.
    pub messages_sent: u64,
    pub deliveries: u64,
    pub diagnostics: Vec<String>,
    pub client_flows: FlowTable,
}

impl MigrationOutcome {
    pub fn measured(&self) -> Result<Kpis> {
        self.kpis.ok_or_else(|| {
            Error::domain(format!("migration failed: {}", self.diagnostics.first().map_or("", String::as_str)))
        })
    }

    pub fn write_event_log<W: Write>(&self, out: W) -> io::Result<()> {
        write_event_log(out, &self.event_log)
    }
}

/// Writes one JSON object per line.
pub fn write_event_log<W: Write>(mut out: W, log: &[ProtocolEvent]) -> io::Result<()> {
    for e in log {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Connection the simulated client keeps to the migrating service.
pub fn client_connection() -> ConnectionTuple {
    ConnectionTuple {
        protocol: TransportProtocol::Tcp,
        src_addr: IpAddr::V4(Ipv4Addr::new(10, 0, 0, 2)),
        src_port: 40000,
        dst_addr: IpAddr::V4(Ipv4Addr::new(10, 0, 1, 10)),
        dst_port: 5000,
    }
}

struct Scheduled {
    time_s: f64,
    seq: u64,
    agent: usize,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time_s.total_cmp(&self.time_s).then(other.seq.cmp(&self.seq))
    }
}

struct Sim<'a> {
    scenario: &'a Scenario,
    config: &'a MigrationConfig,
    faults: &'a FaultPlan,
    agents: Vec<AgentState>,
    hosts: Vec<Option<String>>,
    trackers: Vec<ChannelTracker>,
    bus: Bus,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    deliveries: u64,
    held: BTreeMap<(String, String), Vec<(f64, usize, BusMessage)>>,
    dirty: DirtyProcess,
    out: MigrationOutcome,
    migration_start_s: Option<f64>,
    bytes_transferred: f64,
}

impl Sim<'_> {
    fn index(&self, agent: &str) -> usize {
        self.agents.iter().position(|a| a.id == agent).expect("routed to a known agent")
    }

    fn schedule(&mut self, time_s: f64, agent: usize, event: Event) {
        self.seq += 1;
        self.queue.push(Scheduled {
            time_s,
            seq: self.seq,
            agent,
            event,
        });
    }

    fn latency(&self, a: usize, b: usize) -> f64 {
        match (&self.hosts[a], &self.hosts[b]) {
            (Some(ha), Some(hb)) => self.scenario.link_between(ha, hb).map_or(0.0, |l| l.latency_s),
            _ => 0.0,
        }
    }

    /// Routes `msg` and schedules its deliveries, applying injected faults.
    fn send(&mut self, now: f64, msg: BusMessage, delay: Option<f64>) {
        self.out.messages_sent += 1;
        let from = self.index(&msg.sender);
        for (receiver, stamped) in self.bus.route(&msg) {
            let to = self.index(&receiver);
            let at = now + delay.unwrap_or_else(|| self.latency(from, to));
            let index = self.deliveries;
            self.deliveries += 1;
            let channel = (stamped.sender.clone(), receiver);
            match self.faults.faults.get(&index) {
                Some(FaultKind::Drop) => continue,
                Some(FaultKind::Reorder) => {
                    self.held.entry(channel).or_default().push((at, to, stamped));
                    continue;
                }
                Some(FaultKind::Duplicate) => self.schedule(at, to, Event::Message(stamped.clone())),
                None => {}
            }
            self.schedule(at, to, Event::Message(stamped));
            for (held_at, held_to, held) in self.held.remove(&channel).unwrap_or_default() {
                self.schedule(at.max(held_at), held_to, Event::Message(held));
            }
        }
    }

    fn start_work(&mut self, now: f64, agent: usize, kind: WorkKind, input_bytes: f64) {
        let p = &self.scenario.params;
        let profile = &self.scenario.profile;
        let state = profile.state_size_bytes as f64;
        let page = profile.page_size_bytes as f64;
        let (duration, produced) = match kind {
            WorkKind::PreCheckpoint(round) => {
                let volume = if round == 0 {
                    self.migration_start_s = Some(now);
                    self.dirty.start(now);
                    state
                } else {
                    self.dirty.advance_to(now);
                    (self.dirty.dirty_pages() as f64 * page).min(state)
                };
                self.dirty.clear();
                self.out.round_volumes.push(volume);
                (p.pre_checkpoint_s(volume), volume)
            }
            WorkKind::Checkpoint => {
                self.migration_start_s.get_or_insert(now);
                let image = match self.config.strategy {
                    Strategy::Cold => state,
                    _ => {
                        self.dirty.advance_to(now);
                        self.out.dirty_pages_at_stopcopy = self.dirty.dirty_pages();
                        (self.dirty.dirty_pages() as f64 * page).min(state) + profile.cpu_context_bytes as f64
                    }
                };
                self.out.stop_copy_image_bytes = image;
                (p.checkpoint_s(image), image)
            }
            WorkKind::NsClear | WorkKind::NsCreate => (p.ns_overhead_s, 0.0),
            WorkKind::FlowUpdate => (p.flow_update_s, 0.0),
            WorkKind::Restore => (p.restore_s(input_bytes), 0.0),
        };
        self.schedule(now + duration, agent, Event::WorkDone { kind, image_bytes: produced });
    }

    fn apply(&mut self, now: f64, agent: usize, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send(mut msg) => {
                    msg.timestamp_s = now;
                    self.send(now, msg, None);
                }
                Action::Transfer { mut reply, bytes } => {
                    reply.timestamp_s = now;
                    let image = reply.header.image.unwrap_or(ImageKind::StopCopy);
                    let duration = self.scenario.params.transfer_s(bytes, self.config.bandwidth);
                    self.bytes_transferred += bytes;
                    self.send(now, reply, Some(duration));
                    self.schedule(now + duration, agent, Event::TransferComplete { image });
                }
                Action::Work { kind, image_bytes } => self.start_work(now, agent, kind, image_bytes),
                Action::Diagnostic(d) => self.out.diagnostics.push(d),
            }
        }
    }

    fn run(mut self) -> MigrationOutcome {
        self.schedule(0.0, 0, Event::Start);
        let mut processed = 0u64;
        let mut timed_out = false;
        let mut now = 0.0;
        loop {
            let Some(next) = self.queue.pop() else {
                if timed_out || self.agents.iter().all(|a| a.phase.is_terminal()) {
                    break;
                }
                timed_out = true;
                for (channel, held) in std::mem::take(&mut self.held) {
                    for (_, _, m) in held {
                        self.out.diagnostics.push(format!("held message {} on {channel:?} was never overtaken and is lost", m.label()));
                    }
                }
                for i in 0..self.agents.len() {
                    if !self.agents[i].phase.is_terminal() {
                        self.schedule(now, i, Event::Timeout);
                    }
                }
                continue;
            };
            processed += 1;
            if processed > MAX_EVENTS {
                self.out.diagnostics.push(format!("event budget of {MAX_EVENTS} exhausted"));
                break;
            }
            now = next.time_s;
            let i = next.agent;
            let mut event = next.event;
            if let Event::Message(m) = &event {
                if let Err(d) = self.trackers[i].accept(m) {
                    self.out.diagnostics.push(format!("{}: {d}", self.agents[i].id));
                    event = Event::ChannelFault(d);
                }
            }
            let before = self.agents[i].phase;
            let (after, actions) = std::mem::replace(&mut self.agents[i], AgentState::new("", Role::Client, "")).advance(&event);
            self.agents[i] = after;
            self.out.event_log.push(ProtocolEvent {
                timestamp_s: now,
                agent: self.agents[i].id.clone(),
                phase_before: before.to_string(),
                event_kind: event.label(),
                phase_after: self.agents[i].phase.to_string(),
                actions: actions.iter().map(Action::label).collect(),
            });
            self.apply(now, i, actions);
        }
        self.finish()
    }

    fn finish(mut self) -> MigrationOutcome {
        self.out.deliveries = self.deliveries;
        self.out.client_flows = self.agents[3].ctx.flows.clone();
        let all_done = self.agents.iter().all(|a| a.phase == Phase::Done);
        if !all_done || !self.out.diagnostics.is_empty() {
            self.out.status = RunStatus::Failed;
            if self.out.diagnostics.is_empty() {
                self.out.diagnostics.push("run ended with agents outside Done".into());
            }
            return self.out;
        }
        let spans = step_spans(&self.out.event_log);
        let mut steps = StepDurations::default();
        for (step, span) in &spans {
            steps.set(*step, span.end_s - span.start_s);
        }
        let (Some(s1), Some(s6), Some(start)) = (spans.get(&StepId::S1), spans.get(&StepId::S6), self.migration_start_s) else {
            self.out.status = RunStatus::Failed;
            self.out.diagnostics.push("trace lacks the Stop&Copy window".into());
            return self.out;
        };
        self.out.kpis = Some(Kpis {
            steps,
            downtime_s: s6.end_s - s1.start_s,
            total_s: s6.end_s - start,
            bytes_transferred: self.bytes_transferred,
        });
        self.out
    }
}

/// Runs `config` on `scenario` without faults.
pub fn run_scenario(scenario: &Scenario, config: &MigrationConfig) -> Result<MigrationOutcome> {
    run_scenario_with_faults(scenario, config, &FaultPlan::none())
}

pub fn run_scenario_with_faults(scenario: &Scenario, config: &MigrationConfig, faults: &FaultPlan) -> Result<MigrationOutcome> {
    scenario.validate()?;
    let link = scenario.migration_link()?;
    ensure(config.bandwidth > 0.0 && config.bandwidth.is_finite(), || {
        format!("configured bandwidth {} must be positive", config.bandwidth)
    })?;
    ensure(config.bandwidth <= link.bandwidth, || {
        format!(
            "configured bandwidth {} B/s exceeds link capacity {} B/s",
            config.bandwidth, link.bandwidth
        )
    })?;

    let task = &scenario.task;
    let task_id = task.container_id.as_str();
    let orchestrator_id = scenario.host_with_role(Role::Orchestrator).unwrap_or("orchestrator");
    let client_id = scenario.host_with_role(Role::Client).unwrap_or("client");
    let ids = [orchestrator_id, &task.source_agent, &task.destination_agent, client_id];
    for (i, id) in ids.iter().enumerate() {
        ensure(!ids[..i].contains(id), || format!("agent id {id} is used twice"))?;
    }

    let mut flows = FlowTable::new();
    flows.insert(
        client_connection(),
        Endpoint {
            host: task.source_agent.clone(),
            namespace: format!("{task_id}-ns"),
        },
    );
    let agents = vec![
        AgentState::orchestrator(orchestrator_id, task_id, *config),
        AgentState::new(&task.source_agent, Role::Source, task_id),
        AgentState::new(&task.destination_agent, Role::Destination, task_id),
        AgentState::client(client_id, task_id, flows, client_connection()),
    ];
    let mut bus = Bus::new();
    for a in &agents {
        for pattern in subscriptions(a.role, task_id) {
            bus.subscribe(&a.id, &pattern);
        }
    }
    let hosts = ids
        .iter()
        .map(|id| scenario.hosts.iter().any(|h| h.id == *id).then(|| id.to_string()))
        .collect();

    let sim = Sim {
        scenario,
        config,
        faults,
        trackers: vec![ChannelTracker::default(); agents.len()],
        agents,
        hosts,
        bus,
        queue: BinaryHeap::new(),
        seq: 0,
        deliveries: 0,
        held: BTreeMap::new(),
        dirty: DirtyProcess::new(scenario.dirty_rate_pages_per_s, scenario.profile.page_count(), scenario.seed),
        out: MigrationOutcome {
            status: RunStatus::Completed,
            kpis: None,
            event_log: Vec::new(),
            dirty_pages_at_stopcopy: 0,
            round_volumes: Vec::new(),
            stop_copy_image_bytes: 0.0,
            messages_sent: 0,
            deliveries: 0,
            diagnostics: Vec::new(),
            client_flows: FlowTable::new(),
        },
        migration_start_s: None,
        bytes_transferred: 0.0,
    };
    Ok(sim.run())
}

/// Convenience re-export so callers can assert on traces without importing
/// the agents module.
pub use agents::check_happens_before;
