//! Migration agents and the pub/sub/query protocol they speak.
//!
//! Four roles take part in a migration: the orchestrator publishes the task,
//! the source agent checkpoints and serves images, the destination agent pulls
//! images and restores, and the client agent redirects the service's network
//! flow. Each agent is a pure state machine: [`AgentState::advance`] consumes
//! one [`Event`] and returns the successor state plus the [`Action`]s an
//! executor (see [`crate::simnet`]) must carry out.
//!
//! Topics follow `mose/{task_id}/{publisher_role}/{step}`. Replies are routed
//! straight back to the querying agent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, MsProfile, StepId, Strategy};
use crate::orchestrator::MigrationConfig;

pub const TOPIC_ROOT: &str = "mose";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Destination,
    Client,
    Orchestrator,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Orchestrator, Role::Source, Role::Destination, Role::Client];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Destination => "destination",
            Role::Client => "client",
            Role::Orchestrator => "orchestrator",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which checkpoint image a pull refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    /// Round 0 of pre-copy: the whole state.
    Full,
    /// Pages dirtied during the previous round.
    Dirty(u32),
    /// The frozen image taken at S1.
    StopCopy,
}

impl ImageKind {
    pub fn for_round(round: u32) -> Self {
        if round == 0 {
            ImageKind::Full
        } else {
            ImageKind::Dirty(round)
        }
    }

    pub fn round(self) -> Option<u32> {
        match self {
            ImageKind::Full => Some(0),
            ImageKind::Dirty(k) => Some(k),
            ImageKind::StopCopy => None,
        }
    }
}

impl fmt::Display for ImageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageKind::Full => f.write_str("full"),
            ImageKind::Dirty(k) => write!(f, "dirty-{k}"),
            ImageKind::StopCopy => f.write_str("stop-copy"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    /// Orchestrator waiting for the start and completion notices.
    Monitoring,
    PreCopyRound(u32),
    AwaitImagePull(ImageKind),
    StopCopyCheckpoint,
    NamespaceTransition,
    AwaitRestore,
    Done,
    Failed,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Failed)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Idle => f.write_str("idle"),
            Phase::Monitoring => f.write_str("monitoring"),
            Phase::PreCopyRound(k) => write!(f, "pre-copy-round({k})"),
            Phase::AwaitImagePull(kind) => write!(f, "await-image-pull({kind})"),
            Phase::StopCopyCheckpoint => f.write_str("stop-copy-checkpoint"),
            Phase::NamespaceTransition => f.write_str("namespace-transition"),
            Phase::AwaitRestore => f.write_str("await-restore"),
            Phase::Done => f.write_str("done"),
            Phase::Failed => f.write_str("failed"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Publish,
    Query,
    Reply,
}

impl MessageKind {
    fn as_str(self) -> &'static str {
        match self {
            MessageKind::Publish => "publish",
            MessageKind::Query => "query",
            MessageKind::Reply => "reply",
        }
    }
}

pub mod steps {
    pub const TASK: &str = "task";
    pub const STARTED: &str = "started";
    pub const NS_CONFIG: &str = "ns-config";
    pub const READY: &str = "ready";
    pub const IMAGE: &str = "image";
    pub const NS_READY: &str = "ns-ready";
    pub const FLOW_UPDATED: &str = "flow-updated";
    pub const DONE: &str = "done";
    pub const FAILED: &str = "failed";
}

pub fn topic(task_id: &str, role: Role, step: &str) -> String {
    format!("{TOPIC_ROOT}/{task_id}/{role}/{step}")
}

/// Matches a topic against a subscription pattern. `+` matches exactly one
/// level, a trailing `#` matches any remaining levels.
pub fn topic_matches(pattern: &str, topic: &str) -> bool {
    let mut levels = topic.split('/');
    for p in pattern.split('/') {
        if p == "#" {
            return true;
        }
        match levels.next() {
            Some(level) if p == "+" || p == level => {}
            _ => return false,
        }
    }
    levels.next().is_none()
}

/// Task ids become a topic level, so they cannot contain separators or
/// wildcards.
pub fn validate_task_id(task_id: &str) -> Result<()> {
    if task_id.is_empty() || task_id.contains(['/', '+', '#']) {
        return Err(Error::Scenario(format!("task id {task_id:?} is not a valid topic level")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<StepId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageKind>,
    #[serde(default)]
    pub image_bytes: f64,
}

impl Header {
    pub fn new(task_id: &str) -> Self {
        Self {
            task_id: task_id.into(),
            step: None,
            image: None,
            image_bytes: 0.0,
        }
    }

    fn step(mut self, step: StepId) -> Self {
        self.step = Some(step);
        self
    }

    fn image(mut self, image: ImageKind, bytes: f64) -> Self {
        self.image = Some(image);
        self.image_bytes = bytes;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusMessage {
    pub kind: MessageKind,
    pub topic: String,
    pub sender: String,
    /// Set on replies, which bypass topic routing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipient: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_id: Option<u64>,
    /// Per (sender, receiver) channel sequence number, stamped by the bus.
    #[serde(default)]
    pub seq: u64,
    pub header: Header,
    #[serde(default)]
    pub payload: Vec<u8>,
    #[serde(default)]
    pub timestamp_s: f64,
}

impl BusMessage {
    pub fn publish(sender: &str, topic: String, header: Header) -> Self {
        Self {
            kind: MessageKind::Publish,
            topic,
            sender: sender.into(),
            recipient: None,
            correlation_id: None,
            seq: 0,
            header,
            payload: Vec::new(),
            timestamp_s: 0.0,
        }
    }

    pub fn query(sender: &str, topic: String, header: Header, correlation_id: u64) -> Self {
        Self {
            kind: MessageKind::Query,
            correlation_id: Some(correlation_id),
            ..Self::publish(sender, topic, header)
        }
    }

    pub fn reply_to(query: &BusMessage, sender: &str, header: Header) -> Self {
        Self {
            kind: MessageKind::Reply,
            recipient: Some(query.sender.clone()),
            correlation_id: query.correlation_id,
            ..Self::publish(sender, query.topic.clone(), header)
        }
    }

    pub fn with_payload(mut self, payload: Vec<u8>) -> Self {
        self.payload = payload;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::domain(format!("{m} on {:?}", self.topic)));
        if self.topic.is_empty() {
            return fail("empty topic");
        }
        match self.kind {
            MessageKind::Publish => Ok(()),
            MessageKind::Query if self.correlation_id.is_none() => fail("query without correlation id"),
            MessageKind::Reply if self.correlation_id.is_none() || self.recipient.is_none() => {
                fail("reply without correlation id or recipient")
            }
            _ => Ok(()),
        }
    }

    fn is(&self, kind: MessageKind, role: Role, step: &str) -> bool {
        self.kind == kind && self.topic == topic(&self.header.task_id, role, step)
    }

    /// Compact label used in event logs, e.g. `publish mose/t/source/ready [dirty-2]`.
    pub fn label(&self) -> String {
        match self.header.image {
            Some(image) => format!("{} {} [{image}]", self.kind.as_str(), self.topic),
            None => format!("{} {}", self.kind.as_str(), self.topic),
        }
    }
}

/// Topic patterns an agent of `role` subscribes to.
pub fn subscriptions(role: Role, task_id: &str) -> Vec<String> {
    let t = |r: Role, s: &str| topic(task_id, r, s);
    match role {
        Role::Orchestrator => vec![
            t(Role::Source, steps::STARTED),
            t(Role::Destination, steps::DONE),
            format!("{TOPIC_ROOT}/{task_id}/+/{}", steps::FAILED),
        ],
        Role::Source => vec![
            t(Role::Orchestrator, steps::TASK),
            t(Role::Destination, steps::NS_CONFIG),
            t(Role::Destination, steps::IMAGE),
        ],
        Role::Destination => vec![
            t(Role::Orchestrator, steps::TASK),
            t(Role::Source, steps::READY),
            t(Role::Client, steps::FLOW_UPDATED),
        ],
        Role::Client => vec![t(Role::Destination, steps::NS_READY)],
    }
}

/// In-process message router. Delivery timing is left to the executor; the
/// bus resolves receivers and stamps channel sequence numbers.
#[derive(Debug, Clone, Default)]
pub struct Bus {
    subscriptions: Vec<(String, String)>,
    channel_seq: BTreeMap<(String, String), u64>,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&mut self, agent: &str, pattern: &str) {
        self.subscriptions.push((pattern.to_string(), agent.to_string()));
    }

    /// Subscribers of `topic` in subscription order, without duplicates.
    pub fn subscribers(&self, topic: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (pattern, agent) in &self.subscriptions {
            if topic_matches(pattern, topic) && !out.contains(agent) {
                out.push(agent.clone());
            }
        }
        out
    }

    /// Resolves the receivers of `msg` and returns one stamped copy per
    /// receiver. A message nobody listens to yields no deliveries.
    pub fn route(&mut self, msg: &BusMessage) -> Vec<(String, BusMessage)> {
        let receivers = match &msg.recipient {
            Some(r) => vec![r.clone()],
            None => self.subscribers(&msg.topic),
        };
        receivers
            .into_iter()
            .filter(|r| *r != msg.sender)
            .map(|r| {
                let seq = self.channel_seq.entry((msg.sender.clone(), r.clone())).or_insert(0);
                *seq += 1;
                let stamped = BusMessage {
                    seq: *seq,
                    ..msg.clone()
                };
                (r, stamped)
            })
            .collect()
    }
}

/// Receiver-side check that every channel delivers `1, 2, 3, ...` in order.
/// Catches dropped, duplicated and reordered messages.
#[derive(Debug, Clone, Default)]
pub struct ChannelTracker {
    expected: BTreeMap<String, u64>,
}

impl ChannelTracker {
    pub fn accept(&mut self, msg: &BusMessage) -> std::result::Result<(), String> {
        let next = self.expected.entry(msg.sender.clone()).or_insert(1);
        if msg.seq != *next {
            let what = if msg.seq < *next { "duplicate or stale" } else { "gap" };
            return Err(format!(
                "channel {what} from {}: expected seq {}, got {} ({})",
                msg.sender,
                next,
                msg.seq,
                msg.label()
            ));
        }
        *next += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkKind {
    PreCheckpoint(u32),
    Checkpoint,
    NsClear,
    NsCreate,
    FlowUpdate,
    Restore,
}

impl WorkKind {
    pub fn step(self) -> Option<StepId> {
        match self {
            WorkKind::PreCheckpoint(_) => None,
            WorkKind::Checkpoint => Some(StepId::S1),
            WorkKind::NsClear => Some(StepId::S2),
            WorkKind::NsCreate => Some(StepId::S4),
            WorkKind::FlowUpdate => Some(StepId::S5),
            WorkKind::Restore => Some(StepId::S6),
        }
    }

    pub fn label(self) -> String {
        match self {
            WorkKind::PreCheckpoint(k) => format!("pre-checkpoint({k})"),
            WorkKind::Checkpoint => "S1-checkpoint".into(),
            WorkKind::NsClear => "S2-ns-clear".into(),
            WorkKind::NsCreate => "S4-ns-create".into(),
            WorkKind::FlowUpdate => "S5-flow-update".into(),
            WorkKind::Restore => "S6-restore".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    /// Kicks off the orchestrator.
    Start,
    Message(BusMessage),
    /// Simulated work finished. Checkpoint kinds report the image they produced.
    WorkDone { kind: WorkKind, image_bytes: f64 },
    /// The sender side of an image transfer finished.
    TransferComplete { image: ImageKind },
    /// The transport saw an out-of-order delivery on one of this agent's channels.
    ChannelFault(String),
    /// Nothing else will ever arrive.
    Timeout,
}

impl Event {
    pub fn label(&self) -> String {
        match self {
            Event::Start => "start".into(),
            Event::Message(m) => m.label(),
            Event::WorkDone { kind, .. } => format!("done {}", kind.label()),
            Event::TransferComplete { image } => format!("transfer-complete [{image}]"),
            Event::ChannelFault(_) => "channel-fault".into(),
            Event::Timeout => "timeout".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send(BusMessage),
    /// Bulk image transfer; `reply` is delivered once `bytes` have crossed the link.
    Transfer { reply: BusMessage, bytes: f64 },
    /// Start simulated work. `image_bytes` is the restore input; the executor
    /// determines checkpoint image sizes itself.
    Work { kind: WorkKind, image_bytes: f64 },
    Diagnostic(String),
}

impl Action {
    pub fn label(&self) -> String {
        match self {
            Action::Send(m) => m.label(),
            Action::Transfer { reply, bytes } => {
                let image = reply.header.image.map(|i| i.to_string()).unwrap_or_default();
                format!("transfer [{image}] {bytes}B")
            }
            Action::Work { kind, .. } => format!("work {}", kind.label()),
            Action::Diagnostic(d) => format!("diagnostic: {d}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportProtocol {
    Tcp,
    Udp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConnectionTuple {
    pub protocol: TransportProtocol,
    pub src_addr: IpAddr,
    pub src_port: u16,
    pub dst_addr: IpAddr,
    pub dst_port: u16,
}

/// Where the overlay forwards a connection: a network namespace on a host.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: String,
    pub namespace: String,
}

/// Client-side overlay flow table.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlowTable {
    entries: BTreeMap<ConnectionTuple, Endpoint>,
}

impl FlowTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the entry for `connection`.
    pub fn insert(&mut self, connection: ConnectionTuple, egress: Endpoint) {
        self.entries.insert(connection, egress);
    }

    pub fn egress(&self, connection: &ConnectionTuple) -> Option<&Endpoint> {
        self.entries.get(connection)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ConnectionTuple, &Endpoint)> {
        self.entries.iter()
    }
}

/// Redirects `connection` to `new_egress`, returning the updated table. The
/// input table is untouched, so readers of it never see a partial update.
pub fn update_flow(table: &FlowTable, connection: &ConnectionTuple, new_egress: Endpoint) -> Result<FlowTable> {
    if !table.entries.contains_key(connection) {
        return Err(Error::MissingFlow(format!("{connection:?}")));
    }
    let mut next = table.clone();
    next.entries.insert(*connection, new_egress);
    Ok(next)
}

/// Namespace description served by the source to the destination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamespaceConfig {
    pub namespace: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pending {
    NsConfig,
    Image(ImageKind),
}

/// Role-specific working memory of an agent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentContext {
    pub config: Option<MigrationConfig>,
    next_correlation: u64,
    pending: BTreeMap<u64, Pending>,
    /// Images the source has started to serve; each may be pulled once.
    served: BTreeSet<ImageKind>,
    in_flight: Option<ImageKind>,
    pub image_bytes: f64,
    pub ns_config: Option<NamespaceConfig>,
    restoring: bool,
    started_seen: bool,
    pub flows: FlowTable,
    pub connection: Option<ConnectionTuple>,
    new_egress: Option<Endpoint>,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: String,
    pub role: Role,
    pub task_id: String,
    pub phase: Phase,
    pub ctx: AgentContext,
}

type StepResult = std::result::Result<Vec<Action>, String>;

impl AgentState {
    pub fn new(id: &str, role: Role, task_id: &str) -> Self {
        Self {
            id: id.into(),
            role,
            task_id: task_id.into(),
            phase: Phase::Idle,
            ctx: AgentContext::default(),
        }
    }

    /// Orchestrator that will publish `config` when started.
    pub fn orchestrator(id: &str, task_id: &str, config: MigrationConfig) -> Self {
        let mut s = Self::new(id, Role::Orchestrator, task_id);
        s.ctx.config = Some(config);
        s
    }

    /// Client agent owning the flow table entry for `connection`.
    pub fn client(id: &str, task_id: &str, flows: FlowTable, connection: ConnectionTuple) -> Self {
        let mut s = Self::new(id, Role::Client, task_id);
        s.ctx.flows = flows;
        s.ctx.connection = Some(connection);
        s
    }

    /// Consumes one event. Terminal phases absorb everything; an event that
    /// is not valid in the current phase moves the agent to `Failed` with a
    /// diagnostic and, except for the orchestrator, a failure report.
    pub fn advance(mut self, event: &Event) -> (Self, Vec<Action>) {
        if self.phase.is_terminal() {
            return (self, Vec::new());
        }
        let outcome = match event {
            Event::Timeout => Err(format!("timed out in phase {}", self.phase)),
            Event::ChannelFault(d) => Err(d.clone()),
            Event::Message(m) if m.header.task_id != self.task_id => {
                Err(format!("message for foreign task {:?}", m.header.task_id))
            }
            _ => match self.role {
                Role::Source => self.source_step(event),
                Role::Destination => self.destination_step(event),
                Role::Client => self.client_step(event),
                Role::Orchestrator => self.orchestrator_step(event),
            },
        };
        match outcome {
            Ok(actions) => (self, actions),
            Err(diagnostic) => self.fail(diagnostic),
        }
    }

    fn fail(mut self, diagnostic: String) -> (Self, Vec<Action>) {
        let diagnostic = format!("{} ({}) in {}: {diagnostic}", self.id, self.role, self.phase);
        self.phase = Phase::Failed;
        self.ctx.diagnostic = Some(diagnostic.clone());
        let mut actions = vec![Action::Diagnostic(diagnostic.clone())];
        if self.role != Role::Orchestrator {
            let report = BusMessage::publish(&self.id, self.topic(steps::FAILED), self.header())
                .with_payload(diagnostic.into_bytes());
            actions.push(Action::Send(report));
        }
        (self, actions)
    }

    fn topic(&self, step: &str) -> String {
        topic(&self.task_id, self.role, step)
    }

    fn header(&self) -> Header {
        Header::new(&self.task_id)
    }

    fn publish(&self, step: &str, header: Header) -> Action {
        Action::Send(BusMessage::publish(&self.id, self.topic(step), header))
    }

    fn query(&mut self, step: &str, header: Header, pending: Pending) -> Action {
        self.ctx.next_correlation += 1;
        let id = self.ctx.next_correlation;
        self.ctx.pending.insert(id, pending);
        Action::Send(BusMessage::query(&self.id, self.topic(step), header, id))
    }

    /// Removes and returns the outstanding query a reply answers.
    fn take_pending(&mut self, reply: &BusMessage) -> std::result::Result<Pending, String> {
        reply
            .correlation_id
            .and_then(|c| self.ctx.pending.remove(&c))
            .ok_or_else(|| format!("reply without an outstanding query: {}", reply.label()))
    }

    fn strategy(&self) -> Strategy {
        self.ctx.config.map_or(Strategy::Cold, |c| c.strategy)
    }

    fn accept_task(&mut self, m: &BusMessage) -> std::result::Result<MigrationConfig, String> {
        let config: MigrationConfig =
            serde_json::from_slice(&m.payload).map_err(|e| format!("unreadable task payload: {e}"))?;
        self.ctx.config = Some(config);
        Ok(config)
    }

    fn unexpected(&self, event: &Event) -> String {
        format!("unexpected {}", event.label())
    }

    fn source_step(&mut self, event: &Event) -> StepResult {
        use Event::*;
        match (self.phase, event) {
            // Read-only; answered whenever it arrives.
            (_, Message(m)) if m.is(MessageKind::Query, Role::Destination, steps::NS_CONFIG) => {
                let cfg = NamespaceConfig {
                    namespace: format!("{}-ns", self.task_id),
                };
                let reply = BusMessage::reply_to(m, &self.id, self.header())
                    .with_payload(serde_json::to_vec(&cfg).expect("namespace config serializes"));
                Ok(vec![Action::Send(reply)])
            }
            (Phase::Idle, Message(m)) if m.is(MessageKind::Publish, Role::Orchestrator, steps::TASK) => {
                let config = self.accept_task(m)?;
                let started = self.publish(steps::STARTED, self.header());
                let work = if config.strategy.is_precopy() {
                    self.phase = Phase::PreCopyRound(0);
                    WorkKind::PreCheckpoint(0)
                } else {
                    self.phase = Phase::StopCopyCheckpoint;
                    WorkKind::Checkpoint
                };
                Ok(vec![started, Action::Work { kind: work, image_bytes: 0.0 }])
            }
            (Phase::PreCopyRound(k), WorkDone { kind: WorkKind::PreCheckpoint(j), image_bytes }) if *j == k => {
                let image = ImageKind::for_round(k);
                self.ctx.image_bytes = *image_bytes;
                self.phase = Phase::AwaitImagePull(image);
                Ok(vec![self.publish(steps::READY, self.header().image(image, *image_bytes))])
            }
            (Phase::StopCopyCheckpoint, WorkDone { kind: WorkKind::Checkpoint, image_bytes }) => {
                self.ctx.image_bytes = *image_bytes;
                self.phase = Phase::AwaitImagePull(ImageKind::StopCopy);
                let header = self.header().step(StepId::S1).image(ImageKind::StopCopy, *image_bytes);
                Ok(vec![self.publish(steps::READY, header)])
            }
            (Phase::AwaitImagePull(image), Message(m)) if m.is(MessageKind::Query, Role::Destination, steps::IMAGE) => {
                if m.header.image != Some(image) {
                    return Err(format!("pull for {:?} while serving {image}", m.header.image));
                }
                if !self.ctx.served.insert(image) {
                    return Err(format!("image {image} pulled twice"));
                }
                self.ctx.in_flight = Some(image);
                let mut header = self.header().image(image, self.ctx.image_bytes);
                if image == ImageKind::StopCopy {
                    header = header.step(StepId::S3);
                }
                let reply = BusMessage::reply_to(m, &self.id, header);
                Ok(vec![Action::Transfer {
                    reply,
                    bytes: self.ctx.image_bytes,
                }])
            }
            (Phase::AwaitImagePull(image), TransferComplete { image: done }) if *done == image && self.ctx.in_flight == Some(image) => {
                self.ctx.in_flight = None;
                match image.round() {
                    Some(k) if k < self.strategy().iterations() => {
                        self.phase = Phase::PreCopyRound(k + 1);
                        Ok(vec![Action::Work {
                            kind: WorkKind::PreCheckpoint(k + 1),
                            image_bytes: 0.0,
                        }])
                    }
                    Some(_) => {
                        self.phase = Phase::StopCopyCheckpoint;
                        Ok(vec![Action::Work {
                            kind: WorkKind::Checkpoint,
                            image_bytes: 0.0,
                        }])
                    }
                    None => {
                        self.phase = Phase::NamespaceTransition;
                        Ok(vec![Action::Work {
                            kind: WorkKind::NsClear,
                            image_bytes: 0.0,
                        }])
                    }
                }
            }
            (Phase::NamespaceTransition, WorkDone { kind: WorkKind::NsClear, .. }) => {
                self.phase = Phase::Done;
                Ok(Vec::new())
            }
            _ => Err(self.unexpected(event)),
        }
    }

    fn destination_step(&mut self, event: &Event) -> StepResult {
        use Event::*;
        match (self.phase, event) {
            (_, Message(m)) if m.kind == MessageKind::Reply && m.is(MessageKind::Reply, Role::Destination, steps::NS_CONFIG) => {
                if self.take_pending(m)? != Pending::NsConfig {
                    return Err("namespace reply answers an image query".into());
                }
                let cfg: NamespaceConfig =
                    serde_json::from_slice(&m.payload).map_err(|e| format!("unreadable namespace config: {e}"))?;
                self.ctx.ns_config = Some(cfg);
                Ok(Vec::new())
            }
            (Phase::Idle, Message(m)) if m.is(MessageKind::Publish, Role::Orchestrator, steps::TASK) => {
                let config = self.accept_task(m)?;
                self.phase = Phase::AwaitImagePull(if config.strategy.is_precopy() {
                    ImageKind::Full
                } else {
                    ImageKind::StopCopy
                });
                Ok(vec![self.query(steps::NS_CONFIG, self.header(), Pending::NsConfig)])
            }
            (Phase::AwaitImagePull(image), Message(m)) if m.is(MessageKind::Publish, Role::Source, steps::READY) => {
                if m.header.image != Some(image) {
                    return Err(format!("notice for {:?} while expecting {image}", m.header.image));
                }
                if self.ctx.pending.values().any(|p| *p == Pending::Image(image)) {
                    return Err(format!("second notice for {image}"));
                }
                let header = self.header().image(image, m.header.image_bytes);
                Ok(vec![self.query(steps::IMAGE, header, Pending::Image(image))])
            }
            (Phase::AwaitImagePull(image), Message(m)) if m.is(MessageKind::Reply, Role::Destination, steps::IMAGE) => {
                if self.take_pending(m)? != Pending::Image(image) || m.header.image != Some(image) {
                    return Err(format!("image reply does not match pull of {image}"));
                }
                self.ctx.image_bytes = m.header.image_bytes;
                match image.round() {
                    Some(k) => {
                        self.phase = Phase::AwaitImagePull(if k < self.strategy().iterations() {
                            ImageKind::Dirty(k + 1)
                        } else {
                            ImageKind::StopCopy
                        });
                        Ok(Vec::new())
                    }
                    None => {
                        if self.ctx.ns_config.is_none() {
                            return Err("namespace configuration never received".into());
                        }
                        self.phase = Phase::NamespaceTransition;
                        Ok(vec![Action::Work {
                            kind: WorkKind::NsCreate,
                            image_bytes: 0.0,
                        }])
                    }
                }
            }
            (Phase::NamespaceTransition, WorkDone { kind: WorkKind::NsCreate, .. }) => {
                self.phase = Phase::AwaitRestore;
                let egress = Endpoint {
                    host: self.id.clone(),
                    namespace: self.ctx.ns_config.as_ref().map(|c| c.namespace.clone()).unwrap_or_default(),
                };
                let msg = BusMessage::publish(&self.id, self.topic(steps::NS_READY), self.header().step(StepId::S4))
                    .with_payload(serde_json::to_vec(&egress).expect("endpoint serializes"));
                Ok(vec![Action::Send(msg)])
            }
            (Phase::AwaitRestore, Message(m)) if !self.ctx.restoring && m.is(MessageKind::Publish, Role::Client, steps::FLOW_UPDATED) => {
                self.ctx.restoring = true;
                Ok(vec![Action::Work {
                    kind: WorkKind::Restore,
                    image_bytes: self.ctx.image_bytes,
                }])
            }
            (Phase::AwaitRestore, WorkDone { kind: WorkKind::Restore, .. }) if self.ctx.restoring => {
                self.phase = Phase::Done;
                Ok(vec![self.publish(steps::DONE, self.header().step(StepId::S6))])
            }
            _ => Err(self.unexpected(event)),
        }
    }

    fn client_step(&mut self, event: &Event) -> StepResult {
        use Event::*;
        match (self.phase, event) {
            (Phase::Idle, Message(m)) if m.is(MessageKind::Publish, Role::Destination, steps::NS_READY) => {
                let egress: Endpoint =
                    serde_json::from_slice(&m.payload).map_err(|e| format!("unreadable endpoint: {e}"))?;
                self.ctx.new_egress = Some(egress);
                self.phase = Phase::NamespaceTransition;
                Ok(vec![Action::Work {
                    kind: WorkKind::FlowUpdate,
                    image_bytes: 0.0,
                }])
            }
            (Phase::NamespaceTransition, WorkDone { kind: WorkKind::FlowUpdate, .. }) => {
                let connection = self.ctx.connection.ok_or("client has no connection to redirect")?;
                let egress = self.ctx.new_egress.take().ok_or("no redirect target")?;
                self.ctx.flows = update_flow(&self.ctx.flows, &connection, egress).map_err(|e| e.to_string())?;
                self.phase = Phase::Done;
                Ok(vec![self.publish(steps::FLOW_UPDATED, self.header().step(StepId::S5))])
            }
            _ => Err(self.unexpected(event)),
        }
    }

    fn orchestrator_step(&mut self, event: &Event) -> StepResult {
        use Event::*;
        match (self.phase, event) {
            (Phase::Idle, Start) => {
                let config = self.ctx.config.ok_or("orchestrator has no configuration")?;
                self.phase = Phase::Monitoring;
                let msg = BusMessage::publish(&self.id, self.topic(steps::TASK), self.header())
                    .with_payload(serde_json::to_vec(&config).expect("config serializes"));
                Ok(vec![Action::Send(msg)])
            }
            (Phase::Monitoring, Message(m)) if m.is(MessageKind::Publish, Role::Source, steps::STARTED) && !self.ctx.started_seen => {
                self.ctx.started_seen = true;
                Ok(Vec::new())
            }
            (Phase::Monitoring, Message(m)) if m.is(MessageKind::Publish, Role::Destination, steps::DONE) => {
                if !self.ctx.started_seen {
                    return Err("completion reported before the start notice".into());
                }
                self.phase = Phase::Done;
                Ok(Vec::new())
            }
            (_, Message(m)) if m.kind == MessageKind::Publish && m.topic.ends_with(&format!("/{}", steps::FAILED)) => {
                Err(format!("failure reported by {}: {}", m.sender, String::from_utf8_lossy(&m.payload)))
            }
            _ => Err(self.unexpected(event)),
        }
    }
}

/// Free-function form of [`AgentState::advance`].
pub fn advance(state: AgentState, event: &Event) -> (AgentState, Vec<Action>) {
    state.advance(event)
}

/// One Stop&Copy step placed on a timeline starting at S1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledStep {
    pub step: StepId,
    pub start_s: f64,
    pub duration_s: f64,
}

impl ScheduledStep {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }
}

/// Worst-case Stop&Copy schedule of `config`, in execution order S1, S3,
/// S2, S4, S5, S6. Offsets are relative to the freeze at S1 start; the last
/// step's end is the downtime.
pub fn coat_schedule(config: &MigrationConfig, profile: &MsProfile, params: &ModelParams) -> Vec<ScheduledStep> {
    let image = match config.strategy {
        Strategy::Cold => profile.state_size_bytes as f64,
        _ => profile.dirty_volume() + profile.cpu_context_bytes as f64,
    };
    let d = params.stop_copy_steps(image, config.bandwidth);
    let s1 = ScheduledStep {
        step: StepId::S1,
        start_s: 0.0,
        duration_s: d.checkpoint,
    };
    let s3 = ScheduledStep {
        step: StepId::S3,
        start_s: s1.end_s(),
        duration_s: d.transfer,
    };
    let s2 = ScheduledStep {
        step: StepId::S2,
        start_s: s3.end_s(),
        duration_s: d.ns_clear,
    };
    let s4 = ScheduledStep {
        step: StepId::S4,
        start_s: s3.end_s(),
        duration_s: d.ns_create,
    };
    let s5 = ScheduledStep {
        step: StepId::S5,
        start_s: s3.end_s() + d.ns_clear.max(d.ns_create),
        duration_s: d.flow_update,
    };
    let s6 = ScheduledStep {
        step: StepId::S6,
        start_s: s5.end_s(),
        duration_s: d.restore,
    };
    vec![s1, s3, s2, s4, s5, s6]
}

/// One line of the protocol event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolEvent {
    pub timestamp_s: f64,
    pub agent: String,
    pub phase_before: String,
    pub event_kind: String,
    pub phase_after: String,
    pub actions: Vec<String>,
}

/// Start and end time of a Stop&Copy step observed in a log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSpan {
    pub start_s: f64,
    pub end_s: f64,
}

/// Recovers the Stop&Copy step spans from an event log. S3 runs from the
/// Stop&Copy transfer action to the sender's transfer completion.
pub fn step_spans(log: &[ProtocolEvent]) -> BTreeMap<StepId, StepSpan> {
    let work = [
        (StepId::S1, WorkKind::Checkpoint),
        (StepId::S2, WorkKind::NsClear),
        (StepId::S4, WorkKind::NsCreate),
        (StepId::S5, WorkKind::FlowUpdate),
        (StepId::S6, WorkKind::Restore),
    ];
    let mut markers: Vec<(StepId, String, String)> = work
        .iter()
        .map(|(s, k)| (*s, format!("work {}", k.label()), format!("done {}", k.label())))
        .collect();
    let stop_copy = ImageKind::StopCopy.to_string();
    markers.push((
        StepId::S3,
        format!("transfer [{stop_copy}] "),
        format!("transfer-complete [{stop_copy}]"),
    ));

    let mut spans = BTreeMap::new();
    for (step, start_marker, end_marker) in markers {
        let start = log
            .iter()
            .find(|e| e.actions.iter().any(|a| a.starts_with(&start_marker)))
            .map(|e| e.timestamp_s);
        let end = log.iter().find(|e| e.event_kind == end_marker).map(|e| e.timestamp_s);
        if let (Some(start_s), Some(end_s)) = (start, end) {
            spans.insert(step, StepSpan { start_s, end_s });
        }
    }
    spans
}

/// Happens-before relations every successful trace satisfies.
pub const HAPPENS_BEFORE: [(StepId, StepId); 3] = [(StepId::S1, StepId::S3), (StepId::S4, StepId::S5), (StepId::S5, StepId::S6)];

/// Checks [`HAPPENS_BEFORE`] on a log: each earlier step ends no later than
/// the later one starts.
pub fn check_happens_before(log: &[ProtocolEvent]) -> std::result::Result<(), String> {
    let spans = step_spans(log);
    for (a, b) in HAPPENS_BEFORE {
        let (Some(sa), Some(sb)) = (spans.get(&a), spans.get(&b)) else {
            return Err(format!("{a} or {b} missing from the trace"));
        };
        if sa.end_s > sb.start_s {
            return Err(format!("{a} ends at {} after {b} starts at {}", sa.end_s, sb.start_s));
        }
        // Ties in time are ordered by log position.
        let pos = |marker: &str| log.iter().position(|e| e.event_kind == marker || e.actions.iter().any(|x| x.starts_with(marker)));
        let end_a = match a {
            StepId::S3 => format!("transfer-complete [{}]", ImageKind::StopCopy),
            s => format!("done {}", work_for(s).label()),
        };
        let start_b = match b {
            StepId::S3 => format!("transfer [{}] ", ImageKind::StopCopy),
            s => format!("work {}", work_for(s).label()),
        };
        if pos(&end_a) > pos(&start_b) {
            return Err(format!("{a} completes after {b} starts in log order"));
        }
    }
    Ok(())
}

fn work_for(step: StepId) -> WorkKind {
    match step {
        StepId::S1 => WorkKind::Checkpoint,
        StepId::S2 => WorkKind::NsClear,
        StepId::S4 => WorkKind::NsCreate,
        StepId::S5 => WorkKind::FlowUpdate,
        StepId::S6 => WorkKind::Restore,
        StepId::S3 => unreachable!("S3 is a transfer"),
    }
}

/// Bus messages sent on a successful run: 10 for Cold, `13 + 3 I` otherwise.
pub fn happy_path_message_count(strategy: Strategy) -> u64 {
    match strategy {
        Strategy::Cold => 10,
        s => 13 + 3 * s.iterations() as u64,
    }
}
