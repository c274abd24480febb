//! Deterministic discrete-event engine.
//!
//! Events run in (time, sequence) order on a microsecond clock. Scripted
//! joins, leaves and moves start staged procedures; each stage schedules the
//! next one after its configured delay. Content frames are emitted per area
//! at a fixed period and every recipient tries to decrypt them.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::code::NodeCode;
use crate::crypto::{decrypt, encrypt, seeded_rng, Ciphertext, KeyMaterial};
use crate::entities::{aws_name, group_name, AreaId, MainList, MessageKind, Network, ProtocolMessage, Stage, StepOutcome};
use crate::error::Result;
use crate::rekey::{RekeyCounters, Scheme};
use crate::scenario::{ScriptOp, Scenario};
use crate::timing::{JoinMode, SimTime};
use crate::tree::DumpEntry;
use crate::MemberId;

/// One re-keying (or rejected) membership event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRow {
    pub event_id: u64,
    pub time: SimTime,
    /// join, leave, handoff_join, handoff_leave, join_rejected or
    /// handoff_rejected.
    pub kind: String,
    pub scheme: Scheme,
    pub area: AreaId,
    pub member: MemberId,
    pub group_size: usize,
    pub counters: RekeyCounters,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinSetupRow {
    pub member: MemberId,
    pub area: AreaId,
    pub mode: JoinMode,
    pub started: SimTime,
    pub completed: SimTime,
}

impl JoinSetupRow {
    pub fn duration(&self) -> SimTime {
        self.completed - self.started
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandoffEpisode {
    pub member: MemberId,
    pub from: AreaId,
    pub to: AreaId,
    pub started: SimTime,
    pub probed: Option<SimTime>,
    pub reauthenticated: Option<SimTime>,
    pub completed: Option<SimTime>,
    pub rejected: bool,
}

impl HandoffEpisode {
    /// None while the episode is still in progress or was rejected.
    pub fn total(&self) -> Option<SimTime> {
        self.completed.map(|c| c - self.started)
    }

    /// (probe, re-authentication, re-association) intervals.
    pub fn phases(&self) -> Option<(SimTime, SimTime, SimTime)> {
        let (p, r, c) = (self.probed?, self.reauthenticated?, self.completed?);
        Some((p - self.started, r - p, c - r))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameStats {
    /// Frames sent by the area serving the member.
    pub expected: u64,
    pub decrypted: u64,
    /// Decryption attempts with keys kept from earlier memberships.
    pub post_leave_attempts: u64,
    pub post_leave_decrypted: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub scheme: Scheme,
    pub rows: Vec<EventRow>,
    pub joins: Vec<JoinSetupRow>,
    pub handoffs: Vec<HandoffEpisode>,
    pub frames: BTreeMap<MemberId, FrameStats>,
    pub frames_emitted: u64,
}

impl MetricsLedger {
    fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            rows: Vec::new(),
            joins: Vec::new(),
            handoffs: Vec::new(),
            frames: BTreeMap::new(),
            frames_emitted: 0,
        }
    }

    /// Counter sums per event kind.
    pub fn aggregate(&self) -> BTreeMap<String, RekeyCounters> {
        let mut out: BTreeMap<String, RekeyCounters> = BTreeMap::new();
        for r in &self.rows {
            *out.entry(r.kind.clone()).or_default() += r.counters;
        }
        out
    }

    pub fn total(&self) -> RekeyCounters {
        let mut t = RekeyCounters::default();
        for r in &self.rows {
            t += r.counters;
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditCipher {
    pub area: AreaId,
    pub time: SimTime,
    /// Key the sender encrypted under.
    pub key: KeyMaterial,
    pub ciphertext: Ciphertext,
    pub content: bool,
}

/// Cipher index range, open while the member is still present.
pub type Span = (usize, Option<usize>);

/// Server-side record of everything sent, plus every key each member has
/// legitimately held. Feeds offline secrecy checks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Audit {
    pub ciphers: Vec<AuditCipher>,
    /// Membership intervals as half-open ranges of cipher indices.
    pub intervals: BTreeMap<(MemberId, AreaId), Vec<Span>>,
    pub knowledge: BTreeMap<MemberId, BTreeSet<KeyMaterial>>,
    /// Every group key each area ever had.
    pub group_keys: BTreeMap<AreaId, BTreeSet<KeyMaterial>>,
    /// Every node code each area's tree ever used.
    pub codes: BTreeMap<AreaId, BTreeSet<NodeCode>>,
    /// Codes each member ever held in its view of each area.
    pub known_codes: BTreeMap<(MemberId, AreaId), BTreeSet<NodeCode>>,
}

impl Audit {
    /// Whether cipher `index` of `area` was sent while `member` belonged.
    pub fn is_member_at(&self, member: &str, area: &str, index: usize) -> bool {
        self.intervals
            .get(&(member.to_owned(), area.to_owned()))
            .is_some_and(|spans| spans.iter().any(|&(s, e)| s <= index && e.is_none_or(|e| index < e)))
    }

    fn open(&mut self, member: &str, area: &str) {
        let at = self.ciphers.len();
        self.intervals
            .entry((member.to_owned(), area.to_owned()))
            .or_default()
            .push((at, None));
    }

    fn close(&mut self, member: &str, area: &str) {
        let at = self.ciphers.len();
        if let Some(last) = self
            .intervals
            .get_mut(&(member.to_owned(), area.to_owned()))
            .and_then(|v| v.last_mut())
        {
            last.1.get_or_insert(at);
        }
    }

    fn observe(&mut self, net: &Network) {
        for (id, m) in net.members() {
            let known = self.knowledge.entry(id.clone()).or_default();
            for (area, view) in &m.views {
                known.extend(view.keys.values().copied());
                self.known_codes
                    .entry((id.clone(), area.clone()))
                    .or_default()
                    .extend(view.keys.keys().cloned());
            }
        }
        for (area, aws) in net.areas() {
            let tree = aws.tree.tree();
            self.group_keys
                .entry(area.clone())
                .or_default()
                .insert(tree.group_key());
            let codes = self.codes.entry(area.clone()).or_default();
            for entry in tree.dump() {
                codes.insert(NodeCode::parse(&entry.code).expect("tree codes are valid"));
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Action {
    Script(usize),
    Stage(Stage),
    Frame,
}

#[derive(Debug)]
struct Queued {
    time: SimTime,
    seq: u64,
    action: Action,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.seq) == (o.time, o.seq)
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Queued {
    fn cmp(&self, o: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(o.time, o.seq))
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub scenario: String,
    pub scheme: Scheme,
    pub ledger: MetricsLedger,
    pub trace: Vec<ProtocolMessage>,
    pub mainlist: MainList,
    pub audit: Option<Audit>,
    pub trees: BTreeMap<AreaId, Vec<DumpEntry>>,
}

impl SimOutput {
    pub fn trace_text(&self) -> String {
        self.trace.iter().map(|m| m.trace_line() + "\n").collect()
    }
}

pub struct Simulation<'s> {
    scenario: &'s Scenario,
    net: Network,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    now: SimTime,
    horizon: SimTime,
    frame_interval: SimTime,
    next_event_id: u64,
    ledger: MetricsLedger,
    trace: Vec<ProtocolMessage>,
    audit: Option<Audit>,
    deferred: BTreeMap<MemberId, VecDeque<usize>>,
    open_handoffs: BTreeMap<MemberId, usize>,
    frame_seq: u64,
}

impl<'s> Simulation<'s> {
    pub fn new(scenario: &'s Scenario, scheme: Scheme) -> Result<Self> {
        scenario.validate()?;
        let delays = scenario.delays.clone();
        let mut net = Network::new(scheme, &scenario.group, delays.clone(), seeded_rng(scenario.seed));
        for a in &scenario.areas {
            net.add_area(&a.id)?;
        }
        for m in &scenario.members {
            net.add_member(&m.id, m.password(), m.registered)?;
            if m.impostor {
                let mut wrong = m.password().to_vec();
                wrong.extend_from_slice(b"?");
                net.corrupt_password(&m.id, &wrong)?;
            }
        }
        let mut audit = scenario.audit.then(Audit::default);
        for a in &scenario.areas {
            for id in &a.members {
                net.seed_member(id, &a.id)?;
                if let Some(audit) = audit.as_mut() {
                    audit.open(id, &a.id);
                }
            }
        }
        if let Some(audit) = audit.as_mut() {
            audit.observe(&net);
        }
        let mut sim = Self {
            scenario,
            net,
            queue: BinaryHeap::new(),
            seq: 0,
            now: SimTime::ZERO,
            horizon: SimTime::from_secs(scenario.horizon)?,
            frame_interval: SimTime::from_secs(delays.frame_interval)?,
            next_event_id: 1,
            ledger: MetricsLedger::new(scheme),
            trace: Vec::new(),
            audit,
            deferred: BTreeMap::new(),
            open_handoffs: BTreeMap::new(),
            frame_seq: 0,
        };
        for (i, ev) in scenario.ordered_events() {
            sim.schedule(SimTime::from_secs(ev.at)?, Action::Script(i));
        }
        if sim.frame_interval > SimTime::ZERO {
            sim.schedule(sim.frame_interval, Action::Frame);
        }
        for m in &scenario.members {
            sim.ledger.frames.insert(m.id.clone(), FrameStats::default());
        }
        Ok(sim)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn audit(&self) -> Option<&Audit> {
        self.audit.as_ref()
    }

    fn schedule(&mut self, time: SimTime, action: Action) {
        self.seq += 1;
        self.queue.push(Reverse(Queued {
            time,
            seq: self.seq,
            action,
        }));
    }

    /// Runs the next queued action. Returns false once nothing is left
    /// before the horizon.
    pub fn step(&mut self) -> Result<bool> {
        let Some(Reverse(q)) = self.queue.pop() else {
            return Ok(false);
        };
        if q.time > self.horizon {
            self.queue.clear();
            return Ok(false);
        }
        debug_assert!(q.time >= self.now, "event scheduled in the past");
        self.now = q.time;
        match q.action {
            Action::Frame => self.emit_frames()?,
            Action::Script(i) => self.start_script(i)?,
            Action::Stage(stage) => {
                let context = stage_context(&stage);
                if let Stage::MoveRequest { member, .. } = &stage {
                    if let Some(&ep) = self.open_handoffs.get(member) {
                        self.ledger.handoffs[ep].probed = Some(self.now);
                    }
                }
                let st = self.net.run_stage(self.now, stage)?;
                self.absorb(st, context)?;
            }
        }
        Ok(true)
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while self.step()? {}
        Ok(())
    }

    pub fn finish(self) -> SimOutput {
        let trees = self
            .net
            .areas()
            .iter()
            .map(|(id, aws)| (id.clone(), aws.tree.tree().dump()))
            .collect();
        SimOutput {
            scenario: self.scenario.name.clone(),
            scheme: self.net.scheme(),
            ledger: self.ledger,
            trace: self.trace,
            mainlist: self.net.mainlist().clone(),
            audit: self.audit,
            trees,
        }
    }

    fn start_script(&mut self, i: usize) -> Result<()> {
        let ev = &self.scenario.events[i];
        let member = ev.op.member();
        if self.net.member(member)?.busy {
            self.deferred.entry(member.to_owned()).or_default().push_back(i);
            return Ok(());
        }
        let (st, context) = match &ev.op {
            ScriptOp::Join { area, .. } => (self.net.join_begin(self.now, member, area)?, ("join_rejected", area.clone())),
            ScriptOp::Leave { area, .. } => (self.net.leave(self.now, member, area)?, ("leave", area.clone())),
            ScriptOp::Move { from, to, .. } => {
                let st = self.net.move_begin(self.now, member, from, to)?;
                self.open_handoffs.insert(member.to_owned(), self.ledger.handoffs.len());
                self.ledger.handoffs.push(HandoffEpisode {
                    member: member.to_owned(),
                    from: from.clone(),
                    to: to.clone(),
                    started: self.now,
                    probed: None,
                    reauthenticated: None,
                    completed: None,
                    rejected: false,
                });
                (st, ("handoff_rejected", to.clone()))
            }
        };
        self.absorb(st, context)
    }

    fn absorb(&mut self, st: StepOutcome, (rejected_kind, rejected_area): (&'static str, AreaId)) -> Result<()> {
        let scheme = self.net.scheme();
        for rk in &st.rekeys {
            if let Some(audit) = self.audit.as_mut() {
                if rk.kind.is_join() {
                    audit.open(&rk.member, &rk.area);
                } else {
                    audit.close(&rk.member, &rk.area);
                }
                for p in &rk.output.payloads {
                    audit.ciphers.push(AuditCipher {
                        area: rk.area.clone(),
                        time: rk.time,
                        key: p.key_used,
                        ciphertext: p.ciphertext.clone(),
                        content: false,
                    });
                }
            }
            self.ledger.rows.push(EventRow {
                event_id: self.next_event_id,
                time: rk.time,
                kind: rk.kind.as_str().to_owned(),
                scheme,
                area: rk.area.clone(),
                member: rk.member.clone(),
                group_size: rk.group_size,
                counters: rk.output.counters,
            });
            self.next_event_id += 1;
        }
        if st.rejected {
            let member = st.finished.clone().unwrap_or_default();
            self.ledger.rows.push(EventRow {
                event_id: self.next_event_id,
                time: self.now,
                kind: rejected_kind.to_owned(),
                scheme,
                area: rejected_area.clone(),
                group_size: self.net.area(&rejected_area)?.tree.tree().len(),
                member: member.clone(),
                counters: RekeyCounters::default(),
            });
            self.next_event_id += 1;
            if let Some(ep) = self.open_handoffs.remove(&member) {
                self.ledger.handoffs[ep].rejected = true;
            }
        }
        if let Some(setup) = st.join_setup {
            let member = st.finished.clone().unwrap_or_default();
            self.ledger.joins.push(JoinSetupRow {
                area: self.net.member(&member)?.area.clone().unwrap_or_default(),
                member,
                mode: setup.mode,
                started: setup.started,
                completed: setup.completed,
            });
        }
        if let Some(at) = st.reauthenticated {
            if let Some(member) = st.next.as_ref().map(|(_, s)| s.member().to_owned()) {
                if let Some(&ep) = self.open_handoffs.get(&member) {
                    self.ledger.handoffs[ep].reauthenticated = Some(at);
                }
            }
        }
        if let Some(phases) = st.handoff {
            let member = st.finished.clone().unwrap_or_default();
            if let Some(ep) = self.open_handoffs.remove(&member) {
                let e = &mut self.ledger.handoffs[ep];
                e.probed = Some(phases.probed);
                e.reauthenticated = Some(phases.reauthenticated);
                e.completed = Some(phases.completed);
            }
        }
        self.trace.extend(st.messages);
        if let Some((at, stage)) = st.next {
            self.schedule(at, Action::Stage(stage));
        }
        if let Some(member) = st.finished {
            if let Some(i) = self.deferred.get_mut(&member).and_then(|q| q.pop_front()) {
                self.schedule(self.now, Action::Script(i));
            }
        }
        if let Some(audit) = self.audit.as_mut() {
            audit.observe(&self.net);
        }
        Ok(())
    }

    fn emit_frames(&mut self) -> Result<()> {
        let areas: Vec<AreaId> = self
            .net
            .areas()
            .iter()
            .filter(|(_, a)| !a.tree.tree().is_empty())
            .map(|(id, _)| id.clone())
            .collect();
        for area in areas {
            self.frame_seq += 1;
            let key = self.net.area(&area)?.tree.group_key();
            let ct = encrypt(&key, format!("{area}:{}", self.frame_seq).as_bytes());
            self.ledger.frames_emitted += 1;
            self.trace.push(ProtocolMessage {
                time: self.now,
                kind: MessageKind::ContentFrame,
                src: aws_name(&area),
                dst: group_name(&area),
                payload: [ct.nonce.as_slice(), &ct.sealed].concat(),
            });
            let mut delivered = Vec::new();
            for (id, m) in self.net.members() {
                let stats = self.ledger.frames.entry(id.clone()).or_default();
                if m.serving.as_deref() == Some(area.as_str()) {
                    stats.expected += 1;
                    let ok = m
                        .views
                        .get(&area)
                        .is_some_and(|v| decrypt(&v.group_key(), &ct).is_ok());
                    if ok {
                        stats.decrypted += 1;
                        delivered.push(id.clone());
                    }
                }
                for (_, view) in m.former.iter().filter(|(a, _)| *a == area) {
                    stats.post_leave_attempts += 1;
                    if decrypt(&view.group_key(), &ct).is_ok() {
                        stats.post_leave_decrypted += 1;
                    }
                }
            }
            for id in delivered {
                self.net.credit_delivery(&id)?;
            }
            if let Some(audit) = self.audit.as_mut() {
                audit.ciphers.push(AuditCipher {
                    area: area.clone(),
                    time: self.now,
                    key,
                    ciphertext: ct,
                    content: true,
                });
            }
        }
        let next = self.now + self.frame_interval;
        if next <= self.horizon {
            self.schedule(next, Action::Frame);
        }
        Ok(())
    }
}

/// Ledger kind and area to record if the stage ends in a rejection.
fn stage_context(stage: &Stage) -> (&'static str, AreaId) {
    match stage {
        Stage::JoinAuth { area, .. } | Stage::JoinComplete { area, .. } => ("join_rejected", area.clone()),
        Stage::MoveRequest { to, .. } | Stage::MoveAuth { to, .. } | Stage::MoveComplete { to, .. } => {
            ("handoff_rejected", to.clone())
        }
    }
}

/// Runs one scheme of a scenario to its horizon.
pub fn run(scenario: &Scenario, scheme: Scheme) -> Result<SimOutput> {
    let mut sim = Simulation::new(scenario, scheme)?;
    sim.run_to_end()?;
    Ok(sim.finish())
}

/// Runs every scheme listed in the scenario.
pub fn run_all(scenario: &Scenario) -> Result<Vec<SimOutput>> {
    scenario.schemes.iter().map(|&s| run(scenario, s)).collect()
}
