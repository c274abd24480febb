//! Protocol actors: the main server with its main list, one area wireless
//! server (AWS) per area, and the mobile members.
//!
//! Procedures are split into stages so the simulator can place each stage at
//! its own point on the timeline. Every stage returns the messages it sent,
//! the re-keying it caused, and the stage to run next.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ckc::{self, CkcTree, KeySource};
use crate::code::NodeCode;
use crate::crypto::{encrypt, random_key, KeyMaterial, SimRng};
use crate::error::{Error, Result};
use crate::lkh::{self, LkhTree};
use crate::otp::{self, AuthChallenge, AuthOutcome, AuthRecord, ClientSecret};
use crate::rekey::{Delivery, MemberKeyView, RekeyOutput, Scheme, TreeNotice};
use crate::timing::{DelayConfig, JoinMode, SimTime};
use crate::tree::KeyTree;
use crate::MemberId;

pub type AreaId = String;

pub const MAIN_SERVER: &str = "main";

pub fn aws_name(area: &str) -> String {
    format!("aws:{area}")
}

pub fn group_name(area: &str) -> String {
    format!("group:{area}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    IgmpConnect,
    JoinRequest,
    AuthChallenge,
    AuthResult,
    KeyUnicast,
    KeyMulticast,
    LeaveRequest,
    HandoffLeave,
    HandoffJoin,
    AreaJoinAck,
    MainlistQuery,
    MainlistReply,
    MainlistUpdate,
    ContentFrame,
    KeyGeneration,
    IndividualKeyDelivery,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::IgmpConnect => "igmp_connect",
            MessageKind::JoinRequest => "join_request",
            MessageKind::AuthChallenge => "auth_challenge",
            MessageKind::AuthResult => "auth_result",
            MessageKind::KeyUnicast => "key_unicast",
            MessageKind::KeyMulticast => "key_multicast",
            MessageKind::LeaveRequest => "leave_request",
            MessageKind::HandoffLeave => "handoff_leave",
            MessageKind::HandoffJoin => "handoff_join",
            MessageKind::AreaJoinAck => "area_join_ack",
            MessageKind::MainlistQuery => "mainlist_query",
            MessageKind::MainlistReply => "mainlist_reply",
            MessageKind::MainlistUpdate => "mainlist_update",
            MessageKind::ContentFrame => "content_frame",
            MessageKind::KeyGeneration => "key_generation",
            MessageKind::IndividualKeyDelivery => "individual_key_delivery",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub time: SimTime,
    pub kind: MessageKind,
    pub src: String,
    pub dst: String,
    pub payload: Vec<u8>,
}

impl ProtocolMessage {
    pub fn fingerprint(&self) -> String {
        if self.payload.is_empty() {
            return "-".into();
        }
        hex::encode(&Sha256::digest(&self.payload)[..4])
    }

    /// `time kind src dst fingerprint`
    pub fn trace_line(&self) -> String {
        format!(
            "{} {} {} {} {}",
            self.time,
            self.kind,
            self.src,
            self.dst,
            self.fingerprint()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberStatus {
    Active,
    Left,
    Moving,
}

impl MemberStatus {
    fn may_become(self, next: MemberStatus) -> bool {
        use MemberStatus::*;
        matches!(
            (self, next),
            (Active, Moving) | (Moving, Active) | (Active, Left) | (Left, Active)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MainListEntry {
    pub member: MemberId,
    pub group: String,
    pub auth: AuthRecord,
    pub last_area: Option<AreaId>,
    pub status: MemberStatus,
    /// Content frames delivered to the member so far.
    pub service_accounting: u64,
    pub last_update: SimTime,
}

/// The main server's record of every registered member, keyed by
/// (member, group).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MainList {
    entries: BTreeMap<(MemberId, String), MainListEntry>,
}

impl MainList {
    pub fn lookup(&self, member: &str, group: &str) -> Option<&MainListEntry> {
        self.entries.get(&(member.to_owned(), group.to_owned()))
    }

    /// Overwrites any entry with the same key.
    pub fn store(&mut self, entry: MainListEntry) {
        self.entries
            .insert((entry.member.clone(), entry.group.clone()), entry);
    }

    pub fn register(&mut self, entry: MainListEntry) -> Result<()> {
        if self.lookup(&entry.member, &entry.group).is_some() {
            return Err(Error::DuplicateRegistration(entry.member));
        }
        self.store(entry);
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = &MainListEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> String {
        let list: Vec<&MainListEntry> = self.entries.values().collect();
        serde_json::to_string_pretty(&list).expect("main list serializes")
    }

    fn transition(&mut self, member: &str, group: &str, status: MemberStatus) -> Result<&mut MainListEntry> {
        let entry = self
            .entries
            .get_mut(&(member.to_owned(), group.to_owned()))
            .ok_or_else(|| Error::UnknownMember(member.to_owned()))?;
        if !entry.status.may_become(status) {
            return Err(Error::Protocol(format!(
                "main list status of {member} cannot go from {:?} to {status:?}",
                entry.status
            )));
        }
        entry.status = status;
        Ok(entry)
    }
}

/// An area's key tree under the scheme chosen for the run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AreaTree {
    Ckc(CkcTree, KeySource),
    Lkh(LkhTree),
}

impl AreaTree {
    pub fn new(scheme: Scheme, group_key: KeyMaterial) -> Self {
        match scheme {
            Scheme::CkcCraw => AreaTree::Ckc(CkcTree::new(NodeCode::root(), group_key), KeySource::Authentication),
            Scheme::CkcPlain => AreaTree::Ckc(CkcTree::new(NodeCode::root(), group_key), KeySource::ServerGenerated),
            Scheme::Lkh => AreaTree::Lkh(LkhTree::new(NodeCode::root(), group_key)),
        }
    }

    pub fn tree(&self) -> &KeyTree {
        match self {
            AreaTree::Ckc(t, _) => t.tree(),
            AreaTree::Lkh(t) => t.tree(),
        }
    }

    pub fn group_key(&self) -> KeyMaterial {
        self.tree().group_key()
    }

    pub fn join<R: RngCore>(&mut self, member: &str, individual_key: KeyMaterial, rng: &mut R) -> Result<RekeyOutput> {
        match self {
            AreaTree::Ckc(t, source) => t.join(member, individual_key, *source, rng),
            AreaTree::Lkh(t) => t.join(member, individual_key, rng),
        }
    }

    pub fn leave<R: RngCore>(&mut self, member: &str, rng: &mut R) -> Result<RekeyOutput> {
        match self {
            AreaTree::Ckc(t, _) => t.leave(member, rng),
            AreaTree::Lkh(t) => t.leave(member, rng),
        }
    }

    pub fn joiner_view(&self, member: &str, individual_key: KeyMaterial, out: &RekeyOutput) -> Result<MemberKeyView> {
        match self {
            AreaTree::Ckc(..) => ckc::joiner_view(member, individual_key, out),
            AreaTree::Lkh(_) => lkh::joiner_view(member, individual_key, out),
        }
    }

    /// A present member's side of someone else's join or leave.
    pub fn refresh(&self, view: &mut MemberKeyView, out: &RekeyOutput) -> Result<()> {
        match (self, &out.notice) {
            (AreaTree::Ckc(..), TreeNotice::Join { .. }) => ckc::member_refresh_join(view, out).map(drop),
            (AreaTree::Ckc(..), TreeNotice::Leave { .. }) => ckc::member_refresh_leave(view, out),
            (AreaTree::Lkh(_), _) => lkh::member_refresh(view, out).map(drop),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AreaWirelessServer {
    pub area: AreaId,
    pub tree: AreaTree,
    /// Members whose hand-off into this area is under way.
    pub pending_handoffs: BTreeSet<MemberId>,
    pub frames_sent: u64,
}

impl AreaWirelessServer {
    pub fn members(&self) -> impl Iterator<Item = &MemberId> {
        self.tree.tree().members()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoffState {
    Connected,
    Probing,
    Reauthenticating,
    Reassociating,
}

#[derive(Debug, Clone)]
pub struct MobileMember {
    pub id: MemberId,
    pub secret: ClientSecret,
    /// Key view per area the member currently holds keys for.
    pub views: BTreeMap<AreaId, MemberKeyView>,
    /// Views kept after leaving, used to test that old keys stop working.
    pub former: Vec<(AreaId, MemberKeyView)>,
    pub area: Option<AreaId>,
    /// Area whose content the member currently receives.
    pub serving: Option<AreaId>,
    pub state: HandoffState,
    /// A staged procedure is in flight.
    pub busy: bool,
    pub delivered: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RekeyKind {
    Join,
    Leave,
    HandoffJoin,
    HandoffLeave,
}

impl RekeyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RekeyKind::Join => "join",
            RekeyKind::Leave => "leave",
            RekeyKind::HandoffJoin => "handoff_join",
            RekeyKind::HandoffLeave => "handoff_leave",
        }
    }

    pub fn is_join(self) -> bool {
        matches!(self, RekeyKind::Join | RekeyKind::HandoffJoin)
    }
}

#[derive(Debug, Clone)]
pub struct AreaRekey {
    pub kind: RekeyKind,
    pub area: AreaId,
    pub member: MemberId,
    pub time: SimTime,
    /// Members in the area after a join, before a leave.
    pub group_size: usize,
    pub output: RekeyOutput,
}

/// The next stage of a procedure in flight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    JoinAuth {
        member: MemberId,
        area: AreaId,
        started: SimTime,
        challenge: AuthChallenge,
    },
    JoinComplete {
        member: MemberId,
        area: AreaId,
        started: SimTime,
        session_key: KeyMaterial,
    },
    MoveRequest {
        member: MemberId,
        from: AreaId,
        to: AreaId,
        started: SimTime,
    },
    MoveAuth {
        member: MemberId,
        from: AreaId,
        to: AreaId,
        started: SimTime,
        probed: SimTime,
        challenge: AuthChallenge,
    },
    MoveComplete {
        member: MemberId,
        from: AreaId,
        to: AreaId,
        phases: HandoffPhases,
        individual_key: KeyMaterial,
    },
}

impl Stage {
    pub fn member(&self) -> &str {
        match self {
            Stage::JoinAuth { member, .. }
            | Stage::JoinComplete { member, .. }
            | Stage::MoveRequest { member, .. }
            | Stage::MoveAuth { member, .. }
            | Stage::MoveComplete { member, .. } => member,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JoinSetup {
    pub started: SimTime,
    pub completed: SimTime,
    pub mode: JoinMode,
}

/// Realized phases of one hand-off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandoffPhases {
    pub started: SimTime,
    pub probed: SimTime,
    pub reauthenticated: SimTime,
    pub completed: SimTime,
}

impl HandoffPhases {
    pub fn total(&self) -> SimTime {
        self.completed - self.started
    }
}

#[derive(Debug, Clone, Default)]
pub struct StepOutcome {
    pub messages: Vec<ProtocolMessage>,
    pub rekeys: Vec<AreaRekey>,
    pub next: Option<(SimTime, Stage)>,
    pub join_setup: Option<JoinSetup>,
    pub reauthenticated: Option<SimTime>,
    pub handoff: Option<HandoffPhases>,
    /// The procedure ended with an authentication rejection.
    pub rejected: bool,
    /// Member whose procedure finished at this stage.
    pub finished: Option<MemberId>,
}

impl StepOutcome {
    /// Appends a stage that ran at the same instant.
    fn absorb(&mut self, o: StepOutcome) {
        self.messages.extend(o.messages);
        self.rekeys.extend(o.rekeys);
        self.next = o.next;
        self.join_setup = self.join_setup.or(o.join_setup);
        self.reauthenticated = self.reauthenticated.or(o.reauthenticated);
        self.handoff = self.handoff.or(o.handoff);
        self.rejected |= o.rejected;
        self.finished = self.finished.take().or(o.finished);
    }
}

/// Stamps messages with the send time plus link latency.
struct Stamper<'a> {
    now: SimTime,
    latency: SimTime,
    out: &'a mut Vec<ProtocolMessage>,
}

impl<'a> Stamper<'a> {
    fn new(now: SimTime, latency: SimTime, out: &'a mut Vec<ProtocolMessage>) -> Self {
        Self { now, latency, out }
    }

    fn send(&mut self, kind: MessageKind, src: impl Into<String>, dst: impl Into<String>, payload: Vec<u8>) {
        self.out.push(ProtocolMessage {
            time: self.now + self.latency,
            kind,
            src: src.into(),
            dst: dst.into(),
            payload,
        });
    }

    /// One message per network send of a re-keying output.
    fn rekey(&mut self, area: &str, out: &RekeyOutput) {
        let mut sends: Vec<(u32, &Delivery, Vec<u8>)> = Vec::new();
        for p in &out.payloads {
            let bytes = [p.ciphertext.nonce.as_slice(), &p.ciphertext.sealed].concat();
            match sends.last_mut() {
                Some((s, d, buf)) if *s == p.send && **d == p.delivery => buf.extend(bytes),
                _ => sends.push((p.send, &p.delivery, bytes)),
            }
        }
        for (_, delivery, payload) in sends {
            match delivery {
                Delivery::Unicast(m) => self.send(MessageKind::KeyUnicast, aws_name(area), m.clone(), payload),
                Delivery::Multicast => self.send(MessageKind::KeyMulticast, aws_name(area), group_name(area), payload),
            }
        }
    }
}

pub struct Network {
    scheme: Scheme,
    group: String,
    delays: DelayConfig,
    rng: SimRng,
    mainlist: MainList,
    areas: BTreeMap<AreaId, AreaWirelessServer>,
    members: BTreeMap<MemberId, MobileMember>,
}

impl Network {
    pub fn new(scheme: Scheme, group: &str, delays: DelayConfig, rng: SimRng) -> Self {
        Self {
            scheme,
            group: group.to_owned(),
            delays,
            rng,
            mainlist: MainList::default(),
            areas: BTreeMap::new(),
            members: BTreeMap::new(),
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn delays(&self) -> &DelayConfig {
        &self.delays
    }

    pub fn mainlist(&self) -> &MainList {
        &self.mainlist
    }

    pub fn areas(&self) -> &BTreeMap<AreaId, AreaWirelessServer> {
        &self.areas
    }

    pub fn area(&self, area: &str) -> Result<&AreaWirelessServer> {
        self.areas
            .get(area)
            .ok_or_else(|| Error::Protocol(format!("unknown area {area}")))
    }

    pub fn members(&self) -> &BTreeMap<MemberId, MobileMember> {
        &self.members
    }

    pub fn member(&self, id: &str) -> Result<&MobileMember> {
        self.members
            .get(id)
            .ok_or_else(|| Error::UnknownMember(id.to_owned()))
    }

    fn member_mut(&mut self, id: &str) -> Result<&mut MobileMember> {
        self.members
            .get_mut(id)
            .ok_or_else(|| Error::UnknownMember(id.to_owned()))
    }

    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    pub fn join_mode(&self) -> JoinMode {
        if self.scheme.key_from_auth() {
            JoinMode::Craw
        } else {
            JoinMode::Ordinary
        }
    }

    pub fn add_area(&mut self, area: &str) -> Result<()> {
        if self.areas.contains_key(area) {
            return Err(Error::Scenario(format!("duplicate area {area}")));
        }
        let key = random_key(&mut self.rng);
        self.areas.insert(
            area.to_owned(),
            AreaWirelessServer {
                area: area.to_owned(),
                tree: AreaTree::new(self.scheme, key),
                pending_handoffs: BTreeSet::new(),
                frames_sent: 0,
            },
        );
        Ok(())
    }

    /// Creates a member and, if `registered`, its main-list entry.
    pub fn add_member(&mut self, id: &str, password: &[u8], registered: bool) -> Result<()> {
        if self.members.contains_key(id) {
            return Err(Error::DuplicateMember(id.to_owned()));
        }
        let secret = ClientSecret::new(id, password, &mut self.rng);
        if registered {
            self.mainlist.register(MainListEntry {
                member: id.to_owned(),
                group: self.group.clone(),
                auth: otp::register(&secret),
                last_area: None,
                status: MemberStatus::Left,
                service_accounting: 0,
                last_update: SimTime::ZERO,
            })?;
        }
        self.members.insert(
            id.to_owned(),
            MobileMember {
                id: id.to_owned(),
                secret,
                views: BTreeMap::new(),
                former: Vec::new(),
                area: None,
                serving: None,
                state: HandoffState::Connected,
                busy: false,
                delivered: 0,
            },
        );
        Ok(())
    }


    /// Replaces a member's client secret with one built from a different
    /// password, leaving the main-list record untouched.
    pub fn corrupt_password(&mut self, member: &str, password: &[u8]) -> Result<()> {
        let secret = ClientSecret::new(member, password, &mut self.rng);
        self.member_mut(member)?.secret = secret;
        Ok(())
    }

    /// The member's (alpha, beta) pair for its next session.
    fn challenge(&mut self, member: &str) -> Result<AuthChallenge> {
        let rng = &mut self.rng;
        let m = self
            .members
            .get_mut(member)
            .ok_or_else(|| Error::UnknownMember(member.to_owned()))?;
        Ok(m.secret.make_challenge(rng))
    }

    /// Verifies against the main-list record fetched for this event and
    /// commits the outcome on both sides. Returns the session key.
    fn verify_challenge(&mut self, challenge: &AuthChallenge) -> Result<Option<KeyMaterial>> {
        let member = challenge.member.as_str();
        let outcome = match self.mainlist.lookup(member, &self.group) {
            Some(entry) => otp::verify(&entry.auth, challenge),
            None => AuthOutcome::Rejected,
        };
        match outcome {
            AuthOutcome::Accepted {
                record,
                individual_key,
            } => {
                let mut entry = self
                    .mainlist
                    .lookup(member, &self.group)
                    .expect("verified against it")
                    .clone();
                entry.auth = record;
                self.mainlist.store(entry);
                let client_key = self.member_mut(member)?.secret.accept()?;
                if client_key != individual_key {
                    return Err(Error::Protocol(format!("{member} derived a different session key")));
                }
                Ok(Some(individual_key))
            }
            AuthOutcome::Rejected => {
                self.member_mut(member)?.secret.reject();
                Ok(None)
            }
        }
    }

    /// Individual key for a join: the session key under the CRAW scheme,
    /// otherwise a fresh server key shipped under the session key.
    fn individual_key_for(&mut self, member: &str, area: &str, session_key: KeyMaterial, tx: &mut Stamper) -> KeyMaterial {
        if self.scheme.key_from_auth() {
            return session_key;
        }
        let key = random_key(&mut self.rng);
        let ct = encrypt(&session_key, &key.0);
        tx.send(MessageKind::KeyGeneration, aws_name(area), aws_name(area), Vec::new());
        tx.send(
            MessageKind::IndividualKeyDelivery,
            aws_name(area),
            member,
            [ct.nonce.as_slice(), &ct.sealed].concat(),
        );
        key
    }

    /// Places a registered member in an area without messages, used to build
    /// initial rosters. The session and tree join still happen.
    pub fn seed_member(&mut self, member: &str, area: &str) -> Result<RekeyOutput> {
        self.area(area)?;
        if let Some(current) = &self.member(member)?.area {
            return Err(Error::Protocol(format!("{member} is already in area {current}")));
        }
        let challenge = self.challenge(member)?;
        let session = self
            .verify_challenge(&challenge)?
            .ok_or_else(|| Error::Scenario(format!("initial member {member} failed authentication")))?;
        let key = if self.scheme.key_from_auth() {
            session
        } else {
            random_key(&mut self.rng)
        };
        let out = self.rekey_join(member, area, key)?;
        let entry = self
            .mainlist
            .transition(member, &self.group, MemberStatus::Active)?;
        entry.last_area = Some(area.to_owned());
        Ok(out)
    }

    /// Tree join in `area`: refreshes every present member's view and
    /// installs the joiner's.
    fn rekey_join(&mut self, member: &str, area: &str, key: KeyMaterial) -> Result<RekeyOutput> {
        let aws = self
            .areas
            .get_mut(area)
            .ok_or_else(|| Error::Protocol(format!("unknown area {area}")))?;
        let out = aws.tree.join(member, key, &mut self.rng)?;
        for other in aws.tree.tree().members() {
            if other == member {
                continue;
            }
            let view = self
                .members
                .get_mut(other)
                .and_then(|m| m.views.get_mut(area))
                .ok_or_else(|| Error::Protocol(format!("{other} has no view of {area}")))?;
            aws.tree.refresh(view, &out)?;
        }
        let view = aws.tree.joiner_view(member, key, &out)?;
        let m = self.members.get_mut(member).expect("checked by caller");
        m.views.insert(area.to_owned(), view);
        m.area = Some(area.to_owned());
        m.serving = Some(area.to_owned());
        Ok(out)
    }

    fn rekey_leave(&mut self, member: &str, area: &str) -> Result<RekeyOutput> {
        let aws = self
            .areas
            .get_mut(area)
            .ok_or_else(|| Error::Protocol(format!("unknown area {area}")))?;
        let out = aws.tree.leave(member, &mut self.rng)?;
        for other in aws.tree.tree().members() {
            let view = self
                .members
                .get_mut(other)
                .and_then(|m| m.views.get_mut(area))
                .ok_or_else(|| Error::Protocol(format!("{other} has no view of {area}")))?;
            aws.tree.refresh(view, &out)?;
        }
        let m = self.members.get_mut(member).expect("checked by caller");
        if let Some(view) = m.views.remove(area) {
            m.former.push((area.to_owned(), view));
        }
        Ok(out)
    }

    fn update_entry(&mut self, now: SimTime, member: &str, status: MemberStatus, last_area: Option<&str>) -> Result<Vec<u8>> {
        let delivered = self.member(member)?.delivered;
        let entry = self.mainlist.transition(member, &self.group, status)?;
        if let Some(area) = last_area {
            entry.last_area = Some(area.to_owned());
        }
        entry.service_accounting = entry.service_accounting.max(delivered);
        entry.last_update = now;
        Ok(serde_json::to_vec(&*entry).expect("entry serializes"))
    }

    fn latency(&self) -> SimTime {
        self.delays.micros(self.delays.link_latency)
    }

    fn set_busy(&mut self, member: &str, busy: bool) -> Result<()> {
        let m = self.member_mut(member)?;
        if busy && m.busy {
            return Err(Error::Protocol(format!("{member} already has a procedure in flight")));
        }
        m.busy = busy;
        Ok(())
    }

    fn finish(&mut self, st: &mut StepOutcome, member: &str) -> Result<()> {
        let m = self.member_mut(member)?;
        m.busy = false;
        m.state = HandoffState::Connected;
        st.finished = Some(member.to_owned());
        Ok(())
    }

    /// Join up to the challenge: connect, request, fetch the record, and the
    /// member's (alpha, beta).
    pub fn join_begin(&mut self, now: SimTime, member: &str, area: &str) -> Result<StepOutcome> {
        self.area(area)?;
        if let Some(current) = &self.member(member)?.area {
            return Err(Error::Protocol(format!("{member} is already in area {current}")));
        }
        self.set_busy(member, true)?;
        let mut st = StepOutcome::default();
        let mut tx = Stamper::new(now, self.latency(), &mut st.messages);
        tx.send(MessageKind::IgmpConnect, member, aws_name(area), Vec::new());
        tx.send(MessageKind::IgmpConnect, aws_name(area), MAIN_SERVER, Vec::new());
        tx.send(MessageKind::JoinRequest, member, aws_name(area), Vec::new());
        tx.send(MessageKind::MainlistQuery, aws_name(area), MAIN_SERVER, member.as_bytes().to_vec());
        let Some(entry) = self.mainlist.lookup(member, &self.group) else {
            tx.send(MessageKind::MainlistReply, MAIN_SERVER, aws_name(area), Vec::new());
            tx.send(MessageKind::AuthResult, aws_name(area), member, b"rejected".to_vec());
            st.rejected = true;
            self.finish(&mut st, member)?;
            return Ok(st);
        };
        let record = serde_json::to_vec(&entry.auth).expect("record serializes");
        tx.send(MessageKind::MainlistReply, MAIN_SERVER, aws_name(area), record);
        let challenge = self.challenge(member)?;
        let mut tx = Stamper::new(now, self.latency(), &mut st.messages);
        tx.send(MessageKind::AuthChallenge, member, aws_name(area), challenge.to_wire().into_bytes());
        let auth_time = match self.join_mode() {
            JoinMode::Craw => self.delays.t_auth,
            JoinMode::Ordinary => self.delays.t_auth_ordinary,
        };
        st.next = Some((
            now + self.delays.micros(auth_time),
            Stage::JoinAuth {
                member: member.to_owned(),
                area: area.to_owned(),
                started: now,
                challenge,
            },
        ));
        Ok(st)
    }

    pub fn run_stage(&mut self, now: SimTime, stage: Stage) -> Result<StepOutcome> {
        match stage {
            Stage::JoinAuth {
                member,
                area,
                started,
                challenge,
            } => self.join_auth(now, &member, &area, started, &challenge),
            Stage::JoinComplete {
                member,
                area,
                started,
                session_key,
            } => self.join_complete(now, &member, &area, started, session_key),
            Stage::MoveRequest {
                member,
                from,
                to,
                started,
            } => self.move_request(now, &member, &from, &to, started),
            Stage::MoveAuth {
                member,
                from,
                to,
                started,
                probed,
                challenge,
            } => self.move_auth(now, &member, &from, &to, started, probed, &challenge),
            Stage::MoveComplete {
                member,
                from,
                to,
                phases,
                individual_key,
            } => self.move_complete(now, &member, &from, &to, phases, individual_key),
        }
    }

    fn join_auth(&mut self, now: SimTime, member: &str, area: &str, started: SimTime, challenge: &AuthChallenge) -> Result<StepOutcome> {
        let mut st = StepOutcome::default();
        let session = self.verify_challenge(challenge)?;
        let mut tx = Stamper::new(now, self.latency(), &mut st.messages);
        let Some(session_key) = session else {
            tx.send(MessageKind::AuthResult, aws_name(area), member, b"rejected".to_vec());
            st.rejected = true;
            self.finish(&mut st, member)?;
            return Ok(st);
        };
        tx.send(MessageKind::AuthResult, aws_name(area), member, b"accepted".to_vec());
        let prep = match self.join_mode() {
            JoinMode::Craw => SimTime::ZERO,
            JoinMode::Ordinary => self.delays.micros(self.delays.t_keygen + self.delays.t_keydist),
        };
        let stage = Stage::JoinComplete {
            member: member.to_owned(),
            area: area.to_owned(),
            started,
            session_key,
        };
        if prep == SimTime::ZERO {
            let done = self.run_stage(now, stage)?;
            st.absorb(done);
        } else {
            st.next = Some((now + prep, stage));
        }
        Ok(st)
    }

    fn join_complete(&mut self, now: SimTime, member: &str, area: &str, started: SimTime, session_key: KeyMaterial) -> Result<StepOutcome> {
        let mut st = StepOutcome::default();
        let mut messages = Vec::new();
        let mut tx = Stamper::new(now, self.latency(), &mut messages);
        let key = self.individual_key_for(member, area, session_key, &mut tx);
        let out = self.rekey_join(member, area, key)?;
        let mut tx = Stamper::new(now, self.latency(), &mut messages);
        tx.rekey(area, &out);
        let update = self.update_entry(now, member, MemberStatus::Active, Some(area))?;
        let mut tx = Stamper::new(now, self.latency(), &mut messages);
        tx.send(MessageKind::MainlistUpdate, aws_name(area), MAIN_SERVER, update);
        st.messages = messages;
        st.rekeys.push(AreaRekey {
            kind: RekeyKind::Join,
            area: area.to_owned(),
            member: member.to_owned(),
            time: now,
            group_size: self.area(area)?.tree.tree().len(),
            output: out,
        });
        st.join_setup = Some(JoinSetup {
            started,
            completed: now,
            mode: self.join_mode(),
        });
        self.finish(&mut st, member)?;
        Ok(st)
    }

    /// Leave runs in one step: request, forward, main-list record, re-key.
    pub fn leave(&mut self, now: SimTime, member: &str, area: &str) -> Result<StepOutcome> {
        self.area(area)?;
        let m = self.member(member)?;
        if m.area.as_deref() != Some(area) {
            return Err(Error::Protocol(format!("{member} is not active in area {area}")));
        }
        if m.busy {
            return Err(Error::Protocol(format!("{member} already has a procedure in flight")));
        }
        let mut st = StepOutcome::default();
        let mut tx = Stamper::new(now, self.latency(), &mut st.messages);
        tx.send(MessageKind::LeaveRequest, member, aws_name(area), Vec::new());
        tx.send(MessageKind::LeaveRequest, aws_name(area), MAIN_SERVER, member.as_bytes().to_vec());
        let update = self.update_entry(now, member, MemberStatus::Left, Some(area))?;
        let mut tx = Stamper::new(now, self.latency(), &mut st.messages);
        tx.send(MessageKind::MainlistUpdate, aws_name(area), MAIN_SERVER, update);
        let out = self.rekey_leave(member, area)?;
        let mut tx = Stamper::new(now, self.latency(), &mut st.messages);
        tx.rekey(area, &out);
        let m = self.member_mut(member)?;
        m.area = None;
        m.serving = None;
        st.rekeys.push(AreaRekey {
            kind: RekeyKind::Leave,
            area: area.to_owned(),
            member: member.to_owned(),
            time: now,
            group_size: self.area(area)?.tree.tree().len() + 1,
            output: out,
        });
        st.finished = Some(member.to_owned());
        Ok(st)
    }

    /// Hand-off starts with probing for the new AWS; nothing is sent yet.
    pub fn move_begin(&mut self, now: SimTime, member: &str, from: &str, to: &str) -> Result<StepOutcome> {
        self.area(from)?;
        self.area(to)?;
        if from == to {
            return Err(Error::Protocol(format!("{member} cannot move within area {from}")));
        }
        if self.member(member)?.area.as_deref() != Some(from) {
            return Err(Error::Protocol(format!("{member} is not active in area {from}")));
        }
        self.set_busy(member, true)?;
        self.member_mut(member)?.state = HandoffState::Probing;
        Ok(StepOutcome {
            next: Some((
                now + self.delays.micros(self.delays.t_probe),
                Stage::MoveRequest {
                    member: member.to_owned(),
                    from: from.to_owned(),
                    to: to.to_owned(),
                    started: now,
                },
            )),
            ..Default::default()
        })
    }

    fn move_request(&mut self, now: SimTime, member: &str, from: &str, to: &str, started: SimTime) -> Result<StepOutcome> {
        let mut st = StepOutcome::default();
        let challenge = self.challenge(member)?;
        let mut tx = Stamper::new(now, self.latency(), &mut st.messages);
        tx.send(MessageKind::HandoffLeave, member, aws_name(from), Vec::new());
        tx.send(MessageKind::HandoffJoin, member, aws_name(to), Vec::new());
        tx.send(MessageKind::AuthChallenge, member, aws_name(to), challenge.to_wire().into_bytes());
        let update = self.update_entry(now, member, MemberStatus::Moving, None)?;
        let mut tx = Stamper::new(now, self.latency(), &mut st.messages);
        tx.send(MessageKind::MainlistUpdate, aws_name(from), MAIN_SERVER, update);
        tx.send(MessageKind::MainlistQuery, aws_name(to), MAIN_SERVER, member.as_bytes().to_vec());
        let record = self
            .mainlist
            .lookup(member, &self.group)
            .map(|e| serde_json::to_vec(&e.auth).expect("record serializes"))
            .unwrap_or_default();
        tx.send(MessageKind::MainlistReply, MAIN_SERVER, aws_name(to), record);
        self.areas
            .get_mut(to)
            .expect("checked at begin")
            .pending_handoffs
            .insert(member.to_owned());
        self.member_mut(member)?.state = HandoffState::Reauthenticating;
        st.next = Some((
            now + self.delays.micros(self.delays.reauth_phase(self.join_mode())),
            Stage::MoveAuth {
                member: member.to_owned(),
                from: from.to_owned(),
                to: to.to_owned(),
                started,
                probed: now,
                challenge,
            },
        ));
        Ok(st)
    }

    #[allow(clippy::too_many_arguments)]
    fn move_auth(
        &mut self,
        now: SimTime,
        member: &str,
        from: &str,
        to: &str,
        started: SimTime,
        probed: SimTime,
        challenge: &AuthChallenge,
    ) -> Result<StepOutcome> {
        let mut st = StepOutcome::default();
        let session = self.verify_challenge(challenge)?;
        let mut messages = Vec::new();
        let mut tx = Stamper::new(now, self.latency(), &mut messages);
        let Some(session_key) = session else {
            tx.send(MessageKind::AuthResult, aws_name(to), member, b"rejected".to_vec());
            let update = self.update_entry(now, member, MemberStatus::Active, None)?;
            let mut tx = Stamper::new(now, self.latency(), &mut messages);
            tx.send(MessageKind::MainlistUpdate, aws_name(from), MAIN_SERVER, update);
            self.areas
                .get_mut(to)
                .expect("checked at begin")
                .pending_handoffs
                .remove(member);
            st.messages = messages;
            st.rejected = true;
            self.finish(&mut st, member)?;
            return Ok(st);
        };
        tx.send(MessageKind::AuthResult, aws_name(to), member, b"accepted".to_vec());
        let individual_key = self.individual_key_for(member, to, session_key, &mut tx);
        st.messages = messages;
        st.reauthenticated = Some(now);
        self.member_mut(member)?.state = HandoffState::Reassociating;
        st.next = Some((
            now + self.delays.micros(self.delays.t_reassoc),
            Stage::MoveComplete {
                member: member.to_owned(),
                from: from.to_owned(),
                to: to.to_owned(),
                phases: HandoffPhases {
                    started,
                    probed,
                    reauthenticated: now,
                    completed: now,
                },
                individual_key,
            },
        ));
        Ok(st)
    }

    /// New-area join and key delivery, the ack, then the old-area leave.
    fn move_complete(
        &mut self,
        now: SimTime,
        member: &str,
        from: &str,
        to: &str,
        mut phases: HandoffPhases,
        individual_key: KeyMaterial,
    ) -> Result<StepOutcome> {
        let mut st = StepOutcome::default();
        let joined = self.rekey_join(member, to, individual_key)?;
        self.areas
            .get_mut(to)
            .expect("checked at begin")
            .pending_handoffs
            .remove(member);
        let mut tx = Stamper::new(now, self.latency(), &mut st.messages);
        tx.rekey(to, &joined);
        tx.send(MessageKind::AreaJoinAck, aws_name(to), aws_name(from), member.as_bytes().to_vec());
        let left = self.rekey_leave(member, from)?;
        let mut tx = Stamper::new(now, self.latency(), &mut st.messages);
        tx.rekey(from, &left);
        let update = self.update_entry(now, member, MemberStatus::Active, Some(to))?;
        let mut tx = Stamper::new(now, self.latency(), &mut st.messages);
        tx.send(MessageKind::MainlistUpdate, aws_name(to), MAIN_SERVER, update);
        st.rekeys.push(AreaRekey {
            kind: RekeyKind::HandoffJoin,
            area: to.to_owned(),
            member: member.to_owned(),
            time: now,
            group_size: self.area(to)?.tree.tree().len(),
            output: joined,
        });
        st.rekeys.push(AreaRekey {
            kind: RekeyKind::HandoffLeave,
            area: from.to_owned(),
            member: member.to_owned(),
            time: now,
            group_size: self.area(from)?.tree.tree().len() + 1,
            output: left,
        });
        phases.completed = now;
        st.handoff = Some(phases);
        self.finish(&mut st, member)?;
        Ok(st)
    }

    /// Credits one delivered content unit to the member.
    pub fn credit_delivery(&mut self, member: &str) -> Result<()> {
        self.member_mut(member)?.delivered += 1;
        Ok(())
    }

    /// Members whose key views disagree with their area's tree, as
    /// (member, area) pairs.
    pub fn view_mismatches(&self) -> Vec<(MemberId, AreaId)> {
        let mut bad = Vec::new();
        for (area, aws) in &self.areas {
            for id in aws.tree.tree().members() {
                let held = self.members.get(id).and_then(|m| m.views.get(area));
                let ok = held.is_some_and(|v| Some(&v.keys) == aws.tree.tree().path_keys(id).as_ref());
                if !ok {
                    bad.push((id.clone(), area.clone()));
                }
            }
        }
        for m in self.members.values() {
            for area in m.views.keys() {
                if !self.areas[area].tree.tree().contains(&m.id) {
                    bad.push((m.id.clone(), area.clone()));
                }
            }
        }
        bad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::seeded_rng;

    fn network(scheme: Scheme, rosters: &[(&str, usize)], extra: &[&str]) -> Network {
        let mut net = Network::new(scheme, "g", DelayConfig::default(), seeded_rng(7));
        for (area, n) in rosters {
            net.add_area(area).unwrap();
            for i in 0..*n {
                let id = format!("{area}{i}");
                net.add_member(&id, b"pw", true).unwrap();
                net.seed_member(&id, area).unwrap();
            }
        }
        for id in extra {
            net.add_member(id, b"pw", true).unwrap();
        }
        net
    }

    /// Runs a procedure to completion, returning every stage outcome.
    fn drive(net: &mut Network, first: StepOutcome) -> Vec<StepOutcome> {
        let mut all = Vec::new();
        let mut next = first.next.clone();
        all.push(first);
        while let Some((at, stage)) = next {
            let st = net.run_stage(at, stage).unwrap();
            next = st.next.clone();
            all.push(st);
        }
        all
    }

    fn kinds(steps: &[StepOutcome]) -> Vec<&'static str> {
        steps
            .iter()
            .flat_map(|s| s.messages.iter().map(|m| m.kind.as_str()))
            .collect()
    }

    #[test]
    fn mainlist_store_lookup_and_miss() {
        let mut list = MainList::default();
        assert!(list.lookup("u1", "g").is_none());
        let mut rng = seeded_rng(1);
        let entry = MainListEntry {
            member: "u1".into(),
            group: "g".into(),
            auth: otp::register(&ClientSecret::new("u1", b"pw", &mut rng)),
            last_area: None,
            status: MemberStatus::Left,
            service_accounting: 0,
            last_update: SimTime::ZERO,
        };
        list.register(entry.clone()).unwrap();
        assert_eq!(list.lookup("u1", "g"), Some(&entry));
        assert!(list.lookup("u1", "other").is_none());
        assert_eq!(list.register(entry.clone()), Err(Error::DuplicateRegistration("u1".into())));
        assert!(list.transition("u1", "g", MemberStatus::Moving).is_err());
        list.transition("u1", "g", MemberStatus::Active).unwrap();
        list.transition("u1", "g", MemberStatus::Moving).unwrap();
        list.transition("u1", "g", MemberStatus::Active).unwrap();
        list.transition("u1", "g", MemberStatus::Left).unwrap();
        assert_eq!(list.len(), 1);
    }

    #[test]
    fn craw_join_sends_one_unicast_and_no_individual_key() {
        let mut net = network(Scheme::CkcCraw, &[("B", 7)], &["u8"]);
        let first = net.join_begin(SimTime(1_000_000), "u8", "B").unwrap();
        let steps = drive(&mut net, first);
        assert_eq!(
            kinds(&steps),
            [
                "igmp_connect",
                "igmp_connect",
                "join_request",
                "mainlist_query",
                "mainlist_reply",
                "auth_challenge",
                "auth_result",
                "key_unicast",
                "mainlist_update"
            ]
        );
        let setup = steps.iter().find_map(|s| s.join_setup).unwrap();
        assert_eq!(setup.completed - setup.started, SimTime(2517));
        let entry = net.mainlist().lookup("u8", "g").unwrap();
        assert_eq!(entry.status, MemberStatus::Active);
        assert_eq!(entry.last_area.as_deref(), Some("B"));
        assert_eq!(entry.auth.session, 2);
        assert!(net.view_mismatches().is_empty());
    }

    #[test]
    fn ordinary_join_generates_and_ships_a_key() {
        for scheme in [Scheme::CkcPlain, Scheme::Lkh] {
            let mut net = network(scheme, &[("B", 7)], &["u8"]);
            let first = net.join_begin(SimTime::ZERO, "u8", "B").unwrap();
            let steps = drive(&mut net, first);
            let k = kinds(&steps);
            assert!(k.contains(&"key_generation") && k.contains(&"individual_key_delivery"));
            let setup = steps.iter().find_map(|s| s.join_setup).unwrap();
            assert_eq!(setup.completed - setup.started, SimTime(939_237));
            assert!(net.view_mismatches().is_empty());
        }
    }

    #[test]
    fn unregistered_and_impostor_joins_are_rejected_without_rekeying() {
        let mut net = network(Scheme::CkcCraw, &[("B", 4)], &["eve"]);
        net.add_member("ghost", b"pw", false).unwrap();
        let before = net.area("B").unwrap().tree.clone();
        let first = net.join_begin(SimTime::ZERO, "ghost", "B").unwrap();
        let steps = drive(&mut net, first);
        assert_eq!(kinds(&steps).last(), Some(&"auth_result"));
        assert!(steps.iter().any(|s| s.rejected));
        net.corrupt_password("eve", b"guess").unwrap();
        let first = net.join_begin(SimTime::ZERO, "eve", "B").unwrap();
        let steps = drive(&mut net, first);
        assert_eq!(kinds(&steps).last(), Some(&"auth_result"));
        assert!(steps.iter().all(|s| s.rekeys.is_empty()));
        assert_eq!(net.area("B").unwrap().tree, before);
        assert!(!net.member("eve").unwrap().busy);
    }

    #[test]
    fn leave_multicasts_one_payload_per_level_and_rejoin_works() {
        let mut net = network(Scheme::CkcCraw, &[("A", 8)], &[]);
        let st = net.leave(SimTime(5), "A7", "A").unwrap();
        assert_eq!(
            kinds(std::slice::from_ref(&st)),
            ["leave_request", "leave_request", "mainlist_update", "key_multicast", "key_multicast", "key_multicast"]
        );
        assert_eq!(st.rekeys[0].output.counters.multicast_sends, 3);
        let entry = net.mainlist().lookup("A7", "g").unwrap();
        assert_eq!(entry.status, MemberStatus::Left);
        assert!(net.member("A7").unwrap().views.is_empty());
        assert!(net.view_mismatches().is_empty());
        let first = net.join_begin(SimTime(10), "A7", "A").unwrap();
        let steps = drive(&mut net, first);
        assert!(steps.iter().all(|s| !s.rejected));
        assert_eq!(net.mainlist().lookup("A7", "g").unwrap().auth.session, 3);
    }

    #[test]
    fn move_is_join_in_new_area_then_leave_in_old() {
        let mut net = network(Scheme::CkcCraw, &[("A", 8), ("B", 7)], &[]);
        let first = net.move_begin(SimTime::ZERO, "A7", "A", "B").unwrap();
        assert!(first.messages.is_empty());
        let steps = drive(&mut net, first);
        assert_eq!(
            kinds(&steps),
            [
                "handoff_leave",
                "handoff_join",
                "auth_challenge",
                "mainlist_update",
                "mainlist_query",
                "mainlist_reply",
                "auth_result",
                "key_unicast",
                "area_join_ack",
                "key_multicast",
                "key_multicast",
                "key_multicast",
                "mainlist_update"
            ]
        );
        let rekeys: Vec<&AreaRekey> = steps.iter().flat_map(|s| &s.rekeys).collect();
        let join = rekeys[0].output.counters;
        let leave = rekeys[1].output.counters;
        assert_eq!((join.encryptions, join.unicast_sends), (1, 1));
        assert_eq!(leave.multicast_sends, 3);
        let phases = steps.iter().find_map(|s| s.handoff).unwrap();
        assert_eq!(phases.total(), SimTime(946_034));
        let entry = net.mainlist().lookup("A7", "g").unwrap();
        assert_eq!((entry.status, entry.last_area.as_deref()), (MemberStatus::Active, Some("B")));
        assert_eq!(net.area("A").unwrap().members().count(), 7);
        assert_eq!(net.area("B").unwrap().members().count(), 8);
        assert!(net.view_mismatches().is_empty());
    }

    #[test]
    fn rejected_handoff_keeps_member_in_old_area() {
        let mut net = network(Scheme::CkcCraw, &[("A", 4), ("B", 3)], &[]);
        net.corrupt_password("A0", b"nope").unwrap();
        let trees: Vec<AreaTree> = net.areas().values().map(|a| a.tree.clone()).collect();
        let first = net.move_begin(SimTime::ZERO, "A0", "A", "B").unwrap();
        let steps = drive(&mut net, first);
        assert!(steps.iter().any(|s| s.rejected));
        assert_eq!(kinds(&steps).last(), Some(&"mainlist_update"));
        let after: Vec<AreaTree> = net.areas().values().map(|a| a.tree.clone()).collect();
        assert_eq!(trees, after);
        let m = net.member("A0").unwrap();
        assert_eq!((m.area.as_deref(), m.state, m.busy), (Some("A"), HandoffState::Connected, false));
        assert_eq!(net.mainlist().lookup("A0", "g").unwrap().status, MemberStatus::Active);
    }

    #[test]
    fn procedures_check_preconditions() {
        let mut net = network(Scheme::Lkh, &[("A", 2), ("B", 1)], &["x"]);
        assert!(net.join_begin(SimTime::ZERO, "A0", "B").is_err());
        assert!(net.leave(SimTime::ZERO, "x", "A").is_err());
        assert!(net.move_begin(SimTime::ZERO, "A0", "A", "A").is_err());
        assert!(net.move_begin(SimTime::ZERO, "A0", "B", "A").is_err());
        net.move_begin(SimTime::ZERO, "A0", "A", "B").unwrap();
        assert!(net.leave(SimTime::ZERO, "A0", "A").is_err());
    }
}
