//! Per-node consensus state machine.
//!
//! Two variants share one type, selected by [`Protocol`]:
//!
//! * `TwoPhase` publishes as soon as the view-agnostic `(h, block)` response
//!   pool holds a quorum of distinct signers.
//! * `ThreePhase` turns a view-bound `(h, v, block)` response quorum into a
//!   commit lock plus a signed COMMIT, and publishes on a COMMIT quorum.
//!
//! Deliveries only pool messages and answer PREPAREs. All quorum rules
//! (publish, commit, view change) are evaluated once per tick in
//! [`Replica::end_of_tick`], after every delivery of that tick was pooled.
//! A replica that then holds quorums for two conflicting blocks at its
//! height publishes neither and reports a tie.
//!
//! The speaker's PREPARE counts as its response on its own proposal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::model::{select_speaker, Actor, BlockId, ClientId, Config, Msg, MsgKind, NodeId, Protocol, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Phase {
    #[default]
    Idle,
    Prepared,
    Responded,
    Committed,
    Published,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Idle => "Idle",
            Phase::Prepared => "Prepared",
            Phase::Responded => "Responded",
            Phase::Committed => "Committed",
            Phase::Published => "Published",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        [
            Phase::Idle,
            Phase::Prepared,
            Phase::Responded,
            Phase::Committed,
            Phase::Published,
        ]
        .into_iter()
        .find(|p| p.as_str().eq_ignore_ascii_case(s))
        .ok_or_else(|| Error::Config(format!("unknown phase `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CertKind {
    /// PREPARE and RESPONSE signatures.
    Response,
    Commit,
}

impl CertKind {
    pub fn counts(self, kind: MsgKind) -> bool {
        match self {
            CertKind::Response => matches!(kind, MsgKind::Prepare | MsgKind::Response),
            CertKind::Commit => kind == MsgKind::Commit,
        }
    }
}

impl fmt::Display for CertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CertKind::Response => "RESPONSE",
            CertKind::Commit => "COMMIT",
        })
    }
}

/// Distinct-signer set claimed to justify publishing `block`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub h: u64,
    pub block: BlockId,
    pub kind: CertKind,
    /// Set when counted per view.
    pub view: Option<u64>,
    /// Signer to the view of the signature counted for it.
    pub members: BTreeMap<NodeId, u64>,
}

impl Certificate {
    pub fn signers(&self) -> BTreeSet<NodeId> {
        self.members.keys().copied().collect()
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Side effects requested by a replica; the simulator carries them out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Send { msg: Msg, to: Vec<Actor> },
    ArmTimer { h: u64, v: u64, duration: u64 },
    CancelTimer { h: u64, v: u64 },
    State { h: u64, v: u64, phase: Phase, lock: Option<String> },
    Publish { block: BlockId, v: u64 },
    ForkSuspect { h: u64, blocks: Vec<String> },
    Note(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct PoolKey {
    h: u64,
    /// `None` under two-phase counting.
    v: Option<u64>,
    block: BlockId,
}

type SignerPool = BTreeMap<NodeId, Msg>;

#[derive(Debug, Clone)]
pub struct Replica {
    id: NodeId,
    cfg: Config,
    heights: Option<u64>,
    view: View,
    phase: Phase,
    vc_target: Option<u64>,
    accepted: Option<BlockId>,
    committed_view: Option<u64>,
    responses: BTreeMap<PoolKey, SignerPool>,
    commits: BTreeMap<(u64, BlockId), SignerPool>,
    viewchanges: BTreeMap<u64, SignerPool>,
    future: Vec<Msg>,
    ledger: Vec<BlockId>,
    publish_views: Vec<u64>,
    commit_lock: Option<BlockId>,
    requests: BTreeMap<ClientId, Msg>,
    replies: BTreeMap<ClientId, (u64, Option<Msg>)>,
    timer: Option<(u64, u64)>,
    ties: BTreeSet<Vec<String>>,
    halted: bool,
}

impl Replica {
    /// `heights` bounds how many heights this replica will start.
    pub fn new(id: NodeId, cfg: Config, heights: Option<u64>) -> Self {
        Replica {
            id,
            cfg,
            heights,
            view: View::default(),
            phase: Phase::Idle,
            vc_target: None,
            accepted: None,
            committed_view: None,
            responses: BTreeMap::new(),
            commits: BTreeMap::new(),
            viewchanges: BTreeMap::new(),
            future: Vec::new(),
            ledger: Vec::new(),
            publish_views: Vec::new(),
            commit_lock: None,
            requests: BTreeMap::new(),
            replies: BTreeMap::new(),
            timer: None,
            ties: BTreeSet::new(),
            halted: false,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn view_change_target(&self) -> Option<u64> {
        self.vc_target
    }

    pub fn ledger(&self) -> &[BlockId] {
        &self.ledger
    }

    /// View in which each ledger entry was published.
    pub fn publish_views(&self) -> &[u64] {
        &self.publish_views
    }

    pub fn commit_lock(&self) -> Option<&BlockId> {
        self.commit_lock.as_ref()
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn pending_requests(&self) -> usize {
        self.requests.len()
    }

    pub fn is_speaker(&self) -> bool {
        select_speaker(self.view.h, self.view.v, self.cfg.n) == self.id
    }

    /// Distinct signers pooled for `block` at the current height, counted
    /// under this replica's rule (`v` is ignored under two-phase).
    pub fn response_count(&self, v: u64, block: &BlockId) -> usize {
        let key = self.key(self.view.h, v, block.clone());
        self.responses.get(&key).map_or(0, BTreeMap::len)
    }

    pub fn commit_count(&self, v: u64, block: &BlockId) -> usize {
        self.commits
            .get(&(v, block.clone()))
            .map_or(0, BTreeMap::len)
    }

    pub fn viewchange_count(&self, target: u64) -> usize {
        self.viewchanges.get(&target).map_or(0, BTreeMap::len)
    }

    fn key(&self, h: u64, v: u64, block: BlockId) -> PoolKey {
        PoolKey {
            h,
            v: match self.cfg.protocol {
                Protocol::TwoPhase => None,
                Protocol::ThreePhase => Some(v),
            },
            block,
        }
    }

    fn others(&self) -> Vec<Actor> {
        self.cfg
            .nodes()
            .filter(|n| *n != self.id)
            .map(Actor::Node)
            .collect()
    }

    fn me(&self) -> Actor {
        Actor::Node(self.id)
    }

    fn state(&self, out: &mut Vec<Effect>) {
        out.push(Effect::State {
            h: self.view.h,
            v: self.view.v,
            phase: self.phase,
            lock: self.commit_lock.as_ref().map(|b| b.tag.clone()),
        });
    }

    fn note(&self, out: &mut Vec<Effect>, text: String) {
        out.push(Effect::Note(text));
    }

    fn arm(&mut self, v: u64, out: &mut Vec<Effect>) {
        if let Some((h, old)) = self.timer.take() {
            out.push(Effect::CancelTimer { h, v: old });
        }
        let h = self.view.h;
        out.push(Effect::ArmTimer {
            h,
            v,
            duration: self.cfg.view_timeout(v),
        });
        self.timer = Some((h, v));
    }

    fn broadcast(&self, msg: Msg, out: &mut Vec<Effect>) {
        out.push(Effect::Send {
            msg,
            to: self.others(),
        });
    }

    fn pool_response(&mut self, msg: &Msg) {
        let (Some(signer), Some(block)) = (msg.signer_node(), msg.block.clone()) else {
            return;
        };
        let key = self.key(msg.view.h, msg.view.v, block);
        self.responses
            .entry(key)
            .or_default()
            .entry(signer)
            .or_insert_with(|| msg.clone());
    }

    /// Entry point for the first height.
    pub fn start(&mut self, now: u64) -> Vec<Effect> {
        let mut out = Vec::new();
        if self.heights == Some(0) {
            self.halted = true;
            return out;
        }
        self.on_new_height(now, &mut out);
        out
    }

    /// Arms the view-0 timer and proposes if this node is the speaker.
    pub fn on_new_height(&mut self, now: u64, out: &mut Vec<Effect>) {
        self.phase = Phase::Idle;
        self.state(out);
        self.arm(self.view.v, out);
        if self.is_speaker() {
            self.propose(now, out);
        }
    }

    fn propose(&mut self, now: u64, out: &mut Vec<Effect>) {
        let View { h, v } = self.view;
        let block = match (&self.commit_lock, self.cfg.protocol) {
            (Some(locked), Protocol::ThreePhase) => locked.clone(),
            _ => BlockId::new(h, format!("p{}-h{h}-v{v}-r{}", self.id.0, self.requests.len())),
        };
        let msg = Msg::signed(MsgKind::Prepare, self.view, Some(block.clone()), self.me(), now);
        self.pool_response(&msg);
        self.accepted = Some(block);
        self.phase = Phase::Prepared;
        self.broadcast(msg, out);
        self.state(out);
    }

    pub fn deliver(&mut self, msg: &Msg, now: u64) -> Vec<Effect> {
        let mut out = Vec::new();
        if !msg.verify() {
            self.note(&mut out, format!("ignored {}: signature does not verify", msg.kind));
            return out;
        }
        match msg.kind {
            MsgKind::Request => self.on_request(msg, &mut out),
            MsgKind::Reply => self.note(&mut out, "ignored REPLY addressed to a replica".into()),
            _ if self.halted => {
                if msg.view.h < self.view.h {
                    self.note(&mut out, format!("ignored {} for published height {}", msg.kind, msg.view.h));
                }
            }
            MsgKind::Prepare => self.on_prepare(msg, now, &mut out),
            MsgKind::Response => self.on_response(msg, &mut out),
            MsgKind::Commit => self.on_commit(msg, &mut out),
            MsgKind::ViewChange => self.on_viewchange(msg, &mut out),
        }
        out
    }

    /// Common height filter. Returns false (after a note) when `msg` is not
    /// for the current height.
    fn at_current_height(&self, msg: &Msg, out: &mut Vec<Effect>) -> bool {
        if msg.view.h < self.view.h {
            self.note(out, format!("ignored {} for published height {}", msg.kind, msg.view.h));
            false
        } else if msg.view.h > self.view.h {
            self.note(out, format!("ignored {} for future height {}", msg.kind, msg.view.h));
            false
        } else {
            true
        }
    }

    pub fn on_prepare(&mut self, msg: &Msg, now: u64, out: &mut Vec<Effect>) {
        let Some(sender) = msg.signer_node() else {
            return self.note(out, "ignored PREPARE signed by a client".into());
        };
        let Some(block) = msg.block.clone() else {
            return self.note(out, "ignored PREPARE without block".into());
        };
        if !self.at_current_height(msg, out) {
            return;
        }
        let speaker = select_speaker(msg.view.h, msg.view.v, self.cfg.n);
        if sender != speaker {
            return self.note(out, format!("ignored PREPARE from non-speaker {sender} (speaker {speaker})"));
        }
        self.pool_response(msg);
        if msg.view.v < self.view.v {
            return self.note(out, format!("discarded stale-view PREPARE v={} block={}", msg.view.v, block.tag));
        }
        if msg.view.v > self.view.v {
            self.future.push(msg.clone());
            return self.note(out, format!("buffered PREPARE for future view {}", msg.view.v));
        }
        if sender == self.id {
            return;
        }
        if let Some(target) = self.vc_target {
            return self.note(out, format!("ignored PREPARE: changing to view {target}"));
        }
        if let Some(accepted) = &self.accepted {
            if *accepted != block {
                self.note(
                    out,
                    format!("ignored conflicting PREPARE {} (accepted {})", block.tag, accepted.tag),
                );
            }
            return;
        }
        self.accepted = Some(block.clone());
        if self.cfg.protocol == Protocol::ThreePhase {
            if let Some(locked) = &self.commit_lock {
                if *locked != block {
                    return self.note(out, format!("refused PREPARE {}: locked on {}", block.tag, locked.tag));
                }
            }
        }
        let response = Msg::signed(MsgKind::Response, self.view, Some(block), self.me(), now);
        self.pool_response(&response);
        self.phase = Phase::Responded;
        self.broadcast(response, out);
        self.state(out);
    }

    pub fn on_response(&mut self, msg: &Msg, out: &mut Vec<Effect>) {
        if msg.signer_node().is_none() || msg.block.is_none() {
            return self.note(out, "ignored malformed RESPONSE".into());
        }
        if !self.at_current_height(msg, out) {
            return;
        }
        if self.cfg.protocol == Protocol::ThreePhase && msg.view.v < self.view.v {
            return self.note(out, format!("ignored stale-view RESPONSE v={}", msg.view.v));
        }
        self.pool_response(msg);
    }

    pub fn on_commit(&mut self, msg: &Msg, out: &mut Vec<Effect>) {
        if self.cfg.protocol == Protocol::TwoPhase {
            return self.note(out, "ignored COMMIT under two-phase".into());
        }
        let (Some(signer), Some(block)) = (msg.signer_node(), msg.block.clone()) else {
            return self.note(out, "ignored malformed COMMIT".into());
        };
        if !self.at_current_height(msg, out) {
            return;
        }
        if msg.view.v < self.view.v {
            return self.note(out, format!("ignored stale-view COMMIT v={}", msg.view.v));
        }
        self.commits
            .entry((msg.view.v, block))
            .or_default()
            .entry(signer)
            .or_insert_with(|| msg.clone());
    }

    pub fn on_viewchange(&mut self, msg: &Msg, out: &mut Vec<Effect>) {
        let Some(signer) = msg.signer_node() else {
            return self.note(out, "ignored VIEWCHANGE signed by a client".into());
        };
        if !self.at_current_height(msg, out) {
            return;
        }
        if msg.view.v <= self.view.v {
            return self.note(out, format!("ignored VIEWCHANGE to old view {}", msg.view.v));
        }
        self.viewchanges
            .entry(msg.view.v)
            .or_default()
            .entry(signer)
            .or_insert_with(|| msg.clone());
    }

    fn on_request(&mut self, msg: &Msg, out: &mut Vec<Effect>) {
        let Actor::Client(client) = msg.sender else {
            return self.note(out, "ignored REQUEST not signed by a client".into());
        };
        match self.replies.get(&client) {
            Some((ts, Some(reply))) if *ts == msg.timestamp => {
                out.push(Effect::Send {
                    msg: reply.clone(),
                    to: vec![msg.sender],
                });
                self.note(out, format!("duplicate REQUEST from {client} answered from cache"));
            }
            Some((ts, _)) if *ts >= msg.timestamp => {}
            _ => {
                self.replies.insert(client, (msg.timestamp, None));
                self.requests.insert(client, msg.clone());
            }
        }
    }

    /// Handles a fired timer. Returns `None` for a stale timer.
    pub fn on_timeout(&mut self, h: u64, v: u64, now: u64) -> Option<Vec<Effect>> {
        if self.halted || self.timer != Some((h, v)) {
            return None;
        }
        self.timer = None;
        let mut out = Vec::new();
        let next = v + 1;
        if next >= self.cfg.max_views {
            self.note(&mut out, format!("view budget exhausted at h={h} v={v}"));
            return Some(out);
        }
        let msg = Msg::signed(MsgKind::ViewChange, View::new(h, next), None, self.me(), now);
        self.viewchanges
            .entry(next)
            .or_default()
            .insert(self.id, msg.clone());
        self.vc_target = Some(next);
        self.broadcast(msg, &mut out);
        self.state(&mut out);
        self.arm(next, &mut out);
        Some(out)
    }

    /// Evaluates the quorum rules over everything pooled so far.
    pub fn end_of_tick(&mut self, now: u64) -> Vec<Effect> {
        let mut out = Vec::new();
        if self.halted {
            return out;
        }
        let published = match self.cfg.protocol {
            Protocol::TwoPhase => self.decide_two_phase(now, &mut out),
            Protocol::ThreePhase => self.decide_three_phase(now, &mut out),
        };
        if published {
            return out;
        }
        let quorum = self.cfg.quorum();
        let target = self
            .viewchanges
            .iter()
            .rev()
            .find(|(t, pool)| **t > self.view.v && pool.len() >= quorum)
            .map(|(t, _)| *t);
        if let Some(target) = target {
            self.enter_view(target, now, &mut out);
        }
        out
    }

    fn decide_two_phase(&mut self, now: u64, out: &mut Vec<Effect>) -> bool {
        let h = self.view.h;
        let quorum = self.cfg.quorum();
        let winners: Vec<BlockId> = self
            .responses
            .iter()
            .filter(|(k, pool)| k.h == h && pool.len() >= quorum)
            .map(|(k, _)| k.block.clone())
            .collect();
        match winners.len() {
            0 => false,
            1 => {
                let block = winners.into_iter().next().expect("one winner");
                self.publish(block, now, out);
                true
            }
            _ => {
                let tags: Vec<String> = winners.iter().map(|b| b.tag.clone()).collect();
                if self.ties.insert(tags.clone()) {
                    out.push(Effect::ForkSuspect { h, blocks: tags });
                }
                false
            }
        }
    }

    fn decide_three_phase(&mut self, now: u64, out: &mut Vec<Effect>) -> bool {
        let quorum = self.cfg.quorum();
        if let Some(block) = self.commit_winner(quorum) {
            self.publish(block, now, out);
            return true;
        }
        if self.vc_target.is_some() || self.committed_view == Some(self.view.v) {
            return false;
        }
        let View { h, v } = self.view;
        let candidate = self
            .responses
            .iter()
            .filter(|(k, pool)| k.h == h && k.v == Some(v) && pool.len() >= quorum)
            .map(|(k, _)| k.block.clone())
            .find(|b| self.commit_lock.as_ref().is_none_or(|l| l == b));
        let Some(block) = candidate else {
            return false;
        };
        self.commit_lock = Some(block.clone());
        self.committed_view = Some(v);
        self.phase = Phase::Committed;
        let commit = Msg::signed(MsgKind::Commit, self.view, Some(block.clone()), self.me(), now);
        self.commits
            .entry((v, block))
            .or_default()
            .insert(self.id, commit.clone());
        self.broadcast(commit, out);
        self.state(out);
        if let Some(block) = self.commit_winner(quorum) {
            self.publish(block, now, out);
            return true;
        }
        false
    }

    fn commit_winner(&self, quorum: usize) -> Option<BlockId> {
        self.commits
            .iter()
            .find(|(_, pool)| pool.len() >= quorum)
            .map(|((_, b), _)| b.clone())
    }

    fn publish(&mut self, block: BlockId, now: u64, out: &mut Vec<Effect>) {
        let View { h, v } = self.view;
        self.phase = Phase::Published;
        self.state(out);
        out.push(Effect::Publish {
            block: block.clone(),
            v,
        });
        for (client, request) in std::mem::take(&mut self.requests) {
            let reply = Msg::signed(MsgKind::Reply, View::new(h, v), Some(block.clone()), self.me(), request.timestamp);
            self.replies.insert(client, (request.timestamp, Some(reply.clone())));
            out.push(Effect::Send {
                msg: reply,
                to: vec![Actor::Client(client)],
            });
        }
        self.ledger.push(block);
        self.publish_views.push(v);
        if let Some((th, tv)) = self.timer.take() {
            out.push(Effect::CancelTimer { h: th, v: tv });
        }
        self.view = View::new(h + 1, 0);
        self.vc_target = None;
        self.accepted = None;
        self.committed_view = None;
        self.commit_lock = None;
        self.responses.clear();
        self.commits.clear();
        self.viewchanges.clear();
        self.future.clear();
        self.ties.clear();
        if self.heights.is_some_and(|limit| self.view.h >= limit) {
            self.halted = true;
            self.phase = Phase::Idle;
            return;
        }
        self.on_new_height(now, out);
    }

    fn enter_view(&mut self, target: u64, now: u64, out: &mut Vec<Effect>) {
        self.view.v = target;
        self.vc_target = None;
        self.accepted = None;
        self.committed_view = None;
        self.phase = Phase::Idle;
        self.viewchanges.retain(|t, _| *t > target);
        if self.cfg.protocol == Protocol::ThreePhase {
            self.responses.retain(|k, _| k.v.is_none_or(|v| v >= target));
        }
        self.state(out);
        if self.timer != Some((self.view.h, target)) {
            self.arm(target, out);
        }
        if self.is_speaker() {
            self.propose(now, out);
        }
        let (now_due, later): (Vec<Msg>, Vec<Msg>) = std::mem::take(&mut self.future)
            .into_iter()
            .partition(|m| m.view.v == target);
        self.future = later.into_iter().filter(|m| m.view.v > target).collect();
        for msg in now_due {
            self.on_prepare(&msg, now, out);
        }
    }
}
