//! Deterministic discrete-event multicast network.
//!
//! The network keeps the in-flight `(message, destination-set)` pairs and a
//! time-ordered event queue keyed by `(deliver_time, seq)`. Fault injection
//! is declarative: [`FaultRule`]s installed with [`NetState::misbehave`] are
//! applied to each `(message, destination)` at send time, first match wins.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::model::{Actor, ClientId, Msg, MsgKind, NodeId};
use crate::trace::{Record, Trace};

pub const BASE_LATENCY: u64 = 1;

/// Predicate over a `(message, destination)` pair. `None` fields match all.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Matcher {
    pub kind: Option<MsgKind>,
    pub sender: Option<Actor>,
    pub dests: Option<BTreeSet<Actor>>,
    pub view: Option<u64>,
    pub block_tag: Option<String>,
}

impl Matcher {
    pub fn matches(&self, msg: &Msg, dest: Actor) -> bool {
        self.kind.is_none_or(|k| k == msg.kind)
            && self.sender.is_none_or(|s| s == msg.sender)
            && self.dests.as_ref().is_none_or(|d| d.contains(&dest))
            && self.view.is_none_or(|v| v == msg.view.v)
            && self
                .block_tag
                .as_ref()
                .is_none_or(|t| msg.block.as_ref().is_some_and(|b| &b.tag == t))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultAction {
    Delay(u64),
    Drop,
    /// Deliver to this list instead; repeats yield duplicate delivery and
    /// an empty list behaves like `Drop`.
    Redirect(Vec<Actor>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultRule {
    pub matcher: Matcher,
    pub action: FaultAction,
    /// Inclusive send-time window; `from > to` never fires.
    pub window: (u64, u64),
}

impl FaultRule {
    pub fn active_at(&self, time: u64) -> bool {
        self.window.0 <= time && time <= self.window.1
    }

    fn windows_overlap(&self, other: &FaultRule) -> bool {
        self.window.0 <= self.window.1
            && other.window.0 <= other.window.1
            && self.window.0 <= other.window.1
            && other.window.0 <= self.window.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventPayload {
    Deliver {
        send_id: u64,
        msg: Msg,
        from: Actor,
        to: Actor,
    },
    TimerFire {
        node: NodeId,
        h: u64,
        v: u64,
        duration: u64,
    },
    ClientSubmit(ClientId),
    ClientRetrans(ClientId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub time: u64,
    pub seq: u64,
    pub payload: EventPayload,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "@{}#{} ", self.time, self.seq)?;
        match &self.payload {
            EventPayload::Deliver { msg, to, .. } => write!(f, "deliver {} to {to}", msg.kind),
            EventPayload::TimerFire { node, h, v, .. } => write!(f, "timer {node} h={h} v={v}"),
            EventPayload::ClientSubmit(c) => write!(f, "submit {c}"),
            EventPayload::ClientRetrans(c) => write!(f, "retrans {c}"),
        }
    }
}

/// Per-destination accounting. `addressed = queued + dropped` and
/// `queued = delivered + in flight` hold at every point of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sends: u64,
    pub addressed: u64,
    pub queued: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone)]
struct Pending {
    msg: Msg,
    remaining: BTreeMap<Actor, u32>,
}

#[derive(Debug, Clone)]
pub struct NetState {
    clock: u64,
    next_seq: u64,
    next_send_id: u64,
    base_latency: u64,
    queue: BTreeMap<(u64, u64), EventPayload>,
    pending: BTreeMap<u64, Pending>,
    timers: BTreeMap<(NodeId, u64, u64), (u64, u64)>,
    rules: Vec<FaultRule>,
    net_faulty: bool,
    committee: u32,
    clients: u32,
    stats: NetStats,
}

impl NetState {
    pub fn new(committee: u32, clients: u32) -> Self {
        NetState {
            clock: 0,
            next_seq: 0,
            next_send_id: 0,
            base_latency: BASE_LATENCY,
            queue: BTreeMap::new(),
            pending: BTreeMap::new(),
            timers: BTreeMap::new(),
            rules: Vec::new(),
            net_faulty: false,
            committee,
            clients,
            stats: NetStats::default(),
        }
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn net_faulty(&self) -> bool {
        self.net_faulty
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn rules(&self) -> &[FaultRule] {
        &self.rules
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn next_time(&self) -> Option<u64> {
        self.queue.keys().next().map(|(t, _)| *t)
    }

    /// Destination multiset still pending for a send.
    pub fn pending_for(&self, send_id: u64) -> Option<Vec<Actor>> {
        self.pending.get(&send_id).map(|p| {
            p.remaining
                .iter()
                .flat_map(|(a, c)| std::iter::repeat_n(*a, *c as usize))
                .collect()
        })
    }

    pub fn pending_count(&self) -> u64 {
        self.pending
            .values()
            .flat_map(|p| p.remaining.values())
            .map(|c| *c as u64)
            .sum()
    }

    fn valid_actor(&self, actor: Actor) -> bool {
        match actor {
            Actor::Node(n) => n.0 < self.committee,
            Actor::Client(c) => c.0 < self.clients,
        }
    }

    /// Installs a fault rule. Any installed rule marks the network faulty.
    pub fn misbehave(&mut self, rule: FaultRule) -> Result<()> {
        match &rule.action {
            FaultAction::Delay(0) => return Err(Error::Rule("delay must be at least 1 tick".into())),
            FaultAction::Redirect(to) => {
                if let Some(bad) = to.iter().find(|a| !self.valid_actor(**a)) {
                    return Err(Error::Rule(format!("redirect target {bad} is not a known actor")));
                }
            }
            _ => {}
        }
        let contradicts = |a: &FaultAction, b: &FaultAction| {
            matches!(
                (a, b),
                (FaultAction::Drop, FaultAction::Redirect(_)) | (FaultAction::Redirect(_), FaultAction::Drop)
            )
        };
        if let Some(i) = self.rules.iter().position(|r| {
            r.matcher == rule.matcher && contradicts(&r.action, &rule.action) && r.windows_overlap(&rule)
        }) {
            return Err(Error::Rule(format!(
                "rule contradicts rule #{i}: same matcher with drop and redirect over overlapping windows"
            )));
        }
        self.rules.push(rule);
        self.net_faulty = true;
        Ok(())
    }

    fn enqueue(&mut self, time: u64, payload: EventPayload) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((time, seq), payload);
        seq
    }

    fn queue_delivery(&mut self, send_id: u64, msg: &Msg, from: Actor, to: Actor, time: u64) {
        self.stats.queued += 1;
        *self
            .pending
            .get_mut(&send_id)
            .expect("pending entry exists for an open send")
            .remaining
            .entry(to)
            .or_insert(0) += 1;
        self.enqueue(
            time,
            EventPayload::Deliver {
                send_id,
                msg: msg.clone(),
                from,
                to,
            },
        );
    }

    /// Multicasts `msg` from `from` to `dests`, applying fault rules per
    /// destination. Returns the number of deliveries queued.
    pub fn send(&mut self, msg: &Msg, from: Actor, dests: &[Actor], trace: &mut Trace) -> Result<usize> {
        if let Err(err) = msg.check_well_formed() {
            trace.push(self.clock, Some(from), Record::Note(format!("InvalidMessage {err}")));
            return Err(err);
        }
        trace.push(
            self.clock,
            Some(from),
            Record::Send {
                msg: msg.clone(),
                to: dests.to_vec(),
            },
        );
        self.stats.sends += 1;
        let send_id = self.next_send_id;
        self.next_send_id += 1;
        self.pending.insert(
            send_id,
            Pending {
                msg: msg.clone(),
                remaining: BTreeMap::new(),
            },
        );
        let arrival = self.clock + self.base_latency;
        let before = self.stats.queued;
        for &dest in dests {
            self.stats.addressed += 1;
            let rule = self
                .rules
                .iter()
                .enumerate()
                .find(|(_, r)| r.active_at(self.clock) && r.matcher.matches(msg, dest))
                .map(|(i, r)| (i, r.action.clone()));
            match rule {
                None => self.queue_delivery(send_id, msg, from, dest, arrival),
                Some((_, FaultAction::Delay(delta))) => {
                    trace.push(
                        self.clock,
                        None,
                        Record::Delay {
                            msg: msg.clone(),
                            to: dest,
                            until: arrival + delta,
                        },
                    );
                    self.queue_delivery(send_id, msg, from, dest, arrival + delta);
                }
                Some((i, FaultAction::Drop)) => {
                    self.stats.dropped += 1;
                    trace.push(
                        self.clock,
                        None,
                        Record::Drop {
                            msg: msg.clone(),
                            to: dest,
                            reason: format!("rule#{i}"),
                        },
                    );
                }
                Some((i, FaultAction::Redirect(targets))) => {
                    self.stats.dropped += 1;
                    let list = targets.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
                    trace.push(
                        self.clock,
                        None,
                        Record::Drop {
                            msg: msg.clone(),
                            to: dest,
                            reason: format!("rule#{i}:redirect->{list}"),
                        },
                    );
                    for target in targets {
                        self.stats.addressed += 1;
                        self.queue_delivery(send_id, msg, from, target, arrival);
                    }
                }
            }
        }
        if self.pending[&send_id].remaining.is_empty() {
            self.pending.remove(&send_id);
        }
        Ok((self.stats.queued - before) as usize)
    }

    pub fn set_timer(&mut self, node: NodeId, h: u64, v: u64, duration: u64) {
        assert!(duration >= 1, "timer duration must be at least one tick");
        self.cancel_timer(node, h, v);
        let time = self.clock + duration;
        let seq = self.enqueue(time, EventPayload::TimerFire { node, h, v, duration });
        self.timers.insert((node, h, v), (time, seq));
    }

    pub fn cancel_timer(&mut self, node: NodeId, h: u64, v: u64) -> bool {
        match self.timers.remove(&(node, h, v)) {
            Some(key) => self.queue.remove(&key).is_some(),
            None => false,
        }
    }

    pub fn schedule_client(&mut self, time: u64, payload: EventPayload) {
        debug_assert!(matches!(
            payload,
            EventPayload::ClientSubmit(_) | EventPayload::ClientRetrans(_)
        ));
        let time = time.max(self.clock);
        self.enqueue(time, payload);
    }

    /// Pops the minimum event, advances the clock and consumes the
    /// recipient from the pending destination-set of a delivery.
    pub fn pop(&mut self) -> Option<Event> {
        let ((time, seq), payload) = self.queue.pop_first()?;
        debug_assert!(time >= self.clock);
        self.clock = time;
        match &payload {
            EventPayload::Deliver { send_id, to, .. } => {
                self.stats.delivered += 1;
                if let Some(p) = self.pending.get_mut(send_id) {
                    if let Some(count) = p.remaining.get_mut(to) {
                        *count -= 1;
                        if *count == 0 {
                            p.remaining.remove(to);
                        }
                    }
                    if p.remaining.is_empty() {
                        self.pending.remove(send_id);
                    }
                }
            }
            EventPayload::TimerFire { node, h, v, .. } => {
                self.timers.remove(&(*node, *h, *v));
            }
            _ => {}
        }
        Some(Event { time, seq, payload })
    }

    pub fn pending_messages(&self) -> impl Iterator<Item = &Msg> {
        self.pending.values().map(|p| &p.msg)
    }
}
