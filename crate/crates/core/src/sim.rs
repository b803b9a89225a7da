//! Drives replicas, clients and the adversary over the simulated network.

use crate::adversary::{AdvOut, Adversary};
use crate::client::Client;
use crate::error::Result;
use crate::model::{Actor, ClientId, NodeId, View};
use crate::netsim::{EventPayload, NetState, NetStats};
use crate::replica::{Effect, Replica};
use crate::scenario::Scenario;
use crate::trace::{Record, Trace, TraceMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOutcome {
    pub events: u64,
    pub end_time: u64,
    /// Stopped by the tick bound with work still queued.
    pub truncated: bool,
}

#[derive(Debug)]
pub struct Simulation {
    net: NetState,
    trace: Trace,
    replicas: Vec<Replica>,
    clients: Vec<Client>,
    adversary: Adversary,
    retrans_after: u64,
    max_ticks: u64,
    events: u64,
    open_tick: Option<u64>,
    started: bool,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let cfg = &scenario.config;
        cfg.validate()?;
        scenario.plan.validate(cfg.n)?;
        let mut net = NetState::new(cfg.n, scenario.clients);
        for rule in &scenario.rules {
            net.misbehave(rule.clone())?;
        }
        for &(client, at) in &scenario.requests {
            if client.0 >= scenario.clients {
                return Err(crate::error::Error::Config(format!("request from unknown client {client}")));
            }
            net.schedule_client(at, EventPayload::ClientSubmit(client));
        }
        let trace = Trace::new(TraceMeta {
            n: cfg.n,
            protocol: cfg.protocol,
            t_star: cfg.t_star,
            controlled: scenario.plan.controlled.clone(),
        });
        Ok(Simulation {
            net,
            trace,
            replicas: cfg
                .nodes()
                .map(|id| Replica::new(id, cfg.clone(), scenario.heights))
                .collect(),
            clients: (0..scenario.clients)
                .map(|c| Client::new(ClientId(c), cfg.f()))
                .collect(),
            adversary: Adversary::new(scenario.plan.clone(), cfg.n),
            retrans_after: scenario.retrans_after,
            max_ticks: scenario.max_ticks,
            events: 0,
            open_tick: None,
            started: false,
        })
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn replicas(&self) -> &[Replica] {
        &self.replicas
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn net_stats(&self) -> NetStats {
        self.net.stats()
    }

    pub fn net(&self) -> &NetState {
        &self.net
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn now(&self) -> u64 {
        self.net.clock()
    }

    fn start(&mut self) {
        self.started = true;
        for i in 0..self.replicas.len() {
            let effects = self.replicas[i].start(0);
            self.apply(NodeId(i as u32), effects, None);
            let id = NodeId(i as u32);
            if self.adversary.controls(id) {
                let outs = self.adversary.on_view_entered(id, &self.replicas[i]);
                self.apply_adv(outs);
            }
        }
        self.open_tick = Some(0);
    }

    /// Carries out a node's effects. `before` is its view prior to the call
    /// that produced them.
    fn apply(&mut self, node: NodeId, effects: Vec<Effect>, before: Option<View>) {
        let now = self.net.clock();
        let idx = node.index();
        let effects = if self.adversary.controls(node) {
            let (kept, outs) = self.adversary.filter(node, &self.replicas[idx], effects, now);
            self.apply_adv(outs);
            kept
        } else {
            effects
        };
        let me = Some(Actor::Node(node));
        for effect in effects {
            match effect {
                Effect::Send { msg, to } => {
                    // malformed messages are already recorded by the network
                    let _ = self.net.send(&msg, Actor::Node(node), &to, &mut self.trace);
                }
                Effect::ArmTimer { h, v, duration } => {
                    self.net.set_timer(node, h, v, duration);
                    self.trace.push(now, me, Record::TimerArm { h, v, duration });
                }
                Effect::CancelTimer { h, v } => {
                    self.net.cancel_timer(node, h, v);
                }
                Effect::State { h, v, phase, lock } => {
                    self.trace.push(now, me, Record::State { h, v, phase, lock });
                }
                Effect::Publish { block, v } => self.trace.push(now, me, Record::Publish { block, v }),
                Effect::ForkSuspect { h, blocks } => self.trace.push(now, me, Record::ForkSuspect { h, blocks }),
                Effect::Note(text) => self.trace.push(now, me, Record::Note(text)),
            }
        }
        if let Some(before) = before {
            if self.adversary.controls(node) && self.replicas[idx].view() != before {
                let outs = self.adversary.on_view_entered(node, &self.replicas[idx]);
                self.apply_adv(outs);
            }
        }
    }

    fn apply_adv(&mut self, outs: Vec<AdvOut>) {
        let now = self.net.clock();
        for out in outs {
            match out {
                AdvOut::Note { actor, text } => self.trace.push(now, Some(Actor::Node(actor)), Record::Adv(text)),
                AdvOut::Send { from, msg, to } => {
                    let _ = self.net.send(&msg, Actor::Node(from), &to, &mut self.trace);
                }
            }
        }
    }

    fn end_of_tick(&mut self, tick: u64) {
        for i in 0..self.replicas.len() {
            let before = self.replicas[i].view();
            let effects = self.replicas[i].end_of_tick(tick);
            if !effects.is_empty() {
                self.apply(NodeId(i as u32), effects, Some(before));
            }
        }
        let outs = self.adversary.end_of_tick(tick);
        self.apply_adv(outs);
    }

    fn all_actors(&self) -> Vec<Actor> {
        (0..self.replicas.len() as u32).map(|i| Actor::Node(NodeId(i))).collect()
    }

    fn handle(&mut self, payload: EventPayload) {
        let now = self.net.clock();
        match payload {
            EventPayload::Deliver { msg, from, to, .. } => {
                self.trace.push(now, Some(to), Record::Deliver { msg: msg.clone(), from });
                match to {
                    Actor::Node(node) => {
                        let idx = node.index();
                        if self.adversary.controls(node) {
                            self.adversary.observe_delivery(node, &msg, &self.replicas[idx]);
                        }
                        let before = self.replicas[idx].view();
                        let effects = self.replicas[idx].deliver(&msg, now);
                        self.apply(node, effects, Some(before));
                    }
                    Actor::Client(c) => {
                        if let Some(acc) = self.clients[c.0 as usize].on_reply(&msg, now) {
                            self.trace.push(
                                now,
                                Some(to),
                                Record::Note(format!(
                                    "accepted ts={} h={} v={} block={}",
                                    acc.timestamp, acc.view.h, acc.view.v, acc.block.tag
                                )),
                            );
                        }
                    }
                }
            }
            EventPayload::TimerFire { node, h, v, duration } => {
                let idx = node.index();
                let before = self.replicas[idx].view();
                let me = Some(Actor::Node(node));
                match self.replicas[idx].on_timeout(h, v, now) {
                    None => self.trace.push(now, me, Record::StaleTimer { h, v }),
                    Some(effects) => {
                        self.trace.push(now, me, Record::TimerFire { h, v, duration });
                        self.apply(node, effects, Some(before));
                    }
                }
            }
            EventPayload::ClientSubmit(c) => {
                let me = Some(Actor::Client(c));
                match self.clients[c.0 as usize].submit(now) {
                    Ok(msg) => {
                        let to = self.all_actors();
                        let _ = self.net.send(&msg, Actor::Client(c), &to, &mut self.trace);
                        self.net
                            .schedule_client(now + self.retrans_after, EventPayload::ClientRetrans(c));
                    }
                    Err(err) => self.trace.push(now, me, Record::Note(err.to_string())),
                }
            }
            EventPayload::ClientRetrans(c) => {
                let client = &mut self.clients[c.0 as usize];
                let due = client
                    .outstanding()
                    .is_some_and(|m| m.timestamp + self.retrans_after == now);
                if due {
                    if let Some(msg) = client.retransmit() {
                        let to = self.all_actors();
                        self.trace
                            .push(now, Some(Actor::Client(c)), Record::Note(format!("retransmit ts={}", msg.timestamp)));
                        let _ = self.net.send(&msg, Actor::Client(c), &to, &mut self.trace);
                    }
                }
            }
        }
    }

    /// Processes one event, or closes the current tick. Returns false once
    /// nothing is left to do within the tick bound.
    pub fn step(&mut self) -> bool {
        if !self.started {
            self.start();
            return true;
        }
        let next = self.net.next_time().filter(|t| *t <= self.max_ticks);
        if let Some(tick) = self.open_tick {
            if next.is_none_or(|t| t > tick) {
                self.open_tick = None;
                self.end_of_tick(tick);
                return true;
            }
        }
        let Some(_) = next else {
            return false;
        };
        let Some(event) = self.net.pop() else {
            return false;
        };
        self.events += 1;
        self.open_tick = Some(event.time);
        self.handle(event.payload);
        true
    }

    pub fn run(&mut self) -> RunOutcome {
        while self.step() {}
        RunOutcome {
            events: self.events,
            end_time: self.net.clock(),
            truncated: self.net.next_time().is_some(),
        }
    }
}

/// Builds and runs `scenario` to completion.
pub fn run_scenario(scenario: &Scenario) -> Result<(Trace, RunOutcome)> {
    let mut sim = Simulation::new(scenario)?;
    let outcome = sim.run();
    Ok((sim.into_trace(), outcome))
}
