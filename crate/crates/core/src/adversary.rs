//! Scriptable Byzantine behaviour for a set of controlled nodes.
//!
//! Each controlled node runs an honest shadow [`Replica`]. Everything the
//! shadow wants to send passes through [`Adversary::filter`], which may
//! suppress, rewrite or archive it. One-shot actions (forging, adopting a
//! stale proposal) are queued when their trigger fires and executed in
//! directive order by [`Adversary::end_of_tick`].
//!
//! Controlled nodes can only sign as themselves. Anything else they send is
//! a verbatim copy of a message they saw or emitted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::model::{max_faulty, select_speaker, Actor, BlockId, Msg, MsgKind, NodeId, View};
use crate::replica::{Effect, Phase, Replica};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TriggerEvent {
    Always,
    PrepareDelivered,
    /// A PREPARE for an earlier `(h, v)` than the actor's own.
    StalePrepareDelivered,
    ViewEntered,
}

impl TriggerEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            TriggerEvent::Always => "always",
            TriggerEvent::PrepareDelivered => "prepare",
            TriggerEvent::StalePrepareDelivered => "stale-prepare",
            TriggerEvent::ViewEntered => "view-entered",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            TriggerEvent::Always,
            TriggerEvent::PrepareDelivered,
            TriggerEvent::StalePrepareDelivered,
            TriggerEvent::ViewEntered,
        ]
        .into_iter()
        .find(|e| e.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trigger {
    pub view: Option<u64>,
    pub phase: Option<Phase>,
    pub event: TriggerEvent,
}

impl Trigger {
    pub fn always() -> Self {
        Trigger {
            view: None,
            phase: None,
            event: TriggerEvent::Always,
        }
    }

    pub fn in_view(view: u64) -> Self {
        Trigger {
            view: Some(view),
            ..Trigger::always()
        }
    }

    pub fn on(mut self, event: TriggerEvent) -> Self {
        self.event = event;
        self
    }

    fn view_ok(&self, v: u64) -> bool {
        self.view.is_none_or(|want| want == v)
    }

    fn phase_ok(&self, phase: Phase) -> bool {
        self.phase.is_none_or(|want| want == phase)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdvAction {
    /// Send `block_a` to `part_a` and `block_b` to `part_b` in place of the
    /// actor's own proposal.
    Equivocate {
        block_a: String,
        block_b: String,
        part_a: Vec<NodeId>,
        part_b: Vec<NodeId>,
    },
    Silence,
    /// Archive PREPARE/RESPONSE messages for `block` (`None` means all).
    HarvestResponses { block: Option<String> },
    /// Sign a RESPONSE for `block` in the current view and replay the
    /// archive for it.
    ForgeLateResponse { block: String },
    /// Sign a RESPONSE bound to a stale PREPARE's own view and replay it.
    AdoptStaleMessage { kind: MsgKind },
    ActHonest,
}

impl AdvAction {
    pub fn name(&self) -> &'static str {
        match self {
            AdvAction::Equivocate { .. } => "equivocate",
            AdvAction::Silence => "silence",
            AdvAction::HarvestResponses { .. } => "harvest",
            AdvAction::ForgeLateResponse { .. } => "forge",
            AdvAction::AdoptStaleMessage { .. } => "adopt",
            AdvAction::ActHonest => "honest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Directive {
    pub actor: NodeId,
    pub trigger: Trigger,
    pub action: AdvAction,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdversaryPlan {
    pub controlled: BTreeSet<NodeId>,
    pub directives: Vec<Directive>,
}

impl AdversaryPlan {
    pub fn honest() -> Self {
        AdversaryPlan::default()
    }

    /// Rejects plans that control more than `f` nodes or script nodes they
    /// do not control.
    pub fn validate(&self, n: u32) -> Result<()> {
        if let Some(bad) = self.controlled.iter().find(|c| c.0 >= n) {
            return Err(Error::Plan(format!("{bad} is not in a committee of {n}")));
        }
        if self.controlled.len() > max_faulty(n) as usize {
            return Err(Error::Plan(format!(
                "{} controlled nodes exceed f={} for n={n}",
                self.controlled.len(),
                max_faulty(n)
            )));
        }
        for (i, d) in self.directives.iter().enumerate() {
            if !self.controlled.contains(&d.actor) {
                return Err(Error::Plan(format!("directive #{i}: {} is not controlled", d.actor)));
            }
            if let AdvAction::Equivocate { part_a, part_b, .. } = &d.action {
                if let Some(bad) = part_a.iter().chain(part_b).find(|p| p.0 >= n) {
                    return Err(Error::Plan(format!("directive #{i}: {bad} is not in the committee")));
                }
            }
        }
        Ok(())
    }
}

/// Output of the adversary the simulator must carry out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdvOut {
    Send { from: NodeId, msg: Msg, to: Vec<Actor> },
    Note { actor: NodeId, text: String },
}

impl fmt::Display for AdvOut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdvOut::Send { from, msg, .. } => write!(f, "{from} sends {msg}"),
            AdvOut::Note { actor, text } => write!(f, "{actor}: {text}"),
        }
    }
}

/// Two conflicting proposals signed by `actor` for `view`.
pub fn equivocate_propose(
    actor: NodeId,
    view: View,
    n: u32,
    block_a: &str,
    block_b: &str,
    now: u64,
) -> Result<(Msg, Msg)> {
    if select_speaker(view.h, view.v, n) != actor {
        return Err(Error::NotSpeaker {
            node: actor,
            height: view.h,
            view: view.v,
        });
    }
    let make = |tag: &str| {
        Msg::signed(
            MsgKind::Prepare,
            view,
            Some(BlockId::new(view.h, tag)),
            Actor::Node(actor),
            now,
        )
    };
    Ok((make(block_a), make(block_b)))
}

/// RESPONSE for `block` bound to the actor's current view.
pub fn forge_late_response(actor: NodeId, current: View, block: &BlockId, now: u64) -> Msg {
    Msg::signed(
        MsgKind::Response,
        View::new(block.height, current.v),
        Some(block.clone()),
        Actor::Node(actor),
        now,
    )
}

/// RESPONSE bound to the stale proposal's own `(h, v)`.
pub fn adopt_stale_message(actor: NodeId, stale: &Msg, now: u64) -> Result<Msg> {
    if stale.kind != MsgKind::Prepare || stale.block.is_none() {
        return Err(Error::Plan(format!("cannot adopt a {}", stale.kind)));
    }
    Ok(Msg::signed(
        MsgKind::Response,
        stale.view,
        stale.block.clone(),
        Actor::Node(actor),
        now,
    ))
}

#[derive(Debug, Clone)]
enum Queued {
    Forge { actor: NodeId, view: View, block: String },
    Adopt { actor: NodeId, stale: Msg },
}

#[derive(Debug, Clone)]
pub struct Adversary {
    plan: AdversaryPlan,
    n: u32,
    archive: BTreeMap<BlockId, BTreeMap<NodeId, Msg>>,
    fired: BTreeSet<usize>,
    queued: Vec<(usize, Queued)>,
    skipped: BTreeSet<(usize, u64, u64)>,
}

impl Adversary {
    pub fn new(plan: AdversaryPlan, n: u32) -> Self {
        Adversary {
            plan,
            n,
            archive: BTreeMap::new(),
            fired: BTreeSet::new(),
            queued: Vec::new(),
            skipped: BTreeSet::new(),
        }
    }

    pub fn plan(&self) -> &AdversaryPlan {
        &self.plan
    }

    pub fn controls(&self, node: NodeId) -> bool {
        self.plan.controlled.contains(&node)
    }

    /// Distinct signers archived for `block`.
    pub fn archived(&self, block: &BlockId) -> BTreeSet<NodeId> {
        self.archive
            .get(block)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    fn directives_for(&self, actor: NodeId) -> impl Iterator<Item = (usize, &Directive)> {
        self.plan
            .directives
            .iter()
            .enumerate()
            .filter(move |(_, d)| d.actor == actor)
    }

    fn honest_override(&self, actor: NodeId, v: u64, phase: Phase) -> bool {
        self.directives_for(actor).any(|(_, d)| {
            d.action == AdvAction::ActHonest && d.trigger.view_ok(v) && d.trigger.phase_ok(phase)
        })
    }

    fn harvest(&mut self, msg: &Msg) {
        if !matches!(msg.kind, MsgKind::Prepare | MsgKind::Response) {
            return;
        }
        let (Some(signer), Some(block)) = (msg.signer_node(), msg.block.as_ref()) else {
            return;
        };
        let wanted = self.plan.directives.iter().any(|d| match &d.action {
            AdvAction::HarvestResponses { block: want } => {
                d.trigger.view_ok(msg.view.v) && want.as_ref().is_none_or(|t| *t == block.tag)
            }
            _ => false,
        });
        if wanted {
            self.archive
                .entry(block.clone())
                .or_default()
                .entry(signer)
                .or_insert_with(|| msg.clone());
        }
    }

    fn fire(&mut self, actor: NodeId, event: TriggerEvent, shadow: &Replica, msg: Option<&Msg>) {
        let view = shadow.view();
        if self.honest_override(actor, view.v, shadow.phase()) {
            return;
        }
        let mut fresh = Vec::new();
        for (i, d) in self.directives_for(actor) {
            if self.fired.contains(&i)
                || d.trigger.event != event
                || !d.trigger.view_ok(view.v)
                || !d.trigger.phase_ok(shadow.phase())
            {
                continue;
            }
            let queued = match (&d.action, msg) {
                (AdvAction::ForgeLateResponse { block }, _) => Queued::Forge {
                    actor,
                    view,
                    block: block.clone(),
                },
                (AdvAction::AdoptStaleMessage { kind }, Some(m)) if m.kind == *kind => Queued::Adopt {
                    actor,
                    stale: m.clone(),
                },
                _ => continue,
            };
            fresh.push((i, queued));
        }
        for (i, q) in fresh {
            self.fired.insert(i);
            self.queued.push((i, q));
        }
    }

    /// Called before the shadow of `actor` processes `msg`.
    pub fn observe_delivery(&mut self, actor: NodeId, msg: &Msg, shadow: &Replica) {
        self.harvest(msg);
        if msg.kind != MsgKind::Prepare {
            return;
        }
        let own = shadow.view();
        if (msg.view.h, msg.view.v) < (own.h, own.v) {
            self.fire(actor, TriggerEvent::StalePrepareDelivered, shadow, Some(msg));
        } else {
            self.fire(actor, TriggerEvent::PrepareDelivered, shadow, Some(msg));
        }
    }

    /// Called whenever the shadow of `actor` starts a height or enters a view.
    pub fn on_view_entered(&mut self, actor: NodeId, shadow: &Replica) -> Vec<AdvOut> {
        let View { h, v } = shadow.view();
        let mut out = Vec::new();
        let not_speaker = select_speaker(h, v, self.n) != actor;
        let skips: Vec<usize> = self
            .directives_for(actor)
            .filter(|(_, d)| matches!(d.action, AdvAction::Equivocate { .. }) && d.trigger.view_ok(v))
            .map(|(i, _)| i)
            .collect();
        for i in skips {
            if not_speaker && self.skipped.insert((i, h, v)) {
                out.push(AdvOut::Note {
                    actor,
                    text: format!("directive #{i} equivocate skipped: {actor} is not the speaker for h={h} v={v}"),
                });
            }
        }
        self.fire(actor, TriggerEvent::ViewEntered, shadow, None);
        out
    }

    /// Rewrites the effects of a controlled node's shadow.
    pub fn filter(&mut self, actor: NodeId, shadow: &Replica, effects: Vec<Effect>, now: u64) -> (Vec<Effect>, Vec<AdvOut>) {
        let mut kept = Vec::new();
        let mut out = Vec::new();
        for effect in effects {
            let Effect::Send { msg, to } = effect else {
                kept.push(effect);
                continue;
            };
            let v = msg.view.v;
            if self.honest_override(actor, v, shadow.phase()) {
                self.harvest(&msg);
                kept.push(Effect::Send { msg, to });
                continue;
            }
            let silenced = self.directives_for(actor).any(|(_, d)| {
                d.action == AdvAction::Silence && d.trigger.view_ok(v) && d.trigger.phase_ok(shadow.phase())
            });
            if silenced && msg.kind != MsgKind::Request {
                out.push(AdvOut::Note {
                    actor,
                    text: format!("silenced {} h={} v={v}", msg.kind, msg.view.h),
                });
                continue;
            }
            let equivocation = self.directives_for(actor).find_map(|(_, d)| match &d.action {
                AdvAction::Equivocate {
                    block_a,
                    block_b,
                    part_a,
                    part_b,
                } if msg.kind == MsgKind::Prepare && d.trigger.view_ok(v) => {
                    Some((block_a.clone(), block_b.clone(), part_a.clone(), part_b.clone()))
                }
                _ => None,
            });
            if let Some((block_a, block_b, part_a, part_b)) = equivocation {
                match equivocate_propose(actor, msg.view, self.n, &block_a, &block_b, now) {
                    Ok((a, b)) => {
                        out.push(AdvOut::Note {
                            actor,
                            text: format!("equivocate h={} v={v} {block_a}|{block_b}", msg.view.h),
                        });
                        for (m, part) in [(a, part_a), (b, part_b)] {
                            self.harvest(&m);
                            kept.push(Effect::Send {
                                msg: m,
                                to: part.into_iter().map(Actor::Node).collect(),
                            });
                        }
                    }
                    Err(err) => {
                        out.push(AdvOut::Note {
                            actor,
                            text: err.to_string(),
                        });
                        self.harvest(&msg);
                        kept.push(Effect::Send { msg, to });
                    }
                }
                continue;
            }
            self.harvest(&msg);
            kept.push(Effect::Send { msg, to });
        }
        (kept, out)
    }

    fn others(&self, actor: NodeId) -> Vec<Actor> {
        (0..self.n)
            .map(NodeId)
            .filter(|n| *n != actor)
            .map(Actor::Node)
            .collect()
    }

    fn replay(&self, actor: NodeId, block: &BlockId, out: &mut Vec<AdvOut>) {
        let Some(archived) = self.archive.get(block) else {
            return;
        };
        for msg in archived.values() {
            out.push(AdvOut::Send {
                from: actor,
                msg: msg.clone(),
                to: self.others(actor),
            });
        }
    }

    /// Runs the actions queued during this tick, in directive order.
    pub fn end_of_tick(&mut self, now: u64) -> Vec<AdvOut> {
        let mut queued = std::mem::take(&mut self.queued);
        queued.sort_by_key(|(i, _)| *i);
        let mut out = Vec::new();
        for (i, action) in queued {
            match action {
                Queued::Forge { actor, view, block } => {
                    let block = BlockId::new(view.h, block);
                    let forged = forge_late_response(actor, view, &block, now);
                    out.push(AdvOut::Note {
                        actor,
                        text: format!("directive #{i} forge RESPONSE h={} v={} block={}", view.h, view.v, block.tag),
                    });
                    out.push(AdvOut::Send {
                        from: actor,
                        msg: forged.clone(),
                        to: self.others(actor),
                    });
                    self.replay(actor, &block, &mut out);
                    self.archive
                        .entry(block)
                        .or_default()
                        .entry(actor)
                        .or_insert(forged);
                }
                Queued::Adopt { actor, stale } => {
                    let adopted = match adopt_stale_message(actor, &stale, now) {
                        Ok(m) => m,
                        Err(err) => {
                            out.push(AdvOut::Note {
                                actor,
                                text: err.to_string(),
                            });
                            continue;
                        }
                    };
                    let block = stale.block.clone().expect("adopted PREPARE carries a block");
                    out.push(AdvOut::Note {
                        actor,
                        text: format!(
                            "directive #{i} adopt stale PREPARE h={} v={} block={}",
                            stale.view.h, stale.view.v, block.tag
                        ),
                    });
                    out.push(AdvOut::Send {
                        from: actor,
                        msg: adopted,
                        to: self.others(actor),
                    });
                    out.push(AdvOut::Send {
                        from: actor,
                        msg: stale,
                        to: self.others(actor),
                    });
                    if let Some(archived) = self.archive.get(&block) {
                        for msg in archived.values() {
                            if msg.signer_node() != Some(actor) && msg.kind == MsgKind::Response {
                                out.push(AdvOut::Send {
                                    from: actor,
                                    msg: msg.clone(),
                                    to: self.others(actor),
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}
