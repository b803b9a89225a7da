//! Seeded random search over adversary plans and fault rules.
//!
//! Run `i` draws its scenario from a ChaCha8 stream selected by `i`, so a
//! run is reproducible on its own and the parallel sweep merges results by
//! run index.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{LivenessBounds, Verdict};
use crate::adversary::{AdvAction, AdversaryPlan, Directive, Trigger, TriggerEvent};
use crate::model::{select_speaker, Actor, Config, MsgKind, NodeId};
use crate::netsim::{FaultAction, FaultRule, Matcher};
use crate::replica::Phase;
use crate::scenario::Scenario;
use crate::sim::run_scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub runs: u64,
    pub max_ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exploration {
    pub runs: u64,
    /// Forked runs by index.
    pub forks: Vec<(u64, Verdict)>,
    pub counterexample: Option<(Scenario, Verdict)>,
}

/// Runs `scenario` and returns its verdict, or `None` if it does not build.
pub fn verdict_of(scenario: &Scenario) -> Option<Verdict> {
    let (trace, _) = run_scenario(scenario).ok()?;
    Some(Verdict::of(
        &trace,
        LivenessBounds {
            max_views: scenario.config.max_views,
            t0: scenario.config.t0,
        },
    ))
}

pub fn explore(config: &Config, budget: Budget, seed: u64) -> Exploration {
    let results: Vec<(u64, Scenario, Option<Verdict>)> = (0..budget.runs)
        .into_par_iter()
        .map(|i| {
            let scenario = generate(config, budget.max_ticks, seed, i);
            let verdict = verdict_of(&scenario);
            (i, scenario, verdict)
        })
        .collect();
    let mut forks = Vec::new();
    let mut first: Option<Scenario> = None;
    for (i, scenario, verdict) in results {
        if let Some(v) = verdict.filter(|v| v.fork().is_some()) {
            if first.is_none() {
                first = Some(scenario);
            }
            forks.push((i, v));
        }
    }
    let counterexample = first.map(|s| {
        let small = minimize(s);
        let verdict = verdict_of(&small).expect("minimized scenario still runs");
        (small, verdict)
    });
    Exploration {
        runs: budget.runs,
        forks,
        counterexample,
    }
}

fn forks(s: &Scenario) -> bool {
    verdict_of(s).is_some_and(|v| v.fork().is_some())
}

/// Greedily drops directives, rules and unused controlled nodes while the
/// scenario still forks.
pub fn minimize(mut s: Scenario) -> Scenario {
    loop {
        let mut changed = false;
        let mut i = 0;
        while i < s.plan.directives.len() {
            let mut trial = s.clone();
            trial.plan.directives.remove(i);
            if forks(&trial) {
                s = trial;
                changed = true;
            } else {
                i += 1;
            }
        }
        let mut i = 0;
        while i < s.rules.len() {
            let mut trial = s.clone();
            trial.rules.remove(i);
            if forks(&trial) {
                s = trial;
                changed = true;
            } else {
                i += 1;
            }
        }
        let used: BTreeSet<NodeId> = s.plan.directives.iter().map(|d| d.actor).collect();
        for node in s.plan.controlled.clone() {
            if !used.contains(&node) {
                let mut trial = s.clone();
                trial.plan.controlled.remove(&node);
                if forks(&trial) {
                    s = trial;
                    changed = true;
                }
            }
        }
        if !changed {
            return s;
        }
    }
}

fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Scenario for run `index` of a sweep.
pub fn generate(config: &Config, max_ticks: u64, seed: u64, index: u64) -> Scenario {
    let mut rng = rng_for(seed, index);
    let mut s = Scenario::new(format!("explore-{seed}-{index}"), config.clone());
    s.config.seed = seed;
    s.max_ticks = max_ticks;
    s.heights = Some(1);
    let f = config.f() as usize;
    if f == 0 {
        return s;
    }
    if rng.gen_bool(0.25) {
        if f >= 2 && rng.gen_bool(0.5) {
            equivocation_template(&mut s, &mut rng);
        } else {
            stale_template(&mut s, &mut rng);
        }
        return s;
    }
    let k = rng.gen_range(1..=f.min(2));
    let mut ids: Vec<NodeId> = config.nodes().collect();
    ids.shuffle(&mut rng);
    s.plan.controlled = ids[..k].iter().copied().collect();
    let controlled: Vec<NodeId> = s.plan.controlled.iter().copied().collect();
    for &actor in &controlled {
        for _ in 0..rng.gen_range(1..=3) {
            let d = random_directive(&mut rng, actor, config.n);
            s.plan.directives.push(d);
        }
    }
    for _ in 0..rng.gen_range(0..=2) {
        let rule = random_rule(&mut rng, config.n);
        let mut trial = crate::netsim::NetState::new(config.n, 0);
        for r in &s.rules {
            trial.misbehave(r.clone()).expect("accepted earlier");
        }
        if trial.misbehave(rule.clone()).is_ok() {
            s.rules.push(rule);
        }
    }
    s
}

fn pick_view(rng: &mut ChaCha8Rng) -> Option<u64> {
    match rng.gen_range(0..4) {
        0 => None,
        v => Some(v - 1),
    }
}

fn block_name(rng: &mut ChaCha8Rng) -> String {
    format!("block{}", rng.gen_range(1..=3))
}

fn split(rng: &mut ChaCha8Rng, actor: NodeId, n: u32) -> (Vec<NodeId>, Vec<NodeId>) {
    let mut others: Vec<NodeId> = (0..n).map(NodeId).filter(|x| *x != actor).collect();
    others.shuffle(rng);
    let cut = rng.gen_range(1..others.len().max(2));
    let (a, b) = others.split_at(cut.min(others.len()));
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort();
    b.sort();
    (a, b)
}

fn random_directive(rng: &mut ChaCha8Rng, actor: NodeId, n: u32) -> Directive {
    let view = pick_view(rng);
    let phase = if rng.gen_bool(0.2) {
        Some(*[Phase::Idle, Phase::Prepared, Phase::Responded].choose(rng).expect("non-empty"))
    } else {
        None
    };
    let event = *[
        TriggerEvent::Always,
        TriggerEvent::PrepareDelivered,
        TriggerEvent::StalePrepareDelivered,
        TriggerEvent::ViewEntered,
    ]
    .choose(rng)
    .expect("non-empty");
    let action = match rng.gen_range(0..6) {
        0 => {
            let (part_a, part_b) = split(rng, actor, n);
            AdvAction::Equivocate {
                block_a: "block1".into(),
                block_b: "block2".into(),
                part_a,
                part_b,
            }
        }
        1 => AdvAction::Silence,
        2 => AdvAction::HarvestResponses {
            block: rng.gen_bool(0.5).then(|| block_name(rng)),
        },
        3 => AdvAction::ForgeLateResponse { block: block_name(rng) },
        4 => AdvAction::AdoptStaleMessage { kind: MsgKind::Prepare },
        _ => AdvAction::ActHonest,
    };
    Directive {
        actor,
        trigger: Trigger { view, phase, event },
        action,
    }
}

fn random_rule(rng: &mut ChaCha8Rng, n: u32) -> FaultRule {
    let node = |rng: &mut ChaCha8Rng| Actor::Node(NodeId(rng.gen_range(0..n)));
    let kind = [
        None,
        Some(MsgKind::Prepare),
        Some(MsgKind::Response),
        Some(MsgKind::Commit),
        Some(MsgKind::ViewChange),
    ]
    .choose(rng)
    .copied()
    .flatten();
    let sender = rng.gen_bool(0.5).then(|| node(rng));
    let dests = rng.gen_bool(0.5).then(|| (0..rng.gen_range(1..=3)).map(|_| node(rng)).collect());
    let action = match rng.gen_range(0..3) {
        0 => FaultAction::Delay(rng.gen_range(1..=60)),
        1 => FaultAction::Drop,
        _ => FaultAction::Redirect((0..rng.gen_range(0..=2)).map(|_| node(rng)).collect()),
    };
    let from = rng.gen_range(0..40);
    FaultRule {
        matcher: Matcher {
            kind,
            sender,
            dests,
            view: pick_view(rng),
            block_tag: None,
        },
        action,
        window: (from, from + rng.gen_range(0..200)),
    }
}

/// Speaker of view 0 equivocates; a partner harvests one side and forges a
/// late response for it in view 1 while both stay silent there.
fn equivocation_template(s: &mut Scenario, rng: &mut ChaCha8Rng) {
    let n = s.config.n;
    let speaker = select_speaker(0, 0, n);
    let partner = loop {
        let p = NodeId(rng.gen_range(0..n));
        if p != speaker {
            break p;
        }
    };
    let (part_a, part_b) = split(rng, speaker, n);
    s.plan = AdversaryPlan {
        controlled: [speaker, partner].into(),
        directives: vec![
            Directive {
                actor: speaker,
                trigger: Trigger::in_view(0),
                action: AdvAction::Equivocate {
                    block_a: "block1".into(),
                    block_b: "block2".into(),
                    part_a,
                    part_b,
                },
            },
            Directive {
                actor: partner,
                trigger: Trigger::always(),
                action: AdvAction::HarvestResponses {
                    block: Some("block2".into()),
                },
            },
            Directive {
                actor: speaker,
                trigger: Trigger::in_view(1),
                action: AdvAction::Silence,
            },
            Directive {
                actor: partner,
                trigger: Trigger::in_view(1),
                action: AdvAction::Silence,
            },
            Directive {
                actor: partner,
                trigger: Trigger::in_view(1).on(TriggerEvent::PrepareDelivered),
                action: AdvAction::ForgeLateResponse { block: "block2".into() },
            },
        ],
    };
}

/// An honest proposal is delayed to part of the committee; a controlled
/// node later adopts it.
fn stale_template(s: &mut Scenario, rng: &mut ChaCha8Rng) {
    let n = s.config.n;
    let speaker = select_speaker(0, 0, n);
    let actor = NodeId(rng.gen_range(0..n));
    let mut others: Vec<NodeId> = (0..n).map(NodeId).filter(|x| *x != speaker).collect();
    others.shuffle(rng);
    let take = rng.gen_range(1..=others.len().min(4));
    let mut dests: BTreeSet<Actor> = others[..take].iter().copied().map(Actor::Node).collect();
    dests.insert(Actor::Node(actor));
    dests.remove(&Actor::Node(speaker));
    s.rules.push(FaultRule {
        matcher: Matcher {
            kind: Some(MsgKind::Prepare),
            sender: Some(Actor::Node(speaker)),
            dests: Some(dests),
            view: Some(0),
            block_tag: None,
        },
        action: FaultAction::Delay(rng.gen_range(5..=60)),
        window: (0, 100),
    });
    s.plan = AdversaryPlan {
        controlled: [actor].into(),
        directives: vec![
            Directive {
                actor,
                trigger: Trigger::always(),
                action: AdvAction::HarvestResponses { block: None },
            },
            Directive {
                actor,
                trigger: Trigger::in_view(1),
                action: AdvAction::Silence,
            },
            Directive {
                actor,
                trigger: Trigger::always().on(TriggerEvent::StalePrepareDelivered),
                action: AdvAction::AdoptStaleMessage { kind: MsgKind::Prepare },
            },
        ],
    };
}
