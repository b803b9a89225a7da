mod common;

use std::collections::BTreeSet;

use dbft_sim::checker::{self, validate_certificate, CountRule, HeightOutcome, Liveness, LivenessBounds, Verdict};
use dbft_sim::model::{default_t0, BlockId, MsgKind};
use dbft_sim::replica::CertKind;
use dbft_sim::scenario::{attack_f1, attack_f2, builtin, BUILTINS};
use dbft_sim::trace::Record;
use dbft_sim::{run_scenario, Actor, NodeId, Protocol, Scenario, Simulation, Trace};

fn nodes(ids: &[u32]) -> BTreeSet<NodeId> {
    ids.iter().copied().map(NodeId).collect()
}

fn with(mut s: Scenario, protocol: Protocol) -> Scenario {
    s.config.protocol = protocol;
    s
}

fn verdict(s: &Scenario) -> (Trace, Verdict) {
    let (trace, _) = run_scenario(s).unwrap();
    let v = Verdict::of(
        &trace,
        LivenessBounds {
            max_views: s.config.max_views,
            t0: s.config.t0,
        },
    );
    (trace, v)
}

#[test]
fn f2_forks_two_phase() {
    let (trace, v) = verdict(&attack_f2());
    let fork = v.fork().expect("fork");
    assert_eq!(fork.height, 0);
    assert_eq!(fork.cert_b.block.tag, "block2");
    assert_eq!(fork.cert_b.signers(), nodes(&[0, 1, 4, 5, 6]));
    assert_eq!(fork.cert_a.signers(), nodes(&[2, 3, 4, 5, 6]));
    assert_eq!(fork.overlap, nodes(&[4, 5, 6]));
    // the forged certificate mixes views: four signatures from view 0, one from view 1
    let views: Vec<u64> = fork.cert_b.members.values().copied().collect();
    assert_eq!(views.iter().filter(|v| **v == 0).count(), 4);
    assert_eq!(views.iter().filter(|v| **v == 1).count(), 1);
    let pool: Vec<_> = trace
        .sent_messages()
        .map(|(_, m)| m.clone())
        .filter(|m| m.block.as_ref().is_some_and(|b| b.tag == "block2"))
        .collect();
    assert!(validate_certificate(&pool, CertKind::Response, CountRule::ViewAgnostic, 7)
        .certificate()
        .is_some());
    assert!(validate_certificate(&pool, CertKind::Response, CountRule::ViewBound, 7)
        .certificate()
        .is_none());
}

#[test]
fn f2_equivocation_round_pools_are_four_and_four() {
    let (trace, _) = verdict(&attack_f2());
    let mut pools: std::collections::BTreeMap<String, BTreeSet<NodeId>> = Default::default();
    for line in trace.lines().iter().filter(|l| l.time < 30) {
        if let Record::Send { msg, .. } = &line.record {
            if matches!(msg.kind, MsgKind::Prepare | MsgKind::Response) {
                pools
                    .entry(msg.block_tag().to_string())
                    .or_default()
                    .insert(msg.signer_node().unwrap());
            }
        }
    }
    assert_eq!(pools["block1"], nodes(&[0, 1, 2, 3]));
    assert_eq!(pools["block2"], nodes(&[0, 4, 5, 6]));
    assert_eq!(pools.len(), 2);
}

#[test]
fn f2_honest_nodes_tie_and_never_publish() {
    let (trace, v) = verdict(&attack_f2());
    let honest: BTreeSet<NodeId> = trace.honest_nodes().collect();
    let published = trace.lines().iter().any(|l| {
        matches!(l.record, Record::Publish { .. }) && l.actor.and_then(Actor::node).is_some_and(|n| honest.contains(&n))
    });
    assert!(!published);
    assert!(trace.lines().iter().any(|l| matches!(l.record, Record::ForkSuspect { .. })));
    assert_eq!(v.liveness.summary, Liveness::Crashed { t_exceeded: 1890 });
    assert_eq!(
        v.liveness.heights.get(&0),
        Some(&HeightOutcome::Crashed { t_exceeded: 1890 })
    );
}

#[test]
fn f2_liveness_bounds() {
    let mut s = attack_f2();
    s.config.t0 = Some(15 << 5);
    let (_, v) = verdict(&s);
    assert!(matches!(v.liveness.summary, Liveness::Crashed { t_exceeded } if t_exceeded > 480));
    s.config.t0 = None;
    let (_, v) = verdict(&s);
    assert_eq!(v.liveness.summary, Liveness::Stalled { views_exhausted: 10 });
    assert_eq!(default_t0(15), 960);
}

#[test]
fn f2_counting_identity() {
    let (trace, v) = verdict(&attack_f2());
    let acc = checker::signature_accounting(&trace, &nodes(&[0, 1]));
    let check = &acc.checks[0];
    assert_eq!((check.forged_total, check.honest_total), (5, 5));
    assert!(check.identity);
    assert_eq!(check.forged_faulty, 2);
    assert_eq!(check.bound, 1);
    assert!(!check.holds);
    let g = acc.group("block2").unwrap();
    assert_eq!((g.total, g.faulty, g.honest), (5, 2, 3));
    for g in &acc.groups {
        assert_eq!(g.faulty + g.honest, g.total);
    }
    assert_eq!(v.stats, acc);
}

#[test]
fn f1_forks_two_phase() {
    let (trace, v) = verdict(&attack_f1(40));
    assert_eq!(trace.meta.controlled, nodes(&[1]));
    let fork = v.fork().expect("fork");
    assert_eq!(fork.cert_b.signers(), nodes(&[0, 1, 4, 5, 6]));
    assert_eq!(fork.cert_a.size(), 6);
    assert!(fork.cert_a.signers().iter().all(|n| *n != NodeId(1)));
    assert!(v.liveness.summary.is_progressed());
}

#[test]
fn f1_short_delay_does_not_fork() {
    let (_, v) = verdict(&attack_f1(5));
    assert!(v.fork().is_none());
    assert!(v.liveness.summary.is_progressed());
}

#[test]
fn attacks_fail_against_three_phase() {
    for s in [attack_f2(), attack_f1(40), attack_f1(5)] {
        let (_, v) = verdict(&with(s.clone(), Protocol::ThreePhase));
        assert!(v.fork().is_none(), "{}", s.name);
        assert!(v.liveness.summary.is_progressed(), "{}", s.name);
    }
}

#[test]
fn three_phase_f2_commits_honest_block() {
    let mut sim = Simulation::new(&with(attack_f2(), Protocol::ThreePhase)).unwrap();
    sim.run();
    for r in sim.replicas().iter().filter(|r| r.id().0 >= 2) {
        assert_eq!(r.ledger(), &[BlockId::new(0, "p6-h0-v1-r0")]);
    }
}

#[test]
fn every_builtin_passes_the_audit() {
    for name in BUILTINS {
        for protocol in [Protocol::TwoPhase, Protocol::ThreePhase] {
            let mut sim = Simulation::new(&with(builtin(name).unwrap(), protocol)).unwrap();
            let outcome = sim.run();
            assert!(!outcome.truncated);
            let in_flight = sim.net().pending_count();
            let violations = checker::audit(sim.trace(), in_flight);
            assert!(violations.is_empty(), "{name} {protocol}: {violations:?}");
            let stats = sim.net_stats();
            assert_eq!(stats.addressed, stats.delivered + stats.dropped + in_flight);
        }
    }
}

#[test]
fn audit_flags_forged_foreign_signature() {
    let (mut trace, _) = verdict(&attack_f2());
    let foreign = dbft_sim::Msg::signed(
        MsgKind::Response,
        dbft_sim::View::new(0, 0),
        Some(BlockId::new(0, "x")),
        Actor::Node(NodeId(5)),
        3,
    );
    trace.push(
        40_000,
        Some(Actor::Node(NodeId(1))),
        Record::Send {
            msg: foreign,
            to: vec![Actor::Node(NodeId(2))],
        },
    );
    let v = checker::audit(&trace, 1);
    assert!(v.iter().any(|s| s.contains("never sent")), "{v:?}");
}

#[test]
fn adversary_only_signs_as_controlled_nodes() {
    for s in [attack_f2(), attack_f1(40)] {
        let (trace, _) = verdict(&s);
        for line in trace.lines() {
            if let (Record::Send { msg, .. }, Some(Actor::Node(from))) = (&line.record, line.actor) {
                if msg.sig.signer != Actor::Node(from) {
                    assert!(trace.meta.controlled.contains(&from), "{line}");
                }
            }
        }
    }
}

#[test]
fn honest_run_progresses_in_view_zero() {
    let (trace, v) = verdict(&builtin("honest").unwrap());
    assert_eq!(v.liveness.summary, Liveness::Progressed(vec![0, 1, 2]));
    for outcome in v.liveness.heights.values() {
        assert_eq!(*outcome, HeightOutcome::Progressed { view: 0 });
    }
    let acc = checker::signature_accounting(&trace, &BTreeSet::new());
    assert!(acc.groups.iter().all(|g| g.faulty == 0));
    assert!(trace
        .lines()
        .iter()
        .any(|l| matches!(&l.record, Record::Note(t) if t.starts_with("accepted"))));
}

#[test]
fn timer_law_durations() {
    let (trace, _) = verdict(&builtin("timer-law").unwrap());
    let fired: Vec<(u64, u64)> = trace
        .lines()
        .iter()
        .filter(|l| l.actor == Some(Actor::Node(NodeId(3))))
        .filter_map(|l| match l.record {
            Record::TimerFire { duration, .. } => Some((l.time, duration)),
            _ => None,
        })
        .collect();
    assert_eq!(&fired[..3], &[(30, 30), (90, 60), (210, 120)]);
}
