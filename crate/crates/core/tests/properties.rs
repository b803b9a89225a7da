use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use dbft_sim::checker::{self, generate, Verdict, LivenessBounds};
use dbft_sim::model::{select_speaker, MsgKind};
use dbft_sim::trace::Record;
use dbft_sim::{Config, Protocol, Scenario, Simulation};

fn config(n: u32, three: bool) -> Config {
    let p = if three { Protocol::ThreePhase } else { Protocol::TwoPhase };
    Config::new(n).with_protocol(p)
}

fn n_strategy() -> impl Strategy<Value = u32> {
    prop_oneof![Just(4u32), Just(7), Just(10)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scenario_text_round_trips(n in n_strategy(), three: bool, seed: u64, index in 0u64..10_000) {
        let s = generate(&config(n, three), 5_000, seed, index);
        let text = s.to_text();
        let back = Scenario::parse(&text).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn honest_nodes_sign_once_per_view(n in n_strategy(), three: bool, seed: u64, index in 0u64..10_000) {
        let s = generate(&config(n, three), 5_000, seed, index);
        let mut sim = Simulation::new(&s).unwrap();
        sim.run();
        let trace = sim.trace();
        let honest: BTreeSet<_> = trace.honest_nodes().collect();
        let mut signed: BTreeMap<(u32, MsgKind, u64, u64), BTreeSet<String>> = BTreeMap::new();
        for (_, msg) in trace.sent_messages() {
            let Some(node) = msg.signer_node() else { continue };
            if !honest.contains(&node) || msg.kind == MsgKind::Request || msg.kind == MsgKind::Reply {
                continue;
            }
            prop_assert!(msg.verify());
            if matches!(msg.kind, MsgKind::Prepare | MsgKind::Response | MsgKind::Commit) {
                signed
                    .entry((node.0, msg.kind, msg.view.h, msg.view.v))
                    .or_default()
                    .insert(msg.block_tag().to_string());
            }
        }
        for (key, blocks) in signed {
            prop_assert_eq!(blocks.len(), 1, "{:?}", key);
        }
    }

    #[test]
    fn network_conserves_messages(n in n_strategy(), three: bool, seed: u64, index in 0u64..10_000) {
        let s = generate(&config(n, three), 5_000, seed, index);
        let mut sim = Simulation::new(&s).unwrap();
        sim.run();
        let in_flight = sim.net().pending_count();
        let violations = checker::audit(sim.trace(), in_flight);
        prop_assert!(violations.is_empty(), "{:?}", violations);
        let st = sim.net_stats();
        prop_assert_eq!(st.addressed, st.delivered + st.dropped + in_flight);
    }

    #[test]
    fn three_phase_never_forks(n in n_strategy(), seed: u64, index in 0u64..10_000) {
        let s = generate(&config(n, true), 5_000, seed, index);
        let v = checker::verdict_of(&s).unwrap();
        prop_assert!(v.fork().is_none());
    }

    #[test]
    fn accounting_partitions_signers(n in n_strategy(), seed: u64, index in 0u64..10_000) {
        let s = generate(&config(n, false), 5_000, seed, index);
        let mut sim = Simulation::new(&s).unwrap();
        sim.run();
        let v = Verdict::of(sim.trace(), LivenessBounds { max_views: s.config.max_views, t0: s.config.t0 });
        for g in &v.stats.groups {
            prop_assert_eq!(g.faulty + g.honest, g.total);
            prop_assert!(g.faulty <= s.plan.controlled.len());
        }
        let q = 2 * s.config.f() as usize + 1;
        for c in &v.stats.checks {
            prop_assert!(c.forged_total >= q && c.honest_total >= q);
            prop_assert_eq!(c.identity, c.forged_total == c.honest_total);
        }
    }

    #[test]
    fn speaker_rotates_through_every_node(n in 1u32..20, h in 0u64..1_000, v in 0u64..1_000) {
        let s = select_speaker(h, v, n);
        prop_assert!(s.0 < n);
        prop_assert_eq!(select_speaker(h + 1, v + 1, n), s);
        let all: BTreeSet<_> = (0..n as u64).map(|k| select_speaker(h, v + k, n)).collect();
        prop_assert_eq!(all.len(), n as usize);
    }
}

#[test]
fn trace_records_are_time_ordered() {
    let s = generate(&config(7, false), 5_000, 3, 11);
    let mut sim = Simulation::new(&s).unwrap();
    sim.run();
    let lines = sim.trace().lines();
    assert!(lines.windows(2).all(|w| w[0].time <= w[1].time));
    assert!(lines.iter().all(|l| !matches!(l.record, Record::Deliver { ref msg, .. } if !msg.verify())));
}
