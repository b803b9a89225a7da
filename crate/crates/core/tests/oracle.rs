mod common;

use std::collections::BTreeSet;

use common::{brute_force_certs, brute_force_fork, golden_traces, ledger_fork, sent, OCert};
use dbft_sim::checker::{self, validate_certificate, CountRule, Safety};
use dbft_sim::model::Config;
use dbft_sim::replica::{CertKind, Certificate};
use dbft_sim::{run_scenario, Msg, Protocol, Scenario, Trace};

fn as_oracle(c: &Certificate) -> OCert {
    (
        c.h,
        c.block.tag.clone(),
        c.view,
        c.signers().iter().map(ToString::to_string).collect(),
    )
}

fn pool(trace: &Trace) -> Vec<Msg> {
    trace.sent_messages().map(|(_, m)| m.clone()).collect()
}

fn kinds(kind: CertKind) -> &'static [&'static str] {
    match kind {
        CertKind::Response => &["PREPARE", "RESPONSE"],
        CertKind::Commit => &["COMMIT"],
    }
}

/// Compares the crate's certificate and fork logic with the brute-force
/// scan of the rendered trace text.
fn check_against_oracle(label: &str, trace: &Trace, text: &str) {
    let n = trace.meta.n;
    let msgs = sent(text);
    let pool = pool(trace);
    for kind in [CertKind::Response, CertKind::Commit] {
        for (rule, bound) in [(CountRule::ViewAgnostic, false), (CountRule::ViewBound, true)] {
            let ours: BTreeSet<OCert> = validate_certificate(&pool, kind, rule, n)
                .certificates
                .iter()
                .map(as_oracle)
                .collect();
            let theirs = brute_force_certs(&msgs, kinds(kind), bound, n);
            assert_eq!(ours, theirs, "{label}: {kind} {rule:?}");
            let scanned: BTreeSet<OCert> = checker::scan_certificates(trace, kind, rule)
                .iter()
                .map(|c| as_oracle(&c.cert))
                .collect();
            assert_eq!(scanned, theirs, "{label}: scan {kind} {rule:?}");
        }
    }
    let (kind, rule) = checker::publish_rule(trace.meta.protocol);
    let certs = brute_force_certs(&msgs, kinds(kind), rule == CountRule::ViewBound, n);
    let honest: BTreeSet<String> = trace.honest_nodes().map(|h| h.to_string()).collect();
    let expected = match (brute_force_fork(&certs), ledger_fork(text, &honest)) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let report = checker::detect_fork_in(trace);
    assert_eq!(report.as_ref().map(|r| r.height), expected, "{label}: fork height");
    if let Some(r) = report.filter(|r| !r.from_ledgers) {
        assert_ne!(r.cert_a.block, r.cert_b.block);
        assert!(certs.contains(&as_oracle(&r.cert_a)), "{label}: cert_a");
        assert!(certs.contains(&as_oracle(&r.cert_b)), "{label}: cert_b");
        let overlap: BTreeSet<_> = r.cert_a.signers().intersection(&r.cert_b.signers()).copied().collect();
        assert_eq!(r.overlap, overlap);
    }
}

fn run(s: &Scenario) -> Trace {
    run_scenario(s).unwrap().0
}

#[test]
fn golden_traces_agree_with_brute_force() {
    let golden = golden_traces();
    assert_eq!(golden.len(), common::GOLDEN.len());
    for (builtin, protocol) in common::GOLDEN {
        let mut s = dbft_sim::scenario::builtin(builtin).unwrap();
        s.config.protocol = protocol.parse().unwrap();
        let trace = run(&s);
        let name = common::golden_name(builtin, protocol);
        let (_, text) = golden.iter().find(|(stem, _)| *stem == name).unwrap();
        assert_eq!(&trace.render(), text);
        check_against_oracle(&name, &trace, text);
    }
}

#[test]
fn explorer_traces_agree_with_brute_force() {
    for protocol in [Protocol::TwoPhase, Protocol::ThreePhase] {
        let cfg = Config::new(7).with_protocol(protocol);
        for i in 0..60 {
            let s = checker::generate(&cfg, 20_000, 11, i);
            let trace = run(&s);
            check_against_oracle(&s.name, &trace, &trace.render());
        }
    }
    let cfg = Config::new(4);
    for i in 0..40 {
        let s = checker::generate(&cfg, 20_000, 5, i);
        let trace = run(&s);
        check_against_oracle(&s.name, &trace, &trace.render());
    }
}

#[test]
fn view_bound_certificates_are_view_agnostic_valid() {
    let cfg = Config::new(7);
    for i in 0..80 {
        let trace = run(&checker::generate(&cfg, 20_000, 21, i));
        let pool = pool(&trace);
        for kind in [CertKind::Response, CertKind::Commit] {
            let agnostic = validate_certificate(&pool, kind, CountRule::ViewAgnostic, 7).certificates;
            for c in validate_certificate(&pool, kind, CountRule::ViewBound, 7).certificates {
                assert!(agnostic
                    .iter()
                    .any(|a| a.block == c.block && c.signers().is_subset(&a.signers())));
            }
        }
    }
}

#[test]
fn verdicts_are_deterministic() {
    let cfg = Config::new(7);
    for i in 0..30 {
        let s = checker::generate(&cfg, 20_000, 2, i);
        let a = checker::verdict_of(&s).unwrap();
        let b = checker::verdict_of(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
        if let Safety::Forked(r) = &a.safety {
            assert_ne!(r.cert_a.block, r.cert_b.block);
        }
    }
}
