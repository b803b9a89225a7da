//! Trace auditor and verdict engine.
//!
//! Everything here is a pure function of a [`Trace`]: certificates are
//! rebuilt from the SEND lines, ledgers from the PUBLISH lines and timer
//! history from the TIMER lines.

mod explore;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

pub use explore::{explore, generate, minimize, verdict_of, Budget, Exploration};

use crate::model::{quorum, Actor, BlockId, Msg, NodeId, Protocol};
use crate::replica::{CertKind, Certificate};
use crate::trace::{Record, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CountRule {
    /// Signatures for `(h, block)` count together whatever their view.
    ViewAgnostic,
    /// Only signatures from one view `(h, v, block)` count together.
    ViewBound,
}

/// Counting rule each protocol publishes under.
pub fn publish_rule(protocol: Protocol) -> (CertKind, CountRule) {
    match protocol {
        Protocol::TwoPhase => (CertKind::Response, CountRule::ViewAgnostic),
        Protocol::ThreePhase => (CertKind::Commit, CountRule::ViewBound),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    h: u64,
    block: BlockId,
    view: Option<u64>,
}

fn group_key(msg: &Msg, rule: CountRule) -> Option<GroupKey> {
    let block = msg.block.clone()?;
    Some(GroupKey {
        h: msg.view.h,
        block,
        view: match rule {
            CountRule::ViewAgnostic => None,
            CountRule::ViewBound => Some(msg.view.v),
        },
    })
}

/// Why a message cannot count towards a certificate, if it cannot.
fn reject_reason(msg: &Msg, kind: CertKind, n: u32) -> Option<String> {
    if !msg.verify() {
        return Some("signature does not verify".into());
    }
    if !kind.counts(msg.kind) {
        return Some(format!("{} does not count towards a {kind} certificate", msg.kind));
    }
    match msg.signer_node() {
        Some(node) if node.0 < n => {}
        _ => return Some(format!("signer {} is not a committee member", msg.sig.signer)),
    }
    match &msg.block {
        Some(b) if b.height == msg.view.h => None,
        _ => Some("block missing or bound to another height".into()),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Validation {
    pub certificates: Vec<Certificate>,
    pub rejected: Vec<(Msg, String)>,
}

impl Validation {
    pub fn certificate(&self) -> Option<&Certificate> {
        self.certificates.first()
    }
}

/// Groups `pool` under `rule` and returns every group with at least
/// `quorum(n)` distinct signers. Messages that cannot count are reported.
pub fn validate_certificate(pool: &[Msg], kind: CertKind, rule: CountRule, n: u32) -> Validation {
    let mut groups: BTreeMap<GroupKey, BTreeMap<NodeId, u64>> = BTreeMap::new();
    let mut rejected = Vec::new();
    for msg in pool {
        if let Some(reason) = reject_reason(msg, kind, n) {
            rejected.push((msg.clone(), reason));
            continue;
        }
        let key = group_key(msg, rule).expect("accepted messages carry a block");
        let signer = msg.signer_node().expect("accepted messages are node-signed");
        groups.entry(key).or_default().entry(signer).or_insert(msg.view.v);
    }
    let certificates = groups
        .into_iter()
        .filter(|(_, members)| members.len() >= quorum(n))
        .map(|(key, members)| Certificate {
            h: key.h,
            block: key.block,
            kind,
            view: key.view,
            members,
        })
        .collect();
    Validation {
        certificates,
        rejected,
    }
}

/// A certificate found in a trace. `completed_at` is the line index of the
/// SEND that brought it to quorum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScannedCert {
    pub cert: Certificate,
    pub completed_at: usize,
}

/// Every certificate that can be assembled from messages put on the wire.
pub fn scan_certificates(trace: &Trace, kind: CertKind, rule: CountRule) -> Vec<ScannedCert> {
    let n = trace.meta.n;
    let mut groups: BTreeMap<GroupKey, (BTreeMap<NodeId, u64>, Option<usize>)> = BTreeMap::new();
    for (idx, msg) in trace.sent_messages() {
        if reject_reason(msg, kind, n).is_some() {
            continue;
        }
        let key = group_key(msg, rule).expect("accepted messages carry a block");
        let signer = msg.signer_node().expect("accepted messages are node-signed");
        let (members, done) = groups.entry(key).or_default();
        members.entry(signer).or_insert(msg.view.v);
        if done.is_none() && members.len() >= quorum(n) {
            *done = Some(idx);
        }
    }
    let mut out: Vec<ScannedCert> = groups
        .into_iter()
        .filter_map(|(key, (members, done))| {
            Some(ScannedCert {
                completed_at: done?,
                cert: Certificate {
                    h: key.h,
                    block: key.block,
                    kind,
                    view: key.view,
                    members,
                },
            })
        })
        .collect();
    out.sort_by_key(|c| c.completed_at);
    out
}

/// Published blocks of every honest node, in order.
pub fn honest_ledgers(trace: &Trace) -> BTreeMap<NodeId, Vec<(BlockId, u64)>> {
    let mut out: BTreeMap<NodeId, Vec<(BlockId, u64)>> = trace.honest_nodes().map(|n| (n, Vec::new())).collect();
    for line in trace.lines() {
        if let (Record::Publish { block, v }, Some(Actor::Node(node))) = (&line.record, line.actor) {
            if let Some(ledger) = out.get_mut(&node) {
                ledger.push((block.clone(), *v));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForkReport {
    pub height: u64,
    pub cert_a: Certificate,
    pub cert_b: Certificate,
    pub overlap: BTreeSet<NodeId>,
    /// True when found through disagreeing honest ledgers rather than
    /// conflicting certificates.
    pub from_ledgers: bool,
}

fn empty_cert(h: u64, block: BlockId, kind: CertKind) -> Certificate {
    Certificate {
        h,
        block,
        kind,
        view: None,
        members: BTreeMap::new(),
    }
}

/// Lowest height with two conflicting certificates or two honest ledgers
/// that disagree.
pub fn detect_fork(
    ledgers: &BTreeMap<NodeId, Vec<(BlockId, u64)>>,
    certs: &[ScannedCert],
    kind: CertKind,
) -> Option<ForkReport> {
    let mut by_cert: Option<ForkReport> = None;
    let heights: BTreeSet<u64> = certs.iter().map(|c| c.cert.h).collect();
    for h in heights {
        let at_h: Vec<&ScannedCert> = certs.iter().filter(|c| c.cert.h == h).collect();
        let a = at_h.iter().min_by_key(|c| c.completed_at)?;
        if let Some(b) = at_h
            .iter()
            .filter(|c| c.cert.block != a.cert.block)
            .min_by_key(|c| c.completed_at)
        {
            by_cert = Some(ForkReport {
                height: h,
                overlap: a.cert.signers().intersection(&b.cert.signers()).copied().collect(),
                cert_a: a.cert.clone(),
                cert_b: b.cert.clone(),
                from_ledgers: false,
            });
            break;
        }
    }
    let mut by_ledger: Option<ForkReport> = None;
    let depth = ledgers.values().map(Vec::len).max().unwrap_or(0);
    'outer: for i in 0..depth {
        let mut seen: Option<&BlockId> = None;
        for ledger in ledgers.values() {
            let Some((block, _)) = ledger.get(i) else { continue };
            match seen {
                None => seen = Some(block),
                Some(first) if first != block => {
                    let h = block.height;
                    let find = |b: &BlockId| {
                        certs
                            .iter()
                            .find(|c| &c.cert.block == b)
                            .map(|c| c.cert.clone())
                            .unwrap_or_else(|| empty_cert(h, b.clone(), kind))
                    };
                    let (cert_a, cert_b) = (find(first), find(block));
                    by_ledger = Some(ForkReport {
                        height: h,
                        overlap: cert_a.signers().intersection(&cert_b.signers()).copied().collect(),
                        cert_a,
                        cert_b,
                        from_ledgers: true,
                    });
                    break 'outer;
                }
                _ => {}
            }
        }
    }
    match (by_cert, by_ledger) {
        (Some(c), Some(l)) if l.height < c.height => Some(l),
        (Some(c), _) => Some(c),
        (None, l) => l,
    }
}

/// Fork check of a whole trace under the counting rule of its protocol.
pub fn detect_fork_in(trace: &Trace) -> Option<ForkReport> {
    let (kind, rule) = publish_rule(trace.meta.protocol);
    detect_fork(&honest_ledgers(trace), &scan_certificates(trace, kind, rule), kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LivenessBounds {
    pub max_views: u64,
    pub t0: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeightOutcome {
    Progressed { view: u64 },
    Stalled { views_exhausted: u64 },
    Crashed { t_exceeded: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Liveness {
    Progressed(Vec<u64>),
    Stalled { views_exhausted: u64 },
    Crashed { t_exceeded: u64 },
}

impl Liveness {
    pub fn is_progressed(&self) -> bool {
        matches!(self, Liveness::Progressed(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LivenessReport {
    pub heights: BTreeMap<u64, HeightOutcome>,
    pub summary: Liveness,
}

/// Per started height: progressed when every honest node published the same
/// block, crashed when the accumulated timer exceeds `t0`, stalled otherwise.
pub fn check_liveness(trace: &Trace, bounds: LivenessBounds) -> LivenessReport {
    let honest: BTreeSet<NodeId> = trace.honest_nodes().collect();
    let mut started = BTreeSet::new();
    let mut published: BTreeMap<u64, BTreeMap<NodeId, (BlockId, u64)>> = BTreeMap::new();
    let mut fired: BTreeMap<(u64, NodeId), Vec<(u64, u64)>> = BTreeMap::new();
    for line in trace.lines() {
        let Some(node) = line.actor.and_then(Actor::node).filter(|n| honest.contains(n)) else {
            continue;
        };
        match &line.record {
            Record::State { h, .. } => {
                started.insert(*h);
            }
            Record::Publish { block, v } => {
                published
                    .entry(block.height)
                    .or_default()
                    .insert(node, (block.clone(), *v));
            }
            Record::TimerFire { h, v, duration } => fired.entry((*h, node)).or_default().push((*v, *duration)),
            _ => {}
        }
    }
    let mut heights = BTreeMap::new();
    for h in started {
        let pubs = published.get(&h);
        let all = pubs.is_some_and(|p| p.len() == honest.len());
        let agree = pubs.is_some_and(|p| p.values().map(|(b, _)| b).collect::<BTreeSet<_>>().len() == 1);
        if all && agree {
            let view = pubs
                .and_then(|p| p.values().map(|(_, v)| *v).max())
                .unwrap_or(0);
            heights.insert(h, HeightOutcome::Progressed { view });
            continue;
        }
        let mut crashed: Option<u64> = None;
        let mut views = 0;
        for node in &honest {
            let mut total = 0u64;
            for &(v, duration) in fired.get(&(h, *node)).map(Vec::as_slice).unwrap_or(&[]) {
                total += duration;
                views = views.max(v + 1);
                if let Some(t0) = bounds.t0 {
                    if total > t0 {
                        crashed = Some(crashed.map_or(total, |c| c.max(total)));
                        break;
                    }
                }
            }
        }
        let outcome = match crashed {
            Some(t_exceeded) => HeightOutcome::Crashed { t_exceeded },
            None => HeightOutcome::Stalled { views_exhausted: views },
        };
        heights.insert(h, outcome);
    }
    let summary = heights
        .values()
        .find_map(|o| match o {
            HeightOutcome::Crashed { t_exceeded } => Some(Liveness::Crashed { t_exceeded: *t_exceeded }),
            _ => None,
        })
        .or_else(|| {
            heights.values().find_map(|o| match o {
                HeightOutcome::Stalled { views_exhausted } => Some(Liveness::Stalled {
                    views_exhausted: *views_exhausted,
                }),
                _ => None,
            })
        })
        .unwrap_or_else(|| Liveness::Progressed(heights.keys().copied().collect()));
    LivenessReport { heights, summary }
}

/// Signature counts of one `(h, block[, v])` group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupStats {
    pub h: u64,
    pub block: String,
    pub view: Option<u64>,
    pub total: usize,
    pub faulty: usize,
    pub honest: usize,
    pub certificate: bool,
}

/// The counting inequality evaluated on a fork: faulty-origin signatures on
/// the later (forged) state against a third of the signatures on the earlier
/// (honest) state. `identity` records whether both states gathered the same
/// number of signatures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InequalityCheck {
    pub h: u64,
    pub forged: String,
    pub honest_state: String,
    pub forged_total: usize,
    pub forged_faulty: usize,
    pub honest_total: usize,
    pub bound: usize,
    pub holds: bool,
    pub identity: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Accounting {
    pub groups: Vec<GroupStats>,
    pub checks: Vec<InequalityCheck>,
}

impl Accounting {
    pub fn group(&self, block: &str) -> Option<&GroupStats> {
        self.groups.iter().find(|g| g.block == block)
    }
}

/// Per-group signature counts split by origin, under the trace's counting
/// rule, plus the inequality check for a detected fork.
pub fn signature_accounting(trace: &Trace, faulty: &BTreeSet<NodeId>) -> Accounting {
    let (kind, rule) = publish_rule(trace.meta.protocol);
    let n = trace.meta.n;
    let mut groups: BTreeMap<GroupKey, BTreeSet<NodeId>> = BTreeMap::new();
    for (_, msg) in trace.sent_messages() {
        if reject_reason(msg, kind, n).is_some() {
            continue;
        }
        let key = group_key(msg, rule).expect("accepted messages carry a block");
        groups
            .entry(key)
            .or_default()
            .insert(msg.signer_node().expect("node-signed"));
    }
    let stats: Vec<GroupStats> = groups
        .into_iter()
        .map(|(key, signers)| {
            let bad = signers.intersection(faulty).count();
            GroupStats {
                h: key.h,
                block: key.block.tag,
                view: key.view,
                total: signers.len(),
                faulty: bad,
                honest: signers.len() - bad,
                certificate: signers.len() >= quorum(n),
            }
        })
        .collect();
    let mut checks = Vec::new();
    if let Some(fork) = detect_fork_in(trace).filter(|f| !f.from_ledgers) {
        let count = |c: &Certificate| (c.size(), c.signers().intersection(faulty).count());
        let (forged_total, forged_faulty) = count(&fork.cert_b);
        let (honest_total, _) = count(&fork.cert_a);
        let bound = honest_total / 3;
        checks.push(InequalityCheck {
            h: fork.height,
            forged: fork.cert_b.block.tag.clone(),
            honest_state: fork.cert_a.block.tag.clone(),
            forged_total,
            forged_faulty,
            honest_total,
            bound,
            holds: forged_faulty <= bound,
            identity: forged_total == honest_total,
        });
    }
    Accounting { groups: stats, checks }
}

/// Structural checks of a trace. Each entry of the result is a violation.
///
/// `in_flight` is the number of deliveries still queued when the run ended.
pub fn audit(trace: &Trace, in_flight: u64) -> Vec<String> {
    let mut violations = Vec::new();
    let mut sent_by_signer: BTreeSet<&Msg> = BTreeSet::new();
    let mut on_wire: BTreeSet<(&Msg, Actor)> = BTreeSet::new();
    let mut addressed = 0u64;
    let mut delivered = 0u64;
    let mut dropped = 0u64;
    let mut last_time = 0;
    for (i, line) in trace.lines().iter().enumerate() {
        if line.seq != i as u64 {
            violations.push(format!("line {i}: seq {} out of order", line.seq));
        }
        if line.time < last_time {
            violations.push(format!("line {i}: clock went back from {last_time} to {}", line.time));
        }
        last_time = line.time;
        match &line.record {
            Record::Send { msg, to } => {
                let Some(actor) = line.actor else {
                    violations.push(format!("line {i}: SEND without an actor"));
                    continue;
                };
                if !msg.verify() {
                    violations.push(format!("line {i}: SEND of a message whose signature does not verify"));
                }
                if msg.sig.signer == actor {
                    sent_by_signer.insert(msg);
                } else if !sent_by_signer.contains(msg) {
                    violations.push(format!(
                        "line {i}: {actor} sent a message signed by {} that its signer never sent",
                        msg.sig.signer
                    ));
                }
                on_wire.insert((msg, actor));
                addressed += to.len() as u64;
            }
            Record::Deliver { msg, from } => {
                delivered += 1;
                if !on_wire.contains(&(msg, *from)) {
                    violations.push(format!("line {i}: delivery of a message {from} never sent"));
                }
            }
            Record::Drop { reason, .. } => {
                dropped += 1;
                if let Some((_, targets)) = reason.split_once("redirect->") {
                    addressed += targets.split(',').filter(|t| !t.is_empty()).count() as u64;
                }
            }
            _ => {}
        }
    }
    if addressed != delivered + dropped + in_flight {
        violations.push(format!(
            "conservation: {addressed} addressed but {delivered} delivered, {dropped} dropped, {in_flight} in flight"
        ));
    }
    violations
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Safety {
    Ok,
    Forked(ForkReport),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub protocol: Protocol,
    pub safety: Safety,
    pub liveness: LivenessReport,
    pub stats: Accounting,
}

impl Verdict {
    pub fn of(trace: &Trace, bounds: LivenessBounds) -> Verdict {
        let safety = match detect_fork_in(trace) {
            Some(report) => Safety::Forked(report),
            None => Safety::Ok,
        };
        Verdict {
            protocol: trace.meta.protocol,
            safety,
            liveness: check_liveness(trace, bounds),
            stats: signature_accounting(trace, &trace.meta.controlled),
        }
    }

    pub fn fork(&self) -> Option<&ForkReport> {
        match &self.safety {
            Safety::Forked(report) => Some(report),
            Safety::Ok => None,
        }
    }

    /// 0 safe and live, 2 forked, 3 safe but not live.
    pub fn exit_code(&self) -> i32 {
        match (&self.safety, self.liveness.summary.is_progressed()) {
            (Safety::Forked(_), _) => 2,
            (Safety::Ok, false) => 3,
            (Safety::Ok, true) => 0,
        }
    }

    /// `key=value` lines, one fact per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        let signers = |c: &Certificate| {
            c.members
                .iter()
                .map(|(s, v)| format!("{s}@v{v}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        kv("protocol", self.protocol.to_string());
        match &self.safety {
            Safety::Ok => kv("safety", "ok".into()),
            Safety::Forked(f) => {
                kv("safety", "forked".into());
                kv("fork.height", f.height.to_string());
                kv("fork.source", if f.from_ledgers { "ledgers" } else { "certificates" }.into());
                for (name, c) in [("a", &f.cert_a), ("b", &f.cert_b)] {
                    kv(&format!("fork.cert_{name}.block"), c.block.tag.clone());
                    kv(&format!("fork.cert_{name}.kind"), c.kind.to_string());
                    kv(
                        &format!("fork.cert_{name}.view"),
                        c.view.map_or("any".into(), |v| v.to_string()),
                    );
                    kv(&format!("fork.cert_{name}.size"), c.size().to_string());
                    kv(&format!("fork.cert_{name}.signers"), signers(c));
                }
                kv(
                    "fork.overlap",
                    f.overlap.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
                );
            }
        }
        match &self.liveness.summary {
            Liveness::Progressed(hs) => {
                kv("liveness", "progressed".into());
                kv(
                    "liveness.heights",
                    hs.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
                );
            }
            Liveness::Stalled { views_exhausted } => {
                kv("liveness", "stalled".into());
                kv("liveness.views_exhausted", views_exhausted.to_string());
            }
            Liveness::Crashed { t_exceeded } => {
                kv("liveness", "crashed".into());
                kv("liveness.t_exceeded", t_exceeded.to_string());
            }
        }
        for (h, outcome) in &self.liveness.heights {
            let text = match outcome {
                HeightOutcome::Progressed { view } => format!("progressed view={view}"),
                HeightOutcome::Stalled { views_exhausted } => format!("stalled views_exhausted={views_exhausted}"),
                HeightOutcome::Crashed { t_exceeded } => format!("crashed t_exceeded={t_exceeded}"),
            };
            kv(&format!("height.{h}"), text);
        }
        for g in &self.stats.groups {
            let view = g.view.map_or(String::new(), |v| format!(".v{v}"));
            kv(
                &format!("stats.h{}.{}{view}", g.h, g.block),
                format!(
                    "total={} faulty={} honest={} certificate={}",
                    g.total, g.faulty, g.honest, g.certificate
                ),
            );
        }
        for c in &self.stats.checks {
            kv(
                &format!("inequality.h{}", c.h),
                format!(
                    "forged={} honest_state={} forged_faulty={} bound={} holds={} forged_total={} honest_total={} identity={}",
                    c.forged, c.honest_state, c.forged_faulty, c.bound, c.holds, c.forged_total, c.honest_total, c.identity
                ),
            );
        }
        out
    }
}

pub const VERDICT_SENTINEL: &str = "=== VERDICT ===";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MsgKind, View};

    fn sig(kind: MsgKind, v: u64, tag: &str, from: u32) -> Msg {
        Msg::signed(kind, View::new(0, v), Some(BlockId::new(0, tag)), Actor::Node(NodeId(from)), 0)
    }

    fn f2_pool() -> Vec<Msg> {
        vec![
            sig(MsgKind::Prepare, 0, "block2", 0),
            sig(MsgKind::Response, 0, "block2", 4),
            sig(MsgKind::Response, 0, "block2", 5),
            sig(MsgKind::Response, 0, "block2", 6),
            sig(MsgKind::Response, 1, "block2", 1),
        ]
    }

    #[test]
    fn view_agnostic_accepts_split_pool() {
        let v = validate_certificate(&f2_pool(), CertKind::Response, CountRule::ViewAgnostic, 7);
        let cert = v.certificate().unwrap();
        assert_eq!(cert.size(), 5);
        assert!(v.rejected.is_empty());
    }

    #[test]
    fn view_bound_rejects_split_pool() {
        let v = validate_certificate(&f2_pool(), CertKind::Response, CountRule::ViewBound, 7);
        assert!(v.certificate().is_none());
    }

    #[test]
    fn empty_pool_has_no_certificate() {
        assert!(validate_certificate(&[], CertKind::Response, CountRule::ViewAgnostic, 7)
            .certificate()
            .is_none());
    }

    #[test]
    fn duplicates_and_bad_signatures() {
        let mut pool = f2_pool();
        pool.truncate(4);
        pool.push(sig(MsgKind::Response, 1, "block2", 4));
        let mut bad = sig(MsgKind::Response, 0, "block2", 3);
        bad.sender = Actor::Node(NodeId(2));
        pool.push(bad);
        let v = validate_certificate(&pool, CertKind::Response, CountRule::ViewAgnostic, 7);
        assert!(v.certificate().is_none());
        assert_eq!(v.rejected.len(), 1);
    }

    #[test]
    fn commits_do_not_count_as_responses() {
        let pool: Vec<Msg> = (0..5).map(|i| sig(MsgKind::Commit, 0, "b", i)).collect();
        let v = validate_certificate(&pool, CertKind::Response, CountRule::ViewAgnostic, 7);
        assert!(v.certificate().is_none());
        assert_eq!(v.rejected.len(), 5);
        let v = validate_certificate(&pool, CertKind::Commit, CountRule::ViewBound, 7);
        assert_eq!(v.certificate().unwrap().view, Some(0));
    }
}
