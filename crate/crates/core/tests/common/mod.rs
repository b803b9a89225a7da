//! Independent oracles shared by the integration tests. Nothing here calls
//! into the crate's checker; traces are read back from their text form.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct OMsg {
    pub kind: String,
    pub h: u64,
    pub v: u64,
    pub tag: Option<String>,
    pub sender: String,
    pub ts: u64,
    pub sig: String,
}

#[derive(Debug, Clone)]
pub struct OLine {
    pub time: u64,
    pub actor: String,
    pub action: String,
    pub detail: String,
}

pub fn lines(text: &str) -> Vec<OLine> {
    text.lines()
        .take_while(|l| !l.starts_with("==="))
        .map(|l| {
            let cols: Vec<&str> = l.splitn(5, '\t').collect();
            assert_eq!(cols.len(), 5, "malformed trace line `{l}`");
            OLine {
                time: cols[0].parse().unwrap(),
                actor: cols[2].to_string(),
                action: cols[3].to_string(),
                detail: cols[4].to_string(),
            }
        })
        .collect()
}

fn field<'a>(detail: &'a str, key: &str) -> &'a str {
    detail
        .split(' ')
        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key}= in `{detail}`"))
}

pub fn parse_msg(detail: &str) -> OMsg {
    let tag = field(detail, "block");
    OMsg {
        kind: detail.split(' ').next().unwrap().to_string(),
        h: field(detail, "h").parse().unwrap(),
        v: field(detail, "v").parse().unwrap(),
        tag: (tag != "-").then(|| tag.to_string()),
        sender: field(detail, "sender").to_string(),
        ts: field(detail, "t").parse().unwrap(),
        sig: field(detail, "sig").to_string(),
    }
}

pub fn encode(m: &OMsg) -> Vec<u8> {
    let parts: [Vec<u8>; 6] = [
        m.kind.as_bytes().to_vec(),
        m.h.to_be_bytes().to_vec(),
        m.v.to_be_bytes().to_vec(),
        m.tag.clone().unwrap_or_default().into_bytes(),
        m.sender.as_bytes().to_vec(),
        m.ts.to_be_bytes().to_vec(),
    ];
    let mut out = Vec::new();
    for p in parts {
        out.extend_from_slice(&(p.len() as u32).to_be_bytes());
        out.extend_from_slice(&p);
    }
    out
}

pub fn verifies(m: &OMsg) -> bool {
    hex::encode(Sha256::digest(encode(m))) == m.sig
}

/// Every distinct message put on the wire.
pub fn sent(text: &str) -> BTreeSet<OMsg> {
    lines(text)
        .into_iter()
        .filter(|l| l.action == "SEND")
        .map(|l| parse_msg(&l.detail))
        .collect()
}

/// `(h, tag, view, signers)` of every group with at least `2f+1` signers.
pub type OCert = (u64, String, Option<u64>, BTreeSet<String>);

pub fn brute_force_certs(msgs: &BTreeSet<OMsg>, kinds: &[&str], view_bound: bool, n: u32) -> BTreeSet<OCert> {
    let q = 2 * ((n as usize - 1) / 3) + 1;
    let mut groups: BTreeMap<(u64, String, Option<u64>), BTreeSet<String>> = BTreeMap::new();
    for m in msgs {
        let member = m
            .sender
            .strip_prefix('n')
            .and_then(|i| i.parse::<u32>().ok())
            .is_some_and(|i| i < n);
        if !kinds.contains(&m.kind.as_str()) || !member || !verifies(m) {
            continue;
        }
        let Some(tag) = &m.tag else { continue };
        let key = (m.h, tag.clone(), view_bound.then_some(m.v));
        groups.entry(key).or_default().insert(m.sender.clone());
    }
    groups
        .into_iter()
        .filter(|(_, s)| s.len() >= q)
        .map(|((h, t, v), s)| (h, t, v, s))
        .collect()
}

/// Lowest height with two conflicting certificates, by cross product.
pub fn brute_force_fork(certs: &BTreeSet<OCert>) -> Option<u64> {
    let mut best: Option<u64> = None;
    for a in certs {
        for b in certs {
            if a.0 == b.0 && a.1 != b.1 {
                best = Some(best.map_or(a.0, |x| x.min(a.0)));
            }
        }
    }
    best
}

/// Lowest height at which two of the given nodes published different blocks.
pub fn ledger_fork(text: &str, honest: &BTreeSet<String>) -> Option<u64> {
    let mut by_height: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
    for l in lines(text) {
        if l.action == "PUBLISH" && honest.contains(&l.actor) {
            by_height
                .entry(field(&l.detail, "h").parse().unwrap())
                .or_default()
                .insert(field(&l.detail, "block").to_string());
        }
    }
    by_height.into_iter().find(|(_, b)| b.len() > 1).map(|(h, _)| h)
}

/// Speaker by walking backwards from `h mod n` once per view.
pub fn speaker_oracle(h: u64, v: u64, n: u32) -> u32 {
    let mut p = (h % n as u64) as u32;
    for _ in 0..v {
        p = if p == 0 { n - 1 } else { p - 1 };
    }
    p
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// Golden traces checked in under `tests/golden`, as `(file stem, text)`.
pub fn golden_traces() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = std::fs::read_dir(golden_dir())
        .expect("golden directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "trace"))
        .map(|p| {
            (
                p.file_stem().unwrap().to_string_lossy().into_owned(),
                std::fs::read_to_string(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

/// `(builtin, protocol)` pairs that have a golden trace.
pub const GOLDEN: [(&str, &str); 5] = [
    ("honest", "two-phase"),
    ("attack-f2", "two-phase"),
    ("attack-f2", "three-phase"),
    ("attack-f1", "two-phase"),
    ("attack-f1", "three-phase"),
];

pub fn golden_name(builtin: &str, protocol: &str) -> String {
    format!("{}.{protocol}", builtin.replace('-', "_"))
}
