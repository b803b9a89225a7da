//! Domain types shared by every module: identities, views, blocks, signed
//! messages, run configuration, quorum arithmetic and speaker rotation.
//!
//! Signatures are simulated. A signature is the signer's identity plus the
//! SHA-256 digest of the message's canonical bytes. Only the actor that
//! controls an identity ever calls [`sign`] for it; the simulator enforces
//! this and the trace auditor re-checks it.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Index of a consensus node (delegate) in `[0, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix('n')
            .and_then(|rest| rest.parse().ok())
            .map(NodeId)
            .ok_or_else(|| Error::Config(format!("bad node id `{s}` (expected n<index>)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl FromStr for ClientId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix('c')
            .and_then(|rest| rest.parse().ok())
            .map(ClientId)
            .ok_or_else(|| Error::Config(format!("bad client id `{s}` (expected c<index>)")))
    }
}

/// Any identity that can sign or receive messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Actor {
    Node(NodeId),
    Client(ClientId),
}

impl Actor {
    pub fn node(self) -> Option<NodeId> {
        match self {
            Actor::Node(id) => Some(id),
            Actor::Client(_) => None,
        }
    }
}

impl From<NodeId> for Actor {
    fn from(id: NodeId) -> Self {
        Actor::Node(id)
    }
}

impl From<ClientId> for Actor {
    fn from(id: ClientId) -> Self {
        Actor::Client(id)
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Node(id) => id.fmt(f),
            Actor::Client(id) => id.fmt(f),
        }
    }
}

impl FromStr for Actor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.starts_with('n') {
            s.parse().map(Actor::Node)
        } else if s.starts_with('c') {
            s.parse().map(Actor::Client)
        } else {
            Err(Error::Config(format!("bad actor `{s}`")))
        }
    }
}

/// View number `v` at block height `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct View {
    pub v: u64,
    pub h: u64,
}

impl View {
    pub fn new(h: u64, v: u64) -> Self {
        View { v, h }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId {
    pub height: u64,
    pub tag: String,
}

impl BlockId {
    pub fn new(height: u64, tag: impl Into<String>) -> Self {
        BlockId {
            height,
            tag: tag.into(),
        }
    }

    pub fn conflicts_with(&self, other: &BlockId) -> bool {
        self.height == other.height && self.tag != other.tag
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MsgKind {
    Request,
    Reply,
    Prepare,
    Response,
    Commit,
    ViewChange,
}

impl MsgKind {
    pub const ALL: [MsgKind; 6] = [
        MsgKind::Request,
        MsgKind::Reply,
        MsgKind::Prepare,
        MsgKind::Response,
        MsgKind::Commit,
        MsgKind::ViewChange,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgKind::Request => "REQUEST",
            MsgKind::Reply => "REPLY",
            MsgKind::Prepare => "PREPARE",
            MsgKind::Response => "RESPONSE",
            MsgKind::Commit => "COMMIT",
            MsgKind::ViewChange => "VIEWCHANGE",
        }
    }

    fn carries_block(self) -> bool {
        matches!(
            self,
            MsgKind::Prepare | MsgKind::Response | MsgKind::Commit | MsgKind::Reply
        )
    }
}

impl fmt::Display for MsgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MsgKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MsgKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown message kind `{s}`")))
    }
}

pub type Digest32 = [u8; 32];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Signature {
    pub signer: Actor,
    pub digest: Digest32,
}

pub fn hash(content: &[u8]) -> Digest32 {
    Sha256::digest(content).into()
}

/// Signs `content` as `actor`. Callers must control `actor`.
pub fn sign(actor: Actor, content: &[u8]) -> Signature {
    Signature {
        signer: actor,
        digest: hash(content),
    }
}

pub fn verify(sig: &Signature, content: &[u8], claimed_signer: Actor) -> bool {
    sig.signer == claimed_signer && sig.digest == hash(content)
}

/// Length-prefixed (u32 big-endian) concatenation of kind, h, v, block tag,
/// sender and timestamp. Integers are u64 big-endian; strings are UTF-8.
pub fn canonical_bytes(
    kind: MsgKind,
    view: View,
    block: Option<&BlockId>,
    sender: Actor,
    timestamp: u64,
) -> Vec<u8> {
    fn field(out: &mut Vec<u8>, bytes: &[u8]) {
        out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(bytes);
    }
    let mut out = Vec::with_capacity(64);
    field(&mut out, kind.as_str().as_bytes());
    field(&mut out, &view.h.to_be_bytes());
    field(&mut out, &view.v.to_be_bytes());
    field(&mut out, block.map(|b| b.tag.as_bytes()).unwrap_or_default());
    field(&mut out, sender.to_string().as_bytes());
    field(&mut out, &timestamp.to_be_bytes());
    out
}

/// One signed protocol message.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Msg {
    pub kind: MsgKind,
    pub view: View,
    pub block: Option<BlockId>,
    pub sender: Actor,
    pub timestamp: u64,
    pub sig: Signature,
}

impl Msg {
    /// Builds and signs a message as `sender`.
    pub fn signed(
        kind: MsgKind,
        view: View,
        block: Option<BlockId>,
        sender: Actor,
        timestamp: u64,
    ) -> Msg {
        let sig = sign(
            sender,
            &canonical_bytes(kind, view, block.as_ref(), sender, timestamp),
        );
        Msg {
            kind,
            view,
            block,
            sender,
            timestamp,
            sig,
        }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_bytes(
            self.kind,
            self.view,
            self.block.as_ref(),
            self.sender,
            self.timestamp,
        )
    }

    pub fn verify(&self) -> bool {
        verify(&self.sig, &self.canonical_bytes(), self.sender)
    }

    /// Signature verifies and the block field matches the kind.
    pub fn check_well_formed(&self) -> Result<()> {
        if !self.verify() {
            return Err(Error::InvalidMessage(format!(
                "{} from {}: signature does not verify",
                self.kind, self.sender
            )));
        }
        match (&self.block, self.kind.carries_block()) {
            (Some(b), true) if b.height == self.view.h => Ok(()),
            (Some(b), true) => Err(Error::InvalidMessage(format!(
                "{} block {} at height {} bound to h={}",
                self.kind, b.tag, b.height, self.view.h
            ))),
            (None, true) => Err(Error::InvalidMessage(format!(
                "{} without a block",
                self.kind
            ))),
            (Some(_), false) => Err(Error::InvalidMessage(format!(
                "{} must not carry a block",
                self.kind
            ))),
            (None, false) => Ok(()),
        }
    }

    pub fn block_tag(&self) -> &str {
        self.block.as_ref().map(|b| b.tag.as_str()).unwrap_or("-")
    }

    pub fn signer_node(&self) -> Option<NodeId> {
        self.sig.signer.node()
    }
}

impl fmt::Display for Msg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} h={} v={} block={} sender={} t={} sig={}",
            self.kind,
            self.view.h,
            self.view.v,
            self.block_tag(),
            self.sender,
            self.timestamp,
            hex::encode(self.sig.digest)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Protocol {
    /// Prepare/Response; publish on a response quorum.
    #[default]
    TwoPhase,
    /// Prepare/Response/Commit with a commit lock.
    ThreePhase,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::TwoPhase => "two-phase",
            Protocol::ThreePhase => "three-phase",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-phase" => Ok(Protocol::TwoPhase),
            "three-phase" => Ok(Protocol::ThreePhase),
            other => Err(Error::Config(format!(
                "unknown protocol `{other}` (expected two-phase or three-phase)"
            ))),
        }
    }
}

pub const DEFAULT_T_STAR: u64 = 15;
pub const DEFAULT_MAX_VIEWS: u64 = 10;

/// Run configuration. `f` is always derived from `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub n: u32,
    pub t_star: u64,
    pub protocol: Protocol,
    pub max_views: u64,
    /// Tolerated accumulated timer at one height; `None` disables the bound.
    pub t0: Option<u64>,
    pub seed: u64,
}

impl Config {
    pub fn new(n: u32) -> Self {
        Config {
            n,
            t_star: DEFAULT_T_STAR,
            protocol: Protocol::TwoPhase,
            max_views: DEFAULT_MAX_VIEWS,
            t0: Some(default_t0(DEFAULT_T_STAR)),
            seed: 0,
        }
    }

    pub fn with_protocol(mut self, protocol: Protocol) -> Self {
        self.protocol = protocol;
        self
    }

    pub fn f(&self) -> u32 {
        max_faulty(self.n)
    }

    pub fn quorum(&self) -> usize {
        quorum(self.n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.t_star < 1 {
            return Err(Error::Config("t_star must be at least 1".into()));
        }
        if self.max_views < 1 {
            return Err(Error::Config("max_views must be at least 1".into()));
        }
        Ok(())
    }

    /// Lifetime of view `v`: `2^(v+1) * t_star`.
    pub fn view_timeout(&self, v: u64) -> u64 {
        view_timeout(self.t_star, v)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.n).map(NodeId)
    }
}

/// `2^6 * t_star`.
pub fn default_t0(t_star: u64) -> u64 {
    t_star << 6
}

pub fn view_timeout(t_star: u64, v: u64) -> u64 {
    let shift = (v + 1).min(62) as u32;
    t_star.saturating_mul(1u64 << shift)
}

pub fn max_faulty(n: u32) -> u32 {
    n.saturating_sub(1) / 3
}

pub fn quorum(n: u32) -> usize {
    2 * max_faulty(n) as usize + 1
}

/// Speaker for height `h` and view `v`: `(h - v) mod n`, Euclidean.
pub fn select_speaker(h: u64, v: u64, n: u32) -> NodeId {
    let n = n as i128;
    NodeId((h as i128 - v as i128).rem_euclid(n) as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fault_bound_and_quorum() {
        assert_eq!(max_faulty(7), 2);
        assert_eq!(max_faulty(1), 0);
        assert_eq!(max_faulty(10), 3);
        assert_eq!(quorum(7), 5);
        assert_eq!(quorum(4), 3);
        assert_eq!(quorum(1), 1);
    }

    #[test]
    fn speaker_examples() {
        assert_eq!(select_speaker(0, 0, 7), NodeId(0));
        assert_eq!(select_speaker(10, 1, 7), NodeId(2));
        // brute force: k with (k + v - h) = 0 mod n
        let oracle = (0..7u32).find(|k| (*k as i64 + 5 - 3).rem_euclid(7) == 0).unwrap();
        assert_eq!(oracle, 5);
        assert_eq!(select_speaker(3, 5, 7), NodeId(oracle));
    }

    #[test]
    fn sign_and_verify() {
        let a = Actor::Node(NodeId(1));
        let b = Actor::Node(NodeId(2));
        let content = b"block";
        assert_eq!(sign(a, content), sign(a, content));
        assert_ne!(sign(a, content), sign(b, content));
        let sig = sign(a, content);
        assert!(verify(&sig, content, a));
        assert!(!verify(&sig, b"blocK", a));
        assert!(!verify(&sig, content, b));
    }

    #[test]
    fn canonical_encoding_layout() {
        let bytes = canonical_bytes(
            MsgKind::Prepare,
            View::new(3, 1),
            Some(&BlockId::new(3, "ab")),
            Actor::Node(NodeId(4)),
            9,
        );
        let mut expected = Vec::new();
        expected.extend_from_slice(&7u32.to_be_bytes());
        expected.extend_from_slice(b"PREPARE");
        expected.extend_from_slice(&8u32.to_be_bytes());
        expected.extend_from_slice(&3u64.to_be_bytes());
        expected.extend_from_slice(&8u32.to_be_bytes());
        expected.extend_from_slice(&1u64.to_be_bytes());
        expected.extend_from_slice(&2u32.to_be_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&2u32.to_be_bytes());
        expected.extend_from_slice(b"n4");
        expected.extend_from_slice(&8u32.to_be_bytes());
        expected.extend_from_slice(&9u64.to_be_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn well_formedness() {
        let n0 = Actor::Node(NodeId(0));
        let ok = Msg::signed(MsgKind::Prepare, View::new(2, 0), Some(BlockId::new(2, "x")), n0, 0);
        assert!(ok.check_well_formed().is_ok());
        let wrong_height =
            Msg::signed(MsgKind::Prepare, View::new(2, 0), Some(BlockId::new(1, "x")), n0, 0);
        assert!(wrong_height.check_well_formed().is_err());
        let mut tampered = ok.clone();
        tampered.timestamp = 1;
        assert!(tampered.check_well_formed().is_err());
        let vc = Msg::signed(MsgKind::ViewChange, View::new(2, 1), None, n0, 0);
        assert!(vc.check_well_formed().is_ok());
    }

    #[test]
    fn timeouts_double() {
        assert_eq!(view_timeout(15, 0), 30);
        assert_eq!(view_timeout(15, 1), 60);
        assert_eq!(view_timeout(15, 2), 120);
        assert_eq!(default_t0(15), 960);
    }

    proptest! {
        #[test]
        fn exact_committee_sizes(n in 1u32..10_000) {
            prop_assert!(n > 3 * max_faulty(n));
            prop_assert_eq!(n == 3 * max_faulty(n) + 1, n % 3 == 1);
            if n % 3 == 1 {
                prop_assert!(quorum(n) + max_faulty(n) as usize <= n as usize);
            }
        }

        #[test]
        fn rotation_covers_committee(h in 0u64..1_000, n in 1u32..40) {
            let mut seen: Vec<u32> = (0..n as u64).map(|v| select_speaker(h, v, n).0).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn speaker_in_range(h in any::<u64>(), v in any::<u64>(), n in 1u32..100) {
            prop_assert!(select_speaker(h, v, n).0 < n);
        }
    }
}
