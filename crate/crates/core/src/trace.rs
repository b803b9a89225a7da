//! Ordered event log of a run.
//!
//! Rendered one event per line, tab separated:
//! `time <TAB> seq <TAB> actor <TAB> action <TAB> detail`. The `seq` column is
//! the line's position in the log.

use std::collections::BTreeSet;
use std::fmt;

use crate::model::{Actor, BlockId, Msg, NodeId, Protocol};
use crate::replica::Phase;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Send { msg: Msg, to: Vec<Actor> },
    Deliver { msg: Msg, from: Actor },
    Drop { msg: Msg, to: Actor, reason: String },
    Delay { msg: Msg, to: Actor, until: u64 },
    TimerArm { h: u64, v: u64, duration: u64 },
    TimerFire { h: u64, v: u64, duration: u64 },
    StaleTimer { h: u64, v: u64 },
    State { h: u64, v: u64, phase: Phase, lock: Option<String> },
    Publish { block: BlockId, v: u64 },
    /// A replica holds quorums for two or more conflicting blocks.
    ForkSuspect { h: u64, blocks: Vec<String> },
    Note(String),
    Adv(String),
}

impl Record {
    pub fn action(&self) -> &'static str {
        match self {
            Record::Send { .. } => "SEND",
            Record::Deliver { .. } => "DELIVER",
            Record::Drop { .. } => "DROP",
            Record::Delay { .. } => "DELAY",
            Record::TimerArm { .. } | Record::TimerFire { .. } => "TIMER",
            Record::StaleTimer { .. } => "STALE-TIMER",
            Record::State { .. } => "STATE",
            Record::Publish { .. } => "PUBLISH",
            Record::ForkSuspect { .. } => "FORK?",
            Record::Note(_) => "NOTE",
            Record::Adv(_) => "ADV",
        }
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLine {
    pub time: u64,
    pub seq: u64,
    /// `None` for the network itself.
    pub actor: Option<Actor>,
    pub record: Record,
}

impl fmt::Display for TraceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let actor = self
            .actor
            .map(|a| a.to_string())
            .unwrap_or_else(|| "net".to_string());
        write!(
            f,
            "{}\t{}\t{}\t{}\t",
            self.time,
            self.seq,
            actor,
            self.record.action()
        )?;
        match &self.record {
            Record::Send { msg, to } => write!(f, "{msg} to={}", join(to)),
            Record::Deliver { msg, from } => write!(f, "{msg} from={from}"),
            Record::Drop { msg, to, reason } => write!(f, "{msg} to={to} reason={reason}"),
            Record::Delay { msg, to, until } => write!(f, "{msg} to={to} until={until}"),
            Record::TimerArm { h, v, duration } => {
                write!(f, "arm h={h} v={v} dur={duration} deadline={}", self.time + duration)
            }
            Record::TimerFire { h, v, duration } => write!(f, "fire h={h} v={v} dur={duration}"),
            Record::StaleTimer { h, v } => write!(f, "stale-timer h={h} v={v}"),
            Record::State { h, v, phase, lock } => {
                let node = self.actor.and_then(Actor::node).map(|n| n.0).unwrap_or(0);
                write!(
                    f,
                    "node={node} h={h} v={v} phase={phase} lock={}",
                    lock.as_deref().unwrap_or("-")
                )
            }
            Record::Publish { block, v } => write!(f, "h={} v={v} block={}", block.height, block.tag),
            Record::ForkSuspect { h, blocks } => write!(f, "h={h} blocks={}", blocks.join(",")),
            Record::Note(text) | Record::Adv(text) => f.write_str(text),
        }
    }
}

/// Facts about the run needed to interpret its log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceMeta {
    pub n: u32,
    pub protocol: Protocol,
    pub t_star: u64,
    pub controlled: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub meta: TraceMeta,
    lines: Vec<TraceLine>,
}

impl Trace {
    pub fn new(meta: TraceMeta) -> Self {
        Trace {
            meta,
            lines: Vec::new(),
        }
    }

    pub fn push(&mut self, time: u64, actor: Option<Actor>, record: Record) {
        let seq = self.lines.len() as u64;
        self.lines.push(TraceLine {
            time,
            seq,
            actor,
            record,
        });
    }

    pub fn lines(&self) -> &[TraceLine] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn is_honest(&self, node: NodeId) -> bool {
        node.0 < self.meta.n && !self.meta.controlled.contains(&node)
    }

    pub fn honest_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.meta.n)
            .map(NodeId)
            .filter(move |id| self.is_honest(*id))
    }

    /// Every message put on the wire, with the line index of its first send.
    pub fn sent_messages(&self) -> impl Iterator<Item = (usize, &Msg)> {
        self.lines
            .iter()
            .enumerate()
            .filter_map(|(i, line)| match &line.record {
                Record::Send { msg, .. } => Some((i, msg)),
                _ => None,
            })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}
