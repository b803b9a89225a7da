//! Clients submit one request at a time and accept a result once more than
//! `f` replicas sent matching replies.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Actor, BlockId, ClientId, Msg, MsgKind, NodeId, View};

pub const DEFAULT_RETRANS_AFTER: u64 = 200;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accepted {
    pub timestamp: u64,
    pub view: View,
    pub block: BlockId,
    pub at: u64,
}

#[derive(Debug, Clone)]
pub struct Client {
    id: ClientId,
    f: u32,
    outstanding: Option<Msg>,
    retransmitted: bool,
    replies: BTreeMap<(View, BlockId), BTreeMap<NodeId, Msg>>,
    accepted: Vec<Accepted>,
}

impl Client {
    pub fn new(id: ClientId, f: u32) -> Self {
        Client {
            id,
            f,
            outstanding: None,
            retransmitted: false,
            replies: BTreeMap::new(),
            accepted: Vec::new(),
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn outstanding(&self) -> Option<&Msg> {
        self.outstanding.as_ref()
    }

    pub fn retransmitted(&self) -> bool {
        self.retransmitted
    }

    pub fn accepted(&self) -> &[Accepted] {
        &self.accepted
    }

    /// Builds the signed request for time `now`.
    pub fn submit(&mut self, now: u64) -> Result<Msg> {
        if self.outstanding.is_some() {
            return Err(Error::OutstandingRequest(self.id));
        }
        let msg = Msg::signed(MsgKind::Request, View::default(), None, Actor::Client(self.id), now);
        self.outstanding = Some(msg.clone());
        self.retransmitted = false;
        self.replies.clear();
        Ok(msg)
    }

    /// The identical request again, if still unanswered.
    pub fn retransmit(&mut self) -> Option<Msg> {
        let msg = self.outstanding.clone()?;
        self.retransmitted = true;
        Some(msg)
    }

    /// Records a reply; returns the accepted result once `f + 1` replicas
    /// agree on view and block.
    pub fn on_reply(&mut self, reply: &Msg, now: u64) -> Option<Accepted> {
        let request = self.outstanding.as_ref()?;
        let (Some(node), Some(block)) = (reply.signer_node(), reply.block.clone()) else {
            return None;
        };
        if reply.kind != MsgKind::Reply || reply.timestamp != request.timestamp || !reply.verify() {
            return None;
        }
        let pool = self.replies.entry((reply.view, block.clone())).or_default();
        pool.entry(node).or_insert_with(|| reply.clone());
        if pool.len() <= self.f as usize {
            return None;
        }
        let accepted = Accepted {
            timestamp: request.timestamp,
            view: reply.view,
            block,
            at: now,
        };
        self.outstanding = None;
        self.replies.clear();
        self.accepted.push(accepted.clone());
        Some(accepted)
    }
}
