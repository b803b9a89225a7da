//! Deterministic simulation of a two-phase BFT consensus protocol, its
//! three-phase variant, a scriptable Byzantine adversary and a checker that
//! reports forks and stalls from a run's trace.

pub mod adversary;
pub mod checker;
pub mod cli;
pub mod client;
pub mod error;
pub mod model;
pub mod netsim;
pub mod replica;
pub mod scenario;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
pub use model::{Actor, BlockId, ClientId, Config, Msg, MsgKind, NodeId, Protocol, View};
pub use scenario::Scenario;
pub use sim::{run_scenario, RunOutcome, Simulation};
pub use trace::Trace;
