//! Distributed proximal ADMM for agent-decomposed convex programs.
//!
//! Agents exchange messages only with their neighbours through a
//! [`Transport`], in barrier-synchronized rounds, and stop together once a
//! min-consensus over their local stopping flags reaches one.

pub mod consensus;
pub mod solver;
pub mod transport;

pub use consensus::{min_consensus_over, min_consensus_round, min_consensus_terminate};
pub use solver::{
    dist_sol, shift_warm_start, AgentIterate, ConvergenceReport, Solution, SolverConfig, SolverError, TraceRow,
};
pub use transport::{MailboxBus, Payload, RoundMessage, Transport, TransportError};
