//! Distributed min-consensus on boolean flags.
//!
//! Each round every agent sends its flag to its neighbours and replaces it by
//! the minimum over its closed neighbourhood. After as many rounds as there
//! are agents, every agent of a connected graph holds the global minimum.

use std::collections::{BTreeMap, BTreeSet};

use lexinet_core::AgentId;
use rayon::prelude::*;

use crate::transport::{by_sender, Payload, RoundMessage, Transport, TransportError};

/// One update: the minimum of the own flag and the neighbours' flags.
pub fn min_consensus_round(own: bool, neighbors: &[bool]) -> bool {
    own && neighbors.iter().all(|&f| f)
}

/// Runs `rounds` synchronous rounds over `transport`, using round ids
/// starting at `first_round`. Returns the final flag of every agent.
pub fn min_consensus_over<T: Transport + ?Sized>(
    transport: &T,
    adjacency: &BTreeMap<AgentId, BTreeSet<AgentId>>,
    flags: &BTreeMap<AgentId, bool>,
    rounds: usize,
    first_round: u64,
) -> Result<BTreeMap<AgentId, bool>, TransportError> {
    let mut current = flags.clone();
    for r in 0..rounds {
        let round = first_round + r as u64;
        adjacency.par_iter().try_for_each(|(&i, nbrs)| {
            nbrs.iter().try_for_each(|&j| {
                transport.post(RoundMessage {
                    from: i,
                    to: j,
                    round,
                    payload: Payload::Flag(current[&i]),
                })
            })
        })?;
        current = adjacency
            .par_iter()
            .map(|(&i, nbrs)| {
                let inbox = by_sender(i, round, transport.collect(i, round)?, nbrs.iter().copied())?;
                let received: Vec<bool> = inbox
                    .values()
                    .map(|p| match p {
                        Payload::Flag(f) => Ok(*f),
                        Payload::Coupling(_) => Err(TransportError::Failure(format!(
                            "agent {i} got a coupling payload during consensus round {round}"
                        ))),
                    })
                    .collect::<Result<_, _>>()?;
                Ok((i, min_consensus_round(current[&i], &received)))
            })
            .collect::<Result<BTreeMap<_, _>, TransportError>>()?;
    }
    Ok(current)
}

/// Agreed stop decision: true iff every agent ends the consensus holding 1.
pub fn min_consensus_terminate(final_flags: &BTreeMap<AgentId, bool>) -> bool {
    final_flags.values().all(|&f| f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::MailboxBus;

    fn path(n: usize) -> BTreeMap<AgentId, BTreeSet<AgentId>> {
        (1..=n)
            .map(|i| {
                let mut s = BTreeSet::new();
                if i > 1 {
                    s.insert(i - 1);
                }
                if i < n {
                    s.insert(i + 1);
                }
                (i, s)
            })
            .collect()
    }

    #[test]
    fn all_ones_stop() {
        let bus = MailboxBus::new();
        let flags = (1..=4).map(|i| (i, true)).collect();
        let out = min_consensus_over(&bus, &path(4), &flags, 4, 0).unwrap();
        assert!(out.values().all(|&f| f));
        assert!(min_consensus_terminate(&out));
    }

    #[test]
    fn zero_propagates_along_path() {
        let bus = MailboxBus::new();
        let flags = [(1, true), (2, false), (3, true)].into_iter().collect();
        let out = min_consensus_over(&bus, &path(3), &flags, 3, 0).unwrap();
        assert!(out.values().all(|&f| !f));
        assert_eq!(bus.pending(), 0);
    }

    #[test]
    fn round_rule() {
        assert!(min_consensus_round(true, &[true, true]));
        assert!(!min_consensus_round(true, &[true, false]));
        assert!(!min_consensus_round(false, &[]));
    }
}
