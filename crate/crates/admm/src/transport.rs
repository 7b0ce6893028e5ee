//! Message passing between agents in synchronous rounds.

use std::collections::BTreeMap;
use std::sync::Mutex;

use lexinet_core::AgentId;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// U_ij x_i − λ_ij / ρ for the coupling with the receiver.
    Coupling(Vec<f64>),
    /// Termination flag during min-consensus.
    Flag(bool),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub from: AgentId,
    pub to: AgentId,
    pub round: u64,
    pub payload: Payload,
}

#[derive(Debug, Error, PartialEq)]
pub enum TransportError {
    #[error("agent {to} expected a round-{round} message from {from} but none arrived")]
    MissingMessage { to: AgentId, from: AgentId, round: u64 },
    #[error("agent {to} received an unexpected message from {from} in round {round}")]
    Unexpected { to: AgentId, from: AgentId, round: u64 },
    #[error("transport failure: {0}")]
    Failure(String),
}

/// Delivery contract: a message posted in round `r` is returned by exactly one
/// `collect(to, r)` call made after every sender of round `r` has posted.
pub trait Transport: Sync {
    fn post(&self, msg: RoundMessage) -> Result<(), TransportError>;

    /// All messages addressed to `to` in `round`, sorted by sender.
    fn collect(&self, to: AgentId, round: u64) -> Result<Vec<RoundMessage>, TransportError>;
}

/// In-process exactly-once, in-order bus.
#[derive(Debug, Default)]
pub struct MailboxBus {
    boxes: Mutex<BTreeMap<(AgentId, u64), Vec<RoundMessage>>>,
}

impl MailboxBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Messages posted but not yet collected.
    pub fn pending(&self) -> usize {
        self.boxes.lock().expect("mailbox poisoned").values().map(Vec::len).sum()
    }
}

impl Transport for MailboxBus {
    fn post(&self, msg: RoundMessage) -> Result<(), TransportError> {
        let mut boxes = self
            .boxes
            .lock()
            .map_err(|_| TransportError::Failure("mailbox poisoned".into()))?;
        boxes.entry((msg.to, msg.round)).or_default().push(msg);
        Ok(())
    }

    fn collect(&self, to: AgentId, round: u64) -> Result<Vec<RoundMessage>, TransportError> {
        let mut boxes = self
            .boxes
            .lock()
            .map_err(|_| TransportError::Failure("mailbox poisoned".into()))?;
        let mut msgs = boxes.remove(&(to, round)).unwrap_or_default();
        msgs.sort_by_key(|m| m.from);
        Ok(msgs)
    }
}

/// Indexes one round's inbox by sender and checks it against the expected
/// neighbour set.
pub(crate) fn by_sender(
    to: AgentId,
    round: u64,
    msgs: Vec<RoundMessage>,
    expected: impl IntoIterator<Item = AgentId>,
) -> Result<BTreeMap<AgentId, Payload>, TransportError> {
    let mut map = BTreeMap::new();
    for m in msgs {
        map.insert(m.from, m.payload);
    }
    let expected: Vec<AgentId> = expected.into_iter().collect();
    for &from in &expected {
        if !map.contains_key(&from) {
            return Err(TransportError::MissingMessage { to, from, round });
        }
    }
    if let Some(&from) = map.keys().find(|f| !expected.contains(f)) {
        return Err(TransportError::Unexpected { to, from, round });
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delivers_once_sorted_by_sender() {
        let bus = MailboxBus::new();
        for from in [3, 1, 2] {
            bus.post(RoundMessage {
                from,
                to: 4,
                round: 7,
                payload: Payload::Flag(true),
            })
            .unwrap();
        }
        let got = bus.collect(4, 7).unwrap();
        assert_eq!(got.iter().map(|m| m.from).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(bus.collect(4, 7).unwrap().is_empty());
        assert_eq!(bus.pending(), 0);
    }

    #[test]
    fn missing_sender_is_reported() {
        let msgs = vec![RoundMessage {
            from: 1,
            to: 2,
            round: 0,
            payload: Payload::Flag(false),
        }];
        assert_eq!(
            by_sender(2, 0, msgs, [1, 3]),
            Err(TransportError::MissingMessage { to: 2, from: 3, round: 0 })
        );
    }
}
