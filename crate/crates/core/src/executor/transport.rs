//! Worker-to-worker particle transport with non-blocking semantics.

use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender, TryRecvError};

use super::messages::ParticleTransfer;

/// Handle of an in-flight send; complete once the receiver can observe the message.
#[derive(Debug, Clone, Copy)]
pub struct SendRequest {
    ready_at: Instant,
}

impl SendRequest {
    pub fn test(&self) -> bool {
        Instant::now() >= self.ready_at
    }

    pub fn wait(&self) {
        let now = Instant::now();
        if now < self.ready_at {
            std::thread::sleep(self.ready_at - now);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("no peer with rank {0}")]
    UnknownPeer(usize),
    #[error("peer {0} disconnected")]
    Disconnected(usize),
}

/// Non-blocking point-to-point transfers between workers.
pub trait PeerTransport: Send {
    fn rank(&self) -> usize;

    /// Starts sending `transfer` to `transfer.destination`; never blocks.
    fn isend(&mut self, transfer: ParticleTransfer) -> Result<SendRequest, TransportError>;

    /// Returns one completed inbound transfer, if any; never blocks.
    fn try_recv(&mut self) -> Result<Option<ParticleTransfer>, TransportError>;
}

struct InFlight {
    ready_at: Instant,
    transfer: ParticleTransfer,
}

/// In-process transport over unbounded channels. An optional latency delays
/// completion of every transfer, emulating a slow interconnect.
pub struct ChannelTransport {
    rank: usize,
    peers: Vec<Sender<InFlight>>,
    inbox: Receiver<InFlight>,
    pending: Vec<InFlight>,
    latency: Duration,
}

/// Fully connected transports for `workers` ranks.
pub fn channel_mesh(workers: usize, latency: Duration) -> Vec<ChannelTransport> {
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..workers).map(|_| unbounded()).unzip();
    receivers
        .into_iter()
        .enumerate()
        .map(|(rank, inbox)| ChannelTransport {
            rank,
            peers: senders.clone(),
            inbox,
            pending: Vec::new(),
            latency,
        })
        .collect()
}

impl PeerTransport for ChannelTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn isend(&mut self, transfer: ParticleTransfer) -> Result<SendRequest, TransportError> {
        let dest = transfer.destination;
        let peer = self.peers.get(dest).ok_or(TransportError::UnknownPeer(dest))?;
        let ready_at = Instant::now() + self.latency;
        peer.send(InFlight { ready_at, transfer })
            .map_err(|_| TransportError::Disconnected(dest))?;
        Ok(SendRequest { ready_at })
    }

    fn try_recv(&mut self) -> Result<Option<ParticleTransfer>, TransportError> {
        loop {
            match self.inbox.try_recv() {
                Ok(msg) => self.pending.push(msg),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return Err(TransportError::Disconnected(self.rank)),
            }
        }
        let now = Instant::now();
        let ready = self
            .pending
            .iter()
            .enumerate()
            .filter(|(_, m)| m.ready_at <= now)
            .min_by_key(|(_, m)| m.ready_at)
            .map(|(i, _)| i);
        Ok(ready.map(|i| self.pending.remove(i).transfer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transfer(source: usize, destination: usize) -> ParticleTransfer {
        ParticleTransfer {
            observation: 1,
            lineage: 0,
            new_lineage: 0,
            source,
            destination,
            state: vec![7; 4],
        }
    }

    #[test]
    fn delivers_in_order_without_latency() {
        let mut mesh = channel_mesh(2, Duration::ZERO);
        let req = mesh[0].isend(transfer(0, 1)).unwrap();
        assert!(req.test());
        let got = mesh[1].try_recv().unwrap().unwrap();
        assert_eq!(got.source, 0);
        assert!(mesh[1].try_recv().unwrap().is_none());
        assert!(mesh[0].isend(transfer(0, 5)).is_err());
    }

    #[test]
    fn latency_defers_completion() {
        let mut mesh = channel_mesh(2, Duration::from_millis(30));
        let req = mesh[1].isend(transfer(1, 0)).unwrap();
        assert!(!req.test());
        assert!(mesh[0].try_recv().unwrap().is_none());
        req.wait();
        assert!(req.test());
        assert!(mesh[0].try_recv().unwrap().is_some());
    }
}
