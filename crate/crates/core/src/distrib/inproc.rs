use std::sync::mpsc::{channel, Receiver, Sender};

use super::{Message, Transport};
use crate::error::{Error, Result};

/// Channel-backed transport for workers running as threads of one process.
/// Each ordered (sender, receiver) pair has its own channel.
#[derive(Debug)]
pub struct InProcessTransport {
    rank: usize,
    to: Vec<Option<Sender<Message>>>,
    from: Vec<Option<Receiver<Message>>>,
}

impl InProcessTransport {
    /// Endpoints for ranks `0..k`, in rank order.
    pub fn group(k: usize) -> Vec<InProcessTransport> {
        let mut endpoints: Vec<InProcessTransport> = (0..k)
            .map(|rank| InProcessTransport {
                rank,
                to: (0..k).map(|_| None).collect(),
                from: (0..k).map(|_| None).collect(),
            })
            .collect();
        for src in 0..k {
            for dst in 0..k {
                if src != dst {
                    let (tx, rx) = channel();
                    endpoints[src].to[dst] = Some(tx);
                    endpoints[dst].from[src] = Some(rx);
                }
            }
        }
        endpoints
    }

    fn peer_error(&self, peer: usize) -> Error {
        Error::Transport(format!(
            "rank {} has no link to rank {peer} (world size {})",
            self.rank,
            self.to.len()
        ))
    }
}

impl Transport for InProcessTransport {
    fn kind(&self) -> &'static str {
        "in_process"
    }

    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.to.len()
    }

    fn send(&mut self, to: usize, msg: Message) -> Result<()> {
        let tx = self
            .to
            .get(to)
            .and_then(Option::as_ref)
            .ok_or_else(|| self.peer_error(to))?;
        tx.send(msg)
            .map_err(|_| Error::Transport(format!("rank {to} has gone away")))
    }

    fn recv(&mut self, from: usize) -> Result<Message> {
        let rx = self
            .from
            .get(from)
            .and_then(Option::as_ref)
            .ok_or_else(|| self.peer_error(from))?;
        rx.recv()
            .map_err(|_| Error::Transport(format!("rank {from} has gone away")))
    }
}
