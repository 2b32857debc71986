use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{channel, Sender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::wire::{read_message, write_message};
use super::{Message, Transport};
use crate::error::{Error, Result};

/// Full-mesh TCP transport, one socket per peer.
///
/// Rendezvous: every rank listens on its roster address; rank `i` dials
/// every lower rank and introduces itself, and accepts connections from
/// every higher rank. Rank 0 then collects each peer's roster and confirms
/// that all agree before any training traffic flows. Outgoing frames go
/// through a writer thread per peer so `send` never blocks on a slow reader.
pub struct TcpTransport {
    rank: usize,
    world: usize,
    writers: Vec<Option<Sender<Vec<u8>>>>,
    readers: Vec<Option<BufReader<TcpStream>>>,
    threads: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for TcpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TcpTransport")
            .field("rank", &self.rank)
            .field("world", &self.world)
            .finish()
    }
}

fn terr(msg: impl Into<String>) -> Error {
    Error::Transport(msg.into())
}

fn dial(addr: &str, deadline: Instant) -> Result<TcpStream> {
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(terr(format!("could not reach {addr}: {e}")))
            }
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn accept(listener: &TcpListener, deadline: Instant) -> Result<TcpStream> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                return Ok(s);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(terr("timed out waiting for peers to connect"));
                }
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn parse_hello(msg: Message, world: usize) -> Result<usize> {
    let Message::Control(text) = msg else {
        return Err(terr("expected a hello control message"));
    };
    let parts: Vec<&str> = text.split_whitespace().collect();
    match parts.as_slice() {
        ["hello", r, k] => {
            let r: usize = r.parse().map_err(|_| terr(format!("bad hello '{text}'")))?;
            let k: usize = k.parse().map_err(|_| terr(format!("bad hello '{text}'")))?;
            if k != world {
                return Err(terr(format!(
                    "peer rank {r} expects {k} workers, this rank expects {world}"
                )));
            }
            Ok(r)
        }
        _ => Err(terr(format!("bad hello '{text}'"))),
    }
}

impl TcpTransport {
    /// Joins the group described by `roster` (one `host:port` per rank) as
    /// `rank`, waiting up to `timeout` for every peer.
    pub fn establish(rank: usize, roster: &[String], timeout: Duration) -> Result<Self> {
        let world = roster.len();
        if rank >= world {
            return Err(Error::Config(format!(
                "rank {rank} outside a roster of {world} workers"
            )));
        }
        let deadline = Instant::now() + timeout;
        let listener = TcpListener::bind(&roster[rank]).map_err(|e| {
            terr(format!(
                "rank {rank} cannot listen on {}: {e}",
                roster[rank]
            ))
        })?;
        let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();

        for (peer, addr) in roster.iter().enumerate().take(rank) {
            let mut s = dial(addr, deadline)?;
            write_message(&mut s, &Message::Control(format!("hello {rank} {world}")))?;
            streams[peer] = Some(s);
        }
        for _ in rank + 1..world {
            let mut s = accept(&listener, deadline)?;
            s.set_read_timeout(Some(
                deadline
                    .saturating_duration_since(Instant::now())
                    .max(Duration::from_millis(1)),
            ))?;
            let peer = parse_hello(read_message(&mut s)?, world)?;
            s.set_read_timeout(None)?;
            if peer <= rank || peer >= world || streams[peer].is_some() {
                return Err(terr(format!("unexpected hello from rank {peer}")));
            }
            streams[peer] = Some(s);
        }

        let mut transport = Self {
            rank,
            world,
            writers: (0..world).map(|_| None).collect(),
            readers: (0..world).map(|_| None).collect(),
            threads: Vec::new(),
        };
        for (peer, s) in streams.into_iter().enumerate() {
            let Some(s) = s else { continue };
            s.set_nodelay(true)?;
            transport.readers[peer] = Some(BufReader::new(s.try_clone()?));
            let (tx, rx) = channel::<Vec<u8>>();
            transport.threads.push(thread::spawn(move || {
                let mut w = BufWriter::new(s);
                for frame in rx {
                    if w.write_all(&frame).and_then(|_| w.flush()).is_err() {
                        break;
                    }
                }
            }));
            transport.writers[peer] = Some(tx);
        }
        transport.validate_roster(roster)?;
        Ok(transport)
    }

    fn validate_roster(&mut self, roster: &[String]) -> Result<()> {
        let mine = format!("roster {}", roster.join(","));
        if self.rank == 0 {
            let mut verdict = "roster ok".to_string();
            for peer in 1..self.world {
                match self.recv(peer)? {
                    Message::Control(theirs) if theirs == mine => {}
                    Message::Control(theirs) => {
                        verdict = format!(
                            "roster mismatch: rank {peer} has '{theirs}', rank 0 has '{mine}'"
                        );
                    }
                    other => return Err(terr(format!("expected roster, got {other:?}"))),
                }
            }
            for peer in 1..self.world {
                self.send(peer, Message::Control(verdict.clone()))?;
            }
            if verdict != "roster ok" {
                return Err(terr(verdict));
            }
        } else if self.world > 1 {
            self.send(0, Message::Control(mine))?;
            match self.recv(0)? {
                Message::Control(v) if v == "roster ok" => {}
                Message::Control(v) => return Err(terr(v)),
                other => return Err(terr(format!("expected roster verdict, got {other:?}"))),
            }
        }
        Ok(())
    }
}

impl Transport for TcpTransport {
    fn kind(&self) -> &'static str {
        "tcp"
    }

    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world
    }

    fn send(&mut self, to: usize, msg: Message) -> Result<()> {
        let tx = self
            .writers
            .get(to)
            .and_then(Option::as_ref)
            .ok_or_else(|| terr(format!("rank {} has no link to rank {to}", self.rank)))?;
        tx.send(msg.encode())
            .map_err(|_| terr(format!("connection to rank {to} is closed")))
    }

    fn recv(&mut self, from: usize) -> Result<Message> {
        let rank = self.rank;
        let r = self
            .readers
            .get_mut(from)
            .and_then(Option::as_mut)
            .ok_or_else(|| terr(format!("rank {rank} has no link to rank {from}")))?;
        read_message(r).map_err(|e| terr(format!("from rank {from}: {e}")))
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        // Closing the channels lets each writer drain and exit.
        self.writers.clear();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}
