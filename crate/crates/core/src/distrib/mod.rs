//! Data-parallel training: point-to-point transports, ring collectives,
//! and the worker step that ties them to the mixed-precision pipeline.

mod collective;
mod inproc;
mod replica;
mod tcp;
pub mod wire;

pub use collective::{allreduce_flag_or, ring_allreduce, ring_allreduce_wire, ReduceBucket};
pub use inproc::InProcessTransport;
pub use replica::{
    throughput_probe, GradHook, Replica, StepReport, ThroughputReport, Tower, WorkerGroup,
};
pub use tcp::TcpTransport;
pub use wire::Message;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Reliable point-to-point messaging among ranks `0..world_size`. Messages
/// between a fixed (sender, receiver) pair arrive in send order.
pub trait Transport: Send {
    fn kind(&self) -> &'static str;
    fn rank(&self) -> usize;
    fn world_size(&self) -> usize;
    /// Queues `msg` for `to`; does not wait for the receiver.
    fn send(&mut self, to: usize, msg: Message) -> Result<()>;
    /// Blocks until the next message from `from` arrives.
    fn recv(&mut self, from: usize) -> Result<Message>;
}

/// How replicas combine gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupMode {
    /// One update per replica after a ring allreduce.
    #[default]
    Allreduce,
    /// One shared parameter store updated once from averaged gradients.
    Tower,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    InProcess,
    Tcp,
}
