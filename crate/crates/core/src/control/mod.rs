//! Live steering and monitoring: wire protocol, command handling, metrics
//! fan-out and outbound OSC.

pub mod handler;
pub mod osc;
pub mod protocol;
pub mod server;

pub use handler::{execute, plan, Executed, Plan};
pub use osc::{encode_command, osc_address, OscEmitter};
pub use protocol::{ControlCommand, ControlMessage, ErrorCode, Reply, ReplyError, ServerMessage, TransportAction};
pub use server::{ControlClient, ControlServer, Inbound, MetricsHub, Outbox};
