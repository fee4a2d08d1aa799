//! Outbound OSC: one datagram per parameter command, fire-and-forget.

use std::net::{SocketAddr, UdpSocket};

use log::warn;
use rosc::{OscMessage, OscPacket, OscType};

use crate::audio::ParameterCommand;
use crate::error::{Error, Result};

pub fn osc_address(cmd: &ParameterCommand) -> String {
    format!("/vivo/param/{}/{}", cmd.target.unit, cmd.target.param)
}

pub fn encode_command(cmd: &ParameterCommand) -> Vec<u8> {
    let packet = OscPacket::Message(OscMessage {
        addr: osc_address(cmd),
        args: vec![OscType::Float(cmd.value as f32)],
    });
    rosc::encoder::encode(&packet).expect("address and float always encode")
}

pub struct OscEmitter {
    socket: UdpSocket,
    target: SocketAddr,
    sent: u64,
    failed: u64,
}

impl OscEmitter {
    pub fn new(target: SocketAddr) -> Result<Self> {
        let bind: SocketAddr = if target.is_ipv4() {
            ([0, 0, 0, 0], 0).into()
        } else {
            (std::net::Ipv6Addr::UNSPECIFIED, 0).into()
        };
        let socket = UdpSocket::bind(bind).map_err(|e| Error::io("binding OSC socket", e))?;
        socket
            .set_nonblocking(true)
            .map_err(|e| Error::io("configuring OSC socket", e))?;
        Ok(Self {
            socket,
            target,
            sent: 0,
            failed: 0,
        })
    }

    /// Never fails: an unreachable endpoint is logged and counted.
    pub fn emit(&mut self, cmd: &ParameterCommand) {
        match self.socket.send_to(&encode_command(cmd), self.target) {
            Ok(_) => self.sent += 1,
            Err(e) => {
                self.failed += 1;
                if self.failed.is_power_of_two() {
                    warn!("OSC send to {} failed ({} so far): {e}", self.target, self.failed);
                }
            }
        }
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn failed(&self) -> u64 {
        self.failed
    }
}
