//! Synchronization protocol between the orchestrator and the network engine:
//! message types, length-prefixed JSON framing, the engine-side endpoint and
//! two interchangeable transports (in-process and child-process pipes).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::SimTime;
use crate::netsim::{ChangeAction, InfrastructureChange, NetYield, NetsimError, NetworkEngine};

pub const PROTOCOL_VERSION: u32 = 1;

/// Frames larger than this are rejected outright as malformed.
const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("handshake failure: {0}")]
    HandshakeFailure(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("frame too short")]
    FrameTooShort,
    #[error("unknown message type: {0}")]
    UnknownType(String),
    #[error("malformed message body: {0}")]
    MalformedBody(String),
    #[error("unknown msg_id: {0}")]
    UnknownMsgId(String),
    #[error("network engine error: {0}")]
    Netsim(#[from] NetsimError),
    #[error("transport i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyncKind {
    #[serde(rename = "MAX_ADVANCE")]
    MaxAdvance,
    #[serde(rename = "WAITING")]
    Waiting,
    #[serde(rename = "TRANSMISSION_ERROR")]
    TransmissionError,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitialMessage {
    pub until: SimTime,
    pub waiting_period: SimTime,
    pub protocol_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfoMessage {
    pub msg_id: String,
    pub sender: String,
    pub receiver: String,
    pub sim_time: SimTime,
    pub max_advance: SimTime,
    pub size_bytes: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncMessage {
    pub kind: SyncKind,
    pub sim_time: SimTime,
    pub msg_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfrastructureMessage {
    pub action: ChangeAction,
    pub node: String,
    pub at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryMessage {
    pub msg_id: String,
    pub sender: String,
    pub receiver: String,
    pub delivered_at: SimTime,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolMessage {
    Initial(InitialMessage),
    Info(InfoMessage),
    Sync(SyncMessage),
    Infra(InfrastructureMessage),
    Delivery(DeliveryMessage),
}

impl ProtocolMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            ProtocolMessage::Initial(_) => "INITIAL",
            ProtocolMessage::Info(_) => "INFO",
            ProtocolMessage::Sync(_) => "SYNC",
            ProtocolMessage::Infra(_) => "INFRA",
            ProtocolMessage::Delivery(_) => "DELIVERY",
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type")]
enum WireMsg {
    #[serde(rename = "INITIAL")]
    Initial {
        until_us: u64,
        waiting_period_us: u64,
        protocol_version: u32,
    },
    #[serde(rename = "INFO")]
    Info {
        msg_id: String,
        sender: String,
        receiver: String,
        sim_time_us: u64,
        max_advance_us: u64,
        size_bytes: u64,
        payload_b64: String,
    },
    #[serde(rename = "SYNC")]
    Sync {
        kind: SyncKind,
        sim_time_us: u64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        msg_id: Option<String>,
    },
    #[serde(rename = "INFRA")]
    Infra {
        action: ChangeAction,
        node: String,
        at_us: u64,
    },
    #[serde(rename = "DELIVERY")]
    Delivery {
        msg_id: String,
        sender: String,
        receiver: String,
        delivered_at_us: u64,
        payload_b64: String,
    },
}

impl From<&ProtocolMessage> for WireMsg {
    fn from(msg: &ProtocolMessage) -> WireMsg {
        match msg {
            ProtocolMessage::Initial(m) => WireMsg::Initial {
                until_us: m.until.as_micros(),
                waiting_period_us: m.waiting_period.as_micros(),
                protocol_version: m.protocol_version,
            },
            ProtocolMessage::Info(m) => WireMsg::Info {
                msg_id: m.msg_id.clone(),
                sender: m.sender.clone(),
                receiver: m.receiver.clone(),
                sim_time_us: m.sim_time.as_micros(),
                max_advance_us: m.max_advance.as_micros(),
                size_bytes: m.size_bytes,
                payload_b64: BASE64.encode(&m.payload),
            },
            ProtocolMessage::Sync(m) => WireMsg::Sync {
                kind: m.kind,
                sim_time_us: m.sim_time.as_micros(),
                msg_id: m.msg_id.clone(),
            },
            ProtocolMessage::Infra(m) => WireMsg::Infra {
                action: m.action,
                node: m.node.clone(),
                at_us: m.at.as_micros(),
            },
            ProtocolMessage::Delivery(m) => WireMsg::Delivery {
                msg_id: m.msg_id.clone(),
                sender: m.sender.clone(),
                receiver: m.receiver.clone(),
                delivered_at_us: m.delivered_at.as_micros(),
                payload_b64: BASE64.encode(&m.payload),
            },
        }
    }
}

impl TryFrom<WireMsg> for ProtocolMessage {
    type Error = BridgeError;

    fn try_from(wire: WireMsg) -> Result<ProtocolMessage, BridgeError> {
        Ok(match wire {
            WireMsg::Initial {
                until_us,
                waiting_period_us,
                protocol_version,
            } => ProtocolMessage::Initial(InitialMessage {
                until: SimTime::from_micros(until_us),
                waiting_period: SimTime::from_micros(waiting_period_us),
                protocol_version,
            }),
            WireMsg::Info {
                msg_id,
                sender,
                receiver,
                sim_time_us,
                max_advance_us,
                size_bytes,
                payload_b64,
            } => ProtocolMessage::Info(InfoMessage {
                msg_id,
                sender,
                receiver,
                sim_time: SimTime::from_micros(sim_time_us),
                max_advance: SimTime::from_micros(max_advance_us),
                size_bytes,
                payload: BASE64
                    .decode(payload_b64.as_bytes())
                    .map_err(|e| BridgeError::MalformedBody(format!("payload_b64: {e}")))?,
            }),
            WireMsg::Sync {
                kind,
                sim_time_us,
                msg_id,
            } => ProtocolMessage::Sync(SyncMessage {
                kind,
                sim_time: SimTime::from_micros(sim_time_us),
                msg_id,
            }),
            WireMsg::Infra { action, node, at_us } => {
                ProtocolMessage::Infra(InfrastructureMessage {
                    action,
                    node,
                    at: SimTime::from_micros(at_us),
                })
            }
            WireMsg::Delivery {
                msg_id,
                sender,
                receiver,
                delivered_at_us,
                payload_b64,
            } => ProtocolMessage::Delivery(DeliveryMessage {
                msg_id,
                sender,
                receiver,
                delivered_at: SimTime::from_micros(delivered_at_us),
                payload: BASE64
                    .decode(payload_b64.as_bytes())
                    .map_err(|e| BridgeError::MalformedBody(format!("payload_b64: {e}")))?,
            }),
        })
    }
}

const KNOWN_TYPES: [&str; 5] = ["INITIAL", "INFO", "SYNC", "INFRA", "DELIVERY"];

/// Encodes a message as a 4-byte big-endian length prefix followed by the
/// UTF-8 JSON body.
pub fn encode_frame(msg: &ProtocolMessage) -> Vec<u8> {
    let body = serde_json::to_vec(&WireMsg::from(msg)).expect("protocol message serializes");
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    frame
}

/// Decodes one frame from the front of the buffer, returning the message and
/// the number of bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(ProtocolMessage, usize), BridgeError> {
    if buf.len() < 4 {
        return Err(BridgeError::FrameTooShort);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(BridgeError::MalformedBody(format!(
            "frame length {len} exceeds limit"
        )));
    }
    if buf.len() < 4 + len {
        return Err(BridgeError::FrameTooShort);
    }
    let body = &buf[4..4 + len];
    let msg = parse_body(body)?;
    Ok((msg, 4 + len))
}

fn parse_body(body: &[u8]) -> Result<ProtocolMessage, BridgeError> {
    let value: serde_json::Value = serde_json::from_slice(body)
        .map_err(|e| BridgeError::MalformedBody(e.to_string()))?;
    let type_tag = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| BridgeError::MalformedBody("missing type tag".into()))?;
    if !KNOWN_TYPES.contains(&type_tag) {
        return Err(BridgeError::UnknownType(type_tag.to_string()));
    }
    let wire: WireMsg =
        serde_json::from_value(value).map_err(|e| BridgeError::MalformedBody(e.to_string()))?;
    ProtocolMessage::try_from(wire)
}

pub fn write_frame(w: &mut impl Write, msg: &ProtocolMessage) -> Result<(), BridgeError> {
    w.write_all(&encode_frame(msg))?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; Ok(None) signals a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<ProtocolMessage>, BridgeError> {
    let mut prefix = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut prefix[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(BridgeError::FrameTooShort);
        }
        filled += n;
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(BridgeError::MalformedBody(format!(
            "frame length {len} exceeds limit"
        )));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)
        .map_err(|_| BridgeError::FrameTooShort)?;
    Ok(Some(parse_body(&body)?))
}

/// Engine-side protocol endpoint: owns the network engine and answers every
/// orchestrator message with exactly one reply.
pub struct NetsimEndpoint {
    engine: NetworkEngine,
    payloads: BTreeMap<String, Vec<u8>>,
    bound: SimTime,
    started: bool,
}

impl NetsimEndpoint {
    pub fn new(engine: NetworkEngine) -> Self {
        NetsimEndpoint {
            engine,
            payloads: BTreeMap::new(),
            bound: SimTime::ZERO,
            started: false,
        }
    }

    pub fn handle(&mut self, msg: ProtocolMessage) -> Result<ProtocolMessage, BridgeError> {
        match msg {
            ProtocolMessage::Initial(init) => {
                if init.protocol_version != PROTOCOL_VERSION {
                    return Err(BridgeError::HandshakeFailure(format!(
                        "unsupported protocol version {}",
                        init.protocol_version
                    )));
                }
                if self.started {
                    return Err(BridgeError::ProtocolViolation("duplicate INITIAL".into()));
                }
                self.started = true;
                Ok(ProtocolMessage::Sync(SyncMessage {
                    kind: SyncKind::Waiting,
                    sim_time: self.engine.clock(),
                    msg_id: None,
                }))
            }
            ProtocolMessage::Info(info) => {
                self.ensure_started()?;
                self.payloads.insert(info.msg_id.clone(), info.payload.clone());
                self.engine.send_packet(
                    &info.msg_id,
                    &info.sender,
                    &info.receiver,
                    info.payload.len() as u64,
                    info.sim_time,
                )?;
                self.bound = info.max_advance;
                self.advance()
            }
            ProtocolMessage::Sync(sync) => {
                self.ensure_started()?;
                if sync.kind != SyncKind::Waiting {
                    return Err(BridgeError::ProtocolViolation(format!(
                        "unexpected sync kind {:?} from orchestrator",
                        sync.kind
                    )));
                }
                self.bound = sync.sim_time;
                self.advance()
            }
            ProtocolMessage::Infra(infra) => {
                self.ensure_started()?;
                self.engine.apply_infrastructure_change(&InfrastructureChange {
                    action: infra.action,
                    node: infra.node,
                    at: infra.at,
                })?;
                Ok(ProtocolMessage::Sync(SyncMessage {
                    kind: SyncKind::Waiting,
                    sim_time: self.engine.clock(),
                    msg_id: None,
                }))
            }
            ProtocolMessage::Delivery(_) => Err(BridgeError::ProtocolViolation(
                "DELIVERY cannot originate from the orchestrator".into(),
            )),
        }
    }

    fn ensure_started(&self) -> Result<(), BridgeError> {
        if self.started {
            Ok(())
        } else {
            Err(BridgeError::HandshakeFailure("INITIAL not received".into()))
        }
    }

    fn advance(&mut self) -> Result<ProtocolMessage, BridgeError> {
        match self.engine.run_until(self.bound)? {
            NetYield::Delivered(rec) => {
                let payload = self
                    .payloads
                    .remove(&rec.msg_id)
                    .ok_or_else(|| BridgeError::UnknownMsgId(rec.msg_id.clone()))?;
                Ok(ProtocolMessage::Delivery(DeliveryMessage {
                    msg_id: rec.msg_id,
                    sender: rec.src_sim,
                    receiver: rec.dst_sim,
                    delivered_at: rec.delivered_at,
                    payload,
                }))
            }
            NetYield::Lost(rec) => {
                self.payloads.remove(&rec.msg_id);
                Ok(ProtocolMessage::Sync(SyncMessage {
                    kind: SyncKind::TransmissionError,
                    sim_time: rec.at,
                    msg_id: Some(rec.msg_id),
                }))
            }
            NetYield::Parked { at, idle } => Ok(ProtocolMessage::Sync(SyncMessage {
                kind: if idle {
                    SyncKind::Waiting
                } else {
                    SyncKind::MaxAdvance
                },
                sim_time: at,
                msg_id: None,
            })),
        }
    }
}

/// Message transport towards the network engine endpoint.
pub trait BridgeTransport {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<(), BridgeError>;
    fn recv(&mut self) -> Result<ProtocolMessage, BridgeError>;
    fn shutdown(&mut self) -> Result<(), BridgeError>;
}

/// Runs the endpoint inside the orchestrator process; replies queue up until
/// they are received.
pub struct InProcessTransport {
    endpoint: NetsimEndpoint,
    replies: VecDeque<ProtocolMessage>,
}

impl InProcessTransport {
    pub fn new(endpoint: NetsimEndpoint) -> Self {
        InProcessTransport {
            endpoint,
            replies: VecDeque::new(),
        }
    }
}

impl BridgeTransport for InProcessTransport {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<(), BridgeError> {
        let reply = self.endpoint.handle(msg.clone())?;
        self.replies.push_back(reply);
        Ok(())
    }

    fn recv(&mut self) -> Result<ProtocolMessage, BridgeError> {
        self.replies
            .pop_front()
            .ok_or_else(|| BridgeError::ProtocolViolation("receive without pending reply".into()))
    }

    fn shutdown(&mut self) -> Result<(), BridgeError> {
        Ok(())
    }
}

/// Talks to a separate engine process over length-prefixed frames on its
/// stdin/stdout pipes.
pub struct WireTransport {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: ChildStdout,
}

impl WireTransport {
    pub fn spawn(command: &mut Command) -> Result<Self, BridgeError> {
        let mut child = command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(WireTransport {
            child,
            stdin: Some(stdin),
            stdout,
        })
    }
}

impl BridgeTransport for WireTransport {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<(), BridgeError> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| BridgeError::ProtocolViolation("transport already shut down".into()))?;
        write_frame(stdin, msg)
    }

    fn recv(&mut self) -> Result<ProtocolMessage, BridgeError> {
        read_frame(&mut self.stdout)?.ok_or_else(|| {
            BridgeError::ProtocolViolation("engine process closed the stream".into())
        })
    }

    fn shutdown(&mut self) -> Result<(), BridgeError> {
        drop(self.stdin.take());
        let status = self.child.wait()?;
        if !status.success() {
            return Err(BridgeError::ProtocolViolation(format!(
                "engine process exited with {status}"
            )));
        }
        Ok(())
    }
}

impl Drop for WireTransport {
    fn drop(&mut self) {
        drop(self.stdin.take());
        if matches!(self.child.try_wait(), Ok(None)) {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

/// Serves a netsim endpoint over arbitrary streams until the peer closes its
/// side; used by the engine child process.
pub fn serve_endpoint(
    mut endpoint: NetsimEndpoint,
    reader: &mut impl Read,
    writer: &mut impl Write,
) -> Result<(), BridgeError> {
    while let Some(msg) = read_frame(reader)? {
        let reply = endpoint.handle(msg)?;
        write_frame(writer, &reply)?;
    }
    Ok(())
}

/// One protocol message as seen on the bridge, tagged with its direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracedMessage {
    pub from_netsim: bool,
    pub msg: ProtocolMessage,
}

/// What the orchestrator learns from one engine yield.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BridgeYield {
    MaxAdvance(SimTime),
    Waiting(SimTime),
    Delivery {
        msg_id: String,
        delivered_at: SimTime,
        payload: Vec<u8>,
    },
    TransmissionError {
        msg_id: String,
        at: SimTime,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenHolder {
    Orchestrator,
    Netsim,
}

/// Orchestrator-side session state: token discipline, in-flight accounting and
/// the full protocol trace.
pub struct BridgeSession {
    transport: Box<dyn BridgeTransport>,
    token: TokenHolder,
    in_flight: BTreeSet<String>,
    delivery_watermark: SimTime,
    trace: Vec<TracedMessage>,
}

impl BridgeSession {
    /// Performs the handshake: INITIAL out, WAITING acknowledgement back.
    pub fn open(
        mut transport: Box<dyn BridgeTransport>,
        init: InitialMessage,
    ) -> Result<Self, BridgeError> {
        let mut trace = Vec::new();
        let msg = ProtocolMessage::Initial(init);
        transport.send(&msg)?;
        trace.push(TracedMessage {
            from_netsim: false,
            msg,
        });
        let reply = transport.recv()?;
        trace.push(TracedMessage {
            from_netsim: true,
            msg: reply.clone(),
        });
        match reply {
            ProtocolMessage::Sync(SyncMessage {
                kind: SyncKind::Waiting,
                ..
            }) => {}
            other => {
                return Err(BridgeError::HandshakeFailure(format!(
                    "expected WAITING acknowledgement, got {}",
                    other.type_name()
                )))
            }
        }
        Ok(BridgeSession {
            transport,
            token: TokenHolder::Orchestrator,
            in_flight: BTreeSet::new(),
            delivery_watermark: SimTime::ZERO,
            trace,
        })
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }

    fn require_token(&self, holder: TokenHolder, op: &str) -> Result<(), BridgeError> {
        if self.token != holder {
            return Err(BridgeError::ProtocolViolation(format!(
                "{op} while token is at {:?}",
                self.token
            )));
        }
        Ok(())
    }

    fn send_traced(&mut self, msg: ProtocolMessage) -> Result<(), BridgeError> {
        self.transport.send(&msg)?;
        self.trace.push(TracedMessage {
            from_netsim: false,
            msg,
        });
        Ok(())
    }

    /// Hands a message over for transmission; the token moves to the engine.
    pub fn forward_info(&mut self, info: InfoMessage) -> Result<(), BridgeError> {
        self.require_token(TokenHolder::Orchestrator, "forward_info")?;
        if !self.in_flight.insert(info.msg_id.clone()) {
            return Err(BridgeError::ProtocolViolation(format!(
                "msg_id {} already in flight",
                info.msg_id
            )));
        }
        self.send_traced(ProtocolMessage::Info(info))?;
        self.token = TokenHolder::Netsim;
        Ok(())
    }

    /// Announces a topology change; acknowledged immediately without moving
    /// simulation time.
    pub fn forward_infrastructure(
        &mut self,
        infra: InfrastructureMessage,
    ) -> Result<(), BridgeError> {
        self.require_token(TokenHolder::Orchestrator, "forward_infrastructure")?;
        self.send_traced(ProtocolMessage::Infra(infra))?;
        let reply = self.transport.recv()?;
        self.trace.push(TracedMessage {
            from_netsim: true,
            msg: reply.clone(),
        });
        match reply {
            ProtocolMessage::Sync(SyncMessage {
                kind: SyncKind::Waiting,
                ..
            }) => Ok(()),
            other => Err(BridgeError::ProtocolViolation(format!(
                "expected WAITING acknowledgement for INFRA, got {}",
                other.type_name()
            ))),
        }
    }

    /// Grants the engine a new bound to advance towards.
    pub fn grant_waiting(&mut self, bound: SimTime) -> Result<(), BridgeError> {
        self.require_token(TokenHolder::Orchestrator, "grant_waiting")?;
        self.send_traced(ProtocolMessage::Sync(SyncMessage {
            kind: SyncKind::Waiting,
            sim_time: bound,
            msg_id: None,
        }))?;
        self.token = TokenHolder::Netsim;
        Ok(())
    }

    /// Receives the engine's next yield; the token returns to the
    /// orchestrator.
    pub fn netsim_advance(&mut self) -> Result<BridgeYield, BridgeError> {
        self.require_token(TokenHolder::Netsim, "netsim_advance")?;
        let reply = self.transport.recv()?;
        self.trace.push(TracedMessage {
            from_netsim: true,
            msg: reply.clone(),
        });
        self.token = TokenHolder::Orchestrator;
        match reply {
            ProtocolMessage::Sync(SyncMessage {
                kind: SyncKind::MaxAdvance,
                sim_time,
                ..
            }) => Ok(BridgeYield::MaxAdvance(sim_time)),
            ProtocolMessage::Sync(SyncMessage {
                kind: SyncKind::Waiting,
                sim_time,
                ..
            }) => Ok(BridgeYield::Waiting(sim_time)),
            ProtocolMessage::Sync(SyncMessage {
                kind: SyncKind::TransmissionError,
                sim_time,
                msg_id,
            }) => {
                let msg_id =
                    msg_id.ok_or_else(|| BridgeError::MalformedBody("sync without msg_id".into()))?;
                if !self.in_flight.remove(&msg_id) {
                    return Err(BridgeError::UnknownMsgId(msg_id));
                }
                Ok(BridgeYield::TransmissionError {
                    msg_id,
                    at: sim_time,
                })
            }
            ProtocolMessage::Delivery(delivery) => {
                if !self.in_flight.remove(&delivery.msg_id) {
                    return Err(BridgeError::UnknownMsgId(delivery.msg_id));
                }
                if delivery.delivered_at < self.delivery_watermark {
                    return Err(BridgeError::ProtocolViolation(format!(
                        "delivery time moved backwards: {} after {}",
                        delivery.delivered_at, self.delivery_watermark
                    )));
                }
                self.delivery_watermark = delivery.delivered_at;
                Ok(BridgeYield::Delivery {
                    msg_id: delivery.msg_id,
                    delivered_at: delivery.delivered_at,
                    payload: delivery.payload,
                })
            }
            other => Err(BridgeError::ProtocolViolation(format!(
                "unexpected {} from engine",
                other.type_name()
            ))),
        }
    }

    /// Ends the session; fails if any message never resolved to a delivery or
    /// a transmission error.
    pub fn close(mut self) -> Result<Vec<TracedMessage>, BridgeError> {
        if !self.in_flight.is_empty() {
            return Err(BridgeError::ProtocolViolation(format!(
                "session closed with {} in-flight messages",
                self.in_flight.len()
            )));
        }
        self.transport.shutdown()?;
        Ok(std::mem::take(&mut self.trace))
    }
}
