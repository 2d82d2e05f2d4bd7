use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::{ContextVector, InjectionCoefficients, Provenance};

const ENVELOPE_MAGIC: &[u8; 4] = b"IFMS";
const ENVELOPE_VERSION: u8 = 1;
/// Envelope bytes before the payload: magic, version u8, kind u8,
/// round u32, sender u16, payload length u32.
pub const ENVELOPE_LEN: usize = 16;
/// Sender id used by the server.
pub const SERVER_ID: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    TemplateDistribution,
    ContextVectorUpload,
    GlobalContextVector,
    CoefficientUpload,
    GlobalCoefficients,
}

impl MessageKind {
    pub fn code(self) -> u8 {
        match self {
            MessageKind::TemplateDistribution => 0,
            MessageKind::ContextVectorUpload => 1,
            MessageKind::GlobalContextVector => 2,
            MessageKind::CoefficientUpload => 3,
            MessageKind::GlobalCoefficients => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => MessageKind::TemplateDistribution,
            1 => MessageKind::ContextVectorUpload,
            2 => MessageKind::GlobalContextVector,
            3 => MessageKind::CoefficientUpload,
            4 => MessageKind::GlobalCoefficients,
            _ => return None,
        })
    }

    pub fn direction(self) -> Direction {
        match self {
            MessageKind::ContextVectorUpload | MessageKind::CoefficientUpload => Direction::Uplink,
            _ => Direction::Downlink,
        }
    }
}

/// Decoded message body.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Template(String),
    Vector(ContextVector),
    Coefficients(InjectionCoefficients),
}

/// One protocol message: envelope fields plus the serialized payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub round: u32,
    pub sender: u16,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn template(round: u32, text: &str) -> Self {
        Self {
            kind: MessageKind::TemplateDistribution,
            round,
            sender: SERVER_ID,
            payload: text.as_bytes().to_vec(),
        }
    }

    pub fn vector(kind: MessageKind, round: u32, sender: u16, bytes: Vec<u8>) -> Self {
        Self {
            kind,
            round,
            sender,
            payload: bytes,
        }
    }

    pub fn encoded_len(&self) -> usize {
        ENVELOPE_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let len = u32::try_from(self.payload.len()).map_err(|_| Error::Encode("payload exceeds u32".into()))?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(ENVELOPE_MAGIC);
        out.push(ENVELOPE_VERSION);
        out.push(self.kind.code());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < ENVELOPE_LEN || &bytes[..4] != ENVELOPE_MAGIC {
            return Err(Error::decode("IFMS", "missing magic"));
        }
        if bytes[4] != ENVELOPE_VERSION {
            return Err(Error::decode("IFMS", format!("unsupported version {}", bytes[4])));
        }
        let kind = MessageKind::from_code(bytes[5])
            .ok_or_else(|| Error::decode("IFMS", format!("unknown kind {}", bytes[5])))?;
        let round = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
        let sender = u16::from_le_bytes([bytes[10], bytes[11]]);
        let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        if bytes.len() != ENVELOPE_LEN + len {
            return Err(Error::decode(
                "IFMS",
                format!("declared {len} payload bytes, found {}", bytes.len() - ENVELOPE_LEN),
            ));
        }
        Ok(Self {
            kind,
            round,
            sender,
            payload: bytes[ENVELOPE_LEN..].to_vec(),
        })
    }

    /// Decode the payload according to the declared kind.
    pub fn decode_payload(&self) -> Result<Payload> {
        match self.kind {
            MessageKind::TemplateDistribution => String::from_utf8(self.payload.clone())
                .map(Payload::Template)
                .map_err(|_| Error::decode("template", "not UTF-8")),
            MessageKind::ContextVectorUpload => ContextVector::decode(
                &self.payload,
                Provenance::Local {
                    client: self.sender,
                    round: self.round,
                },
            )
            .map(Payload::Vector),
            MessageKind::GlobalContextVector => {
                ContextVector::decode(&self.payload, Provenance::Global { round: self.round }).map(Payload::Vector)
            }
            MessageKind::CoefficientUpload | MessageKind::GlobalCoefficients => {
                InjectionCoefficients::decode(&self.payload).map(Payload::Coefficients)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Client to server.
    Uplink,
    /// Server to client.
    Downlink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Template distribution and context-vector upload.
    ContextVectors,
    /// Federated coefficient calibration.
    Calibration,
    /// Distribution of the final coefficients.
    Deployment,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::ContextVectors => "stage 1",
            Stage::Calibration => "stage 2",
            Stage::Deployment => "stage 3",
        })
    }
}

/// Message count and byte total for one ledger cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub messages: u64,
    pub bytes: u64,
}

impl Traffic {
    fn add(&mut self, other: Traffic) {
        self.messages += other.messages;
        self.bytes += other.bytes;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub stage: Stage,
    pub round: u32,
    pub direction: Direction,
    pub messages: u64,
    pub bytes: u64,
}

/// Byte-exact traffic per (stage, round, direction). Every entry comes from
/// the length of an actually serialized message.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    cells: BTreeMap<(Stage, u32, Direction), Traffic>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn record(&mut self, stage: Stage, round: u32, direction: Direction, bytes: usize) {
        self.cells.entry((stage, round, direction)).or_default().add(Traffic {
            messages: 1,
            bytes: bytes as u64,
        });
    }

    pub fn get(&self, stage: Stage, round: u32, direction: Direction) -> Traffic {
        self.cells.get(&(stage, round, direction)).copied().unwrap_or_default()
    }

    pub fn total(&self, direction: Direction) -> Traffic {
        let mut t = Traffic::default();
        for (_, v) in self.cells.iter().filter(|((_, _, d), _)| *d == direction) {
            t.add(*v);
        }
        t
    }

    pub fn stage_total(&self, stage: Stage, direction: Direction) -> Traffic {
        let mut t = Traffic::default();
        for (_, v) in self.cells.iter().filter(|((s, _, d), _)| *s == stage && *d == direction) {
            t.add(*v);
        }
        t
    }

    pub fn total_bytes(&self) -> u64 {
        self.cells.values().map(|t| t.bytes).sum()
    }

    pub fn rows(&self) -> Vec<LedgerRow> {
        self.cells
            .iter()
            .map(|(&(stage, round, direction), t)| LedgerRow {
                stage,
                round,
                direction,
                messages: t.messages,
                bytes: t.bytes,
            })
            .collect()
    }
}

/// A message exactly as it crossed the bus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedMessage {
    pub stage: Stage,
    pub direction: Direction,
    /// Recipient for downlink messages, sender for uplink ones.
    pub peer: u16,
    pub bytes: Vec<u8>,
}

/// In-process transport. Every message is serialized, ledgered by its real
/// length, optionally captured, and decoded again on delivery.
#[derive(Debug, Default)]
pub struct Bus {
    ledger: CommLedger,
    capture: Option<Vec<CapturedMessage>>,
}

impl Bus {
    pub fn new(capture: bool) -> Self {
        Self {
            ledger: CommLedger::new(),
            capture: capture.then(Vec::new),
        }
    }

    /// Deliver one message; `peer` is the client on the other end.
    pub fn transmit(&mut self, stage: Stage, peer: u16, message: &Message) -> Result<Message> {
        let bytes = message.encode()?;
        let direction = message.kind.direction();
        self.ledger.record(stage, message.round, direction, bytes.len());
        let delivered = Message::decode(&bytes)?;
        if let Some(log) = &mut self.capture {
            log.push(CapturedMessage {
                stage,
                direction,
                peer,
                bytes,
            });
        }
        Ok(delivered)
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn captured(&self) -> Option<&[CapturedMessage]> {
        self.capture.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injection::Dtype;
    use proptest::prelude::*;

    #[test]
    fn envelope_is_sixteen_bytes() {
        let m = Message::template(0, "");
        assert_eq!(m.encode().unwrap().len(), ENVELOPE_LEN);
        let c = InjectionCoefficients::neutral(4).unwrap();
        let m = Message::vector(MessageKind::CoefficientUpload, 3, 7, c.encode().unwrap());
        assert_eq!(m.encode().unwrap().len(), 16 + 6 + 16 * 4);
    }

    #[test]
    fn payload_decodes_to_declared_kind() {
        let v = ContextVector::zeros(2, 3).unwrap();
        let m = Message::vector(MessageKind::ContextVectorUpload, 0, 4, v.encode(Dtype::F32).unwrap());
        match m.decode_payload().unwrap() {
            Payload::Vector(got) => {
                assert_eq!(got.provenance(), Provenance::Local { client: 4, round: 0 });
                assert_eq!(got.as_slice(), v.as_slice());
            }
            other => panic!("{other:?}"),
        }
        let wrong = Message {
            kind: MessageKind::GlobalCoefficients,
            ..m
        };
        assert!(wrong.decode_payload().is_err());
    }

    #[test]
    fn corrupt_envelopes_rejected() {
        let bytes = Message::template(2, "abc").encode().unwrap();
        assert!(Message::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[5] = 99;
        assert!(Message::decode(&bad).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Message::decode(&bad).is_err());
    }

    #[test]
    fn bus_ledgers_real_lengths() {
        let mut bus = Bus::new(true);
        let c = InjectionCoefficients::neutral(2).unwrap();
        let up = Message::vector(MessageKind::CoefficientUpload, 1, 0, c.encode().unwrap());
        let down = Message::vector(MessageKind::GlobalCoefficients, 1, SERVER_ID, c.encode().unwrap());
        assert_eq!(bus.transmit(Stage::Calibration, 0, &up).unwrap(), up);
        bus.transmit(Stage::Calibration, 0, &down).unwrap();
        bus.transmit(Stage::Calibration, 1, &down).unwrap();
        let captured: u64 = bus.captured().unwrap().iter().map(|m| m.bytes.len() as u64).sum();
        assert_eq!(bus.ledger().total_bytes(), captured);
        assert_eq!(
            bus.ledger().get(Stage::Calibration, 1, Direction::Uplink),
            Traffic { messages: 1, bytes: 16 + 6 + 32 }
        );
        assert_eq!(bus.ledger().get(Stage::Calibration, 1, Direction::Downlink).messages, 2);
    }

    proptest! {
        #[test]
        fn envelope_roundtrip(kind in 0u8..5, round: u32, sender: u16, payload in prop::collection::vec(any::<u8>(), 0..64)) {
            let m = Message { kind: MessageKind::from_code(kind).unwrap(), round, sender, payload };
            let bytes = m.encode().unwrap();
            prop_assert_eq!(bytes.len(), m.encoded_len());
            prop_assert_eq!(Message::decode(&bytes).unwrap(), m);
        }
    }
}
