//! Session hello, control-plane messages and data-plane frames.
//!
//! Control frames: `length u32 | type u8 | body`, where `length` counts the
//! type byte plus the body. Strings are `len u16 | utf-8 bytes`; digests
//! are 32 raw bytes; every integer is little-endian.
//!
//! Data streams carry magic-tagged frames: `SPSG` segments (see
//! [`crate::segment`]), `SPSQ` status queries, `SPST` status replies and
//! `SPCM` commit propagation from a relay to its peers.

use alloc::string::String;
use alloc::vec::Vec;

use crate::hash::Digest;
use crate::segment::{Segment, SegmentError, SEGMENT_HEADER_LEN, SEGMENT_MAGIC};

pub const HELLO_MAGIC: [u8; 4] = *b"SPHL";
pub const HELLO_LEN: usize = 15;
pub const PROTOCOL_VERSION: u16 = 1;
pub const STATUS_QUERY_MAGIC: [u8; 4] = *b"SPSQ";
pub const STATUS_REPLY_MAGIC: [u8; 4] = *b"SPST";
pub const COMMIT_MAGIC: [u8; 4] = *b"SPCM";
/// Upper bound on a control frame, guarding against corrupt length fields.
pub const MAX_CONTROL_FRAME: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    Protocol(u16),
    #[error("unknown role {0}")]
    UnknownRole(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("unknown status code {0}")]
    UnknownStatus(u8),
    #[error("frame truncated")]
    Truncated,
    #[error("frame has trailing bytes")]
    Trailing,
    #[error("frame length {0} out of range")]
    Length(u32),
    #[error("invalid utf-8 string")]
    Utf8,
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Hub,
    Actor,
    Relay,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Hub => 0,
            Role::Actor => 1,
            Role::Relay => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self, WireError> {
        match c {
            0 => Ok(Role::Hub),
            1 => Ok(Role::Actor),
            2 => Ok(Role::Relay),
            other => Err(WireError::UnknownRole(other)),
        }
    }
}

/// First bytes on every connection: `magic | role u8 | node id u64 | protocol u16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub role: Role,
    pub node_id: u64,
    pub protocol_version: u16,
}

impl Hello {
    pub fn new(role: Role, node_id: u64) -> Self {
        Self {
            role,
            node_id,
            protocol_version: PROTOCOL_VERSION,
        }
    }

    pub fn to_bytes(&self) -> [u8; HELLO_LEN] {
        let mut b = [0u8; HELLO_LEN];
        b[0..4].copy_from_slice(&HELLO_MAGIC);
        b[4] = self.role.code();
        b[5..13].copy_from_slice(&self.node_id.to_le_bytes());
        b[13..15].copy_from_slice(&self.protocol_version.to_le_bytes());
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self, WireError> {
        if b.len() < HELLO_LEN {
            return Err(WireError::Truncated);
        }
        if b[0..4] != HELLO_MAGIC {
            return Err(WireError::BadMagic);
        }
        let protocol_version = u16::from_le_bytes([b[13], b[14]]);
        if protocol_version != PROTOCOL_VERSION {
            return Err(WireError::Protocol(protocol_version));
        }
        Ok(Self {
            role: Role::from_code(b[4])?,
            node_id: u64::from_le_bytes(b[5..13].try_into().unwrap()),
            protocol_version,
        })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn digest(&mut self, d: &Digest) {
        self.0.extend_from_slice(&d.0);
    }
    fn str(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn bytes32(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.at.checked_add(n).ok_or(WireError::Truncated)?;
        let s = self.b.get(self.at..end).ok_or(WireError::Truncated)?;
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn digest(&mut self) -> Result<Digest, WireError> {
        Ok(Digest(self.take(32)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        let s = core::str::from_utf8(self.take(n)?).map_err(|_| WireError::Utf8)?;
        Ok(String::from(s))
    }
    fn bytes32(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    /// Count prefix checked against the bytes left, so a corrupt count
    /// cannot trigger a huge allocation.
    fn count(&mut self, elem: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem) > self.b.len() - self.at {
            return Err(WireError::Truncated);
        }
        Ok(n)
    }
    fn done(&self) -> Result<(), WireError> {
        if self.at == self.b.len() {
            Ok(())
        } else {
            Err(WireError::Trailing)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobSpec {
    pub job_id: u64,
    pub target_version: u64,
    pub expected_hash: Digest,
    pub lease_expiry_us: u64,
    pub tokens_per_prompt: u32,
    pub prompt_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultMsg {
    pub job_id: u64,
    pub actor_id: u64,
    pub behavior_version: u64,
    pub reported_hash: Digest,
    /// Digest of the actor's parameters at the batch boundary, for
    /// invariant monitoring; not part of the acceptance predicate.
    pub params_digest: Digest,
    pub token_count: u64,
    pub gen_elapsed_us: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMessage {
    Register {
        actor_id: u64,
        is_relay: bool,
        region: String,
        data_addr: String,
    },
    IssueJobs(Vec<JobSpec>),
    SubmitResult(ResultMsg),
    Commit {
        version: u64,
        /// Peers a relay target must propagate the commit to.
        propagate: Vec<u64>,
    },
    CommitAck {
        actor_id: u64,
        version: u64,
    },
    Heartbeat {
        actor_id: u64,
        active_version: u64,
        generating: bool,
        staged: Vec<u64>,
    },
    ExcludedNotice {
        version: u64,
    },
}

impl ControlMessage {
    pub fn type_code(&self) -> u8 {
        match self {
            ControlMessage::Register { .. } => 1,
            ControlMessage::IssueJobs(_) => 2,
            ControlMessage::SubmitResult(_) => 3,
            ControlMessage::Commit { .. } => 4,
            ControlMessage::CommitAck { .. } => 5,
            ControlMessage::Heartbeat { .. } => 6,
            ControlMessage::ExcludedNotice { .. } => 7,
        }
    }

    /// Full frame including the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::with_capacity(64));
        w.u32(0);
        w.u8(self.type_code());
        match self {
            ControlMessage::Register {
                actor_id,
                is_relay,
                region,
                data_addr,
            } => {
                w.u64(*actor_id);
                w.u8(*is_relay as u8);
                w.str(region);
                w.str(data_addr);
            }
            ControlMessage::IssueJobs(jobs) => {
                w.u32(jobs.len() as u32);
                for j in jobs {
                    w.u64(j.job_id);
                    w.u64(j.target_version);
                    w.digest(&j.expected_hash);
                    w.u64(j.lease_expiry_us);
                    w.u32(j.tokens_per_prompt);
                    w.u32(j.prompt_ids.len() as u32);
                    for p in &j.prompt_ids {
                        w.u64(*p);
                    }
                }
            }
            ControlMessage::SubmitResult(r) => {
                w.u64(r.job_id);
                w.u64(r.actor_id);
                w.u64(r.behavior_version);
                w.digest(&r.reported_hash);
                w.digest(&r.params_digest);
                w.u64(r.token_count);
                w.u64(r.gen_elapsed_us);
                w.bytes32(&r.payload);
            }
            ControlMessage::Commit { version, propagate } => {
                w.u64(*version);
                w.u32(propagate.len() as u32);
                for p in propagate {
                    w.u64(*p);
                }
            }
            ControlMessage::CommitAck { actor_id, version } => {
                w.u64(*actor_id);
                w.u64(*version);
            }
            ControlMessage::Heartbeat {
                actor_id,
                active_version,
                generating,
                staged,
            } => {
                w.u64(*actor_id);
                w.u64(*active_version);
                w.u8(*generating as u8);
                w.u32(staged.len() as u32);
                for s in staged {
                    w.u64(*s);
                }
            }
            ControlMessage::ExcludedNotice { version } => w.u64(*version),
        }
        let len = (w.0.len() - 4) as u32;
        w.0[0..4].copy_from_slice(&len.to_le_bytes());
        w.0
    }

    /// Decodes `type u8 | body` (the frame without its length prefix).
    pub fn decode(frame: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader { b: frame, at: 0 };
        let msg = match r.u8()? {
            1 => ControlMessage::Register {
                actor_id: r.u64()?,
                is_relay: r.u8()? != 0,
                region: r.str()?,
                data_addr: r.str()?,
            },
            2 => {
                let n = r.count(64)?;
                let mut jobs = Vec::with_capacity(n);
                for _ in 0..n {
                    let job_id = r.u64()?;
                    let target_version = r.u64()?;
                    let expected_hash = r.digest()?;
                    let lease_expiry_us = r.u64()?;
                    let tokens_per_prompt = r.u32()?;
                    let k = r.count(8)?;
                    let prompt_ids = (0..k).map(|_| r.u64()).collect::<Result<_, _>>()?;
                    jobs.push(JobSpec {
                        job_id,
                        target_version,
                        expected_hash,
                        lease_expiry_us,
                        tokens_per_prompt,
                        prompt_ids,
                    });
                }
                ControlMessage::IssueJobs(jobs)
            }
            3 => ControlMessage::SubmitResult(ResultMsg {
                job_id: r.u64()?,
                actor_id: r.u64()?,
                behavior_version: r.u64()?,
                reported_hash: r.digest()?,
                params_digest: r.digest()?,
                token_count: r.u64()?,
                gen_elapsed_us: r.u64()?,
                payload: r.bytes32()?,
            }),
            4 => {
                let version = r.u64()?;
                let n = r.count(8)?;
                let propagate = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
                ControlMessage::Commit { version, propagate }
            }
            5 => ControlMessage::CommitAck {
                actor_id: r.u64()?,
                version: r.u64()?,
            },
            6 => {
                let actor_id = r.u64()?;
                let active_version = r.u64()?;
                let generating = r.u8()? != 0;
                let n = r.count(8)?;
                let staged = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
                ControlMessage::Heartbeat {
                    actor_id,
                    active_version,
                    generating,
                    staged,
                }
            }
            7 => ControlMessage::ExcludedNotice { version: r.u64()? },
            other => return Err(WireError::UnknownType(other)),
        };
        r.done()?;
        Ok(msg)
    }
}

/// Outcome a receiver reports for one version.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Complete,
    Missing,
    /// Base version does not match the receiver's active version.
    Refused,
    HashMismatch,
}

impl StageStatus {
    pub fn code(self) -> u8 {
        match self {
            StageStatus::Complete => 0,
            StageStatus::Missing => 1,
            StageStatus::Refused => 2,
            StageStatus::HashMismatch => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self, WireError> {
        match c {
            0 => Ok(StageStatus::Complete),
            1 => Ok(StageStatus::Missing),
            2 => Ok(StageStatus::Refused),
            3 => Ok(StageStatus::HashMismatch),
            other => Err(WireError::UnknownStatus(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataFrame {
    Segment(Segment),
    /// `SPSQ | version u64`
    StatusQuery { version: u64 },
    /// `SPST | version u64 | status u8 | count u32 | missing ids u32...`
    StatusReply {
        version: u64,
        status: StageStatus,
        missing: Vec<u32>,
    },
    /// `SPCM | version u64`
    Commit { version: u64 },
}

/// How much of a data frame is needed given the bytes read so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameLen {
    /// Need at least this many bytes to learn the full length.
    AtLeast(usize),
    Exactly(usize),
}

impl DataFrame {
    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            DataFrame::Segment(s) => s.encode(out),
            DataFrame::StatusQuery { version } => {
                out.extend_from_slice(&STATUS_QUERY_MAGIC);
                out.extend_from_slice(&version.to_le_bytes());
            }
            DataFrame::StatusReply {
                version,
                status,
                missing,
            } => {
                out.extend_from_slice(&STATUS_REPLY_MAGIC);
                out.extend_from_slice(&version.to_le_bytes());
                out.push(status.code());
                out.extend_from_slice(&(missing.len() as u32).to_le_bytes());
                for id in missing {
                    out.extend_from_slice(&id.to_le_bytes());
                }
            }
            DataFrame::Commit { version } => {
                out.extend_from_slice(&COMMIT_MAGIC);
                out.extend_from_slice(&version.to_le_bytes());
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out);
        out
    }

    pub fn frame_len(prefix: &[u8]) -> Result<FrameLen, WireError> {
        if prefix.len() < 4 {
            return Ok(FrameLen::AtLeast(4));
        }
        let magic: [u8; 4] = prefix[0..4].try_into().unwrap();
        match magic {
            SEGMENT_MAGIC => {
                if prefix.len() < SEGMENT_HEADER_LEN {
                    return Ok(FrameLen::AtLeast(SEGMENT_HEADER_LEN));
                }
                let (_, len) = Segment::parse_header(prefix)?;
                Ok(FrameLen::Exactly(SEGMENT_HEADER_LEN + len))
            }
            STATUS_QUERY_MAGIC | COMMIT_MAGIC => Ok(FrameLen::Exactly(12)),
            STATUS_REPLY_MAGIC => {
                if prefix.len() < 17 {
                    return Ok(FrameLen::AtLeast(17));
                }
                let n = u32::from_le_bytes(prefix[13..17].try_into().unwrap());
                if n > MAX_CONTROL_FRAME / 4 {
                    return Err(WireError::Length(n));
                }
                Ok(FrameLen::Exactly(17 + 4 * n as usize))
            }
            _ => Err(WireError::BadMagic),
        }
    }

    /// Decodes exactly one complete frame.
    pub fn decode(frame: &[u8]) -> Result<Self, WireError> {
        match Self::frame_len(frame)? {
            FrameLen::Exactly(n) if n == frame.len() => {}
            FrameLen::Exactly(n) if n < frame.len() => return Err(WireError::Trailing),
            _ => return Err(WireError::Truncated),
        }
        let mut r = Reader { b: frame, at: 4 };
        let magic: [u8; 4] = frame[0..4].try_into().unwrap();
        Ok(match magic {
            SEGMENT_MAGIC => DataFrame::Segment(Segment::decode(frame)?.0),
            STATUS_QUERY_MAGIC => DataFrame::StatusQuery { version: r.u64()? },
            COMMIT_MAGIC => DataFrame::Commit { version: r.u64()? },
            _ => {
                let version = r.u64()?;
                let status = StageStatus::from_code(r.u8()?)?;
                let n = r.u32()?;
                let missing = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
                DataFrame::StatusReply {
                    version,
                    status,
                    missing,
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn hello_roundtrip() {
        let h = Hello::new(Role::Relay, 42);
        let b = h.to_bytes();
        assert_eq!(&b[0..4], b"SPHL");
        assert_eq!(Hello::parse(&b).unwrap(), h);
        let mut bad = b;
        bad[13] = 7;
        assert_eq!(Hello::parse(&bad), Err(WireError::Protocol(7)));
    }

    fn samples() -> Vec<ControlMessage> {
        vec![
            ControlMessage::Register {
                actor_id: 3,
                is_relay: true,
                region: "eu".into(),
                data_addr: "127.0.0.1:9000".into(),
            },
            ControlMessage::IssueJobs(vec![JobSpec {
                job_id: 1,
                target_version: 2,
                expected_hash: Digest([7; 32]),
                lease_expiry_us: 5_000_000,
                tokens_per_prompt: 512,
                prompt_ids: vec![10, 11],
            }]),
            ControlMessage::SubmitResult(ResultMsg {
                job_id: 1,
                actor_id: 3,
                behavior_version: 2,
                reported_hash: Digest([7; 32]),
                params_digest: Digest([1; 32]),
                token_count: 1024,
                gen_elapsed_us: 1_500_000,
                payload: vec![1, 2, 3],
            }),
            ControlMessage::Commit {
                version: 5,
                propagate: vec![4, 6],
            },
            ControlMessage::CommitAck { actor_id: 3, version: 5 },
            ControlMessage::Heartbeat {
                actor_id: 3,
                active_version: 4,
                generating: true,
                staged: vec![5],
            },
            ControlMessage::ExcludedNotice { version: 9 },
        ]
    }

    #[test]
    fn control_roundtrip() {
        for m in samples() {
            let frame = m.encode();
            let len = u32::from_le_bytes(frame[0..4].try_into().unwrap()) as usize;
            assert_eq!(len, frame.len() - 4);
            assert_eq!(frame[4], m.type_code());
            assert_eq!(ControlMessage::decode(&frame[4..]).unwrap(), m);
            assert!(ControlMessage::decode(&frame[4..frame.len() - 1]).is_err());
        }
        assert_eq!(ControlMessage::decode(&[99]), Err(WireError::UnknownType(99)));
    }

    #[test]
    fn commit_ack_layout() {
        let f = ControlMessage::CommitAck { actor_id: 1, version: 2 }.encode();
        let mut expected = vec![17, 0, 0, 0, 5];
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        assert_eq!(f, expected);
    }

    #[test]
    fn data_frames_roundtrip() {
        let frames = vec![
            DataFrame::Segment(Segment::new(1, 0, 1, 0, vec![9; 10])),
            DataFrame::StatusQuery { version: 3 },
            DataFrame::StatusReply {
                version: 3,
                status: StageStatus::Missing,
                missing: vec![1, 5],
            },
            DataFrame::Commit { version: 8 },
        ];
        for f in frames {
            let b = f.to_bytes();
            assert_eq!(DataFrame::frame_len(&b).unwrap(), FrameLen::Exactly(b.len()));
            assert_eq!(DataFrame::decode(&b).unwrap(), f);
        }
        assert_eq!(DataFrame::frame_len(b"SP"), Ok(FrameLen::AtLeast(4)));
        assert_eq!(DataFrame::frame_len(b"XXXX"), Err(WireError::BadMagic));
    }
}
