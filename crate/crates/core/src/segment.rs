//! Segments: independently transmittable, checksummed slices of a
//! serialized checkpoint, plus striping and reassembly.
//!
//! Frame layout (little-endian, 36-byte header then payload):
//!
//! ```text
//! magic "SPSG" | version u64 | segment_id u32 | total_segments u32
//! | byte_offset u64 | length u32 | crc32 u32 | payload
//! ```
//!
//! A cut-through producer does not know `total_segments` while emitting, so
//! it writes [`UNKNOWN_TOTAL`] and closes the version with a terminal
//! zero-length segment whose `segment_id == total_segments` and whose
//! `byte_offset` is the full serialized length.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::codec::{ByteSink, CheckpointHeader, CodecError, HEADER_LEN};
use crate::hash::Digest;

pub const SEGMENT_MAGIC: [u8; 4] = *b"SPSG";
pub const SEGMENT_HEADER_LEN: usize = 36;
pub const UNKNOWN_TOTAL: u32 = u32::MAX;
pub const MIN_SEGMENT_SIZE: usize = 1024;
pub const DEFAULT_SEGMENT_SIZE: usize = 4 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SegmentError {
    #[error("segment size {0} below minimum")]
    SegmentSizeTooSmall(usize),
    #[error("bad segment magic")]
    BadMagic,
    #[error("segment frame truncated")]
    Truncated,
    #[error("crc mismatch on segment {0}")]
    CrcMismatch(u32),
    #[error("segment for version {found}, buffer holds {expected}")]
    WrongVersion { expected: u64, found: u64 },
    #[error("segment {0} inconsistent with earlier segments")]
    Inconsistent(u32),
    #[error("reassembly incomplete")]
    Incomplete,
    #[error("reassembled body hash mismatch")]
    HashMismatch,
    #[error("reassembled checkpoint invalid: {0}")]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub version: u64,
    pub segment_id: u32,
    pub total_segments: u32,
    pub byte_offset: u64,
    pub crc: u32,
    pub payload: Vec<u8>,
}

impl Segment {
    pub fn new(version: u64, segment_id: u32, total_segments: u32, byte_offset: u64, payload: Vec<u8>) -> Self {
        Self {
            version,
            segment_id,
            total_segments,
            byte_offset,
            crc: crc32fast::hash(&payload),
            payload,
        }
    }

    pub fn terminal(version: u64, total_segments: u32, total_len: u64) -> Self {
        Self::new(version, total_segments, total_segments, total_len, Vec::new())
    }

    pub fn len(&self) -> u32 {
        self.payload.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn is_terminal(&self) -> bool {
        self.payload.is_empty() && self.total_segments != UNKNOWN_TOTAL && self.segment_id == self.total_segments
    }

    pub fn crc_ok(&self) -> bool {
        crc32fast::hash(&self.payload) == self.crc
    }

    pub fn frame_len(&self) -> usize {
        SEGMENT_HEADER_LEN + self.payload.len()
    }

    pub fn header_bytes(&self) -> [u8; SEGMENT_HEADER_LEN] {
        let mut h = [0u8; SEGMENT_HEADER_LEN];
        h[0..4].copy_from_slice(&SEGMENT_MAGIC);
        h[4..12].copy_from_slice(&self.version.to_le_bytes());
        h[12..16].copy_from_slice(&self.segment_id.to_le_bytes());
        h[16..20].copy_from_slice(&self.total_segments.to_le_bytes());
        h[20..28].copy_from_slice(&self.byte_offset.to_le_bytes());
        h[28..32].copy_from_slice(&self.len().to_le_bytes());
        h[32..36].copy_from_slice(&self.crc.to_le_bytes());
        h
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.header_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn to_frame(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.frame_len());
        self.encode(&mut out);
        out
    }

    /// Parses a frame header; returns the header fields and payload length.
    pub fn parse_header(h: &[u8]) -> Result<(Segment, usize), SegmentError> {
        if h.len() < SEGMENT_HEADER_LEN {
            return Err(SegmentError::Truncated);
        }
        if h[0..4] != SEGMENT_MAGIC {
            return Err(SegmentError::BadMagic);
        }
        let u32_at = |i: usize| u32::from_le_bytes(h[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(h[i..i + 8].try_into().unwrap());
        let seg = Segment {
            version: u64_at(4),
            segment_id: u32_at(12),
            total_segments: u32_at(16),
            byte_offset: u64_at(20),
            crc: u32_at(32),
            payload: Vec::new(),
        };
        Ok((seg, u32_at(28) as usize))
    }

    /// Decodes one complete frame. The CRC is not checked here so that the
    /// receiver can count and report corrupt segments.
    pub fn decode(frame: &[u8]) -> Result<(Segment, usize), SegmentError> {
        let (mut seg, len) = Self::parse_header(frame)?;
        let end = SEGMENT_HEADER_LEN + len;
        let payload = frame.get(SEGMENT_HEADER_LEN..end).ok_or(SegmentError::Truncated)?;
        seg.payload = payload.to_vec();
        Ok((seg, end))
    }
}

/// Splits a fully serialized checkpoint into segments of `segment_size`
/// bytes (the last may be short). Empty input yields one zero-length
/// segment.
pub fn segmentize(bytes: &[u8], version: u64, segment_size: usize) -> Result<Vec<Segment>, SegmentError> {
    if segment_size < MIN_SEGMENT_SIZE {
        return Err(SegmentError::SegmentSizeTooSmall(segment_size));
    }
    if bytes.is_empty() {
        return Ok(vec![Segment::new(version, 0, 1, 0, Vec::new())]);
    }
    let total = bytes.len().div_ceil(segment_size) as u32;
    Ok(bytes
        .chunks(segment_size)
        .enumerate()
        .map(|(i, chunk)| Segment::new(version, i as u32, total, (i * segment_size) as u64, chunk.to_vec()))
        .collect())
}

/// Stream index for a segment under round-robin striping.
pub fn stream_for(segment_id: u32, streams: usize) -> usize {
    segment_id as usize % streams.max(1)
}

/// Round-robin striping: segment `i` goes to stream `i mod streams`,
/// preserving order within each stream.
pub fn stripe(segments: Vec<Segment>, streams: usize) -> Vec<Vec<Segment>> {
    let streams = streams.max(1);
    let mut out: Vec<Vec<Segment>> = (0..streams).map(|_| Vec::new()).collect();
    for seg in segments {
        out[stream_for(seg.segment_id, streams)].push(seg);
    }
    out
}

/// Incremental segmenter fed by a streaming encoder.
///
/// The first `reserved` bytes are a placeholder for a header known only at
/// the end, so segment 0 is held back and emitted by [`finish`] once the
/// header is patched in. Every other full segment is emitted as soon as its
/// last byte arrives.
///
/// [`finish`]: CutThroughSegmenter::finish
pub struct CutThroughSegmenter<F: FnMut(Segment)> {
    version: u64,
    segment_size: usize,
    reserved: usize,
    current: Vec<u8>,
    next_id: u32,
    offset: u64,
    held: Option<Vec<u8>>,
    emit: F,
}

impl<F: FnMut(Segment)> CutThroughSegmenter<F> {
    pub fn new(version: u64, segment_size: usize, reserved: usize, emit: F) -> Result<Self, SegmentError> {
        if segment_size < MIN_SEGMENT_SIZE || reserved > segment_size {
            return Err(SegmentError::SegmentSizeTooSmall(segment_size));
        }
        let mut current = Vec::with_capacity(segment_size);
        current.resize(reserved, 0);
        Ok(Self {
            version,
            segment_size,
            reserved,
            current,
            next_id: 0,
            offset: 0,
            held: None,
            emit,
        })
    }

    /// Checkpoint producer: header length reserved for `SPDC`.
    pub fn for_checkpoint(version: u64, segment_size: usize, emit: F) -> Result<Self, SegmentError> {
        Self::new(version, segment_size, HEADER_LEN, emit)
    }

    fn flush(&mut self) {
        let data = core::mem::replace(&mut self.current, Vec::with_capacity(self.segment_size));
        let len = data.len() as u64;
        if self.next_id == 0 {
            self.held = Some(data);
        } else {
            (self.emit)(Segment::new(self.version, self.next_id, UNKNOWN_TOTAL, self.offset, data));
        }
        self.next_id += 1;
        self.offset += len;
    }

    pub fn segments_emitted(&self) -> u32 {
        self.next_id
    }

    /// Emits the held first segment with `prefix` patched in, then the
    /// terminal segment. Returns the total number of data segments.
    pub fn finish(mut self, prefix: &[u8]) -> u32 {
        assert_eq!(prefix.len(), self.reserved, "prefix must fill the reserved range");
        if !self.current.is_empty() || self.next_id == 0 {
            self.flush();
        }
        let total = self.next_id;
        let mut first = self.held.take().unwrap_or_default();
        first[..self.reserved].copy_from_slice(prefix);
        (self.emit)(Segment::new(self.version, 0, total, 0, first));
        (self.emit)(Segment::terminal(self.version, total, self.offset));
        total
    }
}

impl<F: FnMut(Segment)> ByteSink for CutThroughSegmenter<F> {
    fn put(&mut self, mut bytes: &[u8]) {
        while !bytes.is_empty() {
            let room = self.segment_size - self.current.len();
            let n = room.min(bytes.len());
            self.current.extend_from_slice(&bytes[..n]);
            bytes = &bytes[n..];
            if self.current.len() == self.segment_size {
                self.flush();
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Stored,
    Duplicate,
}

/// Reassembly buffer for one version.
#[derive(Debug, Clone)]
pub struct StagingBuffer {
    version: u64,
    expected_total: Option<u32>,
    expected_len: Option<u64>,
    ranges: BTreeMap<u32, (u64, u32)>,
    bytes: Vec<u8>,
    verified: Option<Digest>,
}

impl StagingBuffer {
    pub fn new(version: u64) -> Self {
        Self {
            version,
            expected_total: None,
            expected_len: None,
            ranges: BTreeMap::new(),
            bytes: Vec::new(),
            verified: None,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn expected_total(&self) -> Option<u32> {
        self.expected_total
    }

    pub fn received_count(&self) -> u32 {
        self.ranges.len() as u32
    }

    pub fn received_bytes(&self) -> u64 {
        self.ranges.values().map(|&(_, l)| l as u64).sum()
    }

    pub fn has(&self, segment_id: u32) -> bool {
        self.ranges.contains_key(&segment_id)
    }

    fn learn_total(&mut self, total: u32, id: u32) -> Result<(), SegmentError> {
        match self.expected_total {
            Some(t) if t != total => Err(SegmentError::Inconsistent(id)),
            _ => {
                self.expected_total = Some(total);
                Ok(())
            }
        }
    }

    pub fn insert(&mut self, seg: &Segment) -> Result<InsertOutcome, SegmentError> {
        if seg.version != self.version {
            return Err(SegmentError::WrongVersion {
                expected: self.version,
                found: seg.version,
            });
        }
        if !seg.crc_ok() {
            return Err(SegmentError::CrcMismatch(seg.segment_id));
        }
        if seg.is_terminal() {
            self.learn_total(seg.total_segments, seg.segment_id)?;
            match self.expected_len {
                Some(l) if l != seg.byte_offset => return Err(SegmentError::Inconsistent(seg.segment_id)),
                _ => self.expected_len = Some(seg.byte_offset),
            }
            return Ok(InsertOutcome::Stored);
        }
        if seg.total_segments != UNKNOWN_TOTAL {
            if seg.segment_id >= seg.total_segments {
                return Err(SegmentError::Inconsistent(seg.segment_id));
            }
            self.learn_total(seg.total_segments, seg.segment_id)?;
        }
        let start = seg.byte_offset;
        let end = start + seg.payload.len() as u64;
        if let Some(&(off, len)) = self.ranges.get(&seg.segment_id) {
            if off == start && len == seg.len() {
                return Ok(InsertOutcome::Duplicate);
            }
            return Err(SegmentError::Inconsistent(seg.segment_id));
        }
        if let Some(total_len) = self.expected_len {
            if end > total_len {
                return Err(SegmentError::Inconsistent(seg.segment_id));
            }
        }
        // ids are dense and offsets increase with id
        if let Some((_, &(off, len))) = self.ranges.range(..seg.segment_id).next_back() {
            if off + len as u64 > start {
                return Err(SegmentError::Inconsistent(seg.segment_id));
            }
        }
        if let Some((_, &(off, _))) = self.ranges.range(seg.segment_id + 1..).next() {
            if end > off {
                return Err(SegmentError::Inconsistent(seg.segment_id));
            }
        }
        if self.bytes.len() < end as usize {
            self.bytes.resize(end as usize, 0);
        }
        self.bytes[start as usize..end as usize].copy_from_slice(&seg.payload);
        self.ranges.insert(seg.segment_id, (start, seg.len()));
        Ok(InsertOutcome::Stored)
    }

    /// All ids received and the ranges tile `[0, len)` without gaps.
    pub fn is_complete(&self) -> bool {
        let Some(total) = self.expected_total else {
            return false;
        };
        if self.ranges.len() as u32 != total {
            return false;
        }
        let mut cursor = 0u64;
        for &(off, len) in self.ranges.values() {
            if off != cursor {
                return false;
            }
            cursor += len as u64;
        }
        self.expected_len.is_none_or(|l| l == cursor)
    }

    /// Ids not yet received; when the total is unknown, the gaps below the
    /// highest id seen plus that next id.
    pub fn missing_ids(&self) -> Vec<u32> {
        let upper = match self.expected_total {
            Some(t) => t,
            None => self.ranges.keys().next_back().map_or(0, |&k| k + 1) + 1,
        };
        (0..upper).filter(|id| !self.ranges.contains_key(id)).collect()
    }

    /// Checks completeness and the body hash declared in the reassembled
    /// header; on success the buffer is marked verified.
    pub fn verify(&mut self) -> Result<Digest, SegmentError> {
        if let Some(d) = self.verified {
            return Ok(d);
        }
        if !self.is_complete() {
            return Err(SegmentError::Incomplete);
        }
        let header = CheckpointHeader::parse(&self.bytes)?;
        if header.version != self.version || header.total_len() != self.bytes.len() as u64 {
            return Err(SegmentError::Codec(CodecError::Truncated));
        }
        if Digest::of(&self.bytes[HEADER_LEN..]) != header.body_hash {
            return Err(SegmentError::HashMismatch);
        }
        self.verified = Some(header.body_hash);
        Ok(header.body_hash)
    }

    pub fn verified(&self) -> Option<Digest> {
        self.verified
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}
