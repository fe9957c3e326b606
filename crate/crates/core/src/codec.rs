//! Sparse delta extraction, the `SPDC` checkpoint container and in-place
//! application.
//!
//! Container layout (little-endian):
//!
//! ```text
//! header (67 bytes)
//!   magic "SPDC" | format_version u16 | version u64 | base_version u64
//!   | element_type u8 | tensor_count u32 | body_len u64 | body_hash [32]
//! body, per tensor
//!   name_len u16 | name | element_count u64 | nnz u64
//!   | index_len u64 | index_stream | values (nnz * width) | mode u8
//! ```
//!
//! `body_hash` is SHA-256 over exactly the body bytes. A tensor whose
//! `nnz == element_count > 0` may carry an empty index stream, meaning every
//! position `0..element_count` in order (dense snapshot form).

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::fusion::{FusedTensor, FusionMap};
use crate::hash::{Digest, Hasher};
use crate::tensor::{bf16_to_f32, f32_to_bf16, ElementType, ParameterSet};
use crate::varint::{self, IndexError, IndexStream, IndexWriter};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPDC";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 67;
/// `base_version` of the genesis snapshot; `GENESIS_BASE + 1` wraps to 0.
pub const GENESIS_BASE: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("duplicate tensor {0}")]
    DuplicateTensor(String),
    #[error("shape does not match data for {0}")]
    BadShape(String),
    #[error("unknown tensor {0}")]
    UnknownTensor(String),
    #[error("structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("element type mismatch")]
    ElementTypeMismatch,
    #[error("fusion map: {0}")]
    Fusion(String),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedFormat(u16),
    #[error("unknown element type code {0}")]
    UnknownElementType(u8),
    #[error("unknown delta mode {0}")]
    UnknownMode(u8),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("trailing bytes after body")]
    TrailingBytes,
    #[error("body hash mismatch")]
    HashMismatch,
    #[error("version {version} does not follow base {base}")]
    VersionGap { version: u64, base: u64 },
    #[error("tensor {name}: {source}")]
    Index { name: String, source: IndexError },
    #[error("tensor {0}: value bytes do not match nnz")]
    ValueLength(String),
    #[error("tensor {name}: element count {found}, expected {expected}")]
    ElementCount { name: String, expected: u64, found: u64 },
    #[error("tensor name too long")]
    NameTooLong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeltaMode {
    /// Values are the new bit patterns; application is a scatter-store.
    Replace,
    /// Values are arithmetic differences; application is a scatter-add.
    Additive,
}

impl DeltaMode {
    pub const fn code(self) -> u8 {
        match self {
            DeltaMode::Replace => 0,
            DeltaMode::Additive => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, CodecError> {
        match code {
            0 => Ok(DeltaMode::Replace),
            1 => Ok(DeltaMode::Additive),
            other => Err(CodecError::UnknownMode(other)),
        }
    }
}

/// Nonzero statistics of one update: `rho = total_nonzeros / total_elements`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SparsityStats {
    pub total_elements: u64,
    pub total_nonzeros: u64,
    pub rho: f64,
}

impl SparsityStats {
    pub fn new(total_elements: u64, total_nonzeros: u64) -> Self {
        let rho = if total_elements == 0 {
            0.0
        } else {
            total_nonzeros as f64 / total_elements as f64
        };
        Self {
            total_elements,
            total_nonzeros,
            rho,
        }
    }
}

/// One fused tensor's nonzero updates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorDelta {
    pub name: String,
    pub element_count: u64,
    pub nnz: u64,
    pub index_stream: Vec<u8>,
    pub values: Vec<u8>,
    pub mode: DeltaMode,
}

impl TensorDelta {
    pub fn from_indices(
        name: impl Into<String>,
        element_count: u64,
        indices: &[u64],
        values: Vec<u8>,
        mode: DeltaMode,
    ) -> Result<Self, CodecError> {
        let name = name.into();
        let index_stream = varint::encode_indices(indices).map_err(|source| CodecError::Index {
            name: name.clone(),
            source,
        })?;
        let td = Self {
            name,
            element_count,
            nnz: indices.len() as u64,
            index_stream,
            values,
            mode,
        };
        Ok(td.normalized())
    }

    /// Dense form: every element, empty index stream.
    pub fn dense(name: impl Into<String>, values: Vec<u8>, width: usize) -> Self {
        let n = (values.len() / width) as u64;
        Self {
            name: name.into(),
            element_count: n,
            nnz: n,
            index_stream: Vec::new(),
            values,
            mode: DeltaMode::Replace,
        }
    }

    fn normalized(mut self) -> Self {
        if self.nnz > 0 && self.nnz == self.element_count {
            self.index_stream.clear();
        }
        self
    }

    pub fn as_ref(&self) -> TensorRef<'_> {
        TensorRef {
            name: &self.name,
            element_count: self.element_count,
            nnz: self.nnz,
            index_stream: &self.index_stream,
            values: &self.values,
            mode: self.mode,
        }
    }

    pub fn indices(&self) -> Result<Vec<u64>, CodecError> {
        self.as_ref().indices().collect()
    }
}

/// Borrowed view of one tensor record, from an owned delta or a parsed body.
#[derive(Debug, Clone, Copy)]
pub struct TensorRef<'a> {
    pub name: &'a str,
    pub element_count: u64,
    pub nnz: u64,
    pub index_stream: &'a [u8],
    pub values: &'a [u8],
    pub mode: DeltaMode,
}

impl<'a> TensorRef<'a> {
    pub fn is_dense(&self) -> bool {
        self.nnz > 0 && self.nnz == self.element_count && self.index_stream.is_empty()
    }

    pub fn indices(&self) -> TensorIndices<'a> {
        if self.is_dense() {
            TensorIndices::Dense(0..self.element_count)
        } else {
            TensorIndices::Sparse(IndexStream::new(self.index_stream), self.name)
        }
    }

    /// Checks counts, bounds and value length without touching any target.
    pub fn validate(&self, width: usize) -> Result<(), CodecError> {
        if self.values.len() as u64 != self.nnz * width as u64 {
            return Err(CodecError::ValueLength(self.name.to_string()));
        }
        if self.is_dense() {
            return Ok(());
        }
        varint::validate_indices(self.index_stream, self.nnz, self.element_count).map_err(|source| {
            CodecError::Index {
                name: self.name.to_string(),
                source,
            }
        })
    }

    /// Encoded size of this record in the body.
    pub fn record_len(&self) -> usize {
        2 + self.name.len() + 8 + 8 + 8 + self.index_stream.len() + self.values.len() + 1
    }
}

pub enum TensorIndices<'a> {
    Dense(core::ops::Range<u64>),
    Sparse(IndexStream<'a>, &'a str),
}

impl Iterator for TensorIndices<'_> {
    type Item = Result<u64, CodecError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            TensorIndices::Dense(r) => r.next().map(Ok),
            TensorIndices::Sparse(s, name) => s.next().map(|r| {
                r.map_err(|source| CodecError::Index {
                    name: name.to_string(),
                    source,
                })
            }),
        }
    }
}

/// Destination for encoded bytes.
pub trait ByteSink {
    fn put(&mut self, bytes: &[u8]);
}

impl ByteSink for Vec<u8> {
    fn put(&mut self, bytes: &[u8]) {
        self.extend_from_slice(bytes);
    }
}

impl ByteSink for Hasher {
    fn put(&mut self, bytes: &[u8]) {
        self.update(bytes);
    }
}

/// Discards bytes; used to hash or size a body without buffering it.
pub struct NullSink;

impl ByteSink for NullSink {
    fn put(&mut self, _: &[u8]) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub format_version: u16,
    pub version: u64,
    pub base_version: u64,
    pub element_type: ElementType,
    pub tensor_count: u32,
    pub body_len: u64,
    pub body_hash: Digest,
}

impl CheckpointHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&CHECKPOINT_MAGIC);
        b[4..6].copy_from_slice(&self.format_version.to_le_bytes());
        b[6..14].copy_from_slice(&self.version.to_le_bytes());
        b[14..22].copy_from_slice(&self.base_version.to_le_bytes());
        b[22] = self.element_type.code();
        b[23..27].copy_from_slice(&self.tensor_count.to_le_bytes());
        b[27..35].copy_from_slice(&self.body_len.to_le_bytes());
        b[35..67].copy_from_slice(&self.body_hash.0);
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Truncated);
        }
        if bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(CodecError::BadMagic);
        }
        let format_version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if format_version != FORMAT_VERSION {
            return Err(CodecError::UnsupportedFormat(format_version));
        }
        let element_type = ElementType::from_code(bytes[22]).ok_or(CodecError::UnknownElementType(bytes[22]))?;
        let mut hash = [0u8; 32];
        hash.copy_from_slice(&bytes[35..67]);
        let header = Self {
            format_version,
            version: le_u64(&bytes[6..14]),
            base_version: le_u64(&bytes[14..22]),
            element_type,
            tensor_count: u32::from_le_bytes(bytes[23..27].try_into().unwrap()),
            body_len: le_u64(&bytes[27..35]),
            body_hash: Digest(hash),
        };
        if header.version != header.base_version.wrapping_add(1) {
            return Err(CodecError::VersionGap {
                version: header.version,
                base: header.base_version,
            });
        }
        Ok(header)
    }

    pub fn total_len(&self) -> u64 {
        HEADER_LEN as u64 + self.body_len
    }

    pub fn is_genesis(&self) -> bool {
        self.base_version == GENESIS_BASE
    }
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b[..8].try_into().unwrap())
}

/// Streams tensor records into a sink while hashing them; the header is
/// produced last by [`CheckpointEncoder::finish`].
pub struct CheckpointEncoder<S> {
    sink: S,
    hasher: Hasher,
    version: u64,
    base_version: u64,
    element_type: ElementType,
    tensor_count: u32,
    body_len: u64,
}

impl<S: ByteSink> CheckpointEncoder<S> {
    pub fn new(sink: S, version: u64, base_version: u64, element_type: ElementType) -> Self {
        Self {
            sink,
            hasher: Hasher::new(),
            version,
            base_version,
            element_type,
            tensor_count: 0,
            body_len: 0,
        }
    }

    fn put(&mut self, bytes: &[u8]) {
        self.hasher.update(bytes);
        self.sink.put(bytes);
        self.body_len += bytes.len() as u64;
    }

    pub fn push(&mut self, tensor: TensorRef<'_>) -> Result<(), CodecError> {
        if tensor.name.len() > u16::MAX as usize {
            return Err(CodecError::NameTooLong);
        }
        self.put(&(tensor.name.len() as u16).to_le_bytes());
        self.put(tensor.name.as_bytes());
        self.put(&tensor.element_count.to_le_bytes());
        self.put(&tensor.nnz.to_le_bytes());
        self.put(&(tensor.index_stream.len() as u64).to_le_bytes());
        self.put(tensor.index_stream);
        self.put(tensor.values);
        self.put(&[tensor.mode.code()]);
        self.tensor_count += 1;
        Ok(())
    }

    pub fn body_len(&self) -> u64 {
        self.body_len
    }

    pub fn finish(self) -> (CheckpointHeader, S) {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            version: self.version,
            base_version: self.base_version,
            element_type: self.element_type,
            tensor_count: self.tensor_count,
            body_len: self.body_len,
            body_hash: self.hasher.finish(),
        };
        (header, self.sink)
    }
}

/// A versioned, immutable, hashed delta artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaCheckpoint {
    header: CheckpointHeader,
    tensors: Vec<TensorDelta>,
}

impl DeltaCheckpoint {
    pub fn new(
        version: u64,
        base_version: u64,
        element_type: ElementType,
        tensors: Vec<TensorDelta>,
    ) -> Result<Self, CodecError> {
        if version != base_version.wrapping_add(1) {
            return Err(CodecError::VersionGap {
                version,
                base: base_version,
            });
        }
        let mut enc = CheckpointEncoder::new(NullSink, version, base_version, element_type);
        for t in &tensors {
            t.as_ref().validate(element_type.width())?;
            enc.push(t.as_ref())?;
        }
        let (header, _) = enc.finish();
        Ok(Self { header, tensors })
    }

    /// Dense replace-mode snapshot of `params` (genesis when `version == 0`).
    pub fn snapshot(params: &ParameterSet, version: u64) -> Result<Self, CodecError> {
        let width = params.element_type().width();
        let tensors = params
            .tensors()
            .iter()
            .map(|t| TensorDelta::dense(t.name.clone(), t.data.clone(), width))
            .collect();
        Self::new(version, version.wrapping_sub(1), params.element_type(), tensors)
    }

    pub fn header(&self) -> &CheckpointHeader {
        &self.header
    }

    pub fn version(&self) -> u64 {
        self.header.version
    }

    pub fn base_version(&self) -> u64 {
        self.header.base_version
    }

    pub fn element_type(&self) -> ElementType {
        self.header.element_type
    }

    pub fn body_hash(&self) -> Digest {
        self.header.body_hash
    }

    pub fn tensors(&self) -> &[TensorDelta] {
        &self.tensors
    }

    pub fn serialized_len(&self) -> u64 {
        self.header.total_len()
    }

    pub fn nnz(&self) -> u64 {
        self.tensors.iter().map(|t| t.nnz).sum()
    }

    pub fn index_bytes(&self) -> u64 {
        self.tensors.iter().map(|t| t.index_stream.len() as u64).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header.total_len() as usize);
        out.extend_from_slice(&self.header.to_bytes());
        let mut enc = CheckpointEncoder::new(out, self.header.version, self.header.base_version, self.header.element_type);
        for t in &self.tensors {
            enc.push(t.as_ref()).expect("validated at construction");
        }
        enc.finish().1
    }

    /// Parses and hash-verifies a serialized checkpoint.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let view = CheckpointView::parse(bytes)?;
        let tensors = view
            .tensors()
            .map(|t| {
                t.map(|t| TensorDelta {
                    name: t.name.to_string(),
                    element_count: t.element_count,
                    nnz: t.nnz,
                    index_stream: t.index_stream.to_vec(),
                    values: t.values.to_vec(),
                    mode: t.mode,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            header: view.header,
            tensors,
        })
    }

    pub fn tensor_refs(&self) -> impl Iterator<Item = Result<TensorRef<'_>, CodecError>> + Clone {
        self.tensors.iter().map(|t| Ok(t.as_ref()))
    }
}

/// Zero-copy, hash-verified view over a serialized checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct CheckpointView<'a> {
    header: CheckpointHeader,
    body: &'a [u8],
}

impl<'a> CheckpointView<'a> {
    /// Parses the header, checks the body length and verifies the hash.
    pub fn parse(bytes: &'a [u8]) -> Result<Self, CodecError> {
        let view = Self::parse_unverified(bytes)?;
        if Digest::of(view.body) != view.header.body_hash {
            return Err(CodecError::HashMismatch);
        }
        Ok(view)
    }

    /// Like [`parse`](Self::parse) but skips the digest (the caller already
    /// verified it, e.g. during reassembly).
    pub fn parse_unverified(bytes: &'a [u8]) -> Result<Self, CodecError> {
        let header = CheckpointHeader::parse(bytes)?;
        let total = header.total_len();
        if (bytes.len() as u64) < total {
            return Err(CodecError::Truncated);
        }
        if bytes.len() as u64 > total {
            return Err(CodecError::TrailingBytes);
        }
        let view = Self {
            header,
            body: &bytes[HEADER_LEN..],
        };
        let mut count = 0u32;
        for t in view.tensors() {
            t?;
            count += 1;
        }
        if count != header.tensor_count {
            return Err(CodecError::Truncated);
        }
        Ok(view)
    }

    pub fn header(&self) -> &CheckpointHeader {
        &self.header
    }

    pub fn body(&self) -> &'a [u8] {
        self.body
    }

    pub fn tensors(&self) -> BodyTensors<'a> {
        BodyTensors {
            body: self.body,
            cursor: 0,
            width: self.header.element_type.width(),
            failed: false,
        }
    }
}

/// Iterator over tensor records in a body.
#[derive(Clone)]
pub struct BodyTensors<'a> {
    body: &'a [u8],
    cursor: usize,
    width: usize,
    failed: bool,
}

impl<'a> BodyTensors<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.cursor.checked_add(n).ok_or(CodecError::Truncated)?;
        let s = self.body.get(self.cursor..end).ok_or(CodecError::Truncated)?;
        self.cursor = end;
        Ok(s)
    }

    fn record(&mut self) -> Result<TensorRef<'a>, CodecError> {
        let name_len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let name = core::str::from_utf8(self.take(name_len)?).map_err(|_| CodecError::Truncated)?;
        let element_count = le_u64(self.take(8)?);
        let nnz = le_u64(self.take(8)?);
        let index_len = le_u64(self.take(8)?);
        let index_stream = self.take(usize::try_from(index_len).map_err(|_| CodecError::Truncated)?)?;
        let value_len = nnz
            .checked_mul(self.width as u64)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or(CodecError::Truncated)?;
        let values = self.take(value_len)?;
        let mode = DeltaMode::from_code(self.take(1)?[0])?;
        if nnz > element_count {
            return Err(CodecError::ValueLength(name.to_string()));
        }
        Ok(TensorRef {
            name,
            element_count,
            nnz,
            index_stream,
            values,
            mode,
        })
    }
}

impl<'a> Iterator for BodyTensors<'a> {
    type Item = Result<TensorRef<'a>, CodecError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.cursor >= self.body.len() {
            return None;
        }
        let r = self.record();
        if r.is_err() {
            self.failed = true;
        }
        Some(r)
    }
}

/// Calls `f(lane)` for every lane whose bytes differ.
#[inline]
fn for_each_changed(old: &[u8], new: &[u8], width: usize, mut f: impl FnMut(usize)) {
    debug_assert_eq!(old.len(), new.len());
    const BLOCK: usize = 16;
    let full = old.len() / BLOCK * BLOCK;
    let mut pos = 0;
    while pos < full {
        let a = u128::from_ne_bytes(old[pos..pos + BLOCK].try_into().unwrap());
        let b = u128::from_ne_bytes(new[pos..pos + BLOCK].try_into().unwrap());
        if a != b {
            let mut lane = pos;
            while lane < pos + BLOCK {
                if old[lane..lane + width] != new[lane..lane + width] {
                    f(lane / width);
                }
                lane += width;
            }
        }
        pos += BLOCK;
    }
    let mut lane = full;
    while lane < old.len() {
        if old[lane..lane + width] != new[lane..lane + width] {
            f(lane / width);
        }
        lane += width;
    }
}

fn difference(et: ElementType, old: &[u8], new: &[u8], out: &mut Vec<u8>) {
    match et {
        ElementType::F32 => {
            let a = f32::from_le_bytes(old.try_into().unwrap());
            let b = f32::from_le_bytes(new.try_into().unwrap());
            out.extend_from_slice(&(b - a).to_le_bytes());
        }
        ElementType::Bf16 => {
            let a = bf16_to_f32(u16::from_le_bytes(old.try_into().unwrap()));
            let b = bf16_to_f32(u16::from_le_bytes(new.try_into().unwrap()));
            out.extend_from_slice(&f32_to_bf16(b - a).to_le_bytes());
        }
    }
}

fn add_in_place(et: ElementType, target: &mut [u8], delta: &[u8]) {
    match et {
        ElementType::F32 => {
            let a = f32::from_le_bytes((&*target).try_into().unwrap());
            let d = f32::from_le_bytes(delta.try_into().unwrap());
            target.copy_from_slice(&(a + d).to_le_bytes());
        }
        ElementType::Bf16 => {
            let a = bf16_to_f32(u16::from_le_bytes((&*target).try_into().unwrap()));
            let d = bf16_to_f32(u16::from_le_bytes(delta.try_into().unwrap()));
            target.copy_from_slice(&f32_to_bf16(a + d).to_le_bytes());
        }
    }
}

/// Extracts the delta of one fused tensor. `old` and `new` must already
/// have matching structure.
pub fn extract_tensor(
    old: &ParameterSet,
    new: &ParameterSet,
    fused: &FusedTensor,
    mode: DeltaMode,
) -> Result<TensorDelta, CodecError> {
    let et = new.element_type();
    let width = et.width();
    let mut index_stream = Vec::new();
    let mut values = Vec::new();
    let mut writer = IndexWriter::new(&mut index_stream);
    for c in &fused.components {
        let (Some(o), Some(n)) = (old.get(&c.source), new.get(&c.source)) else {
            return Err(CodecError::UnknownTensor(c.source.clone()));
        };
        if o.data.len() != n.data.len() {
            return Err(CodecError::StructureMismatch(c.source.clone()));
        }
        let mut err = None;
        for_each_changed(&o.data, &n.data, width, |lane| {
            if err.is_some() {
                return;
            }
            if let Err(e) = writer.push(c.offset + lane as u64) {
                err = Some(e);
            }
            let range = lane * width..(lane + 1) * width;
            match mode {
                DeltaMode::Replace => values.extend_from_slice(&n.data[range]),
                DeltaMode::Additive => difference(et, &o.data[range.clone()], &n.data[range], &mut values),
            }
        });
        if let Some(source) = err {
            return Err(CodecError::Index {
                name: fused.name.clone(),
                source,
            });
        }
    }
    let nnz = writer.count() as u64;
    let td = TensorDelta {
        name: fused.name.clone(),
        element_count: fused.element_count(),
        nnz,
        index_stream,
        values,
        mode,
    };
    Ok(td.normalized())
}

/// Bitwise delta between two parameter sets under a fusion map.
pub fn extract_delta(
    old: &ParameterSet,
    new: &ParameterSet,
    fusion: &FusionMap,
    mode: DeltaMode,
    version: u64,
    base_version: u64,
) -> Result<DeltaCheckpoint, CodecError> {
    old.check_same_structure(new)?;
    fusion.validate(new)?;
    let tensors = fusion
        .entries()
        .iter()
        .map(|fused| extract_tensor(old, new, fused, mode))
        .collect::<Result<Vec<_>, _>>()?;
    DeltaCheckpoint::new(version, base_version, new.element_type(), tensors)
}

/// Applies tensor records to a fused-layout parameter set.
///
/// Every record is validated before any element is written, so on error
/// `params` is untouched.
pub fn apply_tensors<'a, I>(params: &mut ParameterSet, element_type: ElementType, tensors: I) -> Result<(), CodecError>
where
    I: Iterator<Item = Result<TensorRef<'a>, CodecError>> + Clone,
{
    if params.element_type() != element_type {
        return Err(CodecError::ElementTypeMismatch);
    }
    let width = element_type.width();
    for t in tensors.clone() {
        let t = t?;
        let target = params
            .get(t.name)
            .ok_or_else(|| CodecError::UnknownTensor(t.name.to_string()))?;
        if target.element_count() != t.element_count {
            return Err(CodecError::ElementCount {
                name: t.name.to_string(),
                expected: target.element_count(),
                found: t.element_count,
            });
        }
        t.validate(width)?;
    }
    for t in tensors {
        let t = t?;
        let target = params.get_mut(t.name).expect("validated");
        if t.is_dense() && t.mode == DeltaMode::Replace {
            target.data.copy_from_slice(t.values);
            continue;
        }
        for (k, index) in t.indices().enumerate() {
            let at = index? as usize * width;
            let value = &t.values[k * width..(k + 1) * width];
            match t.mode {
                DeltaMode::Replace => target.data[at..at + width].copy_from_slice(value),
                DeltaMode::Additive => add_in_place(element_type, &mut target.data[at..at + width], value),
            }
        }
    }
    Ok(())
}

/// Applies an owned checkpoint in place.
pub fn apply_delta(params: &mut ParameterSet, delta: &DeltaCheckpoint) -> Result<(), CodecError> {
    apply_tensors(params, delta.element_type(), delta.tensor_refs())
}

/// Applies a serialized (already parsed and verified) checkpoint in place.
pub fn apply_view(params: &mut ParameterSet, view: &CheckpointView<'_>) -> Result<(), CodecError> {
    apply_tensors(params, view.header().element_type, view.tensors())
}

/// Zero-filled fused-layout parameters shaped after a checkpoint's records;
/// the starting point for applying a genesis snapshot.
pub fn layout_from_view(view: &CheckpointView<'_>) -> Result<ParameterSet, CodecError> {
    let mut params = ParameterSet::new(view.header().element_type);
    for t in view.tensors() {
        let t = t?;
        params.insert_zeroed(t.name, t.element_count)?;
    }
    Ok(params)
}

/// Exact nonzero ratio between two structurally equal sets, where an
/// element counts as changed when its bytes differ.
pub fn compute_rho(old: &ParameterSet, new: &ParameterSet) -> Result<SparsityStats, CodecError> {
    old.check_same_structure(new)?;
    let width = old.element_type().width();
    let mut changed = 0u64;
    for t in old.tensors() {
        let n = new.get(&t.name).expect("checked");
        for_each_changed(&t.data, &n.data, width, |_| changed += 1);
    }
    Ok(SparsityStats::new(old.total_elements(), changed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn bf16_set(tensors: &[(&str, &[u16])]) -> ParameterSet {
        let mut p = ParameterSet::new(ElementType::Bf16);
        for (name, vals) in tensors {
            let data = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
            p.insert(*name, vec![vals.len() as u64], data).unwrap();
        }
        p
    }

    fn lanes(t: &crate::tensor::Tensor) -> Vec<u16> {
        t.data.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
    }

    #[test]
    fn single_change_replace() {
        let old = bf16_set(&[("w", &[1, 2, 3])]);
        let new = bf16_set(&[("w", &[1, 5, 3])]);
        let fusion = FusionMap::identity(&old);
        let d = extract_delta(&old, &new, &fusion, DeltaMode::Replace, 1, 0).unwrap();
        assert_eq!(d.tensors().len(), 1);
        assert_eq!(d.tensors()[0].indices().unwrap(), vec![1]);
        assert_eq!(d.tensors()[0].values, 5u16.to_le_bytes().to_vec());

        let mut p = old.clone();
        apply_delta(&mut p, &d).unwrap();
        assert_eq!(p, new);
    }

    #[test]
    fn identity_update_is_empty() {
        let old = bf16_set(&[("a", &[1, 2]), ("b", &[3, 4, 5])]);
        let fusion = FusionMap::identity(&old);
        let d = extract_delta(&old, &old, &fusion, DeltaMode::Replace, 1, 0).unwrap();
        assert!(d.tensors().iter().all(|t| t.nnz == 0));
        assert_eq!(compute_rho(&old, &old).unwrap().rho, 0.0);
        let mut p = old.clone();
        apply_delta(&mut p, &d).unwrap();
        assert_eq!(p, old);
    }

    #[test]
    fn fused_offsets() {
        let old = bf16_set(&[("l.q_proj", &[0, 0]), ("l.k_proj", &[0, 0]), ("l.v_proj", &[0, 0])]);
        let new = bf16_set(&[("l.q_proj", &[0, 9]), ("l.k_proj", &[0, 0]), ("l.v_proj", &[7, 0])]);
        let fusion = FusionMap::transformer(&old).unwrap();
        let d = extract_delta(&old, &new, &fusion, DeltaMode::Replace, 1, 0).unwrap();
        assert_eq!(d.tensors()[0].name, "l.qkv_proj");
        assert_eq!(d.tensors()[0].indices().unwrap(), vec![1, 4]);

        let mut fused = fusion.fused_layout(&old).unwrap();
        apply_delta(&mut fused, &d).unwrap();
        assert_eq!(fused, fusion.fused_layout(&new).unwrap());
    }

    #[test]
    fn rho_counts_bitwise() {
        let old = bf16_set(&[("a", &[0, 0, 0, 0]), ("b", &[0, 0, 0, 0, 0, 0])]);
        // 0x8000 is -0.0 in bf16: bitwise different from +0.0
        let new = bf16_set(&[("a", &[0, 0x8000, 0, 0]), ("b", &[1, 0, 0, 0, 0, 2])]);
        let s = compute_rho(&old, &new).unwrap();
        assert_eq!((s.total_elements, s.total_nonzeros), (10, 3));
        assert_eq!(s.rho, 0.3);
    }

    #[test]
    fn serialize_roundtrip_and_determinism() {
        let old = bf16_set(&[("a", &[1, 2, 3, 4]), ("b", &[5, 6])]);
        let new = bf16_set(&[("a", &[1, 9, 3, 8]), ("b", &[5, 6])]);
        let d = extract_delta(&old, &new, &FusionMap::identity(&old), DeltaMode::Replace, 4, 3).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(bytes.len() as u64, d.serialized_len());
        assert_eq!(bytes, d.to_bytes());
        let back = DeltaCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(Digest::of(&bytes[HEADER_LEN..]), d.body_hash());
    }

    #[test]
    fn corrupted_body_is_rejected() {
        let old = bf16_set(&[("a", &[1, 2, 3, 4])]);
        let new = bf16_set(&[("a", &[1, 9, 3, 4])]);
        let d = extract_delta(&old, &new, &FusionMap::identity(&old), DeltaMode::Replace, 1, 0).unwrap();
        let mut bytes = d.to_bytes();
        let last = bytes.len() - 2;
        bytes[last] ^= 0x01;
        assert_eq!(CheckpointView::parse(&bytes).unwrap_err(), CodecError::HashMismatch);
    }

    #[test]
    fn header_checks() {
        let d = DeltaCheckpoint::new(1, 0, ElementType::F32, vec![]).unwrap();
        let mut bytes = d.to_bytes();
        bytes[4] = 9;
        assert_eq!(CheckpointView::parse(&bytes).unwrap_err(), CodecError::UnsupportedFormat(9));
        assert!(matches!(
            DeltaCheckpoint::new(3, 1, ElementType::F32, vec![]),
            Err(CodecError::VersionGap { .. })
        ));
        let mut bytes = d.to_bytes();
        bytes.push(0);
        assert_eq!(CheckpointView::parse(&bytes).unwrap_err(), CodecError::TrailingBytes);
    }

    #[test]
    fn apply_is_all_or_nothing() {
        let mut p = bf16_set(&[("a", &[1, 2, 3]), ("b", &[4, 5])]);
        let before = p.clone();
        let good = TensorDelta::from_indices("a", 3, &[0], vec![7, 0], DeltaMode::Replace).unwrap();
        let bad = TensorDelta {
            name: "b".into(),
            element_count: 2,
            nnz: 1,
            index_stream: varint::encode_to_vec(5),
            values: vec![1, 0],
            mode: DeltaMode::Replace,
        };
        let d = DeltaCheckpoint {
            header: DeltaCheckpoint::new(1, 0, ElementType::Bf16, vec![]).unwrap().header,
            tensors: vec![good, bad],
        };
        assert!(matches!(apply_delta(&mut p, &d), Err(CodecError::Index { .. })));
        assert_eq!(p, before);

        let unknown = DeltaCheckpoint::new(
            1,
            0,
            ElementType::Bf16,
            vec![TensorDelta::from_indices("zzz", 3, &[0], vec![7, 0], DeltaMode::Replace).unwrap()],
        )
        .unwrap();
        assert!(matches!(apply_delta(&mut p, &unknown), Err(CodecError::UnknownTensor(_))));
        assert_eq!(p, before);
    }

    #[test]
    fn snapshot_is_dense_and_applies_on_zeros() {
        let p = bf16_set(&[("a", &[1, 2, 3]), ("b", &[4, 5])]);
        let g = DeltaCheckpoint::snapshot(&p, 0).unwrap();
        assert_eq!(g.base_version(), GENESIS_BASE);
        assert!(g.tensors().iter().all(|t| t.index_stream.is_empty()));
        let bytes = g.to_bytes();
        let view = CheckpointView::parse(&bytes).unwrap();
        let mut fresh = layout_from_view(&view).unwrap();
        apply_view(&mut fresh, &view).unwrap();
        assert_eq!(lanes(fresh.get("a").unwrap()), [1, 2, 3]);
        assert_eq!(fresh.digest(), {
            let mut flat = ParameterSet::new(ElementType::Bf16);
            flat.insert("a", vec![3], p.get("a").unwrap().data.clone()).unwrap();
            flat.insert("b", vec![2], p.get("b").unwrap().data.clone()).unwrap();
            flat.digest()
        });
    }

    #[test]
    fn full_change_becomes_dense() {
        let old = bf16_set(&[("a", &[1, 2])]);
        let new = bf16_set(&[("a", &[3, 4])]);
        let d = extract_delta(&old, &new, &FusionMap::identity(&old), DeltaMode::Replace, 1, 0).unwrap();
        assert!(d.tensors()[0].index_stream.is_empty());
        assert_eq!(d.tensors()[0].indices().unwrap(), vec![0, 1]);
    }

    #[test]
    fn additive_mode_f32() {
        let mk = |v: &[f32]| {
            let mut p = ParameterSet::new(ElementType::F32);
            p.insert("w", vec![v.len() as u64], v.iter().flat_map(|x| x.to_le_bytes()).collect()).unwrap();
            p
        };
        let old = mk(&[1.0, 2.0, 3.0]);
        let new = mk(&[1.0, 2.5, 3.0]);
        let d = extract_delta(&old, &new, &FusionMap::identity(&old), DeltaMode::Additive, 1, 0).unwrap();
        assert_eq!(d.tensors()[0].values, 0.5f32.to_le_bytes().to_vec());
        let mut p = old.clone();
        apply_delta(&mut p, &d).unwrap();
        assert_eq!(p, new);
    }

    #[test]
    fn structure_mismatch() {
        let a = bf16_set(&[("a", &[1, 2])]);
        let b = bf16_set(&[("b", &[1, 2])]);
        let c = bf16_set(&[("a", &[1, 2, 3])]);
        let f = FusionMap::identity(&a);
        assert!(extract_delta(&a, &b, &f, DeltaMode::Replace, 1, 0).is_err());
        assert!(extract_delta(&a, &c, &f, DeltaMode::Replace, 1, 0).is_err());
        assert!(compute_rho(&a, &c).is_err());
    }
}
