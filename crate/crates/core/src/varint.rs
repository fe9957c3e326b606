//! Unsigned LEB128 varints and gap-encoded index streams.
//!
//! An index stream stores the first index as an absolute varint and every
//! following index as the varint of its (strictly positive) gap to the
//! predecessor. Decoding rejects truncated, overlong and >64-bit encodings,
//! so every accepted stream has exactly one byte representation.

use alloc::vec::Vec;

/// Longest encoding of a `u64`.
pub const MAX_VARINT_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum VarintError {
    #[error("varint truncated at offset {0}")]
    Truncated(usize),
    #[error("non-minimal varint at offset {0}")]
    Overlong(usize),
    #[error("varint at offset {0} exceeds 64 bits")]
    Overflow(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum IndexError {
    #[error("index {index} at position {position} does not increase")]
    NotIncreasing { position: usize, index: u64 },
    #[error("index {index} out of range for {bound} elements")]
    OutOfRange { index: u64, bound: u64 },
    #[error("index stream holds {found} entries, expected {expected}")]
    CountMismatch { expected: u64, found: u64 },
    #[error("gap overflows u64 after index {0}")]
    GapOverflow(u64),
    #[error(transparent)]
    Varint(#[from] VarintError),
}

/// Number of bytes `encode` emits for `value`.
#[inline]
pub fn encoded_len(value: u64) -> usize {
    let bits = 64 - (value | 1).leading_zeros() as usize;
    bits.div_ceil(7)
}

/// Appends the minimal LEB128 encoding of `value`.
#[inline]
pub fn encode(mut value: u64, out: &mut Vec<u8>) {
    while value >= 0x80 {
        out.push((value as u8) | 0x80);
        value >>= 7;
    }
    out.push(value as u8);
}

pub fn encode_to_vec(value: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(value));
    encode(value, &mut out);
    out
}

/// Decodes one varint starting at `cursor`; returns the value and the
/// cursor just past it.
#[inline]
pub fn decode(bytes: &[u8], cursor: usize) -> Result<(u64, usize), VarintError> {
    let mut value = 0u64;
    let mut shift = 0u32;
    let mut pos = cursor;
    loop {
        let Some(&byte) = bytes.get(pos) else {
            return Err(VarintError::Truncated(cursor));
        };
        let payload = (byte & 0x7f) as u64;
        if shift == 63 && payload > 1 {
            return Err(VarintError::Overflow(cursor));
        }
        value |= payload << shift;
        pos += 1;
        if byte & 0x80 == 0 {
            // a zero final byte after other bytes adds nothing: overlong
            if byte == 0 && pos - cursor > 1 {
                return Err(VarintError::Overlong(cursor));
            }
            return Ok((value, pos));
        }
        shift += 7;
        if shift > 63 {
            return Err(VarintError::Overflow(cursor));
        }
    }
}

/// Gap-encodes a strictly increasing index list.
pub fn encode_indices(indices: &[u64]) -> Result<Vec<u8>, IndexError> {
    let mut out = Vec::with_capacity(indices.len() + indices.len() / 4);
    let mut writer = IndexWriter::new(&mut out);
    for &index in indices {
        writer.push(index)?;
    }
    Ok(out)
}

/// Incremental gap encoder over a caller-owned buffer.
pub struct IndexWriter<'a> {
    out: &'a mut Vec<u8>,
    prev: Option<u64>,
    count: usize,
}

impl<'a> IndexWriter<'a> {
    pub fn new(out: &'a mut Vec<u8>) -> Self {
        Self {
            out,
            prev: None,
            count: 0,
        }
    }

    #[inline]
    pub fn push(&mut self, index: u64) -> Result<(), IndexError> {
        let value = match self.prev {
            None => index,
            Some(prev) if index > prev => index - prev,
            Some(_) => {
                return Err(IndexError::NotIncreasing {
                    position: self.count,
                    index,
                })
            }
        };
        encode(value, self.out);
        self.prev = Some(index);
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// Iterator over the absolute indices of a gap-encoded stream.
///
/// Yields an error (and then stops) on malformed varints, zero gaps or
/// arithmetic overflow.
#[derive(Debug, Clone)]
pub struct IndexStream<'a> {
    bytes: &'a [u8],
    cursor: usize,
    prev: Option<u64>,
    failed: bool,
}

impl<'a> IndexStream<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            cursor: 0,
            prev: None,
            failed: false,
        }
    }
}

impl Iterator for IndexStream<'_> {
    type Item = Result<u64, IndexError>;

    #[inline]
    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.cursor >= self.bytes.len() {
            return None;
        }
        let step = decode(self.bytes, self.cursor).map_err(IndexError::from).and_then(|(value, next)| {
            self.cursor = next;
            match self.prev {
                None => Ok(value),
                Some(prev) if value == 0 => Err(IndexError::NotIncreasing {
                    position: 0,
                    index: prev,
                }),
                Some(prev) => prev.checked_add(value).ok_or(IndexError::GapOverflow(prev)),
            }
        });
        match step {
            Ok(index) => {
                self.prev = Some(index);
                Some(Ok(index))
            }
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Decodes a full stream, checking its length and upper bound.
pub fn decode_indices(bytes: &[u8], expected: u64, bound: u64) -> Result<Vec<u64>, IndexError> {
    let mut out = Vec::with_capacity(expected as usize);
    for index in IndexStream::new(bytes) {
        let index = index?;
        if index >= bound {
            return Err(IndexError::OutOfRange { index, bound });
        }
        out.push(index);
    }
    if out.len() as u64 != expected {
        return Err(IndexError::CountMismatch {
            expected,
            found: out.len() as u64,
        });
    }
    Ok(out)
}

/// Validates a stream without materializing it.
pub fn validate_indices(bytes: &[u8], expected: u64, bound: u64) -> Result<(), IndexError> {
    let mut found = 0u64;
    let mut last = None;
    for index in IndexStream::new(bytes) {
        let index = index?;
        found += 1;
        last = Some(index);
    }
    if let Some(index) = last {
        if index >= bound {
            return Err(IndexError::OutOfRange { index, bound });
        }
    }
    if found != expected {
        return Err(IndexError::CountMismatch { expected, found });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn worked_example_198() {
        assert_eq!(encode_to_vec(198), vec![0xC6, 0x01]);
        assert_eq!(decode(&[0xC6, 0x01], 0), Ok((198, 2)));
    }

    #[test]
    fn small_values() {
        assert_eq!(encode_to_vec(70), vec![0x46]);
        assert_eq!(encode_to_vec(0), vec![0x00]);
        assert_eq!(encode_to_vec(188), vec![0xBC, 0x01]);
        assert_eq!(decode(&[0x46], 0), Ok((70, 1)));
    }

    #[test]
    fn max_value_is_ten_bytes() {
        let bytes = encode_to_vec(u64::MAX);
        assert_eq!(bytes.len(), MAX_VARINT_LEN);
        assert_eq!(decode(&bytes, 0), Ok((u64::MAX, 10)));
    }

    #[test]
    fn truncated_and_overlong() {
        assert_eq!(decode(&[0x80], 0), Err(VarintError::Truncated(0)));
        assert_eq!(decode(&[], 0), Err(VarintError::Truncated(0)));
        // 5 encoded with a redundant zero continuation
        assert_eq!(decode(&[0x85, 0x00], 0), Err(VarintError::Overlong(0)));
        assert_eq!(decode(&[0x80, 0x80, 0x00], 0), Err(VarintError::Overlong(0)));
    }

    #[test]
    fn overflow_rejected() {
        let mut bytes = vec![0xFF; 9];
        bytes.push(0x02);
        assert_eq!(decode(&bytes, 0), Err(VarintError::Overflow(0)));
        let mut eleven = vec![0x80; 10];
        eleven.push(0x01);
        assert!(decode(&eleven, 0).is_err());
    }

    #[test]
    fn cursor_advances() {
        let bytes = [0x05, 0xC6, 0x01, 0x46];
        let (a, c) = decode(&bytes, 0).unwrap();
        let (b, c) = decode(&bytes, c).unwrap();
        let (d, c) = decode(&bytes, c).unwrap();
        assert_eq!((a, b, d, c), (5, 198, 70, 4));
    }

    #[test]
    fn index_examples() {
        assert_eq!(encode_indices(&[5, 12, 200]).unwrap(), vec![0x05, 0x07, 0xBC, 0x01]);
        assert_eq!(encode_indices(&[0]).unwrap(), vec![0x00]);
        assert!(encode_indices(&[]).unwrap().is_empty());
        assert_eq!(
            encode_indices(&[3, 3]),
            Err(IndexError::NotIncreasing { position: 1, index: 3 })
        );
        assert!(encode_indices(&[4, 2]).is_err());
    }

    #[test]
    fn decode_checks_count_and_bound() {
        let stream = encode_indices(&[5, 12, 200]).unwrap();
        assert_eq!(decode_indices(&stream, 3, 201).unwrap(), vec![5, 12, 200]);
        assert!(matches!(
            decode_indices(&stream, 3, 200),
            Err(IndexError::OutOfRange { index: 200, .. })
        ));
        assert!(matches!(
            decode_indices(&stream, 2, 1000),
            Err(IndexError::CountMismatch { .. })
        ));
        // zero gap after the first index
        assert!(decode_indices(&[0x05, 0x00], 2, 100).is_err());
    }

    #[test]
    fn encoded_len_matches_encoder() {
        for v in [0u64, 1, 127, 128, 16383, 16384, u32::MAX as u64, u64::MAX] {
            assert_eq!(encoded_len(v), encode_to_vec(v).len());
        }
    }

    proptest! {
        #[test]
        fn roundtrip(v in any::<u64>()) {
            let bytes = encode_to_vec(v);
            prop_assert_eq!(bytes.len(), encoded_len(v));
            prop_assert_eq!(decode(&bytes, 0), Ok((v, bytes.len())));
        }

        #[test]
        fn index_roundtrip(mut xs in proptest::collection::vec(0u64..1_000_000, 0..200)) {
            xs.sort_unstable();
            xs.dedup();
            let stream = encode_indices(&xs).unwrap();
            let back = decode_indices(&stream, xs.len() as u64, 1_000_000).unwrap();
            prop_assert_eq!(back, xs);
        }
    }
}
