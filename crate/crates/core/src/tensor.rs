//! Named flat tensors carried as opaque fixed-width lanes.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::codec::CodecError;
use crate::hash::{Digest, Hasher};

/// Scalar payload type. Values are never interpreted except by additive deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementType {
    /// 16-bit lanes, bfloat16 when interpreted arithmetically.
    Bf16,
    F32,
}

impl ElementType {
    pub const fn width(self) -> usize {
        match self {
            ElementType::Bf16 => 2,
            ElementType::F32 => 4,
        }
    }

    pub const fn code(self) -> u8 {
        match self {
            ElementType::Bf16 => 0,
            ElementType::F32 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ElementType::Bf16),
            1 => Some(ElementType::F32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<u64>,
    /// `element_count * width` bytes, little-endian lanes.
    pub data: Vec<u8>,
}

impl Tensor {
    pub fn element_count(&self) -> u64 {
        self.shape.iter().product()
    }
}

/// Ordered collection of uniquely named tensors sharing one element type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterSet {
    element_type: ElementType,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParameterSet {
    pub fn new(element_type: ElementType) -> Self {
        Self {
            element_type,
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn element_type(&self) -> ElementType {
        self.element_type
    }

    /// Adds a tensor, checking the shape against the data length.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<u64>, data: Vec<u8>) -> Result<(), CodecError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(CodecError::DuplicateTensor(name));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(CodecError::BadShape(name));
        }
        let count: u64 = shape.iter().product();
        if count * self.element_type.width() as u64 != data.len() as u64 {
            return Err(CodecError::BadShape(name));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push(Tensor { name, shape, data });
        Ok(())
    }

    /// Adds a zero-filled flat tensor.
    pub fn insert_zeroed(&mut self, name: impl Into<String>, element_count: u64) -> Result<(), CodecError> {
        let bytes = element_count as usize * self.element_type.width();
        self.insert(name, vec![element_count], vec![0u8; bytes])
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> u64 {
        self.tensors.iter().map(Tensor::element_count).sum()
    }

    /// Checks that `other` has the same names, shapes and element type.
    pub fn check_same_structure(&self, other: &ParameterSet) -> Result<(), CodecError> {
        if self.element_type != other.element_type {
            return Err(CodecError::ElementTypeMismatch);
        }
        if self.tensors.len() != other.tensors.len() {
            return Err(CodecError::StructureMismatch("tensor count differs".to_string()));
        }
        for t in &self.tensors {
            match other.get(&t.name) {
                Some(o) if o.shape == t.shape => {}
                Some(_) => return Err(CodecError::StructureMismatch(t.name.clone())),
                None => return Err(CodecError::UnknownTensor(t.name.clone())),
            }
        }
        Ok(())
    }

    /// Digest over element type, names, shapes and data in tensor order.
    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.update(&[self.element_type.code()]);
        for t in &self.tensors {
            h.update(&(t.name.len() as u64).to_le_bytes());
            h.update(t.name.as_bytes());
            h.update(&(t.shape.len() as u64).to_le_bytes());
            for d in &t.shape {
                h.update(&d.to_le_bytes());
            }
            h.update(&t.data);
        }
        h.finish()
    }
}

/// Round-to-nearest-even f32 -> bfloat16.
pub fn f32_to_bf16(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return ((bits >> 16) as u16) | 0x0040;
    }
    let round = 0x7FFF + ((bits >> 16) & 1);
    (bits.wrapping_add(round) >> 16) as u16
}

pub fn bf16_to_f32(x: u16) -> f32 {
    f32::from_bits((x as u32) << 16)
}
