//! Fused inference naming: several source tensors addressed as one flat
//! tensor by stacking them in a fixed order at deterministic offsets.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::codec::CodecError;
use crate::tensor::ParameterSet;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionComponent {
    pub source: String,
    pub offset: u64,
    pub element_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusedTensor {
    pub name: String,
    pub components: Vec<FusionComponent>,
}

impl FusedTensor {
    pub fn element_count(&self) -> u64 {
        self.components.iter().map(|c| c.element_count).sum()
    }
}

/// Suffix groups fused by [`FusionMap::transformer`], in stacking order.
pub const TRANSFORMER_GROUPS: &[(&str, &[&str])] = &[
    ("qkv_proj", &["q_proj", "k_proj", "v_proj"]),
    ("gate_up_proj", &["gate_proj", "up_proj"]),
];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FusionMap {
    entries: Vec<FusedTensor>,
}

impl FusionMap {
    /// One fused tensor per source, same name.
    pub fn identity(params: &ParameterSet) -> Self {
        let entries = params
            .tensors()
            .iter()
            .map(|t| FusedTensor {
                name: t.name.clone(),
                components: alloc::vec![FusionComponent {
                    source: t.name.clone(),
                    offset: 0,
                    element_count: t.element_count(),
                }],
            })
            .collect();
        Self { entries }
    }

    /// Explicit groups `(fused_name, [sources...])`; every source not named
    /// in a group keeps its own name. Fused entries appear at the position of
    /// their first source.
    pub fn with_groups(params: &ParameterSet, groups: &[(String, Vec<String>)]) -> Result<Self, CodecError> {
        let mut grouped = BTreeSet::new();
        for (fused, sources) in groups {
            if sources.is_empty() {
                return Err(CodecError::Fusion(alloc::format!("{fused} has no sources")));
            }
            for s in sources {
                if params.get(s).is_none() {
                    return Err(CodecError::UnknownTensor(s.clone()));
                }
                if !grouped.insert(s.clone()) {
                    return Err(CodecError::Fusion(alloc::format!("{s} fused twice")));
                }
            }
        }
        let mut entries = Vec::new();
        let mut emitted = BTreeSet::new();
        for t in params.tensors() {
            if !grouped.contains(&t.name) {
                entries.push(FusedTensor {
                    name: t.name.clone(),
                    components: alloc::vec![FusionComponent {
                        source: t.name.clone(),
                        offset: 0,
                        element_count: t.element_count(),
                    }],
                });
                continue;
            }
            let (fused, sources) = groups
                .iter()
                .find(|(_, sources)| sources.contains(&t.name))
                .expect("grouped source belongs to a group");
            if !emitted.insert(fused.clone()) {
                continue;
            }
            let mut offset = 0;
            let mut components = Vec::with_capacity(sources.len());
            for s in sources {
                let count = params.get(s).map(|t| t.element_count()).unwrap_or(0);
                components.push(FusionComponent {
                    source: s.clone(),
                    offset,
                    element_count: count,
                });
                offset += count;
            }
            entries.push(FusedTensor {
                name: fused.clone(),
                components,
            });
        }
        let map = Self { entries };
        map.validate(params)?;
        Ok(map)
    }

    /// Fuses `<prefix>.q_proj/.k_proj/.v_proj` into `<prefix>.qkv_proj` and
    /// `<prefix>.gate_proj/.up_proj` into `<prefix>.gate_up_proj` wherever
    /// every member of a group is present.
    pub fn transformer(params: &ParameterSet) -> Result<Self, CodecError> {
        let mut groups = Vec::new();
        for t in params.tensors() {
            let Some((prefix, leaf)) = t.name.rsplit_once('.') else {
                continue;
            };
            for (fused, members) in TRANSFORMER_GROUPS {
                if members[0] != leaf {
                    continue;
                }
                let sources: Vec<String> = members.iter().map(|m| alloc::format!("{prefix}.{m}")).collect();
                if sources.iter().all(|s| params.get(s).is_some()) {
                    groups.push((alloc::format!("{prefix}.{fused}"), sources));
                }
            }
        }
        Self::with_groups(params, &groups)
    }

    pub fn entries(&self) -> &[FusedTensor] {
        &self.entries
    }

    pub fn get(&self, fused_name: &str) -> Option<&FusedTensor> {
        self.entries.iter().find(|e| e.name == fused_name)
    }

    /// Checks stacking offsets, source disjointness and source presence.
    pub fn validate(&self, params: &ParameterSet) -> Result<(), CodecError> {
        let mut seen = BTreeSet::new();
        let mut names = BTreeSet::new();
        for e in &self.entries {
            if !names.insert(e.name.as_str()) {
                return Err(CodecError::Fusion(alloc::format!("fused name {} repeated", e.name)));
            }
            let mut expected = 0u64;
            for c in &e.components {
                let Some(t) = params.get(&c.source) else {
                    return Err(CodecError::UnknownTensor(c.source.clone()));
                };
                if c.offset != expected || c.element_count != t.element_count() {
                    return Err(CodecError::Fusion(alloc::format!("bad offset for {}", c.source)));
                }
                if !seen.insert(c.source.as_str()) {
                    return Err(CodecError::Fusion(alloc::format!("{} fused twice", c.source)));
                }
                expected += c.element_count;
            }
        }
        Ok(())
    }

    /// Digest `fused_layout(params).digest()` would return, without
    /// materializing the fused copy.
    pub fn fused_digest(&self, params: &ParameterSet) -> Result<crate::hash::Digest, CodecError> {
        self.validate(params)?;
        let mut h = crate::hash::Hasher::new();
        h.update(&[params.element_type().code()]);
        for e in &self.entries {
            h.update(&(e.name.len() as u64).to_le_bytes());
            h.update(e.name.as_bytes());
            h.update(&1u64.to_le_bytes());
            h.update(&e.element_count().to_le_bytes());
            for c in &e.components {
                h.update(&params.get(&c.source).expect("validated").data);
            }
        }
        Ok(h.finish())
    }

    /// Builds the flat fused-layout parameter set an inference engine holds.
    pub fn fused_layout(&self, params: &ParameterSet) -> Result<ParameterSet, CodecError> {
        self.validate(params)?;
        let mut out = ParameterSet::new(params.element_type());
        for e in &self.entries {
            let mut data = Vec::with_capacity(e.element_count() as usize * params.element_type().width());
            for c in &e.components {
                data.extend_from_slice(&params.get(&c.source).expect("validated").data);
            }
            if e.element_count() == 0 {
                return Err(CodecError::BadShape(e.name.to_string()));
            }
            out.insert(e.name.clone(), alloc::vec![e.element_count()], data)?;
        }
        Ok(out)
    }
}
