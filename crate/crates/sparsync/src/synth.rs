//! Synthetic model and training-step generator standing in for a real
//! optimizer.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsync_core::{ElementType, ParameterSet};

/// Relative sizes of the per-layer projections.
const LAYER_PARTS: [(&str, u64); 7] = [
    ("q_proj", 4),
    ("k_proj", 1),
    ("v_proj", 1),
    ("o_proj", 4),
    ("gate_proj", 11),
    ("up_proj", 11),
    ("down_proj", 11),
];

/// Layer count used for a model of `elements` parameters.
pub fn layer_count(elements: u64) -> u64 {
    (elements / 4_000_000).clamp(1, 32)
}

/// A decoder-shaped parameter set of exactly `elements` scalars filled with
/// seeded random bit patterns. Models smaller than 1024 elements are a
/// single `weight` tensor.
pub fn transformer_model(elements: u64, element_type: ElementType, seed: u64) -> ParameterSet {
    assert!(elements >= 1);
    let mut shapes: Vec<(String, u64)> = Vec::new();
    if elements < 1024 {
        shapes.push(("weight".into(), elements));
    } else {
        let layers = layer_count(elements);
        let unit_total: u64 = LAYER_PARTS.iter().map(|p| p.1).sum();
        let per_layer = elements * 9 / 10 / layers;
        let unit = (per_layer / unit_total).max(1);
        let mut used = 0;
        let mut body = Vec::new();
        for l in 0..layers {
            for (part, w) in LAYER_PARTS {
                body.push((format!("layers.{l}.{part}"), unit * w));
                used += unit * w;
            }
        }
        shapes.push(("embed_tokens".into(), elements - used));
        shapes.extend(body);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new(element_type);
    for (name, n) in shapes {
        let mut data = vec![0u8; n as usize * element_type.width()];
        rng.fill_bytes(&mut data);
        p.insert(name, vec![n], data).expect("fresh names");
    }
    p
}

/// Seeded stand-in for one optimizer step: changes exactly `ceil(rho * N)`
/// scalars, a `cluster_fraction` of them in runs of geometric length with
/// mean `mean_run` and the rest at uniform positions. Each chosen scalar
/// is XORed with a nonzero random pattern, so it always changes.
pub struct UpdateGenerator {
    rng: ChaCha8Rng,
    rho: f64,
    cluster_fraction: f64,
    mean_run: f64,
    marks: Vec<u64>,
}

impl UpdateGenerator {
    pub fn new(seed: u64, rho: f64, cluster_fraction: f64, mean_run: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_u64.rotate_left(40)),
            rho,
            cluster_fraction: cluster_fraction.clamp(0.0, 1.0),
            mean_run: mean_run.max(1.0),
            marks: Vec::new(),
        }
    }

    pub fn changes_for(&self, elements: u64) -> u64 {
        sparsync_core::payload::PayloadParams::uniform(elements, self.rho, 1).nnz()
    }

    fn mark(&mut self, i: u64) -> bool {
        let (w, b) = ((i / 64) as usize, i % 64);
        let fresh = self.marks[w] & (1 << b) == 0;
        self.marks[w] |= 1 << b;
        fresh
    }

    /// Picks the flat positions of one step, ascending.
    pub fn positions(&mut self, n: u64) -> Vec<u64> {
        let k = self.changes_for(n);
        if k == n {
            return (0..n).collect();
        }
        self.marks.clear();
        self.marks.resize(n.div_ceil(64) as usize, 0);
        let clustered_target = (k as f64 * self.cluster_fraction).round() as u64;
        let mut count = 0u64;
        let p_end = 1.0 / self.mean_run;
        while count < clustered_target {
            let mut i = self.rng.random_range(0..n);
            loop {
                if self.mark(i) {
                    count += 1;
                }
                i += 1;
                if count >= clustered_target || i >= n || self.rng.random::<f64>() < p_end {
                    break;
                }
            }
        }
        while count < k {
            let i = self.rng.random_range(0..n);
            if self.mark(i) {
                count += 1;
            }
        }
        let mut out = Vec::with_capacity(k as usize);
        for (w, &bits) in self.marks.iter().enumerate() {
            let mut b = bits;
            while b != 0 {
                let t = b.trailing_zeros() as u64;
                out.push(w as u64 * 64 + t);
                b &= b - 1;
            }
        }
        out
    }

    /// Mutates `params` in place; returns the number of changed scalars.
    pub fn step(&mut self, params: &mut ParameterSet) -> u64 {
        let n = params.total_elements();
        let positions = self.positions(n);
        let width = params.element_type().width();
        let mut tensors = params.tensors_mut().iter_mut();
        let mut current = tensors.next();
        let mut base = 0u64;
        for &pos in &positions {
            while let Some(t) = current.as_ref() {
                if pos < base + t.element_count() {
                    break;
                }
                base += t.element_count();
                current = tensors.next();
            }
            let t = current.as_mut().expect("position within the model");
            let at = (pos - base) as usize * width;
            let mut pattern = [0u8; 4];
            while pattern[..width].iter().all(|&b| b == 0) {
                self.rng.fill_bytes(&mut pattern[..width]);
            }
            for (d, p) in t.data[at..at + width].iter_mut().zip(&pattern) {
                *d ^= p;
            }
        }
        positions.len() as u64
    }
}
