//! Analytic checkpoint-size model.
//!
//! For uniformly random change positions at density `p`, a gap `G` is
//! geometric on `{1, 2, ...}` with `P(G >= g) = (1 - p)^(g - 1)`, and a
//! varint spends one extra byte for every power of 128 that `G` reaches:
//!
//! ```text
//! E[bytes per gap] = 1 + sum_{k >= 1} (1 - p)^(128^k - 1)
//! ```
//!
//! Clustered workloads are modelled as `K` changes of which a fraction `f`
//! lie in runs of mean length `L`. The run starts and the isolated changes
//! form `C = (1 - f) K + f K / L` clumps whose entry gaps are geometric at
//! density `C / N`; the remaining `K - C` in-run gaps cost one byte each.

use crate::codec::HEADER_LEN;

/// Fixed bytes of one tensor record besides its name, indices and values.
pub const TENSOR_RECORD_OVERHEAD: u64 = 2 + 8 + 8 + 8 + 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayloadParams {
    pub elements: u64,
    pub rho: f64,
    pub width: usize,
    pub tensor_count: u64,
    /// Sum of tensor name lengths.
    pub name_bytes: u64,
    /// Fraction of changes that sit inside clustered runs.
    pub cluster_fraction: f64,
    pub mean_run: f64,
}

impl PayloadParams {
    pub fn uniform(elements: u64, rho: f64, width: usize) -> Self {
        Self {
            elements,
            rho,
            width,
            tensor_count: 1,
            name_bytes: 1,
            cluster_fraction: 0.0,
            mean_run: 1.0,
        }
    }

    /// Changes generated for one step: `ceil(rho * N)`.
    pub fn nnz(&self) -> u64 {
        let exact = self.rho * self.elements as f64;
        let floor = exact as u64;
        let n = if (floor as f64) < exact { floor + 1 } else { floor };
        n.min(self.elements)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayloadEstimate {
    pub nnz: u64,
    pub header_bytes: u64,
    pub value_bytes: u64,
    pub index_bytes: f64,
    pub total_bytes: f64,
    /// `index_bytes / nnz`.
    pub index_bytes_per_entry: f64,
}

/// `x^n` by repeated squaring.
fn powu(mut x: f64, mut n: u64) -> f64 {
    let mut acc = 1.0;
    while n > 0 {
        if n & 1 == 1 {
            acc *= x;
        }
        x *= x;
        n >>= 1;
    }
    acc
}

/// Expected varint length of a geometric gap at change density `p`.
pub fn expected_gap_bytes(p: f64) -> f64 {
    if p >= 1.0 {
        return 1.0;
    }
    let q = 1.0 - p;
    let mut e = 1.0;
    let mut threshold: u64 = 128;
    loop {
        let term = powu(q, threshold - 1);
        e += term;
        if term < 1e-15 {
            break;
        }
        match threshold.checked_mul(128) {
            Some(t) => threshold = t,
            None => break,
        }
    }
    e
}

/// Container header plus per-tensor record overhead.
pub fn header_bytes(params: &PayloadParams) -> u64 {
    HEADER_LEN as u64 + params.tensor_count * TENSOR_RECORD_OVERHEAD + params.name_bytes
}

pub fn expected_delta(params: &PayloadParams) -> PayloadEstimate {
    let nnz = params.nnz();
    let header = header_bytes(params);
    let value_bytes = nnz * params.width as u64;
    let index_bytes = if nnz == 0 {
        0.0
    } else if nnz == params.elements {
        // every position changed: dense record, empty index stream
        0.0
    } else {
        let k = nnz as f64;
        let f = params.cluster_fraction.clamp(0.0, 1.0);
        let l = params.mean_run.max(1.0);
        let clumps = ((1.0 - f) * k + f * k / l).max(1.0);
        let p = clumps / params.elements as f64;
        clumps * expected_gap_bytes(p) + (k - clumps)
    };
    let total = header as f64 + value_bytes as f64 + index_bytes;
    PayloadEstimate {
        nnz,
        header_bytes: header,
        value_bytes,
        index_bytes,
        total_bytes: total,
        index_bytes_per_entry: if nnz == 0 { 0.0 } else { index_bytes / nnz as f64 },
    }
}

/// Dense snapshot of every element.
pub fn full_bytes(params: &PayloadParams) -> u64 {
    header_bytes(params) + params.elements * params.width as u64
}

/// Fixed-width baseline: 4-byte index plus a 2-byte value per entry.
pub fn naive_bytes(nnz: u64) -> u64 {
    nnz * 6
}
