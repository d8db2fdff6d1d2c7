//! Exact flat L2 search over unit-normalised vectors.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EXBKNN\0\0";
const VERSION: u32 = 1;

/// Immutable store of unit vectors with a per-vector label sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    vectors: Vec<f32>,
    labels: Vec<u32>,
    zero: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Squared L2 distance.
    pub distance: f64,
}

/// Scale a vector to unit L2 norm. Returns `false` (and leaves zeros) for a
/// zero vector.
pub fn normalize(v: &mut [f32]) -> bool {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    true
}

/// Squared L2 distance accumulated in 64-bit in element order.
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

impl FlatIndex {
    pub fn build(vectors: &[Vec<f32>], labels: &[u32]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::invalid("cannot build an index from no vectors"))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::invalid("vectors must have positive dimension"));
        }
        if labels.len() != vectors.len() {
            return Err(Error::shape("index labels", vectors.len(), labels.len()));
        }
        let mut flat = Vec::with_capacity(dim * vectors.len());
        let mut zero = Vec::with_capacity(vectors.len());
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::shape(format!("index vector {i}"), dim, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("index vector {i} is not finite")));
            }
            let mut u = v.clone();
            zero.push(!normalize(&mut u));
            flat.extend(u);
        }
        Ok(Self {
            dim,
            vectors: flat,
            labels: labels.to_vec(),
            zero,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn is_zero(&self, i: usize) -> bool {
        self.zero[i]
    }

    /// The `k` nearest stored vectors to the normalised probe, ascending by
    /// squared distance, ties to the lower index.
    pub fn query(&self, probe: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        if probe.len() != self.dim {
            return Err(Error::shape("knn probe", self.dim, probe.len()));
        }
        if k > self.len() {
            return Err(Error::invalid(format!(
                "k = {k} exceeds the {} stored vectors",
                self.len()
            )));
        }
        let mut p = probe.to_vec();
        normalize(&mut p);
        let mut all: Vec<Neighbor> = (0..self.len())
            .map(|i| Neighbor {
                index: i,
                distance: squared_distance(&p, self.vector(i)),
            })
            .collect();
        if k < all.len() && k > 0 {
            all.select_nth_unstable_by(k - 1, neighbor_order);
        }
        all.truncate(k);
        all.sort_by(neighbor_order);
        Ok(all)
    }

    /// Fraction of the `k` nearest neighbours whose label equals `label`.
    pub fn agreement(&self, probe: &[f32], k: usize, label: u32) -> Result<f64> {
        if k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        let hits = self
            .query(probe, k)?
            .iter()
            .filter(|n| self.labels[n.index] == label)
            .count();
        Ok(hits as f64 / k as f64)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.vectors.len() * 4 + self.len() * 5);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend(self.zero.iter().map(|z| *z as u8));
        out
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |loc: &str, msg: String| Error::format(origin, loc, msg);
        if bytes.len() < 28 || &bytes[..8] != MAGIC {
            return Err(bad("offset 0", "not an index file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad("offset 8", format!("unsupported version {version}")));
        }
        let dim = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
        let expected = dim
            .checked_mul(count)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(28 + count * 5));
        if expected != Some(bytes.len()) {
            return Err(bad(
                "file size",
                format!("{} bytes do not fit dim {dim} × count {count}", bytes.len()),
            ));
        }
        let mut off = 28;
        let vectors = bytes[off..off + dim * count * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        off += dim * count * 4;
        let labels = bytes[off..off + count * 4]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        off += count * 4;
        let zero = bytes[off..].iter().map(|b| *b != 0).collect();
        Ok(Self {
            dim,
            vectors,
            labels,
            zero,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }
}

/// Ascending distance, then ascending index.
pub fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index))
}
