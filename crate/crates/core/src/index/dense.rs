use super::{by_score_then_key, ChunkKey};
use crate::error::{Error, Result};

/// Exact inner-product index over unit vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    pub(super) dim: usize,
    pub(super) keys: Vec<ChunkKey>,
    pub(super) matrix: Vec<f32>,
}

impl DenseIndex {
    pub fn new(dim: usize) -> Self {
        DenseIndex {
            dim,
            keys: Vec::new(),
            matrix: Vec::new(),
        }
    }

    pub fn add(&mut self, key: ChunkKey, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Validation(format!(
                "vector of {key} has dim {}, index has {}",
                vector.len(),
                self.dim
            )));
        }
        self.keys.push(key);
        self.matrix.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[ChunkKey] {
        &self.keys
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }
}

/// Inner product accumulated in f64, components in index order.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Top `depth` records by inner product (cosine, for unit vectors),
/// descending, ties by ascending key.
pub fn dense_search(
    index: &DenseIndex,
    query: &[f32],
    depth: usize,
) -> Result<Vec<(ChunkKey, f64)>> {
    if index.is_empty() || depth == 0 {
        return Ok(Vec::new());
    }
    if query.len() != index.dim {
        return Err(Error::Validation(format!(
            "query has dim {}, index has {}",
            query.len(),
            index.dim
        )));
    }
    let mut scored: Vec<(&ChunkKey, f64)> = index
        .keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k, dot(query, index.row(i))))
        .collect();
    let cmp = |a: &(&ChunkKey, f64), b: &(&ChunkKey, f64)| by_score_then_key(a, b);
    if depth < scored.len() {
        scored.select_nth_unstable_by(depth - 1, cmp);
        scored.truncate(depth);
    }
    scored.sort_by(cmp);
    Ok(scored.into_iter().map(|(k, s)| (k.clone(), s)).collect())
}
