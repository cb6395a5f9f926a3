//! Category-name embeddings: a deterministic seeded table standing in for a
//! pretrained text encoder, with a file-based override hook so real
//! embeddings can be plugged in.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot read embedding override file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed embedding override file {path}: {source}")]
    Malformed {
        path: String,
        source: serde_json::Error,
    },
    #[error("override row for {name:?} has width {got}, expected {expected}")]
    WrongWidth {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("no category names given")]
    Empty,
}

/// One embedding row per category name, `[K, D]`, unit-normalized.
#[derive(Debug, Clone)]
pub struct TextEmbeddingMatrix {
    pub names: Vec<String>,
    pub rows: Array2<f32>,
}

impl TextEmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn row_of(&self, name: &str) -> Option<ndarray::ArrayView1<'_, f32>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.rows.row(i))
    }
}

/// Embedding overrides loaded from a JSON map of name to float row.
pub fn load_overrides(
    path: impl AsRef<Path>,
) -> Result<HashMap<String, Vec<f32>>, EmbeddingError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| EmbeddingError::Malformed {
        path: path.display().to_string(),
        source,
    })
}

/// Deterministic per-name embedding: each row is drawn from a generator
/// keyed by `(seed, name)` and unit-normalized, so the same name maps to the
/// same row across runs and machines. Rows present in `overrides` replace
/// generated ones (after unit normalization).
pub fn embed_categories(
    names: &[String],
    dim: usize,
    seed: u64,
    overrides: Option<&HashMap<String, Vec<f32>>>,
) -> Result<TextEmbeddingMatrix, EmbeddingError> {
    if names.is_empty() {
        return Err(EmbeddingError::Empty);
    }
    let mut rows = Array2::<f32>::zeros((names.len(), dim));
    for (i, name) in names.iter().enumerate() {
        let row: Vec<f32> = match overrides.and_then(|o| o.get(name)) {
            Some(r) => {
                if r.len() != dim {
                    return Err(EmbeddingError::WrongWidth {
                        name: name.clone(),
                        got: r.len(),
                        expected: dim,
                    });
                }
                r.clone()
            }
            None => {
                let mut hasher = Sha256::new();
                hasher.update(seed.to_le_bytes());
                hasher.update(name.as_bytes());
                let digest = hasher.finalize();
                let mut key = [0u8; 32];
                key.copy_from_slice(&digest);
                let mut rng = ChaCha8Rng::from_seed(key);
                (0..dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            }
        };
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        for (j, v) in row.iter().enumerate() {
            rows[(i, j)] = v / norm;
        }
    }
    Ok(TextEmbeddingMatrix {
        names: names.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn same_name_same_seed_same_row() {
        let a = embed_categories(&names(&["dog", "cat"]), 16, 7, None).unwrap();
        let b = embed_categories(&names(&["cat"]), 16, 7, None).unwrap();
        assert_eq!(a.rows.row(1), b.rows.row(0));
        let c = embed_categories(&names(&["cat"]), 16, 8, None).unwrap();
        assert_ne!(b.rows.row(0), c.rows.row(0));
    }

    #[test]
    fn overrides_replace_rows() {
        let mut ov = HashMap::new();
        ov.insert("dog".to_string(), vec![2.0, 0.0, 0.0, 0.0]);
        let t = embed_categories(&names(&["dog", "cat"]), 4, 1, Some(&ov)).unwrap();
        assert_eq!(t.rows[(0, 0)], 1.0); // unit-normalized override
        assert_eq!(t.rows[(0, 1)], 0.0);

        ov.insert("cat".to_string(), vec![1.0, 1.0]);
        let err = embed_categories(&names(&["cat"]), 4, 1, Some(&ov)).unwrap_err();
        assert!(err.to_string().contains("width 2"));
    }

    #[test]
    fn hundred_names_near_orthogonal_at_d64() {
        let all: Vec<String> = (0..100).map(|i| format!("category-{i}")).collect();
        let t = embed_categories(&all, 64, 12345, None).unwrap();
        // Gram matrix off-diagonals
        let gram = t.rows.dot(&t.rows.t());
        let mut worst = 0.0f32;
        for i in 0..100 {
            for j in 0..i {
                worst = worst.max(gram[(i, j)].abs());
            }
        }
        assert!(worst < 0.5, "max |cos| = {worst}");
    }

    #[test]
    fn rows_are_unit_norm() {
        let t = embed_categories(&names(&["a", "b", "c"]), 32, 3, None).unwrap();
        for row in t.rows.rows() {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}
