use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocabulary, PAD_ID};
use crate::error::{MarnError, Result};
use crate::tensor::Tensor;

/// Parses word-vector text (`count dim` header, then `token v1 … v_dim`).
pub fn parse_word_vectors(text: &str, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(MarnError::Format {
        line: 1,
        message: "missing `count dim` header".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let parse_usize = |s: &str| s.parse::<usize>().ok();
    let (count, file_dim) = match fields[..] {
        [c, d] => match (parse_usize(c), parse_usize(d)) {
            (Some(c), Some(d)) => (c, d),
            _ => {
                return Err(MarnError::Format {
                    line: 1,
                    message: format!("malformed header `{header}`"),
                })
            }
        },
        _ => {
            return Err(MarnError::Format {
                line: 1,
                message: format!("malformed header `{header}`"),
            })
        }
    };
    if file_dim != dim {
        return Err(MarnError::Format {
            line: 1,
            message: format!("embedding dimension {file_dim} does not match configured {dim}"),
        });
    }
    let mut vectors = HashMap::with_capacity(count);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap_or_default();
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = values.map_err(|e| MarnError::Format {
            line: i + 1,
            message: format!("bad number: {e}"),
        })?;
        if values.len() != dim {
            return Err(MarnError::Format {
                line: i + 1,
                message: format!("expected {dim} values for `{token}`, got {}", values.len()),
            });
        }
        vectors.insert(token.to_string(), values);
    }
    Ok(vectors)
}

/// Builds the |V|×d_e matrix: matched tokens copy the file vector, the pad
/// row is zero, everything else is drawn uniformly from ±0.25/√d_e.
pub fn embedding_matrix(
    vectors: &HashMap<String, Vec<f64>>,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 0.25 / (dim as f64).sqrt();
    let mut data = Vec::with_capacity(vocab.len() * dim);
    for (id, token) in vocab.tokens().iter().enumerate() {
        if id == PAD_ID {
            data.extend(std::iter::repeat_n(0.0, dim));
        } else if let Some(v) = vectors.get(token) {
            data.extend_from_slice(v);
        } else {
            data.extend((0..dim).map(|_| rng.gen_range(-bound..=bound)));
        }
    }
    Tensor::from_parts(vec![vocab.len(), dim], data)
}

pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| MarnError::io(path, e))?;
    let vectors = parse_word_vectors(&text, dim)?;
    Ok(embedding_matrix(&vectors, vocab, dim, seed))
}

pub fn format_word_vectors(entries: &[(String, Vec<f64>)], dim: usize) -> String {
    let mut out = format!("{} {}\n", entries.len(), dim);
    for (token, v) in entries {
        out.push_str(token);
        for x in v {
            write!(out, " {x:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}
