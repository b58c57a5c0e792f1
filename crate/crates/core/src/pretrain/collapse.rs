use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

pub const MIN_TOKEN_STD: f64 = 0.01;
pub const MAX_MEAN_COSINE: f64 = 0.99;
const MAX_ROWS: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    /// Median over dimensions of the per-sample std across tokens (averaged over samples).
    pub median_token_std: f64,
    /// Median over dimensions of the std of per-sample token means across the batch.
    pub median_batch_std: f64,
    pub mean_cosine: f64,
    pub mean_abs_cosine: f64,
    /// `exp` of the entropy of the normalized singular values.
    pub effective_rank: f64,
    pub collapsed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub student: EmbeddingStats,
    pub teacher: Option<EmbeddingStats>,
    pub collapsed: bool,
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn column_std(rows: &[&[f64]], d: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..d)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

pub fn effective_rank(m: &Tensor) -> f64 {
    let (r, c) = (m.rows(), m.cols());
    let sv = DMatrix::from_row_slice(r, c, m.data()).singular_values();
    let total: f64 = sv.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h: f64 = sv
        .iter()
        .map(|&s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.exp()
}

/// Spread statistics of a batch of N×D embedding matrices.
pub fn embedding_stats(batch: &[Tensor]) -> EmbeddingStats {
    let d = batch[0].cols();
    let mut token_std = vec![0.0; d];
    for m in batch {
        let rows: Vec<&[f64]> = (0..m.rows()).map(|i| m.row(i)).collect();
        for (a, s) in token_std.iter_mut().zip(column_std(&rows, d)) {
            *a += s / batch.len() as f64;
        }
    }
    let means: Vec<Vec<f64>> = batch.iter().map(|m| m.mean_axis(0).expect("rank 2").into_data()).collect();
    let mean_rows: Vec<&[f64]> = means.iter().map(|v| v.as_slice()).collect();
    let batch_std = column_std(&mean_rows, d);

    let pooled: Vec<&[f64]> = batch.iter().flat_map(|m| (0..m.rows()).map(move |i| m.row(i))).collect();
    let stride = pooled.len().div_ceil(MAX_ROWS).max(1);
    let picked: Vec<&[f64]> = pooled.iter().step_by(stride).copied().collect();
    let unit: Vec<Vec<f64>> = picked
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect()
        })
        .collect();
    let (mut cos, mut abs_cos, mut pairs) = (0.0, 0.0, 0usize);
    for i in 0..unit.len() {
        for j in 0..i {
            let c = if unit[i].iter().all(|&v| v == 0.0) && unit[j].iter().all(|&v| v == 0.0) {
                1.0
            } else {
                unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>()
            };
            cos += c;
            abs_cos += c.abs();
            pairs += 1;
        }
    }
    let pairs = pairs.max(1) as f64;
    let flat: Vec<f64> = picked.iter().flat_map(|r| r.iter().copied()).collect();
    let erank = effective_rank(&Tensor::matrix(picked.len(), d, flat).expect("pooled"));

    let median_token_std = median(token_std);
    let mean_cosine = cos / pairs;
    EmbeddingStats {
        median_token_std,
        median_batch_std: median(batch_std),
        mean_cosine,
        mean_abs_cosine: abs_cos / pairs,
        effective_rank: erank,
        collapsed: median_token_std < MIN_TOKEN_STD || mean_cosine > MAX_MEAN_COSINE,
    }
}

/// Student final-layer patch embeddings, optionally with the teacher's
/// un-standardized latents; either side collapsing flags the report.
pub fn collapse_diagnostics(student: &[Tensor], teacher: Option<&[Tensor]>) -> CollapseReport {
    let s = embedding_stats(student);
    let t = teacher.map(embedding_stats);
    let collapsed = s.collapsed || t.as_ref().is_some_and(|t| t.collapsed);
    CollapseReport {
        student: s,
        teacher: t,
        collapsed,
    }
}
