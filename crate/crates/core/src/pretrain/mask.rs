use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Partition of `0..n` into masked (sorted) and visible (ascending) indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub n: usize,
}

impl MaskPlan {
    pub fn from_masked(n: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= n) {
            return Err(Error::Param(format!("masked index out of range for {n} tokens")));
        }
        let mut is_masked = vec![false; n];
        masked.iter().for_each(|&i| is_masked[i] = true);
        let visible = (0..n).filter(|&i| !is_masked[i]).collect();
        Ok(MaskPlan { masked, visible, n })
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.n as f64
    }
}

fn clamp_count(want: usize, n: usize, what: &str) -> usize {
    if want == 0 {
        log::warn!("{what}: count rounds to 0 of {n}; using 1");
        1
    } else if want >= n {
        log::warn!("{what}: count {want} leaves nothing on the other side; using {}", n - 1);
        n - 1
    } else {
        want
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Masks `round(ratio·n)` indices drawn uniformly without replacement,
/// keeping at least one token on each side.
pub fn random_mask(n: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if n < 2 {
        return Err(Error::Param(format!("masking needs at least 2 tokens, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Param(format!("mask ratio must be in (0, 1), got {ratio}")));
    }
    let count = clamp_count(round_half_up(ratio * n as f64), n, "random_mask");
    MaskPlan::from_masked(n, sample(rng, n, count).into_vec())
}

/// Keeps one contiguous rectangle of about `keep_ratio·N` grid cells and masks
/// the rest. The block aspect (height / width) is log-uniform in `aspect`;
/// surplus cells are shaved from the end of the block's last row.
pub fn inverse_block_mask(
    grid: (usize, usize),
    keep_ratio: f64,
    aspect: (f64, f64),
    rng: &mut Rng,
) -> Result<MaskPlan> {
    let (rows, cols) = grid;
    let n = rows * cols;
    if n < 2 {
        return Err(Error::Param(format!("masking needs at least 2 tokens, got {n}")));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) || keep_ratio * (n as f64) < 1.0 {
        return Err(Error::Param(format!(
            "keep ratio {keep_ratio} on {n} tokens keeps less than one token"
        )));
    }
    if !(aspect.0 > 0.0 && aspect.0 <= aspect.1) {
        return Err(Error::Param(format!("bad aspect bounds {aspect:?}")));
    }
    let keep = clamp_count(round_half_up(keep_ratio * n as f64), n, "inverse_block_mask");

    let a = if aspect.0 == aspect.1 {
        aspect.0
    } else {
        rng.gen_range(aspect.0.ln()..aspect.1.ln()).exp()
    };
    let mut h = ((keep as f64 * a).sqrt().round() as usize).max(1);
    if h > rows {
        log::warn!("inverse_block_mask: block height {h} clipped to grid height {rows}");
        h = rows;
    }
    let mut w = keep.div_ceil(h);
    if w > cols {
        log::warn!("inverse_block_mask: block width {w} clipped to grid width {cols}");
        w = cols;
        h = keep.div_ceil(w).min(rows);
    }
    let r0 = rng.gen_range(0..=rows - h);
    let c0 = rng.gen_range(0..=cols - w);
    let mut kept = vec![false; n];
    let mut count = 0;
    'outer: for r in r0..r0 + h {
        for c in c0..c0 + w {
            if count == keep {
                break 'outer;
            }
            kept[r * cols + c] = true;
            count += 1;
        }
    }
    MaskPlan::from_masked(n, (0..n).filter(|&i| !kept[i]).collect())
}
