use crate::encoder::LayerStack;
use crate::error::{Error, Result};
use crate::numerics::kernels::l2_normalize;
use crate::numerics::{softmax, Bound, ParamId, Reduce, Tape, Tensor, Var};

/// Unit-normalized copies of a stack's patch rows (L×N×D), cls rows (L×D)
/// and prototypes (K×D). Zero rows stay zero.
pub fn normalize_stack(stack: &LayerStack, prototypes: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (l, n, d) = (stack.layers(), stack.tokens(), stack.dim());
    let flat = Tensor::matrix(l * n, d, stack.patch.data().to_vec()).expect("l·n×d");
    let z = l2_normalize(&flat).reshape(&[l, n, d]).expect("same numel");
    (z, l2_normalize(&stack.cls), l2_normalize(prototypes))
}

/// Convex layer mix with `α = softmax(a)`: `(N×D, 1×D)`.
pub fn gate_aggregate(z: &Tensor, o: &Tensor, a: &[f64]) -> Result<(Tensor, Tensor)> {
    let (l, n, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    if a.len() != l || o.shape() != [l, d] {
        return Err(Error::shape(
            "gate_aggregate",
            format!("gate of {} for {l} layers, cls {:?}", a.len(), o.shape()),
        ));
    }
    let alpha = softmax(&Tensor::matrix(1, l, a.to_vec())?, 1)?;
    let zbar = alpha.matmul(&Tensor::matrix(l, n * d, z.data().to_vec())?)?.reshape(&[n, d])?;
    let obar = alpha.matmul(o)?;
    Ok((zbar, obar))
}

/// Cosine scores against unit prototypes: `(N×K, 1×K)`.
pub fn prototype_similarity(zbar: &Tensor, obar: &Tensor, p_hat: &Tensor) -> Result<(Tensor, Tensor)> {
    let pt = p_hat.transpose()?;
    Ok((zbar.matmul(&pt)?, obar.matmul(&pt)?))
}

/// `[min over tokens of s_z, max over tokens of s_z, s_o]`, length 3K.
pub fn pool_features(s_z: &Tensor, s_o: &Tensor) -> Result<Vec<f64>> {
    let (n, k) = s_z.dims2("pool_features")?;
    if n == 0 || s_o.numel() != k {
        return Err(Error::shape("pool_features", format!("s_z {:?}, s_o {:?}", s_z.shape(), s_o.shape())));
    }
    let mut out = vec![0.0; 3 * k];
    for j in 0..k {
        let col = (0..n).map(|i| s_z.get2(i, j));
        out[j] = col.clone().fold(f64::INFINITY, f64::min);
        out[k + j] = col.fold(f64::NEG_INFINITY, f64::max);
        out[2 * k + j] = s_o.data()[j];
    }
    Ok(out)
}

/// Pre-normalized frozen inputs for a minibatch, laid out for one matmul
/// against the gate: patches as L×(B·N·D), cls as L×(B·D).
#[derive(Clone, Debug)]
pub struct CgpBatch {
    pub z: Tensor,
    pub o: Tensor,
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
}

impl CgpBatch {
    /// `z` is (L×N×D) and `o` (L×D) per sample, already unit-normalized.
    pub fn pack(items: &[(&Tensor, &Tensor)]) -> Result<Self> {
        let (z0, _) = items.first().ok_or_else(|| Error::EmptyInput("empty probe batch".into()))?;
        let (l, n, d) = (z0.shape()[0], z0.shape()[1], z0.shape()[2]);
        let b = items.len();
        let mut z = vec![0.0; l * b * n * d];
        let mut o = vec![0.0; l * b * d];
        for (bi, (zs, os)) in items.iter().enumerate() {
            if zs.shape() != [l, n, d] || os.shape() != [l, d] {
                return Err(Error::shape(
                    "cgp_batch",
                    format!("sample {bi}: {:?}/{:?} vs [{l}, {n}, {d}]", zs.shape(), os.shape()),
                ));
            }
            for li in 0..l {
                let src = &zs.data()[li * n * d..(li + 1) * n * d];
                let dst = li * b * n * d + bi * n * d;
                z[dst..dst + n * d].copy_from_slice(src);
                let dst = li * b * d + bi * d;
                o[dst..dst + d].copy_from_slice(os.row(li));
            }
        }
        Ok(CgpBatch {
            z: Tensor::matrix(l, b * n * d, z)?,
            o: Tensor::matrix(l, b * d, o)?,
            batch: b,
            tokens: n,
            dim: d,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgpIds {
    pub prototypes: ParamId,
    pub gate: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

/// Intermediate handles of a batched CGP pass.
#[derive(Clone, Copy, Debug)]
pub struct CgpVars {
    pub alpha: Var,
    pub features: Var,
    pub logits: Var,
}

/// Batched CGP head: normalize prototypes, mix layers with softmax gates,
/// score against prototypes, min/max-pool over tokens, classify linearly.
/// The frozen inputs enter as constants, so no gradient can reach them.
pub fn cgp_tape(tape: &mut Tape, b: &Bound, ids: &CgpIds, batch: &CgpBatch) -> Result<CgpVars> {
    let (bs, n, d) = (batch.batch, batch.tokens, batch.dim);
    let p_hat = tape.l2_normalize(b[ids.prototypes])?;
    let alpha = tape.softmax(b[ids.gate])?;
    let z = tape.constant(batch.z.clone());
    let o = tape.constant(batch.o.clone());
    let zbar = tape.matmul(alpha, z)?;
    let zbar = tape.reshape(zbar, &[bs * n, d])?;
    let obar = tape.matmul(alpha, o)?;
    let obar = tape.reshape(obar, &[bs, d])?;
    let s_z = tape.matmul_t(zbar, p_hat, false, true)?;
    let s_o = tape.matmul_t(obar, p_hat, false, true)?;
    let lo = tape.reduce_groups(s_z, n, Reduce::Min)?;
    let hi = tape.reduce_groups(s_z, n, Reduce::Max)?;
    let features = tape.concat_cols(&[lo, hi, s_o])?;
    let logits = tape.linear(features, b[ids.w], Some(b[ids.b]))?;
    Ok(CgpVars { alpha, features, logits })
}
