use crate::encoder::LayerStack;
use crate::numerics::Tensor;

pub const TARGET_EPS: f64 = 1e-6;

/// Regression targets: per-token latents `z` (N×D) and their mean `o` (D).
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub z: Tensor,
    pub o: Vec<f64>,
}

/// Standardizes each column of an N×D block in place over the N rows.
fn standardize_columns(x: &mut [f64], n: usize, d: usize, eps: f64) -> usize {
    let mut flat = 0;
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        if var < eps {
            flat += 1;
        }
        let inv = 1.0 / (var + eps).sqrt();
        (0..n).for_each(|i| x[i * d + j] = (x[i * d + j] - mean) * inv);
    }
    flat
}

/// Teacher latents to targets: standardize every layer over the token axis,
/// average the layers, then standardize every token over the feature axis.
/// The stack holds patch tokens only (no cls) from an unmasked pass.
pub fn make_targets(stack: &LayerStack) -> Targets {
    let (l, n, d) = (stack.layers(), stack.tokens(), stack.dim());
    let mut avg = vec![0.0; n * d];
    let mut flat = 0;
    for layer in 0..l {
        let mut x = stack.patch.data()[layer * n * d..(layer + 1) * n * d].to_vec();
        flat += standardize_columns(&mut x, n, d, TARGET_EPS);
        avg.iter_mut().zip(&x).for_each(|(a, v)| *a += v / l as f64);
    }
    if flat > 0 {
        log::warn!("make_targets: {flat} channel(s) with near-zero variance over tokens");
    }
    for i in 0..n {
        let row = &mut avg[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + TARGET_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    let z = Tensor::matrix(n, d, avg).expect("n×d");
    let o = z.mean_axis(0).expect("rank 2").into_data();
    Targets { z, o }
}
