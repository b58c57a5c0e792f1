use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Projects a tape output onto a fixed random direction so every output
/// element contributes to the checked scalar.
fn project(t: &mut Tape, out: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let shape = t.value(out).shape().to_vec();
    let r = t.constant(random(&mut rng, &shape));
    let m = t.mul(out, r)?;
    t.sum(m)
}

fn check<F>(store: &ParamStore, f: F)
where
    F: Fn(&mut Tape, &Bound) -> crate::Result<Var>,
{
    let report = grad_check(store, f, 1e-5).unwrap();
    assert!(report.max_rel_err() < 1e-6, "{:?}", report.worst());
}

#[test]
fn elementwise_ops_pass_grad_check() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let a = s.add("a", random(&mut rng, &[3, 4]), false);
        let b = s.add("b", random(&mut rng, &[3, 4]), false);
        let row = s.add("row", random(&mut rng, &[1, 4]), false);
        check(&s, |t, p| {
            let x = t.mul(p[a], p[b])?;
            let x = t.add_row(x, p[row])?;
            let y = t.sigmoid(x)?;
            let z = t.gelu(p[a])?;
            let w = t.sub(y, z)?;
            let w = t.scale(w, 1.7)?;
            let w = t.add(w, p[b])?;
            let w = t.softmax(w)?;
            project(t, w, seed)
        });
    }
}

#[test]
fn matmul_variants_pass_grad_check() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let a = s.add("a", random(&mut rng, &[3, 4]), false);
        let b = s.add("b", random(&mut rng, &[4, 2]), false);
        let bt = s.add("bt", random(&mut rng, &[2, 4]), false);
        let at = s.add("at", random(&mut rng, &[4, 3]), false);
        check(&s, |t, p| {
            let x = t.matmul(p[a], p[b])?;
            let y = t.matmul_t(p[a], p[bt], false, true)?;
            let z = t.matmul_t(p[at], p[b], true, false)?;
            let w = t.matmul_t(p[at], p[bt], true, true)?;
            let s1 = t.add(x, y)?;
            let s2 = t.add(z, w)?;
            let s = t.mul(s1, s2)?;
            project(t, s, seed)
        });
    }
}

#[test]
fn normalization_ops_pass_grad_check() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", random(&mut rng, &[5, 6]), false);
        let g = s.add("g", random(&mut rng, &[6]), false);
        let b = s.add("b", random(&mut rng, &[6]), false);
        check(&s, |t, p| {
            let y = t.layer_norm(p[x], p[g], p[b], 1e-6)?;
            let z = t.l2_normalize(y)?;
            let tz = t.transpose(z)?;
            let r = t.reshape(tz, &[3, 10])?;
            project(t, r, seed)
        });
    }
}

#[test]
fn structural_ops_pass_grad_check() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", random(&mut rng, &[6, 3]), false);
        let y = s.add("y", random(&mut rng, &[2, 3]), false);
        check(&s, |t, p| {
            let g = t.gather_rows(p[x], &[5, 0, 0, 2])?;
            let c = t.concat_rows(&[g, p[y]])?;
            let mn = t.reduce_groups(c, 3, Reduce::Min)?;
            let mx = t.reduce_groups(c, 3, Reduce::Max)?;
            let cat = t.concat_cols(&[mn, mx, mn])?;
            let sq = t.sum_squares(cat)?;
            let pr = project(t, c, seed)?;
            t.add(sq, pr)
        });
    }
}

#[test]
fn attention_and_im2col_pass_grad_check() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let q = s.add("q", random(&mut rng, &[6, 8]), false);
        let k = s.add("k", random(&mut rng, &[6, 8]), false);
        let v = s.add("v", random(&mut rng, &[6, 8]), false);
        check(&s, |t, p| {
            let o = t.attention(p[q], p[k], p[v], 2)?;
            let u = t.im2col(o, 2, 3, 3)?;
            project(t, u, seed)
        });
    }
}

#[test]
fn losses_pass_grad_check() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", random(&mut rng, &[4, 3]), false);
        let targets = Tensor::matrix(
            4,
            3,
            (0..12).map(|i| ((i * 7 + seed as usize) % 3 == 0) as u8 as f64).collect(),
        )
        .unwrap();
        let labels = vec![0, 2, 1, (seed % 3) as usize];
        check(&s, |t, p| {
            let a = t.bce_with_logits(p[x], &targets)?;
            let b = t.cross_entropy(p[x], &labels)?;
            let c = t.add(a, b)?;
            let tc = t.constant(targets.clone());
            let m = t.mse(p[x], tc)?;
            t.add(c, m)
        });
    }
}

#[test]
fn max_routes_gradient_to_first_argmax() {
    let mut t = Tape::new(Dtype::F64);
    let x = t.param("x", Tensor::matrix(3, 1, vec![1.0, 5.0, 2.0]).unwrap());
    let m = t.reduce_groups(x, 3, Reduce::Max).unwrap();
    assert_eq!(t.value(m).item(), 5.0);
    let s = t.sum(m).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[0.0, 1.0, 0.0]);

    let mut t = Tape::new(Dtype::F64);
    let x = t.param("x", Tensor::matrix(3, 1, vec![2.0, 1.0, 1.0]).unwrap());
    let m = t.reduce_groups(x, 3, Reduce::Min).unwrap();
    let s = t.sum(m).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn backward_visits_in_reverse_order() {
    let mut t = Tape::new(Dtype::F64);
    let a = t.param("a", Tensor::full(&[2, 2], 0.5));
    let c = t.constant(Tensor::full(&[2, 2], 2.0));
    let x = t.mul(a, c).unwrap();
    let y = t.sigmoid(x).unwrap();
    let z = t.add(y, x).unwrap();
    let s = t.sum(z).unwrap();
    let g = t.backward(s).unwrap();
    let order = g.visit_order();
    assert!(order.windows(2).all(|w| w[0] > w[1]));
    assert!(!order.contains(&c.index()));
    assert_eq!(g.params().len(), 1);
}

#[test]
fn constants_never_need_grad() {
    let mut t = Tape::new(Dtype::F64);
    let c1 = t.constant(Tensor::full(&[1, 2], 1.0));
    let c2 = t.constant(Tensor::full(&[1, 2], 3.0));
    let x = t.mul(c1, c2).unwrap();
    assert!(!t.needs_grad(x));
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.params().is_empty());
    assert!(g.visit_order().is_empty());
}

#[test]
fn non_finite_output_is_an_error() {
    let mut t = Tape::new(Dtype::F64);
    let x = t.constant(Tensor::full(&[1, 1], 1e300));
    let err = t.mul(x, x).unwrap_err();
    assert!(matches!(err, Error::NonFinite(ref op) if op == "mul"));
}

#[test]
fn f32_mode_rounds_stored_values() {
    let mut t = Tape::new(Dtype::F32);
    let x = t.constant(Tensor::full(&[1, 1], 0.1));
    assert_eq!(t.value(x).item(), 0.1f32 as f64);
    let y = t.scale(x, 3.0).unwrap();
    assert_eq!(t.value(y).item(), ((0.1f32 as f64) * 3.0) as f32 as f64);
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new(Dtype::F32);
        let q = t.constant(random(&mut rng, &[5, 8]));
        let o = t.attention(q, q, q, 4).unwrap();
        t.value(o).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn single_token_attention_copies_value() {
    let mut t = Tape::new(Dtype::F64);
    let q = t.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let v = t.constant(Tensor::matrix(1, 4, vec![-1.0, 0.5, 2.0, 7.0]).unwrap());
    let o = t.attention(q, q, v, 2).unwrap();
    assert_eq!(t.value(o).data(), &[-1.0, 0.5, 2.0, 7.0]);
    let p = t.attention_probs(o).unwrap();
    assert_eq!(p.data(), &[1.0, 1.0]);
}
