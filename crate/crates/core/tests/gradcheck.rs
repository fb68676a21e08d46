//! Reverse-mode gradients of every differentiable graph operation against
//! central finite differences (64-bit, step 1e-4).

mod common;

use common::{finite_differences, max_relative_error, random_tensor};
use cxrl::numcore::{gradients_of, Graph, GraphError, ParamStore, Precision, Tensor, Var};
use proptest::prelude::*;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn check<F>(store: &ParamStore, f: F) -> f64
where
    F: Fn(&mut Graph<'_>) -> Result<Var, GraphError> + Copy,
{
    let grads = gradients_of(store, f).unwrap();
    let fd = finite_differences(store, 12, STEP, f);
    max_relative_error(&grads, &fd)
}

fn store_with(entries: &[(&str, Vec<usize>)], seed: u64) -> ParamStore {
    let mut s = ParamStore::new(Precision::F64);
    for (name, shape) in entries {
        s.insert(*name, random_tensor(shape, seed, name, 0.8), false).unwrap();
    }
    s
}

#[test]
fn square_of_three_has_gradient_six() {
    let mut s = ParamStore::new(Precision::F64);
    s.insert("w", Tensor::scalar(3.0), false).unwrap();
    let g = gradients_of(&s, |g| {
        let w = g.param("w")?;
        g.square(w)
    })
    .unwrap();
    assert_eq!(g.get("w").unwrap().item(), Some(6.0));
}

#[test]
fn constant_output_gives_zero_gradients() {
    let s = store_with(&[("a", vec![3, 2]), ("b", vec![2])], 1);
    let g = gradients_of(&s, |g| {
        let c = g.constant(Tensor::scalar(4.0))?;
        g.scale(c, 2.0)
    })
    .unwrap();
    assert_eq!(g.len(), 2);
    for (_, t) in g.iter() {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn frozen_parameters_get_no_entry() {
    let mut s = store_with(&[("a", vec![2])], 2);
    s.insert("f", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
    let g = gradients_of(&s, |g| {
        let a = g.param("a")?;
        let f = g.param("f")?;
        let p = g.mul(a, f)?;
        g.sum(p)
    })
    .unwrap();
    assert!(g.get("a").is_some());
    assert!(g.get("f").is_none());
}

#[test]
fn errors_are_reported() {
    let s = store_with(&[("a", vec![2, 2])], 3);
    let r = gradients_of(&s, |g| g.param("a"));
    assert!(matches!(r, Err(GraphError::NonScalarOutput(_))));
    let r = gradients_of(&s, |g| g.param("missing"));
    assert!(matches!(r, Err(GraphError::Param(_))));
    let r = gradients_of(&s, |g| {
        let c = g.constant(Tensor::scalar(1e300))?;
        let sq = g.square(c)?;
        g.sum(sq)
    });
    assert!(matches!(r, Err(GraphError::NonFinite(_))));
}

#[test]
fn perceptron_matches_finite_differences() {
    let s = store_with(&[("w1", vec![6, 8]), ("b1", vec![8]), ("w2", vec![8, 3]), ("b2", vec![3])], 4);
    let x = random_tensor(&[5, 6], 4, "x", 1.0);
    let err = check(&s, |g| {
        let x = g.constant(x.clone())?;
        let w1 = g.param("w1")?;
        let b1 = g.param("b1")?;
        let h = g.matmul(x, w1)?;
        let h = g.add_broadcast(h, b1)?;
        let h = g.tanh(h)?;
        let w2 = g.param("w2")?;
        let b2 = g.param("b2")?;
        let o = g.matmul(h, w2)?;
        let o = g.add_broadcast(o, b2)?;
        let o = g.silu(o)?;
        let sq = g.square(o)?;
        g.mean(sq)
    });
    assert!(err < TOL, "relative error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn elementwise_ops(seed in 0u64..10_000) {
        let s = store_with(&[("a", vec![3, 4]), ("b", vec![3, 4]), ("c", vec![4])], seed);
        let err = check(&s, |g| {
            let a = g.param("a")?;
            let b = g.param("b")?;
            let c = g.param("c")?;
            let x = g.mul(a, b)?;
            let y = g.sub(x, b)?;
            let y = g.add(y, a)?;
            let y = g.add_broadcast(y, c)?;
            let y = g.sigmoid(y)?;
            let z = g.scale(y, -1.7)?;
            let z = g.silu(z)?;
            let r = g.sum_last(z)?;
            let r = g.square(r)?;
            g.sum(r)
        });
        prop_assert!(err < TOL, "relative error {}", err);
    }

    #[test]
    fn attention_path(seed in 0u64..10_000) {
        let s = store_with(&[("q", vec![2, 3, 4]), ("k", vec![2, 5, 4]), ("v", vec![2, 5, 4]), ("p", vec![2, 4])], seed);
        let keep: Vec<bool> = (0..2 * 3 * 7).map(|i| (i % 7) != 6 || i < 21).collect();
        let err = check(&s, |g| {
            let q = g.param("q")?;
            let k = g.param("k")?;
            let v = g.param("v")?;
            let p = g.param("p")?;
            let kk = g.prepend_rows(p, k)?;
            let vv = g.prepend_rows(p, v)?;
            let sc = g.batch_matmul(q, kk, true)?;
            let at = g.softmax_last(sc, Some(keep.clone()))?;
            let o = g.batch_matmul(at, vv, false)?;
            let o = g.reshape(o, vec![6, 4])?;
            let o = g.transpose(o)?;
            let o = g.tanh(o)?;
            let sq = g.square(o)?;
            g.sum(sq)
        });
        prop_assert!(err < TOL, "relative error {}", err);
    }

    #[test]
    fn embedding_and_losses(seed in 0u64..10_000) {
        let s = store_with(&[("table", vec![6, 4]), ("w", vec![4, 3])], seed);
        let ids = [0usize, 3, 3, 5, 1];
        let err = check(&s, |g| {
            let t = g.param("table")?;
            let e = g.gather(t, &ids, vec![5, 4])?;
            let n = g.l2_normalize_last(e)?;
            let w = g.param("w")?;
            let logits = g.matmul(n, w)?;
            let ce = g.cross_entropy_rows(logits, &[0, 2, 1, 1, 0])?;
            let sim = g.matmul_nt(n, n)?;
            let bce = g.bce_with_logits(sim, &[1.0, 0.0, 0.5, 0.0, 1.0, 0.2, 0.9, 0.1, 0.0, 0.3, 1.0, 1.0, 0.0, 0.0, 0.5, 0.5, 0.25, 0.75, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.5])?;
            g.add(ce, bce)
        });
        prop_assert!(err < TOL, "relative error {}", err);
    }

    #[test]
    fn batched_product_without_transpose(seed in 0u64..10_000) {
        let s = store_with(&[("a", vec![3, 2, 4]), ("b", vec![3, 4, 5])], seed);
        let err = check(&s, |g| {
            let a = g.param("a")?;
            let b = g.param("b")?;
            let c = g.batch_matmul(a, b, false)?;
            let c = g.tanh(c)?;
            g.sum(c)
        });
        prop_assert!(err < TOL, "relative error {}", err);
    }
}
