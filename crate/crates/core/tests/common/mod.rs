#![allow(dead_code)]

use cxrl::numcore::{Gradients, Graph, GraphError, ParamStore, Precision, Tensor, Var};

/// Central finite differences of a scalar graph output, evaluated by forward
/// passes only. Returns `(name, flat index, numeric derivative)` for up to
/// `per_param` entries of every trainable parameter.
pub fn finite_differences<F>(store: &ParamStore, per_param: usize, step: f64, f: F) -> Vec<(String, usize, f64)>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, GraphError>,
{
    assert_eq!(store.precision(), Precision::F64, "finite differences need 64-bit stores");
    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::inference(s);
        let out = f(&mut g).expect("forward");
        g.value(out).item().expect("scalar")
    };
    let mut out = Vec::new();
    for (name, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let n = p.value.len();
        let stride = (n / per_param).max(1);
        for idx in (0..n).step_by(stride).take(per_param) {
            let mut plus = store.clone();
            let mut minus = store.clone();
            let mut t = p.value.clone();
            t.data_mut()[idx] += step;
            plus.set(name, t).unwrap();
            let mut t = p.value.clone();
            t.data_mut()[idx] -= step;
            minus.set(name, t).unwrap();
            out.push((name.to_string(), idx, (eval(&plus) - eval(&minus)) / (2.0 * step)));
        }
    }
    out
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between analytic gradients and the oracle.
pub fn max_relative_error(grads: &Gradients, numeric: &[(String, usize, f64)]) -> f64 {
    numeric
        .iter()
        .map(|(name, idx, fd)| {
            let ad = grads.get(name).unwrap_or_else(|| panic!("missing gradient {name}")).data()[*idx];
            relative_error(ad, *fd)
        })
        .fold(0.0, f64::max)
}

pub fn random_tensor(shape: &[usize], seed: u64, label: &str, scale: f64) -> Tensor {
    let mut s = cxrl::numcore::rng_stream(seed, label);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * s.normal()).collect()).unwrap()
}
