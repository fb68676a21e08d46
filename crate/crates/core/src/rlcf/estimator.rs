use crate::numcore::{Gradients, Graph, GraphError, ParamStore, Tensor, Var};

/// Gradient of the negated score-function objective
/// `−(1/B)·Σ_i w_i·Σ_t log p_t^i` over every trainable entry of `store`.
///
/// `logp(g, t)` must build the `[B]` vector of per-item log-densities for
/// step `t` (called for `t = 1..=steps`, one graph each, so live memory is
/// bounded by a single step). Also returns `Σ_t log p_t^i` per item.
pub fn reinforce_gradients<F>(
    store: &ParamStore,
    weights: &[f64],
    steps: usize,
    mut logp: F,
) -> Result<(Gradients, Vec<f64>), GraphError>
where
    F: FnMut(&mut Graph<'_>, usize) -> Result<Var, GraphError>,
{
    let b = weights.len();
    let mut acc = Gradients::new();
    for (name, p) in store.iter() {
        if !p.frozen {
            acc.insert(name, Tensor::zeros(p.value.shape().to_vec()));
        }
    }
    let mut totals = vec![0.0; b];
    let coef: Vec<f64> = weights.iter().map(|w| -w / b as f64).collect();
    for t in 1..=steps {
        let mut g = Graph::new(store);
        let lp = logp(&mut g, t)?;
        if g.shape(lp) != [b] {
            return Err(GraphError::Shape {
                op: "reinforce",
                lhs: g.shape(lp).to_vec(),
                rhs: vec![b],
            });
        }
        for (tot, v) in totals.iter_mut().zip(g.value(lp).data()) {
            *tot += v;
        }
        let w = g.constant(Tensor::new(vec![b], coef.clone())?)?;
        let weighted = g.mul(lp, w)?;
        let obj = g.sum(weighted)?;
        acc.accumulate(&g.backward(obj)?)?;
    }
    Ok((acc, totals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Precision;

    fn theta_store(theta: f64) -> ParamStore {
        let mut s = ParamStore::new(Precision::F64);
        s.insert("theta", Tensor::vector(vec![theta]), false).unwrap();
        s
    }

    /// `log N(x_i; θ, 1)` for a batch of draws.
    fn gaussian_logp(g: &mut Graph<'_>, xs: &[f64]) -> Result<Var, GraphError> {
        let th = g.param("theta")?;
        let ones = g.constant(Tensor::full(vec![xs.len(), 1], 1.0))?;
        let th2 = g.reshape(th, vec![1, 1])?;
        let rep = g.matmul(ones, th2)?;
        let rep = g.reshape(rep, vec![xs.len()])?;
        let x = g.constant(Tensor::vector(xs.to_vec()))?;
        let d = g.sub(x, rep)?;
        let sq = g.square(d)?;
        let half = g.scale(sq, -0.5)?;
        let c = g.constant(Tensor::full(vec![xs.len()], -0.5 * (2.0 * std::f64::consts::PI).ln()))?;
        g.add(half, c)
    }

    #[test]
    fn zero_rewards_give_zero_gradient() {
        let s = theta_store(0.3);
        let (g, _) = reinforce_gradients(&s, &[0.0, 0.0], 1, |g, _| gaussian_logp(g, &[0.1, 2.0])).unwrap();
        assert_eq!(g.get("theta").unwrap().data(), &[0.0]);
    }

    #[test]
    fn estimator_is_linear_in_rewards() {
        let s = theta_store(0.3);
        let xs = [0.1, 2.0, -0.7];
        let r = [0.5, -1.25, 2.0];
        let (g1, _) = reinforce_gradients(&s, &r, 2, |g, _| gaussian_logp(g, &xs)).unwrap();
        let k = 3.5;
        let rk: Vec<f64> = r.iter().map(|v| v * k).collect();
        let (g2, _) = reinforce_gradients(&s, &rk, 2, |g, _| gaussian_logp(g, &xs)).unwrap();
        let (a, b) = (g1.get("theta").unwrap().data()[0], g2.get("theta").unwrap().data()[0]);
        assert!((b - k * a).abs() <= 1e-12 * b.abs());
    }

    #[test]
    fn single_draw_matches_score_function() {
        // −(1/1)·r·(x − θ) with r = x
        let s = theta_store(0.5);
        let (g, lp) = reinforce_gradients(&s, &[2.0], 1, |g, _| gaussian_logp(g, &[2.0])).unwrap();
        assert!((g.get("theta").unwrap().data()[0] + 2.0 * 1.5).abs() < 1e-12);
        assert!((lp[0] - (-0.5 * 1.5f64 * 1.5 - 0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
    }
}
