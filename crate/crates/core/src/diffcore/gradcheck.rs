//! Central-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Scalar-valued function of one tensor, expressed on a graph.
pub trait GraphFn: Fn(&mut Graph<f64>, Var) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, Var) -> Result<Var>> GraphFn for F {}

fn evaluate(f: &impl GraphFn, point: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(point.clone());
    let y = f(&mut g, x)?;
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(Error::Evaluation(format!("function returned {} values, expected 1", v.numel())));
    }
    let s = v.item();
    if !s.is_finite() {
        return Err(Error::Evaluation(format!("non-finite function value {s}")));
    }
    Ok(s)
}

/// Analytic gradient of `f` at `point`.
pub fn analytic_grad(f: &impl GraphFn, point: &Tensor<f64>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    if !g.value(y).item().is_finite() {
        return Err(Error::Evaluation("non-finite function value".into()));
    }
    g.backward(y)?;
    Ok(g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.numel()]))
}

/// Max over the checked coordinates of
/// `|analytic - central difference| / max(1, |analytic|)`.
pub fn grad_check_coords(f: impl GraphFn, point: &Tensor<f64>, epsilon: f64, coords: &[usize]) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic = analytic_grad(&f, point)?;
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn grad_check(f: impl GraphFn, point: &Tensor<f64>, epsilon: f64) -> Result<f64> {
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, epsilon, &coords)
}

/// At most `max` evenly spread coordinates of a tensor with `numel` entries.
pub fn spread_coords(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    (0..max).map(|i| i * numel / max + (i * 7919) % (numel / max).max(1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn quadratic_is_exact() {
        let point = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let f = |g: &mut Graph<f64>, x: Var| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        };
        assert_eq!(analytic_grad(&f, &point).unwrap(), vec![2.0, 4.0, 6.0]);
        assert!(grad_check(f, &point, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn weighted_softmax() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let weights = Tensor::from_f64(&[8], &w).unwrap();
        let f = move |g: &mut Graph<f64>, x: Var| {
            let s = g.softmax(x);
            let wv = g.constant(weights.clone());
            let p = g.mul(s, wv)?;
            Ok(g.sum(p))
        };
        let err = grad_check(f, &Tensor::from_f64(&[8], &x).unwrap(), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let f = |g: &mut Graph<f64>, x: Var| {
            let s = g.scale(x, f64::INFINITY);
            Ok(g.sum(s))
        };
        let r = grad_check(f, &Tensor::from_f64(&[1], &[1.0]).unwrap(), 1e-5);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let f = |g: &mut Graph<f64>, x: Var| Ok(g.sum(x));
        assert!(grad_check(f, &Tensor::from_f64(&[1], &[1.0]).unwrap(), 0.0).is_err());
    }

    #[test]
    fn spread_coords_stay_in_range() {
        let c = spread_coords(1000, 17);
        assert_eq!(c.len(), 17);
        assert!(c.iter().all(|&i| i < 1000));
        assert_eq!(spread_coords(5, 10), vec![0, 1, 2, 3, 4]);
    }
}
