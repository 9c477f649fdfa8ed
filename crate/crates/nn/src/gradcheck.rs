//! Central-difference gradient checking at f64.
//!
//! The analytic gradient of a scalar loss is compared against
//! `(f(p+e) - f(p-e)) / 2e` coordinate by coordinate, on a deterministic
//! sample of coordinates from every parameter tensor.

use crate::elem::Elem;
use crate::graph::{Grads, Params};
use crate::rng;

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Pick up to `per_param` flat coordinates from every tensor in the store.
pub fn sample_coords<E: Elem>(
    params: &Params<E>,
    seed: u64,
    per_param: usize,
) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (name, value) in params.iter() {
        let n = value.len();
        if n == 0 {
            continue;
        }
        let mut r = rng::substream(seed, &format!("gradcheck/{name}"), 0);
        let take = per_param.min(n);
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < take {
            seen.insert(rng::uniform_usize(&mut r, n));
        }
        for idx in seen {
            out.push((name.to_string(), idx));
        }
    }
    out
}

/// Relative error with a floor so that near-zero pairs compare cleanly.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs()).max(1e-6);
    (a - n).abs() / scale
}

/// Run central differences at the given coordinates. `loss_fn` must rebuild
/// the whole forward pass from the store (it is called twice per coordinate).
pub fn check<F>(
    params: &Params<f64>,
    analytic: &Grads<f64>,
    loss_fn: F,
    coords: &[(String, usize)],
    eps: f64,
) -> Vec<CoordCheck>
where
    F: Fn(&Params<f64>) -> f64,
{
    let mut out = Vec::with_capacity(coords.len());
    for (name, index) in coords {
        let base = params.get(name).as_slice_memory_order().expect("standard layout")[*index];
        let h = eps * base.abs().max(1.0);

        let mut p_plus = params.clone();
        p_plus.get_mut(name).as_slice_memory_order_mut().expect("standard layout")[*index] =
            base + h;
        let f_plus = loss_fn(&p_plus);

        let mut p_minus = params.clone();
        p_minus.get_mut(name).as_slice_memory_order_mut().expect("standard layout")[*index] =
            base - h;
        let f_minus = loss_fn(&p_minus);

        let numeric = (f_plus - f_minus) / (2.0 * h);
        let a = analytic
            .get(name)
            .map(|g| g.as_slice_memory_order().expect("standard layout")[*index])
            .unwrap_or(0.0);
        out.push(CoordCheck {
            name: name.clone(),
            index: *index,
            analytic: a,
            numeric,
            rel_err: rel_err(a, numeric),
        });
    }
    out
}

/// Largest relative error in a batch of coordinate checks.
pub fn max_rel_err(checks: &[CoordCheck]) -> f64 {
    checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn catches_a_wrong_gradient() {
        let mut params = Params::<f64>::new();
        params.insert("w", ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.3, -0.4]).unwrap());
        let loss_fn = |p: &Params<f64>| {
            let mut g = Graph::new();
            let w = g.param(p, "w");
            let s = g.sqr(w);
            let l = g.sum(s);
            g.scalar(l)
        };
        // Correct analytic gradient: 2w. Corrupt one entry.
        let mut grads = Grads::new();
        grads.map.insert(
            "w".into(),
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![2.0 * 1.3, 2.0 * -0.4 + 0.5]).unwrap(),
        );
        let coords = vec![("w".to_string(), 0), ("w".to_string(), 1)];
        let checks = check(&params, &grads, loss_fn, &coords, 1e-5);
        assert!(checks[0].rel_err < 1e-8, "correct coordinate flagged");
        assert!(checks[1].rel_err > 0.1, "corrupted coordinate missed");
    }
}
