//! Finite-difference gradient checks for graph builders.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    /// Central, forward and backward differences at each step size.
    pub numeric: Vec<f64>,
    pub passed: bool,
}

/// Compare d(loss)/d(param) against finite differences on `probes`
/// randomly chosen scalars.
///
/// A probe whose interval contains a ReLU/max kink has a clean slope on one
/// side only, so a probe passes if any of the central or one-sided
/// differences at step 1e-3 or 3e-3 is within `tol` relative error (the
/// denominator is floored at 1e-2).
pub fn check_grads(
    store: &mut ParamStore,
    build: &dyn Fn(&mut Graph) -> Result<Var>,
    probes: usize,
    tol: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Probe>> {
    let grads = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..store.get(id).numel());
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[j]) as f64;
        let orig = store.get(id).data()[j];
        let mut eval = |v: f32| -> Result<f64> {
            store.get_mut(id).data_mut()[j] = v;
            let mut g = Graph::new(store);
            let l = build(&mut g)?;
            Ok(f64::from(g.value(l).data()[0]))
        };
        let centre = eval(orig)?;
        let mut numeric = Vec::new();
        for eps in [1e-3f32, 3e-3] {
            let plus = eval(orig + eps)?;
            let minus = eval(orig - eps)?;
            let e = f64::from(eps);
            numeric.push((plus - minus) / (2.0 * e));
            numeric.push((plus - centre) / e);
            numeric.push((centre - minus) / e);
        }
        store.get_mut(id).data_mut()[j] = orig;
        let passed = numeric.iter().any(|&n| {
            let scale = analytic.abs().max(n.abs()).max(1e-2);
            (analytic - n).abs() / scale < tol
        });
        out.push(Probe {
            param: store.name(id).to_string(),
            index: j,
            analytic,
            numeric,
            passed,
        });
    }
    Ok(out)
}
