//! Finite-difference verification of analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::CoreRng;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences
/// `(f(x+h) - f(x-h)) / 2h` on `probe_count` randomly chosen scalars among the
/// parameters that receive a gradient. `loss_fn` must be deterministic; two
/// evaluations at the starting point are compared bitwise.
pub fn grad_check<R, F>(
    store: &mut ParamStore<R>,
    mut loss_fn: F,
    probe_count: usize,
    h: f64,
    rng: &mut CoreRng,
) -> Result<GradCheckReport>
where
    R: Real,
    F: FnMut(&ParamStore<R>) -> Result<(R, ParamGrads<R>)>,
{
    let (l0, grads) = loss_fn(store)?;
    let (l1, _) = loss_fn(store)?;
    if l0.f64().to_bits() != l1.f64().to_bits() {
        bail!(NonDeterministic, "loss {} then {}", l0.f64(), l1.f64());
    }
    let candidates: Vec<(ParamId, usize)> = store
        .ids()
        .filter(|&id| grads.get(id).is_some())
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect();
    if candidates.is_empty() {
        bail!(InvalidInput, "loss produced no parameter gradients");
    }
    let mut probes = Vec::with_capacity(probe_count);
    let mut max_rel = 0.0f64;
    for _ in 0..probe_count {
        let (id, idx) = candidates[rng.gen_range(0..candidates.len())];
        let orig = store.get(id).data()[idx];
        let hr = R::of(h);
        store.get_mut(id).data_mut()[idx] = orig + hr;
        let plus = loss_fn(store)?.0;
        store.get_mut(id).data_mut()[idx] = orig - hr;
        let minus = loss_fn(store)?.0;
        store.get_mut(id).data_mut()[idx] = orig;
        // the perturbation actually applied may differ from h in low precision
        let step = (orig + hr).f64() - (orig - hr).f64();
        let numeric = (plus.f64() - minus.f64()) / step;
        let analytic = grads.get(id).unwrap().data()[idx].f64();
        let rel = relative_error(analytic, numeric);
        max_rel = max_rel.max(rel);
        probes.push(Probe { param: String::from(store.name(id)), index: idx, analytic, numeric, rel_error: rel });
    }
    Ok(GradCheckReport { max_rel_error: max_rel, probes })
}
