use crate::error::{Error, Result};
use crate::numerics::tensor::{GradMap, ParamStore, Tensor};

/// Central-difference estimate of `df/dp` for every trainable parameter.
///
/// `f` must be a deterministic function of the store. Each coordinate costs
/// two evaluations, so keep the parameter count small.
pub fn finite_difference_grad<F>(f: F, store: &ParamStore, eps: f64) -> Result<GradMap>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut work = store.clone();
    let mut out = GradMap::new();
    let ids: Vec<String> = store.trainable_ids();
    for id in ids {
        let n = store.tensor(&id)?.numel();
        let mut g = Vec::with_capacity(n);
        for k in 0..n {
            let orig = store.tensor(&id)?.data()[k];
            work.get_mut(&id).expect("cloned").tensor.data_mut()[k] = orig + eps;
            let up = f(&work)?;
            work.get_mut(&id).expect("cloned").tensor.data_mut()[k] = orig - eps;
            let down = f(&work)?;
            work.get_mut(&id).expect("cloned").tensor.data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numerical {
                    node: None,
                    msg: format!("objective is non-finite when perturbing {id}[{k}]"),
                });
            }
            g.push((up - down) / (2.0 * eps));
        }
        out.insert(id.clone(), Tensor::new(store.tensor(&id)?.shape().to_vec(), g)?);
    }
    Ok(out)
}

/// Largest per-parameter relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
///
/// Ids missing from one side count as zero gradients. Two all-zero gradients
/// have error 0.
pub fn max_relative_error(a: &GradMap, b: &GradMap) -> f64 {
    let mut worst: f64 = 0.0;
    for id in a.keys().chain(b.keys()) {
        let (ta, tb) = (a.get(id), b.get(id));
        let n = ta.or(tb).map(|t| t.numel()).unwrap_or(0);
        let get = |t: Option<&Tensor>, i: usize| t.map(|t| t.data()[i]).unwrap_or(0.0);
        let mut diff = 0.0;
        let (mut na, mut nb) = (0.0, 0.0);
        for i in 0..n {
            let (x, y) = (get(ta, i), get(tb, i));
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
        let denom = na.max(nb).sqrt();
        let rel = if denom == 0.0 { diff.sqrt() } else { diff.sqrt() / denom };
        worst = worst.max(rel);
    }
    worst
}
