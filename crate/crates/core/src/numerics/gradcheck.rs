//! Central finite-difference verification of tape gradients.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{Binder, ParamGroup, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Max over sampled coordinates of `|a − fd| / max(|a|, |fd|, 1e-8)`.
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter name, element index, analytic and numeric values at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    /// True when either side produced a non-finite value.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        !self.non_finite && self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of `loss` against central differences.
///
/// `loss` builds the scalar objective on an `f64` tape from the bound
/// parameters; it is evaluated once with gradients and twice per sampled
/// coordinate. Coordinates are drawn uniformly over the scalars of the
/// parameters in `groups`.
pub fn finite_difference_check<F>(
    store: &ParamStore,
    groups: &[ParamGroup],
    epsilon: f64,
    samples: usize,
    seed: u64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &mut Binder<'_>) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    let mut binder = Binder::new(store, groups);
    let out = loss(&mut tape, &mut binder)?;
    let grads = tape.backward(out)?;
    let analytic: std::collections::HashMap<ParamId, Vec<f64>> = binder
        .bound()
        .filter(|(id, _)| groups.contains(&store.get(*id).group))
        .map(|(id, v)| {
            let g = grads.get(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; store.get(id).value.numel()]);
            (id, g)
        })
        .collect();

    let mut candidates: Vec<(ParamId, usize)> = Vec::new();
    let mut ids: Vec<_> = analytic.keys().copied().collect();
    ids.sort();
    for id in ids {
        candidates.extend((0..store.get(id).value.numel()).map(|i| (id, i)));
    }
    if candidates.is_empty() {
        return Err(Error::Config("gradient check found no trainable parameters".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |id: ParamId, index: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::<f64>::inference();
        let mut b = Binder::new(store, groups).with_perturbation(id, index, delta);
        let v = loss(&mut tape, &mut b)?;
        Ok(tape.value(v).item())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, coordinates: 0, worst: None, non_finite: false };
    for _ in 0..samples {
        let (id, index) = candidates[rng.random_range(0..candidates.len())];
        let a = analytic[&id][index];
        let numeric = match (eval(id, index, epsilon), eval(id, index, -epsilon)) {
            (Ok(plus), Ok(minus)) => (plus - minus) / (2.0 * epsilon),
            (Err(Error::NonFinite { .. }), _) | (_, Err(Error::NonFinite { .. })) => f64::NAN,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        report.coordinates += 1;
        if !a.is_finite() || !numeric.is_finite() {
            report.non_finite = true;
            report.max_rel_error = f64::INFINITY;
            report.worst = Some((store.get(id).name.clone(), index, a, numeric));
            continue;
        }
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((store.get(id).name.clone(), index, a, numeric));
        }
    }
    Ok(report)
}
