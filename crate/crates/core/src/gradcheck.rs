//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Real;

/// Magnitudes below this are compared absolutely rather than relatively, so
/// coordinates whose true gradient is ~0 don't turn roundoff into huge ratios.
pub const REL_FLOOR: Real = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub delta: Real,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            delta: 1e-4,
            coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub max_rel_error: Real,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub skipped_frozen: usize,
    /// Largest analytic magnitude seen; guards against vacuous all-zero passes.
    pub max_abs_grad: Real,
}

pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `f`'s analytic gradient against `(f(w+δ) − f(w−δ)) / 2δ`.
///
/// `f` must be deterministic and returns the loss together with its gradient.
/// Frozen parameters are skipped; the store is restored before returning.
pub fn gradcheck<F>(store: &mut ParamStore, f: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&ParamStore) -> Result<(Real, Gradients)>,
{
    let (loss, grads) = f(store)?;
    if !loss.is_finite() {
        return Err(Error::Gradcheck(format!("non-finite loss {loss} at the base point")));
    }
    let mut rng = RngStream::new(opts.seed);
    let mut report = GradcheckReport::default();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            report.skipped_frozen += 1;
            continue;
        }
        let len = store.value(id).len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < len => (0..k).map(|_| rng.below(len)).collect(),
            _ => (0..len).collect(),
        };
        for c in coords {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[c]);
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + opts.delta;
            let plus = f(store).map(|r| r.0);
            store.value_mut(id).data_mut()[c] = orig - opts.delta;
            let minus = f(store).map(|r| r.0);
            store.value_mut(id).data_mut()[c] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Gradcheck(format!(
                    "non-finite loss perturbing {}[{c}]",
                    store.get(id).name
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.delta);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            report.max_abs_grad = report.max_abs_grad.max(analytic.abs());
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), c));
            }
        }
    }
    Ok(report)
}
