//! Central finite differences, used as an independent check on the analytic
//! gradients produced by [`crate::autograd`].

use alloc::vec::Vec;

use crate::math;
use crate::params::{ParamGrads, ParamId, ParamStore};

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let scale = math::norm(a).max(math::norm(b));
    if scale == 0.0 {
        0.0
    } else {
        math::sqrt(diff) / scale
    }
}

/// Compares analytic parameter gradients with central differences of `loss`
/// evaluated on perturbed copies of `store`. Returns the relative error over
/// the concatenation of all listed parameters.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    analytic: &ParamGrads,
    h: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut work = store.clone();
    let mut fd = Vec::new();
    let mut an = Vec::new();
    for &id in ids {
        let base = store.value(id).data().to_vec();
        for i in 0..base.len() {
            work.value_mut(id).data_mut()[i] = base[i] + h;
            let up = loss(&work);
            work.value_mut(id).data_mut()[i] = base[i] - h;
            let down = loss(&work);
            work.value_mut(id).data_mut()[i] = base[i];
            fd.push((up - down) / (2.0 * h));
        }
        match analytic.get(id) {
            Some(g) => an.extend_from_slice(g.data()),
            None => an.extend(core::iter::repeat(0.0).take(base.len())),
        }
    }
    rel_error(&an, &fd)
}
