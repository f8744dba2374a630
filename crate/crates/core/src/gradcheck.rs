//! Central finite differences over a [`ParamStore`], for verifying tape gradients.

use crate::params::ParamStore;

/// `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every scalar parameter, in
/// [`ParamStore::flatten`] order.
pub fn central_differences(store: &ParamStore, step: f64, f: impl Fn(&ParamStore) -> f64) -> Vec<f64> {
    let mut s = store.clone();
    (0..s.num_scalars())
        .map(|i| {
            let orig = *s.scalar_mut(i);
            *s.scalar_mut(i) = orig + step;
            let fp = f(&s);
            *s.scalar_mut(i) = orig - step;
            let fm = f(&s);
            *s.scalar_mut(i) = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over paired entries.
///
/// The floor keeps entries where both gradients are essentially zero from
/// dominating through round-off.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
