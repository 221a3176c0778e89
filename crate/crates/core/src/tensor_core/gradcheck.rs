//! Central finite-difference gradient oracle.
//!
//! Only forward evaluations are used here, so the numbers are independent of
//! the backward implementation they are compared against.

use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences `(f(p + eps) - f(p - eps)) / 2 eps` for every scalar
/// in the store. `loss` must be a pure function of the parameter values.
pub fn numeric_gradients(
    store: &mut ParamStore<f64>,
    eps: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> Vec<Tensor<f64>> {
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let [rows, cols] = store.value(id).shape();
        let mut g = Tensor::zeros(rows, cols);
        for k in 0..rows * cols {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            let up = loss(store);
            store.value_mut(id).data_mut()[k] = orig - eps;
            let down = loss(store);
            store.value_mut(id).data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Fourth-order central differences
/// `(-f(p + 2h) + 8 f(p + h) - 8 f(p - h) + f(p - 2h)) / 12 h`.
pub fn numeric_gradients_4th(
    store: &mut ParamStore<f64>,
    h: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> Vec<Tensor<f64>> {
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let [rows, cols] = store.value(id).shape();
        let mut g = Tensor::zeros(rows, cols);
        for k in 0..rows * cols {
            let orig = store.value(id).data()[k];
            let mut at = |d: f64, store: &mut ParamStore<f64>| {
                store.value_mut(id).data_mut()[k] = orig + d;
                loss(store)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h, store), at(h, store), at(-h, store), at(-2.0 * h, store));
            store.value_mut(id).data_mut()[k] = orig;
            g.data_mut()[k] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
        }
        out.push(g);
    }
    out
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest componentwise relative error.
    pub max_relative_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst component.
    pub worst: Option<(String, usize, f64, f64)>,
    /// `||a - n|| / max(||a||, ||n||)` over all components.
    pub global_relative_error: f64,
    pub components: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

pub fn compare(
    store: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    numeric: &[Tensor<f64>],
    floor: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        global_relative_error: 0.0,
        components: 0,
    };
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for (id, num) in store.ids().zip(numeric) {
        let ana = analytic.get(id, store);
        for (k, (&a, &n)) in ana.data().iter().zip(num.data()).enumerate() {
            let e = relative_error(a, n, floor);
            if e > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = e;
                report.worst = Some((store.name(id).to_string(), k, a, n));
            }
            diff2 += (a - n) * (a - n);
            a2 += a * a;
            n2 += n * n;
            report.components += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    report.global_relative_error = if denom > 0.0 { diff2.sqrt() / denom } else { 0.0 };
    report
}
