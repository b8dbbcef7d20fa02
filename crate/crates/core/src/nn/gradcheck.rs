//! Central finite-difference checks for analytic gradients.

use rand::Rng;

use super::params::{Grads, ParamStore};
use crate::scalar::Scalar;

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

#[derive(Debug, Clone, Default)]
pub struct ProbeReport {
    pub probes: usize,
    pub worst: f64,
    /// `(tensor name, flat index, analytic, numeric)` for the worst probe.
    pub worst_at: Option<(String, usize, f64, f64)>,
}

impl ProbeReport {
    pub fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        self.probes += 1;
        let e = relative_error(analytic, numeric);
        if e > self.worst || self.worst_at.is_none() {
            self.worst = self.worst.max(e);
            self.worst_at = Some((name.to_string(), idx, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: ProbeReport) {
        self.probes += other.probes;
        if other.worst >= self.worst {
            self.worst = other.worst;
            self.worst_at = other.worst_at.or(self.worst_at.take());
        }
    }
}

/// Probes `per_tensor` random entries of every parameter tensor (all of
/// them when the tensor is that small).
pub fn check_params<R: Rng>(
    store: &mut ParamStore<f64>,
    grads: &Grads<f64>,
    per_tensor: usize,
    h: f64,
    rng: &mut R,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> ProbeReport {
    let mut report = ProbeReport::default();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.value(id).len();
        let name = store.name(id).to_string();
        // small tensors are probed exhaustively
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for idx in picks {
            let orig = store.value(id).data[idx];
            store.value_mut(id).data[idx] = orig + h;
            let up = loss(store);
            store.value_mut(id).data[idx] = orig - h;
            let down = loss(store);
            store.value_mut(id).data[idx] = orig;
            report.record(&name, idx, grads.get(id).data[idx], (up - down) / (2.0 * h));
        }
    }
    report
}

/// Probes `count` random entries of a flat input vector.
pub fn check_slice<T: Scalar, R: Rng>(
    name: &str,
    values: &mut [T],
    analytic: &[T],
    count: usize,
    h: f64,
    rng: &mut R,
    mut loss: impl FnMut(&[T]) -> f64,
) -> ProbeReport {
    let mut report = ProbeReport::default();
    for _ in 0..count {
        let idx = rng.gen_range(0..values.len());
        let orig = values[idx];
        values[idx] = orig + T::lit(h);
        let up = loss(values);
        values[idx] = orig - T::lit(h);
        let down = loss(values);
        values[idx] = orig;
        report.record(name, idx, analytic[idx].to_f64_lossy(), (up - down) / (2.0 * h));
    }
    report
}
