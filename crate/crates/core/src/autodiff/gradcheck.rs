//! Central finite-difference gradient checking at `f64`.
//!
//! Only the forward pass is used to build the numeric estimate, so the check
//! is independent of every backward rule it validates.

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::Result;

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

pub struct GradCheck {
    pub step: f64,
    pub floor: f64,
    /// Entries checked per parameter; larger tensors are sampled at even stride.
    pub max_entries_per_param: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-5,
            max_entries_per_param: 64,
        }
    }
}

impl GradCheck {
    /// Compares `analytic[i]` with central differences of `loss` for every
    /// trainable parameter selected by `filter`.
    pub fn run(
        &self,
        store: &ParamStore<f64>,
        analytic: &[Option<Vec<f64>>],
        mut loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
        filter: impl Fn(&str) -> bool,
    ) -> Result<GradCheckReport> {
        let mut work = store.clone();
        let mut report = GradCheckReport {
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        let ids: Vec<(ParamId, String, usize)> = store
            .iter()
            .filter(|(_, p)| p.kind.trainable() && filter(&p.name))
            .map(|(id, p)| (id, p.name.clone(), p.value.numel()))
            .collect();
        for (id, name, n) in ids {
            let stride = n.div_ceil(self.max_entries_per_param).max(1);
            for j in (0..n).step_by(stride) {
                let orig = work.value(id).data()[j];
                work.value_mut(id).data_mut()[j] = orig + self.step;
                let plus = loss(&work)?;
                work.value_mut(id).data_mut()[j] = orig - self.step;
                let minus = loss(&work)?;
                work.value_mut(id).data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[j]);
                let e = rel_error(a, numeric, self.floor);
                report.checked += 1;
                if report.worst.is_none() || e > report.max_rel_error {
                    report.max_rel_error = e;
                    report.worst = Some((name.clone(), j));
                }
            }
        }
        Ok(report)
    }
}
