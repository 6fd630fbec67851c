//! Central finite-difference gradient checking.
//!
//! The numeric derivative only ever calls the forward pass, so it stays
//! independent of every backward rule it is used to verify.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so that near-zero gradients are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(what, flat index, analytic, numeric)` of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, what: &str, idx: usize, analytic: f64, numeric: f64) {
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((what.to_string(), idx, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.or(self.worst.take());
        }
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Check gradients of `f` with respect to every element of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(&g, *v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(&format!("input{i}"), j, analytic.data()[j], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Check gradients of `f` with respect to every trainable scalar in `store`.
pub fn check_params<F>(store: &ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut base = store.clone();
    base.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &base)?;
    g.backward_into(loss, &mut base)?;
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for idx in 0..store.params().len() {
        let leaf = base.leaf(idx);
        let analytic = leaf
            .grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(leaf.value.shape()));
        for j in 0..leaf.value.numel() {
            let orig = store.leaf(idx).value.data()[j];
            work.leaf_mut(idx).value.data_mut()[j] = orig + step;
            let mut gu = Graph::no_grad();
            let lu = f(&mut gu, &work)?;
            let up = gu.value(lu).item();
            work.leaf_mut(idx).value.data_mut()[j] = orig - step;
            let mut gd = Graph::no_grad();
            let ld = f(&mut gd, &work)?;
            let down = gd.value(ld).item();
            work.leaf_mut(idx).value.data_mut()[j] = orig;
            report.record(&leaf.id, j, analytic.data()[j], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}
