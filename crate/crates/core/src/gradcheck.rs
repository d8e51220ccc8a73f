//! Central-difference verification of tape gradients (64-bit only).

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Cap on checked coordinates per tensor; evenly spaced when it applies.
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-6, max_per_tensor: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Largest tape-gradient magnitude among checked coordinates.
    pub max_abs_grad: f64,
}

fn eval_loss<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let loss = f(&mut g, &p)?;
    let v = g.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check loss" });
    }
    Ok(v)
}

/// Compares tape gradients of the scalar `f` against central differences.
/// Returns the max over checked coordinates of
/// `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&opts.eps) {
        return Err(Error::Config(format!("grad_check eps {} outside [1e-7, 1e-4]", opts.eps)));
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    if g.value(loss).numel() != 1 || !g.value(loss).data()[0].is_finite() {
        return Err(Error::NonFinite { op: "grad_check loss" });
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| match g.grad(bound[id]) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; store.get(id).numel()],
        })
        .collect();
    drop(g);

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0, max_abs_grad: 0.0 };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match opts.max_per_tensor {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + opts.eps;
            let plus = eval_loss(store, &f);
            store.get_mut(id).data_mut()[j] = orig - opts.eps;
            let minus = eval_loss(store, &f);
            store.get_mut(id).data_mut()[j] = orig;
            let fd = (plus? - minus?) / (2.0 * opts.eps);
            let ad = analytic[id.index()][j];
            let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            report.checked += 1;
            report.max_abs_grad = report.max_abs_grad.max(ad.abs());
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
