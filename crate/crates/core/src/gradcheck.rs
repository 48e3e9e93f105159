//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so that components whose true
/// gradient is ~0 are judged on absolute error instead of FD noise.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of scalar components compared.
    pub checked: usize,
    /// Name (or input index) and flat offset of the worst component.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    fn record(&mut self, label: &str, offset: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((label.to_string(), offset));
        }
    }
}

fn empty_report(tol: f64) -> GradCheckReport {
    GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
        tol,
    }
}

fn scalar_loss(g: &Graph, loss: Var) -> Result<f64> {
    let t = g.value(loss);
    if t.numel() != 1 {
        return Err(Error::invalid("grad_check", format!("loss must be scalar, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Compares the analytic gradient of `f` with respect to every input
/// against central finite differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone(), false)).collect();
        let loss = f(&mut g, &vars)?;
        scalar_loss(&g, loss)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    scalar_loss(&g, loss)?;
    g.backward(loss)?;

    let mut report = empty_report(tol);
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for j in 0..inputs[k].numel() {
            let orig = inputs[k].data()[j];
            work[k].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.record(&format!("input{k}"), j, analytic[j], numeric);
        }
    }
    Ok(report)
}

/// Same comparison over the entries of a parameter store selected by
/// `select`. `f` builds the loss by binding parameters from the store it
/// is handed.
pub fn grad_check_params<F>(store: &ParamStore, f: F, select: impl Fn(&str) -> bool, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    scalar_loss(&g, loss)?;
    g.backward(loss)?;
    let analytic: std::collections::HashMap<String, Tensor> = g.param_grads().into_iter().collect();

    let mut report = empty_report(tol);
    let mut work = store.clone();
    let names: Vec<String> = store.names().filter(|n| select(n)).map(str::to_string).collect();
    for name in names {
        let n = store.value(&name).unwrap().numel();
        for j in 0..n {
            let orig = store.value(&name).unwrap().data()[j];
            let mut eval_at = |v: f64| -> Result<f64> {
                work.value_mut(&name).unwrap().data_mut()[j] = v;
                let mut g = Graph::new();
                let loss = f(&mut g, &work)?;
                scalar_loss(&g, loss)
            };
            let plus = eval_at(orig + FD_STEP)?;
            let minus = eval_at(orig - FD_STEP)?;
            eval_at(orig)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[j]);
            report.record(&name, j, a, numeric);
        }
    }
    Ok(report)
}
