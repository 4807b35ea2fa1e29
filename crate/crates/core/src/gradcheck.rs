//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass, so it is an
//! independent oracle for the tape's backward rules.

use crate::autodiff::{Graph, VarId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct EntryCheck {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub entries: Vec<EntryCheck>,
}

impl GradCheck {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn worst(&self) -> Option<&EntryCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |e| e.rel_error)
    }

    /// Fraction of checked entries whose relative error is below `tol`.
    pub fn pass_fraction(&self, tol: f64) -> f64 {
        if self.entries.is_empty() {
            return 1.0;
        }
        let ok = self.entries.iter().filter(|e| e.rel_error < tol).count();
        ok as f64 / self.entries.len() as f64
    }

    #[track_caller]
    pub fn assert_within(&self, tol: f64) {
        if let Some(w) = self.worst() {
            assert!(
                w.rel_error < tol,
                "gradient mismatch: tensor {} index {}: analytic {:e} vs numeric {:e} (rel {:e})",
                w.tensor,
                w.index,
                w.analytic,
                w.numeric,
                w.rel_error
            );
        }
    }
}

impl GradCheck {
    /// Like [`GradCheck::assert_within`], but entries whose absolute
    /// difference is below `atol` also pass. Gradients that vanish
    /// analytically (e.g. a key bias under softmax) only show rounding noise.
    #[track_caller]
    pub fn assert_within_or_abs(&self, tol: f64, atol: f64) {
        for e in &self.entries {
            assert!(
                e.rel_error < tol || (e.analytic - e.numeric).abs() < atol,
                "gradient mismatch: tensor {} index {}: analytic {:e} vs numeric {:e} (rel {:e})",
                e.tensor,
                e.index,
                e.analytic,
                e.numeric,
                e.rel_error
            );
        }
    }
}

fn eval_loss<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[VarId]) -> Result<VarId>,
{
    let mut g = Graph::new();
    let vars: Vec<VarId> = params.iter().map(|p| g.leaf(p)).collect();
    let loss = f(&mut g, &vars)?;
    if g.data(loss).len() != 1 {
        return Err(Error::Contract("loss closure must return a scalar".into()));
    }
    Ok(g.data(loss)[0])
}

/// Central differences `(f(x+eps) − f(x−eps)) / 2eps` for every entry.
pub fn numerical_gradients<F>(params: &[Tensor], eps: f64, f: F) -> Result<Vec<Vec<f64>>>
where
    F: for<'g> Fn(&mut Graph<'g>, &[VarId]) -> Result<VarId>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut grads = vec![0.0; params[t].numel()];
        for (i, slot) in grads.iter_mut().enumerate() {
            let orig = params[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = eval_loss(&work, &f)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = eval_loss(&work, &f)?;
            work[t].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        out.push(grads);
    }
    Ok(out)
}

/// Compares tape gradients with central differences for every entry of every
/// tensor in `params` that has `requires_grad` set.
pub fn check_gradients<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheck>
where
    F: for<'g> Fn(&mut Graph<'g>, &[VarId]) -> Result<VarId>,
{
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut g = Graph::new();
        let vars: Vec<VarId> = params.iter().map(|p| g.leaf(p)).collect();
        let loss = f(&mut g, &vars)?;
        g.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| {
                p.requires_grad()
                    .then(|| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
            })
            .collect()
    };
    let numeric = numerical_gradients(params, eps, &f)?;
    let mut report = GradCheck::default();
    for (t, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let Some(a) = a else { continue };
        for (i, (&av, &nv)) in a.iter().zip(n).enumerate() {
            report.entries.push(EntryCheck {
                tensor: t,
                index: i,
                analytic: av,
                numeric: nv,
                rel_error: relative_error(av, nv),
            });
        }
    }
    Ok(report)
}
