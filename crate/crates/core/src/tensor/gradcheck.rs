//! Central finite-difference checks of parameter gradients.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Perturbation size.
    pub h: f64,
    /// Coordinates whose one-sided slopes differ by more than
    /// `kink_abs + kink_rel·max|slope|` straddle a kink and are skipped.
    pub kink_abs: f64,
    pub kink_rel: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            kink_abs: 1e-3,
            kink_rel: 0.05,
        }
    }
}

/// Result for one parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorGradCheck {
    pub id: ParamId,
    pub name: String,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over checked coordinates
    /// (0 when both vanish).
    pub rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation changed the routing or crossed a kink.
    pub skipped: usize,
}

/// Compares reverse-mode gradients of `loss` against central differences for every
/// coordinate of every parameter.
///
/// `loss` builds the scalar loss on a fresh graph and returns it together with a
/// discrete signature (e.g. routing decisions); perturbations that change the
/// signature are not compared.
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    opts: GradCheckOptions,
    mut loss: F,
) -> Result<Vec<TensorGradCheck>>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<(Var, Vec<usize>)>,
{
    let mut g = Graph::new();
    let (l, base_sig) = loss(store, &mut g)?;
    let f0 = g.value(l).item();
    let grads = g.backward(l)?;
    drop(g);

    let mut eval = |s: &ParamStore<f64>| -> Result<(f64, Vec<usize>)> {
        let mut g = Graph::new();
        let (l, sig) = loss(s, &mut g)?;
        Ok((g.value(l).item(), sig))
    };

    let mut work = store.clone();
    let mut out = Vec::new();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(shape));
        let n = analytic.numel();
        let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
        let (mut checked, mut skipped) = (0, 0);
        for i in 0..n {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.h;
            let (fp, sp) = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.h;
            let (fm, sm) = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            let up = (fp - f0) / opts.h;
            let down = (f0 - fm) / opts.h;
            if (up - down).abs() > opts.kink_abs + opts.kink_rel * up.abs().max(down.abs()) {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = analytic.data()[i];
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            checked += 1;
        }
        let denom = a_sq.sqrt().max(n_sq.sqrt());
        let rel_error = if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom };
        if !rel_error.is_finite() {
            return Err(Error::NonFinite {
                op: "gradient check",
                context: format!(" for {}", store.name(id)),
            });
        }
        out.push(TensorGradCheck {
            id,
            name: store.name(id).to_owned(),
            rel_error,
            checked,
            skipped,
        });
    }
    Ok(out)
}
