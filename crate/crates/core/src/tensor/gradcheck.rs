//! Central finite-difference checks of tape gradients.

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Worst per-parameter discrepancy found by [`check_params`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error over all parameters.
    pub max_rel_error: f64,
    /// Name of the parameter where it occurred.
    pub worst_param: String,
    pub n_checked: usize,
}

/// Compare the analytic gradient of the scalar built by `loss` with central
/// differences of step `h`, for every entry of every parameter in `store`.
///
/// The error of one parameter is `max|analytic - numeric|` divided by the
/// larger of the two max-norms (or 1e-10 when both vanish).
pub fn check_params<F>(store: &mut ParamStore, h: f64, loss: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
    for (id, g) in grads.param_grads() {
        analytic[id.0].copy_from_slice(g.data());
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let v = loss(&mut tape, store)?;
        let t = tape.value(v);
        if t.shape() != [1, 1] {
            return Err(Error::Shape("loss is not a scalar".into()));
        }
        Ok(t.data()[0])
    };

    let mut report = GradCheck { max_rel_error: 0.0, worst_param: String::new(), n_checked: 0 };
    for (pi, grad) in analytic.iter().enumerate() {
        let id = super::ParamId(pi);
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..grad.len() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_diff = max_diff.max((numeric - grad[i]).abs());
            scale = scale.max(numeric.abs()).max(grad[i].abs());
            report.n_checked += 1;
        }
        let rel = max_diff / scale.max(1e-10);
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = store.get(id).name.clone();
        }
    }
    Ok(report)
}
