//! Central finite-difference gradient checking.

use super::{Graph, ParamStore, Var};
use crate::error::Result;

/// Per-parameter comparison of analytic and numerical gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub numel: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`; zero when both vanish.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

/// Compare [`Graph::backward`] against central differences with step `h` for
/// every parameter in `store`. `loss` builds a scalar from a fresh graph.
pub fn check_all<F>(store: &mut ParamStore<f64>, h: f64, loss: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    g.backward(l, store)?;

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss(&mut g, store)?;
        Ok(g.value(l).data()[0])
    };

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store.get(id).grad.data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let an = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = an.max(nn);
        let rel_error = if denom < 1e-12 { diff } else { diff / denom };
        let max_abs_error = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        out.push(GradCheck {
            name: store.get(id).name.clone(),
            numel: analytic.len(),
            rel_error,
            max_abs_error,
            analytic_norm: an,
        });
    }
    store.zero_grad();
    Ok(out)
}
