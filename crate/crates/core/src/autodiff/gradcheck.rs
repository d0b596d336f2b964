use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing backprop against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|backprop - central| / max(|backprop|, |central|, floor)`
    /// with `floor = max(1e-8, 1e-6 · max |backprop|)`, so coordinates whose
    /// gradient is negligible next to the largest one are judged on the
    /// scale of that one.
    pub max_relative_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    /// Coordinates re-estimated with smaller steps; see [`grad_check`].
    pub refined: usize,
}

/// Relative error above which a coordinate is re-estimated.
const REFINE_ABOVE: f64 = 1e-6;

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences of step `h`, over every coordinate of every parameter.
///
/// A coordinate that disagrees is re-estimated with steps `h/10` and
/// `h/100` and judged by its closest estimate. This only rescues intervals
/// that straddle a kink (a ReLU input near zero); a wrong gradient
/// disagrees at every step.
pub fn grad_check<T, F>(store: &mut ParamStore<T>, h: f64, mut f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    store.zero_grads();
    let mut graph = Graph::new();
    let loss = f(&mut graph, store)?;
    let grads = graph.backward(loss)?;
    graph.accumulate_param_grads(&grads, store)?;
    let analytic: Vec<Vec<T>> = store.ids().map(|id| store.grad(id).data().to_vec()).collect();
    let largest = analytic.iter().flatten().fold(0f64, |m, v| m.max(v.to_f64_lossy().abs()));
    let floor = (1e-6 * largest).max(1e-8);
    store.zero_grads();

    let mut eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = f(&mut g, store)?;
        g.value(loss)
            .item()
            .map(Scalar::to_f64_lossy)
            .ok_or_else(|| Error::InvalidInput("grad_check needs a scalar function".into()))
    };

    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, coordinates: 0, refined: 0 };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for i in 0..store.value(id).len() {
            let backprop = analytic[pi][i].to_f64_lossy();
            let mut err = f64::INFINITY;
            for step in [h, h / 10.0, h / 100.0] {
                let original = store.value(id).data()[i];
                store.value_mut(id).data_mut()[i] = T::from_float(original.to_f64_lossy() + step);
                let plus = eval(store)?;
                store.value_mut(id).data_mut()[i] = T::from_float(original.to_f64_lossy() - step);
                let minus = eval(store)?;
                store.value_mut(id).data_mut()[i] = original;
                let central = (plus - minus) / (2.0 * step);
                let denom = backprop.abs().max(central.abs()).max(floor);
                let e = (backprop - central).abs() / denom;
                if e.is_nan() || e < err {
                    err = e;
                }
                if err.is_nan() || err <= REFINE_ABOVE {
                    break;
                }
                if step == h {
                    report.refined += 1;
                }
            }
            report.coordinates += 1;
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
