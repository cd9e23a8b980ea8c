//! Central finite-difference verification of analytic gradients.
//!
//! The checker rebuilds the loss through a user closure once per perturbed
//! coordinate, so the closure must be deterministic (re-seed any RNG inside
//! it). Comparisons use a mixed tolerance, `|a - n| <= atol + rtol * max(|a|,
//! |n|)`, which keeps near-zero gradients from failing on relative error.

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, TensorId};

/// Summary of one finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Coordinates compared.
    pub checked: usize,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
}

/// Tolerances and probe budget for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Probe at most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            step: 1e-5,
            rtol: 1e-4,
            atol: 1e-7,
            max_coords_per_param: 64,
        }
    }
}

/// Compares analytic gradients of `build`'s scalar output against central
/// differences for every parameter the graph leased. Errors on the first
/// coordinate outside tolerance.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    settings: GradCheckSettings,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<TensorId>,
{
    let mut graph = Graph::new();
    let root = build(&mut graph, store)?;
    graph.backward(root)?;
    let analytic = graph.param_grads();
    if analytic.is_empty() {
        return Err(Error::InvalidArgument(
            "gradient check found no parameters with gradients".into(),
        ));
    }

    let mut report = GradCheckReport {
        checked: 0,
        max_abs_diff: 0.0,
        max_rel_diff: 0.0,
    };
    for (pid, grad) in &analytic {
        let numel = grad.numel();
        let stride = numel.div_ceil(settings.max_coords_per_param).max(1);
        for i in (0..numel).step_by(stride) {
            let original = store.value(*pid).data()[i];

            store.value_mut(*pid).data_mut()[i] = original + settings.step;
            let mut gp = Graph::new();
            let rp = build(&mut gp, store)?;
            let loss_plus = gp.value(rp).item();

            store.value_mut(*pid).data_mut()[i] = original - settings.step;
            let mut gm = Graph::new();
            let rm = build(&mut gm, store)?;
            let loss_minus = gm.value(rm).item();

            store.value_mut(*pid).data_mut()[i] = original;

            let numeric = (loss_plus - loss_minus) / (2.0 * settings.step);
            let a = grad.data()[i];
            let abs_diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if abs_diff > settings.atol + settings.rtol * scale {
                return Err(Error::InvalidArgument(format!(
                    "gradient mismatch for {}[{}]: analytic {a:.9e}, numeric {numeric:.9e}",
                    store.name(*pid),
                    i
                )));
            }
            report.checked += 1;
            report.max_abs_diff = report.max_abs_diff.max(abs_diff);
            if scale > 0.0 {
                report.max_rel_diff = report.max_rel_diff.max(abs_diff / scale);
            }
        }
    }
    Ok(report)
}
