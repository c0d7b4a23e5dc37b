//! Central finite-difference verification of tape gradients.

use crate::params::ParameterStore;
use crate::tape::{NodeId, Tape};
use crate::tensor::TensorError;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over all trainable parameter entries of
    /// |analytic - central difference| / max(|analytic|, |difference|, 1e-12)
    pub max_rel_error: f64,
    /// Per-parameter worst relative error; frozen parameters are excluded.
    pub per_param: Vec<(String, f64)>,
    /// Jitter attempts consumed before a kink-free evaluation was found.
    pub retries: usize,
}

const MAX_RETRIES: usize = 3;

/// Compare tape gradients of every trainable parameter in `store` against
/// central finite differences with step `eps`.
///
/// `build_loss(store, attempt)` must construct a fresh tape and return the
/// scalar loss node; it must be deterministic for a fixed `attempt`, and for
/// `attempt > 0` it should jitter its inputs (the checker retries when the
/// forward pass lands within `eps` of a relu/pooling kink).
pub fn grad_check<F>(
    store: &mut ParameterStore,
    eps: f64,
    mut build_loss: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&ParameterStore, usize) -> Result<(Tape, NodeId), TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            msg: format!("eps {eps} outside (0, 1e-2]"),
        });
    }

    let mut attempt = 0;
    loop {
        let (mut tape, loss) = build_loss(store, attempt)?;
        if tape.kink_margin() < eps {
            attempt += 1;
            if attempt > MAX_RETRIES {
                return Err(TensorError::KinkDetected {
                    retries: MAX_RETRIES,
                    margin: tape.kink_margin(),
                });
            }
            continue;
        }
        tape.backward(loss)?;

        // Analytic gradients keyed by parameter name.
        let names: Vec<String> = store.trainable().map(|p| p.name.clone()).collect();
        let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(names.len());
        for name in &names {
            let node = tape
                .bound_node(name)
                .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
            let g = match tape.grad(node) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; store.get(name)?.value.numel()],
            };
            analytic.push(g);
        }

        let mut per_param = Vec::with_capacity(names.len());
        let mut max_rel: f64 = 0.0;
        for (name, a_grad) in names.iter().zip(&analytic) {
            let n = store.get(name)?.value.numel();
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let orig = store.get(name)?.value.data()[i];
                store.get_mut(name)?.value.data_mut()[i] = orig + eps;
                let (tp, lp) = build_loss(store, attempt)?;
                let plus = tp.value(lp).item();
                store.get_mut(name)?.value.data_mut()[i] = orig - eps;
                let (tm, lm) = build_loss(store, attempt)?;
                let minus = tm.value(lm).item();
                store.get_mut(name)?.value.data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let denom = a_grad[i].abs().max(numeric.abs()).max(1e-12);
                let rel = (a_grad[i] - numeric).abs() / denom;
                worst = worst.max(rel);
            }
            max_rel = max_rel.max(worst);
            per_param.push((name.clone(), worst));
        }

        return Ok(GradCheckReport {
            max_rel_error: max_rel,
            per_param,
            retries: attempt,
        });
    }
}
