//! Central finite-difference gradient checking.
//!
//! Every differentiable path in the workspace is validated against this
//! oracle at 64-bit precision. The checker perturbs individual parameter
//! components by ±step, re-evaluates the scalar loss, and compares the
//! symmetric difference quotient against the tape gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::params::{BoundParams, ParamStore};
use crate::tape::{Tape, Var};

/// Symmetric relative error with a small floor so that near-zero gradient
/// pairs (where FD noise dominates) do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// One probed parameter component.
#[derive(Debug, Clone)]
pub struct GradProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradProbe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    /// Panic with the worst probe spelled out if any probe exceeds `tol`.
    pub fn assert_below(&self, tol: f64) {
        if let Some(w) = self.worst() {
            assert!(
                w.rel_err < tol,
                "gradient check failed at {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel err {:.3e} >= {:.1e}); {} probes total",
                w.param,
                w.index,
                w.analytic,
                w.numeric,
                w.rel_err,
                tol,
                self.probes.len()
            );
        }
    }
}

/// Check tape gradients of `loss_fn` against central finite differences.
///
/// Per trainable parameter tensor, up to `max_per_param` component indices
/// are sampled (all of them when the tensor is small). `loss_fn` must build
/// a scalar loss from freshly bound parameters each call.
pub fn check_gradients<F>(
    store: &ParamStore,
    step: f64,
    max_per_param: usize,
    seed: u64,
    loss_fn: F,
) -> GradCheckReport
where
    F: Fn(&Tape, &BoundParams) -> Var,
{
    let analytic = {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let loss = loss_fn(&tape, &bound);
        let grads = tape.backward(&loss);
        bound.grads_by_name(&grads)
    };
    let eval = |s: &ParamStore| -> f64 {
        let tape = Tape::new();
        let bound = s.bind(&tape);
        loss_fn(&tape, &bound).scalar_value()
    };

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for name in store.trainable_names() {
        let len = store.get(&name).len();
        let indices: Vec<usize> = if len <= max_per_param {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, max_per_param).into_vec()
        };
        for idx in indices {
            let orig = work.get(&name).as_slice().unwrap()[idx];
            work.get_mut(&name).as_slice_mut().unwrap()[idx] = orig + step;
            let plus = eval(&work);
            work.get_mut(&name).as_slice_mut().unwrap()[idx] = orig - step;
            let minus = eval(&work);
            work.get_mut(&name).as_slice_mut().unwrap()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[&name].as_slice().unwrap()[idx];
            report.probes.push(GradProbe {
                param: name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
    }
    report
}
