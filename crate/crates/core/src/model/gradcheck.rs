//! Numerical verification of analytic gradients by central finite
//! differences on a random sample of parameters.

use rand::Rng;

use super::{ModelState, Params};
use crate::error::{Error, Result};
use crate::rng::{labels, stream};
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        // 1e-4 balances truncation against the roundoff floor u*|loss|/(2*eps)
        // so parameters with gradients near 1e-8 still check out.
        Self {
            samples: 200,
            epsilon: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub worst_name: String,
    pub worst_index: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numerical: f64,
}

/// Relative error with the denominator floored at 1e-6, so near-zero
/// gradients are judged on absolute error instead of an amplified ratio.
pub fn gradient_error(analytic: f64, numerical: f64) -> f64 {
    let scale = analytic.abs().max(numerical.abs()).max(1e-6);
    (analytic - numerical).abs() / scale
}

/// Compares `analytic` against central differences of `loss` on a seeded
/// random sample of parameter entries. The model is restored exactly after
/// each probe. Use an f64 model; f32 lacks the headroom for the differences.
pub fn grad_check<T: Scalar>(
    state: &mut ModelState<T>,
    analytic: &Params<T>,
    mut loss: impl FnMut(&ModelState<T>) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if opts.samples == 0 {
        return Err(Error::InvalidArgument("samples must be positive".into()));
    }
    if !(opts.epsilon.is_finite() && opts.epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let shapes: Vec<(String, usize, usize)> = state
        .params
        .named_arrays()
        .into_iter()
        .map(|(n, a)| (n, a.nrows(), a.ncols()))
        .collect();
    let total: usize = shapes.iter().map(|(_, r, c)| r * c).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("model has no parameters".into()));
    }

    let analytic_arrays: Vec<_> = analytic.named_arrays();
    if analytic_arrays.len() != shapes.len() {
        return Err(Error::ParamMismatch(format!(
            "gradient has {} arrays, model has {}",
            analytic_arrays.len(),
            shapes.len()
        )));
    }

    let mut rng = stream(opts.seed, &[labels::GRADCHECK]);
    let eps = opts.epsilon;
    let mut max_rel_err = 0.0f64;
    let mut sum_err = 0.0f64;
    let mut worst = (String::new(), (0, 0), 0.0, 0.0);

    for _ in 0..opts.samples {
        let flat = rng.random_range(0..total);
        let (k, r, col) = locate(&shapes, flat);
        let a = analytic_arrays[k].1[[r, col]].to_f64_lossy();

        let orig = state.params.named_arrays_mut()[k].1[[r, col]];
        let probe = |st: &mut ModelState<T>,
                     value: T,
                     loss: &mut dyn FnMut(&ModelState<T>) -> Result<f64>| {
            st.params.named_arrays_mut()[k].1[[r, col]] = value;
            loss(st)
        };
        let up = probe(state, orig + c::<T>(eps), &mut loss);
        let down = probe(state, orig - c::<T>(eps), &mut loss);
        state.params.named_arrays_mut()[k].1[[r, col]] = orig;
        let numerical = (up? - down?) / (2.0 * eps);

        let err = gradient_error(a, numerical);
        sum_err += err;
        if err > max_rel_err {
            max_rel_err = err;
            worst = (shapes[k].0.clone(), (r, col), a, numerical);
        }
    }

    Ok(GradCheckReport {
        checked: opts.samples,
        max_rel_err,
        mean_rel_err: sum_err / opts.samples as f64,
        worst_name: worst.0,
        worst_index: worst.1,
        worst_analytic: worst.2,
        worst_numerical: worst.3,
    })
}

fn locate(shapes: &[(String, usize, usize)], mut flat: usize) -> (usize, usize, usize) {
    for (k, (_, rows, cols)) in shapes.iter().enumerate() {
        let len = rows * cols;
        if flat < len {
            return (k, flat / cols, flat % cols);
        }
        flat -= len;
    }
    unreachable!("flat index beyond parameter count");
}
