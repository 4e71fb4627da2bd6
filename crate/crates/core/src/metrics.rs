//! Rank and linear correlation metrics plus an embedding-spread diagnostic.

use ndarray::Array1;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub srcc: f64,
    pub plcc: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Fit a four-parameter logistic to predictions before PLCC.
    pub logistic_fit: bool,
}

fn check_pair<T: Scalar>(pred: &[T], gt: &[T]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} ground-truth values",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 samples, got {}",
            pred.len()
        )));
    }
    for (i, v) in pred.iter().chain(gt.iter()).enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("metric input at position {i}")));
        }
    }
    Ok(())
}

/// Average-tied ranks, 1-based.
pub fn average_ranks<T: Scalar>(values: &[T]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_f64(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return Err(Error::DegenerateVariance(format!(
            "variances ({vx}, {vy}) leave the correlation undefined"
        )));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Spearman rank correlation: Pearson over average-tied ranks.
pub fn srcc<T: Scalar>(pred: &[T], gt: &[T]) -> Result<f64> {
    check_pair(pred, gt)?;
    pearson_f64(&average_ranks(pred), &average_ranks(gt))
}

/// Pearson linear correlation on raw values.
pub fn plcc<T: Scalar>(pred: &[T], gt: &[T]) -> Result<f64> {
    check_pair(pred, gt)?;
    let x: Vec<f64> = pred.iter().map(|v| v.to_f64_lossy()).collect();
    let y: Vec<f64> = gt.iter().map(|v| v.to_f64_lossy()).collect();
    pearson_f64(&x, &y)
}

pub fn evaluate<T: Scalar>(pred: &[T], gt: &[T], opts: &EvalOptions) -> Result<EvalResult> {
    let s = srcc(pred, gt)?;
    let p = if opts.logistic_fit {
        let x: Vec<f64> = pred.iter().map(|v| v.to_f64_lossy()).collect();
        let y: Vec<f64> = gt.iter().map(|v| v.to_f64_lossy()).collect();
        let fitted = logistic_fit(&x, &y);
        pearson_f64(&fitted, &y)?
    } else {
        plcc(pred, gt)?
    };
    Ok(EvalResult {
        srcc: s,
        plcc: p,
        n: pred.len(),
    })
}

fn logistic(x: f64, b: &[f64; 4]) -> f64 {
    b[0] + (b[1] - b[0]) / (1.0 + (-(x - b[2]) / b[3]).exp())
}

/// Gauss-Newton fit of b0 + (b1-b0)/(1+exp(-(x-b2)/b3)); falls back to the
/// raw predictions if the fit degenerates.
fn logistic_fit(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let ymin = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let ymax = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let xmean = x.iter().sum::<f64>() / n;
    let xstd = (x.iter().map(|v| (v - xmean).powi(2)).sum::<f64>() / n).sqrt();
    if xstd == 0.0 || ymax == ymin {
        return x.to_vec();
    }
    let mut b = [ymin, ymax, xmean, xstd.max(1e-6)];
    let mut lambda = 1e-3;
    let mut best = b;
    let mut best_sse = sse(x, y, &b);
    for _ in 0..200 {
        // Jacobian of residuals r_i = logistic(x_i) - y_i.
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&xi, &yi) in x.iter().zip(y) {
            let s = 1.0 / (1.0 + (-(xi - b[2]) / b[3]).exp());
            let r = b[0] + (b[1] - b[0]) * s - yi;
            let d_gain = (b[1] - b[0]) * s * (1.0 - s);
            let grad = [
                1.0 - s,
                s,
                -d_gain / b[3],
                -d_gain * (xi - b[2]) / (b[3] * b[3]),
            ];
            for i in 0..4 {
                jtr[i] += grad[i] * r;
                for j in 0..4 {
                    jtj[i][j] += grad[i] * grad[j];
                }
            }
        }
        for i in 0..4 {
            jtj[i][i] *= 1.0 + lambda;
        }
        let Some(step) = solve4(&jtj, &jtr) else {
            break;
        };
        let mut trial = b;
        for i in 0..4 {
            trial[i] -= step[i];
        }
        if trial[3].abs() < 1e-9 || trial.iter().any(|v| !v.is_finite()) {
            lambda *= 10.0;
            continue;
        }
        let trial_sse = sse(x, y, &trial);
        if trial_sse < best_sse {
            best_sse = trial_sse;
            best = trial;
            b = trial;
            lambda = (lambda * 0.3).max(1e-12);
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    let fitted: Vec<f64> = x.iter().map(|&xi| logistic(xi, &best)).collect();
    if fitted.iter().all(|v| v.is_finite()) {
        fitted
    } else {
        x.to_vec()
    }
}

fn sse(x: &[f64], y: &[f64], b: &[f64; 4]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| (logistic(xi, b) - yi).powi(2))
        .sum()
}

fn solve4(a: &[[f64; 4]; 4], rhs: &[f64; 4]) -> Option<[f64; 4]> {
    let mut m = *a;
    let mut v = *rhs;
    for col in 0..4 {
        let pivot =
            (col..4).max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        v.swap(col, pivot);
        for row in col + 1..4 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
            v[row] -= f * v[col];
        }
    }
    let mut out = [0.0; 4];
    for col in (0..4).rev() {
        let mut s = v[col];
        for k in col + 1..4 {
            s -= m[col][k] * out[k];
        }
        out[col] = s / m[col][col];
    }
    Some(out)
}

/// Mean over images of the mean pairwise cosine distance among that image's
/// crop embeddings. Zero exactly when every image's crops collapse to one
/// direction.
pub fn intra_image_spread<T: Scalar>(per_image: &[Vec<Array1<T>>]) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::InvalidArgument("no images given".into()));
    }
    let mut total = 0.0;
    for (i, crops) in per_image.iter().enumerate() {
        if crops.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "image {i} has {} crops, need at least 2",
                crops.len()
            )));
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for a in 0..crops.len() {
            for b in a + 1..crops.len() {
                let fa = &crops[a];
                let fb = &crops[b];
                let na = fa.dot(fa).sqrt();
                let nb = fb.dot(fb).sqrt();
                if na <= T::zero() || nb <= T::zero() {
                    return Err(Error::DegenerateVariance(format!(
                        "zero-norm embedding in image {i}"
                    )));
                }
                let cos = (fa.dot(fb) / (na * nb)).to_f64_lossy();
                sum += 1.0 - cos;
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / per_image.len() as f64)
}

/// Test-time score for one image: mean model output over its crops.
pub fn aggregate_crop_scores<T: Scalar>(scores: &[T]) -> Result<T> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no crop scores to aggregate".into()));
    }
    let sum: T = scores.iter().cloned().sum();
    Ok(sum / c::<T>(scores.len() as f64))
}
