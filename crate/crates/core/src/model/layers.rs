//! Differentiable building blocks: linear, layer norm, GELU, softmax and
//! multi-head attention. Every block exposes `forward` plus a `backward` that
//! accumulates parameter gradients and returns the input gradient.

use ndarray::{Array1, Array2, Axis};

use crate::scalar::{c, Scalar};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    pub w: Array2<T>, // (in, out)
    pub b: Array2<T>, // (1, out)
}

impl<T: Scalar> LinearParams<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.w) + &self.b
    }

    /// Returns dL/dx; accumulates dL/dw and dL/db into `grads`.
    pub fn backward(
        &self,
        x: &Array2<T>,
        dy: &Array2<T>,
        grads: &mut LinearParams<T>,
    ) -> Array2<T> {
        grads.w = &grads.w + &x.t().dot(dy);
        grads.b = &grads.b + &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Array2<T>, // (1, dim)
    pub beta: Array2<T>,  // (1, dim)
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
        }
    }

    /// All-zero arrays, for gradient and moment buffers.
    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array2::zeros((1, dim)),
            beta: Array2::zeros((1, dim)),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut out = x.clone();
        for mut row in out.outer_iter_mut() {
            let (mean, inv_std) = row_stats(&row.to_owned());
            row.mapv_inplace(|v| (v - mean) * inv_std);
        }
        out * &self.gamma + &self.beta
    }

    /// Backward; recomputes the normalization statistics from the stored input.
    pub fn backward(
        &self,
        x: &Array2<T>,
        dy: &Array2<T>,
        grads: &mut LayerNormParams<T>,
    ) -> Array2<T> {
        let dim = x.ncols();
        let inv_n = c::<T>(1.0 / dim as f64);
        let mut dx = Array2::zeros(x.raw_dim());
        for (i, row) in x.outer_iter().enumerate() {
            let row = row.to_owned();
            let (mean, inv_std) = row_stats(&row);
            let xhat: Array1<T> = row.mapv(|v| (v - mean) * inv_std);
            let dy_row = dy.row(i).to_owned();

            for j in 0..dim {
                grads.gamma[[0, j]] = grads.gamma[[0, j]] + dy_row[j] * xhat[j];
                grads.beta[[0, j]] = grads.beta[[0, j]] + dy_row[j];
            }

            let dxhat: Array1<T> = (0..dim).map(|j| dy_row[j] * self.gamma[[0, j]]).collect();
            let mean_dxhat = dxhat.sum() * inv_n;
            let mean_dxhat_xhat = dxhat
                .iter()
                .zip(xhat.iter())
                .map(|(&a, &b)| a * b)
                .sum::<T>()
                * inv_n;
            for j in 0..dim {
                dx[[i, j]] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

fn row_stats<T: Scalar>(row: &Array1<T>) -> (T, T) {
    let n = c::<T>(row.len() as f64);
    let mean = row.sum() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + c::<T>(LN_EPS)).sqrt();
    (mean, inv_std)
}

/// GELU (tanh approximation), elementwise.
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = c::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = c::<T>(0.044_715);
    let u = k * (x + a * x * x * x);
    c::<T>(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = c::<T>(0.797_884_560_802_865_4);
    let a = c::<T>(0.044_715);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let half = c::<T>(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * a * x * x)
}

/// Row-wise softmax (numerically stabilized by the row max).
pub fn softmax_rows<T: Scalar>(scores: &Array2<T>) -> Array2<T> {
    let mut out = scores.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Given a = softmax(s) and dL/da, returns dL/ds.
pub fn softmax_rows_backward<T: Scalar>(a: &Array2<T>, da: &Array2<T>) -> Array2<T> {
    let mut ds = Array2::zeros(a.raw_dim());
    for i in 0..a.nrows() {
        let dot = a
            .row(i)
            .iter()
            .zip(da.row(i).iter())
            .map(|(&p, &d)| p * d)
            .sum::<T>();
        for j in 0..a.ncols() {
            ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
        }
    }
    ds
}

/// Multi-head attention weights. Used both for encoder self-attention
/// (queries == memory) and the decoder's cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: LinearParams<T>,
    pub wk: LinearParams<T>,
    pub wv: LinearParams<T>,
    pub wo: LinearParams<T>,
    pub num_heads: usize,
}

pub struct AttentionCache<T> {
    pub queries_in: Array2<T>, // input on the query side
    pub memory_in: Array2<T>,  // input on the key/value side
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub attn: Vec<Array2<T>>, // per head, rows = queries
    pub concat: Array2<T>,    // heads concatenated, input to wo
}

impl<T: Scalar> AttentionParams<T> {
    pub fn zeros(dim: usize, num_heads: usize) -> Self {
        Self {
            wq: LinearParams::zeros(dim, dim),
            wk: LinearParams::zeros(dim, dim),
            wv: LinearParams::zeros(dim, dim),
            wo: LinearParams::zeros(dim, dim),
            num_heads,
        }
    }

    fn head_dim(&self, dim: usize) -> usize {
        dim / self.num_heads
    }

    /// Attention from `queries` over `memory` (pass the same array for
    /// self-attention). Returns the output and a cache for backward.
    pub fn forward(
        &self,
        queries: &Array2<T>,
        memory: &Array2<T>,
    ) -> (Array2<T>, AttentionCache<T>) {
        let dim = queries.ncols();
        let hd = self.head_dim(dim);
        let scale = c::<T>(1.0 / (hd as f64).sqrt());

        let q = self.wq.forward(queries);
        let k = self.wk.forward(memory);
        let v = self.wv.forward(memory);

        let mut concat = Array2::zeros((queries.nrows(), dim));
        let mut attn = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let cols = h * hd..(h + 1) * hd;
            let qh = q.slice(ndarray::s![.., cols.clone()]).to_owned();
            let kh = k.slice(ndarray::s![.., cols.clone()]).to_owned();
            let vh = v.slice(ndarray::s![.., cols.clone()]).to_owned();
            let scores = qh.dot(&kh.t()) * scale;
            let a = softmax_rows(&scores);
            let oh = a.dot(&vh);
            concat.slice_mut(ndarray::s![.., cols]).assign(&oh);
            attn.push(a);
        }
        let out = self.wo.forward(&concat);
        let cache = AttentionCache {
            queries_in: queries.clone(),
            memory_in: memory.clone(),
            q,
            k,
            v,
            attn,
            concat,
        };
        (out, cache)
    }

    /// Head-averaged attention matrix (rows remain stochastic).
    pub fn head_average(&self, cache: &AttentionCache<T>) -> Array2<T> {
        let mut avg = cache.attn[0].clone();
        for a in &cache.attn[1..] {
            avg = avg + a;
        }
        avg * c::<T>(1.0 / self.num_heads as f64)
    }

    /// Returns (d_queries, d_memory). For self-attention the caller adds them.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        dy: &Array2<T>,
        grads: &mut AttentionParams<T>,
    ) -> (Array2<T>, Array2<T>) {
        let dim = cache.q.ncols();
        let hd = self.head_dim(dim);
        let scale = c::<T>(1.0 / (hd as f64).sqrt());

        let dconcat = self.wo.backward(&cache.concat, dy, &mut grads.wo);

        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.num_heads {
            let cols = h * hd..(h + 1) * hd;
            let doh = dconcat.slice(ndarray::s![.., cols.clone()]).to_owned();
            let a = &cache.attn[h];
            let kh = cache.k.slice(ndarray::s![.., cols.clone()]).to_owned();
            let vh = cache.v.slice(ndarray::s![.., cols.clone()]).to_owned();
            let qh = cache.q.slice(ndarray::s![.., cols.clone()]).to_owned();

            let da = doh.dot(&vh.t());
            let dvh = a.t().dot(&doh);
            let ds = softmax_rows_backward(a, &da) * scale;
            let dqh = ds.dot(&kh);
            let dkh = ds.t().dot(&qh);

            dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&dqh);
            dk.slice_mut(ndarray::s![.., cols.clone()]).assign(&dkh);
            dv.slice_mut(ndarray::s![.., cols]).assign(&dvh);
        }

        let d_queries = self.wq.backward(&cache.queries_in, &dq, &mut grads.wq);
        let d_memory_k = self.wk.backward(&cache.memory_in, &dk, &mut grads.wk);
        let d_memory_v = self.wv.backward(&cache.memory_in, &dv, &mut grads.wv);
        (d_queries, d_memory_k + d_memory_v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
}

pub struct MlpCache<T> {
    pub x_in: Array2<T>,
    pub pre_act: Array2<T>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            fc1: LinearParams::zeros(dim, hidden),
            fc2: LinearParams::zeros(hidden, dim),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, MlpCache<T>) {
        let pre_act = self.fc1.forward(x);
        let act = pre_act.mapv(gelu);
        let out = self.fc2.forward(&act);
        (
            out,
            MlpCache {
                x_in: x.clone(),
                pre_act,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &MlpCache<T>,
        dy: &Array2<T>,
        grads: &mut MlpParams<T>,
    ) -> Array2<T> {
        let act = cache.pre_act.mapv(gelu);
        let dact = self.fc2.backward(&act, dy, &mut grads.fc2);
        let dpre = &dact * &cache.pre_act.mapv(gelu_grad);
        self.fc1.backward(&cache.x_in, &dpre, &mut grads.fc1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    use crate::rng::stream;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() - 0.5)
    }

    /// Central finite difference of a scalar-valued function of one matrix.
    fn fd_grad(x: &Array2<f64>, eps: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                g[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * eps);
            }
        }
        g
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = stream(1, &[10]);
        let x = random_matrix(&mut rng, 3, 4);
        let layer = LinearParams {
            w: random_matrix(&mut rng, 4, 5),
            b: random_matrix(&mut rng, 1, 5),
        };
        let weight = random_matrix(&mut rng, 3, 5); // fixed cotangent
        let loss = |x: &Array2<f64>| (&layer.forward(x) * &weight).sum();

        let mut grads = LinearParams::zeros(4, 5);
        let dy = weight.clone();
        let dx = layer.backward(&x, &dy, &mut grads);
        assert!(max_abs_diff(&dx, &fd_grad(&x, 1e-6, loss)) < 1e-8);

        let loss_w = |w: &Array2<f64>| {
            let l = LinearParams {
                w: w.clone(),
                b: layer.b.clone(),
            };
            (&l.forward(&x) * &weight).sum()
        };
        assert!(max_abs_diff(&grads.w, &fd_grad(&layer.w, 1e-6, loss_w)) < 1e-8);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = stream(2, &[10]);
        let x = random_matrix(&mut rng, 3, 6);
        let ln = LayerNormParams {
            gamma: random_matrix(&mut rng, 1, 6),
            beta: random_matrix(&mut rng, 1, 6),
        };
        let weight = random_matrix(&mut rng, 3, 6);
        let loss = |x: &Array2<f64>| (&ln.forward(x) * &weight).sum();

        let mut grads = LayerNormParams::zeros(6);
        let dx = ln.backward(&x, &weight, &mut grads);
        assert!(max_abs_diff(&dx, &fd_grad(&x, 1e-6, loss)) < 1e-7);

        let loss_g = |g: &Array2<f64>| {
            let l = LayerNormParams {
                gamma: g.clone(),
                beta: ln.beta.clone(),
            };
            (&l.forward(&x) * &weight).sum()
        };
        assert!(max_abs_diff(&grads.gamma, &fd_grad(&ln.gamma, 1e-6, loss_g)) < 1e-7);
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.2, 1.5, 4.0] {
            let eps = 1e-6;
            let fd = (gelu::<f64>(x + eps) - gelu::<f64>(x - eps)) / (2.0 * eps);
            assert!((gelu_grad::<f64>(x) - fd).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut rng = stream(3, &[10]);
        let s = random_matrix(&mut rng, 5, 7);
        let a = softmax_rows(&s);
        for row in a.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = stream(4, &[10]);
        let dim = 8;
        let params = AttentionParams {
            wq: LinearParams {
                w: random_matrix(&mut rng, dim, dim) * 0.3,
                b: random_matrix(&mut rng, 1, dim) * 0.3,
            },
            wk: LinearParams {
                w: random_matrix(&mut rng, dim, dim) * 0.3,
                b: random_matrix(&mut rng, 1, dim) * 0.3,
            },
            wv: LinearParams {
                w: random_matrix(&mut rng, dim, dim) * 0.3,
                b: random_matrix(&mut rng, 1, dim) * 0.3,
            },
            wo: LinearParams {
                w: random_matrix(&mut rng, dim, dim) * 0.3,
                b: random_matrix(&mut rng, 1, dim) * 0.3,
            },
            num_heads: 2,
        };
        let x = random_matrix(&mut rng, 5, dim);
        let weight = random_matrix(&mut rng, 5, dim);
        let loss = |x: &Array2<f64>| {
            let (y, _) = params.forward(x, x);
            (&y * &weight).sum()
        };

        let (_, cache) = params.forward(&x, &x);
        let mut grads = AttentionParams::zeros(dim, 2);
        let (dq, dm) = params.backward(&cache, &weight, &mut grads);
        let dx = dq + dm;
        assert!(max_abs_diff(&dx, &fd_grad(&x, 1e-6, loss)) < 1e-7);

        let loss_wq = |w: &Array2<f64>| {
            let mut p = params.clone();
            p.wq.w = w.clone();
            let (y, _) = p.forward(&x, &x);
            (&y * &weight).sum()
        };
        assert!(max_abs_diff(&grads.wq.w, &fd_grad(&params.wq.w, 1e-6, loss_wq)) < 1e-7);
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = stream(5, &[10]);
        let mlp = MlpParams {
            fc1: LinearParams {
                w: random_matrix(&mut rng, 4, 9),
                b: random_matrix(&mut rng, 1, 9),
            },
            fc2: LinearParams {
                w: random_matrix(&mut rng, 9, 4),
                b: random_matrix(&mut rng, 1, 4),
            },
        };
        let x = random_matrix(&mut rng, 3, 4);
        let weight = random_matrix(&mut rng, 3, 4);
        let loss = |x: &Array2<f64>| {
            let (y, _) = mlp.forward(x);
            (&y * &weight).sum()
        };
        let (_, cache) = mlp.forward(&x);
        let mut grads = MlpParams::zeros(4, 9);
        let dx = mlp.backward(&cache, &weight, &mut grads);
        assert!(max_abs_diff(&dx, &fd_grad(&x, 1e-6, loss)) < 1e-7);
    }
}
