//! Small CPU neural-network toolkit with hand-written backward passes.
//!
//! Models keep their weights in one flat `Vec<f32>` described by a
//! [`Layout`]; forward passes run per sample and return a cache that the
//! matching backward pass consumes. Gradients are accumulated into a flat
//! buffer of the same shape as the weights.

pub mod conv;
pub mod mlp;
pub mod transformer;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use conv::ConvResNet;
pub use mlp::Mlp;
pub use transformer::PatchTransformer;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named slices of a flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub total: usize,
}

impl Layout {
    /// Appends a tensor and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.total;
        let spec = ParamSpec { name: name.into(), shape: shape.to_vec(), offset };
        self.total += spec.len();
        self.specs.push(spec);
        offset
    }
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean normal with `std = gain / sqrt(fan_in)`.
    Scaled { fan_in: usize, gain: f32 },
    Normal(f32),
}

pub fn init_params<R: Rng>(layout: &Layout, inits: &[Init], rng: &mut R) -> Vec<f32> {
    assert_eq!(layout.specs.len(), inits.len());
    let mut out = vec![0.0; layout.total];
    for (spec, init) in layout.specs.iter().zip(inits) {
        let slot = &mut out[spec.range()];
        match *init {
            Init::Zeros => {}
            Init::Ones => slot.fill(1.0),
            Init::Scaled { fan_in, gain } => {
                let dist = Normal::new(0.0, gain / (fan_in as f32).sqrt()).expect("finite std");
                slot.iter_mut().for_each(|v| *v = dist.sample(rng));
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                slot.iter_mut().for_each(|v| *v = dist.sample(rng));
            }
        }
    }
    out
}

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. With `ta` set, `a` is stored `k×m`; with `tb`,
/// `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, beta: f32, c: &mut [f32]) {
    let av = if ta {
        ArrayView2::from_shape((k, m), a).expect("a shape").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("a shape")
    };
    let bv = if tb {
        ArrayView2::from_shape((n, k), b).expect("b shape").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("b shape")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("c shape");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

/// `y = W x + b` with `W` stored `[out, in]`.
pub fn linear_forward(w: &[f32], b: &[f32], x: &[f32], out_dim: usize) -> Vec<f32> {
    let in_dim = x.len();
    let mut y = b.to_vec();
    debug_assert_eq!(w.len(), out_dim * in_dim);
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        *yo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
    }
    y
}

/// Accumulates `dW += dy xᵀ`, `db += dy` and returns `dx = Wᵀ dy`.
pub fn linear_backward(w: &[f32], x: &[f32], dy: &[f32], dw: &mut [f32], db: &mut [f32]) -> Vec<f32> {
    let in_dim = x.len();
    let mut dx = vec![0.0; in_dim];
    for (o, &g) in dy.iter().enumerate() {
        db[o] += g;
        if g == 0.0 {
            continue;
        }
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let drow = &mut dw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    dx
}

pub fn relu_inplace(v: &mut [f32]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes `grad` wherever the post-ReLU activation is not positive.
pub fn relu_backward_inplace(activation: &[f32], grad: &mut [f32]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// L2 normalization; returns the normalized vector and the original norm.
pub fn l2_normalize(v: &[f32]) -> (Vec<f32>, f32) {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
    (v.iter().map(|x| x / norm).collect(), norm)
}

/// Gradient through `u = v / |v|` given `u`, `|v|` and `du`.
pub fn l2_normalize_backward(unit: &[f32], norm: f32, grad_unit: &[f32]) -> Vec<f32> {
    let dot: f32 = unit.iter().zip(grad_unit).map(|(u, g)| u * g).sum();
    unit.iter().zip(grad_unit).map(|(u, g)| (g - u * dot) / norm).collect()
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(size: usize, weight_decay: f32) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; size],
            v: vec![0.0; size],
        }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f32) {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps after a linear warmup.
pub fn cosine_lr(base: f32, step: usize, total: usize, warmup: usize) -> f32 {
    if total == 0 {
        return base;
    }
    if step < warmup {
        return base * (step + 1) as f32 / warmup as f32;
    }
    let span = (total - warmup.min(total)).max(1);
    let progress = ((step - warmup) as f32 / span as f32).min(1.0);
    base * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
}

/// Exponential moving average `target ← m·target + (1−m)·source`.
pub fn ema_update(target: &mut [f32], source: &[f32], momentum: f32) {
    for (t, s) in target.iter_mut().zip(source) {
        *t = momentum * *t + (1.0 - momentum) * s;
    }
}

/// Sums per-sample gradient buffers in index order.
pub fn sum_grads(parts: Vec<Vec<f32>>, size: usize) -> Vec<f32> {
    let mut total = vec![0.0; size];
    for p in parts {
        for (t, g) in total.iter_mut().zip(&p) {
            *t += g;
        }
    }
    total
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| 1.0 - i as f32 * 0.25).collect();
        let mut naive = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                naive[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, naive);

        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![1.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, 1.0, &mut c2);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - (y + 1.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn normalize_backward_matches_fd() {
        let v = [0.3f32, -1.2, 0.7];
        let g = [0.5f32, 0.1, -0.4];
        let (u, n) = l2_normalize(&v);
        let analytic = l2_normalize_backward(&u, n, &g);
        for i in 0..3 {
            let h = 1e-3;
            let mut p = v;
            p[i] += h;
            let mut q = v;
            q[i] -= h;
            let f = |x: &[f32]| -> f32 { l2_normalize(x).0.iter().zip(&g).map(|(a, b)| a * b).sum() };
            let fd = (f(&p) - f(&q)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-3, "{fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn cosine_schedule_shape() {
        assert_eq!(cosine_lr(1.0, 0, 10, 0), 1.0);
        assert!(cosine_lr(1.0, 10, 10, 0).abs() < 1e-6);
        assert!((cosine_lr(1.0, 5, 10, 0) - 0.5).abs() < 1e-6);
        assert!((cosine_lr(1.0, 0, 10, 2) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn ema_momentum_one_is_identity() {
        let mut t = vec![1.0, 2.0];
        ema_update(&mut t, &[5.0, 5.0], 1.0);
        assert_eq!(t, vec![1.0, 2.0]);
        ema_update(&mut t, &[5.0, 5.0], 0.0);
        assert_eq!(t, vec![5.0, 5.0]);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = vec![3.0f32, -2.0];
        let mut opt = Adam::new(2, 0.0);
        for _ in 0..500 {
            let g: Vec<f32> = p.iter().map(|x| 2.0 * x).collect();
            opt.update(&mut p, &g, 0.05);
        }
        assert!(p.iter().all(|x| x.abs() < 0.05), "{p:?}");
    }
}
