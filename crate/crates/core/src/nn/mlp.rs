//! Fully connected stack with ReLU between layers (none after the last).

use rand::Rng;

use super::{init_params, linear_backward, linear_forward, relu_backward_inplace, relu_inplace, Init, Layout};

#[derive(Clone, Debug)]
pub struct Mlp {
    dims: Vec<usize>,
    layout: Layout,
    inits: Vec<Init>,
    offsets: Vec<(usize, usize)>,
}

/// Input of every layer; entry 0 is the network input.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Vec<f32>>,
}

impl Mlp {
    pub fn new(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let mut layout = Layout::default();
        let mut inits = Vec::new();
        let mut offsets = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            let w = layout.push(format!("layer{i}.weight"), &[pair[1], pair[0]]);
            inits.push(Init::Scaled { fan_in: pair[0], gain: if i + 2 < dims.len() { 2f32.sqrt() } else { 1.0 } });
            let b = layout.push(format!("layer{i}.bias"), &[pair[1]]);
            inits.push(Init::Zeros);
            offsets.push((w, b));
        }
        Mlp { dims: dims.to_vec(), layout, inits, offsets }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("nonempty dims")
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f32> {
        init_params(&self.layout, &self.inits, rng)
    }

    pub fn forward(&self, params: &[f32], x: &[f32]) -> (Vec<f32>, MlpCache) {
        assert_eq!(x.len(), self.input_dim());
        let mut inputs = Vec::with_capacity(self.offsets.len());
        let mut h = x.to_vec();
        let last = self.offsets.len() - 1;
        for (i, &(w, b)) in self.offsets.iter().enumerate() {
            let out_dim = self.dims[i + 1];
            let next = linear_forward(
                &params[w..w + out_dim * self.dims[i]],
                &params[b..b + out_dim],
                &h,
                out_dim,
            );
            inputs.push(h);
            h = next;
            if i != last {
                relu_inplace(&mut h);
            }
        }
        (h, MlpCache { inputs })
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&self, params: &[f32], cache: &MlpCache, grad_out: &[f32], grads: &mut [f32]) -> Vec<f32> {
        let mut g = grad_out.to_vec();
        for i in (0..self.offsets.len()).rev() {
            let (w, b) = self.offsets[i];
            let out_dim = self.dims[i + 1];
            let in_dim = self.dims[i];
            let (gw, gb) = grads.split_at_mut(b);
            g = linear_backward(
                &params[w..w + out_dim * in_dim],
                &cache.inputs[i],
                &g,
                &mut gw[w..w + out_dim * in_dim],
                &mut gb[..out_dim],
            );
            if i > 0 {
                relu_backward_inplace(&cache.inputs[i], &mut g);
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mlp = Mlp::new(&[5, 7, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = mlp.init(&mut rng);
        let x: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = |p: &[f32], x: &[f32]| -> f64 {
            mlp.forward(p, x).0.iter().zip(&r).map(|(a, b)| (a * b) as f64).sum()
        };
        let (_, cache) = mlp.forward(&params, &x);
        let mut grads = vec![0.0; mlp.num_params()];
        let dx = mlp.backward(&params, &cache, &r, &mut grads);
        for i in 0..params.len() {
            let o = params[i];
            params[i] = o + 1e-2;
            let up = probe(&params, &x);
            params[i] = o - 1e-2;
            let down = probe(&params, &x);
            params[i] = o;
            assert!(rel_err((up - down) / 2e-2, grads[i] as f64) < 1e-2, "param {i}");
        }
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += 1e-2;
            let mut xm = x.clone();
            xm[i] -= 1e-2;
            let fd = (probe(&params, &xp) - probe(&params, &xm)) / 2e-2;
            assert!(rel_err(fd, dx[i] as f64) < 1e-2, "input {i}");
        }
    }
}
