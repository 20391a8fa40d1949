//! Small residual convolutional encoder.
//!
//! ```text
//! input s×s ─ conv3×3/2 (1→w) ─ relu ─ [res block w] ─ conv3×3/2 (w→2w) ─ relu
//!           ─ [res block 2w] ─ global average pool ─ linear (2w→d)
//! res block: x ↦ relu(x + conv(relu(conv(x))))
//! ```
//!
//! No normalization layers, so every sample is processed independently.

use rand::Rng;

use super::{gemm, init_params, linear_backward, linear_forward, relu_backward_inplace, relu_inplace, Init, Layout};
use crate::raster::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Conv3x3 {
    cin: usize,
    cout: usize,
    stride: usize,
    w_off: usize,
    b_off: usize,
}

fn out_size(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

impl Conv3x3 {
    fn new(layout: &mut Layout, inits: &mut Vec<Init>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let w_off = layout.push(format!("{name}.weight"), &[cout, cin, 3, 3]);
        inits.push(Init::Scaled { fan_in: cin * 9, gain: 2f32.sqrt() });
        let b_off = layout.push(format!("{name}.bias"), &[cout]);
        inits.push(Init::Zeros);
        Conv3x3 { cin, cout, stride, w_off, b_off }
    }

    fn im2col(&self, input: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
        let (ho, wo) = (out_size(h, self.stride), out_size(w, self.stride));
        let plane = ho * wo;
        let mut cols = vec![0.0f32; self.cin * 9 * plane];
        for c in 0..self.cin {
            let src = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((c * 3 + ky) * 3 + kx) * plane..][..plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..][..w];
                        let dst = &mut row[oy * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, ho, wo)
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f32> {
        let plane = ho * wo;
        let mut out = vec![0.0f32; self.cin * h * w];
        for c in 0..self.cin {
            let dst = &mut out[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((c * 3 + ky) * 3 + kx) * plane..][..plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the pre-activation output and the im2col buffer.
    fn forward(&self, params: &[f32], input: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>, usize, usize) {
        let (cols, ho, wo) = self.im2col(input, h, w);
        let plane = ho * wo;
        let mut out = vec![0.0f32; self.cout * plane];
        for (co, bias) in params[self.b_off..self.b_off + self.cout].iter().enumerate() {
            out[co * plane..(co + 1) * plane].fill(*bias);
        }
        let weights = &params[self.w_off..self.w_off + self.cout * self.cin * 9];
        gemm(self.cout, self.cin * 9, plane, weights, false, &cols, false, 1.0, &mut out);
        (out, cols, ho, wo)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        params: &[f32],
        grads: &mut [f32],
        cols: &[f32],
        grad_out: &[f32],
        h: usize,
        w: usize,
        ho: usize,
        wo: usize,
    ) -> Vec<f32> {
        let plane = ho * wo;
        let k = self.cin * 9;
        for co in 0..self.cout {
            grads[self.b_off + co] += grad_out[co * plane..(co + 1) * plane].iter().sum::<f32>();
        }
        gemm(self.cout, plane, k, grad_out, false, cols, true, 1.0, &mut grads[self.w_off..self.w_off + self.cout * k]);
        let weights = &params[self.w_off..self.w_off + self.cout * k];
        let mut dcols = vec![0.0f32; k * plane];
        gemm(k, self.cout, plane, weights, true, grad_out, false, 0.0, &mut dcols);
        self.col2im(&dcols, h, w, ho, wo)
    }
}

#[derive(Clone, Debug)]
pub struct ConvResNet {
    pub input_size: usize,
    pub width: usize,
    pub embedding_dim: usize,
    layout: Layout,
    inits: Vec<Init>,
    stem: Conv3x3,
    block1: [Conv3x3; 2],
    down: Conv3x3,
    block2: [Conv3x3; 2],
    fc_w: usize,
    fc_b: usize,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    stem_cols: Vec<f32>,
    stem_out: Vec<f32>,
    b1a_cols: Vec<f32>,
    b1a_out: Vec<f32>,
    b1b_cols: Vec<f32>,
    b1_out: Vec<f32>,
    down_cols: Vec<f32>,
    down_out: Vec<f32>,
    b2a_cols: Vec<f32>,
    b2a_out: Vec<f32>,
    b2b_cols: Vec<f32>,
    b2_out: Vec<f32>,
    pooled: Vec<f32>,
}

impl ConvResNet {
    pub fn new(input_size: usize, width: usize, embedding_dim: usize) -> Self {
        assert!(input_size >= 4 && width >= 1 && embedding_dim >= 1);
        let mut layout = Layout::default();
        let mut inits = Vec::new();
        let stem = Conv3x3::new(&mut layout, &mut inits, "stem", 1, width, 2);
        let block1 = [
            Conv3x3::new(&mut layout, &mut inits, "block1.conv_a", width, width, 1),
            Conv3x3::new(&mut layout, &mut inits, "block1.conv_b", width, width, 1),
        ];
        let down = Conv3x3::new(&mut layout, &mut inits, "down", width, 2 * width, 2);
        let block2 = [
            Conv3x3::new(&mut layout, &mut inits, "block2.conv_a", 2 * width, 2 * width, 1),
            Conv3x3::new(&mut layout, &mut inits, "block2.conv_b", 2 * width, 2 * width, 1),
        ];
        // damp the residual branch so the blocks start near identity
        inits[4] = Init::Scaled { fan_in: width * 9, gain: 0.5 };
        inits[10] = Init::Scaled { fan_in: 2 * width * 9, gain: 0.5 };
        let fc_w = layout.push("fc.weight", &[embedding_dim, 2 * width]);
        inits.push(Init::Scaled { fan_in: 2 * width, gain: 1.0 });
        let fc_b = layout.push("fc.bias", &[embedding_dim]);
        inits.push(Init::Zeros);
        ConvResNet { input_size, width, embedding_dim, layout, inits, stem, block1, down, block2, fc_w, fc_b }
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

    pub fn forward(&self, params: &[f32], x: &Raster) -> (Vec<f32>, ConvCache) {
        assert_eq!((x.width, x.height), (self.input_size, self.input_size), "encoder input size");
        let s = self.input_size;
        let (mut stem_out, stem_cols, h1, w1) = self.stem.forward(params, &x.data, s, s);
        relu_inplace(&mut stem_out);

        let (mut b1a_out, b1a_cols, _, _) = self.block1[0].forward(params, &stem_out, h1, w1);
        relu_inplace(&mut b1a_out);
        let (mut b1_out, b1b_cols, _, _) = self.block1[1].forward(params, &b1a_out, h1, w1);
        b1_out.iter_mut().zip(&stem_out).for_each(|(o, s)| *o += s);
        relu_inplace(&mut b1_out);

        let (mut down_out, down_cols, h2, w2) = self.down.forward(params, &b1_out, h1, w1);
        relu_inplace(&mut down_out);

        let (mut b2a_out, b2a_cols, _, _) = self.block2[0].forward(params, &down_out, h2, w2);
        relu_inplace(&mut b2a_out);
        let (mut b2_out, b2b_cols, _, _) = self.block2[1].forward(params, &b2a_out, h2, w2);
        b2_out.iter_mut().zip(&down_out).for_each(|(o, s)| *o += s);
        relu_inplace(&mut b2_out);

        let plane = h2 * w2;
        let pooled: Vec<f32> = b2_out
            .chunks(plane)
            .map(|c| c.iter().sum::<f32>() / plane as f32)
            .collect();
        let out = linear_forward(
            &params[self.fc_w..self.fc_w + self.embedding_dim * 2 * self.width],
            &params[self.fc_b..self.fc_b + self.embedding_dim],
            &pooled,
            self.embedding_dim,
        );
        let cache = ConvCache {
            stem_cols,
            stem_out,
            b1a_cols,
            b1a_out,
            b1b_cols,
            b1_out,
            down_cols,
            down_out,
            b2a_cols,
            b2a_out,
            b2b_cols,
            b2_out,
            pooled,
        };
        (out, cache)
    }

    pub fn backward(&self, params: &[f32], cache: &ConvCache, grad_out: &[f32], grads: &mut [f32]) {
        let s = self.input_size;
        let (h1, w1) = (out_size(s, 2), out_size(s, 2));
        let (h2, w2) = (out_size(h1, 2), out_size(w1, 2));
        let plane2 = h2 * w2;
        let c2 = 2 * self.width;

        let (dw, rest) = grads.split_at_mut(self.fc_b);
        let dpooled = linear_backward(
            &params[self.fc_w..self.fc_w + self.embedding_dim * c2],
            &cache.pooled,
            grad_out,
            &mut dw[self.fc_w..],
            &mut rest[..self.embedding_dim],
        );

        // block 2
        let mut d_b2: Vec<f32> = dpooled
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g / plane2 as f32, plane2))
            .collect();
        relu_backward_inplace(&cache.b2_out, &mut d_b2);
        let mut d_b2a = self.block2[1].backward(params, grads, &cache.b2b_cols, &d_b2, h2, w2, h2, w2);
        relu_backward_inplace(&cache.b2a_out, &mut d_b2a);
        let d_down_branch = self.block2[0].backward(params, grads, &cache.b2a_cols, &d_b2a, h2, w2, h2, w2);
        let mut d_down: Vec<f32> = d_b2.iter().zip(&d_down_branch).map(|(a, b)| a + b).collect();

        // downsample
        relu_backward_inplace(&cache.down_out, &mut d_down);
        let mut d_b1 = self.down.backward(params, grads, &cache.down_cols, &d_down, h1, w1, h2, w2);

        // block 1
        relu_backward_inplace(&cache.b1_out, &mut d_b1);
        let mut d_b1a = self.block1[1].backward(params, grads, &cache.b1b_cols, &d_b1, h1, w1, h1, w1);
        relu_backward_inplace(&cache.b1a_out, &mut d_b1a);
        let d_stem_branch = self.block1[0].backward(params, grads, &cache.b1a_cols, &d_b1a, h1, w1, h1, w1);
        let mut d_stem: Vec<f32> = d_b1.iter().zip(&d_stem_branch).map(|(a, b)| a + b).collect();

        relu_backward_inplace(&cache.stem_out, &mut d_stem);
        let _ = self.stem.backward(params, grads, &cache.stem_cols, &d_stem, s, s, h1, w1);
    }
}
