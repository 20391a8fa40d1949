//! Small patch transformer encoder: non-overlapping patches, learned position
//! embeddings, pre-norm blocks (multi-head self-attention + GELU MLP), final
//! layer norm, mean pooling over tokens and a linear output layer.

use rand::Rng;

use super::{gemm, init_params, linear_backward, linear_forward, Init, Layout};
use crate::raster::Raster;

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Clone, Copy, Debug)]
struct LayerNorm {
    gamma: usize,
    beta: usize,
}

struct LnCache {
    xhat: Vec<f32>,
    rstd: Vec<f32>,
}

impl LayerNorm {
    fn new(layout: &mut Layout, inits: &mut Vec<Init>, name: &str, dim: usize) -> Self {
        let gamma = layout.push(format!("{name}.gamma"), &[dim]);
        inits.push(Init::Ones);
        let beta = layout.push(format!("{name}.beta"), &[dim]);
        inits.push(Init::Zeros);
        LayerNorm { gamma, beta }
    }

    fn forward(&self, params: &[f32], x: &[f32], dim: usize) -> (Vec<f32>, LnCache) {
        let rows = x.len() / dim;
        let g = &params[self.gamma..self.gamma + dim];
        let b = &params[self.beta..self.beta + dim];
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f32>() / dim as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / dim as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..dim {
                let h = (row[i] - mean) * rs;
                xhat[r * dim + i] = h;
                y[r * dim + i] = g[i] * h + b[i];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    fn backward(&self, params: &[f32], cache: &LnCache, dy: &[f32], dim: usize, grads: &mut [f32], dx: &mut [f32]) {
        let rows = dy.len() / dim;
        let g = &params[self.gamma..self.gamma + dim];
        let mut dxhat = vec![0.0; dim];
        for r in 0..rows {
            let xh = &cache.xhat[r * dim..(r + 1) * dim];
            let d = &dy[r * dim..(r + 1) * dim];
            for i in 0..dim {
                grads[self.gamma + i] += d[i] * xh[i];
                grads[self.beta + i] += d[i];
                dxhat[i] = d[i] * g[i];
            }
            let mean_d = dxhat.iter().sum::<f32>() / dim as f32;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / dim as f32;
            for i in 0..dim {
                dx[r * dim + i] += cache.rstd[r] * (dxhat[i] - mean_d - xh[i] * mean_dx);
            }
        }
    }
}

/// `[w: out×in, b: out]` applied row-wise to a `[rows, in]` matrix.
#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
    input: usize,
    output: usize,
}

impl Dense {
    fn new(layout: &mut Layout, inits: &mut Vec<Init>, name: &str, input: usize, output: usize) -> Self {
        let w = layout.push(format!("{name}.weight"), &[output, input]);
        inits.push(Init::Scaled { fan_in: input, gain: 1.0 });
        let b = layout.push(format!("{name}.bias"), &[output]);
        inits.push(Init::Zeros);
        Dense { w, b, input, output }
    }

    fn forward(&self, params: &[f32], x: &[f32]) -> Vec<f32> {
        let rows = x.len() / self.input;
        let bias = &params[self.b..self.b + self.output];
        let mut y: Vec<f32> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
        gemm(rows, self.input, self.output, x, false, &params[self.w..self.w + self.output * self.input], true, 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients and returns `dx`.
    fn backward(&self, params: &[f32], x: &[f32], dy: &[f32], grads: &mut [f32]) -> Vec<f32> {
        let rows = x.len() / self.input;
        for r in 0..rows {
            for o in 0..self.output {
                grads[self.b + o] += dy[r * self.output + o];
            }
        }
        gemm(self.output, rows, self.input, dy, true, x, false, 1.0, &mut grads[self.w..self.w + self.output * self.input]);
        let mut dx = vec![0.0; rows * self.input];
        gemm(rows, self.output, self.input, dy, false, &params[self.w..self.w + self.output * self.input], false, 0.0, &mut dx);
        dx
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Dense,
    proj: Dense,
    ln2: LayerNorm,
    fc1: Dense,
    fc2: Dense,
}

struct BlockCache {
    ln1: LnCache,
    a: Vec<f32>,
    qkv: Vec<f32>,
    attn: Vec<Vec<f32>>,
    o_cat: Vec<f32>,
    ln2: LnCache,
    b: Vec<f32>,
    hidden: Vec<f32>,
    act: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct PatchTransformer {
    pub input_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub embedding_dim: usize,
    layout: Layout,
    inits: Vec<Init>,
    patch_embed: Dense,
    pos: usize,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Dense,
}

pub struct TransformerCache {
    patches: Vec<f32>,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    pooled: Vec<f32>,
}

impl PatchTransformer {
    pub fn new(input_size: usize, patch: usize, dim: usize, depth: usize, heads: usize, embedding_dim: usize) -> Self {
        assert!(patch >= 1 && input_size % patch == 0, "input size must be a multiple of the patch size");
        assert!(heads >= 1 && dim % heads == 0, "dim must split evenly across heads");
        let tokens = (input_size / patch).pow(2);
        let mlp_hidden = 2 * dim;
        let mut layout = Layout::default();
        let mut inits = Vec::new();
        let patch_embed = Dense::new(&mut layout, &mut inits, "patch_embed", patch * patch, dim);
        let pos = layout.push("pos_embed", &[tokens, dim]);
        inits.push(Init::Normal(0.02));
        let blocks = (0..depth)
            .map(|i| Block {
                ln1: LayerNorm::new(&mut layout, &mut inits, &format!("block{i}.ln1"), dim),
                qkv: Dense::new(&mut layout, &mut inits, &format!("block{i}.qkv"), dim, 3 * dim),
                proj: Dense::new(&mut layout, &mut inits, &format!("block{i}.proj"), dim, dim),
                ln2: LayerNorm::new(&mut layout, &mut inits, &format!("block{i}.ln2"), dim),
                fc1: Dense::new(&mut layout, &mut inits, &format!("block{i}.fc1"), dim, mlp_hidden),
                fc2: Dense::new(&mut layout, &mut inits, &format!("block{i}.fc2"), mlp_hidden, dim),
            })
            .collect();
        let ln_f = LayerNorm::new(&mut layout, &mut inits, "ln_f", dim);
        let head = Dense::new(&mut layout, &mut inits, "head", dim, embedding_dim);
        PatchTransformer {
            input_size,
            patch,
            dim,
            depth,
            heads,
            mlp_hidden,
            embedding_dim,
            layout,
            inits,
            patch_embed,
            pos,
            blocks,
            ln_f,
            head,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.input_size / self.patch).pow(2)
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

    fn extract_patches(&self, x: &Raster) -> Vec<f32> {
        let p = self.patch;
        let grid = self.input_size / p;
        let mut out = Vec::with_capacity(self.tokens() * p * p);
        for gy in 0..grid {
            for gx in 0..grid {
                for y in 0..p {
                    for xx in 0..p {
                        out.push(x.at(gx * p + xx, gy * p + y));
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, params: &[f32], x: &Raster) -> (Vec<f32>, TransformerCache) {
        assert_eq!((x.width, x.height), (self.input_size, self.input_size), "encoder input size");
        let t = self.tokens();
        let d = self.dim;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let patches = self.extract_patches(x);
        let mut h = self.patch_embed.forward(params, &patches);
        for (v, p) in h.iter_mut().zip(&params[self.pos..self.pos + t * d]) {
            *v += p;
        }

        let mut caches = Vec::with_capacity(self.depth);
        for blk in &self.blocks {
            let (a, ln1) = blk.ln1.forward(params, &h, d);
            let qkv = blk.qkv.forward(params, &a);
            let mut o_cat = vec![0.0; t * d];
            let mut attn = Vec::with_capacity(self.heads);
            for head in 0..self.heads {
                let q = gather(&qkv, t, 3 * d, head * dh, dh);
                let k = gather(&qkv, t, 3 * d, d + head * dh, dh);
                let v = gather(&qkv, t, 3 * d, 2 * d + head * dh, dh);
                let mut s = vec![0.0; t * t];
                gemm(t, dh, t, &q, false, &k, true, 0.0, &mut s);
                for row in s.chunks_mut(t) {
                    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v * scale));
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v * scale - max).exp();
                        sum += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= sum);
                }
                let mut o = vec![0.0; t * dh];
                gemm(t, t, dh, &s, false, &v, false, 0.0, &mut o);
                scatter(&mut o_cat, &o, t, d, head * dh, dh);
                attn.push(s);
            }
            let y = blk.proj.forward(params, &o_cat);
            h.iter_mut().zip(&y).for_each(|(a, b)| *a += b);

            let (b, ln2) = blk.ln2.forward(params, &h, d);
            let hidden = blk.fc1.forward(params, &b);
            let act: Vec<f32> = hidden.iter().map(|&v| gelu(v)).collect();
            let m = blk.fc2.forward(params, &act);
            h.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
            caches.push(BlockCache { ln1, a, qkv, attn, o_cat, ln2, b, hidden, act });
        }

        let (f, ln_f) = self.ln_f.forward(params, &h, d);
        let mut pooled = vec![0.0; d];
        for row in f.chunks(d) {
            pooled.iter_mut().zip(row).for_each(|(p, v)| *p += v / t as f32);
        }
        let out = linear_forward(
            &params[self.head.w..self.head.w + self.embedding_dim * d],
            &params[self.head.b..self.head.b + self.embedding_dim],
            &pooled,
            self.embedding_dim,
        );
        (out, TransformerCache { patches, blocks: caches, ln_f, pooled })
    }

    pub fn backward(&self, params: &[f32], cache: &TransformerCache, grad_out: &[f32], grads: &mut [f32]) {
        let t = self.tokens();
        let d = self.dim;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let (gw, gb) = grads.split_at_mut(self.head.b);
        let dpooled = linear_backward(
            &params[self.head.w..self.head.w + self.embedding_dim * d],
            &cache.pooled,
            grad_out,
            &mut gw[self.head.w..],
            &mut gb[..self.embedding_dim],
        );
        let df: Vec<f32> = (0..t).flat_map(|_| dpooled.iter().map(|g| g / t as f32)).collect();
        let mut dx = vec![0.0; t * d];
        self.ln_f.backward(params, &cache.ln_f, &df, d, grads, &mut dx);

        for (blk, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            // MLP branch
            let dact = blk.fc2.backward(params, &c.act, &dx, grads);
            let dhidden: Vec<f32> = dact.iter().zip(&c.hidden).map(|(g, &h)| g * gelu_grad(h)).collect();
            let db = blk.fc1.backward(params, &c.b, &dhidden, grads);
            blk.ln2.backward(params, &c.ln2, &db, d, grads, &mut dx);

            // attention branch
            let do_cat = blk.proj.backward(params, &c.o_cat, &dx, grads);
            let mut dqkv = vec![0.0; t * 3 * d];
            for head in 0..self.heads {
                let q = gather(&c.qkv, t, 3 * d, head * dh, dh);
                let k = gather(&c.qkv, t, 3 * d, d + head * dh, dh);
                let v = gather(&c.qkv, t, 3 * d, 2 * d + head * dh, dh);
                let p = &c.attn[head];
                let d_o = gather(&do_cat, t, d, head * dh, dh);
                let mut dp = vec![0.0; t * t];
                gemm(t, dh, t, &d_o, false, &v, true, 0.0, &mut dp);
                let mut dv = vec![0.0; t * dh];
                gemm(t, t, dh, p, true, &d_o, false, 0.0, &mut dv);
                for (dp_row, p_row) in dp.chunks_mut(t).zip(p.chunks(t)) {
                    let dot: f32 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                    for (g, &pv) in dp_row.iter_mut().zip(p_row) {
                        *g = pv * (*g - dot) * scale;
                    }
                }
                let mut dq = vec![0.0; t * dh];
                gemm(t, t, dh, &dp, false, &k, false, 0.0, &mut dq);
                let mut dk = vec![0.0; t * dh];
                gemm(t, t, dh, &dp, true, &q, false, 0.0, &mut dk);
                scatter(&mut dqkv, &dq, t, 3 * d, head * dh, dh);
                scatter(&mut dqkv, &dk, t, 3 * d, d + head * dh, dh);
                scatter(&mut dqkv, &dv, t, 3 * d, 2 * d + head * dh, dh);
            }
            let da = blk.qkv.backward(params, &c.a, &dqkv, grads);
            blk.ln1.backward(params, &c.ln1, &da, d, grads, &mut dx);
        }

        for (g, v) in grads[self.pos..self.pos + t * d].iter_mut().zip(&dx) {
            *g += v;
        }
        let _ = self.patch_embed.backward(params, &cache.patches, &dx, grads);
    }
}

/// Copies columns `[col, col+width)` of a `[rows, stride]` matrix.
fn gather(src: &[f32], rows: usize, stride: usize, col: usize, width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&src[r * stride + col..r * stride + col + width]);
    }
    out
}

fn scatter(dst: &mut [f32], src: &[f32], rows: usize, stride: usize, col: usize, width: usize) {
    for r in 0..rows {
        dst[r * stride + col..r * stride + col + width].copy_from_slice(&src[r * width..(r + 1) * width]);
    }
}
