//! Stochastic view generation for the pretext task and self-labeling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raster::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Standard,
    Strong,
}

/// Random crop of a fraction of the image area, resized back to full size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropResize {
    pub prob: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flip {
    pub prob: f64,
}

/// Multiplicative brightness and contrast factors drawn from `1 ± magnitude`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub prob: f64,
    pub brightness: f64,
    pub contrast: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blur {
    pub prob: f64,
    pub min_sigma: f64,
    pub max_sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub prob: f64,
    pub max_degrees: f64,
}

/// Ordered transform pipeline: crop-resize, flip, rotation (one resampling
/// pass), then brightness/contrast jitter, then Gaussian blur.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub strength: Strength,
    pub crop: CropResize,
    pub flip: Flip,
    pub rotation: Rotation,
    pub jitter: Jitter,
    pub blur: Blur,
}

impl AugmentationPolicy {
    pub fn standard() -> Self {
        AugmentationPolicy {
            strength: Strength::Standard,
            crop: CropResize { prob: 1.0, min_scale: 0.4, max_scale: 1.0 },
            flip: Flip { prob: 0.5 },
            rotation: Rotation { prob: 0.5, max_degrees: 15.0 },
            jitter: Jitter { prob: 0.8, brightness: 0.4, contrast: 0.4 },
            blur: Blur { prob: 0.3, min_sigma: 0.1, max_sigma: 1.0 },
        }
    }

    pub fn strong() -> Self {
        AugmentationPolicy {
            strength: Strength::Strong,
            crop: CropResize { prob: 1.0, min_scale: 0.3, max_scale: 1.0 },
            flip: Flip { prob: 0.5 },
            rotation: Rotation { prob: 0.7, max_degrees: 25.0 },
            jitter: Jitter { prob: 0.9, brightness: 0.5, contrast: 0.5 },
            blur: Blur { prob: 0.5, min_sigma: 0.1, max_sigma: 1.5 },
        }
    }

    /// Every transform disabled.
    pub fn identity() -> Self {
        AugmentationPolicy {
            strength: Strength::Standard,
            crop: CropResize { prob: 0.0, min_scale: 1.0, max_scale: 1.0 },
            flip: Flip { prob: 0.0 },
            rotation: Rotation { prob: 0.0, max_degrees: 0.0 },
            jitter: Jitter { prob: 0.0, brightness: 0.0, contrast: 0.0 },
            blur: Blur { prob: 0.0, min_sigma: 0.0, max_sigma: 0.0 },
        }
    }

    /// True when every magnitude range of `self` contains the matching range of `other`.
    pub fn covers(&self, other: &AugmentationPolicy) -> bool {
        self.crop.min_scale <= other.crop.min_scale
            && self.crop.max_scale >= other.crop.max_scale
            && self.rotation.max_degrees >= other.rotation.max_degrees
            && self.jitter.brightness >= other.jitter.brightness
            && self.jitter.contrast >= other.jitter.contrast
            && self.blur.min_sigma <= other.blur.min_sigma
            && self.blur.max_sigma >= other.blur.max_sigma
    }

    /// Samples one view using `rng`.
    pub fn apply<R: Rng>(&self, image: &Raster, rng: &mut R) -> Raster {
        // draw every decision up front so the stream length is fixed
        let crop_on = rng.random::<f64>() < self.crop.prob;
        let scale = uniform(rng, self.crop.min_scale, self.crop.max_scale);
        let log_ratio = uniform(rng, (3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
        let cx_u = rng.random::<f64>();
        let cy_u = rng.random::<f64>();
        let flip_on = rng.random::<f64>() < self.flip.prob;
        let rot_on = rng.random::<f64>() < self.rotation.prob;
        let angle = uniform(rng, -self.rotation.max_degrees, self.rotation.max_degrees).to_radians();
        let jitter_on = rng.random::<f64>() < self.jitter.prob;
        let bright = uniform(rng, 1.0 - self.jitter.brightness, 1.0 + self.jitter.brightness);
        let contrast = uniform(rng, 1.0 - self.jitter.contrast, 1.0 + self.jitter.contrast);
        let blur_on = rng.random::<f64>() < self.blur.prob;
        let sigma = uniform(rng, self.blur.min_sigma, self.blur.max_sigma);

        let mut out = if crop_on || flip_on || rot_on {
            let (w, h) = (image.width as f64, image.height as f64);
            let (mut cw, mut ch) = if crop_on {
                let ratio = log_ratio.exp();
                ((scale * ratio).sqrt() * w, (scale / ratio).sqrt() * h)
            } else {
                (w, h)
            };
            cw = cw.min(w);
            ch = ch.min(h);
            let x0 = cx_u * (w - cw);
            let y0 = cy_u * (h - ch);
            let (ccx, ccy) = (x0 + cw / 2.0, y0 + ch / 2.0);
            let theta = if rot_on { angle } else { 0.0 };
            let (sin, cos) = theta.sin_cos();
            let mut data = Vec::with_capacity(image.data.len());
            for oy in 0..image.height {
                for ox in 0..image.width {
                    let mut u = (ox as f64 + 0.5) / w - 0.5;
                    let v = (oy as f64 + 0.5) / h - 0.5;
                    if flip_on {
                        u = -u;
                    }
                    let (dx, dy) = (u * cw, v * ch);
                    let sx = ccx + cos * dx - sin * dy - 0.5;
                    let sy = ccy + sin * dx + cos * dy - 0.5;
                    data.push(image.sample(sx as f32, sy as f32));
                }
            }
            Raster::new(image.width, image.height, data)
        } else {
            image.clone()
        };

        if jitter_on {
            let mean = out.data.iter().map(|&v| v as f64).sum::<f64>() / out.data.len() as f64;
            for v in out.data.iter_mut() {
                let c = ((*v as f64 - mean) * contrast + mean) * bright;
                *v = c.clamp(0.0, 1.0) as f32;
            }
        }
        if blur_on && sigma > 0.0 {
            out = gaussian_blur(&out, sigma);
        }
        out
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u = rng.random::<f64>();
    lo + (hi - lo) * u
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &Raster, sigma: f64) -> Raster {
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (image.width as isize, image.height as isize);
    let mut tmp = vec![0.0f32; image.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = (x + k as isize - radius).clamp(0, w - 1);
                acc += kv * image.data[(y * w + sx) as usize];
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0f32; image.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = (y + k as isize - radius).clamp(0, h - 1);
                acc += kv * tmp[(sy * w + x) as usize];
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    Raster::new(image.width, image.height, out)
}

/// Two independently sampled views, deterministic in `(image, seed)`.
pub fn augment(image: &Raster, policy: &AugmentationPolicy, seed: u64) -> (Raster, Raster) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = policy.apply(image, &mut rng);
    let b = policy.apply(image, &mut rng);
    (a, b)
}
