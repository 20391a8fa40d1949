//! Floating-point grayscale rasters and PNG I/O.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma};

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "raster buffer size");
        Raster { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Raster::new(width, height, vec![value; width * height])
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample with edge clamping; `x`, `y` in pixel-centre coordinates.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let max_x = (self.width - 1) as f32;
        let max_y = (self.height - 1) as f32;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Raster::new(
            img.width() as usize,
            img.height() as usize,
            img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        )
    }

    pub fn to_gray(&self) -> GrayImage {
        let buf = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, buf).expect("buffer size")
    }

    /// Resamples to `size`×`size` with a triangle filter.
    pub fn resized(&self, size: usize) -> Raster {
        if self.width == size && self.height == size {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer size");
        let out = image::imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
        Raster::new(size, size, out.into_raw())
    }
}

pub fn load_gray(path: &Path) -> Result<GrayImage, image::ImageError> {
    Ok(image::open(path)?.into_luma8())
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<(), image::ImageError> {
    img.save_with_format(path, image::ImageFormat::Png)
}

/// Loads a PNG and resamples it to the encoder's square input size.
pub fn load_raster(path: &Path, size: usize) -> Result<Raster, image::ImageError> {
    Ok(Raster::from_gray(&load_gray(path)?).resized(size))
}
