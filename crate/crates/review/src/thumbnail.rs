use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use image::imageops::FilterType;
use image::ImageFormat;

use crate::ReviewError;

/// Longest thumbnail side in pixels.
pub const MAX_EDGE: u32 = 256;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn cache_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{}.png", hex::encode(image_id.as_bytes())))
}

fn render(source: &Path) -> Result<Vec<u8>, ReviewError> {
    let img = image::open(source)?;
    let (w, h) = (img.width(), img.height());
    let img = if w.max(h) > MAX_EDGE {
        let scale = MAX_EDGE as f64 / w.max(h) as f64;
        let nw = ((w as f64 * scale).round() as u32).clamp(1, MAX_EDGE);
        let nh = ((h as f64 * scale).round() as u32).clamp(1, MAX_EDGE);
        img.resize_exact(nw, nh, FilterType::Triangle)
    } else {
        img
    };
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

pub(crate) fn cached(dir: &Path, image_id: &str, source: &Path) -> Result<Vec<u8>, ReviewError> {
    let path = cache_path(dir, image_id);
    if let Ok(bytes) = fs::read(&path) {
        return Ok(bytes);
    }
    let bytes = render(source)?;
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{}.{}.tmp", std::process::id(), TMP_COUNTER.fetch_add(1, Ordering::Relaxed)));
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, &path)?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    #[test]
    fn large_images_shrink_and_small_ones_keep_size() {
        let dir = tempfile::tempdir().unwrap();
        let big = dir.path().join("big.png");
        GrayImage::from_fn(600, 300, |x, _| Luma([(x % 256) as u8])).save(&big).unwrap();
        let small = dir.path().join("small.png");
        GrayImage::new(40, 70).save(&small).unwrap();
        let cache = dir.path().join("cache");
        let t = image::load_from_memory(&cached(&cache, "big/1", &big).unwrap()).unwrap();
        assert_eq!((t.width(), t.height()), (256, 128));
        let t = image::load_from_memory(&cached(&cache, "s", &small).unwrap()).unwrap();
        assert_eq!((t.width(), t.height()), (40, 70));
        // served from the cache once written
        fs::remove_file(&big).unwrap();
        assert!(cached(&cache, "big/1", &big).is_ok());
        assert!(cache_path(&cache, "big/1").starts_with(&cache));
    }
}
