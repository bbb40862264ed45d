//! File formats: 8-bit RGB frames, intrinsics sidecars and raw depth maps.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::tensor::{Shape, Tensor};

pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const DEPTH_DIR: &str = "depth";

/// File name of frame `index` in a sequence directory.
pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Locates frame `index` under `dir`, accepting zero-padded or plain names
/// with a png, jpg or jpeg extension.
pub fn find_frame(dir: &Path, index: usize) -> Option<PathBuf> {
    let stems = [format!("{index:06}"), format!("{index:010}"), index.to_string()];
    stems
        .iter()
        .flat_map(|s| ["png", "jpg", "jpeg"].map(|ext| dir.join(format!("{s}.{ext}"))))
        .find(|p| p.is_file())
}

fn image_error(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads an 8-bit image as a `[1, 3, h, w]` tensor in `[0, 1]`, optionally
/// resized to `(height, width)` with a triangle filter.
pub fn load_image(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb32f();
    let img = match size {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => {
            image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
        }
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]).clamp(0.0, 1.0)
    }))
}

/// Quantizes a `[1, 3, h, w]` tensor in `[0, 1]` to an 8-bit RGB image.
pub fn to_rgb8(image: &Tensor) -> Result<RgbImage> {
    let [n, c, h, w] = image.dims();
    if n != 1 || c != 3 {
        return Err(Error::invalid(format!("expected a [1, 3, h, w] image, got {}", image.shape())));
    }
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let q = |ch| (image.at(0, ch, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    }))
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    ensure_parent(path)?;
    to_rgb8(image)?.save(path).map_err(|e| image_error(path, e))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let k: Intrinsics = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    k.validate()?;
    Ok(k)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(k)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Intrinsics after resizing the image to `width × height`. Pixel centres
/// sit at integer coordinates, so the principal point maps as
/// `c' = (c + 0.5) s − 0.5`.
pub fn resize_intrinsics(k: &Intrinsics, width: usize, height: usize) -> Intrinsics {
    let sx = width as f64 / k.width as f64;
    let sy = height as f64 / k.height as f64;
    Intrinsics {
        fx: k.fx * sx,
        fy: k.fy * sy,
        cx: (k.cx + 0.5) * sx - 0.5,
        cy: (k.cy + 0.5) * sy - 0.5,
        width,
        height,
    }
}

/// Writes a `[1, 1, h, w]` map as little-endian f32, row-major.
pub fn write_f32_map(path: &Path, map: &Tensor) -> Result<()> {
    let [n, c, _, _] = map.dims();
    if n != 1 || c != 1 {
        return Err(Error::invalid(format!("expected a [1, 1, h, w] map, got {}", map.shape())));
    }
    ensure_parent(path)?;
    let bytes: Vec<u8> = map.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a little-endian f32 map of known size.
pub fn read_f32_map(path: &Path, height: usize, width: usize) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * height * width {
        return Err(Error::invalid(format!(
            "{}: {} bytes do not hold a {height}x{width} f32 map",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
        .collect();
    Tensor::from_vec(Shape::new(1, 1, height, width), data)
}
