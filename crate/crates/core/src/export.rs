//! Map export: disparity and uncertainty as 16-bit PNG with a scale sidecar
//! plus raw f32, depth as raw f32, attention rows as 8-bit heat maps with a
//! JSON index.
//!
//! Layout under the export root:
//!
//! ```text
//! disparity/<id>.png  disparity/<id>.f32  disparity/scale.json
//! uncertainty/<id>.png  uncertainty/<id>.f32  uncertainty/scale.json
//! depth/<id>.f32
//! attention/<id>_r<row>_c<col>.png  attention/index.json
//! ```
//!
//! A 16-bit value `v` decodes as `v / scale`. The scales depend only on the
//! bin range of the model: the largest bin disparity maps to 65535, and so
//! does the largest possible variance `((max - min) / 2)²`.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{export_attention_maps, AttentionWeights};
use crate::data::{ensure_parent, write_f32_map};
use crate::disparity::{disparity_to_depth, uncertainty, DisparityBins};
use crate::error::{Error, Result};
use crate::evaluation::{ScaleSidecar, DEPTH_SCALE_FILE};
use crate::networks::Model;
use crate::tensor::Tensor;

pub const DISPARITY_DIR: &str = "disparity";
pub const UNCERTAINTY_DIR: &str = "uncertainty";
pub const DEPTH_OUT_DIR: &str = "depth";
pub const ATTENTION_DIR: &str = "attention";
pub const ATTENTION_INDEX: &str = "index.json";

const U16_MAX: f64 = u16::MAX as f64;

pub fn disparity_scale(bins: &DisparityBins) -> f64 {
    U16_MAX / bins.max()
}

pub fn uncertainty_scale(bins: &DisparityBins) -> f64 {
    U16_MAX / ((bins.max() - bins.min()) / 2.0).powi(2)
}

/// Writes `round(v * scale)` of a `[1, 1, h, w]` map, clamped to `u16`.
pub fn write_png16(path: &Path, map: &Tensor, scale: f64) -> Result<()> {
    let [n, c, h, w] = map.dims();
    if n != 1 || c != 1 {
        return Err(Error::invalid(format!("expected a [1, 1, h, w] map, got {}", map.shape())));
    }
    let pixels: Vec<u16> = map
        .data()
        .iter()
        .map(|&v| (v * scale).round().clamp(0.0, U16_MAX) as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, pixels).expect("buffer matches dimensions");
    ensure_parent(path)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_scale_sidecar(dir: &Path, scale: f64) -> Result<()> {
    let path = dir.join(DEPTH_SCALE_FILE);
    ensure_parent(&path)?;
    let text = serde_json::to_string_pretty(&ScaleSidecar { scale })?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes a heat map normalized by its maximum as 8-bit grayscale and
/// returns that maximum.
pub fn write_heat_map(path: &Path, map: &Tensor) -> Result<f64> {
    let [_, _, h, w] = map.dims();
    let peak = map.data().iter().copied().fold(0.0, f64::max);
    let norm = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let pixels: Vec<u8> = map.data().iter().map(|&v| (v * norm).round().clamp(0.0, 255.0) as u8).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches dimensions");
    ensure_parent(path)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(peak)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionIndexEntry {
    pub id: String,
    /// `(row, col)` of the query on the attention lattice.
    pub query: (usize, usize),
    /// Relative to the attention directory.
    pub file: String,
    /// Weight that maps to 255.
    pub peak: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ExportSummary {
    pub images: usize,
    pub attention: Vec<AttentionIndexEntry>,
}

/// Centre and the four quarter points of an `h x w` lattice, deduplicated.
pub fn default_queries(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = vec![(h / 2, w / 2), (h / 4, w / 4), (h / 4, 3 * w / 4), (3 * h / 4, w / 4), (3 * h / 4, 3 * w / 4)];
    out.retain(|&(r, c)| r < h && c < w);
    let mut seen = Vec::new();
    out.retain(|q| {
        let fresh = !seen.contains(q);
        seen.push(*q);
        fresh
    });
    out
}

/// File stem for an image id.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Predicts each `[1, 3, H, W]` image and writes its maps under `root`.
/// Attention maps are written for `queries`, or [`default_queries`] when
/// empty, and only when the model has the attention module.
pub fn export_predictions(
    root: &Path,
    model: &Model,
    images: &[(String, Tensor)],
    queries: &[(usize, usize)],
) -> Result<ExportSummary> {
    let bins = model.bins();
    let (dscale, uscale) = (disparity_scale(bins), uncertainty_scale(bins));
    let cfg = &model.config.depth;
    let (ah, aw) = cfg.scale_sizes()[0];
    let queries = if queries.is_empty() { default_queries(ah, aw) } else { queries.to_vec() };

    let per_image = images
        .par_iter()
        .map(|(id, image)| {
            let stem = file_stem(id);
            let pred = model.predict(image)?;
            let disp = pred.finest();
            let dir = root.join(DISPARITY_DIR);
            write_png16(&dir.join(format!("{stem}.png")), disp, dscale)?;
            write_f32_map(&dir.join(format!("{stem}.f32")), disp)?;
            write_f32_map(&root.join(DEPTH_OUT_DIR).join(format!("{stem}.f32")), &disparity_to_depth(disp))?;
            if let Some(volume) = pred.volumes.last() {
                let var = uncertainty(volume);
                let dir = root.join(UNCERTAINTY_DIR);
                write_png16(&dir.join(format!("{stem}.png")), &var, uscale)?;
                write_f32_map(&dir.join(format!("{stem}.f32")), &var)?;
            }
            let mut entries = Vec::new();
            if let Some(att) = &pred.attention {
                let weights = AttentionWeights::from_batch(att, 0, ah, aw)?;
                let maps = export_attention_maps(&weights, &queries)?;
                for (&(r, c), map) in queries.iter().zip(&maps) {
                    let file = format!("{stem}_r{r}_c{c}.png");
                    let peak = write_heat_map(&root.join(ATTENTION_DIR).join(&file), map)?;
                    entries.push(AttentionIndexEntry {
                        id: id.clone(),
                        query: (r, c),
                        file,
                        peak,
                    });
                }
            }
            Ok(entries)
        })
        .collect::<Result<Vec<_>>>()?;

    if images.iter().next().is_some() {
        write_scale_sidecar(&root.join(DISPARITY_DIR), dscale)?;
        if cfg.use_ddv {
            write_scale_sidecar(&root.join(UNCERTAINTY_DIR), uscale)?;
        }
    }
    let attention: Vec<AttentionIndexEntry> = per_image.into_iter().flatten().collect();
    if !attention.is_empty() {
        let path = root.join(ATTENTION_DIR).join(ATTENTION_INDEX);
        std::fs::write(&path, serde_json::to_string_pretty(&attention)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(ExportSummary {
        images: images.len(),
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disparity::make_bins;
    use crate::evaluation::read_png16_map;
    use crate::networks::{BlockKind, DepthNetConfig, ModelConfig, PoseNetConfig};
    use crate::tensor::Shape;

    #[test]
    fn png16_round_trip_within_half_a_step() {
        let dir = tempfile::tempdir().unwrap();
        let map = Tensor::from_fn(Shape::new(1, 1, 3, 4), |_, _, y, x| 0.02 + 0.08 * (y * 4 + x) as f64);
        let bins = make_bins(8, 1.0, 50.0).unwrap();
        let scale = disparity_scale(&bins);
        write_png16(&dir.path().join("m.png"), &map, scale).unwrap();
        write_scale_sidecar(dir.path(), scale).unwrap();
        let back = read_png16_map(&dir.path().join("m.png"), &dir.path().join(DEPTH_SCALE_FILE)).unwrap();
        assert!(back.max_abs_diff(&map) <= 0.5 / scale + 1e-12);
    }

    #[test]
    fn png16_saturates_instead_of_wrapping() {
        let dir = tempfile::tempdir().unwrap();
        let map = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![-1.0, 10.0]).unwrap();
        write_png16(&dir.path().join("m.png"), &map, U16_MAX).unwrap();
        let img = image::open(dir.path().join("m.png")).unwrap().into_luma16();
        assert_eq!(img.into_raw(), vec![0, u16::MAX]);
    }

    #[test]
    fn queries_stay_on_the_lattice() {
        assert_eq!(default_queries(1, 1), vec![(0, 0)]);
        let q = default_queries(8, 12);
        assert_eq!(q.len(), 5);
        assert!(q.iter().all(|&(r, c)| r < 8 && c < 12));
        assert_eq!(file_stem("seq a/12"), "seq_a_12");
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            depth: DepthNetConfig {
                input_height: 16,
                input_width: 24,
                stem_widths: [4, 4, 4],
                block: BlockKind::Basic,
                stage_blocks: [1, 1, 1, 1],
                encoder_widths: [4, 4, 6, 6],
                attention_channels: 4,
                ddv_bins: 4,
                decoder_widths: [4, 4, 4],
                ..DepthNetConfig::desk()
            },
            pose: PoseNetConfig {
                widths: vec![4, 4],
                ..PoseNetConfig::desk()
            },
        }
    }

    #[test]
    fn exports_every_map_and_an_index() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(tiny(), 3).unwrap();
        let image = Tensor::from_fn(Shape::new(1, 3, 16, 24), |_, c, y, x| 0.5 + 0.4 * ((x + 2 * y + c) as f64).sin());
        let summary = export_predictions(dir.path(), &model, &[("s/1".into(), image.clone())], &[]).unwrap();
        assert_eq!(summary.images, 1);
        assert_eq!(summary.attention.len(), 5);
        for f in [
            "disparity/s_1.png",
            "disparity/s_1.f32",
            "disparity/scale.json",
            "uncertainty/s_1.png",
            "uncertainty/s_1.f32",
            "uncertainty/scale.json",
            "depth/s_1.f32",
            "attention/index.json",
            "attention/s_1_r1_c1.png",
        ] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let back: Vec<AttentionIndexEntry> =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("attention/index.json")).unwrap()).unwrap();
        assert_eq!(back, summary.attention);
        let disp = read_png16_map(&dir.path().join("disparity/s_1.png"), &dir.path().join("disparity/scale.json")).unwrap();
        let expected = model.predict(&image).unwrap().finest().clone();
        assert!(disp.max_abs_diff(&expected) <= 0.5 / disparity_scale(model.bins()) + 1e-12);
    }

    #[test]
    fn ablated_model_skips_missing_maps() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.depth.use_attention = false;
        cfg.depth.use_ddv = false;
        let model = Model::new(cfg, 3).unwrap();
        let image = Tensor::full(Shape::new(1, 3, 16, 24), 0.5);
        let summary = export_predictions(dir.path(), &model, &[("x".into(), image)], &[]).unwrap();
        assert!(summary.attention.is_empty());
        assert!(dir.path().join("disparity/x.png").is_file());
        assert!(!dir.path().join(UNCERTAINTY_DIR).exists());
        assert!(!dir.path().join(ATTENTION_DIR).exists());
    }
}
