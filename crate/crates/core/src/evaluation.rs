//! Depth metrics with per-image median scaling, split evaluation and
//! reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{find_frame, load_image, parse_split, read_f32_map, DEPTH_DIR};
use crate::disparity::disparity_to_depth;
use crate::error::{Error, Result};
use crate::networks::Model;
use crate::tensor::{Shape, Tensor};

/// Sidecar next to 16-bit PNG depth maps: `depth = value / scale`.
pub const DEPTH_SCALE_FILE: &str = "scale.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crop {
    /// Fractions of the height and width: rows `top..bottom`, columns
    /// `left..right`.
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub min_depth_clamp: f64,
    pub max_depth_cap: f64,
    pub median_scaling: bool,
    /// Evaluated region; the whole image when absent.
    pub crop: Option<Crop>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            min_depth_clamp: 1e-3,
            max_depth_cap: 80.0,
            median_scaling: true,
            crop: None,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.min_depth_clamp && self.min_depth_clamp < self.max_depth_cap) {
            return Err(Error::Config(
                "evaluation needs 0 < min_depth_clamp < max_depth_cap".into(),
            ));
        }
        if let Some(c) = self.crop {
            let ok = |a: f64, b: f64| 0.0 <= a && a < b && b <= 1.0;
            if !ok(c.top, c.bottom) || !ok(c.left, c.right) {
                return Err(Error::Config("crop fractions must satisfy 0 <= start < end <= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl DepthMetrics {
    fn as_array(&self) -> [f64; 8] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.log10,
            self.a1,
            self.a2,
            self.a3,
        ]
    }

    fn from_array(a: [f64; 8]) -> Self {
        let [abs_rel, sq_rel, rmse, rmse_log, log10, a1, a2, a3] = a;
        Self {
            abs_rel,
            sq_rel,
            rmse,
            rmse_log,
            log10,
            a1,
            a2,
            a3,
        }
    }

    /// Unweighted mean over images, accumulated in order.
    pub fn mean(items: &[DepthMetrics]) -> Option<DepthMetrics> {
        if items.is_empty() {
            return None;
        }
        let mut acc = [0.0; 8];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.as_array()) {
                *a += v;
            }
        }
        Some(Self::from_array(acc.map(|a| a / items.len() as f64)))
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Metrics of one `[1, 1, h, w]` depth prediction against ground truth.
/// Pixels count when `min_depth_clamp < gt < max_depth_cap` and, if given,
/// `mask` is non-zero.
pub fn compute_metrics(
    pred: &Tensor,
    gt: &Tensor,
    mask: Option<&Tensor>,
    protocol: &EvalProtocol,
) -> Result<DepthMetrics> {
    if pred.shape() != gt.shape() || mask.is_some_and(|m| m.shape() != gt.shape()) {
        return Err(Error::invalid(format!(
            "prediction {} and ground truth {} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    let [_, _, h, w] = gt.dims();
    let (rows, cols) = match protocol.crop {
        Some(c) => (
            (c.top * h as f64) as usize..(c.bottom * h as f64).ceil() as usize,
            (c.left * w as f64) as usize..(c.right * w as f64).ceil() as usize,
        ),
        None => (0..h, 0..w),
    };
    let (lo, hi) = (protocol.min_depth_clamp, protocol.max_depth_cap);
    let mut g = Vec::new();
    let mut p = Vec::new();
    for y in rows {
        for x in cols.clone() {
            let i = y * w + x;
            let gv = gt.data()[i];
            let keep = gv > lo && gv < hi && mask.is_none_or(|m| m.data()[i] != 0.0);
            if keep {
                g.push(gv);
                p.push(pred.data()[i]);
            }
        }
    }
    if g.is_empty() {
        return Err(Error::Protocol("no valid ground-truth pixels".into()));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("prediction contains non-finite depths"));
    }
    if protocol.median_scaling {
        let ratio = median(&mut g.clone()) / median(&mut p.clone());
        for v in p.iter_mut() {
            *v *= ratio;
        }
    }
    let n = g.len() as f64;
    let mut acc = [0.0; 8];
    for (&gv, pv) in g.iter().zip(p.iter_mut()) {
        *pv = pv.clamp(lo, hi);
        let pv = *pv;
        let diff = pv - gv;
        acc[0] += diff.abs() / gv;
        acc[1] += diff * diff / gv;
        acc[2] += diff * diff;
        acc[3] += (pv.ln() - gv.ln()).powi(2);
        acc[4] += (pv.log10() - gv.log10()).abs();
        let ratio = (pv / gv).max(gv / pv);
        acc[5] += f64::from(u8::from(ratio < 1.25));
        acc[6] += f64::from(u8::from(ratio < 1.25 * 1.25));
        acc[7] += f64::from(u8::from(ratio < 1.25 * 1.25 * 1.25));
    }
    let mut m = acc.map(|a| a / n);
    m[2] = m[2].sqrt();
    m[3] = m[3].sqrt();
    Ok(DepthMetrics::from_array(m))
}

/// One evaluation image: network-resolution input and native ground truth.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub id: String,
    /// `[1, 3, H, W]` at the network input size.
    pub image: Tensor,
    /// `[1, 1, h, w]`; zero or non-finite entries are invalid.
    pub gt: Tensor,
}

/// Reads a ground-truth map: `<frame>.f32` sized like the frame, or a
/// 16-bit `<frame>.png` with a [`DEPTH_SCALE_FILE`] sidecar.
pub fn read_ground_truth(seq_dir: &Path, frame: usize, height: usize, width: usize) -> Result<Tensor> {
    let dir = seq_dir.join(DEPTH_DIR);
    let raw = dir.join(format!("{frame:06}.f32"));
    if raw.is_file() {
        return read_f32_map(&raw, height, width);
    }
    let png = dir.join(format!("{frame:06}.png"));
    if png.is_file() {
        return read_png16_map(&png, &dir.join(DEPTH_SCALE_FILE));
    }
    Err(Error::io(
        raw,
        std::io::Error::new(std::io::ErrorKind::NotFound, "no ground-truth depth (.f32 or .png)"),
    ))
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ScaleSidecar {
    pub scale: f64,
}

pub(crate) fn read_png16_map(path: &Path, sidecar: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let ScaleSidecar { scale } = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: sidecar.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    if !(scale > 0.0) {
        return Err(Error::invalid(format!("{}: scale must be positive", sidecar.display())));
    }
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
        f64::from(img.get_pixel(x as u32, y as u32)[0]) / scale
    }))
}

/// Loads the frames named by a split with their ground truth.
pub fn load_eval_split(root: &Path, split: &Path, size: (usize, usize)) -> Result<Vec<EvalSample>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data root is not a directory"),
        ));
    }
    parse_split(split)?
        .par_iter()
        .map(|e| {
            let dir = root.join(&e.sequence);
            let path: PathBuf = find_frame(&dir, e.frame).ok_or_else(|| {
                Error::io(
                    dir.join(crate::data::frame_file_name(e.frame)),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "frame not found"),
                )
            })?;
            let (w, h) = image::image_dimensions(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            Ok(EvalSample {
                id: format!("{}/{}", e.sequence, e.frame),
                image: load_image(&path, Some(size))?,
                gt: read_ground_truth(&dir, e.frame, h as usize, w as usize)?,
            })
        })
        .collect()
}

/// Depth at the ground-truth resolution from the finest disparity.
pub fn predict_depth(model: &Model, image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let disp = model.predict(image)?.finest().clone();
    let [_, _, h, w] = disp.dims();
    let disp = if (h, w) == (height, width) {
        disp
    } else {
        let g = Graph::new();
        (*g.constant(disp).resize_bilinear(height, width).value()).clone()
    };
    Ok(disparity_to_depth(&disp))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub metrics: DepthMetrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub mean: DepthMetrics,
    pub per_image: Vec<ImageMetrics>,
}

/// Per-image metrics and their unweighted mean.
pub fn evaluate_split(model: &Model, samples: &[EvalSample], protocol: &EvalProtocol) -> Result<EvalReport> {
    protocol.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let cfg = &model.config.depth;
    let per_image = samples
        .par_iter()
        .map(|s| {
            let [_, c, h, w] = s.image.dims();
            if c != 3 || (h, w) != (cfg.input_height, cfg.input_width) {
                return Err(Error::invalid(format!(
                    "{}: image {} does not match the checkpoint input {}x{}",
                    s.id,
                    s.image.shape(),
                    cfg.input_height,
                    cfg.input_width
                )));
            }
            let [_, _, gh, gw] = s.gt.dims();
            let depth = predict_depth(model, &s.image, gh, gw)?;
            let metrics = compute_metrics(&depth, &s.gt, None, protocol)
                .map_err(|e| match e {
                    Error::Protocol(msg) => Error::Protocol(format!("{}: {msg}", s.id)),
                    e => e,
                })?;
            Ok(ImageMetrics {
                id: s.id.clone(),
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = DepthMetrics::mean(&per_image.iter().map(|m| m.metrics).collect::<Vec<_>>())
        .expect("non-empty");
    Ok(EvalReport {
        protocol: protocol.clone(),
        mean,
        per_image,
    })
}

const COLUMNS: [&str; 8] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3", "log10"];

fn row(m: &DepthMetrics) -> [f64; 8] {
    [m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.a1, m.a2, m.a3, m.log10]
}

impl EvalReport {
    /// Fixed-width table: error metrics, then accuracies, then log10.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let id_width = self.per_image.iter().map(|m| m.id.len()).max().unwrap_or(0).max(4);
        let _ = write!(out, "{:<id_width$}", "");
        for c in COLUMNS {
            let _ = write!(out, " {c:>9}");
        }
        out.push('\n');
        let mut line = |id: &str, m: &DepthMetrics| {
            let _ = write!(out, "{id:<id_width$}");
            for v in row(m) {
                let _ = write!(out, " {v:>9.4}");
            }
            out.push('\n');
        };
        for m in &self.per_image {
            line(&m.id, &m.metrics);
        }
        line("mean", &self.mean);
        out
    }
}
