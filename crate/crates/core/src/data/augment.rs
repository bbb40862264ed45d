//! Training augmentations: horizontal flip and colour jitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::triplets::TrainingTriplet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    /// Probability of each colour operation, drawn independently.
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift range in turns.
    pub hue: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            jitter_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.1,
        }
    }
}

impl AugmentationConfig {
    /// No augmentation at all.
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            jitter_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.flip_prob) || !prob(self.jitter_prob) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let ranges = [self.brightness, self.contrast, self.saturation];
        if ranges.iter().any(|r| !(0.0..=1.0).contains(r)) || !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(
                "jitter ranges must lie in [0, 1] (hue in [0, 0.5])".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters drawn once per triplet and shared by its three frames.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub saturation: Option<f64>,
    pub hue: Option<f64>,
}

impl AugmentParams {
    pub fn sample(cfg: &AugmentationConfig, rng: &mut impl Rng) -> Self {
        let mut jitter = |range: f64, centre: f64| {
            let on = rng.random::<f64>() < cfg.jitter_prob;
            let u: f64 = rng.random();
            on.then(|| centre - range + 2.0 * range * u)
        };
        let brightness = jitter(cfg.brightness, 1.0);
        let contrast = jitter(cfg.contrast, 1.0);
        let saturation = jitter(cfg.saturation, 1.0);
        let hue = jitter(cfg.hue, 0.0);
        let flip = rng.random::<f64>() < cfg.flip_prob;
        Self {
            flip,
            brightness,
            contrast,
            saturation,
            hue,
        }
    }
}

fn pixels(t: &Tensor) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
    let plane = t.shape().plane_len();
    let d = t.data();
    (0..plane).map(move |i| (d[i], d[plane + i], d[2 * plane + i]))
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Applies the colour operations of `p` to a `[1, 3, h, w]` image, clamping
/// to `[0, 1]` after each.
pub fn color_jitter(image: &Tensor, p: &AugmentParams) -> Tensor {
    let mut out = image.clone();
    let plane = out.shape().plane_len();
    if let Some(f) = p.brightness {
        out.map_inplace(|v| (v * f).clamp(0.0, 1.0));
    }
    if let Some(f) = p.contrast {
        let mean = pixels(&out).map(|(r, g, b)| luma(r, g, b)).sum::<f64>() / plane as f64;
        out.map_inplace(|v| ((v - mean) * f + mean).clamp(0.0, 1.0));
    }
    if let Some(f) = p.saturation {
        let gray: Vec<f64> = pixels(&out).map(|(r, g, b)| luma(r, g, b)).collect();
        let d = out.data_mut();
        for ch in 0..3 {
            for (i, &g) in gray.iter().enumerate() {
                let v = &mut d[ch * plane + i];
                *v = ((*v - g) * f + g).clamp(0.0, 1.0);
            }
        }
    }
    if let Some(shift) = p.hue {
        let shifted: Vec<(f64, f64, f64)> = pixels(&out)
            .map(|(r, g, b)| {
                let (h, s, v) = rgb_to_hsv(r, g, b);
                hsv_to_rgb(h + shift, s, v)
            })
            .collect();
        let d = out.data_mut();
        for (i, (r, g, b)) in shifted.into_iter().enumerate() {
            d[i] = r.clamp(0.0, 1.0);
            d[plane + i] = g.clamp(0.0, 1.0);
            d[2 * plane + i] = b.clamp(0.0, 1.0);
        }
    }
    out
}

/// Mirrors all frames and the principal point.
pub fn flip_triplet(t: &TrainingTriplet) -> TrainingTriplet {
    TrainingTriplet {
        frames: t.frames.clone().map(|f| f.flip_horizontal()),
        intrinsics: t.intrinsics.flipped_horizontal(),
        sequence: t.sequence.clone(),
        index: t.index,
    }
}

/// Returns `(net_input, loss_target)`. The flip applies to both; colour
/// jitter only to the network input.
pub fn augment_with(t: &TrainingTriplet, p: &AugmentParams) -> (TrainingTriplet, TrainingTriplet) {
    let target = if p.flip { flip_triplet(t) } else { t.clone() };
    let mut input = target.clone();
    for f in input.frames.iter_mut() {
        *f = color_jitter(f, p);
    }
    (input, target)
}

pub fn augment(
    t: &TrainingTriplet,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> (TrainingTriplet, TrainingTriplet) {
    let p = AugmentParams::sample(cfg, rng);
    augment_with(t, &p)
}
