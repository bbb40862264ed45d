//! Synthetic sequences of fronto-parallel planes seen by a translating
//! camera, with analytic depth and poses.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject, bilinear_sample, Intrinsics, RigidTransform, SampleGrid};
use crate::tensor::{Shape, Tensor};

use super::io::{frame_file_name, save_image, write_f32_map, write_intrinsics, DEPTH_DIR, INTRINSICS_FILE};

pub const POSES_FILE: &str = "poses.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Surface {
    /// Multi-octave value noise, independent per colour channel.
    Texture {
        seed: u64,
        /// Lattice spacing of the coarsest octave in scene units.
        cell_size: f64,
        octaves: usize,
    },
    Flat { color: [f64; 3] },
}

/// Plane `Z = depth` in world coordinates, limited to `y_min ≤ Y ≤ y_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub depth: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub surface: Surface,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticScene {
    pub intrinsics: Intrinsics,
    pub frame_count: usize,
    /// Camera centre of frame 0 in world coordinates.
    pub start: [f64; 3],
    /// Camera displacement per frame.
    pub step: [f64; 3],
    /// Nearest plane wins; equal depths resolve in list order.
    pub planes: Vec<PlaneSpec>,
    pub noise_std: f64,
    pub seed: u64,
    /// Rendering resolution factor before box downsampling.
    pub supersample: usize,
    /// Texture resolution in texels per scene unit.
    pub texels_per_unit: f64,
    /// Trailing frames excluded from the training split.
    pub holdout: usize,
}

impl Default for SyntheticScene {
    fn default() -> Self {
        let flat_sky = PlaneSpec {
            depth: 10.0,
            y_min: -100.0,
            y_max: -2.4,
            surface: Surface::Flat {
                color: [0.55, 0.7, 0.9],
            },
        };
        let far = PlaneSpec {
            depth: 10.0,
            y_min: -100.0,
            y_max: 100.0,
            surface: Surface::Texture {
                seed: 1,
                cell_size: 0.8,
                octaves: 3,
            },
        };
        let near = PlaneSpec {
            depth: 4.0,
            y_min: 0.9,
            y_max: 100.0,
            surface: Surface::Texture {
                seed: 2,
                cell_size: 0.32,
                octaves: 3,
            },
        };
        Self {
            intrinsics: Intrinsics {
                fx: 60.0,
                fy: 60.0,
                cx: 47.5,
                cy: 31.5,
                width: 96,
                height: 64,
            },
            frame_count: 60,
            start: [0.0, 0.0, 0.0],
            step: [0.15, 0.0, 0.0],
            planes: vec![flat_sky, far, near],
            noise_std: 0.0,
            seed: 7,
            supersample: 4,
            texels_per_unit: 64.0,
            holdout: 10,
        }
    }
}

/// Rendered sequence with ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    /// `[1, 3, h, w]` per frame.
    pub frames: Vec<Tensor>,
    /// `[1, 1, h, w]` per frame.
    pub depths: Vec<Tensor>,
    /// Index of the visible plane at each pixel centre, per frame.
    pub labels: Vec<Vec<usize>>,
    pub world_from_camera: Vec<RigidTransform>,
    pub intrinsics: Intrinsics,
    pub scene: SyntheticScene,
}

impl SyntheticSequence {
    /// Transform mapping camera-`from` points into camera `to`.
    pub fn relative_transform(&self, from: usize, to: usize) -> RigidTransform {
        self.world_from_camera[to]
            .invert()
            .compose(&self.world_from_camera[from])
    }

    /// `[1, 1, h, w]` mask of pixels showing a flat-coloured plane.
    pub fn flat_mask(&self, frame: usize) -> Tensor {
        let k = &self.intrinsics;
        let flat: Vec<bool> = self
            .scene
            .planes
            .iter()
            .map(|p| matches!(p.surface, Surface::Flat { .. }))
            .collect();
        let data = self.labels[frame].iter().map(|&l| f64::from(u8::from(flat[l]))).collect();
        Tensor::from_vec(Shape::new(1, 1, k.height, k.width), data).expect("label size")
    }

    /// Target frames of each split: training frames have both neighbours
    /// outside the held-out tail; the tail is halved into validation and
    /// test.
    pub fn splits(&self) -> SplitIndices {
        let n = self.frames.len();
        let held = self.scene.holdout.min(n);
        let tail = n - held;
        let train = (1..tail.saturating_sub(1)).collect();
        let mid = tail + held / 2;
        SplitIndices {
            train,
            val: (tail..mid).collect(),
            test: (mid..n).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.frame_count < 3 {
            return Err(Error::invalid("a synthetic scene needs at least 3 frames"));
        }
        if self.planes.is_empty() {
            return Err(Error::invalid("a synthetic scene needs at least one plane"));
        }
        if self.supersample == 0 || !(self.texels_per_unit > 0.0) {
            return Err(Error::invalid("supersample and texels_per_unit must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        for (i, p) in self.planes.iter().enumerate() {
            if !(p.y_min < p.y_max) {
                return Err(Error::invalid(format!("plane {i}: y_min must be below y_max")));
            }
            match &p.surface {
                Surface::Texture { cell_size, octaves, .. } if !(*cell_size > 0.0) || *octaves == 0 => {
                    return Err(Error::invalid(format!("plane {i}: texture needs a positive cell size and octaves")));
                }
                Surface::Flat { color } if color.iter().any(|c| !(0.0..=1.0).contains(c)) => {
                    return Err(Error::invalid(format!("plane {i}: colour must lie in [0, 1]")));
                }
                _ => {}
            }
            for f in 0..self.frame_count {
                if !(p.depth - self.camera_centre(f)[2] > 0.0) {
                    return Err(Error::invalid(format!("plane {i} is not in front of camera {f}")));
                }
            }
        }
        Ok(())
    }

    pub fn camera_centre(&self, frame: usize) -> [f64; 3] {
        let f = frame as f64;
        [
            self.start[0] + f * self.step[0],
            self.start[1] + f * self.step[1],
            self.start[2] + f * self.step[2],
        ]
    }

    pub fn world_from_camera(&self, frame: usize) -> RigidTransform {
        RigidTransform::from_translation(self.camera_centre(frame))
    }

    /// Intrinsics of the supersampled lattice. Output pixel `u` covers
    /// fine pixels `s u .. s u + s − 1`, whose centre is `s u + (s − 1)/2`.
    fn fine_intrinsics(&self) -> Intrinsics {
        let s = self.supersample as f64;
        let k = &self.intrinsics;
        Intrinsics {
            fx: k.fx * s,
            fy: k.fy * s,
            cx: k.cx * s + (s - 1.0) / 2.0,
            cy: k.cy * s + (s - 1.0) / 2.0,
            width: k.width * self.supersample,
            height: k.height * self.supersample,
        }
    }
}

/// Value-noise texture image over a world rectangle.
struct Texture {
    image: Tensor,
    x0: f64,
    y0: f64,
    texels_per_unit: f64,
}

impl Texture {
    fn build(seed: u64, cell: f64, octaves: usize, bounds: [f64; 4], tpu: f64) -> Self {
        let [x0, y0, x1, y1] = bounds;
        let w = ((x1 - x0) * tpu).ceil() as usize + 2;
        let h = ((y1 - y0) * tpu).ceil() as usize + 2;
        let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
        let mut norm = 0.0;
        for o in 0..octaves {
            let size = cell / (1u64 << o) as f64;
            let weight = 0.5f64.powi(o as i32);
            norm += weight;
            let gx0 = (x0 / size).floor() as i64 - 1;
            let gy0 = (y0 / size).floor() as i64 - 1;
            let gw = ((x1 - x0) / size).ceil() as usize + 4;
            let gh = ((y1 - y0) / size).ceil() as usize + 4;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(o as u64);
            let lattice: Vec<f64> = (0..3 * gw * gh).map(|_| rng.random()).collect();
            let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
            for ch in 0..3 {
                for ty in 0..h {
                    let gy = (y0 + ty as f64 / tpu) / size - gy0 as f64;
                    let (iy, fy) = (gy.floor() as usize, smooth(gy.fract()));
                    for tx in 0..w {
                        let gx = (x0 + tx as f64 / tpu) / size - gx0 as f64;
                        let (ix, fx) = (gx.floor() as usize, smooth(gx.fract()));
                        let at = |x: usize, y: usize| lattice[(ch * gh + y) * gw + x];
                        let top = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
                        let bottom = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
                        let i = image.index(0, ch, ty, tx);
                        image.data_mut()[i] += weight * (top * (1.0 - fy) + bottom * fy);
                    }
                }
            }
        }
        // Map the noise sum into [0.1, 0.9].
        image.map_inplace(|v| 0.1 + 0.8 * v / norm);
        Self {
            image,
            x0,
            y0,
            texels_per_unit: tpu,
        }
    }
}

/// Renders the scene.
pub fn generate_synthetic(scene: &SyntheticScene) -> Result<SyntheticSequence> {
    scene.validate()?;
    let k = scene.intrinsics;
    let fine = scene.fine_intrinsics();
    let s = scene.supersample;

    // World rectangle seen by any frame on each plane, with a margin.
    let textures: Vec<Option<Texture>> = scene
        .planes
        .iter()
        .map(|p| match p.surface {
            Surface::Flat { .. } => None,
            Surface::Texture { seed, cell_size, octaves } => {
                let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
                for f in 0..scene.frame_count {
                    let c = scene.camera_centre(f);
                    let d = p.depth - c[2];
                    for (u, v) in [(-1.0, -1.0), (fine.width as f64, fine.height as f64)] {
                        let r = fine.ray(u, v);
                        b[0] = b[0].min(c[0] + d * r[0]);
                        b[1] = b[1].min(c[1] + d * r[1]);
                        b[2] = b[2].max(c[0] + d * r[0]);
                        b[3] = b[3].max(c[1] + d * r[1]);
                    }
                }
                b[1] = b[1].max(p.y_min - 1.0);
                b[3] = b[3].min(p.y_max + 1.0).max(b[1]);
                Some(Texture::build(seed, cell_size, octaves, b, scene.texels_per_unit))
            }
        })
        .collect();

    let mut out = SyntheticSequence {
        frames: Vec::with_capacity(scene.frame_count),
        depths: Vec::with_capacity(scene.frame_count),
        labels: Vec::with_capacity(scene.frame_count),
        world_from_camera: Vec::with_capacity(scene.frame_count),
        intrinsics: k,
        scene: scene.clone(),
    };
    let noise = Normal::new(0.0, scene.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    for f in 0..scene.frame_count {
        let pose = scene.world_from_camera(f);
        let (fine_img, _) = render_lattice(scene, &textures, &pose, &fine)?;
        let (_, (depth, labels)) = render_lattice(scene, &[], &pose, &k)?;

        let mut frame = Tensor::zeros(Shape::new(1, 3, k.height, k.width));
        let area = (s * s) as f64;
        for ch in 0..3 {
            for y in 0..k.height {
                for x in 0..k.width {
                    let mut acc = 0.0;
                    for dy in 0..s {
                        for dx in 0..s {
                            acc += fine_img.at(0, ch, y * s + dy, x * s + dx);
                        }
                    }
                    frame.set(0, ch, y, x, acc / area);
                }
            }
        }
        if scene.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
            rng.set_stream(f as u64);
            for v in frame.data_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        out.frames.push(frame);
        out.depths.push(depth);
        out.labels.push(labels);
        out.world_from_camera.push(pose);
    }
    Ok(out)
}

/// Colours (when `textures` is non-empty) and depth/labels of one frame on
/// the lattice of `k`.
fn render_lattice(
    scene: &SyntheticScene,
    textures: &[Option<Texture>],
    pose: &RigidTransform,
    k: &Intrinsics,
) -> Result<(Tensor, (Tensor, Vec<usize>))> {
    let (h, w) = (k.height, k.width);
    let n = h * w;
    let mut best_depth = vec![f64::INFINITY; n];
    let mut label = vec![usize::MAX; n];
    let mut color = Tensor::zeros(Shape::new(1, 3, if textures.is_empty() { 0 } else { h }, w));
    for (pi, plane) in scene.planes.iter().enumerate() {
        let d = plane.depth - pose.translation[2];
        let points = backproject(&Tensor::full(Shape::new(1, 1, h, w), d), k)?;
        let world: Vec<[f64; 3]> = points.points.iter().map(|&p| pose.apply(p)).collect();
        let visible: Vec<bool> = world
            .iter()
            .enumerate()
            .map(|(i, p)| (plane.y_min..=plane.y_max).contains(&p[1]) && d < best_depth[i])
            .collect();
        let sampled = match (textures.get(pi), &plane.surface) {
            (Some(Some(tex)), _) => {
                let grid = SampleGrid {
                    height: h,
                    width: w,
                    coords: world
                        .iter()
                        .map(|p| {
                            [
                                (p[0] - tex.x0) * tex.texels_per_unit,
                                (p[1] - tex.y0) * tex.texels_per_unit,
                            ]
                        })
                        .collect(),
                    valid: vec![true; n],
                };
                Some(bilinear_sample(&tex.image, &grid)?)
            }
            _ => None,
        };
        for i in 0..n {
            if !visible[i] {
                continue;
            }
            best_depth[i] = d;
            label[i] = pi;
            if textures.is_empty() {
                continue;
            }
            for ch in 0..3 {
                let v = match (&sampled, &plane.surface) {
                    (Some(t), _) => t.data()[ch * n + i],
                    (None, Surface::Flat { color }) => color[ch],
                    (None, Surface::Texture { .. }) => unreachable!("texture built for every textured plane"),
                };
                color.data_mut()[ch * n + i] = v;
            }
        }
    }
    if let Some(i) = label.iter().position(|&l| l == usize::MAX) {
        return Err(Error::invalid(format!(
            "pixel ({}, {}) sees no plane; extend the plane extents",
            i % w,
            i / w
        )));
    }
    let depth = Tensor::from_vec(Shape::new(1, 1, h, w), best_depth)?;
    Ok((color, (depth, label)))
}

#[derive(Serialize, Deserialize)]
struct PosesFile {
    /// Per-frame camera-to-world transforms.
    world_from_camera: Vec<RigidTransform>,
}

/// Writes `root/<name>/` frames, intrinsics, depth maps and poses, and split
/// files `root/{train,val,test}.txt`.
pub fn write_synthetic(seq: &SyntheticSequence, root: &Path, name: &str) -> Result<()> {
    let dir = root.join(name);
    for (i, (frame, depth)) in seq.frames.iter().zip(&seq.depths).enumerate() {
        save_image(&dir.join(frame_file_name(i)), frame)?;
        write_f32_map(&dir.join(DEPTH_DIR).join(format!("{i:06}.f32")), depth)?;
    }
    write_intrinsics(&dir.join(INTRINSICS_FILE), &seq.intrinsics)?;
    let poses = serde_json::to_string_pretty(&PosesFile {
        world_from_camera: seq.world_from_camera.clone(),
    })?;
    let poses_path = dir.join(POSES_FILE);
    std::fs::write(&poses_path, poses).map_err(|e| Error::io(&poses_path, e))?;
    let splits = seq.splits();
    for (file, frames) in [("train.txt", &splits.train), ("val.txt", &splits.val), ("test.txt", &splits.test)] {
        let text: String = frames.iter().map(|f| format!("{name} {f}\n")).collect();
        let path = root.join(file);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads `poses.json` of a sequence directory.
pub fn read_poses(dir: &Path) -> Result<Vec<RigidTransform>> {
    let path = dir.join(POSES_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: PosesFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    Ok(file.world_from_camera)
}
