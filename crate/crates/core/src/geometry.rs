//! Pinhole camera model, rigid motions and differentiable view warping.
//!
//! Pixel centres sit at integer coordinates with the origin at the top-left;
//! `u` indexes columns and `v` rows.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Floor on transformed depth before the perspective division.
pub const Z_EPS: f64 = 1e-7;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        let inside = |c: f64, len: usize| c >= 0.0 && c < len as f64;
        if !inside(self.cx, self.width) || !inside(self.cy, self.height) {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of a pyramid level: every parameter multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Intrinsics {
        Intrinsics {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: (self.width as f64 * s).round() as usize,
            height: (self.height as f64 * s).round() as usize,
        }
    }

    /// Intrinsics of the left-right mirrored image.
    pub fn flipped_horizontal(&self) -> Intrinsics {
        Intrinsics {
            cx: (self.width - 1) as f64 - self.cx,
            ..*self
        }
    }

    /// Unit-depth viewing ray through pixel `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    #[inline]
    pub fn project_point(&self, p: Vec3) -> [f64; 2] {
        let z = p[2].max(Z_EPS);
        [self.fx * p[0] / z + self.cx, self.fy * p[1] / z + self.cy]
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        (0.0..=(self.width - 1) as f64).contains(&u) && (0.0..=(self.height - 1) as f64).contains(&v)
    }
}

/// A rotation followed by a translation: `p' = R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        RigidTransform {
            rotation: IDENTITY,
            translation: t,
        }
    }

    /// Exponential map of an axis-angle rotation (radians) paired with a
    /// translation.
    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        RigidTransform {
            rotation: rodrigues(axis_angle).0,
            translation,
        }
    }

    /// Axis-angle vector of the rotation (inverse of the exponential map).
    pub fn axis_angle(&self) -> Vec3 {
        let r = &self.rotation;
        let cos = ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
        let theta = cos.acos();
        let w = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
        if theta < 1e-8 {
            return [w[0] / 2.0, w[1] / 2.0, w[2] / 2.0];
        }
        if std::f64::consts::PI - theta < 1e-6 {
            // Near pi the antisymmetric part vanishes; recover the axis from
            // the symmetric part instead.
            let axis = [
                ((r[0][0] + 1.0) / 2.0).max(0.0).sqrt(),
                ((r[1][1] + 1.0) / 2.0).max(0.0).sqrt().copysign(r[0][1] + r[1][0]),
                ((r[2][2] + 1.0) / 2.0).max(0.0).sqrt().copysign(r[0][2] + r[2][0]),
            ];
            return [axis[0] * theta, axis[1] * theta, axis[2] * theta];
        }
        let k = theta / (2.0 * theta.sin());
        [w[0] * k, w[1] * k, w[2] * k]
    }

    #[inline]
    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, self.translation);
        RigidTransform {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// Orthonormality and orientation check at tolerance `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let ortho = (0..3).all(|i| (0..3).all(|j| (rtr[i][j] - IDENTITY[i][j]).abs() <= tol));
        ortho && (det(&self.rotation) - 1.0).abs() <= tol && self.translation.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise deviation from `other` over rotation and translation.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((self.rotation[i][j] - other.rotation[i][j]).abs());
            }
            d = d.max((self.translation[i] - other.translation[i]).abs());
        }
        d
    }
}

/// Per-pixel camera-frame points on the image lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudGrid {
    pub height: usize,
    pub width: usize,
    pub points: Vec<Vec3>,
}

/// Continuous source coordinates for every output pixel plus validity.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl SampleGrid {
    /// Grid addressing every pixel of an `height x width` image at its centre.
    pub fn identity(height: usize, width: usize) -> Self {
        let coords = (0..height)
            .flat_map(|v| (0..width).map(move |u| [u as f64, v as f64]))
            .collect();
        SampleGrid {
            height,
            width,
            coords,
            valid: vec![true; height * width],
        }
    }

    /// `[1, 2, h, w]` tensor with `u` in channel 0 and `v` in channel 1.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(Shape::new(1, 2, self.height, self.width), |_, c, y, x| {
            self.coords[y * self.width + x][c]
        })
    }
}

/// Lifts a `[1, 1, h, w]` depth map into camera-frame points.
pub fn backproject(depth: &Tensor, k: &Intrinsics) -> Result<PointCloudGrid> {
    let [n, c, h, w] = depth.dims();
    if n != 1 || c != 1 {
        return Err(Error::invalid(format!("depth must be [1, 1, h, w], got {}", depth.shape())));
    }
    if let Some(bad) = depth.data().iter().find(|d| !(**d > 0.0)) {
        return Err(Error::invalid(format!("depth must be positive, found {bad}")));
    }
    let points = (0..h)
        .flat_map(|v| (0..w).map(move |u| (u, v)))
        .map(|(u, v)| {
            let d = depth.at(0, 0, v, u);
            let r = k.ray(u as f64, v as f64);
            [d * r[0], d * r[1], d]
        })
        .collect();
    Ok(PointCloudGrid {
        height: h,
        width: w,
        points,
    })
}

/// Moves points by `t` and projects them through `k`.
pub fn project(points: &PointCloudGrid, k: &Intrinsics, t: &RigidTransform) -> SampleGrid {
    let mut coords = Vec::with_capacity(points.points.len());
    let mut valid = Vec::with_capacity(points.points.len());
    for &p in &points.points {
        let q = t.apply(p);
        let uv = k.project_point(q);
        valid.push(q[2] > Z_EPS && k.contains(uv[0], uv[1]));
        coords.push(uv);
    }
    SampleGrid {
        height: points.height,
        width: points.width,
        coords,
        valid,
    }
}

/// Bilinear interpolation of a `[1, c, h, w]` image at every grid location,
/// clamping coordinates to the image border.
pub fn bilinear_sample(image: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    let [n, c, h, w] = image.dims();
    if n != 1 {
        return Err(Error::invalid(format!("image must have batch 1, got {}", image.shape())));
    }
    if grid.coords.len() != grid.height * grid.width {
        return Err(Error::invalid("sample grid size does not match its lattice"));
    }
    let plane = h * w;
    Ok(Tensor::from_fn(Shape::new(1, c, grid.height, grid.width), |_, ch, y, x| {
        let [u, v] = grid.coords[y * grid.width + x];
        let taps = BilinearTaps::new(u, v, h, w);
        taps.sample(&image.data()[ch * plane..(ch + 1) * plane], w)
    }))
}

/// The four neighbours and weights of a border-clamped bilinear lookup.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTaps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    lx: f64,
    ly: f64,
    /// Whether `u` / `v` were inside the clamp range (gradient flows).
    inside_u: bool,
    inside_v: bool,
}

impl BilinearTaps {
    #[inline]
    pub(crate) fn new(u: f64, v: f64, h: usize, w: usize) -> Self {
        let (max_u, max_v) = ((w - 1) as f64, (h - 1) as f64);
        let inside_u = (0.0..=max_u).contains(&u);
        let inside_v = (0.0..=max_v).contains(&v);
        // NaN coordinates fall back to the origin.
        let uc = if u.is_nan() { 0.0 } else { u.clamp(0.0, max_u) };
        let vc = if v.is_nan() { 0.0 } else { v.clamp(0.0, max_v) };
        let x0 = uc.floor() as usize;
        let y0 = vc.floor() as usize;
        BilinearTaps {
            x0,
            x1: (x0 + 1).min(w - 1),
            y0,
            y1: (y0 + 1).min(h - 1),
            lx: uc - x0 as f64,
            ly: vc - y0 as f64,
            inside_u,
            inside_v,
        }
    }

    #[inline]
    fn corners(&self, plane: &[f64], w: usize) -> [f64; 4] {
        [
            plane[self.y0 * w + self.x0],
            plane[self.y0 * w + self.x1],
            plane[self.y1 * w + self.x0],
            plane[self.y1 * w + self.x1],
        ]
    }

    #[inline]
    pub(crate) fn sample(&self, plane: &[f64], w: usize) -> f64 {
        let [a, b, c, d] = self.corners(plane, w);
        let top = a + (b - a) * self.lx;
        let bottom = c + (d - c) * self.lx;
        top + (bottom - top) * self.ly
    }

    /// Partial derivatives of the sample with respect to `(u, v)`.
    #[inline]
    fn coord_grad(&self, plane: &[f64], w: usize) -> [f64; 2] {
        let [a, b, c, d] = self.corners(plane, w);
        let du = if self.inside_u {
            (1.0 - self.ly) * (b - a) + self.ly * (d - c)
        } else {
            0.0
        };
        let dv = if self.inside_v {
            (1.0 - self.lx) * (c - a) + self.lx * (d - b)
        } else {
            0.0
        };
        [du, dv]
    }

    #[inline]
    fn scatter(&self, plane_grad: &mut [f64], w: usize, g: f64) {
        let (lx, ly) = (self.lx, self.ly);
        plane_grad[self.y0 * w + self.x0] += g * (1.0 - lx) * (1.0 - ly);
        plane_grad[self.y0 * w + self.x1] += g * lx * (1.0 - ly);
        plane_grad[self.y1 * w + self.x0] += g * (1.0 - lx) * ly;
        plane_grad[self.y1 * w + self.x1] += g * lx * ly;
    }
}

/// Differentiable bilinear sampling of `[n, c, h, w]` images at a
/// `[n, 2, gh, gw]` grid of pixel coordinates (`u` then `v`), border clamped.
pub fn grid_sample<'g>(image: Var<'g>, grid: Var<'g>) -> Var<'g> {
    let img = image.value();
    let grd = grid.value();
    let [n, c, h, w] = img.dims();
    let [gn, two, gh, gw] = grd.dims();
    assert!(gn == n && two == 2, "grid_sample: grid {} for image {}", grd.shape(), img.shape());
    let plane = h * w;
    let gplane = gh * gw;
    let taps: Vec<BilinearTaps> = (0..n)
        .flat_map(|b| (0..gplane).map(move |i| (b, i)))
        .map(|(b, i)| {
            let base = b * 2 * gplane;
            BilinearTaps::new(grd.data()[base + i], grd.data()[base + gplane + i], h, w)
        })
        .collect();
    let mut out = Tensor::zeros(Shape::new(n, c, gh, gw));
    for b in 0..n {
        for ch in 0..c {
            let src = &img.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            let dst_base = (b * c + ch) * gplane;
            for i in 0..gplane {
                out.data_mut()[dst_base + i] = taps[b * gplane + i].sample(src, w);
            }
        }
    }
    let graph = image.graph();
    graph.push(out, &[image, grid], move |g: &Tensor, needs: &[bool]| {
        let gimg = needs[0].then(|| {
            let mut gi = Tensor::zeros(img.shape());
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    let gbase = (b * c + ch) * gplane;
                    let dst = &mut gi.data_mut()[off..off + plane];
                    for i in 0..gplane {
                        taps[b * gplane + i].scatter(dst, w, g.data()[gbase + i]);
                    }
                }
            }
            gi
        });
        let ggrid = needs[1].then(|| {
            let mut gg = Tensor::zeros(grd.shape());
            for b in 0..n {
                for ch in 0..c {
                    let src = &img.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    let gbase = (b * c + ch) * gplane;
                    for i in 0..gplane {
                        let [du, dv] = taps[b * gplane + i].coord_grad(src, w);
                        let gv = g.data()[gbase + i];
                        let base = b * 2 * gplane;
                        gg.data_mut()[base + i] += gv * du;
                        gg.data_mut()[base + gplane + i] += gv * dv;
                    }
                }
            }
            gg
        });
        vec![gimg, ggrid]
    })
}

/// Differentiable sampling grid for warping a source view into the target
/// view: each target pixel is lifted with `depth` (`[n, 1, h, w]`), moved by
/// the pose (`[n, 6, 1, 1]`: axis-angle then translation) and projected.
/// Returns `[n, 2, h, w]` source pixel coordinates.
pub fn reprojection_grid<'g>(depth: Var<'g>, pose: Var<'g>, k: &Intrinsics) -> Var<'g> {
    let d = depth.value();
    let p = pose.value();
    let [n, one, h, w] = d.dims();
    assert_eq!(one, 1, "reprojection_grid: depth must have one channel");
    assert_eq!(p.dims(), [n, 6, 1, 1], "reprojection_grid: pose must be [n, 6, 1, 1]");
    let k = *k;
    let plane = h * w;

    struct PerItem {
        rotation: Mat3,
        jacobian: [Mat3; 3],
        translation: Vec3,
    }
    let items: Vec<PerItem> = (0..n)
        .map(|b| {
            let pv = &p.data()[b * 6..b * 6 + 6];
            let (rotation, jacobian) = rodrigues([pv[0], pv[1], pv[2]]);
            PerItem {
                rotation,
                jacobian,
                translation: [pv[3], pv[4], pv[5]],
            }
        })
        .collect();

    let mut out = Tensor::zeros(Shape::new(n, 2, h, w));
    for (b, item) in items.iter().enumerate() {
        let t = RigidTransform {
            rotation: item.rotation,
            translation: item.translation,
        };
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let r = k.ray(x as f64, y as f64);
                let depth_val = d.data()[b * plane + i];
                let q = t.apply([depth_val * r[0], depth_val * r[1], depth_val * r[2]]);
                let [u, v] = k.project_point(q);
                out.data_mut()[b * 2 * plane + i] = u;
                out.data_mut()[b * 2 * plane + plane + i] = v;
            }
        }
    }

    let graph = depth.graph();
    graph.push(out, &[depth, pose], move |g: &Tensor, needs: &[bool]| {
        let mut gd = needs[0].then(|| Tensor::zeros(d.shape()));
        let mut gp = needs[1].then(|| Tensor::zeros(p.shape()));
        for (b, item) in items.iter().enumerate() {
            let t = RigidTransform {
                rotation: item.rotation,
                translation: item.translation,
            };
            let mut g_rot = [0.0; 3];
            let mut g_trans = [0.0; 3];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let gu = g.data()[b * 2 * plane + i];
                    let gv = g.data()[b * 2 * plane + plane + i];
                    if gu == 0.0 && gv == 0.0 {
                        continue;
                    }
                    let r = k.ray(x as f64, y as f64);
                    let depth_val = d.data()[b * plane + i];
                    let pt = [depth_val * r[0], depth_val * r[1], depth_val * r[2]];
                    let q = t.apply(pt);
                    let z_clamped = q[2] <= Z_EPS;
                    let z = q[2].max(Z_EPS);
                    let gq = [
                        gu * k.fx / z,
                        gv * k.fy / z,
                        if z_clamped {
                            0.0
                        } else {
                            -(gu * k.fx * q[0] + gv * k.fy * q[1]) / (z * z)
                        },
                    ];
                    if let Some(gd) = gd.as_mut() {
                        let rr = mat_vec(&item.rotation, r);
                        gd.data_mut()[b * plane + i] += dot(gq, rr);
                    }
                    for a in 0..3 {
                        g_trans[a] += gq[a];
                        g_rot[a] += dot(gq, mat_vec(&item.jacobian[a], pt));
                    }
                }
            }
            if let Some(gp) = gp.as_mut() {
                let dst = &mut gp.data_mut()[b * 6..b * 6 + 6];
                dst[..3].copy_from_slice(&g_rot);
                dst[3..].copy_from_slice(&g_trans);
            }
        }
        vec![gd, gp]
    })
}

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation matrix of an axis-angle vector and its derivative with respect
/// to each of the three components.
///
/// Uses `R = I + A(s) K + B(s) K^2` with `K = [v]x`, `s = |v|^2`,
/// `A = sin θ / θ`, `B = (1 - cos θ) / θ^2`; small angles fall back to the
/// Taylor series in `s` so the zero vector is handled exactly.
pub fn rodrigues(v: Vec3) -> (Mat3, [Mat3; 3]) {
    let s = dot(v, v);
    let (a, b, da, db) = if s < 1e-4 {
        (
            1.0 - s / 6.0 + s * s / 120.0,
            0.5 - s / 24.0 + s * s / 720.0,
            -1.0 / 6.0 + s / 60.0 - s * s / 1680.0,
            -1.0 / 24.0 + s / 360.0 - s * s / 13440.0,
        )
    } else {
        let theta = s.sqrt();
        let (sin, cos) = theta.sin_cos();
        let a = sin / theta;
        let b = (1.0 - cos) / s;
        let da = (theta * cos - sin) / (2.0 * theta * s);
        let db = (theta * sin - 2.0 * (1.0 - cos)) / (2.0 * s * s);
        (a, b, da, db)
    };
    let kx = skew(v);
    let kx2 = mat_mul(&kx, &kx);
    let mut r = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * kx[i][j] + b * kx2[i][j];
        }
    }
    let mut jac = [[[0.0; 3]; 3]; 3];
    for (axis, jm) in jac.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[axis] = 1.0;
        let ek = skew(e);
        let ek_k = mat_mul(&ek, &kx);
        let k_ek = mat_mul(&kx, &ek);
        let ds = 2.0 * v[axis];
        for i in 0..3 {
            for j in 0..3 {
                jm[i][j] = da * ds * kx[i][j]
                    + a * ek[i][j]
                    + db * ds * kx2[i][j]
                    + b * (ek_k[i][j] + k_ek[i][j]);
            }
        }
    }
    (r, jac)
}

fn skew(v: Vec3) -> Mat3 {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

#[inline]
fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::autograd::Graph;
    use crate::gradcheck::{check_gradients, Probe};

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap()
    }

    /// Matrix inverse by cofactors, independent of the rigid-inverse formula.
    fn inverse_by_cofactors(m: &Mat3) -> Mat3 {
        let d = det(m);
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / d;
            }
        }
        inv
    }

    #[test]
    fn zero_axis_angle_is_identity() {
        let t = RigidTransform::from_axis_angle([0.0; 3], [0.0; 3]);
        assert_eq!(t, RigidTransform::identity());
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let t = RigidTransform::from_axis_angle([0.0, 0.0, FRAC_PI_2], [0.0; 3]);
        let p = t.apply([1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(p[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn opposite_rotations_cancel() {
        let v = [0.3, -0.7, 0.2];
        let a = RigidTransform::from_axis_angle(v, [0.0; 3]);
        let b = RigidTransform::from_axis_angle([-v[0], -v[1], -v[2]], [0.0; 3]);
        assert!(a.compose(&b).max_abs_diff(&RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn inverse_of_translation_negates_it() {
        assert_eq!(RigidTransform::identity().invert(), RigidTransform::identity());
        let t = RigidTransform::from_translation([1.0, 2.0, 3.0]).invert();
        assert_eq!(t.translation, [-1.0, -2.0, -3.0]);
    }

    #[test]
    fn backproject_hand_values() {
        let k = k100();
        let mut depth = Tensor::full(Shape::new(1, 1, 101, 101), 3.0);
        depth.set(0, 0, 50, 60, 2.0);
        let pts = backproject(&depth, &k).unwrap();
        assert_eq!(pts.points[50 * 101 + 50], [0.0, 0.0, 3.0]);
        let p = pts.points[50 * 101 + 60];
        assert_abs_diff_eq!(p[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[2], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn backproject_rejects_non_positive_depth() {
        let depth = Tensor::zeros(Shape::new(1, 1, 4, 4));
        assert!(matches!(backproject(&depth, &k100()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn point_behind_camera_is_invalid() {
        let k = k100();
        let depth = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let pts = backproject(&depth, &k).unwrap();
        let grid = project(&pts, &k, &RigidTransform::from_translation([0.0, 0.0, -2.0]));
        assert!(grid.valid.iter().all(|v| !v));
    }

    #[test]
    fn plane_translation_shifts_by_focal_baseline_over_depth() {
        let k = Intrinsics::new(80.0, 80.0, 20.0, 10.0, 40, 20).unwrap();
        let (z, b) = (4.0, 0.3);
        let depth = Tensor::full(Shape::new(1, 1, 20, 40), z);
        let pts = backproject(&depth, &k).unwrap();
        let grid = project(&pts, &k, &RigidTransform::from_translation([b, 0.0, 0.0]));
        let shift = k.fx * b / z;
        for (i, (c, valid)) in grid.coords.iter().zip(&grid.valid).enumerate() {
            let (u, v) = ((i % 40) as f64, (i / 40) as f64);
            assert!((c[0] - (u + shift)).abs() < 1e-6);
            assert!((c[1] - v).abs() < 1e-6);
            assert_eq!(*valid, u + shift <= 39.0);
        }
    }

    #[test]
    fn bilinear_sample_hand_values() {
        let img = Tensor::from_fn(Shape::new(1, 1, 20, 20), |_, _, y, x| (y * 20 + x) as f64 / 400.0);
        let same = bilinear_sample(&img, &SampleGrid::identity(20, 20)).unwrap();
        assert_eq!(same, img);

        let pair = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.2, 0.6]).unwrap();
        let mid = SampleGrid {
            height: 1,
            width: 1,
            coords: vec![[0.5, 0.0]],
            valid: vec![true],
        };
        assert_abs_diff_eq!(bilinear_sample(&pair, &mid).unwrap().item(), 0.4, epsilon = 1e-12);

        let outside = SampleGrid {
            height: 1,
            width: 1,
            coords: vec![[-5.0, 10.0]],
            valid: vec![false],
        };
        assert_eq!(bilinear_sample(&img, &outside).unwrap().item(), img.at(0, 0, 10, 0));
    }

    #[test]
    fn rigid_consistency_on_plane_scene() {
        // Points seen from the target, moved into the source frame, then
        // re-lifted with the induced source depth land on the same 3-D points.
        let k = Intrinsics::new(50.0, 50.0, 15.5, 11.5, 32, 24).unwrap();
        let depth = Tensor::full(Shape::new(1, 1, 24, 32), 5.0);
        let t = RigidTransform::from_axis_angle([0.01, -0.02, 0.005], [0.2, 0.05, -0.1]);
        let pts = backproject(&depth, &k).unwrap();
        for &p in &pts.points {
            let q = t.apply(p);
            let [u, v] = k.project_point(q);
            let r = k.ray(u, v);
            let relifted = [r[0] * q[2], r[1] * q[2], q[2]];
            let back = t.invert().apply(relifted);
            for a in 0..3 {
                assert!((back[a] - p[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rodrigues_jacobian_matches_differences_including_zero() {
        for v in [[0.0, 0.0, 0.0], [1e-4, -2e-4, 5e-5], [0.4, -0.9, 0.3]] {
            let (_, jac) = rodrigues(v);
            for axis in 0..3 {
                let h = 1e-6;
                let mut vp = v;
                let mut vm = v;
                vp[axis] += h;
                vm[axis] -= h;
                let (rp, _) = rodrigues(vp);
                let (rm, _) = rodrigues(vm);
                for i in 0..3 {
                    for j in 0..3 {
                        let fd = (rp[i][j] - rm[i][j]) / (2.0 * h);
                        assert!((fd - jac[axis][i][j]).abs() < 1e-8, "v={v:?} axis={axis}");
                    }
                }
            }
        }
    }

    #[test]
    fn grid_sample_gradients_match_finite_differences() {
        let img = Tensor::from_fn(Shape::new(1, 2, 5, 6), |_, c, y, x| {
            ((x as f64 * 0.7 + c as f64).sin() + (y as f64 * 0.45).cos()) * 0.5
        });
        let grid = Tensor::from_fn(Shape::new(1, 2, 3, 4), |_, c, y, x| {
            if c == 0 {
                0.3 + x as f64 * 1.37 + y as f64 * 0.11
            } else {
                0.6 + y as f64 * 1.21 + x as f64 * 0.07
            }
        });
        let report = check_gradients(&[img, grid], Probe::All, |_, v| grid_sample(v[0], v[1]));
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn reprojection_gradients_match_finite_differences() {
        let k = Intrinsics::new(20.0, 22.0, 3.5, 2.5, 8, 6).unwrap();
        let depth = Tensor::from_fn(Shape::new(2, 1, 6, 8), |n, _, y, x| {
            2.0 + 0.1 * x as f64 + 0.05 * y as f64 + n as f64
        });
        let pose = Tensor::from_vec(
            Shape::new(2, 6, 1, 1),
            vec![0.02, -0.01, 0.03, 0.1, -0.05, 0.2, 0.0, 0.0, 0.0, -0.3, 0.1, 0.05],
        )
        .unwrap();
        let report = check_gradients(&[depth, pose], Probe::All, |_, v| {
            reprojection_grid(v[0], v[1], &k)
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn reprojection_grid_agrees_with_project() {
        let k = Intrinsics::new(30.0, 30.0, 4.0, 3.0, 9, 7).unwrap();
        let depth = Tensor::from_fn(Shape::new(1, 1, 7, 9), |_, _, y, x| 1.0 + 0.2 * (x + y) as f64);
        let av = [0.05, 0.02, -0.04];
        let tr = [0.1, 0.0, -0.2];
        let g = Graph::new();
        let pose = Tensor::from_vec(Shape::new(1, 6, 1, 1), [av, tr].concat()).unwrap();
        let grid = reprojection_grid(g.constant(depth.clone()), g.constant(pose), &k).value();
        let expected = project(
            &backproject(&depth, &k).unwrap(),
            &k,
            &RigidTransform::from_axis_angle(av, tr),
        )
        .to_tensor();
        assert!(grid.max_abs_diff(&expected) < 1e-12);
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(
            values in proptest::collection::vec(0.1f64..50.0, 12),
        ) {
            let k = Intrinsics::new(7.0, 9.0, 1.5, 1.0, 4, 3).unwrap();
            let depth = Tensor::from_vec(Shape::new(1, 1, 3, 4), values).unwrap();
            let grid = project(&backproject(&depth, &k).unwrap(), &k, &RigidTransform::identity());
            let ident = SampleGrid::identity(3, 4);
            for (a, b) in grid.coords.iter().zip(&ident.coords) {
                prop_assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
            }
        }

        #[test]
        fn transform_composed_with_inverse_is_identity(
            av in proptest::array::uniform3(-2.0f64..2.0),
            t in proptest::array::uniform3(-10.0f64..10.0),
        ) {
            let x = RigidTransform::from_axis_angle(av, t);
            prop_assert!(x.is_valid(1e-9));
            prop_assert!(x.compose(&x.invert()).max_abs_diff(&RigidTransform::identity()) < 1e-9);
            // Rotation part of the inverse agrees with a generic matrix inverse.
            let inv = inverse_by_cofactors(&x.rotation);
            let fast = x.invert().rotation;
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((inv[i][j] - fast[i][j]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn axis_angle_log_inverts_exp(av in proptest::array::uniform3(-1.5f64..1.5)) {
            let back = RigidTransform::from_axis_angle(av, [0.0; 3]).axis_angle();
            for a in 0..3 {
                prop_assert!((back[a] - av[a]).abs() < 1e-7);
            }
        }
    }
}
