//! Spatial operations: convolution, normalization, pooling and resampling.

use rayon::prelude::*;

use super::ops::gemm;
use super::Var;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dOptions {
    /// Stride-`stride` convolution that keeps `k x k` kernels centred.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        Conv2dOptions {
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    fn output_len(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding).saturating_sub(span) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    k_h: usize,
    k_w: usize,
    h_out: usize,
    w_out: usize,
    opts: Conv2dOptions,
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.c_in * self.k_h * self.k_w
    }
    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Visits `(row, col, input offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ConvGeometry {
            c_in,
            h,
            w,
            k_h,
            k_w,
            h_out,
            w_out,
            opts,
        } = *self;
        let (s, p, d) = (opts.stride as isize, opts.padding as isize, opts.dilation as isize);
        for c in 0..c_in {
            for ky in 0..k_h {
                for kx in 0..k_w {
                    let row = (c * k_h + ky) * k_w + kx;
                    for oy in 0..h_out {
                        let iy = oy as isize * s - p + ky as isize * d;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (c * h + iy as usize) * w;
                        for ox in 0..w_out {
                            let ix = ox as isize * s - p + kx as isize * d;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            f(row, oy * w_out + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        let mut out = vec![0.0; self.rows() * cols];
        self.for_each_tap(|row, col, src| out[row * cols + col] = input[src]);
        out
    }

    fn col2im(&self, cols_data: &[f64], input_grad: &mut [f64]) {
        let cols = self.cols();
        self.for_each_tap(|row, col, dst| input_grad[dst] += cols_data[row * cols + col]);
    }
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the form tracked by running averages.
    pub var: Vec<f64>,
}

impl<'g> Var<'g> {
    /// 2-D cross-correlation of `[n, c_in, h, w]` with `[c_out, c_in, kh, kw]`
    /// weights and an optional `[1, c_out, 1, 1]` bias. Zero padding.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, opts: Conv2dOptions) -> Var<'g> {
        let x = self.value();
        let wt = weight.value();
        let [n, c_in, h, w] = x.dims();
        let [c_out, wc_in, k_h, k_w] = wt.dims();
        assert_eq!(c_in, wc_in, "conv2d: input has {c_in} channels, weight expects {wc_in}");
        let geo = ConvGeometry {
            c_in,
            h,
            w,
            k_h,
            k_w,
            h_out: opts.output_len(h, k_h),
            w_out: opts.output_len(w, k_w),
            opts,
        };
        let (rows, cols) = (geo.rows(), geo.cols());
        let item_in = c_in * h * w;
        let item_out = c_out * cols;
        let bias_value = bias.map(|b| {
            let b = b.value();
            assert_eq!(b.dims(), [1, c_out, 1, 1], "conv2d: bias shape");
            b
        });

        // Rc is not Sync; hand plain slices to the workers.
        let (xd, wd) = (x.data(), wt.data());
        let bd = bias_value.as_ref().map(|b| b.data());
        let items: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let col = geo.im2col(&xd[i * item_in..(i + 1) * item_in]);
                let mut out = vec![0.0; item_out];
                if let Some(b) = bd {
                    for (co, chunk) in out.chunks_mut(cols).enumerate() {
                        chunk.fill(b[co]);
                    }
                }
                gemm(wd, false, &col, false, &mut out, c_out, rows, cols);
                out
            })
            .collect();
        let out = Tensor::from_vec(
            Shape::new(n, c_out, geo.h_out, geo.w_out),
            items.concat(),
        )
        .expect("conv2d output");

        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.graph.push(out, &inputs, move |g: &Tensor, needs: &[bool]| {
            let want_x = needs[0];
            let want_w = needs[1];
            let (xd, wd, gd) = (x.data(), wt.data(), g.data());
            let per_item: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let gi = &gd[i * item_out..(i + 1) * item_out];
                    let gw = want_w.then(|| {
                        let col = geo.im2col(&xd[i * item_in..(i + 1) * item_in]);
                        let mut gw = vec![0.0; c_out * rows];
                        gemm(gi, false, &col, true, &mut gw, c_out, cols, rows);
                        gw
                    });
                    let gx = want_x.then(|| {
                        let mut gcol = vec![0.0; rows * cols];
                        gemm(wd, true, gi, false, &mut gcol, rows, c_out, cols);
                        let mut gx = vec![0.0; item_in];
                        geo.col2im(&gcol, &mut gx);
                        gx
                    });
                    (gx, gw)
                })
                .collect();

            let mut grads = Vec::with_capacity(3);
            grads.push(want_x.then(|| {
                let data: Vec<f64> = per_item
                    .iter()
                    .flat_map(|(gx, _)| gx.as_ref().expect("input grad").iter().copied())
                    .collect();
                Tensor::from_vec(x.shape(), data).expect("conv2d input grad")
            }));
            grads.push(want_w.then(|| {
                let mut acc = Tensor::zeros(wt.shape());
                for (_, gw) in &per_item {
                    for (a, b) in acc.data_mut().iter_mut().zip(gw.as_ref().expect("weight grad")) {
                        *a += b;
                    }
                }
                acc
            }));
            if has_bias {
                grads.push(needs[2].then(|| g.reduce_to(Shape::new(1, c_out, 1, 1))));
            }
            grads
        })
    }

    /// Training-mode batch normalization over `(n, h, w)` per channel with
    /// `[1, c, 1, 1]` scale and shift.
    pub fn batch_norm(
        self,
        gamma: Var<'g>,
        beta: Var<'g>,
        eps: f64,
    ) -> (Var<'g>, BatchNormStats) {
        let x = self.value();
        let [n, c, h, w] = x.dims();
        let gam = gamma.value();
        let count = (n * h * w) as f64;
        let plane = h * w;

        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                s += x.data()[base..base + plane].iter().sum::<f64>();
            }
            let m = s / count;
            let mut v = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                v += x.data()[base..base + plane]
                    .iter()
                    .map(|&e| (e - m) * (e - m))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let mut normalized = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let bet = beta.value();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    normalized.data_mut()[i] = xh;
                    out.data_mut()[i] = gam.data()[ch] * xh + bet.data()[ch];
                }
            }
        }
        let unbiased = if count > 1.0 {
            var.iter().map(|v| v * count / (count - 1.0)).collect()
        } else {
            var.clone()
        };
        let stats = BatchNormStats {
            mean,
            var: unbiased,
        };

        let var_out = self.graph.push(out, &[self, gamma, beta], move |g: &Tensor, needs: &[bool]| {
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    for i in base..base + plane {
                        sum_g[ch] += g.data()[i];
                        sum_gx[ch] += g.data()[i] * normalized.data()[i];
                    }
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(g.shape());
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let k = gam.data()[ch] * inv_std[ch] / count;
                        for i in base..base + plane {
                            gx.data_mut()[i] = k
                                * (count * g.data()[i]
                                    - sum_g[ch]
                                    - normalized.data()[i] * sum_gx[ch]);
                        }
                    }
                }
                gx
            });
            let shape = Shape::new(1, c, 1, 1);
            vec![
                gx,
                needs[1].then(|| Tensor::from_vec(shape, sum_gx.clone()).expect("gamma grad")),
                needs[2].then(|| Tensor::from_vec(shape, sum_g.clone()).expect("beta grad")),
            ]
        });
        (var_out, stats)
    }

    /// Max pooling with `-inf` padding.
    pub fn max_pool2d(self, kernel: usize, stride: usize, padding: usize) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = x.dims();
        let opts = Conv2dOptions {
            stride,
            padding,
            dilation: 1,
        };
        let (ho, wo) = (opts.output_len(h, kernel), opts.output_len(w, kernel));
        let mut out = Tensor::zeros(Shape::new(n, c, ho, wo));
        let mut argmax = vec![0usize; out.numel()];
        let mut k = 0;
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = base;
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let i = base + iy as usize * w + ix as usize;
                                if x.data()[i] > best {
                                    best = x.data()[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.data_mut()[k] = best;
                        argmax[k] = best_i;
                        k += 1;
                    }
                }
            }
        }
        let in_shape = x.shape();
        self.graph.push(out, &[self], move |g: &Tensor, _: &[bool]| {
            let mut gx = Tensor::zeros(in_shape);
            for (k, &src) in argmax.iter().enumerate() {
                gx.data_mut()[src] += g.data()[k];
            }
            vec![Some(gx)]
        })
    }

    /// Nearest-neighbour upsampling by two in each spatial axis.
    pub fn upsample_nearest2x(self) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = x.dims();
        let out = Tensor::from_fn(Shape::new(n, c, 2 * h, 2 * w), |b, ch, y, x_| {
            x.at(b, ch, y / 2, x_ / 2)
        });
        let in_shape = x.shape();
        self.graph.push(out, &[self], move |g: &Tensor, _: &[bool]| {
            let mut gx = Tensor::zeros(in_shape);
            for b in 0..n {
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x_ in 0..2 * w {
                            let i = gx.index(b, ch, y / 2, x_ / 2);
                            gx.data_mut()[i] += g.at(b, ch, y, x_);
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Bilinear resize with half-pixel centres (edges clamped), the usual
    /// `align_corners = false` convention.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = x.dims();
        if (h, w) == (out_h, out_w) {
            return self;
        }
        let ys = resize_taps(h, out_h);
        let xs = resize_taps(w, out_w);
        let out = Tensor::from_fn(Shape::new(n, c, out_h, out_w), |b, ch, oy, ox| {
            let (y0, y1, ly) = ys[oy];
            let (x0, x1, lx) = xs[ox];
            let top = x.at(b, ch, y0, x0) * (1.0 - lx) + x.at(b, ch, y0, x1) * lx;
            let bottom = x.at(b, ch, y1, x0) * (1.0 - lx) + x.at(b, ch, y1, x1) * lx;
            top * (1.0 - ly) + bottom * ly
        });
        let in_shape = x.shape();
        self.graph.push(out, &[self], move |g: &Tensor, _: &[bool]| {
            let mut gx = Tensor::zeros(in_shape);
            for b in 0..n {
                for ch in 0..c {
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let gv = g.at(b, ch, oy, ox);
                            for (yy, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                                for (xx, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                                    let i = gx.index(b, ch, yy, xx);
                                    gx.data_mut()[i] += gv * wy * wx;
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// 3x3 mean filter, stride 1, reflection-padded so the output keeps the
    /// input size. Requires both spatial sizes to be at least 2.
    pub fn avg_pool3_reflect(self) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = x.dims();
        assert!(h >= 2 && w >= 2, "avg_pool3_reflect needs at least 2x2, got {h}x{w}");
        let out = Tensor::from_fn(x.shape(), |b, ch, y, x_| {
            let mut s = 0.0;
            for dy in [-1isize, 0, 1] {
                let yy = reflect(y as isize + dy, h);
                for dx in [-1isize, 0, 1] {
                    s += x.at(b, ch, yy, reflect(x_ as isize + dx, w));
                }
            }
            s / 9.0
        });
        let in_shape = x.shape();
        self.graph.push(out, &[self], move |g: &Tensor, _: &[bool]| {
            let mut gx = Tensor::zeros(in_shape);
            for b in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for x_ in 0..w {
                            let gv = g.at(b, ch, y, x_) / 9.0;
                            for dy in [-1isize, 0, 1] {
                                let yy = reflect(y as isize + dy, h);
                                for dx in [-1isize, 0, 1] {
                                    let i = gx.index(b, ch, yy, reflect(x_ as isize + dx, w));
                                    gx.data_mut()[i] += gv;
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}

#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= len {
        2 * (len - 1) - i
    } else {
        i
    };
    r as usize
}

fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
