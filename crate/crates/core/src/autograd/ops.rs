//! Elementwise, reduction, shape and matrix operations.

use std::rc::Rc;

use super::Var;
use crate::tensor::{Shape, Tensor};

fn broadcast_or_panic(op: &str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.broadcast_map(b, f)
        .unwrap_or_else(|e| panic!("{op}: {e}"))
}

impl<'g> Var<'g> {
    fn unary(
        self,
        value: Tensor,
        rule: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var<'g> {
        self.graph.push(value, &[self], move |g: &Tensor, _: &[bool]| {
            vec![Some(rule(g))]
        })
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_or_panic("add", &a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape(), b.shape());
        self.graph.push(out, &[self, other], move |g: &Tensor, needs: &[bool]| {
            vec![
                needs[0].then(|| g.reduce_to(sa)),
                needs[1].then(|| g.reduce_to(sb)),
            ]
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_or_panic("sub", &a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape(), b.shape());
        self.graph.push(out, &[self, other], move |g: &Tensor, needs: &[bool]| {
            vec![
                needs[0].then(|| g.reduce_to(sa)),
                needs[1].then(|| g.scale(-1.0).reduce_to(sb)),
            ]
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_or_panic("mul", &a, &b, |x, y| x * y);
        self.graph.push(out, &[self, other], move |g: &Tensor, needs: &[bool]| {
            vec![
                needs[0].then(|| broadcast_or_panic("mul", g, &b, |g, y| g * y).reduce_to(a.shape())),
                needs[1].then(|| broadcast_or_panic("mul", g, &a, |g, x| g * x).reduce_to(b.shape())),
            ]
        })
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = Rc::new(broadcast_or_panic("div", &a, &b, |x, y| x / y));
        let result = (*out).clone();
        let sa = a.shape();
        self.graph.push(result, &[self, other], move |g: &Tensor, needs: &[bool]| {
            vec![
                needs[0].then(|| broadcast_or_panic("div", g, &b, |g, y| g / y).reduce_to(sa)),
                needs[1].then(|| {
                    let go = g.zip_map(&out, |g, o| g * o);
                    broadcast_or_panic("div", &go, &b, |x, y| -x / y).reduce_to(b.shape())
                }),
            ]
        })
    }

    /// Elementwise minimum of two same-shaped values. Ties route the gradient
    /// to `self`.
    pub fn minimum(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "minimum: shape mismatch");
        let out = a.zip_map(&b, f64::min);
        self.graph.push(out, &[self, other], move |g: &Tensor, needs: &[bool]| {
            let pick_a = |want_a: bool| {
                let mut t = g.clone();
                for ((v, &x), &y) in t.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    if (x <= y) != want_a {
                        *v = 0.0;
                    }
                }
                t
            };
            vec![needs[0].then(|| pick_a(true)), needs[1].then(|| pick_a(false))]
        })
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v + s);
        self.unary(out, |g| g.clone())
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let out = self.value().scale(s);
        self.unary(out, move |g| g.scale(s))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.unary(out, move |g| g.zip_map(&x, |g, v| 2.0 * g * v))
    }

    pub fn sqrt(self) -> Var<'g> {
        let out = Rc::new(self.value().map(f64::sqrt));
        let result = (*out).clone();
        self.unary(result, move |g| g.zip_map(&out, |g, o| g / (2.0 * o)))
    }

    pub fn recip(self) -> Var<'g> {
        let out = Rc::new(self.value().map(|v| 1.0 / v));
        let result = (*out).clone();
        self.unary(result, move |g| g.zip_map(&out, |g, o| -g * o * o))
    }

    pub fn exp(self) -> Var<'g> {
        let out = Rc::new(self.value().map(f64::exp));
        let result = (*out).clone();
        self.unary(result, move |g| g.zip_map(&out, |g, o| g * o))
    }

    pub fn ln(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(f64::ln);
        self.unary(out, move |g| g.zip_map(&x, |g, v| g / v))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(f64::abs);
        self.unary(out, move |g| {
            g.zip_map(&x, |g, v| {
                if v > 0.0 {
                    g
                } else if v < 0.0 {
                    -g
                } else {
                    0.0
                }
            })
        })
    }

    pub fn relu(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.unary(out, move |g| g.zip_map(&x, |g, v| if v > 0.0 { g } else { 0.0 }))
    }

    /// Exponential linear unit with unit scale.
    pub fn elu(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.unary(out, move |g| {
            g.zip_map(&x, |g, v| if v > 0.0 { g } else { g * v.exp() })
        })
    }

    pub fn sigmoid(self) -> Var<'g> {
        let out = Rc::new(self.value().map(|v| 1.0 / (1.0 + (-v).exp())));
        let result = (*out).clone();
        self.unary(result, move |g| g.zip_map(&out, |g, o| g * o * (1.0 - o)))
    }

    /// Clamps into `[lo, hi]`; the gradient passes where the input lies
    /// inside the closed interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        let x = self.value();
        let out = x.map(|v| v.clamp(lo, hi));
        self.unary(out, move |g| {
            g.zip_map(&x, |g, v| if (lo..=hi).contains(&v) { g } else { 0.0 })
        })
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape();
        let out = Tensor::scalar(x.sum());
        self.unary(out, move |g| Tensor::full(shape, g.item()))
    }

    pub fn mean(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape();
        let n = x.numel() as f64;
        let out = Tensor::scalar(x.sum() / n);
        self.unary(out, move |g| Tensor::full(shape, g.item() / n))
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn mean_spatial(self) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = x.dims();
        let target = Shape::new(n, c, 1, 1);
        let count = (h * w) as f64;
        let out = x.reduce_to(target).scale(1.0 / count);
        self.unary(out, move |g| {
            Tensor::full(Shape::new(1, 1, h, w), 1.0)
                .broadcast_map(g, |_, g| g / count)
                .expect("mean_spatial broadcast")
        })
    }

    /// Mean over channels: `[n, c, h, w] -> [n, 1, h, w]`.
    pub fn mean_channels(self) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = x.dims();
        let count = c as f64;
        let out = x.reduce_to(Shape::new(n, 1, h, w)).scale(1.0 / count);
        self.unary(out, move |g| {
            Tensor::full(Shape::new(1, c, 1, 1), 1.0)
                .broadcast_map(g, |_, g| g / count)
                .expect("mean_channels broadcast")
        })
    }

    /// Forward difference along width: `x[.., 1..] - x[.., ..w-1]`.
    pub fn diff_x(self) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = x.dims();
        let out_w = w.saturating_sub(1);
        let out = Tensor::from_fn(Shape::new(n, c, h, out_w), |b, ch, y, i| {
            x.at(b, ch, y, i + 1) - x.at(b, ch, y, i)
        });
        self.unary(out, move |g| {
            let mut gx = Tensor::zeros(Shape::new(n, c, h, w));
            for b in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for i in 0..out_w {
                            let v = g.at(b, ch, y, i);
                            let hi = gx.index(b, ch, y, i + 1);
                            let lo = gx.index(b, ch, y, i);
                            gx.data_mut()[hi] += v;
                            gx.data_mut()[lo] -= v;
                        }
                    }
                }
            }
            gx
        })
    }

    /// Forward difference along height.
    pub fn diff_y(self) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = x.dims();
        let out_h = h.saturating_sub(1);
        let out = Tensor::from_fn(Shape::new(n, c, out_h, w), |b, ch, j, x_| {
            x.at(b, ch, j + 1, x_) - x.at(b, ch, j, x_)
        });
        self.unary(out, move |g| {
            let mut gx = Tensor::zeros(Shape::new(n, c, h, w));
            for b in 0..n {
                for ch in 0..c {
                    for j in 0..out_h {
                        for i in 0..w {
                            let v = g.at(b, ch, j, i);
                            let hi = gx.index(b, ch, j + 1, i);
                            let lo = gx.index(b, ch, j, i);
                            gx.data_mut()[hi] += v;
                            gx.data_mut()[lo] -= v;
                        }
                    }
                }
            }
            gx
        })
    }

    pub fn reshape(self, shape: Shape) -> Var<'g> {
        let x = self.value();
        let original = x.shape();
        let out = (*x).clone().reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.unary(out, move |g| g.clone().reshape(original).expect("reshape back"))
    }

    pub fn concat_channels(parts: &[Var<'g>]) -> Var<'g> {
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_channels(&refs).unwrap_or_else(|e| panic!("{e}"));
        let widths: Vec<usize> = values.iter().map(|v| v.shape().c()).collect();
        graph.push(out, parts, move |g: &Tensor, needs: &[bool]| {
            let mut start = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let part = need.then(|| g.narrow_channels(start, c));
                    start += c;
                    part
                })
                .collect()
        })
    }

    pub fn narrow_channels(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape();
        let out = x.narrow_channels(start, len);
        self.unary(out, move |g| {
            let [n, c, h, w] = shape.0;
            let mut gx = Tensor::zeros(shape);
            let plane = h * w;
            for b in 0..n {
                let dst = (b * c + start) * plane;
                let src = b * len * plane;
                gx.data_mut()[dst..dst + len * plane]
                    .copy_from_slice(&g.data()[src..src + len * plane]);
            }
            gx
        })
    }

    /// Softmax along the last (width) axis of every row.
    pub fn softmax_rows(self) -> Var<'g> {
        let x = self.value();
        let w = x.shape().w();
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(w) {
            softmax_in_place(row);
        }
        let out = Rc::new(out);
        let result = (*out).clone();
        self.unary(result, move |g| {
            let mut gx = g.clone();
            for (grow, orow) in gx.data_mut().chunks_mut(w).zip(out.data().chunks(w)) {
                let dot: f64 = grow.iter().zip(orow).map(|(g, o)| g * o).sum();
                for (gv, &o) in grow.iter_mut().zip(orow) {
                    *gv = o * (*gv - dot);
                }
            }
            gx
        })
    }

    /// Batched matrix product over `[n, 1, rows, cols]` operands, optionally
    /// transposing either side.
    pub fn matmul(self, other: Var<'g>, trans_a: bool, trans_b: bool) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = oriented(&a, trans_a);
        let (kb, p) = oriented(&b, trans_b);
        assert_eq!(k, kb, "matmul: inner dimensions {k} vs {kb}");
        let n = a.shape().n();
        assert_eq!(n, b.shape().n(), "matmul: batch mismatch");
        assert!(a.shape().c() == 1 && b.shape().c() == 1, "matmul: expects [n,1,r,c]");
        let mut out = Tensor::zeros(Shape::new(n, 1, m, p));
        for i in 0..n {
            gemm(
                &a.data()[i * m * k..(i + 1) * m * k],
                trans_a,
                &b.data()[i * k * p..(i + 1) * k * p],
                trans_b,
                &mut out.data_mut()[i * m * p..(i + 1) * m * p],
                m,
                k,
                p,
            );
        }
        self.graph.push(out, &[self, other], move |g: &Tensor, needs: &[bool]| {
            let mut ga = needs[0].then(|| Tensor::zeros(a.shape()));
            let mut gb = needs[1].then(|| Tensor::zeros(b.shape()));
            for i in 0..n {
                let gi = &g.data()[i * m * p..(i + 1) * m * p];
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * p..(i + 1) * k * p];
                if let Some(ga) = ga.as_mut() {
                    let dst = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
                    if trans_a {
                        // A is k x m: dA = op(B) G^T
                        gemm(bi, trans_b, gi, true, dst, k, p, m);
                    } else {
                        gemm(gi, false, bi, !trans_b, dst, m, p, k);
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    let dst = &mut gb.data_mut()[i * k * p..(i + 1) * k * p];
                    if trans_b {
                        // B is p x k: dB = G^T op(A)
                        gemm(gi, true, ai, trans_a, dst, p, m, k);
                    } else {
                        gemm(ai, !trans_a, gi, false, dst, k, m, p);
                    }
                }
            }
            vec![ga, gb]
        })
    }
}

impl<'g> std::ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'g> std::ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'g> std::ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'g> std::ops::Div for Var<'g> {
    type Output = Var<'g>;
    fn div(self, rhs: Self) -> Self::Output {
        Var::div(self, rhs)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn oriented(t: &Tensor, trans: bool) -> (usize, usize) {
    let (r, c) = (t.shape().h(), t.shape().w());
    if trans {
        (c, r)
    } else {
        (r, c)
    }
}

/// `c += op(a) * op(b)` for row-major `op(a): m x k`, `op(b): k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents asserted below.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
