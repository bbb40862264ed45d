//! Self-attention context module over the 1/8-resolution encoder features.
//!
//! Query, key and value are per-position linear maps of the feature map
//! (1x1 convolutions without bias). Each query position gets a softmax over
//! its dot products with every key position, and the output at that position
//! is the correspondingly weighted sum of values.

use crate::autograd::{Conv2dOptions, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Projection matrices `W_f`, `W_g`, `W_h`, each stored as `[n_out, m_in, 1, 1]`
/// convolution weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProjections {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

impl AttentionProjections {
    pub fn new(query: Tensor, key: Tensor, value: Tensor) -> Result<Self> {
        let dims = query.dims();
        if dims[2] != 1 || dims[3] != 1 {
            return Err(Error::invalid(format!(
                "projection weights must be [n, m, 1, 1], got {}",
                query.shape()
            )));
        }
        if key.dims() != dims || value.dims() != dims {
            return Err(Error::invalid(format!(
                "projection shapes differ: {} / {} / {}",
                query.shape(),
                key.shape(),
                value.shape()
            )));
        }
        Ok(AttentionProjections { query, key, value })
    }

    /// Input channel count `M`.
    pub fn in_channels(&self) -> usize {
        self.query.dims()[1]
    }

    /// Projected channel count `N`.
    pub fn out_channels(&self) -> usize {
        self.query.dims()[0]
    }
}

/// Row-stochastic `P x P` attention matrix of one image; row `ω` is the
/// distribution of query position `ω` over all key positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl AttentionWeights {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn row(&self, position: usize) -> &[f64] {
        let p = self.positions();
        &self.data[position * p..(position + 1) * p]
    }

    pub fn get(&self, query: usize, key: usize) -> f64 {
        self.data[query * self.positions() + key]
    }

    fn from_tensor(t: &Tensor, height: usize, width: usize) -> Self {
        AttentionWeights {
            height,
            width,
            data: t.data().to_vec(),
        }
    }

    /// Weights of batch item `item` from an `[n, 1, P, P]` tensor over an
    /// `height x width` lattice.
    pub fn from_batch(t: &Tensor, item: usize, height: usize, width: usize) -> Result<Self> {
        let p = height * width;
        let [n, c, rows, cols] = t.dims();
        if c != 1 || rows != p || cols != p || item >= n {
            return Err(Error::invalid(format!(
                "attention tensor {} does not hold item {item} of a {height}x{width} lattice",
                t.shape()
            )));
        }
        Ok(AttentionWeights {
            height,
            width,
            data: t.data()[item * p * p..(item + 1) * p * p].to_vec(),
        })
    }

    /// As a `[1, 1, P, P]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let p = self.positions();
        Tensor::from_vec(Shape::new(1, 1, p, p), self.data.clone()).expect("square weights")
    }
}

/// Differentiable pieces of the context module.
pub struct ContextOutput<'g> {
    /// `[n, N, h, w]` attended features.
    pub features: Var<'g>,
    /// `[n, 1, P, P]` attention weights; `None` when attention is disabled.
    pub weights: Option<Var<'g>>,
}

/// Runs the context module on `x` (`[n, M, h, w]`).
///
/// With `attend = false` the attention matrix is replaced by the identity, so
/// the output is the value projection alone and keeps its channel count.
/// `scale_scores` divides the dot products by `sqrt(N)` before the softmax.
pub fn context_forward<'g>(
    x: Var<'g>,
    query_w: Option<Var<'g>>,
    key_w: Option<Var<'g>>,
    value_w: Var<'g>,
    scale_scores: bool,
) -> ContextOutput<'g> {
    let [n, _, h, w] = x.shape().0;
    let p = h * w;
    let one_by_one = Conv2dOptions::default();
    let value = x.conv2d(value_w, None, one_by_one);
    let channels = value.shape().c();
    let (Some(qw), Some(kw)) = (query_w, key_w) else {
        return ContextOutput {
            features: value,
            weights: None,
        };
    };
    let as_matrix = Shape::new(n, 1, channels, p);
    let query = x.conv2d(qw, None, one_by_one).reshape(as_matrix);
    let key = x.conv2d(kw, None, one_by_one).reshape(as_matrix);
    let mut scores = query.matmul(key, true, false);
    if scale_scores && channels > 0 {
        scores = scores.scale(1.0 / (channels as f64).sqrt());
    }
    let weights = scores.softmax_rows();
    let features = value
        .reshape(as_matrix)
        .matmul(weights, false, true)
        .reshape(Shape::new(n, channels, h, w));
    ContextOutput {
        features,
        weights: Some(weights),
    }
}

fn check_batch_one(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().n() != 1 {
        return Err(Error::invalid(format!("{what} must have batch 1, got {}", t.shape())));
    }
    Ok(())
}

/// Query, key and value maps `W X(ω)` of a `[n, M, h, w]` feature map.
pub fn project_qkv(x: &Tensor, w: &AttentionProjections) -> Result<(Tensor, Tensor, Tensor)> {
    if x.shape().c() != w.in_channels() {
        return Err(Error::invalid(format!(
            "feature map has {} channels, projections expect {}",
            x.shape().c(),
            w.in_channels()
        )));
    }
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let proj = |wt: &Tensor| {
        (*xv.conv2d(g.constant(wt.clone()), None, Conv2dOptions::default()).value()).clone()
    };
    Ok((proj(&w.query), proj(&w.key), proj(&w.value)))
}

/// Softmax over key positions of the query/key dot products.
pub fn attention_weights(query: &Tensor, key: &Tensor) -> Result<AttentionWeights> {
    attention_weights_scaled(query, key, false)
}

pub fn attention_weights_scaled(
    query: &Tensor,
    key: &Tensor,
    scale_scores: bool,
) -> Result<AttentionWeights> {
    if query.shape() != key.shape() {
        return Err(Error::invalid(format!(
            "query {} and key {} differ in shape",
            query.shape(),
            key.shape()
        )));
    }
    check_batch_one(query, "query")?;
    let [_, c, h, w] = query.dims();
    let g = Graph::new();
    let m = Shape::new(1, 1, c, h * w);
    let q = g.constant(query.clone().reshape(m)?);
    let k = g.constant(key.clone().reshape(m)?);
    let mut scores = q.matmul(k, true, false);
    if scale_scores && c > 0 {
        scores = scores.scale(1.0 / (c as f64).sqrt());
    }
    Ok(AttentionWeights::from_tensor(&scores.softmax_rows().value(), h, w))
}

/// `A(ω) = Σ value(ω̃) S_ω(ω̃)`.
pub fn attention_output(value: &Tensor, s: &AttentionWeights) -> Result<Tensor> {
    check_batch_one(value, "value")?;
    let [_, c, h, w] = value.dims();
    if h * w != s.positions() {
        return Err(Error::invalid(format!(
            "value has {} positions, weights have {}",
            h * w,
            s.positions()
        )));
    }
    let g = Graph::new();
    let v = g.constant(value.clone().reshape(Shape::new(1, 1, c, h * w))?);
    let weights = g.constant(s.to_tensor());
    let out = v.matmul(weights, false, true).value();
    (*out).clone().reshape(Shape::new(1, c, h, w))
}

/// Rows of `s` for the given `(row, col)` query pixels, each reshaped to a
/// `[1, 1, h, w]` heat map.
pub fn export_attention_maps(
    s: &AttentionWeights,
    positions: &[(usize, usize)],
) -> Result<Vec<Tensor>> {
    positions
        .iter()
        .map(|&(row, col)| {
            if row >= s.height || col >= s.width {
                return Err(Error::invalid(format!(
                    "query ({row}, {col}) outside {}x{} lattice",
                    s.height, s.width
                )));
            }
            Tensor::from_vec(
                Shape::new(1, 1, s.height, s.width),
                s.row(row * s.width + col).to_vec(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::gradcheck::{check_gradients, Probe};

    fn scalar_weights(v: f64) -> Tensor {
        Tensor::full(Shape::new(1, 1, 1, 1), v)
    }

    fn two_positions() -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap()
    }

    #[test]
    fn projections_hand_values() {
        let x = Tensor::from_fn(Shape::new(1, 3, 2, 2), |_, c, y, x| (c * 4 + y * 2 + x) as f64);
        let mut eye = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for i in 0..3 {
            eye.set(i, i, 0, 0, 1.0);
        }
        let zero = Tensor::zeros(Shape::new(3, 3, 1, 1));
        let w = AttentionProjections::new(eye.clone(), zero.clone(), eye).unwrap();
        let (q, k, _) = project_qkv(&x, &w).unwrap();
        assert_eq!(q, x);
        assert!(k.data().iter().all(|&v| v == 0.0));

        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        let two = scalar_weights(2.0);
        let w = AttentionProjections::new(two.clone(), two.clone(), two).unwrap();
        assert_eq!(project_qkv(&x, &w).unwrap().0.data(), &[2.0, 6.0]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::zeros(Shape::new(1, 2, 2, 2));
        let w = scalar_weights(1.0);
        let w = AttentionProjections::new(w.clone(), w.clone(), w).unwrap();
        assert!(matches!(project_qkv(&x, &w), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_query_gives_uniform_rows() {
        let q = Tensor::zeros(Shape::new(1, 2, 2, 3));
        let k = Tensor::from_fn(q.shape(), |_, c, y, x| (c + y * x) as f64);
        let s = attention_weights(&q, &k).unwrap();
        for &v in &s.data {
            assert_abs_diff_eq!(v, 1.0 / 6.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_position_weight_is_one() {
        let q = Tensor::full(Shape::new(1, 4, 1, 1), 0.3);
        let s = attention_weights(&q, &q).unwrap();
        assert_eq!(s.data, vec![1.0]);
        let maps = export_attention_maps(&s, &[(0, 0)]).unwrap();
        assert_eq!(maps[0].data(), &[1.0]);
    }

    #[test]
    fn scalar_case_hand_values() {
        let x = two_positions();
        let one = scalar_weights(1.0);
        let w = AttentionProjections::new(one.clone(), one.clone(), one).unwrap();
        let (q, k, v) = project_qkv(&x, &w).unwrap();
        let s = attention_weights(&q, &k).unwrap();
        assert_abs_diff_eq!(s.get(0, 0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.get(1, 0), 0.268_941_421_369_995, epsilon = 1e-12);
        assert_abs_diff_eq!(s.get(1, 1), 0.731_058_578_630_005, epsilon = 1e-12);
        let a = attention_output(&v, &s).unwrap();
        assert_abs_diff_eq!(a.data()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(a.data()[1], 0.731_058_578_630_005, epsilon = 1e-12);

        let maps = export_attention_maps(&s, &[(0, 0), (0, 1)]).unwrap();
        assert_eq!(maps[0].data(), &[0.5, 0.5]);
        assert_abs_diff_eq!(maps[1].data()[0], 0.2689, epsilon = 1e-4);
        assert_abs_diff_eq!(maps[1].data()[1], 0.7311, epsilon = 1e-4);
    }

    #[test]
    fn uniform_and_one_hot_rows() {
        let v = Tensor::from_fn(Shape::new(1, 2, 1, 3), |_, c, _, x| (c * 3 + x) as f64);
        let uniform = AttentionWeights {
            height: 1,
            width: 3,
            data: vec![1.0 / 3.0; 9],
        };
        let a = attention_output(&v, &uniform).unwrap();
        for x in 0..3 {
            assert_abs_diff_eq!(a.at(0, 0, 0, x), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(a.at(0, 1, 0, x), 4.0, epsilon = 1e-12);
        }
        let mut one_hot = vec![0.0; 9];
        for row in 0..3 {
            one_hot[row * 3 + 2] = 1.0;
        }
        let s = AttentionWeights {
            height: 1,
            width: 3,
            data: one_hot,
        };
        let a = attention_output(&v, &s).unwrap();
        assert_eq!(a.at(0, 1, 0, 0), v.at(0, 1, 0, 2));
    }

    #[test]
    fn out_of_lattice_export_is_rejected() {
        let q = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let s = attention_weights(&q, &q).unwrap();
        assert!(export_attention_maps(&s, &[(2, 0)]).is_err());
    }

    #[test]
    fn scaling_flag_divides_scores() {
        let q = Tensor::from_vec(Shape::new(1, 4, 1, 2), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let k = Tensor::from_vec(Shape::new(1, 4, 1, 2), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        // Row 0 scores [0, 4]; scaled by 1/2 they become [0, 2].
        let plain = attention_weights(&q, &k).unwrap();
        let scaled = attention_weights_scaled(&q, &k, true).unwrap();
        assert_abs_diff_eq!(plain.get(0, 1), 1.0 / (1.0 + (-4.0f64).exp()), epsilon = 1e-12);
        assert_abs_diff_eq!(scaled.get(0, 1), 1.0 / (1.0 + (-2.0f64).exp()), epsilon = 1e-12);
    }

    #[test]
    fn context_gradients_match_finite_differences() {
        let x = Tensor::from_fn(Shape::new(1, 4, 3, 3), |_, c, y, x| {
            ((c * 9 + y * 3 + x) as f64 * 0.71).sin() * 0.8
        });
        let wq = Tensor::from_fn(Shape::new(3, 4, 1, 1), |o, i, _, _| ((o * 4 + i) as f64 * 0.37).cos() * 0.6);
        let wk = Tensor::from_fn(Shape::new(3, 4, 1, 1), |o, i, _, _| ((o * 4 + i) as f64 * 0.53).sin() * 0.6);
        let wv = Tensor::from_fn(Shape::new(3, 4, 1, 1), |o, i, _, _| ((o * 4 + i) as f64 * 0.19).cos() * 0.6);
        let r = check_gradients(&[x, wq, wk, wv], Probe::All, |_, v| {
            context_forward(v[0], Some(v[1]), Some(v[2]), v[3], false).features
        });
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn disabled_attention_is_value_projection() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, y, x| (c + y + x) as f64));
        let wv = g.constant(Tensor::full(Shape::new(3, 2, 1, 1), 0.5));
        let out = context_forward(x, None, None, wv, false);
        assert!(out.weights.is_none());
        assert_eq!(out.features.shape(), Shape::new(1, 3, 2, 2));
        assert_eq!(out.features.value().at(0, 2, 1, 1), 0.5 * (2.0 + 3.0));
    }

    fn feature_map(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-3.0f64..3.0, c * h * w)
            .prop_map(move |v| Tensor::from_vec(Shape::new(1, c, h, w), v).unwrap())
    }

    proptest! {
        #[test]
        fn rows_are_distributions_and_outputs_stay_in_hull(
            q in feature_map(3, 2, 3),
            k in feature_map(3, 2, 3),
            v in feature_map(2, 2, 3),
        ) {
            let s = attention_weights(&q, &k).unwrap();
            for p in 0..s.positions() {
                let row = s.row(p);
                prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let a = attention_output(&v, &s).unwrap();
            for c in 0..2 {
                let plane: Vec<f64> = (0..6).map(|i| v.at(0, c, i / 3, i % 3)).collect();
                let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for i in 0..6 {
                    let out = a.at(0, c, i / 3, i % 3);
                    prop_assert!(out >= lo - 1e-12 && out <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn permuting_positions_permutes_weights_and_outputs(
            x in feature_map(2, 1, 5),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted = Tensor::from_fn(x.shape(), |_, c, _, i| x.at(0, c, 0, perm[i]));
            let wq = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![0.5, -0.3, 0.8, 0.1]).unwrap();
            let wk = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![-0.2, 0.7, 0.4, 0.9]).unwrap();
            let wv = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![1.0, 0.2, -0.5, 0.6]).unwrap();
            let w = AttentionProjections::new(wq, wk, wv).unwrap();
            let run = |x: &Tensor| {
                let (q, k, v) = project_qkv(x, &w).unwrap();
                let s = attention_weights(&q, &k).unwrap();
                let a = attention_output(&v, &s).unwrap();
                (s, a)
            };
            let (s, a) = run(&x);
            let (sp, ap) = run(&permuted);
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert!((sp.get(i, j) - s.get(perm[i], perm[j])).abs() < 1e-12);
                }
                for c in 0..2 {
                    prop_assert!((ap.at(0, c, 0, i) - a.at(0, c, 0, perm[i])).abs() < 1e-12);
                }
            }
        }
    }
}
