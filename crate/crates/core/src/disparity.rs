//! Discrete disparity volumes: per-pixel logits over a fixed set of disparity
//! bins, collapsed to a disparity map by softargmax. The spread of the same
//! per-pixel distribution gives a variance-based uncertainty.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// How bin disparities are laid out between `1/max_depth` and `1/min_depth`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinSpacing {
    #[default]
    LinearDisparity,
    LinearLogDepth,
}

/// Strictly increasing, positive disparity value of each bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityBins {
    values: Vec<f64>,
}

impl DisparityBins {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid("need at least two disparity bins"));
        }
        if values[0] <= 0.0 || values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("bin disparities must be positive and strictly increasing"));
        }
        Ok(DisparityBins { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// `k` bins linearly spaced in disparity over `[1/max_depth, 1/min_depth]`.
pub fn make_bins(k: usize, min_depth: f64, max_depth: f64) -> Result<DisparityBins> {
    make_bins_with(k, min_depth, max_depth, BinSpacing::LinearDisparity)
}

pub fn make_bins_with(
    k: usize,
    min_depth: f64,
    max_depth: f64,
    spacing: BinSpacing,
) -> Result<DisparityBins> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least two bins, got {k}")));
    }
    if !(min_depth > 0.0 && min_depth < max_depth && max_depth.is_finite()) {
        return Err(Error::invalid(format!(
            "need 0 < min_depth < max_depth, got {min_depth} and {max_depth}"
        )));
    }
    let last = (k - 1) as f64;
    let values = match spacing {
        BinSpacing::LinearDisparity => {
            let (lo, hi) = (1.0 / max_depth, 1.0 / min_depth);
            (0..k)
                .map(|i| {
                    if i == k - 1 {
                        hi
                    } else {
                        lo + (hi - lo) * i as f64 / last
                    }
                })
                .collect()
        }
        BinSpacing::LinearLogDepth => {
            let (lo, hi) = (max_depth.ln(), min_depth.ln());
            (0..k)
                .map(|i| 1.0 / (lo + (hi - lo) * i as f64 / last).exp())
                .collect()
        }
    };
    DisparityBins::new(values)
}

/// `[n, K, h, w]` logits paired with their bins.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityVolume {
    pub logits: Tensor,
    pub bins: DisparityBins,
}

impl DisparityVolume {
    pub fn new(logits: Tensor, bins: DisparityBins) -> Result<Self> {
        if logits.shape().c() != bins.len() {
            return Err(Error::invalid(format!(
                "volume has {} channels but {} bins",
                logits.shape().c(),
                bins.len()
            )));
        }
        if !logits.all_finite() {
            return Err(Error::invalid("disparity logits must be finite"));
        }
        Ok(DisparityVolume { logits, bins })
    }

    /// Per-pixel softmax probabilities, same layout as the logits.
    pub fn probabilities(&self) -> Tensor {
        let [n, k, h, w] = self.logits.dims();
        let plane = h * w;
        let mut out = Tensor::zeros(self.logits.shape());
        let mut buf = vec![0.0; k];
        for b in 0..n {
            for i in 0..plane {
                let base = b * k * plane + i;
                for (j, slot) in buf.iter_mut().enumerate() {
                    *slot = self.logits.data()[base + j * plane];
                }
                crate::autograd::softmax_in_place(&mut buf);
                for (j, &p) in buf.iter().enumerate() {
                    out.data_mut()[base + j * plane] = p;
                }
            }
        }
        out
    }

    /// First two moments of the per-pixel bin distribution.
    fn moments(&self) -> (Tensor, Tensor) {
        let probs = self.probabilities();
        let [n, k, h, w] = probs.dims();
        let plane = h * w;
        let bins = self.bins.values();
        let mut mean = Tensor::zeros(Shape::new(n, 1, h, w));
        let mut second = Tensor::zeros(Shape::new(n, 1, h, w));
        for b in 0..n {
            for i in 0..plane {
                let (mut m1, mut m2) = (0.0, 0.0);
                for (j, &d) in bins.iter().enumerate() {
                    let p = probs.data()[b * k * plane + j * plane + i];
                    m1 += p * d;
                    m2 += p * d * d;
                }
                mean.data_mut()[b * plane + i] = m1;
                second.data_mut()[b * plane + i] = m2;
            }
        }
        (mean, second)
    }
}

/// Expected disparity under the per-pixel softmax, `[n, 1, h, w]`.
pub fn softargmax(volume: &DisparityVolume) -> Tensor {
    volume.moments().0
}

/// Per-pixel variance of the bin distribution in squared disparity units,
/// floored at zero.
pub fn uncertainty(volume: &DisparityVolume) -> Tensor {
    let (mean, second) = volume.moments();
    second.zip_map(&mean, |m2, m1| (m2 - m1 * m1).max(0.0))
}

pub fn disparity_to_depth(disparity: &Tensor) -> Tensor {
    disparity.map(|d| 1.0 / d)
}

/// Differentiable softargmax of `[n, K, h, w]` logits.
pub fn softargmax_var<'g>(logits: Var<'g>, bins: &DisparityBins) -> Var<'g> {
    let x = logits.value();
    let volume = DisparityVolume {
        logits: (*x).clone(),
        bins: bins.clone(),
    };
    assert_eq!(x.shape().c(), bins.len(), "softargmax: bin count mismatch");
    let probs = volume.probabilities();
    let out = softargmax(&volume);
    let sigma = out.clone();
    let bins = bins.values().to_vec();
    logits
        .graph()
        .push(out, &[logits], move |g: &Tensor, _: &[bool]| {
            // d sigma / d l_k = p_k (d_k - sigma)
            let [n, k, h, w] = probs.dims();
            let plane = h * w;
            let mut gx = Tensor::zeros(probs.shape());
            for b in 0..n {
                for i in 0..plane {
                    let gv = g.data()[b * plane + i];
                    let s = sigma.data()[b * plane + i];
                    for (j, &d) in bins.iter().enumerate().take(k) {
                        let idx = b * k * plane + j * plane + i;
                        gx.data_mut()[idx] = gv * probs.data()[idx] * (d - s);
                    }
                }
            }
            vec![Some(gx)]
        })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::gradcheck::{check_gradients, Probe};

    fn volume(logits: &[f64], bins: &[f64]) -> DisparityVolume {
        let k = logits.len();
        DisparityVolume::new(
            Tensor::from_vec(Shape::new(1, k, 1, 1), logits.to_vec()).unwrap(),
            DisparityBins::new(bins.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn bin_endpoints_and_midpoint() {
        assert_eq!(make_bins(2, 1.0, 10.0).unwrap().values(), &[0.1, 1.0]);
        let three = make_bins(3, 1.0, 10.0).unwrap();
        assert_abs_diff_eq!(three.values()[1], 0.55, epsilon = 1e-15);
        let full = make_bins(128, 0.1, 100.0).unwrap();
        assert_abs_diff_eq!(full.min(), 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(full.max(), 10.0, epsilon = 1e-15);
        assert_eq!(full.len(), 128);
    }

    #[test]
    fn log_depth_spacing_hits_endpoints() {
        let b = make_bins_with(5, 1.0, 16.0, BinSpacing::LinearLogDepth).unwrap();
        assert_abs_diff_eq!(b.min(), 1.0 / 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.values()[2], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(b.max(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_bin_requests_are_rejected() {
        assert!(make_bins(1, 1.0, 10.0).is_err());
        assert!(make_bins(4, 0.0, 10.0).is_err());
        assert!(make_bins(4, 10.0, 1.0).is_err());
        assert!(DisparityBins::new(vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn softargmax_hand_values() {
        let bins = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(softargmax(&volume(&[0.0; 4], &bins)).item(), 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(
            softargmax(&volume(&[0.0, 0.0, 50.0, 0.0], &bins)).item(),
            3.0,
            epsilon = 1e-6
        );
        let v = volume(&[0.0, 2f64.ln(), 0.0, 0.0], &bins);
        let p = v.probabilities();
        for (got, want) in p.data().iter().zip([0.2, 0.4, 0.2, 0.2]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(softargmax(&v).item(), 2.4, epsilon = 1e-12);
    }

    #[test]
    fn uncertainty_hand_values() {
        let bins = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(uncertainty(&volume(&[0.0; 4], &bins)).item(), 1.25, epsilon = 1e-12);
        let v = volume(&[0.0, 2f64.ln(), 0.0, 0.0], &bins);
        assert_abs_diff_eq!(uncertainty(&v).item(), 1.04, epsilon = 1e-12);
        let point = volume(&[0.0, 0.0, 800.0, 0.0], &bins);
        assert_abs_diff_eq!(uncertainty(&point).item(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn depth_conversion() {
        let d = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.1, 0.01]).unwrap();
        let depth = disparity_to_depth(&d);
        assert_abs_diff_eq!(depth.data()[0], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(depth.data()[1], 100.0, epsilon = 1e-12);
    }

    #[test]
    fn mismatched_volume_is_rejected() {
        let bins = make_bins(4, 1.0, 10.0).unwrap();
        assert!(DisparityVolume::new(Tensor::zeros(Shape::new(1, 3, 2, 2)), bins.clone()).is_err());
        let bad = Tensor::full(Shape::new(1, 4, 1, 1), f64::NAN);
        assert!(DisparityVolume::new(bad, bins).is_err());
    }

    #[test]
    fn softargmax_gradient_matches_finite_differences() {
        let bins = make_bins(6, 0.5, 20.0).unwrap();
        let logits = Tensor::from_fn(Shape::new(2, 6, 2, 3), |n, k, y, x| {
            ((n * 36 + k * 6 + y * 3 + x) as f64 * 0.77).sin() * 2.0
        });
        let r = check_gradients(&[logits], Probe::All, move |_, v| softargmax_var(v[0], &bins));
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    proptest! {
        #[test]
        fn output_stays_within_bins_and_ignores_shifts(
            logits in proptest::collection::vec(-20.0f64..20.0, 5),
            shift in -100.0f64..100.0,
        ) {
            let bins = [0.1, 0.3, 0.35, 0.9, 2.0];
            let v = volume(&logits, &bins);
            let s = softargmax(&v).item();
            prop_assert!(s >= 0.1 - 1e-12 && s <= 2.0 + 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            prop_assert!((softargmax(&volume(&shifted, &bins)).item() - s).abs() < 1e-9);
            let var = uncertainty(&v).item();
            prop_assert!(var >= 0.0 && var <= ((2.0f64 - 0.1) / 2.0).powi(2) + 1e-12);
        }

        #[test]
        fn sharpened_logits_approach_the_argmax_bin(
            logits in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            let mut sorted = logits.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(sorted[0] - sorted[1] >= 0.5);
            let bins = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2];
            let argmax = logits.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            let sharp: Vec<f64> = logits.iter().map(|l| l * 50.0).collect();
            prop_assert!((softargmax(&volume(&sharp, &bins)).item() - bins[argmax]).abs() < 1e-3);
        }
    }
}
