//! Central finite-difference checks of the analytic gradients.

use std::cell::RefCell;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::context_forward;
use crate::autograd::{Graph, Var};
use crate::data::{AugmentationConfig, TrainingTriplet};
use crate::disparity::{make_bins, softargmax_var};
use crate::error::Result;
use crate::geometry::Intrinsics;
use crate::losses::{objective as total_objective, photometric_error_var, smoothness_var, ssim_var, warp_var, LossConfig, ObjectiveInputs};
use crate::networks::{BlockKind, Bound, DepthNetConfig, Mode, Model, ModelConfig, PoseNetConfig};
use crate::tensor::{Shape, Tensor};
use crate::trainer::{batch_objective, TrainConfig};

/// Finite-difference step.
pub const STEP: f64 = 1e-4;

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Which input entries to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// A seeded random subset of `count` entries across all inputs.
    Random { count: usize, seed: u64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

/// Relative error used throughout the gradient suite.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Fixed projection weights that turn any output into a scalar objective.
fn projection(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 + ((i as f64 + 1.0) * 0.618_033_988_75).fract())
        .collect()
}

fn objective(out: &Tensor, weights: &[f64]) -> f64 {
    out.data().iter().zip(weights).map(|(o, w)| o * w).sum()
}

/// Compares reverse-mode gradients of `f` with central differences at
/// `inputs`. The output of `f` may have any shape; it is reduced with fixed
/// positive weights.
pub fn check_gradients<F>(inputs: &[Tensor], probe: Probe, f: F) -> GradCheck
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let graph = Graph::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = f(&graph, &leaves);
    let weights = projection(out.shape().numel());
    let w = graph.constant(
        Tensor::from_vec(out.shape(), weights.clone()).expect("projection shape"),
    );
    let loss = out.mul(w).sum();
    let grads = graph.backward(loss);
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut targets: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    if let Probe::Random { count, seed } = probe {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = sample(&mut rng, targets.len(), count.min(targets.len()));
        let mut idx: Vec<usize> = picked.into_iter().collect();
        idx.sort_unstable();
        targets = idx.into_iter().map(|k| targets[k]).collect();
    }

    let eval = |perturbed: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        objective(&f(&g, &vars).value(), &weights)
    };

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, j) in &targets {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + STEP;
        let plus = eval(&work);
        work[i].data_mut()[j] = orig - STEP;
        let minus = eval(&work);
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[i].data()[j];
        max_rel = max_rel.max(relative_error(a, numeric));
        max_abs = max_abs.max((a - numeric).abs());
    }
    GradCheck {
        name: String::new(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        entries: targets.len(),
    }
}

/// One entry of the gradient suite with its tolerance.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    #[serde(flatten)]
    pub check: GradCheck,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.check.max_rel_error < self.tolerance
    }
}

/// Tolerance of the individual kernels.
pub const KERNEL_TOLERANCE: f64 = 1e-4;

/// Tolerance of the assembled objective.
pub const TOTAL_TOLERANCE: f64 = 1e-3;

fn named(name: &str, tolerance: f64, mut check: GradCheck) -> SuiteEntry {
    check.name = name.to_string();
    SuiteEntry { check, tolerance }
}

fn wave(shape: Shape, freq: f64, amp: f64, offset: f64) -> Tensor {
    let (c, h, w) = (shape.c(), shape.h(), shape.w());
    Tensor::from_fn(shape, move |n, ch, y, x| {
        offset + amp * (((n * c + ch) * h * w + y * w + x) as f64 * freq).sin()
    })
}

fn textured(c: usize, h: usize, w: usize, phase: f64) -> Tensor {
    Tensor::from_fn(Shape::new(1, c, h, w), |_, ch, y, x| {
        0.5 + 0.4 * (x as f64 * 0.9 + y as f64 * 0.4 + ch as f64 + phase).sin()
    })
}

/// Gradient checks of every differentiable kernel on tiny instances, then
/// of the assembled objective and of the full training loss through both
/// networks.
pub fn run_suite() -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();

    let x = wave(Shape::new(1, 4, 3, 3), 0.71, 0.8, 0.0);
    let wq = wave(Shape::new(3, 4, 1, 1), 0.37, 0.6, 0.1);
    let wk = wave(Shape::new(3, 4, 1, 1), 0.53, 0.6, -0.1);
    let wv = wave(Shape::new(3, 4, 1, 1), 0.19, 0.6, 0.05);
    out.push(named(
        "attention",
        KERNEL_TOLERANCE,
        check_gradients(&[x, wq, wk, wv], Probe::All, |_, v| {
            context_forward(v[0], Some(v[1]), Some(v[2]), v[3], false).features
        }),
    ));

    let bins = make_bins(6, 0.5, 20.0)?;
    let logits = wave(Shape::new(2, 6, 2, 3), 0.77, 2.0, 0.0);
    out.push(named(
        "softargmax",
        KERNEL_TOLERANCE,
        check_gradients(&[logits], Probe::All, |_, v| softargmax_var(v[0], &bins)),
    ));

    let a = textured(3, 4, 5, 0.0);
    let b = textured(3, 4, 5, 0.7);
    out.push(named(
        "ssim",
        KERNEL_TOLERANCE,
        check_gradients(&[a.clone(), b.clone()], Probe::All, |_, v| ssim_var(v[0], v[1])),
    ));
    out.push(named(
        "photometric_error",
        KERNEL_TOLERANCE,
        check_gradients(&[a, b], Probe::All, |_, v| photometric_error_var(v[0], v[1], 0.85)),
    ));

    let k = Intrinsics::new(20.0, 22.0, 3.5, 2.5, 8, 6)?;
    let source = textured(2, 6, 8, 0.3);
    let depth = Tensor::from_fn(Shape::new(1, 1, 6, 8), |_, _, y, x| 2.0 + 0.1 * x as f64 + 0.05 * y as f64);
    let pose = Tensor::from_vec(Shape::new(1, 6, 1, 1), vec![0.02, -0.01, 0.03, 0.1, -0.05, 0.2])?;
    out.push(named(
        "bilinear_warp",
        KERNEL_TOLERANCE,
        check_gradients(&[source, depth, pose], Probe::All, |_, v| warp_var(v[0], v[1], v[2], &k)),
    ));

    // Differences stay away from zero so |.| is smooth at every probe.
    let d = Tensor::from_fn(Shape::new(2, 1, 4, 5), |n, _, y, x| {
        1.0 + 0.1 * x as f64 + 0.07 * y as f64 + 0.02 * ((n * 20 + y * 5 + x) as f64).sin()
    });
    let img = Tensor::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| {
        0.1 + 0.12 * x as f64 + 0.09 * y as f64 + 0.01 * ((n * 60 + c * 20 + y * 5 + x) as f64).cos()
    });
    out.push(named(
        "smoothness",
        KERNEL_TOLERANCE,
        check_gradients(&[d, img], Probe::All, |_, v| smoothness_var(v[0], v[1])),
    ));

    let (h, w) = (6, 8);
    let k = Intrinsics::new(6.0, 6.0, 3.5, 2.5, w, h)?;
    let target = textured(3, h, w, 0.0);
    let sources = vec![textured(3, h, w, 0.5), textured(3, h, w, -0.4)];
    let disp = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| 0.4 + 0.05 * ((y + 2 * x) as f64).sin());
    let pose_a = Tensor::from_vec(Shape::new(1, 6, 1, 1), vec![0.01, -0.02, 0.015, 0.1, 0.02, -0.03])?;
    let pose_b = Tensor::from_vec(Shape::new(1, 6, 1, 1), vec![-0.02, 0.01, 0.0, -0.12, 0.01, 0.02])?;
    let cfg = LossConfig::default();
    let failure = RefCell::new(None);
    let check = check_gradients(&[disp, pose_a, pose_b], Probe::All, |g, v| {
        let disparities = [v[0], v[0].scale(1.1)];
        let poses = [v[1], v[2]];
        let inputs = ObjectiveInputs {
            target: &target,
            sources: &sources,
            poses: &poses,
            disparities: &disparities,
            intrinsics: &k,
            identity_noise: None,
            disable_automask: true,
        };
        total_objective(&inputs, &cfg).map(|o| o.0).unwrap_or_else(|e| {
            failure.borrow_mut().get_or_insert(e);
            g.constant(Tensor::scalar(f64::NAN))
        })
    });
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    out.push(named("objective", TOTAL_TOLERANCE, check));

    out.push(named("total_loss", TOTAL_TOLERANCE, network_loss_check()?));
    Ok(out)
}

/// A network small enough for finite differences over its parameters.
pub(crate) fn tiny_model_config() -> ModelConfig {
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

pub(crate) fn tiny_triplets(count: usize) -> Vec<TrainingTriplet> {
    let frame = |t: f64| {
        Tensor::from_fn(Shape::new(1, 3, 16, 24), move |_, c, y, x| {
            let u = x as f64 + t;
            0.5 + 0.3 * (u * 0.7 + y as f64 * 0.4 + c as f64).sin() * (y as f64 * 0.3 - u * 0.2).cos()
        })
    };
    (0..count)
        .map(|i| TrainingTriplet {
            frames: [frame(i as f64), frame(i as f64 + 0.6), frame(i as f64 + 1.2)],
            intrinsics: Intrinsics::new(15.0, 15.0, 11.5, 7.5, 24, 16).expect("valid intrinsics"),
            sequence: "tiny".into(),
            index: i + 1,
        })
        .collect()
}

/// Moves the model away from two kinks of the initialization: the zero pose
/// head puts every warp sample exactly on a pixel centre, and the nearly
/// uniform disparity leaves neighbour differences inside the finite
/// difference step of the smoothness `|·|`.
pub(crate) fn off_kinks(mut model: Model) -> Model {
    for name in ["pose.head.weight", "pose.head.bias"] {
        if let Some(t) = model.params.get_mut(name) {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.3 * ((i as f64 + 1.0) * 1.7).sin();
            }
        }
    }
    for s in 1..=4 {
        if let Some(t) = model.params.get_mut(&format!("decoder.ddv{s}.weight")) {
            t.map_inplace(|v| v * 20.0);
        }
    }
    model
}

/// Training loss through both networks against 16 random parameters. The
/// automask is a hard gate; a perturbation that flips one pixel makes the
/// loss jump, so the masks are fixed to one.
pub fn network_loss_check() -> Result<GradCheck> {
    let cfg = TrainConfig {
        model: tiny_model_config(),
        batch_size: 2,
        augmentation: AugmentationConfig::disabled(),
        ..TrainConfig::desk()
    };
    let model = off_kinks(Model::new(cfg.model.clone(), 5)?);
    let batch: Vec<_> = tiny_triplets(2).into_iter().map(|t| (t.clone(), t)).collect();
    let failure = RefCell::new(None);
    let check = check_gradients(model.params.tensors(), Probe::Random { count: 16, seed: 9 }, |g, vars| {
        let bound = Bound::from_vars(vars.to_vec(), &model.params);
        match batch_objective(g, &bound, &model, &batch, &cfg, Mode::Train, false) {
            Ok(o) => o.0,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                g.constant(Tensor::scalar(f64::NAN))
            }
        }
    });
    match failure.into_inner() {
        Some(e) => Err(e),
        None => Ok(check),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_ops_pass() {
        let a = Tensor::from_fn(Shape::new(1, 2, 2, 3), |_, c, y, x| 0.3 + 0.2 * (c + y + x) as f64);
        let b = Tensor::from_fn(Shape::new(1, 2, 1, 1), |_, c, _, _| 1.5 + c as f64);
        let r = check_gradients(&[a, b], Probe::All, |_, v| {
            let x = v[0].mul(v[1]).exp().add(v[0].div(v[1]));
            x.sigmoid().add(x.ln()).elu().add(v[0].sqrt().square().recip())
        });
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn spatial_ops_pass() {
        let x = Tensor::from_fn(Shape::new(2, 2, 4, 5), |n, c, y, x| {
            ((n * 40 + c * 20 + y * 5 + x) as f64 * 0.37).sin()
        });
        let w = Tensor::from_fn(Shape::new(3, 2, 3, 3), |o, i, y, x| {
            ((o * 18 + i * 9 + y * 3 + x) as f64 * 0.53).cos() * 0.3
        });
        let bias = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.1, -0.2, 0.05]).unwrap();
        let gamma = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![1.1, 0.9, 1.3]).unwrap();
        let beta = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.0, 0.1, -0.1]).unwrap();
        use crate::autograd::Conv2dOptions;
        let r = check_gradients(&[x, w, bias, gamma, beta], Probe::All, |_, v| {
            let y = v[0].conv2d(v[1], Some(v[2]), Conv2dOptions::same(3, 1, 2));
            let (y, _) = y.batch_norm(v[3], v[4], 1e-5);
            let y = y.elu().upsample_nearest2x().avg_pool3_reflect();
            let z = y.resize_bilinear(5, 7).mean_channels();
            z.diff_x().square().sum().add(z.diff_y().abs().mean())
        });
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn strided_conv_and_pool_pass() {
        let x = Tensor::from_fn(Shape::new(1, 2, 6, 7), |_, c, y, x| {
            ((c * 42 + y * 7 + x) as f64 * 0.91).sin()
        });
        let w = Tensor::from_fn(Shape::new(2, 2, 3, 3), |o, i, y, x| {
            ((o * 18 + i * 9 + y * 3 + x) as f64 * 0.29).cos() * 0.5
        });
        use crate::autograd::Conv2dOptions;
        let r = check_gradients(&[x, w], Probe::All, |_, v| {
            v[0].conv2d(v[1], None, Conv2dOptions::same(3, 2, 1)).max_pool2d(3, 2, 1)
        });
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn matmul_and_softmax_pass() {
        let a = Tensor::from_fn(Shape::new(2, 1, 3, 4), |n, _, y, x| ((n * 12 + y * 4 + x) as f64 * 0.7).sin());
        let b = Tensor::from_fn(Shape::new(2, 1, 3, 5), |n, _, y, x| ((n * 15 + y * 5 + x) as f64 * 0.3).cos());
        for (ta, tb) in [(true, false), (false, true), (true, true), (false, false)] {
            let (a_in, b_in) = match (ta, tb) {
                (true, false) => (a.clone(), b.clone()),
                (false, true) => (
                    a.clone().reshape(Shape::new(2, 1, 4, 3)).unwrap(),
                    b.clone().reshape(Shape::new(2, 1, 5, 3)).unwrap(),
                ),
                (true, true) => (a.clone(), b.clone().reshape(Shape::new(2, 1, 5, 3)).unwrap()),
                (false, false) => (a.clone().reshape(Shape::new(2, 1, 4, 3)).unwrap(), b.clone()),
            };
            let r = check_gradients(&[a_in, b_in], Probe::All, move |_, v| {
                v[0].matmul(v[1], ta, tb).softmax_rows()
            });
            assert!(r.max_rel_error < 1e-6, "{ta} {tb}: {r:?}");
        }
    }

    #[test]
    fn random_probe_limits_entries() {
        let x = Tensor::from_fn(Shape::new(1, 1, 10, 10), |_, _, y, x| (y * 10 + x) as f64 * 0.01);
        let r = check_gradients(&[x], Probe::Random { count: 16, seed: 3 }, |_, v| v[0].square());
        assert_eq!(r.entries, 16);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn suite_passes() {
        let suite = run_suite().unwrap();
        assert_eq!(suite.len(), 8);
        for e in &suite {
            assert!(e.passed(), "{e:?}");
        }
    }
}
