//! Joint optimization of the depth and pose networks.

mod adam;
mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchNormStats, Graph, Var};
use crate::data::{augment, ensure_parent, filter_static, load_triplets, TrainingTriplet};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_split, load_eval_split, DepthMetrics, EvalSample};
use crate::losses::{objective, LossBreakdown, ObjectiveInputs};
use crate::networks::{depth_forward, pose_forward, Archive, Bound, Mode, Model};
use crate::tensor::{Shape, Tensor};

pub use adam::{Adam, AdamHyper};
pub use config::{lr_schedule, Preset, TrainConfig};

/// Salt separating the augmentation stream from other seeded streams.
const AUGMENT_SALT: u64 = 0x6175_676d;

/// Parameters, optimizer moments and counters.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Counters {
    epoch: usize,
    step: u64,
    adam: AdamHyper,
}

impl TrainState {
    /// Fresh model seeded by `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(model.params.tensors(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Ok(Self {
            model,
            adam,
            epoch: 0,
            step: 0,
        })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = self.model.to_archive()?;
        for (prefix, moments) in [("adam_m", &self.adam.m), ("adam_v", &self.adam.v)] {
            for (name, t) in self.model.params.names().iter().zip(moments) {
                a.tensors.insert(format!("{prefix}/{name}"), t.clone());
            }
        }
        let counters = Counters {
            epoch: self.epoch,
            step: self.step,
            adam: self.adam.hyper(),
        };
        a.metadata.insert("train_state".into(), serde_json::to_string(&counters)?);
        Ok(a)
    }

    /// Restores a training checkpoint. Archives without optimizer state
    /// resume with fresh moments.
    pub fn from_archive(a: &Archive, cfg: &TrainConfig) -> Result<Self> {
        let model = Model::from_archive(a)?;
        let mut adam = Adam::new(model.params.tensors(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let Some(json) = a.metadata.get("train_state") else {
            return Ok(Self {
                model,
                adam,
                epoch: 0,
                step: 0,
            });
        };
        let c: Counters =
            serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("bad train_state: {e}")))?;
        for (prefix, moments) in [("adam_m", &mut adam.m), ("adam_v", &mut adam.v)] {
            for (name, slot) in model.params.names().iter().zip(moments.iter_mut()) {
                let t = a
                    .tensors
                    .get(&format!("{prefix}/{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}/{name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("{prefix}/{name} has shape {}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        adam.beta1 = c.adam.beta1;
        adam.beta2 = c.adam.beta2;
        adam.eps = c.adam.eps;
        adam.t = c.adam.t;
        Ok(Self {
            model,
            adam,
            epoch: c.epoch,
            step: c.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, cfg)
    }
}

/// Network input and loss target of one sample.
pub type AugmentedPair = (TrainingTriplet, TrainingTriplet);

/// Item `b` of a batched variable.
fn narrow_batch<'g>(v: Var<'g>, b: usize) -> Var<'g> {
    let [n, c, h, w] = v.shape().0;
    if n == 1 {
        return v;
    }
    v.reshape(Shape::new(1, n * c, h, w))
        .narrow_channels(b * c, c)
        .reshape(Shape::new(1, c, h, w))
}

fn stack(frames: impl Iterator<Item = Tensor>) -> Result<Tensor> {
    Tensor::stack(&frames.collect::<Vec<_>>())
}

fn average_breakdowns(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    let mean_vec = |f: fn(&LossBreakdown) -> &Vec<f64>| {
        let len = f(&items[0]).len();
        (0..len)
            .map(|i| items.iter().map(|b| f(b)[i]).sum::<f64>() / n)
            .collect()
    };
    LossBreakdown {
        total: mean(|b| b.total),
        photometric: mean(|b| b.photometric),
        smoothness: mean(|b| b.smoothness),
        lambda: items[0].lambda,
        per_scale_photometric: mean_vec(|b| &b.per_scale_photometric),
        mask_density: mean_vec(|b| &b.mask_density),
    }
}

/// Differentiable objective of a batch with parameters bound to `bound`.
/// Returns the mean loss over items, its breakdown and batch statistics.
/// `automask = false` replaces the masks with ones, which makes the
/// objective continuous in the parameters.
pub fn batch_objective<'g>(
    graph: &'g Graph,
    bound: &Bound<'g>,
    model: &Model,
    batch: &[AugmentedPair],
    cfg: &TrainConfig,
    mode: Mode,
    automask: bool,
) -> Result<(Var<'g>, LossBreakdown, Vec<(String, BatchNormStats)>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let input = |i: usize| stack(batch.iter().map(|(inp, _)| inp.frames[i].clone()));
    let target_in = graph.constant(input(1)?);
    let depth = depth_forward(&model.config.depth, model.bins(), bound, &model.buffers, target_in, mode)?;
    let poses = [
        pose_forward(&model.config.pose, bound, target_in, graph.constant(input(0)?))?,
        pose_forward(&model.config.pose, bound, target_in, graph.constant(input(2)?))?,
    ];
    let loss_cfg = cfg.loss();
    let mut total: Option<Var> = None;
    let mut parts = Vec::with_capacity(batch.len());
    // Items are assembled separately because flips give them different
    // principal points.
    for (b, (_, target)) in batch.iter().enumerate() {
        let disparities: Vec<Var> = depth.disparities.iter().map(|&d| narrow_batch(d, b)).collect();
        let item_poses = poses.map(|p| narrow_batch(p, b));
        let sources = [target.frames[0].clone(), target.frames[2].clone()];
        let (loss, breakdown) = objective(
            &ObjectiveInputs {
                target: target.target(),
                sources: &sources,
                poses: &item_poses,
                disparities: &disparities,
                intrinsics: &target.intrinsics,
                identity_noise: None,
                disable_automask: !automask,
            },
            &loss_cfg,
        )?;
        total = Some(match total {
            None => loss,
            Some(t) => t.add(loss),
        });
        parts.push(breakdown);
    }
    let total = total.expect("non-empty batch").scale(1.0 / batch.len() as f64);
    let mut breakdown = average_breakdowns(&parts);
    breakdown.total = total.value().item();
    Ok((total, breakdown, depth.bn_stats))
}

struct Evaluated {
    breakdown: LossBreakdown,
    grads: Option<Vec<Tensor>>,
    bn_stats: Vec<(String, BatchNormStats)>,
}

fn batch_loss(model: &Model, batch: &[AugmentedPair], cfg: &TrainConfig, mode: Mode, grads: bool) -> Result<Evaluated> {
    let graph = Graph::new();
    let bound = if grads {
        Bound::leaves(&graph, &model.params)
    } else {
        Bound::constants(&graph, &model.params)
    };
    let (total, breakdown, bn_stats) = batch_objective(&graph, &bound, model, batch, cfg, mode, true)?;
    let grads = grads.then(|| {
        let g = graph.backward(total);
        bound.vars().iter().map(|&v| g.get_or_zeros(v)).collect()
    });
    Ok(Evaluated {
        breakdown,
        grads,
        bn_stats,
    })
}

fn batch_id(batch: &[AugmentedPair]) -> String {
    batch.iter().map(|(t, _)| t.id()).collect::<Vec<_>>().join(",")
}

/// One Adam update of both networks on a batch of augmented pairs.
pub fn train_step(state: &mut TrainState, batch: &[AugmentedPair], cfg: &TrainConfig, lr: f64) -> Result<LossBreakdown> {
    let out = batch_loss(&state.model, batch, cfg, Mode::Train, true)?;
    let grads = out.grads.expect("gradients requested");
    let b = &out.breakdown;
    let bad_grad = grads.iter().position(|g| !g.all_finite());
    if !b.total.is_finite() || bad_grad.is_some() {
        let detail = match bad_grad {
            Some(i) if b.total.is_finite() => {
                format!("gradient of {} is not finite", state.model.params.names()[i])
            }
            _ => format!(
                "total {} (photometric {}, smoothness {})",
                b.total, b.photometric, b.smoothness
            ),
        };
        return Err(Error::NonFiniteLoss {
            step: state.step,
            batch_id: batch_id(batch),
            detail,
        });
    }
    state.adam.step(state.model.params.tensors_mut(), &grads, lr);
    state.model.update_running_stats(&out.bn_stats);
    state.step += 1;
    Ok(out.breakdown)
}

/// Mean loss over triplets without augmentation or updates, in eval mode.
pub fn evaluate_loss(model: &Model, triplets: &[TrainingTriplet], cfg: &TrainConfig) -> Result<LossBreakdown> {
    if triplets.is_empty() {
        return Err(Error::invalid("no triplets to evaluate"));
    }
    let parts = triplets
        .par_chunks(cfg.batch_size)
        .map(|chunk| {
            let pairs: Vec<AugmentedPair> = chunk.iter().map(|t| (t.clone(), t.clone())).collect();
            Ok((batch_loss(model, &pairs, cfg, Mode::Eval, false)?.breakdown, chunk.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    // Weight each batch by its size.
    let expanded: Vec<LossBreakdown> = parts
        .into_iter()
        .flat_map(|(b, n)| std::iter::repeat_n(b, n))
        .collect();
    Ok(average_breakdowns(&expanded))
}

/// Deterministic augmentation of sample `index` in `epoch`.
pub fn augment_sample(t: &TrainingTriplet, cfg: &TrainConfig, epoch: usize, index: usize) -> AugmentedPair {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUGMENT_SALT);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    augment(t, &cfg.augmentation, &mut rng)
}

/// Sample order of an epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Training and validation data.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<TrainingTriplet>,
    pub val: Vec<EvalSample>,
}

impl TrainData {
    /// Loads `cfg.train_split` (static triplets removed) and, when present,
    /// `cfg.val_split` from `root`, resized to the network input.
    pub fn load(root: &Path, cfg: &TrainConfig) -> Result<Self> {
        let size = (cfg.model.depth.input_height, cfg.model.depth.input_width);
        let train = load_triplets(root, &root.join(&cfg.train_split), Some(size))?;
        let before = train.len();
        let train = filter_static(train, cfg.static_threshold);
        log::info!("{} training triplets ({} static dropped)", train.len(), before - train.len());
        let val_path = root.join(&cfg.val_split);
        let val = if val_path.is_file() {
            load_eval_split(root, &val_path, size)?
        } else {
            log::warn!("no validation split at {}", val_path.display());
            Vec::new()
        };
        Ok(Self { train, val })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_photometric: f64,
    pub mean_smoothness: f64,
    pub val: Option<DepthMetrics>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
    Selected { epoch: Option<usize>, abs_rel: Option<f64> },
}

/// Result of [`fit`].
#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// State after the last epoch.
    pub state: TrainState,
    /// Model of the epoch with the lowest validation AbsRel, or the last
    /// epoch without validation data.
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.safetensors";

fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:03}.safetensors"))
}

struct Logger(Option<BufWriter<File>>);

impl Logger {
    fn line(&mut self, l: &LogLine) -> Result<()> {
        if let Some(w) = self.0.as_mut() {
            let text = serde_json::to_string(l)?;
            writeln!(w, "{text}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(LOG_FILE, e))?;
        }
        Ok(())
    }
}

/// Trains from `state` for the remaining epochs. With `out_dir` set, writes
/// line-delimited JSON logs, a checkpoint per epoch and the selected model.
pub fn fit(
    cfg: &TrainConfig,
    data: &TrainData,
    mut state: TrainState,
    out_dir: Option<&Path>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if cfg.epochs > 0 && data.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut log = Logger(match out_dir {
        Some(dir) => {
            let path = dir.join(LOG_FILE);
            ensure_parent(&path)?;
            Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
        }
        None => None,
    });
    let mut best: Option<(f64, usize, Model)> = None;
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let limit = if cfg.max_steps == 0 { u64::MAX } else { cfg.max_steps };

    while state.epoch < cfg.epochs && state.step < limit {
        let epoch = state.epoch;
        let lr = lr_schedule(epoch, cfg);
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let first_step = state.step;
        let mut sums = [0.0; 3];
        for chunk in order.chunks(cfg.batch_size) {
            if state.step >= limit {
                break;
            }
            let batch: Vec<AugmentedPair> = chunk
                .par_iter()
                .map(|&i| augment_sample(&data.train[i], cfg, epoch, i))
                .collect();
            let loss = train_step(&mut state, &batch, cfg, lr)?;
            sums[0] += loss.total;
            sums[1] += loss.photometric;
            sums[2] += loss.smoothness;
            let rec = StepRecord {
                epoch,
                step: state.step,
                lr,
                loss,
            };
            log.line(&LogLine::Step(&rec))?;
            steps.push(rec);
        }
        state.epoch += 1;
        let taken = state.step - first_step;
        let val = if data.val.is_empty() {
            None
        } else {
            Some(evaluate_split(&state.model, &data.val, &cfg.eval)?.mean)
        };
        let checkpoint = match out_dir {
            Some(dir) => {
                let p = checkpoint_path(dir, epoch);
                state.save(&p)?;
                Some(p)
            }
            None => None,
        };
        let score = val.map_or(f64::NEG_INFINITY, |m| m.abs_rel);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s || val.is_none()) {
            best = Some((score, epoch, state.model.clone()));
        }
        let d = taken.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            steps: taken,
            lr,
            mean_total: sums[0] / d,
            mean_photometric: sums[1] / d,
            mean_smoothness: sums[2] / d,
            val,
            checkpoint,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} photometric {:.5}{}",
            rec.mean_total,
            rec.mean_photometric,
            val.map_or(String::new(), |m| format!(" val abs_rel {:.4}", m.abs_rel))
        );
        log.line(&LogLine::Epoch(&rec))?;
        epochs.push(rec);
    }

    let (best_epoch, best_model, best_score) = match best {
        Some((s, e, m)) => (Some(e), m, s.is_finite().then_some(s)),
        None => (None, state.model.clone(), None),
    };
    log.line(&LogLine::Selected {
        epoch: best_epoch,
        abs_rel: best_score,
    })?;
    if let Some(dir) = out_dir {
        best_model.save(&dir.join(BEST_CHECKPOINT))?;
    }
    Ok(FitOutcome {
        state,
        best: best_model,
        best_epoch,
        epochs,
        steps,
    })
}

#[cfg(test)]
mod tests;
