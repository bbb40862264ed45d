//! Layer plans of the depth and pose networks. Parameter specs and forward
//! passes are generated from the same layouts.

use std::cell::RefCell;

use crate::attention::context_forward;
use crate::autograd::{BatchNormStats, Conv2dOptions, Var};
use crate::disparity::{softargmax_var, DisparityBins};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::config::{BlockKind, DepthNetConfig, PoseNetConfig};
use super::params::{Bound, Init, ParamSpec, ParamStore};

const IMAGE_MEAN: f64 = 0.45;
const IMAGE_STD: f64 = 0.225;

/// Batch normalization behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running-statistic updates are collected.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug)]
struct BlockLayout {
    name: String,
    in_ch: usize,
    mid: usize,
    out_ch: usize,
    stride: usize,
    dilation: usize,
    downsample: bool,
}

fn encoder_layout(cfg: &DepthNetConfig) -> Vec<BlockLayout> {
    let strides = [1, 2, 1, 1];
    let mut in_ch = cfg.stem_widths[2];
    let mut blocks = Vec::new();
    for stage in 0..4 {
        let out_ch = cfg.encoder_widths[stage];
        let mid = match cfg.block {
            BlockKind::Basic => out_ch,
            BlockKind::Bottleneck => out_ch / 4,
        };
        for b in 0..cfg.stage_blocks[stage] {
            let stride = if b == 0 { strides[stage] } else { 1 };
            blocks.push(BlockLayout {
                name: format!("encoder.layer{}.{b}", stage + 1),
                in_ch,
                mid,
                out_ch,
                stride,
                dilation: cfg.dilations[stage],
                downsample: stride != 1 || in_ch != out_ch,
            });
            in_ch = out_ch;
        }
    }
    blocks
}

/// Channel count entering the last block of stage `stage` (0-based), or the
/// stem width when the stage is empty.
fn stage_output_channels(cfg: &DepthNetConfig, stage: usize) -> usize {
    (0..=stage)
        .rev()
        .find(|&s| cfg.stage_blocks[s] > 0)
        .map_or(cfg.stem_widths[2], |s| cfg.encoder_widths[s])
}

#[derive(Default)]
struct Specs(Vec<ParamSpec>);

impl Specs {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        let fan_in = cin * k * k;
        self.0.push(ParamSpec::new(
            format!("{name}.weight"),
            Shape::new(cout, cin, k, k),
            Init::Uniform { fan_in },
        ));
        if bias {
            self.0.push(ParamSpec::new(format!("{name}.bias"), Shape::new(1, cout, 1, 1), Init::Zeros));
        }
    }

    fn bn(&mut self, name: &str, c: usize) {
        let shape = Shape::new(1, c, 1, 1);
        self.0.push(ParamSpec::new(format!("{name}.weight"), shape, Init::Ones));
        self.0.push(ParamSpec::new(format!("{name}.bias"), shape, Init::Zeros));
    }
}

fn depth_specs(cfg: &DepthNetConfig) -> (Vec<ParamSpec>, Vec<ParamSpec>) {
    let mut p = Specs::default();
    let mut bns: Vec<(String, usize)> = Vec::new();
    let mut bn = |p: &mut Specs, name: String, c: usize| {
        p.bn(&name, c);
        bns.push((name, c));
    };
    let [s1, s2, s3] = cfg.stem_widths;
    p.conv("encoder.conv1", 3, s1, 3, false);
    bn(&mut p, "encoder.bn1".into(), s1);
    p.conv("encoder.conv2", s1, s2, 3, false);
    bn(&mut p, "encoder.bn2".into(), s2);
    p.conv("encoder.conv3", s2, s3, 3, false);
    bn(&mut p, "encoder.bn3".into(), s3);
    for b in encoder_layout(cfg) {
        match cfg.block {
            BlockKind::Basic => {
                p.conv(&format!("{}.conv1", b.name), b.in_ch, b.mid, 3, false);
                bn(&mut p, format!("{}.bn1", b.name), b.mid);
                p.conv(&format!("{}.conv2", b.name), b.mid, b.out_ch, 3, false);
                bn(&mut p, format!("{}.bn2", b.name), b.out_ch);
            }
            BlockKind::Bottleneck => {
                p.conv(&format!("{}.conv1", b.name), b.in_ch, b.mid, 1, false);
                bn(&mut p, format!("{}.bn1", b.name), b.mid);
                p.conv(&format!("{}.conv2", b.name), b.mid, b.mid, 3, false);
                bn(&mut p, format!("{}.bn2", b.name), b.mid);
                p.conv(&format!("{}.conv3", b.name), b.mid, b.out_ch, 1, false);
                bn(&mut p, format!("{}.bn3", b.name), b.out_ch);
            }
        }
        if b.downsample {
            p.conv(&format!("{}.downsample.conv", b.name), b.in_ch, b.out_ch, 1, false);
            bn(&mut p, format!("{}.downsample.bn", b.name), b.out_ch);
        }
    }
    let m = stage_output_channels(cfg, 3);
    let n = cfg.attention_channels;
    if cfg.use_attention {
        p.conv("context.query", m, n, 1, false);
        p.conv("context.key", m, n, 1, false);
    }
    p.conv("context.value", m, n, 1, false);

    let [d3, d2, d1] = cfg.decoder_widths;
    let skip4 = stage_output_channels(cfg, 0);
    let head = |p: &mut Specs, scale: usize, cin: usize| {
        if cfg.use_ddv {
            p.conv(&format!("decoder.ddv{scale}"), cin, cfg.ddv_bins, 3, true);
        } else {
            p.conv(&format!("decoder.disp{scale}"), cin, 1, 3, true);
        }
    };
    head(&mut p, 4, n);
    p.conv("decoder.upconv3", n, d3, 3, true);
    p.conv("decoder.deconv3", d3 + skip4, d3, 3, true);
    head(&mut p, 3, d3);
    p.conv("decoder.upconv2", d3, d2, 3, true);
    p.conv("decoder.deconv2", d2 + s3, d2, 3, true);
    head(&mut p, 2, d2);
    p.conv("decoder.upconv1", d2, d1, 3, true);
    p.conv("decoder.deconv1", d1, d1, 3, true);
    head(&mut p, 1, d1);

    let buffers = bns
        .into_iter()
        .flat_map(|(name, c)| {
            let shape = Shape::new(1, c, 1, 1);
            [
                ParamSpec::new(format!("{name}.running_mean"), shape, Init::Zeros),
                ParamSpec::new(format!("{name}.running_var"), shape, Init::Ones),
            ]
        })
        .collect();
    (p.0, buffers)
}

fn pose_specs(cfg: &PoseNetConfig) -> Vec<ParamSpec> {
    let mut p = Specs::default();
    let mut cin = 6;
    for (i, &w) in cfg.widths.iter().enumerate() {
        p.conv(&format!("pose.conv{}", i + 1), cin, w, 3, true);
        cin = w;
    }
    p.0.push(ParamSpec::new("pose.head.weight", Shape::new(6, cin, 1, 1), Init::Zeros));
    p.0.push(ParamSpec::new("pose.head.bias", Shape::new(1, 6, 1, 1), Init::Zeros));
    p.0
}

/// Trainable parameters of the depth network.
pub fn depth_param_specs(cfg: &DepthNetConfig) -> Vec<ParamSpec> {
    depth_specs(cfg).0
}

/// Batch-normalization running statistics of the depth network.
pub fn depth_buffer_specs(cfg: &DepthNetConfig) -> Vec<ParamSpec> {
    depth_specs(cfg).1
}

pub fn pose_param_specs(cfg: &PoseNetConfig) -> Vec<ParamSpec> {
    pose_specs(cfg)
}

/// Exact trainable-parameter count of the depth network.
pub fn count_parameters(cfg: &DepthNetConfig) -> usize {
    depth_param_specs(cfg).iter().map(|s| s.shape.numel()).sum()
}

struct Ctx<'a, 'g> {
    p: &'a Bound<'g>,
    buffers: &'a ParamStore,
    mode: Mode,
    eps: f64,
    stats: RefCell<Vec<(String, BatchNormStats)>>,
}

impl<'g> Ctx<'_, 'g> {
    fn conv(&self, x: Var<'g>, name: &str, opts: Conv2dOptions, bias: bool) -> Var<'g> {
        let w = self.p.get(&format!("{name}.weight"));
        let b = bias.then(|| self.p.get(&format!("{name}.bias")));
        x.conv2d(w, b, opts)
    }

    fn bn(&self, x: Var<'g>, name: &str) -> Var<'g> {
        let gamma = self.p.get(&format!("{name}.weight"));
        let beta = self.p.get(&format!("{name}.bias"));
        match self.mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm(gamma, beta, self.eps);
                self.stats.borrow_mut().push((name.to_string(), stats));
                y
            }
            Mode::Eval => {
                let buffer = |suffix: &str| {
                    self.buffers
                        .get(&format!("{name}.{suffix}"))
                        .unwrap_or_else(|| panic!("missing buffer {name}.{suffix}"))
                };
                let mean = buffer("running_mean");
                let inv_std = buffer("running_var").map(|v| 1.0 / (v + self.eps).sqrt());
                let g = x.graph();
                x.sub(g.constant(mean.clone()))
                    .mul(g.constant(inv_std))
                    .mul(gamma)
                    .add(beta)
            }
        }
    }

    fn residual_block(&self, x: Var<'g>, b: &BlockLayout, kind: BlockKind) -> Var<'g> {
        let n = &b.name;
        let branch = match kind {
            BlockKind::Basic => {
                let y = self.conv(x, &format!("{n}.conv1"), Conv2dOptions::same(3, b.stride, b.dilation), false);
                let y = self.bn(y, &format!("{n}.bn1")).relu();
                let y = self.conv(y, &format!("{n}.conv2"), Conv2dOptions::same(3, 1, b.dilation), false);
                self.bn(y, &format!("{n}.bn2"))
            }
            BlockKind::Bottleneck => {
                let y = self.conv(x, &format!("{n}.conv1"), Conv2dOptions::default(), false);
                let y = self.bn(y, &format!("{n}.bn1")).relu();
                let y = self.conv(y, &format!("{n}.conv2"), Conv2dOptions::same(3, b.stride, b.dilation), false);
                let y = self.bn(y, &format!("{n}.bn2")).relu();
                let y = self.conv(y, &format!("{n}.conv3"), Conv2dOptions::default(), false);
                self.bn(y, &format!("{n}.bn3"))
            }
        };
        let shortcut = if b.downsample {
            let opts = Conv2dOptions {
                stride: b.stride,
                ..Conv2dOptions::default()
            };
            let s = self.conv(x, &format!("{n}.downsample.conv"), opts, false);
            self.bn(s, &format!("{n}.downsample.bn"))
        } else {
            x
        };
        branch.add(shortcut).relu()
    }
}

/// Differentiable outputs of the depth network. Scales are ordered coarse to
/// fine: 1/8, 1/4, 1/2, 1/1.
pub struct DepthOutput<'g> {
    /// `[n, 1, H, W]` disparity per scale at input resolution.
    pub disparities: Vec<Var<'g>>,
    /// `[n, 1, h_s, w_s]` disparity per scale at native resolution.
    pub raw: Vec<Var<'g>>,
    /// `[n, K, h_s, w_s]` DDV logits per scale; empty with the DDV disabled.
    pub logits: Vec<Var<'g>>,
    /// `[n, 1, P, P]` attention weights of the context module.
    pub attention: Option<Var<'g>>,
    /// Batch statistics per normalization layer (training mode only).
    pub bn_stats: Vec<(String, BatchNormStats)>,
}

/// Runs the depth network on `[n, 3, H, W]` images in `[0, 1]`.
pub fn depth_forward<'g>(
    cfg: &DepthNetConfig,
    bins: &DisparityBins,
    params: &Bound<'g>,
    buffers: &ParamStore,
    image: Var<'g>,
    mode: Mode,
) -> Result<DepthOutput<'g>> {
    let [_, c, h, w] = image.shape().0;
    if c != 3 || h != cfg.input_height || w != cfg.input_width {
        return Err(Error::invalid(format!(
            "depth network expects [n, 3, {}, {}] images, got {}",
            cfg.input_height,
            cfg.input_width,
            image.shape()
        )));
    }
    let ctx = Ctx {
        p: params,
        buffers,
        mode,
        eps: cfg.bn_eps,
        stats: RefCell::new(Vec::new()),
    };
    let x = image.add_scalar(-IMAGE_MEAN).scale(1.0 / IMAGE_STD);

    let x = ctx.conv(x, "encoder.conv1", Conv2dOptions::same(3, 1, 1), false);
    let x = ctx.bn(x, "encoder.bn1").relu();
    let x = ctx.conv(x, "encoder.conv2", Conv2dOptions::same(3, 2, 1), false);
    let x = ctx.bn(x, "encoder.bn2").relu();
    let x = ctx.conv(x, "encoder.conv3", Conv2dOptions::same(3, 1, 1), false);
    let half = ctx.bn(x, "encoder.bn3").relu();
    let mut x = half.max_pool2d(3, 2, 1);
    let mut quarter = x;
    for b in encoder_layout(cfg) {
        x = ctx.residual_block(x, &b, cfg.block);
        if b.name.starts_with("encoder.layer1.") {
            quarter = x;
        }
    }

    let context = context_forward(
        x,
        cfg.use_attention.then(|| params.get("context.query.weight")),
        cfg.use_attention.then(|| params.get("context.key.weight")),
        params.get("context.value.weight"),
        cfg.scale_scores,
    );
    let a = context.features;

    let (b0, b1) = (bins.min(), bins.max());
    let mut logits = Vec::new();
    let mut raw = Vec::new();
    let mut head = |feat: Var<'g>, scale: usize| {
        let same = Conv2dOptions::same(3, 1, 1);
        if cfg.use_ddv {
            let l = ctx.conv(feat, &format!("decoder.ddv{scale}"), same, true);
            logits.push(l);
            raw.push(softargmax_var(l, bins));
        } else {
            let s = ctx.conv(feat, &format!("decoder.disp{scale}"), same, true).sigmoid();
            raw.push(s.scale(b1 - b0).add_scalar(b0));
        }
    };
    let same = Conv2dOptions::same(3, 1, 1);
    head(a, 4);
    let y = ctx.conv(a, "decoder.upconv3", same, true).elu().upsample_nearest2x();
    let y = Var::concat_channels(&[y, quarter]);
    let y = ctx.conv(y, "decoder.deconv3", same, true).elu();
    head(y, 3);
    let y = ctx.conv(y, "decoder.upconv2", same, true).elu().upsample_nearest2x();
    let y = Var::concat_channels(&[y, half]);
    let y = ctx.conv(y, "decoder.deconv2", same, true).elu();
    head(y, 2);
    let y = ctx.conv(y, "decoder.upconv1", same, true).elu().upsample_nearest2x();
    let y = ctx.conv(y, "decoder.deconv1", same, true).elu();
    head(y, 1);

    let disparities = raw
        .iter()
        .map(|&d| {
            let [_, _, dh, dw] = d.shape().0;
            if (dh, dw) == (h, w) {
                d
            } else {
                d.resize_bilinear(h, w)
            }
        })
        .collect();
    Ok(DepthOutput {
        disparities,
        raw,
        logits,
        attention: context.weights,
        bn_stats: ctx.stats.into_inner(),
    })
}

/// Relative pose from the 6-channel concatenation of `target` and `source`:
/// `[n, 6, 1, 1]` axis-angle then translation, mapping target-camera points
/// into the source camera.
pub fn pose_forward<'g>(
    cfg: &PoseNetConfig,
    params: &Bound<'g>,
    target: Var<'g>,
    source: Var<'g>,
) -> Result<Var<'g>> {
    if target.shape() != source.shape() || target.shape().c() != 3 {
        return Err(Error::invalid(format!(
            "pose network expects two same-shaped RGB batches, got {} and {}",
            target.shape(),
            source.shape()
        )));
    }
    let mut x = Var::concat_channels(&[target, source])
        .add_scalar(-IMAGE_MEAN)
        .scale(1.0 / IMAGE_STD);
    for i in 1..=cfg.widths.len() {
        let w = params.get(&format!("pose.conv{i}.weight"));
        let b = params.get(&format!("pose.conv{i}.bias"));
        x = x.conv2d(w, Some(b), Conv2dOptions::same(3, 2, 1)).relu();
    }
    let pooled = x.mean_spatial();
    let out = pooled.conv2d(
        params.get("pose.head.weight"),
        Some(params.get("pose.head.bias")),
        Conv2dOptions::default(),
    );
    Ok(out.scale(cfg.output_scale))
}

/// Eval-mode convenience for callers that only need values.
pub(crate) fn tensor_of(v: Var<'_>) -> Tensor {
    (*v.value()).clone()
}
