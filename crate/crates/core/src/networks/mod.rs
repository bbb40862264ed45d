//! Depth network (encoder, context module, DDV heads, multi-scale decoder)
//! and pose network.

mod arch;
pub mod checkpoint;
mod config;
mod params;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchNormStats, Graph};
use crate::disparity::{DisparityBins, DisparityVolume};
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::tensor::Tensor;

pub use arch::{
    count_parameters, depth_buffer_specs, depth_forward, depth_param_specs, pose_forward,
    pose_param_specs, DepthOutput, Mode,
};
pub use checkpoint::Archive;
pub use config::{BlockKind, DepthNetConfig, ModelConfig, PoseNetConfig, BOTTLENECK_STRIDE};
pub use params::{Bound, Init, ParamSpec, ParamStore};

/// Evaluated depth prediction. Scales are ordered 1/8, 1/4, 1/2, 1/1.
#[derive(Clone, Debug)]
pub struct MultiScaleDisparity {
    /// `[n, 1, H, W]` per scale.
    pub disparities: Vec<Tensor>,
    /// Native resolution per scale.
    pub raw: Vec<Tensor>,
    /// DDV per scale; empty with the DDV disabled.
    pub volumes: Vec<DisparityVolume>,
    /// `[n, 1, P, P]` attention weights.
    pub attention: Option<Tensor>,
}

impl MultiScaleDisparity {
    /// Full-resolution output of the finest scale.
    pub fn finest(&self) -> &Tensor {
        self.disparities.last().expect("four scales")
    }
}

/// Depth and pose networks with their parameters and normalization state.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub buffers: ParamStore,
    bins: DisparityBins,
}

impl Model {
    pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
        let mut specs = depth_param_specs(&config.depth);
        specs.extend(pose_param_specs(&config.pose));
        specs
    }

    /// Fresh model with parameters drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::from_specs(&Self::param_specs(&config), &mut rng);
        let buffers = ParamStore::from_specs(&depth_buffer_specs(&config.depth), &mut rng);
        let bins = config.depth.bins()?;
        Ok(Self {
            config,
            params,
            buffers,
            bins,
        })
    }

    /// Rebuilds a model from explicit stores, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore, buffers: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_against(&Self::param_specs(&config))?;
        buffers.check_against(&depth_buffer_specs(&config.depth))?;
        let bins = config.depth.bins()?;
        Ok(Self {
            config,
            params,
            buffers,
            bins,
        })
    }

    pub fn bins(&self) -> &DisparityBins {
        &self.bins
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchNormStats)]) {
        let m = self.config.depth.bn_momentum;
        for (name, s) in stats {
            for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let key = format!("{name}.{suffix}");
                let Some(buf) = self.buffers.get_mut(&key) else {
                    continue;
                };
                for (r, &v) in buf.data_mut().iter_mut().zip(values.iter()) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
        }
    }

    /// Eval-mode depth prediction for `[n, 3, H, W]` images.
    pub fn predict(&self, images: &Tensor) -> Result<MultiScaleDisparity> {
        let graph = Graph::new();
        let bound = Bound::constants(&graph, &self.params);
        let image = graph.constant(images.clone());
        let out = depth_forward(&self.config.depth, &self.bins, &bound, &self.buffers, image, Mode::Eval)?;
        let volumes = out
            .logits
            .iter()
            .map(|&l| DisparityVolume::new(arch::tensor_of(l), self.bins.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiScaleDisparity {
            disparities: out.disparities.iter().map(|&v| arch::tensor_of(v)).collect(),
            raw: out.raw.iter().map(|&v| arch::tensor_of(v)).collect(),
            volumes,
            attention: out.attention.map(arch::tensor_of),
        })
    }

    /// Raw `[n, 6, 1, 1]` pose vectors from `target` to `source`.
    pub fn predict_pose_vectors(&self, target: &Tensor, source: &Tensor) -> Result<Tensor> {
        let graph = Graph::new();
        let bound = Bound::constants(&graph, &self.params);
        let out = pose_forward(
            &self.config.pose,
            &bound,
            graph.constant(target.clone()),
            graph.constant(source.clone()),
        )?;
        Ok(arch::tensor_of(out))
    }

    /// One transform per batch item, mapping target-camera points into the
    /// source camera.
    pub fn predict_pose(&self, target: &Tensor, source: &Tensor) -> Result<Vec<RigidTransform>> {
        let v = self.predict_pose_vectors(target, source)?;
        Ok((0..v.shape().n()).map(|b| pose_vector_to_transform(&v, b)).collect())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::default();
        a.add_store("param", &self.params);
        a.add_store("buffer", &self.buffers);
        a.metadata.insert("model_config".into(), serde_json::to_string(&self.config)?);
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let json = archive
            .metadata
            .get("model_config")
            .ok_or_else(|| Error::Checkpoint("archive has no model_config metadata".into()))?;
        let config: ModelConfig = serde_json::from_str(json)
            .map_err(|e| Error::Checkpoint(format!("bad model_config: {e}")))?;
        // A fresh model fixes the expected layout; its values are replaced.
        let template = Self::new(config.clone(), 0)?;
        let params = archive.take_store("param", &template.params)?;
        let buffers = archive.take_store("buffer", &template.buffers)?;
        Self::from_parts(config, params, buffers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Converts item `b` of an `[n, 6, 1, 1]` pose tensor.
pub fn pose_vector_to_transform(v: &Tensor, b: usize) -> RigidTransform {
    let at = |c| v.at(b, c, 0, 0);
    RigidTransform::from_axis_angle([at(0), at(1), at(2)], [at(3), at(4), at(5)])
}
