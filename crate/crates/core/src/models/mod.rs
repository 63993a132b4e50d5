//! DepthNet and PoseNet with zone inputs.
//!
//! Both networks share one [`ParamStore`]; DepthNet parameters live under
//! `depth.` and PoseNet parameters under `pose.`.

mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::maps::{DepthMap, Image};
use crate::scalar::Scalar;
use crate::scale::{median_of_median_scaling_mms, median_scaling_ms, ScaleMode};
use crate::tensor::Tensor;
use crate::tofsim::ZoneGrid;

pub use layers::{
    batch_constant, channel_mask, position_encoding, submanifold_conv, BasicBlock, Conv, DepthDecoder, FusionTrace,
    GuidedFusion, PoseDecoder, ResNetEncoder, ZoneEncoder,
};
pub use params::{Binder, Init, ParamInfo, ParamStore};

pub const DEPTH_PREFIX: &str = "depth.";
pub const POSE_PREFIX: &str = "pose.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Addition,
    Guided,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthEncoderMode {
    #[default]
    Dense,
    Submanifold,
}

/// Network architecture and output mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub fusion_mode: FusionMode,
    pub depth_encoder_mode: DepthEncoderMode,
    pub min_depth: f64,
    pub max_depth: f64,
    pub pose_scale: f64,
    /// Channels of the five encoder scales; the zone encoder mirrors them.
    pub encoder_widths: [usize; 5],
    pub decoder_widths: [usize; 5],
    pub pose_width: usize,
    /// Feed the zone map to DepthNet.
    pub tof_depth: bool,
    /// Feed the zone maps to PoseNet.
    pub tof_pose: bool,
    /// Scale recovery applied to DepthNet output in training and at test time.
    pub scale_mode: ScaleMode,
    pub position_encoding: bool,
    pub affinity_softmax: bool,
    pub zone_rows: usize,
    pub zone_cols: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-size SelfToF.
    pub fn paper() -> Self {
        Self {
            fusion_mode: FusionMode::Addition,
            depth_encoder_mode: DepthEncoderMode::Dense,
            min_depth: 0.1,
            max_depth: 10.0,
            pose_scale: 0.01,
            encoder_widths: [64, 64, 128, 256, 512],
            decoder_widths: [16, 32, 64, 128, 256],
            pose_width: 256,
            tof_depth: true,
            tof_pose: true,
            scale_mode: ScaleMode::Mms,
            position_encoding: true,
            affinity_softmax: true,
            zone_rows: 8,
            zone_cols: 8,
        }
    }

    /// Narrow variant for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            encoder_widths: [8, 8, 16, 32, 64],
            decoder_widths: [8, 8, 16, 32, 64],
            pose_width: 32,
            ..Self::paper()
        }
    }

    /// Guided fusion on a submanifold zone encoder.
    pub fn star(self) -> Self {
        Self {
            fusion_mode: FusionMode::Guided,
            depth_encoder_mode: DepthEncoderMode::Submanifold,
            ..self
        }
    }

    /// RGB-only networks.
    pub fn rgb_only(self) -> Self {
        Self {
            tof_depth: false,
            tof_pose: false,
            scale_mode: ScaleMode::None,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite()) {
            return Err(Error::config(
                "min_depth",
                format!(
                    "need 0 < min_depth < max_depth, got {} and {}",
                    self.min_depth, self.max_depth
                ),
            ));
        }
        if !(self.pose_scale > 0.0 && self.pose_scale.is_finite()) {
            return Err(Error::config("pose_scale", "must be positive"));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) || self.pose_width == 0 {
            return Err(Error::config("encoder_widths", "channel widths must be positive"));
        }
        if self.zone_rows == 0 || self.zone_cols == 0 {
            return Err(Error::config(
                "zone_rows",
                format!("zone grid {}x{} has no zones", self.zone_rows, self.zone_cols),
            ));
        }
        Ok(())
    }

    fn min_disp(&self) -> f64 {
        1.0 / self.max_depth
    }

    fn max_disp(&self) -> f64 {
        1.0 / self.min_depth
    }
}

/// Layer graph built from a [`ModelConfig`].
#[derive(Clone, Debug)]
struct Architecture {
    depth_rgb: ResNetEncoder,
    depth_zone: Option<ZoneEncoder>,
    depth_fusion: Vec<GuidedFusion>,
    depth_decoder: DepthDecoder,
    pose_rgb: ResNetEncoder,
    pose_zone: Option<ZoneEncoder>,
    pose_fusion: Option<GuidedFusion>,
    pose_decoder: PoseDecoder,
}

impl Architecture {
    fn new(cfg: &ModelConfig) -> Self {
        let w = cfg.encoder_widths;
        let sub = cfg.depth_encoder_mode == DepthEncoderMode::Submanifold;
        let guided = cfg.fusion_mode == FusionMode::Guided;
        let gff = |name: String, c| GuidedFusion::new(&name, c, cfg.position_encoding, cfg.affinity_softmax);
        Self {
            depth_rgb: ResNetEncoder::new("depth.encoder", 3, w),
            depth_zone: cfg.tof_depth.then(|| ZoneEncoder::new("depth.zone", 1, &w, sub)),
            depth_fusion: if guided && cfg.tof_depth {
                (0..5).map(|i| gff(format!("depth.fusion.{i}"), w[i])).collect()
            } else {
                Vec::new()
            },
            depth_decoder: DepthDecoder::new("depth.decoder", w, cfg.decoder_widths),
            pose_rgb: ResNetEncoder::new("pose.encoder", 6, w),
            pose_zone: cfg.tof_pose.then(|| ZoneEncoder::new("pose.zone", 2, &w, sub)),
            pose_fusion: (guided && cfg.tof_pose).then(|| gff("pose.fusion".into(), w[4])),
            pose_decoder: PoseDecoder::new("pose.decoder", w[4], cfg.pose_width),
        }
    }

    fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        self.depth_rgb.declare(store, init);
        if let Some(z) = &self.depth_zone {
            z.declare(store, init);
        }
        for f in &self.depth_fusion {
            f.declare(store, init);
        }
        self.depth_decoder.declare(store, init);
        self.pose_rgb.declare(store, init);
        if let Some(z) = &self.pose_zone {
            z.declare(store, init);
        }
        if let Some(f) = &self.pose_fusion {
            f.declare(store, init);
        }
        self.pose_decoder.declare(store, init);
    }
}

/// Batched zone input: maps `[n, 1, rows, cols]` and validity `[n * rows * cols]`.
#[derive(Clone, Debug)]
pub struct ZoneInput<T> {
    pub map: Tensor<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> ZoneInput<T> {
    pub fn from_grids(grids: &[&ZoneGrid<T>]) -> Self {
        let maps: Vec<Tensor<T>> = grids
            .iter()
            .map(|g| Tensor::from_vec(&[1, g.rows, g.cols], g.mean.clone()))
            .collect();
        let refs: Vec<&Tensor<T>> = maps.iter().collect();
        Self {
            map: Tensor::stack(&refs),
            valid: grids.iter().flat_map(|g| g.valid.iter().copied()).collect(),
        }
    }
}

/// DepthNet outputs, all `[n, 1, h, w]`.
pub struct DepthOutput<'g, T> {
    pub sigmoid: Var<'g, T>,
    pub disparity: Var<'g, T>,
    pub depth: Var<'g, T>,
}

/// Both networks with their parameters.
#[derive(Clone, Debug)]
pub struct Models<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    arch: Architecture,
}

impl<T: Scalar> Models<T> {
    /// Freshly initialised networks; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config);
        let mut params = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        arch.declare(&mut params, &mut init);
        Ok(Self { config, params, arch })
    }

    /// Networks around existing parameters, which must match the config.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        if fresh.params.manifest() != params.manifest() {
            return Err(Error::ShapeMismatch(
                "parameters do not match the model configuration".into(),
            ));
        }
        Ok(Self { params, ..fresh })
    }

    pub fn manifest(&self) -> Vec<ParamInfo> {
        self.params.manifest()
    }

    /// DepthNet on `image` `[n, 3, h, w]`.
    pub fn depth_forward<'g>(
        &self,
        b: &Binder<'g, '_, T>,
        image: Var<'g, T>,
        zones: &ZoneInput<T>,
    ) -> DepthOutput<'g, T> {
        let g = b.graph();
        let (n, c, h, w) = image.value().dims4();
        assert_eq!(c, 3, "DepthNet takes RGB input");
        let mut feats = self.arch.depth_rgb.forward(b, image);
        if let Some(enc) = &self.arch.depth_zone {
            check_zone_input(zones, n, 1, &self.config);
            let zfeats = enc.forward(b, g.constant(zones.map.clone()), &zones.valid);
            feats = feats
                .into_iter()
                .zip(zfeats)
                .enumerate()
                .map(|(i, (rgb, z))| self.fuse(b, self.arch.depth_fusion.get(i), rgb, z, &zones.valid))
                .collect();
        }
        let sigmoid = self.arch.depth_decoder.forward(b, &feats, h, w);
        let (lo, hi) = (T::lit(self.config.min_disp()), T::lit(self.config.max_disp()));
        let disparity = sigmoid.mul_scalar(hi - lo).add_scalar(lo);
        DepthOutput {
            sigmoid,
            disparity,
            depth: disparity.recip(),
        }
    }

    fn fuse<'g>(
        &self,
        b: &Binder<'g, '_, T>,
        guided: Option<&GuidedFusion>,
        rgb: Var<'g, T>,
        zone: Var<'g, T>,
        valid: &[bool],
    ) -> Var<'g, T> {
        match guided {
            Some(f) => f.forward(b, rgb, zone, valid),
            None => {
                let (_, _, h, w) = rgb.value().dims4();
                rgb.add(zone.resize_nearest(h, w))
            }
        }
    }

    /// PoseNet: `[n, 6]` parameters of the target-to-source transform.
    pub fn pose_forward<'g>(
        &self,
        b: &Binder<'g, '_, T>,
        target: Var<'g, T>,
        source: Var<'g, T>,
        zones_t: &ZoneInput<T>,
        zones_s: &ZoneInput<T>,
    ) -> Var<'g, T> {
        let g = b.graph();
        let n = target.value().dims4().0;
        let pair = Var::concat_channels(&[target, source]);
        let mut lowest = self.arch.pose_rgb.forward(b, pair).pop().expect("five scales");
        if let Some(enc) = &self.arch.pose_zone {
            check_zone_input(zones_t, n, 1, &self.config);
            check_zone_input(zones_s, n, 1, &self.config);
            let maps = Var::concat_channels(&[g.constant(zones_t.map.clone()), g.constant(zones_s.map.clone())]);
            let union: Vec<bool> = zones_t
                .valid
                .iter()
                .zip(&zones_s.valid)
                .map(|(&a, &b)| a || b)
                .collect();
            let z = enc.forward(b, maps, &union).pop().expect("five scales");
            lowest = self.fuse(b, self.arch.pose_fusion.as_ref(), lowest, z, &union);
        }
        self.arch
            .pose_decoder
            .forward(b, lowest)
            .mul_scalar(T::lit(self.config.pose_scale))
    }

    /// Guided-fusion trace at one DepthNet scale, for inspection.
    pub fn depth_fusion_trace<'g>(
        &self,
        b: &Binder<'g, '_, T>,
        image: Var<'g, T>,
        zones: &ZoneInput<T>,
        scale: usize,
    ) -> Option<FusionTrace<'g, T>> {
        let fusion = self.arch.depth_fusion.get(scale)?;
        let enc = self.arch.depth_zone.as_ref()?;
        let rgb = self.arch.depth_rgb.forward(b, image)[scale];
        let z = enc.forward(b, b.graph().constant(zones.map.clone()), &zones.valid)[scale];
        Some(fusion.trace(b, rgb, z, &zones.valid))
    }

    /// Test-time depth prediction for a single frame, after scale recovery.
    pub fn predict_depth(&self, image: &Image<T>, grid: &ZoneGrid<T>) -> Result<DepthMap<T>> {
        self.predict_depth_scaled(image, grid).map(|(d, _)| d)
    }

    /// Prediction and the scale applied to it. The scale is recovered from
    /// the zones as a constant; without a usable zone it falls back to 1.
    pub fn predict_depth_scaled(&self, image: &Image<T>, grid: &ZoneGrid<T>) -> Result<(DepthMap<T>, T)> {
        let raw = self.predict_depth_raw(image, grid)?;
        let scaled = match self.config.scale_mode {
            ScaleMode::None => return Ok((raw, T::one())),
            ScaleMode::Ms => median_scaling_ms(&raw, grid),
            ScaleMode::Mms => median_of_median_scaling_mms(&raw, grid),
        };
        match scaled {
            Err(Error::NoScaleAvailable) => {
                log::warn!("no usable zone for scale recovery; keeping the raw prediction");
                Ok((raw, T::one()))
            }
            other => other,
        }
    }

    /// DepthNet output before scale recovery.
    ///
    /// Runs under an access guard that admits DepthNet parameters only.
    pub fn predict_depth_raw(&self, image: &Image<T>, grid: &ZoneGrid<T>) -> Result<DepthMap<T>> {
        if image.channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected RGB, got {} channels",
                image.channels
            )));
        }
        let g = Graph::new();
        let b = Binder::restricted(&g, &self.params, &[DEPTH_PREFIX]);
        let zones = ZoneInput::from_grids(&[grid]);
        let out = self.depth_forward(&b, g.constant(image.to_tensor()), &zones);
        Ok(DepthMap::from_tensor(&out.depth.value(), 0))
    }

    /// Target-to-source motion predicted by PoseNet for one frame pair.
    pub fn predict_pose(
        &self,
        target: &Image<T>,
        target_zones: &ZoneGrid<T>,
        source: &Image<T>,
        source_zones: &ZoneGrid<T>,
    ) -> Result<RigidTransform<T>> {
        if !target.same_shape(source) || target.channels != 3 {
            return Err(Error::ShapeMismatch(
                "pose input must be two RGB images of one size".into(),
            ));
        }
        let g = Graph::new();
        let b = Binder::frozen(&g, &self.params);
        let p = self.pose_forward(
            &b,
            g.constant(target.to_tensor()),
            g.constant(source.to_tensor()),
            &ZoneInput::from_grids(&[target_zones]),
            &ZoneInput::from_grids(&[source_zones]),
        );
        Ok(RigidTransform::from_params(p.value().data()))
    }
}

fn check_zone_input<T: Scalar>(z: &ZoneInput<T>, n: usize, c: usize, cfg: &ModelConfig) {
    assert_eq!(
        z.map.shape(),
        [n, c, cfg.zone_rows, cfg.zone_cols],
        "zone input does not match the configured grid"
    );
    assert_eq!(z.valid.len(), n * cfg.zone_rows * cfg.zone_cols);
}
