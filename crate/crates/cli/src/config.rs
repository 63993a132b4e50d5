//! Flat run configuration.
//!
//! A config file is TOML with top-level keys only. The optional `profile`
//! key (`desk` or `paper`) selects the defaults; every other key overrides one
//! value of that profile. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use selftof::data::SceneConfig;
use selftof::eval::{EvalConfig, GuidedFilterParams, Protocol};
use selftof::losses::{LossWeights, SourceReduction, ZoneReduction};
use selftof::models::{DepthEncoderMode, FusionMode, ModelConfig};
use selftof::scale::ScaleMode;
use selftof::train::TrainConfig;
use selftof::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 64x64 images and narrow networks, sized for a CPU.
    #[default]
    Desk,
    /// Full-size settings of the published method.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub profile: Profile,
    pub seed: u64,

    pub image_width: usize,
    pub image_height: usize,
    pub frames_per_scene: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub rectangles: usize,
    pub scene_min_depth: f64,
    pub scene_max_depth: f64,
    pub translation_amplitude: f64,
    pub rotation_amplitude: f64,
    pub focal_ratio: f64,
    pub texture_scale: f64,
    pub zone_rows: usize,
    pub zone_cols: usize,
    /// Distance between consecutive training targets, in frames.
    pub frame_stride: usize,
    pub source_offsets: Vec<isize>,
    pub eval_stride: usize,

    pub fusion_mode: FusionMode,
    pub depth_encoder_mode: DepthEncoderMode,
    pub min_depth: f64,
    pub max_depth: f64,
    pub pose_scale: f64,
    pub encoder_widths: [usize; 5],
    pub decoder_widths: [usize; 5],
    pub pose_width: usize,
    pub tof_depth: bool,
    pub tof_pose: bool,
    pub scale_mode: ScaleMode,
    pub position_encoding: bool,
    pub affinity_softmax: bool,

    pub epochs: usize,
    /// 0 means no cap.
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub late_learning_rate: f64,
    pub decay_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// 0 disables clipping.
    pub grad_clip: f64,
    pub w_ph: f64,
    pub w_s: f64,
    pub w_dc: f64,
    pub alpha: f64,
    pub scale_in_graph: bool,
    pub source_reduction: SourceReduction,
    pub zone_reduction: ZoneReduction,
    pub train_sparsity: Vec<f64>,

    pub protocol: Protocol,
    pub sparsity_ratio: f64,
    pub depth_cap: f64,
    pub gf_radius: usize,
    pub gf_eps: f64,
}

impl Config {
    pub fn desk() -> Self {
        let scene = SceneConfig::default();
        let model = ModelConfig::desk();
        let train = TrainConfig::default();
        let eval = EvalConfig::default();
        let gf = GuidedFilterParams::default();
        Self {
            profile: Profile::Desk,
            seed: 0,
            image_width: scene.width,
            image_height: scene.height,
            frames_per_scene: scene.frames,
            train_scenes: 4,
            test_scenes: 2,
            rectangles: scene.rectangles,
            scene_min_depth: scene.min_depth,
            scene_max_depth: scene.max_depth,
            translation_amplitude: scene.translation_amplitude,
            rotation_amplitude: scene.rotation_amplitude,
            focal_ratio: scene.focal_ratio,
            texture_scale: scene.texture_scale,
            zone_rows: model.zone_rows,
            zone_cols: model.zone_cols,
            frame_stride: 1,
            source_offsets: vec![-1, 1],
            eval_stride: 1,
            fusion_mode: model.fusion_mode,
            depth_encoder_mode: model.depth_encoder_mode,
            min_depth: model.min_depth,
            max_depth: model.max_depth,
            pose_scale: model.pose_scale,
            encoder_widths: model.encoder_widths,
            decoder_widths: model.decoder_widths,
            pose_width: model.pose_width,
            tof_depth: model.tof_depth,
            tof_pose: model.tof_pose,
            scale_mode: model.scale_mode,
            position_encoding: model.position_encoding,
            affinity_softmax: model.affinity_softmax,
            epochs: 40,
            max_steps: 0,
            batch_size: 4,
            learning_rate: 1e-3,
            late_learning_rate: 1e-4,
            decay_epoch: 30,
            beta1: train.beta1,
            beta2: train.beta2,
            adam_eps: train.adam_eps,
            grad_clip: 0.0,
            w_ph: train.weights.w_ph,
            w_s: train.weights.w_s,
            w_dc: train.weights.w_dc,
            alpha: train.weights.alpha,
            scale_in_graph: train.scale_in_graph,
            source_reduction: train.source_reduction,
            zone_reduction: train.zone_reduction,
            train_sparsity: Vec::new(),
            protocol: eval.protocol,
            sparsity_ratio: eval.sparsity_ratio,
            depth_cap: eval.depth_cap,
            gf_radius: gf.radius,
            gf_eps: gf.eps,
        }
    }

    /// 256x256 images, full-width networks, batch 8, 40 epochs with the
    /// learning rate dropped tenfold after epoch 30, targets every fifth
    /// frame with sources ten frames away.
    pub fn paper() -> Self {
        let model = ModelConfig::paper();
        let train = TrainConfig::default();
        Self {
            profile: Profile::Paper,
            image_width: 256,
            image_height: 256,
            frames_per_scene: 100,
            train_scenes: 16,
            test_scenes: 4,
            frame_stride: 5,
            source_offsets: vec![-10, 10],
            eval_stride: 5,
            encoder_widths: model.encoder_widths,
            decoder_widths: model.decoder_widths,
            pose_width: model.pose_width,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            late_learning_rate: train.late_learning_rate,
            decay_epoch: train.decay_epoch,
            epochs: train.epochs,
            ..Self::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Parses a config text, filling missing keys from its profile.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overrides: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| schema_error(&e.to_string()))?;
        let profile = match overrides.get("profile") {
            None => Profile::default(),
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|_| Error::config("profile", format!("unknown profile {v}")))?,
        };
        let base = Self::for_profile(profile);
        let mut table = toml::Table::try_from(&base).expect("config serializes");
        for (k, v) in overrides {
            table.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| schema_error(e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The fully resolved config, suitable for reloading.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            width: self.image_width,
            height: self.image_height,
            frames: self.frames_per_scene,
            rectangles: self.rectangles,
            min_depth: self.scene_min_depth,
            max_depth: self.scene_max_depth,
            translation_amplitude: self.translation_amplitude,
            rotation_amplitude: self.rotation_amplitude,
            focal_ratio: self.focal_ratio,
            texture_scale: self.texture_scale,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            fusion_mode: self.fusion_mode,
            depth_encoder_mode: self.depth_encoder_mode,
            min_depth: self.min_depth,
            max_depth: self.max_depth,
            pose_scale: self.pose_scale,
            encoder_widths: self.encoder_widths,
            decoder_widths: self.decoder_widths,
            pose_width: self.pose_width,
            tof_depth: self.tof_depth,
            tof_pose: self.tof_pose,
            scale_mode: self.scale_mode,
            position_encoding: self.position_encoding,
            affinity_softmax: self.affinity_softmax,
            zone_rows: self.zone_rows,
            zone_cols: self.zone_cols,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            late_learning_rate: self.late_learning_rate,
            decay_epoch: self.decay_epoch,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            weights: LossWeights {
                w_ph: self.w_ph,
                w_s: self.w_s,
                w_dc: self.w_dc,
                alpha: self.alpha,
            },
            scale_in_graph: self.scale_in_graph,
            source_reduction: self.source_reduction,
            zone_reduction: self.zone_reduction,
            train_sparsity: self.train_sparsity.clone(),
            seed: self.seed,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            protocol: self.protocol,
            sparsity_ratio: self.sparsity_ratio,
            seed: self.seed,
            depth_cap: self.depth_cap,
        }
    }

    pub fn guided_filter(&self) -> GuidedFilterParams {
        GuidedFilterParams {
            radius: self.gf_radius,
            eps: self.gf_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene().validate()?;
        self.model().validate()?;
        self.train().validate()?;
        if self.train_scenes == 0 {
            return Err(Error::config("train_scenes", "must be positive"));
        }
        if self.frame_stride == 0 || self.eval_stride == 0 {
            return Err(Error::config("frame_stride", "strides must be positive"));
        }
        if self.source_offsets.is_empty() || self.source_offsets.contains(&0) {
            return Err(Error::config("source_offsets", "need at least one non-zero offset"));
        }
        if !(0.0..=1.0).contains(&self.sparsity_ratio) {
            return Err(Error::config("sparsity_ratio", "must lie in [0, 1]"));
        }
        if self.depth_cap.is_nan() || self.depth_cap <= 0.0 {
            return Err(Error::config("depth_cap", "must be positive"));
        }
        if self.gf_eps.is_nan() || self.gf_eps <= 0.0 {
            return Err(Error::config("gf_eps", "must be positive"));
        }
        Ok(())
    }
}

fn schema_error(message: &str) -> Error {
    // serde names the offending key between backticks
    let field = message.split('`').nth(1).unwrap_or("<config>").to_string();
    Error::config(field, message.trim().to_string())
}
