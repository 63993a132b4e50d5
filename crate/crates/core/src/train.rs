//! Joint self-supervised training of DepthNet and PoseNet.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::FrameTriplet;
use crate::error::{Error, Result};
use crate::geometry::synthesize_var;
use crate::losses::{
    depth_consistency_loss_var, photometric_loss_var, smoothness_loss_var, total_loss_var, LossParts, LossWeights,
    SourceReduction, ZoneReduction,
};
use crate::maps::Image;
use crate::models::{Binder, ModelConfig, Models, ParamInfo, ParamStore, ZoneInput};
use crate::scalar::Scalar;
use crate::scale::{recover_scale_var, ScaleMode};
use crate::tensor::Tensor;
use crate::tofsim::{inject_sparsity, ZoneGrid, ZoneIndex};

/// Optimisation and objective settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub late_learning_rate: f64,
    /// First epoch trained at `late_learning_rate`.
    pub decay_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    pub weights: LossWeights,
    /// Let gradients flow through the recovered scale.
    pub scale_in_graph: bool,
    pub source_reduction: SourceReduction,
    pub zone_reduction: ZoneReduction,
    /// Per-sample sparsity ratio drawn uniformly from this list.
    pub train_sparsity: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            max_steps: None,
            batch_size: 8,
            learning_rate: 1e-4,
            late_learning_rate: 1e-5,
            decay_epoch: 30,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            weights: LossWeights::default(),
            scale_in_graph: true,
            source_reduction: SourceReduction::Min,
            zone_reduction: ZoneReduction::Sum,
            train_sparsity: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.late_learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1", "Adam betas must lie in [0, 1)"));
        }
        if let Some(r) = self.train_sparsity.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::config("train_sparsity", format!("ratio {r} outside [0, 1]")));
        }
        self.weights.validate()
    }

    /// Two-phase schedule.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.learning_rate
        } else {
            self.late_learning_rate
        }
    }
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// One update of every parameter that has a gradient.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(cfg.adam_eps * c2.sqrt());
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a known parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Stacks equally sized images into `[n, c, h, w]`.
pub fn stack_images<T: Scalar>(images: &[&Image<T>]) -> Tensor<T> {
    let (c, h, w) = (images[0].channels, images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        assert_eq!(
            (img.channels, img.height, img.width),
            (c, h, w),
            "batch images differ in size"
        );
        data.extend_from_slice(&img.data);
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

/// Zone grids actually seen in one step, after sparsity injection.
struct StepZones<T> {
    target: Vec<ZoneGrid<T>>,
    sources: Vec<Vec<ZoneGrid<T>>>,
}

fn draw_zones<T: Scalar>(batch: &[&FrameTriplet<T>], ratios: &[f64], rng: &mut ChaCha8Rng) -> Result<StepZones<T>> {
    let n_src = batch[0].sources.len();
    let mut target = Vec::with_capacity(batch.len());
    let mut sources = vec![Vec::with_capacity(batch.len()); n_src];
    for tr in batch {
        let r = if ratios.is_empty() {
            0.0
        } else {
            ratios[rng.random_range(0..ratios.len())]
        };
        target.push(inject_sparsity(&tr.target_zones, r, rng.random())?);
        for (j, s) in tr.sources.iter().enumerate() {
            sources[j].push(inject_sparsity(&s.zones, r, rng.random())?);
        }
    }
    Ok(StepZones { target, sources })
}

/// Forward pass and loss of one batch, without touching the parameters.
///
/// Returns the loss parts and the gradient of every bound parameter.
pub fn compute_gradients<T: Scalar>(
    models: &Models<T>,
    batch: &[&FrameTriplet<T>],
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<(LossParts, BTreeMap<String, Tensor<T>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n_src = batch[0].sources.len();
    for tr in batch {
        tr.check()?;
        if tr.sources.len() != n_src || tr.intrinsics != batch[0].intrinsics {
            return Err(Error::ShapeMismatch("batch mixes source counts or cameras".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let zones = draw_zones(batch, &cfg.train_sparsity, &mut rng)?;
    let k = batch[0].intrinsics;
    let index = ZoneIndex::new(batch[0].target_zones.layout());

    let g = Graph::new();
    let b = Binder::trainable(&g, &models.params);
    let target_refs: Vec<&Image<T>> = batch.iter().map(|t| &t.target).collect();
    let target = g.constant(stack_images(&target_refs));
    let zt_refs: Vec<&ZoneGrid<T>> = zones.target.iter().collect();
    let zt = ZoneInput::from_grids(&zt_refs);

    let out = models.depth_forward(&b, target, &zt);
    let depth = match models.config.scale_mode {
        ScaleMode::None => out.depth,
        mode => {
            let (s, ok) = recover_scale_var(out.depth, &zt_refs, &index, mode);
            if ok.iter().any(|&v| !v) {
                log::debug!("scale recovery fell back to 1 for some samples");
            }
            let s = if cfg.scale_in_graph { s } else { s.detach() };
            out.depth.mul_per_item(s)
        }
    };

    let mut recons: Vec<(Var<'_, T>, Rc<Vec<bool>>)> = Vec::with_capacity(n_src);
    for j in 0..n_src {
        let refs: Vec<&Image<T>> = batch.iter().map(|t| &t.sources[j].image).collect();
        let source = g.constant(stack_images(&refs));
        let zs_refs: Vec<&ZoneGrid<T>> = zones.sources[j].iter().collect();
        let zs = ZoneInput::from_grids(&zs_refs);
        let pose = models.pose_forward(&b, target, source, &zt, &zs);
        recons.push(synthesize_var(source, depth, pose, &k));
    }
    let (ph, degenerate) = photometric_loss_var(target, &recons, cfg.weights.alpha, cfg.source_reduction);
    if degenerate {
        log::warn!("no pixel is visible in every source view");
    }
    let s = smoothness_loss_var(out.sigmoid, target)?;
    let dc = if models.config.tof_depth || cfg.weights.w_dc > 0.0 {
        depth_consistency_loss_var(depth, &zt_refs, &index, cfg.zone_reduction)
    } else {
        g.constant(Tensor::scalar(T::zero()))
    };
    let (total, parts) = total_loss_var(ph, s, dc, &cfg.weights)?;
    let mut grads = g.backward(total);
    let mut out = BTreeMap::new();
    for (name, var) in b.bound() {
        if let Some(gr) = grads.take(var) {
            if !gr.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            out.insert(name, gr);
        }
    }
    Ok((parts, out))
}

fn clip_gradients<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let f = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= f;
            }
        }
    }
}

/// Training state: networks, optimizer and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub models: Models<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: usize,
}

/// Per-step losses of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub losses: Vec<LossParts>,
    pub skipped: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            models: Models::new(model, config.seed)?,
            adam: AdamState::default(),
            config,
            epoch: 0,
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(checkpoint: &Path, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ck = Checkpoint::<T>::load(checkpoint)?;
        Ok(Self {
            models: Models::from_params(ck.config, ck.params)?,
            adam: ck.adam,
            config,
            epoch: ck.epoch,
            step: ck.step,
        })
    }

    fn step_seed(&self) -> u64 {
        self.config.seed ^ (self.step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17)
    }

    /// One optimizer update. A non-finite loss or gradient skips the update
    /// and is returned as an error.
    pub fn train_step(&mut self, batch: &[&FrameTriplet<T>]) -> Result<LossParts> {
        let seed = self.step_seed();
        self.step += 1;
        let (parts, mut grads) = compute_gradients(&self.models, batch, &self.config, seed)?;
        if let Some(c) = self.config.grad_clip {
            clip_gradients(&mut grads, c);
        }
        let lr = self.config.learning_rate_at(self.epoch);
        self.adam.update(&mut self.models.params, &grads, lr, &self.config);
        Ok(parts)
    }

    /// Batches of one epoch, in a seeded order.
    pub fn epoch_order(&self, len: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(0x5eed).wrapping_add(self.epoch as u64));
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn done(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Trains until the epoch budget or step cap is exhausted.
    ///
    /// With a run directory, appends to `train_log.csv` and writes
    /// `epoch_{n}.ckpt` plus `manifest.json` after every epoch.
    pub fn fit(&mut self, dataset: &[FrameTriplet<T>], run_dir: Option<&Path>) -> Result<FitReport> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let mut log = match run_dir {
            Some(dir) => Some(open_log(dir)?),
            None => None,
        };
        if let Some(dir) = run_dir {
            write_manifest(&dir.join("manifest.json"), &self.models.config, &self.models.manifest())?;
        }
        let mut report = FitReport::default();
        while !self.done() {
            for batch in self.epoch_order(dataset.len()) {
                if self.done() {
                    break;
                }
                let items: Vec<&FrameTriplet<T>> = batch.iter().map(|&i| &dataset[i]).collect();
                match self.train_step(&items) {
                    Ok(parts) => {
                        if let Some((path, file)) = log.as_mut() {
                            writeln!(file, "{}", parts.csv_row(self.step)).map_err(|e| Error::io(&*path, e))?;
                        }
                        report.losses.push(parts);
                    }
                    Err(Error::NonFinite(msg)) => {
                        log::warn!("step {} skipped: {msg}", self.step);
                        report.skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            self.epoch += 1;
            if let Some(dir) = run_dir {
                let path = dir.join(format!("epoch_{}.ckpt", self.epoch));
                self.save(&path)?;
                report.checkpoints.push(path);
            }
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint {
            config: self.models.config.clone(),
            epoch: self.epoch,
            step: self.step,
            params: self.models.params.clone(),
            adam: self.adam.clone(),
        }
        .save(path)
    }
}

fn open_log(dir: &Path) -> Result<(PathBuf, fs::File)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("train_log.csv");
    let fresh = !path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    if fresh {
        writeln!(file, "{}", LossParts::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
    }
    Ok((path, file))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    num_values: usize,
    parameters: Vec<ParamInfo>,
}

pub fn write_manifest(path: &Path, config: &ModelConfig, params: &[ParamInfo]) -> Result<()> {
    let m = Manifest {
        config: config.clone(),
        num_values: params.iter().map(|p| p.shape.iter().product::<usize>()).sum(),
        parameters: params.to_vec(),
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const MAGIC: &[u8; 8] = b"SELFTOF1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    step: usize,
    adam_t: u64,
    parameters: Vec<ParamInfo>,
    /// Names with stored Adam moments, in file order.
    moments: Vec<String>,
}

/// Saved training state.
///
/// File layout: 8-byte magic, little-endian u64 header length, JSON header,
/// then every parameter as little-endian f64 in header order, followed by
/// the first and second Adam moments of each name in `moments`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub epoch: usize,
    pub step: usize,
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_t: self.adam.t,
            parameters: self.params.manifest(),
            moments: self.adam.m.keys().cloned().collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let mut put = |t: &Tensor<T>| {
            for &x in t.data() {
                buf.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        };
        for (_, t) in self.params.iter() {
            put(t);
        }
        for name in &header.moments {
            put(&self.adam.m[name]);
            put(&self.adam.v[name]);
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::data(path, m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let mut cursor = 16 + hlen;
        let mut take = |shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            let end = cursor + 8 * n;
            let raw = bytes.get(cursor..end).ok_or_else(|| bad("truncated parameter data"))?;
            cursor = end;
            let data = raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            Ok(Tensor::from_vec(shape, data))
        };
        let mut params = ParamStore::new();
        let mut shapes = BTreeMap::new();
        for p in &header.parameters {
            params.insert(p.name.clone(), take(&p.shape)?);
            shapes.insert(p.name.clone(), p.shape.clone());
        }
        let mut adam = AdamState {
            t: header.adam_t,
            ..AdamState::default()
        };
        for name in &header.moments {
            let shape = shapes.get(name).ok_or_else(|| bad("moment for unknown parameter"))?;
            adam.m.insert(name.clone(), take(shape)?);
            adam.v.insert(name.clone(), take(shape)?);
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after checkpoint data"));
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            params,
            adam,
        })
    }
}
