//! Depth and pose metrics, classical baselines and the evaluation harness.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FrameTriplet;
use crate::error::{Error, Result};
use crate::geometry::{mat_mul, transpose, RigidTransform};
use crate::maps::{DepthMap, Image};
use crate::models::Models;
use crate::scalar::Scalar;
use crate::scale::{eval_median_scaling, ScaleMode};
use crate::tofsim::{inject_sparsity, ZoneGrid, ZoneLayout};
use crate::train::Checkpoint;

/// Ground truth beyond this depth (meters) is ignored.
pub const DEFAULT_DEPTH_CAP: f64 = 10.0;

/// Predictions are clamped from below before taking ratios and logs.
pub const MIN_PREDICTED_DEPTH: f64 = 1e-3;

/// Standard depth metrics, optionally with pose errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub rot_deg: Option<f64>,
    pub tr_deg: Option<f64>,
    pub samples: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rmse,rmse_log,log10,a1,a2,a3";

    pub fn csv_row(&self) -> String {
        self.values().map(|v| format!("{v:.6}")).join(",")
    }

    fn values(&self) -> [f64; 8] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.log10,
            self.a1,
            self.a2,
            self.a3,
        ]
    }

    /// Unweighted mean of per-image reports, in order.
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::InvalidArgument("no report to average".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: fn(&MetricsReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(Self {
            abs_rel: avg(|r| r.abs_rel),
            sq_rel: avg(|r| r.sq_rel),
            rmse: avg(|r| r.rmse),
            rmse_log: avg(|r| r.rmse_log),
            log10: avg(|r| r.log10),
            a1: avg(|r| r.a1),
            a2: avg(|r| r.a2),
            a3: avg(|r| r.a3),
            rot_deg: avg_opt(|r| r.rot_deg),
            tr_deg: avg_opt(|r| r.tr_deg),
            samples: reports.iter().map(|r| r.samples).sum(),
        })
    }
}

impl fmt::Display for MetricsReport {
    /// Fixed-width table in the usual column order.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for name in Self::CSV_HEADER.split(',') {
            write!(f, "{name:>10}")?;
        }
        writeln!(f)?;
        for v in self.values() {
            write!(f, "{v:>10.4}")?;
        }
        writeln!(f)?;
        if let Some(r) = self.rot_deg {
            writeln!(f, "rot(deg) {r:.4}")?;
        }
        if let Some(t) = self.tr_deg {
            writeln!(f, "tr(deg)  {t:.4}")?;
        }
        write!(f, "samples  {}", self.samples)
    }
}

/// Metrics of one prediction over pixels with valid ground truth in `(0, cap]`.
pub fn depth_metrics<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>, cap: f64) -> Result<MetricsReport> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log, mut log10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    let mut n = 0usize;
    for i in 0..gt.len() {
        let g = gt.values[i].as_f64();
        let p = pred.values[i].as_f64();
        if !(gt.valid[i] && pred.valid[i] && g > 0.0 && g <= cap && p.is_finite()) {
            continue;
        }
        let p = p.max(MIN_PREDICTED_DEPTH);
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        sq_log += (p.ln() - g.ln()).powi(2);
        log10 += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        for (k, w) in within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *w += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyOverlap);
    }
    let nf = n as f64;
    Ok(MetricsReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        log10: log10 / nf,
        a1: within[0] as f64 / nf,
        a2: within[1] as f64 / nf,
        a3: within[2] as f64 / nf,
        rot_deg: None,
        tr_deg: None,
        samples: 1,
    })
}

/// Rotation error (geodesic angle of `R_pred R_gt^T`) and the angle between
/// translation directions, in degrees. The translation angle is absent when
/// either translation is zero.
pub fn pose_metrics<T: Scalar>(pred: &RigidTransform<T>, gt: &RigidTransform<T>) -> (f64, Option<f64>) {
    let pred = pred.cast::<f64>();
    let gt = gt.cast::<f64>();
    let r = mat_mul(&pred.matrix(), &transpose(&gt.matrix()));
    let skew = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    let sin2 = skew.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos2 = r[0][0] + r[1][1] + r[2][2] - 1.0;
    let rot = sin2.atan2(cos2).to_degrees();

    let (a, b) = (pred.translation, gt.translation);
    let tr = if a.iter().all(|&x| x == 0.0) || b.iter().all(|&x| x == 0.0) {
        None
    } else {
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        let sin = cross.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        Some(sin.atan2(cos).to_degrees())
    };
    (rot, tr)
}

/// Piecewise-constant upsampling of the zone means to `width x height`.
///
/// Invalid zones take the mean of the valid zone whose footprint center is
/// nearest to theirs; ties go to the lower zone index.
pub fn baseline_nn<T: Scalar>(grid: &ZoneGrid<T>, width: usize, height: usize) -> Result<DepthMap<T>> {
    if grid.valid_count() == 0 {
        return Err(Error::Degenerate("every zone is invalid".into()));
    }
    let layout = ZoneLayout::new(grid.rows, grid.cols, height, width)?;
    let centers: Vec<(f64, f64)> = layout.footprints().iter().map(|f| f.center()).collect();
    let fill: Vec<T> = (0..grid.zones())
        .map(|z| {
            if grid.valid[z] {
                return grid.mean[z];
            }
            let (cy, cx) = centers[z];
            let mut best = (f64::INFINITY, z);
            for v in (0..grid.zones()).filter(|&v| grid.valid[v]) {
                let d = (centers[v].0 - cy).powi(2) + (centers[v].1 - cx).powi(2);
                if d < best.0 {
                    best = (d, v);
                }
            }
            grid.mean[best.1]
        })
        .collect();
    DepthMap::new(width, height, layout.paint(&fill))
}

/// Edge-preserving smoothing settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidedFilterParams {
    pub radius: usize,
    pub eps: f64,
}

impl Default for GuidedFilterParams {
    fn default() -> Self {
        Self { radius: 8, eps: 1e-3 }
    }
}

/// Box sums over square windows clipped at the image border.
struct BoxSum {
    w: usize,
    h: usize,
    r: usize,
}

impl BoxSum {
    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut integral = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += src[y * w + x];
                integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(self.r), (y + self.r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(self.r), (x + self.r + 1).min(w));
                let at = |yy: usize, xx: usize| integral[yy * (w + 1) + xx];
                out[y * w + x] = at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0);
            }
        }
        out
    }

    fn mean(&self, src: &[f64], count: &[f64]) -> Vec<f64> {
        self.apply(src).iter().zip(count).map(|(s, n)| s / n).collect()
    }
}

/// Solves the small dense system `a x = b` by Gaussian elimination.
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Guided filter of `depth` steered by every channel of `guide`.
pub fn baseline_guided_filter<T: Scalar>(
    depth: &DepthMap<T>,
    guide: &Image<T>,
    params: GuidedFilterParams,
) -> Result<DepthMap<T>> {
    if (guide.width, guide.height) != (depth.width, depth.height) {
        return Err(Error::ShapeMismatch("guide and depth differ in size".into()));
    }
    if !(params.eps > 0.0) {
        return Err(Error::config("eps", "must be positive"));
    }
    let (w, h, c) = (depth.width, depth.height, guide.channels);
    let px = w * h;
    let bx = BoxSum { w, h, r: params.radius };
    let count = bx.apply(&vec![1.0; px]);
    let p: Vec<f64> = depth.values.iter().map(|v| v.as_f64()).collect();
    let chan: Vec<Vec<f64>> = (0..c)
        .map(|k| guide.data[k * px..(k + 1) * px].iter().map(|v| v.as_f64()).collect())
        .collect();
    let mean_p = bx.mean(&p, &count);
    let mean_i: Vec<Vec<f64>> = chan.iter().map(|ch| bx.mean(ch, &count)).collect();
    let corr_ip: Vec<Vec<f64>> = chan
        .iter()
        .map(|ch| bx.mean(&ch.iter().zip(&p).map(|(a, b)| a * b).collect::<Vec<_>>(), &count))
        .collect();
    let mut corr_ii = vec![vec![Vec::new(); c]; c];
    for i in 0..c {
        for j in i..c {
            let prod: Vec<f64> = chan[i].iter().zip(&chan[j]).map(|(a, b)| a * b).collect();
            corr_ii[i][j] = bx.mean(&prod, &count);
        }
    }
    let mut coef_a = vec![vec![0.0; px]; c];
    let mut coef_b = vec![0.0; px];
    for q in 0..px {
        let sigma: Vec<Vec<f64>> = (0..c)
            .map(|i| {
                (0..c)
                    .map(|j| {
                        let (lo, hi) = (i.min(j), i.max(j));
                        let v = corr_ii[lo][hi][q] - mean_i[i][q] * mean_i[j][q];
                        if i == j {
                            v + params.eps
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        let cov: Vec<f64> = (0..c).map(|i| corr_ip[i][q] - mean_i[i][q] * mean_p[q]).collect();
        let a = solve_small(sigma, cov);
        coef_b[q] = mean_p[q] - (0..c).map(|i| a[i] * mean_i[i][q]).sum::<f64>();
        for i in 0..c {
            coef_a[i][q] = a[i];
        }
    }
    let mean_a: Vec<Vec<f64>> = coef_a.iter().map(|a| bx.mean(a, &count)).collect();
    let mean_b = bx.mean(&coef_b, &count);
    let out = (0..px)
        .map(|q| T::lit(mean_b[q] + (0..c).map(|i| mean_a[i][q] * chan[i][q]).sum::<f64>()))
        .collect();
    DepthMap::new(w, h, out)
}

/// Anything that turns an image and its zone grid into a depth map.
pub trait DepthPredictor<T> {
    fn name(&self) -> String;

    /// Whether predictions carry metric scale without ground-truth alignment.
    fn scale_aware(&self) -> bool;

    /// Prediction and the scale recovered for it (1 when none is applied).
    fn predict(&self, image: &Image<T>, zones: &ZoneGrid<T>) -> Result<(DepthMap<T>, T)>;
}

impl<T: Scalar> DepthPredictor<T> for Models<T> {
    fn name(&self) -> String {
        "model".into()
    }

    fn scale_aware(&self) -> bool {
        self.config.scale_mode != ScaleMode::None
    }

    fn predict(&self, image: &Image<T>, zones: &ZoneGrid<T>) -> Result<(DepthMap<T>, T)> {
        self.predict_depth_scaled(image, zones)
    }
}

/// Nearest-zone upsampling of the sensor reading.
#[derive(Clone, Copy, Debug, Default)]
pub struct NearestNeighbour;

impl<T: Scalar> DepthPredictor<T> for NearestNeighbour {
    fn name(&self) -> String {
        "nn".into()
    }

    fn scale_aware(&self) -> bool {
        true
    }

    fn predict(&self, image: &Image<T>, zones: &ZoneGrid<T>) -> Result<(DepthMap<T>, T)> {
        Ok((baseline_nn(zones, image.width, image.height)?, T::one()))
    }
}

/// Nearest-zone upsampling followed by a guided filter on the RGB image.
#[derive(Clone, Copy, Debug, Default)]
pub struct GuidedFilter(pub GuidedFilterParams);

impl<T: Scalar> DepthPredictor<T> for GuidedFilter {
    fn name(&self) -> String {
        "gf".into()
    }

    fn scale_aware(&self) -> bool {
        true
    }

    fn predict(&self, image: &Image<T>, zones: &ZoneGrid<T>) -> Result<(DepthMap<T>, T)> {
        let nn = baseline_nn(zones, image.width, image.height)?;
        Ok((baseline_guided_filter(&nn, image, self.0)?, T::one()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Predictions are compared as they are.
    #[default]
    ScaleAware,
    /// Each prediction is aligned to ground truth by the ratio of medians.
    MedianScaled,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale_aware" => Ok(Self::ScaleAware),
            "median_scaled" => Ok(Self::MedianScaled),
            _ => Err(Error::config("protocol", format!("unknown protocol `{s}`"))),
        }
    }
}

/// Single-frame test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample<T> {
    pub image: Image<T>,
    pub zones: ZoneGrid<T>,
    pub gt: DepthMap<T>,
}

impl<T: Scalar> EvalSample<T> {
    /// The target frame of a triplet; fails without ground truth.
    pub fn from_triplet(t: &FrameTriplet<T>) -> Result<Self> {
        Ok(Self {
            image: t.target.clone(),
            zones: t.target_zones.clone(),
            gt: t
                .gt_depth
                .clone()
                .ok_or_else(|| Error::InvalidArgument("test frame has no ground-truth depth".into()))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub sparsity_ratio: f64,
    pub seed: u64,
    pub depth_cap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::ScaleAware,
            sparsity_ratio: 0.0,
            seed: 0,
            depth_cap: DEFAULT_DEPTH_CAP,
        }
    }
}

impl EvalConfig {
    /// Seed of the sparsity pattern applied to sample `index`.
    pub fn sample_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
    }
}

/// Outcome for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    /// Scale recovered by the predictor from the zones.
    pub recovered_scale: f64,
    /// Ground-truth alignment factor; 1 under the scale-aware protocol.
    pub median_scale: f64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome<T> {
    pub report: MetricsReport,
    pub samples: Vec<SampleRecord>,
    /// Final predictions, after any alignment.
    pub predictions: Vec<DepthMap<T>>,
}

impl<T: Scalar> EvalOutcome<T> {
    pub const SAMPLE_CSV_HEADER: &'static str =
        "index,recovered_scale,median_scale,abs_rel,sq_rel,rmse,rmse_log,log10,a1,a2,a3";

    pub fn samples_csv(&self) -> String {
        let mut s = format!("{}\n", Self::SAMPLE_CSV_HEADER);
        for r in &self.samples {
            s.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                r.index,
                r.recovered_scale,
                r.median_scale,
                r.metrics.csv_row()
            ));
        }
        s
    }

    /// Writes `metrics.csv`, `metrics.txt` and `samples.csv` to `dir`, and with
    /// `dump` the predictions (16-bit millimeter PNG) and relative-error maps
    /// (8-bit, saturating at 100 %).
    pub fn write(&self, dir: &Path, dump: Option<&[EvalSample<T>]>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        put(
            "metrics.csv",
            format!("{}\n{}\n", MetricsReport::CSV_HEADER, self.report.csv_row()),
        )?;
        put("metrics.txt", format!("{}\n", self.report))?;
        put("samples.csv", self.samples_csv())?;
        if let Some(samples) = dump {
            for (i, (pred, s)) in self.predictions.iter().zip(samples).enumerate() {
                let (w, h) = (pred.width as u32, pred.height as u32);
                let mm = image::ImageBuffer::<image::Luma<u16>, _>::from_fn(w, h, |x, y| {
                    let v = pred.at(y as usize, x as usize).as_f64();
                    image::Luma([(v * 1000.0).round().clamp(0.0, 65535.0) as u16])
                });
                let err = image::GrayImage::from_fn(w, h, |x, y| {
                    let (y, x) = (y as usize, x as usize);
                    let g = s.gt.at(y, x).as_f64();
                    let e = if s.gt.is_valid(y, x) && g > 0.0 {
                        (pred.at(y, x).as_f64() - g).abs() / g
                    } else {
                        0.0
                    };
                    image::Luma([(e.min(1.0) * 255.0).round() as u8])
                });
                for (name, res) in [
                    (
                        format!("pred_{i:06}.png"),
                        mm.save(dir.join(format!("pred_{i:06}.png"))),
                    ),
                    (
                        format!("error_{i:06}.png"),
                        err.save(dir.join(format!("error_{i:06}.png"))),
                    ),
                ] {
                    res.map_err(|e| Error::data(dir.join(name), e.to_string()))?;
                }
            }
        }
        Ok(())
    }
}

/// Runs `predictor` on every sample after injecting sparsity.
pub fn evaluate<T: Scalar, P: DepthPredictor<T> + ?Sized>(
    predictor: &P,
    samples: &[EvalSample<T>],
    cfg: &EvalConfig,
) -> Result<EvalOutcome<T>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no evaluation sample".into()));
    }
    match (cfg.protocol, predictor.scale_aware()) {
        (Protocol::MedianScaled, true) => log::warn!(
            "median-scaled protocol on scale-aware predictor `{}`; results ignore its metric scale",
            predictor.name()
        ),
        (Protocol::ScaleAware, false) => log::warn!(
            "scale-aware protocol on scale-ambiguous predictor `{}`",
            predictor.name()
        ),
        _ => {}
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let zones = inject_sparsity(&s.zones, cfg.sparsity_ratio, cfg.sample_seed(index))?;
        let (pred, recovered) = predictor.predict(&s.image, &zones)?;
        let (pred, median_scale) = match cfg.protocol {
            Protocol::ScaleAware => (pred, T::one()),
            Protocol::MedianScaled => eval_median_scaling(&pred, &s.gt)?,
        };
        let metrics = depth_metrics(&pred, &s.gt, cfg.depth_cap)?;
        log::debug!("sample {index}: scale {recovered:?}, abs_rel {:.4}", metrics.abs_rel);
        records.push(SampleRecord {
            index,
            recovered_scale: recovered.as_f64(),
            median_scale: median_scale.as_f64(),
            metrics,
        });
        predictions.push(pred);
    }
    let per_image: Vec<MetricsReport> = records.iter().map(|r| r.metrics.clone()).collect();
    Ok(EvalOutcome {
        report: MetricsReport::mean(&per_image)?,
        samples: records,
        predictions,
    })
}

/// Loads a checkpoint and evaluates its DepthNet.
pub fn evaluate_model<T: Scalar>(
    checkpoint: &Path,
    samples: &[EvalSample<T>],
    cfg: &EvalConfig,
) -> Result<EvalOutcome<T>> {
    let ck = Checkpoint::<T>::load(checkpoint)?;
    let models = Models::from_params(ck.config, ck.params)?;
    evaluate(&models, samples, cfg)
}

/// Mean pose errors of PoseNet against the ground-truth target-to-source
/// transforms of `triplets`. Returns `(rot_deg, tr_deg)`.
pub fn evaluate_poses<T: Scalar>(models: &Models<T>, triplets: &[FrameTriplet<T>]) -> Result<(f64, Option<f64>)> {
    let mut rot = Vec::new();
    let mut tr = Vec::new();
    for t in triplets {
        let gt = t
            .gt_poses
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("triplet has no ground-truth poses".into()))?;
        for (src, gt) in t.sources.iter().zip(gt) {
            let pred = models.predict_pose(&t.target, &t.target_zones, &src.image, &src.zones)?;
            let (r, d) = pose_metrics(&pred, gt);
            rot.push(r);
            tr.extend(d);
        }
    }
    if rot.is_empty() {
        return Err(Error::InvalidArgument("no pose to evaluate".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&rot), (!tr.is_empty()).then(|| mean(&tr))))
}
