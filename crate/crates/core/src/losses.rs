//! Training objectives: photometric reconstruction, edge-aware smoothness and
//! zone depth consistency, plus their weighted sum.
//!
//! Every loss has a differentiable form over batched `[n, c, h, w]` vars used
//! by the training loop, and a plain form over [`Image`] / [`DepthMap`].

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::maps::{DepthMap, Image};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tofsim::{ZoneGrid, ZoneIndex};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Weights of the combined objective and the SSIM/L1 mix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_ph: f64,
    pub w_s: f64,
    pub w_dc: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_ph: 1.0,
            w_s: 0.1,
            w_dc: 0.01,
            alpha: 0.85,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_ph", self.w_ph), ("w_s", self.w_s), ("w_dc", self.w_dc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("weight must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(
                "alpha",
                format!("must lie in [0, 1], got {}", self.alpha),
            ));
        }
        Ok(())
    }
}

/// How several reconstructions of the same target are combined per pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceReduction {
    #[default]
    Min,
    Average,
}

/// Reduction of the zone consistency term over zones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneReduction {
    #[default]
    Sum,
    Mean,
}

/// Per-pixel SSIM of two `[n, c, h, w]` vars over 3x3 reflect-padded windows.
pub fn ssim_var<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let mu_a = a.avg_pool3_reflect();
    let mu_b = b.avg_pool3_reflect();
    let sigma_a = a.square().avg_pool3_reflect().sub(mu_a.square());
    let sigma_b = b.square().avg_pool3_reflect().sub(mu_b.square());
    let sigma_ab = a.mul(b).avg_pool3_reflect().sub(mu_a.mul(mu_b));
    let num = mu_a
        .mul(mu_b)
        .mul_scalar(T::lit(2.0))
        .add_scalar(c1)
        .mul(sigma_ab.mul_scalar(T::lit(2.0)).add_scalar(c2));
    let den = mu_a
        .square()
        .add(mu_b.square())
        .add_scalar(c1)
        .mul(sigma_a.add(sigma_b).add_scalar(c2));
    num.div(den)
}

/// `alpha (1 - SSIM) / 2 + (1 - alpha) |a - b|`, averaged over channels.
pub fn photometric_error_var<'g, T: Scalar>(target: Var<'g, T>, recon: Var<'g, T>, alpha: f64) -> Var<'g, T> {
    let alpha = T::lit(alpha);
    let half = T::lit(0.5);
    let structural = ssim_var(target, recon)
        .neg()
        .add_scalar(T::one())
        .mul_scalar(alpha * half);
    let l1 = target.sub(recon).abs().mul_scalar(T::one() - alpha);
    structural.add(l1).mean_channels()
}

/// Photometric loss over one or more masked reconstructions of `target`.
///
/// Masks are `[n * h * w]`. Per-pixel errors are reduced over sources, then
/// averaged over pixels valid in every source. The flag is true when no such
/// pixel exists, in which case the loss is zero.
pub fn photometric_loss_var<'g, T: Scalar>(
    target: Var<'g, T>,
    recons: &[(Var<'g, T>, Rc<Vec<bool>>)],
    alpha: f64,
    reduction: SourceReduction,
) -> (Var<'g, T>, bool) {
    assert!(!recons.is_empty(), "photometric loss needs a reconstruction");
    let errors: Vec<Var<'g, T>> = recons
        .iter()
        .map(|(r, _)| photometric_error_var(target, *r, alpha))
        .collect();
    let per_pixel = match reduction {
        SourceReduction::Min => errors[1..].iter().fold(errors[0], |acc, e| acc.minimum(*e)),
        SourceReduction::Average => target
            .graph()
            .add_all(&errors)
            .mul_scalar(T::lit(errors.len() as f64).recip()),
    };
    let len = recons[0].1.len();
    let joint: Vec<bool> = (0..len).map(|i| recons.iter().all(|(_, m)| m[i])).collect();
    let degenerate = !joint.iter().any(|&v| v);
    if degenerate {
        log::warn!("photometric loss has no jointly valid pixel");
    }
    (per_pixel.masked_mean(Rc::new(joint)), degenerate)
}

/// Edge-aware smoothness of mean-normalized disparity `[n, 1, h, w]`.
pub fn smoothness_loss_var<'g, T: Scalar>(disp: Var<'g, T>, image: Var<'g, T>) -> Result<Var<'g, T>> {
    let means = disp.mean_per_item();
    if means.value().data().iter().any(|&m| !(m > T::zero())) {
        return Err(Error::Degenerate("disparity has non-positive mean".into()));
    }
    let norm = disp.mul_per_item(means.recip());
    let edge_x = image.diff_x().abs().mean_channels().neg().exp();
    let edge_y = image.diff_y().abs().mean_channels().neg().exp();
    let gx = norm.diff_x().abs().mul(edge_x).mean();
    let gy = norm.diff_y().abs().mul(edge_y).mean();
    Ok(gx.add(gy))
}

/// Squared distance between measured and predicted zone moments.
///
/// `depth` is `[n, 1, h, w]` with one grid per batch item. Zones invalid in a
/// grid contribute nothing; the result is averaged over the batch.
pub fn depth_consistency_loss_var<'g, T: Scalar>(
    depth: Var<'g, T>,
    grids: &[&ZoneGrid<T>],
    index: &Rc<ZoneIndex>,
    reduction: ZoneReduction,
) -> Var<'g, T> {
    let n = depth.shape()[0];
    assert_eq!(grids.len(), n, "one zone grid per batch item");
    let zones = index.layout.zones();
    let mut target = Tensor::zeros(&[n, 2, zones]);
    let mut weight = Tensor::zeros(&[n, 2, zones]);
    for (b, grid) in grids.iter().enumerate() {
        assert_eq!(grid.layout(), index.layout, "zone grid layout mismatch");
        let count = grid.valid_count();
        let w = match reduction {
            ZoneReduction::Sum => T::one(),
            ZoneReduction::Mean if count > 0 => T::lit(count as f64).recip(),
            ZoneReduction::Mean => T::zero(),
        };
        for z in 0..zones {
            if grid.valid[z] {
                target[b * 2 * zones + z] = grid.mean[z];
                target[(b * 2 + 1) * zones + z] = grid.std[z];
                weight[b * 2 * zones + z] = w;
                weight[(b * 2 + 1) * zones + z] = w;
            }
        }
    }
    let g = depth.graph();
    let valid: Vec<bool> = weight.data().iter().map(|&w| w > T::zero()).collect();
    depth
        .zone_moments(index.clone())
        .sub(g.constant(target))
        .mask(Rc::new(valid))
        .square()
        .mul(g.constant(weight))
        .sum()
        .mul_scalar(T::lit(n as f64).recip())
}

/// Values of the three terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ph: f64,
    pub s: f64,
    pub dc: f64,
    pub total: f64,
}

impl LossParts {
    pub const CSV_HEADER: &'static str = "step,l_ph,l_s,l_dc,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{}", self.ph, self.s, self.dc, self.total)
    }
}

/// Weighted sum of finite parts; a non-finite part aborts the step.
pub fn total_loss(ph: f64, s: f64, dc: f64, weights: &LossWeights) -> Result<LossParts> {
    for (name, v) in [("photometric", ph), ("smoothness", s), ("depth consistency", dc)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {v}")));
        }
    }
    Ok(LossParts {
        ph,
        s,
        dc,
        total: weights.w_ph * ph + weights.w_s * s + weights.w_dc * dc,
    })
}

/// Differentiable counterpart of [`total_loss`].
pub fn total_loss_var<'g, T: Scalar>(
    ph: Var<'g, T>,
    s: Var<'g, T>,
    dc: Var<'g, T>,
    weights: &LossWeights,
) -> Result<(Var<'g, T>, LossParts)> {
    let parts = total_loss(ph.item().as_f64(), s.item().as_f64(), dc.item().as_f64(), weights)?;
    let total = ph
        .mul_scalar(T::lit(weights.w_ph))
        .add(s.mul_scalar(T::lit(weights.w_s)))
        .add(dc.mul_scalar(T::lit(weights.w_dc)));
    Ok((total, parts))
}

/// Per-pixel SSIM map of two images.
pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<Image<T>> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("ssim inputs differ in shape".into()));
    }
    let g = Graph::new();
    let out = ssim_var(g.constant(a.to_tensor()), g.constant(b.to_tensor()));
    Ok(Image::from_tensor(&out.value(), 0))
}

/// Photometric loss of one target against masked reconstructions.
///
/// Returns the loss and whether it was degenerate (no jointly valid pixel).
pub fn photometric_loss<T: Scalar>(
    target: &Image<T>,
    recons: &[(Image<T>, Vec<bool>)],
    alpha: f64,
    reduction: SourceReduction,
) -> Result<(T, bool)> {
    if recons.is_empty() {
        return Err(Error::InvalidArgument("no reconstruction given".into()));
    }
    let plane = target.height * target.width;
    for (r, m) in recons {
        if !r.same_shape(target) || m.len() != plane {
            return Err(Error::ShapeMismatch("reconstruction does not match target".into()));
        }
    }
    let g = Graph::new();
    let t = g.constant(target.to_tensor());
    let vars: Vec<_> = recons
        .iter()
        .map(|(r, m)| (g.constant(r.to_tensor()), Rc::new(m.clone())))
        .collect();
    let (loss, degenerate) = photometric_loss_var(t, &vars, alpha, reduction);
    Ok((loss.item(), degenerate))
}

pub fn smoothness_loss<T: Scalar>(disp: &DepthMap<T>, image: &Image<T>) -> Result<T> {
    if (disp.height, disp.width) != (image.height, image.width) {
        return Err(Error::ShapeMismatch("disparity and image differ in size".into()));
    }
    let g = Graph::new();
    Ok(smoothness_loss_var(g.constant(disp.to_tensor()), g.constant(image.to_tensor()))?.item())
}

pub fn depth_consistency_loss<T: Scalar>(
    pred: &DepthMap<T>,
    grid: &ZoneGrid<T>,
    reduction: ZoneReduction,
) -> Result<T> {
    let layout = grid.layout();
    if (pred.height, pred.width) != (layout.image_height, layout.image_width) {
        return Err(Error::ShapeMismatch("prediction does not cover the zone layout".into()));
    }
    let g = Graph::new();
    let index = ZoneIndex::new(layout);
    let loss = depth_consistency_loss_var(g.constant(pred.to_tensor()), &[grid], &index, reduction);
    Ok(loss.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tofsim::{fit_zones, ZoneLayout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image<f64> {
        Image::from_fn(c, h, w, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn ssim_identity_and_opposite_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 3, 9, 11);
        assert!(ssim(&a, &a).unwrap().data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let zero = Image::filled(1, 6, 6, 0.0f64);
        let one = Image::filled(1, 6, 6, 1.0f64);
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        for v in ssim(&zero, &one).unwrap().data {
            assert!((v - expected).abs() < 1e-12 && v < 0.01);
        }
    }

    #[test]
    fn photometric_fixed_point_and_constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 3, 8, 8);
        let full = vec![true; 64];
        let (l, deg) = photometric_loss(&a, &[(a.clone(), full.clone())], 0.85, SourceReduction::Min).unwrap();
        assert!(l.abs() < 1e-12 && !deg);

        let flat = Image::filled(3, 8, 8, 0.4f64);
        let shifted = Image::filled(3, 8, 8, 0.5f64);
        let (mu_x, mu_y) = (0.4f64, 0.5f64);
        let s = (2.0 * mu_x * mu_y + SSIM_C1) / (mu_x * mu_x + mu_y * mu_y + SSIM_C1);
        let expected = 0.15 * 0.1 + 0.85 * (1.0 - s) / 2.0;
        let (l, _) = photometric_loss(&flat, &[(shifted.clone(), full.clone())], 0.85, SourceReduction::Min).unwrap();
        assert!((l - expected).abs() < 1e-9, "{l} vs {expected}");

        let (two, _) = photometric_loss(
            &a,
            &[
                (a.clone(), full.clone()),
                (random_image(&mut rng, 3, 8, 8), full.clone()),
            ],
            0.85,
            SourceReduction::Min,
        )
        .unwrap();
        assert!(two.abs() < 1e-12);

        let (empty, deg) = photometric_loss(&a, &[(shifted, vec![false; 64])], 0.85, SourceReduction::Min).unwrap();
        assert!(deg && empty == 0.0);
    }

    #[test]
    fn smoothness_ramp_and_edges() {
        let flat = Image::filled(3, 6, 10, 0.5f64);
        let constant = DepthMap::constant(10, 6, 0.7f64);
        assert_eq!(smoothness_loss(&constant, &flat).unwrap(), 0.0);

        // disp = 1 + 0.1 x: slope 0.1, mean 1.45
        let ramp = DepthMap::from_fn(10, 6, |_, x| 1.0 + 0.1 * x as f64);
        let l = smoothness_loss(&ramp, &flat).unwrap();
        assert!((l - 0.1 / 1.45).abs() < 1e-12);

        let edges = Image::from_fn(3, 6, 10, |_, _, x| 0.1 * x as f64);
        assert!(smoothness_loss(&ramp, &edges).unwrap() < l);
        assert!(smoothness_loss(&DepthMap::constant(10, 6, 0.0f64), &flat).is_err());
    }

    #[test]
    fn consistency_fixed_point_and_single_zone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DepthMap::from_fn(16, 16, |_, _| rng.random_range(0.5..3.0));
        let grid = fit_zones(&d, 4, 4).unwrap();
        assert!(depth_consistency_loss(&d, &grid, ZoneReduction::Sum).unwrap() < 1e-24);

        let layout = ZoneLayout::new(2, 2, 8, 8).unwrap();
        let mut g = ZoneGrid::uniform(layout, 1.0f64, 0.0);
        for z in 1..4 {
            g.invalidate(z);
        }
        let pred = DepthMap::constant(8, 8, 2.0f64);
        assert_eq!(depth_consistency_loss(&pred, &g, ZoneReduction::Sum).unwrap(), 1.0);
        for z in 0..4 {
            g.invalidate(z);
        }
        assert_eq!(depth_consistency_loss(&pred, &g, ZoneReduction::Sum).unwrap(), 0.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let p = total_loss(1.0, 1.0, 1.0, &LossWeights::default()).unwrap();
        assert!((p.total - 1.11).abs() < 1e-15);
        let zero = LossWeights {
            w_ph: 0.0,
            w_s: 0.0,
            w_dc: 0.0,
            alpha: 0.85,
        };
        assert_eq!(total_loss(0.3, 2.0, 5.0, &zero).unwrap().total, 0.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, &LossWeights::default()).is_err());
        assert_eq!(p.csv_row(3), "3,1,1,1,1.11");
    }
}
