//! Metric scale recovery from zone measurements.
//!
//! Medians of even-length sets are the mean of the two middle values.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::maps::DepthMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tofsim::{ZoneGrid, ZoneIndex};

/// How the training loop turns relative depth into metric depth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Median of per-zone median ratios.
    #[default]
    Mms,
    /// Ratio of global medians.
    Ms,
    /// Keep the network output as is.
    None,
}

/// Median of `values`, with the positions (and weights) of the middle elements.
///
/// Returns `None` for an empty slice.
pub fn median_with_support<T: Scalar>(values: &[T]) -> Option<(T, Vec<(usize, T)>)> {
    if values.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("finite values")
            .then(a.cmp(&b))
    });
    let n = order.len();
    if n % 2 == 1 {
        let i = order[n / 2];
        Some((values[i], vec![(i, T::one())]))
    } else {
        let (i, j) = (order[n / 2 - 1], order[n / 2]);
        let half = T::lit(0.5);
        Some(((values[i] + values[j]) * half, vec![(i, half), (j, half)]))
    }
}

pub fn median<T: Scalar>(values: &[T]) -> Option<T> {
    median_with_support(values).map(|(m, _)| m)
}

fn check_layout<T: Scalar>(d: &DepthMap<T>, grid: &ZoneGrid<T>) -> Result<()> {
    let l = grid.layout();
    if (d.height, d.width) != (l.image_height, l.image_width) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} prediction against a zone layout for {}x{}",
            d.width, d.height, l.image_width, l.image_height
        )));
    }
    Ok(())
}

fn valid_means<T: Scalar>(grid: &ZoneGrid<T>) -> Vec<T> {
    (0..grid.zones())
        .filter(|&z| grid.valid[z])
        .map(|z| grid.mean[z])
        .collect()
}

/// Scale from the ratio of the zone-mean median to the prediction median over
/// all valid-zone footprints.
pub fn ms_scale<T: Scalar>(d: &DepthMap<T>, grid: &ZoneGrid<T>) -> Result<T> {
    check_layout(d, grid)?;
    let num = median(&valid_means(grid)).ok_or(Error::NoScaleAvailable)?;
    let layout = grid.layout();
    let mut pixels = Vec::new();
    for z in (0..grid.zones()).filter(|&z| grid.valid[z]) {
        pixels.extend(
            layout
                .footprint(z)
                .pixels(d.width)
                .filter(|&i| d.valid[i])
                .map(|i| d.values[i]),
        );
    }
    let den = median(&pixels).ok_or(Error::NoScaleAvailable)?;
    if !(den > T::zero()) {
        return Err(Error::NoScaleAvailable);
    }
    Ok(num / den)
}

/// Per-zone scales `mean_i / median(d over zone i)`, as `(zone, scale)`.
///
/// Zones without a positive prediction median are skipped.
pub fn zone_scales<T: Scalar>(d: &DepthMap<T>, grid: &ZoneGrid<T>) -> Result<Vec<(usize, T)>> {
    check_layout(d, grid)?;
    let layout = grid.layout();
    let mut out = Vec::new();
    for z in (0..grid.zones()).filter(|&z| grid.valid[z]) {
        let pixels: Vec<T> = layout
            .footprint(z)
            .pixels(d.width)
            .filter(|&i| d.valid[i])
            .map(|i| d.values[i])
            .collect();
        if let Some(m) = median(&pixels) {
            if m > T::zero() {
                out.push((z, grid.mean[z] / m));
            }
        }
    }
    Ok(out)
}

pub fn mms_scale<T: Scalar>(d: &DepthMap<T>, grid: &ZoneGrid<T>) -> Result<T> {
    let scales: Vec<T> = zone_scales(d, grid)?.into_iter().map(|(_, s)| s).collect();
    median(&scales).ok_or(Error::NoScaleAvailable)
}

pub fn median_scaling_ms<T: Scalar>(d: &DepthMap<T>, grid: &ZoneGrid<T>) -> Result<(DepthMap<T>, T)> {
    let s = ms_scale(d, grid)?;
    Ok((d.scaled(s), s))
}

pub fn median_of_median_scaling_mms<T: Scalar>(d: &DepthMap<T>, grid: &ZoneGrid<T>) -> Result<(DepthMap<T>, T)> {
    let s = mms_scale(d, grid)?;
    Ok((d.scaled(s), s))
}

/// Aligns a scale-ambiguous prediction to ground truth by the ratio of
/// medians over jointly valid pixels.
pub fn eval_median_scaling<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<(DepthMap<T>, T)> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::ShapeMismatch(
            "prediction and ground truth differ in size".into(),
        ));
    }
    let joint: Vec<usize> = (0..pred.len()).filter(|&i| pred.valid[i] && gt.valid[i]).collect();
    let p: Vec<T> = joint.iter().map(|&i| pred.values[i]).collect();
    let g: Vec<T> = joint.iter().map(|&i| gt.values[i]).collect();
    let (Some(mp), Some(mg)) = (median(&p), median(&g)) else {
        return Err(Error::EmptyOverlap);
    };
    let s = mg / mp;
    Ok((pred.scaled(s), s))
}

/// Per-item scales of a `[n, 1, h, w]` depth var, one grid per item.
///
/// Gradients reach only the pixels that realise the selected medians. Items
/// without a usable zone get scale 1 and a `false` flag.
pub fn recover_scale_var<'g, T: Scalar>(
    depth: Var<'g, T>,
    grids: &[&ZoneGrid<T>],
    index: &Rc<ZoneIndex>,
    mode: ScaleMode,
) -> (Var<'g, T>, Vec<bool>) {
    let d = depth.value();
    let (n, c, h, w) = d.dims4();
    assert_eq!(c, 1);
    assert_eq!(grids.len(), n, "one zone grid per batch item");
    let mut scales = Tensor::full(&[n], T::one());
    let mut ok = vec![false; n];
    // d(scale_b) / d(pixel) as sparse (flat index, weight) lists
    let mut jac: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
    for (b, grid) in grids.iter().enumerate() {
        let img = d.item(b);
        let base = b * h * w;
        let picked = match mode {
            ScaleMode::None => None,
            ScaleMode::Ms => ms_support(img, grid, index),
            ScaleMode::Mms => mms_support(img, grid, index),
        };
        if let Some((s, support)) = picked {
            scales[b] = s;
            ok[b] = true;
            jac[b] = support.into_iter().map(|(i, wt)| (base + i, wt)).collect();
        }
    }
    let scale = depth.graph().custom(
        &[depth],
        scales,
        Box::new(move |g, xs, _, _| {
            let mut gx = Tensor::zeros(xs[0].shape());
            for (b, entries) in jac.iter().enumerate() {
                for &(i, wt) in entries {
                    gx[i] += g[b] * wt;
                }
            }
            vec![Some(gx)]
        }),
    );
    (scale, ok)
}

fn footprint_values<T: Scalar>(img: &[T], index: &ZoneIndex, z: usize) -> (Vec<T>, Vec<usize>) {
    let ids: Vec<usize> = index
        .pixels(z)
        .iter()
        .copied()
        .filter(|&i| img[i].is_finite() && img[i] > T::zero())
        .collect();
    (ids.iter().map(|&i| img[i]).collect(), ids)
}

// scale = c / med  =>  d scale / d med = -c / med^2
fn ms_support<T: Scalar>(img: &[T], grid: &ZoneGrid<T>, index: &ZoneIndex) -> Option<(T, Vec<(usize, T)>)> {
    let num = median(&valid_means(grid))?;
    let (mut vals, mut ids) = (Vec::new(), Vec::new());
    for z in (0..grid.zones()).filter(|&z| grid.valid[z]) {
        let (v, i) = footprint_values(img, index, z);
        vals.extend(v);
        ids.extend(i);
    }
    let (den, support) = median_with_support(&vals)?;
    if !(den > T::zero()) {
        return None;
    }
    let dsd = -num / (den * den);
    Some((
        num / den,
        support.into_iter().map(|(k, wt)| (ids[k], wt * dsd)).collect(),
    ))
}

fn mms_support<T: Scalar>(img: &[T], grid: &ZoneGrid<T>, index: &ZoneIndex) -> Option<(T, Vec<(usize, T)>)> {
    let mut ratios = Vec::new();
    let mut partials: Vec<Vec<(usize, T)>> = Vec::new();
    for z in (0..grid.zones()).filter(|&z| grid.valid[z]) {
        let (vals, ids) = footprint_values(img, index, z);
        let Some((m, support)) = median_with_support(&vals) else {
            continue;
        };
        if !(m > T::zero()) {
            continue;
        }
        let c = grid.mean[z];
        ratios.push(c / m);
        let dsd = -c / (m * m);
        partials.push(support.into_iter().map(|(k, wt)| (ids[k], wt * dsd)).collect());
    }
    let (s, picked) = median_with_support(&ratios)?;
    let mut jac = Vec::new();
    for (k, wt) in picked {
        jac.extend(partials[k].iter().map(|&(i, p)| (i, p * wt)));
    }
    Some((s, jac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{max_rel_error, probe_gradients};
    use crate::tofsim::{fit_zones, ZoneLayout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sorted_median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    }

    #[test]
    fn median_convention() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median::<f64>(&[]), None);
    }

    #[test]
    fn homogeneity_of_ms_and_mms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layout = ZoneLayout::new(8, 8, 32, 32).unwrap();
        let per_zone: Vec<f64> = (0..64).map(|_| rng.random_range(0.5..5.0)).collect();
        let gt = DepthMap::new(32, 32, layout.paint(&per_zone)).unwrap();
        let grid = fit_zones(&gt, 8, 8).unwrap();
        assert!((ms_scale(&gt, &grid).unwrap() - 1.0).abs() < 1e-6);
        assert!((mms_scale(&gt, &grid).unwrap() - 1.0).abs() < 1e-6);
        let half = gt.scaled(0.5);
        for s in [ms_scale(&half, &grid).unwrap(), mms_scale(&half, &grid).unwrap()] {
            assert!((s - 2.0).abs() < 1e-6);
        }

        // arbitrary fields: the recovered scale is homogeneous of degree -1
        let gt = DepthMap::from_fn(32, 32, |_, _| rng.random_range(0.5f64..5.0));
        let grid = fit_zones(&gt, 8, 8).unwrap();
        let quarter = gt.scaled(0.25);
        assert_eq!(ms_scale(&quarter, &grid).unwrap(), 4.0 * ms_scale(&gt, &grid).unwrap());
        assert_eq!(
            mms_scale(&quarter, &grid).unwrap(),
            4.0 * mms_scale(&gt, &grid).unwrap()
        );
    }

    #[test]
    fn mms_ignores_minority_outliers_but_ms_does_not() {
        let layout = ZoneLayout::new(8, 8, 32, 32).unwrap();
        let d = DepthMap::constant(32, 32, 1.0f64);
        let mut mean = vec![2.0; 64];
        mean[5] = 10.0;
        mean[40] = 10.0;
        let g = ZoneGrid::from_parts(layout, mean.clone(), vec![0.0; 64], vec![true; 64]).unwrap();
        assert_eq!(mms_scale(&d, &g).unwrap(), 2.0);
        for m in mean.iter_mut().take(33) {
            *m = 10.0;
        }
        let g = ZoneGrid::from_parts(layout, mean, vec![0.0; 64], vec![true; 64]).unwrap();
        assert_eq!(ms_scale(&d, &g).unwrap(), 10.0);
    }

    #[test]
    fn scales_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let layout = ZoneLayout::new(4, 4, 12, 12).unwrap();
        for _ in 0..20 {
            let d = DepthMap::from_fn(12, 12, |_, _| rng.random_range(0.2..4.0));
            let mean: Vec<f64> = (0..16).map(|_| rng.random_range(0.5..5.0)).collect();
            let valid: Vec<bool> = (0..16).map(|_| rng.random_bool(0.7)).collect();
            let g = ZoneGrid::from_parts(layout, mean, vec![0.0; 16], valid).unwrap();
            if g.valid_count() == 0 {
                assert!(matches!(ms_scale(&d, &g), Err(Error::NoScaleAvailable)));
                continue;
            }
            let vm: Vec<f64> = (0..16).filter(|&z| g.valid[z]).map(|z| g.mean[z]).collect();
            let mut px = Vec::new();
            let mut ratios = Vec::new();
            for z in (0..16).filter(|&z| g.valid[z]) {
                let fp = layout.footprint(z);
                let zone: Vec<f64> = fp.pixels(12).map(|i| d.values[i]).collect();
                ratios.push(g.mean[z] / sorted_median(zone.clone()));
                px.extend(zone);
            }
            let ms = sorted_median(vm) / sorted_median(px);
            assert!((ms_scale(&d, &g).unwrap() - ms).abs() < 1e-12);
            assert!((mms_scale(&d, &g).unwrap() - sorted_median(ratios)).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = DepthMap::from_fn(10, 10, |_, _| rng.random_range(0.5..5.0));
        assert_eq!(eval_median_scaling(&gt, &gt).unwrap().0, gt);
        assert_eq!(eval_median_scaling(&gt.scaled(0.5), &gt).unwrap().0, gt);
        let none = DepthMap::constant(10, 10, 0.0);
        assert!(matches!(eval_median_scaling(&none, &gt), Err(Error::EmptyOverlap)));
    }

    #[test]
    fn in_graph_scale_matches_plain_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layout = ZoneLayout::new(3, 3, 9, 9).unwrap();
        let index = ZoneIndex::new(layout);
        let d = Tensor::from_fn(&[1, 1, 9, 9], |_| rng.random_range(0.5f64..3.0));
        let mean: Vec<f64> = (0..9).map(|_| rng.random_range(1.0..4.0)).collect();
        let g = ZoneGrid::from_parts(layout, mean, vec![0.0; 9], vec![true; 9]).unwrap();
        let dm = DepthMap::from_tensor(&d, 0);
        for (mode, plain) in [
            (ScaleMode::Ms, ms_scale(&dm, &g).unwrap()),
            (ScaleMode::Mms, mms_scale(&dm, &g).unwrap()),
        ] {
            let graph = crate::autograd::Graph::new();
            let (s, ok) = recover_scale_var(graph.constant(d.clone()), &[&g], &index, mode);
            assert!(ok[0]);
            assert_eq!(s.item(), plain);
            let probes: Vec<_> = (0..81).map(|i| (0, i)).collect();
            let res = probe_gradients(std::slice::from_ref(&d), &probes, 1e-7, |_, v| {
                recover_scale_var(v[0], &[&g], &index, mode).0.sum()
            });
            assert!(max_rel_error(&res, 1e-8) < 1e-5, "{mode:?}");
        }
    }
}
