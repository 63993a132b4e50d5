//! Multizone time-of-flight sensor model.
//!
//! The sensor reports, for each of its `rows x cols` zones, the mean and
//! standard deviation of the depths inside the zone's field of view. Zones are
//! axis-aligned with the RGB frame and tile it exactly.

use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::maps::DepthMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fraction of a footprint that must carry valid depth for the zone to report.
pub const MIN_VALID_FRACTION: f64 = 0.1;

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Footprint {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    /// Row-major pixel indices inside the rectangle, for an image `width` wide.
    pub fn pixels(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| y * width + x))
    }

    /// Pixel-space center.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.y0 + self.y1 - 1) as f64 / 2.0,
            (self.x0 + self.x1 - 1) as f64 / 2.0,
        )
    }
}

/// Mapping from zones to pixel footprints.
///
/// Each axis is split evenly; leftover pixels go to the last row or column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneLayout {
    pub rows: usize,
    pub cols: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl ZoneLayout {
    pub fn new(rows: usize, cols: usize, image_height: usize, image_width: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!("zone grid {rows}x{cols} has no zones")));
        }
        if rows > image_height || cols > image_width {
            return Err(Error::InvalidArgument(format!(
                "zone grid {rows}x{cols} is finer than the {image_width}x{image_height} image"
            )));
        }
        Ok(Self {
            rows,
            cols,
            image_height,
            image_width,
        })
    }

    pub fn zones(&self) -> usize {
        self.rows * self.cols
    }

    fn split(extent: usize, parts: usize, i: usize) -> (usize, usize) {
        let base = extent / parts;
        let end = if i + 1 == parts { extent } else { (i + 1) * base };
        (i * base, end)
    }

    pub fn footprint(&self, zone: usize) -> Footprint {
        let (r, c) = (zone / self.cols, zone % self.cols);
        let (y0, y1) = Self::split(self.image_height, self.rows, r);
        let (x0, x1) = Self::split(self.image_width, self.cols, c);
        Footprint { y0, y1, x0, x1 }
    }

    pub fn footprints(&self) -> Vec<Footprint> {
        (0..self.zones()).map(|z| self.footprint(z)).collect()
    }

    /// Zone index covering pixel `(y, x)`.
    pub fn zone_of(&self, y: usize, x: usize) -> usize {
        let base_r = self.image_height / self.rows;
        let base_c = self.image_width / self.cols;
        let r = (y / base_r).min(self.rows - 1);
        let c = (x / base_c).min(self.cols - 1);
        r * self.cols + c
    }

    /// Per-pixel zone index, row-major.
    pub fn zone_index_map(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.image_height * self.image_width);
        for y in 0..self.image_height {
            for x in 0..self.image_width {
                out.push(self.zone_of(y, x));
            }
        }
        out
    }

    /// Expands one value per zone to a full-resolution map.
    pub fn paint<T: Scalar>(&self, per_zone: &[T]) -> Vec<T> {
        assert_eq!(per_zone.len(), self.zones());
        self.zone_index_map().into_iter().map(|z| per_zone[z]).collect()
    }
}

/// One sensor reading: per-zone Gaussian moments plus a validity mask.
///
/// Invalid zones hold exactly zero in both `mean` and `std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ZoneGrid<T> {
    pub rows: usize,
    pub cols: usize,
    pub mean: Vec<T>,
    pub std: Vec<T>,
    pub valid: Vec<bool>,
    pub fov_mapping: ZoneLayout,
}

impl<T: Scalar> ZoneGrid<T> {
    /// Grid with every zone reporting `(mean, std)`.
    pub fn uniform(layout: ZoneLayout, mean: T, std: T) -> Self {
        let n = layout.zones();
        Self {
            rows: layout.rows,
            cols: layout.cols,
            mean: vec![mean; n],
            std: vec![std; n],
            valid: vec![true; n],
            fov_mapping: layout,
        }
    }

    /// Builds a grid from raw arrays, zeroing the moments of invalid zones.
    pub fn from_parts(layout: ZoneLayout, mean: Vec<T>, std: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        let n = layout.zones();
        if mean.len() != n || std.len() != n || valid.len() != n {
            return Err(Error::ShapeMismatch(format!("{} zones need {n} entries per field", n)));
        }
        let mut grid = Self {
            rows: layout.rows,
            cols: layout.cols,
            mean,
            std,
            valid,
            fov_mapping: layout,
        };
        for z in 0..n {
            let ok = grid.valid[z]
                && grid.mean[z].is_finite()
                && grid.mean[z] > T::zero()
                && grid.std[z].is_finite()
                && grid.std[z] >= T::zero();
            if !ok {
                grid.invalidate(z);
            }
        }
        Ok(grid)
    }

    pub fn layout(&self) -> ZoneLayout {
        self.fov_mapping
    }

    pub fn zones(&self) -> usize {
        self.rows * self.cols
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn invalidate(&mut self, zone: usize) {
        self.valid[zone] = false;
        self.mean[zone] = T::zero();
        self.std[zone] = T::zero();
    }

    /// Checks the documented invariants.
    pub fn check(&self) -> Result<()> {
        let n = self.zones();
        if self.fov_mapping.rows != self.rows || self.fov_mapping.cols != self.cols {
            return Err(Error::ShapeMismatch("zone grid and fov mapping disagree".into()));
        }
        if self.mean.len() != n || self.std.len() != n || self.valid.len() != n {
            return Err(Error::ShapeMismatch(format!("zone grid needs {n} entries per field")));
        }
        for z in 0..n {
            let ok = if self.valid[z] {
                self.mean[z].is_finite() && self.mean[z] > T::zero() && self.std[z] >= T::zero()
            } else {
                self.mean[z] == T::zero() && self.std[z] == T::zero()
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "zone {z} violates the validity invariant"
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ZoneGrid<U> {
        ZoneGrid {
            rows: self.rows,
            cols: self.cols,
            mean: self.mean.iter().map(|&v| U::lit(v.as_f64())).collect(),
            std: self.std.iter().map(|&v| U::lit(v.as_f64())).collect(),
            valid: self.valid.clone(),
            fov_mapping: self.fov_mapping,
        }
    }

    /// Network input: `[1, 1, rows, cols]` means (zero where invalid).
    pub fn input_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, 1, self.rows, self.cols], self.mean.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("zone grid serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let grid: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("zone grid record: {e}")))?;
        grid.check()?;
        Ok(grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::data(path, e.to_string()))
    }
}

/// Moment-matches a Gaussian to the valid depths inside each zone.
pub fn fit_zones<T: Scalar>(depth: &DepthMap<T>, rows: usize, cols: usize) -> Result<ZoneGrid<T>> {
    if depth.width == 0 || depth.height == 0 {
        return Err(Error::InvalidArgument("depth map is empty".into()));
    }
    let layout = ZoneLayout::new(rows, cols, depth.height, depth.width)?;
    let n = layout.zones();
    let mut grid = ZoneGrid {
        rows,
        cols,
        mean: vec![T::zero(); n],
        std: vec![T::zero(); n],
        valid: vec![false; n],
        fov_mapping: layout,
    };
    let mut samples = Vec::new();
    for z in 0..n {
        let fp = layout.footprint(z);
        samples.clear();
        samples.extend(
            fp.pixels(depth.width)
                .filter(|&i| depth.valid[i])
                .map(|i| depth.values[i]),
        );
        if samples.is_empty() || (samples.len() as f64) < MIN_VALID_FRACTION * fp.area() as f64 {
            continue;
        }
        let (mean, std) = moments(&samples);
        grid.mean[z] = mean;
        grid.std[z] = std;
        grid.valid[z] = true;
    }
    Ok(grid)
}

/// Sample mean and population standard deviation, two-pass.
///
/// The mean is clamped into the sample range so rounding never pushes it
/// outside `[min, max]`.
pub fn moments<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = T::lit(xs.len() as f64);
    let (lo, hi) = xs.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    let mean = (xs.iter().copied().sum::<T>() / n).max(lo).min(hi);
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

/// Drops `floor(ratio * valid_count)` valid zones, drawn without replacement.
pub fn inject_sparsity<T: Scalar>(grid: &ZoneGrid<T>, ratio: f64, seed: u64) -> Result<ZoneGrid<T>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("sparsity ratio {ratio} outside [0, 1]")));
    }
    let valid: Vec<usize> = (0..grid.zones()).filter(|&z| grid.valid[z]).collect();
    // The epsilon keeps ratios like 0.3 * 10 from flooring to 2.
    let count = ((ratio * valid.len() as f64) + 1e-9).floor() as usize;
    let count = count.min(valid.len());
    let mut out = grid.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in rand::seq::index::sample(&mut rng, valid.len(), count) {
        out.invalidate(valid[k]);
    }
    Ok(out)
}

/// `rows x cols` depth map: the mean where valid, zero elsewhere.
pub fn zones_to_lowres_map<T: Scalar>(grid: &ZoneGrid<T>) -> DepthMap<T> {
    DepthMap::with_validity(grid.cols, grid.rows, grid.mean.clone(), grid.valid.clone())
        .expect("grid arrays match its shape")
}

/// Nearest-neighbour expansion of a low-resolution map to the zone footprints.
pub fn upsample_nn<T: Scalar>(lowres: &DepthMap<T>, layout: &ZoneLayout) -> DepthMap<T> {
    assert_eq!((lowres.height, lowres.width), (layout.rows, layout.cols));
    let values = layout.paint(&lowres.values);
    let flags: Vec<T> = lowres
        .valid
        .iter()
        .map(|&v| if v { T::one() } else { T::zero() })
        .collect();
    let valid = layout.paint(&flags).into_iter().map(|f| f > T::zero()).collect();
    DepthMap::with_validity(layout.image_width, layout.image_height, values, valid).expect("layout matches")
}

/// Shared pixel-to-zone table used by the differentiable zone statistics.
#[derive(Debug)]
pub struct ZoneIndex {
    pub layout: ZoneLayout,
    pixels: Vec<Vec<usize>>,
}

impl ZoneIndex {
    pub fn new(layout: ZoneLayout) -> Rc<Self> {
        let pixels = layout
            .footprints()
            .iter()
            .map(|fp| fp.pixels(layout.image_width).collect())
            .collect();
        Rc::new(Self { layout, pixels })
    }

    pub fn pixels(&self, zone: usize) -> &[usize] {
        &self.pixels[zone]
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Per-zone mean and population std of a `[n, 1, h, w]` map.
    ///
    /// Returns `[n, 2, zones]` with means in channel 0 and stds in channel 1.
    /// The std gradient is taken as zero where the std itself is zero.
    pub fn zone_moments(self, index: Rc<ZoneIndex>) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, 1, "zone moments take a single-channel map");
        assert_eq!(
            (h, w),
            (index.layout.image_height, index.layout.image_width),
            "map does not match the zone layout"
        );
        let zones = index.layout.zones();
        let mut out = Tensor::zeros(&[n, 2, zones]);
        for b in 0..n {
            let img = x.item(b);
            for z in 0..zones {
                let vals: Vec<T> = index.pixels(z).iter().map(|&i| img[i]).collect();
                let (m, s) = plain_moments(&vals);
                out[(b * 2) * zones + z] = m;
                out[(b * 2 + 1) * zones + z] = s;
            }
        }
        let idx = index.clone();
        self.graph().custom(
            &[self],
            out,
            Box::new(move |g, inputs, out, _| {
                let x = &inputs[0];
                let (n, _, h, w) = x.dims4();
                let zones = idx.layout.zones();
                let mut gx = Tensor::zeros(x.shape());
                for b in 0..n {
                    let img = x.item(b);
                    let base = b * h * w;
                    for z in 0..zones {
                        let pix = idx.pixels(z);
                        let inv_n = T::one() / T::lit(pix.len() as f64);
                        let m = out[(b * 2) * zones + z];
                        let s = out[(b * 2 + 1) * zones + z];
                        let gm = g[(b * 2) * zones + z] * inv_n;
                        let gs = if s > T::zero() {
                            g[(b * 2 + 1) * zones + z] * inv_n / s
                        } else {
                            T::zero()
                        };
                        for &i in pix {
                            gx[base + i] += gm + gs * (img[i] - m);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

// Unclamped two-pass moments; the gradient rule assumes the plain mean.
fn plain_moments<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = T::lit(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{max_rel_error, probe_gradients};
    use rand::Rng;

    #[test]
    fn footprints_tile_the_image() {
        let layout = ZoneLayout::new(8, 8, 30, 37).unwrap();
        let mut hits = vec![0u32; 30 * 37];
        for fp in layout.footprints() {
            for i in fp.pixels(37) {
                hits[i] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
        let last = layout.footprint(63);
        assert_eq!((last.y0, last.y1, last.x0, last.x1), (21, 30, 28, 37));
        for (i, z) in layout.zone_index_map().into_iter().enumerate() {
            assert!(layout.footprint(z).contains(i / 37, i % 37));
        }
    }

    #[test]
    fn degenerate_grid_shapes_are_rejected() {
        let d = DepthMap::constant(16, 16, 1.0f64);
        assert!(fit_zones(&d, 0, 8).is_err());
        assert!(fit_zones(&d, 8, 0).is_err());
    }

    #[test]
    fn constant_and_two_value_zones() {
        let d = DepthMap::constant(64, 64, 2.0f64);
        let g = fit_zones(&d, 8, 8).unwrap();
        assert!(g.mean.iter().all(|&m| m == 2.0));
        assert!(g.std.iter().all(|&s| s == 0.0));
        assert_eq!(g.valid_count(), 64);

        let d = DepthMap::from_fn(16, 16, |_, x| if x % 2 == 0 { 1.0f64 } else { 3.0 });
        let g = fit_zones(&d, 2, 2).unwrap();
        assert!(g.mean.iter().all(|&m| m == 2.0));
        assert!(g.std.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn sparse_ground_truth_invalidates_zones() {
        // one valid pixel in a 4x4 zone is 6.25% coverage
        let d = DepthMap::from_fn(8, 8, |y, x| {
            if (y, x) == (0, 0) {
                1.0f64
            } else if y < 4 && x < 4 {
                0.0
            } else {
                2.0
            }
        });
        let g = fit_zones(&d, 2, 2).unwrap();
        assert!(!g.valid[0]);
        assert_eq!((g.mean[0], g.std[0]), (0.0, 0.0));
        assert!(g.valid[1..].iter().all(|&v| v));
        let empty = DepthMap::constant(8, 8, 0.0f64);
        assert_eq!(fit_zones(&empty, 2, 2).unwrap().valid_count(), 0);
    }

    #[test]
    fn sparsity_counts_and_replay() {
        let g = ZoneGrid::uniform(ZoneLayout::new(8, 8, 64, 64).unwrap(), 1.5f64, 0.1);
        assert_eq!(inject_sparsity(&g, 0.0, 3).unwrap(), g);
        assert_eq!(inject_sparsity(&g, 1.0, 3).unwrap().valid_count(), 0);
        let a = inject_sparsity(&g, 0.2, 11).unwrap();
        assert_eq!(64 - a.valid_count(), 12);
        assert_eq!(a, inject_sparsity(&g, 0.2, 11).unwrap());
        a.check().unwrap();
        assert!(inject_sparsity(&g, 1.5, 0).is_err());
        assert!(inject_sparsity(&g, f64::NAN, 0).is_err());
    }

    #[test]
    fn lowres_map_and_round_trip() {
        let layout = ZoneLayout::new(8, 8, 64, 48).unwrap();
        let mut g = ZoneGrid::uniform(layout, 1.5f64, 0.0);
        g.invalidate(9);
        let low = zones_to_lowres_map(&g);
        assert_eq!((low.width, low.height), (8, 8));
        assert_eq!(low.values[9], 0.0);
        assert!(low.values.iter().enumerate().all(|(i, &v)| i == 9 || v == 1.5));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let means: Vec<f64> = (0..64).map(|_| rng.random_range(0.5..4.0)).collect();
        let g = ZoneGrid::from_parts(layout, means.clone(), vec![0.0; 64], vec![true; 64]).unwrap();
        let back = fit_zones(&upsample_nn(&zones_to_lowres_map(&g), &layout), 8, 8).unwrap();
        assert_eq!(back.mean, means);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = ZoneLayout::new(8, 8, 64, 64).unwrap();
        let mean: Vec<f32> = (0..64).map(|_| rng.random_range(0.1..9.0)).collect();
        let std: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..0.5)).collect();
        let valid: Vec<bool> = (0..64).map(|_| rng.random_bool(0.8)).collect();
        let g = ZoneGrid::from_parts(layout, mean, std, valid).unwrap();
        let back = ZoneGrid::<f32>::from_json(&g.to_json()).unwrap();
        for z in 0..64 {
            assert_eq!(g.mean[z].to_bits(), back.mean[z].to_bits());
            assert_eq!(g.std[z].to_bits(), back.std[z].to_bits());
        }
        assert_eq!(g, back);
        assert!(ZoneGrid::<f32>::from_json(r#"{"rows":1}"#).is_err());
    }

    #[test]
    fn zone_moments_match_fit_and_gradients() {
        let layout = ZoneLayout::new(2, 3, 6, 7).unwrap();
        let index = ZoneIndex::new(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = Tensor::from_fn(&[2, 1, 6, 7], |_| rng.random_range(0.5f64..3.0));
        let g = crate::autograd::Graph::new();
        let m = g.constant(d.clone()).zone_moments(index.clone()).value();
        let fitted = fit_zones(&DepthMap::from_tensor(&d, 1), 2, 3).unwrap();
        for z in 0..6 {
            assert!((m[12 + z] - fitted.mean[z]).abs() < 1e-12);
            assert!((m[18 + z] - fitted.std[z]).abs() < 1e-12);
        }
        let w = Tensor::from_fn(&[2, 2, 6], |_| rng.random_range(-1.0..1.0));
        let probes: Vec<_> = (0..20).map(|_| (0, rng.random_range(0..84))).collect();
        let res = probe_gradients(&[d], &probes, 1e-6, |g, v| {
            v[0].zone_moments(index.clone()).mul(g.constant(w.clone())).sum()
        });
        assert!(max_rel_error(&res, 1e-8) < 1e-6, "{res:?}");
    }
}
