//! Pinhole camera, rigid transforms and differentiable backward warping.
//!
//! Pixel coordinate `(0, 0)` is the center of the top-left pixel. A target
//! pixel is back-projected with its depth, moved into the source camera by
//! `T_{t->s}`, re-projected, and the source image is sampled bilinearly at
//! the resulting sub-pixel position.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::maps::{DepthMap, Image};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

/// Pinhole intrinsics and image size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > T::zero()
            && self.fy > T::zero()
            && self.cx >= T::zero()
            && self.cy >= T::zero()
            && self.cx < T::lit(self.width as f64)
            && self.cy < T::lit(self.height as f64);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "intrinsics need fx, fy > 0 and a principal point inside the {}x{} image",
                self.width, self.height
            )))
        }
    }

    /// Centered principal point with both focal lengths at `focal_ratio * width`.
    pub fn centered(width: usize, height: usize, focal_ratio: f64) -> Self {
        Self {
            fx: T::lit(focal_ratio * width as f64),
            fy: T::lit(focal_ratio * width as f64),
            cx: T::lit((width as f64 - 1.0) / 2.0),
            cy: T::lit((height as f64 - 1.0) / 2.0),
            width,
            height,
        }
    }

    /// Ray through pixel `(u, v)` with unit depth.
    #[inline]
    pub fn ray(&self, u: T, v: T) -> Vec3<T> {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, T::one()]
    }

    /// Pixel of a camera-frame point (no depth check).
    #[inline]
    pub fn project(&self, p: Vec3<T>) -> [T; 2] {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }

    pub fn cast<U: Scalar>(&self) -> Intrinsics<U> {
        Intrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Calibration record: `fx fy cx cy width height` on one line.
impl<T: Scalar> fmt::Display for Intrinsics<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} {:?} {:?} {:?} {} {}",
            self.fx.as_f64(),
            self.fy.as_f64(),
            self.cx.as_f64(),
            self.cy.as_f64(),
            self.width,
            self.height
        )
    }
}

impl<T: Scalar> FromStr for Intrinsics<T> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let fields: Vec<&str> = s.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "calibration record needs 6 fields (fx fy cx cy width height), got {}",
                fields.len()
            )));
        }
        let float = |i: usize| -> Result<T> {
            fields[i]
                .parse::<f64>()
                .map(T::lit)
                .map_err(|e| Error::InvalidArgument(format!("field {i} `{}`: {e}", fields[i])))
        };
        let int = |i: usize| -> Result<usize> {
            fields[i]
                .parse::<usize>()
                .map_err(|e| Error::InvalidArgument(format!("field {i} `{}`: {e}", fields[i])))
        };
        Self::new(float(0)?, float(1)?, float(2)?, float(3)?, int(4)?, int(5)?)
    }
}

pub fn mat_vec<T: Scalar>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<T: Scalar>(m: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j][i] = v;
        }
    }
    out
}

pub fn cross<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm<T: Scalar>(a: &Vec3<T>) -> T {
    dot(a, a).sqrt()
}

fn skew<T: Scalar>(w: &Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    [[z, -w[2], w[1]], [w[2], z, -w[0]], [-w[1], w[0], z]]
}

/// `(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)` with series near zero.
fn rodrigues_coefficients<T: Scalar>(theta: T) -> (T, T, T) {
    let t2 = theta * theta;
    if theta < T::lit(1e-4) {
        (
            T::one() - t2 / T::lit(6.0),
            T::lit(0.5) - t2 / T::lit(24.0),
            T::lit(1.0 / 6.0) - t2 / T::lit(120.0),
        )
    } else {
        let (s, c) = theta.sin_cos();
        (s / theta, (T::one() - c) / t2, (theta - s) / (t2 * theta))
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn axis_angle_to_matrix<T: Scalar>(w: &Vec3<T>) -> Mat3<T> {
    let (a, b, _) = rodrigues_coefficients(norm(w));
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let mut r = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { T::one() } else { T::zero() };
            r[i][j] = id + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Axis-angle vector of a rotation matrix, angle in `[0, pi]`.
pub fn matrix_to_axis_angle<T: Scalar>(r: &Mat3<T>) -> Vec3<T> {
    let half = T::lit(0.5);
    let v = [
        (r[2][1] - r[1][2]) * half,
        (r[0][2] - r[2][0]) * half,
        (r[1][0] - r[0][1]) * half,
    ];
    let c = ((r[0][0] + r[1][1] + r[2][2] - T::one()) * half)
        .max(-T::one())
        .min(T::one());
    let s = norm(&v);
    let theta = s.atan2(c);
    if c >= T::zero() {
        // sin-dominated: the antisymmetric part carries the axis accurately.
        if s < T::lit(1e-300) {
            return [T::zero(); 3];
        }
        let k = if theta < T::lit(1e-6) {
            T::one() + theta * theta / T::lit(6.0)
        } else {
            theta / s
        };
        return [v[0] * k, v[1] * k, v[2] * k];
    }
    // Near pi the symmetric part (1 - cos) a a^T is well conditioned.
    let one_c = T::one() - c;
    let b = |i: usize, j: usize| {
        let sym = (r[i][j] + r[j][i]) * half;
        if i == j {
            sym - c
        } else {
            sym
        }
    };
    let i = (0..3)
        .max_by(|&x, &y| b(x, x).partial_cmp(&b(y, y)).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or(0);
    let ai = (b(i, i) / one_c).max(T::zero()).sqrt();
    let mut axis = [T::zero(); 3];
    for (j, a) in axis.iter_mut().enumerate() {
        *a = if j == i { ai } else { b(i, j) / (one_c * ai) };
    }
    let n = norm(&axis);
    if dot(&axis, &v) < T::zero() {
        for a in &mut axis {
            *a = -*a;
        }
    }
    [axis[0] / n * theta, axis[1] / n * theta, axis[2] / n * theta]
}

/// Left Jacobian of the rotation exponential map.
fn left_jacobian<T: Scalar>(w: &Vec3<T>) -> Mat3<T> {
    let (_, a, b) = rodrigues_coefficients(norm(w));
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let mut j = [[T::zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let id = if r == c { T::one() } else { T::zero() };
            j[r][c] = id + a * k[r][c] + b * k2[r][c];
        }
    }
    j
}

/// Rigid motion `p -> R(rotation) p + translation`, rotation as axis-angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform<T> {
    pub rotation: Vec3<T>,
    pub translation: Vec3<T>,
}

impl<T: Scalar> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: [T::zero(); 3],
            translation: [T::zero(); 3],
        }
    }

    pub fn new(rotation: Vec3<T>, translation: Vec3<T>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vec3<T>) -> Self {
        Self::new([T::zero(); 3], translation)
    }

    pub fn from_matrix(r: &Mat3<T>, translation: Vec3<T>) -> Self {
        Self::new(matrix_to_axis_angle(r), translation)
    }

    /// Six-vector `[rx, ry, rz, tx, ty, tz]`.
    pub fn from_params(p: &[T]) -> Self {
        Self::new([p[0], p[1], p[2]], [p[3], p[4], p[5]])
    }

    pub fn params(&self) -> [T; 6] {
        let (r, t) = (self.rotation, self.translation);
        [r[0], r[1], r[2], t[0], t[1], t[2]]
    }

    pub fn matrix(&self) -> Mat3<T> {
        axis_angle_to_matrix(&self.rotation)
    }

    pub fn apply(&self, p: &Vec3<T>) -> Vec3<T> {
        let q = mat_vec(&self.matrix(), p);
        [
            q[0] + self.translation[0],
            q[1] + self.translation[1],
            q[2] + self.translation[2],
        ]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let r = mat_mul(&self.matrix(), &other.matrix());
        let t = self.apply(&other.translation);
        Self::from_matrix(&r, t)
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.matrix());
        let t = mat_vec(&rt, &self.translation);
        Self::from_matrix(&rt, [-t[0], -t[1], -t[2]])
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> RigidTransform<U> {
        let p = self.params().map(|v| U::lit(v.as_f64()));
        RigidTransform::from_params(&p)
    }
}

/// Per-pixel source coordinates of a warp plus in-bounds mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedCoords<T> {
    pub width: usize,
    pub height: usize,
    /// Row-major `[x, y]` per target pixel.
    pub coords: Vec<[T; 2]>,
    pub mask: Vec<bool>,
}

/// Range check with a few ulps of slack so that rounding in the
/// back-project/re-project round trip does not drop border pixels.
fn in_bounds<T: Scalar>(x: T, y: T, width: usize, height: usize) -> bool {
    let slack = T::epsilon() * T::lit(16.0 * width.max(height) as f64);
    x.is_finite()
        && y.is_finite()
        && x >= -slack
        && y >= -slack
        && x <= T::lit(width as f64 - 1.0) + slack
        && y <= T::lit(height as f64 - 1.0) + slack
}

/// Warped position of target pixel `(u, v)`; `None` when the depth is
/// unusable or the point lands behind the source camera.
#[inline]
fn warp_pixel<T: Scalar>(
    k: &Intrinsics<T>,
    r: &Mat3<T>,
    t: &Vec3<T>,
    u: usize,
    v: usize,
    depth: T,
) -> Option<([T; 2], Vec3<T>, Vec3<T>)> {
    warp_subpixel(k, r, t, T::lit(u as f64), T::lit(v as f64), depth)
}

#[inline]
fn warp_subpixel<T: Scalar>(
    k: &Intrinsics<T>,
    r: &Mat3<T>,
    t: &Vec3<T>,
    u: T,
    v: T,
    depth: T,
) -> Option<([T; 2], Vec3<T>, Vec3<T>)> {
    if !(depth.is_finite() && depth > T::zero()) {
        return None;
    }
    let ray = k.ray(u, v);
    let rr = mat_vec(r, &ray);
    let inv_d = depth.recip();
    // Q / depth; the pixel offset is measured from the original ray so the
    // identity warp reproduces the grid exactly.
    let m = [rr[0] + t[0] * inv_d, rr[1] + t[1] * inv_d, rr[2] + t[2] * inv_d];
    if !(m[2] > T::zero()) {
        return None;
    }
    let xy = [u + k.fx * (m[0] / m[2] - ray[0]), v + k.fy * (m[1] / m[2] - ray[1])];
    let q = [rr[0] * depth + t[0], rr[1] * depth + t[1], rr[2] * depth + t[2]];
    Some((xy, q, rr))
}

/// Moves a sub-pixel position with known depth into the other camera;
/// returns the new position and the transported depth.
pub fn warp_point<T: Scalar>(k: &Intrinsics<T>, pose: &RigidTransform<T>, u: T, v: T, depth: T) -> Option<([T; 2], T)> {
    warp_subpixel(k, &pose.matrix(), &pose.translation, u, v, depth).map(|(xy, q, _)| (xy, q[2]))
}

/// Source-image coordinates of every target pixel.
pub fn project_coords<T: Scalar>(
    depth: &DepthMap<T>,
    k: &Intrinsics<T>,
    pose: &RigidTransform<T>,
) -> ProjectedCoords<T> {
    let r = pose.matrix();
    let (w, h) = (depth.width, depth.height);
    let mut coords = vec![[-T::one(), -T::one()]; w * h];
    let mut mask = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if !depth.valid[i] {
                continue;
            }
            if let Some((xy, _, _)) = warp_pixel(k, &r, &pose.translation, u, v, depth.values[i]) {
                coords[i] = xy;
                mask[i] = in_bounds(xy[0], xy[1], k.width, k.height);
            }
        }
    }
    ProjectedCoords {
        width: w,
        height: h,
        coords,
        mask,
    }
}

struct BilinearTap<T> {
    idx: [usize; 4],
    wx: T,
    wy: T,
}

impl<T: Scalar> BilinearTap<T> {
    /// Weighted form, exact at integer positions.
    #[inline]
    fn interpolate(&self, p: &[T]) -> T {
        let one = T::one();
        let top = (one - self.wx) * p[self.idx[0]] + self.wx * p[self.idx[1]];
        let bottom = (one - self.wx) * p[self.idx[2]] + self.wx * p[self.idx[3]];
        (one - self.wy) * top + self.wy * bottom
    }
}

#[inline]
fn bilinear_tap<T: Scalar>(x: T, y: T, width: usize, height: usize) -> Option<BilinearTap<T>> {
    if !in_bounds(x, y, width, height) {
        return None;
    }
    let x = x.max(T::zero()).min(T::lit(width as f64 - 1.0));
    let y = y.max(T::zero()).min(T::lit(height as f64 - 1.0));
    let fx = x.floor().to_usize().unwrap_or(0).min(width.saturating_sub(2));
    let fy = y.floor().to_usize().unwrap_or(0).min(height.saturating_sub(2));
    let x1 = (fx + 1).min(width - 1);
    let y1 = (fy + 1).min(height - 1);
    Some(BilinearTap {
        idx: [fy * width + fx, fy * width + x1, y1 * width + fx, y1 * width + x1],
        wx: x - T::lit(fx as f64),
        wy: y - T::lit(fy as f64),
    })
}

/// Bilinear lookup at sub-pixel positions; out-of-range samples are 0 and
/// flagged false.
pub fn bilinear_sample<T: Scalar>(image: &Image<T>, coords: &[[T; 2]]) -> (Vec<Vec<T>>, Vec<bool>) {
    let (w, h) = (image.width, image.height);
    let plane = w * h;
    let mut out = vec![vec![T::zero(); coords.len()]; image.channels];
    let mut mask = vec![false; coords.len()];
    for (i, &[x, y]) in coords.iter().enumerate() {
        let Some(tap) = bilinear_tap(x, y, w, h) else { continue };
        mask[i] = true;
        for (c, dst) in out.iter_mut().enumerate() {
            let p = &image.data[c * plane..(c + 1) * plane];
            dst[i] = tap.interpolate(p);
        }
    }
    (out, mask)
}

/// Reconstructs the target view from `source` by backward warping.
pub fn synthesize<T: Scalar>(
    source: &Image<T>,
    depth: &DepthMap<T>,
    k: &Intrinsics<T>,
    pose: &RigidTransform<T>,
) -> Result<(Image<T>, Vec<bool>)> {
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::ShapeMismatch(format!(
            "depth {}x{} vs intrinsics {}x{}",
            depth.width, depth.height, k.width, k.height
        )));
    }
    if (source.width, source.height) != (k.width, k.height) {
        return Err(Error::ShapeMismatch("source image does not match intrinsics".into()));
    }
    let proj = project_coords(depth, k, pose);
    let (planes, sampled) = bilinear_sample(source, &proj.coords);
    let mask: Vec<bool> = proj.mask.iter().zip(&sampled).map(|(&a, &b)| a && b).collect();
    let mut data = Vec::with_capacity(source.data.len());
    for plane in planes {
        data.extend(plane.iter().zip(&mask).map(|(&v, &m)| if m { v } else { T::zero() }));
    }
    Ok((Image::new(source.channels, depth.height, depth.width, data)?, mask))
}

/// Differentiable projection of a depth batch `[n, 1, h, w]` through poses
/// `[n, 6]`, giving source coordinates `[n, h, w, 2]` and a validity mask.
pub fn project_coords_var<'g, T: Scalar>(
    depth: Var<'g, T>,
    pose: Var<'g, T>,
    k: &Intrinsics<T>,
) -> (Var<'g, T>, Rc<Vec<bool>>) {
    let d = depth.value();
    let p = pose.value();
    let (n, c, h, w) = d.dims4();
    assert_eq!(c, 1, "depth must have one channel");
    assert_eq!(p.shape(), [n, 6], "one 6-dof pose per batch item");
    let k = *k;
    let mut coords = Tensor::full(&[n, h, w, 2], -T::one());
    let mut mask = vec![false; n * h * w];
    let poses: Vec<RigidTransform<T>> = (0..n).map(|b| RigidTransform::from_params(p.item(b))).collect();
    for (b, pose) in poses.iter().enumerate() {
        let r = pose.matrix();
        for v in 0..h {
            for u in 0..w {
                let i = (b * h + v) * w + u;
                if let Some((xy, _, _)) = warp_pixel(&k, &r, &pose.translation, u, v, d[i]) {
                    coords[2 * i] = xy[0];
                    coords[2 * i + 1] = xy[1];
                    mask[i] = in_bounds(xy[0], xy[1], k.width, k.height);
                }
            }
        }
    }
    let mask = Rc::new(mask);
    let keep = mask.clone();
    let var = depth.graph().custom(
        &[depth, pose],
        coords,
        Box::new(move |g, xs, _, needs| {
            let (d, p) = (&xs[0], &xs[1]);
            let mut gd = needs[0].then(|| Tensor::zeros(d.shape()));
            let mut gp = needs[1].then(|| Tensor::zeros(p.shape()));
            for b in 0..n {
                let pose = RigidTransform::from_params(p.item(b));
                let r = pose.matrix();
                let mut rot_acc = [T::zero(); 3];
                let mut trans_acc = [T::zero(); 3];
                for v in 0..h {
                    for u in 0..w {
                        let i = (b * h + v) * w + u;
                        if !keep[i] {
                            continue;
                        }
                        let Some((_, q, rr)) = warp_pixel(&k, &r, &pose.translation, u, v, d[i]) else {
                            continue;
                        };
                        let (gx, gy) = (g[2 * i], g[2 * i + 1]);
                        let iz = q[2].recip();
                        let gq = [
                            gx * k.fx * iz,
                            gy * k.fy * iz,
                            -(gx * k.fx * q[0] + gy * k.fy * q[1]) * iz * iz,
                        ];
                        if let Some(gd) = gd.as_mut() {
                            gd[i] = dot(&gq, &rr);
                        }
                        // R p = q - t is the rotated point.
                        let rp = [
                            q[0] - pose.translation[0],
                            q[1] - pose.translation[1],
                            q[2] - pose.translation[2],
                        ];
                        let c = cross(&rp, &gq);
                        for a in 0..3 {
                            rot_acc[a] += c[a];
                            trans_acc[a] += gq[a];
                        }
                    }
                }
                if let Some(gp) = gp.as_mut() {
                    let jt = transpose(&left_jacobian(&pose.rotation));
                    let gr = mat_vec(&jt, &rot_acc);
                    let dst = &mut gp.data_mut()[b * 6..(b + 1) * 6];
                    dst[..3].copy_from_slice(&gr);
                    dst[3..].copy_from_slice(&trans_acc);
                }
            }
            vec![gd, gp]
        }),
    );
    (var, mask)
}

/// Differentiable bilinear sampling of `image [n, c, h, w]` at
/// `coords [n, ho, wo, 2]`; returns `[n, c, ho, wo]` and the in-range mask.
pub fn bilinear_sample_var<'g, T: Scalar>(image: Var<'g, T>, coords: Var<'g, T>) -> (Var<'g, T>, Rc<Vec<bool>>) {
    let img = image.value();
    let xy = coords.value();
    let (n, c, h, w) = img.dims4();
    let (cn, ho, wo, two) = xy.dims4();
    assert_eq!((cn, two), (n, 2), "coords must be [n, h, w, 2]");
    let (plane, oplane) = (h * w, ho * wo);
    let taps: Rc<Vec<Option<BilinearTap<T>>>> = Rc::new(
        (0..n * oplane)
            .map(|i| bilinear_tap(xy[2 * i], xy[2 * i + 1], w, h))
            .collect(),
    );
    let mask = Rc::new(taps.iter().map(|t| t.is_some()).collect::<Vec<_>>());
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for b in 0..n {
        for o in 0..oplane {
            let Some(tap) = &taps[b * oplane + o] else { continue };
            for ch in 0..c {
                let p = &img.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                out[(b * c + ch) * oplane + o] = tap.interpolate(p);
            }
        }
    }
    let var = image.graph().custom(
        &[image, coords],
        out,
        Box::new(move |g, xs, _, needs| {
            let img = &xs[0];
            let mut gi = needs[0].then(|| Tensor::zeros(img.shape()));
            let mut gc = needs[1].then(|| Tensor::zeros(xs[1].shape()));
            for b in 0..n {
                for o in 0..oplane {
                    let Some(tap) = &taps[b * oplane + o] else { continue };
                    let (wx, wy) = (tap.wx, tap.wy);
                    let one = T::one();
                    let weights = [(one - wx) * (one - wy), wx * (one - wy), (one - wx) * wy, wx * wy];
                    let mut dx = T::zero();
                    let mut dy = T::zero();
                    for ch in 0..c {
                        let go = g[(b * c + ch) * oplane + o];
                        let base = (b * c + ch) * plane;
                        if let Some(gi) = gi.as_mut() {
                            for (t, &wgt) in tap.idx.iter().zip(&weights) {
                                gi[base + t] += go * wgt;
                            }
                        }
                        let p = |t: usize| img[base + tap.idx[t]];
                        dx += go * ((one - wy) * (p(1) - p(0)) + wy * (p(3) - p(2)));
                        dy += go * ((one - wx) * (p(2) - p(0)) + wx * (p(3) - p(1)));
                    }
                    if let Some(gc) = gc.as_mut() {
                        let i = b * oplane + o;
                        gc[2 * i] = dx;
                        gc[2 * i + 1] = dy;
                    }
                }
            }
            vec![gi, gc]
        }),
    );
    (var, mask)
}

/// Differentiable backward warp of `source [n, c, h, w]` into the target view.
/// The mask combines positive projected depth and in-range sampling.
pub fn synthesize_var<'g, T: Scalar>(
    source: Var<'g, T>,
    depth: Var<'g, T>,
    pose: Var<'g, T>,
    k: &Intrinsics<T>,
) -> (Var<'g, T>, Rc<Vec<bool>>) {
    let (coords, proj_mask) = project_coords_var(depth, pose, k);
    let (sampled, sample_mask) = bilinear_sample_var(source, coords);
    let mask: Vec<bool> = proj_mask
        .iter()
        .zip(sample_mask.iter())
        .map(|(&a, &b)| a && b)
        .collect();
    let (_, c, _, _) = source.value().dims4();
    let hw = k.width * k.height;
    let keep: Vec<bool> = (0..mask.len() * c)
        .map(|i| {
            let b = i / (c * hw);
            mask[b * hw + i % hw]
        })
        .collect();
    (sampled.mask(Rc::new(keep)), Rc::new(mask))
}
