//! Procedural scenes of textured fronto-parallel rectangles.
//!
//! The world holds a background plane and a set of axis-aligned rectangles
//! at fixed depths, each painted with seeded value noise in world
//! coordinates. A camera moves along a smooth trajectory; every frame is
//! ray-cast against the planes and keeps the nearest hit, so the rendered
//! depth is exact at every pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Frame, MemorySequence};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::maps::{DepthMap, Image};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Number of planes, background included.
    pub rectangles: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Peak camera displacement along x, in meters.
    pub translation_amplitude: f64,
    /// Peak rotation angle, in radians.
    pub rotation_amplitude: f64,
    pub focal_ratio: f64,
    /// Coarsest texture wavelength, in meters.
    pub texture_scale: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 16,
            rectangles: 6,
            min_depth: 1.0,
            max_depth: 5.0,
            translation_amplitude: 0.4,
            rotation_amplitude: 0.03,
            focal_ratio: 0.8,
            texture_scale: 0.3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rectangles == 0 {
            return Err(Error::config("rectangles", "a scene needs at least one plane"));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::config("width", "image must be at least 2x2"));
        }
        if self.frames == 0 {
            return Err(Error::config("frames", "a scene needs at least one frame"));
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite()) {
            return Err(Error::config("min_depth", "need 0 < min_depth < max_depth"));
        }
        if !(self.focal_ratio > 0.0) || !(self.texture_scale > 0.0) {
            return Err(Error::config(
                "focal_ratio",
                "focal ratio and texture scale must be positive",
            ));
        }
        if !(self.translation_amplitude >= 0.0) || !(self.rotation_amplitude >= 0.0) {
            return Err(Error::config(
                "translation_amplitude",
                "amplitudes must be non-negative",
            ));
        }
        Ok(())
    }
}

/// A textured plane `z = depth` (world frame), bounded unless `infinite`.
#[derive(Clone, Debug, PartialEq)]
struct Plane {
    depth: f64,
    x: (f64, f64),
    y: (f64, f64),
    infinite: bool,
    base: [f64; 3],
    seed: u64,
}

/// Static geometry and textures of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    planes: Vec<Plane>,
    texture_scale: f64,
}

// splitmix64 finaliser, used as a lattice hash
fn hash(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let h = hash(seed ^ hash((i as u64).wrapping_mul(0x1000_0000_01b3) ^ hash(j as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinearly interpolated lattice noise with smoothstep easing, in [0, 1].
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (i, j) = (fx as i64, fy as i64);
    let ease = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (ease(x - fx), ease(y - fy));
    let a = lattice(seed, i, j);
    let b = lattice(seed, i + 1, j);
    let c = lattice(seed, i, j + 1);
    let d = lattice(seed, i + 1, j + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

impl Plane {
    fn color(&self, x: f64, y: f64, scale: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let s = hash(self.seed.wrapping_add(ch as u64 + 1));
            let mut n = 0.0;
            for (octave, weight) in [(1.0, 0.5), (2.0, 0.3), (4.0, 0.2)] {
                n += weight * value_noise(s.wrapping_add(octave as u64), x * octave / scale, y * octave / scale);
            }
            *o = (self.base[ch] + 0.8 * (n - 0.5)).clamp(0.0, 1.0);
        }
        out
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.infinite || (self.x.0..=self.x.1).contains(&x) && (self.y.0..=self.y.1).contains(&y)
    }
}

impl SyntheticWorld {
    /// Random layout for `cfg`, seen from a camera at the world origin.
    pub fn random(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let k = Intrinsics::<f64>::centered(cfg.width, cfg.height, cfg.focal_ratio);
        let half_w = (cfg.width as f64 / 2.0) / k.fx;
        let half_h = (cfg.height as f64 / 2.0) / k.fy;
        let mut planes = vec![Plane {
            depth: cfg.max_depth,
            x: (f64::NEG_INFINITY, f64::INFINITY),
            y: (f64::NEG_INFINITY, f64::INFINITY),
            infinite: true,
            base: [
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
            ],
            seed: rng.random(),
        }];
        for _ in 1..cfg.rectangles {
            let z = rng.random_range(cfg.min_depth..cfg.min_depth + 0.8 * (cfg.max_depth - cfg.min_depth));
            let (fw, fh) = (half_w * z, half_h * z);
            let (sw, sh) = (rng.random_range(0.25..0.7) * fw, rng.random_range(0.25..0.7) * fh);
            let (cx, cy) = (rng.random_range(-0.8..0.8) * fw, rng.random_range(-0.8..0.8) * fh);
            planes.push(Plane {
                depth: z,
                x: (cx - sw, cx + sw),
                y: (cy - sh, cy + sh),
                infinite: false,
                base: [
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                ],
                seed: rng.random(),
            });
        }
        Ok(Self {
            planes,
            texture_scale: cfg.texture_scale,
        })
    }

    /// A single unbounded textured plane at `depth`.
    pub fn single_plane(depth: f64, seed: u64, texture_scale: f64) -> Self {
        Self {
            planes: vec![Plane {
                depth,
                x: (f64::NEG_INFINITY, f64::INFINITY),
                y: (f64::NEG_INFINITY, f64::INFINITY),
                infinite: true,
                base: [0.5; 3],
                seed,
            }],
            texture_scale,
        }
    }
}

/// Renders `world` from a camera with camera-to-world transform `pose`.
///
/// Rays that hit nothing get zero colour and zero (invalid) depth.
pub fn render_view<T: Scalar>(
    world: &SyntheticWorld,
    k: &Intrinsics<f64>,
    pose: &RigidTransform<f64>,
) -> (Image<T>, DepthMap<T>) {
    let (w, h) = (k.width, k.height);
    let rot = pose.matrix();
    let origin = pose.translation;
    let mut rgb = vec![T::zero(); 3 * w * h];
    let mut depth = vec![T::zero(); w * h];
    for v in 0..h {
        for u in 0..w {
            let ray = k.ray(u as f64, v as f64);
            let dir = crate::geometry::mat_vec(&rot, &ray);
            let mut best: Option<(f64, usize, f64, f64)> = None;
            for (p, plane) in world.planes.iter().enumerate() {
                if dir[2].abs() < 1e-12 {
                    continue;
                }
                // ray parameter equals camera-frame depth since ray.z = 1
                let t = (plane.depth - origin[2]) / dir[2];
                if !(t > 0.0) {
                    continue;
                }
                let (x, y) = (origin[0] + t * dir[0], origin[1] + t * dir[1]);
                if plane.contains(x, y) && best.is_none_or(|b| t < b.0) {
                    best = Some((t, p, x, y));
                }
            }
            if let Some((t, p, x, y)) = best {
                let c = world.planes[p].color(x, y, world.texture_scale);
                for ch in 0..3 {
                    // 8-bit quantisation, so PNG round trips are exact
                    let q = (c[ch] * 255.0).round() / 255.0;
                    rgb[(ch * h + v) * w + u] = T::lit(q);
                }
                depth[v * w + u] = T::lit(t);
            }
        }
    }
    (
        Image::new(3, h, w, rgb).expect("consistent size"),
        DepthMap::new(w, h, depth).expect("consistent size"),
    )
}

/// Smooth camera path: camera-to-world pose of frame `i`.
fn trajectory(cfg: &SceneConfig, phases: &[f64; 6], i: usize) -> RigidTransform<f64> {
    let tau = if cfg.frames > 1 {
        i as f64 / (cfg.frames - 1) as f64
    } else {
        0.0
    };
    let a = cfg.translation_amplitude;
    let r = cfg.rotation_amplitude;
    let wave = |k: usize, cycles: f64| (std::f64::consts::TAU * cycles * tau + phases[k]).sin();
    let translation = [a * wave(0, 0.5), 0.4 * a * wave(1, 0.7), 0.4 * a * wave(2, 0.6)];
    let rotation = [r * wave(3, 0.6), r * wave(4, 0.5), 0.5 * r * wave(5, 0.4)];
    RigidTransform::new(rotation, translation)
}

/// Renders a full sequence with ground-truth depth and camera-to-world poses.
pub fn generate_synthetic_scene<T: Scalar>(seed: u64, cfg: &SceneConfig) -> Result<MemorySequence<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = SyntheticWorld::random(cfg, &mut rng)?;
    let phases: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let k = Intrinsics::<f64>::centered(cfg.width, cfg.height, cfg.focal_ratio);
    let frames = (0..cfg.frames)
        .map(|i| {
            let pose = trajectory(cfg, &phases, i);
            let (image, depth) = render_view(&world, &k, &pose);
            Frame {
                image,
                depth: Some(depth),
                pose: Some(pose.cast()),
                zones: None,
            }
        })
        .collect();
    Ok(MemorySequence {
        intrinsics: k.cast(),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sequence;
    use crate::geometry::synthesize;

    #[test]
    fn static_camera_repeats_frames() {
        let cfg = SceneConfig {
            translation_amplitude: 0.0,
            rotation_amplitude: 0.0,
            frames: 4,
            ..SceneConfig::default()
        };
        let seq = generate_synthetic_scene::<f32>(3, &cfg).unwrap();
        for f in &seq.frames[1..] {
            assert_eq!(f, &seq.frames[0]);
        }
    }

    #[test]
    fn determinism_and_degenerate_config() {
        let cfg = SceneConfig::default();
        let a = generate_synthetic_scene::<f32>(5, &cfg).unwrap();
        let b = generate_synthetic_scene::<f32>(5, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene::<f32>(6, &cfg).unwrap();
        assert_ne!(a.frame(0).unwrap().image, c.frame(0).unwrap().image);
        let bad = SceneConfig { rectangles: 0, ..cfg };
        assert!(generate_synthetic_scene::<f32>(5, &bad).is_err());
    }

    #[test]
    fn depth_is_exact_and_within_range() {
        let cfg = SceneConfig::default();
        let seq = generate_synthetic_scene::<f64>(7, &cfg).unwrap();
        for f in &seq.frames {
            let d = f.depth.as_ref().unwrap();
            assert_eq!(d.valid_count(), d.len());
            // camera wobble moves the planes only slightly in depth
            assert!(d
                .values
                .iter()
                .all(|&z| z > 0.5 * cfg.min_depth && z < 1.5 * cfg.max_depth));
        }
    }

    #[test]
    fn translated_plane_matches_pinhole_shift() {
        let (w, h, z) = (64, 48, 2.5);
        let world = SyntheticWorld::single_plane(z, 11, 0.6);
        let k = Intrinsics::<f64>::centered(w, h, 0.8);
        let t_src = RigidTransform::from_translation([0.1, 0.0, 0.0]);
        let (target, depth) = render_view::<f64>(&world, &k, &RigidTransform::identity());
        let (source, _) = render_view::<f64>(&world, &k, &t_src);
        assert!(depth.values.iter().all(|&d| (d - z).abs() < 1e-12));
        // target-to-source: p_s = T_src^-1 p_t
        let (recon, mask) = synthesize(&source, &depth, &k, &t_src.inverse()).unwrap();
        let shift = k.fx * 0.1 / z;
        let mut se = 0.0;
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                assert_eq!(mask[i], (x as f64 - shift) >= 0.0);
                if mask[i] {
                    for c in 0..3 {
                        let d = recon.at(c, y, x) - target.at(c, y, x);
                        se += d * d;
                        n += 1;
                    }
                }
            }
        }
        let psnr = 10.0 * (1.0 / (se / n as f64)).log10();
        assert!(psnr > 30.0, "psnr {psnr}");
    }
}
