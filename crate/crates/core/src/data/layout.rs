//! On-disk scene layout.
//!
//! ```text
//! scene_dir/
//!   intrinsics.txt        fx fy cx cy width height
//!   poses.txt             optional, one camera-to-world pose per line: rx ry rz tx ty tz
//!   rgb_000000.png        8-bit RGB
//!   depth_000000.bin      little-endian f32 meters (0 = invalid), or
//!   depth_000000.png      16-bit millimeters (0 = invalid)
//!   zones_000000.json     optional zone grid record
//! ```
//!
//! Split files list scene directories relative to the dataset root, one per
//! line; blank lines and lines starting with `#` are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Frame, MemorySequence, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::maps::{DepthMap, Image};
use crate::scalar::Scalar;
use crate::tofsim::{fit_zones, ZoneGrid};

const INTRINSICS: &str = "intrinsics.txt";
const POSES: &str = "poses.txt";

fn rgb_name(i: usize) -> String {
    format!("rgb_{i:06}.png")
}

/// One scene directory; frames are read on demand.
#[derive(Clone, Debug)]
pub struct SceneDir<T> {
    pub root: PathBuf,
    intrinsics: Intrinsics<T>,
    poses: Option<Vec<RigidTransform<T>>>,
    frames: usize,
}

impl<T: Scalar> SceneDir<T> {
    pub fn open(root: &Path) -> Result<Self> {
        let kpath = root.join(INTRINSICS);
        let text = fs::read_to_string(&kpath).map_err(|e| Error::io(&kpath, e))?;
        let intrinsics: Intrinsics<T> = text
            .trim()
            .parse()
            .map_err(|e: Error| Error::data(&kpath, e.to_string()))?;
        let mut frames = 0;
        while root.join(rgb_name(frames)).is_file() {
            frames += 1;
        }
        if frames == 0 {
            return Err(Error::data(root.join(rgb_name(0)), "scene has no frames"));
        }
        let ppath = root.join(POSES);
        let poses = if ppath.is_file() {
            let text = fs::read_to_string(&ppath).map_err(|e| Error::io(&ppath, e))?;
            let poses = parse_poses(&text).map_err(|m| Error::data(&ppath, m))?;
            if poses.len() != frames {
                return Err(Error::data(
                    &ppath,
                    format!("{} poses for {frames} frames", poses.len()),
                ));
            }
            Some(poses)
        } else {
            None
        };
        Ok(Self {
            root: root.to_path_buf(),
            intrinsics,
            poses,
            frames,
        })
    }

    fn load_image(&self, i: usize) -> Result<Image<T>> {
        let path = self.root.join(rgb_name(i));
        let img = image::open(&path)
            .map_err(|e| Error::data(&path, format!("frame {i}: {e}")))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if (w, h) != (self.intrinsics.width, self.intrinsics.height) {
            return Err(Error::data(
                &path,
                format!(
                    "frame {i} is {w}x{h}, calibration says {}x{}",
                    self.intrinsics.width, self.intrinsics.height
                ),
            ));
        }
        let raw = img.as_raw();
        let data = (0..3 * w * h)
            .map(|k| {
                let (c, p) = (k / (w * h), k % (w * h));
                T::lit(raw[p * 3 + c] as f64 / 255.0)
            })
            .collect();
        Image::new(3, h, w, data)
    }

    fn load_depth(&self, i: usize) -> Result<Option<DepthMap<T>>> {
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        let bin = self.root.join(format!("depth_{i:06}.bin"));
        if bin.is_file() {
            let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
            if bytes.len() != 4 * w * h {
                return Err(Error::data(
                    &bin,
                    format!("frame {i}: {} bytes, expected {}", bytes.len(), 4 * w * h),
                ));
            }
            let values = bytes
                .chunks_exact(4)
                .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            return DepthMap::new(w, h, values).map(Some);
        }
        let png = self.root.join(format!("depth_{i:06}.png"));
        if png.is_file() {
            let img = image::open(&png)
                .map_err(|e| Error::data(&png, format!("frame {i}: {e}")))?
                .to_luma16();
            if (img.width() as usize, img.height() as usize) != (w, h) {
                return Err(Error::data(
                    &png,
                    format!("frame {i}: depth size differs from calibration"),
                ));
            }
            let values = img.as_raw().iter().map(|&mm| T::lit(mm as f64 / 1000.0)).collect();
            return DepthMap::new(w, h, values).map(Some);
        }
        Ok(None)
    }

    fn load_zones(&self, i: usize) -> Result<Option<ZoneGrid<T>>> {
        let path = self.root.join(format!("zones_{i:06}.json"));
        if !path.is_file() {
            return Ok(None);
        }
        let grid = ZoneGrid::load(&path)?;
        let l = grid.layout();
        if (l.image_width, l.image_height) != (self.intrinsics.width, self.intrinsics.height) {
            return Err(Error::data(
                &path,
                format!("frame {i}: zone layout does not match the image"),
            ));
        }
        Ok(Some(grid))
    }
}

impl<T: Scalar> Sequence<T> for SceneDir<T> {
    fn len(&self) -> usize {
        self.frames
    }

    fn intrinsics(&self) -> Intrinsics<T> {
        self.intrinsics
    }

    fn frame(&self, index: usize) -> Result<Frame<T>> {
        if index >= self.frames {
            return Err(Error::InvalidArgument(format!("frame {index} out of range")));
        }
        Ok(Frame {
            image: self.load_image(index)?,
            depth: self.load_depth(index)?,
            pose: self.poses.as_ref().map(|p| p[index]),
            zones: self.load_zones(index)?,
        })
    }
}

fn parse_poses<T: Scalar>(text: &str) -> std::result::Result<Vec<RigidTransform<T>>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format!("line {}: {e}", n + 1))?;
            if v.len() != 6 {
                return Err(format!("line {}: expected 6 values, got {}", n + 1, v.len()));
            }
            let p: Vec<T> = v.into_iter().map(T::lit).collect();
            Ok(RigidTransform::from_params(&p))
        })
        .collect()
}

/// Non-empty, non-comment lines of a split file.
pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Opens every scene listed in `split` below `root`.
pub fn load_nyu_layout<T: Scalar>(root: &Path, split: &Path) -> Result<Vec<SceneDir<T>>> {
    read_split(split)?
        .iter()
        .map(|rel| SceneDir::open(&root.join(rel)))
        .collect()
}

/// Writes `seq` in the scene layout, with zone grids fitted to its depth.
pub fn write_scene<T: Scalar>(dir: &Path, seq: &MemorySequence<T>, rows: usize, cols: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let kpath = dir.join(INTRINSICS);
    fs::write(&kpath, format!("{}\n", seq.intrinsics)).map_err(|e| Error::io(&kpath, e))?;
    let mut poses = String::new();
    for (i, f) in seq.frames.iter().enumerate() {
        let img = &f.image;
        let (w, h) = (img.width, img.height);
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = std::array::from_fn(|c| (img.at(c, y, x).as_f64().clamp(0.0, 1.0) * 255.0).round() as u8);
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let path = dir.join(rgb_name(i));
        buf.save(&path).map_err(|e| Error::data(&path, e.to_string()))?;
        if let Some(d) = &f.depth {
            let path = dir.join(format!("depth_{i:06}.bin"));
            let bytes: Vec<u8> = d
                .values
                .iter()
                .zip(&d.valid)
                .flat_map(|(&v, &ok)| (if ok { v.as_f64() as f32 } else { 0.0 }).to_le_bytes())
                .collect();
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            let grid = fit_zones(d, rows, cols)?;
            grid.save(&dir.join(format!("zones_{i:06}.json")))?;
        }
        if let Some(p) = &f.pose {
            let v = p.params();
            poses.push_str(
                &v.iter()
                    .map(|x| format!("{:?}", x.as_f64()))
                    .collect::<Vec<_>>()
                    .join(" "),
            );
            poses.push('\n');
        }
    }
    if seq.frames.iter().all(|f| f.pose.is_some()) {
        let path = dir.join(POSES);
        fs::write(&path, poses).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
