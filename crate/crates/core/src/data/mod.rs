//! Frames, training triplets and their sources.

mod layout;
mod synthetic;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::maps::{DepthMap, Image};
use crate::scalar::Scalar;
use crate::tofsim::{fit_zones, ZoneGrid};

pub use layout::{load_nyu_layout, read_split, write_scene, SceneDir};
pub use synthetic::{generate_synthetic_scene, render_view, SceneConfig, SyntheticWorld};

/// One recorded frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T> {
    pub image: Image<T>,
    pub depth: Option<DepthMap<T>>,
    /// Camera-to-world transform.
    pub pose: Option<RigidTransform<T>>,
    /// Stored sensor reading, if the recording has one.
    pub zones: Option<ZoneGrid<T>>,
}

impl<T: Scalar> Frame<T> {
    /// The stored zone grid, or one fitted to the ground-truth depth.
    pub fn zone_grid(&self, rows: usize, cols: usize) -> Result<ZoneGrid<T>> {
        if let Some(z) = &self.zones {
            if (z.rows, z.cols) == (rows, cols) {
                return Ok(z.clone());
            }
        }
        let depth = self
            .depth
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("frame has neither zones nor depth".into()))?;
        fit_zones(depth, rows, cols)
    }
}

/// Ordered frames sharing one camera; loading may be deferred.
pub trait Sequence<T> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn intrinsics(&self) -> Intrinsics<T>;

    fn frame(&self, index: usize) -> Result<Frame<T>>;
}

/// Sequence held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct MemorySequence<T> {
    pub intrinsics: Intrinsics<T>,
    pub frames: Vec<Frame<T>>,
}

impl<T: Scalar> Sequence<T> for MemorySequence<T> {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn intrinsics(&self) -> Intrinsics<T> {
        self.intrinsics
    }

    fn frame(&self, index: usize) -> Result<Frame<T>> {
        self.frames
            .get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("frame {index} out of range")))
    }
}

/// Frame indices of one training sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletIndex {
    pub target: usize,
    pub sources: Vec<usize>,
}

/// Targets every `stride` frames starting at 0, each with sources at the
/// given signed offsets. Targets whose sources fall outside the sequence are
/// dropped.
pub fn sample_triplets(len: usize, stride: usize, offsets: &[isize]) -> Vec<TripletIndex> {
    assert!(stride > 0, "stride must be positive");
    (0..len)
        .step_by(stride)
        .filter_map(|t| {
            let sources: Option<Vec<usize>> = offsets
                .iter()
                .map(|&o| {
                    let s = t as isize + o;
                    (s >= 0 && (s as usize) < len).then_some(s as usize)
                })
                .collect();
            sources.map(|sources| TripletIndex { target: t, sources })
        })
        .collect()
}

/// A source view of a training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceView<T> {
    pub image: Image<T>,
    pub zones: ZoneGrid<T>,
}

/// Target frame, its sources and optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTriplet<T> {
    pub target: Image<T>,
    pub target_zones: ZoneGrid<T>,
    pub sources: Vec<SourceView<T>>,
    pub intrinsics: Intrinsics<T>,
    pub gt_depth: Option<DepthMap<T>>,
    /// Target-to-source transforms, one per source.
    pub gt_poses: Option<Vec<RigidTransform<T>>>,
}

impl<T: Scalar> FrameTriplet<T> {
    pub fn check(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::InvalidArgument("triplet has no source frame".into()));
        }
        for s in &self.sources {
            if !s.image.same_shape(&self.target) {
                return Err(Error::ShapeMismatch("source and target images differ in size".into()));
            }
            if s.zones.layout() != self.target_zones.layout() {
                return Err(Error::ShapeMismatch("source and target zone layouts differ".into()));
            }
        }
        Ok(())
    }
}

/// Loads the frames of `index` and builds a triplet with `rows x cols` zones.
pub fn assemble<T: Scalar, S: Sequence<T> + ?Sized>(
    seq: &S,
    index: &TripletIndex,
    rows: usize,
    cols: usize,
) -> Result<FrameTriplet<T>> {
    let target = seq.frame(index.target)?;
    let target_zones = target.zone_grid(rows, cols)?;
    let mut sources = Vec::with_capacity(index.sources.len());
    let mut poses = target.pose.map(|_| Vec::new());
    for &s in &index.sources {
        let f = seq.frame(s)?;
        if let (Some(list), Some(pt), Some(ps)) = (poses.as_mut(), target.pose.as_ref(), f.pose.as_ref()) {
            list.push(ps.inverse().compose(pt));
        } else {
            poses = None;
        }
        sources.push(SourceView {
            zones: f.zone_grid(rows, cols)?,
            image: f.image,
        });
    }
    let triplet = FrameTriplet {
        target: target.image,
        target_zones,
        sources,
        intrinsics: seq.intrinsics(),
        gt_depth: target.depth,
        gt_poses: poses,
    };
    triplet.check()?;
    Ok(triplet)
}

/// Samples and assembles the triplets of several sequences.
pub fn build_triplets<T: Scalar, S: Sequence<T>>(
    sequences: &[S],
    stride: usize,
    offsets: &[isize],
    rows: usize,
    cols: usize,
) -> Result<Vec<FrameTriplet<T>>> {
    let mut out = Vec::new();
    for seq in sequences {
        for idx in sample_triplets(seq.len(), stride, offsets) {
            out.push(assemble(seq, &idx, rows, cols)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_protocol() {
        let t = sample_triplets(100, 5, &[-10, 10]);
        let targets: Vec<usize> = t.iter().map(|x| x.target).collect();
        assert_eq!(targets, (10..=85).step_by(5).collect::<Vec<_>>());
        assert!(t.iter().all(|x| x.sources == vec![x.target - 10, x.target + 10]));

        let sliding = sample_triplets(5, 1, &[-1, 1]);
        assert_eq!(sliding.len(), 3);
        assert_eq!(
            sliding[0],
            TripletIndex {
                target: 1,
                sources: vec![0, 2]
            }
        );
        assert!(sample_triplets(8, 1, &[-10, 10]).is_empty());
        assert!(sample_triplets(0, 5, &[-1, 1]).is_empty());
    }
}
