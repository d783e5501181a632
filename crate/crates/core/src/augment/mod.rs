//! Cut-and-paste motion synthesis: car points from a motionless frame are
//! copied into a short run of frames with a growing offset and relabeled as
//! a moving car.

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::{count_motion_points_with, window_at, FrameWindow, LabelMap, Point, PointCloud, Pose};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub n_frames: usize,
    /// Forward step per frame in meters, drawn once per run.
    pub dx_range: (f64, f64),
    pub dy_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            n_frames: 4,
            dx_range: (0.5, 1.5),
            dy_range: (-0.2, 0.2),
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(Error::InvalidConfig("n_frames must be at least 1".into()));
        }
        let (dx0, dx1) = self.dx_range;
        let (dy0, dy1) = self.dy_range;
        if !(dx0.is_finite() && dx1.is_finite() && dy0.is_finite() && dy1.is_finite()) {
            return Err(Error::InvalidConfig("translation ranges must be finite".into()));
        }
        if dx0 < 0.0 {
            return Err(Error::InvalidConfig(format!("dx range must start at >= 0, got {dx0}")));
        }
        if dx0 > dx1 || dy0 > dy1 {
            return Err(Error::InvalidConfig("translation range low end exceeds high end".into()));
        }
        Ok(())
    }

    /// One (dx, dy) step drawn uniformly from the ranges. Degenerate ranges
    /// return their single value.
    pub fn draw_step(&self, rng: &mut impl Rng) -> (f64, f64) {
        let pick = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let dx = pick(rng, self.dx_range);
        let dy = pick(rng, self.dy_range);
        (dx, dy)
    }
}

/// Points labeled as (static) car.
pub fn extract_cars(cloud: &PointCloud) -> Result<Vec<Point>> {
    extract_cars_with(cloud, &LabelMap::semantic_kitti())
}

pub fn extract_cars_with(cloud: &PointCloud, map: &LabelMap) -> Result<Vec<Point>> {
    let labels = cloud.labels()?;
    Ok(cloud
        .points
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == map.car)
        .map(|(p, _)| *p)
        .collect())
}

/// Pastes frame 0's cars into every frame of `frames`, shifted by
/// `(k+1)·step` in frame `k`'s sensor coordinates.
pub fn synthesize_motion_with_step(frames: &[PointCloud], step: (f64, f64), map: &LabelMap) -> Result<Vec<PointCloud>> {
    for (k, f) in frames.iter().enumerate() {
        let moving = count_motion_points_with(f, map)?;
        if moving > 0 {
            return Err(Error::Precondition(format!(
                "frame {k} of the run already has {moving} moving points"
            )));
        }
    }
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let cars = extract_cars_with(first, map)?;
    if cars.is_empty() {
        log::warn!("no car points in the first frame of the run; augmentation skipped");
        return Ok(frames.to_vec());
    }
    frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let shift = (k + 1) as f64;
            let (ox, oy) = ((shift * step.0) as f32, (shift * step.1) as f32);
            let mut points = f.points.clone();
            let mut labels = f.labels()?.to_vec();
            points.extend(cars.iter().map(|p| Point { x: p.x + ox, y: p.y + oy, ..*p }));
            labels.extend(std::iter::repeat_n(map.moving_car, cars.len()));
            PointCloud::with_labels(points, labels)
        })
        .collect()
}

/// Draws a step from `params` and applies [`synthesize_motion_with_step`].
pub fn synthesize_motion(frames: &[PointCloud], params: &AugmentParams) -> Result<Vec<PointCloud>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let step = params.draw_step(&mut rng);
    synthesize_motion_with_step(frames, step, &LabelMap::semantic_kitti())
}

/// Frames of a sequence after augmentation, with the frame ranges that
/// received synthetic movers.
#[derive(Clone, Debug)]
pub struct AugmentedSequence {
    pub frames: Vec<PointCloud>,
    pub runs: Vec<Range<usize>>,
}

fn run_seed(seed: u64, start: usize) -> u64 {
    // splitmix64 finalizer over the run start so runs draw independently.
    let mut z = seed ^ (start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Finds non-overlapping runs of `n_frames` consecutive motionless labeled
/// frames (scanning from the start) and augments each run whose first frame
/// contains cars.
pub fn augment_sequence(frames: &[PointCloud], params: &AugmentParams, map: &LabelMap) -> Result<AugmentedSequence> {
    params.validate()?;
    let n = params.n_frames;
    let motionless: Vec<bool> = frames
        .iter()
        .map(|f| matches!(count_motion_points_with(f, map), Ok(0)))
        .collect();
    let mut out = frames.to_vec();
    let mut runs = Vec::new();
    let mut start = 0;
    while start + n <= frames.len() {
        if !motionless[start..start + n].iter().all(|&m| m) {
            start += 1;
            continue;
        }
        if extract_cars_with(&frames[start], map)?.is_empty() {
            log::warn!("motionless run at frame {start} has no car points; skipped");
            start += 1;
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed(params.seed, start));
        let step = params.draw_step(&mut rng);
        let pasted = synthesize_motion_with_step(&frames[start..start + n], step, map)?;
        out.splice(start..start + n, pasted);
        runs.push(start..start + n);
        start += n;
    }
    Ok(AugmentedSequence { frames: out, runs })
}

/// Groups augmented frames into windows. Windows lying entirely inside a run
/// are flagged augmented; windows straddling a run boundary are dropped
/// because their history mixes pasted and unpasted frames.
pub fn regroup_windows(
    frames: &[(Arc<PointCloud>, Pose)],
    runs: &[Range<usize>],
    sequence_id: &str,
) -> Vec<FrameWindow> {
    let mut windows = Vec::new();
    for i in 2..frames.len() {
        let span = i - 2..i + 1;
        let inside = runs.iter().any(|r| r.start <= span.start && span.end <= r.end);
        let touches = runs.iter().any(|r| r.start < span.end && span.start < r.end);
        if touches && !inside {
            continue;
        }
        let mut w = window_at(frames, sequence_id, i);
        w.augmented = inside;
        windows.push(w);
    }
    windows
}

/// Augments a posed sequence and returns its windows (see [`regroup_windows`]).
pub fn augment_dataset(
    sequence: &[(PointCloud, Pose)],
    sequence_id: &str,
    params: &AugmentParams,
) -> Result<Vec<FrameWindow>> {
    let clouds: Vec<PointCloud> = sequence.iter().map(|(c, _)| c.clone()).collect();
    let aug = augment_sequence(&clouds, params, &LabelMap::semantic_kitti())?;
    let frames: Vec<(Arc<PointCloud>, Pose)> = aug
        .frames
        .into_iter()
        .zip(sequence.iter().map(|(_, p)| *p))
        .map(|(c, p)| (Arc::new(c), p))
        .collect();
    Ok(regroup_windows(&frames, &aug.runs, sequence_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{CAR, MOVING_CAR, ROAD};

    fn cloud(pts: &[(f32, u16)]) -> PointCloud {
        PointCloud::with_labels(
            pts.iter().map(|&(x, _)| Point::new(x, 0.0, 0.0, 0.0)).collect(),
            pts.iter().map(|&(_, l)| l).collect(),
        )
        .unwrap()
    }

    #[test]
    fn extract_selects_static_cars() {
        let c = cloud(&[(1.0, CAR), (2.0, CAR), (3.0, ROAD), (4.0, MOVING_CAR)]);
        assert_eq!(extract_cars(&c).unwrap().len(), 2);
        assert!(extract_cars(&cloud(&[(1.0, ROAD)])).unwrap().is_empty());
        assert!(matches!(extract_cars(&PointCloud::new(vec![])), Err(Error::MissingLabels)));
    }

    #[test]
    fn cumulative_offsets() {
        let frames = vec![cloud(&[(5.0, CAR), (0.0, ROAD)]); 4];
        let params = AugmentParams {
            dx_range: (1.0, 1.0),
            dy_range: (0.0, 0.0),
            ..Default::default()
        };
        let out = synthesize_motion(&frames, &params).unwrap();
        for (k, f) in out.iter().enumerate() {
            assert_eq!(f.len(), 3);
            assert_eq!(f.points[2].x, 6.0 + k as f32);
            assert_eq!(f.labels().unwrap()[2], MOVING_CAR);
            assert_eq!(&f.points[..2], &frames[k].points[..]);
        }
    }

    #[test]
    fn rejects_frames_with_motion() {
        let mut frames = vec![cloud(&[(5.0, CAR)]); 4];
        frames[2] = cloud(&[(5.0, CAR), (1.0, MOVING_CAR)]);
        assert!(matches!(synthesize_motion(&frames, &AugmentParams::default()), Err(Error::Precondition(_))));
    }

    #[test]
    fn no_cars_is_noop() {
        let frames = vec![cloud(&[(5.0, ROAD)]); 4];
        let out = synthesize_motion(&frames, &AugmentParams::default()).unwrap();
        assert_eq!(out, frames);
    }

    #[test]
    fn params_validation() {
        let bad = AugmentParams { dx_range: (-0.1, 1.0), ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentParams { n_frames: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(AugmentParams::default().validate().is_ok());
    }

    #[test]
    fn window_regrouping() {
        let frames: Vec<(Arc<PointCloud>, Pose)> =
            (0..10).map(|_| (Arc::new(cloud(&[(1.0, ROAD)])), Pose::identity())).collect();
        let windows = regroup_windows(&frames, &[3..7], "00");
        let idx: Vec<(usize, bool)> = windows.iter().map(|w| (w.frame_index, w.augmented)).collect();
        // 3,4 straddle the start; 7,8 straddle the end.
        assert_eq!(idx, vec![(2, false), (5, true), (6, true), (9, false)]);
    }
}
