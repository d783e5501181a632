//! KITTI-format readers and writers, pose handling, frame windowing and the
//! motion-point filter.

mod labels;
pub mod synth;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Matrix4, Vector3};

pub use labels::{static_equivalent, LabelMap, BUILDING, CAR, MOVING_CAR, ROAD};
pub use synth::{generate_scene, SceneConfig, SyntheticSequence};

use crate::error::{Error, Result};

/// Rotation orthonormality tolerance applied when poses are parsed from text.
pub const POSE_LOAD_TOLERANCE: f64 = 1e-6;

/// Minimum number of moving points a frame needs to be used for training.
pub const DEFAULT_MOTION_THRESHOLD: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Point { x, y, z, intensity }
    }
}

/// One LiDAR sweep with optional per-point semantic ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub labels: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud {
            points,
            labels: None,
        }
    }

    pub fn with_labels(points: Vec<Point>, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != points.len() {
            return Err(Error::LabelMismatch {
                labels: labels.len(),
                points: points.len(),
            });
        }
        Ok(PointCloud {
            points,
            labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn labels(&self) -> Result<&[u16]> {
        self.labels.as_deref().ok_or(Error::MissingLabels)
    }
}

/// Rigid transform from a frame's LiDAR coordinates to world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose(Matrix4<f64>);

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    /// Builds a pose, checking that the rotation block is orthonormal with
    /// determinant +1 and the last row is `[0, 0, 0, 1]`.
    pub fn new(matrix: Matrix4<f64>, tolerance: f64) -> std::result::Result<Self, String> {
        let bottom = matrix.fixed_view::<1, 4>(3, 0);
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > tolerance {
            return Err("last row must be [0, 0, 0, 1]".into());
        }
        let r: Matrix3<f64> = matrix.fixed_view::<3, 3>(0, 0).into();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !err.is_finite() || err > tolerance {
            return Err(format!("rotation not orthonormal (max deviation {err:e})"));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > tolerance {
            return Err(format!("rotation determinant {det} != 1"));
        }
        Ok(Pose(matrix))
    }

    pub fn from_rotation_translation(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Pose(m)
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self::from_rotation_translation(Matrix3::identity(), Vector3::new(x, y, z))
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self::from_rotation_translation(r, Vector3::new(x, y, z))
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into()
    }

    /// Closed-form rigid inverse `[Rᵀ | −Rᵀt]`.
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        Pose::from_rotation_translation(rt, -(rt * self.translation_vector()))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose(self.0 * other.0)
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation_vector()
    }

    /// The 3×4 row-major block as written in `poses.txt`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }
}

/// A current frame grouped with its two predecessors.
#[derive(Clone, Debug)]
pub struct FrameWindow {
    pub current: Arc<PointCloud>,
    /// `[t−1, t−2]`.
    pub past: [Arc<PointCloud>; 2],
    /// Poses aligned with `[current, t−1, t−2]`.
    pub poses: [Pose; 3],
    pub sequence_id: String,
    pub frame_index: usize,
    /// Set for windows synthesized by the cut-and-paste augmentation.
    pub augmented: bool,
}

impl FrameWindow {
    pub fn motion_points(&self) -> usize {
        count_motion_points(&self.current).unwrap_or(0)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decodes 16-byte `(x, y, z, intensity)` little-endian float records.
pub fn decode_point_cloud(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    if bytes.len() % 16 != 0 {
        return Err(format!("size {} is not a multiple of 16", bytes.len()));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap());
            Point::new(f(0), f(1), f(2), f(3))
        })
        .collect();
    Ok(PointCloud::new(points))
}

pub fn encode_point_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads a velodyne `.bin` scan.
pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    decode_point_cloud(&bytes).map_err(|reason| Error::MalformedFile {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_point_cloud(cloud)).map_err(|e| Error::io(path, e))
}

/// Attaches labels from a `.label` file. Only the low 16 bits (semantic id)
/// of each record are kept.
pub fn load_labels(path: impl AsRef<Path>, cloud: PointCloud) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::MalformedFile {
            path: path.to_path_buf(),
            reason: format!("size {} is not a multiple of 4", bytes.len()),
        });
    }
    let labels: Vec<u16> = bytes
        .chunks_exact(4)
        .map(|rec| (u32::from_le_bytes(rec.try_into().unwrap()) & 0xFFFF) as u16)
        .collect();
    PointCloud::with_labels(cloud.points, labels)
}

pub fn write_labels(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let labels = cloud.labels()?;
    let mut out = Vec::with_capacity(labels.len() * 4);
    for &l in labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn parse_poses(text: &str) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: line_no,
                reason: e.to_string(),
            })?;
        if values.len() != 12 {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("expected 12 values, found {}", values.len()),
            });
        }
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = values[r * 4 + c];
            }
        }
        let pose = Pose::new(m, POSE_LOAD_TOLERANCE).map_err(|reason| Error::InvalidPose {
            line: line_no,
            reason,
        })?;
        poses.push(pose);
    }
    Ok(poses)
}

/// Reads a `poses.txt` file (one row-major 3×4 matrix per line).
pub fn load_poses(path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text)
}

pub fn write_poses(path: impl AsRef<Path>, poses: &[Pose]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for pose in poses {
        let row: Vec<String> = pose.to_row_major_3x4().iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", row.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Groups each frame with its two predecessors. Frames 0 and 1 have no full
/// history and produce no window.
pub fn build_windows(sequence: &[(PointCloud, Pose)], sequence_id: &str) -> Vec<FrameWindow> {
    let frames: Vec<(Arc<PointCloud>, Pose)> = sequence
        .iter()
        .map(|(c, p)| (Arc::new(c.clone()), *p))
        .collect();
    build_windows_shared(&frames, sequence_id)
}

pub fn build_windows_shared(frames: &[(Arc<PointCloud>, Pose)], sequence_id: &str) -> Vec<FrameWindow> {
    (2..frames.len())
        .map(|i| window_at(frames, sequence_id, i))
        .collect()
}

pub(crate) fn window_at(frames: &[(Arc<PointCloud>, Pose)], sequence_id: &str, i: usize) -> FrameWindow {
    FrameWindow {
        current: frames[i].0.clone(),
        past: [frames[i - 1].0.clone(), frames[i - 2].0.clone()],
        poses: [frames[i].1, frames[i - 1].1, frames[i - 2].1],
        sequence_id: sequence_id.to_string(),
        frame_index: i,
        augmented: false,
    }
}

/// Number of points carrying a moving-class id (SemanticKITTI 252..=259).
pub fn count_motion_points(cloud: &PointCloud) -> Result<usize> {
    count_motion_points_with(cloud, &LabelMap::semantic_kitti())
}

pub fn count_motion_points_with(cloud: &PointCloud, map: &LabelMap) -> Result<usize> {
    Ok(cloud.labels()?.iter().filter(|&&l| map.is_moving(l)).count())
}

/// Keeps windows whose current frame has at least `threshold` moving points.
/// Augmented windows are always kept; unlabeled windows count as motionless.
pub fn filter_training_windows(windows: Vec<FrameWindow>, threshold: usize) -> Vec<FrameWindow> {
    windows
        .into_iter()
        .filter(|w| w.augmented || w.motion_points() >= threshold)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(labels: &[u16]) -> PointCloud {
        let pts = labels.iter().map(|_| Point::new(0.0, 0.0, 0.0, 0.0)).collect();
        PointCloud::with_labels(pts, labels.to_vec()).unwrap()
    }

    #[test]
    fn decodes_two_records() {
        let cloud = PointCloud::new(vec![Point::new(1.0, 2.0, 3.0, 0.5), Point::new(4.0, 5.0, 6.0, 0.1)]);
        let bytes = encode_point_cloud(&cloud);
        assert_eq!(bytes.len(), 32);
        let back = decode_point_cloud(&bytes).unwrap();
        assert_eq!(back.points[0], Point::new(1.0, 2.0, 3.0, 0.5));
        assert_eq!(back.points[1], Point::new(4.0, 5.0, 6.0, 0.1));
    }

    #[test]
    fn empty_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.bin");
        fs::write(&empty, []).unwrap();
        assert!(load_point_cloud(&empty).unwrap().is_empty());

        let bad = dir.path().join("bad.bin");
        fs::write(&bad, [0u8; 17]).unwrap();
        assert!(matches!(load_point_cloud(&bad), Err(Error::MalformedFile { .. })));

        assert!(matches!(load_point_cloud(dir.path().join("nope.bin")), Err(Error::Io { .. })));
    }

    #[test]
    fn label_low_bits_are_semantic_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.label");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0001_00FCu32.to_le_bytes());
        bytes.extend_from_slice(&0x0000_000Au32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let cloud = PointCloud::new(vec![Point::new(0.0, 0.0, 0.0, 0.0); 2]);
        let cloud = load_labels(&path, cloud).unwrap();
        assert_eq!(cloud.labels().unwrap(), &[252, 10]);

        bytes.extend_from_slice(&7u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let cloud = PointCloud::new(vec![Point::new(0.0, 0.0, 0.0, 0.0); 2]);
        assert!(matches!(
            load_labels(&path, cloud),
            Err(Error::LabelMismatch { labels: 3, points: 2 })
        ));
    }

    #[test]
    fn pose_lines() {
        let poses = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 5 0 1 0 0 0 0 1 0\n").unwrap();
        assert_eq!(poses[0], Pose::identity());
        assert_eq!(poses[1], Pose::translation(5.0, 0.0, 0.0));
        assert!(matches!(parse_poses("1 0 0 0 0 1 0 0 0 0 1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse_poses("2 0 0 0 0 1 0 0 0 0 1 0"),
            Err(Error::InvalidPose { line: 1, .. })
        ));
        // Reflection: orthonormal but det = -1.
        assert!(matches!(
            parse_poses("-1 0 0 0 0 1 0 0 0 0 1 0"),
            Err(Error::InvalidPose { .. })
        ));
    }

    #[test]
    fn poses_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        let poses = vec![Pose::planar(1.25, -3.0, 0.1, 0.3), Pose::planar(-7.0, 2.0, 0.0, -1.1)];
        write_poses(&path, &poses).unwrap();
        assert_eq!(load_poses(&path).unwrap(), poses);
    }

    #[test]
    fn window_counts() {
        let seq = |n: usize| -> Vec<(PointCloud, Pose)> {
            (0..n).map(|_| (PointCloud::default(), Pose::identity())).collect()
        };
        let w = build_windows(&seq(5), "00");
        assert_eq!(w.iter().map(|w| w.frame_index).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(build_windows(&seq(3), "00").len(), 1);
        assert!(build_windows(&seq(2), "00").is_empty());
    }

    #[test]
    fn window_holds_frames_in_reverse_order() {
        let seq: Vec<(PointCloud, Pose)> = (0..4)
            .map(|i| {
                (
                    PointCloud::new(vec![Point::new(i as f32, 0.0, 0.0, 0.0)]),
                    Pose::translation(i as f64, 0.0, 0.0),
                )
            })
            .collect();
        let w = &build_windows(&seq, "07")[1];
        assert_eq!(w.frame_index, 3);
        assert_eq!(w.current.points[0].x, 3.0);
        assert_eq!(w.past[0].points[0].x, 2.0);
        assert_eq!(w.past[1].points[0].x, 1.0);
        assert_eq!(w.poses[2], Pose::translation(1.0, 0.0, 0.0));
    }

    #[test]
    fn motion_point_counting() {
        assert_eq!(count_motion_points(&labeled(&[252, 10, 253, 40])).unwrap(), 2);
        assert_eq!(count_motion_points(&labeled(&[10, 40, 50])).unwrap(), 0);
        assert_eq!(count_motion_points(&labeled(&[])).unwrap(), 0);
        assert!(matches!(
            count_motion_points(&PointCloud::default()),
            Err(Error::MissingLabels)
        ));
    }

    fn window_with_moving(n_moving: usize, augmented: bool) -> FrameWindow {
        let mut labels = vec![252u16; n_moving];
        labels.extend([40, 40, 10]);
        let cloud = Arc::new(labeled(&labels));
        FrameWindow {
            current: cloud.clone(),
            past: [cloud.clone(), cloud],
            poses: [Pose::identity(); 3],
            sequence_id: "00".into(),
            frame_index: 2,
            augmented,
        }
    }

    #[test]
    fn motion_filter_boundary() {
        let kept = filter_training_windows(
            vec![
                window_with_moving(25, false),
                window_with_moving(19, false),
                window_with_moving(20, false),
                window_with_moving(5, true),
            ],
            DEFAULT_MOTION_THRESHOLD,
        );
        let counts: Vec<usize> = kept.iter().map(|w| w.motion_points()).collect();
        assert_eq!(counts, vec![25, 20, 5]);
        assert!(kept[2].augmented);
    }

    #[test]
    fn motion_filter_is_idempotent() {
        let windows: Vec<FrameWindow> = (0..30)
            .map(|i| window_with_moving(i, i % 7 == 0))
            .collect();
        let once = filter_training_windows(windows, 20);
        let ids: Vec<usize> = once.iter().map(|w| w.motion_points()).collect();
        let twice = filter_training_windows(once, 20);
        assert_eq!(ids, twice.iter().map(|w| w.motion_points()).collect::<Vec<_>>());
    }
}
