//! Ego-motion compensation, BEV rasterization and residual images.

mod grid;

use nalgebra::{Matrix4, Vector3};

pub use grid::{BevImage, Grid, GridSpec};

use crate::error::{Error, Result};
use crate::ingest::{static_equivalent, FrameWindow, LabelMap, Point, PointCloud, Pose};

/// How the residual channel is derived from the three frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResidualMode {
    /// Product of the three frames.
    Mul,
    /// Mean absolute difference of each past frame against the current one.
    Sub,
    /// No residual; the channel is all zeros.
    None,
}

impl ResidualMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResidualMode::Mul => "mul",
            ResidualMode::Sub => "sub",
            ResidualMode::None => "none",
        }
    }
}

impl std::str::FromStr for ResidualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mul" => Ok(ResidualMode::Mul),
            "sub" => Ok(ResidualMode::Sub),
            "none" => Ok(ResidualMode::None),
            other => Err(Error::InvalidConfig(format!("unknown residual mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Label mask values.
pub const STATIC: u8 = 0;
pub const MOVING: u8 = 1;

/// The transform that re-expresses points of a past frame in the current
/// frame: `P_now⁻¹ · P_past`.
pub fn compensation_transform(pose_past: &Pose, pose_now: &Pose) -> Matrix4<f64> {
    pose_now.inverse().matrix() * pose_past.matrix()
}

pub fn compensate_point(transform: &Matrix4<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    transform.fixed_view::<3, 3>(0, 0) * p + transform.fixed_view::<3, 1>(0, 3)
}

/// Moves a past cloud into the current frame's coordinates. Labels and
/// intensities are carried over unchanged.
pub fn motion_compensate(past: &PointCloud, pose_past: &Pose, pose_now: &Pose) -> PointCloud {
    let t = compensation_transform(pose_past, pose_now);
    let points = past
        .points
        .iter()
        .map(|p| {
            let q = compensate_point(&t, &Vector3::new(p.x as f64, p.y as f64, p.z as f64));
            Point::new(q.x as f32, q.y as f32, q.z as f32, p.intensity)
        })
        .collect();
    PointCloud {
        points,
        labels: past.labels.clone(),
    }
}

/// Max-height BEV image: each cell holds the normalized height of its
/// highest point; empty cells are 0.
pub fn rasterize(cloud: &PointCloud, spec: &GridSpec) -> BevImage {
    let mut max_z = Grid::<f64>::new(spec.rows(), spec.cols());
    let mut hit = Grid::<bool>::for_spec(spec);
    for p in &cloud.points {
        if let Some((r, c)) = spec.cell_of(p.x as f64, p.y as f64) {
            let z = p.z as f64;
            if !hit.get(r, c) || z > max_z.get(r, c) {
                max_z.set(r, c, z);
                hit.set(r, c, true);
            }
        }
    }
    let mut img = BevImage::for_spec(spec);
    for i in 0..img.data.len() {
        if hit.data[i] {
            img.data[i] = spec.encode_height(max_z.data[i]);
        }
    }
    img
}

/// Per-cell label (moving if any point in the cell is moving) and occupancy.
pub fn rasterize_labels(cloud: &PointCloud, spec: &GridSpec) -> Result<(Grid<u8>, Grid<bool>)> {
    rasterize_labels_with(cloud, spec, &LabelMap::semantic_kitti())
}

pub fn rasterize_labels_with(
    cloud: &PointCloud,
    spec: &GridSpec,
    map: &LabelMap,
) -> Result<(Grid<u8>, Grid<bool>)> {
    let labels = cloud.labels()?;
    let mut mask = Grid::<u8>::for_spec(spec);
    let mut occupancy = Grid::<bool>::for_spec(spec);
    for (p, &l) in cloud.points.iter().zip(labels) {
        if let Some((r, c)) = spec.cell_of(p.x as f64, p.y as f64) {
            occupancy.set(r, c, true);
            if map.is_moving(l) {
                mask.set(r, c, MOVING);
            }
        }
    }
    Ok((mask, occupancy))
}

pub fn occupancy(cloud: &PointCloud, spec: &GridSpec) -> Grid<bool> {
    let mut occ = Grid::<bool>::for_spec(spec);
    for p in &cloud.points {
        if let Some((r, c)) = spec.cell_of(p.x as f64, p.y as f64) {
            occ.set(r, c, true);
        }
    }
    occ
}

/// Semantic id of each cell's highest point, with moving classes folded onto
/// their static counterparts and scaled by 1/255.
pub fn rasterize_semantics(cloud: &PointCloud, spec: &GridSpec) -> Result<BevImage> {
    let labels = cloud.labels()?;
    let mut best = Grid::<f64>::new(spec.rows(), spec.cols());
    let mut hit = Grid::<bool>::for_spec(spec);
    let mut img = BevImage::for_spec(spec);
    for (p, &l) in cloud.points.iter().zip(labels) {
        if let Some((r, c)) = spec.cell_of(p.x as f64, p.y as f64) {
            let z = p.z as f64;
            if !hit.get(r, c) || z > best.get(r, c) {
                best.set(r, c, z);
                hit.set(r, c, true);
                img.set(r, c, static_equivalent(l).min(255) as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

/// Min-max scaling to `[0, 1]`; a constant image maps to zeros.
pub fn normalize(img: &Grid<f32>) -> BevImage {
    let (lo, hi) = img
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return img.map(|_| 0.0);
    }
    let range = hi - lo;
    img.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

fn check_shapes(a: &BevImage, b: &BevImage, c: &BevImage) -> Result<()> {
    if a.same_shape(b) && a.same_shape(c) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "residual inputs differ in shape: {}x{}, {}x{}, {}x{}",
            a.rows, a.cols, b.rows, b.cols, c.rows, c.cols
        )))
    }
}

/// Product of the three frames, normalized. Cells empty in any frame are 0.
/// The past frames are multiplied first so the result is exactly symmetric
/// in them.
pub fn residual_mul(now: &BevImage, past1: &BevImage, past2: &BevImage) -> Result<BevImage> {
    check_shapes(now, past1, past2)?;
    let data = now
        .data
        .iter()
        .zip(&past1.data)
        .zip(&past2.data)
        .map(|((a, b), c)| a * (b * c))
        .collect();
    Ok(normalize(&Grid::from_vec(now.rows, now.cols, data)?))
}

/// `0.5·|now − past1| + 0.5·|now − past2|`, normalized.
pub fn residual_sub(now: &BevImage, past1: &BevImage, past2: &BevImage) -> Result<BevImage> {
    check_shapes(now, past1, past2)?;
    let data = now
        .data
        .iter()
        .zip(&past1.data)
        .zip(&past2.data)
        .map(|((a, b), c)| 0.5 * (a - b).abs() + 0.5 * (a - c).abs())
        .collect();
    Ok(normalize(&Grid::from_vec(now.rows, now.cols, data)?))
}

pub fn residual(mode: ResidualMode, frames: &[BevImage; 3]) -> Result<BevImage> {
    match mode {
        ResidualMode::Mul => residual_mul(&frames[0], &frames[1], &frames[2]),
        ResidualMode::Sub => residual_sub(&frames[0], &frames[1], &frames[2]),
        ResidualMode::None => {
            check_shapes(&frames[0], &frames[1], &frames[2])?;
            Ok(BevImage::new(frames[0].rows, frames[0].cols))
        }
    }
}

/// Network-ready sample: three aligned frames, a residual and the masks of
/// the current frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BevWindow {
    /// `[current, t−1, t−2]`, all in the current frame's coordinates.
    pub frames: [BevImage; 3],
    pub residual_mode: ResidualMode,
    pub residual: BevImage,
    /// `None` for unlabeled (inference-only) windows.
    pub label_mask: Option<Grid<u8>>,
    pub occupancy: Grid<bool>,
    /// Per-frame semantic images, present when every frame is labeled.
    pub semantics: Option<[BevImage; 3]>,
    pub sequence_id: String,
    pub frame_index: usize,
    pub augmented: bool,
    pub motion_points: usize,
}

impl BevWindow {
    pub fn rows(&self) -> usize {
        self.occupancy.rows
    }

    pub fn cols(&self) -> usize {
        self.occupancy.cols
    }

    pub fn id(&self) -> String {
        format!("{}_{:06}", self.sequence_id, self.frame_index)
    }

    /// Recomputes the residual channel for another mode.
    pub fn with_residual(&self, mode: ResidualMode) -> Result<BevWindow> {
        if mode == self.residual_mode {
            return Ok(self.clone());
        }
        let mut w = self.clone();
        w.residual = residual(mode, &self.frames)?;
        w.residual_mode = mode;
        Ok(w)
    }

    /// Moving cells that are also occupied.
    pub fn moving_cells(&self) -> usize {
        match &self.label_mask {
            Some(mask) => mask
                .data
                .iter()
                .zip(&self.occupancy.data)
                .filter(|(&l, &o)| o && l == MOVING)
                .count(),
            None => 0,
        }
    }
}

/// Compensates the past frames into the current frame, rasterizes all three
/// and derives the residual and masks.
pub fn build_bev_window(window: &FrameWindow, spec: &GridSpec, mode: ResidualMode) -> Result<BevWindow> {
    build_bev_window_with(window, spec, mode, &LabelMap::semantic_kitti())
}

pub fn build_bev_window_with(
    window: &FrameWindow,
    spec: &GridSpec,
    mode: ResidualMode,
    map: &LabelMap,
) -> Result<BevWindow> {
    spec.validate()?;
    let now = &window.poses[0];
    let past1 = motion_compensate(&window.past[0], &window.poses[1], now);
    let past2 = motion_compensate(&window.past[1], &window.poses[2], now);
    let clouds = [window.current.as_ref(), &past1, &past2];
    let frames = clouds.map(|c| rasterize(c, spec));
    let residual = residual(mode, &frames)?;
    let (label_mask, occupancy) = if window.current.labels.is_some() {
        let (m, o) = rasterize_labels_with(&window.current, spec, map)?;
        (Some(m), o)
    } else {
        (None, occupancy(&window.current, spec))
    };
    let semantics = if clouds.iter().all(|c| c.labels.is_some()) {
        Some([
            rasterize_semantics(clouds[0], spec)?,
            rasterize_semantics(clouds[1], spec)?,
            rasterize_semantics(clouds[2], spec)?,
        ])
    } else {
        None
    };
    let motion_points = match &window.current.labels {
        Some(labels) => labels.iter().filter(|&&l| map.is_moving(l)).count(),
        None => 0,
    };
    Ok(BevWindow {
        frames,
        residual_mode: mode,
        residual,
        label_mask,
        occupancy,
        semantics,
        sequence_id: window.sequence_id.clone(),
        frame_index: window.frame_index,
        augmented: window.augmented,
        motion_points,
    })
}

/// Center of cell `(r, c)` with the height decoded from `value`.
pub fn cell_to_point(r: usize, c: usize, value: f32, spec: &GridSpec) -> Result<(f64, f64, f64)> {
    if r >= spec.rows() || c >= spec.cols() {
        return Err(Error::Range(format!(
            "cell ({r}, {c}) outside {}x{} grid",
            spec.rows(),
            spec.cols()
        )));
    }
    Ok((
        spec.x_min + (r as f64 + 0.5) * spec.resolution,
        spec.y_min + (c as f64 + 0.5) * spec.resolution,
        spec.z_min + value as f64 * (spec.z_max - spec.z_min),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn cloud(points: &[(f32, f32, f32)]) -> PointCloud {
        PointCloud::new(points.iter().map(|&(x, y, z)| Point::new(x, y, z, 0.0)).collect())
    }

    fn img(rows: usize, cols: usize, v: &[f32]) -> BevImage {
        Grid::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn compensation_examples() {
        let c = cloud(&[(1.0, 2.0, 3.0)]);
        assert_eq!(motion_compensate(&c, &Pose::identity(), &Pose::identity()), c);

        let origin = cloud(&[(0.0, 0.0, 0.0)]);
        let out = motion_compensate(&origin, &Pose::translation(1.0, 0.0, 0.0), &Pose::translation(2.0, 0.0, 0.0));
        assert_eq!(out.points[0], Point::new(-1.0, 0.0, 0.0, 0.0));

        let x = cloud(&[(1.0, 0.0, 0.0)]);
        let out = motion_compensate(&x, &Pose::planar(0.0, 0.0, 0.0, FRAC_PI_2), &Pose::identity());
        assert!(out.points[0].x.abs() < 1e-7);
        assert!((out.points[0].y - 1.0).abs() < 1e-7);
    }

    #[test]
    fn height_encoding_of_shared_cell() {
        let spec = GridSpec::desk();
        let img = rasterize(&cloud(&[(1.01, 0.01, -0.5), (1.02, 0.02, 0.5)]), &spec);
        let (r, c) = spec.cell_of(1.01, 0.01).unwrap();
        assert_eq!(img.get(r, c), 0.75);
        assert_eq!(img.data.iter().filter(|&&v| v > 0.0).count(), 1);
    }

    #[test]
    fn out_of_range_points_are_dropped() {
        let spec = GridSpec::paper();
        let img = rasterize(&cloud(&[(50.0, 0.0, 0.0)]), &spec);
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn any_moving_point_marks_cell() {
        let spec = GridSpec::desk();
        let pts = vec![Point::new(1.0, 0.0, 0.0, 0.0), Point::new(1.05, 0.05, 0.0, 0.0), Point::new(5.0, 1.0, 0.0, 0.0)];
        let c = PointCloud::with_labels(pts, vec![10, 252, 10]).unwrap();
        let (mask, occ) = rasterize_labels(&c, &spec).unwrap();
        let (r, col) = spec.cell_of(1.0, 0.0).unwrap();
        assert_eq!(mask.get(r, col), MOVING);
        let (r2, c2) = spec.cell_of(5.0, 1.0).unwrap();
        assert_eq!(mask.get(r2, c2), STATIC);
        assert!(occ.get(r2, c2));
        assert_eq!(occ.data.iter().filter(|&&o| o).count(), 2);
        assert!(matches!(rasterize_labels(&cloud(&[(1.0, 0.0, 0.0)]), &spec), Err(Error::MissingLabels)));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&img(1, 3, &[0.0, 2.0, 4.0])).data, vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize(&img(2, 2, &[0.7; 4])).data, vec![0.0; 4]);
        let unit = img(1, 4, &[0.0, 0.3, 1.0, 0.25]);
        assert_eq!(normalize(&unit), unit);
    }

    #[test]
    fn residual_mul_examples() {
        let a = img(1, 2, &[0.8, 0.5]);
        let b = img(1, 2, &[0.7, 0.0]);
        let c = img(1, 2, &[0.9, 0.5]);
        // One cell is annihilated, so normalization divides by the product.
        let r = residual_mul(&a, &b, &c).unwrap();
        assert_eq!(r.data, vec![1.0, 0.0]);
        let raw = 0.8f32 * 0.7 * 0.9;
        assert!((raw - 0.504).abs() < 1e-6);

        let same = img(2, 2, &[0.2, 0.4, 0.9, 0.0]);
        let r = residual_mul(&same, &same, &same).unwrap();
        for (v, s) in r.data.iter().zip(&same.data) {
            assert_eq!(*v > 0.0, *s > 0.0);
        }
        assert!(matches!(residual_mul(&a, &img(2, 1, &[0.0, 0.0]), &c), Err(Error::Shape(_))));
    }

    #[test]
    fn residual_sub_examples() {
        let f = img(1, 3, &[0.3, 0.6, 0.1]);
        assert!(residual_sub(&f, &f, &f).unwrap().data.iter().all(|&v| v == 0.0));

        let now = img(1, 3, &[1.0, 0.0, 0.0]);
        let zero = img(1, 3, &[0.0; 3]);
        assert_eq!(residual_sub(&now, &zero, &zero).unwrap().data, vec![1.0, 0.0, 0.0]);

        // Pre-normalization value at the single cell is 0.4, and a zero cell
        // pins the minimum, so 0.4 is the maximum and maps to 1.
        let now = img(1, 2, &[0.8, 0.0]);
        let p1 = img(1, 2, &[0.6, 0.0]);
        let p2 = img(1, 2, &[0.2, 0.0]);
        let raw = 0.5f32 * (0.8f32 - 0.6).abs() + 0.5 * (0.8f32 - 0.2).abs();
        assert!((raw - 0.4).abs() < 1e-6);
        assert_eq!(residual_sub(&now, &p1, &p2).unwrap().data, vec![1.0, 0.0]);
    }

    #[test]
    fn cell_to_point_examples() {
        let spec = GridSpec::desk();
        let (x, y, z) = cell_to_point(0, 0, 0.0, &spec).unwrap();
        assert!((x - 0.1).abs() < 1e-12 && (y + 6.3).abs() < 1e-12 && (z + 2.5).abs() < 1e-12);
        let paper = GridSpec::paper();
        let (x, y, z) = cell_to_point(0, 0, 0.0, &paper).unwrap();
        assert!((x - 0.05).abs() < 1e-12 && (y + 15.95).abs() < 1e-12 && (z + 2.5).abs() < 1e-12);
        assert_eq!(cell_to_point(3, 3, 1.0, &spec).unwrap().2, 1.5);
        assert!(matches!(cell_to_point(96, 0, 0.0, &spec), Err(Error::Range(_))));
    }

    #[test]
    fn residual_none_is_zero() {
        let f = img(1, 2, &[0.5, 0.2]);
        let r = residual(ResidualMode::None, &[f.clone(), f.clone(), f]).unwrap();
        assert_eq!(r.data, vec![0.0, 0.0]);
    }
}
