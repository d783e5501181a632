//! Synthetic driving scenes emitted in the same formats as real KITTI data.
//!
//! The world is a flat road along +x populated with axis-aligned cuboids:
//! static structures, parked cars and cars moving along x at a constant
//! per-frame displacement. Every surface is covered by a fixed set of
//! candidate sample points (jittered 0.1 m grid). A frame keeps a candidate
//! when it faces the sensor, lies within range, and its per-candidate
//! threshold is below the range-dependent keep probability. Because the
//! candidates are fixed in the world, the same physical points reappear in
//! consecutive frames and only the per-frame Gaussian noise differs.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Point, PointCloud, Pose, BUILDING, CAR, MOVING_CAR, ROAD};
use crate::error::{Error, Result};

const CANDIDATE_SPACING: f64 = 0.1;
const CANDIDATE_DENSITY: f64 = 1.0 / (CANDIDATE_SPACING * CANDIDATE_SPACING);
/// Densities are flat up to this range and fall off as 1/r beyond it.
const REFERENCE_RANGE: f64 = 5.0;
/// Returns closer than this hit the ego vehicle and are dropped.
const MIN_RANGE: f64 = 2.0;
const YAW_JITTER: f64 = 0.004;
const EGO_CORRIDOR: f64 = 2.0;
const CAR_SIZE: [f64; 3] = [4.2, 1.8, 1.5];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// World length along the road (m). The ego starts 20 m after its start.
    pub extent_x: f64,
    /// World width across the road (m), centered on the ego lane.
    pub extent_y: f64,
    pub static_objects: usize,
    pub parked_cars: usize,
    pub moving_cars: usize,
    /// Per-frame ego displacement range (m).
    pub ego_step: (f64, f64),
    /// Per-frame displacement range of moving cars in world coordinates (m).
    pub mover_step: (f64, f64),
    pub frames: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Ground returns per m² inside the reference range.
    pub ground_density: f64,
    /// Object-surface returns per m² inside the reference range.
    pub surface_density: f64,
    pub max_range: f64,
    pub sensor_height: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent_x: 140.0,
            extent_y: 30.0,
            static_objects: 40,
            parked_cars: 10,
            moving_cars: 4,
            ego_step: (0.6, 1.0),
            mover_step: (0.6, 1.6),
            frames: 60,
            noise_sigma: 0.02,
            seed: 0,
            ground_density: 20.0,
            surface_density: 60.0,
            max_range: 50.0,
            sensor_height: 1.73,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.extent_x > 0.0 && self.extent_y > 0.0) {
            return bad("scene extent must have positive area");
        }
        if self.frames < 3 {
            return bad("a sequence needs at least 3 frames");
        }
        for (name, (lo, hi)) in [("ego_step", self.ego_step), ("mover_step", self.mover_step)] {
            if !(lo <= hi) || lo < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} range must satisfy 0 <= low <= high")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.ground_density >= 0.0 && self.surface_density >= 0.0) {
            return bad("noise and densities must be non-negative");
        }
        if !(self.max_range > MIN_RANGE) {
            return bad("max_range must exceed the minimum range");
        }
        Ok(())
    }
}

/// Generated frames plus the generator's ground truth for moving cars.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub frames: Vec<PointCloud>,
    pub poses: Vec<Pose>,
    /// World-frame base center of each moving car, per frame.
    pub mover_tracks: Vec<Vec<Vector3<f64>>>,
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

impl Aabb {
    fn from_base(center: Vector3<f64>, size: [f64; 3]) -> Self {
        Aabb {
            min: Vector3::new(center.x - size[0] / 2.0, center.y - size[1] / 2.0, center.z),
            max: Vector3::new(center.x + size[0] / 2.0, center.y + size[1] / 2.0, center.z + size[2]),
        }
    }

    fn overlaps_xy(&self, other: &Aabb, margin: f64) -> bool {
        self.min.x - margin < other.max.x
            && other.min.x - margin < self.max.x
            && self.min.y - margin < other.max.y
            && other.min.y - margin < self.max.y
    }

    fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.min.x && x <= self.max.x && y >= self.min.y && y <= self.max.y
    }

    fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Sample {
    position: Vector3<f64>,
    normal: Vector3<f64>,
    threshold: f32,
    intensity: f32,
    label: u16,
}

struct Mover {
    size: [f64; 3],
    track: Vec<Vector3<f64>>,
    /// Samples in car-local coordinates (relative to the base center).
    samples: Vec<Sample>,
}

fn range_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Candidate points on the five exposed faces of a cuboid (no bottom face).
fn cuboid_samples(rng: &mut ChaCha8Rng, b: &Aabb, label: u16, intensity: (f32, f32), out: &mut Vec<Sample>) {
    let (lo, hi) = (b.min, b.max);
    let faces = [
        // (origin, edge u, edge v, normal)
        (Vector3::new(lo.x, lo.y, hi.z), Vector3::new(hi.x - lo.x, 0.0, 0.0), Vector3::new(0.0, hi.y - lo.y, 0.0), Vector3::z()),
        (Vector3::new(hi.x, lo.y, lo.z), Vector3::new(0.0, hi.y - lo.y, 0.0), Vector3::new(0.0, 0.0, hi.z - lo.z), Vector3::x()),
        (Vector3::new(lo.x, lo.y, lo.z), Vector3::new(0.0, hi.y - lo.y, 0.0), Vector3::new(0.0, 0.0, hi.z - lo.z), -Vector3::x()),
        (Vector3::new(lo.x, hi.y, lo.z), Vector3::new(hi.x - lo.x, 0.0, 0.0), Vector3::new(0.0, 0.0, hi.z - lo.z), Vector3::y()),
        (Vector3::new(lo.x, lo.y, lo.z), Vector3::new(hi.x - lo.x, 0.0, 0.0), Vector3::new(0.0, 0.0, hi.z - lo.z), -Vector3::y()),
    ];
    for (origin, u, v, normal) in faces {
        let nu = (u.norm() / CANDIDATE_SPACING).ceil().max(1.0) as usize;
        let nv = (v.norm() / CANDIDATE_SPACING).ceil().max(1.0) as usize;
        for i in 0..nu {
            for j in 0..nv {
                let a = (i as f64 + rng.random::<f64>()) / nu as f64;
                let c = (j as f64 + rng.random::<f64>()) / nv as f64;
                out.push(Sample {
                    position: origin + u * a + v * c,
                    normal,
                    threshold: rng.random(),
                    intensity: rng.random_range(intensity.0..intensity.1),
                    label,
                });
            }
        }
    }
}

fn keep_probability(density: f64, range: f64) -> f64 {
    (density * (REFERENCE_RANGE / range.max(REFERENCE_RANGE)) / CANDIDATE_DENSITY).min(1.0)
}

/// Generates one sequence in memory. Deterministic for a fixed config.
pub fn generate_scene(config: &SceneConfig) -> Result<SyntheticSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x0 = -20.0;
    let x1 = x0 + config.extent_x;
    let half_y = config.extent_y / 2.0;
    let h = config.sensor_height;

    // Ego trajectory.
    let mut poses = Vec::with_capacity(config.frames);
    let (mut ex, mut ey, mut yaw) = (0.0f64, 0.0f64, 0.0f64);
    for t in 0..config.frames {
        if t > 0 {
            let d = range_uniform(&mut rng, config.ego_step);
            ex += d * yaw.cos();
            ey += d * yaw.sin();
            yaw += rng.random_range(-YAW_JITTER..YAW_JITTER);
        }
        poses.push(Pose::planar(ex, ey, h, yaw));
    }

    let lateral = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let y = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            y
        } else {
            -y
        }
    };

    // Moving cars: each is placed in view at a random anchor frame and moves
    // at constant world velocity along ±x.
    let mut movers = Vec::with_capacity(config.moving_cars);
    let mut obstacles: Vec<Aabb> = Vec::new();
    for _ in 0..config.moving_cars {
        let size = CAR_SIZE.map(|s| s * rng.random_range(0.9..1.1));
        let y = lateral(&mut rng, 2.6, 5.5);
        let dir = if rng.random_bool(0.7) { 1.0 } else { -1.0 };
        let step = range_uniform(&mut rng, config.mover_step) * dir;
        let anchor = rng.random_range(0..config.frames);
        let ax = poses[anchor].translation_vector().x + rng.random_range(3.0..17.0);
        let track: Vec<Vector3<f64>> = (0..config.frames)
            .map(|t| Vector3::new(ax + step * (t as f64 - anchor as f64), y, 0.0))
            .collect();
        let swept = Aabb::from_base(track[0], size).union(&Aabb::from_base(track[config.frames - 1], size));
        obstacles.push(swept);
        let local = Aabb::from_base(Vector3::zeros(), size);
        let mut samples = Vec::new();
        cuboid_samples(&mut rng, &local, MOVING_CAR, (0.4, 0.9), &mut samples);
        movers.push(Mover { size, track, samples });
    }

    let mut statics: Vec<Sample> = Vec::new();
    let mut footprints: Vec<Aabb> = Vec::new();
    let corridor = Aabb {
        min: Vector3::new(x0, -EGO_CORRIDOR, 0.0),
        max: Vector3::new(x1, EGO_CORRIDOR, 0.0),
    };
    let place = |rng: &mut ChaCha8Rng, make: &mut dyn FnMut(&mut ChaCha8Rng) -> Aabb, obstacles: &mut Vec<Aabb>| {
        for _ in 0..64 {
            let b = make(rng);
            if b.overlaps_xy(&corridor, 0.0) || obstacles.iter().any(|o| o.overlaps_xy(&b, 0.3)) {
                continue;
            }
            obstacles.push(b);
            return Some(b);
        }
        None
    };

    for _ in 0..config.parked_cars {
        let mut make = |rng: &mut ChaCha8Rng| {
            let size = CAR_SIZE.map(|s| s * rng.random_range(0.9..1.1));
            let c = Vector3::new(rng.random_range(x0..x1), lateral(rng, 2.6, 5.5), 0.0);
            Aabb::from_base(c, size)
        };
        if let Some(b) = place(&mut rng, &mut make, &mut obstacles) {
            cuboid_samples(&mut rng, &b, CAR, (0.4, 0.9), &mut statics);
            footprints.push(b);
        }
    }
    for k in 0..config.static_objects {
        let small = k % 2 == 0;
        let mut make = |rng: &mut ChaCha8Rng| {
            if small {
                let s = rng.random_range(0.2..0.8);
                let c = Vector3::new(rng.random_range(x0..x1), lateral(rng, 2.2, 7.0), 0.0);
                Aabb::from_base(c, [s, s, rng.random_range(1.0..4.0)])
            } else {
                let sx = rng.random_range(2.0..10.0);
                let sy = rng.random_range(2.0..8.0);
                let y = lateral(rng, 6.0, half_y.max(6.5));
                let c = Vector3::new(rng.random_range(x0..x1), y + y.signum() * sy / 2.0, 0.0);
                Aabb::from_base(c, [sx, sy, rng.random_range(2.0..6.0)])
            }
        };
        if let Some(b) = place(&mut rng, &mut make, &mut obstacles) {
            cuboid_samples(&mut rng, &b, BUILDING, (0.2, 0.6), &mut statics);
            footprints.push(b);
        }
    }

    // Ground candidates on a jittered grid, skipping static footprints.
    if config.ground_density > 0.0 {
        let nx = (config.extent_x / CANDIDATE_SPACING).ceil() as usize;
        let ny = (config.extent_y / CANDIDATE_SPACING).ceil() as usize;
        for i in 0..nx {
            for j in 0..ny {
                let x = x0 + (i as f64 + rng.random::<f64>()) * CANDIDATE_SPACING;
                let y = -half_y + (j as f64 + rng.random::<f64>()) * CANDIDATE_SPACING;
                let threshold: f32 = rng.random();
                let intensity = rng.random_range(0.05..0.3);
                if footprints.iter().any(|b| b.contains_xy(x, y)) {
                    continue;
                }
                statics.push(Sample {
                    position: Vector3::new(x, y, 0.0),
                    normal: Vector3::z(),
                    threshold,
                    intensity,
                    label: ROAD,
                });
            }
        }
    }
    statics.sort_by(|a, b| a.position.x.total_cmp(&b.position.x));

    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut frames = Vec::with_capacity(config.frames);
    for (t, pose) in poses.iter().enumerate() {
        let sensor = pose.translation_vector();
        let to_ego = pose.inverse();
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut emit = |rng: &mut ChaCha8Rng, s: &Sample, world: Vector3<f64>, density: f64| {
            let d = world - sensor;
            let r = d.norm();
            if !(MIN_RANGE..=config.max_range).contains(&r) || s.normal.dot(&d) >= 0.0 {
                return;
            }
            if (s.threshold as f64) >= keep_probability(density, r) {
                return;
            }
            let mut p = to_ego.transform(&world);
            if config.noise_sigma > 0.0 {
                p += Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
            }
            points.push(Point::new(p.x as f32, p.y as f32, p.z as f32, s.intensity));
            labels.push(s.label);
        };

        let mover_boxes: Vec<Aabb> = movers.iter().map(|m| Aabb::from_base(m.track[t], m.size)).collect();
        let lo = statics.partition_point(|s| s.position.x < sensor.x - config.max_range);
        let hi = statics.partition_point(|s| s.position.x <= sensor.x + config.max_range);
        for s in &statics[lo..hi] {
            let density = if s.label == ROAD {
                if mover_boxes.iter().any(|b| b.contains_xy(s.position.x, s.position.y)) {
                    continue;
                }
                config.ground_density
            } else {
                config.surface_density
            };
            emit(&mut rng, s, s.position, density);
        }
        for m in &movers {
            for s in &m.samples {
                emit(&mut rng, s, s.position + m.track[t], config.surface_density);
            }
        }
        frames.push(PointCloud::with_labels(points, labels)?);
    }

    Ok(SyntheticSequence {
        frames,
        poses,
        mover_tracks: movers.into_iter().map(|m| m.track).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::count_motion_points;

    fn small() -> SceneConfig {
        SceneConfig {
            extent_x: 80.0,
            frames: 6,
            max_range: 30.0,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        for cfg in [
            SceneConfig { extent_x: 0.0, ..small() },
            SceneConfig { extent_y: 0.0, ..small() },
            SceneConfig { frames: 2, ..small() },
            SceneConfig { ego_step: (1.0, 0.5), ..small() },
        ] {
            assert!(matches!(generate_scene(&cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn no_moving_cars_means_no_motion_points() {
        let seq = generate_scene(&SceneConfig { moving_cars: 0, ..small() }).unwrap();
        for f in &seq.frames {
            assert_eq!(count_motion_points(f).unwrap(), 0);
            assert!(!f.is_empty());
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_scene(&SceneConfig { seed: 11, ..small() }).unwrap();
        let b = generate_scene(&SceneConfig { seed: 11, ..small() }).unwrap();
        let c = generate_scene(&SceneConfig { seed: 12, ..small() }).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.poses, b.poses);
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn labels_use_expected_ids() {
        let seq = generate_scene(&small()).unwrap();
        for f in &seq.frames {
            for &l in f.labels().unwrap() {
                assert!([ROAD, BUILDING, CAR, MOVING_CAR].contains(&l));
            }
        }
    }

    #[test]
    fn ground_sits_below_sensor() {
        let seq = generate_scene(&SceneConfig { noise_sigma: 0.0, ..small() }).unwrap();
        let f = &seq.frames[0];
        for (p, &l) in f.points.iter().zip(f.labels().unwrap()) {
            if l == ROAD {
                assert!((p.z + 1.73).abs() < 1e-4);
            }
        }
    }
}
