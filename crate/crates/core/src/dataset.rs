//! LiDAR log ingestion, synthetic worlds with planted loops, and viewpoint noise.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One LiDAR return in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame_id: usize,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rigid sensor pose (sensor frame to world frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub timestamp_index: usize,
}

impl Pose {
    pub fn identity(timestamp_index: usize) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            timestamp_index,
        }
    }

    /// Planar pose: rotation about +z by `yaw`.
    pub fn planar(x: f64, y: f64, z: f64, yaw: f64, timestamp_index: usize) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation: Vector3::new(x, y, z),
            timestamp_index,
        }
    }

    /// Heading of the sensor x axis projected on the ground plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Largest entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max()
    }

    pub fn is_valid(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.orthonormality_error() < 1e-6
            && (self.rotation.determinant() - 1.0).abs() < 1e-6
    }

    pub fn planar_distance(&self, other: &Pose) -> f64 {
        let d = self.translation - other.translation;
        d.x.hypot(d.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseDistribution {
    /// Uniform in `[-amp, amp]`.
    #[default]
    Uniform,
    /// Zero-mean normal with standard deviation `amp`.
    Gaussian,
}

/// Planar viewpoint perturbation: translation amplitude `t_amp` (meters) and
/// heading amplitude `r_amp` (radians).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub t_amp: f64,
    pub r_amp: f64,
    pub seed: u64,
    pub distribution: NoiseDistribution,
}

impl NoiseSpec {
    pub fn uniform(t_amp: f64, r_amp: f64, seed: u64) -> Self {
        Self {
            t_amp,
            r_amp,
            seed,
            distribution: NoiseDistribution::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_amp >= 0.0 && self.r_amp >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise amplitudes must be non-negative (t_amp {}, r_amp {})",
                self.t_amp, self.r_amp
            )));
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, amp: f64, rng: &mut R) -> f64 {
        match self.distribution {
            NoiseDistribution::Uniform => {
                let u: f64 = rng.random_range(-1.0..=1.0);
                u * amp
            }
            NoiseDistribution::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                z * amp
            }
        }
    }
}

/// Perturbs x, y and yaw of every pose independently per frame.
///
/// z, roll and pitch are untouched: the yaw perturbation is a left rotation
/// about the world z axis.
pub fn inject_viewpoint_noise(poses: &[Pose], noise: &NoiseSpec) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    poses
        .iter()
        .map(|p| {
            let dx = noise.draw(noise.t_amp, &mut rng);
            let dy = noise.draw(noise.t_amp, &mut rng);
            let dyaw = noise.draw(noise.r_amp, &mut rng);
            if dx == 0.0 && dy == 0.0 && dyaw == 0.0 {
                return *p;
            }
            let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), dyaw);
            Pose {
                rotation: rz.matrix() * p.rotation,
                translation: p.translation + Vector3::new(dx, dy, 0.0),
                timestamp_index: p.timestamp_index,
            }
        })
        .collect()
}

/// Decodes a KITTI velodyne frame: packed little-endian `f32` quadruples
/// `(x, y, z, reflectance)`.
pub fn parse_velodyne_frame(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::MalformedFrame {
            frame: None,
            reason: format!("{} bytes is not a multiple of 16", bytes.len()),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]);
        let p = Point {
            x: f(0),
            y: f(4),
            z: f(8),
            intensity: f(12),
        };
        if ![p.x, p.y, p.z, p.intensity].iter().all(|v| v.is_finite()) {
            return Err(Error::MalformedFrame {
                frame: None,
                reason: format!("non-finite value in record {i}"),
            });
        }
        points.push(p);
    }
    Ok(PointCloud {
        points,
        frame_id: 0,
    })
}

pub fn serialize_velodyne_frame(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses KITTI ground-truth poses: one row-major 3×4 matrix per non-empty
/// line. Pose `k` is the k-th non-empty line.
pub fn parse_pose_file(text: &str) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| Error::MalformedPose {
            line: lineno + 1,
            reason,
        };
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("`{t}` is not a number"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != 12 {
            return Err(err(format!("expected 12 numbers, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite entry".into()));
        }
        let pose = Pose {
            rotation: Matrix3::new(
                vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
            ),
            translation: Vector3::new(vals[3], vals[7], vals[11]),
            timestamp_index: poses.len(),
        };
        if !pose.is_valid() {
            return Err(err("rotation block is not a proper rotation".into()));
        }
        poses.push(pose);
    }
    Ok(poses)
}

pub fn format_pose_file(poses: &[Pose]) -> String {
    let mut s = String::new();
    for p in poses {
        let r = &p.rotation;
        let t = &p.translation;
        let row = [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ];
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    s
}

/// A recorded sequence: per-frame clouds (sensor frame) and poses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequence {
    pub clouds: Vec<PointCloud>,
    pub poses: Vec<Pose>,
}

/// Writes `velodyne/NNNNNN.bin` files and `poses.txt` under `dir`.
pub fn write_dataset(dir: &Path, seq: &Sequence) -> Result<()> {
    let vdir = dir.join("velodyne");
    fs::create_dir_all(&vdir)?;
    for (i, c) in seq.clouds.iter().enumerate() {
        fs::write(vdir.join(format!("{i:06}.bin")), serialize_velodyne_frame(c))?;
    }
    fs::write(dir.join("poses.txt"), format_pose_file(&seq.poses))?;
    Ok(())
}

/// Frame files of a dataset directory, ordered by file name.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let vdir = dir.join("velodyne");
    if !vdir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&vdir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_dataset(dir: &Path) -> Result<Sequence> {
    let poses = parse_pose_file(&fs::read_to_string(dir.join("poses.txt"))?)?;
    let mut clouds = Vec::new();
    for (i, path) in frame_paths(dir)?.iter().enumerate() {
        let mut c = parse_velodyne_frame(&fs::read(path)?).map_err(|e| match e {
            Error::MalformedFrame { reason, .. } => Error::MalformedFrame {
                frame: Some(i),
                reason,
            },
            other => other,
        })?;
        c.frame_id = i;
        clouds.push(c);
    }
    if clouds.len() != poses.len() {
        return Err(Error::MissingPose(poses.len().min(clouds.len())));
    }
    Ok(Sequence { clouds, poses })
}

/// Simulated spinning LiDAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub beams: usize,
    pub azimuth_steps: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub max_range: f64,
    pub sensor_height: f64,
    /// Standard deviation of additive range noise (0 = ideal ray-cast).
    pub range_noise: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            beams: 16,
            azimuth_steps: 360,
            elevation_min_deg: -15.0,
            elevation_max_deg: 15.0,
            max_range: 50.0,
            sensor_height: 1.73,
            range_noise: 0.0,
        }
    }
}

/// Revisit: frames of `query` re-traverse the frames of `reference`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSegment {
    pub query: Range<usize>,
    pub reference: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorldSpec {
    pub n_frames: usize,
    /// Ground-plane waypoints (meters) of a polyline traversed at constant speed.
    pub trajectory: Vec<[f64; 2]>,
    pub obstacle_seed: u64,
    pub loop_segments: Vec<LoopSegment>,
    /// Obstacles per 100 m².
    pub obstacle_density: f64,
    /// Obstacle-free corridor half-width around the trajectory.
    pub clearance: f64,
    /// Sideways offset of a revisit relative to the original traversal.
    pub revisit_offset: f64,
    pub scan: ScanConfig,
}

impl Default for SyntheticWorldSpec {
    /// A 200-frame run around a 40 m × 60 m block; the last 60 frames revisit
    /// frames 10..70.
    fn default() -> Self {
        Self {
            n_frames: 200,
            trajectory: vec![[0.0, 0.0], [60.0, 0.0], [60.0, 40.0], [0.0, 40.0], [0.0, 0.0], [60.0, 0.0], [60.0, 40.0]],
            obstacle_seed: 7,
            loop_segments: vec![LoopSegment {
                query: 140..200,
                reference: 10..70,
            }],
            obstacle_density: 1.5,
            clearance: 3.0,
            revisit_offset: 0.5,
            scan: ScanConfig::default(),
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_frames > 0 && self.trajectory.is_empty() {
            return bad("trajectory needs at least one waypoint".into());
        }
        if self.trajectory.iter().flatten().any(|v| !v.is_finite()) {
            return bad("trajectory waypoints must be finite".into());
        }
        for seg in &self.loop_segments {
            for r in [&seg.query, &seg.reference] {
                if r.start >= r.end || r.end > self.n_frames {
                    return bad(format!("loop range {r:?} outside [0, {})", self.n_frames));
                }
            }
        }
        if !(self.obstacle_density >= 0.0) || !(self.scan.max_range > 0.0) {
            return bad("obstacle density and scan range must be non-negative".into());
        }
        if self.scan.beams == 0 || self.scan.azimuth_steps == 0 {
            return bad("scan needs at least one beam and one azimuth step".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    /// Yaw-rotated box standing on the ground.
    Box { half: [f64; 2], yaw: f64 },
    Cylinder { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Obstacle {
    center: [f64; 2],
    height: f64,
    shape: Shape,
}

impl Obstacle {
    fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Box { half, .. } => half[0].hypot(half[1]),
            Shape::Cylinder { radius } => radius,
        }
    }

    /// Smallest positive ray parameter at which `o + t·d` enters the solid.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match self.shape {
            Shape::Cylinder { radius } => {
                let (px, py) = (o.x - self.center[0], o.y - self.center[1]);
                let a = d.x * d.x + d.y * d.y;
                let mut best: Option<f64> = None;
                if a > 1e-12 {
                    let b = 2.0 * (px * d.x + py * d.y);
                    let c = px * px + py * py - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / (2.0 * a);
                        let z = o.z + t * d.z;
                        if t > 1e-9 && (0.0..=self.height).contains(&z) {
                            best = Some(t);
                        }
                    }
                }
                if d.z.abs() > 1e-12 {
                    let t = (self.height - o.z) / d.z;
                    if t > 1e-9 {
                        let (x, y) = (px + t * d.x, py + t * d.y);
                        if x * x + y * y <= radius * radius && best.is_none_or(|b| t < b) {
                            best = Some(t);
                        }
                    }
                }
                best
            }
            Shape::Box { half, yaw } => {
                let (s, c) = yaw.sin_cos();
                let (px, py) = (o.x - self.center[0], o.y - self.center[1]);
                let lo = [c * px + s * py, -s * px + c * py, o.z];
                let ld = [c * d.x + s * d.y, -s * d.x + c * d.y, d.z];
                let bmin = [-half[0], -half[1], 0.0];
                let bmax = [half[0], half[1], self.height];
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if ld[k].abs() < 1e-12 {
                        if lo[k] < bmin[k] || lo[k] > bmax[k] {
                            return None;
                        }
                    } else {
                        let ta = (bmin[k] - lo[k]) / ld[k];
                        let tb = (bmax[k] - lo[k]) / ld[k];
                        t0 = t0.max(ta.min(tb));
                        t1 = t1.min(ta.max(tb));
                    }
                }
                (t1 >= t0 && t0 > 1e-9).then_some(t0)
            }
        }
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * abx).hypot(p[1] - a[1] - t * aby)
}

fn place_obstacles(spec: &SyntheticWorldSpec) -> Vec<Obstacle> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.obstacle_seed);
    let margin = spec.scan.max_range.min(40.0);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for w in &spec.trajectory {
        for k in 0..2 {
            lo[k] = lo[k].min(w[k] - margin);
            hi[k] = hi[k].max(w[k] + margin);
        }
    }
    let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    let count = (spec.obstacle_density * area / 100.0).round() as usize;
    let near_path = |p: [f64; 2], r: f64| {
        if spec.trajectory.len() == 1 {
            return point_segment_distance(p, spec.trajectory[0], spec.trajectory[0]) < r;
        }
        spec.trajectory
            .windows(2)
            .any(|w| point_segment_distance(p, w[0], w[1]) < r)
    };
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < count * 20 {
        attempts += 1;
        let center = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
        let ob = if rng.random_bool(0.5) {
            Obstacle {
                center,
                height: rng.random_range(1.0..6.0),
                shape: Shape::Box {
                    half: [rng.random_range(0.5..2.5), rng.random_range(0.5..2.5)],
                    yaw: rng.random_range(0.0..std::f64::consts::PI),
                },
            }
        } else {
            Obstacle {
                center,
                height: rng.random_range(2.0..8.0),
                shape: Shape::Cylinder {
                    radius: rng.random_range(0.3..1.5),
                },
            }
        };
        if near_path(center, spec.clearance + ob.bounding_radius()) {
            continue;
        }
        out.push(ob);
    }
    out
}

/// Constant-speed positions and headings along the waypoint polyline.
fn trajectory_poses(spec: &SyntheticWorldSpec) -> Vec<Pose> {
    let n = spec.n_frames;
    let wps = &spec.trajectory;
    let z = spec.scan.sensor_height;
    if n == 0 {
        return Vec::new();
    }
    if wps.len() == 1 {
        return (0..n).map(|k| Pose::planar(wps[0][0], wps[0][1], z, 0.0, k)).collect();
    }
    let seg_len: Vec<f64> = wps
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .collect();
    let total: f64 = seg_len.iter().sum();
    (0..n)
        .map(|k| {
            let s = if n > 1 { total * k as f64 / (n - 1) as f64 } else { 0.0 };
            let mut acc = 0.0;
            let mut idx = 0;
            while idx + 1 < seg_len.len() && acc + seg_len[idx] < s {
                acc += seg_len[idx];
                idx += 1;
            }
            let (a, b) = (wps[idx], wps[idx + 1]);
            let f = if seg_len[idx] > 0.0 {
                ((s - acc) / seg_len[idx]).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let yaw = (b[1] - a[1]).atan2(b[0] - a[0]);
            Pose::planar(a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), z, yaw, k)
        })
        .collect()
}

/// The static obstacle field of a synthetic world, for re-rendering scans
/// from arbitrary poses.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    obstacles: Vec<Obstacle>,
    scan: ScanConfig,
    seed: u64,
}

impl SyntheticWorld {
    pub fn new(spec: &SyntheticWorldSpec) -> Self {
        Self {
            obstacles: place_obstacles(spec),
            scan: spec.scan.clone(),
            seed: spec.obstacle_seed,
        }
    }

    pub fn obstacle_count(&self) -> usize {
        self.obstacles.len()
    }

    /// Ray-casts one scan from `pose`; returned points are in the sensor frame.
    pub fn render(&self, pose: &Pose, frame_id: usize) -> PointCloud {
        let sc = &self.scan;
        let origin = pose.translation;
        let nearby: Vec<&Obstacle> = self
            .obstacles
            .iter()
            .filter(|o| {
                (o.center[0] - origin.x).hypot(o.center[1] - origin.y)
                    <= sc.max_range + o.bounding_radius()
            })
            .collect();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(self.seed ^ (frame_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let range_noise = (sc.range_noise > 0.0).then(|| Normal::new(0.0, sc.range_noise).expect("positive std"));
        let mut points = Vec::new();
        for b in 0..sc.beams {
            let el = if sc.beams > 1 {
                sc.elevation_min_deg
                    + (sc.elevation_max_deg - sc.elevation_min_deg) * b as f64 / (sc.beams - 1) as f64
            } else {
                0.5 * (sc.elevation_min_deg + sc.elevation_max_deg)
            }
            .to_radians();
            let (se, ce) = el.sin_cos();
            for a in 0..sc.azimuth_steps {
                let az = std::f64::consts::TAU * a as f64 / sc.azimuth_steps as f64;
                let (sa, ca) = az.sin_cos();
                let ds = Vector3::new(ce * ca, ce * sa, se);
                let dw = pose.rotation * ds;
                let hit = nearby
                    .iter()
                    .filter_map(|o| o.intersect(&origin, &dw))
                    .fold(f64::INFINITY, f64::min);
                if hit > sc.max_range {
                    continue;
                }
                let r = match &range_noise {
                    Some(n) => (hit + n.sample(&mut noise_rng)).max(0.0),
                    None => hit,
                };
                let p = ds * r;
                points.push(Point {
                    x: p.x as f32,
                    y: p.y as f32,
                    z: p.z as f32,
                    intensity: (1.0 - r / sc.max_range).clamp(0.0, 1.0) as f32,
                });
            }
        }
        PointCloud { points, frame_id }
    }
}

/// Poses of a synthetic run, with loop-segment frames placed onto their
/// reference frames (offset sideways by `revisit_offset`).
pub fn synthetic_poses(spec: &SyntheticWorldSpec) -> Vec<Pose> {
    let mut poses = trajectory_poses(spec);
    for seg in &spec.loop_segments {
        let (qn, rn) = (seg.query.len(), seg.reference.len());
        for (i, q) in seg.query.clone().enumerate() {
            let r = seg.reference.start + i * rn / qn;
            let base = poses[r];
            let yaw = base.yaw();
            let off = spec.revisit_offset;
            poses[q] = Pose::planar(
                base.translation.x - off * yaw.sin(),
                base.translation.y + off * yaw.cos(),
                base.translation.z,
                yaw,
                q,
            );
        }
    }
    poses
}

/// Deterministic synthetic sequence: ray-cast scans of a seeded obstacle
/// field along the trajectory.
pub fn generate_synthetic_sequence(spec: &SyntheticWorldSpec) -> Result<Sequence> {
    spec.validate()?;
    let poses = synthetic_poses(spec);
    if poses.is_empty() {
        return Ok(Sequence::default());
    }
    let world = SyntheticWorld::new(spec);
    let clouds = poses.iter().enumerate().map(|(k, p)| world.render(p, k)).collect();
    Ok(Sequence { clouds, poses })
}
