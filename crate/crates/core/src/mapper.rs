//! Sliding local occupancy map and the two map products derived from it.
//!
//! Leaves live at a single resolution in a hash keyed by world-anchored
//! integer cell coordinates. Inner octree nodes are implicit: the node at
//! depth `d` containing a leaf has key `leaf >> (max_depth - d)` per axis.

use std::time::Instant;

use nalgebra::Vector3;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::dataset::{PointCloud, Pose};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OctreeConfig {
    pub leaf_resolution: f64,
    pub max_depth: u32,
    pub cull_radius: f64,
    pub l_hit: f32,
    pub l_miss: f32,
    pub l_min: f32,
    pub l_max: f32,
    pub occ_threshold: f64,
}

impl Default for OctreeConfig {
    fn default() -> Self {
        Self {
            leaf_resolution: 0.4,
            max_depth: 10,
            cull_radius: 30.0,
            l_hit: (0.7f64 / 0.3).ln() as f32,
            l_miss: (0.4f64 / 0.6).ln() as f32,
            l_min: -3.5,
            l_max: 3.5,
            occ_threshold: 0.5,
        }
    }
}

impl OctreeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.leaf_resolution > 0.0
            && self.cull_radius > 0.0
            && self.l_hit > 0.0
            && self.l_miss < 0.0
            && self.l_min < 0.0
            && self.l_max > 0.0
            && (0.0..1.0).contains(&self.occ_threshold)
            && (1..=20).contains(&self.max_depth);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid octree config: {self:?}")))
        }
    }

    fn occ_log_odds(&self) -> f32 {
        (self.occ_threshold / (1.0 - self.occ_threshold)).ln() as f32
    }
}

pub type LeafKey = [i32; 3];

/// Implicit octree node: `depth` 0 is the root, `max_depth` is the leaf level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeKey {
    pub depth: u32,
    pub coords: [i32; 3],
}

impl NodeKey {
    pub fn of_leaf(leaf: LeafKey, depth: u32, max_depth: u32) -> Self {
        let s = max_depth - depth;
        Self {
            depth,
            coords: leaf.map(|c| c >> s),
        }
    }

    pub fn children(&self) -> [NodeKey; 8] {
        std::array::from_fn(|o| NodeKey {
            depth: self.depth + 1,
            coords: [
                2 * self.coords[0] + (o as i32 & 1),
                2 * self.coords[1] + ((o as i32 >> 1) & 1),
                2 * self.coords[2] + ((o as i32 >> 2) & 1),
            ],
        })
    }

    /// Axis-aligned bounds `(min, max)` in meters.
    pub fn bounds(&self, cfg: &OctreeConfig) -> ([f64; 3], [f64; 3]) {
        let size = cfg.leaf_resolution * (1u64 << (cfg.max_depth - self.depth)) as f64;
        let lo = self.coords.map(|c| c as f64 * size);
        (lo, lo.map(|v| v + size))
    }
}

#[derive(Debug, Clone, Copy)]
struct Leaf {
    log_odds: f32,
    stamp: u32,
}

#[derive(Debug, Clone)]
pub struct LocalOctree {
    cfg: OctreeConfig,
    leaves: FxHashMap<LeafKey, Leaf>,
    pose: Option<Pose>,
    scans: u32,
}

/// Visits leaf keys crossed by the segment `a → b`, in order, including both
/// end cells.
fn traverse(a: &Vector3<f64>, b: &Vector3<f64>, res: f64, mut visit: impl FnMut(LeafKey)) {
    let start = [a.x, a.y, a.z].map(|v| (v / res).floor());
    let end = [b.x, b.y, b.z].map(|v| (v / res).floor());
    let d = [b.x - a.x, b.y - a.y, b.z - a.z];
    let o = [a.x, a.y, a.z];
    let mut cur = start.map(|v| v as i32);
    let goal = end.map(|v| v as i32);
    let mut step = [0i32; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for k in 0..3 {
        if d[k] > 0.0 {
            step[k] = 1;
            t_max[k] = ((start[k] + 1.0) * res - o[k]) / d[k];
            t_delta[k] = res / d[k];
        } else if d[k] < 0.0 {
            step[k] = -1;
            t_max[k] = (start[k] * res - o[k]) / d[k];
            t_delta[k] = -res / d[k];
        }
    }
    let budget: i32 = (0..3).map(|k| (goal[k] - cur[k]).abs()).sum();
    visit(cur);
    for _ in 0..budget {
        if cur == goal {
            break;
        }
        let k = if t_max[0] < t_max[1] {
            if t_max[0] < t_max[2] { 0 } else { 2 }
        } else if t_max[1] < t_max[2] {
            1
        } else {
            2
        };
        // Never step an axis past its goal; rounding can make the ray appear
        // to leave through the wrong face near the end.
        let k = if cur[k] == goal[k] {
            (0..3).find(|&j| cur[j] != goal[j]).unwrap_or(k)
        } else {
            k
        };
        cur[k] += step[k];
        t_max[k] += t_delta[k];
        visit(cur);
    }
}

impl LocalOctree {
    pub fn new(cfg: OctreeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            leaves: FxHashMap::default(),
            pose: None,
            scans: 0,
        })
    }

    pub fn config(&self) -> &OctreeConfig {
        &self.cfg
    }

    pub fn sensor_pose(&self) -> Option<&Pose> {
        self.pose.as_ref()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn key_of(&self, p: &Vector3<f64>) -> LeafKey {
        [p.x, p.y, p.z].map(|v| (v / self.cfg.leaf_resolution).floor() as i32)
    }

    pub fn leaf_center(&self, key: LeafKey) -> Vector3<f64> {
        let r = self.cfg.leaf_resolution;
        Vector3::new(
            (key[0] as f64 + 0.5) * r,
            (key[1] as f64 + 0.5) * r,
            (key[2] as f64 + 0.5) * r,
        )
    }

    pub fn log_odds(&self, key: LeafKey) -> Option<f32> {
        self.leaves.get(&key).map(|l| l.log_odds)
    }

    pub fn probability(&self, key: LeafKey) -> Option<f64> {
        self.log_odds(key).map(|l| 1.0 / (1.0 + (-(l as f64)).exp()))
    }

    pub fn leaves(&self) -> impl Iterator<Item = (LeafKey, f32)> + '_ {
        self.leaves.iter().map(|(k, l)| (*k, l.log_odds))
    }

    pub fn occupied_leaves(&self) -> impl Iterator<Item = LeafKey> + '_ {
        let thr = self.cfg.occ_log_odds();
        self.leaves
            .iter()
            .filter(move |(_, l)| l.log_odds > thr)
            .map(|(k, _)| *k)
    }

    /// Integrates one scan given in the sensor frame.
    ///
    /// Each leaf changes at most once per scan; a leaf that is both an
    /// endpoint and crossed by another ray counts as a hit. Leaves farther
    /// than the cull radius from the new sensor position are dropped.
    pub fn update_with_scan(&mut self, cloud: &PointCloud, pose: &Pose) {
        self.scans = self.scans.wrapping_add(1);
        let stamp = self.scans;
        let cfg = &self.cfg;
        let (lo, hi) = (cfg.l_min, cfg.l_max);
        let origin = pose.translation;
        let mut ends: Vec<(Vector3<f64>, bool)> = Vec::with_capacity(cloud.len());
        for p in &cloud.points {
            let w = pose.transform(&Vector3::new(p.x as f64, p.y as f64, p.z as f64));
            let ray = w - origin;
            let len = ray.norm();
            if len > cfg.cull_radius {
                ends.push((origin + ray * (cfg.cull_radius / len), false));
            } else {
                ends.push((w, true));
            }
        }
        let res = cfg.leaf_resolution;
        let (l_hit, l_miss) = (cfg.l_hit, cfg.l_miss);
        for (e, hit) in &ends {
            if *hit {
                let key = [e.x, e.y, e.z].map(|v| (v / res).floor() as i32);
                let leaf = self.leaves.entry(key).or_insert(Leaf {
                    log_odds: 0.0,
                    stamp: 0,
                });
                if leaf.stamp != stamp {
                    leaf.log_odds = (leaf.log_odds + l_hit).clamp(lo, hi);
                    leaf.stamp = stamp;
                }
            }
        }
        let leaves = &mut self.leaves;
        for (e, _) in &ends {
            traverse(&origin, e, res, |key| {
                let leaf = leaves.entry(key).or_insert(Leaf {
                    log_odds: 0.0,
                    stamp: 0,
                });
                if leaf.stamp != stamp {
                    leaf.log_odds = (leaf.log_odds + l_miss).clamp(lo, hi);
                    leaf.stamp = stamp;
                }
            });
        }
        self.pose = Some(*pose);
        self.cull();
    }

    fn cull(&mut self) {
        let Some(pose) = self.pose else { return };
        let c = pose.translation / self.cfg.leaf_resolution - Vector3::repeat(0.5);
        let r = self.cfg.cull_radius / self.cfg.leaf_resolution;
        let r2 = r * r;
        self.leaves.retain(|k, _| {
            let d = Vector3::new(k[0] as f64 - c.x, k[1] as f64 - c.y, k[2] as f64 - c.z);
            d.norm_squared() <= r2
        });
    }
}

/// Orientation of the extracted grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridAlignment {
    /// Axes rotated by the sensor yaw.
    #[default]
    Yaw,
    World,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    pub grid_size: usize,
    pub top_height: usize,
    pub top_width: usize,
    pub alignment: GridAlignment,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            grid_size: 32,
            top_height: 64,
            top_width: 64,
            alignment: GridAlignment::Yaw,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.top_height == 0 || self.top_width == 0 {
            return Err(Error::InvalidConfig("grid and image sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Dense binary occupancy over the cull cube. Cell `(i, j, k)` covers offsets
/// `[-R + i·c, -R + (i+1)·c)` from `origin` (the sensor position) along the
/// grid axes, which are rotated by `yaw` about +z.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid3D {
    pub size: usize,
    pub cell_size: f32,
    pub origin: [f32; 3],
    pub yaw: f32,
    pub occupancy: Vec<u8>,
}

impl VoxelGrid3D {
    pub fn zeros(size: usize, cell_size: f32) -> Self {
        Self {
            size,
            cell_size,
            origin: [0.0; 3],
            yaw: 0.0,
            occupancy: vec![0; size * size * size],
        }
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.size + j) * self.size + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.occupancy[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: u8) {
        let idx = self.index(i, j, k);
        self.occupancy[idx] = v;
    }

    pub fn count_occupied(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.occupancy.iter().map(|&v| v as f32).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopViewImage {
    pub height: usize,
    pub width: usize,
    pub cell_size: f32,
    pub origin: [f32; 3],
    /// Row-major; row `u` runs along the grid x axis.
    pub pixels: Vec<f32>,
}

impl TopViewImage {
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.pixels[u * self.width + v]
    }
}

/// Offset of a world point from the sensor, expressed along the grid axes.
fn grid_frame(sensor: &Vector3<f64>, yaw: f64, p: &Vector3<f64>) -> [f64; 3] {
    let d = p - sensor;
    let (s, c) = yaw.sin_cos();
    [c * d.x + s * d.y, -s * d.x + c * d.y, d.z]
}

/// Rasterizes occupied leaves around the current sensor pose: a cell is 1
/// iff the center of some occupied leaf falls inside it.
pub fn extract_voxel_grid(tree: &LocalOctree, ex: &ExtractionConfig) -> VoxelGrid3D {
    let pose = tree.pose.unwrap_or_else(|| Pose::identity(0));
    extract_at(tree, &pose, ex)
}

/// Extraction centered at an arbitrary viewpoint instead of the current
/// sensor pose.
pub fn extract_at(tree: &LocalOctree, view: &Pose, ex: &ExtractionConfig) -> VoxelGrid3D {
    let g = ex.grid_size;
    let r = tree.cfg.cull_radius;
    let cell = 2.0 * r / g as f64;
    let yaw = match ex.alignment {
        GridAlignment::Yaw => view.yaw(),
        GridAlignment::World => 0.0,
    };
    let sensor = view.translation;
    let mut grid = VoxelGrid3D {
        size: g,
        cell_size: cell as f32,
        origin: [sensor.x as f32, sensor.y as f32, sensor.z as f32],
        yaw: yaw as f32,
        occupancy: vec![0; g * g * g],
    };
    for key in tree.occupied_leaves() {
        let q = grid_frame(&sensor, yaw, &tree.leaf_center(key));
        let idx = q.map(|v| ((v + r) / cell).floor());
        if idx.iter().all(|&v| v >= 0.0 && v < g as f64) {
            grid.set(idx[0] as usize, idx[1] as usize, idx[2] as usize, 1);
        }
    }
    grid
}

/// Column max over z, then area-max resampling to `height × width`.
pub fn project_top_view(grid: &VoxelGrid3D, height: usize, width: usize) -> TopViewImage {
    let g = grid.size;
    let column = column_max(grid);
    let mut pixels = vec![0f32; height * width];
    for u in 0..height {
        let (i0, i1) = (u * g / height, ((u + 1) * g).div_ceil(height));
        for v in 0..width {
            let (j0, j1) = (v * g / width, ((v + 1) * g).div_ceil(width));
            let mut m = 0f32;
            for i in i0..i1.min(g) {
                for j in j0..j1.min(g) {
                    m = m.max(column[i * g + j]);
                }
            }
            pixels[u * width + v] = m;
        }
    }
    TopViewImage {
        height,
        width,
        cell_size: grid.cell_size * g as f32 / height as f32,
        origin: grid.origin,
        pixels,
    }
}

/// Binary max-projection of each z-column, `G × G`, row-major in x.
pub fn column_max(grid: &VoxelGrid3D) -> Vec<f32> {
    let g = grid.size;
    grid.occupancy
        .chunks_exact(g.max(1))
        .map(|col| if col.iter().any(|&v| v != 0) { 1.0 } else { 0.0 })
        .collect()
}

/// Streams frames through a fresh map, extracting both products per frame,
/// and returns the products.
pub fn build_maps(
    frames: &[(PointCloud, Pose)],
    cfg: &OctreeConfig,
    ex: &ExtractionConfig,
) -> Result<Vec<(VoxelGrid3D, TopViewImage)>> {
    ex.validate()?;
    let mut tree = LocalOctree::new(cfg.clone())?;
    Ok(frames
        .iter()
        .map(|(c, p)| {
            tree.update_with_scan(c, p);
            let grid = extract_voxel_grid(&tree, ex);
            let top = project_top_view(&grid, ex.top_height, ex.top_width);
            (grid, top)
        })
        .collect())
}

/// Like [`build_maps`], but extracts at `extraction_poses[k]` (position and
/// heading of the grid) while integrating scans at the true poses.
pub fn build_maps_from_viewpoints(
    frames: &[(PointCloud, Pose)],
    extraction_poses: &[Pose],
    cfg: &OctreeConfig,
    ex: &ExtractionConfig,
) -> Result<Vec<(VoxelGrid3D, TopViewImage)>> {
    ex.validate()?;
    if frames.len() != extraction_poses.len() {
        return Err(Error::MissingPose(frames.len().min(extraction_poses.len())));
    }
    let mut tree = LocalOctree::new(cfg.clone())?;
    Ok(frames
        .iter()
        .zip(extraction_poses)
        .map(|((c, p), view)| {
            tree.update_with_scan(c, p);
            let grid = extract_at(&tree, view, ex);
            let top = project_top_view(&grid, ex.top_height, ex.top_width);
            (grid, top)
        })
        .collect())
}

/// Average frames per second of map update plus voxel and top-view
/// extraction over the sequence.
pub fn mapper_throughput(
    frames: &[(PointCloud, Pose)],
    cfg: &OctreeConfig,
    ex: &ExtractionConfig,
) -> Result<f64> {
    if frames.len() < 10 {
        return Err(Error::InvalidConfig(format!(
            "throughput needs at least 10 frames, got {}",
            frames.len()
        )));
    }
    ex.validate()?;
    let mut tree = LocalOctree::new(cfg.clone())?;
    let start = Instant::now();
    let mut sink = 0usize;
    for (c, p) in frames {
        tree.update_with_scan(c, p);
        let grid = extract_voxel_grid(&tree, ex);
        let top = project_top_view(&grid, ex.top_height, ex.top_width);
        sink += top.pixels.len();
    }
    std::hint::black_box(sink);
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok(frames.len() as f64 / secs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Point;

    fn cloud(pts: &[[f32; 3]]) -> PointCloud {
        PointCloud {
            points: pts
                .iter()
                .map(|p| Point {
                    x: p[0],
                    y: p[1],
                    z: p[2],
                    intensity: 0.5,
                })
                .collect(),
            frame_id: 0,
        }
    }

    #[test]
    fn empty_scan_sets_pose_only() {
        let mut t = LocalOctree::new(OctreeConfig::default()).unwrap();
        let pose = Pose::planar(3.0, 4.0, 0.0, 0.3, 0);
        t.update_with_scan(&PointCloud::default(), &pose);
        assert!(t.is_empty());
        assert_eq!(t.sensor_pose(), Some(&pose));
    }

    #[test]
    fn single_hit_and_miss_arithmetic() {
        let mut t = LocalOctree::new(OctreeConfig::default()).unwrap();
        let pose = Pose::identity(0);
        t.update_with_scan(&cloud(&[[5.1, 0.1, 0.1]]), &pose);
        let key = t.key_of(&Vector3::new(5.1, 0.1, 0.1));
        let l = t.log_odds(key).unwrap() as f64;
        assert!((l - 0.8473).abs() < 1e-4);
        assert!((t.probability(key).unwrap() - 0.7).abs() < 1e-6);
        // Now pass through that leaf to a farther endpoint.
        t.update_with_scan(&cloud(&[[9.1, 0.1, 0.1]]), &pose);
        let l = t.log_odds(key).unwrap() as f64;
        assert!((l - 0.4418).abs() < 1e-4);
        assert!((t.probability(key).unwrap() - 0.6087).abs() < 1e-4);
    }

    #[test]
    fn traversal_is_connected() {
        let a = Vector3::new(0.13, -0.7, 0.2);
        let b = Vector3::new(-7.9, 4.33, 1.1);
        let mut cells = Vec::new();
        traverse(&a, &b, 0.4, |k| cells.push(k));
        assert_eq!(cells[0], [0, -2, 0]);
        assert_eq!(*cells.last().unwrap(), [-20, 10, 2]);
        for w in cells.windows(2) {
            let d: i32 = (0..3).map(|k| (w[0][k] - w[1][k]).abs()).sum();
            assert_eq!(d, 1);
        }
    }

    #[test]
    fn far_points_clip_to_free_space() {
        let mut t = LocalOctree::new(OctreeConfig::default()).unwrap();
        t.update_with_scan(&cloud(&[[45.0, 0.2, 0.2]]), &Pose::identity(0));
        assert!(t.leaves().all(|(_, l)| l < 0.0));
        assert!(t.len() > 70);
    }

    #[test]
    fn children_partition_parent() {
        let cfg = OctreeConfig::default();
        let parent = NodeKey {
            depth: 4,
            coords: [-3, 5, 0],
        };
        let (plo, phi) = parent.bounds(&cfg);
        let vol: f64 = parent
            .children()
            .iter()
            .map(|c| {
                let (lo, hi) = c.bounds(&cfg);
                for k in 0..3 {
                    assert!(lo[k] >= plo[k] - 1e-9 && hi[k] <= phi[k] + 1e-9);
                }
                (0..3).map(|k| hi[k] - lo[k]).product::<f64>()
            })
            .sum();
        let pvol: f64 = (0..3).map(|k| phi[k] - plo[k]).product();
        assert!((vol - pvol).abs() < 1e-6 * pvol);
        for c in parent.children() {
            let leaf = c.coords.map(|v| v << (cfg.max_depth - c.depth));
            assert_eq!(NodeKey::of_leaf(leaf, 4, cfg.max_depth), parent);
        }
    }

    #[test]
    fn top_view_upsamples_by_replication() {
        let mut g = VoxelGrid3D::zeros(4, 1.0);
        g.set(1, 2, 3, 1);
        let img = project_top_view(&g, 8, 8);
        for u in 0..8 {
            for v in 0..8 {
                let want = (u / 2 == 1 && v / 2 == 2) as u8 as f32;
                assert_eq!(img.get(u, v), want);
            }
        }
        let img = project_top_view(&g, 4, 4);
        assert_eq!(img.pixels.iter().sum::<f32>(), 1.0);
        assert_eq!(img.get(1, 2), 1.0);
    }

    #[test]
    fn throughput_needs_ten_frames() {
        let frames = vec![(PointCloud::default(), Pose::identity(0)); 3];
        let e = mapper_throughput(&frames, &OctreeConfig::default(), &ExtractionConfig::default());
        assert!(e.is_err());
        let frames = vec![(PointCloud::default(), Pose::identity(0)); 10];
        let hz = mapper_throughput(&frames, &OctreeConfig::default(), &ExtractionConfig::default()).unwrap();
        assert!(hz.is_finite() && hz > 0.0);
    }
}
