//! Point cloud loading, voxelization with per-voxel Gaussian moments, and
//! ground removal.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mean_and_covariance, sorted_eigen, Mat3, Vec3};

/// Raw 3D points in meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Per-point intensity. Carried through loading only.
    pub intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            intensity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies `p ↦ R p + t` to every point.
    pub fn transformed(&self, r: &Mat3, t: &Vec3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| r * p + t).collect(),
            intensity: self.intensity.clone(),
        }
    }

    fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            intensity: self
                .intensity
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Result of reading a KITTI scan: the finite points plus the record
/// indices that were dropped for holding non-finite values.
#[derive(Debug, Clone, Default)]
pub struct KittiScan {
    pub cloud: PointCloud,
    pub rejected: Vec<usize>,
}

const KITTI_RECORD: usize = 16;

/// Reads a KITTI velodyne `.bin` file: little-endian `f32` quadruples
/// `(x, y, z, intensity)`.
pub fn load_kitti_bin(path: impl AsRef<Path>) -> Result<KittiScan> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_bytes(&bytes).map_err(|reason| Error::malformed(path, reason))
}

pub fn parse_kitti_bytes(bytes: &[u8]) -> std::result::Result<KittiScan, String> {
    if bytes.len() % KITTI_RECORD != 0 {
        return Err(format!(
            "length {} is not a multiple of {KITTI_RECORD}",
            bytes.len()
        ));
    }
    let n = bytes.len() / KITTI_RECORD;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    let mut rejected = Vec::new();
    for (i, rec) in bytes.chunks_exact(KITTI_RECORD).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        let (x, y, z, w) = (f(0), f(1), f(2), f(3));
        if [x, y, z, w].iter().all(|v| v.is_finite()) {
            points.push(Vec3::new(x as f64, y as f64, z as f64));
            intensity.push(w);
        } else {
            rejected.push(i);
        }
    }
    Ok(KittiScan {
        cloud: PointCloud {
            points,
            intensity: Some(intensity),
        },
        rejected,
    })
}

/// Writes a cloud in KITTI `.bin` layout. Missing intensities are written
/// as zero.
pub fn write_kitti_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(cloud.len() * KITTI_RECORD);
    for (i, p) in cloud.points.iter().enumerate() {
        let w = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p.x as f32, p.y as f32, p.z as f32, w] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads the vertex element of an ASCII PLY file. Vertex properties other
/// than `x`, `y`, `z` and `intensity` are ignored, as are other elements.
pub fn load_ply_ascii(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply_ascii(&text).map_err(|reason| Error::malformed(path, reason))
}

pub fn parse_ply_ascii(text: &str) -> std::result::Result<PointCloud, String> {
    struct Element {
        name: String,
        count: usize,
        props: Vec<String>,
    }

    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing 'ply' magic".into());
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    loop {
        let line = lines.next().ok_or("header not terminated by end_header")?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "ascii", _] => saw_format = true,
            ["format", other, ..] => return Err(format!("unsupported PLY format '{other}'")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| format!("bad element count '{count}'"))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or("property before element")?;
                if el.name == "vertex" {
                    return Err("list properties on vertex are not supported".into());
                }
                el.props.push("list".into());
            }
            ["property", _ty, name] => elements
                .last_mut()
                .ok_or("property before element")?
                .props
                .push(name.to_string()),
            ["end_header"] => break,
            _ => return Err(format!("unrecognised header line '{line}'")),
        }
    }
    if !saw_format {
        return Err("missing format line".into());
    }

    let mut body = lines.filter(|l| !l.trim().is_empty());
    let mut cloud = PointCloud::default();
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                body.next()
                    .ok_or_else(|| format!("element '{}' shorter than declared", el.name))?;
            }
            continue;
        }
        let find = |n: &str| el.props.iter().position(|p| p == n);
        let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err("vertex element lacks x/y/z".into()),
        };
        let ii = find("intensity");
        let mut intensity = Vec::new();
        for k in 0..el.count {
            let line = body.next().ok_or_else(|| {
                format!("header declares {} vertices, body has {k}", el.count)
            })?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format!("non-numeric vertex line {k}"))?;
            if vals.len() != el.props.len() {
                return Err(format!(
                    "vertex line {k} has {} values, expected {}",
                    vals.len(),
                    el.props.len()
                ));
            }
            cloud.points.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
            if let Some(i) = ii {
                intensity.push(vals[i] as f32);
            }
        }
        if ii.is_some() {
            cloud.intensity = Some(intensity);
        }
    }
    if body.next().is_some() {
        return Err("body has more lines than the header declares".into());
    }
    if cloud.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err("non-finite coordinate".into());
    }
    Ok(cloud)
}

/// Integer lattice index of a voxel.
pub type VoxelKey = [i64; 3];

/// Points of one voxel summarised by population moments.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCell {
    pub key: VoxelKey,
    pub count: usize,
    pub mean: Vec3,
    /// Population (divide-by-N) covariance.
    pub cov: Mat3,
    /// Indices into the source cloud, ascending.
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    pub voxel_size: f64,
    pub cells: BTreeMap<VoxelKey, VoxelCell>,
}

impl VoxelMap {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&VoxelCell> {
        self.cells.get(key)
    }

    pub fn key_of(&self, p: &Vec3) -> VoxelKey {
        voxel_key(p, self.voxel_size)
    }
}

pub fn voxel_key(p: &Vec3, voxel_size: f64) -> VoxelKey {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

/// The 26 lattice neighbours of a key.
pub fn neighbours26(key: &VoxelKey) -> impl Iterator<Item = VoxelKey> + '_ {
    (-1..=1).flat_map(move |dx| {
        (-1..=1).flat_map(move |dy| {
            (-1..=1).filter_map(move |dz| {
                (dx != 0 || dy != 0 || dz != 0).then(|| [key[0] + dx, key[1] + dy, key[2] + dz])
            })
        })
    })
}

/// Partitions the cloud into cubic voxels of side `voxel_size` and records
/// the count, mean and population covariance of each.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<VoxelMap> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let keys: Vec<VoxelKey> = cloud
        .points
        .par_iter()
        .map(|p| voxel_key(p, voxel_size))
        .collect();
    let mut groups: BTreeMap<VoxelKey, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.into_iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    let groups: Vec<(VoxelKey, Vec<usize>)> = groups.into_iter().collect();
    let cells: Vec<VoxelCell> = groups
        .into_par_iter()
        .map(|(key, points)| {
            let (count, mean, cov) = mean_and_covariance(points.iter().map(|&i| &cloud.points[i]));
            VoxelCell {
                key,
                count,
                mean,
                cov,
                points,
            }
        })
        .collect();
    Ok(VoxelMap {
        voxel_size,
        cells: cells.into_iter().map(|c| (c.key, c)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundParams {
    /// Point-to-plane inlier distance (m).
    pub distance_threshold: f64,
    /// Largest admissible angle between the plane normal and +z (degrees).
    pub max_normal_angle_deg: f64,
    pub iterations: usize,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self {
            distance_threshold: 0.3,
            max_normal_angle_deg: 30.0,
            iterations: 200,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GroundSplit {
    pub ground: PointCloud,
    pub nonground: PointCloud,
    /// Indices of `nonground` points in the input cloud.
    pub nonground_indices: Vec<usize>,
    /// Fitted ground plane `(n, d)` with `nᵀp + d = 0`, if any.
    pub plane: Option<(Vec3, f64)>,
}

/// Splits off the dominant near-horizontal plane found by random sampling
/// consensus.
pub fn remove_ground(cloud: &PointCloud, params: &GroundParams, seed: u64) -> GroundSplit {
    let n = cloud.len();
    let cos_gate = params.max_normal_angle_deg.to_radians().cos();
    let pts = &cloud.points;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let count_inliers = |normal: &Vec3, d: f64| -> usize {
        pts.par_iter()
            .filter(|p| (normal.dot(p) + d).abs() <= params.distance_threshold)
            .count()
    };

    let mut best: Option<(usize, Vec3, f64)> = None;
    if n >= 3 {
        for _ in 0..params.iterations {
            let idx = sample(&mut rng, n, 3);
            let (a, b, c) = (pts[idx.index(0)], pts[idx.index(1)], pts[idx.index(2)]);
            let cross = (b - a).cross(&(c - a));
            let norm = cross.norm();
            if norm < 1e-9 {
                continue;
            }
            let normal = cross / norm;
            if normal.z.abs() < cos_gate {
                continue;
            }
            let d = -normal.dot(&a);
            let inliers = count_inliers(&normal, d);
            if best.as_ref().map_or(true, |(c, _, _)| inliers > *c) {
                best = Some((inliers, normal, d));
            }
        }
    }

    let Some((_, mut normal, mut d)) = best else {
        return GroundSplit {
            ground: PointCloud::default(),
            nonground: cloud.clone(),
            nonground_indices: (0..n).collect(),
            plane: None,
        };
    };

    // Least-squares refit on the consensus set.
    let inliers: Vec<Vec3> = pts
        .iter()
        .filter(|p| (normal.dot(p) + d).abs() <= params.distance_threshold)
        .copied()
        .collect();
    let (cnt, mean, cov) = mean_and_covariance(inliers.iter());
    if cnt >= 3 {
        let (_, vecs) = sorted_eigen(&cov);
        let refit = vecs.column(2).into_owned();
        if refit.z.abs() >= cos_gate {
            normal = refit;
            d = -normal.dot(&mean);
        }
    }
    if normal.z < 0.0 {
        normal = -normal;
        d = -d;
    }

    let (ground_idx, nonground_idx): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| (normal.dot(&pts[i]) + d).abs() <= params.distance_threshold);
    GroundSplit {
        ground: cloud.subset(&ground_idx),
        nonground: cloud.subset(&nonground_idx),
        nonground_indices: nonground_idx,
        plane: Some((normal, d)),
    }
}

/// Writes a minimal ASCII PLY with `x y z` vertex properties.
pub fn write_ply_ascii(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let io = |e| Error::io(path, e);
    writeln!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header",
        cloud.len()
    )
    .map_err(io)?;
    for p in &cloud.points {
        writeln!(out, "{} {} {}", p.x, p.y, p.z).map_err(io)?;
    }
    fs::write(path, out).map_err(io)
}
