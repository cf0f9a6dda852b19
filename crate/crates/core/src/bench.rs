//! Synthetic scenes with known ground truth, registration metrics and a
//! batch evaluator.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::association::Correspondence;
use crate::cloud_io::{load_kitti_bin, load_ply_ascii, write_kitti_bin, PointCloud};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::gem::Gem;
use crate::geometry::{rotation_angle, rotation_from_euler, Mat3, Vec3};
use crate::pipeline::register_detailed;

/// Success thresholds.
pub const MAX_ROTATION_ERROR_DEG: f64 = 5.0;
pub const MAX_TRANSLATION_ERROR_M: f64 = 2.0;
/// A correspondence is an inlier when its centers agree within this (m).
pub const INLIER_DISTANCE_M: f64 = 0.5;
/// Recall needs strictly more inliers than this.
pub const RECALL_MIN_INLIERS: usize = 3;

/// Translation buckets `[lo, hi)` in meters.
pub const BUCKETS: [(&str, f64, f64); 3] = [("easy", 0.0, 10.0), ("medium", 10.0, 20.0), ("hard", 20.0, 30.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// Vertical rectangular plates.
    pub planes: usize,
    /// Volume-filled ellipsoidal blobs.
    pub clusters: usize,
    /// Thin rods.
    pub lines: usize,
    /// Side of the square area objects are placed in (m).
    pub extent: f64,
    /// Add a horizontal ground plate under the scene.
    pub ground: bool,
    /// RMS 3D displacement of the point noise (m).
    pub noise: f64,
    /// Fraction of each cloud's points that also appear in the other.
    pub overlap: f64,
    /// Yaw is drawn uniformly from `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    /// Translation length is drawn uniformly from `[min, max)` in meters.
    pub min_translation: f64,
    pub max_translation: f64,
    /// Surface sampling density (points per m²).
    pub density: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            planes: 6,
            clusters: 12,
            lines: 8,
            extent: 40.0,
            ground: true,
            noise: 0.05,
            overlap: 0.8,
            max_rotation_deg: 180.0,
            min_translation: 0.0,
            max_translation: 10.0,
            density: 12.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlap > 0.0 && self.overlap <= 1.0) {
            return Err(Error::InvalidArgument(format!("overlap must lie in (0, 1], got {}", self.overlap)));
        }
        if !(self.extent > 0.0 && self.density > 0.0 && self.noise >= 0.0) {
            return Err(Error::InvalidArgument("extent and density must be positive, noise non-negative".into()));
        }
        if !(self.min_translation >= 0.0 && self.max_translation >= self.min_translation) {
            return Err(Error::InvalidArgument("translation range must satisfy 0 <= min <= max".into()));
        }
        Ok(())
    }

    /// Spec for one of the difficulty buckets, with overlap shrinking as
    /// the translation grows.
    pub fn for_bucket(bucket: usize, seed: u64) -> Self {
        let (_, lo, hi) = BUCKETS[bucket];
        Self {
            overlap: [0.8, 0.65, 0.5][bucket],
            min_translation: lo,
            max_translation: hi,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub source: PointCloud,
    pub target: PointCloud,
    /// Ground truth mapping source coordinates into the target frame.
    pub rotation: Mat3,
    pub translation: Vec3,
    /// Number of world points present in both clouds.
    pub shared: usize,
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn sample_count(rng: &mut ChaCha8Rng, expected: f64) -> usize {
    let base = expected.floor();
    base as usize + usize::from(rng.gen::<f64>() < expected - base)
}

/// Noise-free world points.
fn world_points(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let half = spec.extent / 2.0;
    let mut pts = Vec::new();
    if spec.ground {
        for _ in 0..sample_count(rng, spec.extent * spec.extent * spec.density * 0.25) {
            pts.push(Vec3::new(rng.gen_range(-half..half), rng.gen_range(-half..half), 0.0));
        }
    }
    for _ in 0..spec.planes {
        let len = rng.gen_range(4.0..12.0);
        let height = rng.gen_range(2.0..5.0);
        let yaw: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let dir = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
        let c = Vec3::new(rng.gen_range(-half..half), rng.gen_range(-half..half), 0.0);
        for _ in 0..sample_count(rng, len * height * spec.density) {
            let s = rng.gen_range(-0.5..0.5) * len;
            let z = rng.gen_range(0.0..height);
            pts.push(c + dir * s + Vec3::new(0.0, 0.0, z));
        }
    }
    for _ in 0..spec.clusters {
        let axes = Vec3::new(rng.gen_range(0.6..2.0), rng.gen_range(0.6..2.0), rng.gen_range(0.6..1.5));
        let rot = rotation_from_euler(0.0, 0.0, rng.gen_range(0.0..std::f64::consts::TAU));
        let c = Vec3::new(rng.gen_range(-half..half), rng.gen_range(-half..half), axes.z + rng.gen_range(0.5..2.0));
        let volume = 4.0 / 3.0 * std::f64::consts::PI * axes.x * axes.y * axes.z;
        for _ in 0..sample_count(rng, volume * spec.density * 4.0) {
            let u = loop {
                let u = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                if u.norm_squared() <= 1.0 {
                    break u;
                }
            };
            pts.push(c + rot * u.component_mul(&axes));
        }
    }
    for _ in 0..spec.lines {
        let len = rng.gen_range(3.0..8.0);
        let tilt: f64 = rng.gen_range(0.0..0.3);
        let az: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = Vec3::new(tilt.sin() * az.cos(), tilt.sin() * az.sin(), tilt.cos());
        let base = Vec3::new(rng.gen_range(-half..half), rng.gen_range(-half..half), 0.5);
        for _ in 0..sample_count(rng, len * spec.density * 3.0) {
            let jitter = Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), 0.0);
            pts.push(base + dir * rng.gen_range(0.0..len) + jitter);
        }
    }
    pts
}

fn add_noise(points: &[Vec3], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let per_axis = sigma / 3f64.sqrt();
    points
        .iter()
        .map(|p| {
            if per_axis == 0.0 {
                *p
            } else {
                p + Vec3::from_fn(|_, _| StandardNormal.sample(rng)) * per_axis
            }
        })
        .collect()
}

/// Builds a source/target pair from one world. Both clouds are cut by
/// parallel half-spaces so that a fraction `overlap` of each is shared;
/// the target is moved by the sampled pose and both get independent noise.
pub fn synth_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = world_points(spec, &mut rng);
    if world.is_empty() {
        return Err(Error::InvalidArgument("scene spec produces no points".into()));
    }

    // Cut along a random horizontal direction: drop the lowest `a` fraction
    // from the source and the highest `a` from the target, which leaves
    // (1 − 2a)/(1 − a) = overlap of each cloud shared.
    let cut: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let u = Vec3::new(cut.cos(), cut.sin(), 0.0);
    let n = world.len();
    let a = (1.0 - spec.overlap) / (2.0 - spec.overlap);
    let drop = (a * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| u.dot(&world[i]).total_cmp(&u.dot(&world[j])).then(i.cmp(&j)));
    let mut in_src = vec![true; n];
    let mut in_tgt = vec![true; n];
    for &i in &order[..drop] {
        in_src[i] = false;
    }
    for &i in &order[n - drop..] {
        in_tgt[i] = false;
    }
    let shared = (0..n).filter(|&i| in_src[i] && in_tgt[i]).count();
    if shared == 0 {
        return Err(Error::InvalidArgument(format!("overlap {} leaves no shared points", spec.overlap)));
    }

    let yaw = uniform_in(&mut rng, -spec.max_rotation_deg, spec.max_rotation_deg).to_radians();
    let rotation = rotation_from_euler(0.0, 0.0, yaw);
    let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let len = uniform_in(&mut rng, spec.min_translation, spec.max_translation);
    let translation = Vec3::new(heading.cos() * len, heading.sin() * len, 0.0);

    let src_world: Vec<Vec3> = (0..n).filter(|&i| in_src[i]).map(|i| world[i]).collect();
    let tgt_world: Vec<Vec3> = (0..n).filter(|&i| in_tgt[i]).map(|i| world[i]).collect();
    let source = PointCloud::new(add_noise(&src_world, spec.noise, &mut rng));
    let target = PointCloud::new(add_noise(&tgt_world, spec.noise, &mut rng)).transformed(&rotation, &translation);
    Ok(Scene {
        source,
        target,
        rotation,
        translation,
        shared,
    })
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_error(r_est: &Mat3, r_gt: &Mat3) -> f64 {
    rotation_angle(&(r_est.transpose() * r_gt)).to_degrees()
}

/// `‖R_estᵀ (t_gt − t_est)‖` in meters.
pub fn translation_error(r_est: &Mat3, t_est: &Vec3, t_gt: &Vec3) -> f64 {
    (r_est.transpose() * (t_gt - t_est)).norm()
}

pub fn is_success(rotation_error_deg: f64, translation_error_m: f64) -> bool {
    rotation_error_deg < MAX_ROTATION_ERROR_DEG && translation_error_m < MAX_TRANSLATION_ERROR_M
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingMetrics {
    /// Zero when there are no correspondences.
    pub inlier_ratio: f64,
    pub inliers: usize,
    pub total: usize,
    pub recalled: bool,
}

pub fn matching_metrics(corrs: &[Correspondence], xs: &[Gem], ys: &[Gem], r_gt: &Mat3, t_gt: &Vec3) -> MatchingMetrics {
    let inliers = corrs
        .iter()
        .filter(|c| (r_gt * xs[c.x].mean + t_gt - ys[c.y].mean).norm() < INLIER_DISTANCE_M)
        .count();
    MatchingMetrics {
        inlier_ratio: if corrs.is_empty() { 0.0 } else { inliers as f64 / corrs.len() as f64 },
        inliers,
        total: corrs.len(),
        recalled: inliers > RECALL_MIN_INLIERS,
    }
}

pub fn bucket_of(translation: f64) -> Option<usize> {
    BUCKETS.iter().position(|(_, lo, hi)| translation >= *lo && translation < *hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair: usize,
    pub bucket: Option<usize>,
    pub rotation_error_deg: f64,
    pub translation_error_m: f64,
    pub success: bool,
    pub matching: MatchingMetrics,
    pub runtime_ms: f64,
    /// Set when the pipeline returned an error instead of a pose.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub name: String,
    pub count: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub records: Vec<EvalRecord>,
    pub buckets: Vec<BucketSummary>,
}

impl BenchReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Self {
        let buckets = BUCKETS
            .iter()
            .enumerate()
            .map(|(b, (name, _, _))| {
                let mine: Vec<&EvalRecord> = records.iter().filter(|r| r.bucket == Some(b)).collect();
                let successes = mine.iter().filter(|r| r.success).count();
                BucketSummary {
                    name: name.to_string(),
                    count: mine.len(),
                    successes,
                    success_rate: if mine.is_empty() { 0.0 } else { successes as f64 / mine.len() as f64 },
                }
            })
            .collect();
        Self { records, buckets }
    }

    /// One `key=value` line per pair followed by a summary block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let bucket = r.bucket.map_or("none", |b| BUCKETS[b].0);
            let _ = writeln!(
                out,
                "pair={} bucket={} rot_err_deg={:.6} trans_err_m={:.6} success={} inlier_ratio={:.4} inliers={} correspondences={} recalled={} runtime_ms={:.1}{}",
                r.pair,
                bucket,
                r.rotation_error_deg,
                r.translation_error_m,
                r.success,
                r.matching.inlier_ratio,
                r.matching.inliers,
                r.matching.total,
                r.matching.recalled,
                r.runtime_ms,
                r.error.as_ref().map_or(String::new(), |e| format!(" error={e:?}")),
            );
        }
        let _ = writeln!(out, "[summary]");
        let total = self.records.len();
        let ok = self.records.iter().filter(|r| r.success).count();
        let _ = writeln!(out, "pairs={total} successes={ok}");
        for b in &self.buckets {
            let _ = writeln!(out, "bucket={} count={} successes={} success_rate={:.4}", b.name, b.count, b.successes, b.success_rate);
        }
        out
    }
}

/// One registration pair with known ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl From<Scene> for BenchPair {
    fn from(s: Scene) -> Self {
        Self {
            source: s.source,
            target: s.target,
            rotation: s.rotation,
            translation: s.translation,
        }
    }
}

pub fn evaluate_pair(index: usize, pair: &BenchPair, cfg: &Config) -> EvalRecord {
    let start = Instant::now();
    let outcome = register_detailed(&pair.source, &pair.target, cfg);
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    let bucket = bucket_of(pair.translation.norm());
    match outcome {
        Ok(d) => {
            let (r, t) = (d.report.rotation_matrix(), d.report.translation_vector());
            let re = rotation_error(&r, &pair.rotation);
            let te = translation_error(&r, &t, &pair.translation);
            EvalRecord {
                pair: index,
                bucket,
                rotation_error_deg: re,
                translation_error_m: te,
                success: d.report.success && is_success(re, te),
                matching: matching_metrics(&d.correspondences, &d.source.gems, &d.target.gems, &pair.rotation, &pair.translation),
                runtime_ms,
                error: None,
            }
        }
        Err(e) => EvalRecord {
            pair: index,
            bucket,
            rotation_error_deg: rotation_error(&Mat3::identity(), &pair.rotation),
            translation_error_m: translation_error(&Mat3::identity(), &Vec3::zeros(), &pair.translation),
            success: false,
            matching: MatchingMetrics {
                inlier_ratio: 0.0,
                inliers: 0,
                total: 0,
                recalled: false,
            },
            runtime_ms,
            error: Some(e.to_string()),
        },
    }
}

/// Synthesizes and registers every spec in order.
pub fn run_benchmark(specs: &[SceneSpec], cfg: &Config) -> Result<BenchReport> {
    let mut records = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let pair: BenchPair = synth_scene(spec)?.into();
        records.push(evaluate_pair(i, &pair, cfg));
    }
    Ok(BenchReport::from_records(records))
}

/// Registers every pair listed in a manifest.
pub fn run_manifest(entries: &[ManifestEntry], cfg: &Config) -> Result<BenchReport> {
    let mut records = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let pair = BenchPair {
            source: load_cloud(&e.source)?,
            target: load_cloud(&e.target)?,
            rotation: e.rotation,
            translation: e.translation,
        };
        records.push(evaluate_pair(i, &pair, cfg));
    }
    Ok(BenchReport::from_records(records))
}

/// Loads `.bin` (KITTI) or `.ply` (ASCII) clouds by extension.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ply") => load_ply_ascii(path),
        Some("bin") => Ok(load_kitti_bin(path)?.cloud),
        _ => Err(Error::InvalidArgument(format!("unsupported cloud format: {}", path.display()))),
    }
}

/// One manifest line: `source target r00 r01 r02 r10 … r22 tx ty tz`, with
/// paths relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    pub rotation: Mat3,
    pub translation: Vec3,
}

pub fn parse_manifest(text: &str, base: &Path, origin: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 14 {
            return Err(Error::malformed(origin, format!("line {}: expected 14 fields, found {}", lineno + 1, fields.len())));
        }
        let nums: Vec<f64> = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::malformed(origin, format!("line {}: {e}", lineno + 1)))?;
        out.push(ManifestEntry {
            source: base.join(fields[0]),
            target: base.join(fields[1]),
            rotation: Mat3::from_row_slice(&nums[..9]),
            translation: Vec3::new(nums[9], nums[10], nums[11]),
        });
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")), path)
}

pub fn manifest_line(source: &str, target: &str, r: &Mat3, t: &Vec3) -> String {
    let mut line = format!("{source} {target}");
    for i in 0..3 {
        for j in 0..3 {
            let _ = write!(line, " {:?}", r[(i, j)]);
        }
    }
    for i in 0..3 {
        let _ = write!(line, " {:?}", t[i]);
    }
    line
}

/// Spec file for `synth`: a scene spec plus how many consecutive seeds to
/// generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default)]
    pub scene: SceneSpec,
}

fn one() -> usize {
    1
}

/// Writes `count` scenes as KITTI `.bin` pairs plus a `pairs.txt` manifest
/// into `out_dir`; returns the manifest path.
pub fn write_synth(file: &SynthFile, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = String::from("# source target r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n");
    for k in 0..file.count {
        let spec = SceneSpec {
            seed: file.scene.seed + k as u64,
            ..file.scene.clone()
        };
        let scene = synth_scene(&spec)?;
        let (s, t) = (format!("pair_{k:04}_source.bin"), format!("pair_{k:04}_target.bin"));
        write_kitti_bin(out_dir.join(&s), &scene.source)?;
        write_kitti_bin(out_dir.join(&t), &scene.target)?;
        manifest.push_str(&manifest_line(&s, &t, &scene.rotation, &scene.translation));
        manifest.push('\n');
    }
    let path = out_dir.join("pairs.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn error_examples() {
        let i = Mat3::identity();
        assert_eq!(rotation_error(&i, &i), 0.0);
        let rz = rotation_from_euler(0.0, 0.0, 10f64.to_radians());
        assert_relative_eq!(rotation_error(&rz, &i), 10.0, epsilon = 1e-9);
        assert_relative_eq!(translation_error(&i, &Vec3::zeros(), &Vec3::new(0.0, 0.0, 1.5)), 1.5);
        assert!(is_success(0.0, 0.0));
        assert!(!is_success(10.0, 0.0));
        assert!(is_success(4.9, 1.99));
        assert!(!is_success(5.0, 0.0));
        assert!(!is_success(0.0, 2.0));
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SceneSpec {
            seed: 4,
            ..SceneSpec::default()
        };
        assert_eq!(synth_scene(&spec).unwrap(), synth_scene(&spec).unwrap());
    }

    #[test]
    fn full_overlap_without_noise_is_exact_transform() {
        let spec = SceneSpec {
            overlap: 1.0,
            noise: 0.0,
            seed: 9,
            ..SceneSpec::default()
        };
        let s = synth_scene(&spec).unwrap();
        assert_eq!(s.source.len(), s.target.len());
        for (p, q) in s.source.points.iter().zip(&s.target.points) {
            assert!((s.rotation * p + s.translation - q).norm() < 1e-9);
        }
    }

    #[test]
    fn half_overlap_counts() {
        let spec = SceneSpec {
            overlap: 0.5,
            seed: 2,
            ..SceneSpec::default()
        };
        let s = synth_scene(&spec).unwrap();
        let ratio = s.shared as f64 / s.source.len() as f64;
        assert!((ratio - 0.5).abs() < 0.05, "{ratio}");
        assert!(synth_scene(&SceneSpec { overlap: 0.0, ..spec.clone() }).is_err());
        assert!(synth_scene(&SceneSpec { overlap: 1.5, ..spec }).is_err());
    }

    #[test]
    fn buckets() {
        assert_eq!(bucket_of(0.0), Some(0));
        assert_eq!(bucket_of(10.0), Some(1));
        assert_eq!(bucket_of(29.9), Some(2));
        assert_eq!(bucket_of(30.0), None);
        assert!(run_benchmark(&[], &Config::default()).unwrap().records.is_empty());
    }

    #[test]
    fn manifest_round_trip() {
        let r = rotation_from_euler(0.1, 0.2, 0.3);
        let t = Vec3::new(1.0, -2.5, 0.125);
        let text = format!("# header\n{}\n", manifest_line("a.bin", "b.bin", &r, &t));
        let entries = parse_manifest(&text, Path::new("/data"), Path::new("/data/m.txt")).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].source, PathBuf::from("/data/a.bin"));
        assert_eq!(entries[0].rotation, r);
        assert_eq!(entries[0].translation, t);
        assert!(parse_manifest("a b 1 2", Path::new("."), Path::new("m")).is_err());
    }
}
