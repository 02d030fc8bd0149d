//! Kinematic encoding, synthetic camera/LiDAR tokens and the spatial biases
//! that steer position-guided attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mat::Mat;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::rng::{stream_rng, Stream};
use crate::sysgeo::SceneConfig;

pub const IMAGE_GRID: usize = 7;
pub const N_IMAGE_TOKENS: usize = IMAGE_GRID * IMAGE_GRID;

/// Per-slot [u, v, a], 9 values per row.
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicSequence {
    pub rows: Vec<[f64; 9]>,
}

pub fn encode_kinematics(noisy_positions: &[Vec3], dt: f64) -> Result<KinematicSequence> {
    if noisy_positions.len() < 2 {
        return Err(Error::InvalidConfig("kinematic window needs at least two slots".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("sampling interval {dt} must be positive")));
    }
    let mut rows = Vec::with_capacity(noisy_positions.len());
    let mut prev_v = Vec3::ZERO;
    for (t, u) in noisy_positions.iter().enumerate() {
        let (v, a) = if t == 0 {
            (Vec3::ZERO, Vec3::ZERO)
        } else {
            let v = (*u - noisy_positions[t - 1]) * (1.0 / dt);
            (v, (v - prev_v) * (1.0 / dt))
        };
        prev_v = v;
        rows.push([u.x(), u.y(), u.z(), v.x(), v.y(), v.z(), a.x(), a.y(), a.z()]);
    }
    Ok(KinematicSequence { rows })
}

/// Pinhole camera co-located with the array, optical axis +x, image +x to
/// the viewer's right (world -y) and image +y downward (world -z).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraIntrinsics {
    pub focal_px: f64,
    pub width_px: f64,
    pub height_px: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        // 120 degree horizontal field of view on a 224 x 224 frame.
        CameraIntrinsics { focal_px: 112.0 / 60f64.to_radians().tan(), width_px: 224.0, height_px: 224.0 }
    }
}

impl CameraIntrinsics {
    pub fn pitch(&self) -> (f64, f64) {
        (self.width_px / IMAGE_GRID as f64, self.height_px / IMAGE_GRID as f64)
    }

    /// Pixel of `p` seen from a camera at `origin`, or None behind the camera.
    pub fn project(&self, origin: Vec3, p: Vec3) -> Option<(f64, f64)> {
        let r = p - origin;
        if r.x() <= 1e-9 {
            return None;
        }
        Some((self.width_px / 2.0 - self.focal_px * r.y() / r.x(), self.height_px / 2.0 - self.focal_px * r.z() / r.x()))
    }

    /// Viewing direction through pixel (px, py).
    pub fn ray(&self, px: f64, py: f64) -> Vec3 {
        Vec3::new(1.0, -(px - self.width_px / 2.0) / self.focal_px, -(py - self.height_px / 2.0) / self.focal_px)
    }

    /// Center of token `k` (row-major over the 7 x 7 grid).
    pub fn token_center(&self, k: usize) -> (f64, f64) {
        let (pw, ph) = self.pitch();
        ((k % IMAGE_GRID) as f64 * pw + pw / 2.0, (k / IMAGE_GRID) as f64 * ph + ph / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub d_in: usize,
    pub n_lidar_tokens: usize,
    pub camera: CameraIntrinsics,
    /// Image bias width in pixels; defaults to one token pitch.
    pub sigma_b_px: f64,
    /// LiDAR bias distance scale in meters.
    pub rho_m: f64,
    /// Width of the UAV detection blob in the image features, pixels.
    pub detection_sigma_px: f64,
    /// Range noise of the LiDAR return on the UAV, meters.
    pub lidar_noise_m: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            d_in: 32,
            n_lidar_tokens: 64,
            camera: CameraIntrinsics::default(),
            sigma_b_px: 32.0,
            rho_m: 5.0,
            detection_sigma_px: 16.0,
            lidar_noise_m: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialBias {
    pub values: Vec<f64>,
    /// Set when the bias could not be formed and was replaced by zeros.
    pub flagged: bool,
}

pub fn image_spatial_bias(u: Vec3, origin: Vec3, camera: &CameraIntrinsics, sigma_b: f64) -> SpatialBias {
    let Some((px, py)) = camera.project(origin, u) else {
        return SpatialBias { values: vec![0.0; N_IMAGE_TOKENS], flagged: true };
    };
    let values = (0..N_IMAGE_TOKENS)
        .map(|k| {
            let (cx, cy) = camera.token_center(k);
            -((px - cx).powi(2) + (py - cy).powi(2)) / (2.0 * sigma_b * sigma_b)
        })
        .collect();
    SpatialBias { values, flagged: false }
}

pub fn lidar_spatial_bias(u: Vec3, keypoints: &[Vec3], rho: f64) -> Result<SpatialBias> {
    if keypoints.is_empty() {
        return Err(Error::MissingInput("no LiDAR keypoints".into()));
    }
    Ok(SpatialBias { values: keypoints.iter().map(|k| -u.dist(*k) / rho).collect(), flagged: false })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorTokens {
    pub image: Mat,
    pub lidar: Mat,
    pub keypoints: Vec<Vec3>,
}

enum Hit {
    Blocker(f64),
    Reflector(f64),
}

fn first_hit(scene: &SceneConfig, origin: Vec3, dir: Vec3, far: f64) -> Option<Hit> {
    let end = origin + dir.normalized() * far;
    let mut best: Option<Hit> = None;
    let mut best_t = f64::INFINITY;
    for b in &scene.blockers {
        if let Some(t) = b.segment_hit(origin, end) {
            if t < best_t {
                best_t = t;
                best = Some(Hit::Blocker(t * far));
            }
        }
    }
    for f in &scene.reflectors {
        let n = f.normal();
        let denom = (end - origin).dot(n);
        if denom.abs() < 1e-12 {
            continue;
        }
        let t = (f.corners[0] - origin).dot(n) / denom;
        if t > 0.0 && t < best_t && f.contains_planar(origin + (end - origin) * t) {
            best_t = t;
            best = Some(Hit::Reflector(t * far));
        }
    }
    best
}

const SUBRAYS: usize = 4;
const FAR_M: f64 = 200.0;

fn put(row: &mut [f64], values: &[f64]) {
    let n = row.len().min(values.len());
    row[..n].copy_from_slice(&values[..n]);
}

/// Camera tokens: per cell, blocker coverage, reflector coverage, mean
/// inverse depth, UAV detection response, then grid position encodings.
fn image_features(scene: &SceneConfig, u: Vec3, origin: Vec3, cfg: &SensorConfig) -> Mat {
    let cam = &cfg.camera;
    let (pw, ph) = cam.pitch();
    let uav_px = cam.project(origin, u);
    let mut out = Mat::zeros(N_IMAGE_TOKENS, cfg.d_in);
    for k in 0..N_IMAGE_TOKENS {
        let (r, c) = (k / IMAGE_GRID, k % IMAGE_GRID);
        let (mut blk, mut refl, mut inv_depth) = (0.0, 0.0, 0.0);
        for sy in 0..SUBRAYS {
            for sx in 0..SUBRAYS {
                let px = c as f64 * pw + (sx as f64 + 0.5) * pw / SUBRAYS as f64;
                let py = r as f64 * ph + (sy as f64 + 0.5) * ph / SUBRAYS as f64;
                match first_hit(scene, origin, cam.ray(px, py), FAR_M) {
                    Some(Hit::Blocker(d)) => {
                        blk += 1.0;
                        inv_depth += 10.0 / d.max(1.0);
                    }
                    Some(Hit::Reflector(d)) => {
                        refl += 1.0;
                        inv_depth += 10.0 / d.max(1.0);
                    }
                    None => {}
                }
            }
        }
        let n = (SUBRAYS * SUBRAYS) as f64;
        let (cx, cy) = cam.token_center(k);
        let det = uav_px.map_or(0.0, |(px, py)| {
            (-((px - cx).powi(2) + (py - cy).powi(2)) / (2.0 * cfg.detection_sigma_px.powi(2))).exp()
        });
        let mut f = vec![blk / n, refl / n, inv_depth / n, det];
        for freq in 1..=3 {
            let w = std::f64::consts::PI * freq as f64 / IMAGE_GRID as f64;
            let (rr, cc) = (r as f64 + 0.5, c as f64 + 0.5);
            f.extend_from_slice(&[(w * rr).sin(), (w * rr).cos(), (w * cc).sin(), (w * cc).cos()]);
        }
        put(out.row_mut(k), &f);
    }
    out
}

/// Width of the scene-frame part of a LiDAR feature row.
pub const LIDAR_SCENE_WIDTH: usize = 20;

fn lidar_feature(p: Vec3, normal: Vec3, intensity: f64, origin: Vec3) -> Vec<f64> {
    let rel = (p - origin) * (1.0 / 20.0);
    let mut f = vec![normal.x(), normal.y(), normal.z(), (p - origin).norm() / 50.0, rel.x(), rel.y(), rel.z(), intensity];
    for freq in [1.0, 2.0] {
        for v in rel.0 {
            f.push((freq * v).sin());
            f.push((freq * v).cos());
        }
    }
    f
}

fn box_surface_point<R: Rng>(b: &crate::geom::Aabb, rng: &mut R) -> (Vec3, Vec3) {
    let axis = rng.random_range(0..3usize);
    let side = rng.random::<bool>();
    let mut p = [0.0; 3];
    for a in 0..3 {
        p[a] = rng.random_range(b.min.0[a]..=b.max.0[a]);
    }
    p[axis] = if side { b.max.0[axis] } else { b.min.0[axis] };
    let mut n = [0.0; 3];
    n[axis] = if side { 1.0 } else { -1.0 };
    (Vec3(p), Vec3(n))
}

/// Writes each keypoint's offset from the attention query `u` into the three
/// columns after the scene-frame features, as d / (1 + |d|) with
/// d = (keypoint - u) / rho. Columns beyond `d_in` are dropped.
pub fn add_query_offsets(lidar: &mut Mat, keypoints: &[Vec3], u: Vec3, rho: f64) -> Result<()> {
    if keypoints.len() != lidar.rows {
        return Err(Error::InvalidConfig(format!("{} keypoints for {} LiDAR tokens", keypoints.len(), lidar.rows)));
    }
    if lidar.cols <= LIDAR_SCENE_WIDTH {
        return Ok(());
    }
    for (k, p) in keypoints.iter().enumerate() {
        let d = (*p - u) * (1.0 / rho);
        let f = d * (1.0 / (1.0 + d.norm()));
        put(&mut lidar.row_mut(k)[LIDAR_SCENE_WIDTH..], &f.0);
    }
    Ok(())
}

/// Synthetic sensor features for the UAV at true position `u`.
///
/// LiDAR keypoints are drawn from the scene's facets and boxes (the last
/// keypoint is the return off the UAV itself, with range noise). All draws
/// come from `seed`, so the same arguments give identical tokens.
pub fn synth_sensor_tokens(scene: &SceneConfig, u: Vec3, origin: Vec3, cfg: &SensorConfig, seed: u64) -> Result<SensorTokens> {
    scene.validate()?;
    if cfg.n_lidar_tokens == 0 || cfg.d_in == 0 {
        return Err(Error::InvalidConfig("sensor token counts must be positive".into()));
    }
    let image = image_features(scene, u, origin, cfg);
    let mut rng = stream_rng(seed, Stream::Sensor, scene.id as u64);
    let n_surfaces = scene.reflectors.len() + scene.blockers.len();
    let mut keypoints = Vec::with_capacity(cfg.n_lidar_tokens);
    let mut lidar = Mat::zeros(cfg.n_lidar_tokens, cfg.d_in);
    for k in 0..cfg.n_lidar_tokens - 1 {
        let (p, n, intensity) = if n_surfaces == 0 {
            // Nothing to hit: a return at maximum range straight ahead.
            (origin + Vec3::new(FAR_M, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0), 0.0)
        } else {
            let s = k % n_surfaces;
            if s < scene.reflectors.len() {
                let f = &scene.reflectors[s];
                (f.sample_point(&mut rng), f.normal(), 0.5 * f.gamma.norm())
            } else {
                let (p, n) = box_surface_point(&scene.blockers[s - scene.reflectors.len()], &mut rng);
                (p, n, 0.2)
            }
        };
        keypoints.push(p);
        put(lidar.row_mut(k), &lidar_feature(p, n, intensity, origin));
    }
    let mut jitter = stream_rng(seed, Stream::Modality, scene.id as u64);
    let noise = Vec3::new(
        jitter.random_range(-1.0..1.0),
        jitter.random_range(-1.0..1.0),
        jitter.random_range(-1.0..1.0),
    ) * cfg.lidar_noise_m;
    let p = u + noise;
    keypoints.push(p);
    put(lidar.row_mut(cfg.n_lidar_tokens - 1), &lidar_feature(p, (origin - p).normalized(), 1.0, origin));
    Ok(SensorTokens { image, lidar, keypoints })
}
