//! Spherical-wavefront multipath channel synthesis and noisy pilot reception.

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::rng::{stream_rng, Stream};
use crate::sysgeo::{ArrayGeometry, SceneConfig, SystemConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    LoS,
    SingleBounce,
}

/// One propagation path. Per-antenna lengths are derived from `source`, which
/// is the UAV itself for LoS and its mirror image across the facet for a
/// single bounce: `|source - p_m| = |u - s_m| + |s_m - p_m|` with `s_m` the
/// specular point toward element m.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathComponent {
    pub kind: PathKind,
    pub source: Vec3,
    pub gain: Complex64,
    pub bounce_point: Option<Vec3>,
}

impl PathComponent {
    pub fn length_to(&self, element: Vec3) -> f64 {
        self.source.dist(element)
    }

    pub fn per_antenna_lengths(&self, geom: &ArrayGeometry) -> Vec<f64> {
        geom.positions.iter().map(|p| self.length_to(*p)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSnapshot {
    pub h: Vec<Complex64>,
    pub paths: Vec<PathComponent>,
    pub slot_time: f64,
    pub los_blocked: bool,
}

impl ChannelSnapshot {
    pub fn norm_sq(&self) -> f64 {
        self.h.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn is_outage(&self) -> bool {
        self.paths.is_empty() || self.norm_sq() == 0.0
    }

    /// Copy with every path gain (and so h) multiplied by `c`.
    pub fn scaled(&self, c: Complex64) -> ChannelSnapshot {
        ChannelSnapshot {
            h: self.h.iter().map(|v| v * c).collect(),
            paths: self.paths.iter().map(|p| PathComponent { gain: p.gain * c, ..p.clone() }).collect(),
            ..self.clone()
        }
    }
}

pub fn trace_paths(scene: &SceneConfig, uav: Vec3, cfg: &SystemConfig) -> Result<Vec<PathComponent>> {
    let o = cfg.array_center;
    if uav.dist(o) < 1e-9 {
        return Err(Error::InvalidPosition("UAV coincides with the array center".into()));
    }
    if !scene.bounds.contains(uav) {
        return Err(Error::InvalidPosition(format!("UAV {:?} outside scene bounds", uav.0)));
    }
    let lambda = cfg.wavelength();
    let fspl = |d: f64| lambda / (4.0 * std::f64::consts::PI * d);
    let mut paths = Vec::new();
    if !scene.blocked(uav, o) {
        paths.push(PathComponent {
            kind: PathKind::LoS,
            source: uav,
            gain: Complex64::new(fspl(uav.dist(o)), 0.0),
            bounce_point: None,
        });
    }
    for facet in &scene.reflectors {
        let Some(s) = facet.specular_point(uav, o) else { continue };
        if scene.blocked(uav, s) || scene.blocked(s, o) {
            continue;
        }
        let total = uav.dist(s) + s.dist(o);
        paths.push(PathComponent {
            kind: PathKind::SingleBounce,
            source: facet.mirror(uav),
            gain: facet.gamma * fspl(total),
            bounce_point: Some(s),
        });
    }
    Ok(paths)
}

/// h_m = sum_l g_l exp(-j 2 pi / lambda d_{l,m}). An empty path list yields
/// an outage snapshot.
pub fn synthesize_channel(paths: &[PathComponent], geom: &ArrayGeometry, cfg: &SystemConfig, slot_time: f64) -> ChannelSnapshot {
    let k = 2.0 * std::f64::consts::PI / cfg.wavelength();
    let h = geom
        .positions
        .iter()
        .map(|p| {
            paths
                .iter()
                .map(|path| path.gain * Complex64::from_polar(1.0, -k * path.length_to(*p)))
                .sum()
        })
        .collect();
    ChannelSnapshot {
        h,
        paths: paths.to_vec(),
        slot_time,
        los_blocked: !paths.iter().any(|p| p.kind == PathKind::LoS),
    }
}

/// w^H x.
pub fn hermitian_inner(w: &[Complex64], x: &[Complex64]) -> Complex64 {
    w.iter().zip(x).map(|(a, b)| a.conj() * b).sum()
}

/// Draw a circularly-symmetric complex Gaussian with total variance `var`.
pub fn complex_gaussian<R: rand::Rng>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// sqrt(P_r) w^H h + w^H n with n ~ CN(0, sigma^2 I).
pub fn received_pilot(w: &[Complex64], snap: &ChannelSnapshot, cfg: &SystemConfig, seed: u64) -> Complex64 {
    let signal = hermitian_inner(w, &snap.h) * cfg.tx_power.sqrt();
    if cfg.noise_variance == 0.0 {
        return signal;
    }
    let mut rng = stream_rng(seed, Stream::Pilot, 0);
    let noise: Vec<Complex64> = (0..w.len()).map(|_| complex_gaussian(&mut rng, cfg.noise_variance)).collect();
    signal + hermitian_inner(w, &noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Aabb;
    use crate::sysgeo::{antenna_positions, Facet};

    fn small_cfg(my: usize, mz: usize) -> SystemConfig {
        SystemConfig { antenna_cols: my, antenna_rows: mz, array_center: Vec3::ZERO, ..SystemConfig::default() }
    }

    fn open_scene() -> SceneConfig {
        SceneConfig::empty(0, Aabb::new(Vec3::new(-50.0, -50.0, -50.0), Vec3::new(50.0, 50.0, 50.0)))
    }

    #[test]
    fn empty_scene_gives_single_los_path() {
        let cfg = small_cfg(4, 4);
        let geom = antenna_positions(&cfg).unwrap();
        let u = Vec3::new(10.0, 3.0, -2.0);
        let paths = trace_paths(&open_scene(), u, &cfg).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].kind, PathKind::LoS);
        for (d, p) in paths[0].per_antenna_lengths(&geom).iter().zip(&geom.positions) {
            assert_eq!(*d, u.dist(*p));
        }
    }

    #[test]
    fn uav_at_array_center_rejected() {
        let cfg = small_cfg(2, 2);
        assert!(matches!(trace_paths(&open_scene(), Vec3::ZERO, &cfg), Err(Error::InvalidPosition(_))));
    }

    #[test]
    fn blocked_los_leaves_mirror_bounce() {
        let cfg = small_cfg(4, 2);
        let geom = antenna_positions(&cfg).unwrap();
        let mut scene = open_scene();
        // Mirror plane x = -1, reflecting side faces +x.
        scene.reflectors.push(Facet::rectangle(0, -1.0, [-20.0, -20.0], [20.0, 20.0], Complex64::new(0.0, 0.8)).unwrap());
        scene.blockers.push(Aabb::new(Vec3::new(2.0, 1.4, -0.5), Vec3::new(3.0, 1.9, 0.5)));
        let u = Vec3::new(6.0, 4.0, 0.1);
        let paths = trace_paths(&scene, u, &cfg).unwrap();
        assert_eq!(paths.len(), 1);
        let b = &paths[0];
        assert_eq!(b.kind, PathKind::SingleBounce);
        let image = Vec3::new(-8.0, 4.0, 0.1);
        for p in &geom.positions {
            // Independent two-segment sum through that element's own specular point.
            let t = (-1.0 - image.x()) / (p.x() - image.x());
            let s = image + (*p - image) * t;
            let two_seg = u.dist(s) + s.dist(*p);
            assert!((b.length_to(*p) - image.dist(*p)).abs() < 1e-12);
            assert!((b.length_to(*p) - two_seg).abs() < 1e-12);
        }
        let snap = synthesize_channel(&paths, &geom, &cfg, 0.0);
        assert!(snap.los_blocked);
    }

    #[test]
    fn single_path_single_antenna() {
        let cfg = small_cfg(1, 1);
        let geom = antenna_positions(&cfg).unwrap();
        let g = Complex64::new(0.3, -0.4);
        let path = PathComponent { kind: PathKind::LoS, source: Vec3::new(7.0, 0.0, 0.0), gain: g, bounce_point: None };
        let snap = synthesize_channel(&[path], &geom, &cfg, 0.0);
        let expect = g * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * 7.0 / cfg.wavelength());
        assert!((snap.h[0] - expect).norm() < 1e-15);
        assert!((snap.h[0].norm() - g.norm()).abs() < 1e-15);
        assert!(!snap.los_blocked);
    }

    #[test]
    fn half_wavelength_offset_cancels() {
        let cfg = small_cfg(1, 1);
        let geom = antenna_positions(&cfg).unwrap();
        let lam = cfg.wavelength();
        let g = Complex64::new(1.0, 0.0);
        let a = PathComponent { kind: PathKind::LoS, source: Vec3::new(5.0, 0.0, 0.0), gain: g, bounce_point: None };
        let b = PathComponent { source: Vec3::new(5.0 + lam / 2.0, 0.0, 0.0), kind: PathKind::SingleBounce, ..a.clone() };
        let snap = synthesize_channel(&[a, b], &geom, &cfg, 0.0);
        assert!(snap.h[0].norm() < 1e-12);
    }

    #[test]
    fn four_element_phases_follow_distances() {
        let cfg = small_cfg(2, 2);
        let geom = antenna_positions(&cfg).unwrap();
        let u = Vec3::new(3.0, 1.0, 0.5);
        let paths = trace_paths(&open_scene(), u, &cfg).unwrap();
        let snap = synthesize_channel(&paths, &geom, &cfg, 0.0);
        let g = paths[0].gain.re;
        for (m, p) in geom.positions.iter().enumerate() {
            assert!((snap.h[m].norm() - g).abs() < 1e-15);
            let d = ((u.x() - p.x()).powi(2) + (u.y() - p.y()).powi(2) + (u.z() - p.z()).powi(2)).sqrt();
            let phase = -2.0 * std::f64::consts::PI * d / cfg.wavelength();
            let expect = Complex64::from_polar(g, phase);
            assert!((snap.h[m] - expect).norm() < 1e-12 * g);
        }
    }

    #[test]
    fn outage_snapshot_for_empty_paths() {
        let cfg = small_cfg(2, 2);
        let geom = antenna_positions(&cfg).unwrap();
        let snap = synthesize_channel(&[], &geom, &cfg, 0.3);
        assert!(snap.is_outage());
        assert!(snap.los_blocked);
        assert!(snap.h.iter().all(|c| *c == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn pilot_noiseless_and_noise_variance() {
        let cfg = SystemConfig { noise_variance: 0.0, tx_power: 4.0, ..small_cfg(2, 1) };
        let geom = antenna_positions(&cfg).unwrap();
        let paths = trace_paths(&open_scene(), Vec3::new(4.0, 1.0, 0.0), &cfg).unwrap();
        let snap = synthesize_channel(&paths, &geom, &cfg, 0.0);
        let w = vec![Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0); 2];
        let y = received_pilot(&w, &snap, &cfg, 5);
        assert_eq!(y, hermitian_inner(&w, &snap.h) * 2.0);

        let zero = ChannelSnapshot { h: vec![Complex64::new(0.0, 0.0); 2], ..snap.clone() };
        assert_eq!(received_pilot(&w, &zero, &cfg, 5), Complex64::new(0.0, 0.0));

        let noisy = SystemConfig { noise_variance: 0.25, tx_power: 1.0, ..cfg };
        let n = 10_000;
        let samples: Vec<Complex64> = (0..n).map(|s| received_pilot(&w, &zero, &noisy, s)).collect();
        let mean: Complex64 = samples.iter().sum::<Complex64>() / n as f64;
        let var = samples.iter().map(|y| (y - mean).norm_sqr()).sum::<f64>() / (n as f64 - 1.0);
        assert!((var - 0.25).abs() < 0.025, "variance {var}");
        assert_eq!(received_pilot(&w, &zero, &noisy, 77), received_pilot(&w, &zero, &noisy, 77));
    }
}
