//! Array geometry, system constants, synthetic scenes, UAV trajectories and
//! GPS corruption.

use std::io::{BufRead, Write};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};
use crate::rng::{stream_rng, Stream};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Reference distance for the SNR convention used by
/// [`SystemConfig::noise_for_reference_snr_db`].
pub const REFERENCE_DISTANCE_M: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub carrier_frequency_hz: f64,
    /// Elements along z (M_z).
    pub antenna_rows: usize,
    /// Elements along y (M_y).
    pub antenna_cols: usize,
    pub element_spacing_wavelengths: f64,
    /// Transmit power P_r, linear watts.
    pub tx_power: f64,
    /// Noise variance sigma^2 per receive element.
    pub noise_variance: f64,
    /// Array center o_BS.
    pub array_center: Vec3,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let mut cfg = SystemConfig {
            carrier_frequency_hz: 7e9,
            antenna_rows: 32,
            antenna_cols: 32,
            element_spacing_wavelengths: 0.5,
            tx_power: 1.0,
            noise_variance: 1.0,
            array_center: Vec3::new(0.0, 0.0, 10.0),
        };
        cfg.noise_variance = cfg.noise_for_reference_snr_db(20.0);
        cfg
    }
}

impl SystemConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency_hz
    }

    /// d_y = d_z.
    pub fn element_spacing(&self) -> f64 {
        self.element_spacing_wavelengths * self.wavelength()
    }

    pub fn num_antennas(&self) -> usize {
        self.antenna_rows * self.antenna_cols
    }

    /// Diagonal of the element span, meters.
    pub fn aperture_diagonal(&self) -> f64 {
        let d = self.element_spacing();
        let wy = (self.antenna_cols.saturating_sub(1)) as f64 * d;
        let wz = (self.antenna_rows.saturating_sub(1)) as f64 * d;
        (wy * wy + wz * wz).sqrt()
    }

    /// Rayleigh distance 2 D^2 / lambda.
    pub fn rayleigh_distance(&self) -> f64 {
        let d = self.aperture_diagonal();
        2.0 * d * d / self.wavelength()
    }

    /// Noise variance giving `snr_db` of received SNR for a phase-matched beam
    /// toward a free-space LoS user at [`REFERENCE_DISTANCE_M`].
    pub fn noise_for_reference_snr_db(&self, snr_db: f64) -> f64 {
        let g = self.wavelength() / (4.0 * std::f64::consts::PI * REFERENCE_DISTANCE_M);
        let matched_gain = self.num_antennas() as f64 * g * g;
        self.tx_power * matched_gain / 10f64.powf(snr_db / 10.0)
    }

    pub fn with_reference_snr_db(mut self, snr_db: f64) -> Self {
        self.noise_variance = self.noise_for_reference_snr_db(snr_db);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.carrier_frequency_hz > 0.0) {
            return bad("carrier frequency must be positive");
        }
        if self.antenna_rows == 0 || self.antenna_cols == 0 {
            return bad("array needs at least one row and one column");
        }
        if !(self.element_spacing_wavelengths > 0.0) {
            return bad("element spacing must be positive");
        }
        if !(self.tx_power > 0.0) {
            return bad("transmit power must be positive");
        }
        if !(self.noise_variance >= 0.0) {
            return bad("noise variance must be nonnegative");
        }
        if !self.array_center.is_finite() {
            return bad("array center must be finite");
        }
        Ok(())
    }
}

/// Element positions of the planar array, flattened with m_y outer and m_z inner.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayGeometry {
    pub cols: usize,
    pub rows: usize,
    pub positions: Vec<Vec3>,
}

impl ArrayGeometry {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Flattened index of element (m_y, m_z).
    pub fn index(&self, m_y: usize, m_z: usize) -> usize {
        m_y * self.rows + m_z
    }
}

pub fn antenna_positions(cfg: &SystemConfig) -> Result<ArrayGeometry> {
    cfg.validate()?;
    let d = cfg.element_spacing();
    let (my, mz) = (cfg.antenna_cols, cfg.antenna_rows);
    let o = cfg.array_center;
    let mut positions = Vec::with_capacity(my * mz);
    for m_y in 0..my {
        for m_z in 0..mz {
            let y = (m_y as f64 - (my as f64 - 1.0) / 2.0) * d;
            let z = ((mz as f64 - 1.0) / 2.0 - m_z as f64) * d;
            positions.push(o + Vec3::new(0.0, y, z));
        }
    }
    Ok(ArrayGeometry { cols: my, rows: mz, positions })
}

/// A finite planar convex polygon with a single complex reflection coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Facet {
    pub corners: Vec<Vec3>,
    pub gamma: Complex64,
}

impl Facet {
    pub fn new(corners: Vec<Vec3>, gamma: Complex64) -> Result<Self> {
        let f = Facet { corners, gamma };
        f.validate()?;
        Ok(f)
    }

    /// Axis-aligned rectangle helper: `axis` is the constant coordinate.
    pub fn rectangle(axis: usize, level: f64, lo: [f64; 2], hi: [f64; 2], gamma: Complex64) -> Result<Self> {
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let pt = |u: f64, v: f64| {
            let mut p = [0.0; 3];
            p[axis] = level;
            p[a] = u;
            p[b] = v;
            Vec3(p)
        };
        Facet::new(
            vec![pt(lo[0], lo[1]), pt(hi[0], lo[1]), pt(hi[0], hi[1]), pt(lo[0], hi[1])],
            gamma,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.corners.len() < 3 {
            return Err(Error::InvalidConfig("facet needs at least 3 corners".into()));
        }
        let g = self.gamma.norm();
        if !(g > 0.0 && g <= 1.0) {
            return Err(Error::InvalidConfig(format!("reflection coefficient magnitude {g} outside (0, 1]")));
        }
        let n = self.raw_normal();
        if !(n.norm() > 1e-12) {
            return Err(Error::InvalidConfig("degenerate facet".into()));
        }
        let nn = n.normalized();
        let c0 = self.corners[0];
        if self.corners.iter().any(|c| (*c - c0).dot(nn).abs() > 1e-9) {
            return Err(Error::InvalidConfig("facet corners are not coplanar".into()));
        }
        Ok(())
    }

    fn raw_normal(&self) -> Vec3 {
        let c0 = self.corners[0];
        let mut n = Vec3::ZERO;
        for w in self.corners[1..].windows(2) {
            n += (w[0] - c0).cross(w[1] - c0);
        }
        n
    }

    pub fn normal(&self) -> Vec3 {
        self.raw_normal().normalized()
    }

    pub fn area(&self) -> f64 {
        0.5 * self.raw_normal().norm()
    }

    /// Signed distance of `p` from the facet plane along the normal.
    pub fn plane_distance(&self, p: Vec3) -> f64 {
        (p - self.corners[0]).dot(self.normal())
    }

    pub fn mirror(&self, p: Vec3) -> Vec3 {
        let n = self.normal();
        p - n * (2.0 * (p - self.corners[0]).dot(n))
    }

    /// Whether a point on the facet plane lies inside the polygon.
    pub fn contains_planar(&self, p: Vec3) -> bool {
        let n = self.normal();
        let k = self.corners.len();
        let mut sign = 0.0f64;
        for e in 0..k {
            let a = self.corners[e];
            let b = self.corners[(e + 1) % k];
            let s = (b - a).cross(p - a).dot(n);
            if s.abs() < 1e-12 {
                continue;
            }
            if sign == 0.0 {
                sign = s.signum();
            } else if s.signum() != sign {
                return false;
            }
        }
        true
    }

    /// Image-method specular point for a bounce from `src` to `dst`, if both
    /// lie strictly on the same side and the point falls inside the facet.
    pub fn specular_point(&self, src: Vec3, dst: Vec3) -> Option<Vec3> {
        let ds = self.plane_distance(src);
        let dd = self.plane_distance(dst);
        if ds * dd <= 0.0 {
            return None;
        }
        let image = self.mirror(src);
        let n = self.normal();
        let denom = (dst - image).dot(n);
        if denom.abs() < 1e-15 {
            return None;
        }
        let t = (self.corners[0] - image).dot(n) / denom;
        let s = image + (dst - image) * t;
        self.contains_planar(s).then_some(s)
    }

    /// Uniform sample over the polygon (fan triangulation).
    pub fn sample_point<R: Rng>(&self, rng: &mut R) -> Vec3 {
        let c0 = self.corners[0];
        let tris: Vec<(Vec3, Vec3, f64)> = self.corners[1..]
            .windows(2)
            .map(|w| (w[0], w[1], 0.5 * (w[0] - c0).cross(w[1] - c0).norm()))
            .collect();
        let total: f64 = tris.iter().map(|t| t.2).sum();
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = tris[tris.len() - 1];
        for t in &tris {
            if pick <= t.2 {
                chosen = *t;
                break;
            }
            pick -= t.2;
        }
        let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        c0 + (chosen.0 - c0) * u + (chosen.1 - c0) * v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub id: u32,
    pub reflectors: Vec<Facet>,
    pub blockers: Vec<Aabb>,
    pub bounds: Aabb,
}

impl SceneConfig {
    pub fn empty(id: u32, bounds: Aabb) -> Self {
        SceneConfig { id, reflectors: Vec::new(), blockers: Vec::new(), bounds }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bounds.is_valid() {
            return Err(Error::InvalidConfig("scene bounds are empty".into()));
        }
        for f in &self.reflectors {
            f.validate()?;
        }
        if self.blockers.iter().any(|b| !b.is_valid()) {
            return Err(Error::InvalidConfig("blocker box has empty extent".into()));
        }
        Ok(())
    }

    /// True if any blocker intersects the segment `a -> b`.
    pub fn blocked(&self, a: Vec3, b: Vec3) -> bool {
        self.blockers.iter().any(|bx| bx.intersects_segment(a, b))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: SceneConfig = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Ranges used to randomize synthetic scenes. The array faces +x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneLayout {
    pub bounds: Aabb,
    /// Region where episodes start.
    pub spawn: Aabb,
    pub walls: [usize; 2],
    pub blockers: [usize; 2],
    pub ground: bool,
}

impl Default for SceneLayout {
    fn default() -> Self {
        SceneLayout {
            bounds: Aabb::new(Vec3::new(10.0, -17.0, 4.0), Vec3::new(30.0, 17.0, 18.0)),
            spawn: Aabb::new(Vec3::new(12.0, -13.0, 6.0), Vec3::new(27.0, 13.0, 15.0)),
            walls: [1, 2],
            blockers: [1, 3],
            ground: true,
        }
    }
}

/// Randomized urban-canyon scene: a ground plane, side facades and a few
/// box blockers between the array and the flight region.
pub fn synthesize_scene(id: u32, seed: u64, layout: &SceneLayout) -> Result<SceneConfig> {
    let mut rng = stream_rng(seed, Stream::Scene, id as u64);
    let mut reflectors = Vec::new();
    if layout.ground {
        let mag = rng.random_range(0.3..0.5);
        reflectors.push(Facet::rectangle(
            2,
            0.0,
            [0.0, -40.0],
            [60.0, 40.0],
            Complex64::from_polar(mag, std::f64::consts::PI),
        )?);
    }
    let n_walls = rng.random_range(layout.walls[0]..=layout.walls[1]);
    let first_side: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
    for w in 0..n_walls {
        let side = if w % 2 == 0 { first_side } else { -first_side };
        let y = side * (layout.bounds.max.y().max(-layout.bounds.min.y()) + rng.random_range(1.0..6.0));
        let height = rng.random_range(15.0..30.0);
        let x0 = rng.random_range(4.0..10.0);
        let x1 = rng.random_range(35.0..50.0);
        let gamma = Complex64::from_polar(rng.random_range(0.35..0.75), rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        reflectors.push(Facet::rectangle(1, y, [x0, 0.0], [x1, height], gamma)?);
    }
    let n_blockers = rng.random_range(layout.blockers[0]..=layout.blockers[1]);
    let mut blockers = Vec::new();
    let x_limit = layout.bounds.min.x() - 1.0;
    for _ in 0..n_blockers {
        let depth = rng.random_range(1.0..3.0);
        let x0 = rng.random_range(3.0..(x_limit - depth).max(3.5));
        let width = rng.random_range(2.0..6.0);
        let yc = rng.random_range(-8.0..8.0);
        let h = rng.random_range(8.0..13.0);
        blockers.push(Aabb::new(Vec3::new(x0, yc - width / 2.0, 0.0), Vec3::new(x0 + depth, yc + width / 2.0, h)));
    }
    let scene = SceneConfig { id, reflectors, blockers, bounds: layout.bounds };
    scene.validate()?;
    Ok(scene)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Straight,
    Zigzag,
    StreetPatrol,
    Hover,
    ArcTurn,
}

impl ModeKind {
    pub const ALL: [ModeKind; 5] = [ModeKind::Straight, ModeKind::Zigzag, ModeKind::StreetPatrol, ModeKind::Hover, ModeKind::ArcTurn];

    pub fn id(self) -> u8 {
        match self {
            ModeKind::Straight => 0,
            ModeKind::Zigzag => 1,
            ModeKind::StreetPatrol => 2,
            ModeKind::Hover => 3,
            ModeKind::ArcTurn => 4,
        }
    }

    pub fn from_id(id: u8) -> Option<ModeKind> {
        ModeKind::ALL.get(id as usize).copied()
    }
}

/// Flight mode with its kinematic parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMode {
    pub kind: ModeKind,
    /// Total 3D speed, m/s.
    pub speed: f64,
    /// Distance between heading changes (Zigzag, StreetPatrol), meters.
    #[serde(default)]
    pub leg_length: f64,
    /// Turn radius (ArcTurn), meters.
    #[serde(default)]
    pub radius: f64,
    /// Initial horizontal heading in radians from +x; drawn from the seed if absent.
    #[serde(default)]
    pub heading: Option<f64>,
    #[serde(default)]
    pub climb_rate: f64,
}

impl TrajectoryMode {
    pub fn default_for(kind: ModeKind) -> Self {
        let base = TrajectoryMode { kind, speed: 0.0, leg_length: 0.0, radius: 0.0, heading: None, climb_rate: 0.0 };
        match kind {
            ModeKind::Straight => TrajectoryMode { speed: 5.0, ..base },
            ModeKind::Zigzag => TrajectoryMode { speed: 4.0, leg_length: 2.0, ..base },
            ModeKind::StreetPatrol => TrajectoryMode { speed: 3.0, leg_length: 5.0, ..base },
            ModeKind::Hover => base,
            ModeKind::ArcTurn => TrajectoryMode { speed: 3.0, radius: 5.0, ..base },
        }
    }

    pub fn id(&self) -> u8 {
        self.kind.id()
    }

    /// Seconds between heading changes, where the mode has legs.
    pub fn turn_period(&self) -> Option<f64> {
        (self.leg_length > 0.0 && self.speed > 0.0).then(|| self.leg_length / self.speed)
    }

    /// Number of steps per leg at sampling interval `dt`.
    pub fn steps_per_leg(&self, dt: f64) -> usize {
        ((self.leg_length / (self.speed * dt)) - 1e-9).ceil().max(1.0) as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.speed >= 0.0) || !(self.climb_rate.abs() <= self.speed) {
            return Err(Error::InvalidConfig("mode speed must be >= |climb rate| >= 0".into()));
        }
        match self.kind {
            ModeKind::Zigzag | ModeKind::StreetPatrol if !(self.leg_length > 0.0) && self.speed > 0.0 => {
                Err(Error::InvalidConfig("leg length must be positive".into()))
            }
            ModeKind::ArcTurn if !(self.radius > 0.0) => Err(Error::InvalidConfig("arc radius must be positive".into())),
            _ => Ok(()),
        }
    }
}

pub fn generate_trajectory(
    mode: &TrajectoryMode,
    start: Vec3,
    n_slots: usize,
    dt: f64,
    bounds: &Aabb,
    seed: u64,
) -> Result<Vec<Vec3>> {
    if n_slots < 2 || !(dt > 0.0) {
        return Err(Error::InvalidConfig("need n_slots >= 2 and dt > 0".into()));
    }
    mode.validate()?;
    if !bounds.contains(start) {
        return Err(Error::InvalidPosition(format!("start {:?} outside scene bounds", start.0)));
    }
    let mut rng = stream_rng(seed, Stream::Trajectory, mode.id() as u64);
    let heading = match mode.heading {
        Some(h) => h,
        None => rng.random_range(0.0..std::f64::consts::TAU),
    };
    let horiz = (mode.speed * mode.speed - mode.climb_rate * mode.climb_rate).max(0.0).sqrt();
    let climb = Vec3::new(0.0, 0.0, mode.climb_rate * dt);
    let dir = |h: f64| Vec3::new(h.cos(), h.sin(), 0.0);

    let steps: Vec<Vec3> = match mode.kind {
        ModeKind::Hover => vec![Vec3::ZERO; n_slots - 1],
        ModeKind::Straight => vec![dir(heading) * (horiz * dt) + climb; n_slots - 1],
        ModeKind::Zigzag => {
            let per_leg = mode.steps_per_leg(dt);
            let off = std::f64::consts::FRAC_PI_4;
            (0..n_slots - 1)
                .map(|k| {
                    let sign = if (k / per_leg) % 2 == 0 { 1.0 } else { -1.0 };
                    dir(heading + sign * off) * (horiz * dt) + climb
                })
                .collect()
        }
        ModeKind::StreetPatrol => {
            let per_leg = mode.steps_per_leg(dt);
            let mut h = heading;
            (0..n_slots - 1)
                .map(|k| {
                    if k > 0 && k % per_leg == 0 {
                        let turn = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        h += turn * std::f64::consts::FRAC_PI_2;
                    }
                    dir(h) * (horiz * dt) + climb
                })
                .collect()
        }
        ModeKind::ArcTurn => {
            let turn = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let omega = turn * horiz / mode.radius;
            let a0 = heading - turn * std::f64::consts::FRAC_PI_2;
            let arc = |k: usize| {
                let a = a0 + omega * dt * k as f64;
                Vec3::new(a.cos(), a.sin(), 0.0) * mode.radius
            };
            (0..n_slots - 1).map(|k| arc(k + 1) - arc(k) + climb).collect()
        }
    };

    let mut out = Vec::with_capacity(n_slots);
    let mut p = start;
    out.push(p);
    for s in steps {
        p = bounds.clamp(p + s);
        out.push(p);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsNoiseModel {
    pub sigma_gps: f64,
    pub seed: u64,
}

impl Default for GpsNoiseModel {
    fn default() -> Self {
        GpsNoiseModel { sigma_gps: 0.5, seed: 0 }
    }
}

pub fn apply_gps_noise(truth: &[Vec3], model: &GpsNoiseModel) -> Result<Vec<Vec3>> {
    if !(model.sigma_gps >= 0.0) {
        return Err(Error::InvalidConfig("sigma_gps must be nonnegative".into()));
    }
    if model.sigma_gps == 0.0 {
        return Ok(truth.to_vec());
    }
    let normal = Normal::new(0.0, model.sigma_gps).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = stream_rng(model.seed, Stream::GpsNoise, 0);
    Ok(truth
        .iter()
        .map(|p| *p + Vec3(std::array::from_fn(|_| normal.sample(&mut rng))))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRow {
    slot: usize,
    x: f64,
    y: f64,
    z: f64,
}

/// One `{slot, x, y, z}` JSON object per line.
pub fn write_trajectory_jsonl<W: Write>(mut w: W, positions: &[Vec3]) -> Result<()> {
    for (slot, p) in positions.iter().enumerate() {
        let row = TrajectoryRow { slot, x: p.x(), y: p.y(), z: p.z() };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trajectory_jsonl<R: BufRead>(r: R) -> Result<Vec<Vec3>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TrajectoryRow = serde_json::from_str(&line)?;
        if row.slot != out.len() {
            return Err(Error::Format(format!("expected slot {}, found {}", out.len(), row.slot)));
        }
        out.push(Vec3::new(row.x, row.y, row.z));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(my: usize, mz: usize) -> SystemConfig {
        SystemConfig { antenna_cols: my, antenna_rows: mz, array_center: Vec3::ZERO, ..SystemConfig::default() }
    }

    fn wide_bounds() -> Aabb {
        Aabb::new(Vec3::new(-100.0, -100.0, -100.0), Vec3::new(100.0, 100.0, 100.0))
    }

    #[test]
    fn single_element_sits_at_center() {
        let g = antenna_positions(&cfg(1, 1)).unwrap();
        assert_eq!(g.positions, vec![Vec3::ZERO]);
    }

    #[test]
    fn two_element_offsets_match_half_spacing() {
        let c = cfg(2, 1);
        let d = c.element_spacing();
        assert!((d - 0.021_413_747).abs() < 1e-9);
        let g = antenna_positions(&c).unwrap();
        assert!((g.positions[0].y() + 0.010_706_874).abs() < 1e-9);
        assert!((g.positions[1].y() - 0.010_706_874).abs() < 1e-9);
    }

    #[test]
    fn element_formula_and_planarity() {
        let c = SystemConfig { array_center: Vec3::new(1.0, 2.0, 3.0), ..cfg(4, 3) };
        let g = antenna_positions(&c).unwrap();
        let d = c.element_spacing();
        for my in 0..4 {
            for mz in 0..3 {
                let p = g.positions[g.index(my, mz)];
                let expect = c.array_center + Vec3::new(0.0, (my as f64 - 1.5) * d, (1.0 - mz as f64) * d);
                assert_eq!(p, expect);
                assert_eq!(p.x(), 1.0);
            }
        }
        let mean = g.positions.iter().fold(Vec3::ZERO, |a, p| a + *p) * (1.0 / g.len() as f64);
        assert!((mean - c.array_center).norm() < 1e-12);
        assert_eq!(g, antenna_positions(&c).unwrap());
    }

    #[test]
    fn hover_is_stationary() {
        let m = TrajectoryMode::default_for(ModeKind::Hover);
        let t = generate_trajectory(&m, Vec3::new(1.0, 2.0, 3.0), 20, 0.1, &wide_bounds(), 3).unwrap();
        assert_eq!(t.len(), 20);
        assert!(t.iter().all(|p| *p == Vec3::new(1.0, 2.0, 3.0)));
    }

    #[test]
    fn straight_along_y_moves_half_meter_per_slot() {
        let m = TrajectoryMode { heading: Some(std::f64::consts::FRAC_PI_2), ..TrajectoryMode::default_for(ModeKind::Straight) };
        let t = generate_trajectory(&m, Vec3::ZERO, 20, 0.1, &wide_bounds(), 0).unwrap();
        for w in t.windows(2) {
            assert!((w[1].y() - w[0].y() - 0.5).abs() < 1e-12);
            assert!((w[1].x() - w[0].x()).abs() < 1e-12);
        }
    }

    #[test]
    fn zigzag_lateral_sign_flips_every_leg() {
        let m = TrajectoryMode { heading: Some(0.0), ..TrajectoryMode::default_for(ModeKind::Zigzag) };
        let t = generate_trajectory(&m, Vec3::ZERO, 20, 0.1, &wide_bounds(), 9).unwrap();
        let per_leg = (2.0f64 / (4.0 * 0.1)).ceil() as usize;
        assert_eq!(per_leg, 5);
        let signs: Vec<f64> = t.windows(2).map(|w| (w[1].y() - w[0].y()).signum()).collect();
        for (k, s) in signs.iter().enumerate() {
            let expect = if (k / per_leg) % 2 == 0 { 1.0 } else { -1.0 };
            assert_eq!(*s, expect, "step {k}");
        }
    }

    #[test]
    fn start_outside_bounds_rejected() {
        let m = TrajectoryMode::default_for(ModeKind::Straight);
        let b = Aabb::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0));
        assert!(matches!(generate_trajectory(&m, Vec3::new(5.0, 0.0, 0.0), 20, 0.1, &b, 0), Err(Error::InvalidPosition(_))));
    }

    #[test]
    fn clipping_keeps_trajectory_inside() {
        let b = Aabb::new(Vec3::ZERO, Vec3::new(2.0, 2.0, 2.0));
        let m = TrajectoryMode { heading: Some(0.3), ..TrajectoryMode::default_for(ModeKind::Straight) };
        let t = generate_trajectory(&m, Vec3::new(1.0, 1.0, 1.0), 20, 0.1, &b, 0).unwrap();
        assert!(t.iter().all(|p| b.contains(*p)));
        for w in t.windows(2) {
            assert!(w[0].dist(w[1]) <= 0.5 + 1e-9);
        }
    }

    #[test]
    fn gps_noise_zero_sigma_is_identity_and_seeded() {
        let truth = vec![Vec3::new(1.0, 2.0, 3.0); 5];
        assert_eq!(apply_gps_noise(&truth, &GpsNoiseModel { sigma_gps: 0.0, seed: 1 }).unwrap(), truth);
        let m = GpsNoiseModel { sigma_gps: 0.5, seed: 42 };
        assert_eq!(apply_gps_noise(&truth, &m).unwrap(), apply_gps_noise(&truth, &m).unwrap());
        assert_ne!(apply_gps_noise(&truth, &m).unwrap(), truth);
    }

    #[test]
    fn gps_noise_sample_std_near_sigma() {
        let truth = vec![Vec3::ZERO; 10_000];
        let noisy = apply_gps_noise(&truth, &GpsNoiseModel { sigma_gps: 0.5, seed: 2024 }).unwrap();
        let n = noisy.len() as f64;
        for k in 0..3 {
            let mean = noisy.iter().map(|p| p.0[k]).sum::<f64>() / n;
            let var = noisy.iter().map(|p| (p.0[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let sd = var.sqrt();
            assert!((0.48..=0.52).contains(&sd), "axis {k}: {sd}");
            assert!(mean.abs() < 3.0 * 0.5 / n.sqrt(), "axis {k} mean {mean}");
        }
    }

    #[test]
    fn facet_mirror_and_specular_point() {
        let f = Facet::rectangle(0, -1.0, [-10.0, -10.0], [10.0, 10.0], Complex64::new(0.5, 0.0)).unwrap();
        let u = Vec3::new(3.0, 1.0, 0.5);
        assert_eq!(f.mirror(u), Vec3::new(-5.0, 1.0, 0.5));
        let p = Vec3::new(0.0, -0.5, 0.2);
        let s = f.specular_point(u, p).unwrap();
        assert!((s.x() + 1.0).abs() < 1e-12);
        let two_seg = u.dist(s) + s.dist(p);
        assert!((two_seg - f.mirror(u).dist(p)).abs() < 1e-12);
        // Opposite sides: no bounce.
        assert!(f.specular_point(u, Vec3::new(-3.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn reflection_coefficient_validated() {
        assert!(Facet::rectangle(2, 0.0, [0.0, 0.0], [1.0, 1.0], Complex64::new(1.5, 0.0)).is_err());
        assert!(Facet::rectangle(2, 0.0, [0.0, 0.0], [1.0, 1.0], Complex64::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn synthetic_scene_is_deterministic_and_valid() {
        let l = SceneLayout::default();
        let a = synthesize_scene(3, 11, &l).unwrap();
        assert_eq!(a, synthesize_scene(3, 11, &l).unwrap());
        assert_ne!(a, synthesize_scene(4, 11, &l).unwrap());
        assert!(a.blockers.iter().all(|b| b.max.x() < l.bounds.min.x()));
        let back = SceneConfig::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn trajectory_jsonl_round_trip() {
        let pts = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.5, 0.25, 9.0)];
        let mut buf = Vec::new();
        write_trajectory_jsonl(&mut buf, &pts).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"slot\":0,\"x\":1.0"));
        assert_eq!(read_trajectory_jsonl(&buf[..]).unwrap(), pts);
    }

    #[test]
    fn mode_ids_are_stable() {
        for (i, k) in ModeKind::ALL.iter().enumerate() {
            assert_eq!(k.id() as usize, i);
            assert_eq!(ModeKind::from_id(i as u8), Some(*k));
        }
        assert_eq!(serde_json::to_string(&ModeKind::StreetPatrol).unwrap(), "\"street_patrol\"");
    }
}
