//! Polar-domain codebook: (azimuth, elevation, distance) sampling, the
//! triplet/global-index bijection, gain sweeps, rate and the exhaustive oracle.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::binio::*;
use crate::channel::{hermitian_inner, ChannelSnapshot};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::sysgeo::{ArrayGeometry, SystemConfig};

const CODEBOOK_MAGIC: &[u8; 8] = b"NFBCBK01";

/// Resolution and sampling ranges. Angles in degrees; `r_max` defaults to
/// 0.9 of the Rayleigh distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodebookSpec {
    pub n_theta: usize,
    pub n_phi: usize,
    pub n_r: usize,
    pub azimuth_deg: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub r_min: f64,
    pub r_max: Option<f64>,
}

impl Default for CodebookSpec {
    fn default() -> Self {
        CodebookSpec {
            n_theta: 20,
            n_phi: 20,
            n_r: 10,
            azimuth_deg: [-60.0, 60.0],
            elevation_deg: [-30.0, 30.0],
            r_min: 5.0,
            r_max: None,
        }
    }
}

impl CodebookSpec {
    pub fn resolved_r_max(&self, cfg: &SystemConfig) -> f64 {
        self.r_max.unwrap_or_else(|| 0.9 * cfg.rayleigh_distance())
    }

    pub fn dims(&self) -> CodebookDims {
        CodebookDims { n_theta: self.n_theta, n_phi: self.n_phi, n_r: self.n_r }
    }

    pub fn validate(&self, cfg: &SystemConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_theta == 0 || self.n_phi == 0 || self.n_r == 0 {
            return bad("codebook resolutions must be positive".into());
        }
        for (name, [lo, hi]) in [("azimuth", self.azimuth_deg), ("elevation", self.elevation_deg)] {
            if !(lo >= -90.0 && hi <= 90.0 && lo <= hi) {
                return bad(format!("{name} range [{lo}, {hi}] must lie within [-90, 90] degrees"));
            }
        }
        if self.n_theta > 1 && self.azimuth_deg[0] == self.azimuth_deg[1] {
            return bad("azimuth range is empty".into());
        }
        if self.n_phi > 1 && self.elevation_deg[0] == self.elevation_deg[1] {
            return bad("elevation range is empty".into());
        }
        let r_max = self.resolved_r_max(cfg);
        if !(self.r_min > 0.0 && self.r_min < r_max) {
            return bad(format!("distance range needs 0 < r_min ({}) < r_max ({r_max})", self.r_min));
        }
        Ok(())
    }
}

/// 1-based (azimuth, elevation, distance) sub-indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BeamTriplet {
    pub i: usize,
    pub j: usize,
    pub q: usize,
}

impl BeamTriplet {
    pub const fn new(i: usize, j: usize, q: usize) -> Self {
        BeamTriplet { i, j, q }
    }

    pub fn get(&self, dim: usize) -> usize {
        [self.i, self.j, self.q][dim]
    }

    pub fn with(mut self, dim: usize, value: usize) -> Self {
        match dim {
            0 => self.i = value,
            1 => self.j = value,
            _ => self.q = value,
        }
        self
    }
}

/// Codebook shape; carries the index arithmetic so callers that only rank
/// indices need not hold the codeword table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodebookDims {
    pub n_theta: usize,
    pub n_phi: usize,
    pub n_r: usize,
}

impl CodebookDims {
    pub fn len(&self) -> usize {
        self.n_theta * self.n_phi * self.n_r
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self, dim: usize) -> usize {
        [self.n_theta, self.n_phi, self.n_r][dim]
    }

    /// Logits per slot emitted by a decoupled head.
    pub fn decoupled_width(&self) -> usize {
        self.n_theta + self.n_phi + self.n_r
    }

    /// k = (i-1) N_phi N_r + (j-1) N_r + q.
    pub fn triplet_to_global(&self, t: BeamTriplet) -> Result<usize> {
        if !(1..=self.n_theta).contains(&t.i) || !(1..=self.n_phi).contains(&t.j) || !(1..=self.n_r).contains(&t.q) {
            return Err(Error::IndexOutOfRange(format!("triplet {t:?} outside {self:?}")));
        }
        Ok((t.i - 1) * self.n_phi * self.n_r + (t.j - 1) * self.n_r + t.q)
    }

    pub fn global_to_triplet(&self, k: usize) -> Result<BeamTriplet> {
        if !(1..=self.len()).contains(&k) {
            return Err(Error::IndexOutOfRange(format!("global index {k} outside [1, {}]", self.len())));
        }
        let z = k - 1;
        Ok(BeamTriplet {
            i: z / (self.n_phi * self.n_r) + 1,
            j: (z / self.n_r) % self.n_phi + 1,
            q: z % self.n_r + 1,
        })
    }

    /// Zero-based table row of a valid triplet.
    pub fn row(&self, t: BeamTriplet) -> usize {
        (t.i - 1) * self.n_phi * self.n_r + (t.j - 1) * self.n_r + (t.q - 1)
    }

    pub fn triplet_of_row(&self, row: usize) -> BeamTriplet {
        BeamTriplet { i: row / (self.n_phi * self.n_r) + 1, j: (row / self.n_r) % self.n_phi + 1, q: row % self.n_r + 1 }
    }
}

#[derive(Clone, Debug)]
pub struct PolarCodebook {
    pub dims: CodebookDims,
    pub spec: CodebookSpec,
    /// Radians.
    pub azimuth_grid: Vec<f64>,
    /// Radians.
    pub elevation_grid: Vec<f64>,
    /// Meters, increasing.
    pub distance_grid: Vec<f64>,
    pub sample_points: Vec<Vec3>,
    num_antennas: usize,
    table_re: Vec<f64>,
    table_im: Vec<f64>,
    key: String,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Content hash of everything that determines the codeword table.
pub fn codebook_key(cfg: &SystemConfig, spec: &CodebookSpec) -> String {
    let doc = serde_json::json!({
        "format": 1,
        "carrier_frequency_hz": cfg.carrier_frequency_hz,
        "antenna_rows": cfg.antenna_rows,
        "antenna_cols": cfg.antenna_cols,
        "element_spacing_wavelengths": cfg.element_spacing_wavelengths,
        "array_center": cfg.array_center,
        "spec": spec,
        "r_max": spec.resolved_r_max(cfg),
    });
    sha256_hex(doc.to_string().as_bytes())
}

pub fn build_codebook(cfg: &SystemConfig, geom: &ArrayGeometry, spec: &CodebookSpec) -> Result<PolarCodebook> {
    cfg.validate()?;
    spec.validate(cfg)?;
    let r_max = spec.resolved_r_max(cfg);
    let azimuth_grid = linspace(spec.azimuth_deg[0].to_radians(), spec.azimuth_deg[1].to_radians(), spec.n_theta);
    let elevation_grid = linspace(spec.elevation_deg[0].to_radians(), spec.elevation_deg[1].to_radians(), spec.n_phi);
    // Uniform in 1/r; listed nearest first.
    let distance_grid: Vec<f64> = linspace(1.0 / spec.r_min, 1.0 / r_max, spec.n_r).into_iter().map(|v| 1.0 / v).collect();
    let grids = (azimuth_grid, elevation_grid, distance_grid);
    from_grids(cfg, geom, spec.clone(), grids, codebook_key(cfg, spec))
}

fn from_grids(
    cfg: &SystemConfig,
    geom: &ArrayGeometry,
    spec: CodebookSpec,
    (azimuth_grid, elevation_grid, distance_grid): (Vec<f64>, Vec<f64>, Vec<f64>),
    key: String,
) -> Result<PolarCodebook> {
    let dims = spec.dims();
    let m = geom.len();
    let o = cfg.array_center;
    let k_wave = 2.0 * std::f64::consts::PI / cfg.wavelength();
    let scale = 1.0 / (m as f64).sqrt();
    let mut sample_points = Vec::with_capacity(dims.len());
    let mut table_re = Vec::with_capacity(dims.len() * m);
    let mut table_im = Vec::with_capacity(dims.len() * m);
    for &theta in &azimuth_grid {
        for &phi in &elevation_grid {
            for &r in &distance_grid {
                let p = o + Vec3::new(phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()) * r;
                sample_points.push(p);
                for e in &geom.positions {
                    let (s, c) = (-k_wave * p.dist(*e)).sin_cos();
                    table_re.push(c * scale);
                    table_im.push(s * scale);
                }
            }
        }
    }
    Ok(PolarCodebook {
        dims,
        spec,
        azimuth_grid,
        elevation_grid,
        distance_grid,
        sample_points,
        num_antennas: m,
        table_re,
        table_im,
        key,
    })
}

impl PolarCodebook {
    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn num_antennas(&self) -> usize {
        self.num_antennas
    }

    /// Content hash identifying this codebook.
    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn triplet_to_global(&self, t: BeamTriplet) -> Result<usize> {
        self.dims.triplet_to_global(t)
    }

    pub fn global_to_triplet(&self, k: usize) -> Result<BeamTriplet> {
        self.dims.global_to_triplet(k)
    }

    fn row_slices(&self, row: usize) -> (&[f64], &[f64]) {
        let m = self.num_antennas;
        (&self.table_re[row * m..(row + 1) * m], &self.table_im[row * m..(row + 1) * m])
    }

    pub fn codeword(&self, t: BeamTriplet) -> Result<Vec<Complex64>> {
        self.dims.triplet_to_global(t)?;
        Ok(self.codeword_row(self.dims.row(t)))
    }

    pub fn codeword_row(&self, row: usize) -> Vec<Complex64> {
        let (re, im) = self.row_slices(row);
        re.iter().zip(im).map(|(a, b)| Complex64::new(*a, *b)).collect()
    }

    pub fn sample_point(&self, t: BeamTriplet) -> Vec3 {
        self.sample_points[self.dims.row(t)]
    }

    /// w^H h for every codeword, in table order.
    pub fn responses(&self, h: &[Complex64]) -> Vec<Complex64> {
        self.responses_batch(&[h]).pop().unwrap()
    }

    /// Sweep several channels together as four real matrix products,
    /// Re = T_re H_re + T_im H_im and Im = T_re H_im - T_im H_re. The
    /// accumulation order of an entry does not depend on the batch size, so
    /// each result equals [`PolarCodebook::responses`] bit for bit. Every
    /// gain in the engine is computed here.
    pub fn responses_batch(&self, hs: &[&[Complex64]]) -> Vec<Vec<Complex64>> {
        let (k, m, n) = (self.len(), self.num_antennas, hs.len());
        assert!(hs.iter().all(|h| h.len() == m), "channel length must equal the antenna count");
        if n == 0 {
            return Vec::new();
        }
        let hr: Vec<f64> = hs.iter().flat_map(|h| h.iter().map(|c| c.re)).collect();
        let hi: Vec<f64> = hs.iter().flat_map(|h| h.iter().map(|c| c.im)).collect();
        let mut cr = vec![0.0; k * n];
        let mut ci = vec![0.0; k * n];
        let gemm = |a: &[f64], b: &[f64], alpha: f64, beta: f64, c: &mut [f64]| unsafe {
            // a: k x m row-major; b: m x n stored column-major (one channel per column).
            matrixmultiply::dgemm(
                k, m, n, alpha,
                a.as_ptr(), m as isize, 1,
                b.as_ptr(), 1, m as isize,
                beta, c.as_mut_ptr(), n as isize, 1,
            );
        };
        gemm(&self.table_re, &hr, 1.0, 0.0, &mut cr);
        gemm(&self.table_im, &hi, 1.0, 1.0, &mut cr);
        gemm(&self.table_re, &hi, 1.0, 0.0, &mut ci);
        gemm(&self.table_im, &hr, -1.0, 1.0, &mut ci);
        (0..n).map(|c| (0..k).map(|r| Complex64::new(cr[r * n + c], ci[r * n + c])).collect()).collect()
    }

    pub fn gains(&self, h: &[Complex64]) -> Vec<f64> {
        self.responses(h).iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(self.key.as_bytes())?;
        put_blob(&mut w, serde_json::to_string(&self.spec)?.as_bytes())?;
        put_u64(&mut w, self.len() as u64)?;
        put_u64(&mut w, self.num_antennas as u64)?;
        put_f64s(&mut w, &self.azimuth_grid)?;
        put_f64s(&mut w, &self.elevation_grid)?;
        put_f64s(&mut w, &self.distance_grid)?;
        let m = self.num_antennas;
        let mut row_buf = Vec::with_capacity(2 * m);
        for row in 0..self.len() {
            let (re, im) = self.row_slices(row);
            row_buf.clear();
            for (a, b) in re.iter().zip(im) {
                row_buf.push(*a);
                row_buf.push(*b);
            }
            put_f64s(&mut w, &row_buf)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load a cached table; `expected_key` guards against stale caches.
    pub fn load(path: &Path, cfg: &SystemConfig, geom: &ArrayGeometry, expected_key: &str) -> Result<PolarCodebook> {
        let mut r = BufReader::new(File::open(path)?);
        expect_magic(&mut r, CODEBOOK_MAGIC)?;
        let mut key = vec![0u8; 64];
        r.read_exact(&mut key)?;
        let key = String::from_utf8(key).map_err(|_| Error::Format("codebook key is not utf-8".into()))?;
        if key != expected_key {
            return Err(Error::HashMismatch(format!("codebook cache {key} does not match {expected_key}")));
        }
        let spec: CodebookSpec = serde_json::from_slice(&get_blob(&mut r, 1 << 20)?)?;
        let len = get_u64(&mut r)? as usize;
        let m = get_u64(&mut r)? as usize;
        if len != spec.dims().len() || m != geom.len() {
            return Err(Error::Format("codebook cache shape disagrees with its header".into()));
        }
        let az = get_f64s(&mut r, spec.n_theta)?;
        let el = get_f64s(&mut r, spec.n_phi)?;
        let dist = get_f64s(&mut r, spec.n_r)?;
        let mut cb = from_grids(cfg, geom, spec, (az, el, dist), key)?;
        for row in 0..len {
            let vals = get_f64s(&mut r, 2 * m)?;
            for e in 0..m {
                cb.table_re[row * m + e] = vals[2 * e];
                cb.table_im[row * m + e] = vals[2 * e + 1];
            }
        }
        Ok(cb)
    }
}

pub fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("codebook-{}.bin", &key[..16]))
}

/// Reuse `dir`'s cached table for this configuration unless `force` is set.
/// Returns the codebook and whether it was rebuilt.
pub fn load_or_build(
    dir: &Path,
    cfg: &SystemConfig,
    geom: &ArrayGeometry,
    spec: &CodebookSpec,
    force: bool,
) -> Result<(PolarCodebook, PathBuf, bool)> {
    let key = codebook_key(cfg, spec);
    let path = cache_path(dir, &key);
    if !force && path.exists() {
        if let Ok(cb) = PolarCodebook::load(&path, cfg, geom, &key) {
            return Ok((cb, path, false));
        }
    }
    let cb = build_codebook(cfg, geom, spec)?;
    std::fs::create_dir_all(dir)?;
    cb.save(&path)?;
    Ok((cb, path, true))
}

/// G(w) = |w^H h|^2.
pub fn beam_gain(w: &[Complex64], snap: &ChannelSnapshot) -> f64 {
    hermitian_inner(w, &snap.h).norm_sqr()
}

pub fn rate_from_gain(gain: f64, cfg: &SystemConfig) -> f64 {
    (1.0 + cfg.tx_power * gain / cfg.noise_variance).log2()
}

/// log2(1 + P_r |w^H h|^2 / sigma^2), bits/s/Hz.
pub fn achievable_rate(w: &[Complex64], snap: &ChannelSnapshot, cfg: &SystemConfig) -> f64 {
    rate_from_gain(beam_gain(w, snap), cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleBeam {
    pub triplet: BeamTriplet,
    pub gain: f64,
    /// Set when the channel is identically zero.
    pub outage: bool,
}

/// First index of the maximum; ties go to the smallest index.
pub fn argmax_first(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (k, v) in values.iter().enumerate().skip(1) {
        if *v > best.1 {
            best = (k, *v);
        }
    }
    best
}

pub fn oracle_from_gains(dims: &CodebookDims, gains: &[f64]) -> OracleBeam {
    let (row, gain) = argmax_first(gains);
    if gain <= 0.0 {
        return OracleBeam { triplet: BeamTriplet::new(1, 1, 1), gain: 0.0, outage: true };
    }
    OracleBeam { triplet: dims.triplet_of_row(row), gain, outage: false }
}

/// Exhaustive noiseless argmax of the beam gain over the codebook.
pub fn oracle_optimal(cb: &PolarCodebook, snap: &ChannelSnapshot) -> OracleBeam {
    oracle_from_gains(&cb.dims, &cb.gains(&snap.h))
}
