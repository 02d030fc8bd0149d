//! Confidence-gated refinement and budget-capped beam-training baselines.
//!
//! Every search measures gains through [`PilotCounter`], which owns the only
//! pilot counter; `pilots_used` values are read from it, never computed.

use num_complex::Complex64;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_gaussian, ChannelSnapshot};
use crate::codebook::{BeamTriplet, PolarCodebook};
use crate::error::{Error, Result};
use crate::predictor::model::PredictionBundle;
use crate::rng::{stream_rng, Stream};
use crate::sysgeo::SystemConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementMode {
    /// Always use the Top-1 combination.
    None,
    ProbabilityOnly,
    PilotSweep,
}

impl RefinementMode {
    pub fn label(self) -> &'static str {
        match self {
            RefinementMode::None => "none",
            RefinementMode::ProbabilityOnly => "prob",
            RefinementMode::PilotSweep => "sweep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RefinementMode::None),
            "prob" => Ok(RefinementMode::ProbabilityOnly),
            "sweep" => Ok(RefinementMode::PilotSweep),
            other => Err(Error::InvalidConfig(format!("unknown refinement mode {other:?} (expected none, prob or sweep)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub s_thre: f64,
    pub pool_top_k: usize,
    pub mode: RefinementMode,
    /// Reference SNR for measured pilot gains; None keeps the system noise.
    pub sweep_snr_db: Option<f64>,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig { s_thre: 0.9, pool_top_k: 5, mode: RefinementMode::PilotSweep, sweep_snr_db: None }
    }
}

impl RefinementConfig {
    pub fn pool_size(&self) -> usize {
        self.pool_top_k.pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_thre > 0.0 && self.s_thre < 1.0) {
            return Err(Error::InvalidConfig(format!("s_thre {} must lie in (0, 1)", self.s_thre)));
        }
        if self.pool_top_k == 0 {
            return Err(Error::InvalidConfig("pool_top_k must be positive".into()));
        }
        Ok(())
    }

    fn measurement_cfg(&self, sys: &SystemConfig) -> SystemConfig {
        match self.sweep_snr_db {
            Some(db) => sys.clone().with_reference_snr_db(db),
            None => sys.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementOutcome {
    pub triplet: BeamTriplet,
    pub triggered: bool,
    pub pilots_used: u64,
    pub pool: Option<Vec<BeamTriplet>>,
    pub mode: RefinementMode,
    /// The sweep fell back to the joint-probability choice on an outage.
    pub flagged: bool,
}

/// Accept the Top-1 prediction iff all three gathered confidences exceed
/// `s_thre` strictly.
pub fn gate_confidence(bundle: &PredictionBundle, slot: usize, cfg: &RefinementConfig) -> bool {
    bundle.top1_conf(slot).iter().all(|s| *s > cfg.s_thre)
}

/// Indices (0-based) of the `k` largest entries, ties to the smaller index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|a, b| row[*b].total_cmp(&row[*a]).then(a.cmp(b)));
    idx.truncate(k);
    idx
}

/// Cartesian product of the per-dimension Top-k indices, ordered by
/// descending joint probability, ties by global index.
pub fn candidate_pool(bundle: &PredictionBundle, slot: usize, k: usize) -> Result<Vec<BeamTriplet>> {
    let sizes = [bundle.probs[0].cols, bundle.probs[1].cols, bundle.probs[2].cols];
    if k == 0 || k > *sizes.iter().min().unwrap() {
        return Err(Error::InvalidConfig(format!("pool top-k {k} must lie in [1, {}]", sizes.iter().min().unwrap())));
    }
    let tops: Vec<Vec<usize>> = (0..3).map(|d| top_k_indices(bundle.probs[d].row(slot), k)).collect();
    let mut pool = Vec::with_capacity(k * k * k);
    for &i in &tops[0] {
        for &j in &tops[1] {
            for &q in &tops[2] {
                pool.push(BeamTriplet::new(i + 1, j + 1, q + 1));
            }
        }
    }
    let key = |t: &BeamTriplet| (t.i - 1) * sizes[1] * sizes[2] + (t.j - 1) * sizes[2] + t.q;
    pool.sort_by(|a, b| bundle.joint_prob(slot, *b).total_cmp(&bundle.joint_prob(slot, *a)).then(key(a).cmp(&key(b))));
    Ok(pool)
}

/// Argmax of the joint probability over the pool; ties to the smallest
/// global index. Consumes no pilots.
pub fn refine_joint_prob(pool: &[BeamTriplet], bundle: &PredictionBundle, slot: usize) -> Result<BeamTriplet> {
    let sizes = [bundle.probs[0].cols, bundle.probs[1].cols, bundle.probs[2].cols];
    let key = |t: &BeamTriplet| (t.i - 1) * sizes[1] * sizes[2] + (t.j - 1) * sizes[2] + t.q;
    let mut best = *pool.first().ok_or_else(|| Error::MissingInput("empty candidate pool".into()))?;
    let mut best_p = bundle.joint_prob(slot, best);
    for t in &pool[1..] {
        let p = bundle.joint_prob(slot, *t);
        if p > best_p || (p == best_p && key(t) < key(&best)) {
            best = *t;
            best_p = p;
        }
    }
    Ok(best)
}

/// Noiseless responses w^H h of every codeword for one snapshot; pilot
/// measurements perturb these. Build once per slot and share across methods.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotResponses {
    pub responses: Vec<Complex64>,
    pub outage: bool,
}

impl SlotResponses {
    pub fn new(cb: &PolarCodebook, snap: &ChannelSnapshot) -> Self {
        SlotResponses { responses: cb.responses(&snap.h), outage: snap.is_outage() }
    }

    /// Responses of several snapshots from one batched sweep.
    pub fn batch(cb: &PolarCodebook, snaps: &[ChannelSnapshot]) -> Vec<Self> {
        let hs: Vec<&[Complex64]> = snaps.iter().map(|s| s.h.as_slice()).collect();
        cb.responses_batch(&hs)
            .into_iter()
            .zip(snaps)
            .map(|(responses, s)| SlotResponses { responses, outage: s.is_outage() })
            .collect()
    }

    pub fn gains(&self) -> Vec<f64> {
        self.responses.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Gain measurements against one snapshot with an exact pilot count and an
/// optional budget cap.
pub struct PilotCounter<'a> {
    cb: &'a PolarCodebook,
    responses: &'a [Complex64],
    tx_power: f64,
    noise_variance: f64,
    rng: ChaCha20Rng,
    used: u64,
    budget: Option<u64>,
    best: Option<(BeamTriplet, f64)>,
}

impl<'a> PilotCounter<'a> {
    pub fn new(cb: &'a PolarCodebook, slot: &'a SlotResponses, cfg: &SystemConfig, seed: u64, budget: Option<u64>) -> Self {
        PilotCounter {
            cb,
            responses: &slot.responses,
            tx_power: cfg.tx_power,
            noise_variance: cfg.noise_variance,
            rng: stream_rng(seed, Stream::Pilot, 0),
            used: 0,
            budget,
            best: None,
        }
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn remaining(&self) -> Option<u64> {
        self.budget.map(|b| b - self.used)
    }

    /// Best measured probe so far (first one on ties).
    pub fn best(&self) -> Option<(BeamTriplet, f64)> {
        self.best
    }

    /// One pilot: |sqrt(P) w^H h + n|^2 / P with n ~ CN(0, sigma^2), the
    /// distribution of w^H n for a unit-norm codeword. Returns None once
    /// the budget is spent.
    pub fn measure(&mut self, t: BeamTriplet) -> Option<f64> {
        if self.budget.is_some_and(|b| self.used >= b) {
            return None;
        }
        self.used += 1;
        let r = self.responses[self.cb.dims.row(t)];
        let g = if self.noise_variance == 0.0 {
            r.norm_sqr()
        } else {
            let n: Complex64 = complex_gaussian(&mut self.rng, self.noise_variance);
            (r * self.tx_power.sqrt() + n).norm_sqr() / self.tx_power
        };
        if self.best.is_none_or(|(_, b)| g > b) {
            self.best = Some((t, g));
        }
        Some(g)
    }

    /// Measure every probe in order and return the first argmax among them.
    pub fn sweep(&mut self, probes: &[BeamTriplet]) -> Option<(BeamTriplet, f64)> {
        let mut best: Option<(BeamTriplet, f64)> = None;
        for t in probes {
            let Some(g) = self.measure(*t) else { break };
            if best.is_none_or(|(_, b)| g > b) {
                best = Some((*t, g));
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub triplet: BeamTriplet,
    pub pilots_used: u64,
    /// Outage snapshot or a fallback was taken.
    pub flagged: bool,
}

/// Measured-gain argmax over the pool; pilots = pool size. Outage snapshots
/// fall back to the joint-probability choice and are flagged.
pub fn refine_pilot_sweep(
    pool: &[BeamTriplet],
    bundle: &PredictionBundle,
    slot: usize,
    resp: &SlotResponses,
    cb: &PolarCodebook,
    cfg: &SystemConfig,
    seed: u64,
) -> Result<SearchResult> {
    if pool.is_empty() {
        return Err(Error::MissingInput("empty candidate pool".into()));
    }
    let mut pc = PilotCounter::new(cb, resp, cfg, seed, None);
    let (best, _) = pc.sweep(pool).expect("unbudgeted sweep measures every probe");
    if resp.outage {
        return Ok(SearchResult { triplet: refine_joint_prob(pool, bundle, slot)?, pilots_used: pc.used(), flagged: true });
    }
    Ok(SearchResult { triplet: best, pilots_used: pc.used(), flagged: false })
}

/// Gate, then refine according to `cfg.mode`.
pub fn refine_slot(
    bundle: &PredictionBundle,
    slot: usize,
    resp: &SlotResponses,
    cb: &PolarCodebook,
    sys: &SystemConfig,
    cfg: &RefinementConfig,
    seed: u64,
) -> Result<RefinementOutcome> {
    let top1 = bundle.top1(slot);
    let accept = |mode| RefinementOutcome { triplet: top1, triggered: false, pilots_used: 0, pool: None, mode, flagged: false };
    if cfg.mode == RefinementMode::None || gate_confidence(bundle, slot, cfg) {
        return Ok(accept(cfg.mode));
    }
    let pool = candidate_pool(bundle, slot, cfg.pool_top_k)?;
    let (triplet, pilots_used, flagged) = match cfg.mode {
        RefinementMode::ProbabilityOnly => (refine_joint_prob(&pool, bundle, slot)?, 0, false),
        _ => {
            let r = refine_pilot_sweep(&pool, bundle, slot, resp, cb, &cfg.measurement_cfg(sys), seed)?;
            (r.triplet, r.pilots_used, r.flagged)
        }
    };
    Ok(RefinementOutcome { triplet, triggered: true, pilots_used, pool: Some(pool), mode: cfg.mode, flagged })
}

/// Measure every codeword; pilots = codebook size.
pub fn exhaustive_search(slot: &SlotResponses, cb: &PolarCodebook, cfg: &SystemConfig, seed: u64) -> SearchResult {
    let mut pc = PilotCounter::new(cb, slot, cfg, seed, None);
    let all: Vec<BeamTriplet> = (0..cb.len()).map(|r| cb.dims.triplet_of_row(r)).collect();
    let (best, _) = pc.sweep(&all).expect("non-empty codebook");
    if slot.outage {
        return SearchResult { triplet: BeamTriplet::new(1, 1, 1), pilots_used: pc.used(), flagged: true };
    }
    SearchResult { triplet: best, pilots_used: pc.used(), flagged: false }
}

/// 1-based indices 1, 1 + s, 1 + 2s, ... up to n.
fn strided(n: usize, s: usize) -> Vec<usize> {
    (1..=n).step_by(s).collect()
}

/// Stage costs of the hierarchical search at angular stride `s`:
/// coarse grid, 3 x 3 neighbourhood, distance sweep.
pub fn hierarchical_cost(cb: &PolarCodebook, s: usize) -> (usize, usize, usize) {
    let d = cb.dims;
    (strided(d.n_theta, s).len() * strided(d.n_phi, s).len(), 9, d.n_r)
}

/// Smallest stride whose three stages fit in `budget`.
pub fn hierarchical_stride(cb: &PolarCodebook, budget: u64) -> Result<usize> {
    let d = cb.dims;
    for s in 1..=d.n_theta.max(d.n_phi) {
        let (a, b, c) = hierarchical_cost(cb, s);
        if (a + b + c) as u64 <= budget {
            return Ok(s);
        }
    }
    Err(Error::InsufficientBudget(format!("budget {budget} is below the coarsest hierarchical sweep")))
}

/// Coarse angular sweep at the farthest ring, 3 x 3 angular refinement around
/// the winner, then a sweep over all distances at the refined angle. The
/// stride grows until all three stages fit in `budget`. Returns the best
/// measured probe.
pub fn hierarchical_search(slot: &SlotResponses, cb: &PolarCodebook, budget: u64, cfg: &SystemConfig, seed: u64) -> Result<SearchResult> {
    let d = cb.dims;
    let s = hierarchical_stride(cb, budget)?;
    let mut pc = PilotCounter::new(cb, slot, cfg, seed, Some(budget));
    let far = d.n_r;
    let coarse: Vec<BeamTriplet> = strided(d.n_theta, s)
        .into_iter()
        .flat_map(|i| strided(d.n_phi, s).into_iter().map(move |j| BeamTriplet::new(i, j, far)))
        .collect();
    let mut winner = pc.sweep(&coarse).map(|b| b.0);
    if let Some(w) = winner {
        let mut hood = Vec::with_capacity(9);
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let (i, j) = (w.i as i64 + di, w.j as i64 + dj);
                if (1..=d.n_theta as i64).contains(&i) && (1..=d.n_phi as i64).contains(&j) {
                    hood.push(BeamTriplet::new(i as usize, j as usize, far));
                }
            }
        }
        winner = pc.sweep(&hood).map(|b| b.0).or(winner);
    }
    if let Some(w) = winner {
        let dist: Vec<BeamTriplet> = (1..=d.n_r).map(|q| BeamTriplet::new(w.i, w.j, q)).collect();
        pc.sweep(&dist);
    }
    let (triplet, _) = pc.best().ok_or_else(|| Error::InsufficientBudget("no probe fit in the budget".into()))?;
    Ok(SearchResult { triplet, pilots_used: pc.used(), flagged: slot.outage })
}

/// Number of azimuth and elevation samples of the two-stage search.
pub fn two_stage_grid(cb: &PolarCodebook, budget: u64) -> Result<(usize, usize)> {
    let d = cb.dims;
    if budget < d.n_r as u64 + 1 {
        return Err(Error::InsufficientBudget(format!("two-stage search needs at least {} pilots", d.n_r + 1)));
    }
    let cap = (budget - d.n_r as u64) as usize;
    let n_az = ((cap as f64).sqrt().floor() as usize).clamp(1, d.n_theta);
    let n_el = (cap / n_az).clamp(1, d.n_phi);
    Ok((n_az, n_el))
}

/// `count` 1-based indices spread evenly over 1..=n.
fn spread(n: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![n.div_ceil(2)];
    }
    (0..count).map(|k| 1 + ((n - 1) as f64 * k as f64 / (count - 1) as f64).round() as usize).collect()
}

/// Angular sweep at the farthest ring on an evenly spread grid sized to
/// `budget - N_r`, then all distances at the winning angle.
pub fn two_stage_search(slot: &SlotResponses, cb: &PolarCodebook, budget: u64, cfg: &SystemConfig, seed: u64) -> Result<SearchResult> {
    let d = cb.dims;
    let (n_az, n_el) = two_stage_grid(cb, budget)?;
    let mut pc = PilotCounter::new(cb, slot, cfg, seed, Some(budget));
    let probes: Vec<BeamTriplet> = spread(d.n_theta, n_az)
        .into_iter()
        .flat_map(|i| spread(d.n_phi, n_el).into_iter().map(move |j| BeamTriplet::new(i, j, d.n_r)))
        .collect();
    if let Some((w, _)) = pc.sweep(&probes) {
        let dist: Vec<BeamTriplet> = (1..=d.n_r).map(|q| BeamTriplet::new(w.i, w.j, q)).collect();
        pc.sweep(&dist);
    }
    let (triplet, _) = pc.best().ok_or_else(|| Error::InsufficientBudget("no probe fit in the budget".into()))?;
    Ok(SearchResult { triplet, pilots_used: pc.used(), flagged: slot.outage })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub slots: u64,
    pub triggered: u64,
    pub total_pilots: u64,
    pub avg_pilots: f64,
    pub trigger_rate: f64,
}

pub fn account_overhead(outcomes: &[RefinementOutcome]) -> Result<Overhead> {
    if outcomes.is_empty() {
        return Err(Error::MissingInput("no outcomes to account".into()));
    }
    let slots = outcomes.len() as u64;
    let triggered = outcomes.iter().filter(|o| o.triggered).count() as u64;
    let total_pilots: u64 = outcomes.iter().map(|o| o.pilots_used).sum();
    Ok(Overhead {
        slots,
        triggered,
        total_pilots,
        avg_pilots: total_pilots as f64 / slots as f64,
        trigger_rate: triggered as f64 / slots as f64,
    })
}
