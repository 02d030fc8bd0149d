//! Soft beam targets, isolation-based confidence targets, the three-part loss
//! and the seeded Adam training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{hermitian_inner, ChannelSnapshot};
use crate::codebook::{BeamTriplet, PolarCodebook};
use crate::error::{Error, Result};
use crate::predictor::mat::Mat;
use crate::predictor::model::{ForwardVars, ModelInput, PredictionBundle, Predictor};
use crate::predictor::tape::{kl_rows_mean, ParamStore, Tape, Var};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weights of the trajectory, beam and confidence terms.
    pub lambda: [f64; 3],
    pub soft_mass_center: f64,
    pub soft_mass_neighbor: f64,
    pub kl_epsilon: f64,
    pub traj_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: [0.2, 0.6, 0.2], soft_mass_center: 0.6, soft_mass_neighbor: 0.1, kl_epsilon: 1e-12, traj_epsilon: 1e-9 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if (self.soft_mass_center + 4.0 * self.soft_mass_neighbor - 1.0).abs() > 1e-12 || self.soft_mass_neighbor < 0.0 {
            return Err(Error::InvalidConfig("soft-target masses must be nonnegative and sum to one".into()));
        }
        if !(self.kl_epsilon > 0.0 && self.traj_epsilon > 0.0) {
            return Err(Error::InvalidConfig("loss epsilons must be positive".into()));
        }
        Ok(())
    }
}

/// Smoothed label over `n_bins` for the 1-based `gt`: center mass at gt,
/// neighbor mass at gt +- 1 and gt +- 2, out-of-range mass dropped and the
/// rest renormalized.
pub fn soft_target(gt: usize, n_bins: usize, cfg: &LossConfig) -> Result<Vec<f64>> {
    if !(1..=n_bins).contains(&gt) {
        return Err(Error::IndexOutOfRange(format!("ground-truth index {gt} outside [1, {n_bins}]")));
    }
    let neighbors: Vec<usize> = [-2i64, -1, 1, 2]
        .iter()
        .map(|off| gt as i64 - 1 + off)
        .filter(|k| (0..n_bins as i64).contains(k))
        .map(|k| k as usize)
        .collect();
    let kept = cfg.soft_mass_center + neighbors.len() as f64 * cfg.soft_mass_neighbor;
    let mut p = vec![0.0; n_bins];
    let w = cfg.soft_mass_neighbor / kept;
    for k in &neighbors {
        p[*k] = w;
    }
    // The center takes the remainder so the vector sums to one.
    p[gt - 1] = 1.0 - w * neighbors.len() as f64;
    Ok(p)
}

/// Per-dimension soft targets for every future slot, as L_p x N matrices.
pub fn soft_targets(gts: &[BeamTriplet], dims: &crate::codebook::CodebookDims, cfg: &LossConfig) -> Result<[Mat; 3]> {
    let mut out = [0, 1, 2].map(|d| Mat::zeros(gts.len(), dims.size(d)));
    for (slot, t) in gts.iter().enumerate() {
        for (d, m) in out.iter_mut().enumerate() {
            m.row_mut(slot).copy_from_slice(&soft_target(t.get(d), dims.size(d), cfg)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajLoss {
    pub value: f64,
    /// A true position at the origin hit the denominator guard.
    pub flagged: bool,
}

/// Mean over slots of |u_hat - u|^2 / |u|^2.
pub fn traj_loss(pred: &Mat, truth: &Mat, eps: f64) -> Result<TrajLoss> {
    if pred.shape() != truth.shape() || pred.cols != 3 {
        return Err(Error::InvalidConfig(format!("trajectory shapes {:?} and {:?} differ", pred.shape(), truth.shape())));
    }
    let mut flagged = false;
    let mut s = 0.0;
    for r in 0..pred.rows {
        let n2: f64 = truth.row(r).iter().map(|v| v * v).sum();
        if n2 < eps {
            flagged = true;
        }
        let e: f64 = pred.row(r).iter().zip(truth.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
        s += e / n2.max(eps);
    }
    Ok(TrajLoss { value: s / pred.rows as f64, flagged })
}

/// Mean over the three dimensions and all slots of KL(p || p_hat).
pub fn beam_kl_loss(bundle: &PredictionBundle, targets: &[Mat; 3], eps: f64) -> f64 {
    (0..3).map(|d| kl_rows_mean(&bundle.probs[d], &targets[d], eps)).sum::<f64>() / 3.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTarget {
    pub s: [f64; 3],
    /// The oracle gain was zero and the targets were set to 0.
    pub flagged: bool,
}

/// Gain ratios of the codewords that keep the oracle triplet but swap in one
/// predicted index at a time, clamped to [0, 1].
pub fn confidence_target(pred: BeamTriplet, gt: BeamTriplet, cb: &PolarCodebook, snap: &ChannelSnapshot) -> Result<ConfidenceTarget> {
    let gain = |t: BeamTriplet| -> Result<f64> { Ok(hermitian_inner(&cb.codeword(t)?, &snap.h).norm_sqr()) };
    let g_star = gain(gt)?;
    if !(g_star > 0.0) {
        return Ok(ConfidenceTarget { s: [0.0; 3], flagged: true });
    }
    let mut s = [0.0; 3];
    for (d, v) in s.iter_mut().enumerate() {
        *v = (gain(gt.with(d, pred.get(d)))? / g_star).clamp(0.0, 1.0);
    }
    Ok(ConfidenceTarget { s, flagged: false })
}

/// For one slot, the clamped gain ratio of every isolated codeword along
/// each dimension through `gt`: `lines[d][k]` is the target for predicting
/// 0-based index k in dimension d. Taken from a full gain sweep in table order.
pub fn isolation_lines(gains: &[f64], gt: BeamTriplet, cb: &PolarCodebook) -> [Vec<f64>; 3] {
    let g_star = gains[cb.dims.row(gt)];
    [0, 1, 2].map(|d| {
        (1..=cb.dims.size(d))
            .map(|k| if g_star > 0.0 { (gains[cb.dims.row(gt.with(d, k))] / g_star).clamp(0.0, 1.0) } else { 0.0 })
            .collect()
    })
}

/// Mean over the three dimensions and all slots of the squared error of the
/// confidence gathered at each dimension's Top-1 index.
pub fn conf_loss(bundle: &PredictionBundle, targets: &[ConfidenceTarget]) -> f64 {
    let mut s = 0.0;
    for (slot, t) in targets.iter().enumerate() {
        let c = bundle.top1_conf(slot);
        for d in 0..3 {
            s += (c[d] - t.s[d]).powi(2);
        }
    }
    s / (3 * targets.len()) as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub traj: f64,
    pub beam: f64,
    pub conf: f64,
}

pub fn total_loss(traj: f64, beam: f64, conf: f64, cfg: &LossConfig) -> LossParts {
    let [l1, l2, l3] = cfg.lambda;
    LossParts { total: l1 * traj + l2 * beam + l3 * conf, traj, beam, conf }
}

/// Supervision for one episode window.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub input: ModelInput,
    /// L_p x 3 true future positions.
    pub future: Mat,
    pub soft: [Mat; 3],
    /// Per future slot, isolation ratios along each dimension.
    pub iso: Vec<[Vec<f64>; 3]>,
}

/// Confidence targets for the bundle's Top-1 indices.
pub fn targets_for_bundle(bundle: &PredictionBundle, iso: &[[Vec<f64>; 3]]) -> Vec<ConfidenceTarget> {
    iso.iter()
        .enumerate()
        .map(|(slot, lines)| {
            let a = bundle.argmax(slot);
            ConfidenceTarget { s: [lines[0][a[0]], lines[1][a[1]], lines[2][a[2]]], flagged: false }
        })
        .collect()
}

/// Records the loss of one sample on the tape and returns (total, parts).
pub fn loss_on_tape(tape: &mut Tape, vars: &ForwardVars, sample: &TrainingSample, cfg: &LossConfig) -> (Var, [Var; 3]) {
    let traj = tape.nmse(vars.traj, sample.future.clone(), cfg.traj_epsilon);
    let kls: Vec<(Var, f64)> = (0..3).map(|d| (tape.kl_div(vars.probs[d], sample.soft[d].clone(), cfg.kl_epsilon), 1.0 / 3.0)).collect();
    let beam = tape.weighted_sum(&kls);
    let mut entries = Vec::new();
    for d in 0..3 {
        let p = tape.value(vars.probs[d]);
        for (slot, lines) in sample.iso.iter().enumerate() {
            let k = p.row_argmax(slot);
            entries.push((d, slot, k, lines[d][k]));
        }
    }
    let gathered: Vec<(Var, f64)> = (0..3)
        .map(|d| {
            let e = entries.iter().filter(|e| e.0 == d).map(|e| (e.1, e.2, e.3)).collect();
            (tape.gather_sq_err(vars.conf[d], e), 1.0 / 3.0)
        })
        .collect();
    let conf = tape.weighted_sum(&gathered);
    let [l1, l2, l3] = cfg.lambda;
    let total = tape.weighted_sum(&[(traj, l1), (beam, l2), (conf, l3)]);
    (total, [traj, beam, conf])
}

/// Value-level loss of one sample, computed without a tape.
pub fn sample_loss(model: &Predictor, sample: &TrainingSample, cfg: &LossConfig) -> Result<(LossParts, PredictionBundle)> {
    let b = model.predict(&sample.input)?;
    let traj = traj_loss(&b.traj, &sample.future, cfg.traj_epsilon)?.value;
    let beam = beam_kl_loss(&b, &sample.soft, cfg.kl_epsilon);
    let conf = conf_loss(&b, &targets_for_bundle(&b, &sample.iso));
    Ok((total_loss(traj, beam, conf, cfg), b))
}

/// Loss parts and parameter gradients of one sample.
pub fn sample_gradients(model: &Predictor, params: &ParamStore, sample: &TrainingSample, cfg: &LossConfig) -> Result<(LossParts, Vec<Mat>)> {
    let mut tape = Tape::new(params);
    let vars = model.forward(&mut tape, &sample.input)?;
    let (total, parts) = loss_on_tape(&mut tape, &vars, sample, cfg);
    let lp = LossParts {
        total: tape.value(total).scalar(),
        traj: tape.value(parts[0]).scalar(),
        beam: tape.value(parts[1]).scalar(),
        conf: tape.value(parts[2]).scalar(),
    };
    Ok((lp, tape.backward(total)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    /// max |analytic - numeric| / max(max |analytic|, max |numeric|) over the tensor.
    pub rel_err: f64,
    pub max_abs_grad: f64,
}

/// Central-difference check of every parameter tensor against the tape.
pub fn gradient_check(model: &Predictor, sample: &TrainingSample, cfg: &LossConfig, step: f64) -> Result<Vec<GroupCheck>> {
    let (_, grads) = sample_gradients(model, &model.params, sample, cfg)?;
    let eval = |params: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(params);
        let vars = model.forward(&mut tape, &sample.input)?;
        let (total, _) = loss_on_tape(&mut tape, &vars, sample, cfg);
        Ok(tape.value(total).scalar())
    };
    let mut out = Vec::new();
    let mut probe = model.params.clone();
    for (k, g) in grads.iter().enumerate() {
        let mut max_diff = 0.0f64;
        let mut max_num = 0.0f64;
        for e in 0..g.len() {
            let orig = probe.values[k].data[e];
            probe.values[k].data[e] = orig + step;
            let lp = eval(&probe)?;
            probe.values[k].data[e] = orig - step;
            let lm = eval(&probe)?;
            probe.values[k].data[e] = orig;
            let num = (lp - lm) / (2.0 * step);
            max_diff = max_diff.max((num - g.data[e]).abs());
            max_num = max_num.max(num.abs());
        }
        let scale = g.max_abs().max(max_num);
        out.push(GroupCheck {
            name: model.params.names[k].clone(),
            rel_err: if scale > 0.0 { max_diff / scale } else { 0.0 },
            max_abs_grad: g.max_abs(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Epochs without validation improvement before the step size is halved.
    pub plateau_patience: usize,
    pub lr_decay: f64,
    pub seed: u64,
    /// Compute per-sample gradients on the rayon pool. The reduction order is
    /// fixed, so results do not depend on this flag.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: 1.0,
            plateau_patience: 2,
            lr_decay: 0.5,
            seed: 0,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossParts,
    /// Validation loss parts; equal to `train` when there is no validation split.
    pub val: LossParts,
    pub learning_rate: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub curve: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
}

pub struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Adam {
        Adam { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Mat], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for k in 0..params.len() {
            if !params.trainable[k] {
                continue;
            }
            let (p, g, m, v) = (&mut params.values[k].data, &grads[k].data, &mut self.m[k].data, &mut self.v[k].data);
            for e in 0..p.len() {
                m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * g[e];
                v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * g[e] * g[e];
                p[e] -= lr * (m[e] / bc1) / ((v[e] / bc2).sqrt() + cfg.adam_epsilon);
            }
        }
    }
}

fn clip(grads: &mut [Mat], trainable: &[bool], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().zip(trainable).filter(|(_, t)| **t).map(|(g, _)| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Mean loss over `samples` with the current parameters.
pub fn evaluate_loss(model: &Predictor, samples: &[TrainingSample], cfg: &LossConfig) -> Result<LossParts> {
    let parts: Vec<LossParts> = samples.par_iter().map(|s| sample_loss(model, s, cfg).map(|r| r.0)).collect::<Result<_>>()?;
    Ok(mean_parts(&parts))
}

fn mean_parts(parts: &[LossParts]) -> LossParts {
    let n = parts.len().max(1) as f64;
    let mut m = LossParts::default();
    for p in parts {
        m.total += p.total;
        m.traj += p.traj;
        m.beam += p.beam;
        m.conf += p.conf;
    }
    LossParts { total: m.total / n, traj: m.traj / n, beam: m.beam / n, conf: m.conf / n }
}

/// One optimizer step on `batch`; returns the batch-mean loss parts.
pub fn train_step(model: &mut Predictor, opt: &mut Adam, batch: &[&TrainingSample], lr: f64, tc: &TrainConfig, lc: &LossConfig) -> Result<LossParts> {
    let per: Vec<(LossParts, Vec<Mat>)> = if tc.parallel {
        batch.par_iter().map(|s| sample_gradients(model, &model.params, s, lc)).collect::<Result<_>>()?
    } else {
        batch.iter().map(|s| sample_gradients(model, &model.params, s, lc)).collect::<Result<_>>()?
    };
    let mut grads = model.params.zeros_like();
    for (_, g) in &per {
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.add_assign(gi);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|v| *v *= inv));
    let parts = mean_parts(&per.iter().map(|p| p.0).collect::<Vec<_>>());
    if !parts.total.is_finite() || !grads.iter().all(Mat::is_finite) {
        return Err(Error::Diverged(format!("non-finite loss or gradient (loss {})", parts.total)));
    }
    clip(&mut grads, &model.params.trainable, tc.clip_norm);
    opt.step(&mut model.params, &grads, lr, tc);
    Ok(parts)
}

/// Seeded mini-batch Adam with step halving on validation plateaus. On
/// return `model` holds the parameters of the best validation epoch.
pub fn train_loop(
    model: &mut Predictor,
    train: &[TrainingSample],
    val: &[TrainingSample],
    tc: &TrainConfig,
    lc: &LossConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    lc.validate()?;
    if train.is_empty() || tc.batch_size == 0 {
        return Err(Error::InvalidConfig("training needs samples and a positive batch size".into()));
    }
    let mut opt = Adam::new(&model.params);
    let mut lr = tc.learning_rate;
    let mut curve = Vec::with_capacity(tc.epochs);
    let mut best = (0, f64::INFINITY, model.params.clone());
    let mut stale = 0;
    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(tc.seed, Stream::Shuffle, epoch as u64));
        let mut parts = Vec::new();
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|k| &train[*k]).collect();
            let p = train_step(model, &mut opt, &batch, lr, tc, lc)
                .map_err(|e| match e {
                    Error::Diverged(m) => Error::Diverged(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
            parts.push(p);
        }
        let train_parts = mean_parts(&parts);
        let val_parts = if val.is_empty() { train_parts } else { evaluate_loss(model, val, lc)? };
        let val_total = val_parts.total;
        if !val_total.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: validation loss {val_total}")));
        }
        let log = EpochLog { epoch, train: train_parts, val: val_parts, learning_rate: lr };
        on_epoch(&log);
        curve.push(log);
        if val_total < best.1 {
            best = (epoch, val_total, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.plateau_patience {
                lr *= tc.lr_decay;
                stale = 0;
            }
        }
    }
    if best.0 > 0 {
        model.params = best.2;
    }
    Ok(TrainReport { curve, best_epoch: best.0, best_val: best.1 })
}

pub fn write_loss_curve<W: Write>(mut w: W, curve: &[EpochLog]) -> Result<()> {
    writeln!(w, "epoch,train_total,train_traj,train_beam,train_conf,val_total,val_traj,val_beam,val_conf,learning_rate")?;
    for e in curve {
        let (t, v) = (&e.train, &e.val);
        writeln!(w, "{},{},{},{},{},{},{},{},{},{}", e.epoch, t.total, t.traj, t.beam, t.conf, v.total, v.traj, v.beam, v.conf, e.learning_rate)?;
    }
    Ok(())
}

pub fn save_loss_curve(path: &Path, curve: &[EpochLog]) -> Result<()> {
    let mut buf = Vec::new();
    write_loss_curve(&mut buf, curve)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{build_codebook, CodebookSpec};
    use crate::predictor::tape::softmax_rows;
    use crate::sysgeo::{antenna_positions, SystemConfig};

    #[test]
    fn soft_target_examples() {
        let c = LossConfig::default();
        let p = soft_target(5, 20, &c).unwrap();
        assert!((p[4] - 0.6).abs() < 1e-15);
        for k in [2, 3, 5, 6] {
            assert!((p[k] - 0.1).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Boundary: masses {0.6, 0.1, 0.1} over total 0.8.
        assert_eq!(&soft_target(1, 20, &c).unwrap()[..4], &[0.75, 0.125, 0.125, 0.0]);
        assert_eq!(soft_target(1, 1, &c).unwrap(), vec![1.0]);
        assert!(soft_target(0, 5, &c).is_err());
        assert!(soft_target(6, 5, &c).is_err());
    }

    #[test]
    fn traj_loss_examples() {
        let u = Mat::from_rows(&[vec![3.0, 4.0, 0.0], vec![1.0, -2.0, 2.0]]);
        assert_eq!(traj_loss(&u, &u, 1e-9).unwrap().value, 0.0);
        assert!((traj_loss(&u.scaled(2.0), &u, 1e-9).unwrap().value - 1.0).abs() < 1e-15);
        assert!((traj_loss(&Mat::zeros(2, 3), &u, 1e-9).unwrap().value - 1.0).abs() < 1e-15);
        let mut z = u.clone();
        z.row_mut(0).fill(0.0);
        assert!(traj_loss(&u, &z, 1e-9).unwrap().flagged);
    }

    fn bundle_from(probs: [Mat; 3], conf: [Mat; 3]) -> PredictionBundle {
        PredictionBundle { traj: Mat::zeros(probs[0].rows, 3), probs, conf }
    }

    #[test]
    fn kl_examples_and_independent_sum() {
        let eps = 1e-12;
        let p = [softmax_rows(&Mat::from_rows(&[vec![0.2, 1.0, -0.5]])), softmax_rows(&Mat::from_rows(&[vec![2.0, 0.0]])), Mat::from_rows(&[vec![1.0]])];
        let conf = [Mat::zeros(1, 3), Mat::zeros(1, 2), Mat::zeros(1, 1)];
        let b = bundle_from(p.clone(), conf.clone());
        assert!(beam_kl_loss(&b, &p, eps).abs() < 1e-12);
        let uniform = [Mat::filled(1, 3, 1.0 / 3.0), Mat::filled(1, 2, 0.5), Mat::filled(1, 1, 1.0)];
        let onehot = [Mat::from_rows(&[vec![0.0, 1.0, 0.0]]), Mat::from_rows(&[vec![1.0, 0.0]]), Mat::from_rows(&[vec![1.0]])];
        let bu = bundle_from(uniform, conf);
        let want = (3f64.ln() + 2f64.ln() + 0.0) / 3.0;
        assert!((beam_kl_loss(&bu, &onehot, eps) - want).abs() < 1e-10);
        // Second implementation: explicit per-element loop over log-differences.
        let mut s = 0.0;
        for d in 0..3 {
            for (pv, qv) in onehot[d].data.iter().zip(&bu.probs[d].data) {
                if *pv != 0.0 {
                    s += pv * (pv.ln() - qv.ln());
                }
            }
        }
        assert!((beam_kl_loss(&bu, &onehot, eps) - s / 3.0).abs() < 1e-10);
    }

    #[test]
    fn conf_loss_hand_expansion() {
        // Two slots; Top-1 indices from the probabilities.
        let probs = [
            Mat::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]),
            Mat::from_rows(&[vec![0.1, 0.9], vec![0.6, 0.4]]),
            Mat::from_rows(&[vec![1.0], vec![1.0]]),
        ];
        let conf = [
            Mat::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.4]]),
            Mat::from_rows(&[vec![0.3, 0.5], vec![0.8, 0.0]]),
            Mat::from_rows(&[vec![0.25], vec![1.0]]),
        ];
        let b = bundle_from(probs, conf);
        let t = [ConfidenceTarget { s: [1.0, 0.5, 0.5], flagged: false }, ConfidenceTarget { s: [0.0, 0.3, 1.0], flagged: false }];
        let hand = ((0.9f64 - 1.0).powi(2) + 0.0 + (0.25f64 - 0.5).powi(2) + (0.4f64 - 0.0).powi(2) + (0.8f64 - 0.3).powi(2) + 0.0) / 6.0;
        assert!((conf_loss(&b, &t) - hand).abs() < 1e-15);
        let ones = [Mat::filled(2, 2, 1.0), Mat::filled(2, 2, 1.0), Mat::filled(2, 1, 1.0)];
        let b1 = bundle_from(b.probs.clone(), ones);
        let zeros = [ConfidenceTarget { s: [0.0; 3], flagged: false }; 2];
        assert_eq!(conf_loss(&b1, &zeros), 1.0);
    }

    #[test]
    fn total_loss_weighting() {
        let c = LossConfig::default();
        let l = total_loss(0.3, 1.2, 0.05, &c);
        assert!((l.total - (0.2 * 0.3 + 0.6 * 1.2 + 0.2 * 0.05)).abs() < 1e-12);
        let only = LossConfig { lambda: [0.7, 0.0, 0.0], ..c };
        assert_eq!(total_loss(0.3, 1.2, 0.05, &only).total, 0.7 * 0.3);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &LossConfig::default()).total, 0.0);
    }

    #[test]
    fn confidence_targets_match_brute_force_and_scale_invariance() {
        let cfg = SystemConfig { antenna_cols: 6, antenna_rows: 4, ..SystemConfig::default() };
        let geom = antenna_positions(&cfg).unwrap();
        let spec = CodebookSpec { n_theta: 6, n_phi: 5, n_r: 3, r_max: Some(40.0), ..CodebookSpec::default() };
        let cb = build_codebook(&cfg, &geom, &spec).unwrap();
        let scene = crate::sysgeo::synthesize_scene(1, 2, &Default::default()).unwrap();
        let paths = crate::channel::trace_paths(&scene, crate::geom::Vec3::new(18.0, 3.0, 12.0), &cfg).unwrap();
        let snap = crate::channel::synthesize_channel(&paths, &geom, &cfg, 0.0);
        let gt = crate::codebook::oracle_optimal(&cb, &snap).triplet;
        assert_eq!(confidence_target(gt, gt, &cb, &snap).unwrap().s, [1.0; 3]);
        let pred = BeamTriplet::new(2, 4, 1);
        let t = confidence_target(pred, gt, &cb, &snap).unwrap();
        // Brute force from raw h and explicit codeword phases.
        let lambda = cfg.wavelength();
        let m = geom.len() as f64;
        let g = |tr: BeamTriplet| {
            let p = cb.sample_point(tr);
            let mut acc = num_complex::Complex64::new(0.0, 0.0);
            for (e, h) in geom.positions.iter().zip(&snap.h) {
                let w = num_complex::Complex64::from_polar(1.0 / m.sqrt(), -2.0 * std::f64::consts::PI / lambda * p.dist(*e));
                acc += w.conj() * h;
            }
            acc.norm_sqr()
        };
        let want = [g(gt.with(0, 2)) / g(gt), g(gt.with(1, 4)) / g(gt), g(gt.with(2, 1)) / g(gt)];
        for d in 0..3 {
            assert!((t.s[d] - want[d].min(1.0)).abs() < 1e-9);
            assert!(t.s[d] <= 1.0);
        }
        let scaled = snap.scaled(num_complex::Complex64::new(-3.0, 0.5));
        let ts = confidence_target(pred, gt, &cb, &scaled).unwrap();
        for d in 0..3 {
            assert!((ts.s[d] - t.s[d]).abs() < 1e-12);
        }
        let lines = isolation_lines(&cb.gains(&snap.h), gt, &cb);
        for d in 0..3 {
            assert!((lines[d][pred.get(d) - 1] - t.s[d]).abs() < 1e-12);
        }
        let zero = scaled.scaled(num_complex::Complex64::new(0.0, 0.0));
        assert!(confidence_target(pred, gt, &cb, &zero).unwrap().flagged);
    }

    #[test]
    fn adam_with_zero_step_leaves_parameters() {
        let mut s = ParamStore::default();
        s.add("w", Mat::from_rows(&[vec![1.0, -2.0]]));
        let before = s.clone();
        let mut opt = Adam::new(&s);
        let tc = TrainConfig::default();
        for _ in 0..5 {
            opt.step(&mut s, &[Mat::from_rows(&[vec![0.3, -0.1]])], 0.0, &tc);
        }
        assert_eq!(s, before);
        opt.step(&mut s, &[Mat::from_rows(&[vec![0.3, -0.1]])], 0.1, &tc);
        assert!(s.values[0].at(0, 0) < 1.0 && s.values[0].at(0, 1) > -2.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Mat::from_rows(&[vec![3.0, 4.0]]), Mat::from_rows(&[vec![12.0]])];
        clip(&mut g, &[true, true], 1.0);
        let n: f64 = g.iter().map(|m| m.sq_norm()).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
