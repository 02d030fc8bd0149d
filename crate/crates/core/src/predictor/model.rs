//! The decoupled beam predictor: kinematic and sensor encoders, position-guided
//! attention, token fusion, a causal transformer backbone and the trajectory,
//! beam and confidence heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::sensors::{KinematicSequence, N_IMAGE_TOKENS};
use super::tape::{causal_mask, ParamId, ParamStore, Tape, Var};
use crate::codebook::{BeamTriplet, CodebookDims};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_in: usize,
    pub n_backbone_blocks: usize,
    pub n_heads: usize,
    pub l_h: usize,
    pub l_p: usize,
    pub n_image_tokens: usize,
    pub n_lidar_tokens: usize,
    pub n_modes: usize,
    pub dims: CodebookDims,
    /// Position normalization: (u - origin) / pos_scale.
    pub origin: Vec3,
    pub pos_scale: f64,
    pub vel_scale: f64,
    pub acc_scale: f64,
    /// Trajectory output is anchor + traj_out_scale * head output.
    pub traj_out_scale: f64,
    /// Train only the top block, the norms, the projections and the heads.
    pub partial_freeze: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_in: 32,
            n_backbone_blocks: 2,
            n_heads: 4,
            l_h: 10,
            l_p: 10,
            n_image_tokens: N_IMAGE_TOKENS,
            n_lidar_tokens: 64,
            n_modes: 5,
            dims: CodebookDims { n_theta: 20, n_phi: 20, n_r: 10 },
            origin: Vec3::new(0.0, 0.0, 10.0),
            pos_scale: 20.0,
            vel_scale: 5.0,
            acc_scale: 50.0,
            traj_out_scale: 5.0,
            partial_freeze: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_in == 0 || self.l_h < 2 || self.l_p == 0 || self.n_modes == 0 || self.n_lidar_tokens == 0 {
            return bad("model sizes must be positive and l_h at least 2");
        }
        if self.n_image_tokens != N_IMAGE_TOKENS {
            return bad("the image grid is fixed at 7 x 7 tokens");
        }
        if self.dims.is_empty() {
            return bad("codebook dimensions must be positive");
        }
        Ok(())
    }

    /// Sequence length with every modality present.
    pub fn full_sequence_len(&self) -> usize {
        3 + self.l_h + self.l_p
    }
}

/// One forward pass worth of inputs. Absent modalities drop their token.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub kinematics: KinematicSequence,
    /// Most recent position estimate; anchors the trajectory output and
    /// queries the sensor tokens.
    pub anchor: Vec3,
    pub image: Option<(Mat, Vec<f64>)>,
    pub lidar: Option<(Mat, Vec<f64>)>,
    pub mode: Option<usize>,
}

/// Per-slot outputs. Dimension index 0 is azimuth, 1 elevation, 2 distance.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    /// L_p x 3 positions.
    pub traj: Mat,
    pub probs: [Mat; 3],
    pub conf: [Mat; 3],
}

impl PredictionBundle {
    pub fn p_az(&self) -> &Mat {
        &self.probs[0]
    }
    pub fn p_el(&self) -> &Mat {
        &self.probs[1]
    }
    pub fn p_dist(&self) -> &Mat {
        &self.probs[2]
    }
    pub fn s_az(&self) -> &Mat {
        &self.conf[0]
    }
    pub fn s_el(&self) -> &Mat {
        &self.conf[1]
    }
    pub fn s_dist(&self) -> &Mat {
        &self.conf[2]
    }

    pub fn horizon(&self) -> usize {
        self.traj.rows
    }

    pub fn traj_point(&self, slot: usize) -> Vec3 {
        Vec3::new(self.traj.at(slot, 0), self.traj.at(slot, 1), self.traj.at(slot, 2))
    }

    /// Per-dimension argmax (0-based) at `slot`.
    pub fn argmax(&self, slot: usize) -> [usize; 3] {
        [self.probs[0].row_argmax(slot), self.probs[1].row_argmax(slot), self.probs[2].row_argmax(slot)]
    }

    /// Top-1 triplet (1-based) at `slot`.
    pub fn top1(&self, slot: usize) -> BeamTriplet {
        let a = self.argmax(slot);
        BeamTriplet::new(a[0] + 1, a[1] + 1, a[2] + 1)
    }

    /// Confidence at the Top-1 index of each dimension.
    pub fn top1_conf(&self, slot: usize) -> [f64; 3] {
        let a = self.argmax(slot);
        [self.conf[0].at(slot, a[0]), self.conf[1].at(slot, a[1]), self.conf[2].at(slot, a[2])]
    }

    pub fn joint_prob(&self, slot: usize, t: BeamTriplet) -> f64 {
        self.probs[0].at(slot, t.i - 1) * self.probs[1].at(slot, t.j - 1) * self.probs[2].at(slot, t.q - 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PgaIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
}

#[derive(Clone, Debug)]
pub struct ParamIds {
    pub hist_w1: ParamId,
    pub hist_b1: ParamId,
    pub hist_w2: ParamId,
    pub hist_b2: ParamId,
    pub q_future: ParamId,
    pub e_time: ParamId,
    pub mode_table: ParamId,
    pub pga_img: PgaIds,
    pub pga_lidar: PgaIds,
    pub blocks: Vec<BlockIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub traj_w1: ParamId,
    pub traj_b1: ParamId,
    pub traj_w2: ParamId,
    pub traj_b2: ParamId,
    pub inj_w: ParamId,
    pub inj_b: ParamId,
    pub trunk_w: ParamId,
    pub trunk_b: ParamId,
    pub logit_w: ParamId,
    pub logit_b: ParamId,
    pub conf_w: ParamId,
    pub conf_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub ids: ParamIds,
}

struct Init<R: Rng> {
    rng: R,
    store: ParamStore,
}

impl<R: Rng> Init<R> {
    /// Uniform on +-sqrt(3 / fan_in): unit output variance for unit inputs.
    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (3.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-a..a)).collect();
        self.store.add(name, Mat::from_vec(fan_in, fan_out, data))
    }

    fn embedding(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let n = Normal::new(0.0, 0.02).unwrap();
        let data = (0..rows * cols).map(|_| n.sample(&mut self.rng)).collect();
        self.store.add(name, Mat::from_vec(rows, cols, data))
    }

    fn constant(&mut self, name: &str, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Mat::filled(1, cols, v))
    }
}

impl Predictor {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Predictor> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut init = Init { rng: stream_rng(seed, Stream::Init, 0), store: ParamStore::default() };
        let pga = |init: &mut Init<_>, tag: &str| PgaIds {
            w_q: init.weight(&format!("pga_{tag}.w_q"), 3, d),
            w_k: init.weight(&format!("pga_{tag}.w_k"), cfg.d_in, d),
            w_v: init.weight(&format!("pga_{tag}.w_v"), cfg.d_in, d),
        };
        let hist_w1 = init.weight("hist.w1", 9, d);
        let hist_b1 = init.constant("hist.b1", d, 0.0);
        let hist_w2 = init.weight("hist.w2", d, d);
        let hist_b2 = init.constant("hist.b2", d, 0.0);
        let q_future = init.embedding("q_future", cfg.l_p, d);
        let e_time = init.embedding("e_time", cfg.l_h + cfg.l_p, d);
        let mode_table = init.embedding("mode_table", cfg.n_modes, d);
        let pga_img = pga(&mut init, "img");
        let pga_lidar = pga(&mut init, "lidar");
        let blocks = (0..cfg.n_backbone_blocks)
            .map(|b| BlockIds {
                ln1_g: init.constant(&format!("block{b}.ln1_g"), d, 1.0),
                ln1_b: init.constant(&format!("block{b}.ln1_b"), d, 0.0),
                w_qkv: init.weight(&format!("block{b}.w_qkv"), d, 3 * d),
                b_qkv: init.constant(&format!("block{b}.b_qkv"), 3 * d, 0.0),
                w_o: init.weight(&format!("block{b}.w_o"), d, d),
                b_o: init.constant(&format!("block{b}.b_o"), d, 0.0),
                ln2_g: init.constant(&format!("block{b}.ln2_g"), d, 1.0),
                ln2_b: init.constant(&format!("block{b}.ln2_b"), d, 0.0),
                w_ff1: init.weight(&format!("block{b}.w_ff1"), d, 4 * d),
                b_ff1: init.constant(&format!("block{b}.b_ff1"), 4 * d, 0.0),
                w_ff2: init.weight(&format!("block{b}.w_ff2"), 4 * d, d),
                b_ff2: init.constant(&format!("block{b}.b_ff2"), d, 0.0),
            })
            .collect::<Vec<_>>();
        let bh = 2 * d;
        let width = cfg.dims.decoupled_width();
        let lnf_g = init.constant("lnf_g", d, 1.0);
        let lnf_b = init.constant("lnf_b", d, 0.0);
        let traj_w1 = init.weight("traj.w1", d, d);
        let traj_b1 = init.constant("traj.b1", d, 0.0);
        let traj_w2 = init.weight("traj.w2", d, 3);
        let traj_b2 = init.constant("traj.b2", 3, 0.0);
        let inj_w = init.weight("beam.inj_w", d, d);
        let inj_b = init.constant("beam.inj_b", d, 0.0);
        let trunk_w = init.weight("beam.trunk_w", 2 * d, bh);
        let trunk_b = init.constant("beam.trunk_b", bh, 0.0);
        let logit_w = init.weight("beam.logit_w", bh, width);
        let logit_b = init.constant("beam.logit_b", width, 0.0);
        let conf_w = init.weight("conf.w", bh, width);
        let conf_b = init.constant("conf.b", width, 0.0);
        let ids = ParamIds {
            hist_w1,
            hist_b1,
            hist_w2,
            hist_b2,
            q_future,
            e_time,
            mode_table,
            pga_img,
            pga_lidar,
            blocks,
            lnf_g,
            lnf_b,
            traj_w1,
            traj_b1,
            traj_w2,
            traj_b2,
            inj_w,
            inj_b,
            trunk_w,
            trunk_b,
            logit_w,
            logit_b,
            conf_w,
            conf_b,
        };
        let mut model = Predictor { cfg, params: init.store, ids };
        model.apply_freeze();
        Ok(model)
    }

    /// Marks trainable tensors according to `cfg.partial_freeze`.
    pub fn apply_freeze(&mut self) {
        let top = self.cfg.n_backbone_blocks.saturating_sub(1);
        for (k, name) in self.params.names.iter().enumerate() {
            let frozen = self.cfg.partial_freeze
                && (matches!(name.as_str(), "q_future" | "e_time" | "mode_table")
                    || (name.starts_with("block")
                        && !name.starts_with(&format!("block{top}."))
                        && !name.contains(".ln")));
            self.params.trainable[k] = !frozen;
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.count_scalars()
    }

    /// Normalized [u, v, a] rows as a constant L_h x 9 matrix.
    fn kinematic_matrix(&self, kin: &KinematicSequence) -> Mat {
        let c = &self.cfg;
        let o = c.origin.0;
        Mat::from_rows(
            &kin.rows
                .iter()
                .map(|r| {
                    let mut v = vec![0.0; 9];
                    for a in 0..3 {
                        v[a] = (r[a] - o[a]) / c.pos_scale;
                        v[3 + a] = r[3 + a] / c.vel_scale;
                        v[6 + a] = r[6 + a] / c.acc_scale;
                    }
                    v
                })
                .collect::<Vec<_>>(),
        )
    }

    pub fn query_row(&self, u: Vec3) -> Mat {
        let o = self.cfg.origin;
        Mat::row_vec(&((u - o) * (1.0 / self.cfg.pos_scale)).0)
    }

    /// Records the full forward pass and returns the output nodes.
    pub fn forward(&self, tape: &mut Tape, input: &ModelInput) -> Result<ForwardVars> {
        let tokens = fuse_tokens(self, tape, input)?;
        let out = backbone_forward(self, tape, tokens);
        let future = select_future(self, tape, out);
        Ok(heads_forward(self, tape, future, input.anchor))
    }

    pub fn predict(&self, input: &ModelInput) -> Result<PredictionBundle> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward(&mut tape, input)?;
        Ok(vars.bundle(&tape))
    }
}

/// Output nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub traj: Var,
    pub probs: [Var; 3],
    pub conf: [Var; 3],
}

impl ForwardVars {
    pub fn bundle(&self, tape: &Tape) -> PredictionBundle {
        PredictionBundle {
            traj: tape.value(self.traj).clone(),
            probs: self.probs.map(|v| tape.value(v).clone()),
            conf: self.conf.map(|v| tape.value(v).clone()),
        }
    }
}

/// E = softmax((u W_Q)(F W_K)^T / sqrt(d) + M)(F W_V), a single 1 x d row.
pub fn pga_attend(tape: &mut Tape, u_row: Mat, features: Mat, bias: &[f64], p: PgaIds) -> Var {
    let d = tape.params().get(p.w_q).cols;
    let u = tape.constant(u_row);
    let f = tape.constant(features);
    let m = tape.constant(Mat::row_vec(bias));
    let (wq, wk, wv) = (tape.param(p.w_q), tape.param(p.w_k), tape.param(p.w_v));
    let q = tape.matmul(u, wq);
    let k = tape.matmul(f, wk);
    let v = tape.matmul(f, wv);
    let s = tape.matmul_nt(q, k);
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let s = tape.add(s, m);
    let a = tape.softmax(s);
    tape.matmul(a, v)
}

/// Context tokens first (mode, image, LiDAR, each only when present), then
/// the L_h history tokens and the L_p future queries, with time embeddings
/// on the trajectory block.
pub fn fuse_tokens(model: &Predictor, tape: &mut Tape, input: &ModelInput) -> Result<Var> {
    let c = &model.cfg;
    let ids = &model.ids;
    if input.kinematics.rows.len() != c.l_h {
        return Err(Error::MissingInput(format!(
            "expected {} kinematic rows, got {}",
            c.l_h,
            input.kinematics.rows.len()
        )));
    }
    let mut parts = Vec::with_capacity(4);
    if let Some(m) = input.mode {
        if m >= c.n_modes {
            return Err(Error::IndexOutOfRange(format!("mode id {m} outside vocabulary of {}", c.n_modes)));
        }
        let table = tape.param(ids.mode_table);
        parts.push(tape.slice_rows(table, m, m + 1));
    }
    for (sensor, pga, n_tokens) in [
        (&input.image, ids.pga_img, c.n_image_tokens),
        (&input.lidar, ids.pga_lidar, c.n_lidar_tokens),
    ] {
        if let Some((features, bias)) = sensor {
            if features.shape() != (n_tokens, c.d_in) || bias.len() != n_tokens {
                return Err(Error::InvalidConfig(format!(
                    "sensor tokens {:?} with {} biases do not match ({n_tokens}, {})",
                    features.shape(),
                    bias.len(),
                    c.d_in
                )));
            }
            parts.push(pga_attend(tape, model.query_row(input.anchor), features.clone(), bias, pga));
        }
    }
    let kin = tape.constant(model.kinematic_matrix(&input.kinematics));
    let h = tape.linear(kin, ids.hist_w1, ids.hist_b1);
    let h = tape.gelu(h);
    let h = tape.linear(h, ids.hist_w2, ids.hist_b2);
    let q = tape.param(ids.q_future);
    let traj = tape.concat_rows(&[h, q]);
    let e_time = tape.param(ids.e_time);
    parts.push(tape.add(traj, e_time));
    Ok(if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) })
}

fn affine_norm(tape: &mut Tape, x: Var, g: ParamId, b: ParamId) -> Var {
    let n = tape.layer_norm(x);
    let g = tape.param(g);
    let b = tape.param(b);
    let n = tape.mul_row(n, g);
    tape.add_row(n, b)
}

/// Pre-norm causal transformer blocks.
pub fn backbone_forward(model: &Predictor, tape: &mut Tape, tokens: Var) -> Var {
    let c = &model.cfg;
    let d = c.d_model;
    let dh = d / c.n_heads;
    let n = tape.value(tokens).rows;
    let mask = tape.constant(causal_mask(n));
    let mut x = tokens;
    for b in &model.ids.blocks {
        let h = affine_norm(tape, x, b.ln1_g, b.ln1_b);
        let qkv = tape.linear(h, b.w_qkv, b.b_qkv);
        let mut heads = Vec::with_capacity(c.n_heads);
        for k in 0..c.n_heads {
            let q = tape.slice_cols(qkv, k * dh, (k + 1) * dh);
            let kk = tape.slice_cols(qkv, d + k * dh, d + (k + 1) * dh);
            let v = tape.slice_cols(qkv, 2 * d + k * dh, 2 * d + (k + 1) * dh);
            let s = tape.matmul_nt(q, kk);
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let s = tape.add(s, mask);
            let a = tape.softmax(s);
            heads.push(tape.matmul(a, v));
        }
        let att = tape.concat_cols(&heads);
        let att = tape.linear(att, b.w_o, b.b_o);
        x = tape.add(x, att);
        let h = affine_norm(tape, x, b.ln2_g, b.ln2_b);
        let f = tape.linear(h, b.w_ff1, b.b_ff1);
        let f = tape.gelu(f);
        let f = tape.linear(f, b.w_ff2, b.b_ff2);
        x = tape.add(x, f);
    }
    x
}

/// The last L_p outputs, i.e. the future-query positions.
pub fn select_future(model: &Predictor, tape: &mut Tape, out: Var) -> Var {
    let n = tape.value(out).rows;
    tape.slice_rows(out, n - model.cfg.l_p, n)
}

/// Trajectory regression, trajectory-conditioned beam logits and sigmoid
/// confidences.
pub fn heads_forward(model: &Predictor, tape: &mut Tape, future: Var, anchor: Vec3) -> ForwardVars {
    let ids = &model.ids;
    let dims = model.cfg.dims;
    let x = affine_norm(tape, future, ids.lnf_g, ids.lnf_b);
    let h_t = tape.linear(x, ids.traj_w1, ids.traj_b1);
    let h_t = tape.gelu(h_t);
    let out = tape.linear(h_t, ids.traj_w2, ids.traj_b2);
    let out = tape.scale(out, model.cfg.traj_out_scale);
    let anchor = tape.constant(Mat::row_vec(&anchor.0));
    let traj = tape.add_row(out, anchor);

    let inj = tape.linear(h_t, ids.inj_w, ids.inj_b);
    let joined = tape.concat_cols(&[inj, x]);
    let trunk = tape.linear(joined, ids.trunk_w, ids.trunk_b);
    let trunk = tape.gelu(trunk);
    let logits = tape.linear(trunk, ids.logit_w, ids.logit_b);
    let conf_logits = tape.linear(trunk, ids.conf_w, ids.conf_b);
    let conf_all = tape.sigmoid(conf_logits);
    let bounds = [0, dims.n_theta, dims.n_theta + dims.n_phi, dims.decoupled_width()];
    let mut probs = [traj; 3];
    let mut conf = [traj; 3];
    for k in 0..3 {
        let l = tape.slice_cols(logits, bounds[k], bounds[k + 1]);
        probs[k] = tape.softmax(l);
        conf[k] = tape.slice_cols(conf_all, bounds[k], bounds[k + 1]);
    }
    ForwardVars { traj, probs, conf }
}
