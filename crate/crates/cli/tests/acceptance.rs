//! Acceptance suite: one PASS/FAIL line per criterion and a summary naming
//! the failures. The exit status is 1 only when a check panics. Criterion 9
//! trains two models on the default dataset and dominates the runtime (about
//! fifteen minutes on one core).

mod common;

use std::process::ExitCode;
use std::time::Instant;

use nfbeam::channel::{synthesize_channel, trace_paths, ChannelSnapshot, PathComponent, PathKind};
use nfbeam::codebook::{build_codebook, oracle_optimal, BeamTriplet, CodebookDims, CodebookSpec, PolarCodebook};
use nfbeam::evalharness::{
    avg_norm_gain, build_samples, make_dataset, run_experiment, train_model, DatasetConfig, ExperimentConfig, ExperimentInputs,
    ExperimentOutput, Method, MetricsRow, Modality, Scenario, Split,
};
use nfbeam::inference::{
    account_overhead, candidate_pool, exhaustive_search, hierarchical_search, refine_joint_prob, refine_slot, two_stage_search,
    RefinementConfig, RefinementMode, SlotResponses,
};
use nfbeam::predictor::mat::Mat;
use nfbeam::predictor::model::{ModelConfig, PredictionBundle, Predictor};
use nfbeam::predictor::sensors::SensorConfig;
use nfbeam::predictor::tape::softmax_rows;
use nfbeam::rng::{stream_rng, Stream};
use nfbeam::sysgeo::{antenna_positions, synthesize_scene, ArrayGeometry, SceneConfig, SceneLayout, SystemConfig};
use nfbeam::training::{beam_kl_loss, confidence_target, gradient_check, soft_target, LossConfig};
use nfbeam::Vec3;
use num_complex::Complex64;
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

struct Default32 {
    sys: SystemConfig,
    geom: ArrayGeometry,
    cb: PolarCodebook,
}

fn default32() -> Default32 {
    let sys = SystemConfig::default();
    let geom = antenna_positions(&sys).unwrap();
    let cb = build_codebook(&sys, &geom, &CodebookSpec::default()).unwrap();
    Default32 { sys, geom, cb }
}

fn los(geom: &ArrayGeometry, sys: &SystemConfig, u: Vec3) -> ChannelSnapshot {
    let d = u.dist(sys.array_center);
    let p = PathComponent { kind: PathKind::LoS, source: u, gain: Complex64::new(sys.wavelength() / (4.0 * std::f64::consts::PI * d), 0.0), bounce_point: None };
    synthesize_channel(&[p], geom, sys, 0.0)
}

/// Seeded snapshots at random positions of random synthetic scenes; every
/// returned snapshot has at least one path.
fn scene_snapshots(d: &Default32, n: usize, seed: u64) -> Vec<ChannelSnapshot> {
    let layout = SceneLayout::default();
    let scenes: Vec<SceneConfig> = (0..8).map(|k| synthesize_scene(k, seed, &layout).unwrap()).collect();
    let mut rng = stream_rng(seed, Stream::Test, 1);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let u = Vec3(std::array::from_fn(|a| rng.random_range(layout.spawn.min.0[a]..=layout.spawn.max.0[a])));
        let paths = trace_paths(scene, u, &d.sys).unwrap();
        if !paths.is_empty() {
            out.push(synthesize_channel(&paths, &d.geom, &d.sys, 0.0));
        }
    }
    out
}

fn c1() -> Verdict {
    let t = Instant::now();
    let d = CodebookSpec::default().dims();
    let mut failures = 0;
    for k in 1..=d.len() {
        match d.global_to_triplet(k).and_then(|t| d.triplet_to_global(t)) {
            Ok(back) if back == k => {}
            _ => failures += 1,
        }
    }
    let a = d.triplet_to_global(BeamTriplet::new(2, 1, 1)).unwrap();
    let b = d.triplet_to_global(BeamTriplet::new(20, 20, 10)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    verdict(
        failures == 0 && a == 201 && b == 4000 && secs < 1.0,
        format!("{} triplets, {failures} round-trip failures; (2,1,1)->{a}, (20,20,10)->{b}; {secs:.3} s", d.len()),
    )
}

fn c2() -> Verdict {
    let t = Instant::now();
    let sys = SystemConfig { antenna_rows: 16, antenna_cols: 16, ..SystemConfig::default() };
    let geom = antenna_positions(&sys).unwrap();
    let cb = build_codebook(&sys, &geom, &CodebookSpec::default()).unwrap();
    let mut rng = stream_rng(2, Stream::Test, 0);
    let (mut hits, mut unit) = (0, 0);
    let n = 200;
    for _ in 0..n {
        let gen = cb.global_to_triplet(rng.random_range(1..=cb.len())).unwrap();
        let snap = los(&geom, &sys, cb.sample_point(gen));
        let best = oracle_optimal(&cb, &snap).triplet;
        hits += (best == gen) as usize;
        unit += (avg_norm_gain(&[best], &[snap], &cb).unwrap().value == Some(1.0)) as usize;
    }
    let secs = t.elapsed().as_secs_f64();
    let rate = hits as f64 / n as f64;
    verdict(
        rate >= 0.99 && unit == n && secs < 60.0,
        format!("M=256: generating triplet recovered {hits}/{n} ({:.1}%), oracle normalized gain exactly 1 on {unit}/{n}; {secs:.1} s", 100.0 * rate),
    )
}

fn c3(d: &Default32) -> Verdict {
    let quiet = SystemConfig { noise_variance: 0.0, ..d.sys.clone() };
    let snaps = scene_snapshots(d, 500, 3);
    let matches = snaps
        .iter()
        .enumerate()
        .filter(|(k, s)| exhaustive_search(&SlotResponses::new(&d.cb, s), &d.cb, &quiet, *k as u64).triplet == oracle_optimal(&d.cb, s).triplet)
        .count();
    verdict(matches == snaps.len(), format!("noiseless exhaustive search equals the oracle on {matches}/{} scene snapshots", snaps.len()))
}

fn c4() -> Verdict {
    let system = SystemConfig { antenna_rows: 2, antenna_cols: 2, ..SystemConfig::default() };
    let codebook = CodebookSpec { n_theta: 4, n_phi: 4, n_r: 2, r_max: Some(40.0), ..CodebookSpec::default() };
    let dataset = DatasetConfig { n_episodes: 4, n_scenes: 4, split_scenes: [2, 1, 1], history_len: 3, future_len: 3, ..DatasetConfig::default() };
    let sensor = SensorConfig { d_in: 24, n_lidar_tokens: 6, ..SensorConfig::default() };
    let model = ModelConfig {
        d_model: 8,
        d_in: 24,
        n_heads: 2,
        l_h: 3,
        l_p: 3,
        n_lidar_tokens: 6,
        dims: codebook.dims(),
        origin: system.array_center,
        ..ModelConfig::default()
    };
    let mut cfg = ExperimentConfig { system, codebook, dataset, sensor, model, ..ExperimentConfig::default() };
    cfg.refinement.pool_top_k = 2;
    cfg.validate().unwrap();
    let geom = antenna_positions(&cfg.system).unwrap();
    let cb = build_codebook(&cfg.system, &geom, &cfg.codebook).unwrap();
    let ds = make_dataset(&cfg.dataset, &cfg.system, &cb, 4).unwrap();
    let mut worst = (0.0f64, String::new());
    let mut groups = 0;
    for (modality, seed) in [(Modality::Full, 1), (Modality::GpsOnly, 2)] {
        let ep = ds.split(Split::Train)[0];
        let sample = build_samples(&[ep], &ds, &cfg.sensor, modality, &cfg.loss).unwrap().remove(0);
        let m = Predictor::new(cfg.model.clone(), seed).unwrap();
        for g in gradient_check(&m, &sample, &cfg.loss, 1e-5).unwrap() {
            // Tensors the modality does not touch have zero gradient both ways.
            groups += 1;
            if g.rel_err > worst.0 {
                worst = (g.rel_err, g.name.clone());
            }
        }
    }
    verdict(
        worst.0 <= 1e-4,
        format!("{groups} parameter groups (full and GPS-only inputs), max relative error {:.2e} ({})", worst.0, worst.1),
    )
}

fn c5(d: &Default32) -> Verdict {
    let dims = d.cb.dims;
    let lc = LossConfig::default();
    let mut rng = stream_rng(5, Stream::Test, 0);
    let mut logits = |n: usize| softmax_rows(&Mat::from_vec(2, n, (0..2 * n).map(|_| rng.random_range(-3.0..3.0)).collect()));
    let p = [logits(dims.n_theta), logits(dims.n_phi), logits(dims.n_r)];
    let b = PredictionBundle { traj: Mat::zeros(2, 3), probs: p.clone(), conf: p.clone() };
    let self_kl = beam_kl_loss(&b, &p, lc.kl_epsilon);

    let uniform = [0, 1, 2].map(|k| Mat::filled(2, dims.size(k), 1.0 / dims.size(k) as f64));
    let onehot = [0, 1, 2].map(|k| {
        let mut m = Mat::zeros(2, dims.size(k));
        *m.at_mut(0, 3) = 1.0;
        *m.at_mut(1, 0) = 1.0;
        m
    });
    let ub = PredictionBundle { traj: Mat::zeros(2, 3), probs: uniform.clone(), conf: uniform };
    let want = (0..3).map(|k| (dims.size(k) as f64).ln()).sum::<f64>() / 3.0;
    let onehot_kl = beam_kl_loss(&ub, &onehot, lc.kl_epsilon);

    let edge = soft_target(1, 20, &lc).unwrap();
    let edge_ok = edge[0] == 0.75 && edge[1] == 0.125 && edge[2] == 0.125 && edge[3..].iter().all(|v| *v == 0.0);

    let snaps = scene_snapshots(d, 20, 5);
    let conf_ok = snaps.iter().all(|s| {
        let gt = oracle_optimal(&d.cb, s).triplet;
        confidence_target(gt, gt, &d.cb, s).unwrap().s == [1.0; 3]
    });
    verdict(
        self_kl.abs() <= 1e-12 && (onehot_kl - want).abs() <= 1e-10 && edge_ok && conf_ok,
        format!(
            "KL(p,p)={self_kl:.1e}; one-hot vs uniform {onehot_kl:.12} vs mean log n {want:.12}; soft_target(1,20) head {:?}; pred=GT targets all 1: {conf_ok}",
            &edge[..3]
        ),
    )
}

fn model_row<'a>(out: &'a ExperimentOutput, m: Method) -> &'a MetricsRow {
    out.report.rows.iter().find(|r| r.method == m.label(out.report.budget) && r.scenario == Scenario::Overall).expect("method evaluated")
}

fn c6(d: &Default32, runs: &[&ExperimentOutput]) -> Verdict {
    let mut identity = true;
    let mut accepted_free = true;
    let mut seen = Vec::new();
    for out in runs {
        for r in out.report.rows.iter().filter(|r| r.trigger_rate.is_some()) {
            let pilots = if r.method == Method::Model(RefinementMode::PilotSweep).label(out.report.budget) { 125 } else { 0 };
            identity &= r.total_pilots == r.triggered * pilots && r.avg_pilots == r.total_pilots as f64 / r.slots as f64;
            seen.push(format!("{}:{}", r.method, r.scenario.label()));
        }
        accepted_free &= out.outcomes.iter().filter(|o| o.mode.starts_with("model_") && !o.triggered).all(|o| o.pilots == 0);
    }

    // 1000 synthetic slots, 716 of them below the gate.
    let dims = d.cb.dims;
    let snap = los(&d.geom, &d.sys, Vec3::new(20.0, 3.0, 12.0));
    let resp = SlotResponses::new(&d.cb, &snap);
    let rc = RefinementConfig::default();
    let outcomes: Vec<_> = (0..1000)
        .map(|k| {
            let s = if k < 716 { 0.5 } else { 0.95 };
            let probs = [0, 1, 2].map(|c| softmax_rows(&Mat::from_vec(1, dims.size(c), (0..dims.size(c)).map(|i| -(i as f64)).collect())));
            let conf = [0, 1, 2].map(|c| Mat::filled(1, dims.size(c), s));
            let b = PredictionBundle { traj: Mat::zeros(1, 3), probs, conf };
            refine_slot(&b, 0, &resp, &d.cb, &d.sys, &rc, k).unwrap()
        })
        .collect();
    let o = account_overhead(&outcomes).unwrap();
    let forced = o.trigger_rate == 0.716 && o.avg_pilots == 89.5 && (o.avg_pilots - 90.0).abs() <= 0.6;
    verdict(
        identity && accepted_free && forced,
        format!(
            "pilots = triggered x 125 on {} evaluation rows: {identity}; accepted slots free: {accepted_free}; forced {:.1}% trigger -> {} pilots/slot",
            seen.len(),
            100.0 * o.trigger_rate,
            o.avg_pilots
        ),
    )
}

fn c7(noiseless: &ExperimentOutput, d: &Default32) -> Verdict {
    let per_episode = |label: &str| -> std::collections::BTreeMap<u32, Vec<f64>> {
        let mut m = std::collections::BTreeMap::<u32, Vec<f64>>::new();
        for o in noiseless.outcomes.iter().filter(|o| o.mode == label) {
            m.entry(o.episode).or_default().push(o.gain);
        }
        m
    };
    let ub = per_episode("upper_bound");
    let none = per_episode("model_none");
    let sweep = per_episode("model_sweep");
    let ng = |g: &[f64], u: &[f64]| g.iter().zip(u).map(|(a, b)| if *b > 0.0 { a / b } else { 1.0 }).sum::<f64>() / g.len() as f64;
    let mut dominated = 0;
    for (ep, u) in &ub {
        if ng(&sweep[ep], u) >= ng(&none[ep], u) {
            dominated += 1;
        }
    }

    let dims: CodebookDims = d.cb.dims;
    let mut rng = stream_rng(7, Stream::Test, 0);
    let mut agree = 0;
    let n = 10_000;
    for _ in 0..n {
        let probs = [0, 1, 2].map(|c| {
            let sharp = rng.random_range(0.1..4.0);
            softmax_rows(&Mat::from_vec(1, dims.size(c), (0..dims.size(c)).map(|_| sharp * rng.random_range(-2.0..2.0)).collect()))
        });
        let conf = probs.clone();
        let b = PredictionBundle { traj: Mat::zeros(1, 3), probs, conf };
        let pool = candidate_pool(&b, 0, 5).unwrap();
        let mut best = (f64::NEG_INFINITY, usize::MAX, pool[0]);
        for t in &pool {
            let p = b.probs[0].at(0, t.i - 1) * b.probs[1].at(0, t.j - 1) * b.probs[2].at(0, t.q - 1);
            let g = dims.triplet_to_global(*t).unwrap();
            if p > best.0 || (p == best.0 && g < best.1) {
                best = (p, g, *t);
            }
        }
        agree += (refine_joint_prob(&pool, &b, 0).unwrap() == best.2) as usize;
    }
    verdict(
        dominated == ub.len() && agree == n,
        format!("noiseless sweep >= no refinement on {dominated}/{} test episodes; joint-prob choice equals brute force on {agree}/{n} bundles", ub.len()),
    )
}

fn c8(d: &Default32) -> Verdict {
    let snaps = scene_snapshots(d, 1000, 8);
    let mut worst = 0;
    for (k, s) in snaps.iter().enumerate() {
        let r = SlotResponses::new(&d.cb, s);
        let h = hierarchical_search(&r, &d.cb, 90, &d.sys, k as u64).unwrap().pilots_used;
        let t = two_stage_search(&r, &d.cb, 90, &d.sys, k as u64).unwrap().pilots_used;
        worst = worst.max(h).max(t);
    }
    let quiet = SystemConfig { noise_variance: 0.0, ..d.sys.clone() };
    let mut rng = stream_rng(8, Stream::Test, 2);
    let layout = SceneLayout::default();
    let n = 200;
    let (mut hits, mut noisy_hits) = (0, 0);
    for k in 0..n {
        let u = Vec3(std::array::from_fn(|a| rng.random_range(layout.spawn.min.0[a]..=layout.spawn.max.0[a])));
        let snap = los(&d.geom, &d.sys, u);
        let r = SlotResponses::new(&d.cb, &snap);
        let best = oracle_optimal(&d.cb, &snap).triplet;
        hits += (hierarchical_search(&r, &d.cb, 4000, &quiet, k).unwrap().triplet == best) as usize;
        noisy_hits += (hierarchical_search(&r, &d.cb, 4000, &d.sys, k).unwrap().triplet == best) as usize;
    }
    let rate = hits as f64 / n as f64;
    verdict(
        worst <= 90 && rate >= 0.9,
        format!(
            "max pilots over {} snapshots x 2 searches at B=90: {worst}; B=4000 hierarchical hits the oracle on {hits}/{n} LoS snapshots ({:.1}%) with noiseless pilots, {noisy_hits}/{n} with default pilot noise",
            snaps.len(),
            100.0 * rate
        ),
    )
}

struct LearningRun {
    full: ExperimentOutput,
    gps: ExperimentOutput,
    noiseless: ExperimentOutput,
    secs: f64,
    train_episodes: usize,
}

fn learning_run(d: &Default32) -> LearningRun {
    let t = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.eval.snr_db.clear();
    let ds = make_dataset(&cfg.dataset, &cfg.system, &d.cb, cfg.seed).unwrap();
    let train_episodes = ds.split(Split::Train).len();
    let methods = vec![Method::UpperBound, Method::Model(RefinementMode::None), Method::Model(RefinementMode::PilotSweep)];
    let evaluate = |cfg: &ExperimentConfig| {
        let (model, _) = train_model(&ds, cfg, |log| eprintln!("  [{:?}] epoch {:>2}  val {:.4}", cfg.modality, log.epoch, log.val.total)).unwrap();
        let run = |cfg: &ExperimentConfig| {
            run_experiment(&ExperimentInputs {
                dataset: &ds,
                codebook: &d.cb,
                model: Some((&model, String::new(), d.cb.key().to_string())),
                config: cfg,
                methods: methods.clone(),
            })
            .unwrap()
        };
        let out = run(cfg);
        let quiet = ExperimentConfig { eval: nfbeam::evalharness::EvalConfig { noiseless_pilots: true, ..cfg.eval.clone() }, ..cfg.clone() };
        (out, run(&quiet))
    };
    let (full, noiseless) = evaluate(&cfg);
    cfg.modality = Modality::GpsOnly;
    let (gps, _) = evaluate(&cfg);
    LearningRun { full, gps, noiseless, secs: t.elapsed().as_secs_f64(), train_episodes }
}

fn c9(run: &LearningRun) -> Verdict {
    let none = model_row(&run.full, Method::Model(RefinementMode::None));
    let sweep = model_row(&run.full, Method::Model(RefinementMode::PilotSweep));
    let gps = model_row(&run.gps, Method::Model(RefinementMode::None));
    let top5 = none.top5.unwrap();
    let (mae_full, mae_gps) = (none.mae.unwrap(), gps.mae.unwrap());
    let a = none.top1_joint >= 10.0 / 4000.0;
    let b = top5.iter().all(|v| *v >= 0.6);
    let c = sweep.top1_joint >= 1.5 * none.top1_joint;
    let dd = mae_full <= mae_gps;
    let time = run.secs <= 1800.0;
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    verdict(
        a && b && c && dd && time,
        format!(
            "{} train episodes, test scene held out; (a) top-1 joint {:.4} vs 0.0025 [{}]; (b) top-5 per dim {:.3}/{:.3}/{:.3} [{}]; \
             (c) sweep top-1 joint {:.4} = {:.2}x [{}]; (d) MAE full {:.3} m vs GPS-only {:.3} m [{}]; {:.0} s [{}]",
            run.train_episodes,
            none.top1_joint,
            mark(a),
            top5[0],
            top5[1],
            top5[2],
            mark(b),
            sweep.top1_joint,
            sweep.top1_joint / none.top1_joint.max(f64::MIN_POSITIVE),
            mark(c),
            mae_full,
            mae_gps,
            mark(dd),
            run.secs,
            mark(time)
        ),
    )
}

fn c10() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), &common::tiny_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    common::pipeline(&cfg, &a);
    common::pipeline(&cfg, &b);
    let files = ["dataset.bin", "loss_curve.csv", "metrics.csv"];
    let same: Vec<&str> = files.iter().copied().filter(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap()).collect();
    verdict(same.len() == files.len(), format!("byte-identical across two gen-data/train/eval runs: {}", same.join(", ")))
}

fn main() -> ExitCode {
    // Positional arguments are test-name filters; option values such as the
    // thread count of `--test-threads N` are numeric and ignored.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-') && a.parse::<u64>().is_err()).collect();
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    let started = Instant::now();
    let d = default32();
    let mut failed = Vec::new();
    let mut broken = false;
    let mut print = |n: usize, name: &str, check: &dyn Fn() -> Verdict| {
        let v = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)).unwrap_or_else(|e| {
            broken = true;
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        println!("criterion {n:>2} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(n);
        }
    };
    print(1, "index bijection", &c1);
    print(2, "oracle correctness", &c2);
    print(3, "noiseless equivalence", &|| c3(&d));
    print(4, "gradient fidelity", &c4);
    print(5, "loss identities", &|| c5(&d));
    let run = learning_run(&d);
    print(6, "refinement accounting", &|| c6(&d, &[&run.full, &run.gps, &run.noiseless]));
    print(7, "refinement dominance", &|| c7(&run.noiseless, &d));
    print(8, "budget caps", &|| c8(&d));
    print(9, "learning sanity", &|| c9(&run));
    print(10, "determinism", &c10);
    println!("acceptance: {} of 10 criteria passed in {:.0} s", 10 - failed.len(), started.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
    }
    if broken {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
