use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nfbeam::codebook::{load_or_build, PolarCodebook};
use nfbeam::evalharness::{
    default_methods, load_dataset, make_dataset, render_report, run_experiment, save_dataset, train_model, write_metrics_csv,
    write_outcomes_jsonl, write_snr_csv, Dataset, ExperimentConfig, ExperimentInputs, MetricsReport, Method,
};
use nfbeam::inference::RefinementMode;
use nfbeam::predictor::checkpoint::{load_checkpoint, save_checkpoint};
use nfbeam::sysgeo::antenna_positions;
use nfbeam::training::save_loss_curve;
use nfbeam::{Error, Result};

/// Near-field XL-MIMO beam management: data generation, training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "nfbeam", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Generate the synthetic episode dataset (dataset.bin, dataset.meta.json).
    GenData(Common),
    /// Build or reuse the cached polar codebook.
    BuildCodebook(Common),
    /// Train the predictor on the dataset's train split (model.ckpt, loss_curve.csv).
    Train(Common),
    /// Evaluate the model and the baselines on the test split.
    Eval(Common),
    /// Evaluate the pilot-sweep baselines only; no checkpoint needed.
    SweepBaselines(Common),
    /// Print the stored evaluation report.
    Report(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (JSON); defaults apply to absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Working directory for every artifact.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Pilot budget of the hierarchical and two-stage baselines.
    #[arg(long)]
    budget: Option<u64>,
    /// Refinement mode to evaluate; all three when absent.
    #[arg(long, value_parser = ["none", "prob", "sweep"])]
    refine: Option<String>,
    /// Reference SNRs (dB) of the rate sweep, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr_db: Option<Vec<f64>>,
    /// Rebuild cached artifacts.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json(&read_text(p)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.budget {
            cfg.eval.budget = b;
        }
        if let Some(r) = &self.refine {
            cfg.eval.refine_modes = vec![RefinementMode::parse(r)?];
        }
        if let Some(s) = &self.snr_db {
            cfg.eval.snr_db = s.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_text(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| Error::MissingInput(format!("{}: {e}", p.display())))
}

fn codebook(c: &Common, cfg: &ExperimentConfig) -> Result<(PolarCodebook, PathBuf, bool)> {
    let geom = antenna_positions(&cfg.system)?;
    load_or_build(&c.out, &cfg.system, &geom, &cfg.codebook, c.force)
}

fn dataset(c: &Common, cb: &PolarCodebook) -> Result<Dataset> {
    let ds = load_dataset(&c.out)?;
    if ds.codebook_key != cb.key() {
        return Err(Error::HashMismatch("dataset was labeled with a different codebook; rerun gen-data".into()));
    }
    Ok(ds)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_report(out: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    let mut w = create(&out.join(format!("{stem}.csv")))?;
    write_metrics_csv(&mut w, &report.rows)?;
    w.flush()?;
    let mut w = create(&out.join(format!("{stem}_snr.csv")))?;
    write_snr_csv(&mut w, &report.snr_sweep)?;
    w.flush()?;
    std::fs::write(out.join(format!("{stem}.json")), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.verb {
        Verb::BuildCodebook(c) => {
            let cfg = c.config()?;
            let (cb, path, rebuilt) = codebook(&c, &cfg)?;
            Ok(json!({ "codebook": path, "key": cb.key(), "rebuilt": rebuilt, "codewords": cb.len() }))
        }
        Verb::GenData(c) => {
            let cfg = c.config()?;
            let (cb, _, _) = codebook(&c, &cfg)?;
            let ds = make_dataset(&cfg.dataset, &cfg.system, &cb, cfg.seed)?;
            let meta = save_dataset(&c.out, &ds)?;
            Ok(serde_json::to_value(meta)?)
        }
        Verb::Train(c) => {
            let cfg = c.config()?;
            let (cb, _, _) = codebook(&c, &cfg)?;
            let ds = dataset(&c, &cb)?;
            let (model, report) = train_model(&ds, &cfg, |log| {
                eprintln!(
                    "epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}",
                    log.epoch, log.train.total, log.val.total, log.learning_rate
                )
            })?;
            save_loss_curve(&c.out.join("loss_curve.csv"), &report.curve)?;
            let hash = save_checkpoint(&c.out.join("model.ckpt"), &model, cb.key())?;
            Ok(json!({ "checkpoint": c.out.join("model.ckpt"), "sha256": hash, "best_epoch": report.best_epoch, "best_val": report.best_val }))
        }
        Verb::Eval(c) => {
            let cfg = c.config()?;
            let (cb, _, _) = codebook(&c, &cfg)?;
            let ds = dataset(&c, &cb)?;
            let ckpt = load_checkpoint(&c.out.join("model.ckpt"))?;
            let cfg = ExperimentConfig { model: ckpt.model.cfg.clone(), ..cfg };
            cfg.validate()?;
            let out = run_experiment(&ExperimentInputs {
                dataset: &ds,
                codebook: &cb,
                model: Some((&ckpt.model, ckpt.hash.clone(), ckpt.codebook_key.clone())),
                config: &cfg,
                methods: default_methods(&cfg.eval.refine_modes),
            })?;
            write_report(&c.out, "metrics", &out.report)?;
            let mut w = create(&c.out.join("outcomes.jsonl"))?;
            write_outcomes_jsonl(&mut w, &out.outcomes)?;
            w.flush()?;
            Ok(json!({ "metrics": c.out.join("metrics.csv"), "outcomes": out.outcomes.len(), "checkpoint": ckpt.hash }))
        }
        Verb::SweepBaselines(c) => {
            let cfg = c.config()?;
            let (cb, _, _) = codebook(&c, &cfg)?;
            let ds = dataset(&c, &cb)?;
            let mut methods = vec![Method::UpperBound];
            methods.extend(Method::BASELINES);
            let out = run_experiment(&ExperimentInputs { dataset: &ds, codebook: &cb, model: None, config: &cfg, methods })?;
            write_report(&c.out, "baselines", &out.report)?;
            Ok(json!({ "metrics": c.out.join("baselines.csv"), "budget": cfg.eval.budget }))
        }
        Verb::Report(c) => {
            let mut text = String::new();
            for stem in ["metrics", "baselines"] {
                let p = c.out.join(format!("{stem}.json"));
                if p.exists() {
                    let report: MetricsReport = serde_json::from_str(&read_text(&p)?)?;
                    text.push_str(&render_report(&report));
                    text.push('\n');
                }
            }
            if text.is_empty() {
                return Err(Error::MissingInput(format!("no metrics.json or baselines.json in {}", c.out.display())));
            }
            std::fs::write(c.out.join("report.txt"), &text)?;
            print!("{text}");
            Ok(json!({ "report": c.out.join("report.txt") }))
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim().to_string()),
    };
    let report = matches!(cli.verb, Verb::Report(_));
    match run(cli) {
        Ok(summary) => {
            if !report {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
