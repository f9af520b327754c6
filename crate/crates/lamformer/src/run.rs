//! Training, evaluation and ablation drivers with on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lamformer_core::data::{generate, Sample};
use lamformer_core::metrics::MetricReport;
use lamformer_core::network::{Model, Toggles};
use lamformer_core::train::{evaluate, Trainer};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const LOSS_CSV: &str = "loss.csv";
pub const CHECKPOINT: &str = "checkpoint.lfc";
pub const CONFIG: &str = "config.cfg";
pub const REPORT_CSV: &str = "report.csv";

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Epoch wall time; 0 unless timing was requested, so logs stay reproducible.
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `loss.csv`, `checkpoint.lfc` and `config.cfg`; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub timing: bool,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRow>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Train a fresh model on `data` for `cfg.train.epochs` epochs. With an
/// output directory the log is appended and a checkpoint saved after every
/// epoch; if the loss diverges the last good checkpoint is left in place.
pub fn train(cfg: &RunConfig, data: &[Sample], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::build(&cfg.net_config())?;
    let mut trainer = Trainer::new(&model, cfg.train_config())?;
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join(CONFIG);
            fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_path(dir.join(LOSS_CSV))?;
            w.write_record(["epoch", "step", "loss", "lr", "wall_ms"])?;
            w.flush().map_err(|e| Error::io(dir.join(LOSS_CSV), e))?;
            Some(w)
        }
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.train.epochs);
    for epoch in 1..=cfg.train.epochs {
        let start = Instant::now();
        let loss = trainer
            .run_epoch(&mut model, data)
            .map_err(|e| match (&opts.out_dir, e) {
                (Some(dir), lamformer_core::Error::Training(m)) => {
                    Error::Core(lamformer_core::Error::Training(format!(
                        "{m} in epoch {epoch}; last good checkpoint kept at {}",
                        dir.join(CHECKPOINT).display()
                    )))
                }
                (_, e) => Error::Core(e),
            })?;
        let wall_ms = if opts.timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        let row = EpochRow {
            epoch,
            step: trainer.state.step,
            loss,
            lr: trainer.state.lr,
            wall_ms,
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>3}  step {:>6}  loss {:.6}",
                row.step, row.loss
            );
        }
        if let (Some(w), Some(dir)) = (csv.as_mut(), &opts.out_dir) {
            w.write_record([
                row.epoch.to_string(),
                row.step.to_string(),
                row.loss.to_string(),
                row.lr.to_string(),
                row.wall_ms.to_string(),
            ])?;
            w.flush().map_err(|e| Error::io(dir.join(LOSS_CSV), e))?;
            checkpoint::save(&dir.join(CHECKPOINT), &model, epoch)?;
        }
        log.push(row);
    }
    Ok(TrainOutcome { model, log })
}

/// Training and evaluation sets generated from the config.
pub fn synth_data(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    Ok((
        generate(&cfg.train_spec(), cfg.train_samples)?,
        generate(&cfg.eval_spec(), cfg.eval_samples)?,
    ))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

/// Per-class rows followed by a `mean` row; undefined values are `NA`.
pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "class",
        "dsc",
        "hd95",
        "recall",
        "precision",
        "hd95_undefined",
    ])?;
    for c in &report.per_class {
        w.write_record([
            c.class_id.to_string(),
            c.dsc.to_string(),
            opt(c.hd95),
            opt(c.recall),
            opt(c.precision),
            c.hd95_undefined.to_string(),
        ])?;
    }
    w.write_record([
        "mean".into(),
        report.mean_dsc.to_string(),
        opt(report.mean_hd95),
        opt(report.mean_recall),
        opt(report.mean_precision),
        report.hd95_undefined_classes.to_string(),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Result of one ablation configuration.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub toggles: Toggles,
    pub frn_depth: usize,
    pub params: usize,
    pub report: MetricReport,
}

/// Train and evaluate `cfg` once on the given data.
pub fn train_eval(
    cfg: &RunConfig,
    train_set: &[Sample],
    eval_set: &[Sample],
) -> Result<AblationRow> {
    let out = train(cfg, train_set, &TrainOptions::default())?;
    let report = evaluate(&out.model, eval_set, false)?;
    Ok(AblationRow {
        label: cfg.net.toggles.label(),
        toggles: cfg.net.toggles,
        frn_depth: cfg.net.frn_depth,
        params: out.model.num_params(),
        report,
    })
}

/// Nonempty subsets of `modules` (the rest switched off), full set last.
pub fn module_subsets(modules: &[&str]) -> Result<Vec<Toggles>> {
    for m in modules {
        if !["lam", "phfa", "rt"].contains(m) {
            return Err(Error::Config(format!(
                "unknown module {m:?}; expected lam, phfa or rt"
            )));
        }
    }
    if modules.is_empty() {
        return Err(Error::Config("no modules given".into()));
    }
    let mut seen = Vec::new();
    for t in Toggles::nonempty_subsets() {
        let t = Toggles {
            lam: t.lam && modules.contains(&"lam"),
            phfa: t.phfa && modules.contains(&"phfa"),
            rt: t.rt && modules.contains(&"rt"),
        };
        if t != Toggles::NONE && !seen.contains(&t) {
            seen.push(t);
        }
    }
    Ok(seen)
}

pub fn ablate(cfg: &RunConfig, toggles: &[Toggles], verbose: bool) -> Result<Vec<AblationRow>> {
    let (train_set, eval_set) = synth_data(cfg)?;
    toggles
        .iter()
        .map(|&t| {
            let row = train_eval(&cfg.with_toggles(t), &train_set, &eval_set)?;
            if verbose {
                eprintln!(
                    "{:<12} params {:>8}  mean DSC {:.4}",
                    row.label, row.params, row.report.mean_dsc
                );
            }
            Ok(row)
        })
        .collect()
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let classes: Vec<u8> = rows
        .first()
        .map(|r| r.report.per_class.iter().map(|c| c.class_id).collect())
        .unwrap_or_default();
    let mut header = vec![
        "modules".to_string(),
        "frn_depth".into(),
        "params".into(),
        "mean_dsc".into(),
        "mean_hd95".into(),
    ];
    header.extend(classes.iter().map(|c| format!("dsc_class{c}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.label.clone(),
            r.frn_depth.to_string(),
            r.params.to_string(),
            r.report.mean_dsc.to_string(),
            opt(r.report.mean_hd95),
        ];
        rec.extend(r.report.per_class.iter().map(|c| c.dsc.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
