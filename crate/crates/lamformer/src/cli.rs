//! `lamformer` command line: gen, train, eval, ablate, gradcheck, bench, heatmap.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lamformer_core::bench::{fit_exponent, Variant};
use lamformer_core::checks;
use lamformer_core::gradcheck::FD_STEP;
use lamformer_core::heatmap::heatmap;
use lamformer_core::train::evaluate;

use crate::bench::{run_scaling, write_csv, ScalingSpec};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::run::{self, TrainOptions};
use crate::{checkpoint, dataset, ltf, pgm};

#[derive(Debug, Parser)]
#[command(
    name = "lamformer",
    version,
    about = "LamFormer segmentation: synthetic data, training, evaluation and benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream (overrides the config file).
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and eval sets as LTF1 files.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes loss.csv, checkpoint.lfc, config.cfg and report.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory written by `gen` (uses its train/ and eval/); generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Record epoch wall time in loss.csv (makes the log run-dependent).
        #[arg(long)]
        timing: bool,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the per-class report CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        include_background: bool,
    },
    /// Train every nonempty combination of the given modules and compare.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "lam,phfa,rt")]
        modules: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every operation and block.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        samples: usize,
        #[arg(long, default_value_t = FD_STEP)]
        step: f64,
        #[arg(long, default_value_t = 1e-2)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention kernel scaling benchmark.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "SA,RSA,LA")]
        variants: Vec<Variant>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "256,512,1024,2048,4096,8192"
        )]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        /// Query/key width; defaults to half the channels.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 4)]
        ratio: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention heatmap of one layer as a binary PGM.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// LTF1 image, `C × H × W` or `H × W`.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = common.resolve()?;
            let (train, eval) = run::synth_data(&cfg)?;
            dataset::save(&out.join("train"), &train, &cfg.train_spec())?;
            dataset::save(&out.join("eval"), &eval, &cfg.eval_spec())?;
            println!(
                "wrote {} train and {} eval samples to {}",
                train.len(),
                eval.len(),
                out.display()
            );
        }
        Command::Train {
            common,
            out,
            data,
            timing,
        } => {
            let cfg = common.resolve()?;
            let (train, eval) = match data {
                Some(d) => (
                    dataset::load(&d.join("train"))?.0,
                    dataset::load(&d.join("eval"))?.0,
                ),
                None => run::synth_data(&cfg)?,
            };
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                timing,
                verbose: true,
            };
            let outcome = run::train(&cfg, &train, &opts)?;
            let report = evaluate(&outcome.model, &eval, false)?;
            run::write_report(&out.join(run::REPORT_CSV), &report)?;
            println!(
                "mean DSC {:.4} over {} eval samples; artifacts in {}",
                report.mean_dsc,
                eval.len(),
                out.display()
            );
        }
        Command::Eval {
            checkpoint: ck,
            data,
            out,
            include_background,
        } => {
            let model = checkpoint::load(&ck)?.model;
            let (samples, classes) = dataset::load(&data)?;
            if classes != model.config().num_classes {
                return Err(Error::Incompatible(format!(
                    "dataset has {classes} classes, model predicts {}",
                    model.config().num_classes
                )));
            }
            let report = evaluate(&model, &samples, include_background)?;
            for c in &report.per_class {
                println!(
                    "class {}  DSC {:.4}  HD95 {}",
                    c.class_id,
                    c.dsc,
                    c.hd95.map_or("NA".into(), |h| format!("{h:.3}"))
                );
            }
            println!("mean DSC {:.4}", report.mean_dsc);
            if let Some(p) = out {
                run::write_report(&p, &report)?;
            }
        }
        Command::Ablate {
            common,
            modules,
            out,
        } => {
            let cfg = common.resolve()?;
            let names: Vec<&str> = modules.iter().map(|s| s.trim()).collect();
            let subsets = run::module_subsets(&names)?;
            create_dir(&out)?;
            let rows = run::ablate(&cfg, &subsets, true)?;
            run::write_ablation(&out.join("ablation.csv"), &rows)?;
            for r in &rows {
                println!("{:<12} {:.4}", r.label, r.report.mean_dsc);
            }
        }
        Command::Gradcheck {
            seed,
            samples,
            step,
            tolerance,
            out,
        } => {
            let mut cases = checks::cases(seed)?;
            let results = checks::run(&mut cases, samples, seed, step)?;
            let mut failed = Vec::new();
            for r in &results {
                let ok = r.report.passes(tolerance) && r.report.checked >= checks::MIN_CHECKED;
                println!(
                    "{:<28} {:>4} {:>10.3e} {}",
                    r.name,
                    r.report.checked,
                    r.report.max_rel_error,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(r.name.clone());
                }
            }
            if let Some(p) = out {
                let mut w = csv::Writer::from_path(&p)?;
                w.write_record(["case", "checked", "skipped", "max_rel_error"])?;
                for r in &results {
                    w.write_record([
                        r.name.clone(),
                        r.report.checked.to_string(),
                        r.report.skipped.to_string(),
                        r.report.max_rel_error.to_string(),
                    ])?;
                }
                w.flush().map_err(|e| Error::io(&p, e))?;
            }
            if !failed.is_empty() {
                return Err(Error::Core(lamformer_core::Error::Training(format!(
                    "gradient check failed: {}",
                    failed.join(", ")
                ))));
            }
        }
        Command::Bench {
            variants,
            lengths,
            channels,
            dim,
            ratio,
            repeats,
            seed,
            out,
        } => {
            let spec = ScalingSpec {
                variants,
                lengths,
                channels,
                dim: dim.unwrap_or((channels / 2).max(1)),
                ratio,
                repeats,
                seed,
            };
            let records = run_scaling(&spec)?;
            write_csv(&out, &records)?;
            for &v in &spec.variants {
                let pts: Vec<(usize, f64)> = records
                    .iter()
                    .filter(|r| r.variant == v)
                    .map(|r| (r.n, r.wall_ns as f64))
                    .collect();
                match fit_exponent(&pts) {
                    Ok(f) => println!(
                        "{v:<4} exponent {:.3} (rms residual {:.3})",
                        f.exponent, f.residual
                    ),
                    Err(e) => println!("{v:<4} no fit: {e}"),
                }
            }
        }
        Command::Heatmap {
            checkpoint: ck,
            image,
            layer,
            out,
        } => {
            let model = checkpoint::load(&ck)?.model;
            let img = ltf::load(&image)?;
            let img = if img.rank() == 2 {
                let s = img.shape().to_vec();
                img.reshape(&[1, s[0], s[1]])?
            } else {
                img
            };
            let map = heatmap(&model, &img, &layer)?;
            pgm::save(&out, map.width, map.height, &map.to_gray())?;
            println!(
                "{} heatmap {}x{} written to {}",
                map.layer,
                map.width,
                map.height,
                out.display()
            );
        }
    }
    Ok(())
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
