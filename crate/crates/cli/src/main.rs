//! Command-line harness: dataset generation, training, evaluation, the
//! unsupervised pseudo-label pipeline, parameter sweeps, and gradient checks.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pc2m::config::RunConfig;
use pc2m::error::Error;
use pc2m::io::{load_dataset, save_dataset, write_pseudo_labels, CsvWriter};
use pc2m::synth::{gen_dataset, ground_truth_area};
use pc2m::train::{
    evaluate, load_checkpoint, pseudo_label_pipeline, save_checkpoint, split_indices, sweep,
    train, SweepParam, TrainRun, TrainableParams,
};

#[derive(Parser)]
#[command(name = "pc2m", about = "Area-balanced transport pseudo-label trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Plain-text key=value config file (strict schema).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides applied after the file, as key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset files (images.bin, masks.bin, index.txt).
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write checkpoint.pc2m, epochs.csv, area.csv, steps.csv.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (generated on the fly when omitted).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split and write report.csv.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate: heldout, train, or all.
        #[arg(long, default_value = "heldout")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the spectral pipeline and write the pseudo-label text file.
    PseudoLabels {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per swept value and write a comparative CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Swept parameter: gamma or beta.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients of the full objective on a small batch.
    GradCheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Max relative error accepted.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                Error::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.resolve()?;
            let dataset = gen_dataset(&cfg.dataset)?;
            save_dataset(&out, &dataset)?;
            let area = ground_truth_area(&dataset, cfg.dataset.class_count)?;
            println!(
                "wrote {} images to {} (ground-truth areas {:?})",
                dataset.len(),
                out.display(),
                area.weights().to_vec()
            );
            Ok(())
        }
        Command::Train { config, data, out } => {
            let cfg = config.resolve()?;
            let dataset = load_or_generate(&cfg, data.as_deref())?;
            let run = train(&cfg, &dataset)?;
            std::fs::create_dir_all(&out)?;
            write_run_outputs(&out, &cfg, &run)?;
            let last = run.records.last().expect("at least one epoch");
            println!(
                "trained {} epochs: mIoU {:.4}, H(area) {:.4}, D_JS(target) {:.5}",
                run.records.len(),
                last.miou,
                last.area_entropy,
                last.djs_star
            );
            println!("outputs in {}", out.display());
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            split,
            out,
        } => {
            let cfg = config.resolve()?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let (train_idx, heldout_idx) =
                split_indices(dataset.len(), cfg.heldout_fraction, cfg.seed);
            let indices: Vec<usize> = match split.as_str() {
                "heldout" => heldout_idx,
                "train" => train_idx,
                "all" => (0..dataset.len()).collect(),
                other => {
                    return Err(Error::Config(format!(
                        "split must be heldout|train|all, got '{other}'"
                    )))
                }
            };
            let class_count = cfg.dataset.class_count;
            let report = evaluate(
                &ckpt.params,
                ckpt.temperature,
                &dataset,
                &indices,
                class_count,
                None,
            )?;
            write_report(&out, &report)?;
            println!("mIoU {:.4} over {} images -> {}", report.miou, indices.len(), out.display());
            Ok(())
        }
        Command::PseudoLabels { config, data, out } => {
            let cfg = config.resolve()?;
            let dataset = load_or_generate(&cfg, data.as_deref())?;
            let sets = pseudo_label_pipeline(&cfg, &dataset)?;
            write_pseudo_labels(&out, &sets)?;
            println!("wrote pseudo-labels for {} images to {}", sets.len(), out.display());
            Ok(())
        }
        Command::Sweep {
            config,
            param,
            values,
            data,
            out,
        } => {
            let cfg = config.resolve()?;
            let param: SweepParam = param.parse()?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|e| Error::Config(format!("bad sweep value '{v}': {e}")))
                })
                .collect::<Result<_, _>>()?;
            let dataset = load_or_generate(&cfg, data.as_deref())?;
            let rows = sweep(&cfg, param, &values, &dataset)?;
            let mut csv = CsvWriter::create(
                &out,
                &["value", "seed", "miou", "area_entropy", "f1_micro", "f1_macro"],
            )?;
            for r in &rows {
                csv.row(&[
                    r.value.to_string(),
                    r.seed.to_string(),
                    r.miou.to_string(),
                    r.area_entropy.to_string(),
                    r.label_f1_micro.to_string(),
                    r.label_f1_macro.to_string(),
                ])?;
            }
            csv.finish()?;
            for r in &rows {
                println!(
                    "value {:>6}: mIoU {:.4}, H(area) {:.4}, F1 micro/macro {:.3}/{:.3}",
                    r.value, r.miou, r.area_entropy, r.label_f1_micro, r.label_f1_macro
                );
            }
            println!("sweep table -> {}", out.display());
            Ok(())
        }
        Command::GradCheck {
            config,
            step,
            tolerance,
        } => {
            let mut cfg = config.resolve()?;
            // Small instance so the finite-difference pass stays quick.
            cfg.dataset.image_count = cfg.dataset.image_count.min(8);
            cfg.encoder.embed = cfg.encoder.embed.min(8);
            cfg.encoder.hidden = cfg.encoder.hidden.min(8);
            let dataset = gen_dataset(&cfg.dataset)?;
            let params = TrainableParams::init(&cfg)?;
            let batch = pc2m::train::freeze_batch(&cfg, &dataset, &params, 2)?;
            let (_, analytic) = pc2m::train::pc2m_value_and_grads(&params, &batch)?;
            let flat = params.flatten();
            let layout = params.layout();
            let report = pc2m::loss::grad_check(
                |p: &[f64]| {
                    let mut pp = params.clone();
                    pp.assign_from_flat(p);
                    pc2m::train::pc2m_value(&pp, &batch).unwrap().total
                },
                &flat,
                &analytic,
                &layout,
                step,
                tolerance,
            );
            println!("{report}");
            if report.pass {
                Ok(())
            } else {
                Err(Error::Numerical(format!(
                    "gradient check failed: {report}"
                )))
            }
        }
    }
}

fn load_or_generate(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<pc2m::synth::LabeledImage>, Error> {
    match data {
        Some(dir) => load_dataset(dir),
        None => gen_dataset(&cfg.dataset),
    }
}

fn write_run_outputs(out: &Path, cfg: &RunConfig, run: &TrainRun) -> Result<(), Error> {
    save_checkpoint(
        &out.join("checkpoint.pc2m"),
        &run.params,
        &run.area,
        cfg.temperature,
    )?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;

    let mut epochs = CsvWriter::create(
        &out.join("epochs.csv"),
        &[
            "epoch",
            "match_loss",
            "mce_loss",
            "total_loss",
            "miou",
            "area_entropy",
            "djs_prev",
            "djs_star",
            "wall_secs",
        ],
    )?;
    for r in &run.records {
        epochs.row(&[
            r.epoch.to_string(),
            r.match_loss.to_string(),
            r.mce_loss.to_string(),
            r.total_loss.to_string(),
            r.miou.to_string(),
            r.area_entropy.to_string(),
            r.djs_prev.to_string(),
            r.djs_star.to_string(),
            r.wall_secs.to_string(),
        ])?;
    }
    epochs.finish()?;

    let class_count = cfg.dataset.class_count;
    let mut area_header: Vec<String> = vec!["epoch".into()];
    area_header.extend((0..class_count).map(|c| format!("a_{c}")));
    area_header.extend(["entropy".into(), "djs_prev".into(), "djs_star".into()]);
    let header_refs: Vec<&str> = area_header.iter().map(String::as_str).collect();
    let mut area_csv = CsvWriter::create(&out.join("area.csv"), &header_refs)?;
    for r in &run.records {
        let mut row = vec![r.epoch.to_string()];
        row.extend(r.a_tilde.iter().map(|a| a.to_string()));
        row.extend([
            r.area_entropy.to_string(),
            r.djs_prev.to_string(),
            r.djs_star.to_string(),
        ]);
        area_csv.row(&row)?;
    }
    area_csv.finish()?;

    let mut steps = CsvWriter::create(
        &out.join("steps.csv"),
        &["step", "match_loss", "mce_loss", "total_loss", "grad_norm"],
    )?;
    for s in &run.steps {
        steps.row(&[
            s.step.to_string(),
            s.match_loss.to_string(),
            s.mce_loss.to_string(),
            s.total_loss.to_string(),
            s.grad_norm.to_string(),
        ])?;
    }
    steps.finish()?;

    write_report(&out.join("report.csv"), &run.final_report)?;
    if let Some(sets) = &run.pseudo_sets {
        write_pseudo_labels(&out.join("pseudo_labels.txt"), sets)?;
    }
    Ok(())
}

fn write_report(path: &Path, report: &pc2m::train::EvalReport) -> Result<(), Error> {
    let mut csv = CsvWriter::create(path, &["class", "iou"])?;
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        csv.row(&[c.to_string(), iou.to_string()])?;
    }
    csv.row(&["mean".to_string(), report.miou.to_string()])?;
    csv.finish()
}
