use std::path::PathBuf;

use clap::Args;
use ordepth_core::trainer::{evaluate_checkpoints, run_experiment, EvalReport, ExperimentConfig, Task};

use crate::{read_input, write_output, CmdResult, Failure};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment configuration JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task to train; overrides the configuration file.
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    dataset_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Output directory for report.json, report.csv and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Re-evaluate the written checkpoints and require identical metrics.
    #[arg(long)]
    validate: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Reconstruction checkpoint, required for the end-to-end task.
    #[arg(long)]
    recon: Option<PathBuf>,
    /// Writes the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    validate: bool,
}

fn config(a: &TrainArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(&read_input(p)?)
            .map_err(|e| Failure::Usage(anyhow::anyhow!("{}: {e}", p.display())))?,
        None => ExperimentConfig::default(),
    };
    if let Some(t) = a.task {
        cfg.task = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(n) = a.dataset_size {
        cfg.dataset_size = n;
    }
    if let Some(n) = a.hidden {
        cfg.hidden = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn print_report(r: &EvalReport) {
    let mm = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
    println!("task: {}", r.task);
    println!("train/test samples: {}/{}", r.train_samples, r.test_samples);
    println!("ordinal accuracy: {:.4} over {} strict pairs", r.ordinal_accuracy, r.strict_pairs);
    println!("spearman rho: {:.4}", r.spearman_rho);
    println!("mpjpe (mm): {}", mm(r.mpjpe));
    println!("procrustes error (mm): {}", mm(r.procrustes_error));
    if r.mpjpe_without_reconstruction.is_some() {
        println!("mpjpe without reconstruction (mm): {}", mm(r.mpjpe_without_reconstruction));
        println!(
            "procrustes error without reconstruction (mm): {}",
            mm(r.procrustes_error_without_reconstruction)
        );
    }
    println!("loss: {:.6} -> {:.6}", r.initial_loss, r.final_loss);
    println!("note: {}", r.note);
}

pub fn train(a: TrainArgs) -> CmdResult {
    let cfg = config(&a)?;
    println!("seed: {}", cfg.seed);
    let exp = run_experiment(&cfg)?;
    exp.write(&a.out)?;
    print_report(&exp.report);
    println!("wrote: {}", a.out.display());
    if a.validate {
        exp.report.validate().map_err(|e| Failure::Check(e.to_string()))?;
        let back: EvalReport = serde_json::from_str(&read_input(&a.out.join("report.json"))?)
            .map_err(|e| Failure::Check(format!("report.json: {e}")))?;
        if back != exp.report {
            return Err(Failure::Check("report.json does not round-trip".into()));
        }
        let recon = exp.recon.as_ref().map(|_| a.out.join("recon.ckpt"));
        let again = evaluate_checkpoints(&a.out.join("model.ckpt"), recon.as_deref())?;
        if again != exp.report {
            return Err(Failure::Check("re-evaluating the saved checkpoints changed the metrics".into()));
        }
        println!("validated: report schema, checkpoint re-evaluation is bitwise identical");
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let report = evaluate_checkpoints(&a.model, a.recon.as_deref())?;
    println!("seed: {}", report.seed);
    print_report(&report);
    if let Some(out) = &a.out {
        write_output(out, &serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.into()))?)?;
        println!("wrote: {}", out.display());
    }
    if a.validate {
        report.validate().map_err(|e| Failure::Check(e.to_string()))?;
        println!("validated: report schema");
    }
    Ok(())
}
