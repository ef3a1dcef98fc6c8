use std::path::PathBuf;

use clap::Args;
use ordepth_core::gradcheck::{check_network_params, run_suites, CheckResult, GradcheckReport, Scope};
use ordepth_core::network::load_checkpoint;

use crate::{write_output, CmdResult, Failure};

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// all, supervision, volumetric, reconstruction or network.
    #[arg(long, default_value = "all")]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random configurations per check.
    #[arg(long, default_value_t = ordepth_core::gradcheck::DEFAULT_CONFIGS)]
    configs: usize,
    /// Also check backpropagation at the weights of a saved checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Writes the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn run(a: GradcheckArgs) -> CmdResult {
    println!("seed: {}", a.seed);
    let mut report: GradcheckReport = run_suites(a.scope, a.seed, a.configs)?;
    if let Some(path) = &a.checkpoint {
        let (params, _) = load_checkpoint(path).map_err(|e| Failure::Usage(anyhow::anyhow!("{}: {e}", path.display())))?;
        let check: CheckResult = check_network_params(&params, a.seed, a.configs)?;
        report.checks.push(check);
    }
    for c in &report.checks {
        println!("{c}");
    }
    let worst = report.checks.iter().map(|c| c.worst_error).fold(0.0, f64::max);
    println!("worst relative error: {worst:.3e}");
    if let Some(path) = &a.json {
        write_output(path, &serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.into()))?)?;
    }
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}
