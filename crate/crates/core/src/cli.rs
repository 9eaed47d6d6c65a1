//! The `fedepa` command-line tool.
//!
//! Exit codes: 0 success, 2 bad configuration, 3 numeric failure, 4 I/O.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{run_sweep, ExperimentFile};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::selftest::run_selftest;

#[derive(Debug, Parser)]
#[command(name = "fedepa", version, about = "Personalized multimodal federated learning simulator")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one experiment and write its report.
    Run(Common),
    /// Train every cell of the `[sweep]` grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Run cells concurrently. Results are identical either way.
        #[arg(long)]
        parallel: bool,
    },
    /// Train, then write fused test-set features as CSV.
    DumpEmbeddings {
        #[command(flatten)]
        common: Common,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in gradient and identity checks.
    Selftest,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment TOML. Without it the built-in benchmark preset is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value`, with `key` a dotted path or an unambiguous field name.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentFile> {
        match &self.config {
            Some(path) => ExperimentFile::load(path, &self.overrides, self.seed),
            None => ExperimentFile::benchmark(&self.overrides, self.seed),
        }
    }
}

fn summary_line(method: &str, seed: u64, m: &Metrics) -> String {
    format!("{method} seed {seed}: OA {:.4} BA {:.4} F1 {:.4}", m.oa, m.ba, m.f1)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::Io)
}

fn cmd_run(common: &Common) -> Result<()> {
    let file = common.load()?;
    let exp = file.experiment();
    let outcome = exp.execute()?;
    let report = &outcome.report;
    if let Some(dir) = &common.out_dir {
        create_dir(dir)?;
        fs::write(dir.join("report.json"), report.to_json()?)?;
        fs::write(dir.join("config.toml"), file.to_toml()?)?;
    }
    println!(
        "{}",
        summary_line(&report.body.method, report.body.seed, &report.final_metrics())
    );
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    cell: String,
    method: String,
    beta: f64,
    label_ratio: f64,
    fusion: String,
    seed: u64,
    status: String,
    oa: Option<f64>,
    ba: Option<f64>,
    f1: Option<f64>,
    error: Option<String>,
}

fn cmd_sweep(common: &Common, parallel: bool) -> Result<()> {
    let file = common.load()?;
    let cells = file.cells();
    let dir = common.out_dir.clone().unwrap_or_else(|| PathBuf::from("sweep-out"));
    let cell_dir = dir.join("cells");
    create_dir(&cell_dir)?;
    let results = run_sweep(&cells, parallel);

    let mut rows = Vec::with_capacity(cells.len());
    let mut first_failure: Option<Error> = None;
    for (cell, result) in cells.iter().zip(results) {
        let e = &cell.experiment;
        let mut row = SummaryRow {
            cell: cell.label.clone(),
            method: e.run.method.to_string(),
            beta: e.data.beta,
            label_ratio: e.data.label_ratio,
            fusion: e.run.fusion.to_string(),
            seed: e.run.seed,
            status: "ok".into(),
            oa: None,
            ba: None,
            f1: None,
            error: None,
        };
        match result {
            Ok(report) => {
                let m = report.final_metrics();
                fs::write(cell_dir.join(format!("{}.json", cell.label)), report.to_json()?)?;
                println!("{}", summary_line(&cell.label, e.run.seed, &m));
                (row.oa, row.ba, row.f1) = (Some(m.oa), Some(m.ba), Some(m.f1));
            }
            Err(err) => {
                eprintln!("{}: failed: {err}", cell.label);
                row.status = "failed".into();
                row.error = Some(err.to_string());
                first_failure.get_or_insert(err);
            }
        }
        rows.push(row);
    }

    let mut csv = csv::Writer::from_path(dir.join("summary.csv"))?;
    for row in &rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&rows)?)?;
    match first_failure {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

fn cmd_dump_embeddings(common: &Common, out: &Path) -> Result<()> {
    let exp = common.load()?.experiment();
    let arch = exp.arch()?;
    // open the output first so a bad path fails before any training
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut csv = csv::Writer::from_path(out)?;
    let outcome = exp.execute()?;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, client) in outcome.clients.iter().enumerate() {
        let test = &client.split.test;
        if test.is_empty() {
            continue;
        }
        let batch = crate::data::make_batch(&test.iter().collect::<Vec<_>>())?;
        let feats = arch.embed(outcome.eval_params(&exp.run, i), &batch.inputs)?;
        let width = feats.shape()[1];
        for (s, row) in test.iter().zip(feats.data().chunks(width)) {
            rows.push((s.label()?, row.to_vec()));
        }
    }
    let width = arch.fused_width();
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..width).map(|k| format!("f{k}")))
        .collect();
    csv.write_record(&header)?;
    for (label, feats) in &rows {
        let record: Vec<String> = std::iter::once(label.to_string())
            .chain(feats.iter().map(|v| format!("{v:?}")))
            .collect();
        csv.write_record(&record)?;
    }
    csv.flush()?;
    println!("wrote {} embeddings of width {width} to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_selftest() -> Result<()> {
    let results = run_selftest();
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Error::Backward(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}

/// Executes a parsed command line and returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(common) => cmd_run(common),
        Command::Sweep { common, parallel } => cmd_sweep(common, *parallel),
        Command::DumpEmbeddings { common, out } => cmd_dump_embeddings(common, out),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Entry point for the binary.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    execute(&cli)
}
