use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use neuroloc_cli::config::{builtin_config, ExperimentConfig};
use neuroloc_cli::emit::{emit_slices, emit_sweep_plotdata, emit_table};
use neuroloc_cli::sweep::{build_context, run_experiment, SweepResult};
use neuroloc_core::solvers::CurrentEstimate;

/// Current-source localization experiments on a synthetic spherical head.
#[derive(Parser)]
#[command(name = "neuroloc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) a sweep from a TOML config.
    Run {
        /// Path to the experiment config.
        config: Option<PathBuf>,
        /// Use a built-in config instead: shallow-analog | deep-analog.
        #[arg(long, conflicts_with = "config")]
        builtin: Option<String>,
        /// Output directory when using --builtin.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print the per-method best-lambda table from a results.json.
    Table {
        results: PathBuf,
        /// Where to write the CSV twin (default: table.csv beside results).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-method (lambda, error) series as CSV and JSON.
    Plotdata {
        results: PathBuf,
        /// Output stem (default: plotdata beside results).
        #[arg(long)]
        out_stem: Option<PathBuf>,
    },
    /// Write xz/yz/xy amplitude slices of one cell's estimate.
    Slices {
        results: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: beside results).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(all_ok) => {
            if all_ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run { config, builtin, output_dir } => {
            let config = match (config, builtin) {
                (Some(path), None) => ExperimentConfig::from_path(&path)
                    .with_context(|| format!("loading {}", path.display()))?,
                (None, Some(name)) => {
                    let out = output_dir.unwrap_or_else(|| PathBuf::from(format!("out/{name}")));
                    builtin_config(&name, &out)?
                }
                _ => bail!("give either a config path or --builtin NAME"),
            };
            let result = run_experiment(&config)?;
            let n_ok = result.cells.iter().filter(|c| c.is_ok()).count();
            println!(
                "{} cells ({} ok) -> {}",
                result.cells.len(),
                n_ok,
                config.output_dir.join("results.json").display()
            );
            let table = emit_table(&result)?;
            print!("{}", table.text);
            Ok(result.all_ok())
        }
        Command::Table { results, out } => {
            let result = SweepResult::load(&results)?;
            let table = emit_table(&result)?;
            print!("{}", table.text);
            let out = out.unwrap_or_else(|| sibling(&results, "table.csv"));
            std::fs::write(&out, table.csv)?;
            println!("# csv -> {}", out.display());
            Ok(true)
        }
        Command::Plotdata { results, out_stem } => {
            let result = SweepResult::load(&results)?;
            let plot = emit_sweep_plotdata(&result);
            let stem = out_stem.unwrap_or_else(|| sibling(&results, "plotdata"));
            let csv_path = stem.with_extension("csv");
            let json_path = stem.with_extension("json");
            std::fs::write(&csv_path, plot.to_csv())?;
            std::fs::write(&json_path, serde_json::to_string_pretty(&plot)?)?;
            println!("wrote {} and {}", csv_path.display(), json_path.display());
            Ok(true)
        }
        Command::Slices { results, method, lambda, p, seed, out } => {
            let result = SweepResult::load(&results)?;
            let root = results
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            let cell = result
                .cells
                .iter()
                .filter(|c| c.is_ok() && c.method == method)
                .filter(|c| (c.lambda - lambda).abs() <= 1e-9 * lambda.abs().max(1.0))
                .filter(|c| p.map_or(true, |p| c.p == p))
                .find(|c| seed.map_or(true, |s| c.seed == s))
                .with_context(|| {
                    format!("no ok cell for method={method} lambda={lambda} p={p:?} seed={seed:?}")
                })?;
            let stem = cell
                .estimate_file
                .as_ref()
                .context("cell has no stored estimate")?;
            let est = CurrentEstimate::import(&root.join(stem))?;
            // The space is rebuilt deterministically from the config echo.
            let ctx = build_context(&result.config)?;
            let planes = emit_slices(&est, &ctx.space, &result.truth)?;
            let out = out.unwrap_or(root);
            std::fs::create_dir_all(&out)?;
            let tag = format!("{}_p{}_l{}_s{}", cell.method, cell.p, cell.lambda, cell.seed);
            for (name, plane) in [
                ("xz", &planes.xz),
                ("yz", &planes.yz),
                ("xy", &planes.xy),
            ] {
                let path = out.join(format!("slices_{tag}_{name}.csv"));
                std::fs::write(&path, plane.to_csv())?;
                println!("wrote {}", path.display());
            }
            Ok(true)
        }
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent()
        .map(|d| d.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}
