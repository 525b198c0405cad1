use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use npusim::graph::{bind_shapes, fuse_operators, parse_graph, validate_graph, Bindings};
use npusim::lowering::dump_tiles;
use npusim::{load_workload, lower_graph, simulate, synthetic_from_spec, SimConfig};

#[derive(Parser)]
#[command(name = "npusim", version, about = "Cycle-level multi-core NPU simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workload and write the JSON report.
    Simulate {
        /// Config file, or a preset name (mobile, server).
        #[arg(long)]
        config: String,
        #[arg(long)]
        workload: PathBuf,
        /// Extra model graph files; workloads may refer to them by file name or stem.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        /// Write a per-instruction trace next to the report.
        #[arg(long)]
        trace: bool,
        /// Report path; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Emit a timeline CSV with this window (core cycles).
        #[arg(long)]
        timeline_window: Option<u64>,
        /// Config override, `dotted.key=value`. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the lowered tile programs of one model.
    Tiles {
        #[arg(long)]
        config: String,
        /// Graph JSON file or `synthetic:<kind>:k=v,...`.
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 1)]
        batch: u64,
        /// Symbolic dimension binding, `name=value`. Repeatable.
        #[arg(long = "bind", value_name = "NAME=VALUE")]
        binds: Vec<String>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn side_path(report: Option<&Path>, suffix: &str) -> PathBuf {
    match report {
        Some(p) => p.with_file_name(format!(
            "{}{suffix}",
            p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "npusim".into())
        )),
        None => PathBuf::from(format!("npusim{suffix}")),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn run_simulate(
    config: &str,
    workload: &Path,
    models: &[PathBuf],
    trace: bool,
    report: Option<&Path>,
    timeline_window: Option<u64>,
    overrides: &[String],
) -> Result<()> {
    let mut overrides = overrides.to_vec();
    if trace {
        overrides.push("stats.trace=true".into());
    }
    if let Some(w) = timeline_window {
        overrides.push(format!("stats.timeline_window={w}"));
    }
    let cfg = SimConfig::load(config, &overrides)?;
    let requests = load_workload(workload, models)?;
    let rep = simulate(&cfg, requests)?;

    let json = rep.to_json();
    match report {
        Some(p) => write(p, &json)?,
        None => println!("{json}"),
    }
    if let Some(csv) = rep.timeline_csv() {
        write(&side_path(report, ".timeline.csv"), &csv)?;
    }
    write(&side_path(report, ".latency.csv"), &rep.histogram_csv())?;
    if let Some(t) = &rep.trace {
        write(&side_path(report, ".trace"), &t.to_lines())?;
    }
    Ok(())
}

fn parse_bind(s: &str) -> Result<(String, u64)> {
    let Some((k, v)) = s.split_once('=') else {
        bail!("binding `{s}` is not NAME=VALUE");
    };
    let v = v.trim().parse().with_context(|| format!("binding `{s}` needs an integer value"))?;
    Ok((k.trim().to_string(), v))
}

fn run_tiles(config: &str, model: &str, batch: u64, binds: &[String], overrides: &[String]) -> Result<()> {
    let cfg = SimConfig::load(config, overrides)?;
    let graph = match model.strip_prefix("synthetic:") {
        Some(spec) => synthetic_from_spec(spec)?,
        None => {
            let text = std::fs::read_to_string(model).with_context(|| format!("cannot read model {model}"))?;
            parse_graph(&text)?
        }
    };
    let v = validate_graph(&graph);
    if !v.is_empty() {
        let msgs: Vec<String> = v.violations.iter().map(ToString::to_string).collect();
        bail!("model is invalid: {}", msgs.join("; "));
    }
    let mut b = Bindings::new();
    b.insert("batch".into(), batch);
    for s in binds {
        let (k, v) = parse_bind(s)?;
        b.insert(k, v);
    }
    let bound = bind_shapes(&fuse_operators(&graph), &b)?;
    let lowered = lower_graph(&bound, &cfg, "tiles")?;
    print!("{}", dump_tiles(&lowered.tiles));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Simulate {
            config,
            workload,
            models,
            trace,
            report,
            timeline_window,
            overrides,
        } => run_simulate(config, workload, models, *trace, report.as_deref(), *timeline_window, overrides),
        Command::Tiles {
            config,
            model,
            batch,
            binds,
            overrides,
        } => run_tiles(config, model, *batch, binds, overrides),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
