//! Batch Monte Carlo sweeps from the command line.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use risnoma::experiments::{parse_axis_value, parse_config, run_sweep, Axis, SchemeSpec, SweepSpec};
use risnoma::orchestrator::{Optimizer, Quantization};
use risnoma::ordering::OrderingScheme;

#[derive(Debug, Parser)]
#[command(version, about = "Joint beamforming and RIS phase-shift sweeps for downlink NOMA")]
struct Args {
    /// Sweep description (TOML). Defaults are used when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// CSV output path; stdout when neither this nor the config sets one.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "INT")]
    workers: Option<usize>,
    /// Master seed.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Trials per cell.
    #[arg(long, value_name = "INT")]
    trials: Option<usize>,
    /// Sweep axis and values, e.g. `n=8,16` or `bits=1,2,continuous`.
    #[arg(long, value_name = "NAME=v1,v2,...")]
    axis: Option<String>,
    /// Optimizer: dc, sdr, random or noris.
    #[arg(long)]
    scheme: Option<Optimizer>,
    /// Decode-order scheme: direct, eigen, sdr or exhaustive.
    #[arg(long)]
    ordering: Option<OrderingScheme>,
    /// Phase resolution in bits, or `continuous`.
    #[arg(long, value_name = "B|continuous")]
    bits: Option<Quantization>,
    /// Also write `x,scheme,mean_dbm,stderr_db` per cell.
    #[arg(long, value_name = "PATH")]
    plot_data: Option<PathBuf>,
    /// Record per-trial wall time (output is then not reproducible).
    #[arg(long)]
    timing: bool,
}

fn parse_axis(text: &str) -> Result<(Axis, Vec<risnoma::experiments::AxisValue>), String> {
    let (name, values) = text.split_once('=').ok_or("expected NAME=v1,v2,...")?;
    let axis = Axis::parse(name.trim()).ok_or_else(|| format!("unknown axis '{name}'"))?;
    let values = values.split(',').map(|v| parse_axis_value(axis, v.trim())).collect::<Result<Vec<_>, _>>()?;
    Ok((axis, values))
}

fn build_spec(args: &Args) -> Result<SweepSpec, String> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => SweepSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.base.seed = s;
    }
    if let Some(t) = args.trials {
        spec.n_trials = t;
    }
    if let Some(w) = args.workers {
        spec.workers = Some(w);
    }
    if let Some(a) = &args.axis {
        let (axis, values) = parse_axis(a).map_err(|e| format!("--axis: {e}"))?;
        spec.axis = axis;
        spec.values = values;
    }
    if args.scheme.is_some() || args.ordering.is_some() || args.bits.is_some() {
        let first = spec.schemes.first().copied().unwrap_or_default();
        spec.schemes = vec![SchemeSpec {
            optimizer: args.scheme.unwrap_or(first.optimizer),
            ordering: args.ordering.unwrap_or(first.ordering),
            bits: args.bits.unwrap_or(first.bits),
        }];
    }
    if args.out.is_some() {
        spec.output = args.out.clone();
    }
    if args.plot_data.is_some() {
        spec.plot_data = args.plot_data.clone();
    }
    spec.timing |= args.timing;
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn run(args: &Args) -> Result<(), String> {
    let spec = build_spec(args)?;
    let out = run_sweep(&spec).map_err(|e| e.to_string())?;
    match &spec.output {
        Some(path) => {
            let f = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
            out.write_csv(BufWriter::new(f)).map_err(|e| e.to_string())?;
        }
        None => out.write_csv(io::stdout().lock()).map_err(|e| e.to_string())?,
    }
    if let Some(path) = &spec.plot_data {
        let f = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut w = BufWriter::new(f);
        out.write_plot_data(&mut w).and_then(|_| w.flush()).map_err(|e| e.to_string())?;
    }
    eprint!("{}", out.summary_table());
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
