use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vcsel_snn::bench::{self, IrisDataset};
use vcsel_snn::config::{CalibrationRecord, ExperimentConfig, ModelKind};
use vcsel_snn::laser::{self, LaserError};

/// Photonic spiking-network simulator built on an optically injected VCSEL.
#[derive(Parser)]
#[command(name = "vcsel-snn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (or file, for init-config and calibrate).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override experiment.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write SVG plots.
    #[arg(long, global = true)]
    plot: bool,
    /// Iris CSV to use instead of the bundled copy.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a commented configuration template with all defaults.
    InitConfig,
    /// Search the configured grid for an excitable operating point.
    Calibrate,
    /// Run the full Iris experiment.
    Run,
    /// Training-set-size sweep.
    Sweep {
        /// Sizes per class: `a:b` (inclusive) or a comma list.
        #[arg(long)]
        sizes: Option<String>,
        /// Number of runs.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Simulate the dataset and write only the spike raster.
    ExportRaster,
    /// Simulate the first data points and write the drive and trace.
    SimulateTrace {
        /// Number of data points (in species order).
        #[arg(long, default_value_t = 1)]
        points: usize,
    },
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct CalibrationFailure(String);

impl std::fmt::Display for CalibrationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "calibration failed: {}", self.0)
    }
}

impl std::error::Error for CalibrationFailure {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<CalibrationFailure>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let g = cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure thread pool")?;
    }
    match cli.command {
        Command::InitConfig => init_config(&g),
        Command::Calibrate => calibrate(&g),
        Command::Run => run(&g),
        Command::Sweep { sizes, runs } => sweep(&g, sizes.as_deref(), runs),
        Command::ExportRaster => export_raster(&g),
        Command::SimulateTrace { points } => simulate_trace(&g, points),
    }
}

fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let path = g.config.as_ref().context("--config is required")?;
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))?;
    if let Some(seed) = g.seed {
        cfg.experiment.seed = seed;
    }
    Ok(cfg)
}

fn load_data(g: &GlobalArgs) -> Result<IrisDataset> {
    bench::load_iris(g.data.as_deref()).context("bench: loading dataset")
}

/// Creates the output directory and checks that it accepts files.
fn prepare_out_dir(g: &GlobalArgs) -> Result<PathBuf> {
    let dir = g.out.clone().context("--out is required")?;
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let probe = dir.join(".vcsel-snn-write-test");
    std::fs::write(&probe, b"").with_context(|| format!("{} is not writable", dir.display()))?;
    let _ = std::fs::remove_file(probe);
    Ok(dir)
}

fn unix_time() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool_version: &'static str,
    command: &'a str,
    config: &'a ExperimentConfig,
    artifacts: BTreeMap<&'static str, PathBuf>,
    started_unix: f64,
    finished_unix: f64,
}

/// Accumulates written files; the manifest is written last so a failed run
/// never leaves one behind.
struct Artifacts {
    dir: PathBuf,
    files: BTreeMap<&'static str, PathBuf>,
    started: f64,
}

impl Artifacts {
    fn new(dir: PathBuf) -> Self {
        Self {
            dir,
            files: BTreeMap::new(),
            started: unix_time(),
        }
    }

    fn write(&mut self, name: &'static str, file: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(file);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.files.insert(name, path);
        Ok(())
    }

    fn record(&mut self, name: &'static str, file: &str) -> PathBuf {
        let path = self.dir.join(file);
        self.files.insert(name, path.clone());
        path
    }

    fn finish(self, command: &str, config: &ExperimentConfig) -> Result<()> {
        let path = self.dir.join("manifest.json");
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            artifacts: self.files,
            started_unix: self.started,
            finished_unix: unix_time(),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn init_config(g: &GlobalArgs) -> Result<()> {
    let text = ExperimentConfig::template();
    match &g.out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn calibrate(g: &GlobalArgs) -> Result<()> {
    let mut cfg = load_config(g)?;
    if cfg.experiment.model != ModelKind::SpinFlip {
        bail!("config: calibration applies to the spin_flip model only");
    }
    let grid = cfg.calibration.grid().context("config")?;
    let settings = cfg.calibration.settings(cfg.experiment.dt);
    let cal = match laser::calibrate_operating_point(&cfg.laser, &grid, &settings) {
        Ok(c) => c,
        Err(LaserError::NoExcitablePointFound(msg)) => return Err(CalibrationFailure(msg).into()),
        Err(e) => return Err(anyhow::Error::new(e).context("laser")),
    };
    cfg.laser = cal.params;
    cfg.calibrated = Some(CalibrationRecord {
        margin: cal.margin,
        locking_boundary: cal.locking_boundary,
        excitable_points: cal.points.iter().filter(|p| p.quiet && p.reference_spikes == 1).count(),
        locked_points: cal.points.iter().filter(|p| p.locked).count(),
        grid_points: cal.points.len(),
    });
    let out = g.out.clone().unwrap_or_else(|| {
        let src = g.config.as_deref().unwrap_or(Path::new("config.toml"));
        src.with_extension("calibrated.toml")
    });
    cfg.save(&out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "operating point: injection_amplitude = {:.4}, detuning = {:.3e} Hz, margin = {:.3}",
        cfg.laser.injection_amplitude, cfg.laser.detuning, cal.margin
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn run(g: &GlobalArgs) -> Result<()> {
    let cfg = load_config(g)?;
    let data = load_data(g)?;
    let dir = prepare_out_dir(g)?;
    let report = bench::run_experiment(&cfg, &data).context("bench")?;
    let mut art = Artifacts::new(dir);
    art.write("raster", "raster.csv", &report.raster.to_csv())?;
    art.write("confusion", "confusion.csv", &report.confusion().to_csv())?;
    art.write("weights", "weights.csv", &report.weights.to_csv())?;
    art.write(
        "report",
        "report.json",
        &(serde_json::to_string_pretty(&report.summary)? + "\n"),
    )?;
    if g.plot {
        art.write("raster_plot", "raster.svg", &report.raster.to_svg())?;
    }
    let s = &report.summary;
    println!(
        "accuracy {:.4} ({}/{}), spike fraction {:.3}, threshold {:.4}",
        s.accuracy,
        s.confusion.correct(),
        s.confusion.total(),
        s.spike_fraction,
        s.threshold
    );
    art.finish("run", &cfg)
}

fn parse_sizes(spec: &str) -> Result<Vec<usize>> {
    let sizes: Vec<usize> = if let Some((a, b)) = spec.split_once(':') {
        let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
        (a..=b).collect()
    } else {
        spec.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?
    };
    if sizes.is_empty() {
        bail!("--sizes `{spec}` is empty");
    }
    Ok(sizes)
}

fn sweep(g: &GlobalArgs, sizes: Option<&str>, runs: Option<usize>) -> Result<()> {
    let cfg = load_config(g)?;
    let sizes = match sizes {
        Some(s) => parse_sizes(s).with_context(|| format!("invalid --sizes `{s}`"))?,
        None => cfg.experiment.sweep_sizes.clone(),
    };
    let runs = runs.unwrap_or(cfg.experiment.sweep_runs);
    if runs == 0 {
        bail!("invalid argument: --runs must be at least 1");
    }
    let data = load_data(g)?;
    let dir = prepare_out_dir(g)?;
    let curve = bench::sweep_training_size(&cfg, &data, &sizes, runs).context("bench")?;
    let mut art = Artifacts::new(dir);
    art.write("error_curve", "error_curve.csv", &curve.to_csv())?;
    if g.plot {
        art.write("error_curve_plot", "error_curve.svg", &curve.to_svg())?;
    }
    for (s, e) in curve.training_sizes.iter().zip(&curve.mean_error) {
        if [1, 2, 3, 5, 10, 20, 30, 40, 49].contains(s) {
            println!("size {s:>2}: mean error {e:.4}");
        }
    }
    art.finish("sweep", &cfg)
}

fn export_raster(g: &GlobalArgs) -> Result<()> {
    let cfg = load_config(g)?;
    let data = load_data(g)?;
    let dir = prepare_out_dir(g)?;
    let sim = bench::simulate_dataset(&cfg, &data).context("bench")?;
    let mut art = Artifacts::new(dir);
    art.write("raster", "raster.csv", &sim.raster.to_csv())?;
    if g.plot {
        art.write("raster_plot", "raster.svg", &sim.raster.to_svg())?;
    }
    println!(
        "raster {}x{}, spike fraction {:.3}, threshold {:.4}",
        sim.raster.n_points(),
        sim.raster.n_nodes(),
        sim.raster.firing_fraction(),
        sim.threshold
    );
    art.finish("export-raster", &cfg)
}

fn simulate_trace(g: &GlobalArgs, points: usize) -> Result<()> {
    let cfg = load_config(g)?;
    let data = load_data(g)?;
    if points == 0 || points > data.len() {
        bail!("--points must lie in 1..={}", data.len());
    }
    let dir = prepare_out_dir(g)?;
    let ids: Vec<usize> = (0..points).collect();
    let drive = bench::build_drive(&cfg, &data, Some(&ids)).context("input")?;
    let (trace, baseline) = bench::simulate_drive(&cfg, &drive).context("laser")?;
    let mut art = Artifacts::new(dir);
    let p = art.record("drive", "drive.csv");
    drive.write_csv(&p).context("input")?;
    let p = art.record("drive_metadata", "drive.toml");
    drive.write_metadata(&p).context("input")?;
    let p = art.record("trace", "trace.csv");
    trace.write_csv(&p).context("laser")?;
    println!(
        "{} samples over {:.1} ns, rest output {:.4}",
        trace.len(),
        trace.len() as f64 * trace.sample_period * 1e9,
        baseline
    );
    art.finish("simulate-trace", &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_specs() {
        assert_eq!(parse_sizes("1:3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_sizes("1, 5,10").unwrap(), vec![1, 5, 10]);
        assert!(parse_sizes("3:1").is_err());
        assert!(parse_sizes("x").is_err());
    }
}
