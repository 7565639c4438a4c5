//! Iris benchmark: dataset loading, per-class splits, the end-to-end
//! experiment and training-size sweeps.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, ModelKind, ThresholdMode};
use crate::detector::{self, DetectorError, SpikeRaster};
use crate::input::{self, DriveWaveform, FeatureVector, InputError, LabeledSequence};
use crate::laser::{self, IntensityTrace, LaserError, NeuronModel, SpinFlipNeuron};
use crate::readout::{self, LabelMatrix, ReadoutError, ReadoutWeights, TrainOptions, N_CLASSES};

/// Random stream used for train/test splits.
const SPLIT_STREAM: u64 = 1;

pub const CLASS_NAMES: [&str; N_CLASSES] = ["setosa", "versicolor", "virginica"];

const BUNDLED_IRIS: &str = include_str!("../data/iris.csv");

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("input: {0}")]
    Input(#[from] InputError),
    #[error("laser: {0}")]
    Laser(#[from] LaserError),
    #[error("detector: {0}")]
    Detector(#[from] DetectorError),
    #[error("readout: {0}")]
    Readout(#[from] ReadoutError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: u64, column: usize, message: String },
    #[error("class {class} has {count} points, expected 50")]
    ClassCount { class: &'static str, count: usize },
    #[error("invalid training size {0}: must leave at least one test point per class")]
    InvalidSize(usize),
    #[error("laser operating point is not calibrated (injection_amplitude is 0)")]
    CalibrationMissing,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Feature vectors with 0-based class labels (0 = setosa, 1 = versicolor,
/// 2 = virginica).
#[derive(Debug, Clone, PartialEq)]
pub struct IrisDataset {
    pub points: Vec<FeatureVector>,
    pub labels: Vec<usize>,
}

impl IrisDataset {
    /// The bundled copy of the dataset.
    pub fn bundled() -> Self {
        Self::from_csv_str(BUNDLED_IRIS).expect("bundled dataset is valid")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut c = [0; N_CLASSES];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Parses and validates the `sepal_length,sepal_width,petal_length,
    /// petal_width,species` schema, requiring 50 points per class.
    pub fn from_csv_str(text: &str) -> Result<Self, BenchError> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| BenchError::Parse {
                row: e.position().map_or(0, |p| p.line()),
                column: 0,
                message: e.to_string(),
            })?;
            let row = rec.position().map_or(0, |p| p.line());
            if rec.len() != 5 {
                return Err(BenchError::Parse {
                    row,
                    column: rec.len().min(5) + 1,
                    message: format!("expected 5 fields, found {}", rec.len()),
                });
            }
            let mut f = [0.0; 4];
            for (j, v) in f.iter_mut().enumerate() {
                *v = rec[j].parse().map_err(|_| BenchError::Parse {
                    row,
                    column: j + 1,
                    message: format!("`{}` is not a number", &rec[j]),
                })?;
            }
            let species = rec[4].to_ascii_lowercase();
            let species = species.strip_prefix("iris-").unwrap_or(&species);
            let class = CLASS_NAMES
                .iter()
                .position(|&n| n == species)
                .ok_or_else(|| BenchError::Parse {
                    row,
                    column: 5,
                    message: format!("unknown species `{}`", &rec[4]),
                })?;
            let fv = FeatureVector::new(f[0], f[1], f[2], f[3]).map_err(|e| BenchError::Parse {
                row,
                column: 0,
                message: e.to_string(),
            })?;
            points.push(fv);
            labels.push(class);
        }
        let ds = Self { points, labels };
        for (c, &n) in ds.class_counts().iter().enumerate() {
            if n != 50 {
                return Err(BenchError::ClassCount {
                    class: CLASS_NAMES[c],
                    count: n,
                });
            }
        }
        Ok(ds)
    }
}

/// Reads a dataset file, or the bundled copy when `source` is `None`.
pub fn load_iris(source: Option<&Path>) -> Result<IrisDataset, BenchError> {
    match source {
        Some(p) => IrisDataset::from_csv_str(&std::fs::read_to_string(p)?),
        None => Ok(IrisDataset::bundled()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws `train_per_class` random points from every class present; the rest
/// form the test set. Both index lists are sorted.
pub fn split_train_test(labels: &[usize], train_per_class: usize, seed: u64) -> Result<Split, BenchError> {
    if train_per_class == 0 {
        return Err(BenchError::InvalidSize(train_per_class));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let mut train = Vec::new();
    for c in 0..N_CLASSES {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() <= train_per_class {
            return Err(BenchError::InvalidSize(train_per_class));
        }
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..train_per_class]);
    }
    train.sort_unstable();
    let test = (0..labels.len()).filter(|i| train.binary_search(i).is_err()).collect();
    Ok(Split { train, test })
}

/// Rows = true class, columns = predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..N_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }

    /// Fraction of class `c` test points predicted as `c`.
    pub fn recall(&self, c: usize) -> f64 {
        let n: usize = self.counts[c].iter().sum();
        if n == 0 {
            f64::NAN
        } else {
            self.counts[c][c] as f64 / n as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("true\\predicted,{}\n", CLASS_NAMES.join(","));
        for (c, row) in self.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{},{}", CLASS_NAMES[c], cells.join(","));
        }
        out
    }
}

/// Readout trained on one split and its test-set confusion matrix.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub weights: ReadoutWeights,
    pub confusion: ConfusionMatrix,
    /// Predicted class of every test point, in `split.test` order.
    pub predictions: Vec<usize>,
}

/// Trains on `split.train` rows of `rows` and evaluates on `split.test`.
/// `rows[i]` must be the spike pattern of data point `i`.
pub fn evaluate<R: AsRef<[u8]> + Sync>(
    rows: &[R],
    labels: &[usize],
    split: &Split,
    options: TrainOptions,
) -> Result<Evaluation, BenchError> {
    let train_rows: Vec<&[u8]> = split.train.iter().map(|&i| rows[i].as_ref()).collect();
    let train_labels: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let (weights, _warnings) = readout::train(&train_rows, &LabelMatrix::from_classes(&train_labels)?, options)?;
    let mut confusion = ConfusionMatrix::default();
    let mut predictions = Vec::with_capacity(split.test.len());
    for &i in &split.test {
        let p = weights.predict(rows[i].as_ref())?.class_index;
        confusion.counts[labels[i]][p] += 1;
        predictions.push(p);
    }
    Ok(Evaluation {
        weights,
        confusion,
        predictions,
    })
}

/// Mean normalized Hamming distances within and between classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    /// `inter[c][d]`; the diagonal holds the intra-class means (pairs of
    /// distinct points). NaN where a class has too few points.
    pub inter: [[f64; N_CLASSES]; N_CLASSES],
}

impl DistanceReport {
    pub fn intra(&self, c: usize) -> f64 {
        self.inter[c][c]
    }

    /// Every inter-class mean exceeds both corresponding intra-class means.
    pub fn classes_separated(&self) -> bool {
        (0..N_CLASSES).all(|c| {
            (c + 1..N_CLASSES).all(|d| {
                let x = self.inter[c][d];
                x > self.intra(c) && x > self.intra(d)
            })
        })
    }
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

pub fn raster_distance_report<R: AsRef<[u8]>>(rows: &[R], labels: &[usize]) -> DistanceReport {
    let width = rows.first().map_or(1, |r| r.as_ref().len()).max(1) as f64;
    let mut sum = [[0.0; N_CLASSES]; N_CLASSES];
    let mut cnt = [[0usize; N_CLASSES]; N_CLASSES];
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let (a, b) = (labels[i].min(labels[j]), labels[i].max(labels[j]));
            sum[a][b] += hamming(rows[i].as_ref(), rows[j].as_ref()) as f64 / width;
            cnt[a][b] += 1;
        }
    }
    let mut inter = [[f64::NAN; N_CLASSES]; N_CLASSES];
    for a in 0..N_CLASSES {
        for b in a..N_CLASSES {
            if cnt[a][b] > 0 {
                inter[a][b] = sum[a][b] / cnt[a][b] as f64;
                inter[b][a] = inter[a][b];
            }
        }
    }
    DistanceReport { inter }
}

/// Raster and trace of one full simulation of the dataset.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    /// Rows in data-point order (row `i` = point `i`).
    pub raster: SpikeRaster,
    pub trace: IntensityTrace,
    /// Threshold actually used.
    pub threshold: f64,
    /// What `auto_threshold` gives on this trace (recorded in every mode).
    pub auto_threshold: f64,
    /// Output power in the unperturbed rest state.
    pub baseline: f64,
}

/// Masked drive waveform for the points in `ids` (all points when `None`),
/// concatenated in species order.
pub fn build_drive(
    config: &ExperimentConfig,
    dataset: &IrisDataset,
    ids: Option<&[usize]>,
) -> Result<DriveWaveform, BenchError> {
    let p = &config.pipeline;
    let mask = input::build_mask(
        config.experiment.seed,
        p.n_nodes,
        input::IRIS_FEATURES,
        p.mask_distribution,
    )?;
    let all: Vec<usize>;
    let ids = match ids {
        Some(ids) => ids,
        None => {
            all = (0..dataset.len()).collect();
            &all
        }
    };
    let mut sequences = ids
        .iter()
        .map(|&i| {
            Ok(LabeledSequence {
                point_id: i,
                class: dataset.labels[i],
                sequence: input::mask_datapoint(&mask, &dataset.points[i])?,
            })
        })
        .collect::<Result<Vec<_>, InputError>>()?;
    input::group_by_class(&mut sequences);
    Ok(input::synthesize_waveform(&sequences, p.timing())?)
}

/// Runs the configured neuron model over `drive`; returns the trace and
/// the output power at rest.
pub fn simulate_drive(config: &ExperimentConfig, drive: &DriveWaveform) -> Result<(IntensityTrace, f64), BenchError> {
    let settings = config.sim_settings();
    let mode = config.experiment.simulation_mode;
    Ok(match config.experiment.model {
        ModelKind::SpinFlip => {
            if config.laser.injection_amplitude <= 0.0 {
                return Err(BenchError::CalibrationMissing);
            }
            let neuron = SpinFlipNeuron::new(config.laser, config.modulation(), config.detector.channel)?;
            (laser::simulate(&neuron, drive, &settings, mode)?, neuron.baseline())
        }
        ModelKind::FastSlow => {
            let neuron = config.surrogate.unwrap_or_default();
            let base = neuron.output(&neuron.rest_state());
            (laser::simulate(&neuron, drive, &settings, mode)?, base)
        }
    })
}

/// Mask -> waveform -> laser -> raster for every data point.
pub fn simulate_dataset(config: &ExperimentConfig, dataset: &IrisDataset) -> Result<SimulationOutput, BenchError> {
    config.validate()?;
    let p = &config.pipeline;
    let drive = build_drive(config, dataset, None)?;
    let (trace, baseline) = simulate_drive(config, &drive)?;

    let d = &config.detector;
    let auto = detector::auto_threshold(&trace, d.auto_iqr_factor);
    let threshold = match d.threshold_mode {
        ThresholdMode::Auto => auto,
        ThresholdMode::Manual => d.threshold.expect("validated"),
    };
    let raster = detector::bin_and_threshold(&trace, &drive.layout, p.node_duration, threshold, d.latency_offset)?
        .sorted_by_point();
    Ok(SimulationOutput {
        raster,
        trace,
        threshold,
        auto_threshold: auto,
        baseline,
    })
}

/// Serializable summary of a run; with the config it suffices for replay.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub tool_version: &'static str,
    pub config: ExperimentConfig,
    pub split_seed: u64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub split: Split,
    pub threshold: f64,
    pub auto_threshold: f64,
    pub baseline: f64,
    pub spike_fraction: f64,
    pub rank: usize,
    pub residual: f64,
    pub distances: DistanceReport,
    pub spike_count: usize,
    /// Seconds.
    pub median_spike_width: Option<f64>,
    /// Seconds of simulated time.
    pub simulated_duration: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub summary: ReportSummary,
    pub raster: SpikeRaster,
    pub weights: ReadoutWeights,
    pub trace: IntensityTrace,
}

impl ExperimentReport {
    pub fn accuracy(&self) -> f64 {
        self.summary.accuracy
    }

    pub fn confusion(&self) -> &ConfusionMatrix {
        &self.summary.confusion
    }
}

/// Full pipeline: simulate, split, train, test.
pub fn run_experiment(config: &ExperimentConfig, dataset: &IrisDataset) -> Result<ExperimentReport, BenchError> {
    let sim = simulate_dataset(config, dataset)?;
    report_from_simulation(config, dataset, sim)
}

/// Splits and evaluates an existing simulation of `dataset`.
pub fn report_from_simulation(
    config: &ExperimentConfig,
    dataset: &IrisDataset,
    sim: SimulationOutput,
) -> Result<ExperimentReport, BenchError> {
    let e = &config.experiment;
    let split_seed = e.seed;
    let split = split_train_test(&dataset.labels, e.train_per_class, split_seed)?;
    let rows: Vec<&[u8]> = sim.raster.rows().collect();
    let mut eval = evaluate(&rows, &dataset.labels, &split, TrainOptions { intercept: e.intercept })?;
    eval.weights.meta.seed = Some(split_seed);
    eval.weights.meta.training_indices = split.train.clone();
    let stats = detector::spike_statistics(&sim.trace, sim.threshold);
    let summary = ReportSummary {
        tool_version: env!("CARGO_PKG_VERSION"),
        config: config.clone(),
        split_seed,
        accuracy: eval.confusion.accuracy(),
        confusion: eval.confusion,
        split,
        threshold: sim.threshold,
        auto_threshold: sim.auto_threshold,
        baseline: sim.baseline,
        spike_fraction: sim.raster.firing_fraction(),
        rank: eval.weights.meta.rank,
        residual: eval.weights.meta.residual,
        distances: raster_distance_report(&rows, &dataset.labels),
        spike_count: stats.spike_count,
        median_spike_width: stats.median_width(),
        simulated_duration: sim.trace.len() as f64 * sim.trace.sample_period,
    };
    Ok(ExperimentReport {
        summary,
        raster: sim.raster,
        weights: eval.weights,
        trace: sim.trace,
    })
}

/// Test error for every (run, training size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub training_sizes: Vec<usize>,
    /// `per_run_errors[run][size_index]`.
    pub per_run_errors: Vec<Vec<f64>>,
    pub mean_error: Vec<f64>,
    /// Split seed of every run.
    pub run_seeds: Vec<u64>,
}

impl ErrorCurve {
    pub fn from_runs(training_sizes: Vec<usize>, per_run_errors: Vec<Vec<f64>>, run_seeds: Vec<u64>) -> Self {
        let n = per_run_errors.len().max(1) as f64;
        let mean_error = (0..training_sizes.len())
            .map(|k| per_run_errors.iter().map(|r| r[k]).sum::<f64>() / n)
            .collect();
        Self {
            training_sizes,
            per_run_errors,
            mean_error,
            run_seeds,
        }
    }

    pub fn mean_at(&self, size: usize) -> Option<f64> {
        self.training_sizes
            .iter()
            .position(|&s| s == size)
            .map(|k| self.mean_error[k])
    }

    /// Header `run,<size>...`, one row per run, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run");
        for s in &self.training_sizes {
            let _ = write!(out, ",{s}");
        }
        out.push('\n');
        let mut row = |label: &str, values: &[f64]| {
            out.push_str(label);
            for v in values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        };
        for (r, errs) in self.per_run_errors.iter().enumerate() {
            row(&r.to_string(), errs);
        }
        row("mean", &self.mean_error);
        out
    }

    /// Faint per-run lines with the mean in bold.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 400.0, 40.0);
        let smax = self.training_sizes.iter().copied().max().unwrap_or(1).max(1) as f64;
        let emax = self
            .per_run_errors
            .iter()
            .flatten()
            .copied()
            .fold(0.0f64, f64::max)
            .max(1e-9);
        let x = |s: usize| pad + (w - 2.0 * pad) * s as f64 / smax;
        let y = |e: f64| h - pad - (h - 2.0 * pad) * e / emax;
        let line = |vals: &[f64]| {
            self.training_sizes
                .iter()
                .zip(vals)
                .map(|(&s, &e)| format!("{:.1},{:.1}", x(s), y(e)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut svg =
            format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        svg.push('\n');
        let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<path d="M{pad} {pad} V{} H{}" stroke="black" fill="none"/>"#,
            h - pad,
            w - pad
        );
        for run in &self.per_run_errors {
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" stroke="steelblue" stroke-opacity="0.3" fill="none"/>"#,
                line(run)
            );
        }
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" stroke="navy" stroke-width="2.5" fill="none"/>"#,
            line(&self.mean_error)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">training points per class</text>"#,
            w / 2.0,
            h - 8.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">error (max {:.3})</text>"#,
            h / 2.0,
            h / 2.0,
            emax
        );
        svg.push_str("</svg>\n");
        svg
    }
}

/// Error curve over `sizes` for `n_runs` runs. Run `r` re-splits with seed
/// `seed + r`; with `resimulate_per_run` it also re-simulates with that
/// seed, otherwise one raster is shared by all runs.
pub fn sweep_training_size(
    config: &ExperimentConfig,
    dataset: &IrisDataset,
    sizes: &[usize],
    n_runs: usize,
) -> Result<ErrorCurve, BenchError> {
    let shared = if config.experiment.resimulate_per_run {
        None
    } else {
        Some(simulate_dataset(config, dataset)?.raster)
    };
    sweep_with_raster(config, dataset, sizes, n_runs, shared.as_ref())
}

/// As [`sweep_training_size`], reusing `raster` when given.
pub fn sweep_with_raster(
    config: &ExperimentConfig,
    dataset: &IrisDataset,
    sizes: &[usize],
    n_runs: usize,
    raster: Option<&SpikeRaster>,
) -> Result<ErrorCurve, BenchError> {
    if n_runs == 0 {
        return Err(BenchError::Config(ConfigError::Invalid(
            "number of runs must be >= 1".into(),
        )));
    }
    if let Some(&bad) = sizes.iter().find(|&&s| !(1..=49).contains(&s)) {
        return Err(BenchError::InvalidSize(bad));
    }
    let options = TrainOptions {
        intercept: config.experiment.intercept,
    };
    let seeds: Vec<u64> = (0..n_runs as u64)
        .map(|r| config.experiment.seed.wrapping_add(r))
        .collect();
    let runs = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<f64>, BenchError> {
            let owned;
            let raster = match raster {
                Some(r) => r,
                None => {
                    let mut cfg = config.clone();
                    cfg.experiment.seed = seed;
                    owned = simulate_dataset(&cfg, dataset)?.raster;
                    &owned
                }
            };
            let rows: Vec<&[u8]> = raster.rows().collect();
            sizes
                .iter()
                .map(|&s| {
                    let split = split_train_test(&dataset.labels, s, seed)?;
                    let eval = evaluate(&rows, &dataset.labels, &split, options)?;
                    Ok(1.0 - eval.confusion.accuracy())
                })
                .collect()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ErrorCurve::from_runs(sizes.to_vec(), runs, seeds))
}
