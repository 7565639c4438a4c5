//! Experiment configuration, stored as TOML with `[laser]`, `[pipeline]`,
//! `[detector]`, `[experiment]` and `[calibration]` sections.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::input::{MaskDistribution, WaveformTiming};
use crate::laser::{
    CalibrationSettings, FastSlowNeuron, LaserParams, Modulation, Perturbation, ReadoutChannel, SearchGrid,
    SimSettings, SimulationMode,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    #[default]
    Auto,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Spin-flip VCSEL with optical injection.
    #[default]
    SpinFlip,
    /// Fast two-variable excitable surrogate.
    FastSlow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_nodes: usize,
    /// Node duration theta, seconds.
    pub node_duration: f64,
    /// Samples per second.
    pub sample_rate: f64,
    /// Seconds.
    pub gap_duration: f64,
    pub mask_distribution: MaskDistribution,
    /// Fractional injected-power drop at drive level 1.
    pub modulation_depth: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = WaveformTiming::standard();
        Self {
            n_nodes: 512,
            node_duration: t.node_duration,
            sample_rate: t.sample_rate,
            gap_duration: t.gap_duration,
            mask_distribution: MaskDistribution::Symmetric,
            modulation_depth: Modulation::default().depth,
        }
    }
}

impl PipelineConfig {
    pub fn timing(&self) -> WaveformTiming {
        WaveformTiming {
            node_duration: self.node_duration,
            sample_rate: self.sample_rate,
            gap_duration: self.gap_duration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub threshold_mode: ThresholdMode,
    /// Absolute threshold used in manual mode (trace power units).
    pub threshold: Option<f64>,
    /// IQR multiplier for the spike-free fallback of the auto threshold.
    pub auto_iqr_factor: f64,
    /// Shift of all bin windows relative to the drive, seconds.
    pub latency_offset: f64,
    /// Seconds; must be an integer multiple of `experiment.dt`.
    pub trace_sample_period: f64,
    pub channel: ReadoutChannel,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold_mode: ThresholdMode::Auto,
            threshold: None,
            auto_iqr_factor: 3.0,
            latency_offset: 0.0,
            trace_sample_period: 5e-12,
            channel: ReadoutChannel::Subsidiary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub model: ModelKind,
    pub seed: u64,
    pub train_per_class: usize,
    pub simulation_mode: SimulationMode,
    /// Integration step, seconds.
    pub dt: f64,
    /// Append a bias column to the readout.
    pub intercept: bool,
    /// Training sizes per class for sweeps.
    pub sweep_sizes: Vec<usize>,
    pub sweep_runs: usize,
    /// Re-simulate (new mask and noise seed) for every sweep run instead of
    /// reusing one raster and re-splitting.
    pub resimulate_per_run: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            model: ModelKind::SpinFlip,
            seed: 7,
            train_per_class: 10,
            simulation_mode: SimulationMode::Continuous,
            dt: 0.1e-12,
            intercept: false,
            sweep_sizes: (1..=49).collect(),
            sweep_runs: 10,
            resimulate_per_run: false,
        }
    }
}

/// Grid as inclusive linear ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRange {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl GridRange {
    pub fn values(&self) -> Vec<f64> {
        match self.steps {
            0 => Vec::new(),
            1 => vec![self.min],
            n => (0..n)
                .map(|i| self.min + (self.max - self.min) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub injection_amplitude: Option<GridRange>,
    /// Hz.
    pub detuning: Option<GridRange>,
    pub target_margin: f64,
    pub reference: Perturbation,
    /// Seconds.
    pub lock_time: f64,
    pub spike_factor: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let s = CalibrationSettings::default();
        Self {
            injection_amplitude: Some(GridRange {
                min: 7.0,
                max: 14.0,
                steps: 29,
            }),
            detuning: Some(GridRange {
                min: -4e9,
                max: -2e9,
                steps: 3,
            }),
            target_margin: s.target_margin,
            reference: s.reference,
            lock_time: s.lock_time,
            spike_factor: s.spike_factor,
        }
    }
}

impl CalibrationConfig {
    pub fn grid(&self) -> Result<SearchGrid, ConfigError> {
        let amp = self
            .injection_amplitude
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("calibration.injection_amplitude is missing".into()))?;
        let det = self
            .detuning
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("calibration.detuning is missing".into()))?;
        if amp.steps == 0 {
            return Err(ConfigError::Invalid(
                "calibration.injection_amplitude.steps is 0 (empty grid)".into(),
            ));
        }
        if det.steps == 0 {
            return Err(ConfigError::Invalid(
                "calibration.detuning.steps is 0 (empty grid)".into(),
            ));
        }
        Ok(SearchGrid {
            injection_amplitude: amp.values(),
            detuning: det.values(),
        })
    }

    pub fn settings(&self, dt: f64) -> CalibrationSettings {
        CalibrationSettings {
            reference: self.reference,
            target_margin: self.target_margin,
            lock_time: self.lock_time,
            spike_factor: self.spike_factor,
            dt,
            ..CalibrationSettings::default()
        }
    }
}

/// Diagnostics written by a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    pub margin: f64,
    pub locking_boundary: f64,
    pub excitable_points: usize,
    pub locked_points: usize,
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub laser: LaserParams,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<FastSlowNeuron>,
    /// Present once `calibrate` has set the operating point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrated: Option<CalibrationRecord>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.laser
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("laser: {e}")))?;
        let p = &self.pipeline;
        if p.n_nodes == 0 {
            return inv("pipeline.n_nodes must be >= 1".into());
        }
        p.timing()
            .samples_per_node()
            .and_then(|_| p.timing().gap_samples())
            .map_err(|e| ConfigError::Invalid(format!("pipeline: {e}")))?;
        if !(0.0..=1.0).contains(&p.modulation_depth) {
            return inv("pipeline.modulation_depth must lie in [0, 1]".into());
        }
        let e = &self.experiment;
        if !(1..=49).contains(&e.train_per_class) {
            return inv(format!(
                "experiment.train_per_class must lie in [1, 49], got {}",
                e.train_per_class
            ));
        }
        if let Some(&bad) = e.sweep_sizes.iter().find(|s| !(1..=49).contains(*s)) {
            return inv(format!("experiment.sweep_sizes entry {bad} is outside [1, 49]"));
        }
        let d = &self.detector;
        if d.trace_sample_period > p.node_duration / 10.0 * (1.0 + 1e-9) {
            return inv("detector.trace_sample_period must be at most theta / 10".into());
        }
        self.sim_settings()
            .record_every()
            .map_err(|e| ConfigError::Invalid(format!("detector/experiment: {e}")))?;
        if d.threshold_mode == ThresholdMode::Manual {
            match d.threshold {
                Some(t) if t > 0.0 && t.is_finite() => {}
                _ => return inv("detector.threshold must be set (> 0) in manual mode".into()),
            }
        }
        Ok(())
    }

    pub fn sim_settings(&self) -> SimSettings {
        SimSettings {
            dt: self.experiment.dt,
            trace_sample_period: self.detector.trace_sample_period,
            seed: self.experiment.seed,
        }
    }

    pub fn modulation(&self) -> Modulation {
        Modulation {
            depth: self.pipeline.modulation_depth,
        }
    }

    /// Commented template with every default, for `init-config`.
    pub fn template() -> String {
        let body = Self::default().to_toml();
        let mut out = String::from(TEMPLATE_HEADER);
        for line in body.lines() {
            if let Some(note) = note_for(line) {
                out.push_str("# ");
                out.push_str(note);
                out.push('\n');
            }
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

const TEMPLATE_HEADER: &str = "\
# vcsel-snn experiment configuration. Units are SI: seconds, s^-1, Hz.
# Every key is shown with its default value.

";

fn note_for(line: &str) -> Option<&'static str> {
    let key = line.split('=').next()?.trim();
    Some(match key {
        "[laser]" => "Spin-flip model constants and operating point.",
        "field_decay_rate" => "Field decay rate kappa, s^-1.",
        "carrier_decay_rate" => "Carrier decay rate, s^-1.",
        "linewidth_enhancement" => "Linewidth enhancement factor alpha.",
        "spin_relaxation_rate" => "Spin relaxation rate, s^-1.",
        "birefringence_rate" => "Birefringence rate (angular), s^-1.",
        "dichroism_rate" => "Dichroism rate, s^-1; positive makes x the dominant mode.",
        "bias_pump" => "Pump normalized to threshold.",
        "injection_amplitude" => "Injected field amplitude at zero modulation (set by calibrate).",
        "detuning" => "Master minus subsidiary-mode frequency, Hz; negative = red-detuned.",
        "noise_strength" => "Spontaneous-emission noise strength; 0 disables noise.",
        "[pipeline]" => "Masking and waveform synthesis.",
        "n_nodes" => "Number of virtual nodes N_v.",
        "node_duration" => "Virtual-node duration theta, s.",
        "sample_rate" => "Waveform sample rate, samples/s; sample_rate * theta must be an integer.",
        "gap_duration" => "Quiet time between data points, s.",
        "mask_distribution" => "uniform ([0,1]), symmetric ([-1,1]) or binary ({0,1}).",
        "modulation_depth" => "Fractional injected-power drop at drive level 1.",
        "[detector]" => "Binning and thresholding.",
        "threshold_mode" => "auto (baseline/peak midpoint) or manual (uses `threshold`).",
        "auto_iqr_factor" => "IQR multiplier for the auto threshold when no spikes are present.",
        "latency_offset" => "Shift of all bin windows, s.",
        "trace_sample_period" => "Output sampling period, s; a multiple of dt and at most theta/10.",
        "channel" => "subsidiary (|Ey|^2) or total (|Ex|^2 + |Ey|^2).",
        "[experiment]" => "Run control.",
        "model" => "spin_flip or fast_slow (surrogate).",
        "seed" => "Master seed: mask, split and noise streams derive from it.",
        "train_per_class" => "Training points per class, 1..=49.",
        "simulation_mode" => "continuous or per_point (parallel, restarts at each gap).",
        "dt" => "Integration step, s (at most 0.5 ps).",
        "intercept" => "Add a bias column to the readout.",
        "sweep_sizes" => "Training sizes per class used by `sweep`.",
        "sweep_runs" => "Number of sweep runs (fresh split seed each).",
        "resimulate_per_run" => "Re-simulate with a new mask per sweep run instead of re-splitting.",
        "[calibration]" => "Operating-point search used by `calibrate`.",
        "target_margin" => "Preferred relative distance above the locking boundary.",
        "lock_time" => "Quiet time the locked state must stay spike-free, s.",
        "spike_factor" => "Spikes are crossings of this multiple of the locked output.",
        "[calibration.injection_amplitude]" => "Injection amplitude grid (inclusive, linear).",
        "[calibration.detuning]" => "Detuning grid, Hz.",
        "[calibration.reference]" => "Reference perturbation: power drop fraction and duration (s).",
        _ => return None,
    })
}
