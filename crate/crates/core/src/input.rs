//! Input layer: random masking of feature vectors and synthesis of the
//! time-multiplexed drive waveform.
//!
//! Every data point is multiplied by the same `N_v x n_features` mask. The
//! resulting node values are held for one node duration `theta` each,
//! sampled at the arbitrary-waveform-generator rate, and data points are
//! concatenated with quiet gaps between them.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of features in an Iris data point.
pub const IRIS_FEATURES: usize = 4;

/// Random stream used for mask generation (see [`crate::seeds`]).
const MASK_STREAM: u64 = 0;

#[derive(Debug, Error)]
pub enum InputError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no data points to synthesize")]
    EmptyInput,
    #[error("invalid timing: {0}")]
    InvalidTiming(String),
    #[error("feature {name} = {value} is outside (0, 10)")]
    FeatureOutOfRange { name: &'static str, value: f64 },
    #[error("waveform file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One Iris specimen, all lengths in cm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub sepal_length: f64,
    pub sepal_width: f64,
    pub petal_length: f64,
    pub petal_width: f64,
}

impl FeatureVector {
    pub const NAMES: [&'static str; IRIS_FEATURES] = ["sepal_length", "sepal_width", "petal_length", "petal_width"];

    /// Builds a validated feature vector; every value must lie in (0, 10).
    pub fn new(sepal_length: f64, sepal_width: f64, petal_length: f64, petal_width: f64) -> Result<Self, InputError> {
        let fv = Self {
            sepal_length,
            sepal_width,
            petal_length,
            petal_width,
        };
        for (name, value) in Self::NAMES.iter().zip(fv.to_array()) {
            if !(value > 0.0 && value < 10.0) {
                return Err(InputError::FeatureOutOfRange { name, value });
            }
        }
        Ok(fv)
    }

    pub fn to_array(&self) -> [f64; IRIS_FEATURES] {
        [self.sepal_length, self.sepal_width, self.petal_length, self.petal_width]
    }
}

/// Distribution the mask entries are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskDistribution {
    /// Uniform on [0, 1].
    #[default]
    Uniform,
    /// Uniform on [-1, 1].
    Symmetric,
    /// Bernoulli on {0, 1} with p = 1/2.
    Binary,
}

impl fmt::Display for MaskDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MaskDistribution::Uniform => "uniform",
            MaskDistribution::Symmetric => "symmetric",
            MaskDistribution::Binary => "binary",
        };
        f.write_str(name)
    }
}

/// Random input weight matrix, stored row-major (one row per virtual node).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    entries: Vec<f64>,
    n_nodes: usize,
    n_features: usize,
    seed: u64,
    distribution: MaskDistribution,
}

impl MaskMatrix {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn distribution(&self) -> MaskDistribution {
        self.distribution
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, node: usize, feature: usize) -> f64 {
        self.entries[node * self.n_features + feature]
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.entries[node * self.n_features..(node + 1) * self.n_features]
    }

    /// Builds a mask from explicit row-major entries.
    pub fn from_rows(entries: Vec<f64>, n_nodes: usize, n_features: usize) -> Result<Self, InputError> {
        if n_nodes == 0 || n_features == 0 {
            return Err(InputError::InvalidDimension(format!(
                "mask must be at least 1x1, got {n_nodes}x{n_features}"
            )));
        }
        if entries.len() != n_nodes * n_features {
            return Err(InputError::DimensionMismatch {
                expected: n_nodes * n_features,
                got: entries.len(),
            });
        }
        Ok(Self {
            entries,
            n_nodes,
            n_features,
            seed: 0,
            distribution: MaskDistribution::Uniform,
        })
    }

    /// Matrix-vector product of the mask with an arbitrary feature vector.
    pub fn apply(&self, features: &[f64]) -> Result<NodeSequence, InputError> {
        if features.len() != self.n_features {
            return Err(InputError::DimensionMismatch {
                expected: self.n_features,
                got: features.len(),
            });
        }
        let values = self
            .entries
            .chunks_exact(self.n_features)
            .map(|row| row.iter().zip(features).map(|(m, x)| m * x).sum())
            .collect();
        Ok(NodeSequence { values })
    }
}

/// Draws a seeded random mask with `n_nodes` rows and `n_features` columns.
pub fn build_mask(
    seed: u64,
    n_nodes: usize,
    n_features: usize,
    distribution: MaskDistribution,
) -> Result<MaskMatrix, InputError> {
    if n_nodes == 0 || n_features == 0 {
        return Err(InputError::InvalidDimension(format!(
            "mask needs n_nodes >= 1 and n_features >= 1, got {n_nodes}x{n_features}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MASK_STREAM);
    let entries = (0..n_nodes * n_features)
        .map(|_| match distribution {
            MaskDistribution::Uniform => rng.random::<f64>(),
            MaskDistribution::Symmetric => rng.random_range(-1.0..=1.0),
            MaskDistribution::Binary => {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect();
    Ok(MaskMatrix {
        entries,
        n_nodes,
        n_features,
        seed,
        distribution,
    })
}

/// Per-node drive values for one data point.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSequence {
    pub values: Vec<f64>,
}

impl NodeSequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Applies the mask to an Iris data point.
pub fn mask_datapoint(mask: &MaskMatrix, features: &FeatureVector) -> Result<NodeSequence, InputError> {
    if mask.n_features() != IRIS_FEATURES {
        return Err(InputError::DimensionMismatch {
            expected: IRIS_FEATURES,
            got: mask.n_features(),
        });
    }
    mask.apply(&features.to_array())
}

/// A node sequence tagged with the data point it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub point_id: usize,
    pub class: usize,
    pub sequence: NodeSequence,
}

/// Sorts sequences by class, keeping the original order within a class.
pub fn group_by_class(sequences: &mut [LabeledSequence]) {
    sequences.sort_by_key(|s| s.class);
}

/// Timing of the synthesized waveform. All durations in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveformTiming {
    /// Virtual-node duration (theta).
    pub node_duration: f64,
    /// AWG sample rate in samples per second.
    pub sample_rate: f64,
    /// Quiet interval between consecutive data points.
    pub gap_duration: f64,
}

impl WaveformTiming {
    /// 250 ps nodes at 12 GSa/s with 2 ns gaps.
    pub fn standard() -> Self {
        Self {
            node_duration: 250e-12,
            sample_rate: 12e9,
            gap_duration: 2e-9,
        }
    }

    pub fn samples_per_node(&self) -> Result<usize, InputError> {
        let n = integral_samples(self.node_duration * self.sample_rate, "sample_rate * theta")?;
        if n == 0 {
            return Err(InputError::InvalidTiming(
                "sample_rate * theta must be a positive integer".into(),
            ));
        }
        Ok(n)
    }

    pub fn gap_samples(&self) -> Result<usize, InputError> {
        if !(self.gap_duration >= 0.0) {
            return Err(InputError::InvalidTiming(format!(
                "gap must be >= 0, got {}",
                self.gap_duration
            )));
        }
        integral_samples(self.gap_duration * self.sample_rate, "sample_rate * gap")
    }
}

fn integral_samples(x: f64, what: &str) -> Result<usize, InputError> {
    let rounded = x.round();
    if !x.is_finite() || x < 0.0 || (x - rounded).abs() > 1e-6 * rounded.max(1.0) {
        return Err(InputError::InvalidTiming(format!(
            "{what} must be a non-negative integer, got {x}"
        )));
    }
    Ok(rounded as usize)
}

/// Affine map `level = (raw - offset) * gain` into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineScale {
    pub offset: f64,
    pub gain: f64,
}

impl AffineScale {
    /// Maps `[min, max]` onto `[0, 1]`. A degenerate range maps everything to 0.
    pub fn from_range(min: f64, max: f64) -> Self {
        let span = max - min;
        if span > 0.0 && span.is_finite() {
            Self {
                offset: min,
                gain: 1.0 / span,
            }
        } else {
            Self { offset: min, gain: 0.0 }
        }
    }

    pub fn apply(&self, raw: f64) -> f64 {
        ((raw - self.offset) * self.gain).clamp(0.0, 1.0)
    }
}

/// One data point's slice of the waveform: samples `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub point_id: usize,
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

/// Where each data point lives inside a drive waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformLayout {
    pub timing: WaveformTiming,
    pub n_nodes: usize,
    pub samples_per_node: usize,
    pub gap_samples: usize,
    pub segments: Vec<Segment>,
}

impl WaveformLayout {
    pub fn sample_period(&self) -> f64 {
        1.0 / self.timing.sample_rate
    }

    /// Start time of a segment relative to the first waveform sample.
    pub fn segment_start_time(&self, segment: &Segment) -> f64 {
        segment.start as f64 / self.timing.sample_rate
    }

    /// Total number of samples covered by the layout.
    pub fn total_samples(&self) -> usize {
        self.segments.iter().map(|s| s.end).max().unwrap_or(0)
    }
}

/// Sampled modulation signal for the optical injection.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveWaveform {
    /// Modulation levels in [0, 1]; 0 means no modulation.
    pub samples: Vec<f64>,
    pub layout: WaveformLayout,
    pub scale: AffineScale,
}

impl DriveWaveform {
    pub fn sample_rate(&self) -> f64 {
        self.layout.timing.sample_rate
    }

    pub fn sample_period(&self) -> f64 {
        self.layout.sample_period()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Builds a waveform from raw levels with a single segment spanning it,
    /// for driving the laser with hand-made stimuli.
    pub fn from_levels(levels: Vec<f64>, sample_rate: f64) -> Self {
        let n = levels.len();
        Self {
            samples: levels,
            layout: WaveformLayout {
                timing: WaveformTiming {
                    node_duration: 1.0 / sample_rate,
                    sample_rate,
                    gap_duration: 0.0,
                },
                n_nodes: n,
                samples_per_node: 1,
                gap_samples: 0,
                segments: vec![Segment {
                    point_id: 0,
                    class: 0,
                    start: 0,
                    end: n,
                }],
            },
            scale: AffineScale { offset: 0.0, gain: 1.0 },
        }
    }

    /// Writes `index,level` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), InputError> {
        let mut out = String::with_capacity(self.samples.len() * 16);
        out.push_str("index,level\n");
        for (i, level) in self.samples.iter().enumerate() {
            out.push_str(&format!("{i},{level}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Writes the layout and scale sidecar as TOML.
    pub fn write_metadata(&self, path: &Path) -> Result<(), InputError> {
        let meta = WaveformMetadata {
            scale: self.scale,
            layout: self.layout.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| InputError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Reads a waveform back from its CSV and metadata sidecar.
    pub fn read(csv_path: &Path, metadata_path: &Path) -> Result<Self, InputError> {
        let meta: WaveformMetadata =
            toml::from_str(&std::fs::read_to_string(metadata_path)?).map_err(|e| InputError::Format(e.to_string()))?;
        let text = std::fs::read_to_string(csv_path)?;
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (idx, level) = line
                .split_once(',')
                .ok_or_else(|| InputError::Format(format!("line {}: expected `index,level`", lineno + 1)))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| InputError::Format(format!("line {}: bad index", lineno + 1)))?;
            if idx != samples.len() {
                return Err(InputError::Format(format!(
                    "line {}: expected index {}, found {idx}",
                    lineno + 1,
                    samples.len()
                )));
            }
            let level: f64 = level
                .trim()
                .parse()
                .map_err(|_| InputError::Format(format!("line {}: bad level", lineno + 1)))?;
            samples.push(level);
        }
        if samples.len() < meta.layout.total_samples() {
            return Err(InputError::Format(format!(
                "layout needs {} samples, csv has {}",
                meta.layout.total_samples(),
                samples.len()
            )));
        }
        Ok(Self {
            samples,
            layout: meta.layout,
            scale: meta.scale,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WaveformMetadata {
    scale: AffineScale,
    layout: WaveformLayout,
}

/// Concatenates masked data points into a drive waveform.
///
/// Sequences are laid out in the order given, each node value held for
/// `samples_per_node` samples, with `gap_samples` zero-level samples between
/// consecutive points and no trailing gap. Raw values are mapped into [0, 1]
/// with the global min/max over all sequences.
pub fn synthesize_waveform(sequences: &[LabeledSequence], timing: WaveformTiming) -> Result<DriveWaveform, InputError> {
    let first = sequences.first().ok_or(InputError::EmptyInput)?;
    let n_nodes = first.sequence.len();
    if n_nodes == 0 {
        return Err(InputError::EmptyInput);
    }
    if let Some(bad) = sequences.iter().find(|s| s.sequence.len() != n_nodes) {
        return Err(InputError::DimensionMismatch {
            expected: n_nodes,
            got: bad.sequence.len(),
        });
    }
    let samples_per_node = timing.samples_per_node()?;
    let gap_samples = timing.gap_samples()?;

    let (min, max) = sequences
        .iter()
        .flat_map(|s| s.sequence.values.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let scale = AffineScale::from_range(min, max);

    let active = n_nodes * samples_per_node;
    let total = sequences.len() * active + (sequences.len() - 1) * gap_samples;
    let mut samples = Vec::with_capacity(total);
    let mut segments = Vec::with_capacity(sequences.len());
    for (k, seq) in sequences.iter().enumerate() {
        if k > 0 {
            samples.extend(std::iter::repeat_n(0.0, gap_samples));
        }
        let start = samples.len();
        for &v in &seq.sequence.values {
            samples.extend(std::iter::repeat_n(scale.apply(v), samples_per_node));
        }
        segments.push(Segment {
            point_id: seq.point_id,
            class: seq.class,
            start,
            end: samples.len(),
        });
    }
    debug_assert_eq!(samples.len(), total);

    Ok(DriveWaveform {
        samples,
        layout: WaveformLayout {
            timing,
            n_nodes,
            samples_per_node,
            gap_samples,
            segments,
        },
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: usize, class: usize, values: Vec<f64>) -> LabeledSequence {
        LabeledSequence {
            point_id: id,
            class,
            sequence: NodeSequence { values },
        }
    }

    #[test]
    fn mask_shape_and_determinism() {
        let a = build_mask(7, 512, 4, MaskDistribution::Uniform).unwrap();
        let b = build_mask(7, 512, 4, MaskDistribution::Uniform).unwrap();
        assert_eq!(a.n_nodes(), 512);
        assert_eq!(a.n_features(), 4);
        assert_eq!(a.entries().len(), 2048);
        assert_eq!(a, b);
        assert!(a.entries().iter().all(|&m| (0.0..=1.0).contains(&m)));
        let c = build_mask(8, 512, 4, MaskDistribution::Uniform).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mask_distributions_respect_support() {
        let s = build_mask(1, 256, 4, MaskDistribution::Symmetric).unwrap();
        assert!(s.entries().iter().all(|&m| (-1.0..=1.0).contains(&m)));
        assert!(s.entries().iter().any(|&m| m < 0.0));
        let b = build_mask(1, 256, 4, MaskDistribution::Binary).unwrap();
        assert!(b.entries().iter().all(|&m| m == 0.0 || m == 1.0));
    }

    #[test]
    fn zero_nodes_is_invalid() {
        assert!(matches!(
            build_mask(7, 0, 4, MaskDistribution::Uniform),
            Err(InputError::InvalidDimension(_))
        ));
        assert!(matches!(
            build_mask(7, 4, 0, MaskDistribution::Uniform),
            Err(InputError::InvalidDimension(_))
        ));
    }

    #[test]
    fn all_ones_mask_sums_features() {
        let mask = MaskMatrix::from_rows(vec![1.0; 32], 8, 4).unwrap();
        let fv = FeatureVector::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let seq = mask_datapoint(&mask, &fv).unwrap();
        assert_eq!(seq.values, vec![10.0; 8]);
    }

    #[test]
    fn zero_features_give_zero_sequence() {
        let mask = build_mask(3, 16, 4, MaskDistribution::Symmetric).unwrap();
        let seq = mask.apply(&[0.0; 4]).unwrap();
        assert!(seq.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_column_mismatch() {
        let mask = build_mask(3, 16, 3, MaskDistribution::Uniform).unwrap();
        let fv = FeatureVector::new(5.1, 3.5, 1.4, 0.2).unwrap();
        assert!(matches!(
            mask_datapoint(&mask, &fv),
            Err(InputError::DimensionMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn feature_range_is_checked() {
        assert!(FeatureVector::new(5.1, 3.5, 1.4, 0.2).is_ok());
        assert!(FeatureVector::new(0.0, 3.5, 1.4, 0.2).is_err());
        assert!(FeatureVector::new(5.1, 10.0, 1.4, 0.2).is_err());
        assert!(FeatureVector::new(5.1, 3.5, f64::NAN, 0.2).is_err());
    }

    #[test]
    fn standard_timing_sample_counts() {
        let t = WaveformTiming::standard();
        assert_eq!(t.samples_per_node().unwrap(), 3);
        assert_eq!(t.gap_samples().unwrap(), 24);
    }

    #[test]
    fn non_integral_samples_per_node_rejected() {
        let t = WaveformTiming {
            node_duration: 100e-12,
            sample_rate: 12e9,
            gap_duration: 2e-9,
        };
        assert!(matches!(t.samples_per_node(), Err(InputError::InvalidTiming(_))));
    }

    #[test]
    fn synthesize_layout_and_gaps() {
        let seqs = vec![
            seq(0, 0, vec![0.0, 1.0]),
            seq(1, 1, vec![2.0, 4.0]),
            seq(2, 2, vec![3.0, 0.5]),
        ];
        let wf = synthesize_waveform(&seqs, WaveformTiming::standard()).unwrap();
        assert_eq!(wf.len(), 3 * 6 + 2 * 24);
        let segs = &wf.layout.segments;
        assert_eq!((segs[0].start, segs[0].end), (0, 6));
        assert_eq!((segs[1].start, segs[1].end), (30, 36));
        assert_eq!((segs[2].start, segs[2].end), (60, 66));
        assert!(wf.samples[6..30].iter().all(|&v| v == 0.0));
        assert_eq!(&wf.samples[30..36], &[0.5, 0.5, 0.5, 1.0, 1.0, 1.0]);
        assert_eq!(wf.samples[0], 0.0);
    }

    #[test]
    fn synthesize_rejects_ragged_and_empty() {
        assert!(matches!(
            synthesize_waveform(&[], WaveformTiming::standard()),
            Err(InputError::EmptyInput)
        ));
        let seqs = vec![seq(0, 0, vec![1.0, 2.0]), seq(1, 0, vec![1.0])];
        assert!(matches!(
            synthesize_waveform(&seqs, WaveformTiming::standard()),
            Err(InputError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn grouping_is_stable() {
        let mut seqs = vec![
            seq(0, 2, vec![1.0]),
            seq(1, 0, vec![1.0]),
            seq(2, 1, vec![1.0]),
            seq(3, 0, vec![1.0]),
        ];
        group_by_class(&mut seqs);
        let ids: Vec<usize> = seqs.iter().map(|s| s.point_id).collect();
        assert_eq!(ids, vec![1, 3, 2, 0]);
    }

    #[test]
    fn waveform_files_round_trip() {
        let seqs = vec![seq(0, 0, vec![0.1, 0.7, 0.3]), seq(1, 1, vec![0.9, 0.2, 0.4])];
        let wf = synthesize_waveform(&seqs, WaveformTiming::standard()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("drive.csv");
        let meta = dir.path().join("drive.toml");
        wf.write_csv(&csv).unwrap();
        wf.write_metadata(&meta).unwrap();
        let back = DriveWaveform::read(&csv, &meta).unwrap();
        assert_eq!(back, wf);
    }
}
