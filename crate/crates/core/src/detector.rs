//! Spike detection: turns an intensity trace into the binary node-state
//! matrix by cutting each data point's output into `theta`-long bins and
//! thresholding the peak power inside every bin.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::input::WaveformLayout;
use crate::laser::IntensityTrace;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("threshold must be positive and finite, got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binary `n_points x n_nodes` matrix of fired / not-fired node states.
///
/// Rows follow the order of the layout segments; `point_ids[row]` names the
/// data point that produced the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeRaster {
    states: Vec<u8>,
    n_points: usize,
    n_nodes: usize,
    point_ids: Vec<usize>,
    pub theta: f64,
    pub threshold: f64,
}

impl SpikeRaster {
    pub fn from_rows(
        rows: Vec<Vec<u8>>,
        point_ids: Vec<usize>,
        theta: f64,
        threshold: f64,
    ) -> Result<Self, DetectorError> {
        let n_points = rows.len();
        let n_nodes = rows.first().map_or(0, Vec::len);
        if point_ids.len() != n_points {
            return Err(DetectorError::LayoutMismatch(format!(
                "{} point ids for {} rows",
                point_ids.len(),
                n_points
            )));
        }
        if rows.iter().any(|r| r.len() != n_nodes) {
            return Err(DetectorError::LayoutMismatch("ragged raster rows".into()));
        }
        let states: Vec<u8> = rows.into_iter().flatten().map(|v| u8::from(v != 0)).collect();
        Ok(Self {
            states,
            n_points,
            n_nodes,
            point_ids,
            theta,
            threshold,
        })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn point_ids(&self) -> &[usize] {
        &self.point_ids
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.states[i * self.n_nodes..(i + 1) * self.n_nodes]
    }

    pub fn get(&self, point: usize, node: usize) -> u8 {
        self.states[point * self.n_nodes + node]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.states.chunks_exact(self.n_nodes.max(1)).take(self.n_points)
    }

    /// Row index holding data point `id`, if present.
    pub fn row_of(&self, id: usize) -> Option<usize> {
        self.point_ids.iter().position(|&p| p == id)
    }

    /// Fraction of entries equal to 1.
    pub fn firing_fraction(&self) -> f64 {
        if self.states.is_empty() {
            return 0.0;
        }
        self.states.iter().map(|&s| s as f64).sum::<f64>() / self.states.len() as f64
    }

    /// Returns a copy with rows sorted by data point id.
    pub fn sorted_by_point(&self) -> Self {
        let mut order: Vec<usize> = (0..self.n_points).collect();
        order.sort_by_key(|&r| self.point_ids[r]);
        let mut states = Vec::with_capacity(self.states.len());
        for &r in &order {
            states.extend_from_slice(self.row(r));
        }
        Self {
            states,
            n_points: self.n_points,
            n_nodes: self.n_nodes,
            point_ids: order.iter().map(|&r| self.point_ids[r]).collect(),
            theta: self.theta,
            threshold: self.threshold,
        }
    }

    /// CSV with one row per data point and one 0/1 column per node.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.states.len() * 2);
        for row in self.rows() {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push(if *v == 1 { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DetectorError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parses a 0/1 CSV; row `i` is assigned point id `i`.
    pub fn from_csv(text: &str, theta: f64, threshold: f64) -> Result<Self, DetectorError> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|v| match v.trim() {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(DetectorError::LayoutMismatch(format!(
                        "line {}: expected 0 or 1, found `{other}`",
                        lineno + 1
                    ))),
                })
                .collect::<Result<Vec<u8>, _>>()?;
            rows.push(row);
        }
        let ids = (0..rows.len()).collect();
        Self::from_rows(rows, ids, theta, threshold)
    }

    /// Raster map as SVG: one row per data point, spiking nodes in green.
    pub fn to_svg(&self) -> String {
        let cell_w = (1200.0 / self.n_nodes.max(1) as f64).clamp(0.5, 8.0);
        let cell_h = 4.0;
        let width = cell_w * self.n_nodes as f64;
        let height = cell_h * self.n_points as f64;
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {width} {height}" shape-rendering="crispEdges">"#,
            width.max(1.0),
            height.max(1.0)
        );
        let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="black"/>"#);
        for (i, row) in self.rows().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v == 1 {
                    let _ = writeln!(
                        svg,
                        r##"<rect x="{}" y="{}" width="{cell_w}" height="{cell_h}" fill="#00c000"/>"##,
                        j as f64 * cell_w,
                        i as f64 * cell_h
                    );
                }
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Per-spike measurements on a trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpikeStats {
    pub spike_count: usize,
    /// Full width at half maximum above baseline, seconds.
    pub widths: Vec<f64>,
    /// Peak-to-peak intervals between consecutive spikes, seconds.
    pub inter_spike_intervals: Vec<f64>,
    pub peak_powers: Vec<f64>,
    /// Times of the spike peaks, seconds (same clock as the trace).
    pub peak_times: Vec<f64>,
}

impl SpikeStats {
    pub fn median_width(&self) -> Option<f64> {
        median(&self.widths)
    }
}

/// Trace sample range `[lo, hi)` covering the half-open window `[t0, t1)`.
fn sample_window(trace: &IntensityTrace, t0: f64, t1: f64) -> (usize, usize) {
    // Sample j sits at start + j * period; shave a hair off so that a sample
    // exactly on an edge goes to the later bin despite rounding.
    let eps = 1e-6;
    let to_index = |t: f64| {
        let x = (t - trace.start_time) / trace.sample_period - eps;
        if x <= 0.0 {
            0
        } else {
            x.ceil() as usize
        }
    };
    (to_index(t0), to_index(t1))
}

/// Cuts each data point's output into `theta` bins and marks a bin as a
/// spike when its peak exceeds `threshold`.
///
/// Bins are half-open `[t0 + i*theta, t0 + (i+1)*theta)`, where `t0` is the
/// segment start plus `latency_offset`. Gap periods are never binned.
pub fn bin_and_threshold(
    trace: &IntensityTrace,
    layout: &WaveformLayout,
    theta: f64,
    threshold: f64,
    latency_offset: f64,
) -> Result<SpikeRaster, DetectorError> {
    if trace.samples.is_empty() {
        return Err(DetectorError::EmptyTrace);
    }
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(DetectorError::InvalidThreshold(threshold));
    }
    let rel = (theta - layout.timing.node_duration).abs() / layout.timing.node_duration;
    if !(rel < 1e-9) {
        return Err(DetectorError::LayoutMismatch(format!(
            "theta {theta} does not match layout node duration {}",
            layout.timing.node_duration
        )));
    }
    let n_nodes = layout.n_nodes;
    let mut rows = Vec::with_capacity(layout.segments.len());
    let mut ids = Vec::with_capacity(layout.segments.len());
    for seg in &layout.segments {
        let t0 = trace.start_time + layout.segment_start_time(seg) + latency_offset;
        let (_, last_hi) = sample_window(trace, t0, t0 + n_nodes as f64 * theta);
        if last_hi > trace.samples.len() {
            return Err(DetectorError::LayoutMismatch(format!(
                "trace has {} samples but data point {} needs {}",
                trace.samples.len(),
                seg.point_id,
                last_hi
            )));
        }
        let row = (0..n_nodes)
            .map(|i| {
                let a = t0 + i as f64 * theta;
                let (lo, hi) = sample_window(trace, a, a + theta);
                let peak = trace.samples[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                u8::from(peak > threshold)
            })
            .collect();
        rows.push(row);
        ids.push(seg.point_id);
    }
    SpikeRaster::from_rows(rows, ids, theta, threshold)
}

/// Baseline-to-peak midpoint threshold.
///
/// The baseline is the trace median. When the largest excursion does not
/// clear `median + spread` (spread = `k * IQR`, at least 5 % of the
/// baseline), nor half the baseline, the trace is treated as spike-free and `median + spread` is
/// returned instead.
pub fn auto_threshold(trace: &IntensityTrace, k: f64) -> f64 {
    let mut sorted: Vec<f64> = trace.samples.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return f64::MIN_POSITIVE;
    }
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| quantile_sorted(&sorted, p);
    let median = q(0.5);
    let iqr = q(0.75) - q(0.25);
    let max = *sorted.last().unwrap();
    let spread = (k * iqr).max(0.05 * median.abs()).max(f64::MIN_POSITIVE);
    // Dense spiking inflates the IQR; an excursion of more than half the
    // baseline counts as a spike regardless.
    if max - median > spread || max - median > 0.5 * median.abs() {
        0.5 * (median + max)
    } else {
        median + spread
    }
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile_sorted(&v, 0.5))
}

/// Finds contiguous super-threshold excursions and measures each one.
///
/// Widths are taken at half of the spike's height above the trace median,
/// with linear interpolation between samples at both crossings.
pub fn spike_statistics(trace: &IntensityTrace, threshold: f64) -> SpikeStats {
    let y = &trace.samples;
    if y.is_empty() {
        return SpikeStats::default();
    }
    let baseline = median(y).unwrap_or(0.0);
    let dt = trace.sample_period;
    let mut stats = SpikeStats::default();
    let mut i = 0;
    while i < y.len() {
        if y[i] <= threshold {
            i += 1;
            continue;
        }
        let start = i;
        while i < y.len() && y[i] > threshold {
            i += 1;
        }
        let end = i;
        let (peak_idx, peak) = (start..end)
            .map(|j| (j, y[j]))
            .fold((start, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        let half = baseline + 0.5 * (peak - baseline);
        if peak <= half {
            // Excursion that never rises above the baseline: no measurable width.
            stats.spike_count += 1;
            stats.widths.push(0.0);
            stats.peak_powers.push(peak);
            stats.peak_times.push(trace.start_time + peak_idx as f64 * dt);
            continue;
        }

        let mut l = peak_idx;
        while l > 0 && y[l - 1] > half {
            l -= 1;
        }
        // Fractional crossing positions, in samples.
        let left = if l == 0 {
            0.0
        } else {
            let (a, b) = (y[l - 1], y[l]);
            (l - 1) as f64 + (half - a) / (b - a)
        };
        let mut r = peak_idx;
        while r + 1 < y.len() && y[r + 1] > half {
            r += 1;
        }
        let right = if r + 1 >= y.len() {
            r as f64
        } else {
            let (a, b) = (y[r], y[r + 1]);
            r as f64 + (a - half) / (a - b)
        };

        stats.spike_count += 1;
        stats.widths.push((right - left) * dt);
        stats.peak_powers.push(peak);
        stats.peak_times.push(trace.start_time + peak_idx as f64 * dt);
    }
    stats.inter_spike_intervals = stats.peak_times.windows(2).map(|w| w[1] - w[0]).collect();
    stats
}
