mod common;

use common::oracles::naive_raster;
use proptest::prelude::*;
use vcsel_snn::detector::{auto_threshold, bin_and_threshold, spike_statistics};
use vcsel_snn::input::{Segment, WaveformLayout, WaveformTiming};
use vcsel_snn::laser::IntensityTrace;

const THETA: f64 = 250e-12;

/// Layout at 12 GSa/s (3 drive samples per node, 24-sample gaps) together
/// with the trace-index start of every segment for a trace sampled every
/// `period` seconds.
fn layout(n_nodes: usize, n_points: usize, period: f64) -> (WaveformLayout, Vec<usize>) {
    let stride = n_nodes * 3 + 24;
    let segments: Vec<Segment> = (0..n_points)
        .map(|k| Segment {
            point_id: k,
            class: k % 3,
            start: k * stride,
            end: k * stride + n_nodes * 3,
        })
        .collect();
    let per_drive = (1.0 / 12e9 / period).round();
    let starts = segments
        .iter()
        .map(|s| (s.start as f64 * per_drive).round() as usize)
        .collect();
    (
        WaveformLayout {
            timing: WaveformTiming::standard(),
            n_nodes,
            samples_per_node: 3,
            gap_samples: 24,
            segments,
        },
        starts,
    )
}

fn case() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, f64)> {
    // Trace periods that divide the drive sample period.
    (
        1usize..12,
        1usize..5,
        prop::sample::select(vec![250e-12 / 60.0, 250e-12 / 30.0, 250e-12 / 6.0]),
    )
        .prop_flat_map(|(n_nodes, n_points, period)| {
            let per_bin = (THETA / period).round() as usize;
            let stride = n_nodes * per_bin + (2e-9 / period).round() as usize;
            let len = stride * n_points;
            (
                Just(n_nodes),
                Just(n_points),
                Just(per_bin),
                prop::collection::vec(0.0f64..3.0, len..len + 20),
                0.2f64..2.8,
            )
        })
}

fn trace(samples: Vec<f64>, per_bin: usize) -> IntensityTrace {
    IntensityTrace {
        samples,
        sample_period: THETA / per_bin as f64,
        start_time: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_per_sample_oracle((n_nodes, n_points, per_bin, samples, thr) in case()) {
        let tr = trace(samples, per_bin);
        let (lay, starts) = layout(n_nodes, n_points, tr.sample_period);
        let raster = bin_and_threshold(&tr, &lay, THETA, thr, 0.0).unwrap();
        let expect = naive_raster(&tr.samples, &starts, n_nodes, per_bin, thr);
        for (i, row) in expect.iter().enumerate() {
            prop_assert_eq!(raster.row(i), row.as_slice());
        }
    }

    #[test]
    fn raising_threshold_never_adds_spikes((n_nodes, n_points, per_bin, samples, thr) in case(), bump in 0.0f64..1.0) {
        let tr = trace(samples, per_bin);
        let (lay, _) = layout(n_nodes, n_points, tr.sample_period);
        let lo = bin_and_threshold(&tr, &lay, THETA, thr, 0.0).unwrap();
        let hi = bin_and_threshold(&tr, &lay, THETA, thr + bump, 0.0).unwrap();
        for (a, b) in lo.rows().zip(hi.rows()) {
            prop_assert!(a.iter().zip(b).all(|(x, y)| y <= x));
        }
    }

    #[test]
    fn common_scaling_is_invisible((n_nodes, n_points, per_bin, samples, thr) in case(), c in 0.1f64..10.0) {
        let tr = trace(samples, per_bin);
        let (lay, _) = layout(n_nodes, n_points, tr.sample_period);
        let scaled = IntensityTrace { samples: tr.samples.iter().map(|v| v * c).collect(), ..tr.clone() };
        let a = bin_and_threshold(&tr, &lay, THETA, thr, 0.0).unwrap();
        let b = bin_and_threshold(&scaled, &lay, THETA, thr * c, 0.0).unwrap();
        prop_assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn segment_order_only_permutes_rows((n_nodes, n_points, per_bin, samples, thr) in case()) {
        let tr = trace(samples, per_bin);
        let (lay, _) = layout(n_nodes, n_points, tr.sample_period);
        let mut rev = lay.clone();
        rev.segments.reverse();
        let a = bin_and_threshold(&tr, &lay, THETA, thr, 0.0).unwrap();
        let b = bin_and_threshold(&tr, &rev, THETA, thr, 0.0).unwrap();
        for id in 0..n_points {
            prop_assert_eq!(a.row(a.row_of(id).unwrap()), b.row(b.row_of(id).unwrap()));
        }
        prop_assert_eq!(a.to_csv(), b.sorted_by_point().to_csv());
    }

    #[test]
    fn spike_count_is_number_of_excursions(samples in prop::collection::vec(0.0f64..3.0, 1..400), thr in 0.2f64..2.8) {
        let tr = trace(samples, 50);
        let runs = tr.samples.iter().enumerate()
            .filter(|&(j, &v)| v > thr && (j == 0 || tr.samples[j - 1] <= thr))
            .count();
        let st = spike_statistics(&tr, thr);
        prop_assert_eq!(st.spike_count, runs);
        prop_assert_eq!(st.widths.len(), runs);
        prop_assert!(st.widths.iter().all(|w| *w >= 0.0));
        prop_assert!(st.peak_powers.iter().all(|p| *p > thr));
        prop_assert!(st.inter_spike_intervals.iter().all(|d| *d > 0.0));
    }

    #[test]
    fn auto_threshold_sits_above_the_median(samples in prop::collection::vec(0.5f64..3.0, 3..300)) {
        let tr = trace(samples, 50);
        let mut sorted = tr.samples.clone();
        sorted.sort_by(f64::total_cmp);
        let thr = auto_threshold(&tr, 3.0);
        let median = if sorted.len() % 2 == 1 { sorted[sorted.len() / 2] } else { 0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) };
        prop_assert!(thr > median);
    }
}

#[test]
fn flat_trace_never_spikes_at_auto_threshold() {
    let tr = trace(vec![1.0; 1000], 50);
    let thr = auto_threshold(&tr, 3.0);
    assert!(thr > 1.0);
    let (lay, _) = layout(4, 2, tr.sample_period);
    let raster = bin_and_threshold(&tr, &lay, THETA, thr, 0.0).unwrap();
    assert_eq!(raster.firing_fraction(), 0.0);
}
