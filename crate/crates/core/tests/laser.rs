use num_complex::Complex64;
use vcsel_snn::detector::spike_statistics;
use vcsel_snn::input::DriveWaveform;
use vcsel_snn::laser::*;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn neuron() -> SpinFlipNeuron {
    SpinFlipNeuron::new(
        LaserParams::default(),
        Modulation::default(),
        ReadoutChannel::Subsidiary,
    )
    .unwrap()
}

fn rhs_norm(s: &LaserState, p: &LaserParams, k: f64) -> f64 {
    derivative(s, p, c(k)).iter().map(|v| v.abs()).fold(0.0, f64::max)
}

#[test]
fn free_running_laser_settles() {
    let p = LaserParams::default();
    let mut s = LaserState::free_running_guess(&p);
    let mut last = Vec::new();
    for i in 0..1_000_000 {
        s = step(&s, &p, c(0.0), 0.1e-12).unwrap();
        if i >= 999_000 {
            last.push(s.total_intensity());
        }
    }
    let (lo, hi) = last
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!((hi - lo) / hi < 1e-6, "intensity still moving: {lo}..{hi}");
}

#[test]
fn solitary_steady_state_favours_dominant_mode() {
    let st = steady_state(&LaserParams::default(), c(0.0)).unwrap();
    assert!(st.state.intensity_y() < st.state.intensity_x());
}

#[test]
fn below_threshold_emits_nothing() {
    let p = LaserParams {
        bias_pump: 0.5,
        ..LaserParams::default()
    };
    let st = steady_state(&p, c(0.0)).unwrap();
    assert!(st.state.total_intensity() < 1e-6);
}

#[test]
fn locked_state_is_a_fixed_point() {
    let p = LaserParams::default();
    let st = steady_state(&p, c(p.injection_amplitude)).unwrap();
    // Residual evaluated straight from the model equations.
    assert!(rhs_norm(&st.state, &p, p.injection_amplitude) < 1e-10);
    // Locking: subsidiary mode carries the power.
    assert!(st.state.intensity_y() > st.state.intensity_x());

    let mut s = st.state;
    for _ in 0..100_000 {
        s = step(&s, &p, c(p.injection_amplitude), 0.1e-12).unwrap();
    }
    let dev = (s.field_y - st.state.field_y).norm() + (s.carrier_inversion - st.state.carrier_inversion).abs();
    assert!(dev < 1e-8, "drifted by {dev}");
}

#[test]
fn root_finding_agrees_with_integration() {
    let p = LaserParams::default();
    let a = steady_state(&p, c(p.injection_amplitude)).unwrap();
    let perturbed = LaserState {
        field_y: a.state.field_y * 1.01,
        carrier_inversion: a.state.carrier_inversion + 1e-3,
        ..a.state
    };
    let short = SteadyStateSettings {
        max_time: 0.05e-9,
        ..SteadyStateSettings::default()
    };
    let b = steady_state_from(&p, c(p.injection_amplitude), &perturbed, &short).unwrap();
    assert!((a.state.field_y - b.state.field_y).norm() < 1e-8);
    assert!(b.residual < 1e-10);
}

#[test]
fn quiet_drive_gives_flat_trace() {
    let n = neuron();
    let drive = DriveWaveform::from_levels(vec![0.0; 600], 12e9);
    let tr = simulate(&n, &drive, &SimSettings::default(), SimulationMode::Continuous).unwrap();
    let b = n.baseline();
    assert!(tr.samples.iter().all(|v| (v - b).abs() < 1e-9 * b));
    assert_eq!(spike_statistics(&tr, 1.01 * b).spike_count, 0);
}

#[test]
fn single_drop_fires_one_fast_spike_and_recovers() {
    let n = neuron();
    let b = n.baseline();
    let s = SimSettings {
        trace_sample_period: 1e-12,
        ..SimSettings::default()
    };
    let tr = perturbation_response(&n, &[(0.5e-9, Perturbation::default())], 6e-9, &s).unwrap();
    let st = spike_statistics(&tr, 1.6 * b);
    assert_eq!(st.spike_count, 1);
    assert!((50e-12..=300e-12).contains(&st.widths[0]), "width {}", st.widths[0]);
    let tail = &tr.samples[tr.samples.len() - 500..];
    assert!(tail.iter().all(|v| (v - b).abs() < 0.05 * b));
}

#[test]
fn close_second_drop_is_suppressed() {
    let n = neuron();
    let b = n.baseline();
    let s = SimSettings {
        trace_sample_period: 1e-12,
        ..SimSettings::default()
    };
    let p = Perturbation::default();
    let one = spike_statistics(&perturbation_response(&n, &[(0.5e-9, p)], 6e-9, &s).unwrap(), 1.6 * b);
    let two = spike_statistics(
        &perturbation_response(&n, &[(0.5e-9, p), (0.8e-9, p)], 6e-9, &s).unwrap(),
        1.6 * b,
    );
    let attenuated = two.spike_count == 1 || two.peak_powers[1] < 0.9 * one.peak_powers[0];
    assert!(attenuated, "{two:?}");
}

#[test]
fn simulation_is_deterministic_with_noise() {
    let p = LaserParams {
        noise_strength: 1e-4,
        ..LaserParams::default()
    };
    let n = SpinFlipNeuron::new(p, Modulation::default(), ReadoutChannel::Subsidiary).unwrap();
    let levels: Vec<f64> = (0..240).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
    let drive = DriveWaveform::from_levels(levels, 12e9);
    let s = SimSettings {
        seed: 3,
        ..SimSettings::default()
    };
    let a = simulate(&n, &drive, &s, SimulationMode::Continuous).unwrap();
    let b = simulate(&n, &drive, &s, SimulationMode::Continuous).unwrap();
    assert_eq!(a, b);
    let other = simulate(&n, &drive, &SimSettings { seed: 4, ..s }, SimulationMode::Continuous).unwrap();
    assert_ne!(a, other);
}

#[test]
fn total_channel_adds_dominant_mode() {
    let p = LaserParams::default();
    let sub = neuron();
    let tot = SpinFlipNeuron::new(p, Modulation::default(), ReadoutChannel::Total).unwrap();
    assert!(tot.baseline() >= sub.baseline());
}

#[test]
fn deep_locked_grid_has_no_excitable_point() {
    let p = LaserParams::default();
    for k in [12.0, 13.0] {
        let st = steady_state(
            &LaserParams {
                injection_amplitude: k,
                ..p
            },
            c(k),
        )
        .unwrap();
        assert_eq!(st.method, SteadyStateMethod::Integration);
    }
    let grid = SearchGrid {
        injection_amplitude: vec![12.0, 13.0],
        detuning: vec![-3e9],
    };
    let settings = CalibrationSettings {
        lock_time: 20e-9,
        ..CalibrationSettings::default()
    };
    assert!(matches!(
        calibrate_operating_point(&p, &grid, &settings),
        Err(LaserError::NoExcitablePointFound(_))
    ));
}

#[test]
fn surrogate_fires_on_positive_drive() {
    let m = FastSlowNeuron::default();
    let mut levels = vec![0.0; 120];
    for v in levels.iter_mut().skip(30).take(6) {
        *v = 1.0;
    }
    let drive = DriveWaveform::from_levels(levels, 12e9);
    let tr = simulate(&m, &drive, &SimSettings::default(), SimulationMode::Continuous).unwrap();
    let rest = tr.samples[0];
    let peak = tr.samples.iter().copied().fold(f64::MIN, f64::max);
    assert!(peak > rest + 1.0);
}
