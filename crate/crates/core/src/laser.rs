//! Optically injected VCSEL neuron.
//!
//! The dynamics follow the spin-flip model of a two-polarization VCSEL with
//! a master laser injected into the subsidiary (`y`) polarization. The
//! equations are written in a frame rotating at the master frequency and
//! integrated in nanosecond units:
//!
//! ```text
//! dEx/dt = k(1+ia)[(N-1)Ex + i n Ey] + (ga - i gp)Ex - i w Ex
//! dEy/dt = k(1+ia)[(N-1)Ey - i n Ex] + (-ga + i gp)Ey - i w Ey + Einj
//! dN/dt  = -gN [N(1 + |Ex|^2 + |Ey|^2) - mu + n X]
//! dn/dt  = -gs n - gN [n(|Ex|^2 + |Ey|^2) + N X]
//! X      = Re(i (Ey Ex* - Ex Ey*))
//! ```
//!
//! With `ga > 0` the `x` mode is dominant. The free-running `y` resonance
//! sits at `gp + a ga`; the master frequency is `w = gp + a ga + 2 pi df`,
//! so a negative detuning `df` means the master is red-detuned from it.
//!
//! The public API uses SI units (seconds, s^-1, Hz).

use std::path::Path;

use nalgebra::{Matrix6, Vector6};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::input::DriveWaveform;

/// Random stream used for Langevin noise.
const NOISE_STREAM: u64 = 2;

const NS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LaserError {
    #[error("state became non-finite at t = {time:e} s")]
    NonFiniteState { time: f64 },
    #[error("drive waveform is empty")]
    EmptyDrive,
    #[error("invalid laser parameters: {0}")]
    InvalidParams(String),
    #[error("invalid timing: {0}")]
    InvalidTiming(String),
    #[error("steady state not reached: {0}")]
    NoConvergence(String),
    #[error("no excitable operating point in the search grid: {0}")]
    NoExcitablePointFound(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Spin-flip model constants and operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaserParams {
    /// Field decay rate `k`, s^-1.
    pub field_decay_rate: f64,
    /// Carrier decay rate `gN`, s^-1.
    pub carrier_decay_rate: f64,
    /// Linewidth enhancement factor `a`.
    pub linewidth_enhancement: f64,
    /// Spin relaxation rate `gs`, s^-1.
    pub spin_relaxation_rate: f64,
    /// Birefringence rate `gp`, s^-1 (angular).
    pub birefringence_rate: f64,
    /// Dichroism rate `ga`, s^-1.
    pub dichroism_rate: f64,
    /// Normalized pump; 1 at threshold.
    pub bias_pump: f64,
    /// Injected field amplitude at zero modulation, normalized field units
    /// per ns (the `Einj` term of the `y` equation).
    pub injection_amplitude: f64,
    /// Master minus subsidiary-mode frequency, Hz.
    pub detuning: f64,
    /// Spontaneous-emission noise strength (0 disables noise).
    pub noise_strength: f64,
}

impl Default for LaserParams {
    fn default() -> Self {
        Self {
            field_decay_rate: 150e9,
            carrier_decay_rate: 1e9,
            linewidth_enhancement: 3.0,
            spin_relaxation_rate: 50e9,
            birefringence_rate: 2.0 * std::f64::consts::PI * 30e9,
            dichroism_rate: 0.1e9,
            bias_pump: 2.9,
            injection_amplitude: 9.75,
            detuning: -3e9,
            noise_strength: 0.0,
        }
    }
}

impl LaserParams {
    pub fn validate(&self) -> Result<(), LaserError> {
        let rates = [
            ("field_decay_rate", self.field_decay_rate),
            ("carrier_decay_rate", self.carrier_decay_rate),
            ("spin_relaxation_rate", self.spin_relaxation_rate),
            ("birefringence_rate", self.birefringence_rate),
            ("dichroism_rate", self.dichroism_rate),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LaserError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        let finite = [
            ("linewidth_enhancement", self.linewidth_enhancement),
            ("bias_pump", self.bias_pump),
            ("injection_amplitude", self.injection_amplitude),
            ("detuning", self.detuning),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(LaserError::InvalidParams(format!("{name} is not finite")));
            }
        }
        if self.bias_pump < 0.0 || self.injection_amplitude < 0.0 {
            return Err(LaserError::InvalidParams(
                "bias_pump and injection_amplitude must be non-negative".into(),
            ));
        }
        if !(self.noise_strength >= 0.0 && self.noise_strength.is_finite()) {
            return Err(LaserError::InvalidParams("noise_strength must be >= 0".into()));
        }
        Ok(())
    }

    /// Free-running frequency of the subsidiary mode in the model's
    /// reference frame, rad/ns.
    pub fn subsidiary_resonance(&self) -> f64 {
        (self.birefringence_rate + self.linewidth_enhancement * self.dichroism_rate) * NS
    }
}

/// Instantaneous model state. Fields are complex slowly-varying amplitudes
/// in the frame of the master laser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserState {
    pub field_x: Complex64,
    pub field_y: Complex64,
    pub carrier_inversion: f64,
    pub spin_imbalance: f64,
    /// Seconds.
    pub time: f64,
}

impl LaserState {
    /// Solitary-laser guess with all power in the dominant mode.
    pub fn free_running_guess(params: &LaserParams) -> Self {
        let amp = (params.bias_pump - 1.0).max(1e-3).sqrt();
        Self {
            field_x: Complex64::new(amp, 0.0),
            field_y: Complex64::new(1e-3 * amp, 0.0),
            carrier_inversion: 1.0,
            spin_imbalance: 0.0,
            time: 0.0,
        }
    }

    pub fn intensity_x(&self) -> f64 {
        self.field_x.norm_sqr()
    }

    pub fn intensity_y(&self) -> f64 {
        self.field_y.norm_sqr()
    }

    pub fn total_intensity(&self) -> f64 {
        self.intensity_x() + self.intensity_y()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    fn to_vec(self) -> [f64; 6] {
        [
            self.field_x.re,
            self.field_x.im,
            self.field_y.re,
            self.field_y.im,
            self.carrier_inversion,
            self.spin_imbalance,
        ]
    }

    fn from_vec(v: [f64; 6], time: f64) -> Self {
        Self {
            field_x: Complex64::new(v[0], v[1]),
            field_y: Complex64::new(v[2], v[3]),
            carrier_inversion: v[4],
            spin_imbalance: v[5],
            time,
        }
    }
}

/// Which optical intensity is recorded as the neuron output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutChannel {
    /// `|Ey|^2`, the injected polarization.
    #[default]
    Subsidiary,
    /// `|Ex|^2 + |Ey|^2`.
    Total,
}

/// Uniformly sampled optical power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityTrace {
    pub samples: Vec<f64>,
    /// Seconds.
    pub sample_period: f64,
    /// Seconds.
    pub start_time: f64,
}

impl IntensityTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time_of(&self, index: usize) -> f64 {
        self.start_time + index as f64 * self.sample_period
    }

    /// Two-column CSV: `time_s,power_au`.
    pub fn write_csv(&self, path: &Path) -> Result<(), LaserError> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "time_s,power_au")?;
        for (i, v) in self.samples.iter().enumerate() {
            writeln!(w, "{:e},{:e}", self.time_of(i), v)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Precomputed right-hand side in nanosecond units.
#[derive(Debug, Clone, Copy)]
struct Sfm {
    gain: Complex64,
    ax: Complex64,
    ay: Complex64,
    gn: f64,
    gs: f64,
    mu: f64,
}

impl Sfm {
    fn new(p: &LaserParams) -> Self {
        let w = p.subsidiary_resonance() + 2.0 * std::f64::consts::PI * p.detuning * NS;
        let ga = p.dichroism_rate * NS;
        let gp = p.birefringence_rate * NS;
        Self {
            gain: Complex64::new(
                p.field_decay_rate * NS,
                p.field_decay_rate * NS * p.linewidth_enhancement,
            ),
            ax: Complex64::new(ga, -gp - w),
            ay: Complex64::new(-ga, gp - w),
            gn: p.carrier_decay_rate * NS,
            gs: p.spin_relaxation_rate * NS,
            mu: p.bias_pump,
        }
    }

    #[inline(always)]
    fn rhs(&self, y: &[f64; 6], e_inj: f64) -> [f64; 6] {
        let ex = Complex64::new(y[0], y[1]);
        let ey = Complex64::new(y[2], y[3]);
        let (nc, ns) = (y[4], y[5]);
        let i = Complex64::i();
        let dex = self.gain * ((nc - 1.0) * ex + i * ns * ey) + self.ax * ex;
        let dey = self.gain * ((nc - 1.0) * ey - i * ns * ex) + self.ay * ey + e_inj;
        let tot = ex.norm_sqr() + ey.norm_sqr();
        let cross = -2.0 * (ey * ex.conj()).im;
        let dn = -self.gn * (nc * (1.0 + tot) - self.mu + ns * cross);
        let dm = -self.gs * ns - self.gn * (ns * tot + nc * cross);
        [dex.re, dex.im, dey.re, dey.im, dn, dm]
    }

    #[inline(always)]
    fn rk4(&self, y: &mut [f64; 6], e_inj: f64, h: f64) {
        let k1 = self.rhs(y, e_inj);
        let k2 = self.rhs(&axpy(y, 0.5 * h, &k1), e_inj);
        let k3 = self.rhs(&axpy(y, 0.5 * h, &k2), e_inj);
        let k4 = self.rhs(&axpy(y, h, &k3), e_inj);
        for j in 0..6 {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }

    /// Euler-Maruyama spontaneous-emission kick on both field components.
    fn add_noise(&self, y: &mut [f64; 6], strength: f64, h: f64, rng: &mut ChaCha8Rng) {
        let s = (strength * h / 2.0).sqrt();
        for v in y.iter_mut().take(4) {
            let xi: f64 = StandardNormal.sample(rng);
            *v += s * xi;
        }
    }
}

#[inline(always)]
fn axpy(y: &[f64; 6], a: f64, k: &[f64; 6]) -> [f64; 6] {
    let mut out = *y;
    for j in 0..6 {
        out[j] += a * k[j];
    }
    out
}

/// Largest permitted integration step, seconds.
pub const MAX_DT: f64 = 0.5e-12;

fn check_dt(dt: f64) -> Result<(), LaserError> {
    if dt > 0.0 && dt <= MAX_DT * (1.0 + 1e-9) {
        Ok(())
    } else {
        Err(LaserError::InvalidTiming(format!(
            "dt must lie in (0, 0.5 ps], got {dt:e} s"
        )))
    }
}

/// Advances `state` by one fixed RK4 step of `dt` seconds with a constant
/// injected field.
pub fn step(
    state: &LaserState,
    params: &LaserParams,
    drive_sample: Complex64,
    dt: f64,
) -> Result<LaserState, LaserError> {
    step_with_noise(state, params, drive_sample, dt, None)
}

/// As [`step`], adding Langevin noise from `rng` when
/// `params.noise_strength > 0`.
pub fn step_with_noise(
    state: &LaserState,
    params: &LaserParams,
    drive_sample: Complex64,
    dt: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LaserState, LaserError> {
    check_dt(dt)?;
    if !state.is_finite() {
        return Err(LaserError::NonFiniteState { time: state.time });
    }
    let model = Sfm::new(params);
    let mut y = state.to_vec();
    let h = dt / NS;
    // A complex drive is handled by rotating into the drive's phase.
    let phase = if drive_sample.norm() > 0.0 {
        drive_sample / drive_sample.norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    rotate(&mut y, phase.conj());
    model.rk4(&mut y, drive_sample.norm(), h);
    if let Some(rng) = rng {
        if params.noise_strength > 0.0 {
            model.add_noise(&mut y, params.noise_strength, h, rng);
        }
    }
    rotate(&mut y, phase);
    let next = LaserState::from_vec(y, state.time + dt);
    if next.is_finite() {
        Ok(next)
    } else {
        Err(LaserError::NonFiniteState { time: next.time })
    }
}

fn rotate(y: &mut [f64; 6], phase: Complex64) {
    for k in [0, 2] {
        let z = Complex64::new(y[k], y[k + 1]) * phase;
        y[k] = z.re;
        y[k + 1] = z.im;
    }
}

/// Right-hand side of the model in ns^-1 units, for residual checks.
pub fn derivative(state: &LaserState, params: &LaserParams, drive_sample: Complex64) -> [f64; 6] {
    let mut y = state.to_vec();
    let phase = if drive_sample.norm() > 0.0 {
        drive_sample / drive_sample.norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    rotate(&mut y, phase.conj());
    let mut d = Sfm::new(params).rhs(&y, drive_sample.norm());
    rotate(&mut d, phase);
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteadyStateMethod {
    /// Long-time integration met the tolerance (then polished by Newton
    /// iteration when a drive is present).
    Integration,
    /// Integration did not settle within budget; Newton iteration from
    /// its end point converged.
    RootFinding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateSettings {
    /// Integration step, seconds.
    pub dt: f64,
    /// Total integration budget, seconds.
    pub max_time: f64,
    /// Largest allowed change of any state variable over 1 ns.
    pub tolerance: f64,
}

impl Default for SteadyStateSettings {
    fn default() -> Self {
        Self {
            dt: 0.1e-12,
            max_time: 300e-9,
            tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub state: LaserState,
    pub method: SteadyStateMethod,
    /// Max-norm of the right-hand side at `state` (ns^-1 units).
    pub residual: f64,
}

/// Phase-independent coordinates, used to judge convergence when there
/// is no injection (the solitary laser has a free phase).
fn invariants(y: &[f64; 6]) -> [f64; 6] {
    let ex = Complex64::new(y[0], y[1]);
    let ey = Complex64::new(y[2], y[3]);
    let c = ey * ex.conj();
    [ex.norm_sqr(), ey.norm_sqr(), y[4], y[5], c.re, c.im]
}

fn max_diff(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Integrates with constant real drive `e_inj` until the change over 1 ns
/// drops below tolerance. Returns the final vector and whether it settled.
fn settle(
    model: &Sfm,
    mut y: [f64; 6],
    e_inj: f64,
    settings: &SteadyStateSettings,
) -> Result<([f64; 6], bool), LaserError> {
    check_dt(settings.dt)?;
    let h = settings.dt / NS;
    let per_ns = (1.0 / h).round().max(1.0) as usize;
    let chunks = (settings.max_time / NS).ceil() as usize;
    let key = |y: &[f64; 6]| if e_inj == 0.0 { invariants(y) } else { *y };
    for chunk in 0..chunks {
        let before = key(&y);
        for _ in 0..per_ns {
            model.rk4(&mut y, e_inj, h);
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(LaserError::NonFiniteState {
                time: (chunk + 1) as f64 * NS,
            });
        }
        if max_diff(&before, &key(&y)) < settings.tolerance {
            return Ok((y, true));
        }
    }
    Ok((y, false))
}

/// Zeroes components too small to matter. The locked state lies in the
/// invariant subspace `Ex = n = 0`; leaving values there that have decayed
/// into the subnormal range makes every later step very slow.
fn flush_tiny(y: &mut [f64; 6]) {
    for v in y.iter_mut() {
        if v.abs() < 1e-150 {
            *v = 0.0;
        }
    }
}

fn max_abs(v: &[f64; 6]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Newton iteration on the right-hand side with a finite-difference
/// Jacobian. Returns the root if the residual falls below 1e-12.
fn newton(model: &Sfm, y0: [f64; 6], e_inj: f64) -> Option<[f64; 6]> {
    let mut y = y0;
    for _ in 0..50 {
        let f = model.rhs(&y, e_inj);
        if max_abs(&f) < 1e-12 {
            return Some(y);
        }
        let mut jac = Matrix6::<f64>::zeros();
        for j in 0..6 {
            let d = 1e-7 * y[j].abs().max(1.0);
            let mut yp = y;
            let mut ym = y;
            yp[j] += d;
            ym[j] -= d;
            let fp = model.rhs(&yp, e_inj);
            let fm = model.rhs(&ym, e_inj);
            for i in 0..6 {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * d);
            }
        }
        let delta = jac.lu().solve(&Vector6::from_column_slice(&f))?;
        for j in 0..6 {
            y[j] -= delta[j];
        }
        if !y.iter().all(|v| v.is_finite()) || max_diff(&y, &y0) > 0.5 {
            return None;
        }
    }
    let f = model.rhs(&y, e_inj);
    (max_abs(&f) < 1e-12).then_some(y)
}

/// Fixed point under constant injection `drive_level`.
///
/// A non-zero drive is approached by a short continuation ramp down from
/// twice its amplitude, which steers the integration onto the
/// injection-locked branch.
pub fn steady_state(params: &LaserParams, drive_level: Complex64) -> Result<SteadyState, LaserError> {
    steady_state_with(params, drive_level, &SteadyStateSettings::default())
}

pub fn steady_state_with(
    params: &LaserParams,
    drive_level: Complex64,
    settings: &SteadyStateSettings,
) -> Result<SteadyState, LaserError> {
    params.validate()?;
    let k = drive_level.norm();
    let model = Sfm::new(params);
    let mut guess = LaserState::free_running_guess(params);
    if k > 0.0 {
        std::mem::swap(&mut guess.field_x, &mut guess.field_y);
        let ramp = SteadyStateSettings {
            max_time: settings.max_time / 10.0,
            ..*settings
        };
        let mut y = guess.to_vec();
        for s in 0..8 {
            let amp = k * (2.0 - s as f64 / 8.0);
            y = settle(&model, y, amp, &ramp)?.0;
        }
        guess = LaserState::from_vec(y, 0.0);
    }
    steady_state_from(params, drive_level, &guess, settings)
}

/// Fixed point reached from `initial` by integration (plus Newton polish).
pub fn steady_state_from(
    params: &LaserParams,
    drive_level: Complex64,
    initial: &LaserState,
    settings: &SteadyStateSettings,
) -> Result<SteadyState, LaserError> {
    params.validate()?;
    let k = drive_level.norm();
    let phase = if k > 0.0 {
        drive_level / k
    } else {
        Complex64::new(1.0, 0.0)
    };
    let model = Sfm::new(params);
    let mut y = initial.to_vec();
    rotate(&mut y, phase.conj());
    let (y, settled) = settle(&model, y, k, settings)?;

    let finish = |mut y: [f64; 6], method| {
        flush_tiny(&mut y);
        let residual = if k > 0.0 { max_abs(&model.rhs(&y, k)) } else { 0.0 };
        rotate(&mut y, phase);
        Ok(SteadyState {
            state: LaserState::from_vec(y, 0.0),
            method,
            residual,
        })
    };
    if k == 0.0 {
        // Without injection the phase rotates freely; only the
        // phase-invariant quantities settle.
        return if settled {
            finish(y, SteadyStateMethod::Integration)
        } else {
            Err(LaserError::NoConvergence(format!(
                "free-running laser did not settle within {:e} s",
                settings.max_time
            )))
        };
    }
    match (newton(&model, y, k), settled) {
        (Some(root), true) => finish(root, SteadyStateMethod::Integration),
        (Some(root), false) => finish(root, SteadyStateMethod::RootFinding),
        (None, true) => finish(y, SteadyStateMethod::Integration),
        (None, false) => Err(LaserError::NoConvergence(format!(
            "no fixed point at injection {k} within {:e} s",
            settings.max_time
        ))),
    }
}

/// Maps a drive level in `[0, 1]` onto injected power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modulation {
    /// Fractional drop of injected power at level 1. Injected field is
    /// `K sqrt(1 - depth * level)`, i.e. the modulator is linear in power.
    pub depth: f64,
}

impl Default for Modulation {
    fn default() -> Self {
        Self { depth: 0.6 }
    }
}

impl Modulation {
    #[inline]
    pub fn field(&self, amplitude: f64, level: f64) -> f64 {
        amplitude * (1.0 - self.depth * level).max(0.0).sqrt()
    }
}

/// Numerical settings shared by all simulations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    /// Integration step, seconds.
    pub dt: f64,
    /// Output sample period, seconds; an integer multiple of `dt`.
    pub trace_sample_period: f64,
    pub seed: u64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            dt: 0.1e-12,
            trace_sample_period: 5e-12,
            seed: 0,
        }
    }
}

impl SimSettings {
    /// Integration steps per output sample.
    pub fn record_every(&self) -> Result<usize, LaserError> {
        check_dt(self.dt)?;
        let ratio = self.trace_sample_period / self.dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-6 * n {
            return Err(LaserError::InvalidTiming(format!(
                "trace sample period {:e} s is not an integer multiple of dt {:e} s",
                self.trace_sample_period, self.dt
            )));
        }
        Ok(n as usize)
    }
}

/// An excitable node driven by a scalar modulation level.
///
/// Implementations provide the rest state (level 0) and a single
/// fixed-step update; waveform handling, downsampling and per-point
/// parallelism live in [`simulate`].
pub trait NeuronModel: Sync {
    type State: Copy + Send;

    /// Equilibrium at modulation level 0.
    fn rest_state(&self) -> Self::State;

    /// One step of `dt` seconds at constant `level`; `rng` is present when
    /// the model should add noise.
    fn advance(&self, state: &mut Self::State, level: f64, dt: f64, rng: Option<&mut ChaCha8Rng>);

    /// Recorded optical power.
    fn output(&self, state: &Self::State) -> f64;

    fn is_finite(&self, state: &Self::State) -> bool;

    fn noisy(&self) -> bool {
        false
    }
}

/// The spin-flip VCSEL neuron at a fixed operating point.
#[derive(Debug, Clone)]
pub struct SpinFlipNeuron {
    pub params: LaserParams,
    pub modulation: Modulation,
    pub channel: ReadoutChannel,
    model: Sfm,
    rest: [f64; 6],
}

impl SpinFlipNeuron {
    /// Builds the neuron and locates its injection-locked rest state.
    pub fn new(params: LaserParams, modulation: Modulation, channel: ReadoutChannel) -> Result<Self, LaserError> {
        params.validate()?;
        let rest = steady_state(&params, Complex64::new(params.injection_amplitude, 0.0))?;
        Ok(Self::with_rest_state(params, modulation, channel, rest.state))
    }

    pub fn with_rest_state(
        params: LaserParams,
        modulation: Modulation,
        channel: ReadoutChannel,
        rest: LaserState,
    ) -> Self {
        Self {
            model: Sfm::new(&params),
            params,
            modulation,
            channel,
            rest: rest.to_vec(),
        }
    }

    pub fn rest_laser_state(&self) -> LaserState {
        LaserState::from_vec(self.rest, 0.0)
    }

    /// Output power at rest.
    pub fn baseline(&self) -> f64 {
        self.output(&self.rest)
    }
}

impl NeuronModel for SpinFlipNeuron {
    type State = [f64; 6];

    fn rest_state(&self) -> [f64; 6] {
        self.rest
    }

    #[inline]
    fn advance(&self, y: &mut [f64; 6], level: f64, dt: f64, rng: Option<&mut ChaCha8Rng>) {
        let h = dt / NS;
        let e = self.modulation.field(self.params.injection_amplitude, level);
        self.model.rk4(y, e, h);
        if let Some(rng) = rng {
            self.model.add_noise(y, self.params.noise_strength, h, rng);
        }
    }

    #[inline]
    fn output(&self, y: &[f64; 6]) -> f64 {
        let iy = y[2] * y[2] + y[3] * y[3];
        match self.channel {
            ReadoutChannel::Subsidiary => iy,
            ReadoutChannel::Total => iy + y[0] * y[0] + y[1] * y[1],
        }
    }

    fn is_finite(&self, y: &[f64; 6]) -> bool {
        y.iter().all(|v| v.is_finite())
    }

    fn noisy(&self) -> bool {
        self.params.noise_strength > 0.0
    }
}

/// Two-variable slow-fast excitable surrogate (FitzHugh-Nagumo type) for
/// fast pipeline tests. Spikes are triggered by positive drive levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastSlowNeuron {
    /// Time unit of the dimensionless equations, seconds.
    pub time_scale: f64,
    /// Fast/slow timescale ratio.
    pub epsilon: f64,
    pub a: f64,
    pub b: f64,
    /// Input current per unit drive level.
    pub gain: f64,
}

impl Default for FastSlowNeuron {
    fn default() -> Self {
        Self {
            time_scale: 0.1e-9,
            epsilon: 0.08,
            a: 0.7,
            b: 0.8,
            gain: 0.3,
        }
    }
}

impl FastSlowNeuron {
    #[inline]
    fn rhs(&self, v: f64, w: f64, i: f64) -> (f64, f64) {
        ((v - v * v * v / 3.0 - w + i) / self.epsilon, v + self.a - self.b * w)
    }
}

impl NeuronModel for FastSlowNeuron {
    type State = [f64; 2];

    fn rest_state(&self) -> [f64; 2] {
        // Solve v - v^3/3 - (v + a)/b = 0 by Newton from the left branch.
        let mut v = -1.2;
        for _ in 0..50 {
            let f = v - v * v * v / 3.0 - (v + self.a) / self.b;
            let df = 1.0 - v * v - 1.0 / self.b;
            v -= f / df;
        }
        [v, (v + self.a) / self.b]
    }

    fn advance(&self, s: &mut [f64; 2], level: f64, dt: f64, _rng: Option<&mut ChaCha8Rng>) {
        let h = dt / self.time_scale;
        let i = self.gain * level;
        let (v, w) = (s[0], s[1]);
        let (a1, b1) = self.rhs(v, w, i);
        let (a2, b2) = self.rhs(v + 0.5 * h * a1, w + 0.5 * h * b1, i);
        let (a3, b3) = self.rhs(v + 0.5 * h * a2, w + 0.5 * h * b2, i);
        let (a4, b4) = self.rhs(v + h * a3, w + h * b3, i);
        s[0] += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        s[1] += h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
    }

    fn output(&self, s: &[f64; 2]) -> f64 {
        s[0] + 2.5
    }

    fn is_finite(&self, s: &[f64; 2]) -> bool {
        s[0].is_finite() && s[1].is_finite()
    }
}

/// How a multi-point waveform is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationMode {
    /// One uninterrupted integration over the whole waveform.
    #[default]
    Continuous,
    /// Each data point (plus the following gap) starts from the rest state;
    /// points run in parallel.
    PerPoint,
}

/// Index of the first integration step at or after time `sample / rate`.
fn step_at(sample: usize, rate: f64, dt: f64) -> usize {
    let x = sample as f64 / (rate * dt);
    (x - 1e-6).ceil().max(0.0) as usize
}

/// Integrates global steps `[from, to)` of a zero-order-hold waveform,
/// appending the output at every step index divisible by `record_every`.
#[allow(clippy::too_many_arguments)]
fn integrate_range<M: NeuronModel>(
    model: &M,
    levels: &[f64],
    rate: f64,
    dt: f64,
    from: usize,
    to: usize,
    record_every: usize,
    mut rng: Option<ChaCha8Rng>,
    out: &mut Vec<f64>,
) -> Result<(), LaserError> {
    let mut state = model.rest_state();
    let mut sample = (((from as f64) * dt * rate) + 1e-9).floor() as usize;
    let mut next_boundary = step_at(sample + 1, rate, dt);
    for j in from..to {
        while j >= next_boundary {
            sample += 1;
            next_boundary = step_at(sample + 1, rate, dt);
        }
        if j % record_every == 0 {
            if !model.is_finite(&state) {
                return Err(LaserError::NonFiniteState { time: j as f64 * dt });
            }
            out.push(model.output(&state));
        }
        let level = levels[sample.min(levels.len() - 1)];
        model.advance(&mut state, level, dt, rng.as_mut());
    }
    if !model.is_finite(&state) {
        return Err(LaserError::NonFiniteState { time: to as f64 * dt });
    }
    Ok(())
}

fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Drives `model` with `drive` from rest and returns the recorded output.
///
/// Drive samples are held between sample instants. The trace has one
/// sample per `trace_sample_period`, the first one at `t = 0`.
pub fn simulate<M: NeuronModel>(
    model: &M,
    drive: &DriveWaveform,
    settings: &SimSettings,
    mode: SimulationMode,
) -> Result<IntensityTrace, LaserError> {
    if drive.is_empty() {
        return Err(LaserError::EmptyDrive);
    }
    let record_every = settings.record_every()?;
    let rate = drive.sample_rate();
    let dt = settings.dt;
    let total = step_at(drive.len(), rate, dt);
    let levels = &drive.samples;

    let samples = match mode {
        SimulationMode::Continuous => {
            let rng = model.noisy().then(|| noise_rng(settings.seed, NOISE_STREAM << 32));
            let mut out = Vec::with_capacity(total / record_every + 1);
            integrate_range(model, levels, rate, dt, 0, total, record_every, rng, &mut out)?;
            out
        }
        SimulationMode::PerPoint => {
            let mut starts: Vec<usize> = drive
                .layout
                .segments
                .iter()
                .map(|s| step_at(s.start, rate, dt))
                .collect();
            if starts.first() != Some(&0) {
                starts.insert(0, 0);
            }
            starts.push(total);
            let pieces: Vec<Vec<f64>> = starts
                .par_windows(2)
                .enumerate()
                .map(|(k, w)| {
                    let rng = model
                        .noisy()
                        .then(|| noise_rng(settings.seed, (NOISE_STREAM << 32) | (k as u64 + 1)));
                    let mut out = Vec::new();
                    integrate_range(model, levels, rate, dt, w[0], w[1], record_every, rng, &mut out)?;
                    Ok(out)
                })
                .collect::<Result<_, LaserError>>()?;
            pieces.concat()
        }
    };
    Ok(IntensityTrace {
        samples,
        sample_period: dt * record_every as f64,
        start_time: 0.0,
    })
}

/// A rectangular drop of injected power used to probe excitability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    /// Fractional power drop, in `[0, 1]`.
    pub drop: f64,
    /// Seconds.
    pub duration: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            drop: 0.6,
            duration: 250e-12,
        }
    }
}

/// Output of `neuron` (depth ignored) for perturbations of the given drops
/// starting at the listed times, over `total` seconds.
///
/// Drops are applied directly as power fractions, sampled on a 1 ps grid.
pub fn perturbation_response(
    neuron: &SpinFlipNeuron,
    events: &[(f64, Perturbation)],
    total: f64,
    settings: &SimSettings,
) -> Result<IntensityTrace, LaserError> {
    let rate = 1e12;
    let n = (total * rate).round() as usize;
    let mut levels = vec![0.0; n];
    for (t0, p) in events {
        let a = (t0 * rate).round() as usize;
        let b = ((t0 + p.duration) * rate).round() as usize;
        for v in levels.iter_mut().take(b.min(n)).skip(a) {
            *v = p.drop;
        }
    }
    let probe = SpinFlipNeuron {
        modulation: Modulation { depth: 1.0 },
        ..neuron.clone()
    };
    let drive = DriveWaveform::from_levels(levels, rate);
    simulate(&probe, &drive, settings, SimulationMode::Continuous)
}

/// Number of upward crossings of `level`.
pub fn count_crossings(samples: &[f64], level: f64) -> usize {
    samples.windows(2).filter(|w| w[0] <= level && w[1] > level).count()
        + usize::from(samples.first().is_some_and(|&v| v > level))
}

/// Grid of candidate operating points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchGrid {
    pub injection_amplitude: Vec<f64>,
    /// Hz.
    pub detuning: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSettings {
    pub reference: Perturbation,
    /// Preferred relative distance above the locking boundary.
    pub target_margin: f64,
    /// Quiet time over which the locked state must stay spike-free, s.
    pub lock_time: f64,
    /// Observation window after the reference perturbation, s.
    pub response_window: f64,
    /// Spikes are counted as upward crossings of this multiple of the
    /// locked output.
    pub spike_factor: f64,
    pub dt: f64,
    /// Bisection steps used to refine the locking boundary.
    pub boundary_refinement: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            reference: Perturbation::default(),
            target_margin: 0.15,
            lock_time: 100e-9,
            response_window: 5e-9,
            spike_factor: 1.6,
            dt: 0.1e-12,
            boundary_refinement: 8,
        }
    }
}

/// Outcome for one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPointReport {
    pub injection_amplitude: f64,
    pub detuning: f64,
    pub locked: bool,
    pub quiet: bool,
    pub reference_spikes: usize,
    /// `K / K_boundary - 1` when the boundary at this detuning is known.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: LaserParams,
    /// Relative distance of the chosen amplitude above the locking boundary.
    pub margin: f64,
    /// Injection amplitude at which locking is lost, chosen detuning.
    pub locking_boundary: f64,
    pub rest_state: LaserState,
    pub points: Vec<GridPointReport>,
}

/// Walks each detuning column from strong to weak injection, following the
/// locked state down to where locking is lost, and returns the excitable grid point whose margin to the
/// locking boundary is closest to `target_margin`.
pub fn calibrate_operating_point(
    params: &LaserParams,
    grid: &SearchGrid,
    settings: &CalibrationSettings,
) -> Result<Calibration, LaserError> {
    params.validate()?;
    if grid.injection_amplitude.is_empty() || grid.detuning.is_empty() {
        return Err(LaserError::InvalidParams("calibration grid is empty".into()));
    }
    let mut amps = grid.injection_amplitude.clone();
    amps.sort_by(|a, b| b.total_cmp(a));
    amps.dedup();
    let ss = SteadyStateSettings {
        dt: settings.dt,
        max_time: 60e-9,
        ..SteadyStateSettings::default()
    };
    let sim = SimSettings {
        dt: settings.dt,
        trace_sample_period: settings.dt * (1e-12 / settings.dt).round().max(1.0),
        seed: 0,
    };

    let columns: Vec<(Vec<GridPointReport>, Vec<(LaserParams, LaserState)>)> = grid
        .detuning
        .par_iter()
        .map(|&df| -> Result<_, LaserError> {
            let base = LaserParams {
                detuning: df,
                ..*params
            };
            let mut reports = Vec::new();
            let mut locked_states = Vec::new();
            let mut prev: Option<(f64, LaserState)> = None;
            let mut boundary_bracket = None;
            for &k in &amps {
                let p = LaserParams {
                    injection_amplitude: k,
                    ..base
                };
                let drive = Complex64::new(k, 0.0);
                let res = match prev {
                    None => steady_state_with(&p, drive, &ss),
                    Some((_, s)) => steady_state_from(&p, drive, &s, &ss),
                };
                match res {
                    Ok(st) if st.method == SteadyStateMethod::Integration => {
                        prev = Some((k, st.state));
                        locked_states.push((p, st.state));
                    }
                    // Strong injection can also be unlocked (beyond a Hopf
                    // boundary); keep descending until the locked band.
                    _ if prev.is_none() => {}
                    _ => {
                        boundary_bracket = prev.map(|(kl, s)| (k, kl, s));
                        break;
                    }
                }
            }
            // Refine the boundary between the last locked and first
            // unlocked amplitude.
            let boundary = boundary_bracket.map(|(mut lo, mut hi, mut s)| {
                for _ in 0..settings.boundary_refinement {
                    let mid = 0.5 * (lo + hi);
                    let p = LaserParams {
                        injection_amplitude: mid,
                        ..base
                    };
                    match steady_state_from(&p, Complex64::new(mid, 0.0), &s, &ss) {
                        Ok(st) if st.method == SteadyStateMethod::Integration => {
                            hi = mid;
                            s = st.state;
                        }
                        _ => lo = mid,
                    }
                }
                0.5 * (lo + hi)
            });
            for &k in &amps {
                if !locked_states.iter().any(|(p, _)| p.injection_amplitude == k) {
                    reports.push(GridPointReport {
                        injection_amplitude: k,
                        detuning: df,
                        locked: false,
                        quiet: false,
                        reference_spikes: 0,
                        margin: boundary.map(|b| k / b - 1.0),
                    });
                }
            }
            let mut candidates = Vec::new();
            for (p, rest) in locked_states {
                let neuron =
                    SpinFlipNeuron::with_rest_state(p, Modulation::default(), ReadoutChannel::Subsidiary, rest);
                let base_out = neuron.baseline();
                let level = settings.spike_factor * base_out;
                let quiet_trace = perturbation_response(&neuron, &[], settings.lock_time, &sim)?;
                let quiet = quiet_trace
                    .samples
                    .iter()
                    .all(|&v| (v - base_out).abs() <= 0.01 * base_out);
                let t0 = 0.5e-9;
                let resp = perturbation_response(
                    &neuron,
                    &[(t0, settings.reference)],
                    t0 + settings.response_window,
                    &sim,
                )?;
                let spikes = count_crossings(&resp.samples, level);
                reports.push(GridPointReport {
                    injection_amplitude: p.injection_amplitude,
                    detuning: df,
                    locked: true,
                    quiet,
                    reference_spikes: spikes,
                    margin: boundary.map(|b| p.injection_amplitude / b - 1.0),
                });
                if quiet && spikes == 1 {
                    candidates.push((p, rest));
                }
            }
            Ok((reports, candidates))
        })
        .collect::<Result<_, _>>()?;

    let mut points = Vec::new();
    let mut best: Option<(f64, LaserParams, LaserState, f64, f64)> = None;
    for (reports, candidates) in columns {
        for (p, rest) in candidates {
            let r = reports
                .iter()
                .find(|r| r.injection_amplitude == p.injection_amplitude)
                .expect("report exists for every candidate");
            // Without a bracketed boundary the margin is unknown; rank such
            // points last.
            let (margin, boundary) = match r.margin {
                Some(m) => (m, p.injection_amplitude / (1.0 + m)),
                None => (f64::INFINITY, f64::NAN),
            };
            let score = (margin - settings.target_margin).abs();
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, p, rest, margin, boundary));
            }
        }
        points.extend(reports);
    }
    match best {
        Some((_, params, rest_state, margin, locking_boundary)) => Ok(Calibration {
            params,
            margin,
            locking_boundary,
            rest_state,
            points,
        }),
        None => {
            let locked = points.iter().filter(|p| p.locked).count();
            Err(LaserError::NoExcitablePointFound(format!(
                "{} grid points, {locked} locked, none fires exactly one spike",
                points.len()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_params_are_valid() {
        LaserParams::default().validate().unwrap();
        let bad = LaserParams {
            field_decay_rate: 0.0,
            ..LaserParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dt_bound_enforced() {
        let p = LaserParams::default();
        let s = LaserState::free_running_guess(&p);
        assert!(step(&s, &p, Complex64::new(0.0, 0.0), 1e-12).is_err());
        assert!(step(&s, &p, Complex64::new(0.0, 0.0), 0.0).is_err());
        assert!(step(&s, &p, Complex64::new(0.0, 0.0), 0.5e-12).is_ok());
    }

    #[test]
    fn non_finite_state_rejected() {
        let p = LaserParams::default();
        let mut s = LaserState::free_running_guess(&p);
        s.carrier_inversion = f64::NAN;
        assert!(matches!(
            step(&s, &p, Complex64::new(0.0, 0.0), 0.1e-12),
            Err(LaserError::NonFiniteState { .. })
        ));
    }

    #[test]
    fn record_every_requires_integer_ratio() {
        let ok = SimSettings::default();
        assert_eq!(ok.record_every().unwrap(), 50);
        let bad = SimSettings {
            trace_sample_period: 0.25e-12,
            ..ok
        };
        assert!(bad.record_every().is_err());
    }

    #[test]
    fn modulation_is_linear_in_power() {
        let m = Modulation { depth: 0.5 };
        assert_eq!(m.field(4.0, 0.0), 4.0);
        assert!((m.field(4.0, 1.0).powi(2) - 8.0).abs() < 1e-12);
        assert_eq!(Modulation { depth: 2.0 }.field(4.0, 1.0), 0.0);
    }

    #[test]
    fn crossings() {
        assert_eq!(count_crossings(&[0.0, 2.0, 0.0, 2.0, 2.0, 0.0], 1.0), 2);
        assert_eq!(count_crossings(&[2.0, 0.0], 1.0), 1);
        assert_eq!(count_crossings(&[], 1.0), 0);
    }

    #[test]
    fn surrogate_rest_is_an_equilibrium() {
        let m = FastSlowNeuron::default();
        let s = m.rest_state();
        let (dv, dw) = m.rhs(s[0], s[1], 0.0);
        assert!(dv.abs() < 1e-12 && dw.abs() < 1e-12);
    }

    #[test]
    fn complex_drive_phase_is_a_symmetry() {
        let p = LaserParams::default();
        let s = LaserState::free_running_guess(&p);
        let a = step(&s, &p, Complex64::new(5.0, 0.0), 0.1e-12).unwrap();
        let phase = Complex64::from_polar(1.0, 0.7);
        let rotated = LaserState {
            field_x: s.field_x * phase,
            field_y: s.field_y * phase,
            ..s
        };
        let b = step(&rotated, &p, Complex64::new(5.0, 0.0) * phase, 0.1e-12).unwrap();
        assert!((a.field_y * phase - b.field_y).norm() < 1e-12);
        assert!((a.carrier_inversion - b.carrier_inversion).abs() < 1e-12);
    }
}
