//! Kerr cell: a bias-field region between crossed polarizers.
//!
//! The exit polarizer projects the oscillating part of the field onto
//! `(0, -a3, a2)/|a|`. What passes is
//! `2 a2 a3/|a| sin(tau) sin(phi/h + 2 tau)`, so the energy density has the
//! envelope `a2^2 a3^2/(a2^2 + a3^2) sin^2 tau`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::direct1d::{simulate_profile, DetectorTrace, Experiment1D};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::profiles::{core_beam, polarization_ellipse, BeamSpec, Ellipse};
use crate::quadrature::integrate;
use crate::smooth::smooth_step;

/// Constant-`chi` cell of length `d` with core amplitudes `(a2, a3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    pub a2: f64,
    pub a3: f64,
    pub d: f64,
    pub e0: f64,
    pub chi: f64,
}

impl CellSpec {
    pub fn new(a2: f64, a3: f64, d: f64, e0: f64, chi: f64) -> Result<Self> {
        if a2 == 0.0 && a3 == 0.0 {
            return Err(Error::InvalidArgument(
                "core amplitudes (a2, a3) must not both vanish".into(),
            ));
        }
        if !(d > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "polarizer separation must be positive, got {d}"
            )));
        }
        Ok(Self { a2, a3, d, e0, chi })
    }

    /// Retardation of an ideal cell, `e0^2 chi d / 2`.
    pub fn nominal_tau(&self) -> f64 {
        0.5 * self.e0 * self.e0 * self.chi * self.d
    }
}

/// `a2^2 a3^2 / (a2^2 + a3^2) sin^2 tau`.
pub fn transmission_envelope(a2: f64, a3: f64, tau: f64) -> f64 {
    let n = a2 * a2 + a3 * a3;
    if n == 0.0 {
        return 0.0;
    }
    a2 * a2 * a3 * a3 / n * tau.sin().powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauScan {
    pub tau_at_max: f64,
    pub envelope_max: f64,
    /// The envelope vanishes on the whole grid.
    pub degenerate: bool,
}

/// First maximizer of the envelope over `tau_grid`, refined by a parabola
/// through the neighbouring samples.
pub fn optimal_tau_scan(cell: &CellSpec, tau_grid: &[f64]) -> TauScan {
    let vals: Vec<f64> = tau_grid
        .iter()
        .map(|&t| transmission_envelope(cell.a2, cell.a3, t))
        .collect();
    let max = vals.iter().cloned().fold(0.0f64, f64::max);
    if tau_grid.is_empty() || max <= 0.0 {
        return TauScan {
            tau_at_max: f64::NAN,
            envelope_max: 0.0,
            degenerate: true,
        };
    }
    let k = vals
        .iter()
        .position(|&v| v >= max * (1.0 - 1e-12))
        .unwrap_or(0);
    let mut tau = tau_grid[k];
    if k > 0 && k + 1 < vals.len() {
        let (l, c, r) = (vals[k - 1], vals[k], vals[k + 1]);
        let (tl, tr) = (tau_grid[k - 1], tau_grid[k + 1]);
        let curv = l - 2.0 * c + r;
        if curv < 0.0 && ((tr - tau) - (tau - tl)).abs() < 1e-9 * (tr - tl) {
            tau += 0.5 * (tr - tau) * (l - r) / curv;
        }
    }
    TauScan {
        tau_at_max: tau,
        envelope_max: max,
        degenerate: false,
    }
}

/// `chi = pi / (e0^2 d)`, from `e0^2 chi d / 2 = pi / 2` at the first transmission maximum.
pub fn chi_from_first_max(e0_at_first_max: f64, d: f64) -> Result<f64> {
    if !(e0_at_first_max > 0.0) || !(d > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need positive field and separation, got e0 = {e0_at_first_max}, d = {d}"
        )));
    }
    Ok(PI / (e0_at_first_max * e0_at_first_max * d))
}

/// Bias magnitude of the first transmission maximum, `sqrt(pi / (chi d))`.
pub fn first_max_field(chi: f64, d: f64) -> Result<f64> {
    if !(chi > 0.0) || !(d > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need positive chi and d, got {chi}, {d}"
        )));
    }
    Ok((PI / (chi * d)).sqrt())
}

/// Rows `(e0, envelope)` of an ideal cell over a field sweep.
pub fn envelope_vs_field(cell: &CellSpec, e0_grid: &[f64]) -> Vec<(f64, f64)> {
    e0_grid
        .iter()
        .map(|&e0| {
            (
                e0,
                transmission_envelope(cell.a2, cell.a3, CellSpec { e0, ..*cell }.nominal_tau()),
            )
        })
        .collect()
}

/// Smooth plateau: `chi` on `[0, d]` with ramps of width `ramp` centred on the edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub chi: f64,
    pub d: f64,
    pub ramp: f64,
}

impl Plateau {
    pub fn value(&self, x: f64) -> f64 {
        let w = self.ramp;
        self.chi * smooth_step((x + 0.5 * w) / w) * smooth_step((self.d + 0.5 * w - x) / w)
    }

    pub fn support(&self) -> (f64, f64) {
        (-0.5 * self.ramp, self.d + 0.5 * self.ramp)
    }

    /// `e0^2/2` times the integral of the profile.
    pub fn tau(&self, e0: f64) -> f64 {
        let (a, b) = self.support();
        let w = self.ramp;
        // the ramps are integrated separately; the flat middle is exact
        let ramps = integrate(|x| self.value(x), a, a + w, 1e-13)
            + integrate(|x| self.value(x), b - w, b, 1e-13);
        0.5 * e0 * e0 * (ramps + self.chi * (self.d - w).max(0.0))
    }
}

/// Numerical settings for [`simulate_cell`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellRun {
    pub points_per_h: f64,
    pub cfl: f64,
    /// Half-width of the beam envelope.
    pub beam_half_width: f64,
    /// Ramp width in units of `h`.
    pub ramp_cells: f64,
}

impl Default for CellRun {
    fn default() -> Self {
        Self {
            points_per_h: 20.0,
            cfl: 0.9,
            beam_half_width: 0.6,
            ramp_cells: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellSimulation {
    pub h: f64,
    pub tau_inf: f64,
    /// `E` projected on the exit polarizer direction, `(0, -a3, a2)/|a|`.
    pub projected: DetectorTrace,
    pub envelope: f64,
    pub analytic_envelope: f64,
    /// Complex amplitudes of `E2` and `E3` relative to the beam envelope.
    pub amplitudes: [Complex64; 2],
    pub ellipse: Ellipse,
}

/// Windowed amplitude `(I_c - i I_s) / (h N / 2)` of one component, `N` the
/// windowed integral of the longitudinal envelope.
fn windowed_amplitude(trace: &DetectorTrace, samples: &[f64], beam: &BeamSpec) -> Complex64 {
    let (lo, hi) = beam.longitudinal_support();
    let (a, b) = (trace.position - hi, trace.position - lo);
    let n = samples.len();
    let (mut ic, mut is, mut norm) = (0.0, 0.0, 0.0);
    for (i, &y) in samples.iter().enumerate() {
        let t = trace.time(i);
        let u = (2.0 * t - a - b) / (b - a);
        if u.abs() >= 1.0 {
            continue;
        }
        let w = (1.0 - u * u).powi(4) * if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let theta = (trace.position - t) / trace.h;
        ic += w * y * theta.cos();
        is += w * y * theta.sin();
        norm += w * beam.envelope.value(trace.position - t);
    }
    if norm == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    Complex64::new(ic, -is) / (0.5 * trace.h * norm)
}

/// Direct simulation of the cell realized as a smooth plateau.
pub fn simulate_cell(cell: &CellSpec, h: f64, run: &CellRun) -> Result<CellSimulation> {
    let plateau = Plateau {
        chi: cell.chi,
        d: cell.d,
        ramp: run.ramp_cells * h,
    };
    let (s0, s1) = plateau.support();
    let (cfg, envelope) = Experiment1D::compact(
        cell.e0,
        (s0, s1),
        run.beam_half_width,
        h,
        run.points_per_h,
        run.cfl,
    );
    let beam = core_beam(cell.a2, cell.a3, 0.5, envelope, h)?;
    let trace = simulate_profile(&cfg, &beam, |x| plateau.value(x), "plateau")?.trace;
    let norm = cell.a2.hypot(cell.a3);
    let osc3: Vec<f64> = trace.e3.iter().map(|v| v - trace.background).collect();
    let amp2 = windowed_amplitude(&trace, &trace.e2, &beam);
    let amp3 = windowed_amplitude(&trace, &osc3, &beam);
    let proj: Vec<f64> = trace
        .e2
        .iter()
        .zip(&osc3)
        .map(|(e2, e3)| (-cell.a3 * e2 + cell.a2 * e3) / norm)
        .collect();
    let amp = windowed_amplitude(&trace, &proj, &beam).norm();
    let tau_inf = plateau.tau(cell.e0);
    let projected = DetectorTrace {
        e2: proj,
        e3: vec![0.0; trace.len()],
        background: 0.0,
        ..trace
    };
    let core = beam.u_init(&Vec3::new(envelope.center, 0.0, 0.0));
    debug_assert!((core.y - cell.a2).abs() < 1e-12 && (core.z - cell.a3).abs() < 1e-12);
    Ok(CellSimulation {
        h,
        tau_inf,
        projected,
        envelope: 0.25 * amp * amp,
        analytic_envelope: transmission_envelope(cell.a2, cell.a3, tau_inf),
        amplitudes: [amp2, amp3],
        ellipse: polarization_ellipse(amp2, amp3),
    })
}
