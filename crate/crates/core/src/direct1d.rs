//! Direct solver for the transverse 1D reduction of the nonlinear system.
//!
//! Fields depend on `x1` only and have components `(E2, E3)`. The solver
//! evolves `D = E + chi |E|^2 E` by leapfrog on `d_t^2 D = d_x^2 E` and
//! recovers `E` nodewise.
//!
//! Units are rescaled by `E = h^{1/2} E_hat`: the background is `e0 e3`, the
//! beam enters as `2 h U_init(x1) cos(x1/h)` and the cubic coefficient
//! becomes `h chi(x1)`, so the retardation does not depend on `h`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Grid1D, Vec3};
use crate::media::SusceptibilityField;
use crate::profiles::BeamSpec;
use crate::smooth::Bump;

/// Newton tolerance of the constitutive inversion, relative to `max(1, |D|)`.
pub const NEWTON_TOL: f64 = 1e-13;
pub const NEWTON_MAX_ITER: usize = 8;
/// Largest admissible `dt / dx`.
pub const MAX_CFL: f64 = 0.9;

const STEP_CHUNK: usize = 8192;

/// Solves `E + chi |E|^2 E = D` for `E`, starting Newton on `|E|` from `warm`.
pub fn invert_constitutive_from(d: [f64; 2], chi: f64, warm: f64) -> Result<[f64; 2]> {
    let m = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if chi == 0.0 || m == 0.0 {
        return Ok(d);
    }
    let tol = NEWTON_TOL * m.max(1.0);
    let mut e = if warm > 0.0 { warm } else { m };
    let mut r = e + chi * e * e * e - m;
    let mut history = [0.0; NEWTON_MAX_ITER + 1];
    history[0] = r.abs();
    let mut len = 1;
    let mut growth = 0;
    while r.abs() > tol && len <= NEWTON_MAX_ITER {
        e -= r / (1.0 + 3.0 * chi * e * e);
        r = e + chi * e * e * e - m;
        growth = if r.abs() > history[len - 1] {
            growth + 1
        } else {
            0
        };
        history[len] = r.abs();
        len += 1;
        if growth >= 3 || !r.is_finite() {
            break;
        }
    }
    if !(r.abs() <= tol) {
        return Err(Error::NewtonDivergence {
            residuals: history[..len].to_vec(),
        });
    }
    let s = e / m;
    Ok([d[0] * s, d[1] * s])
}

/// Solves `E + chi |E|^2 E = D` with `D = (D2, D3)` including the background.
pub fn invert_constitutive(d: [f64; 2], chi: f64) -> Result<[f64; 2]> {
    invert_constitutive_from(d, chi, 0.0)
}

pub fn constitutive(e: [f64; 2], chi: f64) -> [f64; 2] {
    let f = 1.0 + chi * (e[0] * e[0] + e[1] * e[1]);
    [e[0] * f, e[1] * f]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    /// Damping layer of the given width at both ends with a quadratic ramp.
    Sponge {
        width: f64,
    },
    Periodic,
}

/// Two time levels of `D` and the current `E` on a uniform grid.
#[derive(Debug, Clone)]
pub struct WaveState1D {
    pub grid: Grid1D,
    pub dt: f64,
    pub t: f64,
    pub step: usize,
    chi: Vec<f64>,
    damping: Vec<f64>,
    periodic: bool,
    /// Value of `E` outside the domain for non-periodic runs.
    exterior: [f64; 2],
    d_prev: Vec<[f64; 2]>,
    d: Vec<[f64; 2]>,
    e: Vec<[f64; 2]>,
    d_next: Vec<[f64; 2]>,
    e_next: Vec<[f64; 2]>,
}

impl WaveState1D {
    /// State at rest in time (`d_t E = 0`) with initial field `e` and cubic coefficient `chi`.
    pub fn new(
        grid: Grid1D,
        dt: f64,
        chi: Vec<f64>,
        e: Vec<[f64; 2]>,
        boundary: Boundary,
        exterior: [f64; 2],
    ) -> Result<Self> {
        let limit = MAX_CFL * grid.spacing;
        if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
            return Err(Error::Cfl { dt, limit });
        }
        if chi.len() != grid.count || e.len() != grid.count {
            return Err(Error::InvalidArgument(
                "chi and field must have one value per node".into(),
            ));
        }
        if grid.count < 3 {
            return Err(Error::InvalidGrid("need at least 3 nodes".into()));
        }
        let d: Vec<[f64; 2]> = e
            .iter()
            .zip(&chi)
            .map(|(e, &c)| constitutive(*e, c))
            .collect();
        let damping = match boundary {
            Boundary::Periodic => vec![0.0; grid.count],
            Boundary::Sponge { width } => sponge_profile(&grid, width),
        };
        let n = grid.count;
        Ok(Self {
            grid,
            dt,
            t: 0.0,
            step: 0,
            chi,
            damping,
            periodic: matches!(boundary, Boundary::Periodic),
            exterior,
            d_prev: d.clone(),
            d,
            e,
            d_next: vec![[0.0; 2]; n],
            e_next: vec![[0.0; 2]; n],
        })
    }

    pub fn field(&self) -> &[[f64; 2]] {
        &self.e
    }

    pub fn displacement(&self) -> &[[f64; 2]] {
        &self.d
    }

    pub fn previous_displacement(&self) -> &[[f64; 2]] {
        &self.d_prev
    }

    pub fn chi(&self) -> &[f64] {
        &self.chi
    }

    /// Largest `|E + chi |E|^2 E - D|` over the grid.
    pub fn constitutive_residual(&self) -> f64 {
        self.e
            .iter()
            .zip(&self.d)
            .zip(&self.chi)
            .map(|((e, d), &c)| {
                let r = constitutive(*e, c);
                (r[0] - d[0]).abs().max((r[1] - d[1]).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Advances one leapfrog step.
    pub fn step(&mut self) -> Result<()> {
        let n = self.grid.count;
        let dt = self.dt;
        let dt2 = dt * dt;
        let inv_dx2 = 1.0 / (self.grid.spacing * self.grid.spacing);
        let first = self.step == 0;
        let (e, d, d_prev, chi, damping) =
            (&self.e, &self.d, &self.d_prev, &self.chi, &self.damping);
        let (periodic, exterior) = (self.periodic, self.exterior);
        self.d_next
            .par_chunks_mut(STEP_CHUNK)
            .zip(self.e_next.par_chunks_mut(STEP_CHUNK))
            .enumerate()
            .try_for_each(|(chunk, (dn, en))| -> Result<()> {
                let base = chunk * STEP_CHUNK;
                for (k, (dn, en)) in dn.iter_mut().zip(en.iter_mut()).enumerate() {
                    let i = base + k;
                    let left = if i > 0 {
                        e[i - 1]
                    } else if periodic {
                        e[n - 1]
                    } else {
                        exterior
                    };
                    let right = if i + 1 < n {
                        e[i + 1]
                    } else if periodic {
                        e[0]
                    } else {
                        exterior
                    };
                    let (ei, di) = (e[i], d[i]);
                    let s = damping[i] * dt * 0.5;
                    for c in 0..2 {
                        let lap = (left[c] - 2.0 * ei[c] + right[c]) * inv_dx2;
                        dn[c] = if first {
                            // d_t D = 0 at t = 0
                            di[c] + 0.5 * dt2 * lap
                        } else if s == 0.0 {
                            di[c] + ((di[c] - d_prev[i][c]) + dt2 * lap)
                        } else {
                            di[c] + ((1.0 - s) * (di[c] - d_prev[i][c]) + dt2 * lap) / (1.0 + s)
                        };
                    }
                    *en = if *dn == di {
                        ei
                    } else if chi[i] == 0.0 {
                        *dn
                    } else {
                        let warm = (ei[0] * ei[0] + ei[1] * ei[1]).sqrt();
                        invert_constitutive_from(*dn, chi[i], warm)?
                    };
                }
                Ok(())
            })?;
        if let Some(node) = self
            .e_next
            .iter()
            .position(|v| !(v[0].is_finite() && v[1].is_finite()))
        {
            return Err(Error::NonFinite {
                step: self.step + 1,
                t: self.t + dt,
                node,
            });
        }
        std::mem::swap(&mut self.d_prev, &mut self.d);
        std::mem::swap(&mut self.d, &mut self.d_next);
        std::mem::swap(&mut self.e, &mut self.e_next);
        self.step += 1;
        self.t = self.step as f64 * dt;
        Ok(())
    }
}

fn sponge_profile(grid: &Grid1D, width: f64) -> Vec<f64> {
    if !(width > 0.0) {
        return vec![0.0; grid.count];
    }
    // Quadratic ramp whose round-trip attenuation is about exp(-14).
    let sigma_max = 3.0 * 14.0 / width;
    let (a, b) = (grid.origin, grid.end());
    grid.coords()
        .map(|x| {
            let depth = (a + width - x).max(x - (b - width)).max(0.0) / width;
            sigma_max * depth * depth
        })
        .collect()
}

/// Field samples `(E2, E3)` recorded at one detector node.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrace {
    pub position: f64,
    pub t0: f64,
    pub dt: f64,
    pub e2: Vec<f64>,
    pub e3: Vec<f64>,
    pub h: f64,
    pub e0: f64,
    /// Value of the static background in the `E3` samples.
    pub background: f64,
    pub a2: f64,
    pub a3: f64,
    pub chi_description: String,
}

impl DetectorTrace {
    pub fn len(&self) -> usize {
        self.e2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e2.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// Samples per oscillation period `2 pi h`.
    pub fn samples_per_period(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.h / self.dt
    }
}

/// Numerical setup of a 1D experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experiment1D {
    pub e0: f64,
    pub domain: (f64, f64),
    pub detector: f64,
    pub t_final: f64,
    /// Grid points per unit of `h`, so `dx = h / points_per_h`.
    pub points_per_h: f64,
    /// `dt / dx`.
    pub cfl: f64,
    /// `None` selects a sponge of width `max(10 dx, 4 pi h)`.
    pub boundary: Option<Boundary>,
}

impl Experiment1D {
    /// Layout with `L = 20`, detector at 16, `dx = h/10`, `dt = dx/2`.
    pub fn standard(e0: f64, t_final: f64) -> Self {
        Self {
            e0,
            domain: (0.0, 20.0),
            detector: 16.0,
            t_final,
            points_per_h: 10.0,
            cfl: 0.5,
            boundary: None,
        }
    }

    /// Short layout around a medium occupying `medium` on the `x1` axis.
    /// Returns the experiment and the envelope of a beam launched just
    /// before the medium; the detector sits just past it.
    pub fn compact(
        e0: f64,
        medium: (f64, f64),
        half_width: f64,
        h: f64,
        points_per_h: f64,
        cfl: f64,
    ) -> (Self, Bump) {
        let w = half_width;
        let launch = medium.0 - w - 0.1;
        let detector = medium.1 + w + 0.1;
        let sponge = (4.0 * std::f64::consts::PI * h).max(10.0 * h / points_per_h);
        let cfg = Self {
            e0,
            domain: (launch - w - sponge - 0.2, detector + w + sponge + 0.2),
            detector,
            t_final: detector - launch + w,
            points_per_h,
            cfl,
            boundary: None,
        };
        (cfg, Bump::new(launch, w))
    }

    pub fn grid(&self, h: f64) -> Result<Grid1D> {
        Grid1D::covering(self.domain.0, self.domain.1, h / self.points_per_h)
    }
}

/// Output of a run: the detector trace and the final state.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub trace: DetectorTrace,
    pub state: WaveState1D,
}

/// Initial rescaled field `e0 e3 + 2 h U_init(x1) cos(x1/h)` on the axis of the beam.
pub fn initial_field(grid: &Grid1D, beam: &BeamSpec, e0: f64) -> Vec<[f64; 2]> {
    let h = beam.h;
    grid.coords()
        .map(|x| {
            let u = beam.u_init(&Vec3::new(x, 0.0, 0.0));
            let c = 2.0 * h * (x / h).cos();
            [c * u.y, e0 + c * u.z]
        })
        .collect()
}

pub fn simulate(
    cfg: &Experiment1D,
    beam: &BeamSpec,
    field: &SusceptibilityField,
) -> Result<Simulation> {
    let h = beam.h;
    let grid = cfg.grid(h)?;
    let chi: Vec<f64> = grid
        .coords()
        .map(|x| h * field.eval(&Vec3::new(x, 0.0, 0.0)))
        .collect();
    let description = if field.is_zero() {
        "zero".to_string()
    } else {
        format!("{:?}", field.representation())
    };
    simulate_with_chi(cfg, beam, grid, chi, description)
}

/// Runs the experiment with an axial profile `chi(x1)` in place of a 3D field.
pub fn simulate_profile<F: Fn(f64) -> f64>(
    cfg: &Experiment1D,
    beam: &BeamSpec,
    chi: F,
    description: &str,
) -> Result<Simulation> {
    let h = beam.h;
    let grid = cfg.grid(h)?;
    let chi: Vec<f64> = grid.coords().map(|x| h * chi(x)).collect();
    simulate_with_chi(cfg, beam, grid, chi, description.to_string())
}

fn simulate_with_chi(
    cfg: &Experiment1D,
    beam: &BeamSpec,
    grid: Grid1D,
    chi: Vec<f64>,
    chi_description: String,
) -> Result<Simulation> {
    if !(cfg.detector >= grid.origin && cfg.detector <= grid.end()) {
        return Err(Error::InvalidArgument(format!(
            "detector {} lies outside the domain",
            cfg.detector
        )));
    }
    let h = beam.h;
    let dt = cfg.cfl * grid.spacing;
    let boundary = cfg.boundary.unwrap_or(Boundary::Sponge {
        width: (10.0 * grid.spacing).max(4.0 * std::f64::consts::PI * h),
    });
    let e = initial_field(&grid, beam, cfg.e0);
    let mut state = WaveState1D::new(grid, dt, chi, e, boundary, [0.0, cfg.e0])?;
    let node = ((cfg.detector - grid.origin) / grid.spacing).round() as usize;
    let steps = (cfg.t_final / dt).ceil() as usize;
    let u = beam.u_init(&Vec3::new(beam.envelope.center, 0.0, 0.0));
    let mut trace = DetectorTrace {
        position: grid.coord(node),
        t0: 0.0,
        dt,
        e2: Vec::with_capacity(steps + 1),
        e3: Vec::with_capacity(steps + 1),
        h,
        e0: cfg.e0,
        background: cfg.e0,
        a2: u.y,
        a3: u.z,
        chi_description,
    };
    let record = |trace: &mut DetectorTrace, s: &WaveState1D| {
        let v = s.field()[node];
        trace.e2.push(v[0]);
        trace.e3.push(v[1]);
    };
    record(&mut trace, &state);
    for _ in 0..steps {
        state.step()?;
        record(&mut trace, &state);
    }
    Ok(Simulation { trace, state })
}

/// Runs the experiment and returns the detector trace.
pub fn run_experiment(
    cfg: &Experiment1D,
    beam: &BeamSpec,
    field: &SusceptibilityField,
) -> Result<DetectorTrace> {
    Ok(simulate(cfg, beam, field)?.trace)
}

/// Phase of one trace component relative to the transported beam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseFit {
    /// `delta` in `y ~ A U_j(x - t) cos((x - t)/h + delta)`.
    pub delta: f64,
    pub amplitude: f64,
}

/// Least-squares fit of `U_j(x_d - t) [a cos psi + b sin psi]`, `psi = (x_d - t)/h`,
/// to component `j` (2 or 3) of the oscillatory part of the trace.
pub fn fit_phase(trace: &DetectorTrace, beam: &BeamSpec, component: usize) -> Result<PhaseFit> {
    if component != 2 && component != 3 {
        return Err(Error::InvalidArgument(format!(
            "component must be 2 or 3, got {component}"
        )));
    }
    let x = trace.position;
    let (mut scc, mut scs, mut sss, mut syc, mut sys) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..trace.len() {
        let t = trace.time(i);
        let u = beam.u_init(&Vec3::new(x - t, 0.0, 0.0))[component - 1];
        if u == 0.0 {
            continue;
        }
        let y = if component == 2 {
            trace.e2[i]
        } else {
            trace.e3[i] - trace.background
        };
        let psi = (x - t) / trace.h;
        let (c, s) = (u * psi.cos(), u * psi.sin());
        scc += c * c;
        scs += c * s;
        sss += s * s;
        syc += y * c;
        sys += y * s;
    }
    let det = scc * sss - scs * scs;
    if !(det > 0.0) {
        return Err(Error::InvalidArgument(
            "the beam envelope never reaches the detector".into(),
        ));
    }
    let a = (syc * sss - sys * scs) / det;
    let b = (sys * scc - syc * scs) / det;
    Ok(PhaseFit {
        delta: (-b).atan2(a),
        amplitude: a.hypot(b),
    })
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = a - two_pi * (a / two_pi).round();
    if w <= -std::f64::consts::PI {
        w + two_pi
    } else {
        w
    }
}

/// Phase shifts of a run measured against a run without medium on the same grid.
#[derive(Debug, Clone)]
pub struct PhaseMeasurement {
    pub trace: DetectorTrace,
    pub reference: DetectorTrace,
    pub delta2: Option<f64>,
    pub delta3: Option<f64>,
}

/// Runs the experiment twice, with `field` and with `chi = 0`, and returns the
/// phase differences of each component. Taking differences removes the
/// numerical dispersion common to both runs.
pub fn measure_phase_shift(
    cfg: &Experiment1D,
    beam: &BeamSpec,
    field: &SusceptibilityField,
) -> Result<PhaseMeasurement> {
    let trace = run_experiment(cfg, beam, field)?;
    let grid = cfg.grid(beam.h)?;
    let reference = simulate_with_chi(cfg, beam, grid, vec![0.0; grid.count], "zero".into())?.trace;
    let shift = |j: usize, active: bool| -> Result<Option<f64>> {
        if !active {
            return Ok(None);
        }
        let a = fit_phase(&trace, beam, j)?;
        let b = fit_phase(&reference, beam, j)?;
        Ok(Some(wrap_angle(a.delta - b.delta)))
    };
    let (d2, d3) = (shift(2, trace.a2 != 0.0)?, shift(3, trace.a3 != 0.0)?);
    Ok(PhaseMeasurement {
        trace,
        reference,
        delta2: d2,
        delta3: d3,
    })
}

/// Snapshots of `(E2, E3)` on a grid at uniform time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldHistory {
    pub grid: Grid1D,
    pub dt: f64,
    pub frames: Vec<Vec<[f64; 2]>>,
}

/// `H(t) = H0 - int_0^t curl E`, with `curl E = (0, -d1 E3, d1 E2)`, by the
/// trapezoid rule in time and centered differences in space. Returns
/// `(H2, H3)` at every frame.
pub fn reconstruct_h(history: &FieldHistory, h0: &[[f64; 2]]) -> Result<Vec<Vec<[f64; 2]>>> {
    let n = history.grid.count;
    if h0.len() != n || history.frames.iter().any(|f| f.len() != n) {
        return Err(Error::InvalidArgument(
            "every frame must have one value per node".into(),
        ));
    }
    if n < 3 {
        return Err(Error::InvalidGrid("need at least 3 nodes".into()));
    }
    let dx = history.grid.spacing;
    let curl = |f: &[[f64; 2]]| -> Vec<[f64; 2]> {
        (0..n)
            .map(|i| {
                let d = |c: usize| {
                    if i == 0 {
                        (-3.0 * f[0][c] + 4.0 * f[1][c] - f[2][c]) / (2.0 * dx)
                    } else if i == n - 1 {
                        (3.0 * f[n - 1][c] - 4.0 * f[n - 2][c] + f[n - 3][c]) / (2.0 * dx)
                    } else {
                        (f[i + 1][c] - f[i - 1][c]) / (2.0 * dx)
                    }
                };
                [-d(1), d(0)]
            })
            .collect()
    };
    let mut out = Vec::with_capacity(history.frames.len());
    let mut h = h0.to_vec();
    let mut prev: Option<Vec<[f64; 2]>> = None;
    for f in &history.frames {
        let c = curl(f);
        if let Some(p) = &prev {
            for i in 0..n {
                for k in 0..2 {
                    h[i][k] -= 0.5 * history.dt * (p[i][k] + c[i][k]);
                }
            }
        }
        out.push(h.clone());
        prev = Some(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::GaussianBump;
    use crate::profiles::core_beam;
    use crate::smooth::Bump;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn bisect<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if f(a) * f(m) <= 0.0 {
                b = m;
            } else {
                a = m;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn constitutive_examples() {
        assert_eq!(invert_constitutive([0.3, -1.2], 0.0).unwrap(), [0.3, -1.2]);
        let e = invert_constitutive([0.0, 1.0], 0.1).unwrap();
        let oracle = bisect(|e| e + 0.1 * e * e * e - 1.0, 0.0, 1.0);
        assert!((e[1] - oracle).abs() < 1e-13 && e[0] == 0.0);
        assert!((e[1] - 0.92170).abs() < 1e-5);
        let n = invert_constitutive([0.0, -1.0], 0.1).unwrap();
        assert_eq!(n, [-0.0, -e[1]]);
        assert!(matches!(
            invert_constitutive([0.0, 1e3], -1.0),
            Err(Error::NewtonDivergence { .. })
        ));
    }

    proptest! {
        #[test]
        fn constitutive_round_trip(d2 in -3.0..3.0f64, d3 in -3.0..3.0f64, chi in 0.0..0.5f64) {
            let e = invert_constitutive([d2, d3], chi).unwrap();
            let back = constitutive(e, chi);
            prop_assert!((back[0] - d2).abs() < 1e-12 && (back[1] - d3).abs() < 1e-12);
            let m = invert_constitutive([-d2, -d3], chi).unwrap();
            prop_assert!((m[0] + e[0]).abs() < 1e-15 && (m[1] + e[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_background_is_a_fixed_point() {
        let grid = Grid1D::new(0.0, 0.01, 300).unwrap();
        let chi: Vec<f64> = grid
            .coords()
            .map(|x| 0.2 * (-(x - 1.5f64).powi(2) * 10.0).exp())
            .collect();
        let mut s = WaveState1D::new(
            grid,
            0.005,
            chi,
            vec![[0.0, 1.3]; 300],
            Boundary::Sponge { width: 0.3 },
            [0.0, 1.3],
        )
        .unwrap();
        for _ in 0..500 {
            s.step().unwrap();
        }
        assert!(s.field().iter().all(|v| *v == [0.0, 1.3]));
        assert!(s.constitutive_residual() < 1e-12);
    }

    #[test]
    fn cfl_is_enforced() {
        let grid = Grid1D::new(0.0, 0.01, 10).unwrap();
        let r = WaveState1D::new(
            grid,
            0.0095,
            vec![0.0; 10],
            vec![[0.0; 2]; 10],
            Boundary::Periodic,
            [0.0; 2],
        );
        assert!(matches!(r, Err(Error::Cfl { .. })));
    }

    /// Energy `1/2 |(u^{n+1} - u^n)/dt|^2 + 1/2 <D+ u^{n+1}, D+ u^n>`, exactly
    /// conserved by periodic leapfrog for the linear wave equation.
    fn discrete_energy(prev: &[[f64; 2]], cur: &[[f64; 2]], dt: f64, dx: f64) -> f64 {
        let n = cur.len();
        let mut acc = 0.0;
        for i in 0..n {
            let j = (i + 1) % n;
            for c in 0..2 {
                let v = (cur[i][c] - prev[i][c]) / dt;
                let g1 = (cur[j][c] - cur[i][c]) / dx;
                let g0 = (prev[j][c] - prev[i][c]) / dx;
                acc += 0.5 * v * v + 0.5 * g1 * g0;
            }
        }
        acc * dx
    }

    #[test]
    fn linear_energy_is_conserved() {
        let n = 256;
        let grid = Grid1D::new(0.0, 1.0 / n as f64, n).unwrap();
        let e: Vec<[f64; 2]> = grid
            .coords()
            .map(|x| {
                [
                    (2.0 * PI * x).sin() + 0.3 * (6.0 * PI * x).cos(),
                    0.5 * (4.0 * PI * x).sin(),
                ]
            })
            .collect();
        let dt = 0.7 * grid.spacing;
        let mut s =
            WaveState1D::new(grid, dt, vec![0.0; n], e, Boundary::Periodic, [0.0; 2]).unwrap();
        s.step().unwrap();
        let e0 = discrete_energy(
            s.previous_displacement(),
            s.displacement(),
            dt,
            grid.spacing,
        );
        for _ in 0..10_000 {
            s.step().unwrap();
        }
        let e1 = discrete_energy(
            s.previous_displacement(),
            s.displacement(),
            dt,
            grid.spacing,
        );
        assert!(((e1 - e0) / e0).abs() < 1e-8, "{e0} {e1}");
    }

    #[test]
    fn null_run_translates_at_unit_speed() {
        let h = 0.02;
        let beam = core_beam(1.0, 0.0, 0.5, Bump::new(3.0, 0.8), h).unwrap();
        let cfg = Experiment1D {
            e0: 0.0,
            domain: (0.0, 8.0),
            detector: 6.0,
            t_final: 1.5,
            points_per_h: 20.0,
            cfl: 0.9,
            boundary: None,
        };
        let zero = SusceptibilityField::zero(1.0, 2.0).unwrap();
        let sim = simulate(&cfg, &beam, &zero).unwrap();
        let t = sim.state.t;
        let grid = sim.state.grid;
        let (mut err, mut norm) = (0.0, 0.0);
        for (i, x) in grid.coords().enumerate() {
            let exact = h * beam.u_init(&Vec3::new(x - t, 0.0, 0.0)).y * ((x - t) / h).cos()
                + h * beam.u_init(&Vec3::new(x + t, 0.0, 0.0)).y * ((x + t) / h).cos();
            err += (sim.state.field()[i][0] - exact).powi(2);
            norm += exact * exact;
        }
        assert!((err / norm).sqrt() < 1e-2, "{}", (err / norm).sqrt());
    }

    #[test]
    fn phase_shifts_follow_tau_and_three_tau() {
        let h = 0.02;
        let field = SusceptibilityField::analytic(
            vec![GaussianBump::new(0.8, Vec3::zeros(), 0.5)],
            2.0,
            3.0,
        )
        .unwrap()
        .translated(&Vec3::new(5.0, 0.0, 0.0));
        let tau = 0.5
            * crate::media::xray_transform(
                &field,
                &crate::geometry::Direction::e1(),
                &Vec3::zeros(),
            );
        let beam = core_beam(1.0, 0.7, 0.5, Bump::new(2.3, 0.6), h).unwrap();
        let cfg = Experiment1D {
            e0: 1.0,
            domain: (1.0, 9.0),
            detector: 7.7,
            t_final: 6.0,
            points_per_h: 10.0,
            cfl: 0.9,
            boundary: None,
        };
        let m = measure_phase_shift(&cfg, &beam, &field).unwrap();
        let (d2, d3) = (m.delta2.unwrap(), m.delta3.unwrap());
        assert!((d2 - tau).abs() < 5.0 * h, "{d2} vs {tau}");
        assert!((d3 - 3.0 * tau).abs() < 5.0 * h, "{d3} vs {}", 3.0 * tau);
        assert!(m.trace.samples_per_period() >= 20.0);
    }

    #[test]
    fn h_reconstruction_of_plane_wave() {
        let n = 200;
        let grid = Grid1D::new(0.0, 2.0 * PI / n as f64, n).unwrap();
        let dt = 0.01;
        let frames: Vec<Vec<[f64; 2]>> = (0..=300)
            .map(|k| {
                let t = k as f64 * dt;
                grid.coords().map(|x| [(x - t).cos(), 0.4]).collect()
            })
            .collect();
        let h0 = vec![[0.1, -0.2]; n];
        let out = reconstruct_h(&FieldHistory { grid, dt, frames }, &h0).unwrap();
        let t = 300.0 * dt;
        for (i, x) in grid.coords().enumerate().skip(5).step_by(17) {
            let h3 = (x - t).cos() - x.cos() - 0.2;
            assert!((out[300][i][1] - h3).abs() < 2e-3, "{x}");
            assert!((out[300][i][0] - 0.1).abs() < 1e-14);
        }
        // constant field leaves H unchanged
        let frames = vec![vec![[0.3, 0.7]; n]; 10];
        let out = reconstruct_h(&FieldHistory { grid, dt, frames }, &h0).unwrap();
        for (a, b) in out[9].iter().zip(&h0) {
            assert!((a[0] - b[0]).abs() < 1e-14 && (a[1] - b[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
        assert!((wrap_angle(7.0) - (7.0 - 2.0 * PI)).abs() < 1e-12);
    }
}
