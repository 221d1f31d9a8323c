//! Recovery of `chi` from detector traces.
//!
//! Each trace gives `cos tau` and `sin tau` through windowed oscillatory
//! integrals; unwrapping over the detector plane gives `tau`, and
//! `g = 2 tau / e0^2` is the X-ray transform of `chi` along the beam. Rays
//! perpendicular to the bias field fill the 2D Radon data of every `x3`
//! slice, which is inverted by filtered backprojection.

use std::collections::VecDeque;
use std::f64::consts::PI;

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::direct1d::DetectorTrace;
use crate::error::{Error, Result};
use crate::geometry::{Direction, Frame, Grid1D, Grid3D, Vec3};
use crate::media::{tau_at, SusceptibilityField};
use crate::profiles::BeamSpec;

/// Normalization integrals below this are rejected.
pub const MIN_ENVELOPE_INTEGRAL: f64 = 1e-8;
/// Fewest projection angles accepted by the reconstruction.
pub const MIN_ANGLES: usize = 8;

/// Window `(1 - u^2)^4`, `u` mapping `support` onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowFunction {
    pub support: (f64, f64),
}

impl WindowFunction {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(b > a) {
            return Err(Error::InvalidArgument(format!(
                "empty window support ({a}, {b})"
            )));
        }
        Ok(Self { support: (a, b) })
    }

    /// Window covering the times at which the beam crosses the detector plane `x1 = position`.
    pub fn for_beam(beam: &BeamSpec, position: f64) -> Result<Self> {
        let (lo, hi) = beam.longitudinal_support();
        Self::new(position - hi, position - lo)
    }

    pub fn value(&self, t: f64) -> f64 {
        let (a, b) = self.support;
        let u = (2.0 * t - a - b) / (b - a);
        if u.abs() >= 1.0 {
            0.0
        } else {
            (1.0 - u * u).powi(4)
        }
    }
}

/// Estimates of `cos tau` and `sin tau` from one trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosSinEstimate {
    pub cos_tau: f64,
    pub sin_tau: f64,
    /// `int U2(R - t, x') psi(t) dt`.
    pub normalization: f64,
}

impl CosSinEstimate {
    pub fn modulus_squared(&self) -> f64 {
        self.cos_tau * self.cos_tau + self.sin_tau * self.sin_tau
    }
}

/// Windowed integrals of the `E2` trace against `cos((R - t)/h)` and `sin((R - t)/h)`.
///
/// With `trace_2 ~ scale * U2(R - t) cos((R - t)/h + tau)`:
/// `cos tau = I_c / (N/2)` and `sin tau = -I_s / (N/2)`, where
/// `N = int U2(R - t) psi dt`. `x_perp` is the transverse position of the ray
/// in the beam frame and `scale` the amplitude prefactor of the trace.
pub fn extract_cos_sin_tau(
    trace: &DetectorTrace,
    beam: &BeamSpec,
    x_perp: (f64, f64),
    window: &WindowFunction,
    scale: f64,
) -> Result<CosSinEstimate> {
    if trace.len() < 2 {
        return Err(Error::InvalidArgument(
            "trace needs at least two samples".into(),
        ));
    }
    let r = trace.position;
    let n = trace.len();
    let (mut ic, mut is, mut norm) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let t = trace.time(i);
        let w = window.value(t);
        if w == 0.0 {
            continue;
        }
        let weight = if i == 0 || i == n - 1 { 0.5 } else { 1.0 } * trace.dt * w;
        let phase = (r - t) / trace.h;
        let y = trace.e2[i] / scale;
        ic += weight * y * phase.cos();
        is += weight * y * phase.sin();
        norm += weight * beam.u_init(&Vec3::new(r - t, x_perp.0, x_perp.1)).y;
    }
    if !(norm.abs() >= MIN_ENVELOPE_INTEGRAL) {
        return Err(Error::WindowMissesEnvelope { integral: norm });
    }
    Ok(CosSinEstimate {
        cos_tau: ic / (0.5 * norm),
        sin_tau: -is / (0.5 * norm),
        normalization: norm,
    })
}

/// Tries each window and blends the estimates that succeed, weighted by
/// their normalization integrals.
pub fn extract_with_family(
    trace: &DetectorTrace,
    beam: &BeamSpec,
    x_perp: (f64, f64),
    family: &[WindowFunction],
    scale: f64,
) -> Result<CosSinEstimate> {
    let (mut c, mut s, mut wsum, mut norm) = (0.0, 0.0, 0.0, 0.0);
    let mut last_err = Error::WindowMissesEnvelope { integral: 0.0 };
    for w in family {
        match extract_cos_sin_tau(trace, beam, x_perp, w, scale) {
            Ok(e) => {
                let weight = e.normalization.abs();
                c += weight * e.cos_tau;
                s += weight * e.sin_tau;
                wsum += weight;
                norm += e.normalization;
            }
            Err(e @ Error::WindowMissesEnvelope { .. }) => last_err = e,
            Err(e) => return Err(e),
        }
    }
    if wsum == 0.0 {
        return Err(last_err);
    }
    Ok(CosSinEstimate {
        cos_tau: c / wsum,
        sin_tau: s / wsum,
        normalization: norm,
    })
}

/// Recovers `tau` from `cos tau` and `sin tau` sampled on a detector plane.
///
/// The wrapped angle is unwrapped by breadth-first flood fill from the
/// corner `[0, 0]`, which must lie on a ray missing the medium (`tau = 0`).
pub fn unwrap_tau(cos_tau: &Array2<f64>, sin_tau: &Array2<f64>) -> Result<Array2<f64>> {
    if cos_tau.dim() != sin_tau.dim() {
        return Err(Error::InvalidArgument(
            "cos and sin fields differ in shape".into(),
        ));
    }
    let (nr, nc) = cos_tau.dim();
    if nr == 0 || nc == 0 {
        return Ok(Array2::zeros((nr, nc)));
    }
    let wrapped = Array2::from_shape_fn((nr, nc), |ix| sin_tau[ix].atan2(cos_tau[ix]));
    let mut out = Array2::<f64>::zeros((nr, nc));
    let mut seen = Array2::from_elem((nr, nc), false);
    let mut queue = VecDeque::new();
    out[[0, 0]] = wrapped[[0, 0]];
    seen[[0, 0]] = true;
    queue.push_back((0usize, 0usize));
    let two_pi = 2.0 * PI;
    while let Some((i, j)) = queue.pop_front() {
        let here = out[[i, j]];
        let neighbours = [
            (i.wrapping_sub(1), j),
            (i + 1, j),
            (i, j.wrapping_sub(1)),
            (i, j + 1),
        ];
        for (a, b) in neighbours {
            if a >= nr || b >= nc || seen[[a, b]] {
                continue;
            }
            let w = wrapped[[a, b]];
            out[[a, b]] = w + two_pi * ((here - w) / two_pi).round();
            seen[[a, b]] = true;
            queue.push_back((a, b));
        }
    }
    let mut worst: f64 = 0.0;
    for ((i, j), &v) in out.indexed_iter() {
        if i + 1 < nr {
            worst = worst.max((out[[i + 1, j]] - v).abs());
        }
        if j + 1 < nc {
            worst = worst.max((out[[i, j + 1]] - v).abs());
        }
    }
    if worst >= PI {
        return Err(Error::InsufficientResolution { jump: worst });
    }
    Ok(out)
}

/// Line integrals `g = 2 tau / e0^2` stored as `[slice][angle][offset]`.
///
/// Angle `k` is `pi k / n_angles`; the ray at angle `theta` and offset `p`
/// is `{p w_perp + z e3 + s w}` with `w = (cos theta, sin theta, 0)` and
/// `w_perp = (-sin theta, cos theta, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub data: Array3<f64>,
    pub offset_min: f64,
    pub offset_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub e0: f64,
}

impl Sinogram {
    pub fn new(data: Array3<f64>, offsets: (f64, f64), z: (f64, f64), e0: f64) -> Result<Self> {
        let (_, _, no) = data.dim();
        if no < 2 || !(offsets.1 > offsets.0) || !(z.1 >= z.0) {
            return Err(Error::InvalidArgument(
                "sinogram needs at least two offsets and ordered ranges".into(),
            ));
        }
        Ok(Self {
            data,
            offset_min: offsets.0,
            offset_max: offsets.1,
            z_min: z.0,
            z_max: z.1,
            e0,
        })
    }

    pub fn n_slices(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_angles(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_offsets(&self) -> usize {
        self.data.dim().2
    }

    pub fn angle(&self, k: usize) -> f64 {
        PI * k as f64 / self.n_angles() as f64
    }

    pub fn offsets(&self) -> Grid1D {
        let n = self.n_offsets();
        Grid1D {
            origin: self.offset_min,
            spacing: (self.offset_max - self.offset_min) / (n - 1) as f64,
            count: n,
        }
    }

    pub fn slice_z(&self, s: usize) -> f64 {
        let n = self.n_slices();
        if n <= 1 {
            self.z_min
        } else {
            self.z_min + (self.z_max - self.z_min) * s as f64 / (n - 1) as f64
        }
    }
}

/// Builds the sinogram from `tau` planes, one per angle, each `[slice][offset]`.
pub fn assemble_sinogram(
    tau: &[Array2<f64>],
    e0: f64,
    offsets: (f64, f64),
    z: (f64, f64),
) -> Result<Sinogram> {
    if e0 == 0.0 {
        return Err(Error::NoRetardationSignal);
    }
    let Some(first) = tau.first() else {
        return Err(Error::InsufficientAngles { count: 0 });
    };
    let (ns, no) = first.dim();
    if tau.iter().any(|t| t.dim() != (ns, no)) {
        return Err(Error::InvalidArgument("tau planes differ in shape".into()));
    }
    let scale = 2.0 / (e0 * e0);
    let data = Array3::from_shape_fn((ns, tau.len(), no), |(s, a, o)| scale * tau[a][[s, o]]);
    Sinogram::new(data, offsets, z, e0)
}

/// Samples `xray_transform` of `field` on the sinogram layout.
pub fn radon_sinogram(
    field: &SusceptibilityField,
    n_angles: usize,
    offsets: &Grid1D,
    slices: &[f64],
    e0: f64,
) -> Result<Sinogram> {
    if slices.is_empty() {
        return Err(Error::InvalidArgument("need at least one slice".into()));
    }
    let mut data = Array3::zeros((slices.len(), n_angles, offsets.count));
    data.axis_iter_mut(Axis(1))
        .into_par_iter()
        .enumerate()
        .for_each(|(k, mut plane)| {
            let th = PI * k as f64 / n_angles as f64;
            let omega = Direction::in_plane(th);
            let perp = Vec3::new(-th.sin(), th.cos(), 0.0);
            for (s, &z) in slices.iter().enumerate() {
                for (o, p) in offsets.coords().enumerate() {
                    plane[[s, o]] =
                        crate::media::xray_transform(field, &omega, &(p * perp + z * Vec3::z()));
                }
            }
        });
    let zmax = slices.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let zmin = slices.iter().cloned().fold(f64::INFINITY, f64::min);
    Sinogram::new(data, (offsets.origin, offsets.end()), (zmin, zmax), e0)
}

/// Output of filtered backprojection: values on a grid whose `x3` axis
/// holds the slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub grid: Grid3D,
    pub values: Array3<f64>,
    pub radius: f64,
}

impl Reconstruction {
    /// The reconstruction as a gridded susceptibility supported in the
    /// disc of the offset range.
    pub fn into_field(self) -> Result<SusceptibilityField> {
        SusceptibilityField::gridded(
            self.grid,
            self.values,
            self.radius * 3f64.sqrt(),
            self.radius * 4.0,
        )
    }
}

/// Ram-Lak filter with Hann apodization, applied by zero-padded FFT.
fn filter_projections(sino: &Sinogram) -> Array3<f64> {
    let (ns, na, no) = sino.data.dim();
    let dp = sino.offsets().spacing;
    let len = (2 * no).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    // spatial kernel h(k dp): 1/(4 dp^2) at 0, -1/(pi k dp)^2 at odd k
    let mut kernel = vec![Complex64::default(); len];
    for (k, v) in kernel.iter_mut().enumerate() {
        let m = if k <= len / 2 {
            k as i64
        } else {
            k as i64 - len as i64
        };
        let val = if m == 0 {
            1.0 / (4.0 * dp * dp)
        } else if m % 2 != 0 {
            -1.0 / (PI * PI * (m * m) as f64 * dp * dp)
        } else {
            0.0
        };
        *v = Complex64::new(val, 0.0);
    }
    fwd.process(&mut kernel);
    for (k, v) in kernel.iter_mut().enumerate() {
        let f = if k <= len / 2 {
            k as f64
        } else {
            (len - k) as f64
        } / (len / 2) as f64;
        *v *= 0.5 * (1.0 + (PI * f).cos()) * dp / len as f64;
    }
    let mut out = Array3::zeros((ns, na, no));
    out.outer_iter_mut()
        .into_par_iter()
        .enumerate()
        .for_each(|(s, mut slice)| {
            let mut buf = vec![Complex64::default(); len];
            for a in 0..na {
                buf.iter_mut().for_each(|b| *b = Complex64::default());
                for o in 0..no {
                    buf[o] = Complex64::new(sino.data[[s, a, o]], 0.0);
                }
                fwd.process(&mut buf);
                for (b, k) in buf.iter_mut().zip(&kernel) {
                    *b *= k;
                }
                inv.process(&mut buf);
                for o in 0..no {
                    slice[[a, o]] = buf[o].re;
                }
            }
        });
    out
}

/// 2D filtered backprojection per slice onto an `n x n` pixel grid spanning
/// the offset range.
pub fn fbp_reconstruct(sino: &Sinogram, n_pixels: usize) -> Result<Reconstruction> {
    let na = sino.n_angles();
    if na < MIN_ANGLES {
        return Err(Error::InsufficientAngles { count: na });
    }
    if n_pixels < 2 {
        return Err(Error::InvalidGrid("need at least 2 pixels per axis".into()));
    }
    let ns = sino.n_slices();
    let radius = sino.offset_max.abs().max(sino.offset_min.abs());
    let dx = 2.0 * radius / (n_pixels - 1) as f64;
    let (z0, dz, nz) = if ns == 1 {
        (sino.z_min - 0.5 * dx, dx, 2)
    } else {
        (sino.z_min, (sino.z_max - sino.z_min) / (ns - 1) as f64, ns)
    };
    let grid = Grid3D::new(
        [-radius, -radius, z0],
        [dx, dx, dz],
        [n_pixels, n_pixels, nz],
    )?;
    let filtered = filter_projections(sino);
    let offsets = sino.offsets();
    let trig: Vec<(f64, f64)> = (0..na)
        .map(|k| (sino.angle(k).cos(), sino.angle(k).sin()))
        .collect();
    let mut slices = Array3::<f64>::zeros((ns, n_pixels, n_pixels));
    slices
        .outer_iter_mut()
        .into_par_iter()
        .enumerate()
        .for_each(|(s, mut img)| {
            for ((i, j), v) in img.indexed_iter_mut() {
                let (x, y) = (-radius + i as f64 * dx, -radius + j as f64 * dx);
                let mut acc = 0.0;
                for (a, &(c, sn)) in trig.iter().enumerate() {
                    let p = -x * sn + y * c;
                    let u = (p - offsets.origin) / offsets.spacing;
                    if u < 0.0 || u > (offsets.count - 1) as f64 {
                        continue;
                    }
                    let i0 = (u.floor() as usize).min(offsets.count - 2);
                    let f = u - i0 as f64;
                    acc += (1.0 - f) * filtered[[s, a, i0]] + f * filtered[[s, a, i0 + 1]];
                }
                *v = acc * PI / na as f64;
            }
        });
    let values = Array3::from_shape_fn(grid.shape(), |(i, j, k)| slices[[k.min(ns - 1), i, j]]);
    Ok(Reconstruction {
        grid,
        values,
        radius,
    })
}

/// Leading-order trace at the lab point `x_det` for a beam along `omega`,
/// sampled over the window of times when the beam crosses the detector.
///
/// The beam is laid out in the frame of `omega`; the sample is
/// `h^{1/2} e0 e3 + h^{3/2} (U2(y) cos(phi/h + tau), U3(y) cos(phi/h + 3 tau))`
/// in transverse/bias components.
pub fn geometric_optics_trace(
    beam: &BeamSpec,
    field: &SusceptibilityField,
    e0: f64,
    omega: &Direction,
    x_det: &Vec3,
    samples_per_period: f64,
) -> Result<DetectorTrace> {
    let frame = Frame::new(*omega)?;
    let xc = frame.to_canonical(x_det);
    let h = beam.h;
    let tau = tau_at(field, e0.abs(), x_det, omega);
    let (lo, hi) = beam.longitudinal_support();
    let (t0, t1) = (xc.x - hi, xc.x - lo);
    let dt = 2.0 * PI * h / samples_per_period.max(20.0);
    let n = ((t1 - t0) / dt).ceil() as usize + 1;
    let (sq, h32) = (h.sqrt(), h.powf(1.5));
    let mut e2 = Vec::with_capacity(n);
    let mut e3 = Vec::with_capacity(n);
    for i in 0..n {
        let t = t0 + i as f64 * dt;
        let u = beam.u_init(&Vec3::new(xc.x - t, xc.y, xc.z));
        let theta = (xc.x - t) / h;
        e2.push(h32 * u.y * (theta + tau).cos());
        e3.push(sq * e0 + h32 * u.z * (theta + 3.0 * tau).cos());
    }
    let core = beam.u_init(&Vec3::new(beam.envelope.center, 0.0, 0.0));
    Ok(DetectorTrace {
        position: xc.x,
        t0,
        dt,
        e2,
        e3,
        h,
        e0,
        background: sq * e0,
        a2: core.y,
        a3: core.z,
        chi_description: "geometric optics".into(),
    })
}

/// Layout of a synthetic tomography experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGeometry {
    pub n_angles: usize,
    pub offsets: Grid1D,
    pub slices: Vec<f64>,
    /// Distance of the detector plane from the origin along the beam.
    pub detector: f64,
    pub samples_per_period: f64,
}

/// Per-angle extraction results on the `[slice][offset]` detector plane.
#[derive(Debug, Clone)]
pub struct AngleData {
    pub cos_tau: Array2<f64>,
    pub sin_tau: Array2<f64>,
    pub tau: Array2<f64>,
}

/// Synthetic forward run, extraction and unwrapping for every angle.
/// `beam` is given in the canonical frame and is reused for every direction.
pub fn geometric_optics_scan(
    beam: &BeamSpec,
    field: &SusceptibilityField,
    e0: f64,
    scan: &ScanGeometry,
) -> Result<Vec<AngleData>> {
    let window = WindowFunction::for_beam(beam, scan.detector)?;
    let scale = beam.h.powf(1.5);
    (0..scan.n_angles)
        .into_par_iter()
        .map(|k| {
            let th = PI * k as f64 / scan.n_angles as f64;
            let omega = Direction::in_plane(th);
            let perp = Vec3::new(-th.sin(), th.cos(), 0.0);
            let shape = (scan.slices.len(), scan.offsets.count);
            let mut c = Array2::zeros(shape);
            let mut s = Array2::zeros(shape);
            for (si, &z) in scan.slices.iter().enumerate() {
                for (oi, p) in scan.offsets.coords().enumerate() {
                    let x = scan.detector * omega.vec() + p * perp + z * Vec3::z();
                    let trace = geometric_optics_trace(
                        beam,
                        field,
                        e0,
                        &omega,
                        &x,
                        scan.samples_per_period,
                    )?;
                    let est = extract_cos_sin_tau(&trace, beam, (p, z), &window, scale)?;
                    c[[si, oi]] = est.cos_tau;
                    s[[si, oi]] = est.sin_tau;
                }
            }
            let tau = unwrap_tau(&c, &s)?;
            Ok(AngleData {
                cos_tau: c,
                sin_tau: s,
                tau,
            })
        })
        .collect()
}

/// Full synthetic pipeline: forward traces, extraction, unwrapping and sinogram assembly.
pub fn geometric_optics_sinogram(
    beam: &BeamSpec,
    field: &SusceptibilityField,
    e0: f64,
    scan: &ScanGeometry,
) -> Result<(Sinogram, Vec<AngleData>)> {
    let data = geometric_optics_scan(beam, field, e0, scan)?;
    let taus: Vec<Array2<f64>> = data.iter().map(|d| d.tau.clone()).collect();
    let zmin = scan.slices.iter().cloned().fold(f64::INFINITY, f64::min);
    let zmax = scan
        .slices
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let sino = assemble_sinogram(
        &taus,
        e0,
        (scan.offsets.origin, scan.offsets.end()),
        (zmin, zmax),
    )?;
    Ok((sino, data))
}

/// Relative L2 error of `recon` against `field` over pixels inside the
/// support ball of `field`.
pub fn relative_l2_error(recon: &Reconstruction, field: &SusceptibilityField) -> f64 {
    let (mut err, mut norm) = (0.0, 0.0);
    let c = field.support_center();
    let r = field.support_radius();
    let slices = if recon.grid.counts[2] == 2 && recon.values.dim().2 == 2 {
        1
    } else {
        recon.grid.counts[2]
    };
    for ((i, j, k), &v) in recon.values.indexed_iter() {
        if k >= slices {
            continue;
        }
        let mut x = recon.grid.coord(i, j, k);
        if slices == 1 {
            x.z += 0.5 * recon.grid.spacing[2];
        }
        if (x - c).norm() >= r {
            continue;
        }
        let exact = field.eval(&x);
        err += (v - exact).powi(2);
        norm += exact * exact;
    }
    if norm == 0.0 {
        err.sqrt()
    } else {
        (err / norm).sqrt()
    }
}
