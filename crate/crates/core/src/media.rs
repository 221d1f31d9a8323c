//! The nonlinear susceptibility field and its line integrals.
//!
//! The phase retardation accumulated along a ray is
//! `tau(s) = 1/2 |E0|^2 * int_{-inf}^{s} chi(y + sigma omega) d sigma`.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::geometry::{Direction, Grid3D, Ray, Vec3};
use crate::quadrature::integrate;
use crate::smooth::Cutoff;

/// Absolute tolerance of every line integral.
pub const LINE_TOL: f64 = 1e-10;

/// `amplitude * exp(-|x - center|^2 / (2 width^2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBump {
    pub amplitude: f64,
    pub center: Vec3,
    pub width: f64,
}

impl GaussianBump {
    pub fn new(amplitude: f64, center: Vec3, width: f64) -> Self {
        Self {
            amplitude,
            center,
            width,
        }
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        let r2 = (x - self.center).norm_squared();
        self.amplitude * (-r2 / (2.0 * self.width * self.width)).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    Analytic(Vec<GaussianBump>),
    Gridded { grid: Grid3D, values: Array3<f64> },
}

/// Compactly supported `chi(x)`, vanishing outside the ball of radius
/// `support_radius` about `support_center`.
#[derive(Debug, Clone, PartialEq)]
pub struct SusceptibilityField {
    repr: Representation,
    support_center: Vec3,
    support_radius: f64,
    domain_radius: f64,
    cutoff: Cutoff,
}

impl SusceptibilityField {
    pub fn analytic(
        bumps: Vec<GaussianBump>,
        support_radius: f64,
        domain_radius: f64,
    ) -> Result<Self> {
        for b in &bumps {
            if !(b.width > 0.0) || !b.amplitude.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "invalid Gaussian bump {b:?}"
                )));
            }
        }
        Self::build(
            Representation::Analytic(bumps),
            support_radius,
            domain_radius,
        )
    }

    pub fn zero(support_radius: f64, domain_radius: f64) -> Result<Self> {
        Self::analytic(Vec::new(), support_radius, domain_radius)
    }

    /// Gridded samples, interpolated trilinearly and zero outside the grid
    /// and outside the support ball.
    pub fn gridded(
        grid: Grid3D,
        values: Array3<f64>,
        support_radius: f64,
        domain_radius: f64,
    ) -> Result<Self> {
        if values.dim() != grid.shape() {
            return Err(Error::InvalidArgument(format!(
                "value array shape {:?} does not match grid {:?}",
                values.dim(),
                grid.shape()
            )));
        }
        Self::build(
            Representation::Gridded { grid, values },
            support_radius,
            domain_radius,
        )
    }

    fn build(repr: Representation, support_radius: f64, domain_radius: f64) -> Result<Self> {
        if !(support_radius > 0.0) || !(domain_radius > support_radius) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < R < R0, got R = {support_radius}, R0 = {domain_radius}"
            )));
        }
        Ok(Self {
            repr,
            support_center: Vec3::zeros(),
            support_radius,
            domain_radius,
            cutoff: Cutoff::new(0.9 * support_radius, support_radius),
        })
    }

    /// Moves the support ball (and every bump) by `shift`.
    pub fn translated(&self, shift: &Vec3) -> Self {
        let mut out = self.clone();
        out.support_center += shift;
        match &mut out.repr {
            Representation::Analytic(bumps) => {
                for b in bumps {
                    b.center += shift;
                }
            }
            Representation::Gridded { grid, .. } => {
                for a in 0..3 {
                    grid.origin[a] += shift[a];
                }
            }
        }
        out
    }

    pub fn representation(&self) -> &Representation {
        &self.repr
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn support_center(&self) -> Vec3 {
        self.support_center
    }

    pub fn domain_radius(&self) -> f64 {
        self.domain_radius
    }

    /// True when the field vanishes identically.
    pub fn is_zero(&self) -> bool {
        match &self.repr {
            Representation::Analytic(b) => b.iter().all(|b| b.amplitude == 0.0),
            Representation::Gridded { values, .. } => values.iter().all(|&v| v == 0.0),
        }
    }

    /// Smallest length scale of the field (bump width or grid spacing).
    pub fn feature_scale(&self) -> f64 {
        match &self.repr {
            Representation::Analytic(b) => b
                .iter()
                .map(|b| b.width)
                .fold(self.support_radius, f64::min),
            Representation::Gridded { grid, .. } => grid
                .spacing
                .iter()
                .cloned()
                .fold(self.support_radius, f64::min),
        }
    }

    pub fn eval(&self, x: &Vec3) -> f64 {
        let r = (x - self.support_center).norm();
        if r >= self.support_radius {
            return 0.0;
        }
        match &self.repr {
            Representation::Analytic(bumps) => {
                let cut = self.cutoff.value(r);
                if cut == 0.0 {
                    return 0.0;
                }
                cut * bumps.iter().map(|b| b.value(x)).sum::<f64>()
            }
            Representation::Gridded { grid, values } => trilinear(grid, values, x),
        }
    }

    /// Parameter interval on which `ray` crosses the support ball.
    pub fn support_chord(&self, ray: &Ray) -> Option<(f64, f64)> {
        let shifted = Ray::new(ray.base - self.support_center, ray.direction, ray.s_range);
        shifted.ball_chord(self.support_radius)
    }

    fn line_integral(&self, ray: &Ray, a: f64, b: f64, tol: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        integrate(|s| self.eval(&ray.point(s)), a, b, tol)
    }
}

fn trilinear(grid: &Grid3D, values: &Array3<f64>, x: &Vec3) -> f64 {
    let mut idx = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let u = (x[a] - grid.origin[a]) / grid.spacing[a];
        let n = grid.counts[a];
        if !(u >= 0.0) || u > (n - 1) as f64 {
            return 0.0;
        }
        let i = (u.floor() as usize).min(n - 2);
        idx[a] = i;
        frac[a] = u - i as f64;
    }
    let mut acc = 0.0;
    for (di, wi) in [(0, 1.0 - frac[0]), (1, frac[0])] {
        for (dj, wj) in [(0, 1.0 - frac[1]), (1, frac[1])] {
            for (dk, wk) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                let w = wi * wj * wk;
                if w != 0.0 {
                    acc += w * values[[idx[0] + di, idx[1] + dj, idx[2] + dk]];
                }
            }
        }
    }
    acc
}

/// Cumulative retardation along a ray.
///
/// The support chord is split into panels whose integrals are tabulated at
/// construction; partial panels are integrated on demand.
#[derive(Debug, Clone)]
pub struct RetardationProfile<'a> {
    pub ray: Ray,
    field: &'a SusceptibilityField,
    prefactor: f64,
    knots: Vec<f64>,
    cumulative: Vec<f64>,
    pub tau_infinity: f64,
}

impl RetardationProfile<'_> {
    /// `tau(s)` in radians.
    pub fn tau(&self, s: f64) -> f64 {
        let (Some(&first), Some(&last)) = (self.knots.first(), self.knots.last()) else {
            return 0.0;
        };
        if s <= first {
            return 0.0;
        }
        if s >= last {
            return self.tau_infinity;
        }
        let panel = self.knots.partition_point(|&k| k <= s) - 1;
        let partial = self
            .field
            .line_integral(&self.ray, self.knots[panel], s, LINE_TOL / 16.0);
        self.cumulative[panel] + self.prefactor * partial
    }

    /// Parameter range outside of which `tau` is constant.
    pub fn active_range(&self) -> Option<(f64, f64)> {
        Some((*self.knots.first()?, *self.knots.last()?))
    }

    pub fn prefactor(&self) -> f64 {
        self.prefactor
    }
}

/// Builds the retardation profile of `ray` for a bias field of magnitude `e0`.
pub fn retardation<'a>(
    field: &'a SusceptibilityField,
    e0_magnitude: f64,
    ray: &Ray,
) -> Result<RetardationProfile<'a>> {
    if !(e0_magnitude >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "e0 must be non-negative, got {e0_magnitude}"
        )));
    }
    let prefactor = 0.5 * e0_magnitude * e0_magnitude;
    let empty = RetardationProfile {
        ray: *ray,
        field,
        prefactor,
        knots: Vec::new(),
        cumulative: Vec::new(),
        tau_infinity: 0.0,
    };
    if prefactor == 0.0 || field.is_zero() {
        return Ok(empty);
    }
    let Some((a, b)) = field.support_chord(ray) else {
        return Ok(empty);
    };
    let panels = (((b - a) / field.feature_scale()).ceil() as usize).clamp(4, 64);
    let width = (b - a) / panels as f64;
    let knots: Vec<f64> = (0..=panels).map(|i| a + i as f64 * width).collect();
    let mut cumulative = Vec::with_capacity(knots.len());
    let mut acc = 0.0;
    cumulative.push(0.0);
    for w in knots.windows(2) {
        acc += prefactor * field.line_integral(ray, w[0], w[1], LINE_TOL / panels as f64);
        cumulative.push(acc);
    }
    Ok(RetardationProfile {
        ray: *ray,
        field,
        prefactor,
        knots,
        cumulative,
        tau_infinity: acc,
    })
}

/// Retardation at the point `x` for rays travelling along `omega`:
/// `1/2 e0^2 int_{-inf}^{0} chi(x + sigma omega) d sigma`.
pub fn tau_at(field: &SusceptibilityField, e0_magnitude: f64, x: &Vec3, omega: &Direction) -> f64 {
    if e0_magnitude == 0.0 || field.is_zero() {
        return 0.0;
    }
    let ray = Ray::new(*x, *omega, (f64::NEG_INFINITY, 0.0));
    match field.support_chord(&ray) {
        Some((a, b)) if a < 0.0 => {
            0.5 * e0_magnitude * e0_magnitude * field.line_integral(&ray, a, b.min(0.0), LINE_TOL)
        }
        _ => 0.0,
    }
}

/// Full line integral of `chi` along `y + sigma omega`.
pub fn xray_transform(field: &SusceptibilityField, omega: &Direction, y: &Vec3) -> f64 {
    let ray = Ray::new(*y, *omega, (f64::NEG_INFINITY, f64::INFINITY));
    match field.support_chord(&ray) {
        Some((a, b)) if !field.is_zero() => field.line_integral(&ray, a, b, LINE_TOL),
        _ => 0.0,
    }
}
