//! Directions, phases, characteristic coordinates, rays and uniform grids.
//!
//! Time and arclength coincide (unit wave speed), so a ray starting at `y`
//! reaches `y + s * omega` at time `s`.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const UNIT_TOL: f64 = 1e-12;

/// A unit propagation direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction(Vec3);

impl Direction {
    /// Wraps `v`, which must already be a unit vector.
    pub fn new(v: Vec3) -> Result<Self> {
        let norm = v.norm();
        if (norm - 1.0).abs() > UNIT_TOL || !norm.is_finite() {
            return Err(Error::NotUnit { norm });
        }
        Ok(Self(v))
    }

    /// Normalizes `v` into a direction.
    pub fn normalized(v: Vec3) -> Result<Self> {
        let norm = v.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NotUnit { norm });
        }
        Ok(Self(v / norm))
    }

    pub fn e1() -> Self {
        Self(Vec3::x())
    }

    pub fn e2() -> Self {
        Self(Vec3::y())
    }

    pub fn e3() -> Self {
        Self(Vec3::z())
    }

    /// Direction in the `x3 = 0` plane at polar angle `angle` from `e1`.
    pub fn in_plane(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Vec3::new(c, s, 0.0))
    }

    pub fn vec(&self) -> Vec3 {
        self.0
    }

    /// True when the direction is orthogonal to `e3` (inversion geometry).
    pub fn is_transverse_to_e3(&self) -> bool {
        self.0.z.abs() <= UNIT_TOL
    }
}

/// Incoming phase `-t + x.omega`.
pub fn phase(t: f64, x: &Vec3, omega: &Direction) -> f64 {
    -t + x.dot(&omega.0)
}

/// Outgoing phase `t + x.omega`.
pub fn phase_out(t: f64, x: &Vec3, omega: &Direction) -> f64 {
    t + x.dot(&omega.0)
}

/// `(t, x) -> (s, y) = (t, x - t omega)`.
pub fn to_characteristic(t: f64, x: &Vec3, omega: &Direction) -> (f64, Vec3) {
    (t, x - t * omega.0)
}

/// `(s, y) -> (t, x) = (s, y + s omega)`.
pub fn from_characteristic(s: f64, y: &Vec3, omega: &Direction) -> (f64, Vec3) {
    (s, y + s * omega.0)
}

/// Unit-speed line `s -> base + s * direction` restricted to `s_range`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub base: Vec3,
    pub direction: Direction,
    pub s_range: (f64, f64),
}

impl Ray {
    pub fn new(base: Vec3, direction: Direction, s_range: (f64, f64)) -> Self {
        Self {
            base,
            direction,
            s_range,
        }
    }

    pub fn point(&self, s: f64) -> Vec3 {
        self.base + s * self.direction.0
    }

    /// Parameter interval on which the line lies inside the ball `|x| < radius`,
    /// or `None` if it misses the ball.
    pub fn ball_chord(&self, radius: f64) -> Option<(f64, f64)> {
        let w = self.direction.0;
        let b = self.base.dot(&w);
        let c = self.base.norm_squared() - radius * radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let root = disc.sqrt();
        Some((-b - root, -b + root))
    }
}

/// Orthonormal frame `(omega, transverse, field)` with `field = e3` and
/// `transverse = field x omega`. Maps lab vectors to the canonical frame in
/// which `omega = e1` and the bias field is along `e3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub omega: Direction,
    pub transverse: Vec3,
    pub field: Vec3,
}

impl Frame {
    pub fn new(omega: Direction) -> Result<Self> {
        if !omega.is_transverse_to_e3() {
            return Err(Error::InvalidArgument(format!(
                "propagation direction must be orthogonal to the bias field e3, got {:?}",
                omega.vec()
            )));
        }
        let field = Vec3::z();
        let transverse = field.cross(&omega.vec());
        Ok(Self {
            omega,
            transverse,
            field,
        })
    }

    pub fn to_canonical(&self, v: &Vec3) -> Vec3 {
        Vec3::new(
            v.dot(&self.omega.vec()),
            v.dot(&self.transverse),
            v.dot(&self.field),
        )
    }

    pub fn to_lab(&self, v: &Vec3) -> Vec3 {
        v.x * self.omega.vec() + v.y * self.transverse + v.z * self.field
    }
}

/// Uniform 1D grid `origin + i * spacing`, `i < count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    pub origin: f64,
    pub spacing: f64,
    pub count: usize,
}

impl Grid1D {
    pub fn new(origin: f64, spacing: f64, count: usize) -> Result<Self> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        if count < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 nodes, got {count}"
            )));
        }
        Ok(Self {
            origin,
            spacing,
            count,
        })
    }

    /// Grid covering `[a, b]` with the given spacing (rounded to fit exactly).
    pub fn covering(a: f64, b: f64, approx_spacing: f64) -> Result<Self> {
        if !(b > a) {
            return Err(Error::InvalidGrid(format!("empty interval [{a}, {b}]")));
        }
        let cells = ((b - a) / approx_spacing).ceil().max(1.0) as usize;
        Self::new(a, (b - a) / cells as f64, cells + 1)
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.origin + i as f64 * self.spacing
    }

    pub fn end(&self) -> f64 {
        self.coord(self.count - 1)
    }

    pub fn coords(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(|i| self.coord(i))
    }
}

/// Axis-aligned uniform 3D grid; values are sampled at nodes and stored
/// row-major with the last axis fastest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid3D {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub counts: [usize; 3],
}

impl Grid3D {
    pub fn new(origin: [f64; 3], spacing: [f64; 3], counts: [usize; 3]) -> Result<Self> {
        for axis in 0..3 {
            if !(spacing[axis] > 0.0) || !spacing[axis].is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "spacing along axis {axis} must be positive, got {}",
                    spacing[axis]
                )));
            }
            if counts[axis] < 2 {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis} needs at least 2 nodes, got {}",
                    counts[axis]
                )));
            }
        }
        Ok(Self {
            origin,
            spacing,
            counts,
        })
    }

    /// The cube `[-half_width, half_width]^3` with `n` nodes per axis.
    pub fn cube(half_width: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 nodes, got {n}"
            )));
        }
        let d = 2.0 * half_width / (n - 1) as f64;
        Self::new([-half_width; 3], [d; 3], [n; 3])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.counts[0], self.counts[1], self.counts[2])
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coord(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    pub fn axis(&self, axis: usize) -> Grid1D {
        Grid1D {
            origin: self.origin[axis],
            spacing: self.spacing[axis],
            count: self.counts[axis],
        }
    }

    pub fn is_boundary(&self, i: usize, j: usize, k: usize) -> bool {
        let [nx, ny, nz] = self.counts;
        i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1
    }

    /// Upper corner of the grid.
    pub fn end(&self) -> [f64; 3] {
        let mut e = [0.0; 3];
        for a in 0..3 {
            e[a] = self.origin[a] + (self.counts[a] - 1) as f64 * self.spacing[a];
        }
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phase_examples() {
        let e1 = Direction::e1();
        assert_eq!(phase(0.0, &Vec3::zeros(), &e1), 0.0);
        assert_eq!(phase(1.0, &Vec3::x(), &e1), 0.0);
        assert_eq!(phase(0.5, &Vec3::new(2.0, 0.0, 0.0), &e1), 1.5);
        assert_eq!(phase_out(0.5, &Vec3::new(2.0, 0.0, 0.0), &e1), 2.5);
    }

    #[test]
    fn characteristic_examples() {
        let p = Vec3::new(0.3, -1.2, 4.0);
        let omega = Direction::normalized(Vec3::new(1.0, 2.0, 0.5)).unwrap();
        assert_eq!(to_characteristic(0.0, &p, &omega), (0.0, p));
        let (s, y) = to_characteristic(2.0, &Vec3::new(2.0, 1.0, 0.0), &Direction::e1());
        assert_eq!(s, 2.0);
        assert_eq!(y, Vec3::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn rejects_non_unit_direction() {
        assert!(matches!(
            Direction::new(Vec3::new(1.0, 1.0, 0.0)),
            Err(Error::NotUnit { .. })
        ));
        assert!(Direction::normalized(Vec3::zeros()).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(Grid1D::new(0.0, 0.0, 10).is_err());
        assert!(Grid1D::new(0.0, 0.1, 1).is_err());
        assert!(Grid3D::new([0.0; 3], [0.1, -0.1, 0.1], [4; 3]).is_err());
        let g = Grid3D::cube(2.0, 5).unwrap();
        assert_eq!(g.spacing, [1.0; 3]);
        assert_eq!(g.coord(4, 0, 2), Vec3::new(2.0, -2.0, 0.0));
        assert!(g.is_boundary(0, 2, 2) && !g.is_boundary(1, 2, 3));
        let line = Grid1D::covering(0.0, 1.0, 0.3).unwrap();
        assert_eq!(line.count, 5);
        assert!((line.end() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ball_chord_and_frame() {
        let ray = Ray::new(Vec3::new(-5.0, 0.5, 0.0), Direction::e1(), (0.0, 10.0));
        let (a, b) = ray.ball_chord(1.0).unwrap();
        assert!((ray.point(a).norm() - 1.0).abs() < 1e-12);
        assert!((ray.point(b).norm() - 1.0).abs() < 1e-12);
        assert!(ray.ball_chord(0.4).is_none());

        let frame = Frame::new(Direction::in_plane(0.7)).unwrap();
        let v = Vec3::new(0.2, -1.0, 3.0);
        assert!((frame.to_lab(&frame.to_canonical(&v)) - v).norm() < 1e-14);
        assert!((frame.to_canonical(&frame.omega.vec()) - Vec3::x()).norm() < 1e-14);
        assert!(Frame::new(Direction::e3()).is_err());
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64).prop_map(|(a, b, c)| Vec3::new(a, b, c))
    }

    proptest! {
        #[test]
        fn characteristic_round_trip(t in -10.0..10.0f64, x in vec3(), w in vec3()) {
            prop_assume!(w.norm() > 1e-3);
            let omega = Direction::normalized(w).unwrap();
            let (s, y) = to_characteristic(t, &x, &omega);
            let (t2, x2) = from_characteristic(s, &y, &omega);
            prop_assert!((t2 - t).abs() <= 1e-14);
            prop_assert!((x2 - x).norm() <= 1e-14 * (1.0 + x.norm() + t.abs()));
        }

        #[test]
        fn phase_constant_along_incoming_characteristic(t in -10.0..10.0f64, y in vec3(), w in vec3()) {
            prop_assume!(w.norm() > 1e-3);
            let omega = Direction::normalized(w).unwrap();
            let x = y + t * omega.vec();
            let expected = y.dot(&omega.vec());
            prop_assert!((phase(t, &x, &omega) - expected).abs() <= 1e-12 * (1.0 + y.norm() + t.abs()));
        }
    }
}
