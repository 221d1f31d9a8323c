//! C-infinity cutoffs and bumps used for compactly supported coefficients
//! and beam envelopes.

fn psi(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else {
        (-1.0 / u).exp()
    }
}

fn dpsi(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else {
        psi(u) / (u * u)
    }
}

/// Smooth step rising from 0 at `u <= 0` to 1 at `u >= 1`.
pub fn smooth_step(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        let a = psi(u);
        a / (a + psi(1.0 - u))
    }
}

pub fn smooth_step_deriv(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        return 0.0;
    }
    let (a, b) = (psi(u), psi(1.0 - u));
    (dpsi(u) * b + a * dpsi(1.0 - u)) / ((a + b) * (a + b))
}

/// Radial cutoff: 1 for `r <= inner`, 0 for `r >= outer`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cutoff {
    pub inner: f64,
    pub outer: f64,
}

impl Cutoff {
    pub fn new(inner: f64, outer: f64) -> Self {
        debug_assert!(outer > inner && inner >= 0.0);
        Self { inner, outer }
    }

    pub fn value(&self, r: f64) -> f64 {
        smooth_step((self.outer - r) / (self.outer - self.inner))
    }

    pub fn deriv(&self, r: f64) -> f64 {
        let w = self.outer - self.inner;
        -smooth_step_deriv((self.outer - r) / w) / w
    }
}

/// Bump `exp(1 - 1/(1 - u^2))`, `u = (x - center)/half_width`, with peak 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub center: f64,
    pub half_width: f64,
}

impl Bump {
    pub fn new(center: f64, half_width: f64) -> Self {
        Self { center, half_width }
    }

    /// Value and first two derivatives with respect to `x`.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let w = self.half_width;
        let u = (x - self.center) / w;
        let q = 1.0 - u * u;
        if q <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let g = (1.0 - 1.0 / q).exp();
        // d/du of (1 - 1/q) is -2u/q^2
        let a = -2.0 * u / (q * q);
        // d a / du
        let da = -2.0 / (q * q) - 8.0 * u * u / (q * q * q);
        let g1 = g * a;
        let g2 = g * (a * a + da);
        (g, g1 / w, g2 / (w * w))
    }

    pub fn value(&self, x: f64) -> f64 {
        self.eval(x).0
    }

    pub fn support(&self) -> (f64, f64) {
        (self.center - self.half_width, self.center + self.half_width)
    }
}
