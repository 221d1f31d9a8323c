//! The strong stationary field `E = grad psi` on a box `M = [-R0, R0]^3`.
//!
//! `psi` solves `div(grad psi + h chi |grad psi|^2 grad psi) = 0` with
//! `psi = f` on the boundary, by the Picard iteration
//! `psi_{k+1} = u_f - h Lap_D^{-1} div(chi |grad psi_k|^2 grad psi_k)`,
//! where `u_f` is the harmonic extension of `f` and `Lap_D^{-1}` the
//! Dirichlet Poisson solve. The linear part of the discrete operator is the
//! 7-point Laplacian, so that the Poisson solve inverts it exactly.

use ndarray::{Array3, Zip};

use crate::dst::{dst_along, Dst1};
use crate::error::{Error, Result};
use crate::geometry::{Grid3D, Vec3};
use crate::media::SusceptibilityField;

pub type VectorField = [Array3<f64>; 3];

/// Relative/absolute residual target of the linear solves.
pub const LINEAR_TOL: f64 = 1e-10;

/// Dirichlet data, coefficient samples and nonlinearity strength on a box.
#[derive(Debug, Clone)]
pub struct DirichletProblem {
    pub grid: Grid3D,
    /// Node values; only boundary nodes are read.
    pub boundary: Array3<f64>,
    pub chi: Array3<f64>,
    pub h: f64,
}

impl DirichletProblem {
    pub fn new<F: Fn(&Vec3) -> f64>(
        grid: Grid3D,
        f: F,
        field: &SusceptibilityField,
        h: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::InvalidArgument(format!(
                "h must lie in [0, 1], got {h}"
            )));
        }
        let c = field.support_center();
        let r = field.support_radius();
        let end = grid.end();
        for a in 0..3 {
            let margin = grid.spacing[a];
            if c[a] - r <= grid.origin[a] + margin || c[a] + r >= end[a] - margin {
                return Err(Error::InvalidArgument(
                    "support of chi must lie strictly inside the box".into(),
                ));
            }
        }
        let boundary = Array3::from_shape_fn(grid.shape(), |(i, j, k)| {
            if grid.is_boundary(i, j, k) {
                f(&grid.coord(i, j, k))
            } else {
                0.0
            }
        });
        let chi = Array3::from_shape_fn(grid.shape(), |(i, j, k)| field.eval(&grid.coord(i, j, k)));
        Ok(Self {
            grid,
            boundary,
            chi,
            h,
        })
    }

    /// The box `[-R0, R0]^3` with `n` nodes per axis, `R0` the domain radius of `field`.
    pub fn on_box<F: Fn(&Vec3) -> f64>(
        field: &SusceptibilityField,
        n: usize,
        f: F,
        h: f64,
    ) -> Result<Self> {
        let grid = Grid3D::cube(field.domain_radius(), n)?;
        Self::new(grid, f, field, h)
    }

    pub fn with_h(&self, h: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::InvalidArgument(format!(
                "h must lie in [0, 1], got {h}"
            )));
        }
        Ok(Self { h, ..self.clone() })
    }
}

/// Direct solver for the 7-point Dirichlet Laplacian on the interior nodes.
pub struct PoissonSolver {
    grid: Grid3D,
    plans: [Dst1; 3],
    eigenvalues: Array3<f64>,
}

impl PoissonSolver {
    pub fn new(grid: &Grid3D) -> Result<Self> {
        let n = grid.counts.map(|c| c.saturating_sub(2));
        if n.contains(&0) {
            return Err(Error::InvalidGrid(
                "Poisson solve needs at least 3 nodes per axis".into(),
            ));
        }
        let lam = |axis: usize, k: usize| {
            let d = grid.spacing[axis];
            let theta = std::f64::consts::PI * (k + 1) as f64 / (n[axis] + 1) as f64;
            (2.0 * theta.cos() - 2.0) / (d * d)
        };
        let eigenvalues = Array3::from_shape_fn((n[0], n[1], n[2]), |(i, j, k)| {
            lam(0, i) + lam(1, j) + lam(2, k)
        });
        Ok(Self {
            grid: *grid,
            plans: [Dst1::new(n[0]), Dst1::new(n[1]), Dst1::new(n[2])],
            eigenvalues,
        })
    }

    /// Solves `Lap v = g` on interior nodes with `v = 0` on the boundary.
    /// Boundary entries of `g` are ignored.
    pub fn solve(&self, g: &Array3<f64>) -> Array3<f64> {
        let [nx, ny, nz] = self.grid.counts;
        let mut work = Array3::from_shape_fn((nx - 2, ny - 2, nz - 2), |(i, j, k)| {
            g[[i + 1, j + 1, k + 1]]
        });
        for axis in 0..3 {
            dst_along(&mut work, axis, &self.plans[axis]);
        }
        let norm: f64 = (0..3)
            .map(|a| 2.0 / (self.grid.counts[a] - 1) as f64)
            .product();
        Zip::from(&mut work)
            .and(&self.eigenvalues)
            .par_for_each(|w, &lam| *w *= norm / lam);
        for axis in 0..3 {
            dst_along(&mut work, axis, &self.plans[axis]);
        }
        let mut out = Array3::zeros(self.grid.shape());
        out.slice_mut(ndarray::s![1..nx - 1, 1..ny - 1, 1..nz - 1])
            .assign(&work);
        out
    }
}

/// 7-point Laplacian on interior nodes; zero on the boundary.
pub fn laplacian(grid: &Grid3D, u: &Array3<f64>) -> Array3<f64> {
    let [nx, ny, nz] = grid.counts;
    let [dx, dy, dz] = grid.spacing.map(|d| 1.0 / (d * d));
    let mut out = Array3::zeros(grid.shape());
    Zip::indexed(&mut out).par_for_each(|(i, j, k), o| {
        if i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1 {
            return;
        }
        let c = 2.0 * u[[i, j, k]];
        *o = (u[[i + 1, j, k]] + u[[i - 1, j, k]] - c) * dx
            + (u[[i, j + 1, k]] + u[[i, j - 1, k]] - c) * dy
            + (u[[i, j, k + 1]] + u[[i, j, k - 1]] - c) * dz;
    });
    out
}

fn diff_along(u: &Array3<f64>, axis: usize, d: f64, idx: [usize; 3], n: usize) -> f64 {
    let at = |off: isize| {
        let mut p = idx;
        p[axis] = (p[axis] as isize + off) as usize;
        u[p]
    };
    let i = idx[axis];
    if i == 0 {
        (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * d)
    } else if i == n - 1 {
        (3.0 * at(0) - 4.0 * at(-1) + at(-2)) / (2.0 * d)
    } else {
        (at(1) - at(-1)) / (2.0 * d)
    }
}

/// Centred second-order gradient, one-sided second order at the boundary.
pub fn gradient(grid: &Grid3D, u: &Array3<f64>) -> VectorField {
    std::array::from_fn(|axis| {
        let mut out = Array3::zeros(grid.shape());
        Zip::indexed(&mut out).par_for_each(|(i, j, k), o| {
            *o = diff_along(u, axis, grid.spacing[axis], [i, j, k], grid.counts[axis]);
        });
        out
    })
}

/// Centred second-order divergence, one-sided second order at the boundary.
pub fn divergence(grid: &Grid3D, v: &VectorField) -> Array3<f64> {
    let mut out = Array3::zeros(grid.shape());
    Zip::indexed(&mut out).par_for_each(|(i, j, k), o| {
        *o = (0..3)
            .map(|a| diff_along(&v[a], a, grid.spacing[a], [i, j, k], grid.counts[a]))
            .sum();
    });
    out
}

/// `chi |grad u|^2 grad u` at every node.
fn cubic_flux(grid: &Grid3D, chi: &Array3<f64>, u: &Array3<f64>) -> VectorField {
    let g = gradient(grid, u);
    let weight = Zip::from(&g[0])
        .and(&g[1])
        .and(&g[2])
        .and(chi)
        .par_map_collect(|&gx, &gy, &gz, &x| x * (gx * gx + gy * gy + gz * gz));
    g.map(|mut comp| {
        comp *= &weight;
        comp
    })
}

fn dot(a: &VectorField, b: &VectorField) -> Array3<f64> {
    let mut out = Zip::from(&a[0]).and(&b[0]).par_map_collect(|&x, &y| x * y);
    for axis in 1..3 {
        Zip::from(&mut out)
            .and(&a[axis])
            .and(&b[axis])
            .par_for_each(|o, &x, &y| *o += x * y);
    }
    out
}

fn interior_max(grid: &Grid3D, a: &Array3<f64>, layer: usize) -> f64 {
    let [nx, ny, nz] = grid.counts;
    let mut m: f64 = 0.0;
    for ((i, j, k), v) in a.indexed_iter() {
        if i >= layer
            && j >= layer
            && k >= layer
            && i + layer < nx
            && j + layer < ny
            && k + layer < nz
        {
            m = m.max(v.abs());
        }
    }
    m
}

fn max_abs(a: &Array3<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    Zip::from(a)
        .and(b)
        .fold(0.0f64, |m, x, y| m.max((x - y).abs()))
}

/// Discrete solution `u_f` of `Lap u = 0`, `u = f` on the boundary.
pub fn harmonic_extension(problem: &DirichletProblem) -> Result<Array3<f64>> {
    let grid = &problem.grid;
    let solver = PoissonSolver::new(grid)?;
    harmonic_extension_with(problem, &solver)
}

fn harmonic_extension_with(
    problem: &DirichletProblem,
    solver: &PoissonSolver,
) -> Result<Array3<f64>> {
    let grid = &problem.grid;
    let mut u = Array3::from_shape_fn(grid.shape(), |(i, j, k)| {
        if grid.is_boundary(i, j, k) {
            problem.boundary[[i, j, k]]
        } else {
            0.0
        }
    });
    let scale = max_abs(&u).max(1.0);
    let mut history = Vec::new();
    // The direct solve is exact up to rounding; a few refinement sweeps
    // remove the rounding left by large boundary data.
    for _ in 0..4 {
        let r = laplacian(grid, &u);
        let res = max_abs(&r);
        history.push(res);
        if res <= LINEAR_TOL * scale {
            return Ok(u);
        }
        let correction = solver.solve(&r);
        u -= &correction;
    }
    let res = max_abs(&laplacian(grid, &u));
    history.push(res);
    if res <= LINEAR_TOL * scale {
        Ok(u)
    } else {
        Err(Error::NoConvergence {
            what: "harmonic extension",
            history,
        })
    }
}

/// Discrete solution of `Lap v = g`, `v = 0` on the boundary.
pub fn poisson_dirichlet(grid: &Grid3D, g: &Array3<f64>) -> Result<Array3<f64>> {
    Ok(PoissonSolver::new(grid)?.solve(g))
}

/// Pointwise residual `Lap psi + h div(chi |grad psi|^2 grad psi)` on
/// interior nodes.
pub fn residual(problem: &DirichletProblem, psi: &Array3<f64>) -> Array3<f64> {
    let grid = &problem.grid;
    let mut r = laplacian(grid, psi);
    if problem.h != 0.0 {
        let div = divergence(grid, &cubic_flux(grid, &problem.chi, psi));
        Zip::indexed(&mut r).and(&div).for_each(|(i, j, k), r, &d| {
            if !grid.is_boundary(i, j, k) {
                *r += problem.h * d;
            }
        });
    }
    r
}

/// Linearized contraction factor `3 h max|chi| max|grad u_f|^2`.
///
/// A heuristic stand-in for the Sobolev-norm bound on the admissible `h`;
/// the solver additionally monitors successive-difference ratios.
pub fn contraction_estimate(problem: &DirichletProblem, u_f: &Array3<f64>) -> f64 {
    let g = gradient(&problem.grid, u_f);
    let mut g2: f64 = 0.0;
    Zip::from(&g[0])
        .and(&g[1])
        .and(&g[2])
        .and(&problem.chi)
        .for_each(|a, b, c, &x| {
            if x != 0.0 {
                g2 = g2.max(a * a + b * b + c * c);
            }
        });
    3.0 * problem.h * max_abs(&problem.chi) * g2
}

#[derive(Debug, Clone)]
pub struct StrongFieldSolution {
    pub psi: Array3<f64>,
    /// Centred gradient of `psi`.
    pub e: VectorField,
    /// `psi^(0) = u_f` and `psi^(1)`.
    pub expansion: Vec<Array3<f64>>,
    /// Max-norm residual away from a two-cell boundary layer.
    pub residual_norm: f64,
    pub iterations: usize,
    /// `||psi_{k+1} - psi_k||_inf` for every iteration.
    pub differences: Vec<f64>,
    /// Ratios of consecutive differences.
    pub ratios: Vec<f64>,
    pub contraction_estimate: f64,
}

/// Picard iteration from `u_f`.
pub fn fixed_point_solve(
    problem: &DirichletProblem,
    max_iter: usize,
    tol: f64,
) -> Result<StrongFieldSolution> {
    fixed_point_solve_from(problem, None, max_iter, tol)
}

/// Picard iteration from `initial` (or `u_f` when `None`).
pub fn fixed_point_solve_from(
    problem: &DirichletProblem,
    initial: Option<&Array3<f64>>,
    max_iter: usize,
    tol: f64,
) -> Result<StrongFieldSolution> {
    let grid = &problem.grid;
    let solver = PoissonSolver::new(grid)?;
    let u_f = harmonic_extension_with(problem, &solver)?;
    let kappa = contraction_estimate(problem, &u_f);
    if kappa >= 1.0 {
        log::warn!(
            "estimated contraction factor {kappa:.3} >= 1; h may be above the admissible range"
        );
    }

    let apply = |psi: &Array3<f64>| -> Array3<f64> {
        if problem.h == 0.0 {
            return u_f.clone();
        }
        let div = divergence(grid, &cubic_flux(grid, &problem.chi, psi));
        let v = solver.solve(&div);
        let mut next = u_f.clone();
        next.scaled_add(-problem.h, &v);
        next
    };

    let mut psi = initial.cloned().unwrap_or_else(|| u_f.clone());
    let mut differences = Vec::new();
    let mut ratios = Vec::new();
    let mut streak = 0;
    let mut converged = false;
    for _ in 0..max_iter {
        let next = apply(&psi);
        let d = max_abs_diff(&next, &psi);
        psi = next;
        if let Some(&prev) = differences.last() {
            let ratio = if prev > 0.0 { d / prev } else { 0.0 };
            ratios.push(ratio);
            streak = if ratio >= 1.0 { streak + 1 } else { 0 };
            if streak >= 3 {
                return Err(Error::NonContraction { ratios });
            }
        }
        differences.push(d);
        if d <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "fixed-point iteration",
            history: differences,
        });
    }

    let residual_norm = interior_max(grid, &residual(problem, &psi), 2);
    let e = gradient(grid, &psi);
    let expansion = expansion_terms_with(problem, &solver, u_f, 1);
    Ok(StrongFieldSolution {
        psi,
        e,
        expansion,
        residual_norm,
        iterations: differences.len(),
        differences,
        ratios,
        contraction_estimate: kappa,
    })
}

/// Coefficients `psi^(0..=n)` of the expansion of `psi` in powers of `h`,
/// read off from Picard iterates carried as polynomials in `h`.
pub fn expansion_terms(problem: &DirichletProblem, n: usize) -> Result<Vec<Array3<f64>>> {
    let solver = PoissonSolver::new(&problem.grid)?;
    let u_f = harmonic_extension_with(problem, &solver)?;
    Ok(expansion_terms_with(problem, &solver, u_f, n))
}

fn expansion_terms_with(
    problem: &DirichletProblem,
    solver: &PoissonSolver,
    u_f: Array3<f64>,
    n: usize,
) -> Vec<Array3<f64>> {
    let grid = &problem.grid;
    let shape = grid.shape();
    let mut coeffs: Vec<Array3<f64>> = vec![u_f];
    coeffs.extend((0..n).map(|_| Array3::zeros(shape)));
    // Coefficient j+1 depends only on coefficients <= j, so n sweeps suffice.
    for _ in 0..n {
        let grads: Vec<VectorField> = coeffs.iter().map(|c| gradient(grid, c)).collect();
        let mut next = vec![coeffs[0].clone()];
        for m in 0..n {
            // h^m coefficient of chi |grad psi|^2 grad psi
            let mut flux: VectorField = std::array::from_fn(|_| Array3::zeros(shape));
            for a in 0..=m {
                for b in 0..=(m - a) {
                    let (ga, gb, gc) = (&grads[a], &grads[b], &grads[m - a - b]);
                    let dot = dot(ga, gb);
                    for axis in 0..3 {
                        Zip::from(&mut flux[axis])
                            .and(&dot)
                            .and(&gc[axis])
                            .and(&problem.chi)
                            .par_for_each(|f, &d, &g, &x| *f += x * d * g);
                    }
                }
            }
            let mut v = solver.solve(&divergence(grid, &flux));
            v.mapv_inplace(|x| -x);
            next.push(v);
        }
        coeffs = next;
    }
    coeffs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::GaussianBump;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn gaussian_field() -> SusceptibilityField {
        SusceptibilityField::analytic(vec![GaussianBump::new(1.0, Vec3::zeros(), 0.5)], 1.5, 3.0)
            .unwrap()
    }

    fn problem<F: Fn(&Vec3) -> f64>(
        field: &SusceptibilityField,
        n: usize,
        f: F,
        h: f64,
    ) -> DirichletProblem {
        DirichletProblem::on_box(field, n, f, h).unwrap()
    }

    fn max_err<F: Fn(&Vec3) -> f64>(grid: &Grid3D, u: &Array3<f64>, exact: F) -> f64 {
        u.indexed_iter()
            .map(|((i, j, k), v)| (v - exact(&grid.coord(i, j, k))).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn harmonic_extension_reproduces_discrete_harmonics() {
        let zero = SusceptibilityField::zero(1.0, 3.0).unwrap();
        let cases: Vec<Box<dyn Fn(&Vec3) -> f64>> = vec![
            Box::new(|x: &Vec3| 2.5 * x.z),
            Box::new(|_: &Vec3| 1.0),
            Box::new(|x: &Vec3| x.x * x.x - x.y * x.y),
        ];
        for f in cases {
            let p = problem(&zero, 17, &f, 0.0);
            let u = harmonic_extension(&p).unwrap();
            assert!(max_err(&p.grid, &u, &f) < 1e-12);
            assert!(max_abs(&laplacian(&p.grid, &u)) <= 1e-10);
        }
    }

    #[test]
    fn poisson_examples() {
        let grid = Grid3D::new([0.0; 3], [0.1, 0.2, 0.15], [12, 10, 9]).unwrap();
        let zero = poisson_dirichlet(&grid, &Array3::zeros(grid.shape())).unwrap();
        assert_eq!(max_abs(&zero), 0.0);

        // sine eigenmode (2, 3, 1) of the discrete Laplacian
        let [nx, ny, nz] = grid.counts;
        let (k1, k2, k3) = (2.0, 3.0, 1.0);
        let mode = Array3::from_shape_fn(grid.shape(), |(i, j, k)| {
            (PI * k1 * i as f64 / (nx - 1) as f64).sin()
                * (PI * k2 * j as f64 / (ny - 1) as f64).sin()
                * (PI * k3 * k as f64 / (nz - 1) as f64).sin()
        });
        let lam: f64 = [(k1, 0, nx), (k2, 1, ny), (k3, 2, nz)]
            .iter()
            .map(|&(kk, a, n)| {
                (2.0 * (PI * kk / (n - 1) as f64).cos() - 2.0) / grid.spacing[a].powi(2)
            })
            .sum();
        let v = poisson_dirichlet(&grid, &mode).unwrap();
        let err = Zip::from(&v)
            .and(&mode)
            .fold(0.0f64, |m, &a, &b| m.max((a - b / lam).abs()));
        assert!(err < 1e-12, "{err}");

        // random right-hand side: the forward stencil is the oracle
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Array3::from_shape_fn(grid.shape(), |_| rng.random_range(-1.0..1.0));
        let v = poisson_dirichlet(&grid, &g).unwrap();
        let lap = laplacian(&grid, &v);
        let res = interior_max(&grid, &(&lap - &g), 1);
        assert!(res <= 1e-10 * max_abs(&g), "{res}");
    }

    #[test]
    fn linear_problem_converges_in_one_iteration() {
        let zero = SusceptibilityField::zero(1.0, 3.0).unwrap();
        let a = 1.7;
        let p = problem(&zero, 17, |x| a * x.z, 0.04);
        let sol = fixed_point_solve(&p, 50, 1e-12).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(max_err(&p.grid, &sol.psi, |x| a * x.z) < 1e-12);
        for (axis, comp) in sol.e.iter().enumerate() {
            let expected = if axis == 2 { a } else { 0.0 };
            assert!(comp.iter().all(|v| (v - expected).abs() < 1e-11));
        }
    }

    #[test]
    fn zero_h_returns_harmonic_extension() {
        let f = gaussian_field();
        let p = problem(&f, 17, |x| x.z + 0.3 * x.x, 0.0);
        let sol = fixed_point_solve(&p, 50, 1e-12).unwrap();
        let u_f = harmonic_extension(&p).unwrap();
        assert!(max_abs_diff(&sol.psi, &u_f) < 1e-14);
    }

    #[test]
    fn gaussian_iteration_contracts() {
        let f = gaussian_field();
        let p = problem(&f, 25, |x| x.z, 0.01);
        let sol = fixed_point_solve(&p, 50, 1e-12).unwrap();
        assert!(
            sol.ratios.iter().skip(1).all(|&r| r <= 0.5),
            "{:?}",
            sol.ratios
        );
        assert!(sol.residual_norm <= 1e-10, "{}", sol.residual_norm);
        assert!(sol.contraction_estimate < 1.0);
    }

    #[test]
    fn expansion_examples() {
        let f = gaussian_field();
        let p = problem(&f, 21, |x| x.z, 0.02);
        let terms = expansion_terms(&p, 0).unwrap();
        assert_eq!(terms.len(), 1);
        assert!(max_abs_diff(&terms[0], &harmonic_extension(&p).unwrap()) == 0.0);

        let zero = SusceptibilityField::zero(1.0, 3.0).unwrap();
        let pz = problem(&zero, 21, |x| x.z, 0.02);
        let tz = expansion_terms(&pz, 1).unwrap();
        assert_eq!(max_abs(&tz[1]), 0.0);

        // psi^(1) = -Lap_D^{-1} div(chi |grad u_f|^2 grad u_f), evaluated directly
        let terms = expansion_terms(&p, 1).unwrap();
        let u_f = harmonic_extension(&p).unwrap();
        let div = divergence(&p.grid, &cubic_flux(&p.grid, &p.chi, &u_f));
        let direct = -poisson_dirichlet(&p.grid, &div).unwrap();
        assert!(max_abs_diff(&terms[1], &direct) < 1e-12);
        assert!(max_abs(&terms[1]) > 1e-4);
    }

    #[test]
    fn non_contraction_is_reported() {
        let f = SusceptibilityField::analytic(
            vec![GaussianBump::new(40.0, Vec3::zeros(), 0.5)],
            1.5,
            3.0,
        )
        .unwrap();
        let p = problem(&f, 17, |x| 3.0 * x.z, 1.0);
        match fixed_point_solve(&p, 50, 1e-12) {
            Err(Error::NonContraction { ratios }) => {
                assert!(ratios.iter().rev().take(3).all(|&r| r >= 1.0))
            }
            other => panic!(
                "expected non-contraction, got {:?}",
                other.map(|s| s.iterations)
            ),
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = gaussian_field();
        assert!(DirichletProblem::on_box(&f, 17, |x| x.z, -0.1).is_err());
        let big = SusceptibilityField::analytic(vec![], 2.95, 3.0).unwrap();
        assert!(DirichletProblem::on_box(&big, 17, |x| x.z, 0.1).is_err());
    }
}
