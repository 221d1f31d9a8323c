use std::f64::consts::PI;

use dckerr::direct1d::{run_experiment, Experiment1D};
use dckerr::inversion::{
    extract_cos_sin_tau, fbp_reconstruct, geometric_optics_sinogram, radon_sinogram,
    relative_l2_error, unwrap_tau, ScanGeometry, WindowFunction,
};
use dckerr::media::{tau_at, xray_transform};
use dckerr::profiles::{core_beam, evaluate_leading_field};
use dckerr::smooth::Bump;
use dckerr::{Direction, GaussianBump, Grid1D, SusceptibilityField, Vec3};
use ndarray::Array2;

fn medium() -> SusceptibilityField {
    SusceptibilityField::analytic(vec![GaussianBump::new(0.8, Vec3::zeros(), 0.5)], 2.0, 3.0)
        .unwrap()
        .translated(&Vec3::new(5.0, 0.0, 0.0))
}

#[test]
fn extraction_from_direct_solver_trace_recovers_tau() {
    let h = 0.02;
    let field = medium();
    let tau = 0.5 * xray_transform(&field, &Direction::e1(), &Vec3::zeros());
    let beam = core_beam(1.0, 0.0, 0.5, Bump::new(2.3, 0.6), h).unwrap();
    let cfg = Experiment1D {
        e0: 1.0,
        domain: (1.0, 9.0),
        detector: 7.7,
        t_final: 6.0,
        points_per_h: 20.0,
        cfl: 0.9,
        boundary: None,
    };
    let trace = run_experiment(&cfg, &beam, &field).unwrap();
    let w = WindowFunction::for_beam(&beam, trace.position).unwrap();
    let e = extract_cos_sin_tau(&trace, &beam, (0.0, 0.0), &w, h).unwrap();
    let got = e.sin_tau.atan2(e.cos_tau);
    assert!((got - tau).abs() < 5.0 * h, "{got} vs {tau}");
    assert!((e.modulus_squared() - 1.0).abs() < 5.0 * h);
}

#[test]
fn leading_field_is_the_free_beam_without_medium() {
    let h = 0.05;
    let beam = core_beam(0.6, -0.8, 0.5, Bump::new(-1.0, 0.5), h).unwrap();
    let none = SusceptibilityField::zero(1.0, 2.0).unwrap();
    let field = medium();
    for (t, x) in [
        (0.3, Vec3::new(-0.8, 0.1, 0.0)),
        (4.0, Vec3::new(3.1, 0.0, 0.2)),
    ] {
        let free = evaluate_leading_field(&beam, &none, 1.0, t, &x);
        let u = beam.u_init(&(x - t * Vec3::x()));
        let th = (x.x - t) / h;
        let expected =
            h.sqrt() * Vec3::z() + h.powf(1.5) * Vec3::new(0.0, u.y * th.cos(), u.z * th.cos());
        assert!((free - expected).norm() < 1e-15);
        // the medium only shifts phases, never the static part
        let with = evaluate_leading_field(&beam, &field, 1.0, t, &x);
        assert!((with.z - h.sqrt()).abs() <= h.powf(1.5) * u.z.abs() + 1e-15);
    }
}

#[test]
fn unwrapped_tau_planes_match_line_integrals() {
    let field = SusceptibilityField::analytic(
        vec![GaussianBump::new(1.0, Vec3::new(0.2, 0.0, 0.1), 0.4)],
        1.2,
        2.0,
    )
    .unwrap();
    let e0 = 4.0;
    let omega = Direction::in_plane(0.4);
    let perp = Vec3::new(-(0.4f64).sin(), 0.4f64.cos(), 0.0);
    let grid = Grid1D::new(-1.3, 0.05, 53).unwrap();
    let zs = Grid1D::new(-1.3, 0.1, 27).unwrap();
    let exact = Array2::from_shape_fn((zs.count, grid.count), |(k, i)| {
        tau_at(
            &field,
            e0,
            &(2.5 * omega.vec() + grid.coord(i) * perp + zs.coord(k) * Vec3::z()),
            &omega,
        )
    });
    assert!(exact.iter().cloned().fold(0.0, f64::max) > 2.0 * PI);
    let got = unwrap_tau(&exact.mapv(f64::cos), &exact.mapv(f64::sin)).unwrap();
    for (a, b) in got.iter().zip(exact.iter()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn multi_slice_pipeline_reconstructs_a_3d_bump() {
    let field = SusceptibilityField::analytic(
        vec![GaussianBump::new(0.6, Vec3::new(0.1, -0.2, 0.0), 0.3)],
        1.0,
        1.5,
    )
    .unwrap();
    let h = 0.02;
    let beam = core_beam(1.0, 0.0, 1.3, Bump::new(-1.8, 0.5), h).unwrap();
    let scan = ScanGeometry {
        n_angles: 60,
        offsets: Grid1D::new(-1.1, 2.2 / 87.0, 88).unwrap(),
        slices: vec![-0.2, 0.0, 0.2],
        detector: 1.8,
        samples_per_period: 24.0,
    };
    let (sino, _) = geometric_optics_sinogram(&beam, &field, 2.0, &scan).unwrap();
    assert_eq!(
        (sino.n_slices(), sino.n_angles(), sino.n_offsets()),
        (3, 60, 88)
    );
    // the sinogram agrees with the line integrals themselves
    let direct = radon_sinogram(&field, 60, &scan.offsets, &scan.slices, 2.0).unwrap();
    let diff = (&sino.data - &direct.data)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(diff < 1e-6, "{diff}");
    let rec = fbp_reconstruct(&sino, 64).unwrap();
    assert_eq!(rec.values.dim(), (64, 64, 3));
    let err = relative_l2_error(&rec, &field);
    assert!(err < 0.1, "{err}");
    let gridded = rec.into_field().unwrap();
    let peak = gridded.eval(&Vec3::new(0.1, -0.2, 0.0));
    assert!((peak - 0.6).abs() < 0.06, "{peak}");
}
