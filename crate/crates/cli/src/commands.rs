//! The subcommands. Each writes its artifacts into one directory and
//! finishes with the manifest.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dckerr::direct1d::{measure_phase_shift, run_experiment, DetectorTrace, Experiment1D};
use dckerr::inversion::{
    extract_with_family, fbp_reconstruct, geometric_optics_sinogram, geometric_optics_trace,
    relative_l2_error, AngleData, ScanGeometry, Sinogram, WindowFunction,
};
use dckerr::kerrcell::{
    chi_from_first_max, envelope_vs_field, first_max_field, optimal_tau_scan, simulate_cell,
    transmission_envelope, CellRun, CellSpec,
};
use dckerr::media::{tau_at, xray_transform};
use dckerr::profiles::{core_beam, BeamSpec};
use dckerr::smooth::Bump;
use dckerr::stationary::{fixed_point_solve, DirichletProblem, StrongFieldSolution};
use dckerr::{Direction, Frame, Grid1D, Grid3D, SusceptibilityField, Vec3};
use ndarray::{Array3, Array4, Ix3};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{build_medium, BeamSection, LoadedConfig, MediumSection};
use crate::output::{
    read_csv, read_grid, write_grid, write_json, write_manifest, Csv, GridSidecar,
};

fn prepare(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn grid_sidecar(grid: &Grid3D, field_name: &str) -> GridSidecar {
    GridSidecar {
        shape: grid.counts.to_vec(),
        origin: grid.origin.to_vec(),
        spacing: grid.spacing.to_vec(),
        field_name: field_name.into(),
        metadata: Value::Null,
    }
}

/// Everything `extract` needs to interpret a trace file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceMeta {
    pub source: String,
    pub position: f64,
    pub t0: f64,
    pub dt: f64,
    pub h: f64,
    pub e0: f64,
    pub background: f64,
    /// Amplitude prefactor of the oscillating part: `h^{3/2}` for
    /// geometric-optics traces, `h` for direct-solver traces.
    pub scale: f64,
    /// Transverse position of the detector point in the beam frame.
    pub x_perp: [f64; 2],
    pub beam: BeamSection,
}

fn write_trace(dir: &Path, name: &str, trace: &DetectorTrace, meta: &TraceMeta) -> Result<()> {
    let mut csv = Csv::new(&["t", "E2", "E3"]);
    for i in 0..trace.len() {
        csv.row(&[trace.time(i), trace.e2[i], trace.e3[i]]);
    }
    csv.write(&dir.join(format!("{name}.csv")))?;
    write_json(&dir.join(format!("{name}.json")), meta)
}

fn beam_section(beam: &BeamSpec, core_radius: f64) -> BeamSection {
    let core = beam.u_init(&Vec3::new(beam.envelope.center, 0.0, 0.0));
    BeamSection {
        a2: core.y,
        a3: core.z,
        core_radius,
        launch: beam.envelope.center,
        half_width: beam.envelope.half_width,
    }
}

pub fn stationary(cfg: &LoadedConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir("stationary");
    let sec = cfg.section(&cfg.config.stationary, "stationary")?;
    if sec.nodes < 5 {
        return Err(cfg
            .invalid("stationary", "nodes", "need at least 5 nodes per axis")
            .into());
    }
    let field = cfg.medium()?;
    let h = cfg.h()?;
    let far = Vec3::from(sec.far_field);
    let problem = DirichletProblem::on_box(&field, sec.nodes, |x| far.dot(x), h)?;
    let tol = cfg.config.tolerances.fixed_point;
    let solve = |h: f64| -> Result<StrongFieldSolution> {
        Ok(fixed_point_solve(&problem.with_h(h)?, sec.max_iter, tol)?)
    };
    let sol = solve(h)?;
    prepare(&dir)?;

    let grid = problem.grid;
    write_grid(
        &dir.join("psi.bin"),
        &sol.psi.clone().into_dyn(),
        &grid_sidecar(&grid, "psi"),
    )?;
    write_grid(
        &dir.join("psi1.bin"),
        &sol.expansion[1].clone().into_dyn(),
        &grid_sidecar(&grid, "psi1"),
    )?;
    let (nx, ny, nz) = grid.shape();
    let e = Array4::from_shape_fn((3, nx, ny, nz), |(c, i, j, k)| sol.e[c][[i, j, k]]);
    let mut side = grid_sidecar(&grid, "E");
    side.shape.insert(0, 3);
    side.origin.insert(0, 0.0);
    side.spacing.insert(0, 1.0);
    write_grid(&dir.join("E.bin"), &e.into_dyn(), &side)?;

    let mut it = Csv::new(&["iteration", "difference", "ratio"]);
    for (k, d) in sol.differences.iter().enumerate() {
        let r = if k == 0 { f64::NAN } else { sol.ratios[k - 1] };
        it.row(&[(k + 1) as f64, *d, r]);
    }
    it.write(&dir.join("iterations.csv"))?;

    // remainder psi - u_f - h psi1 at h, h/2, h/4
    let mut exp = Csv::new(&["h", "remainder", "halving_factor"]);
    let mut prev: Option<f64> = None;
    let mut factors = Vec::new();
    for k in 0..3 {
        let hk = h / f64::from(1u32 << k);
        let s = if k == 0 { sol.clone() } else { solve(hk)? };
        let rem = s
            .psi
            .iter()
            .zip(s.expansion[0].iter().zip(s.expansion[1].iter()))
            .fold(0.0f64, |m, (p, (u, p1))| m.max((p - u - hk * p1).abs()));
        let f = prev.map(|p| p / rem).unwrap_or(f64::NAN);
        if prev.is_some() {
            factors.push(f);
        }
        exp.row(&[hk, rem, f]);
        prev = Some(rem);
    }
    exp.write(&dir.join("expansion.csv"))?;
    let summary = json!({
        "h": h,
        "iterations": sol.iterations,
        "residual": sol.residual_norm,
        "contraction_estimate": sol.contraction_estimate,
        "max_ratio_after_second_iteration": sol.ratios.iter().skip(1).cloned().fold(0.0, f64::max),
        "halving_factors": factors,
    });
    write_manifest(&dir, "stationary", &[&cfg.path], summary)?;
    Ok(dir)
}

pub fn forward(cfg: &LoadedConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir("forward");
    let sec = cfg.section(&cfg.config.forward, "forward")?;
    if sec.n2 < 1 || sec.n3 < 1 {
        return Err(cfg
            .invalid("forward", "n2", "need at least one detector point per axis")
            .into());
    }
    let field = cfg.medium()?;
    let h = cfg.h()?;
    let e0 = cfg.e0()?;
    let beam = cfg.beam(h)?;
    let omega = Direction::in_plane(sec.angle);
    let frame = Frame::new(omega)?;
    let axis = |r: [f64; 2], n: usize, i: usize| {
        if n == 1 {
            0.5 * (r[0] + r[1])
        } else {
            r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64
        }
    };
    let window = WindowFunction::for_beam(&beam, sec.detector)?;
    let scale = h.powf(1.5);
    prepare(&dir)?;
    let mut map = Csv::new(&["x2", "x3", "tau", "cos_tau", "sin_tau"]);
    let mut max_tau: f64 = 0.0;
    let mut free_deviation: f64 = 0.0;
    for j in 0..sec.n3 {
        for i in 0..sec.n2 {
            let (x2, x3) = (axis(sec.x2, sec.n2, i), axis(sec.x3, sec.n3, j));
            let x = frame.to_lab(&Vec3::new(sec.detector, x2, x3));
            let tau = tau_at(&field, e0.abs(), &x, &omega);
            let trace =
                geometric_optics_trace(&beam, &field, e0, &omega, &x, sec.samples_per_period)?;
            // points outside the beam carry no E2 signal
            let (c, s) = match extract_with_family(&trace, &beam, (x2, x3), &[window], scale) {
                Ok(est) => (est.cos_tau, est.sin_tau),
                Err(dckerr::Error::WindowMissesEnvelope { .. }) => (f64::NAN, f64::NAN),
                Err(e) => return Err(e.into()),
            };
            map.row(&[x2, x3, tau, c, s]);
            max_tau = max_tau.max(tau.abs());
            for k in 0..trace.len() {
                let t = trace.time(k);
                let u = beam.u_init(&Vec3::new(sec.detector - t, x2, x3));
                let th = (sec.detector - t) / h;
                free_deviation = free_deviation
                    .max((trace.e2[k] - scale * u.y * th.cos()).abs())
                    .max((trace.e3[k] - h.sqrt() * e0 - scale * u.z * th.cos()).abs());
            }
        }
    }
    map.write(&dir.join("tau_map.csv"))?;
    let (x2, x3) = (
        axis(sec.x2, sec.n2, sec.n2 / 2),
        axis(sec.x3, sec.n3, sec.n3 / 2),
    );
    let x = frame.to_lab(&Vec3::new(sec.detector, x2, x3));
    let trace = geometric_optics_trace(&beam, &field, e0, &omega, &x, sec.samples_per_period)?;
    let core_radius = cfg.config.beam.map(|b| b.core_radius).unwrap_or(0.5);
    let meta = TraceMeta {
        source: "geometric optics".into(),
        position: trace.position,
        t0: trace.t0,
        dt: trace.dt,
        h,
        e0,
        background: trace.background,
        scale,
        x_perp: [x2, x3],
        beam: beam_section(&beam, core_radius),
    };
    write_trace(&dir, "trace", &trace, &meta)?;
    let summary = json!({
        "zero_retardation": max_tau == 0.0,
        "max_tau": max_tau,
        "max_deviation_from_free_beam": free_deviation,
        "angle": sec.angle,
    });
    write_manifest(&dir, "forward", &[&cfg.path], summary)?;
    Ok(dir)
}

/// Experiment and beam for a direct run: explicit layout when `[fdtd].domain`
/// is set, otherwise a short layout around the medium's support on the axis.
fn fdtd_setup(
    cfg: &LoadedConfig,
    field: &SusceptibilityField,
    h: f64,
    pph: f64,
    cfl: f64,
) -> Result<(Experiment1D, BeamSpec)> {
    let e0 = cfg.e0()?;
    let b = cfg.section(&cfg.config.beam, "beam")?;
    if let Some(sec) = &cfg.config.fdtd {
        if let Some(domain) = sec.domain {
            let detector = sec
                .detector
                .ok_or_else(|| cfg.invalid("fdtd", "detector", "required with `domain`"))?;
            let t_final = sec
                .t_final
                .ok_or_else(|| cfg.invalid("fdtd", "t_final", "required with `domain`"))?;
            let exp = Experiment1D {
                e0,
                domain: (domain[0], domain[1]),
                detector,
                t_final,
                points_per_h: pph,
                cfl,
                boundary: None,
            };
            return Ok((exp, cfg.beam(h)?));
        }
    }
    let (c, r) = (field.support_center().x, field.support_radius());
    let (exp, envelope) = Experiment1D::compact(e0, (c - r, c + r), b.half_width, h, pph, cfl);
    Ok((exp, core_beam(b.a2, b.a3, b.core_radius, envelope, h)?))
}

fn axial_tau(field: &SusceptibilityField, e0: f64) -> f64 {
    0.5 * e0 * e0 * xray_transform(field, &Direction::e1(), &Vec3::zeros())
}

pub fn fdtd(cfg: &LoadedConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir("fdtd");
    let sec = cfg.section(&cfg.config.fdtd, "fdtd")?;
    let field = cfg.medium()?;
    let h = cfg.h()?;
    let (exp, beam) = fdtd_setup(cfg, &field, h, sec.points_per_h, sec.cfl)?;
    let core_radius = cfg.config.beam.map(|b| b.core_radius).unwrap_or(0.5);
    let meta = |t: &DetectorTrace| TraceMeta {
        source: "direct solver".into(),
        position: t.position,
        t0: t.t0,
        dt: t.dt,
        h,
        e0: exp.e0,
        background: t.background,
        scale: h,
        x_perp: [0.0, 0.0],
        beam: beam_section(&beam, core_radius),
    };
    let tau = axial_tau(&field, exp.e0);
    let mut summary = json!({
        "h": h,
        "domain": [exp.domain.0, exp.domain.1],
        "detector": exp.detector,
        "t_final": exp.t_final,
        "tau_expected": tau,
    });
    if sec.reference {
        let m = measure_phase_shift(&exp, &beam, &field)?;
        prepare(&dir)?;
        write_trace(&dir, "trace", &m.trace, &meta(&m.trace))?;
        write_trace(&dir, "reference_trace", &m.reference, &meta(&m.reference))?;
        summary["delta2"] = json!(m.delta2);
        summary["delta3"] = json!(m.delta3);
        summary["samples_per_period"] = json!(m.trace.samples_per_period());
    } else {
        let trace = run_experiment(&exp, &beam, &field)?;
        prepare(&dir)?;
        write_trace(&dir, "trace", &trace, &meta(&trace))?;
        summary["samples_per_period"] = json!(trace.samples_per_period());
    }
    write_manifest(&dir, "fdtd", &[&cfg.path], summary)?;
    Ok(dir)
}

/// `auto`, `a,b`, or several `a,b` pairs separated by `;`.
pub fn parse_windows(spec: &str, beam: &BeamSpec, position: f64) -> Result<Vec<WindowFunction>> {
    if spec.trim() == "auto" {
        return Ok(vec![WindowFunction::for_beam(beam, position)?]);
    }
    spec.split(';')
        .map(|part| {
            let v: Vec<f64> = part
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| anyhow!("window `{part}`: expected `start,end`"))?;
            match v.as_slice() {
                [a, b] => Ok(WindowFunction::new(*a, *b)?),
                _ => bail!("window `{part}`: expected `start,end`"),
            }
        })
        .collect()
}

pub fn extract(trace_path: &Path, window: &str, out: Option<&Path>) -> Result<PathBuf> {
    let meta_path = trace_path.with_extension("json");
    let meta: TraceMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path)
            .with_context(|| format!("reading {}", meta_path.display()))?,
    )
    .with_context(|| format!("parsing {}", meta_path.display()))?;
    let (header, rows) = read_csv(trace_path)?;
    if header != ["t", "E2", "E3"] {
        bail!("{}: expected columns t,E2,E3", trace_path.display());
    }
    let b = meta.beam;
    let beam = core_beam(
        b.a2,
        b.a3,
        b.core_radius,
        Bump::new(b.launch, b.half_width),
        meta.h,
    )?;
    let trace = DetectorTrace {
        position: meta.position,
        t0: meta.t0,
        dt: meta.dt,
        e2: rows.iter().map(|r| r[1]).collect(),
        e3: rows.iter().map(|r| r[2]).collect(),
        h: meta.h,
        e0: meta.e0,
        background: meta.background,
        a2: b.a2,
        a3: b.a3,
        chi_description: meta.source.clone(),
    };
    let windows = parse_windows(window, &beam, meta.position)?;
    let est = extract_with_family(
        &trace,
        &beam,
        (meta.x_perp[0], meta.x_perp[1]),
        &windows,
        meta.scale,
    )?;
    let dir = match (std::env::var("OUTPUT_DIR"), out) {
        (Ok(d), _) => PathBuf::from(d),
        (_, Some(d)) => d.to_path_buf(),
        _ => trace_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("extract"),
    };
    prepare(&dir)?;
    let result = json!({
        "cos_tau": est.cos_tau,
        "sin_tau": est.sin_tau,
        "tau": est.sin_tau.atan2(est.cos_tau),
        "modulus_squared": est.modulus_squared(),
        "normalization": est.normalization,
        "windows": windows.iter().map(|w| [w.support.0, w.support.1]).collect::<Vec<_>>(),
    });
    write_json(&dir.join("cos_sin_tau.json"), &result)?;
    write_manifest(&dir, "extract", &[trace_path, &meta_path], result)?;
    Ok(dir)
}

pub fn sinogram(cfg: &LoadedConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir("sinogram");
    let sec = cfg.section(&cfg.config.scan, "scan")?;
    if sec.n_offsets < 2 {
        return Err(cfg
            .invalid("scan", "n_offsets", "need at least 2 offsets")
            .into());
    }
    if !(sec.offset_max > sec.offset_min) {
        return Err(cfg
            .invalid("scan", "offset_max", "must exceed offset_min")
            .into());
    }
    if sec.slices.is_empty() || sec.slices.windows(2).any(|w| w[1] <= w[0]) {
        return Err(cfg
            .invalid("scan", "slices", "need increasing slice heights")
            .into());
    }
    let medium = cfg.resolved_medium()?;
    let field = cfg.medium()?;
    let h = cfg.h()?;
    let e0 = cfg.e0()?;
    let beam = cfg.beam(h)?;
    let offsets = Grid1D::new(
        sec.offset_min,
        (sec.offset_max - sec.offset_min) / (sec.n_offsets - 1) as f64,
        sec.n_offsets,
    )?;
    let scan = ScanGeometry {
        n_angles: sec.n_angles,
        offsets,
        slices: sec.slices.clone(),
        detector: sec.detector,
        samples_per_period: sec.samples_per_period,
    };
    let (sino, data) = geometric_optics_sinogram(&beam, &field, e0, &scan)?;
    prepare(&dir)?;
    let (ns, na, no) = sino.data.dim();
    let dz = if ns > 1 {
        (sino.z_max - sino.z_min) / (ns - 1) as f64
    } else {
        1.0
    };
    let sidecar = |name: &str, metadata: Value| GridSidecar {
        shape: vec![ns, na, no],
        origin: vec![sino.z_min, 0.0, sino.offset_min],
        spacing: vec![dz, PI / na as f64, offsets.spacing],
        field_name: name.into(),
        metadata,
    };
    let meta = json!({
        "layout": "[slice][angle][offset]",
        "e0": e0,
        "offset_range": [sino.offset_min, sino.offset_max],
        "z_range": [sino.z_min, sino.z_max],
        "medium": medium,
    });
    write_grid(
        &dir.join("sinogram.bin"),
        &sino.data.clone().into_dyn(),
        &sidecar("g", meta),
    )?;
    let stack = |f: fn(&AngleData) -> &ndarray::Array2<f64>| {
        Array3::from_shape_fn((ns, na, no), |(s, a, o)| f(&data[a])[[s, o]]).into_dyn()
    };
    write_grid(
        &dir.join("cos_tau.bin"),
        &stack(|d| &d.cos_tau),
        &sidecar("cos_tau", Value::Null),
    )?;
    write_grid(
        &dir.join("sin_tau.bin"),
        &stack(|d| &d.sin_tau),
        &sidecar("sin_tau", Value::Null),
    )?;
    write_grid(
        &dir.join("tau.bin"),
        &stack(|d| &d.tau),
        &sidecar("tau", Value::Null),
    )?;
    let modulus = data
        .iter()
        .flat_map(|d| {
            d.cos_tau
                .iter()
                .zip(d.sin_tau.iter())
                .map(|(c, s)| (c * c + s * s - 1.0).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    let max_tau = data
        .iter()
        .flat_map(|d| d.tau.iter().map(|t| t.abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    let summary = json!({
        "shape": [ns, na, no],
        "max_tau": max_tau,
        "max_modulus_defect": modulus,
    });
    write_manifest(&dir, "sinogram", &[&cfg.path], summary)?;
    Ok(dir)
}

pub fn reconstruct(
    sinogram_path: &Path,
    out: &Path,
    pixels: Option<usize>,
    max_error: f64,
) -> Result<PathBuf> {
    let (data, side) = read_grid(sinogram_path)?;
    let data: Array3<f64> = data
        .into_dimensionality::<Ix3>()
        .context("sinogram must be three-dimensional")?;
    let meta = &side.metadata;
    let get = |key: &str| -> Result<[f64; 2]> {
        let v = meta
            .get(key)
            .ok_or_else(|| anyhow!("sinogram sidecar lacks `metadata.{key}`"))?;
        Ok(serde_json::from_value(v.clone())?)
    };
    let e0 = meta
        .get("e0")
        .and_then(Value::as_f64)
        .ok_or_else(|| anyhow!("sinogram sidecar lacks `metadata.e0`"))?;
    let (off, z) = (get("offset_range")?, get("z_range")?);
    let n_offsets = data.dim().2;
    let sino = Sinogram::new(data, (off[0], off[1]), (z[0], z[1]), e0)?;
    let rec = fbp_reconstruct(&sino, pixels.unwrap_or(n_offsets))?;
    let dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    prepare(&dir)?;
    write_grid(
        out,
        &rec.values.clone().into_dyn(),
        &grid_sidecar(&rec.grid, "chi"),
    )?;
    let mut summary =
        json!({ "grid": rec.grid.counts, "slices": sino.n_slices(), "angles": sino.n_angles() });
    if let Some(m) = meta.get("medium") {
        let medium: MediumSection = serde_json::from_value(m.clone())?;
        let field = build_medium(&medium).map_err(|e| anyhow!(e))?;
        let err = relative_l2_error(&rec, &field);
        summary["relative_l2_error"] = json!(err);
        summary["within_tolerance"] = json!(err <= max_error);
    }
    write_manifest(
        &dir,
        "reconstruct",
        &[sinogram_path, &sinogram_path.with_extension("json")],
        summary,
    )?;
    Ok(dir)
}

pub fn kerrcell(cfg: &LoadedConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir("kerrcell");
    let sec = cfg.section(&cfg.config.kerrcell, "kerrcell")?;
    let cell = CellSpec::new(sec.a2, sec.a3, sec.d, sec.e0, sec.chi)
        .map_err(|e| cfg.invalid("kerrcell", "a2", e.to_string()))?;
    if !(sec.tau_step > 0.0 && sec.tau_max >= PI) {
        return Err(cfg
            .invalid(
                "kerrcell",
                "tau_max",
                "the tau scan must cover [0, pi] with a positive step",
            )
            .into());
    }
    prepare(&dir)?;
    let n = (sec.tau_max / sec.tau_step).round() as usize;
    let taus: Vec<f64> = (0..=n).map(|k| k as f64 * sec.tau_step).collect();
    let mut tcsv = Csv::new(&["tau", "envelope"]);
    for &t in &taus {
        tcsv.row(&[t, transmission_envelope(cell.a2, cell.a3, t)]);
    }
    tcsv.write(&dir.join("tau_scan.csv"))?;
    let scan = optimal_tau_scan(&cell, &taus);

    let mut summary = json!({
        "tau_at_max": scan.tau_at_max,
        "envelope_max": scan.envelope_max,
        "degenerate": scan.degenerate,
        "nominal_tau": cell.nominal_tau(),
    });
    if cell.chi > 0.0 {
        let e_star = first_max_field(cell.chi, cell.d)?;
        let e_max = sec.e0_max.unwrap_or(2.0 * e_star);
        let grid: Vec<f64> = (1..=sec.e0_steps)
            .map(|k| e_max * k as f64 / sec.e0_steps as f64)
            .collect();
        let rows = envelope_vs_field(&cell, &grid);
        let mut fcsv = Csv::new(&["e0", "envelope"]);
        for &(e, v) in &rows {
            fcsv.row(&[e, v]);
        }
        fcsv.write(&dir.join("field_scan.csv"))?;
        if let Some(w) = rows
            .windows(3)
            .find(|w| w[1].1 > w[0].1 && w[1].1 >= w[2].1)
        {
            let chi = chi_from_first_max(w[1].0, cell.d)?;
            summary["e0_first_max"] = json!(w[1].0);
            summary["chi_estimate"] = json!(chi);
            summary["chi_relative_error"] = json!((chi - cell.chi).abs() / cell.chi);
        }
    }

    if cfg.config.run.h.is_some() || cfg.config.run.h_sweep.is_some() {
        let run = CellRun {
            points_per_h: sec.points_per_h,
            cfl: sec.cfl,
            ..CellRun::default()
        };
        let mut vcsv = Csv::new(&[
            "h",
            "tau_inf",
            "envelope",
            "analytic_envelope",
            "major",
            "minor",
            "major_expected",
            "minor_expected",
        ]);
        let mut c_env: f64 = 0.0;
        for h in cfg.h_sweep()? {
            let s = simulate_cell(&cell, h, &run)?;
            // ellipse of (a2 e^{i tau}, a3 e^{3 i tau})
            let expected = dckerr::profiles::polarization_ellipse(
                num_complex::Complex64::from_polar(cell.a2, s.tau_inf),
                num_complex::Complex64::from_polar(cell.a3, 3.0 * s.tau_inf),
            );
            c_env = c_env.max((s.envelope - s.analytic_envelope).abs() / h);
            vcsv.row(&[
                h,
                s.tau_inf,
                s.envelope,
                s.analytic_envelope,
                s.ellipse.major,
                s.ellipse.minor,
                expected.major,
                expected.minor,
            ]);
        }
        vcsv.write(&dir.join("cell_validation.csv"))?;
        summary["envelope_error_constant"] = json!(c_env);
        summary["within_tolerance"] = json!(c_env <= cfg.config.tolerances.error_constant);
    }
    write_manifest(&dir, "kerrcell", &[&cfg.path], summary)?;
    Ok(dir)
}

/// Least-squares slope of `log |e|` against `log h`.
pub fn fitted_order(hs: &[f64], errs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = hs
        .iter()
        .zip(errs)
        .filter(|(_, e)| e.abs() > 0.0)
        .map(|(h, e)| (h.ln(), e.abs().ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn convergence(cfg: &LoadedConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir("convergence");
    let sec = cfg
        .config
        .convergence
        .clone()
        .unwrap_or(crate::config::ConvergenceSection {
            points_per_h: 20.0,
            cfl: 0.9,
        });
    let field = cfg.medium()?;
    let e0 = cfg.e0()?;
    let sweep = cfg.h_sweep()?;
    let tau = axial_tau(&field, e0);
    let mut rows = Vec::new();
    for &h in &sweep {
        let (exp, beam) = fdtd_setup(cfg, &field, h, sec.points_per_h, sec.cfl)?;
        log::info!("convergence: h = {h}");
        let m = measure_phase_shift(&exp, &beam, &field)?;
        rows.push((h, m.delta2, m.delta3));
    }
    prepare(&dir)?;
    let mut csv = Csv::new(&[
        "h", "tau", "delta2", "delta3", "error2", "error3", "order2", "order3",
    ]);
    let mut errs2 = Vec::new();
    let mut errs3 = Vec::new();
    for (k, &(h, d2, d3)) in rows.iter().enumerate() {
        let e2 = d2.map(|d| d - tau).unwrap_or(f64::NAN);
        let e3 = d3.map(|d| d - 3.0 * tau).unwrap_or(f64::NAN);
        let order = |prev: f64, cur: f64| {
            if k == 0 {
                f64::NAN
            } else {
                (prev.abs() / cur.abs()).ln() / (rows[k - 1].0 / h).ln()
            }
        };
        let (o2, o3) = (
            order(*errs2.last().unwrap_or(&f64::NAN), e2),
            order(*errs3.last().unwrap_or(&f64::NAN), e3),
        );
        csv.row(&[
            h,
            tau,
            d2.unwrap_or(f64::NAN),
            d3.unwrap_or(f64::NAN),
            e2,
            e3,
            o2,
            o3,
        ]);
        errs2.push(e2);
        errs3.push(e3);
    }
    csv.write(&dir.join("convergence.csv"))?;
    let finite = |v: &[f64]| v.iter().filter(|e| e.is_finite()).count() == v.len();
    let c = sweep
        .iter()
        .zip(errs2.iter().zip(&errs3))
        .map(|(h, (a, b))| {
            let a = if a.is_finite() { a.abs() } else { 0.0 };
            let b = if b.is_finite() { b.abs() } else { 0.0 };
            a.max(b) / h
        })
        .fold(0.0, f64::max);
    let summary = json!({
        "tau": tau,
        "error_constant": c,
        "order2": if finite(&errs2) { fitted_order(&sweep, &errs2) } else { f64::NAN },
        "order3": if finite(&errs3) { fitted_order(&sweep, &errs3) } else { f64::NAN },
        "within_tolerance": c <= cfg.config.tolerances.error_constant,
    });
    write_manifest(&dir, "convergence", &[&cfg.path], summary)?;
    Ok(dir)
}
