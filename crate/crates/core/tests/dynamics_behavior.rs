//! Behavioral checks of the forward model: upwind order of accuracy,
//! gated-hybrid exactness at gate zero, the CFL guard, and consistency of
//! the PV diagnosis with its elliptic inverse.

use qgdiff::dataio::random_eddy_field;
use qgdiff::dynamics::{integrate_day, pv_from_ssh, upwind_deriv_x, upwind_deriv_y};
use qgdiff::elliptic::ssh_from_pv;
use qgdiff::{
    CGConfig, ConvNetParams, Error, Field2D, GeneratorConfig, GridSpec, PhysicalParams,
    StepConfig, VelocityModel,
};

const TAU: f64 = std::f64::consts::TAU;

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, &v| m.max(v.abs()))
}

/// Least-squares slope of ln(err) against ln(dx).
fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(dx, err) in points {
        let (x, y) = (dx.ln(), err.ln());
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Max error of the upwind x-derivative of sin(2*pi*x/L) against the exact
/// derivative, over cells where the full four-tap stencil applies.
fn upwind_sin_error(n: usize, flow_sign: f64) -> (f64, f64) {
    let l = 64.0;
    let dx = l / (n - 1) as f64;
    let grid = GridSpec::new(n, 8, dx, 1.0).unwrap();
    let phi = Field2D::from_fn(grid, |_, ix| (TAU * ix as f64 * dx / l).sin());
    let vel = Field2D::from_fn(grid, |_, _| flow_sign);
    let deriv = upwind_deriv_x(&phi, &vel);
    let mut err: f64 = 0.0;
    for ix in 2..n - 2 {
        let exact = TAU / l * (TAU * ix as f64 * dx / l).cos();
        err = err.max((deriv.at(1, ix) - exact).abs());
    }
    (dx, err)
}

#[test]
fn upwind_derivative_converges_at_third_order_on_sine() {
    for flow_sign in [1.0, -1.0] {
        let points: Vec<(f64, f64)> = [32, 64, 128]
            .iter()
            .map(|&n| upwind_sin_error(n, flow_sign))
            .collect();
        let slope = loglog_slope(&points);
        assert!(
            slope >= 2.7,
            "flow sign {flow_sign}: order {slope:.3} from errors {points:?}"
        );
    }
}

#[test]
fn upwind_y_converges_like_x() {
    let l = 64.0;
    let mut points = Vec::new();
    for n in [32_usize, 64, 128] {
        let dy = l / (n - 1) as f64;
        let grid = GridSpec::new(8, n, 1.0, dy).unwrap();
        let phi = Field2D::from_fn(grid, |iy, _| (TAU * iy as f64 * dy / l).sin());
        let vel = Field2D::from_fn(grid, |_, _| 1.0);
        let deriv = upwind_deriv_y(&phi, &vel);
        let mut err: f64 = 0.0;
        for iy in 2..n - 2 {
            let exact = TAU / l * (TAU * iy as f64 * dy / l).cos();
            err = err.max((deriv.at(iy, 1) - exact).abs());
        }
        points.push((dy, err));
    }
    let slope = loglog_slope(&points);
    assert!(slope >= 2.7, "order {slope:.3} from errors {points:?}");
}

fn gentle_eddies(grid: GridSpec, seed: u64) -> Field2D {
    let l = (grid.dx * (grid.nx - 1) as f64).min(grid.dy * (grid.ny - 1) as f64);
    let gen = GeneratorConfig {
        n_eddies_min: 2,
        n_eddies_max: 3,
        amp_min: 0.05,
        amp_max: 0.15,
        radius_min: 0.20 * l,
        radius_max: 0.35 * l,
        ..GeneratorConfig::default()
    };
    random_eddy_field(grid, &gen, seed)
}

#[test]
fn zero_gate_hybrid_reproduces_fixed_model_over_144_steps() {
    let grid = GridSpec::new(64, 48, 5500.0, 5500.0).unwrap();
    let h0 = gentle_eddies(grid, 11);
    let p = PhysicalParams::default();
    let step = StepConfig::default();
    assert_eq!(step.n_steps, 144);
    let cg = CGConfig::default();

    let fixed = integrate_day(&h0, &VelocityModel::FixedQg, &p, &step, &cg)
        .unwrap()
        .h;
    // Freshly constructed ConvNet: the gate scalar starts at exactly zero,
    // so the learned correction must contribute nothing at all.
    let hybrid_model = VelocityModel::QgPlusConvNet(ConvNetParams::new(3));
    let hybrid = integrate_day(&h0, &hybrid_model, &p, &step, &cg).unwrap().h;

    let rel = hybrid.linf_diff(&fixed) / max_abs(fixed.values());
    assert!(rel <= 1e-12, "zero-gate hybrid departs from fixed model: {rel:e}");
}

#[test]
fn cfl_guard_rejects_overspeed_first_step() {
    let grid = GridSpec::new(48, 36, 5500.0, 5500.0).unwrap();
    // A 50 m eddy drives geostrophic speeds far past the Courant limit.
    let gen = GeneratorConfig {
        n_eddies_min: 1,
        n_eddies_max: 1,
        amp_min: 50.0,
        amp_max: 50.0,
        radius_min: 40_000.0,
        radius_max: 60_000.0,
        ..GeneratorConfig::default()
    };
    let h0 = random_eddy_field(grid, &gen, 2);
    let err = integrate_day(
        &h0,
        &VelocityModel::FixedQg,
        &PhysicalParams::default(),
        &StepConfig::default(),
        &CGConfig::default(),
    )
    .unwrap_err();
    match err {
        Error::CflExceeded { courant, limit, step } => {
            assert!(courant > limit);
            assert_eq!(limit, 0.5);
            assert_eq!(step, Some(1));
        }
        other => panic!("expected a CFL rejection, got {other}"),
    }
}

#[test]
fn default_run_keeps_courant_diagnostics_under_the_limit() {
    // Full default configuration: 200x150 grid, dt = 600 s, 144 steps.
    let grid = GridSpec::new(200, 150, 5500.0, 5500.0).unwrap();
    let h0 = random_eddy_field(grid, &GeneratorConfig::default(), 1);
    let p = PhysicalParams::default();
    let step = StepConfig::default();
    let fc = integrate_day(&h0, &VelocityModel::FixedQg, &p, &step, &CGConfig::default()).unwrap();
    assert_eq!(fc.steps.len(), 144);
    for (i, s) in fc.steps.iter().enumerate() {
        assert!(
            s.courant > 0.0 && s.courant <= step.cfl_max,
            "step {}: courant {} outside (0, {}]",
            i + 1,
            s.courant,
            step.cfl_max
        );
    }
}

#[test]
fn pv_inversion_round_trips_ssh() {
    let grid = GridSpec::new(48, 36, 5500.0, 5500.0).unwrap();
    let p = PhysicalParams::default();
    for seed in [21_u64, 22, 23] {
        let h = gentle_eddies(grid, seed);
        let q = pv_from_ssh(&h, &p);
        let scale = max_abs(h.values());

        // With the exact field as the warm start the inversion must return
        // it unchanged (the truncated solver's fixed point).
        let back = ssh_from_pv(&q, &h, &p, &CGConfig::default()).unwrap();
        let rel = back.linf_diff(&h) / scale;
        assert!(rel <= 1e-10, "seed {seed}: warm-start round trip off by {rel:e}");

        // From a degraded interior (ring kept: it carries the boundary
        // condition) a fully converged solve still recovers the field.
        let degraded = Field2D::from_fn(grid, |iy, ix| {
            if iy == 0 || iy == grid.ny - 1 || ix == 0 || ix == grid.nx - 1 {
                h.at(iy, ix)
            } else {
                0.5 * h.at(iy, ix)
            }
        });
        let cfg = CGConfig {
            max_iters: 100_000,
            tol: 1e-13,
            unrolled: false,
        };
        let recovered = ssh_from_pv(&q, &degraded, &p, &cfg).unwrap();
        let rel = recovered.linf_diff(&h) / scale;
        assert!(rel <= 1e-10, "seed {seed}: cold recovery off by {rel:e}");
    }
}
