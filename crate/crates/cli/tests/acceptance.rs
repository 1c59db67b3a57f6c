//! Acceptance suite: every release-gating property of the solver, the
//! training pipeline, and the CLI, one verdict line per check.
//!
//! Each test prints `[PASS]`/`[FAIL] <check>` before asserting, so a full
//! run (`cargo test --test acceptance -- --nocapture`) reads as a report.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use qgdiff::dataio::{self, random_eddy_field, Role};
use qgdiff::dynamics::{integrate_day, pv_from_ssh, upwind_deriv_x};
use qgdiff::elliptic::{cg_one_iteration, cg_solve, ssh_from_pv};
use qgdiff::training::{evaluate, loss_grad_check, median_rmse_by_model, train, Algorithm};
use qgdiff::{
    BatchSample, CGConfig, ConvNetParams, Error, Field2D, GeneratorConfig, GradientFilterParams,
    GridSpec, LossConfig, OptimizerConfig, PhysicalParams, StepConfig, SyntheticConfig,
    VelocityModel,
};

fn verdict(ok: bool, label: &str) {
    println!("[{}] {label}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{label}");
}

struct TempDir {
    path: PathBuf,
}

impl TempDir {
    fn new(tag: &str) -> Self {
        let path = std::env::temp_dir().join(format!("qgacc-{tag}-{}", std::process::id()));
        if path.exists() {
            std::fs::remove_dir_all(&path).unwrap();
        }
        std::fs::create_dir_all(&path).unwrap();
        TempDir { path }
    }

    fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.path);
    }
}

fn qg(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_qg"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().expect("no signal"),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, &v| m.max(v.abs()))
}

/// A few gentle eddies sized to the grid, safely inside the Courant limit.
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

fn teacher_sample(grid: GridSpec, step: &StepConfig, seed: u64) -> BatchSample {
    let p = PhysicalParams::default();
    let h0 = gentle_eddies(grid, seed);
    let target = integrate_day(&h0, &VelocityModel::FixedQg, &p, step, &CGConfig::default())
        .unwrap()
        .h;
    let (_, sigma) = target.mean_std();
    BatchSample {
        id: format!("t{seed}"),
        h0,
        target,
        sigma,
    }
}

#[test]
fn a01_reverse_gradient_matches_central_differences() {
    let started = Instant::now();
    let grid = GridSpec::new(32, 24, 5500.0, 5500.0).unwrap();
    let step = StepConfig {
        n_steps: 6,
        ..StepConfig::default()
    };
    let samples = vec![teacher_sample(grid, &step, 40)];
    let model = VelocityModel::TrainableFilter(GradientFilterParams::random_init(8, 0.3));
    let report = loss_grad_check(
        &model,
        &samples,
        &PhysicalParams::default(),
        &step,
        &CGConfig::default(),
        &LossConfig::default(),
        None,
        1e-6,
        1e-6,
    )
    .unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        report.pass && report.max_rel_err < 1e-6 && elapsed < 60.0,
        &format!(
            "filter gradient on 32x24, 6 steps: max rel err {:.2e} < 1e-6 in {elapsed:.1} s",
            report.max_rel_err
        ),
    );
}

#[test]
fn a02_cg_agrees_with_dense_direct_solve() {
    let grid = GridSpec::new(16, 12, 5500.0, 5500.0).unwrap();
    let l_r = 25_000.0;
    let h_true = gentle_eddies(grid, 3);
    let op = qgdiff::HelmholtzOperator::new(l_r, &h_true).unwrap();
    let rhs = op.apply(&h_true).unwrap();
    let guess = Field2D::from_fn(grid, |iy, ix| {
        if iy == 0 || iy == grid.ny - 1 || ix == 0 || ix == grid.nx - 1 {
            h_true.at(iy, ix)
        } else {
            0.0
        }
    });
    let solved = cg_solve(
        &op,
        &rhs,
        &guess,
        &CGConfig {
            max_iters: 100_000,
            tol: 1e-10,
            unrolled: false,
        },
    )
    .unwrap();

    // Independent oracle: dense LU on the same interior system.
    let (nx, ny) = (grid.nx, grid.ny);
    let inx = nx - 2;
    let n = inx * (ny - 2);
    let idx = |iy: usize, ix: usize| (iy - 1) * inx + (ix - 1);
    let cx = 1.0 / (grid.dx * grid.dx);
    let cy = 1.0 / (grid.dy * grid.dy);
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            let k = idx(iy, ix);
            a[(k, k)] = -2.0 * cx - 2.0 * cy - 1.0 / (l_r * l_r);
            b[k] = rhs.at(iy, ix);
            let mut couple = |jy: usize, jx: usize, coeff: f64| {
                if jy == 0 || jy == ny - 1 || jx == 0 || jx == nx - 1 {
                    b[k] -= coeff * h_true.at(jy, jx);
                } else {
                    a[(k, idx(jy, jx))] = coeff;
                }
            };
            couple(iy, ix - 1, cx);
            couple(iy, ix + 1, cx);
            couple(iy - 1, ix, cy);
            couple(iy + 1, ix, cy);
        }
    }
    let direct = a.lu().solve(&b).unwrap();
    let mut num = 0.0_f64;
    let mut den = 0.0_f64;
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            let d = solved.at(iy, ix) - direct[idx(iy, ix)];
            num += d * d;
            den += direct[idx(iy, ix)] * direct[idx(iy, ix)];
        }
    }
    let rel = (num / den).sqrt();

    let one = cg_one_iteration(&op, &rhs, &guess).unwrap();
    let truncated = cg_solve(
        &op,
        &rhs,
        &guess,
        &CGConfig {
            max_iters: 1,
            tol: 1e-30,
            unrolled: false,
        },
    )
    .unwrap();
    let one_diff = one.linf_diff(&truncated);

    verdict(
        rel < 1e-8 && one_diff <= 1e-14,
        &format!(
            "cg vs dense direct on 16x12: rel err {rel:.2e} < 1e-8; one-iteration helper within {one_diff:.2e}"
        ),
    );
}

#[test]
fn a03_upwind_scheme_is_third_order_on_sine() {
    let l = 64.0;
    let mut points = Vec::new();
    for n in [32_usize, 64, 128] {
        let dx = l / (n - 1) as f64;
        let grid = GridSpec::new(n, 8, dx, 1.0).unwrap();
        let tau = std::f64::consts::TAU;
        let phi = Field2D::from_fn(grid, |_, ix| (tau * ix as f64 * dx / l).sin());
        let vel = Field2D::from_fn(grid, |_, _| 1.0);
        let deriv = upwind_deriv_x(&phi, &vel);
        let mut err: f64 = 0.0;
        for ix in 2..n - 2 {
            let exact = tau / l * (tau * ix as f64 * dx / l).cos();
            err = err.max((deriv.at(1, ix) - exact).abs());
        }
        points.push((dx, err));
    }
    let slope = {
        let n = points.len() as f64;
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for &(dx, err) in &points {
            let (x, y) = (dx.ln(), err.ln());
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    };
    verdict(
        slope >= 2.7,
        &format!("upwind error on sine fits log-log slope {slope:.2} >= 2.7 over 32->64->128"),
    );
}

#[test]
fn a04_zero_gate_hybrid_equals_fixed_model() {
    let grid = GridSpec::new(64, 48, 5500.0, 5500.0).unwrap();
    let h0 = gentle_eddies(grid, 11);
    let p = PhysicalParams::default();
    let step = StepConfig::default();
    let cg = CGConfig::default();
    let fixed = integrate_day(&h0, &VelocityModel::FixedQg, &p, &step, &cg)
        .unwrap()
        .h;
    let hybrid_model = VelocityModel::QgPlusConvNet(ConvNetParams::new(3));
    let hybrid = integrate_day(&h0, &hybrid_model, &p, &step, &cg).unwrap().h;
    let rel = hybrid.linf_diff(&fixed) / max_abs(fixed.values());
    verdict(
        rel <= 1e-12,
        &format!("zero-gate hybrid vs fixed model over 144 steps: rel diff {rel:.2e} <= 1e-12"),
    );
}

#[test]
fn a05_filter_recovery_from_random_init() {
    let started = Instant::now();
    let tmp = TempDir::new("recovery");
    let grid = GridSpec::new(64, 48, 5500.0, 5500.0).unwrap();
    let cfg = SyntheticConfig {
        grid,
        physics: PhysicalParams::default(),
        step: StepConfig {
            n_steps: 36,
            ..StepConfig::default()
        },
        cg: CGConfig::default(),
        generator: GeneratorConfig {
            n_eddies_min: 3,
            n_eddies_max: 5,
            amp_min: 0.10,
            amp_max: 0.25,
            radius_min: 50_000.0,
            radius_max: 90_000.0,
            spinup_days: 1,
            kappa: 0.0,
            train_count: 4,
            test_count: 0,
            gap_days: 1,
        },
    };
    let manifest = dataio::generate_synthetic(&cfg, 42, &tmp.path).unwrap();
    let samples = manifest.load_role(&tmp.path, Role::Train).unwrap();

    let mut model = VelocityModel::TrainableFilter(GradientFilterParams::random_init(17, 0.3));
    let report = train(
        &mut model,
        &samples,
        &manifest.physics,
        &manifest.step,
        &manifest.cg,
        &LossConfig::mse_only(),
        &OptimizerConfig {
            algorithm: Algorithm::QuasiNewton,
            max_epochs: 150,
            ..OptimizerConfig::default()
        },
    )
    .unwrap();

    let off = match &model {
        VelocityModel::TrainableFilter(fp) => fp.linf_to_qg(),
        _ => unreachable!(),
    };
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        off <= 0.02 && elapsed < 1800.0,
        &format!(
            "filter recovery on 64x48, 36-step horizon: every entry within {off:.4} <= 0.02 \
             of the reference pattern in {elapsed:.0} s ({} epochs, converged: {})",
            report.epochs.last().map(|e| e.epoch).unwrap_or(0),
            report.converged
        ),
    );
}

#[test]
fn a06_convnet_has_exactly_2545_trainable_parameters() {
    let model = VelocityModel::QgPlusConvNet(ConvNetParams::new(0));
    let n = model.trainable_len();
    verdict(n == 2545, &format!("convnet trainable parameter count {n} == 2545"));
}

#[test]
fn a07_forecast_skill_ordering_on_perturbed_data() {
    let tmp = TempDir::new("skill");
    let grid = GridSpec::new(32, 24, 5500.0, 5500.0).unwrap();
    let cfg = SyntheticConfig {
        grid,
        physics: PhysicalParams::default(),
        step: StepConfig {
            n_steps: 10,
            ..StepConfig::default()
        },
        cg: CGConfig::default(),
        generator: GeneratorConfig {
            n_eddies_min: 2,
            n_eddies_max: 4,
            amp_min: 0.10,
            amp_max: 0.25,
            radius_min: 35_000.0,
            radius_max: 60_000.0,
            spinup_days: 1,
            kappa: 0.05,
            train_count: 6,
            test_count: 3,
            gap_days: 2,
        },
    };
    let manifest = dataio::generate_synthetic(&cfg, 21, &tmp.path).unwrap();
    let train_samples = manifest.load_role(&tmp.path, Role::Train).unwrap();
    let test_samples = manifest.load_role(&tmp.path, Role::Test).unwrap();

    let mut cp = ConvNetParams::new(4);
    let (mean, std) = qgdiff::training::dataset_input_stats(&train_samples).unwrap();
    cp.set_input_normalization(mean, std).unwrap();
    let mut model = VelocityModel::QgPlusConvNet(cp);
    train(
        &mut model,
        &train_samples,
        &manifest.physics,
        &manifest.step,
        &manifest.cg,
        &LossConfig::mse_only(),
        &OptimizerConfig {
            algorithm: Algorithm::AdaptiveMoment,
            lr: 3e-3,
            decay_factor: 0.5,
            decay_every: 60,
            max_epochs: 120,
            batch_size: 6,
            ..OptimizerConfig::default()
        },
    )
    .unwrap();

    let fixed = VelocityModel::FixedQg;
    let rows = evaluate(
        &[("fixed-qg", &fixed), ("hybrid", &model)],
        &test_samples,
        &manifest.physics,
        &manifest.step,
        &manifest.cg,
    )
    .unwrap();
    let medians = median_rmse_by_model(&rows);
    let get = |name: &str| {
        medians
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .unwrap()
    };
    let (pers, fix, hyb) = (get("persistence"), get("fixed-qg"), get("hybrid"));
    verdict(
        hyb <= fix && fix < pers,
        &format!(
            "median test RMSE ordering: hybrid {hyb:.3e} <= fixed {fix:.3e} < persistence {pers:.3e}"
        ),
    );
}

#[test]
fn a08_cfl_guard_rejects_and_default_run_stays_under_limit() {
    // Rejection carries the numerical-failure class (CLI exit code 3).
    let tmp = TempDir::new("cfl");
    let out = tmp.join("blowup");
    let (code, _, stderr) = qg(&[
        "simulate",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "2",
        "--override",
        "grid.nx=48",
        "--override",
        "grid.ny=36",
        "--override",
        "step.n_steps=4",
        "--override",
        "generator.amp_min=50",
        "--override",
        "generator.amp_max=50",
    ]);
    let rejected = code == 3 && stderr.contains("CFL") && !out.exists();

    // Library-level: the same rejection is a typed error naming step 1.
    let grid = GridSpec::new(48, 36, 5500.0, 5500.0).unwrap();
    let gen = GeneratorConfig {
        n_eddies_min: 1,
        n_eddies_max: 1,
        amp_min: 50.0,
        amp_max: 50.0,
        ..GeneratorConfig::default()
    };
    let h0 = random_eddy_field(grid, &gen, 2);
    let typed = matches!(
        integrate_day(
            &h0,
            &VelocityModel::FixedQg,
            &PhysicalParams::default(),
            &StepConfig::default(),
            &CGConfig::default(),
        ),
        Err(Error::CflExceeded { step: Some(1), .. })
    );

    // Default configuration (200x150, dt 600 s, 144 steps): every logged
    // Courant number stays within the limit.
    let sim = tmp.join("default");
    let (code, _, stderr) = qg(&[
        "simulate",
        "--out",
        sim.to_str().unwrap(),
        "--seed",
        "1",
        "--threads",
        "1",
    ]);
    assert_eq!(code, 0, "{stderr}");
    let diag = std::fs::read_to_string(sim.join("diagnostics.txt")).unwrap();
    let mut n_steps = 0;
    let mut max_courant = 0.0_f64;
    for line in diag.lines().skip(1) {
        let courant: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
        n_steps += 1;
        max_courant = max_courant.max(courant);
    }
    let within = n_steps == 144 && max_courant > 0.0 && max_courant <= 0.5;

    verdict(
        rejected && typed && within,
        &format!(
            "overspeed step rejected with numerical exit; default run logs 144 courants, max {max_courant:.3} <= 0.5"
        ),
    );
}

#[test]
fn a09_cli_rerun_with_same_config_and_seed_is_bit_identical() {
    let tmp = TempDir::new("determinism");
    let args = |out: &str| {
        vec![
            "generate".to_string(),
            "--out".to_string(),
            out.to_string(),
            "--seed".to_string(),
            "7".to_string(),
            "--threads".to_string(),
            "1".to_string(),
            "--override".to_string(),
            "grid.nx=32".to_string(),
            "--override".to_string(),
            "grid.ny=24".to_string(),
            "--override".to_string(),
            "step.n_steps=6".to_string(),
            "--override".to_string(),
            "generator.spinup_days=0".to_string(),
            "--override".to_string(),
            "generator.kappa=0.02".to_string(),
            "--override".to_string(),
            "generator.train_count=2".to_string(),
            "--override".to_string(),
            "generator.test_count=1".to_string(),
            "--override".to_string(),
            "generator.amp_max=0.2".to_string(),
            "--override".to_string(),
            "generator.radius_min=35000".to_string(),
            "--override".to_string(),
            "generator.radius_max=55000".to_string(),
        ]
    };
    let ds1 = tmp.join("ds1");
    let ds2 = tmp.join("ds2");
    for out in [&ds1, &ds2] {
        let a = args(out.to_str().unwrap());
        let refs: Vec<&str> = a.iter().map(|s| s.as_str()).collect();
        let (code, _, stderr) = qg(&refs);
        assert_eq!(code, 0, "{stderr}");
    }
    let read_all = |dir: &Path| {
        let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    std::fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        entries.sort_by(|x, y| x.0.cmp(&y.0));
        entries
    };
    let identical_generate = read_all(&ds1) == read_all(&ds2);

    // Second command family: simulate from one of the generated states.
    let sim_args = |out: &str| {
        vec![
            "simulate".to_string(),
            "--initial".to_string(),
            ds1.join("s000_h0.qga").to_str().unwrap().to_string(),
            "--out".to_string(),
            out.to_string(),
            "--threads".to_string(),
            "1".to_string(),
            "--override".to_string(),
            "grid.nx=32".to_string(),
            "--override".to_string(),
            "grid.ny=24".to_string(),
            "--override".to_string(),
            "step.n_steps=12".to_string(),
        ]
    };
    let sim1 = tmp.join("sim1");
    let sim2 = tmp.join("sim2");
    for out in [&sim1, &sim2] {
        let a = sim_args(out.to_str().unwrap());
        let refs: Vec<&str> = a.iter().map(|s| s.as_str()).collect();
        let (code, _, stderr) = qg(&refs);
        assert_eq!(code, 0, "{stderr}");
    }
    let identical_simulate = read_all(&sim1) == read_all(&sim2);

    verdict(
        identical_generate && identical_simulate,
        "generate and simulate reruns at --threads 1 are bit-identical across all output files",
    );
}

#[test]
fn a10_pv_inversion_round_trips_random_smooth_fields() {
    let grid = GridSpec::new(48, 36, 5500.0, 5500.0).unwrap();
    let p = PhysicalParams::default();
    let mut worst = 0.0_f64;
    for seed in [21_u64, 22, 23, 24, 25] {
        let h = gentle_eddies(grid, seed);
        let q = pv_from_ssh(&h, &p);
        let back = ssh_from_pv(&q, &h, &p, &CGConfig::default()).unwrap();
        worst = worst.max(back.linf_diff(&h) / max_abs(h.values()));
    }
    verdict(
        worst <= 1e-10,
        &format!("pv -> ssh inversion with exact guess: worst rel err {worst:.2e} <= 1e-10 over 5 fields"),
    );
}
