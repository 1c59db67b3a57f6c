//! Command implementations: each resolves the configuration, does its work,
//! and writes every output file through a staging directory that is renamed
//! into place only on success.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use qgdiff::dataio::{self, Role, MANIFEST_FILE};
use qgdiff::dynamics::{integrate_day, integrate_with};
use qgdiff::training::{
    dataset_input_stats, eval_rows_to_csv, evaluate, loss_grad_check, median_rmse_by_model, train,
    Algorithm,
};
use qgdiff::{
    BatchSample, ConvNetParams, DatasetManifest, Error, Field2D, GradientFilterParams, GridSpec,
    OptimizerConfig, Result, StepConfig, SyntheticConfig, VelocityModel,
};

use crate::config::{resolve, RawConfig, Resolved, RUN_FILE};
use crate::{Cli, Cmd};

pub fn run(cli: Cli) -> Result<ExitCode> {
    let mut raw = match &cli.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    for spec in &cli.overrides {
        raw.apply_override(spec)?;
    }
    let opt_default = match &cli.command {
        Cmd::TrainConvnet { .. } => OptimizerConfig {
            algorithm: Algorithm::AdaptiveMoment,
            lr: 1e-3,
            decay_factor: 0.1,
            decay_every: 100,
            max_epochs: 200,
            ..OptimizerConfig::default()
        },
        _ => OptimizerConfig::default(),
    };
    let res = resolve(raw, &opt_default, cli.seed, cli.threads)?;
    if res.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(res.threads)
            .build_global()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    }
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    match cli.command {
        Cmd::Simulate { initial, component } => cmd_simulate(&res, &out, initial, component),
        Cmd::Generate => cmd_generate(&res, &out),
        Cmd::TrainFilter { dataset, init_qg } => cmd_train_filter(&res, &out, &dataset, init_qg),
        Cmd::TrainConvnet { dataset } => cmd_train_convnet(&res, &out, &dataset),
        Cmd::Gradcheck => cmd_gradcheck(&res, &out),
        Cmd::Evaluate {
            dataset,
            component,
            role,
            no_fixed,
        } => cmd_evaluate(&res, &out, &dataset, component, &role, no_fixed),
    }
}

/// Runs `write` against a hidden sibling staging directory, then renames it
/// to `out` in one step, so an interrupted or failed command leaves no
/// partial outputs behind. `out` itself must not exist yet.
fn staged<F>(out: &Path, write: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    if out.exists() {
        return Err(Error::Config(format!(
            "output path {} already exists",
            out.display()
        )));
    }
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("bad output path {}", out.display())))?;
    let stage = out.with_file_name(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    if stage.exists() {
        std::fs::remove_dir_all(&stage)?;
    }
    std::fs::create_dir_all(&stage)?;
    let result = write(&stage).and_then(|()| {
        std::fs::rename(&stage, out)?;
        Ok(())
    });
    if result.is_err() {
        let _ = std::fs::remove_dir_all(&stage);
    }
    result
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_generate(res: &Resolved, out: &Path) -> Result<ExitCode> {
    let cfg = SyntheticConfig {
        grid: res.grid,
        physics: res.physics,
        step: res.step,
        cg: res.cg,
        generator: res.generator,
    };
    let mut counts = (0usize, 0usize);
    staged(out, |stage| {
        let manifest = dataio::generate_synthetic(&cfg, res.seed, stage)?;
        counts = (
            manifest.role_records(Role::Train).count(),
            manifest.role_records(Role::Test).count(),
        );
        write_text(&stage.join(RUN_FILE), &res.to_text("generate", &[]))
    })?;
    println!(
        "generated {} train + {} test samples in {}",
        counts.0,
        counts.1,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(
    res: &Resolved,
    out: &Path,
    initial: Option<PathBuf>,
    component: Option<PathBuf>,
) -> Result<ExitCode> {
    let h0 = match &initial {
        Some(path) => dataio::load_field(path, res.grid.dx, res.grid.dy)?,
        None => dataio::random_eddy_field(res.grid, &res.generator, res.seed),
    };
    let model = match &component {
        Some(path) => dataio::import_component(path)?,
        None => VelocityModel::FixedQg,
    };
    // The velocity closure sees the pre-step state, so collecting there plus
    // the final state yields the full trajectory h_0..h_n.
    let mut frames: Vec<Field2D> = Vec::new();
    let fc = integrate_with(
        &h0,
        |h, p| {
            frames.push(h.clone());
            model.velocities(h, p)
        },
        &res.physics,
        &res.step,
        &res.cg,
    )?;
    frames.push(fc.h.clone());
    let max_courant = fc.steps.iter().map(|s| s.courant).fold(0.0f64, f64::max);

    let mut diag = String::from("step courant cg_iterations cg_residuals\n");
    for (i, s) in fc.steps.iter().enumerate() {
        let residuals: Vec<String> = s.cg_residuals.iter().map(|r| format!("{r:?}")).collect();
        diag.push_str(&format!(
            "{} {:?} {} {}\n",
            i + 1,
            s.courant,
            s.cg_iterations,
            residuals.join(";")
        ));
    }

    let extras = [
        (
            "initial",
            initial
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "random-eddy".to_string()),
        ),
        (
            "component",
            component
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "fixed-qg".to_string()),
        ),
    ];
    staged(out, |stage| {
        dataio::save_sequence(&frames, &stage.join("forecast.qga"))?;
        dataio::save_field(&fc.h, &stage.join("final.qga"))?;
        dataio::save_field_csv(&fc.h, &stage.join("final.csv"))?;
        write_text(&stage.join("diagnostics.txt"), &diag)?;
        write_text(&stage.join(RUN_FILE), &res.to_text("simulate", &extras))
    })?;
    println!(
        "integrated {} steps with {}; max courant {:?} (limit {:?})",
        fc.steps.len(),
        model.name(),
        max_courant,
        res.step.cfl_max
    );
    Ok(ExitCode::SUCCESS)
}

fn load_dataset(dir: &Path, role: Role) -> Result<(DatasetManifest, Vec<BatchSample>)> {
    let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
    manifest.validate(dir)?;
    let samples = manifest.load_role(dir, role)?;
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "no {} samples in {}",
            role.as_str(),
            dir.display()
        )));
    }
    Ok((manifest, samples))
}

/// Trains `model` on the dataset's own physics/step/cg (the data were made
/// under them; diverging here would train against a different dynamical
/// system than the one that produced the targets), stages the component and
/// report, and returns the trained model for command-specific printing.
fn run_training(
    res: &Resolved,
    out: &Path,
    command: &str,
    mut model: VelocityModel,
    extras: &[(&str, String)],
    manifest: &DatasetManifest,
    samples: &[BatchSample],
) -> Result<VelocityModel> {
    let report = train(
        &mut model,
        samples,
        &manifest.physics,
        &manifest.step,
        &manifest.cg,
        &res.loss,
        &res.optimizer,
    )?;
    staged(out, |stage| {
        dataio::export_component(&model, &stage.join("component.qgp"))?;
        write_text(&stage.join("report.txt"), &report.to_text())?;
        write_text(&stage.join(RUN_FILE), &res.to_text(command, extras))
    })?;
    let last = report.epochs.last();
    println!(
        "trained {} on {} samples: {} epochs, converged: {}, final loss {:?}",
        model.name(),
        samples.len(),
        last.map(|e| e.epoch).unwrap_or(0),
        report.converged,
        last.map(|e| e.loss).unwrap_or(f64::NAN)
    );
    Ok(model)
}

fn cmd_train_filter(res: &Resolved, out: &Path, dataset: &Path, init_qg: bool) -> Result<ExitCode> {
    let (manifest, samples) = load_dataset(dataset, Role::Train)?;
    let fp = if init_qg {
        GradientFilterParams::qg_init()
    } else {
        GradientFilterParams::random_init(res.seed, 0.3)
    };
    let extras = [
        ("dataset", dataset.display().to_string()),
        ("init", if init_qg { "qg" } else { "random" }.to_string()),
    ];
    let model = run_training(
        res,
        out,
        "train-filter",
        VelocityModel::TrainableFilter(fp),
        &extras,
        &manifest,
        &samples,
    )?;
    if let VelocityModel::TrainableFilter(fp) = &model {
        println!("filter weights: {:?}", fp.weights().data());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train_convnet(res: &Resolved, out: &Path, dataset: &Path) -> Result<ExitCode> {
    let (manifest, samples) = load_dataset(dataset, Role::Train)?;
    let mut cp = ConvNetParams::new(res.seed);
    let (mean, std) = dataset_input_stats(&samples)?;
    cp.set_input_normalization(mean, std)?;
    let model = VelocityModel::QgPlusConvNet(cp);
    println!("trainable parameters: {}", model.trainable_len());
    let extras = [("dataset", dataset.display().to_string())];
    run_training(
        res,
        out,
        "train-convnet",
        model,
        &extras,
        &manifest,
        &samples,
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(res: &Resolved, out: &Path) -> Result<ExitCode> {
    let gc = &res.gradcheck;
    let grid = GridSpec::new(gc.nx, gc.ny, res.grid.dx, res.grid.dy)?;
    let step = StepConfig {
        n_steps: gc.n_steps,
        ..res.step
    };
    // Self-contained teacher problem: a few gentle eddies sized to this
    // grid, so the check grid can be much smaller than the run grid without
    // tripping the CFL guard.
    let l = (grid.dx * (grid.nx - 1) as f64).min(grid.dy * (grid.ny - 1) as f64);
    let teacher = qgdiff::GeneratorConfig {
        n_eddies_min: 2,
        n_eddies_max: 3,
        amp_min: 0.05,
        amp_max: 0.15,
        radius_min: 0.20 * l,
        radius_max: 0.35 * l,
        ..res.generator
    };
    let mut samples = Vec::with_capacity(gc.samples);
    for i in 0..gc.samples {
        let h0 = dataio::random_eddy_field(grid, &teacher, res.seed.wrapping_add(i as u64));
        let target = integrate_day(&h0, &VelocityModel::FixedQg, &res.physics, &step, &res.cg)?.h;
        let (_, sigma) = target.mean_std();
        samples.push(BatchSample {
            id: format!("g{i:03}"),
            h0,
            target,
            sigma,
        });
    }
    let (model, indices) = if gc.convnet {
        let mut cp = ConvNetParams::new(res.seed);
        let (mean, std) = dataset_input_stats(&samples)?;
        cp.set_input_normalization(mean, std)?;
        // At gate zero every upstream weight has an exactly zero gradient;
        // open it slightly so the check exercises the whole network.
        cp.set_gate(0.05);
        let model = VelocityModel::QgPlusConvNet(cp);
        let n = model.trainable_len();
        // Checking all 2545 components is slow; a strided subset plus the
        // gate (last index) covers every tensor.
        let mut idx: Vec<usize> = (0..n).step_by((n / 24).max(1)).collect();
        if idx.last() != Some(&(n - 1)) {
            idx.push(n - 1);
        }
        (model, Some(idx))
    } else {
        let fp = GradientFilterParams::random_init(res.seed, 0.3);
        (VelocityModel::TrainableFilter(fp), None)
    };
    let report = loss_grad_check(
        &model,
        &samples,
        &res.physics,
        &step,
        &res.cg,
        &res.loss,
        indices.as_deref(),
        gc.eps,
        gc.tol,
    )?;
    staged(out, |stage| {
        write_text(&stage.join("gradcheck.txt"), &report.to_text())?;
        write_text(&stage.join(RUN_FILE), &res.to_text("gradcheck", &[]))
    })?;
    println!(
        "checked {} of {} components: max rel err {:e} (tol {:e}) -> {}",
        report.entries.len(),
        model.trainable_len(),
        report.max_rel_err,
        report.tol,
        if report.pass { "PASS" } else { "FAIL" }
    );
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    })
}

fn cmd_evaluate(
    res: &Resolved,
    out: &Path,
    dataset: &Path,
    component: Option<PathBuf>,
    role: &str,
    no_fixed: bool,
) -> Result<ExitCode> {
    let role = Role::parse(role)
        .map_err(|_| Error::Config(format!("role must be train or test, got '{role}'")))?;
    let (manifest, samples) = load_dataset(dataset, role)?;
    let imported = component
        .as_ref()
        .map(|p| dataio::import_component(p))
        .transpose()?;
    let fixed = VelocityModel::FixedQg;
    let mut models: Vec<(&str, &VelocityModel)> = Vec::new();
    if !no_fixed {
        models.push((fixed.name(), &fixed));
    }
    if let Some(m) = &imported {
        models.push((m.name(), m));
    }
    let rows = evaluate(
        &models,
        &samples,
        &manifest.physics,
        &manifest.step,
        &manifest.cg,
    )?;
    let extras = [
        ("dataset", dataset.display().to_string()),
        (
            "component",
            component
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".to_string()),
        ),
        ("role", role.as_str().to_string()),
    ];
    staged(out, |stage| {
        write_text(&stage.join("rmse.csv"), &eval_rows_to_csv(&rows))?;
        write_text(&stage.join(RUN_FILE), &res.to_text("evaluate", &extras))
    })?;
    println!("{} samples ({})", samples.len(), role.as_str());
    for (name, rmse) in median_rmse_by_model(&rows) {
        println!("{name}: median rmse {rmse:e}");
    }
    Ok(ExitCode::SUCCESS)
}
