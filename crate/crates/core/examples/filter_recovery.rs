//! End-to-end demo of the full pipeline: generate a synthetic eddy dataset
//! on disk, validate and load it back, train a perturbed gradient filter
//! toward the teacher, export the trained component and reread it, and
//! report forecast skill against the persistence baseline.
//!
//! Run with: cargo run -p qgdiff --example filter_recovery

use qgdiff::dataio::{
    export_component, generate_synthetic, import_component, GeneratorConfig, Role,
    SyntheticConfig,
};
use qgdiff::field::GridSpec;
use qgdiff::learnable::{GradientFilterParams, VelocityModel};
use qgdiff::training::{
    evaluate, median_rmse_by_model, total_loss_plain, train, Algorithm, LossConfig,
    OptimizerConfig,
};
use qgdiff::{CGConfig, PhysicalParams, StepConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = SyntheticConfig {
        grid: GridSpec::new(48, 36, 5500.0, 5500.0).unwrap(),
        physics: PhysicalParams::default(),
        step: StepConfig {
            n_steps: 12,
            ..StepConfig::default()
        },
        cg: CGConfig::default(),
        generator: GeneratorConfig {
            n_eddies_min: 2,
            n_eddies_max: 3,
            amp_min: 0.2,
            amp_max: 0.4,
            radius_min: 40_000.0,
            radius_max: 60_000.0,
            spinup_days: 1,
            kappa: 0.0,
            train_count: 3,
            test_count: 2,
            gap_days: 2,
        },
    };
    let dir = std::env::temp_dir().join(format!("qgdiff-demo-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let manifest = generate_synthetic(&cfg, 42, &dir).expect("dataset generation");
    manifest.validate(&dir).expect("dataset validation");
    let samples = manifest.load_role(&dir, Role::Train).expect("load train block");
    let held_out = manifest.load_role(&dir, Role::Test).expect("load test block");
    println!(
        "dataset: {} train + {} test samples in {}",
        samples.len(),
        held_out.len(),
        dir.display()
    );

    // Student: QG filter weights with a random perturbation.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut fp = GradientFilterParams::<f64>::qg_init();
    let mut w = fp.store().flatten_trainable();
    for v in w.iter_mut() {
        *v += 0.05 * (rng.random::<f64>() - 0.5);
    }
    fp.store_mut().unflatten_trainable(&w).unwrap();
    let mut student = VelocityModel::TrainableFilter(fp);

    let (p, step, cg) = (manifest.physics, manifest.step, manifest.cg);
    let loss_cfg = LossConfig {
        lambda_l2: 0.0,
        divergence_weight: 0.0,
        scale_by_target_variance: true,
    };
    let before = total_loss_plain(&student, &samples, &p, &step, &cg, &loss_cfg)
        .unwrap()
        .total;
    let opt = OptimizerConfig {
        algorithm: Algorithm::QuasiNewton,
        max_epochs: 60,
        ..OptimizerConfig::default()
    };
    let report = train(&mut student, &samples, &p, &step, &cg, &loss_cfg, &opt).unwrap();
    let after = total_loss_plain(&student, &samples, &p, &step, &cg, &loss_cfg)
        .unwrap()
        .total;

    println!("training loss: {before:.3e} -> {after:.3e} (converged: {})", report.converged);
    println!(
        "recovered filter weights: {:?}",
        report.final_params.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
    );

    // Persist the trained component and evaluate the reread copy on the
    // held-out block, against the fixed model.
    let component = dir.join("trained_filter.qgp");
    export_component(&student, &component).expect("component export");
    let reread = import_component::<f64>(&component).expect("component import");
    let fixed = VelocityModel::FixedQg;
    let rows = evaluate(
        &[("fixed-qg", &fixed), ("trained-filter", &reread)],
        &held_out,
        &p,
        &step,
        &cg,
    )
    .unwrap();
    println!("median held-out RMSE by model:");
    for (name, rmse) in median_rmse_by_model(&rows) {
        println!("  {name:>15}: {rmse:.3e}");
    }
}
