//! Differentiable quasi-geostrophic (QG) sea-surface-height forecasting.
//!
//! The crate provides a forward QG solver (potential-vorticity advection with
//! a truncated conjugate-gradient elliptic inversion) and reverse-mode
//! automatic differentiation through the unrolled time integration, so the
//! velocity-diagnosis stage can be trained end to end: either a 6-parameter
//! gradient filter or a small gated residual ConvNet.
//!
//! All numeric kernels are generic over [`Scalar`] (f32/f64 via num-traits);
//! the type aliases at the crate root fix the default f64 working precision.

pub mod autodiff;
pub mod dataio;
pub mod dynamics;
pub mod elliptic;
pub mod error;
pub mod field;
pub mod learnable;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// f64 grid geometry (default working precision).
pub type GridSpec = field::GridSpec<f64>;
/// f64 scalar field.
pub type Field2D = field::Field2D<f64>;
/// f64 stencil kernel.
pub type StencilKernel = field::StencilKernel<f64>;
/// f64 boundary policy.
pub type BoundaryPolicy = field::BoundaryPolicy<f64>;

/// f64 physical constants of the QG model.
pub type PhysicalParams = dynamics::PhysicalParams<f64>;
/// f64 time-stepping configuration.
pub type StepConfig = dynamics::StepConfig<f64>;
/// f64 prognostic state.
pub type ModelState = dynamics::ModelState<f64>;
/// f64 forecast result.
pub type Forecast = dynamics::Forecast<f64>;

/// f64 conjugate-gradient configuration.
pub type CGConfig = elliptic::CGConfig<f64>;
/// f64 Helmholtz operator.
pub type HelmholtzOperator = elliptic::HelmholtzOperator<f64>;

/// f64 reverse-mode tape.
pub type Tape = autodiff::Tape<f64>;
/// f64 parameter store.
pub type ParamStore = autodiff::ParamStore<f64>;
/// f64 named tensor.
pub type Tensor = autodiff::Tensor<f64>;

/// f64 velocity model.
pub type VelocityModel = learnable::VelocityModel<f64>;
/// f64 trainable gradient filter.
pub type GradientFilterParams = learnable::GradientFilterParams<f64>;
/// f64 gated residual ConvNet.
pub type ConvNetParams = learnable::ConvNetParams<f64>;

/// f64 supervised sample.
pub type BatchSample = training::BatchSample<f64>;
/// f64 loss composition.
pub type LossConfig = training::LossConfig<f64>;
/// f64 loss value split into terms.
pub type LossParts = training::LossParts<f64>;
/// f64 training configuration.
pub type OptimizerConfig = training::OptimizerConfig<f64>;
/// f64 training-run record.
pub type TrainReport = training::TrainReport<f64>;
/// f64 forecast-skill row.
pub type EvalRow = training::EvalRow<f64>;

/// f64 dataset manifest.
pub type DatasetManifest = dataio::DatasetManifest<f64>;
/// f64 on-disk sample record.
pub type SampleRecord = dataio::SampleRecord<f64>;
/// f64 synthetic-eddy generator settings.
pub type GeneratorConfig = dataio::GeneratorConfig<f64>;
/// f64 full dataset-generation configuration.
pub type SyntheticConfig = dataio::SyntheticConfig<f64>;
