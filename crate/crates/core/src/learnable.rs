//! Learnable velocity components: the 6-weight gradient filter and the
//! gated residual ConvNet, each usable untraced (inference) or on a tape
//! (training). The untraced and traced forward passes share the same
//! kernels, so they agree bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::stack::{self, BnStats, ChannelStack};
use crate::autodiff::tape::{effective_kernel, Tape, TracedField, TracedScalar, TracedTensor};
use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::dynamics::{geostrophic_velocities, qg_filter_weights, PhysicalParams};
use crate::error::{Error, Result};
use crate::field::{convolve, BoundaryPolicy, Field2D};
use crate::scalar::{lit, Scalar};

/// Trainable 2x3 gradient filter. Applied directly for d/dx and transposed
/// for d/dy, each normalized by the grid spacing, exactly like the fixed
/// geostrophic filter it generalizes.
#[derive(Debug, Clone)]
pub struct GradientFilterParams<T: Scalar> {
    store: ParamStore<T>,
    filter: ParamId,
}

impl<T: Scalar> GradientFilterParams<T> {
    pub fn from_weights(weights: &[T]) -> Result<Self> {
        let mut store = ParamStore::new();
        let filter = store.add("filter", Tensor::from_vec(&[2, 3], weights.to_vec())?, true);
        Ok(GradientFilterParams { store, filter })
    }

    /// The fixed geostrophic filter as a starting point.
    pub fn qg_init() -> Self {
        Self::from_weights(&qg_filter_weights::<T>()).expect("static weights")
    }

    /// Uniform random weights in [-spread, spread].
    pub fn random_init(seed: u64, spread: T) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = crate::scalar::to_f64(spread);
        let w: Vec<T> = (0..6).map(|_| lit(rng.random_range(-lo..lo))).collect();
        Self::from_weights(&w).expect("random weights are finite")
    }

    pub fn weights(&self) -> &Tensor<T> {
        self.store.value(self.filter)
    }

    pub fn filter_id(&self) -> ParamId {
        self.filter
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Largest absolute difference from the fixed geostrophic filter.
    pub fn linf_to_qg(&self) -> T {
        let qg = qg_filter_weights::<T>();
        self.weights()
            .data()
            .iter()
            .zip(qg.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, d| m.max(d))
    }
}

/// Batch-norm hyperparameters shared by both normalization layers.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.01;
const HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy)]
struct ConvNetIds {
    conv1: ParamId,
    bn1_scale: ParamId,
    bn1_shift: ParamId,
    conv2: ParamId,
    bn2_scale: ParamId,
    bn2_shift: ParamId,
    out_w: ParamId,
    gate: ParamId,
    bn1_mean: ParamId,
    bn1_var: ParamId,
    bn2_mean: ParamId,
    bn2_var: ParamId,
    input_mean: ParamId,
    input_std: ParamId,
}

/// Gated residual ConvNet correcting the geostrophic velocities:
/// standardized SSH -> conv 3x3 (16) -> BN -> leaky ReLU -> conv 3x3 (16)
/// -> BN -> leaky ReLU -> conv 1x1 (2) -> gate * (du, dv). All convolutions
/// are bias-free; the batch-norm shifts provide the offsets. The gate
/// starts at exactly zero, so an untrained network is the identity
/// correction.
#[derive(Debug, Clone)]
pub struct ConvNetParams<T: Scalar> {
    store: ParamStore<T>,
    ids: ConvNetIds,
    pub bn_eps: T,
    pub bn_momentum: T,
    pub leaky_slope: T,
}

impl<T: Scalar> ConvNetParams<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let he_uniform = |rng: &mut ChaCha8Rng, shape: &[usize]| -> Tensor<T> {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = lit(rng.random_range(-bound..bound));
            }
            t
        };
        let ones = |n: usize| {
            let mut t = Tensor::zeros(&[n]);
            t.fill(T::one());
            t
        };
        let conv1 = store.add("conv1.weight", he_uniform(&mut rng, &[HIDDEN, 1, 3, 3]), true);
        let bn1_scale = store.add("bn1.scale", ones(HIDDEN), true);
        let bn1_shift = store.add("bn1.shift", Tensor::zeros(&[HIDDEN]), true);
        let conv2 = store.add(
            "conv2.weight",
            he_uniform(&mut rng, &[HIDDEN, HIDDEN, 3, 3]),
            true,
        );
        let bn2_scale = store.add("bn2.scale", ones(HIDDEN), true);
        let bn2_shift = store.add("bn2.shift", Tensor::zeros(&[HIDDEN]), true);
        let out_w = store.add("out.weight", he_uniform(&mut rng, &[2, HIDDEN, 1, 1]), true);
        let gate = store.add("gate", Tensor::scalar(T::zero()), true);
        let bn1_mean = store.add("bn1.running_mean", Tensor::zeros(&[HIDDEN]), false);
        let bn1_var = store.add("bn1.running_var", ones(HIDDEN), false);
        let bn2_mean = store.add("bn2.running_mean", Tensor::zeros(&[HIDDEN]), false);
        let bn2_var = store.add("bn2.running_var", ones(HIDDEN), false);
        let input_mean = store.add("input.mean", Tensor::scalar(T::zero()), false);
        let input_std = store.add("input.std", Tensor::scalar(T::one()), false);
        ConvNetParams {
            store,
            ids: ConvNetIds {
                conv1,
                bn1_scale,
                bn1_shift,
                conv2,
                bn2_scale,
                bn2_shift,
                out_w,
                gate,
                bn1_mean,
                bn1_var,
                bn2_mean,
                bn2_var,
                input_mean,
                input_std,
            },
            bn_eps: lit(BN_EPS),
            bn_momentum: lit(BN_MOMENTUM),
            leaky_slope: lit(LEAKY_SLOPE),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn gate(&self) -> T {
        self.store.value(self.ids.gate).item()
    }

    pub fn set_gate(&mut self, v: T) {
        self.store.value_mut(self.ids.gate).data_mut()[0] = v;
    }

    /// Dataset statistics used to standardize the SSH input.
    pub fn set_input_normalization(&mut self, mean: T, std: T) -> Result<()> {
        if std <= T::zero() || !std.is_finite() || !mean.is_finite() {
            return Err(Error::Config(format!(
                "input normalization needs finite mean and positive std, got ({mean}, {std})"
            )));
        }
        self.store.value_mut(self.ids.input_mean).data_mut()[0] = mean;
        self.store.value_mut(self.ids.input_std).data_mut()[0] = std;
        Ok(())
    }

    pub fn input_normalization(&self) -> (T, T) {
        (
            self.store.value(self.ids.input_mean).item(),
            self.store.value(self.ids.input_std).item(),
        )
    }

    /// Folds freshly computed batch statistics into the running estimates:
    /// running <- (1 - momentum) * running + momentum * batch.
    pub fn update_running_stats(&mut self, stats: &[BnStats<T>]) {
        debug_assert_eq!(stats.len(), 2);
        let m = self.bn_momentum;
        let one_m = T::one() - m;
        for (st, (mid, vid)) in stats.iter().zip([
            (self.ids.bn1_mean, self.ids.bn1_var),
            (self.ids.bn2_mean, self.ids.bn2_var),
        ]) {
            if !st.from_batch {
                continue;
            }
            let rm = self.store.value_mut(mid).data_mut();
            for (r, &b) in rm.iter_mut().zip(st.mean.iter()) {
                *r = one_m * *r + m * b;
            }
            let rv = self.store.value_mut(vid).data_mut();
            for (r, &b) in rv.iter_mut().zip(st.var.iter()) {
                *r = one_m * *r + m * b;
            }
        }
    }

    /// The residual correction stack (du, dv), before the gate. Inference
    /// mode: normalization uses the running statistics.
    pub fn correction(&self, h: &Field2D<T>) -> Result<ChannelStack<T>> {
        let (mean, std) = self.input_normalization();
        let s0 = ChannelStack::standardized_from_field(h, mean, std);
        let c1 = stack::conv2d(&s0, self.store.value(self.ids.conv1))?;
        let (b1, _) = stack::batchnorm_forward(
            &c1,
            self.store.value(self.ids.bn1_scale),
            self.store.value(self.ids.bn1_shift),
            self.store.value(self.ids.bn1_mean),
            self.store.value(self.ids.bn1_var),
            self.bn_eps,
            false,
        )?;
        let a1 = stack::leaky_relu(&b1, self.leaky_slope);
        let c2 = stack::conv2d(&a1, self.store.value(self.ids.conv2))?;
        let (b2, _) = stack::batchnorm_forward(
            &c2,
            self.store.value(self.ids.bn2_scale),
            self.store.value(self.ids.bn2_shift),
            self.store.value(self.ids.bn2_mean),
            self.store.value(self.ids.bn2_var),
            self.bn_eps,
            false,
        )?;
        let a2 = stack::leaky_relu(&b2, self.leaky_slope);
        stack::conv2d(&a2, self.store.value(self.ids.out_w))
    }
}

/// Velocity model used by the integrator.
#[derive(Debug, Clone)]
pub enum VelocityModel<T: Scalar> {
    /// Fixed geostrophic velocities from the 2x3 QG filter.
    FixedQg,
    /// Geostrophic velocities through a trainable gradient filter.
    TrainableFilter(GradientFilterParams<T>),
    /// Geostrophic velocities plus a gated ConvNet correction.
    QgPlusConvNet(ConvNetParams<T>),
}

impl<T: Scalar> VelocityModel<T> {
    pub fn name(&self) -> &'static str {
        match self {
            VelocityModel::FixedQg => "fixed-qg",
            VelocityModel::TrainableFilter(_) => "trained-filter",
            VelocityModel::QgPlusConvNet(_) => "qg-convnet",
        }
    }

    /// Untraced velocity diagnosis (U, V) from SSH.
    pub fn velocities(
        &self,
        h: &Field2D<T>,
        p: &PhysicalParams<T>,
    ) -> Result<(Field2D<T>, Field2D<T>)> {
        match self {
            VelocityModel::FixedQg => Ok(geostrophic_velocities(h, p)),
            VelocityModel::TrainableFilter(fp) => {
                velocities_from_filter(h, p, fp.weights())
            }
            VelocityModel::QgPlusConvNet(cp) => {
                let (ug, vg) = geostrophic_velocities(h, p);
                let delta = cp.correction(h)?;
                let gate = cp.gate();
                let du = delta.channel_to_field(0, &h.grid())?;
                let dv = delta.channel_to_field(1, &h.grid())?;
                Ok((ug.add(&du.scale(gate)), vg.add(&dv.scale(gate))))
            }
        }
    }

    /// Number of trainable scalar parameters.
    pub fn trainable_len(&self) -> usize {
        match self {
            VelocityModel::FixedQg => 0,
            VelocityModel::TrainableFilter(fp) => fp.store.trainable_len(),
            VelocityModel::QgPlusConvNet(cp) => cp.store.trainable_len(),
        }
    }

    /// The parameter store, absent for the parameter-free model.
    pub fn store(&self) -> Option<&ParamStore<T>> {
        match self {
            VelocityModel::FixedQg => None,
            VelocityModel::TrainableFilter(fp) => Some(fp.store()),
            VelocityModel::QgPlusConvNet(cp) => Some(cp.store()),
        }
    }

    /// Mutable access to the parameter store, absent for the parameter-free
    /// model.
    pub fn store_mut(&mut self) -> Option<&mut ParamStore<T>> {
        match self {
            VelocityModel::FixedQg => None,
            VelocityModel::TrainableFilter(fp) => Some(fp.store_mut()),
            VelocityModel::QgPlusConvNet(cp) => Some(cp.store_mut()),
        }
    }

    /// Records this model's parameter leaves on a tape. `train_bn` selects
    /// batch statistics (training) over running statistics (inference) in
    /// the ConvNet's normalization layers.
    pub fn trace<'m>(
        &'m self,
        tape: &Tape<T>,
        train_bn: bool,
    ) -> TracedVelocityModel<'m, T> {
        match self {
            VelocityModel::FixedQg => TracedVelocityModel::FixedQg,
            VelocityModel::TrainableFilter(fp) => TracedVelocityModel::TrainableFilter {
                kernel: tape.param_tensor(&fp.store, fp.filter),
            },
            VelocityModel::QgPlusConvNet(cp) => TracedVelocityModel::QgPlusConvNet {
                model: cp,
                w1: tape.param_tensor(&cp.store, cp.ids.conv1),
                sc1: tape.param_tensor(&cp.store, cp.ids.bn1_scale),
                sh1: tape.param_tensor(&cp.store, cp.ids.bn1_shift),
                w2: tape.param_tensor(&cp.store, cp.ids.conv2),
                sc2: tape.param_tensor(&cp.store, cp.ids.bn2_scale),
                sh2: tape.param_tensor(&cp.store, cp.ids.bn2_shift),
                wo: tape.param_tensor(&cp.store, cp.ids.out_w),
                gate: tape
                    .param_scalar(&cp.store, cp.ids.gate)
                    .expect("gate is rank 0"),
                train_bn,
            },
        }
    }
}

/// Velocities from a 2x3 filter tensor: the kernel is applied as-is for
/// d/dx (over dx) and transposed for d/dy (over dy).
fn velocities_from_filter<T: Scalar>(
    h: &Field2D<T>,
    p: &PhysicalParams<T>,
    filter: &Tensor<T>,
) -> Result<(Field2D<T>, Field2D<T>)> {
    let g = h.grid();
    let gf = p.g / p.f;
    let kx = effective_kernel(filter, false, g.dx)?;
    let ky = effective_kernel(filter, true, g.dy)?;
    let dhdx = convolve(h, &kx, BoundaryPolicy::Replicate)?;
    let dhdy = convolve(h, &ky, BoundaryPolicy::Replicate)?;
    Ok((dhdy.scale(-gf), dhdx.scale(gf)))
}

/// Model parameters as leaves on one tape. Create once per tape so every
/// time step shares the same leaves and gradients accumulate across steps.
#[allow(clippy::large_enum_variant)] // transient, one per reverse sweep
pub enum TracedVelocityModel<'m, T: Scalar> {
    FixedQg,
    TrainableFilter {
        kernel: TracedTensor<T>,
    },
    QgPlusConvNet {
        model: &'m ConvNetParams<T>,
        w1: TracedTensor<T>,
        sc1: TracedTensor<T>,
        sh1: TracedTensor<T>,
        w2: TracedTensor<T>,
        sc2: TracedTensor<T>,
        sh2: TracedTensor<T>,
        wo: TracedTensor<T>,
        gate: TracedScalar<T>,
        train_bn: bool,
    },
}

impl<T: Scalar> TracedVelocityModel<'_, T> {
    /// Traced velocity diagnosis. Returns (U, V) plus any batch-norm
    /// statistics computed on the way (two per call for the ConvNet in
    /// training mode), for running-average updates by the caller.
    #[allow(clippy::type_complexity)]
    pub fn velocities(
        &self,
        tape: &Tape<T>,
        h: &TracedField<T>,
        p: &PhysicalParams<T>,
    ) -> Result<(TracedField<T>, TracedField<T>, Vec<BnStats<T>>)> {
        let g = h.field().grid();
        let gf = p.g / p.f;
        match self {
            TracedVelocityModel::FixedQg => {
                let (u, v) = traced_geostrophic(tape, h, p)?;
                Ok((u, v, Vec::new()))
            }
            TracedVelocityModel::TrainableFilter { kernel } => {
                let dhdx =
                    tape.convolve_param(h, kernel, false, g.dx, BoundaryPolicy::Replicate)?;
                let dhdy =
                    tape.convolve_param(h, kernel, true, g.dy, BoundaryPolicy::Replicate)?;
                Ok((
                    tape.scale(&dhdy, -gf)?,
                    tape.scale(&dhdx, gf)?,
                    Vec::new(),
                ))
            }
            TracedVelocityModel::QgPlusConvNet {
                model,
                w1,
                sc1,
                sh1,
                w2,
                sc2,
                sh2,
                wo,
                gate,
                train_bn,
            } => {
                let (ug, vg) = traced_geostrophic(tape, h, p)?;
                let (mean, std) = model.input_normalization();
                let s0 = tape.field_to_stack(h, mean, std)?;
                let c1 = tape.conv2d(&s0, w1)?;
                let (b1, st1) = tape.batch_norm(
                    &c1,
                    sc1,
                    sh1,
                    (
                        model.store.value(model.ids.bn1_mean),
                        model.store.value(model.ids.bn1_var),
                    ),
                    model.bn_eps,
                    *train_bn,
                )?;
                let a1 = tape.leaky_relu(&b1, model.leaky_slope)?;
                let c2 = tape.conv2d(&a1, w2)?;
                let (b2, st2) = tape.batch_norm(
                    &c2,
                    sc2,
                    sh2,
                    (
                        model.store.value(model.ids.bn2_mean),
                        model.store.value(model.ids.bn2_var),
                    ),
                    model.bn_eps,
                    *train_bn,
                )?;
                let a2 = tape.leaky_relu(&b2, model.leaky_slope)?;
                let out = tape.conv2d(&a2, wo)?;
                let du = tape.channel_to_field(&out, 0, &g)?;
                let dv = tape.channel_to_field(&out, 1, &g)?;
                let u = tape.add(&ug, &tape.mul_sf(gate, &du)?)?;
                let v = tape.add(&vg, &tape.mul_sf(gate, &dv)?)?;
                Ok((u, v, vec![st1, st2]))
            }
        }
    }

    /// Sum of squared trainable parameters on the tape (L2 penalty term).
    pub fn l2_term(&self, tape: &Tape<T>) -> Result<Option<TracedScalar<T>>> {
        match self {
            TracedVelocityModel::FixedQg => Ok(None),
            TracedVelocityModel::TrainableFilter { kernel } => {
                Ok(Some(tape.sum_squares_tensor(kernel)?))
            }
            TracedVelocityModel::QgPlusConvNet {
                w1,
                sc1,
                sh1,
                w2,
                sc2,
                sh2,
                wo,
                gate,
                ..
            } => {
                let mut acc = tape.sum_squares_tensor(w1)?;
                for t in [sc1, sh1, w2, sc2, sh2, wo] {
                    acc = tape.add_s(&acc, &tape.sum_squares_tensor(t)?)?;
                }
                let g2 = tape.mul_s(gate, gate)?;
                Ok(Some(tape.add_s(&acc, &g2)?))
            }
        }
    }
}

/// Traced twin of `dynamics::geostrophic_velocities` (same kernels, same
/// order of operations).
fn traced_geostrophic<T: Scalar>(
    tape: &Tape<T>,
    h: &TracedField<T>,
    p: &PhysicalParams<T>,
) -> Result<(TracedField<T>, TracedField<T>)> {
    let g = h.field().grid();
    let gf = p.g / p.f;
    let dhdx = tape.convolve(
        h,
        &crate::dynamics::qg_kernel_x(g.dx),
        BoundaryPolicy::Replicate,
    )?;
    let dhdy = tape.convolve(
        h,
        &crate::dynamics::qg_kernel_y(g.dy),
        BoundaryPolicy::Replicate,
    )?;
    Ok((tape.scale(&dhdy, -gf)?, tape.scale(&dhdx, gf)?))
}
