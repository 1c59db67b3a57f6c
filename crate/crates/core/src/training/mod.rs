//! End-to-end training through the unrolled solver: batched losses, exact
//! reverse-mode gradients (whole-tape, parallel per-sample, and checkpointed
//! re-tracing for long horizons), optimizer drivers, and forecast-skill
//! evaluation.
//!
//! The plain loss folds here are arithmetic twins of the taped ones in
//! [`trace`]: same operation order, same reductions, so a value computed
//! either way is bit-identical and line searches can use the cheap path.

pub mod optim;
pub mod trace;

use std::time::Instant;

use rayon::prelude::*;

use crate::autodiff::{BnStats, GradValue, NodeId, ParamStore, Tape, TracedField, TracedScalar};
use crate::autodiff::gradcheck::{GradCheckEntry, GradCheckReport};
use crate::dynamics::{integrate_day, PhysicalParams, StepConfig};
use crate::elliptic::CGConfig;
use crate::error::{Error, Result};
use crate::field::{convolve, BoundaryPolicy, Field2D, StencilKernel};
use crate::learnable::{TracedVelocityModel, VelocityModel};
use crate::scalar::{lit, to_f64, Scalar};

pub use optim::{
    decayed_lr, lbfgs_minimize, sgd_step, AcceptedStep, AdamState, LbfgsConfig, LbfgsRun,
    LossParts, Objective,
};
pub use trace::{traced_forecast, traced_steps, TracedForecast, TracedSegment};

/// One supervised pair: initial SSH, the SSH to hit after the configured
/// horizon, and the per-sample scale used to normalize the error.
#[derive(Debug, Clone)]
pub struct BatchSample<T: Scalar> {
    pub id: String,
    pub h0: Field2D<T>,
    pub target: Field2D<T>,
    /// Target standard deviation (or any positive scale); errors are divided
    /// by it before squaring so samples with different energy weigh equally.
    pub sigma: T,
}

impl<T: Scalar> BatchSample<T> {
    pub fn validate(&self) -> Result<()> {
        if self.h0.grid() != self.target.grid() {
            return Err(Error::Dimension(format!(
                "sample {}: initial and target grids differ",
                self.id
            )));
        }
        if !(self.sigma > T::zero()) || !self.sigma.is_finite() {
            return Err(Error::Data(format!(
                "sample {}: sigma must be positive and finite, got {}",
                self.id, self.sigma
            )));
        }
        Ok(())
    }
}

/// Validates a batch: non-empty, each sample well-formed, one common grid.
pub fn validate_batch<T: Scalar>(samples: &[BatchSample<T>]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    for s in samples {
        s.validate()?;
        if s.h0.grid() != first.h0.grid() {
            return Err(Error::Dimension(format!(
                "sample {}: grid differs from sample {}",
                s.id, first.id
            )));
        }
    }
    Ok(())
}

/// Loss composition: mean over samples of (scaled MSE + divergence_weight *
/// first-step divergence penalty), plus lambda_l2 * sum of squared trainable
/// parameters.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig<T: Scalar> {
    pub lambda_l2: T,
    pub divergence_weight: T,
    /// When false the per-sample sigma is replaced by 1 (raw MSE).
    pub scale_by_target_variance: bool,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig {
            lambda_l2: lit(1e-3),
            divergence_weight: T::one(),
            scale_by_target_variance: true,
        }
    }
}

impl<T: Scalar> LossConfig<T> {
    /// Scaled MSE alone: no divergence penalty, no parameter penalty.
    pub fn mse_only() -> Self {
        LossConfig {
            lambda_l2: T::zero(),
            divergence_weight: T::zero(),
            scale_by_target_variance: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_l2 < T::zero() || !self.lambda_l2.is_finite() {
            return Err(Error::Config(format!(
                "lambda_l2 must be finite and non-negative, got {}",
                self.lambda_l2
            )));
        }
        if self.divergence_weight < T::zero() || !self.divergence_weight.is_finite() {
            return Err(Error::Config(format!(
                "divergence_weight must be finite and non-negative, got {}",
                self.divergence_weight
            )));
        }
        Ok(())
    }

    fn effective_sigma(&self, sample: &BatchSample<T>) -> T {
        if self.scale_by_target_variance {
            sample.sigma
        } else {
            T::one()
        }
    }
}

/// Mean over cells of ((target - pred) / sigma)^2. Twin of
/// [`trace::traced_forecast_mse`].
pub fn forecast_mse<T: Scalar>(
    pred: &Field2D<T>,
    target: &Field2D<T>,
    sigma: T,
) -> Result<T> {
    if pred.grid() != target.grid() {
        return Err(Error::Dimension(
            "prediction and target grids differ".into(),
        ));
    }
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return Err(Error::Data(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    let inv_sigma = T::one() / sigma;
    let s = target.sub(pred).scale(inv_sigma);
    Ok(s.mul(&s).mean())
}

/// Squared 2-norm of the interior horizontal divergence dU/dx + dV/dy.
/// Twin of [`trace::traced_divergence_penalty`].
pub fn divergence_penalty<T: Scalar>(u: &Field2D<T>, v: &Field2D<T>) -> Result<T> {
    let g = u.grid();
    let gx = convolve(u, &StencilKernel::centered_x(g.dx), BoundaryPolicy::Replicate)?;
    let gy = convolve(v, &StencilKernel::centered_y(g.dy), BoundaryPolicy::Replicate)?;
    let d = gx.add(&gy).masked_interior();
    Ok(d.dot(&d))
}

/// Sum of squared trainable parameters, folded per tensor then across
/// tensors in store order. Twin of the taped `l2_term` chain.
pub fn l2_sum<T: Scalar>(store: &ParamStore<T>) -> T {
    let mut acc: Option<T> = None;
    for e in store.entries().iter().filter(|e| e.trainable) {
        let ssq = e
            .value
            .data()
            .iter()
            .fold(T::zero(), |a, &x| a + x * x);
        acc = Some(match acc {
            Some(a) => a + ssq,
            None => ssq,
        });
    }
    acc.unwrap_or_else(T::zero)
}

/// Per-sample loss term s = mse + divergence_weight * penalty, with the
/// untraced solver. Returns (s, mse, penalty).
fn sample_loss_plain<T: Scalar>(
    model: &VelocityModel<T>,
    sample: &BatchSample<T>,
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
    loss_cfg: &LossConfig<T>,
) -> Result<(T, T, T)> {
    let fc = integrate_day(&sample.h0, model, p, step_cfg, cg_cfg)?;
    let mse = forecast_mse(&fc.h, &sample.target, loss_cfg.effective_sigma(sample))?;
    let w = loss_cfg.divergence_weight;
    if w > T::zero() {
        let (u1, v1) = model.velocities(&sample.h0, p)?;
        let div = divergence_penalty(&u1, &v1)?;
        Ok((mse + div * w, mse, div))
    } else {
        Ok((mse, mse, T::zero()))
    }
}

/// Batch loss by the untraced solver; bit-identical to the taped total on
/// the same inputs (the ConvNet always runs with its running statistics
/// here, matching taped inference mode). Cheap path for line searches and
/// finite differences.
pub fn total_loss_plain<T: Scalar>(
    model: &VelocityModel<T>,
    samples: &[BatchSample<T>],
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
    loss_cfg: &LossConfig<T>,
) -> Result<LossParts<T>> {
    loss_cfg.validate()?;
    validate_batch(samples)?;
    let inv_n = T::one() / lit::<T>(samples.len() as f64);
    let mut acc: Option<T> = None;
    let mut acc_mse: Option<T> = None;
    let mut acc_div: Option<T> = None;
    for sample in samples {
        let (s, mse, div) = sample_loss_plain(model, sample, p, step_cfg, cg_cfg, loss_cfg)?;
        acc = Some(match acc {
            Some(a) => a + s,
            None => s,
        });
        acc_mse = Some(match acc_mse {
            Some(a) => a + mse,
            None => mse,
        });
        acc_div = Some(match acc_div {
            Some(a) => a + div,
            None => div,
        });
    }
    let mut total = acc.expect("non-empty batch") * inv_n;
    let l2 = model.store().map(l2_sum).unwrap_or_else(T::zero);
    if loss_cfg.lambda_l2 > T::zero() && model.store().is_some() {
        total += l2 * loss_cfg.lambda_l2;
    }
    Ok(LossParts {
        total,
        mse: acc_mse.expect("non-empty") * inv_n,
        divergence: acc_div.expect("non-empty") * inv_n,
        l2,
    })
}

/// Builds the whole batch loss on one tape (every sample's unrolled
/// forecast shares the same parameter leaves). Returns the loss handle and
/// the batch-norm statistics in (sample, step) order.
pub fn traced_total_loss<T: Scalar>(
    tape: &Tape<T>,
    model: &TracedVelocityModel<'_, T>,
    samples: &[BatchSample<T>],
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
    loss_cfg: &LossConfig<T>,
) -> Result<(TracedScalar<T>, Vec<BnStats<T>>)> {
    loss_cfg.validate()?;
    validate_batch(samples)?;
    let inv_n = T::one() / lit::<T>(samples.len() as f64);
    let mut acc: Option<TracedScalar<T>> = None;
    let mut stats = Vec::new();
    for sample in samples {
        let h0 = tape.const_field(sample.h0.clone());
        let fc = trace::traced_forecast(tape, &h0, model, p, step_cfg, cg_cfg)?;
        stats.extend(fc.bn_stats);
        let inv_sigma = T::one() / loss_cfg.effective_sigma(sample);
        let mse = trace::traced_forecast_mse(tape, &fc.h, &sample.target, inv_sigma)?;
        let w = loss_cfg.divergence_weight;
        let s = if w > T::zero() {
            let div = trace::traced_divergence_penalty(tape, &fc.u1, &fc.v1)?;
            tape.add_s(&mse, &tape.scale_s(&div, w)?)?
        } else {
            mse
        };
        acc = Some(match acc {
            Some(a) => tape.add_s(&a, &s)?,
            None => s,
        });
    }
    let mut total = tape.scale_s(&acc.expect("non-empty batch"), inv_n)?;
    if loss_cfg.lambda_l2 > T::zero() {
        if let Some(l2) = model.l2_term(tape)? {
            total = tape.add_s(&total, &tape.scale_s(&l2, loss_cfg.lambda_l2)?)?;
        }
    }
    Ok((total, stats))
}

/// One sample's contribution to the batch loss and gradient.
struct SampleEval<T: Scalar> {
    s: T,
    mse: T,
    div: T,
    /// d s / d theta, flattened in store order (empty for the fixed model).
    grad: Vec<T>,
    stats: Vec<BnStats<T>>,
}

/// Whole-tape evaluation of one sample: trace, loss, reverse sweep.
fn eval_sample_full<T: Scalar>(
    model: &VelocityModel<T>,
    sample: &BatchSample<T>,
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
    loss_cfg: &LossConfig<T>,
    train_bn: bool,
) -> Result<SampleEval<T>> {
    let mut local = model.clone();
    let tape = Tape::new();
    let h0 = tape.const_field(sample.h0.clone());
    let inv_sigma = T::one() / loss_cfg.effective_sigma(sample);
    let (loss_node, mse_v, div_v, stats) = {
        let traced = local.trace(&tape, train_bn);
        let fc = trace::traced_forecast(&tape, &h0, &traced, p, step_cfg, cg_cfg)?;
        let mse = trace::traced_forecast_mse(&tape, &fc.h, &sample.target, inv_sigma)?;
        let w = loss_cfg.divergence_weight;
        let (s, div_v) = if w > T::zero() {
            let div = trace::traced_divergence_penalty(&tape, &fc.u1, &fc.v1)?;
            let dv = div.value();
            (tape.add_s(&mse, &tape.scale_s(&div, w)?)?, dv)
        } else {
            (mse, T::zero())
        };
        (s, mse.value(), div_v, fc.bn_stats)
    };
    let grad = match local.store_mut() {
        Some(store) => {
            tape.backward(&loss_node, store)?;
            store.flatten_trainable_grads()
        }
        None => Vec::new(),
    };
    Ok(SampleEval {
        s: loss_node.value(),
        mse: mse_v,
        div: div_v,
        grad,
        stats,
    })
}

/// Folds per-sample terms into batch loss parts and the total gradient
/// (mean of per-sample gradients plus the analytic 2*lambda*theta term).
fn assemble_batch<T: Scalar>(
    model: &VelocityModel<T>,
    evals: Vec<SampleEval<T>>,
    loss_cfg: &LossConfig<T>,
) -> (LossParts<T>, Vec<T>, Vec<Vec<BnStats<T>>>) {
    let inv_n = T::one() / lit::<T>(evals.len() as f64);
    let mut acc: Option<T> = None;
    let mut acc_mse: Option<T> = None;
    let mut acc_div: Option<T> = None;
    let n_params = model.trainable_len();
    let mut grad = vec![T::zero(); n_params];
    let mut stats = Vec::with_capacity(evals.len());
    for e in evals {
        acc = Some(match acc {
            Some(a) => a + e.s,
            None => e.s,
        });
        acc_mse = Some(match acc_mse {
            Some(a) => a + e.mse,
            None => e.mse,
        });
        acc_div = Some(match acc_div {
            Some(a) => a + e.div,
            None => e.div,
        });
        for (g, gi) in grad.iter_mut().zip(e.grad) {
            *g += gi;
        }
        stats.push(e.stats);
    }
    let mut total = acc.expect("non-empty batch") * inv_n;
    let l2 = model.store().map(l2_sum).unwrap_or_else(T::zero);
    if loss_cfg.lambda_l2 > T::zero() && model.store().is_some() {
        total += l2 * loss_cfg.lambda_l2;
        let two_lambda = loss_cfg.lambda_l2 + loss_cfg.lambda_l2;
        let theta = model.store().expect("checked").flatten_trainable();
        for (g, th) in grad.iter_mut().zip(theta) {
            *g = *g * inv_n + two_lambda * th;
        }
    } else {
        for g in grad.iter_mut() {
            *g *= inv_n;
        }
    }
    let parts = LossParts {
        total,
        mse: acc_mse.expect("non-empty") * inv_n,
        divergence: acc_div.expect("non-empty") * inv_n,
        l2,
    };
    (parts, grad, stats)
}

/// Batch loss and its gradient by one reverse sweep per sample, samples in
/// parallel. The fold over samples is in batch order regardless of thread
/// count, so results are reproducible. Returned statistics are per sample,
/// each in step order.
#[allow(clippy::type_complexity)]
pub fn evaluate_loss_and_grad<T: Scalar>(
    model: &VelocityModel<T>,
    samples: &[BatchSample<T>],
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
    loss_cfg: &LossConfig<T>,
    train_bn: bool,
) -> Result<(LossParts<T>, Vec<T>, Vec<Vec<BnStats<T>>>)> {
    loss_cfg.validate()?;
    validate_batch(samples)?;
    let evals = samples
        .par_iter()
        .map(|sample| eval_sample_full(model, sample, p, step_cfg, cg_cfg, loss_cfg, train_bn))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_batch(model, evals, loss_cfg))
}

/// Like [`evaluate_loss_and_grad`] but each sample's reverse sweep re-traces
/// the unrolled forecast in segments of `every` steps, capping tape memory
/// at O(every) instead of O(n_steps).
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn evaluate_loss_and_grad_checkpointed<T: Scalar>(
    model: &VelocityModel<T>,
    samples: &[BatchSample<T>],
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
    loss_cfg: &LossConfig<T>,
    train_bn: bool,
    every: usize,
) -> Result<(LossParts<T>, Vec<T>, Vec<Vec<BnStats<T>>>)> {
    loss_cfg.validate()?;
    validate_batch(samples)?;
    let evals = samples
        .par_iter()
        .map(|sample| {
            sample_grad_checkpointed(model, sample, p, step_cfg, cg_cfg, loss_cfg, train_bn, every)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_batch(model, evals, loss_cfg))
}

/// Gradient of one sample's loss term by checkpointed re-tracing.
///
/// Forward: the forecast runs on no-grad tapes in spans of `every` steps,
/// keeping only each span's boundary SSH history (the one or two states the
/// next span needs). Backward: spans are re-traced newest-first on fresh
/// tapes; the cotangents of a span's inputs seed the previous span's
/// outputs, and parameter gradients accumulate across spans.
#[allow(clippy::too_many_arguments)]
fn sample_grad_checkpointed<T: Scalar>(
    model: &VelocityModel<T>,
    sample: &BatchSample<T>,
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
    loss_cfg: &LossConfig<T>,
    train_bn: bool,
    every: usize,
) -> Result<SampleEval<T>> {
    if every == 0 {
        return Err(Error::Usage("checkpoint span must be positive".into()));
    }
    step_cfg.validate()?;
    p.validate()?;
    let n = step_cfg.n_steps;
    if n == 0 {
        return Err(Error::Usage(
            "a traced forecast needs at least one step".into(),
        ));
    }
    let w = loss_cfg.divergence_weight;
    let inv_sigma = T::one() / loss_cfg.effective_sigma(sample);

    // Forward sweep: values only, keeping span boundaries.
    let mut boundaries: Vec<Vec<Field2D<T>>> = vec![vec![sample.h0.clone()]];
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut stats_all: Vec<BnStats<T>> = Vec::new();
    let mut u1v1: Option<(Field2D<T>, Field2D<T>)> = None;
    let mut a = 0;
    while a < n {
        let b = (a + every).min(n);
        spans.push((a, b));
        let ng = Tape::no_grad();
        let hist: Vec<TracedField<T>> = boundaries
            .last()
            .expect("seeded with h0")
            .iter()
            .map(|f| ng.const_field(f.clone()))
            .collect();
        let seg = {
            let traced = model.trace(&ng, train_bn);
            trace::traced_steps(&ng, hist, a + 1, b, &traced, p, step_cfg, cg_cfg)?
        };
        if let Some((u, v)) = &seg.first_uv {
            u1v1 = Some((u.field().clone(), v.field().clone()));
        }
        stats_all.extend(seg.bn_stats);
        boundaries.push(seg.history.iter().map(|t| t.field().clone()).collect());
        a = b;
    }

    // Loss value from the checkpointed states (same folds as the tape).
    let h_n = boundaries
        .last()
        .and_then(|h| h.last())
        .expect("at least one span");
    let mse_v = forecast_mse(h_n, &sample.target, loss_cfg.effective_sigma(sample))?;
    let (s_val, div_v) = if w > T::zero() {
        let (u1, v1) = u1v1.as_ref().expect("step 1 ran");
        let div = divergence_penalty(u1, v1)?;
        (mse_v + div * w, div)
    } else {
        (mse_v, T::zero())
    };

    // Backward sweep, newest span first.
    let mut local = model.clone();
    let mut flat = vec![T::zero(); local.trainable_len()];
    let mut carry: Option<(Field2D<T>, Field2D<T>)> = None;
    for (j, &(a, b)) in spans.iter().enumerate().rev() {
        let tape = Tape::new();
        let inputs: Vec<TracedField<T>> = boundaries[j]
            .iter()
            .map(|f| tape.const_field(f.clone()))
            .collect();
        let want: Vec<NodeId> = inputs
            .iter()
            .map(|h| h.node_id().expect("recording tape"))
            .collect();
        let seg = {
            let traced = local.trace(&tape, train_bn);
            trace::traced_steps(&tape, inputs, a + 1, b, &traced, p, step_cfg, cg_cfg)?
        };
        let mut seeds: Vec<(NodeId, GradValue<T>)> = Vec::new();
        if j == spans.len() - 1 {
            let h_out = seg.history.last().expect("span ran");
            let mse = trace::traced_forecast_mse(&tape, h_out, &sample.target, inv_sigma)?;
            seeds.push((
                mse.node_id().expect("recording tape"),
                GradValue::Scalar(T::one()),
            ));
        } else {
            let (g_prev, g_cur) = carry.take().expect("set by the newer span");
            seeds.push((
                seg.history[0].node_id().expect("recording tape"),
                GradValue::Field(g_prev),
            ));
            seeds.push((
                seg.history[1].node_id().expect("recording tape"),
                GradValue::Field(g_cur),
            ));
        }
        if w > T::zero() && a == 0 {
            let (u1, v1) = seg.first_uv.as_ref().expect("span contains step 1");
            let div = trace::traced_divergence_penalty(&tape, u1, v1)?;
            let div_w = tape.scale_s(&div, w)?;
            seeds.push((
                div_w.node_id().expect("recording tape"),
                GradValue::Scalar(T::one()),
            ));
        }
        let wanted = match local.store_mut() {
            Some(store) => tape.backward_seeded(&seeds, Some(store), &want)?,
            None => tape.backward_seeded(&seeds, None, &want)?,
        };
        if let Some(store) = local.store() {
            for (f, gi) in flat.iter_mut().zip(store.flatten_trainable_grads()) {
                *f += gi;
            }
        }
        if j > 0 {
            let grid = sample.h0.grid();
            let field_of = |g: Option<GradValue<T>>| -> Field2D<T> {
                g.and_then(|g| g.as_field().cloned())
                    .unwrap_or_else(|| Field2D::zeros(grid))
            };
            let mut it = wanted.into_iter();
            let g_prev = field_of(it.next().flatten());
            let g_cur = field_of(it.next().flatten());
            carry = Some((g_prev, g_cur));
        }
    }

    Ok(SampleEval {
        s: s_val,
        mse: mse_v,
        div: div_v,
        grad: flat,
        stats: stats_all,
    })
}

/// Verifies the reverse-mode batch gradient against central finite
/// differences of the untraced loss, component by component (or a subset).
/// Batch normalization runs in inference mode on both sides so the two
/// pipelines compute the same function.
#[allow(clippy::too_many_arguments)]
pub fn loss_grad_check<T: Scalar>(
    model: &VelocityModel<T>,
    samples: &[BatchSample<T>],
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
    loss_cfg: &LossConfig<T>,
    indices: Option<&[usize]>,
    eps: T,
    tol: T,
) -> Result<GradCheckReport<T>> {
    if model.trainable_len() == 0 {
        return Err(Error::Usage(
            "the fixed model has no trainable parameters to check".into(),
        ));
    }
    if eps <= T::zero() || !eps.is_finite() {
        return Err(Error::Usage(format!("fd step must be positive, got {eps}")));
    }
    let (_, analytic, _) =
        evaluate_loss_and_grad(model, samples, p, step_cfg, cg_cfg, loss_cfg, false)?;
    let store = model.store().expect("trainable model");
    let labels = store.trainable_labels();
    let theta = store.flatten_trainable();
    let all: Vec<usize> = (0..theta.len()).collect();
    let indices = indices.unwrap_or(&all);
    for &i in indices {
        if i >= theta.len() {
            return Err(Error::Usage(format!(
                "component index {i} out of range for {} trainable values",
                theta.len()
            )));
        }
    }
    let mut work_model = model.clone();
    let mut work = theta.clone();
    let mut entries = Vec::with_capacity(indices.len());
    let mut max_rel = T::zero();
    for &i in indices {
        let h = eps * T::one().max(theta[i].abs());
        work[i] = theta[i] + h;
        work_model
            .store_mut()
            .expect("trainable model")
            .unflatten_trainable(&work)?;
        let lp = total_loss_plain(&work_model, samples, p, step_cfg, cg_cfg, loss_cfg)?.total;
        work[i] = theta[i] - h;
        work_model
            .store_mut()
            .expect("trainable model")
            .unflatten_trainable(&work)?;
        let lm = total_loss_plain(&work_model, samples, p, step_cfg, cg_cfg, loss_cfg)?.total;
        work[i] = theta[i];
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite(
                "loss at a finite-difference probe".into(),
            ));
        }
        let numeric = (lp - lm) / (lit::<T>(2.0) * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(lit(1e-12));
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
        entries.push(GradCheckEntry {
            label: labels[i].clone(),
            analytic: analytic[i],
            numeric,
            rel_err: rel,
        });
    }
    Ok(GradCheckReport {
        entries,
        max_rel_err: max_rel,
        tol,
        pass: max_rel < tol,
    })
}

/// Optimization algorithm for [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Limited-memory quasi-Newton on the full batch with a backtracking
    /// line search; batch normalization stays in inference mode so the line
    /// search and the gradient see the same function.
    QuasiNewton,
    /// Adaptive-moment descent on fixed-order minibatches with step decay.
    AdaptiveMoment,
    /// Plain gradient descent on fixed-order minibatches with step decay.
    GradientDescent,
}

/// Training-run configuration.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig<T: Scalar> {
    pub algorithm: Algorithm,
    /// Initial learning rate (first-order algorithms only).
    pub lr: T,
    /// Multiplicative step decay, applied every `decay_every` epochs; 1
    /// disables decay.
    pub decay_factor: T,
    pub decay_every: usize,
    /// Epochs (first-order) or iteration budget (quasi-Newton).
    pub max_epochs: usize,
    /// Minibatch size for first-order algorithms; quasi-Newton always uses
    /// the full batch.
    pub batch_size: usize,
    /// Stop when the gradient 2-norm falls below this.
    pub grad_tol: T,
    /// Curvature pairs kept by quasi-Newton.
    pub history: usize,
    /// Re-trace the unrolled forecast in spans of this many steps during
    /// backward passes; 0 keeps whole-horizon tapes.
    pub checkpoint_every: usize,
}

impl<T: Scalar> Default for OptimizerConfig<T> {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Algorithm::QuasiNewton,
            lr: lit(1e-3),
            decay_factor: T::one(),
            decay_every: 0,
            max_epochs: 500,
            batch_size: 4,
            grad_tol: lit(1e-8),
            history: 10,
            checkpoint_every: 0,
        }
    }
}

impl<T: Scalar> OptimizerConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > T::zero()) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(self.decay_factor > T::zero())
            || self.decay_factor > T::one()
            || !self.decay_factor.is_finite()
        {
            return Err(Error::Config(format!(
                "decay factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.history == 0 {
            return Err(Error::Config("history must be positive".into()));
        }
        if self.grad_tol < T::zero() || !self.grad_tol.is_finite() {
            return Err(Error::Config(format!(
                "grad_tol must be finite and non-negative, got {}",
                self.grad_tol
            )));
        }
        Ok(())
    }
}

/// One epoch (or accepted quasi-Newton iterate) of a training run.
#[derive(Debug, Clone)]
pub struct EpochRecord<T: Scalar> {
    pub epoch: usize,
    pub loss: T,
    pub mse: T,
    pub divergence: T,
    pub l2: T,
    pub grad_norm: T,
    /// Learning rate (first-order) or accepted step length (quasi-Newton);
    /// zero on the initial record.
    pub lr: T,
}

/// Training-run record. `to_text` is deterministic: it never includes wall
/// time, so byte-identical runs produce byte-identical reports.
#[derive(Debug, Clone)]
pub struct TrainReport<T: Scalar> {
    pub epochs: Vec<EpochRecord<T>>,
    pub converged: bool,
    pub wall_seconds: f64,
    pub final_params: Vec<T>,
}

impl<T: Scalar> TrainReport<T> {
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch loss mse divergence l2 grad_norm lr\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{} {:?} {:?} {:?} {:?} {:?} {:?}\n",
                e.epoch,
                to_f64(e.loss),
                to_f64(e.mse),
                to_f64(e.divergence),
                to_f64(e.l2),
                to_f64(e.grad_norm),
                to_f64(e.lr)
            ));
        }
        s.push_str(&format!("converged={}\n", self.converged));
        if self.final_params.len() <= 16 {
            let vals: Vec<String> = self
                .final_params
                .iter()
                .map(|&v| format!("{:?}", to_f64(v)))
                .collect();
            s.push_str(&format!("final_params=[{}]\n", vals.join(", ")));
        } else {
            s.push_str(&format!("final_params=<{} values>\n", self.final_params.len()));
        }
        s
    }
}

fn flat_norm2<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt()
}

/// Full-batch objective adapter for the quasi-Newton driver.
struct BatchObjective<'a, T: Scalar> {
    model: VelocityModel<T>,
    samples: &'a [BatchSample<T>],
    p: &'a PhysicalParams<T>,
    step_cfg: &'a StepConfig<T>,
    cg_cfg: &'a CGConfig<T>,
    loss_cfg: &'a LossConfig<T>,
    checkpoint_every: usize,
}

impl<T: Scalar> Objective<T> for BatchObjective<'_, T> {
    fn loss_and_grad(&mut self, theta: &[T]) -> Result<(LossParts<T>, Vec<T>)> {
        self.model
            .store_mut()
            .expect("trainable model")
            .unflatten_trainable(theta)?;
        let (parts, grad, _) = if self.checkpoint_every == 0 {
            evaluate_loss_and_grad(
                &self.model,
                self.samples,
                self.p,
                self.step_cfg,
                self.cg_cfg,
                self.loss_cfg,
                false,
            )?
        } else {
            evaluate_loss_and_grad_checkpointed(
                &self.model,
                self.samples,
                self.p,
                self.step_cfg,
                self.cg_cfg,
                self.loss_cfg,
                false,
                self.checkpoint_every,
            )?
        };
        Ok((parts, grad))
    }

    fn loss(&mut self, theta: &[T]) -> Result<T> {
        self.model
            .store_mut()
            .expect("trainable model")
            .unflatten_trainable(theta)?;
        Ok(total_loss_plain(
            &self.model,
            self.samples,
            self.p,
            self.step_cfg,
            self.cg_cfg,
            self.loss_cfg,
        )?
        .total)
    }
}

/// Trains the model's parameters in place and returns the run record.
/// Deterministic for a fixed input order and configuration: minibatches are
/// fixed-order slices and per-sample gradients fold in batch order.
pub fn train<T: Scalar>(
    model: &mut VelocityModel<T>,
    samples: &[BatchSample<T>],
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
    loss_cfg: &LossConfig<T>,
    opt: &OptimizerConfig<T>,
) -> Result<TrainReport<T>> {
    opt.validate()?;
    loss_cfg.validate()?;
    validate_batch(samples)?;
    if model.trainable_len() == 0 {
        return Err(Error::Usage(
            "the fixed model has no trainable parameters".into(),
        ));
    }
    let start = Instant::now();
    let mut epochs = Vec::new();
    let mut converged = false;
    match opt.algorithm {
        Algorithm::QuasiNewton => {
            let theta0 = model.store().expect("trainable").flatten_trainable();
            let mut obj = BatchObjective {
                model: model.clone(),
                samples,
                p,
                step_cfg,
                cg_cfg,
                loss_cfg,
                checkpoint_every: opt.checkpoint_every,
            };
            let lbfgs = LbfgsConfig {
                history: opt.history,
                max_iters: opt.max_epochs,
                grad_tol: opt.grad_tol,
                ..LbfgsConfig::default()
            };
            let run = lbfgs_minimize(&mut obj, theta0, &lbfgs)?;
            epochs.push(EpochRecord {
                epoch: 0,
                loss: run.initial.0.total,
                mse: run.initial.0.mse,
                divergence: run.initial.0.divergence,
                l2: run.initial.0.l2,
                grad_norm: run.initial.1,
                lr: T::zero(),
            });
            for s in &run.steps {
                epochs.push(EpochRecord {
                    epoch: s.iter,
                    loss: s.parts.total,
                    mse: s.parts.mse,
                    divergence: s.parts.divergence,
                    l2: s.parts.l2,
                    grad_norm: s.grad_norm,
                    lr: s.step_length,
                });
            }
            converged = run.converged;
            model
                .store_mut()
                .expect("trainable")
                .unflatten_trainable(&run.theta)?;
        }
        Algorithm::AdaptiveMoment | Algorithm::GradientDescent => {
            let train_bn = matches!(model, VelocityModel::QgPlusConvNet(_));
            let mut theta = model.store().expect("trainable").flatten_trainable();
            let mut adam = AdamState::new(theta.len());
            let inv_total = T::one() / lit::<T>(samples.len() as f64);
            for epoch in 1..=opt.max_epochs {
                let lr = decayed_lr(opt.lr, opt.decay_factor, opt.decay_every, epoch - 1);
                let mut loss_e = T::zero();
                let mut mse_e = T::zero();
                let mut div_e = T::zero();
                let mut l2_e = T::zero();
                let mut gnorm_e = T::zero();
                for chunk in samples.chunks(opt.batch_size) {
                    let weight = lit::<T>(chunk.len() as f64) * inv_total;
                    let (parts, grad, stats) = if opt.checkpoint_every == 0 {
                        evaluate_loss_and_grad(
                            model, chunk, p, step_cfg, cg_cfg, loss_cfg, train_bn,
                        )?
                    } else {
                        evaluate_loss_and_grad_checkpointed(
                            model,
                            chunk,
                            p,
                            step_cfg,
                            cg_cfg,
                            loss_cfg,
                            train_bn,
                            opt.checkpoint_every,
                        )?
                    };
                    if !parts.total.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "training loss diverged at epoch {epoch}"
                        )));
                    }
                    match opt.algorithm {
                        Algorithm::AdaptiveMoment => adam.step(&mut theta, &grad, lr),
                        Algorithm::GradientDescent => sgd_step(&mut theta, &grad, lr),
                        Algorithm::QuasiNewton => unreachable!("handled above"),
                    }
                    model
                        .store_mut()
                        .expect("trainable")
                        .unflatten_trainable(&theta)?;
                    if train_bn {
                        if let VelocityModel::QgPlusConvNet(cp) = model {
                            for sample_stats in &stats {
                                for pair in sample_stats.chunks(2) {
                                    cp.update_running_stats(pair);
                                }
                            }
                        }
                    }
                    loss_e += weight * parts.total;
                    mse_e += weight * parts.mse;
                    div_e += weight * parts.divergence;
                    l2_e += weight * parts.l2;
                    gnorm_e += weight * flat_norm2(&grad);
                }
                epochs.push(EpochRecord {
                    epoch,
                    loss: loss_e,
                    mse: mse_e,
                    divergence: div_e,
                    l2: l2_e,
                    grad_norm: gnorm_e,
                    lr,
                });
                if gnorm_e <= opt.grad_tol {
                    converged = true;
                    break;
                }
            }
        }
    }
    let final_params = model
        .store()
        .map(|s| s.flatten_trainable())
        .unwrap_or_default();
    Ok(TrainReport {
        epochs,
        converged,
        wall_seconds: start.elapsed().as_secs_f64(),
        final_params,
    })
}

/// One forecast-skill measurement.
#[derive(Debug, Clone)]
pub struct EvalRow<T: Scalar> {
    pub sample_id: String,
    pub model: String,
    pub rmse: T,
}

/// Runs every model (plus the implicit "persistence" baseline, which
/// forecasts no change) over the samples and reports the RMSE against each
/// target. Rows are grouped by sample, persistence first, then the models
/// in the given order; samples run in parallel.
pub fn evaluate<T: Scalar>(
    models: &[(&str, &VelocityModel<T>)],
    samples: &[BatchSample<T>],
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
) -> Result<Vec<EvalRow<T>>> {
    validate_batch(samples)?;
    let groups = samples
        .par_iter()
        .map(|sample| -> Result<Vec<EvalRow<T>>> {
            let mut rows = Vec::with_capacity(models.len() + 1);
            rows.push(EvalRow {
                sample_id: sample.id.clone(),
                model: "persistence".into(),
                rmse: sample.h0.rmse_to(&sample.target),
            });
            for (name, model) in models {
                let fc = integrate_day(&sample.h0, model, p, step_cfg, cg_cfg)?;
                rows.push(EvalRow {
                    sample_id: sample.id.clone(),
                    model: (*name).into(),
                    rmse: fc.h.rmse_to(&sample.target),
                });
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(groups.into_iter().flatten().collect())
}

/// Median of the values (mean of the middle pair when even); None when
/// empty. Values must be totally ordered (no NaN).
pub fn median<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("median needs ordered values"));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        Some(v[mid])
    } else {
        Some((v[mid - 1] + v[mid]) / lit::<T>(2.0))
    }
}

/// Median RMSE per model name, in first-appearance order.
pub fn median_rmse_by_model<T: Scalar>(rows: &[EvalRow<T>]) -> Vec<(String, T)> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.model) {
            order.push(r.model.clone());
        }
    }
    order
        .into_iter()
        .map(|name| {
            let vals: Vec<T> = rows
                .iter()
                .filter(|r| r.model == name)
                .map(|r| r.rmse)
                .collect();
            let m = median(&vals).expect("name came from rows");
            (name, m)
        })
        .collect()
}

/// Skill rows as CSV with a `sample_id,model,rmse` header.
pub fn eval_rows_to_csv<T: Scalar>(rows: &[EvalRow<T>]) -> String {
    let mut s = String::from("sample_id,model,rmse\n");
    for r in rows {
        s.push_str(&format!("{},{},{:?}\n", r.sample_id, r.model, to_f64(r.rmse)));
    }
    s
}

/// Mean and population standard deviation over every cell of every initial
/// state, for input standardization. Deterministic fold in sample order.
pub fn dataset_input_stats<T: Scalar>(samples: &[BatchSample<T>]) -> Result<(T, T)> {
    validate_batch(samples)?;
    let mut count = 0usize;
    let mut sum = T::zero();
    for s in samples {
        count += s.h0.values().len();
        sum = s.h0.values().iter().fold(sum, |a, &x| a + x);
    }
    let n = lit::<T>(count as f64);
    let mean = sum / n;
    let mut ssq = T::zero();
    for s in samples {
        ssq = s.h0.values().iter().fold(ssq, |a, &x| {
            let d = x - mean;
            a + d * d
        });
    }
    let std = (ssq / n).sqrt();
    if !(std > T::zero()) || !std.is_finite() {
        return Err(Error::Data(
            "degenerate dataset: initial states have zero variance".into(),
        ));
    }
    Ok((mean, std))
}
