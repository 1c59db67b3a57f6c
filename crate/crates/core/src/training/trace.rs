//! Taped twins of the forward model. Every function here mirrors its plain
//! counterpart operation for operation — same kernels, same per-cell
//! expression shapes — so a traced forecast reproduces the plain forecast's
//! values exactly while recording the graph needed for reverse-mode
//! gradients of the unrolled integration.

use crate::autodiff::{Tape, TracedField, TracedScalar};
use crate::autodiff::stack::BnStats;
use crate::dynamics::{cfl_check, PhysicalParams, StepConfig};
use crate::elliptic::CGConfig;
use crate::error::{Error, Result};
use crate::field::{BoundaryPolicy, Field2D, StencilKernel};
use crate::learnable::TracedVelocityModel;
use crate::scalar::{to_f64, Scalar};

/// q = (g/f) (lap(h) - h / L_R^2); twin of `dynamics::pv_from_ssh`.
pub fn traced_pv<T: Scalar>(
    tape: &Tape<T>,
    h: &TracedField<T>,
    p: &PhysicalParams<T>,
) -> Result<TracedField<T>> {
    let gf = p.g / p.f;
    let inv_lr2 = T::one() / (p.l_r * p.l_r);
    let lap = tape.laplacian(h)?;
    let hs = tape.scale(h, inv_lr2)?;
    let diff = tape.sub(&lap, &hs)?;
    tape.scale(&diff, gf)
}

/// One Euler step of PV advection; twin of `dynamics::advection_step`.
/// Upwind stencil directions are frozen from the plain velocity values, so
/// the derivative is taken with the branch selection of the forward pass.
/// Returns the advected PV and the step's Courant number.
pub fn traced_advection<T: Scalar>(
    tape: &Tape<T>,
    q: &TracedField<T>,
    u: &TracedField<T>,
    v: &TracedField<T>,
    cfg: &StepConfig<T>,
    p: &PhysicalParams<T>,
) -> Result<(TracedField<T>, T)> {
    let courant = cfl_check(u.field(), v.field(), cfg.dt);
    if courant > cfg.cfl_max {
        return Err(Error::CflExceeded {
            courant: to_f64(courant),
            limit: to_f64(cfg.cfl_max),
            step: None,
        });
    }
    let qx = tape.upwind_x(q, u.field())?;
    let qy = tape.upwind_y(q, v.field())?;
    let uqx = tape.mul(u, &qx)?;
    let vqy = tape.mul(v, &qy)?;
    let adv = tape.add(&uqx, &vqy)?;
    let tend = tape.add(&adv, &tape.scale(v, p.beta)?)?;
    let mut q_new = tape.add(q, &tape.scale(&tend, -cfg.dt)?)?;
    if p.d > T::zero() {
        let lap = tape.laplacian(&q_new)?;
        q_new = tape.add(&q_new, &tape.scale(&lap, cfg.dt * p.d)?)?;
    }
    if q_new.field().has_non_finite() {
        return Err(Error::NonFinite("advected PV".into()));
    }
    Ok((q_new, courant))
}

/// Warm-start guess; twin of `elliptic::guess_extrapolate` over traced
/// history (oldest first, at most two fields).
pub fn traced_guess<T: Scalar>(
    tape: &Tape<T>,
    history: &[TracedField<T>],
    k: usize,
) -> Result<TracedField<T>> {
    if k == 0 {
        return Err(Error::Usage("step index k is 1-based".into()));
    }
    if k == 1 {
        return history
            .last()
            .cloned()
            .ok_or_else(|| Error::Usage("guess extrapolation needs at least one field".into()));
    }
    if history.len() < 2 {
        return Err(Error::Usage(format!(
            "guess extrapolation at step {k} needs two previous fields, got {}",
            history.len()
        )));
    }
    let newest = &history[history.len() - 1];
    let older = &history[history.len() - 2];
    let twice = tape.scale(newest, crate::scalar::lit(2.0))?;
    tape.sub(&twice, older)
}

/// The guess field restricted to its boundary ring (zero interior). The
/// interior subtraction g - g is exactly +0, so adding this field splices
/// ring values without disturbing interior ones.
fn ring_of<T: Scalar>(tape: &Tape<T>, guess: &TracedField<T>) -> Result<TracedField<T>> {
    let interior = tape.mask_interior(guess)?;
    tape.sub(guess, &interior)
}

/// Dot product as recorded arithmetic: flat elementwise product then the
/// same left-to-right sum `Field2D::dot` performs.
fn traced_dot<T: Scalar>(
    tape: &Tape<T>,
    a: &TracedField<T>,
    b: &TracedField<T>,
) -> Result<TracedScalar<T>> {
    tape.sum(&tape.mul(a, b)?)
}

/// Helmholtz inversion of PV with the guess ring as Dirichlet boundary;
/// twin of `elliptic::invert`. Unrolled mode records exactly one CG update
/// (the differentiable block); otherwise the truncated solve is unrolled
/// onto the tape iteration by iteration with the run-time stopping rule.
pub fn traced_invert<T: Scalar>(
    tape: &Tape<T>,
    q: &TracedField<T>,
    guess: &TracedField<T>,
    p: &PhysicalParams<T>,
    cfg: &CGConfig<T>,
) -> Result<TracedField<T>> {
    cfg.validate()?;
    let l_r = p.l_r;
    let ring = ring_of(tape, guess)?;
    let scaled = tape.scale(q, p.f / p.g)?;
    let rhs = tape.add(&tape.mask_interior(&scaled)?, &ring)?;

    if cfg.unrolled {
        // Twin of elliptic::cg_one_iteration.
        let ag = tape.add(&tape.helmholtz_interior(guess, l_r)?, &ring)?;
        let r = tape.mask_interior(&tape.sub(&rhs, &ag)?)?;
        let rr = traced_dot(tape, &r, &r)?;
        if rr.value() == T::zero() {
            return Ok(guess.clone());
        }
        let ar = tape.add(&tape.helmholtz_interior(&r, l_r)?, &ring)?;
        let denom = traced_dot(tape, &r, &ar)?;
        if denom.value() == T::zero() || !denom.value().is_finite() {
            return Err(Error::CgBreakdown {
                reason: "singular direction <r, A r> = 0".into(),
                step: None,
            });
        }
        let alpha = tape.div_s(&rr, &denom)?;
        return tape.add(guess, &tape.mul_sf(&alpha, &r)?);
    }

    // Twin of elliptic::cg_solve_detailed on the negated interior system.
    let mut x = guess.clone();
    let ax = tape.helmholtz_interior(&x, l_r)?;
    let mut r = tape.mask_interior(&tape.sub(&ax, &rhs)?)?;
    let threshold = cfg.tol * rhs.field().masked_interior().norm_l2();
    let mut rs = traced_dot(tape, &r, &r)?;
    if rs.value().sqrt() <= threshold {
        return Ok(x);
    }
    let mut p_dir = r.clone();
    for _ in 0..cfg.max_iters {
        let ap = tape.scale(&tape.helmholtz_interior(&p_dir, l_r)?, -T::one())?;
        let pap = traced_dot(tape, &p_dir, &ap)?;
        if pap.value() <= T::zero() || !pap.value().is_finite() {
            return Err(Error::CgBreakdown {
                reason: format!("non-positive curvature p'Ap = {}", to_f64(pap.value())),
                step: None,
            });
        }
        let alpha = tape.div_s(&rs, &pap)?;
        x = tape.add(&x, &tape.mul_sf(&alpha, &p_dir)?)?;
        let neg_alpha = tape.scale_s(&alpha, -T::one())?;
        r = tape.add(&r, &tape.mul_sf(&neg_alpha, &ap)?)?;
        let rs_new = traced_dot(tape, &r, &r)?;
        if rs_new.value().sqrt() <= threshold {
            break;
        }
        let beta = tape.div_s(&rs_new, &rs)?;
        p_dir = tape.add(&r, &tape.mul_sf(&beta, &p_dir)?)?;
        rs = rs_new;
    }
    Ok(x)
}

/// A traced multi-step forecast.
pub struct TracedForecast<T: Scalar> {
    /// SSH after the final step.
    pub h: TracedField<T>,
    /// Velocities diagnosed at the first step (from h0), for the divergence
    /// penalty.
    pub u1: TracedField<T>,
    /// See `u1`.
    pub v1: TracedField<T>,
    /// Batch-normalization statistics in step order (two per step for the
    /// ConvNet model in training mode, empty otherwise).
    pub bn_stats: Vec<BnStats<T>>,
    /// Courant number of each accepted step.
    pub courants: Vec<T>,
}

/// Result of tracing a contiguous run of steps. `history` holds the last one
/// or two SSH states in time order (oldest first), ready to seed the next
/// segment's extrapolated CG guess.
pub struct TracedSegment<T: Scalar> {
    /// SSH history after the final step of the segment (len 1 only when the
    /// segment is the degenerate start-of-run case with zero steps taken).
    pub history: Vec<TracedField<T>>,
    /// Velocities diagnosed at global step 1, present only in a segment that
    /// contains it.
    pub first_uv: Option<(TracedField<T>, TracedField<T>)>,
    /// Batch-normalization statistics in step order (two per step for the
    /// ConvNet model in training mode, empty otherwise).
    pub bn_stats: Vec<BnStats<T>>,
    /// Courant number of each accepted step.
    pub courants: Vec<T>,
}

/// Traces steps `start_k..=end_k` (1-based, inclusive) from a traced SSH
/// history: one state when `start_k == 1`, the previous two otherwise. This
/// is the single loop body shared by whole-run tracing and segmented
/// (checkpointed) re-tracing, so both record identical arithmetic.
#[allow(clippy::too_many_arguments)]
pub fn traced_steps<T: Scalar>(
    tape: &Tape<T>,
    mut history: Vec<TracedField<T>>,
    start_k: usize,
    end_k: usize,
    model: &TracedVelocityModel<T>,
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
) -> Result<TracedSegment<T>> {
    if start_k == 0 || end_k < start_k {
        return Err(Error::Usage(format!(
            "step span {start_k}..={end_k} is empty or not 1-based"
        )));
    }
    let expected = if start_k == 1 { 1 } else { 2 };
    if history.len() != expected {
        return Err(Error::Usage(format!(
            "a segment starting at step {start_k} needs {expected} history state(s), got {}",
            history.len()
        )));
    }
    let mut h = history.last().expect("validated non-empty").clone();
    let mut q = traced_pv(tape, &h, p)?;
    let mut first_uv = None;
    let mut bn_stats = Vec::new();
    let mut courants = Vec::with_capacity(end_k - start_k + 1);
    for k in start_k..=end_k {
        let (u, v, stats) = model.velocities(tape, &h, p)?;
        bn_stats.extend(stats);
        let (q_adv, courant) =
            traced_advection(tape, &q, &u, &v, step_cfg, p).map_err(|e| e.with_step(k))?;
        if k == 1 {
            first_uv = Some((u, v));
        }
        let guess = traced_guess(tape, &history, k)?;
        h = traced_invert(tape, &q_adv, &guess, p, cg_cfg).map_err(|e| e.with_step(k))?;
        q = traced_pv(tape, &h, p)?;
        history.push(h.clone());
        if history.len() > 2 {
            history.remove(0);
        }
        courants.push(courant);
    }
    Ok(TracedSegment {
        history,
        first_uv,
        bn_stats,
        courants,
    })
}

/// Unrolled integration on the tape; twin of `dynamics::integrate_with`.
/// CFL and CG failures carry the 1-based step index.
pub fn traced_forecast<T: Scalar>(
    tape: &Tape<T>,
    h0: &TracedField<T>,
    model: &TracedVelocityModel<T>,
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
) -> Result<TracedForecast<T>> {
    step_cfg.validate()?;
    p.validate()?;
    if step_cfg.n_steps == 0 {
        return Err(Error::Usage(
            "a traced forecast needs at least one step".into(),
        ));
    }
    let seg = traced_steps(
        tape,
        vec![h0.clone()],
        1,
        step_cfg.n_steps,
        model,
        p,
        step_cfg,
        cg_cfg,
    )?;
    let h = seg.history.last().expect("n_steps >= 1").clone();
    let (u1, v1) = seg.first_uv.expect("segment contains step 1");
    Ok(TracedForecast {
        h,
        u1,
        v1,
        bn_stats: seg.bn_stats,
        courants: seg.courants,
    })
}

/// Mean over cells of ((target - pred) * inv_sigma)^2; twin of the plain
/// `forecast_mse` fold. `inv_sigma` is the precomputed reciprocal so both
/// paths multiply by the identical constant.
pub fn traced_forecast_mse<T: Scalar>(
    tape: &Tape<T>,
    pred: &TracedField<T>,
    target: &Field2D<T>,
    inv_sigma: T,
) -> Result<TracedScalar<T>> {
    let tgt = tape.const_field(target.clone());
    let d = tape.sub(&tgt, pred)?;
    let s = tape.scale(&d, inv_sigma)?;
    tape.mean(&tape.mul(&s, &s)?)
}

/// Squared 2-norm of the interior divergence grad_x(U) + grad_y(V); twin of
/// the plain `divergence_penalty` fold.
pub fn traced_divergence_penalty<T: Scalar>(
    tape: &Tape<T>,
    u: &TracedField<T>,
    v: &TracedField<T>,
) -> Result<TracedScalar<T>> {
    let g = u.field().grid();
    let gx = tape.convolve(u, &StencilKernel::centered_x(g.dx), BoundaryPolicy::Replicate)?;
    let gy = tape.convolve(v, &StencilKernel::centered_y(g.dy), BoundaryPolicy::Replicate)?;
    let div = tape.mask_interior(&tape.add(&gx, &gy)?)?;
    traced_dot(tape, &div, &div)
}
