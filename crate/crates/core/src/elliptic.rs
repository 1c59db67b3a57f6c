//! Helmholtz inversion of potential vorticity by truncated conjugate
//! gradients.
//!
//! The system (lap - 1/L_R^2) h = (f/g) q is solved on the interior cells
//! with a Dirichlet ring frozen from the initial guess. That operator is
//! symmetric negative-definite on the interior, so CG runs on the negated
//! system; residual and direction fields stay exactly zero on the ring,
//! which makes full-field dot products equal to interior ones. The solver is
//! deliberately truncatable (a handful of iterations per model step) and the
//! warm start comes from linear extrapolation of the previous two SSH fields.

use crate::dynamics::PhysicalParams;
use crate::error::{Error, Result};
use crate::field::{Field2D, GridSpec};
use crate::scalar::{lit, to_f64, Scalar};

/// Conjugate-gradient configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CGConfig<T: Scalar> {
    /// Iteration budget. The production model truncates hard (default 4).
    pub max_iters: usize,
    /// Convergence threshold on the residual 2-norm, relative to the 2-norm
    /// of the interior right-hand side.
    pub tol: T,
    /// If set, each inversion performs exactly one CG iteration (the
    /// unrolled architecture used for training).
    pub unrolled: bool,
}

impl<T: Scalar> CGConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("cg max_iters must be at least 1".into()));
        }
        if self.tol < T::zero() || !self.tol.is_finite() {
            return Err(Error::Config(format!("cg tol must be non-negative, got {}", self.tol)));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for CGConfig<T> {
    fn default() -> Self {
        CGConfig {
            max_iters: 4,
            tol: lit(1e-10),
            unrolled: false,
        }
    }
}

/// Interior rows of the Helmholtz operator: lap(h) - h / L_R^2 on cells with
/// a full 5-point neighborhood, zero on the outermost ring. Linear in `h`
/// (interior rows do read the ring values of `h`).
pub(crate) fn apply_interior<T: Scalar>(h: &Field2D<T>, l_r: T) -> Field2D<T> {
    let g = h.grid();
    let inv_dx2 = T::one() / (g.dx * g.dx);
    let inv_dy2 = T::one() / (g.dy * g.dy);
    let inv_lr2 = T::one() / (l_r * l_r);
    let two = lit::<T>(2.0);
    let mut out = Field2D::zeros(g);
    for iy in 1..g.ny - 1 {
        for ix in 1..g.nx - 1 {
            let c = h.at(iy, ix);
            let lap = (h.at(iy, ix + 1) + h.at(iy, ix - 1) - two * c) * inv_dx2
                + (h.at(iy + 1, ix) + h.at(iy - 1, ix) - two * c) * inv_dy2;
            out.set(iy, ix, lap - c * inv_lr2);
        }
    }
    out
}

/// Helmholtz operator (lap - 1/L_R^2) with Dirichlet boundary values frozen
/// from a guess field.
#[derive(Debug, Clone)]
pub struct HelmholtzOperator<T: Scalar> {
    grid: GridSpec<T>,
    pub l_r: T,
    /// Field whose outermost ring provides the boundary values.
    boundary: Field2D<T>,
}

impl<T: Scalar> HelmholtzOperator<T> {
    /// Builds the operator on `boundary_source`'s grid; only the ring of
    /// `boundary_source` is ever read.
    pub fn new(l_r: T, boundary_source: &Field2D<T>) -> Result<Self> {
        if l_r <= T::zero() || !l_r.is_finite() {
            return Err(Error::Config(format!(
                "deformation radius must be positive, got {l_r}"
            )));
        }
        Ok(HelmholtzOperator {
            grid: boundary_source.grid(),
            l_r,
            boundary: boundary_source.clone(),
        })
    }

    pub fn grid(&self) -> GridSpec<T> {
        self.grid
    }

    /// lap(h) - h/L_R^2 on the interior; the ring carries the operator's
    /// fixed boundary values unchanged.
    pub fn apply(&self, h: &Field2D<T>) -> Result<Field2D<T>> {
        h.same_grid(&self.boundary)?;
        let mut out = apply_interior(h, self.l_r);
        out.copy_ring_from(&self.boundary);
        Ok(out)
    }

    /// Linear part used for CG directions: interior rows, zero ring.
    pub(crate) fn apply_homogeneous(&self, h: &Field2D<T>) -> Field2D<T> {
        apply_interior(h, self.l_r)
    }
}

/// Detailed CG result.
#[derive(Debug, Clone)]
pub struct CgSolution<T: Scalar> {
    pub h: Field2D<T>,
    /// Iterations performed (0 when the guess already met the tolerance).
    pub iterations: usize,
    /// Residual 2-norms, starting with the residual at the guess.
    pub residual_norms: Vec<T>,
}

/// Truncated CG on the negated Helmholtz system. The guess supplies the
/// Dirichlet ring; `rhs`'s ring must hold those same boundary values (as
/// produced by [`ssh_from_pv`]). Stops when the residual 2-norm falls to
/// `tol * ||rhs_interior||` or the iteration budget runs out.
pub fn cg_solve_detailed<T: Scalar>(
    op: &HelmholtzOperator<T>,
    rhs: &Field2D<T>,
    guess: &Field2D<T>,
    cfg: &CGConfig<T>,
) -> Result<CgSolution<T>> {
    cfg.validate()?;
    rhs.same_grid(guess)?;
    guess.same_grid(&op.boundary)?;
    let mut x = guess.clone();
    // Residual of the negated (SPD) system: A = -(lap - 1/L^2), b = -rhs.
    // r = b - A x = apply_interior(x) - rhs, restricted to the interior.
    let mut r = op.apply_homogeneous(&x).sub(rhs);
    r.zero_ring();
    let threshold = cfg.tol * rhs.masked_interior().norm_l2();
    let mut rs = r.dot(&r);
    let mut residual_norms = vec![rs.sqrt()];
    if rs.sqrt() <= threshold {
        return Ok(CgSolution {
            h: x,
            iterations: 0,
            residual_norms,
        });
    }
    let budget = if cfg.unrolled { 1 } else { cfg.max_iters };
    let mut p = r.clone();
    let mut iterations = 0;
    for _ in 0..budget {
        let ap = op.apply_homogeneous(&p).scale(-T::one());
        let pap = p.dot(&ap);
        if pap <= T::zero() || !pap.is_finite() {
            return Err(Error::CgBreakdown {
                reason: format!("non-positive curvature p'Ap = {}", to_f64(pap)),
                step: None,
            });
        }
        let alpha = rs / pap;
        x.add_scaled_assign(alpha, &p);
        r.add_scaled_assign(-alpha, &ap);
        iterations += 1;
        let rs_new = r.dot(&r);
        residual_norms.push(rs_new.sqrt());
        if rs_new.sqrt() <= threshold {
            break;
        }
        let beta = rs_new / rs;
        let mut p_next = r.clone();
        p_next.add_scaled_assign(beta, &p);
        p = p_next;
        rs = rs_new;
    }
    Ok(CgSolution {
        h: x,
        iterations,
        residual_norms,
    })
}

/// Truncated CG; see [`cg_solve_detailed`] for the diagnostics-carrying form.
pub fn cg_solve<T: Scalar>(
    op: &HelmholtzOperator<T>,
    rhs: &Field2D<T>,
    guess: &Field2D<T>,
    cfg: &CGConfig<T>,
) -> Result<Field2D<T>> {
    Ok(cg_solve_detailed(op, rhs, guess, cfg)?.h)
}

/// Exactly one CG update from the guess:
/// r = rhs - op(guess) (interior), alpha = <r,r>/<r, op(r)>, guess + alpha r.
/// Agrees with `cg_solve` at max_iters = 1 and keeps the guess's ring.
pub fn cg_one_iteration<T: Scalar>(
    op: &HelmholtzOperator<T>,
    rhs: &Field2D<T>,
    guess: &Field2D<T>,
) -> Result<Field2D<T>> {
    rhs.same_grid(guess)?;
    let mut r = rhs.sub(&op.apply(guess)?);
    r.zero_ring();
    let rr = r.dot(&r);
    if rr == T::zero() {
        return Ok(guess.clone());
    }
    let denom = r.dot(&op.apply(&r)?);
    if denom == T::zero() || !denom.is_finite() {
        return Err(Error::CgBreakdown {
            reason: "singular direction <r, A r> = 0".into(),
            step: None,
        });
    }
    let alpha = rr / denom;
    let mut out = guess.clone();
    out.add_scaled_assign(alpha, &r);
    Ok(out)
}

/// Warm-start extrapolation from the previous SSH fields (oldest first):
/// step 1 uses h0 unchanged, later steps use 2 h_{k-1} - h_{k-2}.
pub fn guess_extrapolate<T: Scalar>(history: &[Field2D<T>], k: usize) -> Result<Field2D<T>> {
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
    let mut out = newest.scale(lit(2.0));
    out.add_scaled_assign(-T::one(), older);
    Ok(out)
}

/// Detailed inversion result.
#[derive(Debug, Clone)]
pub struct Inversion<T: Scalar> {
    pub h: Field2D<T>,
    pub iterations: usize,
    pub residual_norms: Vec<T>,
}

/// Solves (lap - 1/L_R^2) h = (f/g) q with the guess's ring as Dirichlet
/// boundary, returning diagnostics. The returned ring equals the guess ring.
pub fn invert<T: Scalar>(
    q: &Field2D<T>,
    guess: &Field2D<T>,
    p: &PhysicalParams<T>,
    cfg: &CGConfig<T>,
) -> Result<Inversion<T>> {
    q.same_grid(guess)?;
    let mut rhs = q.scale(p.f / p.g);
    rhs.copy_ring_from(guess);
    let op = HelmholtzOperator::new(p.l_r, guess)?;
    if cfg.unrolled {
        let h = cg_one_iteration(&op, &rhs, guess)?;
        let mut r = rhs.sub(&op.apply(&h)?);
        r.zero_ring();
        Ok(Inversion {
            h,
            iterations: 1,
            residual_norms: vec![r.norm_l2()],
        })
    } else {
        let sol = cg_solve_detailed(&op, &rhs, guess, cfg)?;
        Ok(Inversion {
            h: sol.h,
            iterations: sol.iterations,
            residual_norms: sol.residual_norms,
        })
    }
}

/// SSH from PV: the inverse map of PV diagnosis, truncated per `cfg`.
pub fn ssh_from_pv<T: Scalar>(
    q: &Field2D<T>,
    guess: &Field2D<T>,
    p: &PhysicalParams<T>,
    cfg: &CGConfig<T>,
) -> Result<Field2D<T>> {
    Ok(invert(q, guess, p, cfg)?.h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;

    fn grid() -> GridSpec<f64> {
        GridSpec::new(10, 9, 5500.0, 5500.0).unwrap()
    }

    fn noise(g: GridSpec<f64>, seed: u64) -> Field2D<f64> {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        Field2D::from_fn(g, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
    }

    #[test]
    fn apply_of_zero_boundary_zero_field_is_zero() {
        let g = grid();
        let z = Field2D::zeros(g);
        let op = HelmholtzOperator::new(25_000.0, &z).unwrap();
        assert_eq!(op.apply(&z).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn apply_of_constant_gives_minus_c_over_lr2_interior() {
        let g = grid();
        let c = 2.0;
        let f = Field2D::constant(g, c);
        let op = HelmholtzOperator::new(25_000.0, &f).unwrap();
        let out = op.apply(&f).unwrap();
        let expect = -c / (25_000.0f64 * 25_000.0);
        for iy in 1..g.ny - 1 {
            for ix in 1..g.nx - 1 {
                assert!((out.at(iy, ix) - expect).abs() < expect.abs() * 1e-12);
            }
        }
        // Ring carries the boundary values unchanged.
        assert_eq!(out.at(0, 3), c);
        assert_eq!(out.at(g.ny - 1, g.nx - 1), c);
    }

    #[test]
    fn operator_is_symmetric_on_interior_fields() {
        let g = grid();
        let op = HelmholtzOperator::new(25_000.0, &Field2D::zeros(g)).unwrap();
        for seed in 0..6 {
            let mut u = noise(g, 2 * seed + 1);
            let mut v = noise(g, 2 * seed + 2);
            u.zero_ring();
            v.zero_ring();
            let left = op.apply_homogeneous(&u).dot(&v);
            let right = u.dot(&op.apply_homogeneous(&v));
            let scale = left.abs().max(right.abs()).max(1e-30);
            assert!((left - right).abs() / scale < 1e-12);
        }
    }

    #[test]
    fn exact_guess_returns_after_zero_iterations() {
        let g = grid();
        let p = PhysicalParams::<f64>::default();
        let h = noise(g, 5).scale(0.1);
        let q = crate::dynamics::pv_from_ssh(&h, &p);
        let inv = invert(&q, &h, &p, &CGConfig::default()).unwrap();
        assert_eq!(inv.iterations, 0);
        assert_eq!(inv.h.linf_diff(&h), 0.0);
    }

    #[test]
    fn one_iteration_is_exact_on_an_eigenvector_residual() {
        // v_{ij} = sin(pi (iy) / (ny-1)) sin(pi (ix) / (nx-1)) on the
        // interior is an eigenvector of the interior Helmholtz operator, so
        // a single CG update from guess = x* - c v must land on x* exactly
        // (to round-off).
        let g = GridSpec::new(12, 10, 1.0, 1.0).unwrap();
        let xstar = noise(g, 9);
        let pi = std::f64::consts::PI;
        let mut v = Field2D::from_fn(g, |iy, ix| {
            (pi * iy as f64 / (g.ny - 1) as f64).sin() * (pi * ix as f64 / (g.nx - 1) as f64).sin()
        });
        v.zero_ring();
        let op = HelmholtzOperator::new(3.0, &xstar).unwrap();
        let mut rhs = op.apply(&xstar).unwrap();
        rhs.copy_ring_from(&xstar);
        let mut guess = xstar.clone();
        guess.add_scaled_assign(-0.37, &v);
        let x1 = cg_one_iteration(&op, &rhs, &guess).unwrap();
        assert!(x1.linf_diff(&xstar) < 1e-12 * (1.0 + xstar.max_abs()));
    }

    #[test]
    fn one_iteration_equals_truncated_solve_bitwise() {
        let g = grid();
        let p = PhysicalParams::<f64>::default();
        let guess = noise(g, 11).scale(0.2);
        let q = noise(g, 12).scale(1e-9);
        let mut rhs = q.scale(p.f / p.g);
        rhs.copy_ring_from(&guess);
        let op = HelmholtzOperator::new(p.l_r, &guess).unwrap();
        let one = cg_one_iteration(&op, &rhs, &guess).unwrap();
        let cfg = CGConfig {
            max_iters: 1,
            tol: 0.0,
            unrolled: false,
        };
        let solve = cg_solve(&op, &rhs, &guess, &cfg).unwrap();
        assert_eq!(one.linf_diff(&solve), 0.0);
    }

    #[test]
    fn guess_extrapolation_rules() {
        let g = grid();
        let h0 = noise(g, 1);
        // k = 1: h0 bit-for-bit.
        let out = guess_extrapolate(std::slice::from_ref(&h0), 1).unwrap();
        assert_eq!(out.linf_diff(&h0), 0.0);
        // Constants 1 then 2 (newest last): 2*2 - 1 = 3.
        let older = Field2D::constant(g, 1.0);
        let newer = Field2D::constant(g, 2.0);
        let out = guess_extrapolate(&[older, newer], 2).unwrap();
        assert_eq!(out.at(4, 4), 3.0);
        // Steady sequence: h, h -> h.
        let out = guess_extrapolate(&[h0.clone(), h0.clone()], 5).unwrap();
        assert!(out.linf_diff(&h0) < 1e-15);
        // Missing history and k = 0 are usage errors.
        assert!(matches!(
            guess_extrapolate::<f64>(&[], 1),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            guess_extrapolate(std::slice::from_ref(&h0), 2),
            Err(Error::Usage(_))
        ));
        assert!(matches!(guess_extrapolate(&[h0], 0), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_rhs_zero_boundary_decays_toward_zero() {
        let g = grid();
        let p = PhysicalParams::<f64>::default();
        let mut guess = noise(g, 21).scale(0.1);
        guess.zero_ring();
        let q = Field2D::zeros(g);
        let h = ssh_from_pv(&q, &guess, &p, &CGConfig { max_iters: 50, ..Default::default() })
            .unwrap();
        assert!(h.norm_l2() < 0.2 * guess.norm_l2());
    }

    #[test]
    fn residual_norms_do_not_increase_on_model_like_solves() {
        let g = grid();
        let p = PhysicalParams::<f64>::default();
        for seed in 0..5 {
            let h_true = noise(g, 100 + seed).scale(0.3);
            let q = crate::dynamics::pv_from_ssh(&h_true, &p);
            let guess = h_true.map(|v| v * 0.9); // warm but inexact
            let inv = invert(&q, &guess, &p, &CGConfig { max_iters: 8, ..Default::default() })
                .unwrap();
            for w in inv.residual_norms.windows(2) {
                assert!(
                    w[1] <= w[0] * (1.0 + 1e-12),
                    "residuals increased: {:?}",
                    inv.residual_norms
                );
            }
            assert!(*inv.residual_norms.last().unwrap() < inv.residual_norms[0]);
        }
    }
}
