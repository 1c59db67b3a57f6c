//! Quasi-geostrophic dynamics: PV diagnosis, geostrophic velocities,
//! third-order upwind advection, the CFL guard, and time integration.
//!
//! The model state is sea-surface height h; potential vorticity
//! q = (g/f) (lap(h) - h / L_R^2) is the advected proxy variable. One step
//! diagnoses velocities from h, advects q with a first-order Euler update,
//! and inverts q back to h through the elliptic solver with an extrapolated
//! initial guess.

use crate::elliptic::{self, CGConfig};
use crate::error::{Error, Result};
use crate::field::{convolve, laplacian, BoundaryPolicy, Field2D, StencilKernel};
use crate::learnable::VelocityModel;
use crate::scalar::{lit, to_f64, Scalar};

/// Earth's rotation rate, rad/s.
pub const EARTH_OMEGA: f64 = 7.2921e-5;
/// Mean Earth radius, m.
pub const EARTH_RADIUS: f64 = 6.371e6;

/// Physical constants of the single-layer QG model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams<T: Scalar> {
    /// Gravity, m/s^2.
    pub g: T,
    /// Coriolis parameter, 1/s.
    pub f: T,
    /// Meridional Coriolis gradient df/dy, 1/(m s).
    pub beta: T,
    /// Rossby deformation radius, m.
    pub l_r: T,
    /// PV diffusion coefficient, m^2/s. Zero disables the diffusion term.
    pub d: T,
}

impl<T: Scalar> PhysicalParams<T> {
    /// Coriolis parameters for a midlatitude plane at `lat_deg` degrees:
    /// f = 2 Omega sin(lat), beta = 2 Omega cos(lat) / R.
    pub fn from_latitude(lat_deg: T, g: T, l_r: T, d: T) -> Result<Self> {
        let rad = lat_deg * T::PI() / lit(180.0);
        let two_omega = lit::<T>(2.0 * EARTH_OMEGA);
        let p = PhysicalParams {
            g,
            f: two_omega * rad.sin(),
            beta: two_omega * rad.cos() / lit(EARTH_RADIUS),
            l_r,
            d,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.f == T::zero() || !self.f.is_finite() {
            return Err(Error::Config(format!(
                "Coriolis parameter must be nonzero and finite, got {}",
                self.f
            )));
        }
        if self.l_r <= T::zero() || !self.l_r.is_finite() {
            return Err(Error::Config(format!(
                "deformation radius must be positive, got {}",
                self.l_r
            )));
        }
        if self.g <= T::zero() || !self.g.is_finite() {
            return Err(Error::Config(format!("gravity must be positive, got {}", self.g)));
        }
        if self.d < T::zero() || !self.d.is_finite() {
            return Err(Error::Config(format!(
                "diffusion coefficient must be non-negative, got {}",
                self.d
            )));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for PhysicalParams<T> {
    /// 35 degrees north, g = 9.81, L_R = 25 km, no diffusion.
    fn default() -> Self {
        PhysicalParams::from_latitude(lit(35.0), lit(9.81), lit(25_000.0), T::zero())
            .expect("default parameters are valid")
    }
}

/// Time-stepping configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig<T: Scalar> {
    /// Step length, seconds.
    pub dt: T,
    /// Number of Euler steps per forecast.
    pub n_steps: usize,
    /// Step rejection threshold for the advective Courant number.
    pub cfl_max: T,
}

impl<T: Scalar> StepConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.dt <= T::zero() || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.cfl_max <= T::zero() || self.cfl_max > T::one() {
            return Err(Error::Config(format!(
                "cfl_max must lie in (0, 1], got {}",
                self.cfl_max
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for StepConfig<T> {
    /// 10-minute steps, one day per forecast (144 steps).
    fn default() -> Self {
        StepConfig {
            dt: lit(600.0),
            n_steps: 144,
            cfl_max: lit(0.5),
        }
    }
}

/// Prognostic state of the integration.
#[derive(Debug, Clone)]
pub struct ModelState<T: Scalar> {
    /// Sea-surface height, m.
    pub h: Field2D<T>,
    /// Potential vorticity diagnosed from `h` (consistent whenever the state
    /// comes out of [`ModelState::from_ssh`] or the integrator loop).
    pub q: Field2D<T>,
    /// Model time, seconds.
    pub t: T,
    /// Previous SSH fields for guess extrapolation, oldest first, max len 2.
    history: Vec<Field2D<T>>,
}

impl<T: Scalar> ModelState<T> {
    /// Diagnoses q from h and starts the guess history at h.
    pub fn from_ssh(h: Field2D<T>, p: &PhysicalParams<T>) -> Self {
        let q = pv_from_ssh(&h, p);
        let history = vec![h.clone()];
        ModelState {
            h,
            q,
            t: T::zero(),
            history,
        }
    }

    /// Last two SSH fields, oldest first.
    pub fn history(&self) -> &[Field2D<T>] {
        &self.history
    }

    pub(crate) fn push_history(&mut self, h: Field2D<T>) {
        self.history.push(h);
        if self.history.len() > 2 {
            self.history.remove(0);
        }
    }
}

/// q = (g/f) (lap(h) - h / L_R^2), replicate-edge boundary.
pub fn pv_from_ssh<T: Scalar>(h: &Field2D<T>, p: &PhysicalParams<T>) -> Field2D<T> {
    let gf = p.g / p.f;
    let inv_lr2 = T::one() / (p.l_r * p.l_r);
    let lap = laplacian(h);
    Field2D::from_fn(h.grid(), |iy, ix| {
        gf * (lap.at(iy, ix) - h.at(iy, ix) * inv_lr2)
    })
}

/// Weights of the averaged two-row x-gradient filter used for the
/// geostrophic velocities, row-major 2x3, dimensionless (divide by dx).
pub fn qg_filter_weights<T: Scalar>() -> [T; 6] {
    [
        lit(-0.25),
        T::zero(),
        lit(0.25),
        lit(-0.25),
        T::zero(),
        lit(0.25),
    ]
}

/// x-gradient kernel built from the 2x3 filter, normalized by dx.
///
/// Anchor layout (* marks the output cell, rows grow with iy):
///
/// ```text
///   col:    ix-1   ix    ix+1
///   row iy:  -1/4   0*   +1/4
///   row iy+1:-1/4   0    +1/4
/// ```
///
/// i.e. a centered x-difference averaged over the rows at and above the
/// point. Its transpose (used for the y-gradient) spans the columns at and
/// right of the point and is normalized by dy.
pub fn qg_kernel_x<T: Scalar>(dx: T) -> StencilKernel<T> {
    StencilKernel::new(2, 3, 0, 1, qg_filter_weights::<T>().to_vec(), dx)
        .expect("static kernel")
}

/// y-gradient kernel: transpose of [`qg_kernel_x`], normalized by dy.
pub fn qg_kernel_y<T: Scalar>(dy: T) -> StencilKernel<T> {
    qg_kernel_x(T::one()).transposed().with_normalization(dy)
}

/// Geostrophic velocities from SSH via the 2x3 gradient filter:
/// U = -(g/f) d h/d y, V = (g/f) d h/d x.
pub fn geostrophic_velocities<T: Scalar>(
    h: &Field2D<T>,
    p: &PhysicalParams<T>,
) -> (Field2D<T>, Field2D<T>) {
    let gf = p.g / p.f;
    let dhdx = convolve(h, &qg_kernel_x(h.grid().dx), BoundaryPolicy::Replicate)
        .expect("2x3 kernel fits any valid grid");
    let dhdy = convolve(h, &qg_kernel_y(h.grid().dy), BoundaryPolicy::Replicate)
        .expect("3x2 kernel fits any valid grid");
    (dhdy.scale(-gf), dhdx.scale(gf))
}

/// Stencil taps for the upwind derivative along one axis at index `i` of
/// `n`, as (offset, coefficient) pairs in units of 1/(6 h). Third-order
/// upwind-biased where the stencil fits, first-order one-sided at the
/// boundary cells. Shared between the forward kernel and its adjoint.
#[inline]
pub(crate) fn upwind_axis_taps(n: usize, i: usize, positive: bool) -> ([(isize, i8); 4], usize) {
    if positive {
        if i >= 2 && i + 1 < n {
            ([(1, 2), (0, 3), (-1, -6), (-2, 1)], 4)
        } else if i >= 1 {
            ([(0, 6), (-1, -6), (0, 0), (0, 0)], 2)
        } else {
            ([(1, 6), (0, -6), (0, 0), (0, 0)], 2)
        }
    } else if i >= 1 && i + 2 < n {
        ([(-1, -2), (0, -3), (1, 6), (2, -1)], 4)
    } else if i + 1 < n {
        ([(1, 6), (0, -6), (0, 0), (0, 0)], 2)
    } else {
        ([(0, 6), (-1, -6), (0, 0), (0, 0)], 2)
    }
}

/// Per-cell upwind directions: true where the advecting velocity is >= 0.
pub(crate) fn upwind_signs<T: Scalar>(vel: &Field2D<T>) -> Vec<bool> {
    vel.values().iter().map(|&v| v >= T::zero()).collect()
}

/// x-derivative with per-cell stencils fixed by a precomputed sign mask.
pub(crate) fn upwind_x_with_signs<T: Scalar>(phi: &Field2D<T>, positive: &[bool]) -> Field2D<T> {
    let g = phi.grid();
    let inv_6dx = T::one() / (lit::<T>(6.0) * g.dx);
    Field2D::from_fn(g, |iy, ix| {
        let (taps, len) = upwind_axis_taps(g.nx, ix, positive[iy * g.nx + ix]);
        let mut acc = T::zero();
        for &(di, c) in &taps[..len] {
            acc += lit::<T>(c as f64) * phi.at(iy, (ix as isize + di) as usize);
        }
        acc * inv_6dx
    })
}

/// y-derivative with per-cell stencils fixed by a precomputed sign mask.
pub(crate) fn upwind_y_with_signs<T: Scalar>(phi: &Field2D<T>, positive: &[bool]) -> Field2D<T> {
    let g = phi.grid();
    let inv_6dy = T::one() / (lit::<T>(6.0) * g.dy);
    Field2D::from_fn(g, |iy, ix| {
        let (taps, len) = upwind_axis_taps(g.ny, iy, positive[iy * g.nx + ix]);
        let mut acc = T::zero();
        for &(di, c) in &taps[..len] {
            acc += lit::<T>(c as f64) * phi.at((iy as isize + di) as usize, ix);
        }
        acc * inv_6dy
    })
}

/// Upwind-biased x-derivative of `phi`; the stencil at each cell is chosen
/// by the sign of `u` there (u >= 0 biases left, u < 0 biases right).
pub fn upwind_deriv_x<T: Scalar>(phi: &Field2D<T>, u: &Field2D<T>) -> Field2D<T> {
    debug_assert_eq!(phi.grid(), u.grid());
    upwind_x_with_signs(phi, &upwind_signs(u))
}

/// Upwind-biased y-derivative of `phi`, sign-selected by `v`.
pub fn upwind_deriv_y<T: Scalar>(phi: &Field2D<T>, v: &Field2D<T>) -> Field2D<T> {
    debug_assert_eq!(phi.grid(), v.grid());
    upwind_y_with_signs(phi, &upwind_signs(v))
}

/// Advective Courant number: max|u| dt/dx + max|v| dt/dy.
pub fn cfl_check<T: Scalar>(u: &Field2D<T>, v: &Field2D<T>, dt: T) -> T {
    let g = u.grid();
    u.max_abs() * dt / g.dx + v.max_abs() * dt / g.dy
}

/// One Euler step of PV advection:
/// q <- q - dt (U dq/dx + V dq/dy + beta V) + dt D lap(q); t <- t + dt.
/// Rejects the step if the Courant number exceeds `cfg.cfl_max`.
pub fn advection_step<T: Scalar>(
    mut state: ModelState<T>,
    u: &Field2D<T>,
    v: &Field2D<T>,
    cfg: &StepConfig<T>,
    p: &PhysicalParams<T>,
) -> Result<ModelState<T>> {
    state.q.same_grid(u)?;
    state.q.same_grid(v)?;
    let courant = cfl_check(u, v, cfg.dt);
    if courant > cfg.cfl_max {
        return Err(Error::CflExceeded {
            courant: to_f64(courant),
            limit: to_f64(cfg.cfl_max),
            step: None,
        });
    }
    let qx = upwind_deriv_x(&state.q, u);
    let qy = upwind_deriv_y(&state.q, v);
    let mut tend = u.mul(&qx);
    tend.add_scaled_assign(T::one(), &v.mul(&qy));
    tend.add_scaled_assign(p.beta, v);
    let mut q_new = state.q;
    q_new.add_scaled_assign(-cfg.dt, &tend);
    if p.d > T::zero() {
        q_new.add_scaled_assign(cfg.dt * p.d, &laplacian(&q_new.clone()));
    }
    if q_new.has_non_finite() {
        return Err(Error::NonFinite("advected PV".into()));
    }
    state.q = q_new;
    state.t += cfg.dt;
    Ok(state)
}

/// Per-step integration diagnostics.
#[derive(Debug, Clone)]
pub struct StepDiagnostics<T: Scalar> {
    /// Courant number of the accepted step.
    pub courant: T,
    /// CG residual 2-norms, starting with the residual at the guess.
    pub cg_residuals: Vec<T>,
    /// CG iterations actually performed.
    pub cg_iterations: usize,
}

/// Result of a multi-step forecast.
#[derive(Debug, Clone)]
pub struct Forecast<T: Scalar> {
    /// SSH after the final step.
    pub h: Field2D<T>,
    /// Diagnostics for each accepted step.
    pub steps: Vec<StepDiagnostics<T>>,
}

/// Integrates `n_steps` of the QG model from `h0` with velocities supplied
/// by `velocities`, alternating velocity diagnosis, PV advection, and
/// elliptic inversion with the extrapolated guess. CFL and CG failures
/// carry the 1-based step index.
pub fn integrate_with<T, F>(
    h0: &Field2D<T>,
    mut velocities: F,
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
) -> Result<Forecast<T>>
where
    T: Scalar,
    F: FnMut(&Field2D<T>, &PhysicalParams<T>) -> Result<(Field2D<T>, Field2D<T>)>,
{
    step_cfg.validate()?;
    p.validate()?;
    let mut state = ModelState::from_ssh(h0.clone(), p);
    let mut steps = Vec::with_capacity(step_cfg.n_steps);
    for k in 1..=step_cfg.n_steps {
        let (u, v) = velocities(&state.h, p)?;
        let courant = cfl_check(&u, &v, step_cfg.dt);
        state = advection_step(state, &u, &v, step_cfg, p).map_err(|e| e.with_step(k))?;
        let guess = elliptic::guess_extrapolate(state.history(), k)?;
        let inv = elliptic::invert(&state.q, &guess, p, cg_cfg).map_err(|e| e.with_step(k))?;
        state.h = inv.h;
        state.q = pv_from_ssh(&state.h, p);
        state.push_history(state.h.clone());
        steps.push(StepDiagnostics {
            courant,
            cg_residuals: inv.residual_norms,
            cg_iterations: inv.iterations,
        });
    }
    Ok(Forecast { h: state.h, steps })
}

/// Integrates `n_steps` of the QG model from `h0` under a velocity model;
/// see [`integrate_with`].
pub fn integrate_day<T: Scalar>(
    h0: &Field2D<T>,
    model: &VelocityModel<T>,
    p: &PhysicalParams<T>,
    step_cfg: &StepConfig<T>,
    cg_cfg: &CGConfig<T>,
) -> Result<Forecast<T>> {
    integrate_with(h0, |h, p| model.velocities(h, p), p, step_cfg, cg_cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;

    fn grid() -> GridSpec<f64> {
        GridSpec::new(10, 9, 1.0, 1.0).unwrap()
    }

    #[test]
    fn latitude_35_gives_expected_coriolis() {
        let p = PhysicalParams::<f64>::default();
        assert!((p.f - 8.365e-5).abs() < 1e-7, "f = {}", p.f);
        assert!((p.beta - 1.875e-11).abs() < 1e-13, "beta = {}", p.beta);
        assert_eq!(p.l_r, 25_000.0);
        assert_eq!(p.d, 0.0);
    }

    #[test]
    fn pv_of_zero_is_zero() {
        let p = PhysicalParams::<f64>::default();
        let h = Field2D::zeros(GridSpec::new(8, 8, 5500.0, 5500.0).unwrap());
        assert_eq!(pv_from_ssh(&h, &p).max_abs(), 0.0);
    }

    #[test]
    fn pv_of_constant_is_minus_gf_c_over_lr2() {
        let p = PhysicalParams::<f64>::default();
        let c = 0.3;
        let h = Field2D::constant(GridSpec::new(8, 8, 5500.0, 5500.0).unwrap(), c);
        let q = pv_from_ssh(&h, &p);
        let expect = -(p.g / p.f) * c / (p.l_r * p.l_r);
        for &v in q.values() {
            assert!((v - expect).abs() <= 1e-18 + expect.abs() * 1e-14);
        }
    }

    #[test]
    fn geostrophic_of_constant_is_zero() {
        let p = PhysicalParams::<f64>::default();
        let h = Field2D::constant(GridSpec::new(8, 8, 5500.0, 5500.0).unwrap(), 1.0);
        let (u, v) = geostrophic_velocities(&h, &p);
        assert!(u.max_abs() < 1e-12);
        assert!(v.max_abs() < 1e-12);
    }

    #[test]
    fn geostrophic_of_zonal_ramp() {
        // h = a * x: V = (g/f) a on the stencil interior, U = 0.
        let p = PhysicalParams::<f64>::default();
        let g = GridSpec::new(10, 8, 5500.0, 5500.0).unwrap();
        let a = 1e-6;
        let h = Field2D::from_fn(g, |_, ix| a * ix as f64 * g.dx);
        let (u, v) = geostrophic_velocities(&h, &p);
        let expect = p.g / p.f * a;
        for iy in 0..g.ny - 1 {
            for ix in 1..g.nx - 1 {
                assert!((v.at(iy, ix) - expect).abs() < expect * 1e-12);
                assert!(u.at(iy, ix).abs() < expect * 1e-12);
            }
        }
    }

    #[test]
    fn geostrophic_matches_hand_cross_correlation_on_eddy() {
        // Independent oracle: evaluate the 2x3 / 3x2 taps by explicit index
        // arithmetic at one interior cell of a small Gaussian eddy.
        let p = PhysicalParams::<f64>::default();
        let g = GridSpec::new(9, 9, 5500.0, 5500.0).unwrap();
        let h = Field2D::from_fn(g, |iy, ix| {
            let dx = ix as f64 - 4.0;
            let dy = iy as f64 - 4.0;
            0.25 * (-(dx * dx + dy * dy) / 8.0).exp()
        });
        let (cy, cx) = (4usize, 4usize);
        let dhdx = 0.25
            * (h.at(cy, cx + 1) - h.at(cy, cx - 1) + h.at(cy + 1, cx + 1) - h.at(cy + 1, cx - 1))
            / g.dx;
        let dhdy = 0.25
            * (h.at(cy + 1, cx) + h.at(cy + 1, cx + 1) - h.at(cy - 1, cx) - h.at(cy - 1, cx + 1))
            / g.dy;
        let (u, v) = geostrophic_velocities(&h, &p);
        let gf = p.g / p.f;
        assert!((v.at(cy, cx) - gf * dhdx).abs() < 1e-12 * gf.abs());
        assert!((u.at(cy, cx) + gf * dhdy).abs() < 1e-12 * gf.abs());
    }

    #[test]
    fn upwind_is_exact_for_linear_fields() {
        let g = grid();
        let phi = Field2D::from_fn(g, |_, ix| 3.0 * ix as f64 + 1.0);
        for sign in [1.0, -1.0] {
            let u = Field2D::constant(g, sign);
            let d = upwind_deriv_x(&phi, &u);
            for iy in 0..g.ny {
                for ix in 0..g.nx {
                    assert!((d.at(iy, ix) - 3.0).abs() < 1e-12, "sign {sign} at ({iy},{ix})");
                }
            }
        }
    }

    #[test]
    fn upwind_is_exact_for_quadratics_where_third_order_applies() {
        let g = grid();
        let phi = Field2D::from_fn(g, |_, ix| (ix as f64) * (ix as f64));
        for sign in [1.0, -1.0] {
            let u = Field2D::constant(g, sign);
            let d = upwind_deriv_x(&phi, &u);
            // Third-order region for either sign.
            for iy in 0..g.ny {
                for ix in 2..g.nx - 2 {
                    assert!(
                        (d.at(iy, ix) - 2.0 * ix as f64).abs() < 1e-11,
                        "sign {sign} at ({iy},{ix})"
                    );
                }
            }
        }
    }

    #[test]
    fn upwind_matches_centered_on_quadratic_differs_on_cubic() {
        let g = grid();
        let quad = Field2D::from_fn(g, |_, ix| 0.5 * (ix as f64) * (ix as f64));
        let cubic = Field2D::from_fn(g, |_, ix| (ix as f64).powi(3));
        let u = Field2D::constant(g, 1.0);
        let dq_up = upwind_deriv_x(&quad, &u);
        let dq_c = crate::field::grad_x(&quad);
        for iy in 0..g.ny {
            for ix in 2..g.nx - 2 {
                assert!((dq_up.at(iy, ix) - dq_c.at(iy, ix)).abs() < 1e-11);
            }
        }
        let dc_up = upwind_deriv_x(&cubic, &u);
        let dc_c = crate::field::grad_x(&cubic);
        // Centered picks up a +1 error on i^3 at unit spacing; upwind does not.
        assert!((dc_up.at(4, 4) - 48.0).abs() < 1e-10);
        assert!((dc_c.at(4, 4) - 49.0).abs() < 1e-10);
    }

    #[test]
    fn upwind_y_transposes_upwind_x() {
        let gx = GridSpec::new(9, 12, 1.0, 1.0).unwrap();
        let gy = GridSpec::new(12, 9, 1.0, 1.0).unwrap();
        let phi_x = Field2D::from_fn(gx, |iy, ix| ((3 * ix + 7 * iy) % 11) as f64);
        let phi_y = Field2D::from_fn(gy, |iy, ix| ((3 * iy + 7 * ix) % 11) as f64);
        let u = Field2D::constant(gx, 1.0);
        let v = Field2D::constant(gy, 1.0);
        let dx = upwind_deriv_x(&phi_x, &u);
        let dy = upwind_deriv_y(&phi_y, &v);
        for a in 0..12 {
            for b in 0..9 {
                assert_eq!(dx.at(a, b), dy.at(b, a));
            }
        }
    }

    #[test]
    fn cfl_number_matches_hand_arithmetic() {
        // max|U| = 1 m/s, dx = 5000 m, dt = 600 s -> 0.12, plus the V term.
        let g = GridSpec::new(8, 8, 5000.0, 5000.0).unwrap();
        let u: Field2D<f64> = Field2D::constant(g, 1.0);
        let v = Field2D::constant(g, 0.5);
        let c = cfl_check(&u, &v, 600.0);
        assert!((c - (0.12 + 0.06)).abs() < 1e-15);
        // Zero velocities give zero.
        let z = Field2D::zeros(g);
        assert_eq!(cfl_check(&z, &z, 600.0), 0.0);
        // Doubling dt doubles the number.
        assert!((cfl_check(&u, &v, 1200.0) - 2.0 * c).abs() < 1e-15);
    }

    #[test]
    fn advection_step_rejects_cfl_violation_with_courant() {
        let p = PhysicalParams::<f64>::default();
        let g = GridSpec::new(8, 8, 5000.0, 5000.0).unwrap();
        let h = Field2D::zeros(g);
        let state = ModelState::from_ssh(h, &p);
        let u = Field2D::constant(g, 10.0);
        let v = Field2D::zeros(g);
        let cfg = StepConfig {
            dt: 600.0,
            n_steps: 1,
            cfl_max: 0.5,
        };
        match advection_step(state, &u, &v, &cfg, &p) {
            Err(Error::CflExceeded { courant, limit, .. }) => {
                assert!((courant - 1.2).abs() < 1e-12);
                assert_eq!(limit, 0.5);
            }
            other => panic!("expected CFL rejection, got {other:?}"),
        }
    }

    #[test]
    fn advection_with_zero_velocity_preserves_q() {
        let p = PhysicalParams::<f64> {
            beta: 0.0,
            ..Default::default()
        };
        let g = GridSpec::new(10, 8, 5500.0, 5500.0).unwrap();
        let h = Field2D::from_fn(g, |iy, ix| 0.1 * ((ix + 2 * iy) % 5) as f64);
        let state = ModelState::from_ssh(h, &p);
        let q0 = state.q.clone();
        let z = Field2D::zeros(g);
        let cfg = StepConfig::default();
        let next = advection_step(state, &z, &z, &cfg, &p).unwrap();
        assert_eq!(next.q.linf_diff(&q0), 0.0);
        assert_eq!(next.t, 600.0);
    }

    #[test]
    fn constant_q_is_invariant_under_uniform_advection() {
        // Gradient of a constant vanishes, so only the beta term could act;
        // with beta = 0 the field must be unchanged to round-off.
        let p = PhysicalParams::<f64> {
            beta: 0.0,
            ..Default::default()
        };
        let g = GridSpec::new(9, 9, 5500.0, 5500.0).unwrap();
        let mut state = ModelState::from_ssh(Field2D::zeros(g), &p);
        state.q = Field2D::constant(g, 1.25);
        let u = Field2D::constant(g, 1.0);
        let v = Field2D::constant(g, -0.5);
        let cfg = StepConfig::default();
        let next = advection_step(state, &u, &v, &cfg, &p).unwrap();
        for &val in next.q.values() {
            assert!((val - 1.25).abs() < 1e-12);
        }
    }
}
