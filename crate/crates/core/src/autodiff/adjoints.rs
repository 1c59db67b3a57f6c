//! Scatter adjoints of the stencil kernels. Each function is the exact
//! transpose of the corresponding forward map in `field`, `dynamics`, or
//! `elliptic`, including the boundary handling (replicate clamps scatter
//! into edge cells; fixed-value reads contribute nothing to the input
//! gradient).

use crate::dynamics::upwind_axis_taps;
use crate::field::{BoundaryPolicy, Field2D, StencilKernel};
use crate::scalar::{lit, Scalar};

#[inline]
fn scatter_clamped<T: Scalar>(
    g_in: &mut Field2D<T>,
    policy: BoundaryPolicy<T>,
    iy: isize,
    ix: isize,
    v: T,
) {
    let ny = g_in.ny() as isize;
    let nx = g_in.nx() as isize;
    match policy {
        BoundaryPolicy::Replicate => {
            let cy = iy.clamp(0, ny - 1) as usize;
            let cx = ix.clamp(0, nx - 1) as usize;
            let cur = g_in.at(cy, cx);
            g_in.set(cy, cx, cur + v);
        }
        BoundaryPolicy::Fixed(_) => {
            if iy >= 0 && iy < ny && ix >= 0 && ix < nx {
                let cur = g_in.at(iy as usize, ix as usize);
                g_in.set(iy as usize, ix as usize, cur + v);
            }
        }
    }
}

/// Adjoint of `field::convolve` with respect to the input field.
pub(crate) fn convolve_adjoint_input<T: Scalar>(
    g_out: &Field2D<T>,
    kernel: &StencilKernel<T>,
    policy: BoundaryPolicy<T>,
) -> Field2D<T> {
    let g = g_out.grid();
    let inv_norm = T::one() / kernel.normalization;
    let mut g_in = Field2D::zeros(g);
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let go = g_out.at(iy, ix) * inv_norm;
            for r in 0..kernel.kh {
                for c in 0..kernel.kw {
                    let sy = iy as isize + r as isize - kernel.anchor_y as isize;
                    let sx = ix as isize + c as isize - kernel.anchor_x as isize;
                    scatter_clamped(&mut g_in, policy, sy, sx, kernel.w(r, c) * go);
                }
            }
        }
    }
    g_in
}

/// Adjoint of `field::convolve` with respect to the kernel weights, for a
/// kernel of the given geometry. Returns the per-tap gradient, kh x kw
/// row-major in the kernel's own orientation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn convolve_adjoint_weights<T: Scalar>(
    g_out: &Field2D<T>,
    input: &Field2D<T>,
    kh: usize,
    kw: usize,
    anchor_y: usize,
    anchor_x: usize,
    normalization: T,
    policy: BoundaryPolicy<T>,
) -> Vec<T> {
    let g = g_out.grid();
    let inv_norm = T::one() / normalization;
    let mut g_w = vec![T::zero(); kh * kw];
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let go = g_out.at(iy, ix) * inv_norm;
            for r in 0..kh {
                for c in 0..kw {
                    let sy = iy as isize + r as isize - anchor_y as isize;
                    let sx = ix as isize + c as isize - anchor_x as isize;
                    g_w[r * kw + c] += crate::field::read_clamped(input, policy, sy, sx) * go;
                }
            }
        }
    }
    g_w
}

/// Adjoint of `field::laplacian` (5-point, replicate edges).
pub(crate) fn laplacian_adjoint<T: Scalar>(g_out: &Field2D<T>) -> Field2D<T> {
    let g = g_out.grid();
    let inv_dx2 = T::one() / (g.dx * g.dx);
    let inv_dy2 = T::one() / (g.dy * g.dy);
    let two = lit::<T>(2.0);
    let p = BoundaryPolicy::Replicate;
    let mut g_in = Field2D::zeros(g);
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let go = g_out.at(iy, ix);
            let cur = g_in.at(iy, ix);
            g_in.set(iy, ix, cur - two * go * (inv_dx2 + inv_dy2));
            scatter_clamped(&mut g_in, p, iy as isize, ix as isize + 1, go * inv_dx2);
            scatter_clamped(&mut g_in, p, iy as isize, ix as isize - 1, go * inv_dx2);
            scatter_clamped(&mut g_in, p, iy as isize + 1, ix as isize, go * inv_dy2);
            scatter_clamped(&mut g_in, p, iy as isize - 1, ix as isize, go * inv_dy2);
        }
    }
    g_in
}

/// Adjoint of `dynamics::upwind_x_with_signs` for a fixed sign mask.
pub(crate) fn upwind_x_adjoint<T: Scalar>(g_out: &Field2D<T>, positive: &[bool]) -> Field2D<T> {
    let g = g_out.grid();
    let inv_6dx = T::one() / (lit::<T>(6.0) * g.dx);
    let mut g_in = Field2D::zeros(g);
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let go = g_out.at(iy, ix) * inv_6dx;
            let (taps, len) = upwind_axis_taps(g.nx, ix, positive[iy * g.nx + ix]);
            for &(di, c) in &taps[..len] {
                let sx = (ix as isize + di) as usize;
                let cur = g_in.at(iy, sx);
                g_in.set(iy, sx, cur + lit::<T>(c as f64) * go);
            }
        }
    }
    g_in
}

/// Adjoint of `dynamics::upwind_y_with_signs` for a fixed sign mask.
pub(crate) fn upwind_y_adjoint<T: Scalar>(g_out: &Field2D<T>, positive: &[bool]) -> Field2D<T> {
    let g = g_out.grid();
    let inv_6dy = T::one() / (lit::<T>(6.0) * g.dy);
    let mut g_in = Field2D::zeros(g);
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let go = g_out.at(iy, ix) * inv_6dy;
            let (taps, len) = upwind_axis_taps(g.ny, iy, positive[iy * g.nx + ix]);
            for &(di, c) in &taps[..len] {
                let sy = (iy as isize + di) as usize;
                let cur = g_in.at(sy, ix);
                g_in.set(sy, ix, cur + lit::<T>(c as f64) * go);
            }
        }
    }
    g_in
}

/// Adjoint of `elliptic`'s interior Helmholtz rows (zero ring output). The
/// scatter reaches ring cells through the interior cells that read them.
pub(crate) fn helmholtz_interior_adjoint<T: Scalar>(g_out: &Field2D<T>, l_r: T) -> Field2D<T> {
    let g = g_out.grid();
    let inv_dx2 = T::one() / (g.dx * g.dx);
    let inv_dy2 = T::one() / (g.dy * g.dy);
    let inv_lr2 = T::one() / (l_r * l_r);
    let two = lit::<T>(2.0);
    let diag = -two * (inv_dx2 + inv_dy2) - inv_lr2;
    let mut g_in = Field2D::zeros(g);
    for iy in 1..g.ny - 1 {
        for ix in 1..g.nx - 1 {
            let go = g_out.at(iy, ix);
            let acc = |f: &mut Field2D<T>, y: usize, x: usize, v: T| {
                let cur = f.at(y, x);
                f.set(y, x, cur + v);
            };
            acc(&mut g_in, iy, ix, go * diag);
            acc(&mut g_in, iy, ix + 1, go * inv_dx2);
            acc(&mut g_in, iy, ix - 1, go * inv_dx2);
            acc(&mut g_in, iy + 1, ix, go * inv_dy2);
            acc(&mut g_in, iy - 1, ix, go * inv_dy2);
        }
    }
    g_in
}
