//! Uniform rectangular grid, scalar fields, and stencil primitives.
//!
//! Fields are stored row-major with y as the leading dimension: the value at
//! row `iy`, column `ix` lives at `iy * nx + ix`. Stencils are applied by
//! cross-correlation with an explicit anchor cell so even-sized kernels (the
//! 2x3 gradient filters) have a well-defined placement. Out-of-range reads
//! follow a [`BoundaryPolicy`]; derivative stencils default to replicate-edge.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Uniform grid geometry. `dx`/`dy` are the cell sizes in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec<T: Scalar> {
    pub nx: usize,
    pub ny: usize,
    pub dx: T,
    pub dy: T,
}

impl<T: Scalar> GridSpec<T> {
    /// Builds a grid spec. Requires nx, ny >= 8 (room for the third-order
    /// upwind stencil plus its one-sided boundary fallback) and positive,
    /// finite spacings.
    pub fn new(nx: usize, ny: usize, dx: T, dy: T) -> Result<Self> {
        if nx < 8 || ny < 8 {
            return Err(Error::Config(format!(
                "grid must be at least 8x8, got {nx}x{ny}"
            )));
        }
        if !(dx.is_finite() && dy.is_finite()) || dx <= T::zero() || dy <= T::zero() {
            return Err(Error::Config(format!(
                "grid spacings must be positive and finite, got dx={dx}, dy={dy}"
            )));
        }
        Ok(GridSpec { nx, ny, dx, dy })
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// True for cells not on the outermost ring.
    #[inline]
    pub fn is_interior(&self, iy: usize, ix: usize) -> bool {
        iy >= 1 && iy + 1 < self.ny && ix >= 1 && ix + 1 < self.nx
    }
}

/// How a stencil reads cells that fall outside the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryPolicy<T: Scalar> {
    /// Clamp the index to the nearest edge cell (replicate-edge).
    Replicate,
    /// Out-of-range reads return the given constant.
    Fixed(T),
}

/// 2D scalar field on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D<T: Scalar> {
    grid: GridSpec<T>,
    values: Vec<T>,
}

impl<T: Scalar> Field2D<T> {
    pub fn zeros(grid: GridSpec<T>) -> Self {
        Field2D {
            grid,
            values: vec![T::zero(); grid.cells()],
        }
    }

    pub fn constant(grid: GridSpec<T>, c: T) -> Self {
        Field2D {
            grid,
            values: vec![c; grid.cells()],
        }
    }

    /// Wraps raw row-major values. Rejects wrong lengths and non-finite
    /// entries: every public operation keeps fields finite.
    pub fn from_values(grid: GridSpec<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(Error::Dimension(format!(
                "expected {} values for a {}x{} grid, got {}",
                grid.cells(),
                grid.ny,
                grid.nx,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "field value at flat index {i} is {}",
                values[i]
            )));
        }
        Ok(Field2D { grid, values })
    }

    /// Builds a field from a function of (iy, ix).
    pub fn from_fn(grid: GridSpec<T>, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(grid.cells());
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                values.push(f(iy, ix));
            }
        }
        Field2D { grid, values }
    }

    #[inline]
    pub fn grid(&self) -> GridSpec<T> {
        self.grid
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.grid.nx
    }

    #[inline]
    pub fn ny(&self) -> usize {
        self.grid.ny
    }

    #[inline]
    fn idx(&self, iy: usize, ix: usize) -> usize {
        debug_assert!(iy < self.grid.ny && ix < self.grid.nx);
        iy * self.grid.nx + ix
    }

    #[inline]
    pub fn at(&self, iy: usize, ix: usize) -> T {
        self.values[self.idx(iy, ix)]
    }

    #[inline]
    pub fn set(&mut self, iy: usize, ix: usize, v: T) {
        let i = self.idx(iy, ix);
        self.values[i] = v;
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn same_grid(&self, other: &Field2D<T>) -> Result<()> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "grids differ: {}x{} vs {}x{}",
                self.ny(),
                self.nx(),
                other.ny(),
                other.nx()
            )))
        }
    }

    fn zip_with(&self, other: &Field2D<T>, f: impl Fn(T, T) -> T) -> Field2D<T> {
        debug_assert_eq!(self.grid, other.grid, "field grids must match");
        let values = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Field2D {
            grid: self.grid,
            values,
        }
    }

    pub fn add(&self, other: &Field2D<T>) -> Field2D<T> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field2D<T>) -> Field2D<T> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Pointwise (Hadamard) product.
    pub fn mul(&self, other: &Field2D<T>) -> Field2D<T> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Field2D<T> {
        Field2D {
            grid: self.grid,
            values: self.values.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Field2D<T> {
        Field2D {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// self += s * other, in place. Summation order is the flat index order.
    pub(crate) fn add_scaled_assign(&mut self, s: T, other: &Field2D<T>) {
        debug_assert_eq!(self.grid, other.grid);
        for (a, &b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += s * b;
        }
    }

    /// Sequential sum in flat index order (deterministic).
    pub fn sum(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / lit::<T>(self.grid.cells() as f64)
    }

    /// Dot product in flat index order (deterministic).
    pub fn dot(&self, other: &Field2D<T>) -> T {
        debug_assert_eq!(self.grid, other.grid);
        self.values
            .iter()
            .zip(other.values.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn norm_l2(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Largest absolute difference to `other`.
    pub fn linf_diff(&self, other: &Field2D<T>) -> T {
        debug_assert_eq!(self.grid, other.grid);
        self.values
            .iter()
            .zip(other.values.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    /// Root-mean-square difference to `other` over all cells.
    pub fn rmse_to(&self, other: &Field2D<T>) -> T {
        debug_assert_eq!(self.grid, other.grid);
        let n = lit::<T>(self.grid.cells() as f64);
        let ss = self
            .values
            .iter()
            .zip(other.values.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        (ss / n).sqrt()
    }

    /// Mean and standard deviation over all cells (population std).
    pub fn mean_std(&self) -> (T, T) {
        let m = self.mean();
        let n = lit::<T>(self.grid.cells() as f64);
        let var = self
            .values
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - m) * (v - m))
            / n;
        (m, var.sqrt())
    }

    /// Copy with the outermost ring set to zero.
    pub fn masked_interior(&self) -> Field2D<T> {
        let mut out = self.clone();
        out.zero_ring();
        out
    }

    /// Overwrites the outermost ring with `other`'s ring values.
    pub(crate) fn copy_ring_from(&mut self, other: &Field2D<T>) {
        debug_assert_eq!(self.grid, other.grid);
        let (ny, nx) = (self.grid.ny, self.grid.nx);
        for ix in 0..nx {
            self.values[ix] = other.values[ix];
            self.values[(ny - 1) * nx + ix] = other.values[(ny - 1) * nx + ix];
        }
        for iy in 0..ny {
            self.values[iy * nx] = other.values[iy * nx];
            self.values[iy * nx + nx - 1] = other.values[iy * nx + nx - 1];
        }
    }

    pub(crate) fn zero_ring(&mut self) {
        let (ny, nx) = (self.grid.ny, self.grid.nx);
        for ix in 0..nx {
            self.values[ix] = T::zero();
            self.values[(ny - 1) * nx + ix] = T::zero();
        }
        for iy in 0..ny {
            self.values[iy * nx] = T::zero();
            self.values[iy * nx + nx - 1] = T::zero();
        }
    }

    /// True if any value is non-finite.
    pub fn has_non_finite(&self) -> bool {
        self.values.iter().any(|v| !v.is_finite())
    }
}

/// Anchored stencil kernel applied by cross-correlation.
///
/// `weights` is kh x kw row-major; tap (r, c) reads the input at
/// `(iy + r - anchor_y, ix + c - anchor_x)`. The result is divided by
/// `normalization` (e.g. dx for a dimensionless gradient filter).
#[derive(Debug, Clone, PartialEq)]
pub struct StencilKernel<T: Scalar> {
    pub kh: usize,
    pub kw: usize,
    pub anchor_y: usize,
    pub anchor_x: usize,
    weights: Vec<T>,
    pub normalization: T,
}

impl<T: Scalar> StencilKernel<T> {
    pub fn new(
        kh: usize,
        kw: usize,
        anchor_y: usize,
        anchor_x: usize,
        weights: Vec<T>,
        normalization: T,
    ) -> Result<Self> {
        if kh == 0 || kw == 0 || weights.len() != kh * kw {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} needs {} weights, got {}",
                kh * kw,
                weights.len()
            )));
        }
        if anchor_y >= kh || anchor_x >= kw {
            return Err(Error::Usage(format!(
                "anchor ({anchor_y},{anchor_x}) outside {kh}x{kw} kernel"
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("kernel weight".into()));
        }
        if !normalization.is_finite() || normalization == T::zero() {
            return Err(Error::Usage(format!(
                "kernel normalization must be finite and nonzero, got {normalization}"
            )));
        }
        Ok(StencilKernel {
            kh,
            kw,
            anchor_y,
            anchor_x,
            weights,
            normalization,
        })
    }

    #[inline]
    pub fn w(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.kh && c < self.kw);
        self.weights[r * self.kw + c]
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Transposed kernel: weights mirrored across the diagonal, anchor
    /// swapped. The normalization is kept and can be replaced afterwards.
    pub fn transposed(&self) -> StencilKernel<T> {
        let mut weights = vec![T::zero(); self.weights.len()];
        for r in 0..self.kh {
            for c in 0..self.kw {
                weights[c * self.kh + r] = self.w(r, c);
            }
        }
        StencilKernel {
            kh: self.kw,
            kw: self.kh,
            anchor_y: self.anchor_x,
            anchor_x: self.anchor_y,
            weights,
            normalization: self.normalization,
        }
    }

    pub fn with_normalization(mut self, normalization: T) -> StencilKernel<T> {
        self.normalization = normalization;
        self
    }

    /// Centered x-derivative: 1x3 kernel (-1/2, 0, 1/2) / dx.
    pub fn centered_x(dx: T) -> StencilKernel<T> {
        StencilKernel::new(
            1,
            3,
            0,
            1,
            vec![lit(-0.5), T::zero(), lit(0.5)],
            dx,
        )
        .expect("static kernel")
    }

    /// Centered y-derivative: 3x1 kernel (-1/2, 0, 1/2)^T / dy.
    pub fn centered_y(dy: T) -> StencilKernel<T> {
        StencilKernel::new(
            3,
            1,
            1,
            0,
            vec![lit(-0.5), T::zero(), lit(0.5)],
            dy,
        )
        .expect("static kernel")
    }
}

/// Reads `f` at possibly out-of-range indices under a boundary policy.
#[inline]
pub(crate) fn read_clamped<T: Scalar>(
    f: &Field2D<T>,
    policy: BoundaryPolicy<T>,
    iy: isize,
    ix: isize,
) -> T {
    let ny = f.ny() as isize;
    let nx = f.nx() as isize;
    match policy {
        BoundaryPolicy::Replicate => {
            let cy = iy.clamp(0, ny - 1);
            let cx = ix.clamp(0, nx - 1);
            f.values()[(cy as usize) * f.nx() + cx as usize]
        }
        BoundaryPolicy::Fixed(c) => {
            if iy < 0 || iy >= ny || ix < 0 || ix >= nx {
                c
            } else {
                f.values()[(iy as usize) * f.nx() + ix as usize]
            }
        }
    }
}

/// Cross-correlates `f` with `kernel` under `policy`. Output has the same
/// shape as the input; cells where the full stencil fits in-grid are the
/// exact cross-correlation, edge cells use the boundary policy.
pub fn convolve<T: Scalar>(
    f: &Field2D<T>,
    kernel: &StencilKernel<T>,
    policy: BoundaryPolicy<T>,
) -> Result<Field2D<T>> {
    if kernel.kh > f.ny() || kernel.kw > f.nx() {
        return Err(Error::Dimension(format!(
            "kernel {}x{} larger than grid {}x{}",
            kernel.kh,
            kernel.kw,
            f.ny(),
            f.nx()
        )));
    }
    let inv_norm = T::one() / kernel.normalization;
    let mut out = Field2D::zeros(f.grid());
    for iy in 0..f.ny() {
        for ix in 0..f.nx() {
            let mut acc = T::zero();
            for r in 0..kernel.kh {
                for c in 0..kernel.kw {
                    let sy = iy as isize + r as isize - kernel.anchor_y as isize;
                    let sx = ix as isize + c as isize - kernel.anchor_x as isize;
                    acc += kernel.w(r, c) * read_clamped(f, policy, sy, sx);
                }
            }
            out.set(iy, ix, acc * inv_norm);
        }
    }
    Ok(out)
}

/// Five-point Laplacian with replicate-edge boundary:
/// (E + W - 2C)/dx^2 + (N + S - 2C)/dy^2.
pub fn laplacian<T: Scalar>(f: &Field2D<T>) -> Field2D<T> {
    let g = f.grid();
    let inv_dx2 = T::one() / (g.dx * g.dx);
    let inv_dy2 = T::one() / (g.dy * g.dy);
    let two = lit::<T>(2.0);
    let mut out = Field2D::zeros(g);
    let p = BoundaryPolicy::Replicate;
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let c = f.at(iy, ix);
            let e = read_clamped(f, p, iy as isize, ix as isize + 1);
            let w = read_clamped(f, p, iy as isize, ix as isize - 1);
            let n = read_clamped(f, p, iy as isize + 1, ix as isize);
            let s = read_clamped(f, p, iy as isize - 1, ix as isize);
            out.set(iy, ix, (e + w - two * c) * inv_dx2 + (n + s - two * c) * inv_dy2);
        }
    }
    out
}

/// Centered x-derivative with replicate-edge boundary.
pub fn grad_x<T: Scalar>(f: &Field2D<T>) -> Field2D<T> {
    convolve(f, &StencilKernel::centered_x(f.grid().dx), BoundaryPolicy::Replicate)
        .expect("centered kernel fits any valid grid")
}

/// Centered y-derivative with replicate-edge boundary.
pub fn grad_y<T: Scalar>(f: &Field2D<T>) -> Field2D<T> {
    convolve(f, &StencilKernel::centered_y(f.grid().dy), BoundaryPolicy::Replicate)
        .expect("centered kernel fits any valid grid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nx: usize, ny: usize) -> GridSpec<f64> {
        GridSpec::new(nx, ny, 1.0, 1.0).unwrap()
    }

    /// Deterministic pseudo-random field (LCG; no external RNG needed here).
    fn noise(g: GridSpec<f64>, seed: u64) -> Field2D<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Field2D::from_fn(g, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
    }

    /// Averaged two-row gradient filter with unit normalization, the shape
    /// used by the geostrophic velocity stencils.
    fn two_row_gx() -> StencilKernel<f64> {
        StencilKernel::new(
            2,
            3,
            0,
            1,
            vec![-0.25, 0.0, 0.25, -0.25, 0.0, 0.25],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn grid_rejects_small_and_degenerate() {
        assert!(GridSpec::new(7, 8, 1.0, 1.0).is_err());
        assert!(GridSpec::new(8, 7, 1.0, 1.0).is_err());
        assert!(GridSpec::new(8, 8, 0.0, 1.0).is_err());
        assert!(GridSpec::new(8, 8, 1.0, -1.0).is_err());
        assert!(GridSpec::new(8, 8, 1.0, 1.0).is_ok());
    }

    #[test]
    fn field_rejects_non_finite_and_bad_len() {
        let g = grid(8, 8);
        assert!(Field2D::from_values(g, vec![0.0; 63]).is_err());
        let mut v = vec![0.0; 64];
        v[5] = f64::NAN;
        assert!(Field2D::from_values(g, v).is_err());
    }

    #[test]
    fn convolve_zero_field_is_zero() {
        let g = grid(8, 8);
        let f = Field2D::zeros(g);
        let out = convolve(&f, &two_row_gx(), BoundaryPolicy::Replicate).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn convolve_constant_with_gradient_kernel_vanishes_interior() {
        let g = grid(9, 8);
        let f = Field2D::constant(g, 3.7);
        let out = convolve(&f, &two_row_gx(), BoundaryPolicy::Replicate).unwrap();
        for iy in 0..g.ny - 1 {
            for ix in 1..g.nx - 1 {
                assert!(out.at(iy, ix).abs() < 1e-14, "at ({iy},{ix})");
            }
        }
    }

    #[test]
    fn convolve_column_ramp_gives_unit_gradient() {
        // f(iy, ix) = ix: the averaged two-row gradient filter yields
        // 0.25*((ix+1) - (ix-1)) summed over both rows = 1.0 everywhere the
        // stencil fits (hand-evaluated cross-correlation).
        let g = grid(8, 8);
        let f = Field2D::from_fn(g, |_, ix| ix as f64);
        let out = convolve(&f, &two_row_gx(), BoundaryPolicy::Replicate).unwrap();
        for iy in 0..g.ny - 1 {
            for ix in 1..g.nx - 1 {
                assert!((out.at(iy, ix) - 1.0).abs() < 1e-14, "at ({iy},{ix})");
            }
        }
    }

    #[test]
    fn convolve_identity_kernel_is_bit_exact() {
        let g = grid(11, 9);
        let f = noise(g, 7);
        let id = StencilKernel::new(1, 1, 0, 0, vec![1.0], 1.0).unwrap();
        let out = convolve(&f, &id, BoundaryPolicy::Replicate).unwrap();
        assert_eq!(out.values(), f.values());
    }

    #[test]
    fn convolve_is_linear() {
        let g = grid(10, 8);
        let k = two_row_gx();
        for seed in 0..8u64 {
            let a = noise(g, seed * 2 + 1);
            let b = noise(g, seed * 2 + 2);
            let (ca, cb) = (1.3, -0.7);
            let lhs = convolve(
                &a.scale(ca).add(&b.scale(cb)),
                &k,
                BoundaryPolicy::Replicate,
            )
            .unwrap();
            let rhs = convolve(&a, &k, BoundaryPolicy::Replicate)
                .unwrap()
                .scale(ca)
                .add(&convolve(&b, &k, BoundaryPolicy::Replicate).unwrap().scale(cb));
            assert!(lhs.linf_diff(&rhs) <= 1e-12 * (1.0 + rhs.max_abs()));
        }
    }

    #[test]
    fn convolve_rejects_oversized_kernel() {
        let g = grid(8, 8);
        let f = Field2D::zeros(g);
        let k = StencilKernel::new(9, 1, 0, 0, vec![1.0; 9], 1.0).unwrap();
        assert!(matches!(
            convolve(&f, &k, BoundaryPolicy::Replicate),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn fixed_boundary_reads_constant() {
        let g = grid(8, 8);
        let f = Field2D::constant(g, 1.0);
        // Forward-difference kernel reading one cell to the right.
        let k = StencilKernel::new(1, 2, 0, 0, vec![-1.0, 1.0], 1.0).unwrap();
        let out = convolve(&f, &k, BoundaryPolicy::Fixed(0.0)).unwrap();
        // Interior: 1 - 1 = 0. Right edge: 0 - 1 = -1 (fixed read).
        assert_eq!(out.at(3, 3), 0.0);
        assert_eq!(out.at(3, 7), -1.0);
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        let g = grid(8, 9);
        let f = Field2D::constant(g, 2.5);
        assert_eq!(laplacian(&f).max_abs(), 0.0);
    }

    #[test]
    fn laplacian_of_x_squared_is_two_interior() {
        let g = grid(12, 8);
        let f = Field2D::from_fn(g, |_, ix| (ix as f64) * (ix as f64));
        let out = laplacian(&f);
        for iy in 1..g.ny - 1 {
            for ix in 1..g.nx - 1 {
                assert!((out.at(iy, ix) - 2.0).abs() < 1e-12, "at ({iy},{ix})");
            }
        }
    }

    #[test]
    fn laplacian_matches_composed_second_difference_convolutions() {
        let g = GridSpec::new(10, 9, 0.7, 1.3).unwrap();
        let f = noise(g, 42);
        let kxx = StencilKernel::new(1, 3, 0, 1, vec![1.0, -2.0, 1.0], g.dx * g.dx).unwrap();
        let kyy = StencilKernel::new(3, 1, 1, 0, vec![1.0, -2.0, 1.0], g.dy * g.dy).unwrap();
        let via_conv = convolve(&f, &kxx, BoundaryPolicy::Replicate)
            .unwrap()
            .add(&convolve(&f, &kyy, BoundaryPolicy::Replicate).unwrap());
        assert!(laplacian(&f).linf_diff(&via_conv) < 1e-12);
    }

    #[test]
    fn grad_x_of_ramp_is_slope() {
        let g = GridSpec::new(10, 8, 2.0, 1.0).unwrap();
        let a = 0.37;
        let f = Field2D::from_fn(g, |_, ix| a * ix as f64 * g.dx);
        let gx = grad_x(&f);
        for iy in 0..g.ny {
            for ix in 1..g.nx - 1 {
                assert!((gx.at(iy, ix) - a).abs() < 1e-13);
            }
        }
        let c = Field2D::constant(g, 4.0);
        assert_eq!(grad_x(&c).max_abs(), 0.0);
        assert_eq!(grad_y(&c).max_abs(), 0.0);
    }

    #[test]
    fn grad_matches_explicit_centered_kernel() {
        let g = GridSpec::new(9, 10, 0.5, 2.0).unwrap();
        let f = noise(g, 3);
        let kx = StencilKernel::new(1, 3, 0, 1, vec![-0.5, 0.0, 0.5], g.dx).unwrap();
        let ky = StencilKernel::new(3, 1, 1, 0, vec![-0.5, 0.0, 0.5], g.dy).unwrap();
        assert!(grad_x(&f)
            .linf_diff(&convolve(&f, &kx, BoundaryPolicy::Replicate).unwrap())
            == 0.0);
        assert!(grad_y(&f)
            .linf_diff(&convolve(&f, &ky, BoundaryPolicy::Replicate).unwrap())
            == 0.0);
    }

    #[test]
    fn transpose_swaps_shape_anchor_and_weights() {
        let k = two_row_gx();
        let t = k.transposed();
        assert_eq!((t.kh, t.kw), (3, 2));
        assert_eq!((t.anchor_y, t.anchor_x), (1, 0));
        for r in 0..k.kh {
            for c in 0..k.kw {
                assert_eq!(k.w(r, c), t.w(c, r));
            }
        }
        // Transposing twice restores the kernel.
        assert_eq!(t.transposed(), k);
    }

    #[test]
    fn masked_interior_zeroes_ring_only() {
        let g = grid(8, 8);
        let f = Field2D::constant(g, 1.0);
        let m = f.masked_interior();
        assert_eq!(m.at(0, 3), 0.0);
        assert_eq!(m.at(7, 7), 0.0);
        assert_eq!(m.at(3, 0), 0.0);
        assert_eq!(m.at(4, 4), 1.0);
        assert_eq!(m.sum(), 36.0);
    }
}
