//! Multi-channel grids and the dense neural-net kernels that operate on
//! them: multi-channel convolution with replicate padding, batch
//! normalization, and leaky ReLU, each with its adjoint.

use crate::error::{Error, Result};
use crate::field::Field2D;
use crate::scalar::Scalar;

use super::params::Tensor;

/// `channels x ny x nx` values, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack<T: Scalar> {
    channels: usize,
    ny: usize,
    nx: usize,
    data: Vec<T>,
}

impl<T: Scalar> ChannelStack<T> {
    pub fn zeros(channels: usize, ny: usize, nx: usize) -> Self {
        ChannelStack {
            channels,
            ny,
            nx,
            data: vec![T::zero(); channels * ny * nx],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, iy: usize, ix: usize) -> T {
        self.data[(c * self.ny + iy) * self.nx + ix]
    }

    #[inline]
    pub fn set(&mut self, c: usize, iy: usize, ix: usize, v: T) {
        self.data[(c * self.ny + iy) * self.nx + ix] = v;
    }

    /// One channel as a flat slice.
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.ny * self.nx;
        &self.data[c * n..(c + 1) * n]
    }

    /// Copies one channel into a field on the given grid.
    pub fn channel_to_field(
        &self,
        c: usize,
        grid: &crate::field::GridSpec<T>,
    ) -> Result<Field2D<T>> {
        if grid.ny != self.ny || grid.nx != self.nx {
            return Err(Error::Dimension(format!(
                "stack is {}x{}, grid is {}x{}",
                self.ny, self.nx, grid.ny, grid.nx
            )));
        }
        Field2D::from_values(*grid, self.channel(c).to_vec())
    }

    /// Single-channel stack holding `(f - mean) / std`.
    pub fn standardized_from_field(f: &Field2D<T>, mean: T, std: T) -> ChannelStack<T> {
        let g = f.grid();
        let inv = T::one() / std;
        let mut s = ChannelStack::zeros(1, g.ny, g.nx);
        for (o, &v) in s.data.iter_mut().zip(f.values().iter()) {
            *o = (v - mean) * inv;
        }
        s
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Multi-channel cross-correlation with an `[out_c, in_c, kh, kw]` kernel.
/// Kernel extents must be odd; the window is centered on the output cell
/// with replicate padding at the edges. No bias term.
pub fn conv2d<T: Scalar>(input: &ChannelStack<T>, w: &Tensor<T>) -> Result<ChannelStack<T>> {
    let sh = w.shape();
    if sh.len() != 4 {
        return Err(Error::Dimension(format!(
            "conv kernel must be rank 4, got shape {sh:?}"
        )));
    }
    let (oc, ic, kh, kw) = (sh[0], sh[1], sh[2], sh[3]);
    if ic != input.channels {
        return Err(Error::Dimension(format!(
            "kernel expects {ic} input channels, stack has {}",
            input.channels
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Dimension(format!(
            "conv kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    let (ny, nx) = (input.ny, input.nx);
    let (ay, ax) = (kh as isize / 2, kw as isize / 2);
    let mut out = ChannelStack::zeros(oc, ny, nx);
    for o in 0..oc {
        for iy in 0..ny {
            for ix in 0..nx {
                let mut acc = T::zero();
                for c in 0..ic {
                    for r in 0..kh {
                        let sy = clamp_idx(iy as isize + r as isize - ay, ny);
                        for s in 0..kw {
                            let sx = clamp_idx(ix as isize + s as isize - ax, nx);
                            acc += w.data()[w.idx4(o, c, r, s)] * input.at(c, sy, sx);
                        }
                    }
                }
                out.set(o, iy, ix, acc);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] with respect to the input stack: scatters each
/// output cotangent back through the clamped taps.
pub(crate) fn conv2d_adjoint_input<T: Scalar>(
    g_out: &ChannelStack<T>,
    input_shape: (usize, usize, usize),
    w: &Tensor<T>,
) -> ChannelStack<T> {
    let sh = w.shape();
    let (oc, ic, kh, kw) = (sh[0], sh[1], sh[2], sh[3]);
    let (cin, ny, nx) = input_shape;
    debug_assert_eq!(cin, ic);
    debug_assert_eq!(g_out.channels, oc);
    let (ay, ax) = (kh as isize / 2, kw as isize / 2);
    let mut g_in = ChannelStack::zeros(ic, ny, nx);
    for o in 0..oc {
        for iy in 0..ny {
            for ix in 0..nx {
                let g = g_out.at(o, iy, ix);
                for c in 0..ic {
                    for r in 0..kh {
                        let sy = clamp_idx(iy as isize + r as isize - ay, ny);
                        for s in 0..kw {
                            let sx = clamp_idx(ix as isize + s as isize - ax, nx);
                            let slot = (c * ny + sy) * nx + sx;
                            g_in.data[slot] += w.data()[w.idx4(o, c, r, s)] * g;
                        }
                    }
                }
            }
        }
    }
    g_in
}

/// Adjoint of [`conv2d`] with respect to the kernel.
pub(crate) fn conv2d_adjoint_weight<T: Scalar>(
    g_out: &ChannelStack<T>,
    input: &ChannelStack<T>,
    w_shape: &[usize],
) -> Tensor<T> {
    let (oc, ic, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let (ny, nx) = (input.ny, input.nx);
    let (ay, ax) = (kh as isize / 2, kw as isize / 2);
    let mut g_w = Tensor::zeros(w_shape);
    for o in 0..oc {
        for iy in 0..ny {
            for ix in 0..nx {
                let g = g_out.at(o, iy, ix);
                for c in 0..ic {
                    for r in 0..kh {
                        let sy = clamp_idx(iy as isize + r as isize - ay, ny);
                        for s in 0..kw {
                            let sx = clamp_idx(ix as isize + s as isize - ax, nx);
                            let slot = g_w.idx4(o, c, r, s);
                            g_w.data_mut()[slot] += input.at(c, sy, sx) * g;
                        }
                    }
                }
            }
        }
    }
    g_w
}

/// Per-channel statistics saved by a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnStats<T: Scalar> {
    pub mean: Vec<T>,
    /// Population (biased) variance over the spatial dimensions.
    pub var: Vec<T>,
    /// Whether the stats were computed from this activation (training mode)
    /// or taken from running estimates (inference mode).
    pub from_batch: bool,
}

/// Batch normalization over the spatial dimensions of each channel:
/// `y = scale * (x - m) / sqrt(v + eps) + shift`. In training mode `m, v`
/// are computed from `input`; in inference mode they come from
/// `running_mean` / `running_var`.
pub fn batchnorm_forward<T: Scalar>(
    input: &ChannelStack<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    train: bool,
) -> Result<(ChannelStack<T>, BnStats<T>)> {
    let nc = input.channels;
    for (nm, t) in [
        ("scale", scale),
        ("shift", shift),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.numel() != nc {
            return Err(Error::Dimension(format!(
                "batchnorm {nm} has {} values for {nc} channels",
                t.numel()
            )));
        }
    }
    let n = input.ny * input.nx;
    let inv_n = T::one() / crate::scalar::lit::<T>(n as f64);
    let mut stats = BnStats {
        mean: Vec::with_capacity(nc),
        var: Vec::with_capacity(nc),
        from_batch: train,
    };
    for c in 0..nc {
        if train {
            let ch = input.channel(c);
            let mut m = T::zero();
            for &v in ch {
                m += v;
            }
            m *= inv_n;
            let mut var = T::zero();
            for &v in ch {
                let d = v - m;
                var += d * d;
            }
            var *= inv_n;
            stats.mean.push(m);
            stats.var.push(var);
        } else {
            stats.mean.push(running_mean.data()[c]);
            stats.var.push(running_var.data()[c]);
        }
    }
    let mut out = ChannelStack::zeros(nc, input.ny, input.nx);
    for c in 0..nc {
        let inv_std = T::one() / (stats.var[c] + eps).sqrt();
        let (sc, sh, m) = (scale.data()[c], shift.data()[c], stats.mean[c]);
        let base = c * n;
        for i in 0..n {
            out.data[base + i] = sc * (input.data[base + i] - m) * inv_std + sh;
        }
    }
    Ok((out, stats))
}

/// Adjoint of [`batchnorm_forward`]. Returns `(g_input, g_scale, g_shift)`.
/// In training mode the normalization statistics depend on the input, so the
/// full batch-norm backward applies; in inference mode they are constants.
pub(crate) fn batchnorm_backward<T: Scalar>(
    g_out: &ChannelStack<T>,
    input: &ChannelStack<T>,
    scale: &Tensor<T>,
    stats: &BnStats<T>,
    eps: T,
) -> (ChannelStack<T>, Tensor<T>, Tensor<T>) {
    let nc = input.channels;
    let n = input.ny * input.nx;
    let inv_n = T::one() / crate::scalar::lit::<T>(n as f64);
    let mut g_in = ChannelStack::zeros(nc, input.ny, input.nx);
    let mut g_scale = Tensor::zeros(&[nc]);
    let mut g_shift = Tensor::zeros(&[nc]);
    for c in 0..nc {
        let inv_std = T::one() / (stats.var[c] + eps).sqrt();
        let m = stats.mean[c];
        let base = c * n;
        let mut sum_g = T::zero();
        let mut sum_g_xhat = T::zero();
        for i in 0..n {
            let xhat = (input.data[base + i] - m) * inv_std;
            let g = g_out.data[base + i];
            sum_g += g;
            sum_g_xhat += g * xhat;
        }
        g_scale.data_mut()[c] = sum_g_xhat;
        g_shift.data_mut()[c] = sum_g;
        let sc = scale.data()[c];
        if stats.from_batch {
            // dx = (scale * inv_std) * (g - mean(g) - xhat * mean(g*xhat))
            let mg = sum_g * inv_n;
            let mgx = sum_g_xhat * inv_n;
            for i in 0..n {
                let xhat = (input.data[base + i] - m) * inv_std;
                let g = g_out.data[base + i];
                g_in.data[base + i] = sc * inv_std * (g - mg - xhat * mgx);
            }
        } else {
            for i in 0..n {
                g_in.data[base + i] = sc * inv_std * g_out.data[base + i];
            }
        }
    }
    (g_in, g_scale, g_shift)
}

pub fn leaky_relu<T: Scalar>(input: &ChannelStack<T>, slope: T) -> ChannelStack<T> {
    let mut out = input.clone();
    for v in out.data.iter_mut() {
        if *v < T::zero() {
            *v *= slope;
        }
    }
    out
}

pub(crate) fn leaky_relu_adjoint<T: Scalar>(
    g_out: &ChannelStack<T>,
    input: &ChannelStack<T>,
    slope: T,
) -> ChannelStack<T> {
    let mut g_in = g_out.clone();
    for (g, &x) in g_in.data.iter_mut().zip(input.data.iter()) {
        if x < T::zero() {
            *g *= slope;
        }
    }
    g_in
}
