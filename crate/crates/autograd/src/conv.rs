//! Raw 3D convolution kernels on contiguous buffers.
//!
//! Both the strided and the transposed convolution lower to one GEMM per
//! sample over an im2col matrix whose rows enumerate `(channel, kz, ky, kx)`
//! and whose columns enumerate output voxels of the strided convolution.

use crate::element::Element;
use crate::error::{shape_err, Result};

/// Geometry of a strided 3D convolution from an input grid to an output grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 {
                return shape_err("convolution stride must be at least 1");
            }
            if input[a] == 0 {
                return shape_err(format!("zero-extent input {input:?}"));
            }
            if kernel[a] == 0 {
                return shape_err(format!("zero-extent kernel {kernel:?}"));
            }
            let padded = input[a] + 2 * pad[a];
            if padded < kernel[a] {
                return shape_err(format!(
                    "kernel {kernel:?} larger than padded input {input:?} (pad {pad:?})"
                ));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            channels,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn input_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_volume(&self) -> usize {
        self.output.iter().product()
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_volume()
    }

    /// 1×1×1, stride 1, no padding: the im2col matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Range of output indices along `axis` whose tap `k` lands inside the input.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n_in, n_out) = (self.stride[axis], self.pad[axis], self.input[axis], self.output[axis]);
        // input index = o*s + k - p must lie in [0, n_in)
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if n_in + p > k {
            ((n_in + p - k - 1) / s + 1).min(n_out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Fills `col` (`col_rows × output_volume`) from one sample's input.
pub fn im2col<E: Element>(g: &ConvGeometry, input: &[E], col: &mut [E]) {
    let [id, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let vout = g.output_volume();
    debug_assert_eq!(col.len(), g.col_rows() * vout);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            let (z_lo, z_hi) = g.valid_range(0, kz);
            for ky in 0..kh {
                let (y_lo, y_hi) = g.valid_range(1, ky);
                for kx in 0..kw {
                    let (x_lo, x_hi) = g.valid_range(2, kx);
                    let dst = &mut col[row * vout..(row + 1) * vout];
                    dst.fill(E::zero());
                    for oz in z_lo..z_hi {
                        let iz = oz * sd + kz - pd;
                        for oy in y_lo..y_hi {
                            let iy = oy * sh + ky - ph;
                            let src_row = &plane[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            let dst_row = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if x_lo >= x_hi {
                                continue;
                            }
                            if sw == 1 {
                                let start = x_lo + kx - pw;
                                dst_row[x_lo..x_hi].copy_from_slice(&src_row[start..start + (x_hi - x_lo)]);
                            } else {
                                for ox in x_lo..x_hi {
                                    dst_row[ox] = src_row[ox * sw + kx - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatters-and-accumulates `col` back onto one sample's input grid (adjoint of [`im2col`]).
pub fn col2im<E: Element>(g: &ConvGeometry, col: &[E], input: &mut [E]) {
    let [id, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let vout = g.output_volume();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut input[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            let (z_lo, z_hi) = g.valid_range(0, kz);
            for ky in 0..kh {
                let (y_lo, y_hi) = g.valid_range(1, ky);
                for kx in 0..kw {
                    let (x_lo, x_hi) = g.valid_range(2, kx);
                    let src = &col[row * vout..(row + 1) * vout];
                    for oz in z_lo..z_hi {
                        let iz = oz * sd + kz - pd;
                        for oy in y_lo..y_hi {
                            let iy = oy * sh + ky - ph;
                            let dst_row = &mut plane[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            let src_row = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if x_lo >= x_hi {
                                continue;
                            }
                            if sw == 1 {
                                let start = x_lo + kx - pw;
                                for (d, &s) in dst_row[start..start + (x_hi - x_lo)]
                                    .iter_mut()
                                    .zip(&src_row[x_lo..x_hi])
                                {
                                    *d += s;
                                }
                            } else {
                                for ox in x_lo..x_hi {
                                    dst_row[ox * sw + kx - pw] += src_row[ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Strided convolution. `kernel` is `cout × (cin·kvol)` row-major.
/// Returns `batch × cout × output_volume`.
pub fn conv_forward<E: Element>(
    g: &ConvGeometry,
    batch: usize,
    cout: usize,
    input: &[E],
    kernel: &[E],
    bias: Option<&[E]>,
) -> Vec<E> {
    let vin = g.input_volume();
    let vout = g.output_volume();
    let rows = g.col_rows();
    let mut out = vec![E::zero(); batch * cout * vout];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![E::zero(); rows * vout]
    };
    for n in 0..batch {
        let x = &input[n * g.channels * vin..(n + 1) * g.channels * vin];
        let b_mat: &[E] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut col);
            &col
        };
        let y = &mut out[n * cout * vout..(n + 1) * cout * vout];
        if let Some(bias) = bias {
            for (co, &b) in bias.iter().enumerate() {
                y[co * vout..(co + 1) * vout].fill(b);
            }
        }
        let beta = if bias.is_some() { E::one() } else { E::zero() };
        E::gemm(
            cout,
            rows,
            vout,
            kernel,
            rows as isize,
            1,
            b_mat,
            vout as isize,
            1,
            beta,
            y,
            vout as isize,
            1,
        );
    }
    out
}

/// Gradients of [`conv_forward`]. Each output slot is optional so callers
/// only pay for what requires a gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<E: Element>(
    g: &ConvGeometry,
    batch: usize,
    cout: usize,
    input: &[E],
    kernel: &[E],
    grad_out: &[E],
    mut grad_input: Option<&mut [E]>,
    mut grad_kernel: Option<&mut [E]>,
    grad_bias: Option<&mut [E]>,
) {
    let vin = g.input_volume();
    let vout = g.output_volume();
    let rows = g.col_rows();
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![E::zero(); rows * vout]
    };
    for n in 0..batch {
        let x = &input[n * g.channels * vin..(n + 1) * g.channels * vin];
        let dy = &grad_out[n * cout * vout..(n + 1) * cout * vout];
        if let Some(dk) = grad_kernel.as_deref_mut() {
            let b_mat: &[E] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut col);
                &col
            };
            // dK[cout, rows] += dY[cout, vout] · col^T
            E::gemm(
                cout,
                vout,
                rows,
                dy,
                vout as isize,
                1,
                b_mat,
                1,
                vout as isize,
                E::one(),
                dk,
                rows as isize,
                1,
            );
        }
        if let Some(dx_all) = grad_input.as_deref_mut() {
            let dx = &mut dx_all[n * g.channels * vin..(n + 1) * g.channels * vin];
            if g.is_pointwise() {
                E::gemm(
                    rows,
                    cout,
                    vout,
                    kernel,
                    1,
                    rows as isize,
                    dy,
                    vout as isize,
                    1,
                    E::one(),
                    dx,
                    vout as isize,
                    1,
                );
            } else {
                E::gemm(
                    rows,
                    cout,
                    vout,
                    kernel,
                    1,
                    rows as isize,
                    dy,
                    vout as isize,
                    1,
                    E::zero(),
                    &mut col,
                    vout as isize,
                    1,
                );
                col2im(g, &col, dx);
            }
        }
    }
    if let Some(db) = grad_bias {
        accumulate_channel_sums(batch, cout, vout, grad_out, db);
    }
}

/// Transposed convolution: the adjoint of [`conv_forward`] over geometry `g`
/// (whose *input* grid is this op's output). `input` is `batch × cin × output_volume(g)`
/// with `cin` the strided conv's `cout`; `kernel` is `cin × (cout·kvol)`.
pub fn conv_transpose_forward<E: Element>(
    g: &ConvGeometry,
    batch: usize,
    cin: usize,
    input: &[E],
    kernel: &[E],
    bias: Option<&[E]>,
) -> Vec<E> {
    let vsmall = g.output_volume();
    let vbig = g.input_volume();
    let rows = g.col_rows();
    let cout = g.channels;
    let mut out = vec![E::zero(); batch * cout * vbig];
    let mut col = vec![E::zero(); rows * vsmall];
    for n in 0..batch {
        let y = &input[n * cin * vsmall..(n + 1) * cin * vsmall];
        // col[rows, vsmall] = K^T · y
        E::gemm(
            rows,
            cin,
            vsmall,
            kernel,
            1,
            rows as isize,
            y,
            vsmall as isize,
            1,
            E::zero(),
            &mut col,
            vsmall as isize,
            1,
        );
        let o = &mut out[n * cout * vbig..(n + 1) * cout * vbig];
        if let Some(bias) = bias {
            for (c, &b) in bias.iter().enumerate() {
                o[c * vbig..(c + 1) * vbig].fill(b);
            }
        }
        col2im(g, &col, o);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward<E: Element>(
    g: &ConvGeometry,
    batch: usize,
    cin: usize,
    input: &[E],
    kernel: &[E],
    grad_out: &[E],
    mut grad_input: Option<&mut [E]>,
    mut grad_kernel: Option<&mut [E]>,
    grad_bias: Option<&mut [E]>,
) {
    let vsmall = g.output_volume();
    let vbig = g.input_volume();
    let rows = g.col_rows();
    let cout = g.channels;
    let mut col = vec![E::zero(); rows * vsmall];
    for n in 0..batch {
        let dy_big = &grad_out[n * cout * vbig..(n + 1) * cout * vbig];
        im2col(g, dy_big, &mut col);
        if let Some(dx_all) = grad_input.as_deref_mut() {
            let dx = &mut dx_all[n * cin * vsmall..(n + 1) * cin * vsmall];
            // dX[cin, vsmall] += K[cin, rows] · col
            E::gemm(
                cin,
                rows,
                vsmall,
                kernel,
                rows as isize,
                1,
                &col,
                vsmall as isize,
                1,
                E::one(),
                dx,
                vsmall as isize,
                1,
            );
        }
        if let Some(dk) = grad_kernel.as_deref_mut() {
            let y = &input[n * cin * vsmall..(n + 1) * cin * vsmall];
            // dK[cin, rows] += y[cin, vsmall] · col^T
            E::gemm(
                cin,
                vsmall,
                rows,
                y,
                vsmall as isize,
                1,
                &col,
                1,
                vsmall as isize,
                E::one(),
                dk,
                rows as isize,
                1,
            );
        }
    }
    if let Some(db) = grad_bias {
        accumulate_channel_sums(batch, cout, vbig, grad_out, db);
    }
}

fn accumulate_channel_sums<E: Element>(batch: usize, channels: usize, volume: usize, data: &[E], out: &mut [E]) {
    for (c, slot) in out.iter_mut().enumerate().take(channels) {
        let mut acc = 0.0f64;
        for n in 0..batch {
            let start = (n * channels + c) * volume;
            acc += data[start..start + volume].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        *slot += E::lit(acc);
    }
}
