//! Raw slice kernels behind the tape operations.
//!
//! Convolution is lowered to im2col + GEMM. All kernels are single-threaded
//! and deterministic for a given input.

/// Strided matrix view for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn fits(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
        last < self.data.len()
    }
}

/// `out = beta * out + a · b`, with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.fits() && b.fits(), "gemm operand out of bounds");
    assert!(out.len() >= a.rows * b.cols, "gemm output too small");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        out[..a.rows * b.cols].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: bounds of every operand were checked above.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col(g: &ConvGeom, input: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    let dst_row = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        dst_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], grad_input: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c_in {
        let plane = &mut grad_input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.w as isize {
                            plane[ih as usize * g.w + iw as usize] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let p = g.positions();
    let kdim = g.patch();
    let mut out = vec![0.0; g.n * g.c_out * p];
    let mut cols = vec![0.0; kdim * p];
    let in_stride = g.c_in * g.h * g.w;
    for n in 0..g.n {
        im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut cols);
        let dst = &mut out[n * g.c_out * p..(n + 1) * g.c_out * p];
        for (co, row) in dst.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        gemm(
            Mat::row_major(weight, g.c_out, kdim),
            Mat::row_major(&cols, kdim, p),
            1.0,
            dst,
        );
    }
    out
}

/// Accumulates convolution gradients into whichever buffers are supplied.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let p = g.positions();
    let kdim = g.patch();
    let in_stride = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; kdim * p];
    let mut dcols = vec![0.0; kdim * p];
    for n in 0..g.n {
        let go = &grad_out[n * g.c_out * p..(n + 1) * g.c_out * p];
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (co, row) in go.chunks(p).enumerate() {
                gb[co] += row.iter().sum::<f64>();
            }
        }
        if let Some(gw) = grad_weight.as_deref_mut() {
            im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut cols);
            gemm(
                Mat::row_major(go, g.c_out, p),
                Mat::row_major(&cols, kdim, p).t(),
                1.0,
                gw,
            );
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            gemm(
                Mat::row_major(weight, g.c_out, kdim).t(),
                Mat::row_major(go, g.c_out, p),
                0.0,
                &mut dcols,
            );
            col2im_add(g, &dcols, &mut gi[n * in_stride..(n + 1) * in_stride]);
        }
    }
}

/// `input (n×d_in) · weightᵀ (d_in×d_out) + bias`.
pub(crate) fn dense_forward(input: &[f64], weight: &[f64], bias: &[f64], n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    gemm(
        Mat::row_major(input, n, d_in),
        Mat::row_major(weight, d_out, d_in).t(),
        1.0,
        &mut out,
    );
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    n: usize,
    d_in: usize,
    d_out: usize,
    grad_input: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    if let Some(gi) = grad_input {
        gemm(
            Mat::row_major(grad_out, n, d_out),
            Mat::row_major(weight, d_out, d_in),
            1.0,
            gi,
        );
    }
    if let Some(gw) = grad_weight {
        gemm(
            Mat::row_major(grad_out, n, d_out).t(),
            Mat::row_major(input, n, d_in),
            1.0,
            gw,
        );
    }
    if let Some(gb) = grad_bias {
        for row in grad_out.chunks(d_out) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
    }
}
