//! Dense kernels shared by the convolution and matrix ops.

/// Row-major matrix view described by its dimensions and strides.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `out = a · b + beta · out`, where `out` is a row-major `a.rows × b.cols` buffer.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views were constructed over slices at least as large as
    // rows * cols with the given strides, and `out` has exactly m * n slots.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution over `[N, C, H, W]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            batch,
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds `x` into a `[C·k·k, N·Ho·Wo]` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, s, p) = (g.kernel, g.stride as isize, g.pad as isize);
    let cols = g.col_cols();
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.col_rows() * cols];
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let src = &x[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oh in 0..g.out_h {
                        let ih = oh as isize * s - p + ki as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.width..][..g.width];
                        let dst_row = &mut dst[n * plane + oh * g.out_w..][..g.out_w];
                        for (ow, d) in dst_row.iter_mut().enumerate() {
                            let iw = ow as isize * s - p + kj as isize;
                            if iw >= 0 && iw < g.width as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters columns back onto an `[N, C, H, W]` buffer.
pub(crate) fn col2im(cols_data: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, s, p) = (g.kernel, g.stride as isize, g.pad as isize);
    let cols = g.col_cols();
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let dst = &mut out[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oh in 0..g.out_h {
                        let ih = oh as isize * s - p + ki as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ih as usize * g.width..][..g.width];
                        let src_row = &src[n * plane + oh * g.out_w..][..g.out_w];
                        for (ow, v) in src_row.iter().enumerate() {
                            let iw = ow as isize * s - p + kj as isize;
                            if iw >= 0 && iw < g.width as isize {
                                dst_row[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[N, C, P]` → `[C, N·P]`.
pub(crate) fn batch_to_channel_major(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * plane + b * plane..][..plane].copy_from_slice(&x[(b * c + ch) * plane..][..plane]);
        }
    }
    out
}

/// `[C, N·P]` → `[N, C, P]`.
pub(crate) fn channel_to_batch_major(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * plane..][..plane].copy_from_slice(&x[ch * n * plane + b * plane..][..plane]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut out = vec![0.0; 8];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), 0.0, &mut out);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(out[i * 4 + j], want);
            }
        }
        // aᵀ·a is 3x3
        let mut ata = vec![0.0; 9];
        gemm(MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), 0.0, &mut ata);
        assert_eq!(ata[0], 0.0 * 0.0 + 3.0 * 3.0);
        assert_eq!(ata[5], 1.0 * 2.0 + 4.0 * 5.0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 3, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|v| ((v * 5) % 13) as f64 - 6.0)
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
