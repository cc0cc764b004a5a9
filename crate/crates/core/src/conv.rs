//! Dense 3×3×3 convolution (padding 1, stride 1 or 2) and nearest ×2 upsampling
//! on `[C, X, Y, Z]` tensors.
//!
//! The convolution lowers slabs of output positions to a column matrix and
//! multiplies with the reshaped kernel, bounding scratch memory per slab.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView4, ArrayView5, ArrayViewMut2};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL * KERNEL;
/// Upper bound on column-matrix entries per slab.
const COL_BUDGET: usize = 1 << 22;

pub fn output_dim(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

fn out_shape(x: &ArrayView4<f64>, stride: usize) -> [usize; 3] {
    let s = x.shape();
    [
        output_dim(s[1], stride),
        output_dim(s[2], stride),
        output_dim(s[3], stride),
    ]
}

/// Output x-rows per slab.
fn slab_rows(cin: usize, out: [usize; 3]) -> usize {
    let per_row = cin * TAPS * out[1] * out[2];
    (COL_BUDGET / per_row.max(1)).clamp(1, out[0])
}

/// Valid output index range along one axis for kernel tap `k`:
/// input index `o*stride + k - 1` must land in `[0, n)`.
#[inline]
fn valid_range(k: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    // o*stride + k - 1 <= n_in - 1  ->  o <= (n_in - k) / stride
    let hi = if n_in + 1 > k {
        ((n_in - k) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &ArrayView4<f64>, stride: usize, out: [usize; 3], rows: (usize, usize), col: &mut ArrayViewMut2<f64>) {
    let [cin, nx, ny, nz] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (r0, r1) = rows;
    let plane = out[1] * out[2];
    col.fill(0.0);
    let xs = x.as_slice().expect("standard layout input");
    for ci in 0..cin {
        let base_c = ci * nx * ny * nz;
        for kx in 0..KERNEL {
            let (xlo, xhi) = valid_range(kx, stride, nx, out[0]);
            for ky in 0..KERNEL {
                let (ylo, yhi) = valid_range(ky, stride, ny, out[1]);
                for kz in 0..KERNEL {
                    let (zlo, zhi) = valid_range(kz, stride, nz, out[2]);
                    let row = ci * TAPS + (kx * KERNEL + ky) * KERNEL + kz;
                    let mut dst = col.row_mut(row);
                    let dst = dst.as_slice_mut().expect("contiguous column row");
                    for ox in r0.max(xlo)..r1.min(xhi) {
                        let ix = ox * stride + kx - 1;
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - 1;
                            let src = base_c + (ix * ny + iy) * nz;
                            let d = (ox - r0) * plane + oy * out[2];
                            for oz in zlo..zhi {
                                dst[d + oz] = xs[src + oz * stride + kz - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(gcol: &Array2<f64>, stride: usize, out: [usize; 3], rows: (usize, usize), gx: &mut Array4<f64>) {
    let [cin, nx, ny, nz] = [gx.shape()[0], gx.shape()[1], gx.shape()[2], gx.shape()[3]];
    let (r0, r1) = rows;
    let plane = out[1] * out[2];
    let gs = gx.as_slice_mut().expect("standard layout gradient");
    for ci in 0..cin {
        let base_c = ci * nx * ny * nz;
        for kx in 0..KERNEL {
            let (xlo, xhi) = valid_range(kx, stride, nx, out[0]);
            for ky in 0..KERNEL {
                let (ylo, yhi) = valid_range(ky, stride, ny, out[1]);
                for kz in 0..KERNEL {
                    let (zlo, zhi) = valid_range(kz, stride, nz, out[2]);
                    let row = ci * TAPS + (kx * KERNEL + ky) * KERNEL + kz;
                    let src = gcol.row(row);
                    let src = src.as_slice().expect("contiguous column row");
                    for ox in r0.max(xlo)..r1.min(xhi) {
                        let ix = ox * stride + kx - 1;
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - 1;
                            let dst = base_c + (ix * ny + iy) * nz;
                            let s = (ox - r0) * plane + oy * out[2];
                            for oz in zlo..zhi {
                                gs[dst + oz * stride + kz - 1] += src[s + oz];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `x: [Cin, X, Y, Z]`, `w: [Cout, Cin, 3, 3, 3]`, `b: [Cout]`.
pub fn conv3d(x: ArrayView4<f64>, w: ArrayView5<f64>, b: ArrayView1<f64>, stride: usize) -> Array4<f64> {
    let x = x.as_standard_layout();
    let x = x.view();
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    assert_eq!(cin, x.shape()[0], "conv3d input channels");
    let out = out_shape(&x, stride);
    let w2 = w.as_standard_layout();
    let w2 = w2.view().into_shape_with_order((cout, cin * TAPS)).expect("kernel reshape");
    let plane = out[1] * out[2];
    let mut y = Array2::<f64>::zeros((cout, out[0] * plane));
    let rows = slab_rows(cin, out);
    let mut col = Array2::<f64>::zeros((cin * TAPS, rows * plane));
    let mut r0 = 0;
    while r0 < out[0] {
        let r1 = (r0 + rows).min(out[0]);
        let cols = (r1 - r0) * plane;
        let mut cview = col.slice_mut(s![.., ..cols]);
        im2col(&x, stride, out, (r0, r1), &mut cview);
        let mut yv = y.slice_mut(s![.., r0 * plane..r1 * plane]);
        general_mat_mul(1.0, &w2, &col.slice(s![.., ..cols]), 0.0, &mut yv);
        r0 = r1;
    }
    for (mut row, &bias) in y.rows_mut().into_iter().zip(b.iter()) {
        row += bias;
    }
    y.into_shape_with_order((cout, out[0], out[1], out[2]))
        .expect("output reshape")
}

pub struct ConvGrads {
    pub input: Option<Array4<f64>>,
    pub weight: ndarray::Array5<f64>,
    pub bias: Array1<f64>,
}

pub fn conv3d_backward(
    x: ArrayView4<f64>,
    w: ArrayView5<f64>,
    grad_out: ArrayView4<f64>,
    stride: usize,
    need_input: bool,
) -> ConvGrads {
    let x = x.as_standard_layout();
    let x = x.view();
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let out = out_shape(&x, stride);
    let plane = out[1] * out[2];
    let w2 = w.as_standard_layout();
    let w2 = w2.view().into_shape_with_order((cout, cin * TAPS)).expect("kernel reshape");
    let g = grad_out.as_standard_layout();
    let g2 = g
        .view()
        .into_shape_with_order((cout, out[0] * plane))
        .expect("gradient reshape");

    let mut gw = Array2::<f64>::zeros((cout, cin * TAPS));
    let mut gx = need_input.then(|| Array4::<f64>::zeros(x.raw_dim()));
    let rows = slab_rows(cin, out);
    let mut col = Array2::<f64>::zeros((cin * TAPS, rows * plane));
    let mut r0 = 0;
    while r0 < out[0] {
        let r1 = (r0 + rows).min(out[0]);
        let cols = (r1 - r0) * plane;
        let gslab = g2.slice(s![.., r0 * plane..r1 * plane]);
        {
            let mut cview = col.slice_mut(s![.., ..cols]);
            im2col(&x, stride, out, (r0, r1), &mut cview);
        }
        general_mat_mul(1.0, &gslab, &col.slice(s![.., ..cols]).t(), 1.0, &mut gw);
        if let Some(gx) = gx.as_mut() {
            let mut gcol = Array2::<f64>::zeros((cin * TAPS, cols));
            general_mat_mul(1.0, &w2.t(), &gslab, 0.0, &mut gcol);
            col2im(&gcol, stride, out, (r0, r1), gx);
        }
        r0 = r1;
    }
    let bias = g2.sum_axis(ndarray::Axis(1));
    ConvGrads {
        input: gx,
        weight: gw
            .into_shape_with_order((cout, cin, KERNEL, KERNEL, KERNEL))
            .expect("kernel reshape"),
        bias,
    }
}

pub fn upsample2(x: ArrayView4<f64>) -> Array4<f64> {
    let [c, nx, ny, nz] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    Array4::from_shape_fn((c, 2 * nx, 2 * ny, 2 * nz), |(ci, i, j, k)| {
        x[[ci, i / 2, j / 2, k / 2]]
    })
}

pub fn upsample2_backward(grad_out: ArrayView4<f64>) -> Array4<f64> {
    let [c, nx, ny, nz] = [
        grad_out.shape()[0],
        grad_out.shape()[1] / 2,
        grad_out.shape()[2] / 2,
        grad_out.shape()[3] / 2,
    ];
    let mut g = Array4::zeros((c, nx, ny, nz));
    for ((ci, i, j, k), &v) in grad_out.indexed_iter() {
        g[[ci, i / 2, j / 2, k / 2]] += v;
    }
    g
}
