//! im2col convolution kernels backed by `matrixmultiply::dgemm`.

use crate::error::{Error, Result};

/// Geometry of a same-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize) -> Result<Self> {
        let (&[n, c_in, h, w], &[c_out, wc_in, kh, kw]) = (input, weight) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected rank-4 input and weight, got {input:?} and {weight:?}"),
            ));
        };
        if c_in != wc_in {
            return Err(Error::shape("conv2d", format!("input has {c_in} channels, weight expects {wc_in}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::EvenKernel(kh, kw));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        Ok(ConvGeom { batch: n, c_in, c_out, height: h, width: w, kh, kw, stride })
    }

    pub fn out_height(&self) -> usize {
        self.height.div_ceil(self.stride)
    }

    pub fn out_width(&self) -> usize {
        self.width.div_ceil(self.stride)
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.out_height(), self.out_width()]
    }

    /// Rows of the im2col matrix (`C_in·kH·kW`).
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Output positions per batch item.
    pub fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// A 1×1 stride-1 convolution reads its input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }
}

/// Column matrix for batch item `n`: `[patch_len, out_plane]` row-major.
fn im2col_item(g: &ConvGeom, input: &[f64], n: usize, cols: &mut [f64]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let (ho, wo) = (g.out_height(), g.out_width());
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let plane = ho * wo;
    let item = &input[n * g.c_in * g.height * g.width..(n + 1) * g.c_in * g.height * g.width];
    for ci in 0..g.c_in {
        let chan = &item[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + ky as isize - ph;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + kx as isize - pw;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column-gradient matrix back onto the input gradient.
fn col2im_item(g: &ConvGeom, cols: &[f64], n: usize, grad_input: &mut [f64]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let (ho, wo) = (g.out_height(), g.out_width());
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let plane = ho * wo;
    let hw = g.height * g.width;
    let item = &mut grad_input[n * g.c_in * hw..(n + 1) * g.c_in * hw];
    for ci in 0..g.c_in {
        let chan = &mut item[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + ky as isize - ph;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride) as isize + kx as isize - pw;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha·op(a)·op(b) + beta·c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * n + n - 1 < c.len());
    // SAFETY: the debug assertions above spell out the extents; every caller
    // derives strides from the same `ConvGeom` that sized the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution. Returns the output and the saved column matrices
/// (empty for pointwise convolutions, which reuse the input).
pub(crate) fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let plane = g.out_plane();
    let klen = g.patch_len();
    let mut out = vec![0.0; g.batch * g.c_out * plane];
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; g.batch * klen * plane] };
    for n in 0..g.batch {
        let col: &[f64] = if pointwise {
            &input[n * klen * plane..(n + 1) * klen * plane]
        } else {
            let slot = &mut cols[n * klen * plane..(n + 1) * klen * plane];
            im2col_item(g, input, n, slot);
            slot
        };
        let dst = &mut out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        for (co, row) in dst.chunks_mut(plane).enumerate() {
            row.fill(bias[co]);
        }
        gemm(g.c_out, klen, plane, weight, (klen, 1), col, (plane, 1), 1.0, dst);
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Backward convolution given the upstream gradient `[N, C_out, H', W']`.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    cols: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let plane = g.out_plane();
    let klen = g.patch_len();
    let pointwise = g.is_pointwise();
    let col_of = |n: usize| -> &[f64] {
        if pointwise {
            &input[n * klen * plane..(n + 1) * klen * plane]
        } else {
            &cols[n * klen * plane..(n + 1) * klen * plane]
        }
    };

    let weight_grad = need.1.then(|| {
        let mut gw = vec![0.0; g.c_out * klen];
        for n in 0..g.batch {
            let go = &grad_out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
            // gW += gO[Co×P] · colsᵀ[P×K]
            gemm(g.c_out, plane, klen, go, (plane, 1), col_of(n), (1, plane), 1.0, &mut gw);
        }
        gw
    });

    let bias_grad = need.2.then(|| {
        let mut gb = vec![0.0; g.c_out];
        for n in 0..g.batch {
            let go = &grad_out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
            for (co, row) in go.chunks(plane).enumerate() {
                gb[co] += row.iter().sum::<f64>();
            }
        }
        gb
    });

    let input_grad = need.0.then(|| {
        let mut gi = vec![0.0; g.batch * g.c_in * g.height * g.width];
        let mut gcols = vec![0.0; klen * plane];
        for n in 0..g.batch {
            let go = &grad_out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
            if pointwise {
                let dst = &mut gi[n * klen * plane..(n + 1) * klen * plane];
                gemm(klen, g.c_out, plane, weight, (1, klen), go, (plane, 1), 0.0, dst);
            } else {
                // gCols[K×P] = Wᵀ[K×Co] · gO[Co×P]
                gemm(klen, g.c_out, plane, weight, (1, klen), go, (plane, 1), 0.0, &mut gcols);
                col2im_item(g, &gcols, n, &mut gi);
            }
        }
        gi
    });

    ConvGrads { input: input_grad, weight: weight_grad, bias: bias_grad }
}

/// Convolution evaluated at a single output position, all output channels.
///
/// `read(ci, iy, ix)` supplies input values; out-of-range taps are skipped.
/// Used by the incremental sampler, which only has activations for the
/// positions it has already visited.
pub fn conv_at(
    weight: &[f64],
    bias: &[f64],
    (c_out, c_in, kh, kw): (usize, usize, usize, usize),
    (height, width): (usize, usize),
    (oy, ox): (usize, usize),
    read: impl Fn(usize, usize, usize) -> f64,
    out: &mut [f64],
) {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    out[..c_out].copy_from_slice(&bias[..c_out]);
    for ci in 0..c_in {
        for ky in 0..kh {
            let iy = oy as isize + ky as isize - ph;
            if iy < 0 || iy >= height as isize {
                continue;
            }
            for kx in 0..kw {
                let ix = ox as isize + kx as isize - pw;
                if ix < 0 || ix >= width as isize {
                    continue;
                }
                let v = read(ci, iy as usize, ix as usize);
                if v == 0.0 {
                    continue;
                }
                let tap = (ci * kh + ky) * kw + kx;
                let stride = c_in * kh * kw;
                for (co, o) in out[..c_out].iter_mut().enumerate() {
                    *o += weight[co * stride + tap] * v;
                }
            }
        }
    }
}
