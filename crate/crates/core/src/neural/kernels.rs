//! Dense kernels behind the graph ops: GEMM, im2col/col2im and trilinear taps.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides(pub isize, pub isize);

impl Strides {
    pub(crate) fn row_major(cols: usize) -> Self {
        Strides(cols as isize, 1)
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub(crate) fn transposed(cols: usize) -> Self {
        Strides(1, cols as isize)
    }
}

fn max_offset(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize
}

/// `c = alpha · a·b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || max_offset(m, k, sa) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || max_offset(k, n, sb) < b.len(), "gemm: rhs out of bounds");
    assert!(max_offset(m, n, sc) < c.len(), "gemm: output out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            sc.0,
            sc.1,
        );
    }
}

/// Kernel, stride and padding of a 3D convolution, per axis (h, w, d).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub(crate) fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub(crate) fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    pub(crate) fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    /// A 1×1×1 stride-1 unpadded convolution needs no unfolding.
    pub(crate) fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

/// Source index along one axis for output `o` and kernel offset `k`, if inside.
#[inline]
fn source(o: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

/// Unfolds one sample `x: [C, H, W, D]` into `cols: [C·kh·kw·kd, Ho·Wo·Do]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let [h, w, d] = g.input;
    let [kh, kw, kd] = g.kernel;
    let [sh, sw, sd] = g.stride;
    let [ph, pw, pd] = g.padding;
    let [oh, ow, od] = g.output;
    let p = g.out_len();
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &x[c * h * w * d..(c + 1) * h * w * d];
        for a in 0..kh {
            for b in 0..kw {
                for e in 0..kd {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut col = 0;
                    for i in 0..oh {
                        let Some(si) = source(i, a, sh, ph, h) else {
                            dst[col..col + ow * od].fill(0.0);
                            col += ow * od;
                            continue;
                        };
                        for j in 0..ow {
                            let Some(sj) = source(j, b, sw, pw, w) else {
                                dst[col..col + od].fill(0.0);
                                col += od;
                                continue;
                            };
                            let base = (si * w + sj) * d;
                            for k in 0..od {
                                dst[col] = match source(k, e, sd, pd, d) {
                                    Some(sk) => xc[base + sk],
                                    None => 0.0,
                                };
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back, accumulating into `x`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let [h, w, d] = g.input;
    let [kh, kw, kd] = g.kernel;
    let [sh, sw, sd] = g.stride;
    let [ph, pw, pd] = g.padding;
    let [oh, ow, od] = g.output;
    let p = g.out_len();
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &mut x[c * h * w * d..(c + 1) * h * w * d];
        for a in 0..kh {
            for b in 0..kw {
                for e in 0..kd {
                    let src = &cols[row * p..(row + 1) * p];
                    for i in 0..oh {
                        let Some(si) = source(i, a, sh, ph, h) else {
                            continue;
                        };
                        for j in 0..ow {
                            let Some(sj) = source(j, b, sw, pw, w) else {
                                continue;
                            };
                            let base = (si * w + sj) * d;
                            let col = (i * ow + j) * od;
                            for k in 0..od {
                                if let Some(sk) = source(k, e, sd, pd, d) {
                                    xc[base + sk] += src[col + k];
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

/// Linear-interpolation taps `(i0, i1, t)` for upsampling an axis of length
/// `n` by `factor` with half-pixel centers and edge clamping.
pub(crate) fn upsample_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
