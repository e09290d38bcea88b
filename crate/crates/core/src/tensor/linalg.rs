use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// `out[m×n] += a[m×k] · b[k×n]`.
///
/// Loop nest is i-k-j, so every output element accumulates its `k` terms in
/// ascending order, the same order as the textbook triple loop. Zero entries
/// of `a` are skipped; they would only add signed zeros.
pub fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Row-parallel `a[m×k] · b[k×n]` on raw slices; see [`gemm_acc`].
pub fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 0 || m == 0 {
        return out;
    }
    let rows_per_chunk = rows_per_task(m, k * n);
    par::for_each_chunk_mut(&mut out, rows_per_chunk * n, |ci, chunk| {
        let r0 = ci * rows_per_chunk;
        let rows = chunk.len() / n;
        gemm_acc(&a[r0 * k..(r0 + rows) * k], b, chunk, rows, k, n);
    });
    out
}

/// Row-parallel `a · b` for 2-D tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a)?;
    let (k2, n) = dims2(b)?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new(vec![m, n], gemm(a.data(), b.data(), m, k, n))
}

pub(crate) fn rows_per_task(m: usize, work_per_row: usize) -> usize {
    // Keep tasks above ~32k multiply-adds so scheduling stays cheap.
    (32_768 / work_per_row.max(1)).clamp(1, m.max(1))
}

pub(crate) fn dims2<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::dim(format!("expected a matrix, got shape {:?}", t.shape()))),
    }
}

/// Transpose of a row-major `rows×cols` slice.
pub fn transpose2<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Interval product with the weights on the right: `z[N×K] · W` where the
/// transposed weight `Wᵀ[K×O]` is given split into its positive and negative
/// parts. Each output bound accumulates one term per `k` in ascending order,
/// `w₊·z̲ + w₋·z̄` for the lower bound and `w₊·z̄ + w₋·z̲` for the upper.
/// Exactly one of the two products is nonzero, so each term is the exact
/// product selected by the weight sign.
#[allow(clippy::too_many_arguments)]
pub fn interval_gemm_right<T: Real>(
    zl: &[T],
    zu: &[T],
    wtp: &[T],
    wtn: &[T],
    lo: &mut [T],
    hi: &mut [T],
    rows: usize,
    k: usize,
    o: usize,
) {
    for r in 0..rows {
        let lo_row = &mut lo[r * o..(r + 1) * o];
        let hi_row = &mut hi[r * o..(r + 1) * o];
        for kk in 0..k {
            let l = zl[r * k + kk];
            let u = zu[r * k + kk];
            if l == T::zero() && u == T::zero() {
                continue;
            }
            let p = &wtp[kk * o..(kk + 1) * o];
            let n = &wtn[kk * o..(kk + 1) * o];
            for j in 0..o {
                lo_row[j] += p[j] * l + n[j] * u;
                hi_row[j] += p[j] * u + n[j] * l;
            }
        }
    }
}

/// Interval product with the weights on the left: `K[O×Q] · c[Q×P]`, with
/// `K` split into positive and negative parts. Same per-term contract as
/// [`interval_gemm_right`].
#[allow(clippy::too_many_arguments)]
pub fn interval_gemm_left<T: Real>(
    kp: &[T],
    kn: &[T],
    cl: &[T],
    cu: &[T],
    lo: &mut [T],
    hi: &mut [T],
    o: usize,
    q: usize,
    p: usize,
) {
    for r in 0..o {
        let lo_row = &mut lo[r * p..(r + 1) * p];
        let hi_row = &mut hi[r * p..(r + 1) * p];
        for qq in 0..q {
            let a = kp[r * q + qq];
            let b = kn[r * q + qq];
            if a == T::zero() && b == T::zero() {
                continue;
            }
            let l = &cl[qq * p..(qq + 1) * p];
            let u = &cu[qq * p..(qq + 1) * p];
            for j in 0..p {
                lo_row[j] += a * l[j] + b * u[j];
                hi_row[j] += a * u[j] + b * l[j];
            }
        }
    }
}

/// Shape bookkeeping for a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
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

impl Conv2dGeometry {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let h_out = conv_output_size(h, k, stride, padding)?;
        let w_out = conv_output_size(w, k, stride, padding)?;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out,
            w_out,
        })
    }

    /// Rows of the unrolled patch matrix: `c_in·k²`, the fan-in.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Columns of the unrolled patch matrix: output positions per channel.
    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.positions()
    }
}

/// Output extent `(size + 2·padding − k)/stride + 1`, which must be integral.
pub fn conv_output_size(size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::dim("kernel size and stride must be at least 1"));
    }
    let padded = size + 2 * padding;
    if padded < k {
        return Err(Error::dim(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::dim(format!(
            "non-integral conv output: ({size} + 2*{padding} - {k}) / {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Unrolls one `c_in×h×w` example into a `(c_in·k²)×(h_out·w_out)` matrix.
pub fn im2col<T: Real>(g: &Conv2dGeometry, input: &[T], cols: &mut [T]) {
    debug_assert_eq!(input.len(), g.input_len());
    debug_assert_eq!(cols.len(), g.patch_len() * g.positions());
    let p = g.positions();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * g.w_out + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            input[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
pub fn col2im<T: Real>(g: &Conv2dGeometry, cols: &[T], input_grad: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        input_grad[(c * g.h + iy as usize) * g.w + ix as usize] +=
                            src[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation plus per-channel bias.
///
/// `input` is `N×C_in×H×W`, `kernel` is `C_out×C_in×k×k`, `bias` is `C_out`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, g) = conv_geometry(input, kernel, stride, padding)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::dim(format!(
            "conv bias shape {:?}, expected [{}]",
            bias.shape(),
            g.c_out
        )));
    }
    let mut out = vec![T::zero(); n * g.output_len()];
    let (x, kd, bd) = (input.data(), kernel.data(), bias.data());
    par::for_each_chunk_mut(&mut out, g.output_len(), |ex, dst| {
        let mut cols = vec![T::zero(); g.patch_len() * g.positions()];
        im2col(&g, &x[ex * g.input_len()..(ex + 1) * g.input_len()], &mut cols);
        gemm_acc(kd, &cols, dst, g.c_out, g.patch_len(), g.positions());
        add_channel_bias(dst, bd, g.positions());
    });
    Tensor::new(vec![n, g.c_out, g.h_out, g.w_out], out)
}

pub(crate) fn add_channel_bias<T: Real>(dst: &mut [T], bias: &[T], positions: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut dst[c * positions..(c + 1) * positions] {
            *v += b;
        }
    }
}

pub(crate) fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, Conv2dGeometry)> {
    let [n, c_in, h, w] = *input.shape() else {
        return Err(Error::dim(format!(
            "conv input must be N×C×H×W, got {:?}",
            input.shape()
        )));
    };
    let [c_out, kc, kh, kw] = *kernel.shape() else {
        return Err(Error::dim(format!(
            "conv kernel must be C_out×C_in×k×k, got {:?}",
            kernel.shape()
        )));
    };
    if kc != c_in || kh != kw {
        return Err(Error::dim(format!(
            "kernel {:?} incompatible with input {:?}",
            kernel.shape(),
            input.shape()
        )));
    }
    Ok((n, Conv2dGeometry::new(c_in, h, w, c_out, kh, stride, padding)?))
}
