//! Dense kernels behind the convolution and linear layers: a checked GEMM
//! wrapper and im2col/col2im over `[C, H, W]` planes.

/// Geometry of one 2D correlation; 1D layers use `h = kh = 1`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Patch {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Patch {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output index range `[t0, t1)` whose source `t * stride + k - pad`
    /// falls inside `[0, len)`.
    fn valid(out_len: usize, len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
        let first = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let last = if len + pad > k {
            ((len + pad - k - 1) / stride + 1).min(out_len)
        } else {
            0
        };
        (first, last.max(first))
    }

    /// Visits every (patch row, output row, column range, source offsets).
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        for c in 0..self.c {
            for ky in 0..self.kh {
                let (y0, y1) = Self::valid(self.ho, self.h, ky, self.ph, self.sh);
                for kx in 0..self.kw {
                    let (x0, x1) = Self::valid(self.wo, self.w, kx, self.pw, self.sw);
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for y in y0..y1 {
                        let sy = y * self.sh + ky - self.ph;
                        f(row, y, x0, x1, c * self.h * self.w + sy * self.w, kx);
                    }
                }
            }
        }
    }
}

/// `src [C, H, W] -> cols [C*KH*KW, HO*WO]`, zero outside the input.
pub(crate) fn im2col(src: &[f64], p: &Patch, cols: &mut [f64]) {
    debug_assert_eq!(src.len(), p.c * p.h * p.w);
    debug_assert_eq!(cols.len(), p.rows() * p.cols());
    cols.fill(0.0);
    let (sw, pw, ncols, wo) = (p.sw, p.pw, p.cols(), p.wo);
    p.for_each(|row, y, x0, x1, base, kx| {
        let dst = &mut cols[row * ncols + y * wo..row * ncols + (y + 1) * wo];
        if sw == 1 {
            let s = base + x0 + kx - pw;
            dst[x0..x1].copy_from_slice(&src[s..s + (x1 - x0)]);
        } else {
            for x in x0..x1 {
                dst[x] = src[base + x * sw + kx - pw];
            }
        }
    });
}

/// Adjoint of [`im2col`]: accumulates `cols` into `dst [C, H, W]`.
pub(crate) fn col2im(cols: &[f64], p: &Patch, dst: &mut [f64]) {
    debug_assert_eq!(dst.len(), p.c * p.h * p.w);
    let (sw, pw, ncols, wo) = (p.sw, p.pw, p.cols(), p.wo);
    p.for_each(|row, y, x0, x1, base, kx| {
        let src = &cols[row * ncols + y * wo..row * ncols + (y + 1) * wo];
        if sw == 1 {
            let s = base + x0 + kx - pw;
            for (d, v) in dst[s..s + (x1 - x0)].iter_mut().zip(&src[x0..x1]) {
                *d += v;
            }
        } else {
            for x in x0..x1 {
                dst[base + x * sw + kx - pw] += src[x];
            }
        }
    });
}

/// `c = op(a) * op(b) + beta * c`, all row-major; `op` transposes when the
/// flag is set. `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
