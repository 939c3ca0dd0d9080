use super::Scalar;

/// Row-major `c (m×n) = a (m×k) · b (k×n) [+ c]`.
///
/// `a_t` means `a` is stored as `k×m`; `b_t` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths are asserted above and strides describe in-bounds views.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, padding: usize) -> Option<Self> {
        let ph = height + 2 * padding;
        let pw = width + 2 * padding;
        if kernel == 0 || stride == 0 || kernel > ph || kernel > pw {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox·s + kx − p` lies inside
    /// the image.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.padding);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if self.width + p > kx { ((self.width + p - kx - 1) / s + 1).min(self.out_w) } else { 0 };
        lo.min(hi)..hi
    }
}

/// Unfold one `C×H×W` image into a `(C·K·K) × (OH·OW)` column matrix.
pub(crate) fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let valid = g.valid_cols(kx);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= g.height {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - p) * g.width..(iy - p + 1) * g.width];
                    line[..valid.start].fill(T::zero());
                    line[valid.end..].fill(T::zero());
                    if valid.is_empty() {
                        continue;
                    }
                    let first = valid.start * s + kx - p;
                    if s == 1 {
                        line[valid.clone()].copy_from_slice(&src[first..first + valid.len()]);
                    } else {
                        for (j, v) in line[valid.clone()].iter_mut().enumerate() {
                            *v = src[first + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let valid = g.valid_cols(kx);
                for oy in 0..g.out_h {
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= g.height {
                        continue;
                    }
                    let dst = &mut plane[(iy - p) * g.width..(iy - p + 1) * g.width];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if valid.is_empty() {
                        continue;
                    }
                    let first = valid.start * s + kx - p;
                    for (j, &v) in line[valid.clone()].iter().enumerate() {
                        let d = &mut dst[first + j * s];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}
