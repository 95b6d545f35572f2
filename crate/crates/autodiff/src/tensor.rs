use std::fmt;

/// Dense row-major `f32` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            numel_of(shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::new(shape, vec![value; numel_of(shape)])
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(&[1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = numel_of(shape);
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reads the single element of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected CxHxW, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            numel_of(shape),
            self.data.len(),
            "cannot reshape {:?} to {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean squared difference, accumulated in `f64`.
    pub fn mse(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        s / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Sums contiguous blocks: views `self` as `[outer, numel / outer]`.
    pub fn sum_inner(&self, outer: usize) -> Tensor {
        assert!(outer > 0 && self.data.len().is_multiple_of(outer));
        let inner = self.data.len() / outer;
        let data = self
            .data
            .chunks_exact(inner)
            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        Tensor::new(&[outer], data)
    }

    /// Repeats each element of a rank-1 tensor over a contiguous block so the
    /// result has `shape`.
    pub fn expand_inner(&self, shape: &[usize]) -> Tensor {
        let outer = self.data.len();
        let n = numel_of(shape);
        assert!(outer > 0 && n.is_multiple_of(outer), "cannot expand {outer} to {shape:?}");
        let inner = n / outer;
        let mut data = Vec::with_capacity(n);
        for &v in &self.data {
            data.extend(std::iter::repeat_n(v, inner));
        }
        Tensor::new(shape, data)
    }

    pub fn transpose2d(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 2);
        assert_eq!(other.shape.len(), 2);
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Tensor::new(&[m, n], out)
    }

    /// Stacks rank-3 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let (_, h, w) = parts[0].chw();
        let mut c = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pc, ph, pw) = p.chw();
            assert_eq!((ph, pw), (h, w), "spatial mismatch in concat");
            c += pc;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&[c, h, w], data)
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Tensor {
        let (c, h, w) = self.chw();
        assert!(start + len <= c);
        let plane = h * w;
        Tensor::new(
            &[len, h, w],
            self.data[start * plane..(start + len) * plane].to_vec(),
        )
    }

    /// Applies `rows · X_c · colsᵀ` to every channel of a `[C, H, W]` tensor,
    /// where `rows` is `[H', H]` and `cols` is `[W', W]`.
    pub fn separable(&self, rows: &Tensor, cols: &Tensor) -> Tensor {
        let (c, h, w) = self.chw();
        let (ho, hi) = (rows.shape[0], rows.shape[1]);
        let (wo, wi) = (cols.shape[0], cols.shape[1]);
        assert_eq!((hi, wi), (h, w), "resample matrices do not match input");
        let mut tmp = vec![0.0; ho * w];
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let x = &self.data[ch * h * w..(ch + 1) * h * w];
            gemm(ho, h, w, &rows.data, false, x, false, &mut tmp, 0.0);
            let y = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
            gemm(ho, w, wo, &tmp, false, &cols.data, true, y, 0.0);
        }
        Tensor::new(&[c, ho, wo], out)
    }
}

/// `c = a·b + beta·c` for row-major operands, optionally transposing either
/// input. `a` is logically `[m, k]`, `b` is `[k, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths were checked against the logical shapes
    // above, and the strides describe exactly those row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
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

/// Geometry of a square-kernel 2D convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

fn im2col(x: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let mut cols = vec![0.0; g.col_rows() * oh * ow];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let mut x = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_geometry(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> ConvGeometry {
    assert_eq!(x_shape.len(), 3, "conv input must be CxHxW, got {x_shape:?}");
    assert_eq!(w_shape.len(), 4, "conv weight must be OxCxKxK, got {w_shape:?}");
    assert_eq!(w_shape[2], w_shape[3], "only square kernels");
    assert_eq!(
        x_shape[0], w_shape[1],
        "conv channel mismatch: input {x_shape:?}, weight {w_shape:?}"
    );
    let g = ConvGeometry {
        channels: x_shape[0],
        height: x_shape[1],
        width: x_shape[2],
        kernel: w_shape[2],
        stride,
        pad,
    };
    assert!(
        g.height + 2 * pad >= g.kernel && g.width + 2 * pad >= g.kernel,
        "input {x_shape:?} too small for kernel {}",
        g.kernel
    );
    g
}

/// Cross-correlation of `x: [C, H, W]` with `w: [O, C, K, K]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let g = conv_geometry(&x.shape, &w.shape, stride, pad);
    let (oh, ow) = g.out_hw();
    let o = w.shape[0];
    let mut out = vec![0.0; o * oh * ow];
    if stride == 1 {
        direct::forward(&x.data, &w.data, &mut out, &g, o);
    } else {
        let cols = im2col(&x.data, &g);
        gemm(o, g.col_rows(), oh * ow, &w.data, false, &cols, false, &mut out, 0.0);
    }
    Tensor::new(&[o, oh, ow], out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(gy: &Tensor, w: &Tensor, in_hw: (usize, usize), stride: usize, pad: usize) -> Tensor {
    let x_shape = [w.shape[1], in_hw.0, in_hw.1];
    let g = conv_geometry(&x_shape, &w.shape, stride, pad);
    let (oh, ow) = g.out_hw();
    let o = w.shape[0];
    assert_eq!(gy.shape, [o, oh, ow], "output-grad shape mismatch");
    if stride == 1 && pad < g.kernel {
        let mut gx = vec![0.0; g.channels * g.height * g.width];
        direct::input_grad(&gy.data, &w.data, &mut gx, &g, o);
        return Tensor::new(&x_shape, gx);
    }
    let mut cols = vec![0.0; g.col_rows() * oh * ow];
    gemm(g.col_rows(), o, oh * ow, &w.data, true, &gy.data, false, &mut cols, 0.0);
    Tensor::new(&x_shape, col2im(&cols, &g))
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, kernel: usize, stride: usize, pad: usize) -> Tensor {
    let o = gy.shape[0];
    let w_shape = [o, x.shape[0], kernel, kernel];
    let g = conv_geometry(&x.shape, &w_shape, stride, pad);
    let (oh, ow) = g.out_hw();
    assert_eq!(gy.shape, [o, oh, ow], "output-grad shape mismatch");
    let mut out = vec![0.0; o * g.col_rows()];
    if stride == 1 {
        direct::weight_grad(&x.data, &gy.data, &mut out, &g, o);
    } else {
        let cols = im2col(&x.data, &g);
        gemm(o, oh * ow, g.col_rows(), &gy.data, false, &cols, true, &mut out, 0.0);
    }
    Tensor::new(&w_shape, out)
}

/// Stride-1 convolution kernels.
///
/// Planes are zero-padded and laid out with the padded row width, so each
/// (channel, kernel tap) pair becomes one long contiguous axpy or dot
/// product; the surplus columns are cropped afterwards. Every output element
/// is accumulated in the same order whatever instruction set is picked at
/// runtime, so results are bit-identical across machines.
mod direct {
    use super::ConvGeometry;

    /// Copies `planes` `[c, h, w]` into zero-filled planes of `hp × wp` (plus
    /// `slack` trailing zeros each), offset by `off` rows and columns.
    #[allow(clippy::too_many_arguments)]
    fn pad_planes(src: &[f32], c: usize, h: usize, w: usize, off: usize, hp: usize, wp: usize, slack: usize) -> Vec<f32> {
        let stride = hp * wp + slack;
        let mut out = vec![0.0; c * stride];
        for ch in 0..c {
            for y in 0..h {
                let d = ch * stride + (y + off) * wp + off;
                out[d..d + w].copy_from_slice(&src[(ch * h + y) * w..(ch * h + y + 1) * w]);
            }
        }
        out
    }

    /// Drops the surplus columns of `[c, rows, wp]` planes.
    fn crop(src: &[f32], c: usize, rows: usize, wp: usize, w: usize, out: &mut [f32]) {
        for ch in 0..c {
            for y in 0..rows {
                let s = (ch * rows + y) * wp;
                out[(ch * rows + y) * w..(ch * rows + y + 1) * w].copy_from_slice(&src[s..s + w]);
            }
        }
    }

    #[inline(always)]
    fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
        let x = &x[..y.len()];
        for (y, &x) in y.iter_mut().zip(x) {
            *y += a * x;
        }
    }

    const LANES: usize = 8;

    #[inline(always)]
    fn dot(a: &[f32], b: &[f32]) -> f32 {
        let b = &b[..a.len()];
        let mut acc = [0.0f32; LANES];
        let mut ac = a.chunks_exact(LANES);
        let mut bc = b.chunks_exact(LANES);
        for (ca, cb) in (&mut ac).zip(&mut bc) {
            for l in 0..LANES {
                acc[l] += ca[l] * cb[l];
            }
        }
        let mut tail = 0.0f32;
        for (&va, &vb) in ac.remainder().iter().zip(bc.remainder()) {
            tail += va * vb;
        }
        acc.iter().sum::<f32>() + tail
    }

    #[inline(always)]
    fn forward_body(x: &[f32], w: &[f32], out: &mut [f32], g: &ConvGeometry, o: usize) {
        let (oh, ow) = g.out_hw();
        let (c, k, p) = (g.channels, g.kernel, g.pad);
        let (hp, wp) = (g.height + 2 * p, g.width + 2 * p);
        let xp = pad_planes(x, c, g.height, g.width, p, hp, wp, k);
        let plane = hp * wp + k;
        let len = oh * wp;
        let mut acc = vec![0.0f32; o * len];
        for oc in 0..o {
            let dst = &mut acc[oc * len..(oc + 1) * len];
            for ch in 0..c {
                let src = &xp[ch * plane..(ch + 1) * plane];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = w[((oc * c + ch) * k + ki) * k + kj];
                        axpy(dst, wv, &src[ki * wp + kj..]);
                    }
                }
            }
        }
        crop(&acc, o, oh, wp, ow, out);
    }

    /// Needs `pad < kernel`: the output gradient is re-padded by
    /// `kernel − 1 − pad` and correlated with the flipped kernel.
    #[inline(always)]
    fn input_grad_body(gy: &[f32], w: &[f32], gx: &mut [f32], g: &ConvGeometry, o: usize) {
        let (oh, ow) = g.out_hw();
        let (c, k) = (g.channels, g.kernel);
        let q = k - 1 - g.pad;
        let (hq, wq) = (oh + 2 * q, ow + 2 * q);
        let gyp = pad_planes(gy, o, oh, ow, q, hq, wq, k);
        let plane = hq * wq + k;
        let len = g.height * wq;
        let mut acc = vec![0.0f32; c * len];
        for ch in 0..c {
            let dst = &mut acc[ch * len..(ch + 1) * len];
            for oc in 0..o {
                let src = &gyp[oc * plane..(oc + 1) * plane];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = w[((oc * c + ch) * k + (k - 1 - ki)) * k + (k - 1 - kj)];
                        axpy(dst, wv, &src[ki * wq + kj..]);
                    }
                }
            }
        }
        crop(&acc, c, g.height, wq, g.width, gx);
    }

    #[inline(always)]
    fn weight_grad_body(x: &[f32], gy: &[f32], gw: &mut [f32], g: &ConvGeometry, o: usize) {
        let (oh, ow) = g.out_hw();
        let (c, k, p) = (g.channels, g.kernel, g.pad);
        let (hp, wp) = (g.height + 2 * p, g.width + 2 * p);
        let xp = pad_planes(x, c, g.height, g.width, p, hp, wp, k);
        let plane = hp * wp + k;
        // Output gradient in the padded row layout, zero in surplus columns.
        let len = oh * wp;
        let gyw = pad_planes(gy, o, oh, ow, 0, oh, wp, 0);
        for oc in 0..o {
            let a = &gyw[oc * len..(oc + 1) * len];
            for ch in 0..c {
                let src = &xp[ch * plane..(ch + 1) * plane];
                for ki in 0..k {
                    for kj in 0..k {
                        gw[((oc * c + ch) * k + ki) * k + kj] = dot(a, &src[ki * wp + kj..]);
                    }
                }
            }
        }
    }

    macro_rules! dispatch {
        ($name:ident, $body:ident, $avx:ident, ($($arg:ident: $ty:ty),*)) => {
            #[cfg(target_arch = "x86_64")]
            #[target_feature(enable = "avx2")]
            unsafe fn $avx($($arg: $ty),*) {
                $body($($arg),*)
            }

            pub(super) fn $name($($arg: $ty),*) {
                #[cfg(target_arch = "x86_64")]
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the CPU supports AVX2, checked just above.
                    return unsafe { $avx($($arg),*) };
                }
                $body($($arg),*)
            }
        };
    }

    dispatch!(forward, forward_body, forward_avx2, (x: &[f32], w: &[f32], out: &mut [f32], g: &ConvGeometry, o: usize));
    dispatch!(input_grad, input_grad_body, input_grad_avx2, (gy: &[f32], w: &[f32], gx: &mut [f32], g: &ConvGeometry, o: usize));
    dispatch!(weight_grad, weight_grad_body, weight_grad_avx2, (x: &[f32], gy: &[f32], gw: &mut [f32], g: &ConvGeometry, o: usize));
}

/// Max pooling with a square window and no padding.
pub fn max_pool2d(x: &Tensor, window: usize, stride: usize) -> Tensor {
    let (c, h, w) = x.chw();
    assert!(h >= window && w >= window, "input too small for pooling");
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for i in 0..window {
                    for j in 0..window {
                        m = m.max(plane[(oy * stride + i) * w + ox * stride + j]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}
