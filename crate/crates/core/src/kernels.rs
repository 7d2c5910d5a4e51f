//! Slice-level numeric kernels (forward and backward) used by the
//! autodiff graph. Shapes are validated by the callers in `autograd`.
//!
//! All loops run in a fixed order, so results are bit-reproducible for a
//! given build.

use crate::scalar::Scalar;

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,n] = a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `x[C,H,W]` into `[C·kh·kw, H'·W']`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut cols = vec![T::zero(); g.cin * g.kh * g.kw * p];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dst[oy * ow + ox] = plane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column gradients back into `[C,H,W]`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            plane[iy * g.w + ix] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Dense convolution. `w` is `[Cout, Cin, kh, kw]`, output `[Cout, H', W']`.
pub fn conv2d<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, cout: usize, g: &ConvGeom) -> Vec<T> {
    let p = g.out_h() * g.out_w();
    let ckk = g.cin * g.kh * g.kw;
    let mut out = if g.is_pointwise() {
        matmul(w, x, cout, ckk, p)
    } else {
        let cols = im2col(x, g);
        matmul(w, &cols, cout, ckk, p)
    };
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            for v in &mut out[co * p..(co + 1) * p] {
                *v += bv;
            }
        }
    }
    out
}

/// Gradients of [`conv2d`]: `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    cout: usize,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let p = g.out_h() * g.out_w();
    let ckk = g.cin * g.kh * g.kw;
    let db = (0..cout).map(|co| dout[co * p..(co + 1) * p].iter().copied().sum()).collect();
    if g.is_pointwise() {
        let dw = matmul_nt(dout, x, cout, p, ckk);
        let dx = matmul_tn(w, dout, cout, ckk, p);
        return (dx, dw, db);
    }
    let cols = im2col(x, g);
    let dw = matmul_nt(dout, &cols, cout, p, ckk);
    let dcols = matmul_tn(w, dout, cout, ckk, p);
    (col2im(&dcols, g), dw, db)
}

/// Per-channel convolution. `w` is `[C, 1, kh, kw]`.
pub fn depthwise_conv2d<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.cin * oh * ow];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let kern = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let kv = kern[ky * g.kw + kx];
                    for ox in 0..ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dst[oy * ow + ox] += kv * plane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`depthwise_conv2d`]: `(dx, dw)`.
pub fn depthwise_conv2d_backward<T: Scalar>(x: &[T], w: &[T], dout: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dplane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        let kern = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let dkern = &mut dw[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let go = &dout[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let kv = kern[ky * g.kw + kx];
                    let mut acc = T::zero();
                    for ox in 0..ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            let gv = go[oy * ow + ox];
                            acc += gv * plane[iy * g.w + ix];
                            dplane[iy * g.w + ix] += gv * kv;
                        }
                    }
                    dkern[ky * g.kw + kx] += acc;
                }
            }
        }
    }
    (dx, dw)
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-shifted softmax along the middle extent of `(outer, n, inner)`.
pub fn softmax<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..n {
                mx = mx.max(x[idx(j)]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (x[idx(j)] - mx).exp();
                y[idx(j)] = e;
                total += e;
            }
            let inv = T::one() / total;
            for j in 0..n {
                y[idx(j)] *= inv;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let dot: T = (0..n).map(|j| dy[idx(j)] * y[idx(j)]).sum();
            for j in 0..n {
                dx[idx(j)] = y[idx(j)] * (dy[idx(j)] - dot);
            }
        }
    }
    dx
}

/// Layer normalisation over contiguous rows of length `c`.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], c: usize, eps: T) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    let cn = T::from_usize_lossy(c);
    for (row, out) in x.chunks_exact(c).zip(y.chunks_exact_mut(c)) {
        let mean = row.iter().copied().sum::<T>() / cn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..c {
            out[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
    }
    y
}

/// Gradients of [`layer_norm`]: `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    c: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let cn = T::from_usize_lossy(c);
    let mut xhat = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for ((row, g), d) in x.chunks_exact(c).zip(dy.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
        let mean = row.iter().copied().sum::<T>() / cn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let rstd = T::one() / (var + eps).sqrt();
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..c {
            xhat[j] = (row[j] - mean) * rstd;
            dxhat[j] = g[j] * gamma[j];
            dgamma[j] += g[j] * xhat[j];
            dbeta[j] += g[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
        }
        for j in 0..c {
            d[j] = rstd / cn * (cn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_CUBIC: f64 = 0.044715;

fn gelu_consts<T: Scalar>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(GELU_CUBIC),
    )
}

/// tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Source taps for one output coordinate of an align-corners=false resize.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

fn resize_taps<T: Scalar>(src: usize, dst: usize) -> Vec<Tap<T>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            Tap { i0, i1, frac: T::from_f64_lossy(pos - i0 as f64) }
        })
        .collect()
}

/// Bilinear resize of `[C,H,W]` to `[C,H2,W2]` (align-corners=false, edge clamp).
pub fn bilinear_resize<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, h2: usize, w2: usize) -> Vec<T> {
    if h == h2 && w == w2 {
        return x.to_vec();
    }
    let ty = resize_taps::<T>(h, h2);
    let tx = resize_taps::<T>(w, w2);
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h2 * w2..(ch + 1) * h2 * w2];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let top = plane[a.i0 * w + b.i0] * (T::one() - b.frac) + plane[a.i0 * w + b.i1] * b.frac;
                let bot = plane[a.i1 * w + b.i0] * (T::one() - b.frac) + plane[a.i1 * w + b.i1] * b.frac;
                dst[oy * w2 + ox] = top * (T::one() - a.frac) + bot * a.frac;
            }
        }
    }
    out
}

pub fn bilinear_resize_backward<T: Scalar>(dy: &[T], c: usize, h: usize, w: usize, h2: usize, w2: usize) -> Vec<T> {
    if h == h2 && w == w2 {
        return dy.to_vec();
    }
    let ty = resize_taps::<T>(h, h2);
    let tx = resize_taps::<T>(w, w2);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &dy[ch * h2 * w2..(ch + 1) * h2 * w2];
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = src[oy * w2 + ox];
                let gt = g * (T::one() - a.frac);
                let gb = g * a.frac;
                plane[a.i0 * w + b.i0] += gt * (T::one() - b.frac);
                plane[a.i0 * w + b.i1] += gt * b.frac;
                plane[a.i1 * w + b.i0] += gb * (T::one() - b.frac);
                plane[a.i1 * w + b.i1] += gb * b.frac;
            }
        }
    }
    dx
}

/// Mean pixel cross-entropy of `[K, P]` logits. Returns `(loss, counted)`.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: &[usize], k: usize, ignore: usize) -> (T, usize) {
    let p = target.len();
    let mut total = T::zero();
    let mut count = 0usize;
    for (px, &t) in target.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let mx = (0..k).map(|c| logits[c * p + px]).fold(T::neg_infinity(), T::max);
        let lse = mx + (0..k).map(|c| (logits[c * p + px] - mx).exp()).sum::<T>().ln();
        total += lse - logits[t * p + px];
        count += 1;
    }
    if count == 0 {
        (T::zero(), 0)
    } else {
        (total / T::from_usize_lossy(count), count)
    }
}

pub fn cross_entropy_backward<T: Scalar>(logits: &[T], target: &[usize], k: usize, ignore: usize, upstream: T) -> Vec<T> {
    let p = target.len();
    let mut dx = vec![T::zero(); logits.len()];
    let count = target.iter().filter(|&&t| t != ignore).count();
    if count == 0 {
        return dx;
    }
    let scale = upstream / T::from_usize_lossy(count);
    for (px, &t) in target.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let mx = (0..k).map(|c| logits[c * p + px]).fold(T::neg_infinity(), T::max);
        let total: T = (0..k).map(|c| (logits[c * p + px] - mx).exp()).sum();
        for c in 0..k {
            let prob = (logits[c * p + px] - mx).exp() / total;
            let onehot = if c == t { T::one() } else { T::zero() };
            dx[c * p + px] = (prob - onehot) * scale;
        }
    }
    dx
}
