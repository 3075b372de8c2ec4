//! Grouped 2-D cross-correlation, forward and reverse mode.
//!
//! Depthwise-like geometries (one input and one output channel per group) run
//! through direct loops; everything else goes through per-group im2col + GEMM.
//! 1x1 stride-1 unpadded convs skip the im2col copy entirely.

use super::{gemm, ConvSpec, MatRef, Scalar, Tensor4};
use crate::error::{Error, Result};

/// Gradients of a convolution with respect to its three inputs.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub grad_x: Tensor4<T>,
    pub grad_w: Tensor4<T>,
    pub grad_bias: Vec<T>,
}

fn check_operands<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, spec: &ConvSpec) -> Result<(usize, usize)> {
    spec.validate()?;
    let [_, c, h, wd] = x.dims();
    if c != spec.c_in {
        return Err(Error::Shape(format!("input has {c} channels, conv expects {}", spec.c_in)));
    }
    w.expect_dims(spec.weight_dims(), "conv weight")?;
    spec.output_hw(h, wd)
}

/// Which im2col-free fast path applies.
fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1 && spec.padding == 0
}

fn is_channelwise(spec: &ConvSpec) -> bool {
    spec.in_per_group() == 1 && spec.out_per_group() == 1
}

/// Grouped convolution (cross-correlation, no kernel flip).
///
/// `x` is `(n, c_in, h, w)`, `w` is `(c_out, c_in / g, K, K)`; the result is
/// `(n, c_out, h', w')` with `h' = (h + 2p - K) / s + 1`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    spec: &ConvSpec,
    bias: Option<&[T]>,
) -> Result<Tensor4<T>> {
    let (ho, wo) = check_operands(x, w, spec)?;
    if let Some(b) = bias {
        if b.len() != spec.c_out {
            return Err(Error::Shape(format!("bias has {} entries, conv has {} outputs", b.len(), spec.c_out)));
        }
    }
    let n = x.dims()[0];
    let mut out = Tensor4::zeros([n, spec.c_out, ho, wo]);
    if is_channelwise(spec) {
        channelwise_forward(x, w, spec, &mut out);
    } else {
        gemm_forward(x, w, spec, &mut out);
    }
    if let Some(b) = bias {
        let plane = ho * wo;
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = b[i % spec.c_out];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    out.ensure_finite("conv2d_forward output")?;
    Ok(out)
}

/// Reverse-mode gradients of [`conv2d_forward`] for the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    spec: &ConvSpec,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let (ho, wo) = check_operands(x, w, spec)?;
    let n = x.dims()[0];
    grad_out.expect_dims([n, spec.c_out, ho, wo], "conv grad_out")?;

    let mut grad_x = Tensor4::zeros(x.dims());
    let mut grad_w = Tensor4::zeros(w.dims());
    if is_channelwise(spec) {
        channelwise_backward(x, w, spec, grad_out, &mut grad_x, &mut grad_w);
    } else {
        gemm_backward(x, w, spec, grad_out, &mut grad_x, &mut grad_w);
    }

    let plane = ho * wo;
    let mut grad_bias = vec![T::zero(); spec.c_out];
    for (i, chunk) in grad_out.data().chunks(plane).enumerate() {
        grad_bias[i % spec.c_out] += chunk.iter().copied().sum::<T>();
    }
    grad_x.ensure_finite("conv2d_backward grad_x")?;
    grad_w.ensure_finite("conv2d_backward grad_w")?;
    Ok(ConvGrads { grad_x, grad_w, grad_bias })
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
fn valid_range(k: usize, pad: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    // need 0 <= o*s + k - p < input
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if input + pad > k { ((input + pad - k - 1) / stride + 1).min(output) } else { 0 };
    (lo, hi.max(lo))
}

/// A zero-padded input plane split into `s * s` stride phases of `hs x ws`.
/// Tap `(ky, kx)` of a stride-`s` conv then reads one phase at a constant
/// flat offset, so every tap is a single contiguous multiply-add over a
/// "wide" output of `ho` rows by `ws` columns (columns `>= wo` are discarded).
struct Phases {
    s: usize,
    p: usize,
    ws: usize,
    len: usize,
    /// Flat offset of every kernel tap, row-major over `(ky, kx)`.
    taps: Vec<usize>,
    /// Destination of every input pixel; empty for stride 1.
    dst: Vec<usize>,
}

impl Phases {
    fn new(h: usize, w: usize, spec: &ConvSpec) -> Self {
        let (s, p, k) = (spec.stride, spec.padding, spec.kernel);
        let hs = (h + 2 * p).div_ceil(s);
        let ws = (w + 2 * p).div_ceil(s);
        let len = hs * ws + k;
        let at = |y: usize, x: usize| ((y % s) * s + x % s) * len + (y / s) * ws + x / s;
        let taps = (0..k * k).map(|t| at(t / k, t % k)).collect();
        let dst = if s == 1 { Vec::new() } else { (0..h * w).map(|i| at(i / w + p, i % w + p)).collect() };
        Phases { s, p, ws, len, taps, dst }
    }

    fn scatter<T: Scalar>(&self, plane: &[T], w: usize, out: &mut [T]) {
        if self.s > 1 {
            for (&d, &v) in self.dst.iter().zip(plane) {
                out[d] = v;
            }
            return;
        }
        for (iy, row) in plane.chunks(w).enumerate() {
            let o = (iy + self.p) * self.ws + self.p;
            out[o..o + w].copy_from_slice(row);
        }
    }

    fn gather_add<T: Scalar>(&self, phases: &[T], w: usize, plane: &mut [T]) {
        if self.s > 1 {
            for (&d, v) in self.dst.iter().zip(plane.iter_mut()) {
                *v += phases[d];
            }
            return;
        }
        for (iy, row) in plane.chunks_mut(w).enumerate() {
            let o = (iy + self.p) * self.ws + self.p;
            for (d, &v) in row.iter_mut().zip(&phases[o..o + w]) {
                *d += v;
            }
        }
    }
}

fn channelwise_forward<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, spec: &ConvSpec, out: &mut Tensor4<T>) {
    let [n, c, h, wd] = x.dims();
    let [_, _, ho, wo] = out.dims();
    let kk = spec.kernel;
    let ph = Phases::new(h, wd, spec);
    let span = ho * ph.ws;
    // interior positions are overwritten per plane, padding stays zero
    let mut buf = vec![T::zero(); spec.stride * spec.stride * ph.len];
    let mut wide = vec![T::zero(); span];
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            ph.scatter(&xd[(b * c + ch) * h * wd..][..h * wd], wd, &mut buf);
            let ker = &wdat[ch * kk * kk..][..kk * kk];
            wide.iter_mut().for_each(|v| *v = T::zero());
            for (&kv, &off) in ker.iter().zip(&ph.taps) {
                for (o, &v) in wide.iter_mut().zip(&buf[off..off + span]) {
                    *o += kv * v;
                }
            }
            let o = &mut od[(b * c + ch) * ho * wo..][..ho * wo];
            for (orow, wrow) in o.chunks_mut(wo).zip(wide.chunks(ph.ws)) {
                orow.copy_from_slice(&wrow[..wo]);
            }
        }
    }
}

fn channelwise_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    spec: &ConvSpec,
    grad_out: &Tensor4<T>,
    grad_x: &mut Tensor4<T>,
    grad_w: &mut Tensor4<T>,
) {
    let [n, c, h, wd] = x.dims();
    let [_, _, ho, wo] = grad_out.dims();
    let kk = spec.kernel;
    let ph = Phases::new(h, wd, spec);
    let span = ho * ph.ws;
    let mut buf = vec![T::zero(); spec.stride * spec.stride * ph.len];
    let mut gbuf = vec![T::zero(); buf.len()];
    // garbage columns of the wide gradient stay zero
    let mut gwide = vec![T::zero(); span];
    let xd = x.data();
    let wdat = w.data();
    let gd = grad_out.data();
    let gxd = grad_x.data_mut();
    let gwd = grad_w.data_mut();
    for b in 0..n {
        for ch in 0..c {
            ph.scatter(&xd[(b * c + ch) * h * wd..][..h * wd], wd, &mut buf);
            let g = &gd[(b * c + ch) * ho * wo..][..ho * wo];
            for (wrow, grow) in gwide.chunks_mut(ph.ws).zip(g.chunks(wo)) {
                wrow[..wo].copy_from_slice(grow);
            }
            gbuf.iter_mut().for_each(|v| *v = T::zero());
            for (t, &off) in ph.taps.iter().enumerate() {
                let widx = ch * kk * kk + t;
                let kv = wdat[widx];
                let mut acc = T::zero();
                for (&gv, &xv) in gwide.iter().zip(&buf[off..off + span]) {
                    acc += gv * xv;
                }
                gwd[widx] += acc;
                for (gx, &gv) in gbuf[off..off + span].iter_mut().zip(&gwide) {
                    *gx += kv * gv;
                }
            }
            ph.gather_add(&gbuf, wd, &mut gxd[(b * c + ch) * h * wd..][..h * wd]);
        }
    }
}

/// Fills `col` (rows = cin_g*K*K, cols = ho*wo) for one sample and one group.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    xin: &[T],
    cin_g: usize,
    h: usize,
    wd: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let (kk, s, p) = (spec.kernel, spec.stride, spec.padding);
    let plane = ho * wo;
    for ci in 0..cin_g {
        let src = &xin[ci * h * wd..][..h * wd];
        for ky in 0..kk {
            let (oy0, oy1) = valid_range(ky, p, s, h, ho);
            for kx in 0..kk {
                let (ox0, ox1) = valid_range(kx, p, s, wd, wo);
                let row = &mut col[((ci * kk + ky) * kk + kx) * plane..][..plane];
                row.iter_mut().for_each(|v| *v = T::zero());
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    for ox in ox0..ox1 {
                        row[oy * wo + ox] = src[iy * wd + ox * s + kx - p];
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into an input slice; adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    cin_g: usize,
    h: usize,
    wd: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    gx: &mut [T],
) {
    let (kk, s, p) = (spec.kernel, spec.stride, spec.padding);
    let plane = ho * wo;
    for ci in 0..cin_g {
        let dst = &mut gx[ci * h * wd..][..h * wd];
        for ky in 0..kk {
            let (oy0, oy1) = valid_range(ky, p, s, h, ho);
            for kx in 0..kk {
                let (ox0, ox1) = valid_range(kx, p, s, wd, wo);
                let row = &col[((ci * kk + ky) * kk + kx) * plane..][..plane];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    for ox in ox0..ox1 {
                        dst[iy * wd + ox * s + kx - p] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn gemm_forward<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, spec: &ConvSpec, out: &mut Tensor4<T>) {
    let [n, c, h, wd] = x.dims();
    let [_, _, ho, wo] = out.dims();
    let (g, cin_g, cout_g) = (spec.groups, spec.in_per_group(), spec.out_per_group());
    let patch = cin_g * spec.kernel * spec.kernel;
    let plane = ho * wo;
    let pointwise = is_pointwise(spec);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); patch * plane] };
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..n {
        for q in 0..g {
            let xin = &xd[(b * c + q * cin_g) * h * wd..][..cin_g * h * wd];
            let cols = if pointwise {
                xin
            } else {
                im2col(xin, cin_g, h, wd, spec, ho, wo, &mut col);
                &col[..]
            };
            let wq = &w.data()[q * cout_g * patch..][..cout_g * patch];
            let oq = &mut od[(b * spec.c_out + q * cout_g) * plane..][..cout_g * plane];
            gemm(
                MatRef::row_major(wq, cout_g, patch),
                MatRef::row_major(cols, patch, plane),
                T::zero(),
                oq,
            );
        }
    }
}

fn gemm_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    spec: &ConvSpec,
    grad_out: &Tensor4<T>,
    grad_x: &mut Tensor4<T>,
    grad_w: &mut Tensor4<T>,
) {
    let [n, c, h, wd] = x.dims();
    let [_, _, ho, wo] = grad_out.dims();
    let (g, cin_g, cout_g) = (spec.groups, spec.in_per_group(), spec.out_per_group());
    let patch = cin_g * spec.kernel * spec.kernel;
    let plane = ho * wo;
    let pointwise = is_pointwise(spec);
    let mut col = vec![T::zero(); patch * plane];
    let mut grad_col = vec![T::zero(); patch * plane];
    let xd = x.data();
    let gd = grad_out.data();
    for b in 0..n {
        for q in 0..g {
            let xin = &xd[(b * c + q * cin_g) * h * wd..][..cin_g * h * wd];
            let cols: &[T] = if pointwise {
                xin
            } else {
                im2col(xin, cin_g, h, wd, spec, ho, wo, &mut col);
                &col
            };
            let gq = &gd[(b * spec.c_out + q * cout_g) * plane..][..cout_g * plane];
            let gmat = MatRef::row_major(gq, cout_g, plane);

            // dW_q += dY_q . col^T
            let gwq = &mut grad_w.data_mut()[q * cout_g * patch..][..cout_g * patch];
            gemm(gmat, MatRef::row_major(cols, patch, plane).t(), T::one(), gwq);

            // dcol = W_q^T . dY_q
            let wq = &w.data()[q * cout_g * patch..][..cout_g * patch];
            let gx = &mut grad_x.data_mut()[(b * c + q * cin_g) * h * wd..][..cin_g * h * wd];
            if pointwise {
                gemm(MatRef::row_major(wq, cout_g, patch).t(), gmat, T::one(), gx);
            } else {
                gemm(MatRef::row_major(wq, cout_g, patch).t(), gmat, T::zero(), &mut grad_col);
                col2im(&grad_col, cin_g, h, wd, spec, ho, wo, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, s: &ConvSpec) -> Tensor4<T> {
        let [n, _, h, wd] = x.dims();
        let (ho, wo) = s.output_hw(h, wd).unwrap();
        Tensor4::from_fn([n, s.c_out, ho, wo], |[b, co, oy, ox]| {
            let q = co / s.out_per_group();
            let mut acc = T::zero();
            for ci in 0..s.in_per_group() {
                for ky in 0..s.kernel {
                    for kx in 0..s.kernel {
                        let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                        let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.at(co, ci, ky, kx)
                                * x.at(b, q * s.in_per_group() + ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn ones_kernel_sums_ones() {
        let x = Tensor4::<f32>::filled([1, 1, 3, 3], 1.0);
        let w = Tensor4::<f32>::filled([1, 1, 3, 3], 1.0);
        let spec = ConvSpec::new(1, 1, 3, 1, 0, 1).unwrap();
        let y = conv2d_forward(&x, &w, &spec, None).unwrap();
        assert_eq!(y.dims(), [1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::<f32>::uniform([1, 2, 5, 4], -1.0, 1.0, &mut rng);
        let w = Tensor4::<f32>::from_fn([2, 1, 3, 3], |[_, _, h, w]| if h == 1 && w == 1 { 1.0 } else { 0.0 });
        let spec = ConvSpec::depthwise(2, 3).unwrap();
        let y = conv2d_forward(&x, &w, &spec, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn both_paths_match_naive_on_strided_padded_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            (4, 4, 3, 2, 1, 4),
            (4, 6, 3, 2, 1, 2),
            (3, 2, 5, 1, 2, 1),
            (2, 2, 1, 1, 0, 1),
            (2, 4, 1, 2, 0, 2),
            (4, 4, 3, 3, 0, 1),
        ];
        for (ci, co, k, s, p, g) in cases {
            let spec = ConvSpec::new(ci, co, k, s, p, g).unwrap();
            let x = Tensor4::<f64>::uniform([2, ci, 7, 6], -1.0, 1.0, &mut rng);
            let w = Tensor4::<f64>::uniform(spec.weight_dims(), -1.0, 1.0, &mut rng);
            let y = conv2d_forward(&x, &w, &spec, None).unwrap();
            assert!(y.max_abs_diff(&naive(&x, &w, &spec)).unwrap() < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dY, conv(x, w)> is bilinear, so <dY, conv(dx, w)> == <grad_x, dx>.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (ci, co, k, s, p, g) in [(4, 4, 3, 2, 1, 4), (4, 6, 3, 1, 1, 2), (2, 3, 1, 1, 0, 1)] {
            let spec = ConvSpec::new(ci, co, k, s, p, g).unwrap();
            let x = Tensor4::<f64>::uniform([2, ci, 5, 5], -1.0, 1.0, &mut rng);
            let w = Tensor4::<f64>::uniform(spec.weight_dims(), -1.0, 1.0, &mut rng);
            let y = conv2d_forward(&x, &w, &spec, None).unwrap();
            let gy = Tensor4::<f64>::uniform(y.dims(), -1.0, 1.0, &mut rng);
            let grads = conv2d_backward(&x, &w, &spec, &gy).unwrap();
            let dot = |a: &Tensor4<f64>, b: &Tensor4<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
            let lhs = dot(&gy, &y);
            assert!((lhs - dot(&grads.grad_x, &x)).abs() < 1e-9);
            assert!((lhs - dot(&grads.grad_w, &w)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ConvSpec::new(4, 4, 3, 1, 1, 2).unwrap();
        let x = Tensor4::<f32>::uniform([1, 4, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor4::<f32>::uniform(spec.weight_dims(), -1.0, 1.0, &mut rng);
        let g = conv2d_backward(&x, &w, &spec, &Tensor4::zeros([1, 4, 4, 4])).unwrap();
        assert!(g.grad_x.data().iter().chain(g.grad_w.data()).chain(&g.grad_bias).all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_product_rule() {
        let spec = ConvSpec::new(1, 1, 1, 1, 0, 1).unwrap();
        let x = Tensor4::<f64>::filled([1, 1, 1, 1], 3.0);
        let w = Tensor4::<f64>::filled([1, 1, 1, 1], -2.0);
        assert_eq!(conv2d_forward(&x, &w, &spec, None).unwrap().data()[0], -6.0);
        let g = conv2d_backward(&x, &w, &spec, &Tensor4::filled([1, 1, 1, 1], 0.5)).unwrap();
        assert_eq!(g.grad_w.data()[0], 1.5);
        assert_eq!(g.grad_x.data()[0], -1.0);
        assert_eq!(g.grad_bias, vec![0.5]);
    }

    #[test]
    fn bias_is_added_per_channel() {
        let spec = ConvSpec::dense(1, 2, 1).unwrap();
        let x = Tensor4::<f32>::filled([2, 1, 2, 2], 1.0);
        let w = Tensor4::<f32>::new([2, 1, 1, 1], vec![1.0, 2.0]).unwrap();
        let y = conv2d_forward(&x, &w, &spec, Some(&[10.0, 20.0])).unwrap();
        assert_eq!(y.at(1, 0, 1, 1), 11.0);
        assert_eq!(y.at(1, 1, 0, 0), 22.0);
        assert!(conv2d_forward(&x, &w, &spec, Some(&[1.0])).is_err());
    }

    #[test]
    fn shape_errors() {
        let spec = ConvSpec::dense(3, 2, 3).unwrap();
        let x = Tensor4::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor4::<f32>::zeros([2, 3, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, &spec, None), Err(Error::Shape(_))));
        let x = Tensor4::<f32>::zeros([1, 3, 4, 4]);
        let bad_w = Tensor4::<f32>::zeros([2, 3, 1, 1]);
        assert!(conv2d_forward(&x, &bad_w, &spec, None).is_err());
        let bad_g = Tensor4::<f32>::zeros([1, 2, 3, 3]);
        assert!(conv2d_backward(&x, &w, &spec, &bad_g).is_err());
    }

    #[test]
    fn non_finite_input_surfaces_as_error() {
        let spec = ConvSpec::dense(1, 1, 1).unwrap();
        let x = Tensor4::<f32>::new([1, 1, 1, 1], vec![f32::INFINITY]).unwrap();
        let w = Tensor4::<f32>::filled([1, 1, 1, 1], 1.0);
        assert!(matches!(conv2d_forward(&x, &w, &spec, None), Err(Error::NonFinite(_))));
    }
}
