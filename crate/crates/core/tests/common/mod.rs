//! Direct-definition oracles shared by the integration tests and the
//! acceptance harness. Everything here is written from the textbook
//! definitions with plain nested loops and f64 accumulation.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refconv::tensor::{ConvSpec, Tensor4};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tap(i: usize, k: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
    let p = (i * stride + k) as isize - pad as isize;
    (p >= 0 && (p as usize) < size).then_some(p as usize)
}

/// `y[n, o, oy, ox] = b[o] + sum_{i in group(o), ky, kx} w[o, i, ky, kx] x[n, g*cin_g + i, oy*s + ky - p, ox*s + kx - p]`
pub fn conv_oracle(x: &Tensor4<f64>, w: &Tensor4<f64>, spec: &ConvSpec, bias: Option<&[f64]>) -> Tensor4<f64> {
    let [n, _, h, wd] = x.dims();
    let ho = (h + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    let wo = (wd + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    let cin_g = spec.c_in / spec.groups;
    let cout_g = spec.c_out / spec.groups;
    let mut y = Tensor4::zeros([n, spec.c_out, ho, wo]);
    for b in 0..n {
        for o in 0..spec.c_out {
            let g = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for i in 0..cin_g {
                        for ky in 0..spec.kernel {
                            let Some(iy) = tap(oy, ky, spec.stride, spec.padding, h) else { continue };
                            for kx in 0..spec.kernel {
                                let Some(ix) = tap(ox, kx, spec.stride, spec.padding, wd) else { continue };
                                acc += w.at(o, i, ky, kx) * x.at(b, g * cin_g + i, iy, ix);
                            }
                        }
                    }
                    y.set(b, o, oy, ox, acc);
                }
            }
        }
    }
    y
}

/// `(grad_x, grad_w)` of `sum(grad_out * conv(x, w))`, from the same loops.
pub fn conv_backward_oracle(
    x: &Tensor4<f64>,
    w: &Tensor4<f64>,
    spec: &ConvSpec,
    grad_out: &Tensor4<f64>,
) -> (Tensor4<f64>, Tensor4<f64>) {
    let [n, _, h, wd] = x.dims();
    let [_, _, ho, wo] = grad_out.dims();
    let cin_g = spec.c_in / spec.groups;
    let cout_g = spec.c_out / spec.groups;
    let mut gx = Tensor4::zeros(x.dims());
    let mut gw = Tensor4::zeros(w.dims());
    for b in 0..n {
        for o in 0..spec.c_out {
            let g = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let up = grad_out.at(b, o, oy, ox);
                    for i in 0..cin_g {
                        let c = g * cin_g + i;
                        for ky in 0..spec.kernel {
                            let Some(iy) = tap(oy, ky, spec.stride, spec.padding, h) else { continue };
                            for kx in 0..spec.kernel {
                                let Some(ix) = tap(ox, kx, spec.stride, spec.padding, wd) else { continue };
                                gx.set(b, c, iy, ix, gx.at(b, c, iy, ix) + up * w.at(o, i, ky, kx));
                                gw.set(o, i, ky, kx, gw.at(o, i, ky, kx) + up * x.at(b, c, iy, ix));
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Result of running the refocusing transform as explicit loops.
pub struct TransformTrace {
    pub w_t: Tensor4<f64>,
    /// Multiplications performed, counting taps that land in zero padding.
    pub multiplies: u64,
    /// Distinct refocusing weights that took part in at least one multiply.
    pub weights_touched: usize,
}

/// `W_t[c, y, x] = sum_{j in group(c), u, v} W_r[c, j, u, v] W_b[j, y + u - k/2, x + v - k/2] (+ W_b[c, y, x])`
/// over the `N` kernel channels of `W_b`, flattened in `(o, i)` order.
pub fn refocus_oracle(w_b: &Tensor4<f64>, w_r: &Tensor4<f64>, map_groups: usize, shortcut: bool) -> TransformTrace {
    let [c_out, cin_g, kk, _] = w_b.dims();
    let [n, per_group, k, _] = w_r.dims();
    assert_eq!(n, c_out * cin_g);
    assert_eq!(per_group, n / map_groups);
    let pad = k / 2;
    let chan = |c: usize, y: usize, x: usize| w_b.at(c / cin_g, c % cin_g, y, x);
    let mut w_t = Tensor4::zeros(w_b.dims());
    let mut multiplies = 0u64;
    let mut touched = vec![false; w_r.len()];
    for c in 0..n {
        let group = c / per_group;
        for y in 0..kk {
            for x in 0..kk {
                let mut acc = if shortcut { chan(c, y, x) } else { 0.0 };
                for j in 0..per_group {
                    for u in 0..k {
                        for v in 0..k {
                            multiplies += 1;
                            let sy = (y + u) as isize - pad as isize;
                            let sx = (x + v) as isize - pad as isize;
                            let inside = sy >= 0 && sx >= 0 && (sy as usize) < kk && (sx as usize) < kk;
                            let src = if inside { chan(group * per_group + j, sy as usize, sx as usize) } else { 0.0 };
                            acc += w_r.at(c, j, u, v) * src;
                            touched[w_r.offset(c, j, u, v)] = true;
                        }
                    }
                }
                w_t.set(c / cin_g, c % cin_g, y, x, acc);
            }
        }
    }
    TransformTrace { w_t, multiplies, weights_touched: touched.iter().filter(|&&t| t).count() }
}

/// Multiplications of a stride-1 "same" conv over an `h x w` map, counted
/// by walking the loop nest.
pub fn count_conv_multiplies(spec: &ConvSpec, batch: u64, h: u64, w: u64) -> u64 {
    let mut count = 0u64;
    let cin_g = (spec.c_in / spec.groups) as u64;
    for _o in 0..spec.c_out {
        for _i in 0..cin_g {
            for _ky in 0..spec.kernel {
                for _kx in 0..spec.kernel {
                    count += 1;
                }
            }
        }
    }
    count * batch * h * w
}

/// A random valid grouped-conv geometry with small extents.
pub fn random_spec(r: &mut impl Rng) -> ConvSpec {
    loop {
        let groups = [1, 1, 2, 3, 4][r.gen_range(0..5)];
        let c_in = groups * r.gen_range(1..=3);
        let c_out = groups * r.gen_range(1..=3);
        let kernel = [1, 2, 3, 3, 5][r.gen_range(0..5)];
        let stride = r.gen_range(1..=3);
        let padding = r.gen_range(0..=kernel / 2 + 1);
        if let Ok(s) = ConvSpec::new(c_in, c_out, kernel, stride, padding, groups) {
            return s;
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
