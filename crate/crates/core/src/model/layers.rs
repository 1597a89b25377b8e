//! Forward and backward kernels for the network's layer types.
//!
//! Convolutions are stride 1 with "same" zero padding; kernels are
//! `[kd, kh, kw]` with odd extents, so 2-D layers use `kd = 1`.

use rayon::prelude::*;

use super::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
struct Offsets {
    d: isize,
    h: isize,
    w: isize,
}

#[inline]
fn span(len: usize, off: isize) -> (usize, usize) {
    // output indices o with 0 <= o + off < len
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// Calls `f(out_offset, in_offset, run)` for each contiguous output row
/// touched by one kernel tap.
#[inline]
fn for_each_row(dims: [usize; 3], off: Offsets, mut f: impl FnMut(usize, usize, usize)) {
    let [d, h, w] = dims;
    let (d_lo, d_hi) = span(d, off.d);
    let (h_lo, h_hi) = span(h, off.h);
    let (w_lo, w_hi) = span(w, off.w);
    if w_hi <= w_lo {
        return;
    }
    let run = w_hi - w_lo;
    for od in d_lo..d_hi {
        let id = (od as isize + off.d) as usize;
        for oh in h_lo..h_hi {
            let ih = (oh as isize + off.h) as usize;
            let o = (od * h + oh) * w + w_lo;
            let i = (id * h + ih) * w + (w_lo as isize + off.w) as usize;
            f(o, i, run);
        }
    }
}

fn taps(kernel: [usize; 3]) -> impl Iterator<Item = (usize, Offsets)> {
    let [kd, kh, kw] = kernel;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    (0..kd).flat_map(move |a| {
        (0..kh).flat_map(move |b| {
            (0..kw).map(move |c| ((a * kh + b) * kw + c, Offsets { d: a as isize - pd, h: b as isize - ph, w: c as isize - pw }))
        })
    })
}

/// Convolution forward. `weight` is `[out_c, in_c, kd, kh, kw]`.
pub fn conv_forward(input: &Tensor, weight: &[f64], bias: &[f64], out_c: usize, kernel: [usize; 3]) -> Tensor {
    let [n, in_c, d, h, w] = input.shape;
    let plane = d * h * w;
    let kvol: usize = kernel.iter().product();
    let mut out = Tensor::zeros([n, out_c, d, h, w]);
    let item_out = out_c * plane;
    out.data.par_chunks_mut(item_out).enumerate().for_each(|(b, out_item)| {
        let in_item = input.item(b);
        for o in 0..out_c {
            let out_plane = &mut out_item[o * plane..(o + 1) * plane];
            out_plane.fill(bias[o]);
            for i in 0..in_c {
                let in_plane = &in_item[i * plane..(i + 1) * plane];
                let wbase = (o * in_c + i) * kvol;
                for (t, off) in taps(kernel) {
                    let wv = weight[wbase + t];
                    if wv == 0.0 {
                        continue;
                    }
                    for_each_row([d, h, w], off, |oi, ii, run| {
                        let dst = &mut out_plane[oi..oi + run];
                        let src = &in_plane[ii..ii + run];
                        for (a, s) in dst.iter_mut().zip(src) {
                            *a += wv * s;
                        }
                    });
                }
            }
        }
    });
    out
}

/// Convolution backward: returns `(grad_input, grad_weight, grad_bias)`.
/// Per-item weight gradients are reduced in batch order.
pub fn conv_backward(input: &Tensor, weight: &[f64], grad_out: &Tensor, kernel: [usize; 3]) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [_, in_c, d, h, w] = input.shape;
    let out_c = grad_out.shape[1];
    let plane = d * h * w;
    let kvol: usize = kernel.iter().product();
    let mut grad_in = Tensor::zeros(input.shape);
    let item_in = in_c * plane;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = grad_in
        .data
        .par_chunks_mut(item_in)
        .enumerate()
        .map(|(b, gin_item)| {
            let in_item = input.item(b);
            let gout_item = grad_out.item(b);
            let mut gw = vec![0.0; weight.len()];
            let mut gb = vec![0.0; out_c];
            for o in 0..out_c {
                let gout_plane = &gout_item[o * plane..(o + 1) * plane];
                gb[o] = gout_plane.iter().sum();
                for i in 0..in_c {
                    let in_plane = &in_item[i * plane..(i + 1) * plane];
                    let gin_plane = &mut gin_item[i * plane..(i + 1) * plane];
                    let wbase = (o * in_c + i) * kvol;
                    for (t, off) in taps(kernel) {
                        let wv = weight[wbase + t];
                        let mut acc = 0.0;
                        for_each_row([d, h, w], off, |oi, ii, run| {
                            let g = &gout_plane[oi..oi + run];
                            let x = &in_plane[ii..ii + run];
                            let gi = &mut gin_plane[ii..ii + run];
                            for k in 0..run {
                                acc += g[k] * x[k];
                                gi[k] += wv * g[k];
                            }
                        });
                        gw[wbase + t] += acc;
                    }
                }
            }
            (gw, gb)
        })
        .collect();
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; out_c];
    for (pw, pb) in partials {
        for (a, b) in gw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in gb.iter_mut().zip(pb) {
            *a += b;
        }
    }
    (grad_in, gw, gb)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    Tensor { shape: input.shape, data: input.data.iter().map(|&v| v.max(0.0)).collect() }
}

pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor { shape: output.shape, data: output.data.iter().zip(&grad_out.data).map(|(&y, &g)| if y > 0.0 { g } else { 0.0 }).collect() }
}

/// Max pooling by `factor` per spatial axis. Returns the output and, for
/// each output element, the flat index of its source element.
pub fn maxpool_forward(input: &Tensor, factor: [usize; 3]) -> (Tensor, Vec<usize>) {
    let [n, c, d, h, w] = input.shape;
    let [fd, fh, fw] = factor;
    let (od, oh, ow) = (d / fd, h / fh, w / fw);
    let mut out = Tensor::zeros([n, c, od, oh, ow]);
    let mut arg = vec![0usize; out.data.len()];
    let mut k = 0;
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dz in 0..fd {
                            for dy in 0..fh {
                                for dx in 0..fw {
                                    let i = base + ((z * fd + dz) * h + y * fh + dy) * w + x * fw + dx;
                                    if input.data[i] > best {
                                        best = input.data[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.data[k] = best;
                        arg[k] = best_i;
                        k += 1;
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(input_shape: [usize; 5], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    for (&i, &v) in argmax.iter().zip(&grad_out.data) {
        g.data[i] += v;
    }
    g
}

/// Nearest-neighbor upsampling by `factor` per spatial axis.
pub fn upsample_forward(input: &Tensor, factor: [usize; 3]) -> Tensor {
    let [n, c, d, h, w] = input.shape;
    let [fd, fh, fw] = factor;
    let (od, oh, ow) = (d * fd, h * fh, w * fw);
    let mut out = Tensor::zeros([n, c, od, oh, ow]);
    let mut k = 0;
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                let row = base + ((z / fd) * h + y / fh) * w;
                for x in 0..ow {
                    out.data[k] = input.data[row + x / fw];
                    k += 1;
                }
            }
        }
    }
    out
}

pub fn upsample_backward(input_shape: [usize; 5], factor: [usize; 3], grad_out: &Tensor) -> Tensor {
    let [n, c, d, h, w] = input_shape;
    let [fd, fh, fw] = factor;
    let (od, oh, ow) = (d * fd, h * fh, w * fw);
    let mut g = Tensor::zeros(input_shape);
    let mut k = 0;
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                let row = base + ((z / fd) * h + y / fh) * w;
                for x in 0..ow {
                    g.data[row + x / fw] += grad_out.data[k];
                    k += 1;
                }
            }
        }
    }
    g
}

/// Channel concatenation; all inputs share batch and spatial dims.
pub fn concat_forward(inputs: &[&Tensor]) -> Tensor {
    let first = inputs[0];
    let [n, _, d, h, w] = first.shape;
    let c: usize = inputs.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(n * c * d * h * w);
    for b in 0..n {
        for t in inputs {
            data.extend_from_slice(t.item(b));
        }
    }
    Tensor::from_vec([n, c, d, h, w], data)
}

pub fn concat_backward(shapes: &[[usize; 5]], grad_out: &Tensor) -> Vec<Tensor> {
    let mut grads: Vec<Tensor> = shapes.iter().map(|&s| Tensor::zeros(s)).collect();
    let item = grad_out.item_len();
    for b in 0..grad_out.batch() {
        let mut off = b * item;
        for g in grads.iter_mut() {
            let len = g.item_len();
            g.data[b * len..(b + 1) * len].copy_from_slice(&grad_out.data[off..off + len]);
            off += len;
        }
    }
    grads
}

/// Cached values for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Batch normalization over `(batch, depth, row, col)` per channel.
/// Returns output, cache, and the batch mean and variance.
pub fn batchnorm_train(input: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, BnCache, Vec<f64>, Vec<f64>) {
    let [n, c, ..] = input.shape;
    let plane = input.plane();
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += input.item(b)[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
        mean[ch] = s / m;
        let mut v = 0.0;
        for b in 0..n {
            v += input.item(b)[ch * plane..(ch + 1) * plane].iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
        }
        var[ch] = v / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut xhat = vec![0.0; input.data.len()];
    let mut out = Tensor::zeros(input.shape);
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            #[allow(clippy::needless_range_loop)]
            for k in off..off + plane {
                let xh = (input.data[k] - mean[ch]) * inv_std[ch];
                xhat[k] = xh;
                out.data[k] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (out, BnCache { xhat, inv_std }, mean, var)
}

pub fn batchnorm_eval(input: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Tensor {
    let [n, c, ..] = input.shape;
    let plane = input.plane();
    let mut out = Tensor::zeros(input.shape);
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + BN_EPSILON).sqrt();
            let off = (b * c + ch) * plane;
            #[allow(clippy::needless_range_loop)]
            for k in off..off + plane {
                out.data[k] = gamma[ch] * (input.data[k] - mean[ch]) * inv + beta[ch];
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(cache: &BnCache, gamma: &[f64], grad_out: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, c, ..] = grad_out.shape;
    let plane = grad_out.plane();
    let m = (n * plane) as f64;
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            #[allow(clippy::needless_range_loop)]
            for k in off..off + plane {
                g_beta[ch] += grad_out.data[k];
                g_gamma[ch] += grad_out.data[k] * cache.xhat[k];
            }
        }
    }
    let mut gin = Tensor::zeros(grad_out.shape);
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * cache.inv_std[ch] / m;
            let off = (b * c + ch) * plane;
            #[allow(clippy::needless_range_loop)]
            for k in off..off + plane {
                gin.data[k] = scale * (m * grad_out.data[k] - g_beta[ch] - cache.xhat[k] * g_gamma[ch]);
            }
        }
    }
    (gin, g_gamma, g_beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Naive convolution with explicit bounds checks.
    fn conv_reference(input: &Tensor, weight: &[f64], bias: &[f64], out_c: usize, k: [usize; 3]) -> Tensor {
        let [n, in_c, d, h, w] = input.shape;
        let mut out = Tensor::zeros([n, out_c, d, h, w]);
        let p = [k[0] / 2, k[1] / 2, k[2] / 2];
        for b in 0..n {
            #[allow(clippy::needless_range_loop)]
            for o in 0..out_c {
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = bias[o];
                            for i in 0..in_c {
                                for a in 0..k[0] {
                                    for bb in 0..k[1] {
                                        for cc in 0..k[2] {
                                            let (iz, iy, ix) = (z + a, y + bb, x + cc);
                                            if iz < p[0] || iy < p[1] || ix < p[2] {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz - p[0], iy - p[1], ix - p[2]);
                                            if iz >= d || iy >= h || ix >= w {
                                                continue;
                                            }
                                            let wi = (((o * in_c + i) * k[0] + a) * k[1] + bb) * k[2] + cc;
                                            acc += weight[wi] * input.data[(((b * in_c + i) * d + iz) * h + iy) * w + ix];
                                        }
                                    }
                                }
                            }
                            out.data[(((b * out_c + o) * d + z) * h + y) * w + x] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference_2d_and_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (shape, k) in
            [([2, 3, 1, 5, 6], [1, 3, 3]), ([1, 2, 4, 3, 5], [3, 3, 3]), ([2, 2, 1, 4, 4], [1, 5, 5]), ([1, 3, 1, 4, 4], [1, 1, 1])]
        {
            let x = random(shape, &mut rng);
            let out_c = 4;
            let wlen = out_c * shape[1] * k.iter().product::<usize>();
            let w: Vec<f64> = (0..wlen).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..out_c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv_forward(&x, &w, &b, out_c, k);
            let slow = conv_reference(&x, &w, &b, out_c, k);
            for (a, r) in fast.data.iter().zip(&slow.data) {
                assert!((a - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = [2, 2, 1, 4, 5];
        let k = [1, 3, 3];
        let out_c = 3;
        let x = random(shape, &mut rng);
        let w: Vec<f64> = (0..out_c * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..out_c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = random([2, out_c, 1, 4, 5], &mut rng);
        let objective = |x: &Tensor, w: &[f64], b: &[f64]| -> f64 {
            conv_forward(x, w, b, out_c, k).data.iter().zip(&probe.data).map(|(a, p)| a * p).sum()
        };
        let (gx, gw, gb) = conv_backward(&x, &w, &probe, k);
        let h = 1e-6;
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (objective(&xp, &w, &b) - objective(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - gx.data[i]).abs() < 1e-7);
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            let fd = (objective(&x, &wp, &b) - objective(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-7);
        }
        for i in 0..b.len() {
            let mut bp = b.to_vec();
            let mut bm = b.to_vec();
            bp[i] += h;
            bm[i] -= h;
            let fd = (objective(&x, &w, &bp) - objective(&x, &w, &bm)) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn pool_and_upsample_shapes_and_routing() {
        let x = Tensor::from_vec([1, 1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]);
        let (p, arg) = maxpool_forward(&x, [1, 2, 2]);
        assert_eq!(p.data, vec![5.0, 9.0]);
        let g = maxpool_backward(x.shape, &arg, &Tensor::from_vec(p.shape, vec![1.0, 2.0]));
        assert_eq!(g.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let u = upsample_forward(&p, [1, 2, 2]);
        assert_eq!(u.data, vec![5.0, 5.0, 9.0, 9.0, 5.0, 5.0, 9.0, 9.0]);
        let gu = upsample_backward(p.shape, [1, 2, 2], &Tensor::from_vec(u.shape, vec![1.0; 8]));
        assert_eq!(gu.data, vec![4.0, 4.0]);
    }

    #[test]
    fn concat_splits_back() {
        let a = Tensor::from_vec([2, 1, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec([2, 2, 1, 1, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = concat_forward(&[&a, &b]);
        assert_eq!(c.data, vec![1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        let parts = concat_backward(&[a.shape, b.shape], &c);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([3, 2, 1, 2, 3], &mut rng);
        let gamma = vec![1.3, -0.7];
        let beta = vec![0.2, 0.5];
        let probe = random(x.shape, &mut rng);
        let objective =
            |x: &Tensor, g: &[f64], b: &[f64]| -> f64 { batchnorm_train(x, g, b).0.data.iter().zip(&probe.data).map(|(a, p)| a * p).sum() };
        let (_, cache, _, _) = batchnorm_train(&x, &gamma, &beta);
        let (gx, gg, gb) = batchnorm_backward(&cache, &gamma, &probe);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (objective(&xp, &gamma, &beta) - objective(&xm, &gamma, &beta)) / (2.0 * h);
            assert!((fd - gx.data[i]).abs() < 1e-6, "{fd} vs {}", gx.data[i]);
        }
        for c in 0..2 {
            let mut gp = gamma.clone();
            let mut gm = gamma.clone();
            gp[c] += h;
            gm[c] -= h;
            let fd = (objective(&x, &gp, &beta) - objective(&x, &gm, &beta)) / (2.0 * h);
            assert!((fd - gg[c]).abs() < 1e-6);
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[c] += h;
            bm[c] -= h;
            let fd = (objective(&x, &gamma, &bp) - objective(&x, &gamma, &bm)) / (2.0 * h);
            assert!((fd - gb[c]).abs() < 1e-6);
        }
    }
}
