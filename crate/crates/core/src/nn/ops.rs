//! Dense feature-map primitives with hand-written backward passes.

use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::volume::{voxel_count, Shape3};

/// Multi-channel feature map, channel-major `(C, D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Feat<T> {
    pub channels: usize,
    pub shape: Shape3,
    pub data: Vec<T>,
}

impl<T: Real> Feat<T> {
    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Feat {
            channels,
            shape,
            data: vec![T::zero(); channels * voxel_count(shape)],
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        voxel_count(self.shape)
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Feat<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Spatial kernel extents along `(D, H, W)`. `D` is the through-plane axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Kernel3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Kernel3 {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Kernel3 { d, h, w }
    }

    pub fn volume(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_odd(&self) -> bool {
        self.d % 2 == 1 && self.h % 2 == 1 && self.w % 2 == 1
    }
}

impl From<[usize; 3]> for Kernel3 {
    fn from(k: [usize; 3]) -> Self {
        Kernel3::new(k[0], k[1], k[2])
    }
}

impl From<Kernel3> for [usize; 3] {
    fn from(k: Kernel3) -> Self {
        [k.d, k.h, k.w]
    }
}

/// Same-padded, stride-1 3D convolution whose parameters live in a shared flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: Kernel3,
    pub offset: usize,
}

/// Valid output range along one axis for a tap displaced by `delta`.
#[inline]
fn span(n: usize, delta: isize) -> (usize, usize) {
    let lo = (-delta).max(0) as usize;
    let hi = (n as isize - delta.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

impl Conv3d {
    pub fn n_weights(&self) -> usize {
        self.out_c * self.in_c * self.kernel.volume()
    }

    pub fn n_params(&self) -> usize {
        self.n_weights() + self.out_c
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.n_weights()
    }

    /// Visits every (out-channel, in-channel, tap, row) with the matching row spans.
    ///
    /// The callback receives `(o, i, weight_index, out_row_start, in_row_start, len)`
    /// in flat per-channel coordinates.
    #[inline]
    fn for_each_row(&self, shape: Shape3, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let [d, h, w] = shape;
        let k = self.kernel;
        let (pd, ph, pw) = ((k.d / 2) as isize, (k.h / 2) as isize, (k.w / 2) as isize);
        for o in 0..self.out_c {
            for i in 0..self.in_c {
                for a in 0..k.d {
                    let dz = a as isize - pd;
                    let (z0, z1) = span(d, dz);
                    for b in 0..k.h {
                        let dy = b as isize - ph;
                        let (y0, y1) = span(h, dy);
                        for c in 0..k.w {
                            let dx = c as isize - pw;
                            let (x0, x1) = span(w, dx);
                            if x1 <= x0 {
                                continue;
                            }
                            let widx = (((o * self.in_c + i) * k.d + a) * k.h + b) * k.w + c;
                            for z in z0..z1 {
                                let zi = (z as isize + dz) as usize;
                                for y in y0..y1 {
                                    let yi = (y as isize + dy) as usize;
                                    let out_start = (z * h + y) * w + x0;
                                    let in_start = (zi * h + yi) * w + (x0 as isize + dx) as usize;
                                    f(o, i, widx, out_start, in_start, x1 - x0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, params: &[T], input: &Feat<T>) -> Feat<T> {
        debug_assert_eq!(input.channels, self.in_c);
        let n = input.plane();
        let weights = &params[self.offset..self.offset + self.n_weights()];
        let bias = &params[self.bias_offset()..self.bias_offset() + self.out_c];
        let mut out = Feat::zeros(self.out_c, input.shape);
        for (o, &b) in bias.iter().enumerate() {
            out.data[o * n..(o + 1) * n].fill(b);
        }
        let src = &input.data;
        let dst = &mut out.data;
        self.for_each_row(input.shape, |o, i, widx, os, is, len| {
            let wv = weights[widx];
            let orow = &mut dst[o * n + os..o * n + os + len];
            let irow = &src[i * n + is..i * n + is + len];
            for (y, &x) in orow.iter_mut().zip(irow) {
                *y += wv * x;
            }
        });
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient
    /// when requested.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        input: &Feat<T>,
        grad_out: &Feat<T>,
        grads: &mut [T],
        need_input_grad: bool,
    ) -> Option<Feat<T>> {
        let n = input.plane();
        let weights = &params[self.offset..self.offset + self.n_weights()];
        let boff = self.bias_offset();
        for o in 0..self.out_c {
            let s: T = grad_out.channel(o).iter().copied().sum();
            grads[boff + o] += s;
        }
        let (wgrads, _) = grads[self.offset..].split_at_mut(self.n_weights());
        let src = &input.data;
        let g = &grad_out.data;
        if need_input_grad {
            let mut gin = Feat::zeros(self.in_c, input.shape);
            let gdst = &mut gin.data;
            self.for_each_row(input.shape, |o, i, widx, os, is, len| {
                let grow = &g[o * n + os..o * n + os + len];
                let irow = &src[i * n + is..i * n + is + len];
                let mut acc = T::zero();
                for (&gv, &xv) in grow.iter().zip(irow) {
                    acc += gv * xv;
                }
                wgrads[widx] += acc;
                let wv = weights[widx];
                let girow = &mut gdst[i * n + is..i * n + is + len];
                for (gi, &gv) in girow.iter_mut().zip(grow) {
                    *gi += wv * gv;
                }
            });
            Some(gin)
        } else {
            self.for_each_row(input.shape, |o, i, widx, os, is, len| {
                let grow = &g[o * n + os..o * n + os + len];
                let irow = &src[i * n + is..i * n + is + len];
                let mut acc = T::zero();
                for (&gv, &xv) in grow.iter().zip(irow) {
                    acc += gv * xv;
                }
                wgrads[widx] += acc;
            });
            None
        }
    }
}

pub fn relu_inplace<T: Real>(f: &mut Feat<T>) {
    for v in &mut f.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the post-ReLU activation is not positive.
pub fn relu_backward_inplace<T: Real>(activation: &Feat<T>, grad: &mut Feat<T>) {
    for (g, &a) in grad.data.iter_mut().zip(&activation.data) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Multiplies each channel by its dropout scale (0 or `1/(1-p)`).
pub fn scale_channels<T: Real>(f: &Feat<T>, scales: &[T]) -> Feat<T> {
    let n = f.plane();
    let mut out = f.clone();
    for (c, &s) in scales.iter().enumerate() {
        for v in &mut out.data[c * n..(c + 1) * n] {
            *v *= s;
        }
    }
    out
}

pub fn scale_channels_inplace<T: Real>(f: &mut Feat<T>, scales: &[T]) {
    let n = f.plane();
    for (c, &s) in scales.iter().enumerate() {
        for v in &mut f.data[c * n..(c + 1) * n] {
            *v *= s;
        }
    }
}

/// 2×2×2 average pooling; every spatial extent must be even.
pub fn avg_pool2<T: Real>(f: &Feat<T>) -> Feat<T> {
    let [d, h, w] = f.shape;
    let os = [d / 2, h / 2, w / 2];
    let mut out = Feat::zeros(f.channels, os);
    let n_in = f.plane();
    let n_out = out.plane();
    let eighth = T::of(0.125);
    for c in 0..f.channels {
        let src = &f.data[c * n_in..(c + 1) * n_in];
        let dst = &mut out.data[c * n_out..(c + 1) * n_out];
        for z in 0..d {
            for y in 0..h {
                let orow = ((z / 2) * os[1] + y / 2) * os[2];
                let irow = (z * h + y) * w;
                for x in 0..w {
                    dst[orow + x / 2] += src[irow + x];
                }
            }
        }
        for v in dst.iter_mut() {
            *v *= eighth;
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(grad_out: &Feat<T>, in_shape: Shape3) -> Feat<T> {
    let [d, h, w] = in_shape;
    let os = grad_out.shape;
    let mut gin = Feat::zeros(grad_out.channels, in_shape);
    let n_in = gin.plane();
    let n_out = grad_out.plane();
    let eighth = T::of(0.125);
    for c in 0..grad_out.channels {
        let src = &grad_out.data[c * n_out..(c + 1) * n_out];
        let dst = &mut gin.data[c * n_in..(c + 1) * n_in];
        for z in 0..d {
            for y in 0..h {
                let orow = ((z / 2) * os[1] + y / 2) * os[2];
                let irow = (z * h + y) * w;
                for x in 0..w {
                    dst[irow + x] = src[orow + x / 2] * eighth;
                }
            }
        }
    }
    gin
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Real>(f: &Feat<T>) -> Feat<T> {
    let [d, h, w] = f.shape;
    let os = [d * 2, h * 2, w * 2];
    let mut out = Feat::zeros(f.channels, os);
    let n_in = f.plane();
    let n_out = out.plane();
    for c in 0..f.channels {
        let src = &f.data[c * n_in..(c + 1) * n_in];
        let dst = &mut out.data[c * n_out..(c + 1) * n_out];
        for z in 0..os[0] {
            for y in 0..os[1] {
                let irow = ((z / 2) * h + y / 2) * w;
                let orow = (z * os[1] + y) * os[2];
                for x in 0..os[2] {
                    dst[orow + x] = src[irow + x / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad_out: &Feat<T>) -> Feat<T> {
    let [od, oh, ow] = grad_out.shape;
    let is = [od / 2, oh / 2, ow / 2];
    let mut gin = Feat::zeros(grad_out.channels, is);
    let n_in = gin.plane();
    let n_out = grad_out.plane();
    for c in 0..grad_out.channels {
        let src = &grad_out.data[c * n_out..(c + 1) * n_out];
        let dst = &mut gin.data[c * n_in..(c + 1) * n_in];
        for z in 0..od {
            for y in 0..oh {
                let irow = ((z / 2) * is[1] + y / 2) * is[2];
                let orow = (z * oh + y) * ow;
                for x in 0..ow {
                    dst[irow + x / 2] += src[orow + x];
                }
            }
        }
    }
    gin
}

/// Channel softmax at every voxel, computed stably in `f64` per voxel.
pub fn softmax<T: Real>(logits: &Feat<T>) -> Feat<T> {
    let n = logits.plane();
    let c = logits.channels;
    let mut out = Feat::zeros(c, logits.shape);
    let mut buf = vec![0.0f64; c];
    for v in 0..n {
        let mut max = f64::NEG_INFINITY;
        for (k, b) in buf.iter_mut().enumerate() {
            *b = logits.data[k * n + v].as_f64();
            max = max.max(*b);
        }
        let mut sum = 0.0;
        for b in buf.iter_mut() {
            *b = (*b - max).exp();
            sum += *b;
        }
        for (k, b) in buf.iter().enumerate() {
            out.data[k * n + v] = T::of(b / sum);
        }
    }
    out
}

/// Gradient through softmax: `dz_c = p_c (g_c - Σ_k p_k g_k)`.
pub fn softmax_backward<T: Real>(probs: &Feat<T>, grad: &[T]) -> Feat<T> {
    let n = probs.plane();
    let c = probs.channels;
    let mut out = Feat::zeros(c, probs.shape);
    for v in 0..n {
        let mut dot = T::zero();
        for k in 0..c {
            dot += probs.data[k * n + v] * grad[k * n + v];
        }
        for k in 0..c {
            let p = probs.data[k * n + v];
            out.data[k * n + v] = p * (grad[k * n + v] - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feat(rng: &mut ChaCha8Rng, c: usize, shape: Shape3) -> Feat<f64> {
        let mut f = Feat::zeros(c, shape);
        for v in &mut f.data {
            *v = rng.random_range(-1.0..1.0);
        }
        f
    }

    /// Direct 7-loop convolution used as an oracle.
    fn conv_oracle(conv: &Conv3d, params: &[f64], x: &Feat<f64>) -> Feat<f64> {
        let [d, h, w] = x.shape;
        let k = conv.kernel;
        let mut out = Feat::zeros(conv.out_c, x.shape);
        for o in 0..conv.out_c {
            for z in 0..d as isize {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = params[conv.offset + conv.n_weights() + o];
                        for i in 0..conv.in_c {
                            for a in 0..k.d {
                                for b in 0..k.h {
                                    for c in 0..k.w {
                                        let zi = z + a as isize - (k.d / 2) as isize;
                                        let yi = y + b as isize - (k.h / 2) as isize;
                                        let xi = xx + c as isize - (k.w / 2) as isize;
                                        if zi < 0 || yi < 0 || xi < 0 || zi >= d as isize || yi >= h as isize || xi >= w as isize {
                                            continue;
                                        }
                                        let widx = (((o * conv.in_c + i) * k.d + a) * k.h + b) * k.w + c;
                                        let xv = x.data[i * d * h * w + ((zi as usize * h) + yi as usize) * w + xi as usize];
                                        acc += params[conv.offset + widx] * xv;
                                    }
                                }
                            }
                        }
                        out.data[o * d * h * w + ((z as usize * h) + y as usize) * w + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kernel in [Kernel3::new(3, 7, 7), Kernel3::new(1, 3, 3), Kernel3::new(3, 3, 3), Kernel3::new(1, 1, 1)] {
            let conv = Conv3d { in_c: 2, out_c: 3, kernel, offset: 5 };
            let params: Vec<f64> = (0..conv.n_params() + 5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = random_feat(&mut rng, 2, [3, 4, 5]);
            let got = conv.forward(&params, &x);
            let want = conv_oracle(&conv, &params, &x);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv3d { in_c: 2, out_c: 2, kernel: Kernel3::new(3, 3, 1), offset: 0 };
        let mut params: Vec<f64> = (0..conv.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut x = random_feat(&mut rng, 2, [3, 3, 4]);
        let r = random_feat(&mut rng, 2, [3, 3, 4]);
        // scalar objective: <r, conv(x)>
        let obj = |p: &[f64], x: &Feat<f64>| -> f64 {
            conv.forward(p, x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let mut grads = vec![0.0; conv.n_params()];
        let gin = conv.backward(&params, &x, &r, &mut grads, true).unwrap();
        let h = 1e-6;
        for j in 0..params.len() {
            let orig = params[j];
            params[j] = orig + h;
            let up = obj(&params, &x);
            params[j] = orig - h;
            let down = obj(&params, &x);
            params[j] = orig;
            assert!(((up - down) / (2.0 * h) - grads[j]).abs() < 1e-6);
        }
        for j in 0..x.data.len() {
            let orig = x.data[j];
            x.data[j] = orig + h;
            let up = obj(&params, &x);
            x.data[j] = orig - h;
            let down = obj(&params, &x);
            x.data[j] = orig;
            assert!(((up - down) / (2.0 * h) - gin.data[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        // <pool(a), b> == <a, pool_backward(b)> and same for upsampling.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_feat(&mut rng, 2, [4, 2, 6]);
        let b = random_feat(&mut rng, 2, [2, 1, 3]);
        let lhs: f64 = avg_pool2(&a).data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.data.iter().zip(&avg_pool2_backward(&b, a.shape).data).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs: f64 = upsample2(&b).data.iter().zip(&a.data).map(|(x, y)| x * y).sum();
        let rhs: f64 = b.data.iter().zip(&upsample2_backward(&a).data).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_normalizes_and_backprops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut z = random_feat(&mut rng, 3, [2, 2, 2]);
        for v in &mut z.data {
            *v *= 20.0;
        }
        let p = softmax(&z);
        for v in 0..8 {
            let s: f64 = (0..3).map(|c| p.data[c * 8 + v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let g = random_feat(&mut rng, 3, [2, 2, 2]);
        let dz = softmax_backward(&p, &g.data);
        let h = 1e-6;
        for j in 0..z.data.len() {
            let mut zp = z.clone();
            zp.data[j] += h;
            let mut zm = z.clone();
            zm.data[j] -= h;
            let f = |zz: &Feat<f64>| -> f64 { softmax(zz).data.iter().zip(&g.data).map(|(a, b)| a * b).sum() };
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((fd - dz.data[j]).abs() < 1e-6);
        }
    }
}
