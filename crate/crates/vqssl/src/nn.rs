//! Dense layer primitives: 3x3 convolution, per-channel spatial
//! normalization, affine scaling, ReLU, fully-connected layers and pooling.
//! Each primitive has an explicit backward pass; all buffers are flat
//! row-major `Vec<f64>`.

/// A c x h x w feature map, flat row-major `[c][h][w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Map3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map3 { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Map3 { c, h, w, data }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }
}

/// Output spatial size of a 3x3 convolution with padding 1.
pub fn conv_out_size(input: usize, stride: usize) -> usize {
    (input + 2 - 3) / stride + 1
}

/// Zero-padded channels-last copy of a channels-first map:
/// `[(h+2)*(w+2)]` positions of `c` contiguous values each.
fn pad_channels_last(input: &Map3) -> Vec<f64> {
    let (c, h, w) = (input.c, input.h, input.w);
    let pw = w + 2;
    let mut out = vec![0.0; (h + 2) * pw * c];
    for ch in 0..c {
        let src = input.channel(ch);
        for y in 0..h {
            for x in 0..w {
                out[((y + 1) * pw + x + 1) * c + ch] = src[y * w + x];
            }
        }
    }
    out
}

/// Weights permuted from `[o][i][ky][kx]` to `[ky*3+kx][o][i]` so the inner
/// product runs over contiguous input channels.
fn permute_weights(w: &[f64], out_c: usize, in_c: usize) -> Vec<f64> {
    let mut wp = vec![0.0; 9 * out_c * in_c];
    for o in 0..out_c {
        for i in 0..in_c {
            for k in 0..9 {
                wp[(k * out_c + o) * in_c + i] = w[(o * in_c + i) * 9 + k];
            }
        }
    }
    wp
}

/// 3x3 convolution, padding 1. `w` is `[out_c][in_c][3][3]`, `b` is `[out_c]`.
pub fn conv2d(input: &Map3, w: &[f64], b: &[f64], out_c: usize, stride: usize) -> Map3 {
    let in_c = input.c;
    debug_assert_eq!(w.len(), out_c * in_c * 9);
    debug_assert_eq!(b.len(), out_c);
    let oh = conv_out_size(input.h, stride);
    let ow = conv_out_size(input.w, stride);
    let pw = input.w + 2;
    let incl = pad_channels_last(input);
    let wp = permute_weights(w, out_c, in_c);
    let mut outcl = vec![0.0; oh * ow * out_c];
    for oy in 0..oh {
        for ox in 0..ow {
            let out_vec = &mut outcl[(oy * ow + ox) * out_c..(oy * ow + ox + 1) * out_c];
            out_vec.copy_from_slice(b);
            for ky in 0..3 {
                for kx in 0..3 {
                    let pos = (oy * stride + ky) * pw + ox * stride + kx;
                    let in_vec = &incl[pos * in_c..(pos + 1) * in_c];
                    let wk = &wp[(ky * 3 + kx) * out_c * in_c..];
                    for (o, ov) in out_vec.iter_mut().enumerate() {
                        let row = &wk[o * in_c..(o + 1) * in_c];
                        let mut acc = 0.0;
                        for (a, x) in row.iter().zip(in_vec) {
                            acc += a * x;
                        }
                        *ov += acc;
                    }
                }
            }
        }
    }
    let mut out = Map3::zeros(out_c, oh, ow);
    let hw = oh * ow;
    for p in 0..hw {
        for o in 0..out_c {
            out.data[o * hw + p] = outcl[p * out_c + o];
        }
    }
    out
}

/// Backward of [`conv2d`]: returns (d_w, d_b, d_input).
pub fn conv2d_backward(
    input: &Map3,
    w: &[f64],
    out_c: usize,
    stride: usize,
    d_out: &Map3,
) -> (Vec<f64>, Vec<f64>, Map3) {
    let in_c = input.c;
    let (oh, ow) = (d_out.h, d_out.w);
    let pw = input.w + 2;
    let incl = pad_channels_last(input);
    let wp = permute_weights(w, out_c, in_c);
    let mut d_b = vec![0.0; out_c];
    for o in 0..out_c {
        d_b[o] = d_out.channel(o).iter().sum::<f64>();
    }
    let mut dwp = vec![0.0; 9 * out_c * in_c];
    let mut d_incl = vec![0.0; (input.h + 2) * pw * in_c];
    let hw = oh * ow;
    let mut gbuf = vec![0.0; out_c];
    for oy in 0..oh {
        for ox in 0..ow {
            let p = oy * ow + ox;
            for o in 0..out_c {
                gbuf[o] = d_out.data[o * hw + p];
            }
            for ky in 0..3 {
                for kx in 0..3 {
                    let pos = (oy * stride + ky) * pw + ox * stride + kx;
                    let in_vec = &incl[pos * in_c..(pos + 1) * in_c];
                    let d_in_vec = &mut d_incl[pos * in_c..(pos + 1) * in_c];
                    let kbase = (ky * 3 + kx) * out_c * in_c;
                    let wk = &wp[kbase..kbase + out_c * in_c];
                    let dwk = &mut dwp[kbase..kbase + out_c * in_c];
                    for (o, &g) in gbuf.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let wrow = &wk[o * in_c..(o + 1) * in_c];
                        let dwrow = &mut dwk[o * in_c..(o + 1) * in_c];
                        for i in 0..in_c {
                            dwrow[i] += g * in_vec[i];
                            d_in_vec[i] += g * wrow[i];
                        }
                    }
                }
            }
        }
    }
    // permute gradients back to [o][i][ky][kx] and crop the padding
    let mut d_w = vec![0.0; out_c * in_c * 9];
    for o in 0..out_c {
        for i in 0..in_c {
            for k in 0..9 {
                d_w[(o * in_c + i) * 9 + k] = dwp[(k * out_c + o) * in_c + i];
            }
        }
    }
    let mut d_in = Map3::zeros(input.c, input.h, input.w);
    for ch in 0..in_c {
        let base = ch * input.h * input.w;
        for y in 0..input.h {
            for x in 0..input.w {
                d_in.data[base + y * input.w + x] = d_incl[((y + 1) * pw + x + 1) * in_c + ch];
            }
        }
    }
    (d_w, d_b, d_in)
}

pub const NORM_EPS: f64 = 1e-5;

/// Cached statistics from a [`channel_norm`] forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    /// Normalized values (x - mean) * inv_std, per element.
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-channel standardization over spatial positions followed by a learned
/// affine (scale, shift). Statistics are per sample, so the op stays a pure
/// function of its input.
pub fn channel_norm(input: &Map3, scale: &[f64], shift: &[f64]) -> (Map3, NormCache) {
    let m = input.spatial() as f64;
    let mut out = Map3::zeros(input.c, input.h, input.w);
    let mut xhat = vec![0.0; input.data.len()];
    let mut inv_std = vec![0.0; input.c];
    for c in 0..input.c {
        let ch = input.channel(c);
        let mean = ch.iter().sum::<f64>() / m;
        let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[c] = istd;
        let base = c * input.spatial();
        for (j, &v) in ch.iter().enumerate() {
            let xh = (v - mean) * istd;
            xhat[base + j] = xh;
            out.data[base + j] = scale[c] * xh + shift[c];
        }
    }
    (out, NormCache { xhat, inv_std })
}

/// Backward of [`channel_norm`]: returns (d_scale, d_shift, d_input).
pub fn channel_norm_backward(
    cache: &NormCache,
    scale: &[f64],
    d_out: &Map3,
) -> (Vec<f64>, Vec<f64>, Map3) {
    let c_count = d_out.c;
    let m = d_out.spatial();
    let mf = m as f64;
    let mut d_scale = vec![0.0; c_count];
    let mut d_shift = vec![0.0; c_count];
    let mut d_in = Map3::zeros(d_out.c, d_out.h, d_out.w);
    for c in 0..c_count {
        let base = c * m;
        let g = d_out.channel(c);
        let xh = &cache.xhat[base..base + m];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..m {
            sum_g += g[j];
            sum_gx += g[j] * xh[j];
        }
        d_shift[c] = sum_g;
        d_scale[c] = sum_gx;
        let coef = scale[c] * cache.inv_std[c];
        let mean_g = sum_g / mf;
        let mean_gx = sum_gx / mf;
        for j in 0..m {
            d_in.data[base + j] = coef * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    (d_scale, d_shift, d_in)
}

/// Elementwise affine `y = scale * x + shift` over a vector. The batch-size-1
/// normalization fallback used inside the MLP heads.
pub fn affine(x: &[f64], scale: &[f64], shift: &[f64]) -> Vec<f64> {
    x.iter().zip(scale).zip(shift).map(|((&v, &s), &b)| s * v + b).collect()
}

pub fn affine_backward(x: &[f64], scale: &[f64], d_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d_scale: Vec<f64> = d_out.iter().zip(x).map(|(&g, &v)| g * v).collect();
    let d_shift = d_out.to_vec();
    let d_x: Vec<f64> = d_out.iter().zip(scale).map(|(&g, &s)| g * s).collect();
    (d_scale, d_shift, d_x)
}

pub fn relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward of ReLU given the pre-activation values.
pub fn relu_backward(pre: &[f64], d_out: &mut [f64]) {
    for (g, &p) in d_out.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Fully connected `y = W x + b`, `w` row-major `[out][in]`.
pub fn linear(x: &[f64], w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let mut y = b.to_vec();
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = 0.0;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        y[o] += acc;
    }
    y
}

/// Backward of [`linear`]: returns (d_w, d_b, d_x).
pub fn linear_backward(x: &[f64], w: &[f64], out_dim: usize, d_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_dim = x.len();
    let mut d_w = vec![0.0; out_dim * in_dim];
    let mut d_x = vec![0.0; in_dim];
    for o in 0..out_dim {
        let g = d_out[o];
        if g == 0.0 {
            continue;
        }
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let drow = &mut d_w[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            drow[i] += g * x[i];
            d_x[i] += g * row[i];
        }
    }
    (d_w, d_b_from(d_out), d_x)
}

fn d_b_from(d_out: &[f64]) -> Vec<f64> {
    d_out.to_vec()
}

/// Global average pool: per-channel spatial mean.
pub fn global_avg_pool(input: &Map3) -> Vec<f64> {
    let m = input.spatial() as f64;
    (0..input.c).map(|c| input.channel(c).iter().sum::<f64>() / m).collect()
}

pub fn global_avg_pool_backward(d_pooled: &[f64], c: usize, h: usize, w: usize) -> Map3 {
    let mut d_in = Map3::zeros(c, h, w);
    let m = (h * w) as f64;
    for ch in 0..c {
        let g = d_pooled[ch] / m;
        let base = ch * h * w;
        for v in &mut d_in.data[base..base + h * w] {
            *v = g;
        }
    }
    d_in
}

/// Average-pool each channel down by an integer `factor` in both dimensions.
pub fn avg_pool_by(input: &Map3, factor: usize) -> Map3 {
    assert!(factor >= 1 && input.h % factor == 0 && input.w % factor == 0);
    let (oh, ow) = (input.h / factor, input.w / factor);
    let mut out = Map3::zeros(input.c, oh, ow);
    let inv = 1.0 / (factor * factor) as f64;
    for c in 0..input.c {
        let ich = input.channel(c);
        let ob = c * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = (oy * factor + dy) * input.w;
                    for dx in 0..factor {
                        acc += ich[row + ox * factor + dx];
                    }
                }
                out.data[ob + oy * ow + ox] = acc * inv;
            }
        }
    }
    out
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_map(rng: &mut Rng, c: usize, h: usize, w: usize) -> Map3 {
        Map3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.next_gaussian()).collect())
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        // center-tap kernel reproduces the input channel
        let input = Map3::from_vec(1, 3, 3, (1..=9).map(|v| v as f64).collect());
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let out = conv2d(&input, &w, &[0.0], 1, 1);
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn conv_stride2_shape() {
        let input = Map3::zeros(2, 32, 32);
        let w = vec![0.0; 4 * 2 * 9];
        let out = conv2d(&input, &w, &[0.0; 4], 4, 2);
        assert_eq!((out.c, out.h, out.w), (4, 16, 16));
    }

    /// Central finite difference of a scalar-valued function.
    fn fd<F: FnMut(f64) -> f64>(x0: f64, mut f: F) -> f64 {
        let h = 1e-5;
        (f(x0 + h) - f(x0 - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn conv_backward_matches_finite_difference() {
        let mut rng = Rng::new(11);
        let input = rand_map(&mut rng, 2, 5, 5);
        let out_c = 3;
        let w: Vec<f64> = (0..out_c * 2 * 9).map(|_| rng.next_gaussian() * 0.3).collect();
        let b: Vec<f64> = (0..out_c).map(|_| rng.next_gaussian() * 0.1).collect();
        let stride = 2;
        let out = conv2d(&input, &w, &b, out_c, stride);
        let up = rand_map(&mut rng, out.c, out.h, out.w);
        let (d_w, d_b, d_in) = conv2d_backward(&input, &w, out_c, stride, &up);

        let loss = |input: &Map3, w: &[f64], b: &[f64]| -> f64 {
            let o = conv2d(input, w, b, out_c, stride);
            dot(&o.data, &up.data)
        };
        for idx in [0usize, 7, 17, w.len() - 1] {
            let mut wp = w.clone();
            let num = fd(w[idx], |v| {
                wp[idx] = v;
                loss(&input, &wp, &b)
            });
            assert!(rel_err(num, d_w[idx]) < 1e-6, "w[{idx}]: {num} vs {}", d_w[idx]);
        }
        for idx in 0..out_c {
            let mut bp = b.clone();
            let num = fd(b[idx], |v| {
                bp[idx] = v;
                loss(&input, &w, &bp)
            });
            assert!(rel_err(num, d_b[idx]) < 1e-6);
        }
        for idx in [0usize, 12, input.data.len() - 1] {
            let mut ip = input.clone();
            let num = fd(input.data[idx], |v| {
                ip.data[idx] = v;
                loss(&ip, &w, &b)
            });
            assert!(rel_err(num, d_in.data[idx]) < 1e-6);
        }
    }

    #[test]
    fn channel_norm_zero_input_stays_zero() {
        let input = Map3::zeros(3, 4, 4);
        let (out, _) = channel_norm(&input, &[1.0; 3], &[0.0; 3]);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_norm_backward_matches_finite_difference() {
        let mut rng = Rng::new(5);
        let input = rand_map(&mut rng, 2, 4, 4);
        let scale = vec![1.3, 0.7];
        let shift = vec![0.1, -0.2];
        let (out, cache) = channel_norm(&input, &scale, &shift);
        let up = rand_map(&mut rng, out.c, out.h, out.w);
        let (d_scale, d_shift, d_in) = channel_norm_backward(&cache, &scale, &up);

        let loss = |input: &Map3, scale: &[f64], shift: &[f64]| -> f64 {
            let (o, _) = channel_norm(input, scale, shift);
            dot(&o.data, &up.data)
        };
        for idx in [0usize, 9, 31] {
            let mut ip = input.clone();
            let num = fd(input.data[idx], |v| {
                ip.data[idx] = v;
                loss(&ip, &scale, &shift)
            });
            assert!(rel_err(num, d_in.data[idx]) < 1e-5, "{num} vs {}", d_in.data[idx]);
        }
        for c in 0..2 {
            let mut sp = scale.clone();
            let num = fd(scale[c], |v| {
                sp[c] = v;
                loss(&input, &sp, &shift)
            });
            assert!(rel_err(num, d_scale[c]) < 1e-6);
            let mut hp = shift.clone();
            let num = fd(shift[c], |v| {
                hp[c] = v;
                loss(&input, &scale, &hp)
            });
            assert!(rel_err(num, d_shift[c]) < 1e-6);
        }
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = Rng::new(3);
        let x: Vec<f64> = (0..5).map(|_| rng.next_gaussian()).collect();
        let w: Vec<f64> = (0..3 * 5).map(|_| rng.next_gaussian()).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.next_gaussian()).collect();
        let up: Vec<f64> = (0..3).map(|_| rng.next_gaussian()).collect();
        let (d_w, d_b, d_x) = linear_backward(&x, &w, 3, &up);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| dot(&linear(x, w, b, 3), &up);
        for idx in 0..w.len() {
            let mut wp = w.clone();
            let num = fd(w[idx], |v| {
                wp[idx] = v;
                loss(&x, &wp, &b)
            });
            assert!(rel_err(num, d_w[idx]) < 1e-6);
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let num = fd(x[idx], |v| {
                xp[idx] = v;
                loss(&xp, &w, &b)
            });
            assert!(rel_err(num, d_x[idx]) < 1e-6);
        }
        assert_eq!(d_b, up);
    }

    #[test]
    fn gap_is_spatial_mean() {
        let input = Map3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 6.0]);
        assert_eq!(global_avg_pool(&input), vec![3.0]);
    }

    #[test]
    fn avg_pool_by_reduces_constant_to_constant() {
        let input = Map3::from_vec(1, 4, 4, vec![2.5; 16]);
        let out = avg_pool_by(&input, 2);
        assert_eq!(out.data, vec![2.5; 4]);
        assert_eq!((out.h, out.w), (2, 2));
    }

    #[test]
    fn softmax_normalizes() {
        let w = softmax(&[1.0, 2.0, 3.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.windows(2).all(|p| p[0] < p[1]));
    }
}
