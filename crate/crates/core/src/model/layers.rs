//! Dense building blocks with hand-written backward passes.
//!
//! Feature maps are `C×H×W`, row-major. Convolutions are fixed at kernel 3,
//! stride 2, padding 1 and run as im2col followed by one GEMM.

use matrixmultiply::dgemm;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    /// From interleaved `H×W×3` pixels.
    pub fn from_interleaved(h: usize, w: usize, pixels: &[f64]) -> Self {
        let mut data = vec![0.0; 3 * h * w];
        for (p, px) in pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + p] = px[c];
            }
        }
        Self { c: 3, h, w, data }
    }

    /// Per-channel spatial mean.
    pub fn global_average(&self) -> Vec<f64> {
        let n = (self.h * self.w) as f64;
        self.data.chunks_exact(self.h * self.w).map(|ch| ch.iter().sum::<f64>() / n).collect()
    }
}

/// Output extent along one axis of a stride-2, padding-1, 3×3 convolution.
pub fn conv_out_size(n: usize) -> usize {
    (n + 2 * PAD - KERNEL) / STRIDE + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    /// `out_c × (in_c · 9)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_c: usize, out_c: usize) -> Self {
        Self {
            in_c,
            out_c,
            weight: vec![0.0; out_c * in_c * KERNEL * KERNEL],
            bias: vec![0.0; out_c],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_c * KERNEL * KERNEL
    }

    fn im2col(x: &FeatureMap, ho: usize, wo: usize) -> Vec<f64> {
        let n = ho * wo;
        let mut cols = vec![0.0; x.c * KERNEL * KERNEL * n];
        for c in 0..x.c {
            let plane = &x.data[c * x.h * x.w..(c + 1) * x.h * x.w];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = &mut cols[((c * KERNEL + ky) * KERNEL + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..][..x.w];
                        for ox in 0..wo {
                            let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                            if ix >= 0 && (ix as usize) < x.w {
                                row[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(cols: &[f64], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> FeatureMap {
        let n = ho * wo;
        let mut out = FeatureMap::zeros(c, h, w);
        for ch in 0..c {
            let plane = &mut out.data[ch * h * w..(ch + 1) * h * w];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = &cols[((ch * KERNEL + ky) * KERNEL + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                            if ix >= 0 && (ix as usize) < w {
                                plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the output and the im2col matrix needed for backward.
    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, Vec<f64>) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (ho, wo) = (conv_out_size(x.h), conv_out_size(x.w));
        let n = ho * wo;
        let k = self.fan_in();
        let cols = Self::im2col(x, ho, wo);
        let mut out = FeatureMap::zeros(self.out_c, ho, wo);
        for (o, b) in out.data.chunks_exact_mut(n).zip(&self.bias) {
            o.fill(*b);
        }
        unsafe {
            dgemm(
                self.out_c,
                k,
                n,
                1.0,
                self.weight.as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                1.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        (out, cols)
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient.
    pub fn backward(&self, input_shape: (usize, usize), cols: &[f64], dout: &FeatureMap, grad: &mut Conv2d) -> FeatureMap {
        let (h, w) = input_shape;
        let (ho, wo) = (dout.h, dout.w);
        let n = ho * wo;
        let k = self.fan_in();
        for (gb, d) in grad.bias.iter_mut().zip(dout.data.chunks_exact(n)) {
            *gb += d.iter().sum::<f64>();
        }
        let mut dcols = vec![0.0; k * n];
        unsafe {
            // dW += dOut · colsᵀ
            dgemm(
                self.out_c,
                n,
                k,
                1.0,
                dout.data.as_ptr(),
                n as isize,
                1,
                cols.as_ptr(),
                1,
                n as isize,
                1.0,
                grad.weight.as_mut_ptr(),
                k as isize,
                1,
            );
            // dcols = Wᵀ · dOut
            dgemm(
                k,
                self.out_c,
                n,
                1.0,
                self.weight.as_ptr(),
                1,
                k as isize,
                dout.data.as_ptr(),
                n as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Self::col2im(&dcols, self.in_c, h, w, ho, wo)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    /// `out_f × in_f`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_f: usize, out_f: usize) -> Self {
        Self {
            in_f,
            out_f,
            weight: vec![0.0; in_f * out_f],
            bias: vec![0.0; out_f],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_f, "linear input width");
        self.weight
            .chunks_exact(self.in_f)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn backward(&self, x: &[f64], dout: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_f];
        for (o, &d) in dout.iter().enumerate() {
            grad.bias[o] += d;
            let row = &self.weight[o * self.in_f..(o + 1) * self.in_f];
            let grow = &mut grad.weight[o * self.in_f..(o + 1) * self.in_f];
            for i in 0..self.in_f {
                grow[i] += d * x[i];
                dx[i] += d * row[i];
            }
        }
        dx
    }
}

pub fn leaky_relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward of [`leaky_relu`] given the pre-activation values.
pub fn leaky_relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if z < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// Per-channel normalization to zero mean and unit variance (biased
/// variance), in place. Returns the per-channel inverse standard deviations.
pub fn instance_norm(x: &mut FeatureMap) -> Vec<f64> {
    let n = x.h * x.w;
    x.data
        .chunks_exact_mut(n)
        .map(|ch| {
            let mean = ch.iter().sum::<f64>() / n as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for v in ch.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv
        })
        .collect()
}

/// Backward of [`instance_norm`] given its output `y` and inverse deviations.
pub fn instance_norm_backward(y: &FeatureMap, inv_std: &[f64], grad: &mut FeatureMap) {
    let n = y.h * y.w;
    for ((g, yc), &inv) in grad.data.chunks_exact_mut(n).zip(y.data.chunks_exact(n)).zip(inv_std) {
        let mean_g = g.iter().sum::<f64>() / n as f64;
        let mean_gy = g.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for (gv, &yv) in g.iter_mut().zip(yc) {
            *gv = inv * (*gv - mean_g - yv * mean_gy);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> FeatureMap {
        FeatureMap {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Direct nested-loop convolution.
    fn naive_conv(conv: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let (ho, wo) = (conv_out_size(x.h), conv_out_size(x.w));
        let mut out = FeatureMap::zeros(conv.out_c, ho, wo);
        for o in 0..conv.out_c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = conv.bias[o];
                    for c in 0..conv.in_c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    s += conv.weight[((o * conv.in_c + c) * 3 + ky) * 3 + kx]
                                        * x.data[(c * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                    }
                    out.data[(o * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn out_sizes() {
        assert_eq!(conv_out_size(256), 128);
        assert_eq!(conv_out_size(16), 8);
        assert_eq!(conv_out_size(1), 1);
        assert_eq!(conv_out_size(5), 3);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::zeros(3, 4);
        conv.weight.iter_mut().chain(conv.bias.iter_mut()).for_each(|v| *v = rng.gen_range(-1.0..1.0));
        for (h, w) in [(8, 8), (7, 5), (1, 3)] {
            let x = random_map(3, h, w, &mut rng);
            let (fast, _) = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::zeros(2, 3);
        conv.weight.iter_mut().chain(conv.bias.iter_mut()).for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let x = random_map(2, 5, 6, &mut rng);
        let (out, cols) = conv.forward(&x);
        let dout = random_map(out.c, out.h, out.w, &mut rng);
        let obj = |c: &Conv2d, x: &FeatureMap| -> f64 {
            c.forward(x).0.data.iter().zip(&dout.data).map(|(a, b)| a * b).sum()
        };
        let mut grad = Conv2d::zeros(2, 3);
        let dx = conv.backward((x.h, x.w), &cols, &dout, &mut grad);
        let h = 1e-5;
        for n in 0..conv.weight.len() {
            let mut up = conv.clone();
            up.weight[n] += h;
            let mut dn = conv.clone();
            dn.weight[n] -= h;
            let fd = (obj(&up, &x) - obj(&dn, &x)) / (2.0 * h);
            assert!((fd - grad.weight[n]).abs() < 1e-7);
        }
        for n in 0..x.data.len() {
            let mut up = x.clone();
            up.data[n] += h;
            let mut dn = x.clone();
            dn.data[n] -= h;
            let fd = (obj(&conv, &up) - obj(&conv, &dn)) / (2.0 * h);
            assert!((fd - dx.data[n]).abs() < 1e-7);
        }
    }

    #[test]
    fn instance_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_map(2, 3, 3, &mut rng);
        let weights = random_map(2, 3, 3, &mut rng);
        let obj = |x: &FeatureMap| -> f64 {
            let mut y = x.clone();
            instance_norm(&mut y);
            y.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
        };
        let mut y = x.clone();
        let inv = instance_norm(&mut y);
        let mut g = weights.clone();
        instance_norm_backward(&y, &inv, &mut g);
        let h = 1e-6;
        for n in 0..x.data.len() {
            let mut up = x.clone();
            up.data[n] += h;
            let mut dn = x.clone();
            dn.data[n] -= h;
            let fd = (obj(&up) - obj(&dn)) / (2.0 * h);
            assert!((fd - g.data[n]).abs() < 1e-6, "{n}: {fd} vs {}", g.data[n]);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lin = Linear::zeros(4, 3);
        lin.weight.iter_mut().chain(lin.bias.iter_mut()).for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dout = [0.3, -0.7, 1.1];
        let mut grad = Linear::zeros(4, 3);
        let dx = lin.backward(&x, &dout, &mut grad);
        let obj = |l: &Linear, x: &[f64]| -> f64 { l.forward(x).iter().zip(&dout).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        for n in 0..x.len() {
            let mut up = x.clone();
            up[n] += h;
            let mut dn = x.clone();
            dn[n] -= h;
            assert!(((obj(&lin, &up) - obj(&lin, &dn)) / (2.0 * h) - dx[n]).abs() < 1e-8);
        }
        for n in 0..lin.weight.len() {
            let mut up = lin.clone();
            up.weight[n] += h;
            let mut dn = lin.clone();
            dn.weight[n] -= h;
            assert!(((obj(&up, &x) - obj(&dn, &x)) / (2.0 * h) - grad.weight[n]).abs() < 1e-8);
        }
    }
}
