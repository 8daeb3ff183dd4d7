//! 2-D convolution via im2col + GEMM with hand-written backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

impl ConvSpec {
    pub fn conv3x3(out_channels: usize, stride: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
            relu: true,
        }
    }

    pub fn pointwise(out_channels: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            relu: true,
        }
    }

    pub fn out_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= self.kernel && self.stride > 0).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub spec: ConvSpec,
    /// `out_channels × (in_channels · kernel²)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// What a layer's forward pass keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    col: Vec<f64>,
    /// Post-activation output.
    out: Vec<f64>,
}

impl ConvCache {
    pub fn output(&self) -> &[f64] {
        &self.out
    }

    pub fn into_output(self) -> Vec<f64> {
        self.out
    }
}

/// `c = a · b + beta · c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, spec: ConvSpec) -> Self {
        let fan_in = in_channels * spec.kernel * spec.kernel;
        ConvLayer {
            in_channels,
            weight: vec![0.0; spec.out_channels * fan_in],
            bias: vec![0.0; spec.out_channels],
            spec,
        }
    }

    /// He-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(in_channels: usize, spec: ConvSpec, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_channels, spec);
        let fan_in = layer.fan_in() as f64;
        let limit = (6.0 / fan_in).sqrt();
        for w in &mut layer.weight {
            *w = rng.gen_range(-limit..limit);
        }
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.spec.kernel * self.spec.kernel
    }

    fn im2col(&self, input: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.spec.kernel;
        let (s, p) = (self.spec.stride, self.spec.padding as isize);
        let n = oh * ow;
        let mut col = vec![0.0; self.fan_in() * n];
        for ci in 0..self.in_channels {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.spec.kernel;
        let (s, p) = (self.spec.stride, self.spec.padding as isize);
        let n = oh * ow;
        let mut out = vec![0.0; self.in_channels * h * w];
        for ci in 0..self.in_channels {
            let plane = &mut out[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Forward pass over a `in_channels × h × w` input.
    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> ConvCache {
        debug_assert_eq!(input.len(), self.in_channels * h * w);
        let oh = self.spec.out_size(h).expect("input smaller than kernel");
        let ow = self.spec.out_size(w).expect("input smaller than kernel");
        let n = oh * ow;
        let rows = self.fan_in();
        let col = self.im2col(input, h, w, oh, ow);
        let oc = self.spec.out_channels;
        let mut out = vec![0.0; oc * n];
        gemm(oc, rows, n, &self.weight, (rows, 1), &col, (n, 1), 0.0, &mut out);
        for (o, plane) in out.chunks_exact_mut(n).enumerate() {
            let b = self.bias[o];
            for v in plane.iter_mut() {
                *v += b;
                if self.spec.relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        ConvCache {
            in_h: h,
            in_w: w,
            out_h: oh,
            out_w: ow,
            col,
            out,
        }
    }

    /// Accumulates parameter gradients into `grad_weight`/`grad_bias` and
    /// returns the input gradient when `want_input` is set. `grad_out` is
    /// the gradient w.r.t. the post-activation output.
    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &[f64],
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let n = cache.out_h * cache.out_w;
        let rows = self.fan_in();
        let oc = self.spec.out_channels;
        let mut g = grad_out.to_vec();
        if self.spec.relu {
            for (gv, &ov) in g.iter_mut().zip(&cache.out) {
                if ov <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        for (o, plane) in g.chunks_exact(n).enumerate() {
            grad_bias[o] += plane.iter().sum::<f64>();
        }
        gemm(oc, n, rows, &g, (n, 1), &cache.col, (1, n), 1.0, grad_weight);
        want_input.then(|| {
            let mut dcol = vec![0.0; rows * n];
            gemm(rows, oc, n, &self.weight, (1, rows), &g, (n, 1), 0.0, &mut dcol);
            self.col2im(&dcol, cache.in_h, cache.in_w, cache.out_h, cache.out_w)
        })
    }

    pub fn output_dims(cache: &ConvCache) -> (usize, usize) {
        (cache.out_h, cache.out_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive(layer: &ConvLayer, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let s = &layer.spec;
        let (oh, ow) = (s.out_size(h).unwrap(), s.out_size(w).unwrap());
        let mut out = vec![0.0; s.out_channels * oh * ow];
        for o in 0..s.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = layer.bias[o];
                    for ci in 0..layer.in_channels {
                        for ky in 0..s.kernel {
                            for kx in 0..s.kernel {
                                let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                                let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wi = ((o * layer.in_channels + ci) * s.kernel + ky) * s.kernel + kx;
                                acc += layer.weight[wi] * input[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = if s.relu { acc.max(0.0) } else { acc };
                }
            }
        }
        out
    }

    fn random_layer(rng: &mut ChaCha8Rng, cin: usize, spec: ConvSpec) -> ConvLayer {
        let mut l = ConvLayer::init(cin, spec, rng);
        for b in &mut l.bias {
            *b = rng.gen_range(-0.1..0.1);
        }
        l
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (spec, h) in [
            (ConvSpec::conv3x3(4, 2), 9),
            (ConvSpec::conv3x3(3, 1), 6),
            (ConvSpec::pointwise(5), 4),
        ] {
            let layer = random_layer(&mut rng, 3, spec);
            let input: Vec<f64> = (0..3 * h * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = layer.forward(&input, h, h);
            let slow = naive(&layer, &input, h, h);
            for (a, b) in fast.output().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spec = ConvSpec::conv3x3(3, 2);
        spec.relu = false;
        let layer = random_layer(&mut rng, 2, spec);
        let (h, w) = (7, 7);
        let input: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cache = layer.forward(&input, h, w);
        let upstream: Vec<f64> = (0..cache.output().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |l: &ConvLayer, x: &[f64]| -> f64 {
            l.forward(x, h, w).output().iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let mut gw = vec![0.0; layer.weight.len()];
        let mut gb = vec![0.0; layer.bias.len()];
        let gx = layer.backward(&cache, &upstream, &mut gw, &mut gb, true).unwrap();
        let eps = 1e-6;
        for i in [0, 5, 17, gw.len() - 1] {
            let mut p = layer.clone();
            p.weight[i] += eps;
            let mut m = layer.clone();
            m.weight[i] -= eps;
            let fd = (loss(&p, &input) - loss(&m, &input)) / (2.0 * eps);
            assert!((fd - gw[i]).abs() < 1e-6, "weight {i}: {fd} vs {}", gw[i]);
        }
        for i in [0, 11, 50, input.len() - 1] {
            let mut xp = input.clone();
            xp[i] += eps;
            let mut xm = input.clone();
            xm[i] -= eps;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * eps);
            assert!((fd - gx[i]).abs() < 1e-6, "input {i}");
        }
        let fd_b = {
            let mut p = layer.clone();
            p.bias[1] += eps;
            let mut m = layer.clone();
            m.bias[1] -= eps;
            (loss(&p, &input) - loss(&m, &input)) / (2.0 * eps)
        };
        assert!((fd_b - gb[1]).abs() < 1e-6);
    }

    #[test]
    fn relu_blocks_gradient_of_inactive_units() {
        let mut layer = ConvLayer::zeros(1, ConvSpec::pointwise(1));
        layer.weight[0] = 1.0;
        let cache = layer.forward(&[-1.0, 2.0], 1, 2);
        assert_eq!(cache.output(), &[0.0, 2.0]);
        let mut gw = vec![0.0];
        let mut gb = vec![0.0];
        let gx = layer.backward(&cache, &[1.0, 1.0], &mut gw, &mut gb, true).unwrap();
        assert_eq!(gx, vec![0.0, 1.0]);
        assert_eq!(gw, vec![2.0]);
        assert_eq!(gb, vec![1.0]);
    }
}
