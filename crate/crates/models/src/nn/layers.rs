use super::{gemm, he_normal, Tensor};
use rand::Rng;

/// Same-padded, stride-1 convolution with an odd `[kd, kh, kw]` kernel.
#[derive(Clone, Debug)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    /// `[cout][cin][kd][kh][kw]`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub grad_weight: Vec<f32>,
    pub grad_bias: Vec<f32>,
}

impl Conv {
    pub fn new<R: Rng>(cin: usize, cout: usize, kernel: [usize; 3], rng: &mut R) -> Self {
        assert!(kernel.iter().all(|k| k % 2 == 1), "kernel must be odd");
        let fan_in = cin * kernel.iter().product::<usize>();
        Self {
            cin,
            cout,
            kernel,
            weight: he_normal(rng, cout * fan_in, fan_in),
            bias: vec![0.0; cout],
            grad_weight: vec![0.0; cout * fan_in],
            grad_bias: vec![0.0; cout],
        }
    }

    fn patch(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn im2col(&self, x: &Tensor) -> Vec<f32> {
        let [c, d, h, w] = x.shape;
        assert_eq!(c, self.cin, "conv input channels");
        let n = d * h * w;
        let [kd, kh, kw] = self.kernel;
        let [pd, ph, pw] = [kd / 2, kh / 2, kw / 2];
        if kd * kh * kw == 1 {
            return x.data.clone();
        }
        let mut cols = vec![0.0f32; c * kd * kh * kw * n];
        for ci in 0..c {
            let src = &x.data[ci * n..(ci + 1) * n];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((ci * kd + kz) * kh + ky) * kw + kx;
                        let dst = &mut cols[row * n..(row + 1) * n];
                        let (x0, x1) = valid(w, kx, pw);
                        if x0 >= x1 {
                            continue;
                        }
                        let sx0 = x0 + kx - pw;
                        for z in 0..d {
                            let Some(iz) = shifted(z, kz, pd, d) else { continue };
                            for y in 0..h {
                                let Some(iy) = shifted(y, ky, ph, h) else { continue };
                                let o = (z * h + y) * w;
                                let s = (iz * h + iy) * w;
                                dst[o + x0..o + x1].copy_from_slice(&src[s + sx0..s + sx0 + (x1 - x0)]);
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], shape: [usize; 4]) -> Tensor {
        let [c, d, h, w] = shape;
        let n = d * h * w;
        let [kd, kh, kw] = self.kernel;
        let [pd, ph, pw] = [kd / 2, kh / 2, kw / 2];
        if kd * kh * kw == 1 {
            return Tensor::from_vec(shape, cols.to_vec());
        }
        let mut out = Tensor::zeros(shape);
        for ci in 0..c {
            let dst = &mut out.data[ci * n..(ci + 1) * n];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((ci * kd + kz) * kh + ky) * kw + kx;
                        let src = &cols[row * n..(row + 1) * n];
                        let (x0, x1) = valid(w, kx, pw);
                        if x0 >= x1 {
                            continue;
                        }
                        let sx0 = x0 + kx - pw;
                        for z in 0..d {
                            let Some(iz) = shifted(z, kz, pd, d) else { continue };
                            for y in 0..h {
                                let Some(iy) = shifted(y, ky, ph, h) else { continue };
                                let o = (z * h + y) * w;
                                let s = (iz * h + iy) * w;
                                for (a, b) in dst[s + sx0..s + sx0 + (x1 - x0)]
                                    .iter_mut()
                                    .zip(&src[o + x0..o + x1])
                                {
                                    *a += b;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn apply(&self, cols: &[f32], shape: [usize; 4]) -> Tensor {
        let n = shape[1] * shape[2] * shape[3];
        let mut y = Tensor::zeros([self.cout, shape[1], shape[2], shape[3]]);
        gemm(self.cout, self.patch(), n, &self.weight, false, cols, false, &mut y.data, false);
        for (row, b) in y.data.chunks_mut(n).zip(&self.bias) {
            row.iter_mut().for_each(|v| *v += b);
        }
        y
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let cols = self.im2col(x);
        self.apply(&cols, x.shape)
    }

    /// Forward pass that also returns the column buffer needed by `backward`.
    pub fn forward_cached(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        let cols = self.im2col(x);
        let y = self.apply(&cols, x.shape);
        (y, cols)
    }

    /// Accumulates parameter gradients; returns dL/dx when `need_input_grad`.
    pub fn backward(
        &mut self,
        cols: &[f32],
        in_shape: [usize; 4],
        dy: &Tensor,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let n = dy.spatial();
        let k = self.patch();
        gemm(self.cout, n, k, &dy.data, false, cols, true, &mut self.grad_weight, true);
        for (g, row) in self.grad_bias.iter_mut().zip(dy.data.chunks(n)) {
            *g += row.iter().sum::<f32>();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![0.0f32; k * n];
        gemm(k, self.cout, n, &self.weight, true, &dy.data, false, &mut dcols, false);
        Some(self.col2im(&dcols, in_shape))
    }
}

/// Output positions `[x0, x1)` whose tap `k` (pad `p`) lands inside `0..len`.
fn valid(len: usize, k: usize, p: usize) -> (usize, usize) {
    let x0 = p.saturating_sub(k);
    let x1 = (len + p).saturating_sub(k).min(len);
    (x0, x1)
}

fn shifted(i: usize, k: usize, p: usize, len: usize) -> Option<usize> {
    let j = i + k;
    (j >= p && j - p < len).then(|| j - p)
}

/// Fully connected layer on a flat vector.
#[derive(Clone, Debug)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs][inputs]`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub grad_weight: Vec<f32>,
    pub grad_bias: Vec<f32>,
}

impl Dense {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: he_normal(rng, inputs * outputs, inputs),
            bias: vec![0.0; outputs],
            grad_weight: vec![0.0; inputs * outputs],
            grad_bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks(self.inputs)
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f32>())
            .collect()
    }

    pub fn backward(&mut self, x: &[f32], dy: &[f32]) -> Vec<f32> {
        let mut dx = vec![0.0f32; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            self.grad_bias[o] += g;
            let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let gw = &mut self.grad_weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                gw[i] += g * x[i];
                dx[i] += g * w[i];
            }
        }
        dx
    }
}

fn pooled_shape(shape: [usize; 4], f: [usize; 3]) -> [usize; 4] {
    [shape[0], shape[1] / f[0], shape[2] / f[1], shape[3] / f[2]]
}

/// Max pooling with window = stride = `f`; trailing remainders are dropped.
/// Returns the pooled tensor and the flat argmax of every output.
pub fn max_pool(x: &Tensor, f: [usize; 3]) -> (Tensor, Vec<u32>) {
    let [c, d, h, w] = x.shape;
    let out_shape = pooled_shape(x.shape, f);
    let [_, od, oh, ow] = out_shape;
    let mut out = Tensor::zeros(out_shape);
    let mut arg = vec![0u32; out.len()];
    let mut o = 0;
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dz in 0..f[0] {
                        for dy in 0..f[1] {
                            let base = ((ci * d + z * f[0] + dz) * h + y * f[1] + dy) * w + xo * f[2];
                            for dx in 0..f[2] {
                                let v = x.data[base + dx];
                                if v > best {
                                    best = v;
                                    best_i = base + dx;
                                }
                            }
                        }
                    }
                    out.data[o] = best;
                    arg[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward(dy: &Tensor, argmax: &[u32], in_shape: [usize; 4]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    for (g, &i) in dy.data.iter().zip(argmax) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Average pooling with window = stride = `f`.
pub fn avg_pool(x: &Tensor, f: [usize; 3]) -> Tensor {
    let [c, d, h, w] = x.shape;
    let out_shape = pooled_shape(x.shape, f);
    let [_, od, oh, ow] = out_shape;
    let scale = 1.0 / (f[0] * f[1] * f[2]) as f32;
    let mut out = Tensor::zeros(out_shape);
    for ci in 0..c {
        for z in 0..od {
            for dz in 0..f[0] {
                for y in 0..oh {
                    for dy in 0..f[1] {
                        let src = ((ci * d + z * f[0] + dz) * h + y * f[1] + dy) * w;
                        let dst = ((ci * od + z) * oh + y) * ow;
                        for xo in 0..ow {
                            let s: f32 = x.data[src + xo * f[2]..src + (xo + 1) * f[2]].iter().sum();
                            out.data[dst + xo] += s * scale;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn avg_pool_backward(dy: &Tensor, f: [usize; 3], in_shape: [usize; 4]) -> Tensor {
    let [c, d, h, w] = in_shape;
    let [_, od, oh, ow] = dy.shape;
    let scale = 1.0 / (f[0] * f[1] * f[2]) as f32;
    let mut dx = Tensor::zeros(in_shape);
    for ci in 0..c {
        for z in 0..od * f[0] {
            for y in 0..oh * f[1] {
                let src = ((ci * od + z / f[0]) * oh + y / f[1]) * ow;
                let dst = ((ci * d + z) * h + y) * w;
                for xi in 0..ow * f[2] {
                    dx.data[dst + xi] = dy.data[src + xi / f[2]] * scale;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling in height and width.
pub fn nearest_up2(x: &Tensor) -> Tensor {
    let [c, d, h, w] = x.shape;
    let mut out = Tensor::zeros([c, d, 2 * h, 2 * w]);
    for plane in 0..c * d {
        for y in 0..2 * h {
            let src = (plane * h + y / 2) * w;
            let dst = (plane * 2 * h + y) * 2 * w;
            for xo in 0..2 * w {
                out.data[dst + xo] = x.data[src + xo / 2];
            }
        }
    }
    out
}

pub fn nearest_up2_backward(dy: &Tensor) -> Tensor {
    let [c, d, h2, w2] = dy.shape;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([c, d, h, w]);
    for plane in 0..c * d {
        for y in 0..h2 {
            let src = (plane * h2 + y) * w2;
            let dst = (plane * h + y / 2) * w;
            for xo in 0..w2 {
                dx.data[dst + xo / 2] += dy.data[src + xo];
            }
        }
    }
    dx
}

/// Source taps for 2x linear upsampling along one axis with half-pixel
/// centres: output `i` samples input coordinate `i / 2 - 0.25`.
fn up2_taps(i: usize, len: usize) -> [(usize, f32); 2] {
    let k = i / 2;
    let other = if i % 2 == 0 {
        k.saturating_sub(1)
    } else {
        (k + 1).min(len - 1)
    };
    [(k, 0.75), (other, 0.25)]
}

/// Bilinear 2x upsampling in height and width.
pub fn bilinear_up2(x: &Tensor) -> Tensor {
    let [c, d, h, w] = x.shape;
    let planes = c * d;
    // Rows first, then columns.
    let mut tmp = vec![0.0f32; planes * 2 * h * w];
    for p in 0..planes {
        for y in 0..2 * h {
            let dst = (p * 2 * h + y) * w;
            for (s, wt) in up2_taps(y, h) {
                let src = (p * h + s) * w;
                for xi in 0..w {
                    tmp[dst + xi] += wt * x.data[src + xi];
                }
            }
        }
    }
    let mut out = Tensor::zeros([c, d, 2 * h, 2 * w]);
    let taps: Vec<_> = (0..2 * w).map(|xo| up2_taps(xo, w)).collect();
    for row in 0..planes * 2 * h {
        let src = &tmp[row * w..(row + 1) * w];
        let dst = &mut out.data[row * 2 * w..(row + 1) * 2 * w];
        for (xo, t) in taps.iter().enumerate() {
            dst[xo] = t[0].1 * src[t[0].0] + t[1].1 * src[t[1].0];
        }
    }
    out
}

pub fn bilinear_up2_backward(dy: &Tensor) -> Tensor {
    let [c, d, h2, w2] = dy.shape;
    let (h, w) = (h2 / 2, w2 / 2);
    let planes = c * d;
    let mut tmp = vec![0.0f32; planes * h2 * w];
    let taps: Vec<_> = (0..w2).map(|xo| up2_taps(xo, w)).collect();
    for row in 0..planes * h2 {
        let src = &dy.data[row * w2..(row + 1) * w2];
        let dst = &mut tmp[row * w..(row + 1) * w];
        for (xo, t) in taps.iter().enumerate() {
            dst[t[0].0] += t[0].1 * src[xo];
            dst[t[1].0] += t[1].1 * src[xo];
        }
    }
    let mut dx = Tensor::zeros([c, d, h, w]);
    for p in 0..planes {
        for y in 0..h2 {
            let src = (p * h2 + y) * w;
            for (s, wt) in up2_taps(y, h) {
                let dst = (p * h + s) * w;
                for xi in 0..w {
                    dx.data[dst + xi] += wt * tmp[src + xi];
                }
            }
        }
    }
    dx
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape[1..], b.shape[1..], "concat spatial shape");
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec([a.shape[0] + b.shape[0], a.shape[1], a.shape[2], a.shape[3]], data)
}

/// Adjoint of [`concat_channels`]: splits after the first `ca` channels.
pub fn split_channels(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let n = x.spatial();
    let [c, d, h, w] = x.shape;
    (
        Tensor::from_vec([ca, d, h, w], x.data[..ca * n].to_vec()),
        Tensor::from_vec([c - ca, d, h, w], x.data[ca * n..].to_vec()),
    )
}

pub fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let n = x.spatial();
    x.data
        .chunks(n)
        .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
        .collect()
}

pub fn global_avg_pool_backward(dy: &[f32], in_shape: [usize; 4]) -> Tensor {
    let n = in_shape[1] * in_shape[2] * in_shape[3];
    let mut dx = Tensor::zeros(in_shape);
    for (ch, g) in dx.data.chunks_mut(n).zip(dy) {
        ch.fill(g / n as f32);
    }
    dx
}

/// Element of a [`Sequential`] stack.
#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv),
    Relu,
    MaxPool([usize; 3]),
    AvgPool([usize; 3]),
}

enum Cache {
    Conv { cols: Vec<f32>, in_shape: [usize; 4] },
    Relu { mask: Vec<bool> },
    MaxPool { argmax: Vec<u32>, in_shape: [usize; 4] },
    AvgPool { in_shape: [usize; 4] },
}

/// Straight chain of layers with cached activations for backprop.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

pub struct SequentialCache(Vec<Cache>);

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Appends `conv -> relu` for each consecutive pair in `widths`.
    pub fn conv_relu<R: Rng>(mut self, widths: &[usize], kernel: [usize; 3], rng: &mut R) -> Self {
        for pair in widths.windows(2) {
            self.layers.push(Layer::Conv(Conv::new(pair[0], pair[1], kernel, rng)));
            self.layers.push(Layer::Relu);
        }
        self
    }

    pub fn push(mut self, layer: Layer) -> Self {
        self.layers.push(layer);
        self
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => c.forward(&cur),
                Layer::Relu => {
                    cur.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    cur
                }
                Layer::MaxPool(f) => max_pool(&cur, *f).0,
                Layer::AvgPool(f) => avg_pool(&cur, *f),
            };
        }
        cur
    }

    pub fn forward_cached(&self, x: &Tensor) -> (Tensor, SequentialCache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let in_shape = cur.shape;
            cur = match layer {
                Layer::Conv(c) => {
                    let (y, cols) = c.forward_cached(&cur);
                    caches.push(Cache::Conv { cols, in_shape });
                    y
                }
                Layer::Relu => {
                    let mask = cur.data.iter().map(|&v| v > 0.0).collect();
                    cur.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    caches.push(Cache::Relu { mask });
                    cur
                }
                Layer::MaxPool(f) => {
                    let (y, argmax) = max_pool(&cur, *f);
                    caches.push(Cache::MaxPool { argmax, in_shape });
                    y
                }
                Layer::AvgPool(f) => {
                    caches.push(Cache::AvgPool { in_shape });
                    avg_pool(&cur, *f)
                }
            };
        }
        (cur, SequentialCache(caches))
    }

    /// Backpropagates `dy`; returns dL/dx when `need_input_grad`.
    pub fn backward(
        &mut self,
        cache: SequentialCache,
        dy: Tensor,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let first_param = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Conv(_)))
            .unwrap_or(self.layers.len());
        let mut grad = dy;
        for (i, (layer, c)) in self.layers.iter_mut().zip(cache.0).enumerate().rev() {
            let wanted = need_input_grad || i > first_param;
            if !wanted && i < first_param {
                return None;
            }
            grad = match (layer, c) {
                (Layer::Conv(conv), Cache::Conv { cols, in_shape }) => {
                    match conv.backward(&cols, in_shape, &grad, wanted) {
                        Some(g) => g,
                        None => return None,
                    }
                }
                (Layer::Relu, Cache::Relu { mask }) => {
                    for (g, m) in grad.data.iter_mut().zip(mask) {
                        if !m {
                            *g = 0.0;
                        }
                    }
                    grad
                }
                (Layer::MaxPool(_), Cache::MaxPool { argmax, in_shape }) => {
                    max_pool_backward(&grad, &argmax, in_shape)
                }
                (Layer::AvgPool(f), Cache::AvgPool { in_shape }) => {
                    avg_pool_backward(&grad, *f, in_shape)
                }
                _ => unreachable!("cache does not match layer"),
            };
        }
        Some(grad)
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Layer::Conv(c) = l {
                out.push(c.weight.as_slice());
                out.push(c.bias.as_slice());
            }
        }
        out
    }

    pub fn params_and_grads(&mut self) -> Vec<(&mut [f32], &mut [f32])> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Layer::Conv(c) = l {
                out.push((c.weight.as_mut_slice(), c.grad_weight.as_mut_slice()));
                out.push((c.bias.as_mut_slice(), c.grad_bias.as_mut_slice()));
            }
        }
        out
    }
}
