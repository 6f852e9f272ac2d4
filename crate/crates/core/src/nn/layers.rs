use rand::Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Row-major `c = a · b (+ c)`, where `a` is `m×k` (or `k×m` when
/// `a_trans`) and `b` is `k×n` (or `n×k` when `b_trans`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
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

/// 3×3 convolution with zero padding 1 and a configurable stride.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `[out][in][3][3]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

const KSIZE: usize = 3;
const KAREA: usize = KSIZE * KSIZE;

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            stride,
            weight: vec![0.0; out_channels * in_channels * KAREA],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-normal initialisation, zero bias.
    pub fn he_init(in_channels: usize, out_channels: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, stride);
        let std = (2.0 / (in_channels * KAREA) as f64).sqrt();
        for w in &mut conv.weight {
            *w = (rng.sample::<f64, _>(StandardNormal) * std) as f32;
        }
        conv
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        // (n + 2·pad − k) / stride + 1 with pad 1, k 3
        ((height - 1) / self.stride + 1, (width - 1) / self.stride + 1)
    }

    fn im2col(&self, input: &Tensor) -> Vec<f32> {
        let (h, w) = (input.height(), input.width());
        let (oh, ow) = self.output_size(h, w);
        let n = oh * ow;
        let mut col = vec![0.0f32; self.in_channels * KAREA * n];
        for ci in 0..self.in_channels {
            let plane = input.plane(ci);
            for ky in 0..KSIZE {
                for kx in 0..KSIZE {
                    let row = &mut col[((ci * KAREA) + ky * KSIZE + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
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

    fn col2im(&self, col: &[f32], height: usize, width: usize) -> Tensor {
        let (oh, ow) = self.output_size(height, width);
        let n = oh * ow;
        let mut out = Tensor::zeros(self.in_channels, height, width);
        for ci in 0..self.in_channels {
            let plane = out.plane_mut(ci);
            for ky in 0..KSIZE {
                for kx in 0..KSIZE {
                    let row = &col[((ci * KAREA) + ky * KSIZE + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * width..][..width];
                        let src = &row[oy * ow..][..ow];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < width as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        assert_eq!(input.channels(), self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(input.height(), input.width());
        let n = oh * ow;
        let col = self.im2col(input);
        let mut out = vec![0.0f32; self.out_channels * n];
        for (co, row) in out.chunks_mut(n).enumerate() {
            row.fill(self.bias[co]);
        }
        gemm(
            self.out_channels,
            self.in_channels * KAREA,
            n,
            &self.weight,
            false,
            &col,
            false,
            &mut out,
            true,
        );
        Tensor::from_vec(self.out_channels, oh, ow, out)
    }

    /// Returns the gradient with respect to `input` (when `need_input`) and
    /// accumulates parameter gradients into `grads` (when given).
    pub fn backward(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        grads: Option<&mut ConvGrads>,
        need_input: bool,
    ) -> Option<Tensor> {
        let n = grad_out.plane_len();
        let kdim = self.in_channels * KAREA;
        if let Some(g) = grads {
            let col = self.im2col(input);
            gemm(
                self.out_channels,
                n,
                kdim,
                grad_out.data(),
                false,
                &col,
                true,
                &mut g.weight,
                true,
            );
            for (co, row) in grad_out.data().chunks(n).enumerate() {
                g.bias[co] += row.iter().sum::<f32>();
            }
        }
        if !need_input {
            return None;
        }
        let mut dcol = vec![0.0f32; kdim * n];
        gemm(
            kdim,
            self.out_channels,
            n,
            &self.weight,
            true,
            grad_out.data(),
            false,
            &mut dcol,
            false,
        );
        Some(self.col2im(&dcol, input.height(), input.width()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvGrads {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }
}

/// Layer kinds supported by [`Sequential`].
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    /// Nearest-neighbour ×2 upsampling.
    Upsample2x,
    AvgPool2,
    MaxPool2,
    /// Per-channel `(x − mean) / std`.
    Normalize { mean: Vec<f32>, std: Vec<f32> },
}

impl Layer {
    fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv(conv) => conv.forward(x),
            Layer::Relu => x.map(|v| v.max(0.0)),
            Layer::LeakyRelu(slope) => x.map(|v| if v > 0.0 { v } else { slope * v }),
            Layer::Sigmoid => x.map(|v| 1.0 / (1.0 + (-v).exp())),
            Layer::Upsample2x => upsample2x(x),
            Layer::AvgPool2 => pool2(x, false),
            Layer::MaxPool2 => pool2(x, true),
            Layer::Normalize { mean, std } => {
                let mut out = x.clone();
                for c in 0..x.channels() {
                    let (m, s) = (mean[c], std[c]);
                    out.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
                }
                out
            }
        }
    }

    fn backward(
        &self,
        input: &Tensor,
        output: &Tensor,
        grad_out: &Tensor,
        grads: Option<&mut ConvGrads>,
        need_input: bool,
    ) -> Option<Tensor> {
        if let Layer::Conv(conv) = self {
            return conv.backward(input, grad_out, grads, need_input);
        }
        if !need_input {
            return None;
        }
        let grad = match self {
            Layer::Conv(_) => unreachable!(),
            Layer::Relu => zip_map(input, grad_out, |x, g| if x > 0.0 { g } else { 0.0 }),
            Layer::LeakyRelu(slope) => {
                zip_map(input, grad_out, |x, g| if x > 0.0 { g } else { slope * g })
            }
            Layer::Sigmoid => zip_map(output, grad_out, |y, g| g * y * (1.0 - y)),
            Layer::Upsample2x => upsample2x_backward(grad_out),
            Layer::AvgPool2 => pool2_backward(input, grad_out, false),
            Layer::MaxPool2 => pool2_backward(input, grad_out, true),
            Layer::Normalize { std, .. } => {
                let mut g = grad_out.clone();
                for (c, &s) in std.iter().enumerate() {
                    g.plane_mut(c).iter_mut().for_each(|v| *v /= s);
                }
                g
            }
        };
        Some(grad)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let (c, h, w) = a.shape();
    let data = a.data().iter().zip(b.data()).map(|(&x, &g)| f(x, g)).collect();
    Tensor::from_vec(c, h, w, data)
}

pub(crate) fn upsample2x(x: &Tensor) -> Tensor {
    let (c, h, w) = x.shape();
    let mut out = Tensor::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..2 * h {
            let srow = &src[(y / 2) * w..][..w];
            let drow = &mut dst[y * 2 * w..][..2 * w];
            for (xo, d) in drow.iter_mut().enumerate() {
                *d = srow[xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(g: &Tensor) -> Tensor {
    let (c, h2, w2) = g.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let src = g.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    out
}

/// 2×2 pooling with stride 2; a trailing odd row/column is dropped.
fn pool2(x: &Tensor, max: bool) -> Tensor {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..oh {
            for xo in 0..ow {
                let a = src[2 * y * w + 2 * xo];
                let b = src[2 * y * w + 2 * xo + 1];
                let cc = src[(2 * y + 1) * w + 2 * xo];
                let d = src[(2 * y + 1) * w + 2 * xo + 1];
                dst[y * ow + xo] = if max {
                    a.max(b).max(cc).max(d)
                } else {
                    0.25 * (a + b + cc + d)
                };
            }
        }
    }
    out
}

fn pool2_backward(input: &Tensor, g: &Tensor, max: bool) -> Tensor {
    let (c, h, w) = input.shape();
    let (oh, ow) = (g.height(), g.width());
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let src = input.plane(ch);
        let gp = g.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..oh {
            for xo in 0..ow {
                let idx = [
                    2 * y * w + 2 * xo,
                    2 * y * w + 2 * xo + 1,
                    (2 * y + 1) * w + 2 * xo,
                    (2 * y + 1) * w + 2 * xo + 1,
                ];
                let gv = gp[y * ow + xo];
                if max {
                    // ties route to the first maximal element
                    let mut best = idx[0];
                    for &i in &idx[1..] {
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    dst[best] += gv;
                } else {
                    for &i in &idx {
                        dst[i] += 0.25 * gv;
                    }
                }
            }
        }
    }
    out
}

/// A feed-forward chain of layers with a hand-written reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

/// Parameter gradients, one slot per layer (`None` for parameter-free layers).
pub type ParamGrads = Vec<Option<ConvGrads>>;

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Some(ConvGrads::zeros_like(c)),
                _ => None,
            })
            .collect()
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.convs().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        self.layers
            .iter()
            .fold(input.clone(), |x, layer| layer.forward(&x))
    }

    /// Runs the first `upto` layers and returns every activation, the input
    /// included: `acts[i]` is the input of layer `i`.
    pub fn forward_traced(&self, input: &Tensor, upto: usize) -> Vec<Tensor> {
        let mut acts = Vec::with_capacity(upto + 1);
        acts.push(input.clone());
        for layer in &self.layers[..upto] {
            let next = layer.forward(acts.last().expect("non-empty"));
            acts.push(next);
        }
        acts
    }

    /// Reverse pass over a trace from [`Sequential::forward_traced`].
    ///
    /// `seeds` holds `(activation index, gradient)` pairs; every seed is
    /// added to the running gradient when the sweep reaches its index, which
    /// lets several intermediate taps contribute. Returns the gradient with
    /// respect to the input when `need_input` is set.
    pub fn backward(
        &self,
        acts: &[Tensor],
        seeds: &[(usize, &Tensor)],
        mut grads: Option<&mut ParamGrads>,
        need_input: bool,
    ) -> Option<Tensor> {
        let top = seeds.iter().map(|(i, _)| *i).max()?;
        assert!(top < acts.len(), "seed beyond traced activations");
        let mut grad: Option<Tensor> = None;
        for idx in (0..=top).rev() {
            for (_, g) in seeds.iter().filter(|(i, _)| *i == idx) {
                match grad.as_mut() {
                    Some(acc) => acc.add_scaled(g, 1.0),
                    None => grad = Some((*g).clone()),
                }
            }
            if idx == 0 {
                break;
            }
            let layer = &self.layers[idx - 1];
            let Some(g) = grad.take() else { continue };
            let slot = grads
                .as_deref_mut()
                .and_then(|gs| gs[idx - 1].as_mut());
            let needs_below = need_input || idx > 1;
            grad = layer.backward(&acts[idx - 1], &acts[idx], &g, slot, needs_below);
        }
        if need_input {
            grad
        } else {
            None
        }
    }
}
