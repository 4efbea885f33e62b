//! Dense 4D tensors and the standard network primitives shared by the
//! compositional and the baseline networks.
//!
//! All reductions run in a fixed order, so every operation here is
//! bit-deterministic for identical inputs.

use crate::error::{invalid, Result};

/// Dense `(batch, channel, height, width)` array stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(invalid(format!(
                "tensor data length {} does not match {}x{}x{}x{}",
                data.len(),
                n,
                c,
                h,
                w
            )));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(n * c * h * w);
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(a, b, y, x));
                    }
                }
            }
        }
        Tensor4 { n, c, h, w, data }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of values per sample (`c * h * w`).
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// One `h * w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let start = (n * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let start = (n * self.c + c) * self.h * self.w;
        let len = self.h * self.w;
        &mut self.data[start..start + len]
    }

    /// All values of one sample.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Copies the listed samples into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Tensor4 {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor4 {
            n: indices.len(),
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor4) -> bool {
        self.dims() == other.dims()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum of elementwise products with a same-shaped tensor.
    pub fn dot(&self, other: &Tensor4) -> f64 {
        dot(&self.data, &other.data)
    }
}

/// Plain dense convolution filters: `f` output features over `s` input
/// channels, each kernel `kh x kw`, plus one bias per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFilterBank {
    pub f: usize,
    pub s: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseFilterBank {
    pub fn zeros(f: usize, s: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(f, s, kh, kw, vec![0.0; f * s * kh * kw], vec![0.0; f])
    }

    pub fn new(
        f: usize,
        s: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if kh == 0 || kw == 0 {
            return Err(invalid("kernel dims must be at least 1"));
        }
        if weights.len() != f * s * kh * kw {
            return Err(invalid(format!(
                "filter weights length {} does not match {}x{}x{}x{}",
                weights.len(),
                f,
                s,
                kh,
                kw
            )));
        }
        if bias.len() != f {
            return Err(invalid(format!(
                "bias length {} does not match {} features",
                bias.len(),
                f
            )));
        }
        Ok(DenseFilterBank {
            f,
            s,
            kh,
            kw,
            weights,
            bias,
        })
    }

    #[inline]
    pub fn kernel_len(&self) -> usize {
        self.kh * self.kw
    }

    pub fn kernel(&self, f: usize, s: usize) -> &[f64] {
        let k = self.kernel_len();
        let start = (f * self.s + s) * k;
        &self.weights[start..start + k]
    }

    pub fn kernel_mut(&mut self, f: usize, s: usize) -> &mut [f64] {
        let k = self.kernel_len();
        let start = (f * self.s + s) * k;
        &mut self.weights[start..start + k]
    }
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Valid (unpadded, stride 1) multi-channel convolution in the
/// cross-correlation convention used by CNN frameworks:
/// `out[n,i,y,x] = bias[i] + sum_s sum_dy,dx W[i,s,dy,dx] * in[n,s,y+dy,x+dx]`.
pub fn conv2d_valid(input: &Tensor4, bank: &DenseFilterBank) -> Result<Tensor4> {
    if input.c != bank.s {
        return Err(invalid(format!(
            "input has {} channels, filters expect {}",
            input.c, bank.s
        )));
    }
    if input.h < bank.kh || input.w < bank.kw {
        return Err(invalid(format!(
            "input {}x{} smaller than kernel {}x{}",
            input.h, input.w, bank.kh, bank.kw
        )));
    }
    let (oh, ow) = (input.h - bank.kh + 1, input.w - bank.kw + 1);
    let mut out = Tensor4::zeros(input.n, bank.f, oh, ow);
    for n in 0..input.n {
        for f in 0..bank.f {
            let plane = out.plane_mut(n, f);
            plane.fill(bank.bias[f]);
            for s in 0..bank.s {
                let src = input.plane(n, s);
                let kernel = bank.kernel(f, s);
                accumulate_valid(src, input.w, kernel, bank.kh, bank.kw, plane, oh, ow);
            }
        }
    }
    debug_assert!(out.is_finite());
    Ok(out)
}

/// `dst += src (*) kernel`, valid correlation of one plane.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn accumulate_valid(
    src: &[f64],
    src_w: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    dst: &mut [f64],
    oh: usize,
    ow: usize,
) {
    for y in 0..oh {
        let row = &mut dst[y * ow..(y + 1) * ow];
        for dy in 0..kh {
            let base = (y + dy) * src_w;
            for dx in 0..kw {
                let wv = kernel[dy * kw + dx];
                axpy(wv, &src[base + dx..base + dx + ow], row);
            }
        }
    }
}

/// Gradient of a valid convolution with respect to its dense weights:
/// `dW[f,s,dy,dx] = sum_n sum_y,x g[n,f,y,x] * in[n,s,y+dy,x+dx]`.
/// Returns `(dW, dbias)` with the layout of [`DenseFilterBank`].
pub fn conv2d_weight_grad(
    input: &Tensor4,
    grad_out: &Tensor4,
    kh: usize,
    kw: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if grad_out.n != input.n
        || input.h < kh
        || input.w < kw
        || grad_out.h != input.h - kh + 1
        || grad_out.w != input.w - kw + 1
    {
        return Err(invalid(format!(
            "gradient {:?} does not match forward output of input {:?} with {}x{} kernels",
            grad_out.dims(),
            input.dims(),
            kh,
            kw
        )));
    }
    let (f_count, s_count) = (grad_out.c, input.c);
    let (oh, ow) = (grad_out.h, grad_out.w);
    let mut dw = vec![0.0; f_count * s_count * kh * kw];
    let mut db = vec![0.0; f_count];
    for n in 0..input.n {
        for f in 0..f_count {
            let g = grad_out.plane(n, f);
            db[f] += g.iter().sum::<f64>();
            for s in 0..s_count {
                let src = input.plane(n, s);
                let out = &mut dw[(f * s_count + s) * kh * kw..(f * s_count + s + 1) * kh * kw];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let base = (y + dy) * input.w + dx;
                            acc += dot(&g[y * ow..(y + 1) * ow], &src[base..base + ow]);
                        }
                        out[dy * kw + dx] += acc;
                    }
                }
            }
        }
    }
    Ok((dw, db))
}

/// Gradient of a valid convolution with respect to its input: the full
/// correlation of `grad_out` with the 180-degree rotated kernels, summed over
/// output features.
pub fn conv2d_input_grad(
    grad_out: &Tensor4,
    bank: &DenseFilterBank,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor4> {
    if grad_out.c != bank.f
        || in_h < bank.kh
        || in_w < bank.kw
        || grad_out.h != in_h - bank.kh + 1
        || grad_out.w != in_w - bank.kw + 1
    {
        return Err(invalid(format!(
            "gradient {:?} does not match a {}x{} input under {}x{} kernels with {} features",
            grad_out.dims(),
            in_h,
            in_w,
            bank.kh,
            bank.kw,
            bank.f
        )));
    }
    let (oh, ow) = (grad_out.h, grad_out.w);
    let mut dx_t = Tensor4::zeros(grad_out.n, bank.s, in_h, in_w);
    for n in 0..grad_out.n {
        for s in 0..bank.s {
            let dst = dx_t.plane_mut(n, s);
            for f in 0..bank.f {
                let g = grad_out.plane(n, f);
                let kernel = bank.kernel(f, s);
                for y in 0..oh {
                    let grow = &g[y * ow..(y + 1) * ow];
                    for dy in 0..bank.kh {
                        let base = (y + dy) * in_w;
                        for dx in 0..bank.kw {
                            let wv = kernel[dy * bank.kw + dx];
                            axpy(wv, grow, &mut dst[base + dx..base + dx + ow]);
                        }
                    }
                }
            }
        }
    }
    Ok(dx_t)
}

pub fn relu(input: &Tensor4) -> Tensor4 {
    let mut out = input.clone();
    for v in out.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Passes `grad_out` where `input > 0`; the derivative at exactly zero is 0.
pub fn relu_backward(grad_out: &Tensor4, input: &Tensor4) -> Result<Tensor4> {
    if !grad_out.same_shape(input) {
        return Err(invalid(format!(
            "relu gradient {:?} does not match input {:?}",
            grad_out.dims(),
            input.dims()
        )));
    }
    let mut out = grad_out.clone();
    for (g, &x) in out.data.iter_mut().zip(&input.data) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

/// Argmax routing recorded by [`maxpool`], consumed by [`maxpool_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndex {
    input_dims: [usize; 4],
    output_dims: [usize; 4],
    /// Flat input index of the winner for every output element.
    argmax: Vec<usize>,
}

impl PoolIndex {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Output length of a pooling window sweep (floor rounding).
pub fn pooled_len(len: usize, window: usize, stride: usize) -> usize {
    (len - window) / stride + 1
}

/// Max-pooling with a square window. Ties go to the first maximal element in
/// row-major order.
pub fn maxpool(input: &Tensor4, window: usize, stride: usize) -> Result<(Tensor4, PoolIndex)> {
    if window == 0 || stride == 0 {
        return Err(invalid("pool window and stride must be at least 1"));
    }
    if window > input.h || window > input.w {
        return Err(invalid(format!(
            "pool window {} larger than input {}x{}",
            window, input.h, input.w
        )));
    }
    let oh = pooled_len(input.h, window, stride);
    let ow = pooled_len(input.w, window, stride);
    let mut out = Tensor4::zeros(input.n, input.c, oh, ow);
    let mut argmax = Vec::with_capacity(out.len());
    for n in 0..input.n {
        for c in 0..input.c {
            let base = input.index(n, c, 0, 0);
            let plane = input.plane(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * stride, ox * stride);
                    let mut best = y0 * input.w + x0;
                    let mut best_v = plane[best];
                    for y in y0..y0 + window {
                        for x in x0..x0 + window {
                            let v = plane[y * input.w + x];
                            if v > best_v {
                                best_v = v;
                                best = y * input.w + x;
                            }
                        }
                    }
                    out.set(n, c, oy, ox, best_v);
                    argmax.push(base + best);
                }
            }
        }
    }
    Ok((
        out,
        PoolIndex {
            input_dims: input.dims(),
            output_dims: [input.n, input.c, oh, ow],
            argmax,
        },
    ))
}

pub fn maxpool_backward(grad_out: &Tensor4, index: &PoolIndex) -> Result<Tensor4> {
    if grad_out.dims() != index.output_dims {
        return Err(invalid(format!(
            "pool gradient {:?} does not match pooled output {:?}",
            grad_out.dims(),
            index.output_dims
        )));
    }
    let [n, c, h, w] = index.input_dims;
    let mut out = Tensor4::zeros(n, c, h, w);
    for (&src, &g) in index.argmax.iter().zip(&grad_out.data) {
        out.data[src] += g;
    }
    Ok(out)
}

/// Fully-connected layer parameters; `weights` is `outputs x inputs` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FcParams {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FcParams {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(invalid(format!(
                "fully-connected parameters ({} weights, {} biases) do not match {} -> {}",
                weights.len(),
                bias.len(),
                inputs,
                outputs
            )));
        }
        Ok(FcParams {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        FcParams {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Tensor4,
}

/// Flattens each sample and applies the dense map. Scores come back as an
/// `(n, outputs, 1, 1)` tensor.
pub fn fully_connected(input: &Tensor4, fc: &FcParams) -> Result<Tensor4> {
    if input.sample_len() != fc.inputs {
        return Err(invalid(format!(
            "flattened input size {} does not match {} weight columns",
            input.sample_len(),
            fc.inputs
        )));
    }
    let mut out = Tensor4::zeros(input.n, fc.outputs, 1, 1);
    for n in 0..input.n {
        let x = input.sample(n);
        for j in 0..fc.outputs {
            let row = &fc.weights[j * fc.inputs..(j + 1) * fc.inputs];
            out.data[n * fc.outputs + j] = fc.bias[j] + dot(row, x);
        }
    }
    Ok(out)
}

pub fn fully_connected_backward(
    input: &Tensor4,
    fc: &FcParams,
    grad_scores: &Tensor4,
) -> Result<FcGrads> {
    if input.sample_len() != fc.inputs || grad_scores.dims() != [input.n, fc.outputs, 1, 1] {
        return Err(invalid(format!(
            "fully-connected gradient {:?} does not match input {:?} and {} outputs",
            grad_scores.dims(),
            input.dims(),
            fc.outputs
        )));
    }
    let mut dw = vec![0.0; fc.weights.len()];
    let mut db = vec![0.0; fc.outputs];
    let mut dx = Tensor4::zeros(input.n, input.c, input.h, input.w);
    let len = fc.inputs;
    for n in 0..input.n {
        let x = input.sample(n);
        for j in 0..fc.outputs {
            let g = grad_scores.data[n * fc.outputs + j];
            db[j] += g;
            axpy(g, x, &mut dw[j * len..(j + 1) * len]);
            axpy(
                g,
                &fc.weights[j * len..(j + 1) * len],
                &mut dx.data[n * len..(n + 1) * len],
            );
        }
    }
    Ok(FcGrads {
        weights: dw,
        bias: db,
        input: dx,
    })
}

/// Softmax followed by the multinomial logistic loss, averaged over the
/// batch. Returns the loss and its gradient with respect to the scores.
pub fn softmax_xent(scores: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let k = scores.sample_len();
    if labels.len() != scores.n {
        return Err(invalid(format!(
            "{} labels for a batch of {}",
            labels.len(),
            scores.n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid(format!(
            "label {} out of range for {} classes",
            bad, k
        )));
    }
    let batch = scores.n as f64;
    let mut grad = Tensor4::zeros(scores.n, scores.c, scores.h, scores.w);
    let mut loss = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        let s = scores.sample(n);
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = s.iter().map(|v| (v - max).exp()).sum();
        let log_denom = denom.ln();
        loss -= s[label] - max - log_denom;
        let g = &mut grad.data[n * k..(n + 1) * k];
        for (gi, &si) in g.iter_mut().zip(s) {
            *gi = (si - max).exp() / denom / batch;
        }
        g[label] -= 1.0 / batch;
    }
    Ok((loss / batch, grad))
}

/// Index of the largest score per sample (first one on ties).
pub fn argmax_scores(scores: &Tensor4) -> Vec<usize> {
    (0..scores.n)
        .map(|n| {
            let s = scores.sample(n);
            let mut best = 0;
            for (i, &v) in s.iter().enumerate() {
                if v > s[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
