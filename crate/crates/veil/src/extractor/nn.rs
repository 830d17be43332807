//! Minimal dense/convolutional network kernels with hand-written
//! backpropagation.
//!
//! Everything runs in f64 so that gradient checks against central finite
//! differences hold to tight tolerances. Weights are quantized to f32
//! values after training, which makes the 32-bit checkpoint encoding
//! lossless.

use rand::Rng;

/// Numerically stable softplus.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// 3x3 convolution, stride 1, zero padding (same-size output).
#[derive(Debug, Clone)]
pub(crate) struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out_ch][in_ch][3][3]`, flattened.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ConvLayer {
    pub fn new_seeded(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> ConvLayer {
        let fan_in = (in_ch * 9) as f64;
        let limit = (2.0 / fan_in).sqrt();
        let w = (0..out_ch * in_ch * 9)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        ConvLayer {
            in_ch,
            out_ch,
            w,
            b: vec![0.0; out_ch],
        }
    }

    /// Copies `h x w` planes into `(h+2) x (w+2)` zero-padded buffers.
    fn pad(input: &[f64], ch: usize, h: usize, w: usize) -> Vec<f64> {
        let (ph, pw) = (h + 2, w + 2);
        let mut out = vec![0.0; ch * ph * pw];
        for c in 0..ch {
            for y in 0..h {
                let src = c * h * w + y * w;
                let dst = c * ph * pw + (y + 1) * pw + 1;
                out[dst..dst + w].copy_from_slice(&input[src..src + w]);
            }
        }
        out
    }

    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let padded = Self::pad(input, self.in_ch, h, w);
        let pw = w + 2;
        let mut out = vec![0.0; self.out_ch * h * w];
        for oc in 0..self.out_ch {
            let plane = &mut out[oc * h * w..(oc + 1) * h * w];
            plane.fill(self.b[oc]);
            for ic in 0..self.in_ch {
                let pbase = ic * (h + 2) * pw;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wgt = self.w[((oc * self.in_ch + ic) * 3 + ky) * 3 + kx];
                        for y in 0..h {
                            let src = pbase + (y + ky) * pw + kx;
                            let dst = y * w;
                            let (row_in, row_out) =
                                (&padded[src..src + w], &mut plane[dst..dst + w]);
                            for x in 0..w {
                                row_out[x] += wgt * row_in[x];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradient with respect to the layer input: correlation of the output
    /// gradient with the 180-degree-rotated kernel, channels transposed.
    pub fn backward_input(&self, d_out: &[f64], h: usize, w: usize) -> Vec<f64> {
        let padded = Self::pad(d_out, self.out_ch, h, w);
        let pw = w + 2;
        let mut d_in = vec![0.0; self.in_ch * h * w];
        for ic in 0..self.in_ch {
            let plane = &mut d_in[ic * h * w..(ic + 1) * h * w];
            for oc in 0..self.out_ch {
                let pbase = oc * (h + 2) * pw;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wgt = self.w[((oc * self.in_ch + ic) * 3 + (2 - ky)) * 3 + (2 - kx)];
                        for y in 0..h {
                            let src = pbase + (y + ky) * pw + kx;
                            let dst = y * w;
                            let (row_in, row_out) =
                                (&padded[src..src + w], &mut plane[dst..dst + w]);
                            for x in 0..w {
                                row_out[x] += wgt * row_in[x];
                            }
                        }
                    }
                }
            }
        }
        d_in
    }

    /// Weight and bias gradients given the cached layer input.
    pub fn backward_params(
        &self,
        input: &[f64],
        d_out: &[f64],
        h: usize,
        w: usize,
        dw: &mut [f64],
        db: &mut [f64],
    ) {
        let padded = Self::pad(input, self.in_ch, h, w);
        let pw = w + 2;
        for oc in 0..self.out_ch {
            let gplane = &d_out[oc * h * w..(oc + 1) * h * w];
            db[oc] += gplane.iter().sum::<f64>();
            for ic in 0..self.in_ch {
                let pbase = ic * (h + 2) * pw;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = 0.0;
                        for y in 0..h {
                            let src = pbase + (y + ky) * pw + kx;
                            let grow = &gplane[y * w..(y + 1) * w];
                            let irow = &padded[src..src + w];
                            let mut dot = 0.0;
                            for x in 0..w {
                                dot += grow[x] * irow[x];
                            }
                            acc += dot;
                        }
                        dw[((oc * self.in_ch + ic) * 3 + ky) * 3 + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Fully-connected layer `y = W x + b`, weights `[out][in]`.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn new_seeded(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Dense {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Dense {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = 0.0;
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            *out_v += acc;
        }
        out
    }

    pub fn backward_input(&self, d_out: &[f64]) -> Vec<f64> {
        let mut d_in = vec![0.0; self.in_dim];
        for (o, g) in d_out.iter().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            for (d, wv) in d_in.iter_mut().zip(row) {
                *d += g * wv;
            }
        }
        d_in
    }

    pub fn backward_params(&self, x: &[f64], d_out: &[f64], dw: &mut [f64], db: &mut [f64]) {
        for (o, g) in d_out.iter().enumerate() {
            db[o] += g;
            let row = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
            for (d, xv) in row.iter_mut().zip(x) {
                *d += g * xv;
            }
        }
    }
}

/// Softmax cross-entropy on logits; returns the loss and `d loss / d logits`.
pub(crate) fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Softmax probabilities of a logit vector.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// The embedding network: repeated (conv 3x3 -> softplus -> 2x2 average
/// pool) blocks, global average pool, then a linear map to the embedding.
#[derive(Debug, Clone)]
pub(crate) struct ConvNet {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub convs: Vec<ConvLayer>,
    pub dense: Dense,
}

/// Everything the backward pass needs from a forward pass.
pub(crate) struct ForwardCache {
    /// Input to each conv layer (the image, then pooled activations).
    layer_inputs: Vec<Vec<f64>>,
    /// Conv outputs before softplus.
    preacts: Vec<Vec<f64>>,
    /// Plane sizes at each conv layer input.
    sizes: Vec<(usize, usize)>,
    gap_input: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Gradients for every trainable tensor of a [`ConvNet`].
#[derive(Debug, Clone)]
pub(crate) struct NetGrads {
    pub convs: Vec<(Vec<f64>, Vec<f64>)>,
    pub dense: (Vec<f64>, Vec<f64>),
}

impl NetGrads {
    pub fn zeros_like(net: &ConvNet) -> NetGrads {
        NetGrads {
            convs: net
                .convs
                .iter()
                .map(|c| (vec![0.0; c.w.len()], vec![0.0; c.b.len()]))
                .collect(),
            dense: (vec![0.0; net.dense.w.len()], vec![0.0; net.dense.b.len()]),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.convs {
            w.iter_mut().for_each(|v| *v *= s);
            b.iter_mut().for_each(|v| *v *= s);
        }
        self.dense.0.iter_mut().for_each(|v| *v *= s);
        self.dense.1.iter_mut().for_each(|v| *v *= s);
    }
}

fn avg_pool(input: &[f64], ch: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; ch * oh * ow];
    for c in 0..ch {
        for y in 0..oh {
            for x in 0..ow {
                let base = c * h * w + 2 * y * w + 2 * x;
                out[c * oh * ow + y * ow + x] =
                    0.25 * (input[base] + input[base + 1] + input[base + w] + input[base + w + 1]);
            }
        }
    }
    out
}

fn avg_unpool(d_out: &[f64], ch: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut d_in = vec![0.0; ch * h * w];
    for c in 0..ch {
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * d_out[c * oh * ow + y * ow + x];
                let base = c * h * w + 2 * y * w + 2 * x;
                d_in[base] = g;
                d_in[base + 1] = g;
                d_in[base + w] = g;
                d_in[base + w + 1] = g;
            }
        }
    }
    d_in
}

impl ConvNet {
    pub fn new_seeded(
        input_h: usize,
        input_w: usize,
        input_c: usize,
        conv_channels: &[usize],
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> ConvNet {
        let mut convs = Vec::new();
        let mut ch = input_c;
        for &out_ch in conv_channels {
            convs.push(ConvLayer::new_seeded(ch, out_ch, rng));
            ch = out_ch;
        }
        let dense = Dense::new_seeded(ch, embed_dim, rng);
        ConvNet {
            input_h,
            input_w,
            input_c,
            convs,
            dense,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.dense.out_dim
    }

    pub fn forward(&self, pixels: &[f64]) -> ForwardCache {
        let mut layer_inputs = Vec::with_capacity(self.convs.len());
        let mut preacts = Vec::with_capacity(self.convs.len());
        let mut sizes = Vec::with_capacity(self.convs.len());
        let (mut h, mut w) = (self.input_h, self.input_w);
        let mut current = pixels.to_vec();
        for conv in &self.convs {
            sizes.push((h, w));
            let pre = conv.forward(&current, h, w);
            let act: Vec<f64> = pre.iter().map(|&v| softplus(v)).collect();
            let pooled = avg_pool(&act, conv.out_ch, h, w);
            layer_inputs.push(current);
            preacts.push(pre);
            current = pooled;
            h /= 2;
            w /= 2;
        }
        // Global average pool per channel.
        let ch = self.convs.last().map_or(self.input_c, |c| c.out_ch);
        let n = (h * w) as f64;
        let gap: Vec<f64> = (0..ch)
            .map(|c| current[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / n)
            .collect();
        let embedding = self.dense.forward(&gap);
        ForwardCache {
            layer_inputs,
            preacts,
            sizes,
            gap_input: gap,
            embedding,
        }
    }

    /// Backpropagates `d_embed`; returns the pixel gradient and, when
    /// `grads` is given, accumulates parameter gradients into it.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_embed: &[f64],
        mut grads: Option<&mut NetGrads>,
    ) -> Vec<f64> {
        let mut d_gap = self.dense.backward_input(d_embed);
        if let Some(g) = grads.as_deref_mut() {
            self.dense
                .backward_params(&cache.gap_input, d_embed, &mut g.dense.0, &mut g.dense.1);
        }

        // Expand GAP gradient back to the last pooled feature map.
        let last = self.convs.len() - 1;
        let (lh, lw) = cache.sizes[last];
        let (ph, pw) = (lh / 2, lw / 2);
        let n = (ph * pw) as f64;
        let ch = self.convs[last].out_ch;
        let mut d_pooled = vec![0.0; ch * ph * pw];
        for c in 0..ch {
            let g = d_gap[c] / n;
            d_pooled[c * ph * pw..(c + 1) * ph * pw].fill(g);
        }
        d_gap.clear();

        let mut d_current = d_pooled;
        for i in (0..self.convs.len()).rev() {
            let conv = &self.convs[i];
            let (h, w) = cache.sizes[i];
            let mut d_act = avg_unpool(&d_current, conv.out_ch, h, w);
            // Through softplus: d/dx softplus = sigmoid.
            for (d, pre) in d_act.iter_mut().zip(&cache.preacts[i]) {
                *d *= sigmoid(*pre);
            }
            if let Some(g) = grads.as_deref_mut() {
                let (dw, db) = &mut g.convs[i];
                conv.backward_params(&cache.layer_inputs[i], &d_act, h, w, dw, db);
            }
            d_current = conv.backward_input(&d_act, h, w);
        }
        d_current
    }

    /// Mutable views of every parameter tensor, in checkpoint order.
    pub fn param_groups_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut groups: Vec<&mut Vec<f64>> = Vec::new();
        for conv in &mut self.convs {
            groups.push(&mut conv.w);
            groups.push(&mut conv.b);
        }
        groups.push(&mut self.dense.w);
        groups.push(&mut self.dense.b);
        groups
    }

    pub fn param_groups(&self) -> Vec<&Vec<f64>> {
        let mut groups: Vec<&Vec<f64>> = Vec::new();
        for conv in &self.convs {
            groups.push(&conv.w);
            groups.push(&conv.b);
        }
        groups.push(&self.dense.w);
        groups.push(&self.dense.b);
        groups
    }

    /// Rounds every weight to its nearest f32, so the 32-bit checkpoint
    /// encoding reproduces the in-memory model exactly.
    pub fn quantize_f32(&mut self) {
        for group in self.param_groups_mut() {
            for v in group.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Adam over a fixed list of parameter groups.
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(group_sizes: &[usize], lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[&Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
