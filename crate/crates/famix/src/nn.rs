//! Small deterministic CPU layers with explicit forward and backward passes.
//!
//! Feature tensors are h x w x c (channels last) in f64. Parameters live in a
//! [`Params`] arena so the optimizer, freeze policies, checksums and
//! checkpointing all see one flat, stably ordered list of named blocks.

use ndarray::{Array3, ArrayView4, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Parameter-group tag used for freezing, learning rates and checksums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Stem,
    Layer1,
    Layer2,
    Layer3,
    Layer4Main,
    Layer4Tail,
    Decoder,
    Encoder,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Stem,
        Stage::Layer1,
        Stage::Layer2,
        Stage::Layer3,
        Stage::Layer4Main,
        Stage::Layer4Tail,
        Stage::Decoder,
        Stage::Encoder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Stem => "stem",
            Stage::Layer1 => "layer1",
            Stage::Layer2 => "layer2",
            Stage::Layer3 => "layer3",
            Stage::Layer4Main => "layer4_main",
            Stage::Layer4Tail => "layer4_tail",
            Stage::Decoder => "decoder",
            Stage::Encoder => "encoder",
        }
    }
}

/// Index of a parameter block inside a [`Params`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub name: String,
    pub stage: Stage,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub vel: Vec<f64>,
}

/// Flat arena of named parameter blocks in registration order.
#[derive(Debug, Clone, Default)]
pub struct Params {
    blocks: Vec<ParamBlock>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, stage: Stage, shape: &[usize], data: Vec<f64>) -> BlockId {
        let len: usize = shape.iter().product();
        assert_eq!(data.len(), len, "init length mismatch for {name}");
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            stage,
            shape: shape.to_vec(),
            grad: vec![0.0; len],
            vel: vec![0.0; len],
            data,
        });
        BlockId(self.blocks.len() - 1)
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn data(&self, id: BlockId) -> &[f64] {
        &self.blocks[id.0].data
    }

    pub fn data_mut(&mut self, id: BlockId) -> &mut [f64] {
        &mut self.blocks[id.0].data
    }

    pub fn grad(&self, id: BlockId) -> &[f64] {
        &self.blocks[id.0].grad
    }

    pub fn grad_mut(&mut self, id: BlockId) -> &mut [f64] {
        &mut self.blocks[id.0].grad
    }

    pub fn view4(&self, id: BlockId) -> ArrayView4<'_, f64> {
        let b = &self.blocks[id.0];
        assert_eq!(b.shape.len(), 4);
        ArrayView4::from_shape(
            (b.shape[0], b.shape[1], b.shape[2], b.shape[3]),
            &b.data[..],
        )
        .expect("block shape consistent")
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.blocks {
            b.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Copies values (not optimizer state) from another arena with an
    /// identical block layout.
    pub fn copy_values_from(&mut self, other: &Params) {
        assert_eq!(self.blocks.len(), other.blocks.len(), "layout mismatch");
        for (dst, src) in self.blocks.iter_mut().zip(&other.blocks) {
            assert_eq!(dst.shape, src.shape, "shape mismatch on {}", dst.name);
            dst.data.copy_from_slice(&src.data);
        }
    }

    /// FNV-1a over the f64 bit patterns of every block in `stages`.
    pub fn checksum(&self, mut stages: impl FnMut(Stage) -> bool) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in &self.blocks {
            if !stages(b.stage) {
                continue;
            }
            for &v in &b.data {
                for byte in v.to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        hash
    }

    pub fn stage_checksum(&self, stage: Stage) -> u64 {
        self.checksum(|s| s == stage)
    }

    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }
}

fn he_normal(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// 2D convolution over h x w x cin inputs with weights kh x kw x cin x cout.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: BlockId,
    pub b: BlockId,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        name: &str,
        stage: Stage,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = k * k * cin;
        let w = params.add(
            &format!("{name}.w"),
            stage,
            &[k, k, cin, cout],
            he_normal(rng, fan_in, k * k * cin * cout),
        );
        let b = params.add(&format!("{name}.b"), stage, &[cout], vec![0.0; cout]);
        Self {
            w,
            b,
            kh: k,
            kw: k,
            cin,
            cout,
            stride,
            padding,
            dilation,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let eff_kh = self.dilation * (self.kh - 1) + 1;
        let eff_kw = self.dilation * (self.kw - 1) + 1;
        let oh = (h + 2 * self.padding - eff_kh) / self.stride + 1;
        let ow = (w + 2 * self.padding - eff_kw) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&self, params: &Params, x: &Array3<f64>) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        assert_eq!(cin, self.cin, "conv input channels");
        let (oh, ow) = self.out_dims(h, w);
        let weight = params.view4(self.w);
        let bias = params.data(self.b);
        let mut out = Array3::zeros((oh, ow, self.cout));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = out.slice_mut(ndarray::s![oy, ox, ..]);
                let acc = acc.as_slice_mut().expect("contiguous");
                acc.copy_from_slice(bias);
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky * self.dilation) as isize
                        - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx * self.dilation) as isize
                            - self.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xrow = x.slice(ndarray::s![iy as usize, ix as usize, ..]);
                        let xrow = xrow.as_slice().expect("contiguous");
                        for (ci, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = weight.slice(ndarray::s![ky, kx, ci, ..]);
                            let wrow = wrow.as_slice().expect("contiguous");
                            for (co, &wv) in wrow.iter().enumerate() {
                                acc[co] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Input gradient only; never touches the grad buffers.
    pub fn backward_input(
        &self,
        params: &Params,
        in_dims: (usize, usize),
        dy: &Array3<f64>,
    ) -> Array3<f64> {
        let (h, w) = in_dims;
        let (oh, ow, cout) = dy.dim();
        assert_eq!(cout, self.cout);
        let mut dx = Array3::zeros((h, w, self.cin));
        let weight = params.view4(self.w);
        for oy in 0..oh {
            for ox in 0..ow {
                let dyrow = dy.slice(ndarray::s![oy, ox, ..]);
                let dyrow = dyrow.as_slice().expect("contiguous");
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky * self.dilation) as isize
                        - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx * self.dilation) as isize
                            - self.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let mut dxrow = dx.slice_mut(ndarray::s![iy as usize, ix as usize, ..]);
                        let dxrow = dxrow.as_slice_mut().expect("contiguous");
                        for ci in 0..self.cin {
                            let wrow = weight.slice(ndarray::s![ky, kx, ci, ..]);
                            let wrow = wrow.as_slice().expect("contiguous");
                            let mut acc = 0.0;
                            for (co, &wv) in wrow.iter().enumerate() {
                                acc += dyrow[co] * wv;
                            }
                            dxrow[ci] += acc;
                        }
                    }
                }
            }
        }
        dx
    }

    /// Propagates `dy` to the input; accumulates weight/bias grads when asked.
    pub fn backward(
        &self,
        params: &mut Params,
        x: &Array3<f64>,
        dy: &Array3<f64>,
        accumulate: bool,
    ) -> Array3<f64> {
        let (h, w, _) = x.dim();
        let (oh, ow, _) = dy.dim();
        let dx = self.backward_input(params, (h, w), dy);
        if accumulate {
            // weight grads share the loop structure, writing into the arena
            let kw_total = self.kw;
            let cin = self.cin;
            let cout = self.cout;
            {
                let wgrad = params.grad_mut(self.w);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let dyrow = dy.slice(ndarray::s![oy, ox, ..]);
                        let dyrow = dyrow.as_slice().expect("contiguous");
                        for ky in 0..self.kh {
                            let iy = (oy * self.stride + ky * self.dilation) as isize
                                - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw_total {
                                let ix = (ox * self.stride + kx * self.dilation) as isize
                                    - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xrow = x.slice(ndarray::s![iy as usize, ix as usize, ..]);
                                let xrow = xrow.as_slice().expect("contiguous");
                                let base = ((ky * kw_total) + kx) * cin * cout;
                                for (ci, &xv) in xrow.iter().enumerate() {
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let row = &mut wgrad[base + ci * cout..base + (ci + 1) * cout];
                                    for (co, g) in row.iter_mut().enumerate() {
                                        *g += xv * dyrow[co];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let bgrad = params.grad_mut(self.b);
            for oy in 0..oh {
                for ox in 0..ow {
                    let dyrow = dy.slice(ndarray::s![oy, ox, ..]);
                    let dyrow = dyrow.as_slice().expect("contiguous");
                    for (co, g) in bgrad.iter_mut().enumerate() {
                        *g += dyrow[co];
                    }
                }
            }
        }
        dx
    }
}

/// Group normalization over (h, w, channels-per-group), per sample.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: BlockId,
    pub beta: BlockId,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

pub struct GnCache {
    xhat: Array3<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(params: &mut Params, name: &str, stage: Stage, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "channels divisible by groups");
        let gamma = params.add(&format!("{name}.gamma"), stage, &[channels], vec![1.0; channels]);
        let beta = params.add(&format!("{name}.beta"), stage, &[channels], vec![0.0; channels]);
        Self {
            gamma,
            beta,
            groups,
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, params: &Params, x: &Array3<f64>) -> (Array3<f64>, GnCache) {
        let (h, w, c) = x.dim();
        assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let n = (h * w * cg) as f64;
        let gamma = params.data(self.gamma);
        let beta = params.data(self.beta);
        let mut xhat = Array3::zeros((h, w, c));
        let mut out = Array3::zeros((h, w, c));
        let mut inv_std = vec![0.0; self.groups];
        for g in 0..self.groups {
            let range = g * cg..(g + 1) * cg;
            let xs = x.slice(ndarray::s![.., .., range.clone()]);
            let mean = xs.sum() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[g] = istd;
            for y in 0..h {
                for xcol in 0..w {
                    for (k, ch) in range.clone().enumerate() {
                        let _ = k;
                        let xh = (x[[y, xcol, ch]] - mean) * istd;
                        xhat[[y, xcol, ch]] = xh;
                        out[[y, xcol, ch]] = gamma[ch] * xh + beta[ch];
                    }
                }
            }
        }
        (out, GnCache { xhat, inv_std })
    }

    /// Input gradient only; never touches the grad buffers.
    pub fn backward_input(&self, params: &Params, cache: &GnCache, dy: &Array3<f64>) -> Array3<f64> {
        let (h, w, c) = dy.dim();
        let cg = c / self.groups;
        let n = (h * w * cg) as f64;
        let gamma = params.data(self.gamma);
        let mut dx = Array3::zeros((h, w, c));
        for g in 0..self.groups {
            let range = g * cg..(g + 1) * cg;
            let istd = cache.inv_std[g];
            // reductions over the group
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for y in 0..h {
                for xcol in 0..w {
                    for ch in range.clone() {
                        let dxhat = dy[[y, xcol, ch]] * gamma[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * cache.xhat[[y, xcol, ch]];
                    }
                }
            }
            for y in 0..h {
                for xcol in 0..w {
                    for ch in range.clone() {
                        let dxhat = dy[[y, xcol, ch]] * gamma[ch];
                        let xh = cache.xhat[[y, xcol, ch]];
                        dx[[y, xcol, ch]] =
                            istd / n * (n * dxhat - sum_dxhat - xh * sum_dxhat_xhat);
                    }
                }
            }
        }
        dx
    }

    pub fn backward(
        &self,
        params: &mut Params,
        cache: &GnCache,
        dy: &Array3<f64>,
        accumulate: bool,
    ) -> Array3<f64> {
        let (h, w, c) = dy.dim();
        let dx = self.backward_input(params, cache, dy);
        if accumulate {
            let (dgamma_tmp, dbeta_tmp): (Vec<f64>, Vec<f64>) = {
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for y in 0..h {
                    for xcol in 0..w {
                        for ch in 0..c {
                            dgamma[ch] += dy[[y, xcol, ch]] * cache.xhat[[y, xcol, ch]];
                            dbeta[ch] += dy[[y, xcol, ch]];
                        }
                    }
                }
                (dgamma, dbeta)
            };
            for (g, v) in params.grad_mut(self.gamma).iter_mut().zip(&dgamma_tmp) {
                *g += v;
            }
            for (g, v) in params.grad_mut(self.beta).iter_mut().zip(&dbeta_tmp) {
                *g += v;
            }
        }
        dx
    }
}

/// ReLU; the backward pass masks on the forward output.
pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(y: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| {
        if yv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Bilinear resize to (oh, ow), half-pixel centers (align_corners = false).
pub fn resize_bilinear(x: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array3::zeros((oh, ow, c));
    for oy in 0..oh {
        let (y0, y1, wy) = src_coords(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, wx) = src_coords(ox, ow, w);
            for ch in 0..c {
                let v00 = x[[y0, x0, ch]];
                let v01 = x[[y0, x1, ch]];
                let v10 = x[[y1, x0, ch]];
                let v11 = x[[y1, x1, ch]];
                out[[oy, ox, ch]] = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatters `dy` back to the input grid.
pub fn resize_bilinear_backward(dy: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (oh, ow, c) = dy.dim();
    let mut dx = Array3::zeros((h, w, c));
    for oy in 0..oh {
        let (y0, y1, wy) = src_coords(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, wx) = src_coords(ox, ow, w);
            for ch in 0..c {
                let g = dy[[oy, ox, ch]];
                dx[[y0, x0, ch]] += g * (1.0 - wy) * (1.0 - wx);
                dx[[y0, x1, ch]] += g * (1.0 - wy) * wx;
                dx[[y1, x0, ch]] += g * wy * (1.0 - wx);
                dx[[y1, x1, ch]] += g * wy * wx;
            }
        }
    }
    dx
}

fn src_coords(o: usize, olen: usize, ilen: usize) -> (usize, usize, f64) {
    let scale = ilen as f64 / olen as f64;
    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (ilen - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(ilen - 1);
    (i0, i1, src - i0 as f64)
}

/// Spatial mean per channel.
pub fn global_avg_pool(x: &Array3<f64>) -> Vec<f64> {
    let (h, w, c) = x.dim();
    let n = (h * w) as f64;
    (0..c)
        .map(|ch| x.index_axis(Axis(2), ch).sum() / n)
        .collect()
}

pub fn global_avg_pool_backward(dv: &[f64], h: usize, w: usize) -> Array3<f64> {
    let c = dv.len();
    let n = (h * w) as f64;
    Array3::from_shape_fn((h, w, c), |(_, _, ch)| dv[ch] / n)
}

/// Fully connected layer over flat vectors, weights shaped in x out.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: BlockId,
    pub b: BlockId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        params: &mut Params,
        name: &str,
        stage: Stage,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = params.add(
            &format!("{name}.w"),
            stage,
            &[input, output],
            he_normal(rng, input, input * output),
        );
        let b = params.add(&format!("{name}.b"), stage, &[output], vec![0.0; output]);
        Self {
            w,
            b,
            input,
            output,
        }
    }

    pub fn forward(&self, params: &Params, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input);
        let w = params.data(self.w);
        let b = params.data(self.b);
        let mut out = b.to_vec();
        for (i, &xv) in x.iter().enumerate() {
            let row = &w[i * self.output..(i + 1) * self.output];
            for (o, &wv) in row.iter().enumerate() {
                out[o] += xv * wv;
            }
        }
        out
    }

    /// Input gradient only; never touches the grad buffers.
    pub fn backward_input(&self, params: &Params, dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.input];
        let w = params.data(self.w);
        for (i, d) in dx.iter_mut().enumerate() {
            let row = &w[i * self.output..(i + 1) * self.output];
            *d = row.iter().zip(dy).map(|(&wv, &g)| wv * g).sum();
        }
        dx
    }

    pub fn backward(
        &self,
        params: &mut Params,
        x: &[f64],
        dy: &[f64],
        accumulate: bool,
    ) -> Vec<f64> {
        let dx = self.backward_input(params, dy);
        if accumulate {
            {
                let wgrad = params.grad_mut(self.w);
                for (i, &xv) in x.iter().enumerate() {
                    let row = &mut wgrad[i * self.output..(i + 1) * self.output];
                    for (o, g) in row.iter_mut().enumerate() {
                        *g += xv * dy[o];
                    }
                }
            }
            for (g, &d) in params.grad_mut(self.b).iter_mut().zip(dy) {
                *g += d;
            }
        }
        dx
    }
}

/// Pixel-wise softmax cross-entropy against integer labels.
///
/// Returns the summed loss, the number of counted (non-ignore) pixels and
/// the gradient in *sum* form; callers divide by the batch-wide pixel count.
pub fn cross_entropy(
    logits: &Array3<f64>,
    labels: &ndarray::Array2<u32>,
    ignore_index: u32,
) -> (f64, usize, Array3<f64>) {
    let (h, w, k) = logits.dim();
    assert_eq!((h, w), labels.dim(), "logit/label shape");
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    let mut dlogits = Array3::zeros((h, w, k));
    for y in 0..h {
        for x in 0..w {
            let gt = labels[[y, x]];
            if gt == ignore_index {
                continue;
            }
            let gt = gt as usize;
            assert!(gt < k, "label {gt} outside {k} classes");
            let row = logits.slice(ndarray::s![y, x, ..]);
            let row = row.as_slice().expect("contiguous");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut lse = 0.0;
            for &v in row {
                lse += (v - max).exp();
            }
            let lse = lse.ln() + max;
            loss_sum += lse - row[gt];
            count += 1;
            let mut drow = dlogits.slice_mut(ndarray::s![y, x, ..]);
            let drow = drow.as_slice_mut().expect("contiguous");
            for (c, d) in drow.iter_mut().enumerate() {
                let p = (row[c] - lse).exp();
                *d = if c == gt { p - 1.0 } else { p };
            }
        }
    }
    (loss_sum, count, dlogits)
}

/// SGD with momentum; weight decay touches trainable parameters only.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentum {
    pub fn step(
        &self,
        params: &mut Params,
        mut lr_for: impl FnMut(Stage) -> f64,
        mut trainable: impl FnMut(Stage) -> bool,
    ) {
        for block in params.blocks_mut() {
            if !trainable(block.stage) {
                continue;
            }
            let lr = lr_for(block.stage);
            for ((v, g), w) in block
                .vel
                .iter_mut()
                .zip(&block.grad)
                .zip(block.data.iter_mut())
            {
                *v = self.momentum * *v + (*g + self.weight_decay * *w);
                *w -= lr * *v;
            }
        }
    }
}

/// Polynomial learning-rate decay: lr0 * (1 - t/T)^power.
pub fn poly_lr(lr0: f64, t: u64, total: u64, power: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = t.min(total);
    lr0 * (1.0 - t as f64 / total as f64).powf(power)
}
