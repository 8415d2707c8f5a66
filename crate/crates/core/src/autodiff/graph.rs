use super::gemm::{gemm, MatRef};
use super::{AutodiffError, Result, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        // per-sample im2col matrices, kept only when the weight trains
        cols: Vec<Vec<f32>>,
    },
    Depthwise {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    LeakyRelu {
        input: Var,
        slope: f32,
    },
    Sigmoid {
        input: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    MulChannel {
        x: Var,
        gate: Var,
    },
    MulSpatial {
        x: Var,
        gate: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    ChannelMean {
        input: Var,
    },
    ChannelMax {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A dynamically built tape of operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(AutodiffError::InvalidArgument {
            op,
            msg: format!("expected a rank-4 NCHW tensor, got {:?}", t.shape()),
        }),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<[usize; 2]> {
    match *t.shape() {
        [n, c] => Ok([n, c]),
        _ => Err(AutodiffError::InvalidArgument {
            op,
            msg: format!("expected a rank-2 tensor, got {:?}", t.shape()),
        }),
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f32],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f32],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn out_extent(op: &'static str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if size + 2 * pad < k {
        return Err(AutodiffError::InvalidArgument {
            op,
            msg: format!("spatial extent {size} with padding {pad} is smaller than kernel {k}"),
        });
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

fn check_kernel(op: &'static str, k: usize, stride: usize) -> Result<()> {
    if !(k == 1 || k == 3) || !(stride == 1 || stride == 2) {
        return Err(AutodiffError::InvalidArgument {
            op,
            msg: format!("unsupported kernel {k} / stride {stride}"),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Tensor { grad: None, ..t },
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass, if the value required one.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, op_name: &'static str, shape: &[usize], data: Vec<f32>, rg: bool, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NumericFault { op: op_name });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: rg,
            grad: None,
        };
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Cross-correlation of NCHW input with OCkk weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let x = self.value(input);
        let wt = self.value(weight);
        let [n, c, h, w] = dims4(OP, x)?;
        let [o, wc, k, k2] = dims4(OP, wt)?;
        if wc != c || k != k2 {
            return Err(shape_err(OP, x.shape(), wt.shape()));
        }
        check_kernel(OP, k, stride)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(shape_err(OP, wt.shape(), self.value(b).shape()));
            }
        }
        let ho = out_extent(OP, h, k, stride, pad)?;
        let wo = out_extent(OP, w, k, stride, pad)?;
        let kk = c * k * k;
        let p = ho * wo;
        let keep_cols = wt.requires_grad;
        let mut out = vec![0.0; n * o * p];
        let mut cols = Vec::new();
        let mut col = vec![0.0; kk * p];
        for ni in 0..n {
            let xs = &x.data[ni * c * h * w..(ni + 1) * c * h * w];
            im2col(xs, c, h, w, k, stride, pad, ho, wo, &mut col);
            let dst = &mut out[ni * o * p..(ni + 1) * o * p];
            gemm(o, kk, p, MatRef::row_major(&wt.data, kk), MatRef::row_major(&col, p), 0.0, dst);
            if let Some(b) = bias {
                let bd = &self.value(b).data;
                for (oi, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[oi]);
                }
            }
            if keep_cols {
                cols.push(col.clone());
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            OP,
            &[n, o, ho, wo],
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            },
        )
    }

    /// Per-channel convolution with weights shaped `[C, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "depthwise_conv2d";
        let x = self.value(input);
        let wt = self.value(weight);
        let [n, c, h, w] = dims4(OP, x)?;
        let [wc, one, k, k2] = dims4(OP, wt)?;
        if wc != c || one != 1 || k != k2 {
            return Err(shape_err(OP, x.shape(), wt.shape()));
        }
        check_kernel(OP, k, stride)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [c] {
                return Err(shape_err(OP, wt.shape(), self.value(b).shape()));
            }
        }
        let ho = out_extent(OP, h, k, stride, pad)?;
        let wo = out_extent(OP, w, k, stride, pad)?;
        let mut out = vec![0.0; n * c * ho * wo];
        for ni in 0..n {
            for ci in 0..c {
                let plane = &x.data[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                let kern = &wt.data[ci * k * k..(ci + 1) * k * k];
                let b0 = bias.map_or(0.0, |b| self.value(b).data[ci]);
                let dst = &mut out[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b0;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    acc += kern[ky * k + kx] * plane[iy as usize * w + ix as usize];
                                }
                            }
                        }
                        dst[oy * wo + ox] = acc;
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            OP,
            &[n, c, ho, wo],
            out,
            rg,
            Op::Depthwise {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        )
    }

    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize, eps: f32) -> Result<Var> {
        const OP: &str = "group_norm";
        let x = self.value(input);
        let [n, c, h, w] = dims4(OP, x)?;
        if groups == 0 || c % groups != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: OP,
                msg: format!("{c} channels not divisible into {groups} groups"),
            });
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(OP, x.shape(), self.value(gamma).shape()));
        }
        let cg = c / groups;
        let m = cg * h * w;
        let hw = h * w;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; n * groups];
        let mut out = vec![0.0; x.numel()];
        for ni in 0..n {
            for gi in 0..groups {
                let start = (ni * c + gi * cg) * hw;
                let seg = &x.data[start..start + m];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
                let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
                let istd = (1.0 / (var + eps as f64).sqrt()) as f32;
                inv_std[ni * groups + gi] = istd;
                let mean = mean as f32;
                for (j, &v) in seg.iter().enumerate() {
                    let xh = (v - mean) * istd;
                    let ch = gi * cg + j / hw;
                    xhat[start + j] = xh;
                    out[start + j] = g[ch] * xh + b[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let shape = x.shape().to_vec();
        self.push(
            OP,
            &shape,
            out,
            rg,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
        )
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Result<Var> {
        let x = self.value(input);
        let out = x.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(input);
        self.push("leaky_relu", &shape, out, rg, Op::LeakyRelu { input, slope })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = x.data.iter().map(|&v| sigmoid(v)).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(input);
        self.push("sigmoid", &shape, out, rg, Op::Sigmoid { input })
    }

    /// 2x2 max pooling with stride 2; ties go to the first element.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "max_pool2";
        let x = self.value(input);
        let [n, c, h, w] = dims4(OP, x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: OP,
                msg: format!("spatial extent {h}x{w} must be even"),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                    out.push(x.data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(input);
        self.push(OP, &[n, c, ho, wo], out, rg, Op::MaxPool2 { input, argmax })
    }

    /// Spatial mean, NCHW -> NC.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "global_avg_pool";
        let x = self.value(input);
        let [n, c, h, w] = dims4(OP, x)?;
        let hw = h * w;
        let out = x
            .data
            .chunks(hw)
            .map(|s| (s.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let rg = self.rg(input);
        self.push(OP, &[n, c], out, rg, Op::GlobalAvgPool { input })
    }

    /// Spatial max, NCHW -> NC.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "global_max_pool";
        let x = self.value(input);
        let [n, c, h, w] = dims4(OP, x)?;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (i, s) in x.data.chunks(hw).enumerate() {
            let mut best = 0;
            for (j, &v) in s.iter().enumerate() {
                if v > s[best] {
                    best = j;
                }
            }
            out.push(s[best]);
            argmax.push(i * hw + best);
        }
        let rg = self.rg(input);
        self.push(OP, &[n, c], out, rg, Op::GlobalMaxPool { input, argmax })
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "upsample_nearest2";
        let x = self.value(input);
        let [n, c, h, w] = dims4(OP, x)?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[nc * ho * wo + oy * wo + ox] = x.data[nc * h * w + (oy / 2) * w + ox / 2];
                }
            }
        }
        let rg = self.rg(input);
        self.push(OP, &[n, c, ho, wo], out, rg, Op::Upsample2 { input })
    }

    /// `x W^T + b` with `x: [N, I]`, `W: [O, I]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let x = self.value(input);
        let wt = self.value(weight);
        let [n, i] = dims2(OP, x)?;
        let [o, wi] = dims2(OP, wt)?;
        if wi != i {
            return Err(shape_err(OP, x.shape(), wt.shape()));
        }
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, MatRef::row_major(&x.data, i), MatRef::transposed(&wt.data, i), 0.0, &mut out);
        if let Some(b) = bias {
            let bd = &self.value(b).data;
            if bd.len() != o {
                return Err(shape_err(OP, wt.shape(), self.value(b).shape()));
            }
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bd).for_each(|(v, b)| *v += b);
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(OP, &[n, o], out, rg, Op::Linear { input, weight, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let out = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("add", &shape, out, rg, Op::Add { a, b })
    }

    /// Multiplies NCHW `x` by a gate shaped `[N, C, 1, 1]` (channel gate)
    /// or `[N, 1, H, W]` (spatial gate). No other broadcast is accepted.
    pub fn mul_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        const OP: &str = "mul_broadcast";
        let tx = self.value(x);
        let tg = self.value(gate);
        let [n, c, h, w] = dims4(OP, tx)?;
        let gs = tg.shape();
        let hw = h * w;
        let rg = self.rg(x) || self.rg(gate);
        if gs == [n, c, 1, 1] {
            let mut out = tx.data.clone();
            for (i, chunk) in out.chunks_mut(hw).enumerate() {
                let g = tg.data[i];
                chunk.iter_mut().for_each(|v| *v *= g);
            }
            self.push(OP, &[n, c, h, w], out, rg, Op::MulChannel { x, gate })
        } else if gs == [n, 1, h, w] {
            let mut out = tx.data.clone();
            for (i, chunk) in out.chunks_mut(hw).enumerate() {
                let g = &tg.data[(i / c) * hw..(i / c + 1) * hw];
                chunk.iter_mut().zip(g).for_each(|(v, g)| *v *= g);
            }
            self.push(OP, &[n, c, h, w], out, rg, Op::MulSpatial { x, gate })
        } else {
            Err(shape_err(OP, tx.shape(), gs))
        }
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = inputs.first().ok_or(AutodiffError::InvalidArgument {
            op: OP,
            msg: "no inputs".into(),
        })?;
        let [n, _, h, w] = dims4(OP, self.value(*first))?;
        let mut total_c = 0;
        for &v in inputs {
            let [vn, vc, vh, vw] = dims4(OP, self.value(v))?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err(OP, self.value(*first).shape(), self.value(v).shape()));
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for ni in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            OP,
            &[n, total_c, h, w],
            out,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Mean over channels, NCHW -> N1HW.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "channel_mean";
        let x = self.value(input);
        let [n, c, h, w] = dims4(OP, x)?;
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        for ni in 0..n {
            let dst = &mut out[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let src = &x.data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d /= c as f32);
        }
        let rg = self.rg(input);
        self.push(OP, &[n, 1, h, w], out, rg, Op::ChannelMean { input })
    }

    /// Max over channels, NCHW -> N1HW; ties go to the lowest channel.
    pub fn channel_max(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "channel_max";
        let x = self.value(input);
        let [n, c, h, w] = dims4(OP, x)?;
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        let mut argmax = vec![0; n * hw];
        for ni in 0..n {
            for j in 0..hw {
                let mut best = ni * c * hw + j;
                for ci in 1..c {
                    let idx = (ni * c + ci) * hw + j;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                out[ni * hw + j] = x.data[best];
                argmax[ni * hw + j] = best;
            }
        }
        let rg = self.rg(input);
        self.push(OP, &[n, 1, h, w], out, rg, Op::ChannelMax { input, argmax })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if shape.iter().product::<usize>() != x.numel() || shape.contains(&0) {
            return Err(shape_err("reshape", x.shape(), shape));
        }
        let out = x.data.clone();
        let rg = self.rg(input);
        self.push("reshape", shape, out, rg, Op::Reshape { input })
    }

    /// Reverse pass seeded with `d loss / d v` for each `(v, grad)`.
    /// Gradients of every value that requires one are then available via
    /// [`Graph::grad`].
    pub fn backward(&mut self, seeds: &[(Var, &[f32])]) -> Result<()> {
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for &(v, g) in seeds {
            let t = &self.nodes[v.0].value;
            if g.len() != t.numel() {
                return Err(shape_err("backward", t.shape(), &[g.len()]));
            }
            if !t.requires_grad {
                continue;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; g.len()]);
            slot.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.backprop(i, g, lower);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = if node.value.requires_grad { g } else { None };
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
        let t = &self.nodes[v.0].value;
        if !t.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; t.numel()]))
    }

    fn backprop(&self, idx: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
                let (o, k) = (wt.shape[0], wt.shape[2]);
                let (ho, wo) = (out_shape[2], out_shape[3]);
                let p = ho * wo;
                let kk = c * k * k;
                if let Some(b) = bias {
                    if let Some(db) = self.slot(grads, *b) {
                        for (i, chunk) in gout.chunks(p).enumerate() {
                            db[i % o] += chunk.iter().sum::<f32>();
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *weight) {
                    for (ni, col) in cols.iter().enumerate() {
                        let g = &gout[ni * o * p..(ni + 1) * o * p];
                        gemm(o, p, kk, MatRef::row_major(g, p), MatRef::transposed(col, p), 1.0, dw);
                    }
                }
                if let Some(dx) = self.slot(grads, *input) {
                    let mut dcol = vec![0.0; kk * p];
                    for ni in 0..n {
                        let g = &gout[ni * o * p..(ni + 1) * o * p];
                        gemm(kk, o, p, MatRef::transposed(&wt.data, kk), MatRef::row_major(g, p), 0.0, &mut dcol);
                        let dxs = &mut dx[ni * c * h * w..(ni + 1) * c * h * w];
                        col2im_add(&dcol, c, h, w, k, *stride, *pad, ho, wo, dxs);
                    }
                }
            }
            Op::Depthwise {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
                let k = wt.shape[2];
                let (ho, wo) = (out_shape[2], out_shape[3]);
                let (s, pd) = (*stride, *pad);
                let taps = |oy: usize, ox: usize, ky: usize, kx: usize| -> Option<usize> {
                    let iy = (oy * s + ky) as isize - pd as isize;
                    let ix = (ox * s + kx) as isize - pd as isize;
                    (iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize).then(|| iy as usize * w + ix as usize)
                };
                if let Some(b) = bias {
                    if let Some(db) = self.slot(grads, *b) {
                        for (i, chunk) in gout.chunks(ho * wo).enumerate() {
                            db[i % c] += chunk.iter().sum::<f32>();
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *weight) {
                    for ni in 0..n {
                        for ci in 0..c {
                            let plane = &x.data[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                            let g = &gout[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let mut acc = 0.0;
                                    for oy in 0..ho {
                                        for ox in 0..wo {
                                            if let Some(j) = taps(oy, ox, ky, kx) {
                                                acc += plane[j] * g[oy * wo + ox];
                                            }
                                        }
                                    }
                                    dw[ci * k * k + ky * k + kx] += acc;
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *input) {
                    for ni in 0..n {
                        for ci in 0..c {
                            let kern = &wt.data[ci * k * k..(ci + 1) * k * k];
                            let g = &gout[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
                            let d = &mut dx[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            if let Some(j) = taps(oy, ox, ky, kx) {
                                                d[j] += kern[ky * k + kx] * g[oy * wo + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = [out_shape[0], out_shape[1], out_shape[2], out_shape[3]];
                let hw = h * w;
                let cg = c / groups;
                let m = cg * hw;
                let gm = &self.value(*gamma).data;
                if let Some(db) = self.slot(grads, *beta) {
                    for (i, chunk) in gout.chunks(hw).enumerate() {
                        db[i % c] += chunk.iter().sum::<f32>();
                    }
                }
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (i, (gc, xc)) in gout.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                        dg[i % c] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f32>();
                    }
                }
                if let Some(dx) = self.slot(grads, *input) {
                    let mut dxhat = vec![0.0; m];
                    for ni in 0..n {
                        for gi in 0..*groups {
                            let start = (ni * c + gi * cg) * hw;
                            let mut s1 = 0.0f64;
                            let mut s2 = 0.0f64;
                            for j in 0..m {
                                let v = gout[start + j] * gm[gi * cg + j / hw];
                                dxhat[j] = v;
                                s1 += v as f64;
                                s2 += (v * xhat[start + j]) as f64;
                            }
                            let istd = inv_std[ni * groups + gi];
                            let (s1, s2) = ((s1 / m as f64) as f32, (s2 / m as f64) as f32);
                            for j in 0..m {
                                dx[start + j] += istd * (dxhat[j] - s1 - xhat[start + j] * s2);
                            }
                        }
                    }
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = &self.value(*input).data;
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, g), v) in dx.iter_mut().zip(gout).zip(x) {
                        *d += if *v > 0.0 { *g } else { slope * g };
                    }
                }
            }
            Op::Sigmoid { input } => {
                let y = &node.value.data;
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, g), y) in dx.iter_mut().zip(gout).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::MaxPool2 { input, argmax } | Op::GlobalMaxPool { input, argmax } | Op::ChannelMax { input, argmax } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for (g, &j) in gout.iter().zip(argmax) {
                        dx[j] += g;
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                let hw = self.value(*input).shape[2] * self.value(*input).shape[3];
                if let Some(dx) = self.slot(grads, *input) {
                    for (chunk, g) in dx.chunks_mut(hw).zip(gout) {
                        let v = g / hw as f32;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::Upsample2 { input } => {
                let s = self.value(*input).shape.clone();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (2 * h, 2 * w);
                if let Some(dx) = self.slot(grads, *input) {
                    for nc in 0..s[0] * s[1] {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                dx[nc * h * w + (oy / 2) * w + ox / 2] += gout[nc * ho * wo + oy * wo + ox];
                            }
                        }
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, i) = (x.shape[0], x.shape[1]);
                let o = wt.shape[0];
                if let Some(b) = bias {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in gout.chunks(o) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *weight) {
                    gemm(o, n, i, MatRef::transposed(gout, o), MatRef::row_major(&x.data, i), 1.0, dw);
                }
                if let Some(dx) = self.slot(grads, *input) {
                    gemm(n, o, i, MatRef::row_major(gout, o), MatRef::row_major(&wt.data, i), 1.0, dx);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        d.iter_mut().zip(gout).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::MulChannel { x, gate } => {
                let hw = out_shape[2] * out_shape[3];
                let tx = &self.value(*x).data;
                let tg = &self.value(*gate).data;
                if let Some(dg) = self.slot(grads, *gate) {
                    for (i, (gc, xc)) in gout.chunks(hw).zip(tx.chunks(hw)).enumerate() {
                        dg[i] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f32>();
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, (dc, gc)) in dx.chunks_mut(hw).zip(gout.chunks(hw)).enumerate() {
                        dc.iter_mut().zip(gc).for_each(|(d, g)| *d += g * tg[i]);
                    }
                }
            }
            Op::MulSpatial { x, gate } => {
                let c = out_shape[1];
                let hw = out_shape[2] * out_shape[3];
                let tx = &self.value(*x).data;
                let tg = &self.value(*gate).data;
                if let Some(dg) = self.slot(grads, *gate) {
                    for (i, (gc, xc)) in gout.chunks(hw).zip(tx.chunks(hw)).enumerate() {
                        let d = &mut dg[(i / c) * hw..(i / c + 1) * hw];
                        for ((d, g), v) in d.iter_mut().zip(gc).zip(xc) {
                            *d += g * v;
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, (dc, gc)) in dx.chunks_mut(hw).zip(gout.chunks(hw)).enumerate() {
                        let gate_row = &tg[(i / c) * hw..(i / c + 1) * hw];
                        for ((d, g), s) in dc.iter_mut().zip(gc).zip(gate_row) {
                            *d += g * s;
                        }
                    }
                }
            }
            Op::Concat { inputs } => {
                let n = out_shape[0];
                let hw = out_shape[2] * out_shape[3];
                let total = out_shape[1] * hw;
                let mut offset = 0;
                for v in inputs {
                    let c = self.value(*v).shape[1];
                    if let Some(d) = self.slot(grads, *v) {
                        for ni in 0..n {
                            let src = &gout[ni * total + offset..ni * total + offset + c * hw];
                            d[ni * c * hw..(ni + 1) * c * hw]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += c * hw;
                }
            }
            Op::ChannelMean { input } => {
                let c = self.value(*input).shape[1];
                let hw = out_shape[2] * out_shape[3];
                if let Some(dx) = self.slot(grads, *input) {
                    for (i, chunk) in dx.chunks_mut(hw).enumerate() {
                        let g = &gout[(i / c) * hw..(i / c + 1) * hw];
                        chunk.iter_mut().zip(g).for_each(|(d, g)| *d += g / c as f32);
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    dx.iter_mut().zip(gout).for_each(|(d, g)| *d += g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_and_constant() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let x = g.constant(t(&[1, 1, 3, 4], data.clone()));
        let w = g.constant(t(&[1, 1, 1, 1], vec![1.0]));
        let b = g.constant(t(&[1], vec![0.0]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);

        let x = g.constant(Tensor::full(&[1, 1, 4, 4], 2.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[0], 8.0);
        assert_eq!(out[5], 18.0);
        assert_eq!(out[15], 8.0);
        assert_eq!(out[1], 12.0);
    }

    #[test]
    fn conv_output_extent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 7, 6]));
        let w = g.constant(Tensor::zeros(&[5, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 5, 4, 3]);
        let bad = g.constant(Tensor::zeros(&[5, 2, 3, 3]));
        match g.conv2d(x, bad, None, 1, 1) {
            Err(AutodiffError::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3, 7, 6]);
                assert_eq!(right, vec![5, 2, 3, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let w5 = g.constant(Tensor::zeros(&[1, 3, 5, 5]));
        assert!(g.conv2d(x, w5, None, 1, 2).is_err());
    }

    #[test]
    fn depthwise_fixtures() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..32).map(|v| v as f32 * 0.5).collect();
        let x = g.constant(t(&[1, 2, 4, 4], data.clone()));
        let mut k = vec![0.0; 18];
        k[4] = 1.0;
        k[13] = 1.0;
        let w = g.constant(t(&[2, 1, 3, 3], k));
        let y = g.depthwise_conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);

        let x = g.constant(Tensor::full(&[1, 2, 4, 4], 3.0));
        let w = g.constant(Tensor::full(&[2, 1, 3, 3], 1.0));
        let y = g.depthwise_conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data()[5], 27.0);
        assert_eq!(g.value(y).data()[16], 12.0);
    }

    #[test]
    fn group_norm_constant_input_yields_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4, 2, 2], 7.5));
        let gamma = g.constant(Tensor::full(&[4], 3.0));
        let beta = g.constant(t(&[4], vec![0.1, 0.2, 0.3, 0.4]));
        let y = g.group_norm(x, gamma, beta, 2, 1e-5).unwrap();
        for (i, v) in g.value(y).data().iter().enumerate() {
            assert!((v - [0.1, 0.2, 0.3, 0.4][i / 4]).abs() < 1e-6);
        }
        assert!(g.group_norm(x, gamma, beta, 3, 1e-5).is_err());
    }

    #[test]
    fn pooling_fixtures() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], vec![1., 2., 3., 4.]));
        let m = g.max_pool2(x).unwrap();
        let a = g.global_avg_pool(x).unwrap();
        let gm = g.global_max_pool(x).unwrap();
        assert_eq!(g.value(m).data(), &[4.0]);
        assert_eq!(g.value(a).data(), &[2.5]);
        assert_eq!(g.value(gm).data(), &[4.0]);
        assert_eq!(g.value(a).shape(), &[1, 1]);

        let c = g.constant(Tensor::full(&[1, 2, 4, 4], -0.5));
        let m = g.max_pool2(c).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == -0.5));
        let a = g.global_avg_pool(c).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == -0.5));
    }

    #[test]
    fn upsample_replicates() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], vec![1., 2., 3., 4.]));
        let y = g.upsample_nearest2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
        assert_eq!(
            g.value(y).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], vec![-1.0, 2.0, 0.0]));
        let r = g.leaky_relu(x, 0.1).unwrap();
        assert_eq!(g.value(r).data(), &[-0.1, 2.0, 0.0]);
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[2], 0.5);
    }

    #[test]
    fn linear_fixtures() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], vec![1.0, 2.0]));
        let eye = g.constant(t(&[2, 2], vec![1., 0., 0., 1.]));
        let y = g.linear(x, eye, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        // [[1,2],[3,4],[5,6]] . [1,2] = [5, 11, 17]
        let w = g.constant(t(&[3, 2], vec![1., 2., 3., 4., 5., 6.]));
        let b = g.constant(t(&[3], vec![0.5, 0.0, -1.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[5.5, 11.0, 16.0]);
    }

    #[test]
    fn broadcast_forms_only() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, 2, 2], 2.0));
        let cg = g.constant(t(&[1, 2, 1, 1], vec![0.5, 0.25]));
        let sg = g.constant(t(&[1, 1, 2, 2], vec![1., 0., 0.5, 2.]));
        let a = g.mul_broadcast(x, cg).unwrap();
        assert_eq!(g.value(a).data(), &[1., 1., 1., 1., 0.5, 0.5, 0.5, 0.5]);
        let b = g.mul_broadcast(x, sg).unwrap();
        assert_eq!(g.value(b).data(), &[2., 0., 1., 4., 2., 0., 1., 4.]);
        let bad = g.constant(Tensor::zeros(&[1, 2, 2, 1]));
        assert!(g.mul_broadcast(x, bad).is_err());
        let other = g.constant(Tensor::zeros(&[1, 2, 2, 1]));
        assert!(g.add(x, other).is_err());
    }

    #[test]
    fn concat_and_channel_reductions() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 1, 1, 2], vec![1., 5.]));
        let b = g.constant(t(&[1, 2, 1, 2], vec![3., 2., 4., -1.]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 3, 1, 2]);
        assert_eq!(g.value(c).data(), &[1., 5., 3., 2., 4., -1.]);
        let m = g.channel_mean(c).unwrap();
        assert_eq!(g.value(m).data(), &[8.0 / 3.0, 2.0]);
        let mx = g.channel_max(c).unwrap();
        assert_eq!(g.value(mx).data(), &[4.0, 5.0]);
        let k = g.constant(Tensor::full(&[1, 3, 2, 2], 1.25));
        let (km, kx) = (g.channel_mean(k).unwrap(), g.channel_max(k).unwrap());
        assert_eq!(g.value(km).data(), g.value(kx).data());
    }

    #[test]
    fn nonfinite_trips_fault() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1], vec![f32::MAX]));
        let w = g.constant(t(&[1, 1], vec![4.0]));
        assert_eq!(
            g.linear(x, w, None).unwrap_err(),
            AutodiffError::NumericFault { op: "linear" }
        );
    }

    #[test]
    fn backward_accumulates_shared_inputs() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], vec![1.0, -2.0]).with_requires_grad(true));
        let y = g.add(x, x).unwrap();
        g.backward(&[(y, &[1.0, 3.0])]).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 6.0]);
        assert!(g.grad(y).is_some());
    }
}
