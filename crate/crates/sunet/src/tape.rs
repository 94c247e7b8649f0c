//! Reverse-mode autodiff on a Wengert tape.
//!
//! Every forward operation records its parents and a backward rule. Backward
//! replays the tape in reverse, accumulating gradients for every node that
//! requires them. One tape covers one forward pass; parameters enter as leaves.

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

/// Per-side zero padding applied before a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn none() -> Self {
        Padding { top: 0, bottom: 0, left: 0, right: 0 }
    }

    /// "Same" padding for the 2x2 kernels used throughout the network:
    /// pad bottom/right by one so stride-1 output size equals input size.
    pub fn same_2x2() -> Self {
        Padding { top: 0, bottom: 1, left: 0, right: 1 }
    }
}

/// Backward rule: (grad_out, parent values, node value) -> gradient per parent.
type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.nodes.push(Node { value, parents: vec![], requires_grad, backward: None });
        VarId(self.nodes.len() - 1)
    }

    pub(crate) fn record(
        &mut self,
        value: Tensor,
        parents: Vec<VarId>,
        backward: BackwardFn,
    ) -> VarId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.into_iter().map(|p| p.0).collect(),
            requires_grad,
            backward: Some(backward),
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call with respect to `id`, if any.
    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Seed d(loss)/d(loss) = 1 and accumulate gradients in reverse
    /// topological order. `loss` must be scalar.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        let loss_val = self.value(loss);
        if !loss_val.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_val.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(grad_out) = self.grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(backward) = &node.backward {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parent_grads = backward(&grad_out, &parent_vals, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, g) in node.parents.clone().into_iter().zip(parent_grads) {
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match &mut self.grads[p] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(g),
                    }
                }
            }
            self.grads[i] = Some(grad_out);
        }
        Ok(())
    }

    // ── elementwise and reductions ──────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(value, vec![a, b], Box::new(|go, _, _| vec![go.clone(), go.clone()])))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(
            value,
            vec![a, b],
            Box::new(|go, pv, _| {
                let ga = pv[1].data().iter().zip(go.data()).map(|(y, g)| y * g).collect();
                let gb = pv[0].data().iter().zip(go.data()).map(|(x, g)| x * g).collect();
                vec![
                    Tensor::new(pv[0].shape().to_vec(), ga).unwrap(),
                    Tensor::new(pv[1].shape().to_vec(), gb).unwrap(),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let value = self.value(x).map(|v| c * v);
        self.record(value, vec![x], Box::new(move |go, _, _| vec![go.map(|g| c * g)]))
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.record(
            value,
            vec![x],
            Box::new(|go, pv, _| {
                let g = go.data()[0];
                vec![Tensor::full(pv[0].shape(), g)]
            }),
        )
    }

    pub fn sum_squares(&mut self, x: VarId) -> VarId {
        let value = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum());
        self.record(
            value,
            vec![x],
            Box::new(|go, pv, _| {
                let g = go.data()[0];
                vec![pv[0].map(|v| 2.0 * v * g)]
            }),
        )
    }

    // ── structural ops ──────────────────────────────────────────────

    /// Channels of `a` precede channels of `b`; batch and spatial extents must match.
    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                detail: format!(
                    "batch/spatial extents differ: {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(ba * (ca + cb) * plane);
        for bi in 0..ba {
            data.extend_from_slice(&self.value(a).data()[bi * ca * plane..(bi + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data()[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], data)?;
        Ok(self.record(
            value,
            vec![a, b],
            Box::new(move |go, _, _| {
                let mut ga = Vec::with_capacity(ba * ca * plane);
                let mut gb = Vec::with_capacity(ba * cb * plane);
                for bi in 0..ba {
                    let base = bi * (ca + cb) * plane;
                    ga.extend_from_slice(&go.data()[base..base + ca * plane]);
                    gb.extend_from_slice(&go.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                vec![
                    Tensor::new(vec![ba, ca, ha, wa], ga).unwrap(),
                    Tensor::new(vec![ba, cb, ha, wa], gb).unwrap(),
                ]
            }),
        ))
    }

    pub fn slice_channels(&mut self, x: VarId, from: usize, to: usize) -> Result<VarId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if from >= to || to > c {
            return Err(TensorError::Invalid(format!(
                "slice_channels range {}..{} out of {} channels",
                from, to, c
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * (to - from) * plane);
        for bi in 0..b {
            let base = (bi * c + from) * plane;
            data.extend_from_slice(&self.value(x).data()[base..base + (to - from) * plane]);
        }
        let value = Tensor::new(vec![b, to - from, h, w], data)?;
        Ok(self.record(
            value,
            vec![x],
            Box::new(move |go, _, _| {
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                for bi in 0..b {
                    let base = (bi * c + from) * plane;
                    let src = &go.data()[bi * (to - from) * plane..(bi + 1) * (to - from) * plane];
                    gx.data_mut()[base..base + (to - from) * plane].copy_from_slice(src);
                }
                vec![gx]
            }),
        ))
    }

    /// Zero-pad bottom/right rows and columns (decoder-to-skip alignment).
    pub fn pad_bottom_right(&mut self, x: VarId, pad_h: usize, pad_w: usize) -> Result<VarId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h + pad_h, w + pad_w);
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        for bc in 0..b * c {
            for i in 0..h {
                let src = &self.value(x).data()[(bc * h + i) * w..(bc * h + i + 1) * w];
                out.data_mut()[(bc * ho + i) * wo..(bc * ho + i) * wo + w].copy_from_slice(src);
            }
        }
        Ok(self.record(
            out,
            vec![x],
            Box::new(move |go, _, _| {
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                for bc in 0..b * c {
                    for i in 0..h {
                        let src = &go.data()[(bc * ho + i) * wo..(bc * ho + i) * wo + w];
                        gx.data_mut()[(bc * h + i) * w..(bc * h + i + 1) * w].copy_from_slice(src);
                    }
                }
                vec![gx]
            }),
        ))
    }

    // ── convolution family ──────────────────────────────────────────

    /// Stride-1 cross-correlation. `kernel` is [C_out, C_in, kh, kw],
    /// `bias` is [C_out]. Output H' = H + pad_top + pad_bottom - kh + 1.
    pub fn conv2d(
        &mut self,
        input: VarId,
        kernel: VarId,
        bias: VarId,
        padding: Padding,
    ) -> Result<VarId> {
        let (b, c_in, h, w) = self.value(input).dims4()?;
        let kshape = self.value(kernel).shape().to_vec();
        let [c_out, kc_in, kh, kw] = kshape.as_slice() else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel must be 4-D, got {:?}", kshape),
            });
        };
        let (c_out, kc_in, kh, kw) = (*c_out, *kc_in, *kh, *kw);
        if kc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel expects {} input channels, input has {}", kc_in, c_in),
            });
        }
        if self.value(bias).shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "bias shape {:?} does not match {} output channels",
                    self.value(bias).shape(),
                    c_out
                ),
            });
        }
        let (hp, wp) = (h + padding.top + padding.bottom, w + padding.left + padding.right);
        if kh > hp || kw > wp {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "kernel {}x{} exceeds padded input {}x{}",
                    kh, kw, hp, wp
                ),
            });
        }
        let (ho, wo) = (hp - kh + 1, wp - kw + 1);

        let padded = pad4(self.value(input), padding);
        let mut out = Tensor::zeros(&[b, c_out, ho, wo]);
        conv2d_forward(&padded, self.value(kernel), self.value(bias), &mut out);

        Ok(self.record(
            out,
            vec![input, kernel, bias],
            Box::new(move |go, pv, _| {
                let padded = pad4(pv[0], padding);
                let (gin, gk, gb) = conv2d_backward(go, &padded, pv[1], padding);
                vec![gin, gk, gb]
            }),
        ))
    }

    /// Transposed convolution: each input pixel scatters kernel*value into a
    /// strided output grid. `kernel` is [C_in, C_out, kh, kw]; output spatial
    /// extent is stride*(H-1) + kh.
    pub fn conv2d_transpose(&mut self, input: VarId, kernel: VarId, stride: usize) -> Result<VarId> {
        if stride < 1 {
            return Err(TensorError::Invalid("conv2d_transpose stride must be >= 1".into()));
        }
        let (b, c_in, h, w) = self.value(input).dims4()?;
        let kshape = self.value(kernel).shape().to_vec();
        let [kc_in, c_out, kh, kw] = kshape.as_slice() else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                detail: format!("kernel must be 4-D, got {:?}", kshape),
            });
        };
        let (kc_in, c_out, kh, kw) = (*kc_in, *c_out, *kh, *kw);
        if kc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                detail: format!("kernel expects {} input channels, input has {}", kc_in, c_in),
            });
        }
        let (ho, wo) = (stride * (h - 1) + kh, stride * (w - 1) + kw);
        let mut out = Tensor::zeros(&[b, c_out, ho, wo]);
        deconv_forward(self.value(input), self.value(kernel), stride, &mut out);

        Ok(self.record(
            out,
            vec![input, kernel],
            Box::new(move |go, pv, _| {
                let (gin, gk) = deconv_backward(go, pv[0], pv[1], stride);
                vec![gin, gk]
            }),
        ))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Ties break toward the first position in row-major order.
    pub fn max_pool2(&mut self, input: VarId) -> Result<VarId> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if h < 2 || w < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "max_pool2",
                detail: format!("spatial extent {}x{} is below the 2x2 window", h, w),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        let mut argmax = vec![0usize; b * c * ho * wo];
        let x = self.value(input).data();
        for bc in 0..b * c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best_idx = (bc * h + 2 * i) * w + 2 * j;
                    let mut best = x[best_idx];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (bc * h + 2 * i + di) * w + 2 * j + dj;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    let o = (bc * ho + i) * wo + j;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let in_shape = [b, c, h, w];
        Ok(self.record(
            out,
            vec![input],
            Box::new(move |go, _, _| {
                let mut gx = Tensor::zeros(&in_shape);
                for (o, &idx) in argmax.iter().enumerate() {
                    gx.data_mut()[idx] += go.data()[o];
                }
                vec![gx]
            }),
        ))
    }

    /// Softmax over the channel axis, per pixel.
    pub fn softmax_channels(&mut self, x: VarId) -> Result<VarId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let mut out = Tensor::zeros(&[b, c, h, w]);
        let xd = self.value(x).data();
        for bi in 0..b {
            for p in 0..plane {
                let mut m = f64::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(xd[(bi * c + ci) * plane + p]);
                }
                let mut z = 0.0;
                for ci in 0..c {
                    let e = (xd[(bi * c + ci) * plane + p] - m).exp();
                    out.data_mut()[(bi * c + ci) * plane + p] = e;
                    z += e;
                }
                for ci in 0..c {
                    out.data_mut()[(bi * c + ci) * plane + p] /= z;
                }
            }
        }
        Ok(self.record(
            out,
            vec![x],
            Box::new(move |go, _, y| {
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                for bi in 0..b {
                    for p in 0..plane {
                        let mut dot = 0.0;
                        for ci in 0..c {
                            let idx = (bi * c + ci) * plane + p;
                            dot += go.data()[idx] * y.data()[idx];
                        }
                        for ci in 0..c {
                            let idx = (bi * c + ci) * plane + p;
                            gx.data_mut()[idx] = y.data()[idx] * (go.data()[idx] - dot);
                        }
                    }
                }
                vec![gx]
            }),
        ))
    }
}

// ── convolution kernels ─────────────────────────────────────────────

fn pad4(x: &Tensor, p: Padding) -> Tensor {
    if p == Padding::none() {
        return x.clone();
    }
    let (b, c, h, w) = x.dims4().expect("pad4 requires 4-D input");
    let (hp, wp) = (h + p.top + p.bottom, w + p.left + p.right);
    let mut out = Tensor::zeros(&[b, c, hp, wp]);
    for bc in 0..b * c {
        for i in 0..h {
            let src = &x.data()[(bc * h + i) * w..(bc * h + i + 1) * w];
            let dst_base = (bc * hp + i + p.top) * wp + p.left;
            out.data_mut()[dst_base..dst_base + w].copy_from_slice(src);
        }
    }
    out
}

fn crop4(x: &Tensor, p: Padding) -> Tensor {
    if p == Padding::none() {
        return x.clone();
    }
    let (b, c, hp, wp) = x.dims4().expect("crop4 requires 4-D input");
    let (h, w) = (hp - p.top - p.bottom, wp - p.left - p.right);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bc in 0..b * c {
        for i in 0..h {
            let src_base = (bc * hp + i + p.top) * wp + p.left;
            let src = &x.data()[src_base..src_base + w];
            out.data_mut()[(bc * h + i) * w..(bc * h + i + 1) * w].copy_from_slice(src);
        }
    }
    out
}

fn conv2d_forward(padded: &Tensor, kernel: &Tensor, bias: &Tensor, out: &mut Tensor) {
    let (b, c_in, hp, wp) = padded.dims4().unwrap();
    let (_, c_out, ho, wo) = out.dims4().unwrap();
    let ks = kernel.shape();
    let (kh, kw) = (ks[2], ks[3]);
    let x = padded.data();
    let k = kernel.data();
    let o = out.data_mut();
    for bi in 0..b {
        for co in 0..c_out {
            let obase = (bi * c_out + co) * ho * wo;
            o[obase..obase + ho * wo].fill(bias.data()[co]);
            for ci in 0..c_in {
                let xbase = (bi * c_in + ci) * hp * wp;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wgt = k[((co * c_in + ci) * kh + ki) * kw + kj];
                        for i in 0..ho {
                            let xrow = &x[xbase + (i + ki) * wp + kj..][..wo];
                            let orow = &mut o[obase + i * wo..][..wo];
                            for j in 0..wo {
                                orow[j] += wgt * xrow[j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward(
    go: &Tensor,
    padded: &Tensor,
    kernel: &Tensor,
    padding: Padding,
) -> (Tensor, Tensor, Tensor) {
    let (b, c_in, hp, wp) = padded.dims4().unwrap();
    let (_, c_out, ho, wo) = go.dims4().unwrap();
    let ks = kernel.shape();
    let (kh, kw) = (ks[2], ks[3]);
    let g = go.data();
    let x = padded.data();
    let k = kernel.data();

    let mut gbias = Tensor::zeros(&[c_out]);
    for bi in 0..b {
        for co in 0..c_out {
            let base = (bi * c_out + co) * ho * wo;
            gbias.data_mut()[co] += g[base..base + ho * wo].iter().sum::<f64>();
        }
    }

    let mut gkernel = Tensor::zeros(kernel.shape());
    let mut gpadded = Tensor::zeros(&[b, c_in, hp, wp]);
    {
        let gk = gkernel.data_mut();
        let gx = gpadded.data_mut();
        for bi in 0..b {
            for co in 0..c_out {
                let gbase = (bi * c_out + co) * ho * wo;
                for ci in 0..c_in {
                    let xbase = (bi * c_in + ci) * hp * wp;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let kidx = ((co * c_in + ci) * kh + ki) * kw + kj;
                            let wgt = k[kidx];
                            let mut acc = 0.0;
                            for i in 0..ho {
                                let grow = &g[gbase + i * wo..][..wo];
                                let xrow = &x[xbase + (i + ki) * wp + kj..][..wo];
                                let gxrow = &mut gx[xbase + (i + ki) * wp + kj..][..wo];
                                for j in 0..wo {
                                    acc += grow[j] * xrow[j];
                                    gxrow[j] += wgt * grow[j];
                                }
                            }
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (crop4(&gpadded, padding), gkernel, gbias)
}

fn deconv_forward(input: &Tensor, kernel: &Tensor, stride: usize, out: &mut Tensor) {
    let (b, c_in, h, w) = input.dims4().unwrap();
    let (_, c_out, ho, wo) = out.dims4().unwrap();
    let ks = kernel.shape();
    let (kh, kw) = (ks[2], ks[3]);
    let x = input.data();
    let k = kernel.data();
    let o = out.data_mut();
    for bi in 0..b {
        for ci in 0..c_in {
            let xbase = (bi * c_in + ci) * h * w;
            for co in 0..c_out {
                let obase = (bi * c_out + co) * ho * wo;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wgt = k[((ci * c_out + co) * kh + ki) * kw + kj];
                        for i in 0..h {
                            let xrow = &x[xbase + i * w..][..w];
                            let orow = &mut o[obase + (i * stride + ki) * wo + kj..];
                            for j in 0..w {
                                orow[j * stride] += wgt * xrow[j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn deconv_backward(go: &Tensor, input: &Tensor, kernel: &Tensor, stride: usize) -> (Tensor, Tensor) {
    let (b, c_in, h, w) = input.dims4().unwrap();
    let (_, c_out, ho, wo) = go.dims4().unwrap();
    let ks = kernel.shape();
    let (kh, kw) = (ks[2], ks[3]);
    let x = input.data();
    let k = kernel.data();
    let g = go.data();

    let mut gin = Tensor::zeros(&[b, c_in, h, w]);
    let mut gkernel = Tensor::zeros(kernel.shape());
    {
        let gi = gin.data_mut();
        let gk = gkernel.data_mut();
        for bi in 0..b {
            for ci in 0..c_in {
                let xbase = (bi * c_in + ci) * h * w;
                for co in 0..c_out {
                    let gbase = (bi * c_out + co) * ho * wo;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let kidx = ((ci * c_out + co) * kh + ki) * kw + kj;
                            let wgt = k[kidx];
                            let mut acc = 0.0;
                            for i in 0..h {
                                let grow = &g[gbase + (i * stride + ki) * wo + kj..];
                                let xrow = &x[xbase + i * w..][..w];
                                let girow = &mut gi[xbase + i * w..][..w];
                                for j in 0..w {
                                    let gv = grow[j * stride];
                                    acc += gv * xrow[j];
                                    girow[j] += wgt * gv;
                                }
                            }
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gin, gkernel)
}

// ── numerical gradient check ────────────────────────────────────────

/// Compare the tape gradient of a scalar function against central finite
/// differences. Returns the maximum relative error over all elements of `x`.
///
/// The relative error is |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xid = tape.leaf(t.clone(), false);
        let out = f(&mut tape, xid)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xid)?;
    let f0 = tape.value(out).item()?;
    if !f0.is_finite() {
        return Err(TensorError::NonFinite("grad_check: f(x)"));
    }
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad(xid) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.len()],
    };

    let mut max_err: f64 = 0.0;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = eval(&xp)?;
        xp.data_mut()[i] = orig - h;
        let fm = eval(&xp)?;
        xp.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv2d_sums_window() {
        // input [[1,2],[3,4]], all-ones 2x2 kernel, no padding -> [[10]]
        let mut tape = Tape::new();
        let x = tape.leaf(t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), false);
        let k = tape.leaf(t4([1, 1, 2, 2], vec![1.0; 4]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv2d(x, k, b, Padding::none()).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4([1, 1, 2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]), false);
        let k = tape.leaf(t4([1, 1, 1, 1], vec![1.0]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv2d(x, k, b, Padding::none()).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_zero_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4([1, 1, 3, 3], (0..9).map(|v| v as f64).collect()), false);
        let k = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv2d(x, k, b, Padding::none()).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_same_padding_keeps_size() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 5, 7]), false);
        let k = tape.leaf(Tensor::zeros(&[3, 1, 2, 2]), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        let y = tape.conv2d(x, k, b, Padding::same_2x2()).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 5, 7]);
    }

    #[test]
    fn conv2d_shape_error_names_dimension() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let k = tape.leaf(Tensor::zeros(&[1, 3, 2, 2]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let err = tape.conv2d(x, k, b, Padding::none()).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn conv2d_is_linear_in_input() {
        let mut tape = Tape::new();
        let xa = t4([1, 2, 3, 3], (0..18).map(|v| v as f64 * 0.3 - 2.0).collect());
        let xb = t4([1, 2, 3, 3], (0..18).map(|v| (v as f64).sin()).collect());
        let xs = Tensor::new(
            xa.shape().to_vec(),
            xa.data().iter().zip(xb.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let k = tape.leaf(t4([2, 2, 2, 2], (0..16).map(|v| v as f64 * 0.1 - 0.7).collect()), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let ya = tape.leaf(xa, false);
        let yb = tape.leaf(xb, false);
        let ys = tape.leaf(xs, false);
        let oa = tape.conv2d(ya, k, b, Padding::same_2x2()).unwrap();
        let ob = tape.conv2d(yb, k, b, Padding::same_2x2()).unwrap();
        let os = tape.conv2d(ys, k, b, Padding::same_2x2()).unwrap();
        for i in 0..tape.value(os).len() {
            let lhs = tape.value(os).data()[i];
            let rhs = tape.value(oa).data()[i] + tape.value(ob).data()[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn deconv_single_pixel_scatter() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4([1, 1, 1, 1], vec![3.0]), false);
        let k = tape.leaf(t4([1, 1, 2, 2], vec![1.0; 4]), false);
        let y = tape.conv2d_transpose(x, k, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[3.0; 4]);
    }

    #[test]
    fn deconv_zero_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]), false);
        let k = tape.leaf(t4([1, 1, 2, 2], vec![1.0; 4]), false);
        let y = tape.conv2d_transpose(x, k, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deconv_stride2_rows() {
        // 2x1 input [a, b] scatters into 4x2 rows [a,a],[a,a],[b,b],[b,b]
        let mut tape = Tape::new();
        let (a, b) = (2.0, -5.0);
        let x = tape.leaf(t4([1, 1, 2, 1], vec![a, b]), false);
        let k = tape.leaf(t4([1, 1, 2, 2], vec![1.0; 4]), false);
        let y = tape.conv2d_transpose(x, k, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 4, 2]);
        assert_eq!(tape.value(y).data(), &[a, a, a, a, b, b, b, b]);
    }

    #[test]
    fn deconv_zero_stride_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
        let k = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
        assert!(tape.conv2d_transpose(x, k, 0).is_err());
    }

    #[test]
    fn max_pool_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), false);
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.leaf(Tensor::full(&[1, 1, 4, 4], 7.0), false);
        let yc = tape.max_pool2(c).unwrap();
        assert!(tape.value(yc).data().iter().all(|&v| v == 7.0));

        // floor semantics: 3x3 -> 1x1
        let o = tape.leaf(t4([1, 1, 3, 3], (0..9).map(|v| v as f64).collect()), false);
        let yo = tape.max_pool2(o).unwrap();
        assert_eq!(tape.value(yo).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(yo).data(), &[4.0]);

        let tiny = tape.leaf(t4([1, 1, 1, 2], vec![0.0, 0.0]), false);
        assert!(tape.max_pool2(tiny).is_err());
    }

    #[test]
    fn max_pool_backward_routes_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4([1, 1, 2, 2], vec![1.0, 9.0, 3.0, 4.0]), true);
        let y = tape.max_pool2(x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_gradient_scatter_conserves_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            t4([2, 3, 4, 6], (0..144).map(|v| ((v * 37) % 101) as f64 * 0.1).collect()),
            true,
        );
        let y = tape.max_pool2(x).unwrap();
        let n_out = tape.value(y).len();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let routed: f64 = tape.grad(x).unwrap().data().iter().sum();
        assert!((routed - n_out as f64).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.leaf(t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), false);
        let z = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
        let c = tape.concat_channels(a, z).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 2, 2, 2]);
        let back = tape.slice_channels(c, 0, 1).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(a).data());
    }

    #[test]
    fn concat_shape_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 64, 13, 16]), false);
        let b = tape.leaf(Tensor::zeros(&[1, 64, 13, 16]), false);
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 128, 13, 16]);
    }

    #[test]
    fn concat_spatial_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
        let b = tape.leaf(Tensor::zeros(&[1, 1, 3, 2]), false);
        assert!(tape.concat_channels(a, b).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![5.0, -2.0, 0.0]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let s = tape.sum_squares(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_constant_has_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let c = tape.leaf(Tensor::scalar(7.0), false);
        let s = tape.scale(c, 1.0);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        let y = tape.scale(x, 2.0);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn softmax_normalizes() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4([1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 8.0]), false);
        let y = tape.softmax_channels(x).unwrap();
        let d = tape.value(y).data();
        for p in 0..4 {
            let s = d[p] + d[4 + p];
            assert!((s - 1.0).abs() < 1e-12);
            assert!(d[p] >= 0.0 && d[p] <= 1.0);
        }
    }

    #[test]
    fn grad_check_quadratic() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = grad_check(|t, v| Ok(t.sum_squares(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn grad_check_linear_is_near_exact() {
        let x = Tensor::new(vec![3], vec![1.0, -4.0, 2.5]).unwrap();
        let err = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn grad_check_conv_ops() {
        let x = t4([1, 2, 4, 5], (0..40).map(|v| (v as f64 * 0.7).sin()).collect());
        let err = grad_check(
            |t, v| {
                let k = t.leaf(
                    t4([3, 2, 2, 2], (0..24).map(|v| (v as f64 * 0.3).cos() * 0.5).collect()),
                    false,
                );
                let b = t.leaf(Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap(), false);
                let y = t.conv2d(v, k, b, Padding::same_2x2())?;
                let y2 = t.sum_squares(y);
                Ok(y2)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "conv2d input grad error {err}");

        // kernel gradient
        let k0 = t4([2, 2, 2, 2], (0..16).map(|v| (v as f64 * 0.21).sin()).collect());
        let err = grad_check(
            |t, v| {
                let x = t.leaf(
                    t4([2, 2, 3, 3], (0..36).map(|v| (v as f64 * 0.13).cos()).collect()),
                    false,
                );
                let b = t.leaf(Tensor::zeros(&[2]), false);
                let y = t.conv2d(x, v, b, Padding::none())?;
                Ok(t.sum_squares(y))
            },
            &k0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "conv2d kernel grad error {err}");

        // transposed convolution, both arguments
        let x0 = t4([1, 2, 3, 3], (0..18).map(|v| (v as f64 * 0.4).sin()).collect());
        let err = grad_check(
            |t, v| {
                let k = t.leaf(
                    t4([2, 2, 2, 2], (0..16).map(|v| (v as f64 * 0.17).cos() * 0.4).collect()),
                    false,
                );
                let y = t.conv2d_transpose(v, k, 2)?;
                Ok(t.sum_squares(y))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "deconv input grad error {err}");
    }

    #[test]
    fn determinism_two_identical_passes() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(
                t4([1, 2, 4, 4], (0..32).map(|v| (v as f64 * 0.37).sin()).collect()),
                true,
            );
            let k = tape.leaf(
                t4([2, 2, 2, 2], (0..16).map(|v| (v as f64 * 0.11).cos()).collect()),
                true,
            );
            let b = tape.leaf(Tensor::zeros(&[2]), true);
            let y = tape.conv2d(x, k, b, Padding::same_2x2()).unwrap();
            let p = tape.max_pool2(y).unwrap();
            let s = tape.sum_squares(p);
            tape.backward(s).unwrap();
            (
                tape.grad(x).unwrap().data().to_vec(),
                tape.grad(k).unwrap().data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
