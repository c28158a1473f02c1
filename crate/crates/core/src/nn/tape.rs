//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A `Tape` records every operation of one forward pass; `backward` walks
//! the record in reverse and accumulates gradients. Ops are an enum rather
//! than closures so the backward pass can borrow values and gradients
//! without aliasing trouble. Convolution uses im2col + GEMM; the column
//! matrix is recomputed in backward instead of stored, trading a little
//! compute for a much smaller live tape.
//!
//! Shapes follow the channels-first convention: feature maps are
//! `[C, H, W]`, vectors `[C]`, scalars 0-dimensional.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    pub fn unit() -> Self {
        Conv2dSpec { stride: 1, pad: 0, dilation: 1 }
    }
    pub fn same_3x3() -> Self {
        Conv2dSpec { stride: 1, pad: 1, dilation: 1 }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId, f64),
    PowConst(TensorId, f64),
    Ln(TensorId),
    Sqrt(TensorId),
    Sigmoid(TensorId),
    Relu(TensorId),
    Clamp(TensorId, f64, f64),
    MaxT(TensorId, TensorId),
    MinT(TensorId, TensorId),
    Sum(TensorId),
    Mean(TensorId),
    Reshape(TensorId),
    Concat { inputs: Vec<TensorId>, axis: usize },
    Linear { x: TensorId, w: TensorId, b: TensorId },
    Conv2d { x: TensorId, w: TensorId, b: Option<TensorId>, spec: Conv2dSpec },
    MaxPool2d { x: TensorId, k: usize, stride: usize, pad: usize, argmax: Vec<usize> },
    GlobalAvgPool(TensorId),
    AdaptiveAvgPool { x: TensorId, bins: (usize, usize) },
    UpsampleBilinear { x: TensorId, out: (usize, usize) },
    FocalLoss { pred: TensorId, target: ArrayD<f64>, alpha: f64, gamma: f64 },
    SmoothL1 { pred: TensorId, target: ArrayD<f64>, beta: f64 },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }
    pub fn take(&mut self, id: TensorId) -> Option<ArrayD<f64>> {
        self.grads[id.0].take()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let av = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let bv = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if av != bv && av != 1 && bv != 1 {
            return Err(Error::shape(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
        out[i] = av.max(bv);
    }
    Ok(out)
}

/// Sum a gradient of broadcast shape back down to `shape`.
fn reduce_to(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[i] > 1 {
            let summed = g.sum_axis(Axis(i));
            g = summed.insert_axis(Axis(i));
        }
    }
    g
}

fn conv_out_len(input: usize, k: usize, spec: &Conv2dSpec) -> usize {
    (input + 2 * spec.pad - spec.dilation * (k - 1) - 1) / spec.stride + 1
}

/// Gather input patches into a `[Cin*kh*kw, oh*ow]` column matrix.
fn im2col(x: &ArrayD<f64>, kh: usize, kw: usize, spec: &Conv2dSpec) -> Array2<f64> {
    let xv = x.view().into_dimensionality::<Ix3>().unwrap();
    let (cin, h, w) = xv.dim();
    let oh = conv_out_len(h, kh, spec);
    let ow = conv_out_len(w, kw, spec);
    let mut cols = Array2::zeros((cin * kh * kw, oh * ow));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = c * kh * kw + ki * kw + kj;
                let mut out_row = cols.row_mut(row);
                for oy in 0..oh {
                    let sy = (oy * spec.stride + ki * spec.dilation) as isize - spec.pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let sx = (ox * spec.stride + kj * spec.dilation) as isize - spec.pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out_row[oy * ow + ox] = xv[[c, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column-matrix gradient back to input layout.
fn col2im(
    dcols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
) -> ArrayD<f64> {
    let oh = conv_out_len(h, kh, spec);
    let ow = conv_out_len(w, kw, spec);
    let mut dx = ArrayD::zeros(IxDyn(&[cin, h, w]));
    {
        let mut dxv = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = c * kh * kw + ki * kw + kj;
                    let drow = dcols.row(row);
                    for oy in 0..oh {
                        let sy = (oy * spec.stride + ki * spec.dilation) as isize - spec.pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let sx = (ox * spec.stride + kj * spec.dilation) as isize - spec.pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dxv[[c, sy as usize, sx as usize]] += drow[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Bilinear interpolation stencil (half-pixel convention) for one output
/// coordinate: returns ((i0, w0), (i1, w1)).
fn bilinear_taps(out_i: usize, out_len: usize, in_len: usize) -> ((usize, f64), (usize, f64)) {
    let scale = in_len as f64 / out_len as f64;
    let src = (out_i as f64 + 0.5) * scale - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    let f = src - i0 as f64;
    ((i0, 1.0 - f), (i1, f))
}

/// PyTorch-style adaptive pooling bin edges.
fn adaptive_bins(in_len: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|i| {
            let start = i * in_len / bins;
            let end = ((i + 1) * in_len).div_ceil(bins);
            (start, end)
        })
        .collect()
}

const FOCAL_EPS: f64 = 1e-7;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (input data or a constant).
    pub fn constant(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().unwrap()
    }

    fn binary_broadcast(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let shape = broadcast_shape(self.value(a).shape(), self.value(b).shape())?;
        let av = self.value(a).broadcast(IxDyn(&shape)).ok_or_else(|| {
            Error::shape(format!("broadcast failed for shape {:?}", self.value(a).shape()))
        })?;
        let bv = self.value(b).broadcast(IxDyn(&shape)).ok_or_else(|| {
            Error::shape(format!("broadcast failed for shape {:?}", self.value(b).shape()))
        })?;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        ndarray::Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn max_t(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, f64::max, Op::MaxT(a, b))
    }

    pub fn min_t(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, f64::min, Op::MinT(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a) * c;
        let needs = self.needs(a);
        self.push(v, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a) + c;
        let needs = self.needs(a);
        self.push(v, Op::AddScalar(a, c), needs)
    }

    pub fn pow_const(&mut self, a: TensorId, p: f64) -> TensorId {
        let v = self.value(a).mapv(|x| x.powf(p));
        let needs = self.needs(a);
        self.push(v, Op::PowConst(a, p), needs)
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(f64::ln);
        let needs = self.needs(a);
        self.push(v, Op::Ln(a), needs)
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(f64::sqrt);
        let needs = self.needs(a);
        self.push(v, Op::Sqrt(a), needs)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let needs = self.needs(a);
        self.push(v, Op::Sigmoid(a), needs)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(v, Op::Relu(a), needs)
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let needs = self.needs(a);
        self.push(v, Op::Clamp(a, lo, hi), needs)
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let needs = self.needs(a);
        self.push(v, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).len() as f64;
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum() / n);
        let needs = self.needs(a);
        self.push(v, Op::Mean(a), needs)
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| Error::shape(format!("reshape: {e}")))?;
        let needs = self.needs(a);
        Ok(self.push(v, Op::Reshape(a), needs))
    }

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        let views: Vec<_> = inputs.iter().map(|&id| self.value(id).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| Error::shape(format!("concat: {e}")))?;
        let needs = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            v,
            Op::Concat { inputs: inputs.to_vec(), axis },
            needs,
        ))
    }

    /// `y = W x + b` for a vector `x: [n]`, `W: [m, n]`, `b: [m]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|e| Error::shape(format!("linear x: {e}")))?
            .to_owned();
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::shape(format!("linear w: {e}")))?;
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|e| Error::shape(format!("linear b: {e}")))?;
        if wv.ncols() != xv.len() || wv.nrows() != bv.len() {
            return Err(Error::shape(format!(
                "linear: W {}x{} vs x {} vs b {}",
                wv.nrows(),
                wv.ncols(),
                xv.len(),
                bv.len()
            )));
        }
        let y = wv.dot(&xv) + &bv;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y.into_dyn(), Op::Linear { x, w, b }, needs))
    }

    /// 2D convolution, `x: [Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        spec: Conv2dSpec,
    ) -> Result<TensorId> {
        let (cin, h, w_in) = {
            let xv = self
                .value(x)
                .view()
                .into_dimensionality::<Ix3>()
                .map_err(|e| Error::shape(format!("conv2d x: {e}")))?;
            xv.dim()
        };
        let wshape = self.value(w).shape().to_vec();
        if wshape.len() != 4 || wshape[1] != cin {
            return Err(Error::shape(format!(
                "conv2d: weight {wshape:?} does not match input channels {cin}"
            )));
        }
        let (cout, kh, kw) = (wshape[0], wshape[2], wshape[3]);
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("conv2d: non-finite input".to_string()));
        }
        let oh = conv_out_len(h, kh, &spec);
        let ow = conv_out_len(w_in, kw, &spec);
        let cols = im2col(self.value(x), kh, kw, &spec);
        let w2 = self
            .value(w)
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let mut out2 = w2.dot(&cols);
        if let Some(bid) = b {
            let bv = self.value(bid).view().into_dimensionality::<Ix1>().unwrap();
            for (mut row, bias) in out2.rows_mut().into_iter().zip(bv.iter()) {
                row += *bias;
            }
        }
        let out = out2.into_shape_with_order(IxDyn(&[cout, oh, ow])).unwrap();
        let needs = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, needs))
    }

    pub fn max_pool2d(&mut self, x: TensorId, k: usize, stride: usize, pad: usize) -> Result<TensorId> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::shape(format!("max_pool2d: {e}")))?;
        let (c, h, w) = xv.dim();
        let spec = Conv2dSpec { stride, pad, dilation: 1 };
        let oh = conv_out_len(h, k, &spec);
        let ow = conv_out_len(w, k, &spec);
        let mut out = ArrayD::zeros(IxDyn(&[c, oh, ow]));
        let mut argmax = vec![0usize; c * oh * ow];
        {
            let mut ov = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ki in 0..k {
                            let sy = (oy * stride + ki) as isize - pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let sx = (ox * stride + kj) as isize - pad as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let v = xv[[ch, sy as usize, sx as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = ch * h * w + sy as usize * w + sx as usize;
                                }
                            }
                        }
                        ov[[ch, oy, ox]] = best;
                        argmax[ch * oh * ow + oy * ow + ox] = best_idx;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool2d { x, k, stride, pad, argmax }, needs))
    }

    /// `[C, H, W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::shape(format!("global_avg_pool: {e}")))?;
        let (c, h, w) = xv.dim();
        let mut out = Array1::zeros(c);
        for ch in 0..c {
            out[ch] = xv.index_axis(Axis(0), ch).sum() / (h * w) as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(out.into_dyn(), Op::GlobalAvgPool(x), needs))
    }

    /// Adaptive average pooling to a `(bh, bw)` grid.
    pub fn adaptive_avg_pool(&mut self, x: TensorId, bins: (usize, usize)) -> Result<TensorId> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::shape(format!("adaptive_avg_pool: {e}")))?;
        let (c, h, w) = xv.dim();
        if bins.0 > h || bins.1 > w {
            return Err(Error::config(format!(
                "adaptive_avg_pool: bins {bins:?} exceed spatial dims ({h}, {w})"
            )));
        }
        let ybins = adaptive_bins(h, bins.0);
        let xbins = adaptive_bins(w, bins.1);
        let mut out = ArrayD::zeros(IxDyn(&[c, bins.0, bins.1]));
        {
            let mut ov = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for ch in 0..c {
                for (by, &(ys, ye)) in ybins.iter().enumerate() {
                    for (bx, &(xs, xe)) in xbins.iter().enumerate() {
                        let mut acc = 0.0;
                        for y in ys..ye {
                            for x2 in xs..xe {
                                acc += xv[[ch, y, x2]];
                            }
                        }
                        ov[[ch, by, bx]] = acc / ((ye - ys) * (xe - xs)) as f64;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::AdaptiveAvgPool { x, bins }, needs))
    }

    /// Bilinear upsample/resize to `(out_h, out_w)`, half-pixel convention.
    pub fn upsample_bilinear(&mut self, x: TensorId, out: (usize, usize)) -> Result<TensorId> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::shape(format!("upsample_bilinear: {e}")))?;
        let (c, h, w) = xv.dim();
        let mut o = ArrayD::zeros(IxDyn(&[c, out.0, out.1]));
        {
            let mut ov = o.view_mut().into_dimensionality::<Ix3>().unwrap();
            for oy in 0..out.0 {
                let ((y0, wy0), (y1, wy1)) = bilinear_taps(oy, out.0, h);
                for ox in 0..out.1 {
                    let ((x0, wx0), (x1, wx1)) = bilinear_taps(ox, out.1, w);
                    for ch in 0..c {
                        ov[[ch, oy, ox]] = xv[[ch, y0, x0]] * wy0 * wx0
                            + xv[[ch, y0, x1]] * wy0 * wx1
                            + xv[[ch, y1, x0]] * wy1 * wx0
                            + xv[[ch, y1, x1]] * wy1 * wx1;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(o, Op::UpsampleBilinear { x, out }, needs))
    }

    /// Mean focal loss against a binary target. Predictions are clamped to
    /// `[eps, 1-eps]` internally.
    pub fn focal_loss(&mut self, pred: TensorId, target: &ArrayD<f64>, alpha: f64, gamma: f64) -> Result<TensorId> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::shape(format!(
                "focal_loss: pred {:?} vs target {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        let n = target.len() as f64;
        let mut acc = 0.0;
        ndarray::Zip::from(self.value(pred)).and(target).for_each(|&p, &t| {
            let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
            let (pt, at) = if t > 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            acc += -at * (1.0 - pt).powf(gamma) * pt.ln();
        });
        let v = ArrayD::from_elem(IxDyn(&[]), acc / n);
        let needs = self.needs(pred);
        Ok(self.push(
            v,
            Op::FocalLoss { pred, target: target.clone(), alpha, gamma },
            needs,
        ))
    }

    /// Mean smooth-L1 (Huber) loss against a target.
    pub fn smooth_l1(&mut self, pred: TensorId, target: &ArrayD<f64>, beta: f64) -> Result<TensorId> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::shape(format!(
                "smooth_l1: pred {:?} vs target {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        if beta <= 0.0 {
            return Err(Error::config(format!("smooth_l1: beta {beta} must be > 0")));
        }
        let n = target.len() as f64;
        let mut acc = 0.0;
        ndarray::Zip::from(self.value(pred)).and(target).for_each(|&p, &t| {
            let d = (p - t).abs();
            acc += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
        });
        let v = ArrayD::from_elem(IxDyn(&[]), acc / n);
        let needs = self.needs(pred);
        Ok(self.push(v, Op::SmoothL1 { pred, target: target.clone(), beta }, needs))
    }

    /// Accumulate `delta` into `grads[id]`, reducing broadcast axes.
    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], id: TensorId, delta: ArrayD<f64>) {
        if !self.needs(id) {
            return;
        }
        let shape = self.value(id).shape();
        let delta = if delta.shape() == shape {
            delta
        } else {
            reduce_to(&delta, shape)
        };
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Backpropagate from a scalar root. Returns gradients for every node
    /// that requires them.
    pub fn backward(&self, root: TensorId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward root must be a scalar".to_string(),
            ));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), 1.0));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].clone() else { continue };
            let out_id = TensorId(idx);
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let shape = g.shape().to_vec();
                    let av = self.value(*a).broadcast(IxDyn(&shape)).unwrap().to_owned();
                    let bv = self.value(*b).broadcast(IxDyn(&shape)).unwrap().to_owned();
                    self.accumulate(&mut grads, *a, &g * &bv);
                    self.accumulate(&mut grads, *b, &g * &av);
                }
                Op::Div(a, b) => {
                    let shape = g.shape().to_vec();
                    let av = self.value(*a).broadcast(IxDyn(&shape)).unwrap().to_owned();
                    let bv = self.value(*b).broadcast(IxDyn(&shape)).unwrap().to_owned();
                    self.accumulate(&mut grads, *a, &g / &bv);
                    let db = -&g * &av / (&bv * &bv);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::MaxT(a, b) | Op::MinT(a, b) => {
                    let is_max = matches!(self.nodes[idx].op, Op::MaxT(..));
                    let shape = g.shape().to_vec();
                    let av = self.value(*a).broadcast(IxDyn(&shape)).unwrap().to_owned();
                    let bv = self.value(*b).broadcast(IxDyn(&shape)).unwrap().to_owned();
                    let mut da = ArrayD::zeros(IxDyn(&shape));
                    let mut db = ArrayD::zeros(IxDyn(&shape));
                    ndarray::Zip::from(&mut da)
                        .and(&mut db)
                        .and(&g)
                        .and(&av)
                        .and(&bv)
                        .for_each(|da, db, &g, &x, &y| {
                            // ties go to the first argument
                            let a_wins = if is_max { x >= y } else { x <= y };
                            if a_wins {
                                *da = g;
                            } else {
                                *db = g;
                            }
                        });
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => self.accumulate(&mut grads, *a, &g * *c),
                Op::AddScalar(a, _) => self.accumulate(&mut grads, *a, g),
                Op::PowConst(a, p) => {
                    let xv = self.value(*a);
                    let da = ndarray::Zip::from(&g).and(xv).map_collect(|&g, &x| g * p * x.powf(p - 1.0));
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Ln(a) => {
                    let da = &g / self.value(*a);
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Sqrt(a) => {
                    let y = self.value(out_id);
                    let da = ndarray::Zip::from(&g).and(y).map_collect(|&g, &y| g * 0.5 / y);
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = self.value(out_id);
                    let da = ndarray::Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y));
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let xv = self.value(*a);
                    let da = ndarray::Zip::from(&g).and(xv).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Clamp(a, lo, hi) => {
                    let xv = self.value(*a);
                    let da = ndarray::Zip::from(&g)
                        .and(xv)
                        .map_collect(|&g, &x| if x > *lo && x < *hi { g } else { 0.0 });
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let gv = *g.iter().next().unwrap();
                    let da = ArrayD::from_elem(self.value(*a).raw_dim(), gv);
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let gv = *g.iter().next().unwrap() / n;
                    let da = ArrayD::from_elem(self.value(*a).raw_dim(), gv);
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Reshape(a) => {
                    let da = g.into_shape_with_order(self.value(*a).raw_dim()).unwrap();
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Concat { inputs, axis } => {
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = self.value(inp).shape()[*axis];
                        let part = g
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                            .to_owned();
                        self.accumulate(&mut grads, inp, part);
                        offset += len;
                    }
                }
                Op::Linear { x, w, b } => {
                    let gv = g.view().into_dimensionality::<Ix1>().unwrap().to_owned();
                    let xv = self.value(*x).view().into_dimensionality::<Ix1>().unwrap().to_owned();
                    let wv = self.value(*w).view().into_dimensionality::<Ix2>().unwrap();
                    let dx = wv.t().dot(&gv);
                    self.accumulate(&mut grads, *x, dx.into_dyn());
                    let (m, n) = wv.dim();
                    let mut dw = Array2::zeros((m, n));
                    for i in 0..m {
                        for j in 0..n {
                            dw[[i, j]] = gv[i] * xv[j];
                        }
                    }
                    self.accumulate(&mut grads, *w, dw.into_dyn());
                    self.accumulate(&mut grads, *b, gv.into_dyn());
                }
                Op::Conv2d { x, w, b, spec } => {
                    let (cin, h, w_in) = self
                        .value(*x)
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .dim();
                    let wshape = self.value(*w).shape().to_vec();
                    let (cout, kh, kw) = (wshape[0], wshape[2], wshape[3]);
                    let oh = g.shape()[1];
                    let ow = g.shape()[2];
                    let g2 = g
                        .view()
                        .into_shape_with_order((cout, oh * ow))
                        .unwrap()
                        .to_owned();
                    if let Some(bid) = b {
                        let db = g2.sum_axis(Axis(1));
                        self.accumulate(&mut grads, *bid, db.into_dyn());
                    }
                    let cols = im2col(self.value(*x), kh, kw, spec);
                    if self.needs(*w) {
                        let dw2 = g2.dot(&cols.t());
                        let dw = dw2.into_shape_with_order(IxDyn(&[cout, cin, kh, kw])).unwrap();
                        self.accumulate(&mut grads, *w, dw);
                    }
                    if self.needs(*x) {
                        let w2 = self
                            .value(*w)
                            .view()
                            .into_shape_with_order((cout, cin * kh * kw))
                            .unwrap()
                            .to_owned();
                        let dcols = w2.t().dot(&g2);
                        let dx = col2im(&dcols, cin, h, w_in, kh, kw, spec);
                        self.accumulate(&mut grads, *x, dx);
                    }
                }
                Op::MaxPool2d { x, argmax, .. } => {
                    let mut dx = ArrayD::zeros(self.value(*x).raw_dim());
                    {
                        let dxs = dx.as_slice_mut().unwrap();
                        for (gi, &src) in g.iter().zip(argmax.iter()) {
                            dxs[src] += *gi;
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let (c, h, w) = self
                        .value(*x)
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .dim();
                    let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                    let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                    {
                        let mut dxv = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                        for ch in 0..c {
                            let val = gv[ch] / (h * w) as f64;
                            dxv.index_axis_mut(Axis(0), ch).fill(val);
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::AdaptiveAvgPool { x, bins } => {
                    let (c, h, w) = self
                        .value(*x)
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .dim();
                    let ybins = adaptive_bins(h, bins.0);
                    let xbins = adaptive_bins(w, bins.1);
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                    {
                        let mut dxv = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                        for ch in 0..c {
                            for (by, &(ys, ye)) in ybins.iter().enumerate() {
                                for (bx, &(xs, xe)) in xbins.iter().enumerate() {
                                    let val = gv[[ch, by, bx]] / ((ye - ys) * (xe - xs)) as f64;
                                    for y in ys..ye {
                                        for x2 in xs..xe {
                                            dxv[[ch, y, x2]] += val;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::UpsampleBilinear { x, out } => {
                    let (c, h, w) = self
                        .value(*x)
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .dim();
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                    {
                        let mut dxv = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                        for oy in 0..out.0 {
                            let ((y0, wy0), (y1, wy1)) = bilinear_taps(oy, out.0, h);
                            for ox in 0..out.1 {
                                let ((x0, wx0), (x1, wx1)) = bilinear_taps(ox, out.1, w);
                                for ch in 0..c {
                                    let gval = gv[[ch, oy, ox]];
                                    dxv[[ch, y0, x0]] += gval * wy0 * wx0;
                                    dxv[[ch, y0, x1]] += gval * wy0 * wx1;
                                    dxv[[ch, y1, x0]] += gval * wy1 * wx0;
                                    dxv[[ch, y1, x1]] += gval * wy1 * wx1;
                                }
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::FocalLoss { pred, target, alpha, gamma } => {
                    let gv = *g.iter().next().unwrap();
                    let n = target.len() as f64;
                    let pv = self.value(*pred);
                    let da = ndarray::Zip::from(pv).and(target).map_collect(|&p, &t| {
                        let pc = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
                        if p <= FOCAL_EPS || p >= 1.0 - FOCAL_EPS {
                            return 0.0; // clamped region
                        }
                        let d = if t > 0.5 {
                            let focal_term = if *gamma == 0.0 {
                                0.0
                            } else {
                                alpha * gamma * (1.0 - pc).powf(gamma - 1.0) * pc.ln()
                            };
                            focal_term - alpha * (1.0 - pc).powf(*gamma) / pc
                        } else {
                            let focal_term = if *gamma == 0.0 {
                                0.0
                            } else {
                                -(1.0 - alpha) * gamma * pc.powf(gamma - 1.0) * (1.0 - pc).ln()
                            };
                            focal_term + (1.0 - alpha) * pc.powf(*gamma) / (1.0 - pc)
                        };
                        gv * d / n
                    });
                    self.accumulate(&mut grads, *pred, da);
                }
                Op::SmoothL1 { pred, target, beta } => {
                    let gv = *g.iter().next().unwrap();
                    let n = target.len() as f64;
                    let pv = self.value(*pred);
                    let da = ndarray::Zip::from(pv).and(target).map_collect(|&p, &t| {
                        let d = p - t;
                        let dd = if d.abs() < *beta { d / beta } else { d.signum() };
                        gv * dd / n
                    });
                    self.accumulate(&mut grads, *pred, da);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
