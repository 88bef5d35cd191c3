//! Primitive differentiable operations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{gemm, Graph, Var};
use crate::{Error, Result, Tensor};

/// Epsilon inside the square root of layer and instance normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Pointwise operation kinds accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
    Add,
    Sub,
    Mul,
    /// `x * gamma[c] + beta[c]`, broadcasting channel vectors over space.
    ScaleShift,
}

pub(super) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddBias { x: Var, bias: Var },
    ScaleShift { x: Var, gamma: Var, beta: Var, channels: usize, spatial: usize },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    MulConst { x: Var, factors: Vec<f64> },
    MaxPoolCols { c: Var, argmax: Vec<usize> },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    InstanceNorm { x: Var, spatial: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { input: Var, kernel: Var, geom: ConvGeometry, cols: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SelectRow { x: Var, row: usize },
    MeanSpatial { x: Var, spatial: usize },
    Sum { x: Var },
    Reshape { x: Var },
    PadSpatial { x: Var, top: usize, left: usize },
    BceWithLogits { logit: Var, target: f64 },
}

#[derive(Debug, Clone, Copy)]
pub(super) struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfolds one image (`c_in×h×w`) into a `patch × positions` matrix.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let out = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let y = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut out[oy * self.w_out..(oy + 1) * self.w_out];
                        if y < 0 || y >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &image[(ci * self.h + y as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let x = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if x < 0 || x >= self.w as isize { 0.0 } else { src[x as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::im2col`]: folds columns back, summing overlaps.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let y = (oy * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut image[(ci * self.h + y as usize) * self.w..][..self.w];
                        for ox in 0..self.w_out {
                            let x = (ox * self.stride + kj) as isize - self.pad as isize;
                            if x >= 0 && x < self.w as isize {
                                dst[x as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

/// Splits a rank-3 `C×H×W` or rank-4 `B×C×H×W` shape into
/// `(batch, channels, spatial)`.
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h * w)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(Error::shape(op, format!("expected C×H×W or B×C×H×W, got {shape:?}"))),
    }
}

impl Graph {
    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape(), data)?;
        self.push(out, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(out, op)
    }

    /// Dispatches a pointwise kind. Unary kinds take one operand, `Add`,
    /// `Sub` and `Mul` two equally shaped ones, `ScaleShift` three
    /// (feature map, gamma, beta).
    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Tanh | Elementwise::Sigmoid | Elementwise::Relu | Elementwise::Gelu => 1,
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            Elementwise::ScaleShift => 3,
        };
        if operands.len() != arity {
            return Err(Error::Contract(format!(
                "{kind:?} takes {arity} operands, got {}",
                operands.len()
            )));
        }
        match kind {
            Elementwise::Tanh => self.tanh(operands[0]),
            Elementwise::Sigmoid => self.sigmoid(operands[0]),
            Elementwise::Relu => self.relu(operands[0]),
            Elementwise::Gelu => self.gelu(operands[0]),
            Elementwise::Add => self.add(operands[0], operands[1]),
            Elementwise::Sub => self.sub(operands[0], operands[1]),
            Elementwise::Mul => self.mul(operands[0], operands[1]),
            Elementwise::ScaleShift => self.scale_shift(operands[0], operands[1], operands[2]),
        }
    }

    /// `n×k` times `k×m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (Some((n, k)), Some((k2, m))) = (va.dims2(), vb.dims2()) else {
            return Err(Error::dim("matmul", va.shape(), vb.shape()));
        };
        if k != k2 {
            return Err(Error::dim("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, va.data(), false, vb.data(), false, &mut out, 0.0);
        let out = Tensor::new([n, m], out)?;
        self.push(out, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        self.push(out, Op::Transpose { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.map_unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    /// Adds `bias` (length = last axis) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = *vx.shape().last().unwrap_or(&1);
        if vb.numel() != d || vx.rank() == 0 {
            return Err(Error::dim("add_bias", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            row.iter_mut().zip(vb.data()).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::new(vx.shape(), data)?;
        self.push(out, Op::AddBias { x, bias })
    }

    /// Feature-wise affine modulation `out[.., c, h, w] = gamma[c] * x[.., c, h, w] + beta[c]`.
    pub fn scale_shift(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (_, channels, spatial) = channel_layout("scale_shift", vx.shape())?;
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [channels] {
            return Err(Error::dim("scale_shift", vx.shape(), vg.shape()));
        }
        if vb.shape() != [channels] {
            return Err(Error::dim("scale_shift", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for (idx, plane) in data.chunks_exact_mut(spatial).enumerate() {
            let c = idx % channels;
            let (g, b) = (vg.data()[c], vb.data()[c]);
            plane.iter_mut().for_each(|v| *v = g * *v + b);
        }
        let out = Tensor::new(vx.shape(), data)?;
        self.push(
            out,
            Op::ScaleShift {
                x,
                gamma,
                beta,
                channels,
                spatial,
            },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, libm::tanh, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, gelu, Op::Gelu { x })
    }

    /// Multiplies by constant factors of the same shape; dropout masks use this.
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let vx = self.value(x);
        if factors.len() != vx.numel() {
            return Err(Error::dim("mul_const", vx.shape(), &[factors.len()]));
        }
        let data = vx.data().iter().zip(&factors).map(|(v, f)| v * f).collect();
        let out = Tensor::new(vx.shape(), data)?;
        self.push(out, Op::MulConst { x, factors })
    }

    /// Column-wise max over the rows of an `N×M` matrix whose `row_mask`
    /// entry is `true`. Ties go to the lowest row index.
    pub fn maxpool_cols(&mut self, c: Var, row_mask: &[bool]) -> Result<Var> {
        let vc = self.value(c);
        let (n, m) = vc.dims2().ok_or_else(|| Error::shape("maxpool_cols", format!("{:?}", vc.shape())))?;
        if row_mask.len() != n {
            return Err(Error::dim("maxpool_cols", vc.shape(), &[row_mask.len()]));
        }
        if !row_mask.iter().any(|&keep| keep) {
            return Err(Error::EmptyPool);
        }
        let mut argmax = vec![usize::MAX; m];
        let mut out = vec![f64::NEG_INFINITY; m];
        for i in (0..n).filter(|&i| row_mask[i]) {
            for j in 0..m {
                let v = vc.at2(i, j);
                if argmax[j] == usize::MAX || v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let out = Tensor::new([m], out)?;
        self.push(out, Op::MaxPoolCols { c, argmax })
    }

    /// Row-wise softmax over the columns whose `key_mask` entry is `true`;
    /// masked columns get probability zero.
    pub fn softmax_rows(&mut self, x: Var, key_mask: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        let (n, m) = vx.dims2().ok_or_else(|| Error::shape("softmax_rows", format!("{:?}", vx.shape())))?;
        if key_mask.len() != m {
            return Err(Error::dim("softmax_rows", vx.shape(), &[key_mask.len()]));
        }
        if !key_mask.iter().any(|&k| k) {
            return Err(Error::Mask("softmax_rows"));
        }
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = vx.row(i);
            let max = row
                .iter()
                .zip(key_mask)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * m..(i + 1) * m];
            let mut total = 0.0;
            for j in 0..m {
                if key_mask[j] {
                    out[j] = libm::exp(row[j] - max);
                    total += out[j];
                }
            }
            out.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::new([n, m], data)?;
        self.push(out, Op::SoftmaxRows { x })
    }

    /// Standardizes along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *vx.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::dim("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.numel() / d;
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Per-channel standardization over the spatial axes, without affine terms.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (_, _, spatial) = channel_layout("instance_norm", vx.shape())?;
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = Vec::with_capacity(vx.numel() / spatial);
        for (plane, out) in vx.data().chunks_exact(spatial).zip(xhat.chunks_exact_mut(spatial)) {
            let mean = plane.iter().sum::<f64>() / spatial as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / spatial as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std.push(inv);
            out.iter_mut().zip(plane).for_each(|(o, v)| *o = (v - mean) * inv);
        }
        let out = Tensor::new(vx.shape(), xhat.clone())?;
        self.push(
            out,
            Op::InstanceNorm {
                x,
                spatial,
                xhat,
                inv_std,
            },
        )
    }

    /// Zero-padded cross-correlation of `B×C_in×H×W` with `C_out×C_in×kh×kw`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (vi, vk) = (self.value(input), self.value(kernel));
        let (&[batch, c_in, h, w], &[c_out, k_in, kh, kw]) = (vi.shape(), vk.shape()) else {
            return Err(Error::dim("conv2d", vi.shape(), vk.shape()));
        };
        if c_in != k_in {
            return Err(Error::dim("conv2d", vi.shape(), vk.shape()));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}×{kw} exceeds padded input {ph}×{pw}"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output size is not an integer: ({ph}-{kh})/{stride}, ({pw}-{kw})/{stride}"
            )));
        }
        let geom = ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad: padding,
            h_out: (ph - kh) / stride + 1,
            w_out: (pw - kw) / stride + 1,
        };
        let (k, p) = (geom.patch(), geom.positions());
        let mut cols = vec![0.0; batch * k * p];
        let mut out = vec![0.0; batch * c_out * p];
        for b in 0..batch {
            let image = &vi.data()[b * c_in * h * w..(b + 1) * c_in * h * w];
            let col = &mut cols[b * k * p..(b + 1) * k * p];
            geom.im2col(image, col);
            gemm(c_out, k, p, vk.data(), false, col, false, &mut out[b * c_out * p..], 0.0);
        }
        let out = Tensor::new([batch, c_out, geom.h_out, geom.w_out], out)?;
        self.push(out, Op::Conv2d { input, kernel, geom, cols })
    }

    /// Looks up rows of a `V×d` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (v, d) = vt.dims2().ok_or_else(|| Error::shape("gather", format!("{:?}", vt.shape())))?;
        if ids.is_empty() {
            return Err(Error::Contract("gather needs at least one id".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::VocabularyId { id, size: v });
            }
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new([ids.len(), d], data)?;
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Flattens and joins the parts into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero parts".into()));
        }
        let data: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        let out = Tensor::vector(data);
        self.push(out, Op::Concat { parts: parts.to_vec() })
    }

    /// Contiguous range of the flattened input, as a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if len == 0 || start + len > vx.numel() {
            return Err(Error::dim("slice", vx.shape(), &[start, len]));
        }
        let out = Tensor::vector(vx.data()[start..start + len].to_vec());
        self.push(out, Op::Slice { x, start })
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let vx = self.value(x);
        let (n, m) = vx.dims2().ok_or_else(|| Error::shape("slice_cols", format!("{:?}", vx.shape())))?;
        if width == 0 || start + width > m {
            return Err(Error::dim("slice_cols", vx.shape(), &[start, width]));
        }
        let data = (0..n).flat_map(|i| vx.row(i)[start..start + width].iter().copied()).collect();
        let out = Tensor::new([n, width], data)?;
        self.push(out, Op::SliceCols { x, start })
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat_cols of zero parts".into()))?;
        let n = self.value(first).dims2().map(|d| d.0);
        let mut width = 0;
        for &p in parts {
            let vp = self.value(p);
            match vp.dims2() {
                Some((rows, cols)) if Some(rows) == n => width += cols,
                _ => return Err(Error::dim("concat_cols", self.shape(first), vp.shape())),
            }
        }
        let n = n.unwrap_or(0);
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new([n, width], data)?;
        self.push(out, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let vx = self.value(x);
        let (n, _) = vx.dims2().ok_or_else(|| Error::shape("select_row", format!("{:?}", vx.shape())))?;
        if row >= n {
            return Err(Error::dim("select_row", vx.shape(), &[row]));
        }
        let out = Tensor::vector(vx.row(row).to_vec());
        self.push(out, Op::SelectRow { x, row })
    }

    /// Global average pool: `C×H×W → C` or `B×C×H×W → B×C`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (_, _, spatial) = channel_layout("mean_spatial", vx.shape())?;
        let data = vx
            .data()
            .chunks_exact(spatial)
            .map(|plane| plane.iter().sum::<f64>() / spatial as f64)
            .collect();
        let shape = &vx.shape()[..vx.rank() - 2];
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::MeanSpatial { x, spatial })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape { x })
    }

    /// Zero-pads the two trailing (spatial) axes of a `B×C×H×W` tensor.
    pub fn pad_spatial(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let vx = self.value(x);
        let &[b, c, h, w] = vx.shape() else {
            return Err(Error::shape("pad_spatial", format!("expected B×C×H×W, got {:?}", vx.shape())));
        };
        let (ho, wo) = (h + top + bottom, w + left + right);
        let mut data = vec![0.0; b * c * ho * wo];
        for (src, dst) in vx.data().chunks_exact(h * w).zip(data.chunks_exact_mut(ho * wo)) {
            for y in 0..h {
                dst[(y + top) * wo + left..][..w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        let out = Tensor::new([b, c, ho, wo], data)?;
        self.push(out, Op::PadSpatial { x, top, left })
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `target`, computed
    /// from the logit as `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        let z = self
            .value(logit)
            .item()
            .ok_or_else(|| Error::dim("bce_with_logits", self.shape(logit), &[1]))?;
        let loss = z.max(0.0) - z * target + libm::log1p(libm::exp(-z.abs()));
        self.push(Tensor::scalar(loss), Op::BceWithLogits { logit, target })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Op {
    pub(super) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::ScaleShift { .. } => "scale_shift",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::MulConst { .. } => "mul_const",
            Op::MaxPoolCols { .. } => "maxpool_cols",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SelectRow { .. } => "select_row",
            Op::MeanSpatial { .. } => "mean_spatial",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::PadSpatial { .. } => "pad_spatial",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }

    pub(super) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::ScaleShift { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Gather { table, .. } => vec![*table],
            Op::Concat { parts } | Op::ConcatCols { parts } => parts.clone(),
            Op::MaxPoolCols { c, .. } => vec![*c],
            Op::BceWithLogits { logit, .. } => vec![*logit],
            Op::Transpose { x }
            | Op::Scale { x, .. }
            | Op::Tanh { x }
            | Op::Sigmoid { x }
            | Op::Relu { x }
            | Op::Gelu { x }
            | Op::MulConst { x, .. }
            | Op::SoftmaxRows { x }
            | Op::InstanceNorm { x, .. }
            | Op::Slice { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SelectRow { x, .. }
            | Op::MeanSpatial { x, .. }
            | Op::Sum { x }
            | Op::Reshape { x }
            | Op::PadSpatial { x, .. } => vec![*x],
        }
    }

    /// Propagates the output gradient `g` of node `out` to the op's inputs.
    pub(super) fn backward(&self, graph: &Graph, out: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = graph.nodes[out].value.data();
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (graph.value(*a), graph.value(*b));
                let ((n, k), (_, m)) = (va.dims2().unwrap(), vb.dims2().unwrap());
                if let Some(da) = graph.slot(grads, *a) {
                    gemm(n, m, k, g, false, vb.data(), true, da, 1.0);
                }
                if let Some(db) = graph.slot(grads, *b) {
                    gemm(k, n, m, va.data(), true, g, false, db, 1.0);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = graph.value(*x).dims2().unwrap();
                if let Some(dx) = graph.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = graph.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = graph.slot(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = graph.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = graph.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (graph.value(*a).data(), graph.value(*b).data());
                if let Some(da) = graph.slot(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i];
                    }
                }
                if let Some(db) = graph.slot(grads, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = graph.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, s)| *d += s * factor);
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(dx) = graph.slot(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = graph.slot(grads, *bias) {
                    let d = db.len();
                    for row in g.chunks_exact(d) {
                        add_into(db, row);
                    }
                }
            }
            Op::ScaleShift {
                x,
                gamma,
                beta,
                channels,
                spatial,
            } => {
                let gam = graph.value(*gamma).data();
                if let Some(dx) = graph.slot(grads, *x) {
                    for (idx, (dplane, gplane)) in dx.chunks_exact_mut(*spatial).zip(g.chunks_exact(*spatial)).enumerate() {
                        let s = gam[idx % channels];
                        dplane.iter_mut().zip(gplane).for_each(|(d, v)| *d += s * v);
                    }
                }
                let vx = graph.value(*x).data();
                if let Some(dg) = graph.slot(grads, *gamma) {
                    for (idx, (xplane, gplane)) in vx.chunks_exact(*spatial).zip(g.chunks_exact(*spatial)).enumerate() {
                        dg[idx % channels] += xplane.iter().zip(gplane).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(db) = graph.slot(grads, *beta) {
                    for (idx, gplane) in g.chunks_exact(*spatial).enumerate() {
                        db[idx % channels] += gplane.iter().sum::<f64>();
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(dx) = graph.slot(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(dx) = graph.slot(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Relu { x } => {
                let vx = graph.value(*x).data();
                if let Some(dx) = graph.slot(grads, *x) {
                    for i in 0..g.len() {
                        if vx[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let vx = graph.value(*x).data();
                if let Some(dx) = graph.slot(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * gelu_grad(vx[i]);
                    }
                }
            }
            Op::MulConst { x, factors } => {
                if let Some(dx) = graph.slot(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * factors[i];
                    }
                }
            }
            Op::MaxPoolCols { c, argmax } => {
                let m = argmax.len();
                if let Some(dc) = graph.slot(grads, *c) {
                    for (j, &i) in argmax.iter().enumerate() {
                        dc[i * m + j] += g[j];
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let m = graph.value(*x).shape()[1];
                if let Some(dx) = graph.slot(grads, *x) {
                    for ((drow, grow), yrow) in dx.chunks_exact_mut(m).zip(g.chunks_exact(m)).zip(y.chunks_exact(m)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gn = graph.value(*gain).data();
                let d = gn.len();
                if let Some(dx) = graph.slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = grow[j] * gn[j];
                        }
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let drow = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] += inv / d as f64 * (d as f64 * dxhat[j] - sum - hrow[j] * dot);
                        }
                    }
                }
                if let Some(dg) = graph.slot(grads, *gain) {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = graph.slot(grads, *bias) {
                    for grow in g.chunks_exact(d) {
                        add_into(db, grow);
                    }
                }
            }
            Op::InstanceNorm {
                x,
                spatial,
                xhat,
                inv_std,
            } => {
                let s = *spatial as f64;
                if let Some(dx) = graph.slot(grads, *x) {
                    for (((dplane, gplane), hplane), &inv) in dx
                        .chunks_exact_mut(*spatial)
                        .zip(g.chunks_exact(*spatial))
                        .zip(xhat.chunks_exact(*spatial))
                        .zip(inv_std)
                    {
                        let sum: f64 = gplane.iter().sum();
                        let dot: f64 = gplane.iter().zip(hplane).map(|(a, b)| a * b).sum();
                        for k in 0..*spatial {
                            dplane[k] += inv / s * (s * gplane[k] - sum - hplane[k] * dot);
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (k, p) = (geom.patch(), geom.positions());
                let c_out = geom.c_out;
                if let Some(dk) = graph.slot(grads, *kernel) {
                    for b in 0..geom.batch {
                        let gb = &g[b * c_out * p..(b + 1) * c_out * p];
                        let col = &cols[b * k * p..(b + 1) * k * p];
                        gemm(c_out, p, k, gb, false, col, true, dk, 1.0);
                    }
                }
                let vk = graph.value(*kernel).data();
                if let Some(di) = graph.slot(grads, *input) {
                    let mut dcol = vec![0.0; k * p];
                    let image = geom.c_in * geom.h * geom.w;
                    for b in 0..geom.batch {
                        let gb = &g[b * c_out * p..(b + 1) * c_out * p];
                        gemm(k, c_out, p, vk, true, gb, false, &mut dcol, 0.0);
                        geom.col2im(&dcol, &mut di[b * image..(b + 1) * image]);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(dt) = graph.slot(grads, *table) {
                    let d = g.len() / ids.len();
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &part in parts {
                    let n = graph.value(part).numel();
                    if let Some(dp) = graph.slot(grads, part) {
                        add_into(dp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, start } => {
                if let Some(dx) = graph.slot(grads, *x) {
                    add_into(&mut dx[*start..*start + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                let m = graph.value(*x).shape()[1];
                let width = graph.nodes[out].value.shape()[1];
                if let Some(dx) = graph.slot(grads, *x) {
                    for (i, grow) in g.chunks_exact(width).enumerate() {
                        add_into(&mut dx[i * m + start..i * m + start + width], grow);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = graph.nodes[out].value.shape()[1];
                let mut offset = 0;
                for &part in parts {
                    let (n, w) = graph.value(part).dims2().unwrap();
                    if let Some(dp) = graph.slot(grads, part) {
                        for i in 0..n {
                            add_into(&mut dp[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SelectRow { x, row } => {
                if let Some(dx) = graph.slot(grads, *x) {
                    let d = g.len();
                    add_into(&mut dx[row * d..(row + 1) * d], g);
                }
            }
            Op::MeanSpatial { x, spatial } => {
                if let Some(dx) = graph.slot(grads, *x) {
                    for (dplane, &gv) in dx.chunks_exact_mut(*spatial).zip(g) {
                        let share = gv / *spatial as f64;
                        dplane.iter_mut().for_each(|d| *d += share);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = graph.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = graph.slot(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::PadSpatial { x, top, left } => {
                let shape = graph.value(*x).shape();
                let (h, w) = (shape[2], shape[3]);
                let out_shape = graph.nodes[out].value.shape();
                let (ho, wo) = (out_shape[2], out_shape[3]);
                if let Some(dx) = graph.slot(grads, *x) {
                    for (dplane, gplane) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(ho * wo)) {
                        for yy in 0..h {
                            add_into(&mut dplane[yy * w..(yy + 1) * w], &gplane[(yy + top) * wo + left..][..w]);
                        }
                    }
                }
            }
            Op::BceWithLogits { logit, target } => {
                let z = graph.value(*logit).data()[0];
                if let Some(dz) = graph.slot(grads, *logit) {
                    dz[0] += g[0] * (sigmoid(z) - target);
                }
            }
        }
    }
}
