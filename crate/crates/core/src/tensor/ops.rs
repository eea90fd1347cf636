use std::sync::Arc;

use super::gemm::{gemm, MatRef};
use super::graph::{gelu, sigmoid, AxisSplit, Graph, Op, Taps, Var, ZERO_TAP};
use super::Tensor;
use crate::error::{Error, Result};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'a> Graph<'a> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match self.shape(x) {
            &[r, c] => Ok((r, c)),
            s => Err(shape_err(op, s, &[0, 0])),
        }
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(t, op)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| f(*v)).collect(),
        )
        .expect("same shape");
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::MulScalar(x, c))
    }

    /// Multiply every element of `x` by the one-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("scale", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        Ok(self.map(x, |v| v * sv, Op::Scale(x, s)))
    }

    /// Add `b[r]` to every element of row `r` (rows = all leading axes folded).
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(b).numel() != rows {
            return Err(shape_err("add_row_bias", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(cols)
            .zip(bv)
            .flat_map(|(row, bias)| row.iter().map(move |v| v + bias))
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRowBias(x, b)))
    }

    /// Multiply every element of row `r` by `g[r]`.
    pub fn mul_row_scale(&mut self, x: Var, g: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(g).numel() != rows {
            return Err(shape_err("mul_row_scale", self.shape(x), self.shape(g)));
        }
        let gv = self.value(g).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(cols)
            .zip(gv)
            .flat_map(|(row, s)| row.iter().map(move |v| v * s))
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulRowScale(x, g)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(self.value(a).data(), k),
            MatRef::row_major(self.value(b).data(), n),
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b)))
    }

    /// Generic index map; `idx[i]` names the source element of output `i`,
    /// [`ZERO_TAP`] yields zero.
    pub(crate) fn gather(&mut self, x: Var, idx: Vec<u32>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).data();
        let data = idx
            .iter()
            .map(|&i| if i == ZERO_TAP { 0.0 } else { xv[i as usize] })
            .collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather(x, idx.into())))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", x)?;
        let idx = (0..c)
            .flat_map(|j| (0..r).map(move |i| (i * c + j) as u32))
            .collect();
        self.gather(x, idx, vec![c, r])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.rank2("slice_cols", x)?;
        if start >= end || end > c {
            return Err(shape_err("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let idx = (0..r)
            .flat_map(|i| (start..end).map(move |j| (i * c + j) as u32))
            .collect();
        self.gather(x, idx, vec![r, w])
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.rank2("slice_rows", x)?;
        if start >= end || end > r {
            return Err(shape_err("slice_rows", self.shape(x), &[start, end]));
        }
        let idx = ((start * c) as u32..(end * c) as u32).collect();
        self.gather(x, idx, vec![end - start, c])
    }

    /// Select columns of a rank-2 tensor by index.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.rank2("select_cols", x)?;
        if cols.is_empty() || cols.iter().any(|&j| j >= c) {
            return Err(shape_err("select_cols", self.shape(x), cols));
        }
        let idx = (0..r)
            .flat_map(|i| cols.iter().map(move |&j| (i * c + j) as u32))
            .collect();
        self.gather(x, idx, vec![r, cols.len()])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let (rows, _) = self.rank2("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rank2("concat_cols", p)?;
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new([rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Stack along the first axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.shape(first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Softmax along `axis`, stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(Error::Config(format!(
                "softmax axis {axis} out of range for rank {rank}"
            )));
        }
        let split = AxisSplit::new(self.shape(x), axis);
        let data = softmax_data(self.value(x).data(), None, split)?;
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(x, split)))
    }

    /// Softmax over the last axis after adding a constant mask (0 or -inf
    /// entries, same shape as `x`). Masked entries come out exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        if mask.shape() != self.shape(x) {
            return Err(shape_err("softmax_masked", self.shape(x), mask.shape()));
        }
        let axis = self.value(x).rank() - 1;
        let split = AxisSplit::new(self.shape(x), axis);
        let data = softmax_data(self.value(x).data(), Some(mask.data()), split)?;
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(x, split)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Zero-mean, unit-variance standardization of every slice along `axis`
    /// (biased variance).
    pub fn normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::Config(format!("normalize axis {axis} out of range")));
        }
        let s = AxisSplit::new(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(s.outer * s.inner);
        let len = s.len as f64;
        for o in 0..s.outer {
            for inn in 0..s.inner {
                let mean = (0..s.len).map(|l| src[s.index(o, l, inn)]).sum::<f64>() / len;
                let var = (0..s.len)
                    .map(|l| {
                        let d = src[s.index(o, l, inn)] - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / len;
                let is = 1.0 / (var + eps).sqrt();
                for l in 0..s.len {
                    let j = s.index(o, l, inn);
                    out[j] = (src[j] - mean) * is;
                }
                inv_std.push(is);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Normalize(x, s, inv_std)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean along `axis`, keeping the axis with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::Config(format!("mean axis {axis} out of range")));
        }
        let s = AxisSplit::new(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; s.outer * s.inner];
        for o in 0..s.outer {
            for inn in 0..s.inner {
                out[o * s.inner + inn] =
                    (0..s.len).map(|l| src[s.index(o, l, inn)]).sum::<f64>() / s.len as f64;
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = 1;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MeanAxis(x, s)))
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Sliding `k x k` window (zero padded, stride 1) over a `C x H x W` map.
    /// Row `h*W + w` holds the window around pixel `(h, w)`, channel-major:
    /// column `c*k*k + dy*k + dx`.
    pub fn unfold2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let &[c, h, w] = self.shape(x) else {
            return Err(shape_err("unfold2d", self.shape(x), &[0, 0, 0]));
        };
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "unfold2d window must be odd, got {k}"
            )));
        }
        let pad = (k - 1) as isize / 2;
        let cols = k * k * c;
        let mut idx = Vec::with_capacity(h * w * cols);
        for py in 0..h as isize {
            for px in 0..w as isize {
                for ch in 0..c {
                    for dy in 0..k as isize {
                        for dx in 0..k as isize {
                            let (y, x_) = (py + dy - pad, px + dx - pad);
                            idx.push(if y < 0 || x_ < 0 || y >= h as isize || x_ >= w as isize {
                                ZERO_TAP
                            } else {
                                ((ch * h + y as usize) * w + x_ as usize) as u32
                            });
                        }
                    }
                }
            }
        }
        self.gather(x, idx, vec![h * w, cols])
    }

    /// Sliding window of `k` tokens over a `D x N` matrix. Row `n` concatenates
    /// the D-vectors of tokens `n - ceil((k-1)/2) ..` (left-biased for even k),
    /// zero padded.
    pub fn unfold1d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (d, n) = self.rank2("unfold1d", x)?;
        if k == 0 || k > n + 2 {
            return Err(Error::Config(format!(
                "unfold1d window {k} invalid for {n} tokens"
            )));
        }
        // ceil((k-1)/2)
        let left = (k / 2) as isize;
        let mut idx = Vec::with_capacity(n * k * d);
        for t in 0..n as isize {
            for j in 0..k as isize {
                let src = t - left + j;
                for ch in 0..d {
                    idx.push(if src < 0 || src >= n as isize {
                        ZERO_TAP
                    } else {
                        (ch * n + src as usize) as u32
                    });
                }
            }
        }
        self.gather(x, idx, vec![n, k * d])
    }

    /// Non-overlapping `f x f` patches of a `C x H x W` map stacked into
    /// channels: output `(f*f*C) x (H/f) x (W/f)`, channel `(dy*f + dx)*C + c`.
    pub fn space_to_depth(&mut self, x: Var, f: usize) -> Result<Var> {
        let &[c, h, w] = self.shape(x) else {
            return Err(shape_err("space_to_depth", self.shape(x), &[0, 0, 0]));
        };
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "spatial extent {h}x{w} not divisible by {f}"
            )));
        }
        let (oh, ow) = (h / f, w / f);
        let mut idx = Vec::with_capacity(c * h * w);
        for dy in 0..f {
            for dx in 0..f {
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            idx.push(((ch * h + y * f + dy) * w + xx * f + dx) as u32);
                        }
                    }
                }
            }
        }
        self.gather(x, idx, vec![f * f * c, oh, ow])
    }

    /// Bilinear resize of a `D x H x W` map, half-pixel (align-corners=false)
    /// sampling.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let &[c, h, w] = self.shape(x) else {
            return Err(shape_err("bilinear_resize", self.shape(x), &[0, 0, 0]));
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config(
                "bilinear_resize target extent must be positive".into(),
            ));
        }
        let ty = Arc::new(bilinear_taps(h, out_h));
        let tx = Arc::new(bilinear_taps(w, out_w));
        let src = self.value(x).data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let s = &src[ch * h * w..(ch + 1) * h * w];
            let o = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    o[oy * out_w + ox] = wy0 * (wx0 * s[y0 * w + x0] + wx1 * s[y0 * w + x1])
                        + wy1 * (wx0 * s[y1 * w + x0] + wx1 * s[y1 * w + x1]);
                }
            }
        }
        let t = Tensor::new([c, out_h, out_w], out)?;
        Ok(self.push(
            t,
            Op::Bilinear {
                x,
                channels: c,
                in_hw: (h, w),
                out_hw: (out_h, out_w),
                ty,
                tx,
            },
        ))
    }

    /// Average `D x N` over `r` token bins; bin `j` covers
    /// `[floor(jN/r), floor((j+1)N/r))`.
    pub fn adaptive_avg_pool1d(&mut self, x: Var, r: usize) -> Result<Var> {
        let (_, n) = self.rank2("adaptive_avg_pool1d", x)?;
        if r == 0 || r > n {
            return Err(Error::Config(format!(
                "pool size {r} invalid for {n} tokens"
            )));
        }
        let cols: Vec<usize> = (0..n).collect();
        let pool = pooling_matrix(n, &cols, r);
        let p = self.constant(pool);
        self.matmul(x, p)
    }

    /// Mean binary cross-entropy between logits and a constant target.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let xv = self.value(logits);
        if xv.numel() != target.len() {
            return Err(shape_err("bce_with_logits", xv.shape(), &[target.len()]));
        }
        let n = target.len() as f64;
        // max(z,0) - z*t + ln(1 + e^{-|z|})
        let loss = xv
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits(logits, target.into()),
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let loss = av
            .iter()
            .zip(bv)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / av.len() as f64;
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b)))
    }
}

fn softmax_data(src: &[f64], mask: Option<&[f64]>, s: AxisSplit) -> Result<Vec<f64>> {
    let mut out = vec![0.0; src.len()];
    let at = |j: usize| src[j] + mask.map_or(0.0, |m| m[j]);
    for o in 0..s.outer {
        for inn in 0..s.inner {
            let max = (0..s.len)
                .map(|l| at(s.index(o, l, inn)))
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Usage("softmax slice is fully masked".into()));
            }
            let mut total = 0.0;
            for l in 0..s.len {
                let j = s.index(o, l, inn);
                let e = (at(j) - max).exp();
                out[j] = e;
                total += e;
            }
            for l in 0..s.len {
                out[s.index(o, l, inn)] /= total;
            }
        }
    }
    Ok(out)
}

pub(crate) fn bilinear_taps(n_in: usize, n_out: usize) -> Taps {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

/// `N x r` averaging matrix over the listed columns. Bin `j` covers positions
/// `[floor(jM/r), max(floor((j+1)M/r), floor(jM/r)+1))` of the `M` listed
/// columns, so every bin is nonempty even when `M < r`.
pub(crate) fn pooling_matrix(n: usize, cols: &[usize], r: usize) -> Tensor {
    let m = cols.len();
    let mut pool = Tensor::zeros([n, r]);
    for j in 0..r {
        let start = (j * m / r).min(m - 1);
        let end = ((j + 1) * m / r).max(start + 1);
        let w = 1.0 / (end - start) as f64;
        for &c in &cols[start..end] {
            pool.data_mut()[c * r + j] += w;
        }
    }
    pool
}
