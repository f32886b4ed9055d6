use super::layer_norm::moments;
use super::{gemm, ConvGeometry, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Sqrt,
    Recip,
    Square,
}

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    DivRows(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    SubScalar(Var, Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    ColumnSums(Var),
    SoftmaxRows {
        x: Var,
        temperature: f64,
    },
    LayerNormRows {
        x: Var,
        alpha: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        batch: usize,
        out_channels: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        batch: usize,
        in_channels: usize,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    BroadcastRows {
        x: Var,
        reps: usize,
    },
    AlphaBlend {
        x: Var,
        masks: Vec<f64>,
        slots: usize,
        pixels: usize,
        channels: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are only ever pushed, so every node's inputs precede it and the
/// reverse of insertion order is a valid reverse-topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
///
/// Only leaves and the loss itself keep their gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn check_scalar(op: &'static str, s: &Tensor) -> Result<()> {
    if s.numel() != 1 {
        return Err(Error::shape(
            op,
            format!("expected a scalar, got {:?}", s.shape),
        ));
    }
    Ok(())
}

fn last_dim(t: &Tensor) -> usize {
    t.shape.last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, frozen statistics).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// `x @ w + b` with `b` added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_broadcast(xw, b)
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op, ta, tb)?;
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(ta.shape.clone(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `b` to every trailing block of `x`; `b`'s shape must be a suffix
    /// of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let suffix_ok = tb.rank() <= tx.rank() && tx.shape[tx.rank() - tb.rank()..] == tb.shape[..];
        if !suffix_ok || tb.numel() == 0 {
            return Err(Error::shape(
                "add_broadcast",
                format!("{:?} is not a suffix of {:?}", tb.shape, tx.shape),
            ));
        }
        let n = tb.numel();
        let mut data = tx.data.clone();
        for chunk in data.chunks_mut(n) {
            for (d, s) in chunk.iter_mut().zip(&tb.data) {
                *d += s;
            }
        }
        let out = Tensor::from_parts(tx.shape.clone(), data);
        Ok(self.push(out, Op::AddBroadcast(x, b), &[x, b]))
    }

    /// Divides row `i` of `x` (first axis) by `d[i]`.
    pub fn div_rows(&mut self, x: Var, d: Var) -> Result<Var> {
        let (tx, td) = (self.value(x), self.value(d));
        let rows = tx.shape.first().copied().unwrap_or(0);
        if td.numel() != rows || rows == 0 {
            return Err(Error::shape(
                "div_rows",
                format!("{} divisors for shape {:?}", td.numel(), tx.shape),
            ));
        }
        if td.data.iter().any(|&v| v == 0.0) {
            return Err(Error::DivisionByZero("div_rows"));
        }
        let width = tx.numel() / rows;
        let mut data = tx.data.clone();
        for (chunk, &div) in data.chunks_mut(width).zip(&td.data) {
            for v in chunk {
                *v /= div;
            }
        }
        let out = Tensor::from_parts(tx.shape.clone(), data);
        Ok(self.push(out, Op::DivRows(x, d), &[x, d]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst(x), &[x])
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        check_scalar("mul_scalar", self.value(s))?;
        let c = self.value(s).data[0];
        let out = self.value(x).map(|v| v * c);
        Ok(self.push(out, Op::MulScalar(x, s), &[x, s]))
    }

    /// `x + s` for a one-element `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        check_scalar("add_scalar", self.value(s))?;
        let c = self.value(s).data[0];
        let out = self.value(x).map(|v| v + c);
        Ok(self.push(out, Op::AddScalar(x, s), &[x, s]))
    }

    /// `x - s` for a one-element `s`.
    pub fn sub_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        check_scalar("sub_scalar", self.value(s))?;
        let c = self.value(s).data[0];
        let out = self.value(x).map(|v| v - c);
        Ok(self.push(out, Op::SubScalar(x, s), &[x, s]))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |v| v.max(0.0),
            Unary::Sigmoid => |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Sqrt => f64::sqrt,
            Unary::Recip => |v| 1.0 / v,
            Unary::Square => |v| v * v,
        };
        let out = self.value(x).map(f);
        self.push(out, Op::Unary(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Recip)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    /// Sums over the first axis of a matrix: `[m, n] -> [n]`.
    pub fn column_sums(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, n) = t.dims2()?;
        let mut out = vec![0.0; n];
        for row in t.data.chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let out = Tensor::vector(out);
        Ok(self.push(out, Op::ColumnSums(x), &[x]))
    }

    /// Row-wise `softmax(x / temperature)` over the last axis, stabilized by
    /// subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::contract(
                "softmax_rows",
                "temperature must be positive",
            ));
        }
        let t = self.value(x);
        let n = last_dim(t);
        let mut data = t.data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row, temperature);
        }
        let out = Tensor::from_parts(t.shape.clone(), data);
        Ok(self.push(out, Op::SoftmaxRows { x, temperature }, &[x]))
    }

    /// Layer normalization of every row (last axis) of `x` with gain `alpha`
    /// and bias `beta`; population variance.
    pub fn layer_norm_rows(&mut self, x: Var, alpha: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, ta, tb) = (self.value(x), self.value(alpha), self.value(beta));
        let n = last_dim(tx);
        if ta.numel() != n || tb.numel() != n {
            return Err(Error::shape(
                "layer_norm_rows",
                format!(
                    "rows of width {n}, alpha {:?}, beta {:?}",
                    ta.shape, tb.shape
                ),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::contract("layer_norm_rows", "eps must be positive"));
        }
        let rows = tx.numel() / n;
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data.chunks(n) {
            let (mean, is) = moments(row, eps);
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                data.push(ta.data[j] * h + tb.data[j]);
            }
        }
        let out = Tensor::from_parts(tx.shape.clone(), data);
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x,
                alpha,
                beta,
                xhat,
                inv_std,
            },
            &[x, alpha, beta],
        ))
    }

    /// 2-D convolution over `x: [B, H, W, Cin]` with `w: [k, k, Cin, Cout]`
    /// and `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let [batch, h, wd, cin] = tx.shape[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [B,H,W,C], got {:?}", tx.shape),
            ));
        };
        let [k, k2, wcin, cout] = tw.shape[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be [k,k,Cin,Cout], got {:?}", tw.shape),
            ));
        };
        if k != k2
            || wcin != cin
            || tb.numel() != cout
            || stride == 0
            || h + 2 * pad < k
            || wd + 2 * pad < k
        {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}, stride {stride}, pad {pad}",
                    tx.shape, tw.shape, tb.shape
                ),
            ));
        }
        let geom = ConvGeometry {
            big_h: h,
            big_w: wd,
            small_h: (h + 2 * pad - k) / stride + 1,
            small_w: (wd + 2 * pad - k) / stride + 1,
            kernel: k,
            stride,
            pad,
            channels: cin,
        };
        let cells = geom.small_cells();
        let pl = geom.patch_len();
        let mut out = vec![0.0; batch * cells * cout];
        let mut cols = vec![0.0; cells * pl];
        for (img, dst) in tx
            .data
            .chunks(geom.big_len())
            .zip(out.chunks_mut(cells * cout))
        {
            geom.gather(img, &mut cols);
            for row in dst.chunks_mut(cout) {
                row.copy_from_slice(&tb.data);
            }
            gemm(
                cells, pl, cout, 1.0, &cols, false, &tw.data, false, 1.0, dst,
            );
        }
        let out = Tensor::from_parts(vec![batch, geom.small_h, geom.small_w, cout], out);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_channels: cout,
            },
            &[x, w, b],
        ))
    }

    /// Transposed 2-D convolution over `x: [B, H, W, Cin]` with
    /// `w: [Cin, k, k, Cout]`, `b: [Cout]`. Output extent is
    /// `(H - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let [batch, h, wd, cin] = tx.shape[..] else {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input must be [B,H,W,C], got {:?}", tx.shape),
            ));
        };
        let [wcin, k, k2, cout] = tw.shape[..] else {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("weight must be [Cin,k,k,Cout], got {:?}", tw.shape),
            ));
        };
        let full_h = (h.max(1) - 1) * stride + k + out_pad;
        let full_w = (wd.max(1) - 1) * stride + k + out_pad;
        if k != k2
            || wcin != cin
            || tb.numel() != cout
            || stride == 0
            || h == 0
            || wd == 0
            || full_h <= 2 * pad
            || full_w <= 2 * pad
        {
            return Err(Error::shape(
                "conv_transpose2d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}, stride {stride}, pad {pad}",
                    tx.shape, tw.shape, tb.shape
                ),
            ));
        }
        let geom = ConvGeometry {
            big_h: full_h - 2 * pad,
            big_w: full_w - 2 * pad,
            small_h: h,
            small_w: wd,
            kernel: k,
            stride,
            pad,
            channels: cout,
        };
        let cells = geom.small_cells();
        let pl = geom.patch_len();
        let big = geom.big_len();
        let mut out = vec![0.0; batch * big];
        let mut cols = vec![0.0; cells * pl];
        for (img, dst) in tx.data.chunks(cells * cin).zip(out.chunks_mut(big)) {
            gemm(
                cells, cin, pl, 1.0, img, false, &tw.data, false, 0.0, &mut cols,
            );
            for px in dst.chunks_mut(cout) {
                px.copy_from_slice(&tb.data);
            }
            geom.scatter_add(&cols, dst);
        }
        let out = Tensor::from_parts(vec![batch, geom.big_h, geom.big_w, cout], out);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                batch,
                in_channels: cin,
            },
            &[x, w, b],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows", "nothing to concatenate"))?;
        let tail = self.value(*first).shape.get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_rows",
                    format!("trailing shape {:?} vs {:?}", t.shape, tail),
                ));
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape.first().copied().unwrap_or(0);
        if start + len > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let width = if rows == 0 { 0 } else { t.numel() / rows };
        let data = t.data[start * width..(start + len) * width].to_vec();
        let mut shape = t.shape.clone();
        shape[0] = len;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// `[B, D] -> [B, reps, D]`, copying each row `reps` times.
    pub fn broadcast_rows(&mut self, x: Var, reps: usize) -> Result<Var> {
        let t = self.value(x);
        let (b, d) = t.dims2()?;
        let mut data = Vec::with_capacity(b * reps * d);
        for row in t.data.chunks(d) {
            for _ in 0..reps {
                data.extend_from_slice(row);
            }
        }
        let out = Tensor::from_parts(vec![b, reps, d], data);
        Ok(self.push(out, Op::BroadcastRows { x, reps }, &[x]))
    }

    /// Blends per-slot decodings `x: [L, K, P, C + 1]` (last channel is the
    /// alpha logit) into `[L, P, C]`. Masks are the softmax of the logits over
    /// the slot axis and are returned as `[L, K, P]`.
    pub fn alpha_blend(&mut self, x: Var) -> Result<(Var, Tensor)> {
        let t = self.value(x);
        let [l, k, p, c1] = t.shape[..] else {
            return Err(Error::shape(
                "alpha_blend",
                format!("expected [L,K,P,C+1], got {:?}", t.shape),
            ));
        };
        if k == 0 || c1 < 2 {
            return Err(Error::shape(
                "alpha_blend",
                format!("degenerate shape {:?}", t.shape),
            ));
        }
        let c = c1 - 1;
        let mut masks = vec![0.0; l * k * p];
        let mut out = vec![0.0; l * p * c];
        let mut logits = vec![0.0; k];
        for li in 0..l {
            let img = &t.data[li * k * p * c1..(li + 1) * k * p * c1];
            for pi in 0..p {
                for (ki, lg) in logits.iter_mut().enumerate() {
                    *lg = img[(ki * p + pi) * c1 + c];
                }
                softmax_in_place(&mut logits, 1.0);
                let dst = &mut out[(li * p + pi) * c..][..c];
                // Fixed ascending slot order for reproducible sums.
                for (ki, &m) in logits.iter().enumerate() {
                    masks[(li * k + ki) * p + pi] = m;
                    let rgb = &img[(ki * p + pi) * c1..][..c];
                    for (d, v) in dst.iter_mut().zip(rgb) {
                        *d += m * v;
                    }
                }
            }
        }
        let masks_t = Tensor::from_parts(vec![l, k, p], masks.clone());
        let out = Tensor::from_parts(vec![l, p, c], out);
        let var = self.push(
            out,
            Op::AlphaBlend {
                x,
                masks,
                slots: k,
                pixels: p,
                channels: c,
            },
            &[x],
        );
        Ok((var, masks_t))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("backward", "loss is not on this tape"))?;
        if node.value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", node.value.shape),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(node.value.shape.clone(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            if i == loss.0 || matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient accumulator for `v`, created on first use; `None` when `v`
    /// does not lead back to a leaf.
    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&node.value.shape));
        Some(&mut slot.data)
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let gd = &g.data;
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if let Some(da) = self.acc(grads, *a) {
                    gemm(m, n, k, 1.0, gd, false, &tb.data, true, 1.0, da);
                }
                if let Some(db) = self.acc(grads, *b) {
                    gemm(k, m, n, 1.0, &ta.data, true, gd, false, 1.0, db);
                }
            }
            Op::Transpose(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    let (r, c) = (out.shape[0], out.shape[1]);
                    for p in 0..r {
                        for q in 0..c {
                            da[q * r + p] += gd[p * c + q];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(da) = self.acc(grads, *a) {
                    add_scaled(da, gd, 1.0);
                }
                if let Some(db) = self.acc(grads, *b) {
                    add_scaled(db, gd, sign);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, g), y) in da.iter_mut().zip(gd).zip(&tb.data) {
                        *d += g * y;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, g), x) in db.iter_mut().zip(gd).zip(&ta.data) {
                        *d += g * x;
                    }
                }
            }
            Op::AddBroadcast(x, b) => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_scaled(dx, gd, 1.0);
                }
                if let Some(db) = self.acc(grads, *b) {
                    let n = db.len();
                    for chunk in gd.chunks(n) {
                        add_scaled(db, chunk, 1.0);
                    }
                }
            }
            Op::DivRows(x, d) => {
                let (tx, td) = (self.value(*x), self.value(*d));
                let width = tx.numel() / td.numel();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((dst, src), &div) in
                        dx.chunks_mut(width).zip(gd.chunks(width)).zip(&td.data)
                    {
                        add_scaled(dst, src, 1.0 / div);
                    }
                }
                if let Some(dd) = self.acc(grads, *d) {
                    for (r, (src, xs)) in gd.chunks(width).zip(tx.data.chunks(width)).enumerate() {
                        let div = td.data[r];
                        let dot: f64 = src.iter().zip(xs).map(|(g, x)| g * x).sum();
                        dd[r] -= dot / (div * div);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_scaled(dx, gd, *c);
                }
            }
            Op::AddConst(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_scaled(dx, gd, 1.0);
                }
            }
            Op::MulScalar(x, s) => {
                let c = self.value(*s).data[0];
                if let Some(dx) = self.acc(grads, *x) {
                    add_scaled(dx, gd, c);
                }
                let dot: f64 = gd
                    .iter()
                    .zip(&self.value(*x).data)
                    .map(|(g, v)| g * v)
                    .sum();
                if let Some(ds) = self.acc(grads, *s) {
                    ds[0] += dot;
                }
            }
            Op::AddScalar(x, s) | Op::SubScalar(x, s) => {
                let sign = if matches!(self.nodes[i].op, Op::SubScalar(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(dx) = self.acc(grads, *x) {
                    add_scaled(dx, gd, 1.0);
                }
                let total: f64 = gd.iter().sum();
                if let Some(ds) = self.acc(grads, *s) {
                    ds[0] += sign * total;
                }
            }
            Op::Unary(x, kind) => {
                let xs = &self.value(*x).data;
                let ys = &out.data;
                let Some(dx) = self.acc(grads, *x) else {
                    return;
                };
                for j in 0..dx.len() {
                    let (xv, yv) = (xs[j], ys[j]);
                    let local = match kind {
                        Unary::Relu => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Sigmoid => yv * (1.0 - yv),
                        Unary::Tanh => 1.0 - yv * yv,
                        Unary::Exp => yv,
                        Unary::Sqrt => 0.5 / yv,
                        Unary::Recip => -yv * yv,
                        Unary::Square => 2.0 * xv,
                    };
                    dx[j] += gd[j] * local;
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.value(*x).numel();
                let scale = if matches!(self.nodes[i].op, Op::Mean(_)) {
                    gd[0] / n as f64
                } else {
                    gd[0]
                };
                if let Some(dx) = self.acc(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += scale;
                    }
                }
            }
            Op::ColumnSums(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    let n = gd.len();
                    for row in dx.chunks_mut(n) {
                        add_scaled(row, gd, 1.0);
                    }
                }
            }
            Op::SoftmaxRows { x, temperature } => {
                let n = last_dim(out);
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, y), g) in dx.chunks_mut(n).zip(out.data.chunks(n)).zip(gd.chunks(n)) {
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[j] += y[j] * (g[j] - dot) / temperature;
                        }
                    }
                }
            }
            Op::LayerNormRows {
                x,
                alpha,
                beta,
                xhat,
                inv_std,
            } => {
                let n = last_dim(out);
                let ta = &self.value(*alpha).data;
                if let Some(db) = self.acc(grads, *beta) {
                    for row in gd.chunks(n) {
                        add_scaled(db, row, 1.0);
                    }
                }
                if let Some(da) = self.acc(grads, *alpha) {
                    for (row, h) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            da[j] += row[j] * h[j];
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let nf = n as f64;
                    let mut dh = vec![0.0; n];
                    for (r, ((d, row), h)) in dx
                        .chunks_mut(n)
                        .zip(gd.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        for j in 0..n {
                            dh[j] = row[j] * ta[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / nf;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            d[j] += inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_channels,
            } => {
                let cout = *out_channels;
                let cells = geom.small_cells();
                let pl = geom.patch_len();
                let (tx, tw) = (self.value(*x), self.value(*w));
                if let Some(db) = self.acc(grads, *b) {
                    for row in gd.chunks(cout) {
                        add_scaled(db, row, 1.0);
                    }
                }
                let need_w = self.nodes[w.0].needs_grad;
                let need_x = self.nodes[x.0].needs_grad;
                let mut cols = vec![0.0; cells * pl];
                if need_w {
                    let dw = self.acc(grads, *w).expect("checked");
                    for bi in 0..*batch {
                        geom.gather(&tx.data[bi * geom.big_len()..][..geom.big_len()], &mut cols);
                        let dy = &gd[bi * cells * cout..][..cells * cout];
                        gemm(pl, cells, cout, 1.0, &cols, true, dy, false, 1.0, dw);
                    }
                }
                if need_x {
                    let dx = self.acc(grads, *x).expect("checked");
                    for bi in 0..*batch {
                        let dy = &gd[bi * cells * cout..][..cells * cout];
                        gemm(
                            cells, cout, pl, 1.0, dy, false, &tw.data, true, 0.0, &mut cols,
                        );
                        geom.scatter_add(&cols, &mut dx[bi * geom.big_len()..][..geom.big_len()]);
                    }
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                batch,
                in_channels,
            } => {
                let cin = *in_channels;
                let cout = geom.channels;
                let cells = geom.small_cells();
                let pl = geom.patch_len();
                let big = geom.big_len();
                let (tx, tw) = (self.value(*x), self.value(*w));
                if let Some(db) = self.acc(grads, *b) {
                    for px in gd.chunks(cout) {
                        add_scaled(db, px, 1.0);
                    }
                }
                let need_w = self.nodes[w.0].needs_grad;
                let need_x = self.nodes[x.0].needs_grad;
                if !(need_w || need_x) {
                    return;
                }
                let mut cols = vec![0.0; cells * pl];
                for bi in 0..*batch {
                    geom.gather(&gd[bi * big..][..big], &mut cols);
                    if need_w {
                        let dw = self.acc(grads, *w).expect("checked");
                        let xb = &tx.data[bi * cells * cin..][..cells * cin];
                        gemm(cin, cells, pl, 1.0, xb, true, &cols, false, 1.0, dw);
                    }
                    if need_x {
                        let dx = self.acc(grads, *x).expect("checked");
                        let dxb = &mut dx[bi * cells * cin..][..cells * cin];
                        gemm(cells, pl, cin, 1.0, &cols, false, &tw.data, true, 1.0, dxb);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_scaled(dx, gd, 1.0);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if let Some(dp) = self.acc(grads, *p) {
                        add_scaled(dp, &gd[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let rows = out.shape[0];
                let width = if rows == 0 { 0 } else { out.numel() / rows };
                if let Some(dx) = self.acc(grads, *x) {
                    add_scaled(&mut dx[start * width..(start + rows) * width], gd, 1.0);
                }
            }
            Op::BroadcastRows { x, reps } => {
                if let Some(dx) = self.acc(grads, *x) {
                    let d = out.shape[2];
                    for (row, block) in dx.chunks_mut(d).zip(gd.chunks(d * reps)) {
                        for rep in block.chunks(d) {
                            add_scaled(row, rep, 1.0);
                        }
                    }
                }
            }
            Op::AlphaBlend {
                x,
                masks,
                slots,
                pixels,
                channels,
            } => {
                let (k, p, c) = (*slots, *pixels, *channels);
                let c1 = c + 1;
                let tx = &self.value(*x).data;
                let Some(dx) = self.acc(grads, *x) else {
                    return;
                };
                let l = gd.len() / (p * c);
                let mut dm = vec![0.0; k];
                for li in 0..l {
                    let img = &tx[li * k * p * c1..][..k * p * c1];
                    let dimg = &mut dx[li * k * p * c1..][..k * p * c1];
                    for pi in 0..p {
                        let go = &gd[(li * p + pi) * c..][..c];
                        let mut weighted = 0.0;
                        for ki in 0..k {
                            let m = masks[(li * k + ki) * p + pi];
                            let base = (ki * p + pi) * c1;
                            let rgb = &img[base..base + c];
                            dm[ki] = go.iter().zip(rgb).map(|(a, b)| a * b).sum();
                            weighted += m * dm[ki];
                            for ch in 0..c {
                                dimg[base + ch] += go[ch] * m;
                            }
                        }
                        for ki in 0..k {
                            let m = masks[(li * k + ki) * p + pi];
                            dimg[(ki * p + pi) * c1 + c] += m * (dm[ki] - weighted);
                        }
                    }
                }
            }
        }
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
