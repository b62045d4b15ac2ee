//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every differentiable computation in the crate is recorded as a flat list
//! of nodes; [`Tape::backward`] walks the list once in reverse. Variables are
//! plain indices ([`Var`]), values are dense `f64` tensors. The op set is
//! exactly what the models need: matrix products, row/column broadcasts,
//! pointwise nonlinearities, softmaxes (including a structurally causal one),
//! small convolutions, and gather/scatter for code lookups.
//!
//! Matrix ops treat values as 2-D `[rows, cols]`; convolution ops treat them
//! as `[h, w, c]` (weights `[kh, kw, cin, cout]`). `reshape` mediates between
//! the two views; both are row-major over the same buffer.

use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    MatmulTN(Var, Var),
    MatmulNT(Var, Var),
    /// `x: [m, n] + r: [1, n]`, row vector broadcast down the rows.
    AddRow(Var, Var),
    MulRow(Var, Var),
    /// `x: [m, n] / r: [1, n]`.
    DivRow(Var, Var),
    /// `x: [m, n] * c: [m, 1]`, column vector broadcast across the columns.
    MulCol(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Square `[t, t]` scores; row `i` is a softmax over columns `0..=i`.
    /// Masked columns are never read or written, so future positions cannot
    /// influence earlier rows even at the bit level.
    CausalSoftmax(Var),
    /// `p: [t, t]` lower-triangular attention, `v: [t, c]`;
    /// `out[i] = sum_{j<=i} p[i,j] v[j]`. Masked entries of `p` are skipped
    /// structurally rather than multiplied by zero.
    TriMatmul(Var, Var),
    /// Per-row `(x - mean) / sqrt(var + eps)`, biased variance.
    LayerNormRows(Var, f64),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    ColSums(Var),
    Detach,
    /// Forward takes the value of the second var; gradient flows to the first.
    StraightThrough(Var),
    IndexSelectRows(Var, Vec<usize>),
    /// `out[i, 0] = t[i, idx[i]]`.
    GatherPerRow(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        reflect: bool,
    },
    /// Transposed conv, kernel 2, stride 2: doubles spatial dims.
    ConvT2x2 {
        x: Var,
        w: Var,
        b: Var,
    },
    SliceCols(Var, usize, usize),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Reshape(Var),
    /// `[1, n] -> [m, n]`.
    RepeatRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Reflect-or-zero padding lookup: maps a possibly out-of-range index into
/// the valid range, or `None` when zero padding applies.
fn pad_map(i: isize, n: usize, reflect: bool) -> Option<usize> {
    if i < 0 {
        if reflect {
            Some((-i) as usize)
        } else {
            None
        }
    } else if (i as usize) < n {
        Some(i as usize)
    } else if reflect {
        Some(2 * n - 2 - i as usize)
    } else {
        None
    }
}

/// Plain (non-recorded) conv forward; also used by the frozen backbone.
/// `x: [h, w, cin]`, `w: [kh, kw, cin, cout]`, `b: [cout]`.
pub fn conv2d_ref(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize, reflect: bool) -> Tensor {
    assert_eq!(x.shape.len(), 3, "conv input must be [h,w,c], got {:?}", x.shape);
    assert_eq!(w.shape.len(), 4, "conv weight must be [kh,kw,cin,cout], got {:?}", w.shape);
    let (h, iw, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kh, kw, wcin, cout) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(cin, wcin, "conv channel mismatch");
    assert_eq!(b.numel(), cout, "conv bias length");
    if reflect {
        assert!(pad < h && pad < iw, "reflect pad needs pad < spatial dims");
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (iw + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![oh, ow, cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..kh {
                let Some(iy) = pad_map((oy * stride + ky) as isize - pad as isize, h, reflect) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = pad_map((ox * stride + kx) as isize - pad as isize, iw, reflect) else {
                        continue;
                    };
                    let xoff = (iy * iw + ix) * cin;
                    let woff = (ky * kw + kx) * cin * cout;
                    let ooff = (oy * ow + ox) * cout;
                    for ci in 0..cin {
                        let xv = x.data[xoff + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &w.data[woff + ci * cout..woff + (ci + 1) * cout];
                        for co in 0..cout {
                            out.data[ooff + co] += xv * wrow[co];
                        }
                    }
                }
            }
            let ooff = (oy * ow + ox) * cout;
            for co in 0..cout {
                out.data[ooff + co] += b.data[co];
            }
        }
    }
    out
}

/// Plain transposed conv forward, kernel 2 stride 2.
/// `x: [h, w, cin]`, `w: [2, 2, cin, cout]` -> `[2h, 2w, cout]`.
pub fn convt2x2_ref(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(x.shape.len(), 3);
    assert_eq!(w.shape[0], 2);
    assert_eq!(w.shape[1], 2);
    let (h, iw, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let cout = w.shape[3];
    assert_eq!(w.shape[2], cin);
    assert_eq!(b.numel(), cout);
    let (oh, ow) = (2 * h, 2 * iw);
    let mut out = Tensor::zeros(vec![oh, ow, cout]);
    for i in 0..h {
        for j in 0..iw {
            let xoff = (i * iw + j) * cin;
            for di in 0..2 {
                for dj in 0..2 {
                    let woff = (di * 2 + dj) * cin * cout;
                    let ooff = ((2 * i + di) * ow + (2 * j + dj)) * cout;
                    for ci in 0..cin {
                        let xv = x.data[xoff + ci];
                        let wrow = &w.data[woff + ci * cout..woff + (ci + 1) * cout];
                        for co in 0..cout {
                            out.data[ooff + co] += xv * wrow[co];
                        }
                    }
                }
            }
        }
    }
    for p in 0..oh * ow {
        for co in 0..cout {
            out.data[p * cout + co] += b.data[co];
        }
    }
    out
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value on tape: op {:?}", op);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.val(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.val(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = matmul(self.val(a), self.val(b));
        self.push(t, Op::Matmul(a, b))
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let t = matmul_tn(self.val(a), self.val(b));
        self.push(t, Op::MatmulTN(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let t = matmul_nt(self.val(a), self.val(b));
        self.push(t, Op::MatmulNT(a, b))
    }

    fn check_row(&self, x: Var, r: Var) {
        assert_eq!(self.val(r).rows(), 1, "row operand must be [1, n]");
        assert_eq!(self.val(x).cols(), self.val(r).cols(), "row broadcast width mismatch");
    }

    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        self.check_row(x, r);
        let (tx, tr) = (self.val(x), self.val(r));
        let n = tx.cols();
        let data = tx.data.iter().enumerate().map(|(i, &v)| v + tr.data[i % n]).collect();
        let shape = tx.shape.clone();
        self.push(Tensor::new(shape, data), Op::AddRow(x, r))
    }

    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        self.check_row(x, r);
        let (tx, tr) = (self.val(x), self.val(r));
        let n = tx.cols();
        let data = tx.data.iter().enumerate().map(|(i, &v)| v * tr.data[i % n]).collect();
        let shape = tx.shape.clone();
        self.push(Tensor::new(shape, data), Op::MulRow(x, r))
    }

    pub fn div_row(&mut self, x: Var, r: Var) -> Var {
        self.check_row(x, r);
        let (tx, tr) = (self.val(x), self.val(r));
        let n = tx.cols();
        let data = tx.data.iter().enumerate().map(|(i, &v)| v / tr.data[i % n]).collect();
        let shape = tx.shape.clone();
        self.push(Tensor::new(shape, data), Op::DivRow(x, r))
    }

    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        assert_eq!(self.val(c).cols(), 1, "col operand must be [m, 1]");
        assert_eq!(self.val(x).rows(), self.val(c).rows(), "col broadcast height mismatch");
        let (tx, tc) = (self.val(x), self.val(c));
        let n = tx.cols();
        let data = tx.data.iter().enumerate().map(|(i, &v)| v * tc.data[i / n]).collect();
        let shape = tx.shape.clone();
        self.push(Tensor::new(shape, data), Op::MulCol(x, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.val(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.val(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.val(a).map(|x| x.tanh());
        self.push(t, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let row = &ta.data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out.data[i * n + j] = e;
                s += e;
            }
            for j in 0..n {
                out.data[i * n + j] /= s;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let row = &ta.data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for j in 0..n {
                out.data[i * n + j] = row[j] - lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Row `i` of the output is `softmax(scores[i, 0..=i])`; columns past the
    /// diagonal are exactly zero and their score values are never read.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let t = ta.rows();
        assert_eq!(ta.cols(), t, "causal softmax needs a square matrix");
        let mut out = Tensor::zeros(vec![t, t]);
        for i in 0..t {
            let row = &ta.data[i * t..i * t + i + 1];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..=i {
                let e = (row[j] - mx).exp();
                out.data[i * t + j] = e;
                s += e;
            }
            for j in 0..=i {
                out.data[i * t + j] /= s;
            }
        }
        self.push(out, Op::CausalSoftmax(a))
    }

    /// `out[i] = sum_{j<=i} p[i,j] * v[j]`; entries of `p` past the diagonal
    /// are skipped, not multiplied by zero.
    pub fn tri_matmul(&mut self, p: Var, v: Var) -> Var {
        let (tp, tv) = (self.val(p), self.val(v));
        let t = tp.rows();
        assert_eq!(tp.cols(), t, "tri_matmul left operand must be square");
        assert_eq!(tv.rows(), t, "tri_matmul row mismatch");
        let c = tv.cols();
        let mut out = Tensor::zeros(vec![t, c]);
        for i in 0..t {
            for j in 0..=i {
                let pv = tp.data[i * t + j];
                let vrow = &tv.data[j * c..(j + 1) * c];
                let orow = &mut out.data[i * c..(i + 1) * c];
                for k in 0..c {
                    orow[k] += pv * vrow[k];
                }
            }
        }
        self.push(out, Op::TriMatmul(p, v))
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.val(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let row = &ta.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out.data[i * n + j] = (row[j] - mean) * inv;
            }
        }
        self.push(out, Op::LayerNormRows(a, eps))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(vec![m, 1]);
        for i in 0..m {
            out.data[i] = ta.data[i * n..(i + 1) * n].iter().sum();
        }
        self.push(out, Op::RowSums(a))
    }

    pub fn col_sums(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(vec![1, n]);
        for i in 0..m {
            for j in 0..n {
                out.data[j] += ta.data[i * n + j];
            }
        }
        self.push(out, Op::ColSums(a))
    }

    /// Value passes through; gradient stops here.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.val(a).clone();
        self.push(t, Op::Detach)
    }

    /// Straight-through estimator: forward value of `value_src`, gradient
    /// routed to `grad_dst`. Shapes must match.
    pub fn straight_through(&mut self, grad_dst: Var, value_src: Var) -> Var {
        assert_eq!(
            self.val(grad_dst).shape,
            self.val(value_src).shape,
            "straight_through shape mismatch"
        );
        let t = self.val(value_src).clone();
        self.push(t, Op::StraightThrough(grad_dst))
    }

    pub fn index_select_rows(&mut self, t: Var, idx: &[usize]) -> Var {
        let tt = self.val(t);
        let (m, n) = (tt.rows(), tt.cols());
        let mut out = Tensor::zeros(vec![idx.len(), n]);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < m, "index_select_rows index {} out of {}", i, m);
            out.data[r * n..(r + 1) * n].copy_from_slice(&tt.data[i * n..(i + 1) * n]);
        }
        self.push(out, Op::IndexSelectRows(t, idx.to_vec()))
    }

    pub fn gather_per_row(&mut self, t: Var, idx: &[usize]) -> Var {
        let tt = self.val(t);
        let (m, n) = (tt.rows(), tt.cols());
        assert_eq!(idx.len(), m, "gather_per_row needs one index per row");
        let mut out = Tensor::zeros(vec![m, 1]);
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < n, "gather index {} out of {}", j, n);
            out.data[i] = tt.data[i * n + j];
        }
        self.push(out, Op::GatherPerRow(t, idx.to_vec()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize, reflect: bool) -> Var {
        let t = conv2d_ref(self.val(x), self.val(w), self.val(b), stride, pad, reflect);
        self.push(t, Op::Conv2d { x, w, b, stride, pad, reflect })
    }

    pub fn convt2x2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let t = convt2x2_ref(self.val(x), self.val(w), self.val(b));
        self.push(t, Op::ConvT2x2 { x, w, b })
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let ta = self.val(a);
        let (m, n) = (ta.rows(), ta.cols());
        assert!(lo < hi && hi <= n, "slice_cols bounds {}..{} of {}", lo, hi, n);
        let mut out = Tensor::zeros(vec![m, hi - lo]);
        for i in 0..m {
            out.data[i * (hi - lo)..(i + 1) * (hi - lo)].copy_from_slice(&ta.data[i * n + lo..i * n + hi]);
        }
        self.push(out, Op::SliceCols(a, lo, hi))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let m = ta.rows();
        assert_eq!(m, tb.rows(), "concat_cols row mismatch");
        let (na, nb) = (ta.cols(), tb.cols());
        let mut out = Tensor::zeros(vec![m, na + nb]);
        for i in 0..m {
            out.data[i * (na + nb)..i * (na + nb) + na].copy_from_slice(&ta.data[i * na..(i + 1) * na]);
            out.data[i * (na + nb) + na..(i + 1) * (na + nb)].copy_from_slice(&tb.data[i * nb..(i + 1) * nb]);
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let n = ta.cols();
        assert_eq!(n, tb.cols(), "concat_rows col mismatch");
        let (ma, mb) = (ta.rows(), tb.rows());
        let mut data = Vec::with_capacity((ma + mb) * n);
        data.extend_from_slice(&ta.data);
        data.extend_from_slice(&tb.data);
        self.push(Tensor::new(vec![ma + mb, n], data), Op::ConcatRows(a, b))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.val(a).reshaped(shape);
        self.push(t, Op::Reshape(a))
    }

    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Var {
        let ta = self.val(a);
        assert_eq!(ta.rows(), 1, "repeat_rows input must be [1, n]");
        let n = ta.cols();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(&ta.data);
        }
        self.push(Tensor::new(vec![m, n], data), Op::RepeatRows(a))
    }

    /// Mean squared error between two same-shaped vars, as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape.clone(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].clone() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accum(&mut grads, *a, dout.clone());
                    accum(&mut grads, *b, dout);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, dout.clone());
                    accum(&mut grads, *b, dout.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let da = Tensor::new(
                        dout.shape.clone(),
                        dout.data.iter().zip(&self.val(*b).data).map(|(&g, &y)| g * y).collect(),
                    );
                    let db = Tensor::new(
                        dout.shape.clone(),
                        dout.data.iter().zip(&self.val(*a).data).map(|(&g, &x)| g * x).collect(),
                    );
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accum(&mut grads, *a, dout.map(|v| v * c));
                }
                Op::AddScalar(a) => accum(&mut grads, *a, dout),
                Op::Matmul(a, b) => {
                    accum(&mut grads, *a, matmul_nt(&dout, self.val(*b)));
                    accum(&mut grads, *b, matmul_tn(self.val(*a), &dout));
                }
                Op::MatmulTN(a, b) => {
                    // out = a^T b; da = b dout^T -> [k, m]; db = a dout.
                    accum(&mut grads, *a, matmul_nt(self.val(*b), &dout));
                    accum(&mut grads, *b, matmul(self.val(*a), &dout));
                }
                Op::MatmulNT(a, b) => {
                    // out = a b^T; da = dout b; db = dout^T a.
                    accum(&mut grads, *a, matmul(&dout, self.val(*b)));
                    accum(&mut grads, *b, matmul_tn(&dout, self.val(*a)));
                }
                Op::AddRow(x, r) => {
                    accum(&mut grads, *x, dout.clone());
                    accum(&mut grads, *r, col_sums_of(&dout));
                }
                Op::MulRow(x, r) => {
                    let (tx, tr) = (self.val(*x), self.val(*r));
                    let n = tx.cols();
                    let dx = Tensor::new(
                        dout.shape.clone(),
                        dout.data.iter().enumerate().map(|(i, &g)| g * tr.data[i % n]).collect(),
                    );
                    let mut dr = Tensor::zeros(vec![1, n]);
                    for (i, &g) in dout.data.iter().enumerate() {
                        dr.data[i % n] += g * tx.data[i];
                    }
                    accum(&mut grads, *x, dx);
                    accum(&mut grads, *r, dr);
                }
                Op::DivRow(x, r) => {
                    let (tx, tr) = (self.val(*x), self.val(*r));
                    let n = tx.cols();
                    let dx = Tensor::new(
                        dout.shape.clone(),
                        dout.data.iter().enumerate().map(|(i, &g)| g / tr.data[i % n]).collect(),
                    );
                    let mut dr = Tensor::zeros(vec![1, n]);
                    for (i, &g) in dout.data.iter().enumerate() {
                        let rv = tr.data[i % n];
                        dr.data[i % n] -= g * tx.data[i] / (rv * rv);
                    }
                    accum(&mut grads, *x, dx);
                    accum(&mut grads, *r, dr);
                }
                Op::MulCol(x, c) => {
                    let (tx, tc) = (self.val(*x), self.val(*c));
                    let n = tx.cols();
                    let dx = Tensor::new(
                        dout.shape.clone(),
                        dout.data.iter().enumerate().map(|(i, &g)| g * tc.data[i / n]).collect(),
                    );
                    let mut dc = Tensor::zeros(vec![tx.rows(), 1]);
                    for (i, &g) in dout.data.iter().enumerate() {
                        dc.data[i / n] += g * tx.data[i];
                    }
                    accum(&mut grads, *x, dx);
                    accum(&mut grads, *c, dc);
                }
                Op::Relu(a) => {
                    let ta = self.val(*a);
                    let d = Tensor::new(
                        dout.shape.clone(),
                        dout.data.iter().zip(&ta.data).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect(),
                    );
                    accum(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let ty = &self.nodes[idx].value;
                    let d = Tensor::new(
                        dout.shape.clone(),
                        dout.data.iter().zip(&ty.data).map(|(&g, &y)| g * y * (1.0 - y)).collect(),
                    );
                    accum(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let ty = &self.nodes[idx].value;
                    let d = Tensor::new(
                        dout.shape.clone(),
                        dout.data.iter().zip(&ty.data).map(|(&g, &y)| g * (1.0 - y * y)).collect(),
                    );
                    accum(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let p = &self.nodes[idx].value;
                    let (m, n) = (p.rows(), p.cols());
                    let mut d = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        let prow = &p.data[i * n..(i + 1) * n];
                        let grow = &dout.data[i * n..(i + 1) * n];
                        let dot: f64 = prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                        for j in 0..n {
                            d.data[i * n + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    accum(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut d = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        let yrow = &y.data[i * n..(i + 1) * n];
                        let grow = &dout.data[i * n..(i + 1) * n];
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..n {
                            d.data[i * n + j] = grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                    accum(&mut grads, *a, d);
                }
                Op::CausalSoftmax(a) => {
                    let p = &self.nodes[idx].value;
                    let t = p.rows();
                    let mut d = Tensor::zeros(vec![t, t]);
                    for i in 0..t {
                        let prow = &p.data[i * t..i * t + i + 1];
                        let grow = &dout.data[i * t..i * t + i + 1];
                        let dot: f64 = prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                        for j in 0..=i {
                            d.data[i * t + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    accum(&mut grads, *a, d);
                }
                Op::TriMatmul(p, v) => {
                    let (tp, tv) = (self.val(*p), self.val(*v));
                    let t = tp.rows();
                    let c = tv.cols();
                    let mut dp = Tensor::zeros(vec![t, t]);
                    let mut dv = Tensor::zeros(vec![t, c]);
                    for i in 0..t {
                        let grow = &dout.data[i * c..(i + 1) * c];
                        for j in 0..=i {
                            let vrow = &tv.data[j * c..(j + 1) * c];
                            let mut s = 0.0;
                            for k in 0..c {
                                s += grow[k] * vrow[k];
                            }
                            dp.data[i * t + j] = s;
                            let pv = tp.data[i * t + j];
                            for k in 0..c {
                                dv.data[j * c + k] += pv * grow[k];
                            }
                        }
                    }
                    accum(&mut grads, *p, dp);
                    accum(&mut grads, *v, dv);
                }
                Op::LayerNormRows(a, eps) => {
                    let ta = self.val(*a);
                    let y = &self.nodes[idx].value;
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut d = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        let row = &ta.data[i * n..(i + 1) * n];
                        let yrow = &y.data[i * n..(i + 1) * n];
                        let grow = &dout.data[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = grow.iter().sum::<f64>() / n as f64;
                        let gydot = grow.iter().zip(yrow).map(|(&g, &yv)| g * yv).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d.data[i * n + j] = inv * (grow[j] - gmean - yrow[j] * gydot);
                        }
                    }
                    accum(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let g = dout.data[0];
                    let shape = self.val(*a).shape.clone();
                    accum(&mut grads, *a, Tensor::full(shape, g));
                }
                Op::Mean(a) => {
                    let ta = self.val(*a);
                    let g = dout.data[0] / ta.numel() as f64;
                    accum(&mut grads, *a, Tensor::full(ta.shape.clone(), g));
                }
                Op::RowSums(a) => {
                    let ta = self.val(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut d = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        for j in 0..n {
                            d.data[i * n + j] = dout.data[i];
                        }
                    }
                    accum(&mut grads, *a, d);
                }
                Op::ColSums(a) => {
                    let ta = self.val(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut d = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        d.data[i * n..(i + 1) * n].copy_from_slice(&dout.data[..n]);
                    }
                    accum(&mut grads, *a, d);
                }
                Op::Detach => {}
                Op::StraightThrough(g) => accum(&mut grads, *g, dout),
                Op::IndexSelectRows(t, idx2) => {
                    let tt = self.val(*t);
                    let (m, n) = (tt.rows(), tt.cols());
                    let mut d = Tensor::zeros(vec![m, n]);
                    for (r, &i) in idx2.iter().enumerate() {
                        for j in 0..n {
                            d.data[i * n + j] += dout.data[r * n + j];
                        }
                    }
                    accum(&mut grads, *t, d);
                }
                Op::GatherPerRow(t, idx2) => {
                    let tt = self.val(*t);
                    let (m, n) = (tt.rows(), tt.cols());
                    let mut d = Tensor::zeros(vec![m, n]);
                    for (i, &j) in idx2.iter().enumerate() {
                        d.data[i * n + j] += dout.data[i];
                    }
                    accum(&mut grads, *t, d);
                }
                Op::Conv2d { x, w, b, stride, pad, reflect } => {
                    let (tx, tw) = (self.val(*x), self.val(*w));
                    let (h, iw, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                    let (kh, kw, _, cout) = (tw.shape[0], tw.shape[1], tw.shape[2], tw.shape[3]);
                    let (oh, ow) = (dout.shape[0], dout.shape[1]);
                    let mut dx = Tensor::zeros(vec![h, iw, cin]);
                    let mut dw = Tensor::zeros(tw.shape.clone());
                    let mut db = Tensor::zeros(self.val(*b).shape.clone());
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let ooff = (oy * ow + ox) * cout;
                            for co in 0..cout {
                                db.data[co] += dout.data[ooff + co];
                            }
                            for ky in 0..kh {
                                let Some(iy) = pad_map((oy * stride + ky) as isize - *pad as isize, h, *reflect)
                                else {
                                    continue;
                                };
                                for kx in 0..kw {
                                    let Some(ix) =
                                        pad_map((ox * stride + kx) as isize - *pad as isize, iw, *reflect)
                                    else {
                                        continue;
                                    };
                                    let xoff = (iy * iw + ix) * cin;
                                    let woff = (ky * kw + kx) * cin * cout;
                                    for ci in 0..cin {
                                        let xv = tx.data[xoff + ci];
                                        let wrow = &tw.data[woff + ci * cout..woff + (ci + 1) * cout];
                                        let mut dxv = 0.0;
                                        for co in 0..cout {
                                            let g = dout.data[ooff + co];
                                            dxv += wrow[co] * g;
                                            dw.data[woff + ci * cout + co] += xv * g;
                                        }
                                        dx.data[xoff + ci] += dxv;
                                    }
                                }
                            }
                        }
                    }
                    accum(&mut grads, *x, dx);
                    accum(&mut grads, *w, dw);
                    accum(&mut grads, *b, db);
                }
                Op::ConvT2x2 { x, w, b } => {
                    let (tx, tw) = (self.val(*x), self.val(*w));
                    let (h, iw, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                    let cout = tw.shape[3];
                    let ow = 2 * iw;
                    let mut dx = Tensor::zeros(vec![h, iw, cin]);
                    let mut dw = Tensor::zeros(tw.shape.clone());
                    let mut db = Tensor::zeros(self.val(*b).shape.clone());
                    for p in 0..dout.shape[0] * dout.shape[1] {
                        for co in 0..cout {
                            db.data[co] += dout.data[p * cout + co];
                        }
                    }
                    for i in 0..h {
                        for j in 0..iw {
                            let xoff = (i * iw + j) * cin;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    let woff = (di * 2 + dj) * cin * cout;
                                    let ooff = ((2 * i + di) * ow + (2 * j + dj)) * cout;
                                    for ci in 0..cin {
                                        let xv = tx.data[xoff + ci];
                                        let wrow = &tw.data[woff + ci * cout..woff + (ci + 1) * cout];
                                        let mut dxv = 0.0;
                                        for co in 0..cout {
                                            let g = dout.data[ooff + co];
                                            dxv += wrow[co] * g;
                                            dw.data[woff + ci * cout + co] += xv * g;
                                        }
                                        dx.data[xoff + ci] += dxv;
                                    }
                                }
                            }
                        }
                    }
                    accum(&mut grads, *x, dx);
                    accum(&mut grads, *w, dw);
                    accum(&mut grads, *b, db);
                }
                Op::SliceCols(a, lo, hi) => {
                    let ta = self.val(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let wsl = hi - lo;
                    let mut d = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        for j in 0..wsl {
                            d.data[i * n + lo + j] = dout.data[i * wsl + j];
                        }
                    }
                    accum(&mut grads, *a, d);
                }
                Op::ConcatCols(a, b) => {
                    let (na, nb) = (self.val(*a).cols(), self.val(*b).cols());
                    let m = self.val(*a).rows();
                    let mut da = Tensor::zeros(vec![m, na]);
                    let mut db = Tensor::zeros(vec![m, nb]);
                    for i in 0..m {
                        da.data[i * na..(i + 1) * na]
                            .copy_from_slice(&dout.data[i * (na + nb)..i * (na + nb) + na]);
                        db.data[i * nb..(i + 1) * nb]
                            .copy_from_slice(&dout.data[i * (na + nb) + na..(i + 1) * (na + nb)]);
                    }
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::ConcatRows(a, b) => {
                    let (ma, n) = (self.val(*a).rows(), self.val(*a).cols());
                    let mb = self.val(*b).rows();
                    let da = Tensor::new(vec![ma, n], dout.data[..ma * n].to_vec());
                    let db = Tensor::new(vec![mb, n], dout.data[ma * n..].to_vec());
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Reshape(a) => {
                    let shape = self.val(*a).shape.clone();
                    accum(&mut grads, *a, dout.reshaped(shape));
                }
                Op::RepeatRows(a) => {
                    accum(&mut grads, *a, col_sums_of(&dout));
                }
            }
        }
        Gradients { grads }
    }
}

fn col_sums_of(t: &Tensor) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let mut out = Tensor::zeros(vec![1, n]);
    for i in 0..m {
        for j in 0..n {
            out.data[j] += t.data[i * n + j];
        }
    }
    out
}

fn accum(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(g) => {
            assert_eq!(g.shape, delta.shape, "gradient shape mismatch");
            for (gv, dv) in g.data.iter_mut().zip(&delta.data) {
                *gv += dv;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
