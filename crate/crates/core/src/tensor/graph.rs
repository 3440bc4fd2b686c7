use std::collections::{HashMap, HashSet};

use rand::Rng;

use super::kernels::{self, gemm, sigmoid};
use super::{ParamStore, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the built-in differentiable primitives.
pub fn primitive_catalog() -> &'static [&'static str] {
    &[
        "matmul",
        "add",
        "mul",
        "scale",
        "softmax",
        "log_softmax",
        "layer_norm",
        "depthwise_conv1d",
        "conv1d",
        "glu",
        "sigmoid",
        "swish",
        "relu",
        "embedding",
        "concat",
        "slice",
        "transpose",
        "reshape",
        "sum",
        "mean",
        "cross_entropy",
        "dropout",
    ]
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

/// A primitive implemented outside the tensor core, e.g. the CTC loss.
///
/// A graph only accepts custom ops whose name was registered with
/// [`Graph::register_custom`].
pub trait CustomOp {
    fn name(&self) -> &'static str;
    /// `inputs` are `(rows, cols, values)` triples.
    fn forward(&self, inputs: &[(usize, usize, &[f64])]) -> Result<CustomOutput>;
}

pub struct CustomOutput {
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    /// Maps the output gradient to one optional gradient per input.
    pub backward: BackwardFn,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        k: f64,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    LayerNorm {
        a: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        kernel: usize,
        stride: usize,
        cols: Vec<f64>,
    },
    Glu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Swish {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Tape of primitive applications. Confined to one thread.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    training: bool,
    param_cache: HashMap<String, Var>,
    custom_ops: HashSet<&'static str>,
    dropout_rng: Option<crate::rng::WkRng>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds each parameter gradient into the matching `Tensor::grad` buffer.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) -> Result<()> {
        for (i, node) in graph.nodes.iter().enumerate() {
            let (Some(name), Some(g)) = (&node.param, &self.grads[i]) else {
                continue;
            };
            let t = store.get_mut(name)?;
            let prec = t.precision();
            let buf = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, &x) in buf.iter_mut().zip(g) {
                *b = prec.round(*b + x);
            }
        }
        Ok(())
    }
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric {
            op,
            detail: "NaN input".into(),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            training: false,
            param_cache: HashMap::new(),
            custom_ops: HashSet::new(),
            dropout_rng: None,
        }
    }

    pub fn with_training(mut self, training: bool) -> Self {
        self.training = training;
        self
    }

    /// Generator consumed by [`Graph::drop`].
    pub fn with_dropout_rng(mut self, rng: crate::rng::WkRng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    /// The generator behind [`Graph::drop`], when training with one.
    pub fn training_rng(&mut self) -> Option<&mut crate::rng::WkRng> {
        if self.training {
            self.dropout_rng.as_mut()
        } else {
            None
        }
    }

    /// Dropout drawing from the graph's own generator; a no-op when the
    /// graph has none or is not training.
    pub fn drop(&mut self, a: Var, p: f64) -> Var {
        match self.dropout_rng.take() {
            Some(mut rng) => {
                let out = self.dropout(a, p, &mut rng);
                self.dropout_rng = Some(rng);
                out
            }
            None => a,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn register_custom(&mut self, name: &'static str) {
        self.custom_ops.insert(name);
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::from_matrix(r, c, self.value(v).to_vec(), self.precision).expect("node shape is valid")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let value = self.precision.round_vec(value);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- leaves ----

    /// Leaf that receives a gradient.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("input", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, true))
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("constant", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.matrix_dims();
        self.push(r, c, t.data().to_vec(), Op::Leaf, false)
    }

    /// Leaf bound to a named parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_cache.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        let (r, c) = t.matrix_dims();
        let v = self.push(r, c, t.data().to_vec(), Op::Leaf, t.requires_grad);
        self.nodes[v.0].param = Some(name.to_string());
        self.param_cache.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let k1 = if ta { ar } else { ac };
        let k2 = if tb { bc } else { br };
        if k1 != k2 {
            return Err(Error::shape("matmul", &[ar, ac], &[br, bc]));
        }
        let (m, n, out) = gemm(self.value(a), ar, ac, ta, self.value(b), br, bc, tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMul { a, b, ta, tb }, rg))
    }

    fn broadcast_ok(&self, a: Var, b: Var) -> bool {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        (br == ar || br == 1) && (bc == ac || bc == 1)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, mul: bool) -> Result<Var> {
        let (a, b) = if self.broadcast_ok(a, b) {
            (a, b)
        } else if self.broadcast_ok(b, a) {
            (b, a)
        } else {
            let (ar, ac) = self.dims(a);
            let (br, bc) = self.dims(b);
            return Err(Error::shape(name, &[ar, ac], &[br, bc]));
        };
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(ar * ac);
        for r in 0..ar {
            let rb = if br == 1 { 0 } else { r };
            for c in 0..ac {
                let cb = if bc == 1 { 0 } else { c };
                let y = bv[rb * bc + cb];
                let x = av[r * ac + c];
                out.push(if mul { x * y } else { x + y });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let op = if mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        Ok(self.push(ar, ac, out, op, rg))
    }

    /// Elementwise sum; `b` may broadcast as a row, column, or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", false)
    }

    /// Elementwise product; `b` may broadcast as a row, column, or scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", true)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * k).collect();
        let rg = self.rg(a);
        self.push(r, c, out, Op::Scale { a, k }, rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        check_finite("softmax", self.value(a))?;
        let (r, c) = self.dims(a);
        let out = kernels::softmax_rows(self.value(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::Softmax { a }, rg))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        check_finite("log_softmax", self.value(a))?;
        let (r, c) = self.dims(a);
        let out = kernels::log_softmax_rows(self.value(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::LogSoftmax { a }, rg))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.dims(a);
        let x = self.value(a);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let xr = &x[i * c..(i + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for (o, &v) in xhat[i * c..(i + 1) * c].iter_mut().zip(xr) {
                *o = (v - mean) * s;
            }
        }
        let rg = self.rg(a);
        let out = xhat.clone();
        self.push(r, c, out, Op::LayerNorm { a, xhat, rstd }, rg)
    }

    /// Per-channel convolution over time with same padding. `x` is `T×C`, `w` is `K×C`, `K` odd.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, c) = self.dims(x);
        let (k, wc) = self.dims(w);
        if wc != c || k % 2 == 0 {
            return Err(Error::shape("depthwise_conv1d", &[t, c], &[k, wc]));
        }
        let pad = k / 2;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            for ki in 0..k {
                let src = ti as isize + ki as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let src = src as usize;
                let orow = &mut out[ti * c..(ti + 1) * c];
                let xrow = &xv[src * c..(src + 1) * c];
                let wrow = &wv[ki * c..(ki + 1) * c];
                for ch in 0..c {
                    orow[ch] += wrow[ch] * xrow[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, c, out, Op::DepthwiseConv { x, w }, rg))
    }

    /// Channel-mixing convolution over time. `x` is `T×Cin`, `w` is `(K·Cin)×Cout`.
    /// Left padding is `K/2`; output length is `ceil(T / stride)`.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (t, cin) = self.dims(x);
        let (wr, cout) = self.dims(w);
        if kernel == 0 || stride == 0 || wr != kernel * cin {
            return Err(Error::shape("conv1d", &[t, cin], &[wr, cout]));
        }
        let (t_out, cols) = kernels::im2col(self.value(x), t, cin, kernel, stride);
        let (_, _, out) = gemm(&cols, t_out, kernel * cin, false, self.value(w), wr, cout, false);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            t_out,
            cout,
            out,
            Op::Conv1d {
                x,
                w,
                kernel,
                stride,
                cols,
            },
            rg,
        ))
    }

    /// Gated linear unit over columns: first half times sigmoid of second half.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if c % 2 != 0 {
            return Err(Error::shape("glu", &[r, c], &[2]));
        }
        let h = c / 2;
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * h);
        for i in 0..r {
            for j in 0..h {
                out.push(x[i * c + j] * sigmoid(x[i * c + h + j]));
            }
        }
        let rg = self.rg(a);
        Ok(self.push(r, h, out, Op::Glu { a }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(r, c, out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Swish { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    /// Row lookup into `table` (`N×D`), producing `ids.len()×D`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::shape("embedding", &[n, d], &[0]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::shape("embedding", &[n, d], &[bad]));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            ids.len(),
            d,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", &[], &[]));
        };
        let (r0, c0) = self.dims(first);
        let (rows, cols) = match axis {
            0 => {
                let mut rows = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if c != c0 {
                        return Err(Error::shape("concat", &[r0, c0], &[r, c]));
                    }
                    rows += r;
                }
                (rows, c0)
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if r != r0 {
                        return Err(Error::shape("concat", &[r0, c0], &[r, c]));
                    }
                    cols += c;
                }
                (r0, cols)
            }
            _ => return Err(Error::shape("concat", &[r0, c0], &[axis])),
        };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
        } else {
            for i in 0..rows {
                for &p in parts {
                    let (_, c) = self.dims(p);
                    out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                }
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            rows,
            cols,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Half-open range `[start, end)` along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > extent {
            return Err(Error::shape("slice", &[r, c], &[axis, start, end]));
        }
        let x = self.value(a);
        let (rows, cols, out) = if axis == 0 {
            (end - start, c, x[start * c..end * c].to_vec())
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&x[i * c + start..i * c + end]);
            }
            (r, w, out)
        };
        let rg = self.rg(a);
        Ok(self.push(rows, cols, out, Op::Slice { a, axis, start }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = kernels::transpose(self.value(a), r, c);
        let rg = self.rg(a);
        self.push(c, r, out, Op::Transpose { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r * c != rows * cols {
            return Err(Error::shape("reshape", &[r, c], &[rows, cols]));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(rows, cols, out, Op::Reshape { a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(1, 1, vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(1, 1, vec![s], Op::Mean { a }, rg)
    }

    /// Mean over rows of `-log softmax(logits)[row, target[row]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", &[r, c], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy", &[r, c], &[bad]));
        }
        check_finite("cross_entropy", self.value(logits))?;
        let lsm = kernels::log_softmax_rows(self.value(logits), r, c);
        let loss = -targets.iter().enumerate().map(|(i, &t)| lsm[i * c + t]).sum::<f64>() / r as f64;
        let probs = lsm.iter().map(|x| x.exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout. A no-op outside training mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let (r, c) = self.dims(a);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(a);
        self.push(r, c, out, Op::Dropout { a, mask }, rg)
    }

    /// Applies a registered custom primitive.
    pub fn custom(&mut self, op: &dyn CustomOp, inputs: &[Var]) -> Result<Var> {
        if !self.custom_ops.contains(op.name()) {
            return Err(Error::UnregisteredPrimitive(op.name().to_string()));
        }
        let views: Vec<(usize, usize, &[f64])> = inputs
            .iter()
            .map(|&v| {
                let (r, c) = self.dims(v);
                (r, c, self.value(v))
            })
            .collect();
        let out = op.forward(&views)?;
        if out.rows * out.cols != out.value.len() {
            return Err(Error::shape(op.name(), &[out.rows, out.cols], &[out.value.len()]));
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out.rows,
            out.cols,
            out.value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: out.backward,
            },
            rg,
        ))
    }

    /// Builds a parameter-free primitive by name.
    pub fn apply_named(&mut self, name: &str, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::validation(format!(
                    "primitive `{name}` takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match name {
            "matmul" => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            "add" => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            "mul" => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            "softmax" => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            "log_softmax" => {
                arity(1)?;
                self.log_softmax(inputs[0])
            }
            "layer_norm" => {
                arity(1)?;
                Ok(self.layer_norm(inputs[0], 1e-5))
            }
            "depthwise_conv1d" => {
                arity(2)?;
                self.depthwise_conv1d(inputs[0], inputs[1])
            }
            "glu" => {
                arity(1)?;
                self.glu(inputs[0])
            }
            "sigmoid" => {
                arity(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            "swish" => {
                arity(1)?;
                Ok(self.swish(inputs[0]))
            }
            "relu" => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            "transpose" => {
                arity(1)?;
                Ok(self.transpose(inputs[0]))
            }
            "sum" => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            "mean" => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            other if primitive_catalog().contains(&other) => Err(Error::validation(format!(
                "primitive `{other}` needs arguments; call its method directly"
            ))),
            other => Err(Error::UnregisteredPrimitive(other.to_string())),
        }
    }

    // ---- reverse pass ----

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::shape("backward", &[r, c], &[1, 1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Reduces a full-shape gradient to the broadcast shape of `b`.
    fn reduce_broadcast(&self, g: &[f64], rows: usize, cols: usize, b: Var) -> Vec<f64> {
        let (br, bc) = self.dims(b);
        if br == rows && bc == cols {
            return g.to_vec();
        }
        let mut out = vec![0.0; br * bc];
        for r in 0..rows {
            let rb = if br == 1 { 0 } else { r };
            for c in 0..cols {
                let cb = if bc == 1 { 0 } else { c };
                out[rb * bc + cb] += g[r * cols + c];
            }
        }
        out
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.dims(a);
                let (br, bc) = self.dims(b);
                let av = self.value(a);
                let bv = self.value(b);
                if self.rg(a) {
                    let da = if !ta {
                        gemm(g, rows, cols, false, bv, br, bc, !tb).2
                    } else {
                        gemm(bv, br, bc, tb, g, rows, cols, true).2
                    };
                    self.acc(grads, a, da);
                }
                if self.rg(b) {
                    let db = if !tb {
                        gemm(av, ar, ac, !ta, g, rows, cols, false).2
                    } else {
                        gemm(g, rows, cols, true, av, ar, ac, ta).2
                    };
                    self.acc(grads, b, db);
                }
            }
            &Op::Add { a, b } => {
                if self.rg(a) {
                    self.acc(grads, a, g.to_vec());
                }
                if self.rg(b) {
                    let db = self.reduce_broadcast(g, rows, cols, b);
                    self.acc(grads, b, db);
                }
            }
            &Op::Mul { a, b } => {
                let (br, bc) = self.dims(b);
                let av = self.value(a);
                let bv = self.value(b);
                if self.rg(a) {
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let rb = if br == 1 { 0 } else { r };
                        for c in 0..cols {
                            let cb = if bc == 1 { 0 } else { c };
                            da[r * cols + c] = g[r * cols + c] * bv[rb * bc + cb];
                        }
                    }
                    self.acc(grads, a, da);
                }
                if self.rg(b) {
                    let full: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    let db = self.reduce_broadcast(&full, rows, cols, b);
                    self.acc(grads, b, db);
                }
            }
            &Op::Scale { a, k } => {
                self.acc(grads, a, g.iter().map(|x| x * k).collect());
            }
            &Op::Softmax { a } => {
                let y = &node.value;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let s: f64 = (0..cols).map(|c| g[r * cols + c] * y[r * cols + c]).sum();
                    for c in 0..cols {
                        let i = r * cols + c;
                        da[i] = y[i] * (g[i] - s);
                    }
                }
                self.acc(grads, a, da);
            }
            &Op::LogSoftmax { a } => {
                let y = &node.value;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let s: f64 = g[r * cols..(r + 1) * cols].iter().sum();
                    for c in 0..cols {
                        let i = r * cols + c;
                        da[i] = g[i] - y[i].exp() * s;
                    }
                }
                self.acc(grads, a, da);
            }
            Op::LayerNorm { a, xhat, rstd } => {
                let mut da = vec![0.0; rows * cols];
                let n = cols as f64;
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let xr = &xhat[r * cols..(r + 1) * cols];
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgx = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for c in 0..cols {
                        da[r * cols + c] = rstd[r] * (gr[c] - mg - xr[c] * mgx);
                    }
                }
                self.acc(grads, *a, da);
            }
            &Op::DepthwiseConv { x, w } => {
                let (t, c) = self.dims(x);
                let (k, _) = self.dims(w);
                let pad = k / 2;
                let xv = self.value(x);
                let wv = self.value(w);
                let mut dx = vec![0.0; t * c];
                let mut dw = vec![0.0; k * c];
                for ti in 0..t {
                    for ki in 0..k {
                        let src = ti as isize + ki as isize - pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            let gv = g[ti * c + ch];
                            dx[src * c + ch] += wv[ki * c + ch] * gv;
                            dw[ki * c + ch] += xv[src * c + ch] * gv;
                        }
                    }
                }
                self.acc(grads, x, dx);
                self.acc(grads, w, dw);
            }
            Op::Conv1d {
                x,
                w,
                kernel,
                stride,
                cols: im,
            } => {
                let (t, cin) = self.dims(*x);
                let (wr, cout) = self.dims(*w);
                let width = kernel * cin;
                if self.rg(*w) {
                    let dw = gemm(im, rows, width, true, g, rows, cout, false).2;
                    self.acc(grads, *w, dw);
                }
                if self.rg(*x) {
                    let dcol = gemm(g, rows, cout, false, self.value(*w), wr, cout, true).2;
                    let mut dx = vec![0.0; t * cin];
                    kernels::col2im_add(&dcol, t, cin, *kernel, *stride, &mut dx);
                    self.acc(grads, *x, dx);
                }
            }
            &Op::Glu { a } => {
                let (_, c) = self.dims(a);
                let h = c / 2;
                let x = self.value(a);
                let mut da = vec![0.0; rows * c];
                for r in 0..rows {
                    for j in 0..h {
                        let u = x[r * c + j];
                        let s = sigmoid(x[r * c + h + j]);
                        let gv = g[r * h + j];
                        da[r * c + j] = gv * s;
                        da[r * c + h + j] = gv * u * s * (1.0 - s);
                    }
                }
                self.acc(grads, a, da);
            }
            &Op::Sigmoid { a } => {
                let y = &node.value;
                self.acc(grads, a, g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect());
            }
            &Op::Swish { a } => {
                let x = self.value(a);
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    })
                    .collect();
                self.acc(grads, a, da);
            }
            &Op::Relu { a } => {
                let x = self.value(a);
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, a, da);
            }
            Op::Embedding { table, ids } => {
                let (n, d) = self.dims(*table);
                let mut dt = vec![0.0; n * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                self.acc(grads, *table, dt);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        self.acc(grads, p, g[off..off + n].to_vec());
                        off += n;
                    }
                } else {
                    let mut off = 0;
                    for &p in parts {
                        let (pr, pc) = self.dims(p);
                        let mut dp = Vec::with_capacity(pr * pc);
                        for r in 0..pr {
                            dp.extend_from_slice(&g[r * cols + off..r * cols + off + pc]);
                        }
                        self.acc(grads, p, dp);
                        off += pc;
                    }
                }
            }
            &Op::Slice { a, axis, start } => {
                let (ar, ac) = self.dims(a);
                let mut da = vec![0.0; ar * ac];
                if axis == 0 {
                    da[start * ac..start * ac + g.len()].copy_from_slice(g);
                } else {
                    for r in 0..ar {
                        da[r * ac + start..r * ac + start + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                    }
                }
                self.acc(grads, a, da);
            }
            &Op::Transpose { a } => {
                self.acc(grads, a, kernels::transpose(g, rows, cols));
            }
            &Op::Reshape { a } => {
                self.acc(grads, a, g.to_vec());
            }
            &Op::Sum { a } => {
                let n = self.value(a).len();
                self.acc(grads, a, vec![g[0]; n]);
            }
            &Op::Mean { a } => {
                let n = self.value(a).len();
                self.acc(grads, a, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (r, c) = self.dims(*logits);
                let scale = g[0] / r as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * c + t] -= scale;
                }
                self.acc(grads, *logits, dl);
            }
            Op::Dropout { a, mask } => {
                self.acc(grads, *a, g.iter().zip(mask).map(|(x, m)| x * m).collect());
            }
            Op::Custom { inputs, backward } => {
                let parts = backward(g);
                for (&v, dv) in inputs.iter().zip(parts) {
                    if let Some(dv) = dv {
                        self.acc(grads, v, dv);
                    }
                }
            }
        }
    }
}
