//! The tape itself: nodes, forward ops, and the backward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

/// Recorded operation. Inputs are tape indices smaller than the output's.
#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Neg(Tensor),
    AddScalar(Tensor, T),
    MulScalar(Tensor, T),
    PowConst(Tensor, T),
    Exp(Tensor),
    Ln(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    ClampMin(Tensor, T),
    SmoothL1(Tensor),
    /// a[m,k] × b[k,n] (b may be a vector, treated as [k,1]).
    Matmul(Tensor, Tensor),
    /// aᵀ × b for a[k,m], b[k,n].
    MatmulTA(Tensor, Tensor),
    /// a × bᵀ for a[m,k], b[n,k].
    MatmulTB(Tensor, Tensor),
    /// mat[r,c] + row[c] broadcast over rows.
    AddRowBroadcast(Tensor, Tensor),
    Concat(Vec<Tensor>),
    Reshape(Tensor),
    Gather(Tensor, Vec<usize>),
    Sum(Tensor),
    Mean(Tensor),
    Softmax { input: Tensor, axis: usize },
    Conv2d { input: Tensor, kernels: Tensor, bias: Tensor, stride: usize, padding: usize },
    Upsample2x(Tensor),
    GlobalAvgPool(Tensor),
    /// Max pooling over pyramid grids of a rectangular window; `argmax`
    /// stores the flat input index that won each bin.
    Spp { input: Tensor, region: [usize; 4], levels: Vec<usize>, argmax: Vec<usize> },
    /// Column-stochastic normalization with uniform fallback on columns
    /// whose sum falls below eps.
    NormalizeColumns { input: Tensor, eps: T, fallback: Vec<bool> },
}

#[derive(Debug)]
struct Node<T: Real> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Reverse-mode computation tape.
///
/// A tape owns every tensor recorded on it. One tape serves one forward
/// (+backward) evaluation; it is single-threaded by design — independent
/// tapes may live on separate threads.
pub struct Tape<T: Real> {
    inner: RefCell<Vec<Node<T>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<T: Real>(values: &[T], op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { inner: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, values: Vec<T>, needs_grad: bool, op: Op<T>) -> Tensor {
        let mut nodes = self.inner.borrow_mut();
        nodes.push(Node { shape, values, grad: None, needs_grad, op });
        Tensor(nodes.len() - 1)
    }

    fn leaf(&self, shape: &[usize], values: Vec<T>, needs_grad: bool) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("extents must be positive, got {shape:?}"),
            });
        }
        if values.len() != numel(shape) {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("{} values for shape {shape:?}", values.len()),
            });
        }
        check_finite(&values, "leaf")?;
        Ok(self.push(shape.to_vec(), values, needs_grad, Op::Leaf))
    }

    /// Leaf that participates in differentiation.
    pub fn variable(&self, shape: &[usize], values: Vec<T>) -> Result<Tensor> {
        self.leaf(shape, values, true)
    }

    /// Leaf with no gradient.
    pub fn constant(&self, shape: &[usize], values: Vec<T>) -> Result<Tensor> {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&self, v: T) -> Result<Tensor> {
        self.constant(&[1], vec![v])
    }

    pub fn shape(&self, t: Tensor) -> Vec<usize> {
        self.inner.borrow()[t.0].shape.clone()
    }

    pub fn values(&self, t: Tensor) -> Vec<T> {
        self.inner.borrow()[t.0].values.clone()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.inner.borrow()[t.0].needs_grad
    }

    /// Value of a scalar tensor.
    pub fn value(&self, t: Tensor) -> Result<T> {
        let nodes = self.inner.borrow();
        if nodes[t.0].values.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                nodes[t.0].shape
            )));
        }
        Ok(nodes[t.0].values[0])
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `t`.
    pub fn grad(&self, t: Tensor) -> Option<Vec<T>> {
        self.inner.borrow()[t.0].grad.clone()
    }

    fn needs(&self, ts: &[Tensor]) -> bool {
        let nodes = self.inner.borrow();
        ts.iter().any(|t| nodes[t.0].needs_grad)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary_same_shape(
        &self,
        op_name: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Tensor> {
        let (shape, values) = {
            let nodes = self.inner.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape != nb.shape {
                return Err(Error::Shape {
                    op: op_name,
                    detail: format!("{:?} vs {:?}", na.shape, nb.shape),
                });
            }
            let values: Vec<T> =
                na.values.iter().zip(&nb.values).map(|(&x, &y)| f(x, y)).collect();
            (na.shape.clone(), values)
        };
        check_finite(&values, op_name)?;
        Ok(self.push(shape, values, self.needs(&[a, b]), op))
    }

    fn unary(
        &self,
        op_name: &'static str,
        a: Tensor,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Tensor> {
        let (shape, values) = {
            let nodes = self.inner.borrow();
            let na = &nodes[a.0];
            (na.shape.clone(), na.values.iter().map(|&x| f(x)).collect::<Vec<T>>())
        };
        check_finite(&values, op_name)?;
        Ok(self.push(shape, values, self.needs(&[a]), op))
    }

    pub fn add(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&self, a: Tensor) -> Result<Tensor> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn add_scalar(&self, a: Tensor, c: T) -> Result<Tensor> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a, c))
    }

    /// Scale by a constant.
    pub fn scale(&self, a: Tensor, c: T) -> Result<Tensor> {
        self.unary("scale", a, |x| x * c, Op::MulScalar(a, c))
    }

    /// Elementwise x^c for constant c. Domain: x ≥ 0 (x > 0 for c < 1);
    /// the derivative at x = 0 is taken one-sided as 0.
    pub fn pow_const(&self, a: Tensor, c: T) -> Result<Tensor> {
        self.unary("pow_const", a, |x| x.powf(c), Op::PowConst(a, c))
    }

    pub fn exp(&self, a: Tensor) -> Result<Tensor> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&self, a: Tensor) -> Result<Tensor> {
        self.unary("ln", a, |x| x.ln(), Op::Ln(a))
    }

    /// max(x, 0). The subgradient at exactly 0 is defined as 0, so gradient
    /// checks must sample away from the kink.
    pub fn relu(&self, a: Tensor) -> Result<Tensor> {
        self.unary("relu", a, |x| x.max(T::ZERO), Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Tensor) -> Result<Tensor> {
        self.unary("sigmoid", a, sigmoid_scalar, Op::Sigmoid(a))
    }

    /// max(x, c); gradient passes only where x > c.
    pub fn clamp_min(&self, a: Tensor, c: T) -> Result<Tensor> {
        self.unary("clamp_min", a, |x| x.max(c), Op::ClampMin(a, c))
    }

    /// Huber-style penalty: 0.5·x² for |x| < 1, |x| − 0.5 otherwise.
    pub fn smooth_l1(&self, a: Tensor) -> Result<Tensor> {
        let half = T::from_f64(0.5);
        self.unary(
            "smooth_l1",
            a,
            |x| {
                let ax = x.abs();
                if ax < T::ONE {
                    half * x * x
                } else {
                    ax - half
                }
            },
            Op::SmoothL1(a),
        )
    }

    // ---- linear algebra --------------------------------------------------

    fn matmul_dims(
        &self,
        op_name: &'static str,
        a: Tensor,
        b: Tensor,
        ta: bool,
        tb: bool,
    ) -> Result<(usize, usize, usize, Vec<usize>)> {
        let nodes = self.inner.borrow();
        let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
        let (am, ak) = match sa.as_slice() {
            [m, k] => (*m, *k),
            _ => {
                return Err(Error::Shape {
                    op: op_name,
                    detail: format!("left operand must be 2-d, got {sa:?}"),
                })
            }
        };
        let (m, k) = if ta { (ak, am) } else { (am, ak) };
        let (bk, bn, vec_out) = match sb.as_slice() {
            [k2, n] => (*k2, *n, false),
            [k2] if !tb => (*k2, 1, true),
            _ => {
                return Err(Error::Shape {
                    op: op_name,
                    detail: format!("right operand shape {sb:?}"),
                })
            }
        };
        let (k2, n) = if tb { (bn, bk) } else { (bk, bn) };
        if k != k2 {
            return Err(Error::Shape {
                op: op_name,
                detail: format!("inner dims {k} vs {k2} ({sa:?} × {sb:?})"),
            });
        }
        let out_shape = if vec_out { vec![m] } else { vec![m, n] };
        Ok((m, k, n, out_shape))
    }

    /// a[m,k] × b[k,n]. A 1-d right operand [k] is treated as [k,1] and the
    /// result is returned as [m].
    pub fn matmul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k, n, out_shape) = self.matmul_dims("matmul", a, b, false, false)?;
        let values = {
            let nodes = self.inner.borrow();
            let mut out = vec![T::ZERO; m * n];
            mm_nn(&nodes[a.0].values, &nodes[b.0].values, m, k, n, &mut out);
            out
        };
        check_finite(&values, "matmul")?;
        Ok(self.push(out_shape, values, self.needs(&[a, b]), Op::Matmul(a, b)))
    }

    /// aᵀ × b for a[k,m], b[k,n].
    pub fn matmul_ta(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k, n, out_shape) = self.matmul_dims("matmul_ta", a, b, true, false)?;
        let values = {
            let nodes = self.inner.borrow();
            let mut out = vec![T::ZERO; m * n];
            mm_tn(&nodes[a.0].values, &nodes[b.0].values, m, k, n, &mut out);
            out
        };
        check_finite(&values, "matmul_ta")?;
        Ok(self.push(out_shape, values, self.needs(&[a, b]), Op::MatmulTA(a, b)))
    }

    /// a × bᵀ for a[m,k], b[n,k].
    pub fn matmul_tb(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k, n, out_shape) = self.matmul_dims("matmul_tb", a, b, false, true)?;
        let values = {
            let nodes = self.inner.borrow();
            let mut out = vec![T::ZERO; m * n];
            mm_nt(&nodes[a.0].values, &nodes[b.0].values, m, k, n, &mut out);
            out
        };
        check_finite(&values, "matmul_tb")?;
        Ok(self.push(out_shape, values, self.needs(&[a, b]), Op::MatmulTB(a, b)))
    }

    /// mat[r,c] + row[c], broadcast over rows.
    pub fn add_row_broadcast(&self, mat: Tensor, row: Tensor) -> Result<Tensor> {
        let (shape, values) = {
            let nodes = self.inner.borrow();
            let (nm, nr) = (&nodes[mat.0], &nodes[row.0]);
            let (r, c) = match nm.shape.as_slice() {
                [r, c] => (*r, *c),
                s => {
                    return Err(Error::Shape {
                        op: "add_row_broadcast",
                        detail: format!("matrix must be 2-d, got {s:?}"),
                    })
                }
            };
            if nr.shape != [c] {
                return Err(Error::Shape {
                    op: "add_row_broadcast",
                    detail: format!("row {:?} vs {c} columns", nr.shape),
                });
            }
            let mut values = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    values.push(nm.values[i * c + j] + nr.values[j]);
                }
            }
            (nm.shape.clone(), values)
        };
        check_finite(&values, "add_row_broadcast")?;
        Ok(self.push(shape, values, self.needs(&[mat, row]), Op::AddRowBroadcast(mat, row)))
    }

    // ---- structure -------------------------------------------------------

    /// Flat concatenation; the result is 1-d.
    pub fn concat(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape { op: "concat", detail: "no parts".into() });
        }
        let values = {
            let nodes = self.inner.borrow();
            let total: usize = parts.iter().map(|p| nodes[p.0].values.len()).sum();
            let mut values = Vec::with_capacity(total);
            for p in parts {
                values.extend_from_slice(&nodes[p.0].values);
            }
            values
        };
        let n = values.len();
        Ok(self.push(vec![n], values, self.needs(parts), Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        let values = {
            let nodes = self.inner.borrow();
            if numel(shape) != nodes[a.0].values.len() || shape.contains(&0) {
                return Err(Error::Shape {
                    op: "reshape",
                    detail: format!("{:?} -> {shape:?}", nodes[a.0].shape),
                });
            }
            nodes[a.0].values.clone()
        };
        Ok(self.push(shape.to_vec(), values, self.needs(&[a]), Op::Reshape(a)))
    }

    /// out[i] = input[indices[i]], indexing the flattened input.
    pub fn gather(&self, a: Tensor, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::Shape { op: "gather", detail: "empty index set".into() });
        }
        let values = {
            let nodes = self.inner.borrow();
            let src = &nodes[a.0].values;
            let mut values = Vec::with_capacity(indices.len());
            for &i in indices {
                if i >= src.len() {
                    return Err(Error::Shape {
                        op: "gather",
                        detail: format!("index {i} out of {}", src.len()),
                    });
                }
                values.push(src[i]);
            }
            values
        };
        let n = values.len();
        Ok(self.push(vec![n], values, self.needs(&[a]), Op::Gather(a, indices.to_vec())))
    }

    pub fn sum(&self, a: Tensor) -> Result<Tensor> {
        let total = {
            let nodes = self.inner.borrow();
            let mut acc = T::ZERO;
            for &v in &nodes[a.0].values {
                acc += v;
            }
            acc
        };
        check_finite(&[total], "sum")?;
        Ok(self.push(vec![1], vec![total], self.needs(&[a]), Op::Sum(a)))
    }

    pub fn mean(&self, a: Tensor) -> Result<Tensor> {
        let mean = {
            let nodes = self.inner.borrow();
            let n = nodes[a.0].values.len();
            let mut acc = T::ZERO;
            for &v in &nodes[a.0].values {
                acc += v;
            }
            acc * T::from_f64(1.0 / n as f64)
        };
        check_finite(&[mean], "mean")?;
        Ok(self.push(vec![1], vec![mean], self.needs(&[a]), Op::Mean(a)))
    }

    /// Softmax along `axis` of a 1-d or 2-d tensor (max-shifted for
    /// stability). Outputs along the reduced axis sum to 1 within 1e-12.
    pub fn softmax(&self, a: Tensor, axis: usize) -> Result<Tensor> {
        let (shape, values) = {
            let nodes = self.inner.borrow();
            let na = &nodes[a.0];
            let (rows, cols) = match na.shape.as_slice() {
                [n] => {
                    if axis != 0 {
                        return Err(Error::Shape {
                            op: "softmax",
                            detail: format!("axis {axis} for 1-d input"),
                        });
                    }
                    (1, *n)
                }
                [r, c] => {
                    if axis > 1 {
                        return Err(Error::Shape {
                            op: "softmax",
                            detail: format!("axis {axis} for 2-d input"),
                        });
                    }
                    (*r, *c)
                }
                s => {
                    return Err(Error::Shape {
                        op: "softmax",
                        detail: format!("input must be 1-d or 2-d, got {s:?}"),
                    })
                }
            };
            let mut values = vec![T::ZERO; na.values.len()];
            // axis == 1 (or 1-d): normalize each row; axis == 0: each column.
            let two_d = na.shape.len() == 2;
            let (groups, group_len) =
                if !two_d || axis == 1 { (rows, cols) } else { (cols, rows) };
            for g in 0..groups {
                let idx = |i: usize| -> usize {
                    if !two_d || axis == 1 {
                        g * group_len + i
                    } else {
                        i * groups + g
                    }
                };
                let mut m = na.values[idx(0)];
                for i in 1..group_len {
                    m = m.max(na.values[idx(i)]);
                }
                let mut denom = T::ZERO;
                for i in 0..group_len {
                    let e = (na.values[idx(i)] - m).exp();
                    values[idx(i)] = e;
                    denom += e;
                }
                for i in 0..group_len {
                    let v = values[idx(i)] / denom;
                    values[idx(i)] = v;
                }
            }
            (na.shape.clone(), values)
        };
        check_finite(&values, "softmax")?;
        Ok(self.push(shape, values, self.needs(&[a]), Op::Softmax { input: a, axis }))
    }

    // ---- convolution & pooling --------------------------------------------

    /// 2-d convolution of input [C_in,H,W] with kernels [C_out,C_in,k,k] and
    /// bias [C_out], zero padding. Output extent is
    /// floor((H + 2·padding − k)/stride) + 1. Pre-activation: no
    /// nonlinearity is applied here.
    pub fn conv2d(
        &self,
        input: Tensor,
        kernels: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let (out_shape, values) = {
            let nodes = self.inner.borrow();
            let (ni, nk, nb) = (&nodes[input.0], &nodes[kernels.0], &nodes[bias.0]);
            let (ci, h, w) = match ni.shape.as_slice() {
                [c, h, w] => (*c, *h, *w),
                s => {
                    return Err(Error::Shape {
                        op: "conv2d",
                        detail: format!("input must be [C,H,W], got {s:?}"),
                    })
                }
            };
            let (co, kci, kh, kw) = match nk.shape.as_slice() {
                [co, c, kh, kw] => (*co, *c, *kh, *kw),
                s => {
                    return Err(Error::Shape {
                        op: "conv2d",
                        detail: format!("kernels must be [C_out,C_in,k,k], got {s:?}"),
                    })
                }
            };
            if kh != kw {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("kernels must be square, got {kh}×{kw}"),
                });
            }
            let k = kh;
            if kci != ci {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("kernel C_in {kci} vs input C_in {ci}"),
                });
            }
            if nb.shape != [co] {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("bias {:?} vs C_out {co}", nb.shape),
                });
            }
            if k > h + 2 * padding || k > w + 2 * padding {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("kernel {k} exceeds padded input {h}×{w} (pad {padding})"),
                });
            }
            let ho = (h + 2 * padding - k) / stride + 1;
            let wo = (w + 2 * padding - k) / stride + 1;
            let cols = im2col(&ni.values, ci, h, w, k, stride, padding, ho, wo);
            let mut out = vec![T::ZERO; co * ho * wo];
            mm_nn(&nk.values, &cols, co, ci * k * k, ho * wo, &mut out);
            for c in 0..co {
                let b = nb.values[c];
                for v in &mut out[c * ho * wo..(c + 1) * ho * wo] {
                    *v += b;
                }
            }
            (vec![co, ho, wo], out)
        };
        check_finite(&values, "conv2d")?;
        Ok(self.push(
            out_shape,
            values,
            self.needs(&[input, kernels, bias]),
            Op::Conv2d { input, kernels, bias, stride, padding },
        ))
    }

    /// Nearest-neighbour 2× upsampling of [C,H,W].
    pub fn upsample_nearest_2x(&self, a: Tensor) -> Result<Tensor> {
        let (shape, values) = {
            let nodes = self.inner.borrow();
            let na = &nodes[a.0];
            let (c, h, w) = match na.shape.as_slice() {
                [c, h, w] => (*c, *h, *w),
                s => {
                    return Err(Error::Shape {
                        op: "upsample_nearest_2x",
                        detail: format!("input must be [C,H,W], got {s:?}"),
                    })
                }
            };
            let mut values = vec![T::ZERO; c * 4 * h * w];
            for ch in 0..c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        values[(ch * 2 * h + y) * 2 * w + x] =
                            na.values[(ch * h + y / 2) * w + x / 2];
                    }
                }
            }
            (vec![c, 2 * h, 2 * w], values)
        };
        Ok(self.push(shape, values, self.needs(&[a]), Op::Upsample2x(a)))
    }

    /// Per-channel arithmetic mean over the spatial extent: [C,H,W] → [C].
    pub fn global_avg_pool(&self, a: Tensor) -> Result<Tensor> {
        let (c, values) = {
            let nodes = self.inner.borrow();
            let na = &nodes[a.0];
            let (c, h, w) = match na.shape.as_slice() {
                [c, h, w] => (*c, *h, *w),
                s => {
                    return Err(Error::Shape {
                        op: "global_avg_pool",
                        detail: format!("input must be [C,H,W], got {s:?}"),
                    })
                }
            };
            let inv = T::from_f64(1.0 / (h * w) as f64);
            let mut values = Vec::with_capacity(c);
            for ch in 0..c {
                let mut acc = T::ZERO;
                for &v in &na.values[ch * h * w..(ch + 1) * h * w] {
                    acc += v;
                }
                values.push(acc * inv);
            }
            (c, values)
        };
        check_finite(&values, "global_avg_pool")?;
        Ok(self.push(vec![c], values, self.needs(&[a]), Op::GlobalAvgPool(a)))
    }

    /// Spatial pyramid pooling over the whole map: for each grid size g the
    /// map is split into g×g cells and max-pooled per cell. Bins are
    /// concatenated in ascending grid order, channel-major within each grid,
    /// giving a fixed C·Σg² output regardless of H and W. Grids larger than
    /// the map degenerate to clamped one-pixel cells (duplicates allowed).
    pub fn spp(&self, a: Tensor, levels: &[usize]) -> Result<Tensor> {
        let (h, w) = {
            let nodes = self.inner.borrow();
            match nodes[a.0].shape.as_slice() {
                [_, h, w] => (*h, *w),
                s => {
                    return Err(Error::Shape {
                        op: "spp",
                        detail: format!("input must be [C,H,W], got {s:?}"),
                    })
                }
            }
        };
        self.spp_region(a, 0, h, 0, w, levels)
    }

    /// Spatial pyramid pooling restricted to the window rows y0..y1 and
    /// columns x0..x1 (used to pool per-ROI features).
    pub fn spp_region(
        &self,
        a: Tensor,
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
        levels: &[usize],
    ) -> Result<Tensor> {
        if levels.is_empty() || levels.contains(&0) {
            return Err(Error::Parameter("spp levels must be positive and non-empty".into()));
        }
        let mut levels = levels.to_vec();
        levels.sort_unstable();
        let (values, argmax) = {
            let nodes = self.inner.borrow();
            let na = &nodes[a.0];
            let (c, h, w) = match na.shape.as_slice() {
                [c, h, w] => (*c, *h, *w),
                s => {
                    return Err(Error::Shape {
                        op: "spp_region",
                        detail: format!("input must be [C,H,W], got {s:?}"),
                    })
                }
            };
            if y1 > h || x1 > w || y0 >= y1 || x0 >= x1 {
                return Err(Error::Shape {
                    op: "spp_region",
                    detail: format!("window {y0}..{y1}×{x0}..{x1} in {h}×{w}"),
                });
            }
            let bins: usize = levels.iter().map(|g| g * g).sum();
            let mut values = Vec::with_capacity(c * bins);
            let mut argmax = Vec::with_capacity(c * bins);
            let (rh, rw) = (y1 - y0, x1 - x0);
            for &g in &levels {
                for ch in 0..c {
                    for i in 0..g {
                        let r0 = (y0 + i * rh / g).min(y1 - 1);
                        let r1 = (y0 + (i + 1) * rh / g).max(r0 + 1).min(y1);
                        for j in 0..g {
                            let c0 = (x0 + j * rw / g).min(x1 - 1);
                            let c1 = (x0 + (j + 1) * rw / g).max(c0 + 1).min(x1);
                            let mut best = na.values[(ch * h + r0) * w + c0];
                            let mut best_idx = (ch * h + r0) * w + c0;
                            for y in r0..r1 {
                                for x in c0..c1 {
                                    let idx = (ch * h + y) * w + x;
                                    if na.values[idx] > best {
                                        best = na.values[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            values.push(best);
                            argmax.push(best_idx);
                        }
                    }
                }
            }
            (values, argmax)
        };
        let n = values.len();
        Ok(self.push(
            vec![n],
            values,
            self.needs(&[a]),
            Op::Spp { input: a, region: [y0, y1, x0, x1], levels, argmax },
        ))
    }

    /// Normalize each column of a 2-d tensor to sum 1. Columns whose sum is
    /// below `eps` are replaced by the uniform distribution (and receive no
    /// gradient).
    pub fn normalize_columns(&self, a: Tensor, eps: T) -> Result<Tensor> {
        if !(eps > T::ZERO) {
            return Err(Error::Parameter("normalize_columns eps must be positive".into()));
        }
        let (shape, values, fallback) = {
            let nodes = self.inner.borrow();
            let na = &nodes[a.0];
            let (r, c) = match na.shape.as_slice() {
                [r, c] => (*r, *c),
                s => {
                    return Err(Error::Shape {
                        op: "normalize_columns",
                        detail: format!("input must be 2-d, got {s:?}"),
                    })
                }
            };
            let mut values = vec![T::ZERO; r * c];
            let mut fallback = vec![false; c];
            let uniform = T::from_f64(1.0 / r as f64);
            for j in 0..c {
                let mut s = T::ZERO;
                for i in 0..r {
                    s += na.values[i * c + j];
                }
                if s < eps {
                    fallback[j] = true;
                    for i in 0..r {
                        values[i * c + j] = uniform;
                    }
                } else {
                    for i in 0..r {
                        values[i * c + j] = na.values[i * c + j] / s;
                    }
                }
            }
            (na.shape.clone(), values, fallback)
        };
        check_finite(&values, "normalize_columns")?;
        Ok(self.push(
            shape,
            values,
            self.needs(&[a]),
            Op::NormalizeColumns { input: a, eps, fallback },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar loss. Clears previously accumulated
    /// gradients first, so repeated calls from the same tape are
    /// bit-identical. Each recorded node is visited exactly once.
    pub fn backward(&self, loss: Tensor) -> Result<()> {
        let mut nodes = self.inner.borrow_mut();
        if nodes[loss.0].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        nodes[loss.0].grad = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            if nodes[i].grad.is_none() || !nodes[i].needs_grad {
                continue;
            }
            let op = nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let gout = nodes[i].grad.clone().expect("grad present");
            backward_op(&mut nodes, i, &op, &gout);
        }
        Ok(())
    }

    /// Smallest distance of any recorded activation to a non-smooth point
    /// (relu/clamp kinks, smooth-L1 corners, pooling argmax ties,
    /// normalization fallback boundaries). Finite-difference checks should
    /// only trust points where this margin comfortably exceeds the probe
    /// step.
    pub fn min_kink_margin(&self) -> f64 {
        let nodes = self.inner.borrow();
        let mut margin = f64::INFINITY;
        let mut upd = |v: f64| {
            if v < margin {
                margin = v;
            }
        };
        for node in nodes.iter() {
            match &node.op {
                Op::Relu(a) => {
                    for &v in &nodes[a.0].values {
                        upd(v.to_f64().abs());
                    }
                }
                Op::ClampMin(a, c) => {
                    for &v in &nodes[a.0].values {
                        upd((v.to_f64() - c.to_f64()).abs());
                    }
                }
                Op::SmoothL1(a) => {
                    for &v in &nodes[a.0].values {
                        upd((v.to_f64().abs() - 1.0).abs());
                    }
                }
                Op::Spp { input, region, levels, .. } => {
                    let na = &nodes[input.0];
                    let (c, h, w) = (na.shape[0], na.shape[1], na.shape[2]);
                    let [y0, y1, x0, x1] = *region;
                    let (rh, rw) = (y1 - y0, x1 - x0);
                    for &g in levels {
                        for ch in 0..c {
                            for i in 0..g {
                                let r0 = (y0 + i * rh / g).min(y1 - 1);
                                let r1 = (y0 + (i + 1) * rh / g).max(r0 + 1).min(y1);
                                for j in 0..g {
                                    let c0 = (x0 + j * rw / g).min(x1 - 1);
                                    let c1 = (x0 + (j + 1) * rw / g).max(c0 + 1).min(x1);
                                    let mut best = f64::NEG_INFINITY;
                                    let mut second = f64::NEG_INFINITY;
                                    for y in r0..r1 {
                                        for x in c0..c1 {
                                            let v = na.values[(ch * h + y) * w + x].to_f64();
                                            if v > best {
                                                second = best;
                                                best = v;
                                            } else if v > second {
                                                second = v;
                                            }
                                        }
                                    }
                                    if second.is_finite() {
                                        upd(best - second);
                                    }
                                }
                            }
                        }
                    }
                }
                Op::NormalizeColumns { input, eps, .. } => {
                    let na = &nodes[input.0];
                    let (r, c) = (na.shape[0], na.shape[1]);
                    for j in 0..c {
                        let mut s = T::ZERO;
                        for i in 0..r {
                            s += na.values[i * c + j];
                        }
                        // an exactly-zero column cannot cross the fallback
                        // boundary without an upstream kink flipping first
                        if s != T::ZERO {
                            upd((s.to_f64() - eps.to_f64()).abs());
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

// ---- plain matrix kernels --------------------------------------------------

/// out[m,n] += a[m,k] × b[k,n]
fn mm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += aᵀ × b for a[k,m], b[k,n]
fn mm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a × bᵀ for a[m,k], b[n,k]
fn mm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    input: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let cols_n = ho * wo;
    let mut cols = vec![T::ZERO; ci * k * k * cols_n];
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row_base = ((c * k + ky) * k + kx) * cols_n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_base = (c * h + iy as usize) * w;
                    let out_base = row_base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[out_base + ox] = input[in_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    dcols: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    dinput: &mut [T],
) {
    let cols_n = ho * wo;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row_base = ((c * k + ky) * k + kx) * cols_n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_base = (c * h + iy as usize) * w;
                    let out_base = row_base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dinput[in_base + ix as usize] += dcols[out_base + ox];
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(nodes: &mut [Node<T>], t: Tensor, delta: &[T]) {
    let node = &mut nodes[t.0];
    if !node.needs_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => {
            for (gi, &d) in g.iter_mut().zip(delta.iter()) {
                *gi += d;
            }
        }
        None => node.grad = Some(delta.to_vec()),
    }
}

fn backward_op<T: Real>(nodes: &mut [Node<T>], out_idx: usize, op: &Op<T>, gout: &[T]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, *a, gout);
            accumulate(nodes, *b, gout);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, *a, gout);
            let d: Vec<T> = gout.iter().map(|&g| -g).collect();
            accumulate(nodes, *b, &d);
        }
        Op::Mul(a, b) => {
            if nodes[a.0].needs_grad {
                let d: Vec<T> =
                    gout.iter().zip(&nodes[b.0].values).map(|(&g, &v)| g * v).collect();
                accumulate(nodes, *a, &d);
            }
            if nodes[b.0].needs_grad {
                let d: Vec<T> =
                    gout.iter().zip(&nodes[a.0].values).map(|(&g, &v)| g * v).collect();
                accumulate(nodes, *b, &d);
            }
        }
        Op::Neg(a) => {
            let d: Vec<T> = gout.iter().map(|&g| -g).collect();
            accumulate(nodes, *a, &d);
        }
        Op::AddScalar(a, _) => accumulate(nodes, *a, gout),
        Op::MulScalar(a, c) => {
            let d: Vec<T> = gout.iter().map(|&g| g * *c).collect();
            accumulate(nodes, *a, &d);
        }
        Op::PowConst(a, c) => {
            // d/dx x^c = c·x^(c−1); one-sided 0 at x = 0 and for c = 0.
            let d: Vec<T> = gout
                .iter()
                .zip(&nodes[a.0].values)
                .map(|(&g, &x)| {
                    if *c == T::ZERO || x == T::ZERO {
                        T::ZERO
                    } else {
                        g * *c * x.powf(*c - T::ONE)
                    }
                })
                .collect();
            accumulate(nodes, *a, &d);
        }
        Op::Exp(a) => {
            let d: Vec<T> =
                gout.iter().zip(&nodes[out_idx].values).map(|(&g, &y)| g * y).collect();
            accumulate(nodes, *a, &d);
        }
        Op::Ln(a) => {
            let d: Vec<T> =
                gout.iter().zip(&nodes[a.0].values).map(|(&g, &x)| g / x).collect();
            accumulate(nodes, *a, &d);
        }
        Op::Relu(a) => {
            let d: Vec<T> = gout
                .iter()
                .zip(&nodes[a.0].values)
                .map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO })
                .collect();
            accumulate(nodes, *a, &d);
        }
        Op::Sigmoid(a) => {
            let d: Vec<T> = gout
                .iter()
                .zip(&nodes[out_idx].values)
                .map(|(&g, &y)| g * y * (T::ONE - y))
                .collect();
            accumulate(nodes, *a, &d);
        }
        Op::ClampMin(a, c) => {
            let d: Vec<T> = gout
                .iter()
                .zip(&nodes[a.0].values)
                .map(|(&g, &x)| if x > *c { g } else { T::ZERO })
                .collect();
            accumulate(nodes, *a, &d);
        }
        Op::SmoothL1(a) => {
            let d: Vec<T> = gout
                .iter()
                .zip(&nodes[a.0].values)
                .map(|(&g, &x)| {
                    if x.abs() < T::ONE {
                        g * x
                    } else if x > T::ZERO {
                        g
                    } else {
                        -g
                    }
                })
                .collect();
            accumulate(nodes, *a, &d);
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].values.len() / k;
            if nodes[a.0].needs_grad {
                let mut da = vec![T::ZERO; m * k];
                mm_nt(gout, &nodes[b.0].values, m, n, k, &mut da);
                accumulate(nodes, *a, &da);
            }
            if nodes[b.0].needs_grad {
                let mut db = vec![T::ZERO; k * n];
                mm_tn(&nodes[a.0].values, gout, k, m, n, &mut db);
                accumulate(nodes, *b, &db);
            }
        }
        Op::MatmulTA(a, b) => {
            // out[m,n] = aᵀb, a[k,m], b[k,n]
            let (k, m) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].values.len() / k;
            if nodes[a.0].needs_grad {
                let mut da = vec![T::ZERO; k * m];
                mm_nt(&nodes[b.0].values, gout, k, n, m, &mut da);
                accumulate(nodes, *a, &da);
            }
            if nodes[b.0].needs_grad {
                let mut db = vec![T::ZERO; k * n];
                mm_nn(&nodes[a.0].values, gout, k, m, n, &mut db);
                accumulate(nodes, *b, &db);
            }
        }
        Op::MatmulTB(a, b) => {
            // out[m,n] = abᵀ, a[m,k], b[n,k]
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[0];
            if nodes[a.0].needs_grad {
                let mut da = vec![T::ZERO; m * k];
                mm_nn(gout, &nodes[b.0].values, m, n, k, &mut da);
                accumulate(nodes, *a, &da);
            }
            if nodes[b.0].needs_grad {
                let mut db = vec![T::ZERO; n * k];
                mm_tn(gout, &nodes[a.0].values, n, m, k, &mut db);
                accumulate(nodes, *b, &db);
            }
        }
        Op::AddRowBroadcast(mat, row) => {
            accumulate(nodes, *mat, gout);
            if nodes[row.0].needs_grad {
                let c = nodes[row.0].values.len();
                let r = gout.len() / c;
                let mut d = vec![T::ZERO; c];
                for i in 0..r {
                    for j in 0..c {
                        d[j] += gout[i * c + j];
                    }
                }
                accumulate(nodes, *row, &d);
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].values.len();
                let d = gout[offset..offset + len].to_vec();
                accumulate(nodes, *p, &d);
                offset += len;
            }
        }
        Op::Reshape(a) => accumulate(nodes, *a, gout),
        Op::Gather(a, indices) => {
            let mut d = vec![T::ZERO; nodes[a.0].values.len()];
            for (g, &i) in gout.iter().zip(indices.iter()) {
                d[i] += *g;
            }
            accumulate(nodes, *a, &d);
        }
        Op::Sum(a) => {
            let d = vec![gout[0]; nodes[a.0].values.len()];
            accumulate(nodes, *a, &d);
        }
        Op::Mean(a) => {
            let n = nodes[a.0].values.len();
            let d = vec![gout[0] * T::from_f64(1.0 / n as f64); n];
            accumulate(nodes, *a, &d);
        }
        Op::Softmax { input, axis } => {
            let y = &nodes[out_idx].values;
            let shape = &nodes[out_idx].shape;
            let two_d = shape.len() == 2;
            let (rows, cols) = if two_d { (shape[0], shape[1]) } else { (1, shape[0]) };
            let (groups, group_len) =
                if !two_d || *axis == 1 { (rows, cols) } else { (cols, rows) };
            let mut d = vec![T::ZERO; y.len()];
            for g in 0..groups {
                let idx = |i: usize| -> usize {
                    if !two_d || *axis == 1 {
                        g * group_len + i
                    } else {
                        i * groups + g
                    }
                };
                let mut dot = T::ZERO;
                for i in 0..group_len {
                    dot += gout[idx(i)] * y[idx(i)];
                }
                for i in 0..group_len {
                    d[idx(i)] = y[idx(i)] * (gout[idx(i)] - dot);
                }
            }
            accumulate(nodes, *input, &d);
        }
        Op::Conv2d { input, kernels, bias, stride, padding } => {
            let (ci, h, w) =
                (nodes[input.0].shape[0], nodes[input.0].shape[1], nodes[input.0].shape[2]);
            let (co, k) = (nodes[kernels.0].shape[0], nodes[kernels.0].shape[2]);
            let (ho, wo) = (nodes[out_idx].shape[1], nodes[out_idx].shape[2]);
            if nodes[bias.0].needs_grad {
                let mut db = vec![T::ZERO; co];
                for c in 0..co {
                    for &g in &gout[c * ho * wo..(c + 1) * ho * wo] {
                        db[c] += g;
                    }
                }
                accumulate(nodes, *bias, &db);
            }
            if nodes[kernels.0].needs_grad {
                let cols =
                    im2col(&nodes[input.0].values, ci, h, w, k, *stride, *padding, ho, wo);
                let mut dk = vec![T::ZERO; co * ci * k * k];
                mm_nt(gout, &cols, co, ho * wo, ci * k * k, &mut dk);
                accumulate(nodes, *kernels, &dk);
            }
            if nodes[input.0].needs_grad {
                let mut dcols = vec![T::ZERO; ci * k * k * ho * wo];
                mm_tn(&nodes[kernels.0].values, gout, ci * k * k, co, ho * wo, &mut dcols);
                let mut din = vec![T::ZERO; ci * h * w];
                col2im_add(&dcols, ci, h, w, k, *stride, *padding, ho, wo, &mut din);
                accumulate(nodes, *input, &din);
            }
        }
        Op::Upsample2x(a) => {
            let (c, h, w) = (nodes[a.0].shape[0], nodes[a.0].shape[1], nodes[a.0].shape[2]);
            let mut d = vec![T::ZERO; c * h * w];
            for ch in 0..c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        d[(ch * h + y / 2) * w + x / 2] += gout[(ch * 2 * h + y) * 2 * w + x];
                    }
                }
            }
            accumulate(nodes, *a, &d);
        }
        Op::GlobalAvgPool(a) => {
            let (c, h, w) = (nodes[a.0].shape[0], nodes[a.0].shape[1], nodes[a.0].shape[2]);
            let inv = T::from_f64(1.0 / (h * w) as f64);
            let mut d = vec![T::ZERO; c * h * w];
            for ch in 0..c {
                let g = gout[ch] * inv;
                for v in &mut d[ch * h * w..(ch + 1) * h * w] {
                    *v += g;
                }
            }
            accumulate(nodes, *a, &d);
        }
        Op::Spp { input, argmax, .. } => {
            let mut d = vec![T::ZERO; nodes[input.0].values.len()];
            for (g, &i) in gout.iter().zip(argmax.iter()) {
                d[i] += *g;
            }
            accumulate(nodes, *input, &d);
        }
        Op::NormalizeColumns { input, fallback, .. } => {
            let (r, c) = (nodes[out_idx].shape[0], nodes[out_idx].shape[1]);
            let y = &nodes[out_idx].values;
            let x = &nodes[input.0].values;
            let mut d = vec![T::ZERO; r * c];
            for j in 0..c {
                if fallback[j] {
                    continue;
                }
                let mut s = T::ZERO;
                let mut dot = T::ZERO;
                for i in 0..r {
                    s += x[i * c + j];
                    dot += gout[i * c + j] * y[i * c + j];
                }
                for i in 0..r {
                    d[i * c + j] = (gout[i * c + j] - dot) / s;
                }
            }
            accumulate(nodes, *input, &d);
        }
    }
}
