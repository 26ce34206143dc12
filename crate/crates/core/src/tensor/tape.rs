use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    BiasRelu {
        a: Var,
        bias: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    AddScalar {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Log {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
        axis: usize,
    },
    Max {
        a: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Gather {
        a: Var,
        index: Vec<usize>,
    },
    GatherSub {
        a: Var,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    GroupMax {
        a: Var,
        argmax: Vec<usize>,
    },
    Pick {
        a: Var,
        index: Vec<usize>,
    },
    Normalize {
        a: Var,
        norms: Vec<f64>,
    },
    Dot {
        a: Var,
        b: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LogSoftmax {
        a: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape {
        a: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddRow { .. } => "add_row",
            Op::BiasRelu { .. } => "bias_relu",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Relu { .. } => "relu",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
            Op::Gather { .. } => "gather",
            Op::GatherSub { .. } => "gather_sub",
            Op::GroupMax { .. } => "group_max",
            Op::Pick { .. } => "pick",
            Op::Normalize { .. } => "l2_normalize",
            Op::Dot { .. } => "dot",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records forward operations in execution order so that [`Tape::backward`]
/// can replay them in reverse. Nodes only ever reference earlier nodes, so the
/// insertion order is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with `requires_grad`. Leaves the loss does
    /// not depend on get an all-zero gradient; everything else yields `None`.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn dim_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Dimension { op, detail }
}

/// `c = a·b + beta·c` for strided `m×k` and `k×n` operands; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    /// Records an input tensor. `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::Numeric { op: op.name() });
        }
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(var).dims2().ok_or_else(|| {
            dim_err(
                op,
                format!("expected a matrix, got shape {:?}", self.shape(var)),
            )
        })
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(dim_err(
                op,
                format!("axis {axis} out of range for {:?}", self.shape(a)),
            ));
        }
        Ok(())
    }

    /// Matrix product `a·b` of an `m×k` and a `k×n` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            0.0,
        );
        self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            &[a, b],
        )
    }

    /// Matrix product `a·bᵀ` of an `m×k` and an `n×k` matrix.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (n, k2) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", format!("{m}x{k} times ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (1, k),
            &mut out,
            0.0,
        );
        self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
            &[a, b],
        )
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    fn row_broadcast(&self, a: Var, bias: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let b = self.value(bias).data();
        let x = self.value(a).data();
        let mut data = vec![0.0; x.len()];
        if b.is_empty() {
            return data;
        }
        for (dst, src) in data.chunks_exact_mut(b.len()).zip(x.chunks_exact(b.len())) {
            for ((d, &x), &y) in dst.iter_mut().zip(src).zip(b) {
                *d = f(x, y);
            }
        }
        data
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "add_row")?;
        if self.shape(bias) != [n] {
            return Err(dim_err(
                "add_row",
                format!("bias {:?} for {m}x{n}", self.shape(bias)),
            ));
        }
        let data = self.row_broadcast(a, bias, |x, y| x + y);
        self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::AddRow { a, bias },
            &[a, bias],
        )
    }

    /// `relu(add_row(a, bias))` in one step.
    pub fn bias_relu(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "bias_relu")?;
        if self.shape(bias) != [n] {
            return Err(dim_err(
                "bias_relu",
                format!("bias {:?} for {m}x{n}", self.shape(bias)),
            ));
        }
        let data = self.row_broadcast(a, bias, |x, y| {
            let v = x + y;
            if v > 0.0 {
                v
            } else {
                0.0
            }
        });
        self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::BiasRelu { a, bias },
            &[a, bias],
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.map(a, Op::Scale { a, factor }, |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, value: f64) -> Result<Var> {
        self.map(a, Op::AddScalar { a }, |x| x + value)
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu { a }, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp { a }, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log { a }, f64::ln)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::Usage("mean of an empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "mean")?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_extents(&shape, axis);
        if len == 0 {
            return Err(dim_err("mean", "reduction over an empty axis".into()));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d /= len as f64);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Mean { a, axis },
            &[a],
        )
    }

    /// Max over `axis`, which is removed from the shape. Ties resolve to the
    /// lowest index, and only that element receives gradient.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "max")?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_extents(&shape, axis);
        if len == 0 {
            return Err(dim_err("max", "reduction over an empty axis".into()));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&x[base..base + inner]);
            let dst = &mut out[o * inner..];
            let arg = &mut argmax[o * inner..(o + 1) * inner];
            for l in 1..len {
                let src = &x[base + l * inner..base + (l + 1) * inner];
                for i in 0..inner {
                    if src[i] > dst[i] {
                        dst[i] = src[i];
                        arg[i] = l;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Max { a, axis, argmax },
            &[a],
        )
    }

    /// Selects slices along axis 0: `out[r] = a[index[r]]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some((&rows, rest)) = shape.split_first() else {
            return Err(dim_err("gather", "cannot gather from a scalar".into()));
        };
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(dim_err(
                "gather",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let width: usize = rest.iter().product();
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            data.extend_from_slice(&x[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Gather {
                a,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    /// Row differences of a matrix: `out[r] = a[left[r]] − a[right[r]]`.
    pub fn gather_sub(&mut self, a: Var, left: &[usize], right: &[usize]) -> Result<Var> {
        let (rows, n) = self.matrix_dims(a, "gather_sub")?;
        if left.len() != right.len() {
            return Err(dim_err(
                "gather_sub",
                format!("{} left vs {} right indices", left.len(), right.len()),
            ));
        }
        if let Some(&bad) = left.iter().chain(right).find(|&&i| i >= rows) {
            return Err(dim_err(
                "gather_sub",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(left.len() * n);
        for (&l, &r) in left.iter().zip(right) {
            let (xl, xr) = (&x[l * n..(l + 1) * n], &x[r * n..(r + 1) * n]);
            data.extend(xl.iter().zip(xr).map(|(p, q)| p - q));
        }
        let op = Op::GatherSub {
            a,
            left: left.to_vec(),
            right: right.to_vec(),
        };
        self.push(
            Tensor {
                shape: vec![left.len(), n],
                data,
            },
            op,
            &[a],
        )
    }

    /// Max over consecutive blocks of `group` rows of an `m×n` matrix, giving
    /// an `(m/group)×n` matrix. Ties and gradients as in [`Tape::max_axis`].
    pub fn group_max(&mut self, a: Var, group: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "group_max")?;
        if group == 0 || m % group != 0 {
            return Err(dim_err(
                "group_max",
                format!("{m} rows do not split into groups of {group}"),
            ));
        }
        let x = self.value(a).data();
        let groups = m / group;
        let mut out = Vec::with_capacity(groups * n);
        let mut argmax = vec![0usize; groups * n];
        for o in 0..groups {
            let base = o * group * n;
            out.extend_from_slice(&x[base..base + n]);
            let dst = &mut out[o * n..];
            let arg = &mut argmax[o * n..(o + 1) * n];
            for l in 1..group {
                let src = &x[base + l * n..base + (l + 1) * n];
                for i in 0..n {
                    if src[i] > dst[i] {
                        dst[i] = src[i];
                        arg[i] = l;
                    }
                }
            }
        }
        self.push(
            Tensor {
                shape: vec![groups, n],
                data: out,
            },
            Op::GroupMax { a, argmax },
            &[a],
        )
    }

    /// Picks one column per row of an `m×n` matrix: `out[i] = a[i, index[i]]`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "pick")?;
        if index.len() != m {
            return Err(dim_err(
                "pick",
                format!("{} indices for {m} rows", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&c| c >= n) {
            return Err(dim_err(
                "pick",
                format!("column {bad} out of range for {n} columns"),
            ));
        }
        let x = self.value(a).data();
        let data = index
            .iter()
            .enumerate()
            .map(|(i, &c)| x[i * n + c])
            .collect();
        self.push(
            Tensor {
                shape: vec![m],
                data,
            },
            Op::Pick {
                a,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    /// Scales each row (last axis) to unit Euclidean norm. Zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| dim_err("l2_normalize", "cannot normalize a scalar".into()))?;
        let x = self.value(a).data();
        let mut norms = Vec::with_capacity(x.len() / d.max(1));
        let mut data = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            if norm > 0.0 {
                data.extend(row.iter().map(|v| v / norm));
            } else {
                data.extend(std::iter::repeat_n(0.0, row.len()));
            }
        }
        self.push(Tensor { shape, data }, Op::Normalize { a, norms }, &[a])
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.push(Tensor::scalar(s), Op::Dot { a, b }, &[a, b])
    }

    fn softmax_impl(&self, a: Var, axis: usize) -> Vec<f64> {
        let (outer, len, inner) = axis_extents(self.shape(a), axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        out
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let data = self.softmax_impl(a, axis);
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Softmax { a, axis }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "log_softmax")?;
        let (outer, len, inner) = axis_extents(self.shape(a), axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|l| (x[at(l)] - max).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[at(l)] = x[at(l)] - lse;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor { shape, data: out },
            Op::LogSoftmax { a, axis },
            &[a],
        )
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        self.check_axis(first, axis, "concat")?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(dim_err(
                    "concat",
                    format!("{s:?} vs {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(dim_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let data = self.value(a).data().to_vec();
        self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape { a },
            &[a],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; end];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..end).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let leaf_grad = (node.needs_grad && matches!(node.op, Op::Leaf)).then(|| {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Tensor {
                    shape: node.value.shape.clone(),
                    data,
                }
            });
            out.push(leaf_grad);
        }
        Ok(Gradients { grads: out })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], var: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(var) {
            return None;
        }
        let n = self.value(var).numel();
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = out.shape[1];
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(da) = self.slot(grads, a) {
                    if trans_b {
                        // dA = G·B, B is n×k
                        gemm(m, n, k, g, (n, 1), bv, (k, 1), da, 1.0);
                    } else {
                        // dA = G·Bᵀ, B is k×n
                        gemm(m, n, k, g, (n, 1), bv, (1, n), da, 1.0);
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    if trans_b {
                        // dB = Gᵀ·A, n×k
                        gemm(n, m, k, g, (1, n), av, (k, 1), db, 1.0);
                    } else {
                        // dB = Aᵀ·G, k×n
                        gemm(k, m, n, av, (1, k), g, (n, 1), db, 1.0);
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(d) = self.slot(grads, a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.slot(grads, b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            &Op::Mul { a, b } => {
                for (x, y) in [(a, b), (b, a)] {
                    let yv = self.value(y).data();
                    if let Some(d) = self.slot(grads, x) {
                        d.iter_mut()
                            .zip(g)
                            .zip(yv)
                            .for_each(|((d, g), y)| *d += g * y);
                    }
                }
            }
            &Op::AddRow { a, bias } => {
                if let Some(d) = self.slot(grads, a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                let n = out.shape[1];
                if let Some(d) = self.slot(grads, bias) {
                    for row in g.chunks_exact(n.max(1)) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::BiasRelu { a, bias } => {
                let n = out.shape[1];
                let masked: Vec<f64> = g
                    .iter()
                    .zip(&out.data)
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                if let Some(d) = self.slot(grads, a) {
                    d.iter_mut().zip(&masked).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.slot(grads, bias) {
                    for row in masked.chunks_exact(n.max(1)) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if let Some(d) = self.slot(grads, a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor);
                }
            }
            &Op::AddScalar { a } | &Op::Reshape { a } => {
                if let Some(d) = self.slot(grads, a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            &Op::Relu { a } => {
                let x = self.value(a).data();
                if let Some(d) = self.slot(grads, a) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Exp { a } => {
                if let Some(d) = self.slot(grads, a) {
                    d.iter_mut()
                        .zip(g)
                        .zip(&out.data)
                        .for_each(|((d, g), y)| *d += g * y);
                }
            }
            &Op::Log { a } => {
                let x = self.value(a).data();
                if let Some(d) = self.slot(grads, a) {
                    d.iter_mut()
                        .zip(g)
                        .zip(x)
                        .for_each(|((d, g), x)| *d += g / x);
                }
            }
            &Op::Sum { a } => {
                if let Some(d) = self.slot(grads, a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { a, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(a), axis);
                if let Some(d) = self.slot(grads, a) {
                    let w = 1.0 / len as f64;
                    for o in 0..outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut().zip(go).for_each(|(d, g)| *d += g * w);
                        }
                    }
                }
            }
            Op::Max { a, axis, argmax } => {
                let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                if let Some(d) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let l = argmax[o * inner + i];
                            d[(o * len + l) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::Gather { a, index } => {
                let width = out.numel() / index.len().max(1);
                if let Some(d) = self.slot(grads, *a) {
                    for (r, &i) in index.iter().enumerate() {
                        let dst = &mut d[i * width..(i + 1) * width];
                        dst.iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::GatherSub { a, left, right } => {
                let n = out.shape[1];
                if let Some(d) = self.slot(grads, *a) {
                    for (r, (&l, &q)) in left.iter().zip(right).enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        d[l * n..(l + 1) * n]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, g)| *d += g);
                        d[q * n..(q + 1) * n]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, g)| *d -= g);
                    }
                }
            }
            Op::GroupMax { a, argmax } => {
                let n = out.shape[1];
                let group = self.shape(*a)[0] / out.shape[0].max(1);
                if let Some(d) = self.slot(grads, *a) {
                    for (j, &l) in argmax.iter().enumerate() {
                        let (o, i) = (j / n, j % n);
                        d[(o * group + l) * n + i] += g[j];
                    }
                }
            }
            Op::Pick { a, index } => {
                let n = self.shape(*a)[1];
                if let Some(d) = self.slot(grads, *a) {
                    for (i, &c) in index.iter().enumerate() {
                        d[i * n + c] += g[i];
                    }
                }
            }
            Op::Normalize { a, norms } => {
                let dim = out.shape.last().copied().unwrap_or(1).max(1);
                if let Some(d) = self.slot(grads, *a) {
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm == 0.0 {
                            continue;
                        }
                        let span = r * dim..(r + 1) * dim;
                        let y = &out.data[span.clone()];
                        let gr = &g[span.clone()];
                        let proj: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, y), g) in d[span].iter_mut().zip(y).zip(gr) {
                            *d += (g - y * proj) / norm;
                        }
                    }
                }
            }
            &Op::Dot { a, b } => {
                for (x, y) in [(a, b), (b, a)] {
                    let yv = self.value(y).data();
                    if let Some(d) = self.slot(grads, x) {
                        d.iter_mut().zip(yv).for_each(|(d, y)| *d += g[0] * y);
                    }
                }
            }
            &Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_extents(&out.shape, axis);
                let y = &out.data;
                if let Some(d) = self.slot(grads, a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let s: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                d[at(l)] += y[at(l)] * (g[at(l)] - s);
                            }
                        }
                    }
                }
            }
            &Op::LogSoftmax { a, axis } => {
                let (outer, len, inner) = axis_extents(&out.shape, axis);
                let y = &out.data;
                if let Some(d) = self.slot(grads, a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let s: f64 = (0..len).map(|l| g[at(l)]).sum();
                            for l in 0..len {
                                d[at(l)] += g[at(l)] - y[at(l)].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_extents(&out.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(d) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += len;
                }
            }
        }
    }
}
