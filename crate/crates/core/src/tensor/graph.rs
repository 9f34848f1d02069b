use super::{ParamId, ParamSet, Tensor};
use crate::error::{check_finite, shape_err, Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Concat(Vec<Var>),
    Mean(Var),
    SquaredError(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Silu(_) => "silu",
            Op::Concat(_) => "concat",
            Op::Mean(_) => "mean",
            Op::SquaredError(..) => "squared_error",
        }
    }
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// A single-use tape of 2-D operations.
///
/// Every op validates shapes and rejects non-finite outputs. `backward` walks the
/// tape once, accumulates parameter gradients into the supplied [`ParamSet`], and
/// frees the tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of [`Graph::input`] leaves returned by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct InputGrads {
    grads: Vec<(Var, Vec<f64>)>,
}

impl InputGrads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads
            .iter()
            .find(|(var, _)| *var == v)
            .map(|(_, g)| g.as_slice())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// c (m x n) = alpha * op(a) * op(b) + beta * c with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers whose extents cover the strided m x k, k x n
    // and m x n views; all strides are derived from those dims.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::MissingTape);
        }
        debug_assert_eq!(rows * cols, value.len());
        check_finite(op.name(), &value)?;
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::NonScalarOutput(vec![n.rows, n.cols]));
        }
        Ok(n.value[0])
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor> {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone())
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(shape_err(
                "constant",
                format!("{rows}x{cols} with {} values", values.len()),
            ));
        }
        self.push(rows, cols, values, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(shape_err(
                "input",
                format!("{rows}x{cols} with {} values", values.len()),
            ));
        }
        self.push(rows, cols, values, Op::Input, true)
    }

    /// A trainable leaf bound to `params[id]`.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<Var> {
        let t = params.get(id);
        let (rows, cols) = t.as_matrix_dims()?;
        let trainable = t.requires_grad();
        let op = if trainable { Op::Param(id) } else { Op::Constant };
        self.push(rows, cols, t.values().to_vec(), op, trainable)
    }

    /// The parameter's current value as a constant (no gradient path).
    pub fn frozen(&mut self, params: &ParamSet, id: ParamId) -> Result<Var> {
        let t = params.get(id);
        let (rows, cols) = t.as_matrix_dims()?;
        self.push(rows, cols, t.values().to_vec(), Op::Constant, false)
    }

    /// A constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let n = self.node(v);
        let (r, c, val) = (n.rows, n.cols, n.value.clone());
        self.push(r, c, val, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            0.0,
            &mut out,
        );
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(m, n, out, Op::MatMul(a, b), ng)
    }

    /// Adds a 1 x cols row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (r1, n2) = self.dims(row);
        if r1 != 1 || n != n2 {
            return Err(shape_err("add_row", format!("[{m}, {n}] + [{r1}, {n2}]")));
        }
        let bias = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .chunks_exact(n)
            .flat_map(|r| r.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        let ng = self.node(a).needs_grad || self.node(row).needs_grad;
        self.push(m, n, out, Op::AddRow(a, row), ng)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(shape_err(name, format!("{da:?} vs {db:?}")));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(da.0, da.1, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise (a - b)^2.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "squared_error",
            a,
            b,
            |x, y| (x - y) * (x - y),
            Op::SquaredError(a, b),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (m, n) = self.dims(a);
        let out = self.value(a).iter().map(|x| c * x).collect();
        let ng = self.node(a).needs_grad;
        self.push(m, n, out, Op::Scale(a, c), ng)
    }

    /// x * sigmoid(x)
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let ng = self.node(a).needs_grad;
        self.push(m, n, out, Op::Silu(a), ng)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat", "no inputs"));
        };
        let rows = self.dims(first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                let shapes: Vec<_> = parts.iter().map(|&p| self.dims(p)).collect();
                return Err(shape_err("concat", format!("row counts differ: {shapes:?}")));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.node(p).needs_grad);
        self.push(rows, cols, out, Op::Concat(parts.to_vec()), ng)
    }

    /// Mean over all elements, as a 1 x 1 node.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.node(a).needs_grad;
        self.push(1, 1, vec![m], Op::Mean(a), ng)
    }

    /// Reverse pass from the scalar `output`.
    ///
    /// Parameter gradients are added to `params` (accumulating across calls);
    /// gradients of [`Graph::input`] leaves are returned. The tape is freed, so a
    /// second call fails with [`Error::MissingTape`].
    pub fn backward(&mut self, output: Var, params: &mut ParamSet) -> Result<InputGrads> {
        if self.consumed {
            return Err(Error::MissingTape);
        }
        let out = self.node(output);
        if out.value.len() != 1 {
            return Err(Error::NonScalarOutput(vec![out.rows, out.cols]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        let mut inputs = InputGrads::default();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Input => inputs.grads.push((Var(idx), g)),
                Op::Param(id) => {
                    let t = &mut params.tensors_mut()[id.0];
                    if t.len() != g.len() {
                        return Err(shape_err(
                            "backward",
                            format!("param {} size {} vs grad {}", id.0, t.len(), g.len()),
                        ));
                    }
                    t.accumulate_grad(&g)?;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = self.nodes[b.0].cols;
                    if self.nodes[a.0].needs_grad {
                        // dA = dC * B^T
                        let buf = grad_buf(&mut grads, *a, m * k);
                        gemm(m, n, k, &g, n as isize, 1, &self.nodes[b.0].value, 1, n as isize, 1.0, buf);
                    }
                    if self.nodes[b.0].needs_grad {
                        // dB = A^T * dC
                        let buf = grad_buf(&mut grads, *b, k * n);
                        gemm(k, m, n, &self.nodes[a.0].value, 1, k as isize, &g, n as isize, 1, 1.0, buf);
                    }
                }
                Op::AddRow(a, row) => {
                    let n = node.cols;
                    if self.nodes[a.0].needs_grad {
                        add_into(grad_buf(&mut grads, *a, g.len()), &g);
                    }
                    if self.nodes[row.0].needs_grad {
                        let buf = grad_buf(&mut grads, *row, n);
                        for r in g.chunks_exact(n) {
                            add_into(buf, r);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        add_into(grad_buf(&mut grads, *a, g.len()), &g);
                    }
                    if self.nodes[b.0].needs_grad {
                        add_into(grad_buf(&mut grads, *b, g.len()), &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        add_into(grad_buf(&mut grads, *a, g.len()), &g);
                    }
                    if self.nodes[b.0].needs_grad {
                        let buf = grad_buf(&mut grads, *b, g.len());
                        buf.iter_mut().zip(&g).for_each(|(d, x)| *d -= x);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let bv = &self.nodes[b.0].value;
                        let buf = grad_buf(&mut grads, *a, g.len());
                        for ((d, x), y) in buf.iter_mut().zip(&g).zip(bv) {
                            *d += x * y;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let av = &self.nodes[a.0].value;
                        let buf = grad_buf(&mut grads, *b, g.len());
                        for ((d, x), y) in buf.iter_mut().zip(&g).zip(av) {
                            *d += x * y;
                        }
                    }
                }
                Op::SquaredError(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let diff: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(x, (p, q))| 2.0 * x * (p - q))
                        .collect();
                    if self.nodes[a.0].needs_grad {
                        add_into(grad_buf(&mut grads, *a, g.len()), &diff);
                    }
                    if self.nodes[b.0].needs_grad {
                        let buf = grad_buf(&mut grads, *b, g.len());
                        buf.iter_mut().zip(&diff).for_each(|(d, x)| *d -= x);
                    }
                }
                Op::Scale(a, c) => {
                    let buf = grad_buf(&mut grads, *a, g.len());
                    buf.iter_mut().zip(&g).for_each(|(d, x)| *d += c * x);
                }
                Op::Silu(a) => {
                    let av = &self.nodes[a.0].value;
                    let buf = grad_buf(&mut grads, *a, g.len());
                    for ((d, x), &z) in buf.iter_mut().zip(&g).zip(av) {
                        let s = sigmoid(z);
                        *d += x * s * (1.0 + z * (1.0 - s));
                    }
                }
                Op::Concat(parts) => {
                    let rows = node.rows;
                    let total = node.cols;
                    let mut offset = 0;
                    for p in parts {
                        let c = self.nodes[p.0].cols;
                        if self.nodes[p.0].needs_grad {
                            let buf = grad_buf(&mut grads, *p, rows * c);
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + c];
                                add_into(&mut buf[r * c..(r + 1) * c], src);
                            }
                        }
                        offset += c;
                    }
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len();
                    let share = g[0] / n as f64;
                    grad_buf(&mut grads, *a, n).iter_mut().for_each(|d| *d += share);
                }
            }
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(inputs)
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> (ParamSet, ParamId) {
        let mut p = ParamSet::new();
        let id = p.insert("w", Tensor::matrix(1, 1, vec![v]).unwrap()).unwrap();
        (p, id)
    }

    #[test]
    fn matmul_small() {
        let mut g = Graph::new();
        let a = g.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let b = g.constant(2, 1, vec![3.0, 4.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(2, 2, vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let z = g.constant(2, 2, vec![0.0; 4]).unwrap();
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn mean_squared_error_of_identical_inputs_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(2, 3, vec![0.1, 0.2, 0.3, -1.0, 2.0, 7.0]).unwrap();
        let se = g.squared_error(a, a).unwrap();
        let m = g.mean(se).unwrap();
        assert_eq!(g.scalar(m).unwrap(), 0.0);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::new();
        let a = g.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let b = g.constant(3, 1, vec![1.0; 3]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[1, 2]") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn non_finite_intermediate_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(1, 1, vec![1e300]).unwrap();
        let err = g.mul(a, a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref op } if op == "mul"));
    }

    #[test]
    fn grad_of_mean_square_product() {
        // mean((w x)^2) with w = 2, x = 3: d/dw = 2 w x^2 = 36
        let (mut p, id) = scalar_param(2.0);
        let mut g = Graph::new();
        let w = g.param(&p, id).unwrap();
        let x = g.constant(1, 1, vec![3.0]).unwrap();
        let wx = g.matmul(x, w).unwrap();
        let sq = g.mul(wx, wx).unwrap();
        let out = g.mean(sq).unwrap();
        g.backward(out, &mut p).unwrap();
        assert_eq!(p.get(id).grad().unwrap(), &[36.0]);
    }

    #[test]
    fn constant_output_has_zero_grad() {
        let (mut p, id) = scalar_param(2.0);
        let mut g = Graph::new();
        let w = g.param(&p, id).unwrap();
        let zero = g.scale(w, 0.0).unwrap();
        let c = g.constant(1, 1, vec![4.0]).unwrap();
        let y = g.add(zero, c).unwrap();
        let out = g.mean(y).unwrap();
        g.backward(out, &mut p).unwrap();
        assert_eq!(p.get(id).grad().unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let (mut p, id) = scalar_param(1.0);
        let mut g = Graph::new();
        let w = g.param(&p, id).unwrap();
        let c = g.constant(1, 2, vec![1.0, 1.0]).unwrap();
        let y = g.matmul(w, c).unwrap();
        assert!(matches!(g.backward(y, &mut p), Err(Error::NonScalarOutput(_))));
        let m = g.mean(y).unwrap();
        g.backward(m, &mut p).unwrap();
        assert!(matches!(g.backward(m, &mut p), Err(Error::MissingTape)));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let (mut p, id) = scalar_param(3.0);
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&p, id).unwrap();
            let y = g.scale(w, 2.0).unwrap();
            let out = g.mean(y).unwrap();
            g.backward(out, &mut p).unwrap();
        }
        assert_eq!(p.get(id).grad().unwrap(), &[4.0]);
    }

    #[test]
    fn input_grads_are_reported() {
        let mut p = ParamSet::new();
        let mut g = Graph::new();
        let x = g.input(1, 2, vec![1.0, -2.0]).unwrap();
        let y = g.mul(x, x).unwrap();
        let out = g.mean(y).unwrap();
        let grads = g.backward(out, &mut p).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, -2.0]);
    }
}
